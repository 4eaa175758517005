//! Transition batches and their line-delimited text format.
//!
//! A dataset file is one header line followed by one transition per line:
//!
//! ```text
//! # moose-dataset v1 env=<name> noise=<f> goal=<f>,<f> episode_len=<n>
//!   reset_half_width=<f> state_dim=<n> action_dim=<n> tier=<tier>
//!   epsilon=<f> steps=<n> seed=<n>                      (single line)
//! episode,t,s...,a...,r,s_next...                       (flat record)
//! ```
//!
//! Column order: episode index, step index, the state, the action, the
//! reward, the next state. Every float is serialized with 17 significant
//! digits so files round-trip exactly and reruns are byte-identical.

use crate::behavior::Tier;
use crate::env::{EnvKind, EnvSpec};
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// One `(s, a, r, s', episode, t)` record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub episode: usize,
    pub t: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
}

/// Generation parameters carried in the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub env: EnvSpec,
    pub tier: Tier,
    pub epsilon: f64,
    pub n_steps: usize,
    pub seed: u64,
}

/// A full batch plus the parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

/// 17-significant-digit float encoding used throughout the file.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn n_episodes(&self) -> usize {
        self.transitions
            .iter()
            .map(|tr| tr.episode + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn mean_reward(&self) -> f64 {
        if self.transitions.is_empty() {
            return 0.0;
        }
        self.transitions.iter().map(|tr| tr.r).sum::<f64>() / self.transitions.len() as f64
    }

    /// Mean over episodes of the undiscounted reward sum; the batch baseline
    /// that trained policies are compared against.
    pub fn mean_episode_return(&self) -> f64 {
        let n_ep = self.n_episodes();
        if n_ep == 0 {
            return 0.0;
        }
        let mut sums = vec![0.0; n_ep];
        for tr in &self.transitions {
            sums[tr.episode] += tr.r;
        }
        sums.iter().sum::<f64>() / n_ep as f64
    }

    /// Per-dimension min/max over all states (both s and s').
    pub fn state_ranges(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.header.env.state_dim;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for tr in &self.transitions {
            for states in [&tr.s, &tr.s_next] {
                for (d, &x) in states.iter().enumerate() {
                    lo[d] = lo[d].min(x);
                    hi[d] = hi[d].max(x);
                }
            }
        }
        (lo, hi)
    }

    /// Transition indices split into a leading train part and a trailing
    /// held-out part by episode: the last `ceil(frac * episodes)` episodes
    /// are held out whole, so no episode straddles the split.
    pub fn split_tail_episodes(&self, frac: f64) -> (Vec<usize>, Vec<usize>) {
        let n_ep = self.n_episodes();
        let held_eps = ((frac * n_ep as f64).ceil() as usize).min(n_ep);
        let first_held = n_ep - held_eps;
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, tr) in self.transitions.iter().enumerate() {
            if tr.episode < first_held {
                train.push(i);
            } else {
                held.push(i);
            }
        }
        (train, held)
    }

    // ── file format ──────────────────────────────────────────────────

    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# moose-dataset v1 env={} noise={} goal={},{} episode_len={} reset_half_width={} state_dim={} action_dim={} tier={} epsilon={} steps={} seed={}",
            h.env.kind.name(),
            fmt_f64(h.env.noise),
            fmt_f64(h.env.goal[0]),
            fmt_f64(h.env.goal[1]),
            h.env.episode_len,
            fmt_f64(h.env.reset_half_width),
            h.env.state_dim,
            h.env.action_dim,
            h.tier.name(),
            fmt_f64(h.epsilon),
            h.n_steps,
            h.seed,
        );
        for tr in &self.transitions {
            let mut fields = Vec::with_capacity(3 + tr.s.len() * 2 + tr.a.len());
            fields.push(tr.episode.to_string());
            fields.push(tr.t.to_string());
            fields.extend(tr.s.iter().map(|&x| fmt_f64(x)));
            fields.extend(tr.a.iter().map(|&x| fmt_f64(x)));
            fields.push(fmt_f64(tr.r));
            fields.extend(tr.s_next.iter().map(|&x| fmt_f64(x)));
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty file"))?;
        let header = parse_header(header_line, path)?;
        let dim_s = header.env.state_dim;
        let dim_a = header.env.action_dim;
        let want = 2 + dim_s + dim_a + 1 + dim_s;

        let mut transitions = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != want {
                return Err(Error::format(
                    path,
                    format!(
                        "line {}: {} fields, expected {}",
                        lineno + 2,
                        fields.len(),
                        want
                    ),
                ));
            }
            let mut it = fields.iter();
            let episode = parse_usize(it.next().unwrap(), path, lineno)?;
            let t = parse_usize(it.next().unwrap(), path, lineno)?;
            let mut take_f = |n: usize| -> Result<Vec<f64>> {
                (0..n)
                    .map(|_| parse_f64(it.next().unwrap(), path, lineno))
                    .collect()
            };
            let s = take_f(dim_s)?;
            let a = take_f(dim_a)?;
            let r = take_f(1)?[0];
            let s_next = take_f(dim_s)?;
            for &x in s.iter().chain(&a).chain(&s_next).chain(std::iter::once(&r)) {
                if !x.is_finite() {
                    return Err(Error::format(
                        path,
                        format!("line {}: non-finite value", lineno + 2),
                    ));
                }
            }
            if t >= header.env.episode_len {
                return Err(Error::format(
                    path,
                    format!("line {}: step index {t} >= episode length", lineno + 2),
                ));
            }
            transitions.push(Transition {
                episode,
                t,
                s,
                a,
                r,
                s_next,
            });
        }
        Ok(Dataset {
            header,
            transitions,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn parse_usize(s: &str, path: &Path, lineno: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::format(path, format!("line {}: bad integer '{s}'", lineno + 2)))
}

fn parse_f64(s: &str, path: &Path, lineno: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::format(path, format!("line {}: bad float '{s}'", lineno + 2)))
}

fn parse_header(line: &str, path: &Path) -> Result<DatasetHeader> {
    let rest = line
        .strip_prefix("# moose-dataset v1 ")
        .ok_or_else(|| Error::format(path, "missing 'moose-dataset v1' header"))?;
    let mut kv = std::collections::BTreeMap::new();
    for token in rest.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad header token '{token}'")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::format(path, format!("header missing '{k}'")))
    };
    let kind = EnvKind::parse(&get("env")?)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let f = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(path, format!("bad float in header field '{k}'")))
    };
    let n = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(path, format!("bad integer in header field '{k}'")))
    };
    let goal_raw = get("goal")?;
    let env = EnvSpec {
        kind,
        state_dim: n("state_dim")?,
        action_dim: n("action_dim")?,
        noise: f("noise")?,
        goal: [goal_part(&goal_raw, 0, path)?, goal_part(&goal_raw, 1, path)?],
        episode_len: n("episode_len")?,
        reset_half_width: f("reset_half_width")?,
    };
    let tier = Tier::parse(&get("tier")?).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(DatasetHeader {
        env,
        tier,
        epsilon: f("epsilon")?,
        n_steps: n("steps")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::format(path, "bad integer in header field 'seed'"))?,
    })
}

fn goal_part(s: &str, idx: usize, path: &Path) -> Result<f64> {
    s.split(',')
        .nth(idx)
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| Error::format(path, format!("bad goal '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Dataset {
        let env = EnvSpec::point_mass();
        let mk = |episode: usize, t: usize, x: f64, r: f64| Transition {
            episode,
            t,
            s: vec![x, 0.1, -0.2, 0.3],
            a: vec![0.5, -0.5],
            r,
            s_next: vec![x + 0.01, 0.1, -0.2, 0.3],
        };
        Dataset {
            header: DatasetHeader {
                env,
                tier: Tier::Mediocre,
                epsilon: 0.4,
                n_steps: 4,
                seed: 7,
            },
            transitions: vec![
                mk(0, 0, 0.125, -1.0),
                mk(0, 1, 0.25, -0.5),
                mk(1, 0, -0.333333333333333314, -2.0),
                mk(1, 1, 1.0 / 3.0, -0.25),
            ],
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let ds = toy_dataset();
        let text = ds.to_text();
        let back = Dataset::from_text(&text, Path::new("mem")).unwrap();
        assert_eq!(ds, back);
        // And the re-serialization is byte-identical.
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn episode_statistics() {
        let ds = toy_dataset();
        assert_eq!(ds.n_episodes(), 2);
        assert!((ds.mean_reward() - (-3.75 / 4.0)).abs() < 1e-15);
        // Episode returns: -1.5 and -2.25; mean -1.875.
        assert!((ds.mean_episode_return() - -1.875).abs() < 1e-15);
    }

    #[test]
    fn tail_split_keeps_episodes_whole() {
        let ds = toy_dataset();
        let (train, held) = ds.split_tail_episodes(0.5);
        assert_eq!(train, vec![0, 1]);
        assert_eq!(held, vec![2, 3]);
        let episodes_in_held: Vec<usize> =
            held.iter().map(|&i| ds.transitions[i].episode).collect();
        assert!(episodes_in_held.iter().all(|&e| e == 1));
    }

    #[test]
    fn state_ranges_cover_next_states() {
        let ds = toy_dataset();
        let (lo, hi) = ds.state_ranges();
        assert!(lo[0] <= -0.333333333333333314);
        assert!(hi[0] >= 1.0 / 3.0 + 0.01 - 1e-12);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let ds = toy_dataset();
        let mut text = ds.to_text();
        text.push_str("1,2,3\n");
        let err = Dataset::from_text(&text, Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
