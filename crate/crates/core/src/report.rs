//! Report generation from curve files.
//!
//! Reads the `curve_{tier}_{eps}_{alg}.csv` files a grid (or repeated `eval`
//! calls) produced, recomputes the robust-percentile summary table, and
//! renders mean +- one-standard-deviation training-curve charts as plain SVG
//! text. Curve files whose seeds disagree on iteration count produce a
//! warning and are skipped. Summary rows are sorted by (tier, epsilon,
//! algorithm name).

use crate::behavior::Tier;
use crate::eval::{robust_percentile, PerfMatrix};
use crate::grid::Algorithm;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// One parsed curve file.
#[derive(Debug, Clone)]
pub struct CurveFile {
    pub tier: Tier,
    pub epsilon: f64,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub perf: PerfMatrix,
}

/// Parse `seed,iteration,true_return` rows into per-seed series.
pub fn parse_curve_csv(text: &str, path: &Path) -> Result<(Vec<u64>, PerfMatrix)> {
    let mut seeds: Vec<u64> = Vec::new();
    let mut series: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "seed,iteration,true_return" {
                return Err(Error::format(path, "bad curve header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (s, i, r) = (parts.next(), parts.next(), parts.next());
        let (Some(s), Some(i), Some(r), None) = (s, i, r, parts.next()) else {
            return Err(Error::format(path, format!("line {}: bad row", lineno + 1)));
        };
        let seed: u64 = s
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad seed", lineno + 1)))?;
        let iter: usize = i
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad iteration", lineno + 1)))?;
        let ret: f64 = r
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad return", lineno + 1)))?;
        if seeds.last() != Some(&seed) {
            seeds.push(seed);
            series.push(Vec::new());
        }
        let row = series.last_mut().unwrap();
        if iter != row.len() {
            return Err(Error::format(
                path,
                format!("line {}: iterations out of order", lineno + 1),
            ));
        }
        row.push(ret);
    }
    let perf = PerfMatrix::new(series)?;
    Ok((seeds, perf))
}

fn parse_curve_name(name: &str) -> Option<(Tier, f64, Algorithm)> {
    let stem = name.strip_prefix("curve_")?.strip_suffix(".csv")?;
    let mut parts = stem.splitn(3, '_');
    let tier = Tier::parse(parts.next()?).ok()?;
    let eps: f64 = parts.next()?.parse().ok()?;
    let alg = Algorithm::parse(parts.next()?).ok()?;
    Some((tier, eps, alg))
}

/// Read every recognizable curve file in a directory. Unparseable or ragged
/// files become warnings, not errors.
pub fn read_curves_dir(dir: &Path) -> Result<(Vec<CurveFile>, Vec<String>)> {
    let mut files: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(name) = entry.file_name().to_str() {
            if name.starts_with("curve_") && name.ends_with(".csv") {
                files.push(name.to_string());
            }
        }
    }
    files.sort();

    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    for name in files {
        let Some((tier, epsilon, algorithm)) = parse_curve_name(&name) else {
            warnings.push(format!("{name}: unrecognized curve file name, skipped"));
            continue;
        };
        let path = dir.join(&name);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        match parse_curve_csv(&text, &path) {
            Ok((seeds, perf)) => curves.push(CurveFile {
                tier,
                epsilon,
                algorithm,
                seeds,
                perf,
            }),
            Err(e) => warnings.push(format!("{name}: {e}; cell skipped")),
        }
    }
    Ok((curves, warnings))
}

/// The summary table as CSV, recomputed from the curves with the same
/// percentile rule the grid uses.
pub fn summary_csv_from_curves(curves: &[CurveFile]) -> Result<String> {
    let mut rows: Vec<&CurveFile> = curves.iter().collect();
    rows.sort_by(|a, b| {
        (a.tier, a.epsilon, a.algorithm.name())
            .partial_cmp(&(b.tier, b.epsilon, b.algorithm.name()))
            .unwrap()
    });
    let mut out = String::from("tier,epsilon,algorithm,percentile10,stderr,n_pooled\n");
    for c in rows {
        let s = robust_percentile(&c.perf, 0.10, 0.10)?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            c.tier.name(),
            c.epsilon,
            c.algorithm.name(),
            s.percentile,
            s.std_err,
            s.n_pooled
        );
    }
    Ok(out)
}

/// Per-iteration mean and standard deviation across seeds.
pub fn mean_std_bands(perf: &PerfMatrix) -> (Vec<f64>, Vec<f64>) {
    let iters = perf.n_iterations();
    let n = perf.n_seeds() as f64;
    let mut mean = vec![0.0; iters];
    let mut std = vec![0.0; iters];
    for row in &perf.rows {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    if perf.n_seeds() > 1 {
        for row in &perf.rows {
            for i in 0..iters {
                let d = row[i] - mean[i];
                std[i] += d * d;
            }
        }
        for s in &mut std {
            *s = (*s / (n - 1.0)).sqrt();
        }
    }
    (mean, std)
}

const CHART_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Render one (tier, epsilon) cell's training curves as an SVG line chart:
/// per algorithm a mean line and a translucent +-1 std band.
pub fn chart_svg(title: &str, curves: &[&CurveFile]) -> String {
    let (width, height) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 40.0);
    let plot_w = width - ml - mr;
    let plot_h = height - mt - mb;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut max_iter = 1usize;
    let bands: Vec<(Vec<f64>, Vec<f64>)> = curves.iter().map(|c| mean_std_bands(&c.perf)).collect();
    for (mean, std) in &bands {
        max_iter = max_iter.max(mean.len());
        for (m, s) in mean.iter().zip(std) {
            lo = lo.min(m - s);
            hi = hi.max(m + s);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-9 {
        hi += 0.5;
        lo -= 0.5;
    }
    let x_of = |i: usize| ml + plot_w * i as f64 / (max_iter.max(2) - 1) as f64;
    let y_of = |v: f64| mt + plot_h * (1.0 - (v - lo) / (hi - lo));
    let fmt = |v: f64| format!("{v:.2}");

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        width / 2.0
    );
    // axes
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    );
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        mt + plot_h
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">iteration</text>"#,
        ml + plot_w / 2.0,
        height - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{}</text>"#,
        ml - 6.0,
        mt + 4.0,
        fmt(hi)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{}</text>"#,
        ml - 6.0,
        mt + plot_h + 4.0,
        fmt(lo)
    );

    for (ci, (curve, (mean, std))) in curves.iter().zip(&bands).enumerate() {
        let color = CHART_COLORS[ci % CHART_COLORS.len()];
        // band polygon: upper edge left-to-right, lower edge back.
        let mut pts = String::new();
        for (i, (m, sd)) in mean.iter().zip(std).enumerate() {
            let _ = write!(pts, "{},{} ", fmt(x_of(i)), fmt(y_of(m + sd)));
        }
        for (i, (m, sd)) in mean.iter().zip(std).enumerate().rev() {
            let _ = write!(pts, "{},{} ", fmt(x_of(i)), fmt(y_of(m - sd)));
        }
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            pts.trim_end()
        );
        let mut line = String::new();
        for (i, m) in mean.iter().enumerate() {
            let _ = write!(line, "{},{} ", fmt(x_of(i)), fmt(y_of(*m)));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.trim_end()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            ml + plot_w - 90.0,
            mt + 16.0 * (ci as f64 + 1.0),
            curve.algorithm.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `summary.csv` (and optionally one chart per (tier, epsilon) cell)
/// from a directory of curve files. Returns the warnings produced.
pub fn write_report(
    curves_dir: &Path,
    summary_out: &Path,
    charts_dir: Option<&Path>,
) -> Result<Vec<String>> {
    let (curves, mut warnings) = read_curves_dir(curves_dir)?;
    if curves.is_empty() {
        warnings.push("no curve files found; writing an empty table".into());
    }
    let summary = summary_csv_from_curves(&curves)?;
    if let Some(parent) = summary_out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(summary_out, summary).map_err(|e| Error::io(summary_out, e))?;

    if let Some(dir) = charts_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut cells: BTreeMap<(String, String), Vec<&CurveFile>> = BTreeMap::new();
        for c in &curves {
            cells
                .entry((c.tier.name().to_string(), c.epsilon.to_string()))
                .or_default()
                .push(c);
        }
        for ((tier, eps), mut group) in cells {
            group.sort_by_key(|c| c.algorithm.name());
            let title = format!("{tier} tier, epsilon {eps}");
            let svg = chart_svg(&title, &group);
            let p = dir.join(format!("chart_{tier}_{eps}.svg"));
            std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_csv_round_trips_through_the_parser() {
        let perf = PerfMatrix::new(vec![vec![1.5, 2.5, 3.5], vec![-1.0, 0.0, 1.0]]).unwrap();
        let text = crate::grid::curve_csv(&[10, 11], &perf);
        let (seeds, back) = parse_curve_csv(&text, Path::new("mem")).unwrap();
        assert_eq!(seeds, vec![10, 11]);
        assert_eq!(back, perf);
    }

    #[test]
    fn constant_identical_seeds_have_zero_band() {
        let perf = PerfMatrix::new(vec![vec![2.0; 12], vec![2.0; 12]]).unwrap();
        let (mean, std) = mean_std_bands(&perf);
        assert!(mean.iter().all(|&m| m == 2.0));
        assert!(std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn ragged_curve_files_are_skipped_with_a_warning() {
        let dir = std::env::temp_dir().join("moose-report-test-a");
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("curve_mediocre_0.2_bc.csv"),
            "seed,iteration,true_return\n0,0,1.0\n0,1,2.0\n1,0,3.0\n",
        )
        .unwrap();
        let (curves, warnings) = read_curves_dir(&dir).unwrap();
        assert!(curves.is_empty());
        assert_eq!(warnings.len(), 1, "{warnings:?}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_directory_gives_empty_table() {
        let dir = std::env::temp_dir().join("moose-report-test-b");
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        let out = dir.join("summary.csv");
        let warnings = write_report(&dir, &out, None).unwrap();
        assert!(!warnings.is_empty());
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text, "tier,epsilon,algorithm,percentile10,stderr,n_pooled\n");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn chart_contains_band_and_line() {
        let perf = PerfMatrix::new(vec![vec![1.0; 12], vec![3.0; 12]]).unwrap();
        let cf = CurveFile {
            tier: Tier::Mediocre,
            epsilon: 0.2,
            algorithm: Algorithm::Moose,
            seeds: vec![0, 1],
            perf,
        };
        let svg = chart_svg("test", &[&cf]);
        assert!(svg.contains("<polygon"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("moose"));
    }
}
