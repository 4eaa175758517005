//! SGD and Adam parameter updates.
//!
//! An [`Optimizer`] owns whatever per-parameter state its rule needs (Adam's
//! moment buffers and step counter); the parameters themselves live in plain
//! buffers owned by the caller. One `step` call consumes one gradient set.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        /// Step counter, strictly increasing; bias correction uses t+1.
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    /// Adam with the standard beta1=0.9, beta2=0.999, eps=1e-8.
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }

    /// Apply one update: `params[i] -= lr * (...)` for every buffer.
    /// Buffer count and shapes are fixed at the first call.
    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                context: "optimizer step".into(),
                expected: format!("{} gradient buffers", params.len()),
                got: format!("{}", grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    context: format!("optimizer step buffer {i}"),
                    expected: format!("{}", p.len()),
                    got: format!("{}", g.len()),
                });
            }
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.iter_mut().zip(g) {
                        *pv -= *lr * gv;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                if m.is_empty() {
                    *m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    *v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                } else if m.len() != grads.len() {
                    return Err(Error::Dimension {
                        context: "adam moments".into(),
                        expected: format!("{}", m.len()),
                        got: format!("{}", grads.len()),
                    });
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for ((p, g), (mi, vi)) in params.iter_mut().zip(grads).zip(m.iter_mut().zip(v.iter_mut())) {
                    for idx in 0..g.len() {
                        mi[idx] = *beta1 * mi[idx] + (1.0 - *beta1) * g[idx];
                        vi[idx] = *beta2 * vi[idx] + (1.0 - *beta2) * g[idx] * g[idx];
                        let m_hat = mi[idx] / bc1;
                        let v_hat = vi[idx] / bc2;
                        p[idx] -= *lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}
