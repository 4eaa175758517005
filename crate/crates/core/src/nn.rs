//! Weight-normalized multilayer perceptrons.
//!
//! Each layer stores a direction matrix `v` (one row per output unit), a
//! scale vector `g`, and a bias `b`; the effective weight of row i is
//! `g[i] * v[i] / ||v[i]||`. Scaling any row of `v` by a positive constant
//! leaves the effective weight unchanged.
//!
//! Forward passes exist in two forms that perform identical arithmetic:
//! [`forward_mlp`] records onto a [`Tape`] for training, and
//! [`MlpParams::forward_values`] runs from plain buffers for fast inference.

use crate::autodiff::{gemm, Tape, TensorId};
use crate::seeding::Stream;
use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// One weight-normalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    /// Direction matrix, row-major [fan_out, fan_in].
    pub v: Vec<f64>,
    /// Per-row scales [fan_out].
    pub g: Vec<f64>,
    /// Biases [fan_out].
    pub b: Vec<f64>,
}

impl LayerParams {
    /// Row norms of `v`; errors on a zero row, which has no effective weight.
    fn row_norms(&self) -> Result<Vec<f64>> {
        let mut norms = Vec::with_capacity(self.fan_out);
        for i in 0..self.fan_out {
            let row = &self.v[i * self.fan_in..(i + 1) * self.fan_in];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateParameter(format!(
                    "zero direction row {i} in a {}x{} layer",
                    self.fan_out, self.fan_in
                )));
            }
            norms.push(n);
        }
        Ok(norms)
    }
}

/// The effective weight matrix of a weight-normalized layer:
/// row i of the result is `g[i] * v[i] / ||v[i]||`.
pub fn weight_norm_effective(v: &[f64], g: &[f64], fan_in: usize) -> Result<Vec<f64>> {
    let fan_out = g.len();
    if v.len() != fan_in * fan_out {
        return Err(Error::Dimension {
            context: "weight_norm_effective".into(),
            expected: format!("{} values", fan_in * fan_out),
            got: format!("{}", v.len()),
        });
    }
    let mut out = Vec::with_capacity(v.len());
    for i in 0..fan_out {
        let row = &v[i * fan_in..(i + 1) * fan_in];
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateParameter(format!("zero direction row {i}")));
        }
        out.extend(row.iter().map(|x| g[i] * x / n));
    }
    Ok(out)
}

/// A weight-normalized MLP: sizes chain input -> hidden... -> output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    /// Fresh network with uniform `±sqrt(6/(fan_in+fan_out))` directions,
    /// scales set to the resulting row norms (so initial effective weights
    /// equal the raw draw) and zero biases.
    pub fn new(
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut Stream,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (idx, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let v: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-lim..lim))
                .collect();
            let g = (0..fan_out)
                .map(|i| {
                    v[i * fan_in..(i + 1) * fan_in]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let activation = if idx + 2 == sizes.len() {
                output_activation
            } else {
                hidden_activation
            };
            layers.push(LayerParams {
                fan_in,
                fan_out,
                activation,
                v,
                g,
                b: vec![0.0; fan_out],
            });
        }
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    /// Validate the size chain and buffer lengths.
    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Contract("MLP with no layers".into()));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.v.len() != layer.fan_in * layer.fan_out
                || layer.g.len() != layer.fan_out
                || layer.b.len() != layer.fan_out
            {
                return Err(Error::Dimension {
                    context: format!("layer {idx} parameter buffers"),
                    expected: format!("{}x{}", layer.fan_out, layer.fan_in),
                    got: format!(
                        "v:{} g:{} b:{}",
                        layer.v.len(),
                        layer.g.len(),
                        layer.b.len()
                    ),
                });
            }
            if idx > 0 && self.layers[idx - 1].fan_out != layer.fan_in {
                return Err(Error::Dimension {
                    context: format!("layer {idx} input"),
                    expected: format!("{}", self.layers[idx - 1].fan_out),
                    got: format!("{}", layer.fan_in),
                });
            }
            layer.row_norms()?;
        }
        Ok(())
    }

    /// Parameter buffers in the fixed order (v, g, b) per layer; the same
    /// order is used for gradients, optimizer moments, and checkpoints.
    pub fn param_buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len() * 3);
        for layer in &mut self.layers {
            out.push(&mut layer.v);
            out.push(&mut layer.g);
            out.push(&mut layer.b);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.v.len() + l.g.len() + l.b.len())
            .sum()
    }

    /// Record the parameters as tape leaves.
    pub fn insert_into(&self, tape: &mut Tape) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                v: tape.leaf(l.v.clone(), vec![l.fan_out, l.fan_in]),
                g: tape.leaf(l.g.clone(), vec![l.fan_out]),
                b: tape.leaf(l.b.clone(), vec![l.fan_out]),
            })
            .collect();
        MlpVars { layers }
    }

    /// Forward pass from plain buffers; `input` is row-major [rows, input_dim].
    /// Performs the same arithmetic as the taped [`forward_mlp`].
    pub fn forward_values(&self, input: &[f64], rows: usize) -> Result<Vec<f64>> {
        if input.len() != rows * self.input_dim() {
            return Err(Error::Dimension {
                context: "forward input".into(),
                expected: format!("{}x{}", rows, self.input_dim()),
                got: format!("{} values", input.len()),
            });
        }
        let mut x = input.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let norms = layer.row_norms().map_err(|_| {
                Error::DegenerateParameter(format!("zero direction row in layer {idx}"))
            })?;
            let mut w = Vec::with_capacity(layer.v.len());
            for i in 0..layer.fan_out {
                let s = layer.g[i] / norms[i];
                w.extend(
                    layer.v[i * layer.fan_in..(i + 1) * layer.fan_in]
                        .iter()
                        .map(|x| x * s),
                );
            }
            let mut h = vec![0.0; rows * layer.fan_out];
            gemm(rows, layer.fan_in, layer.fan_out, 1.0, &x, false, &w, true, 0.0, &mut h);
            for i in 0..rows {
                for j in 0..layer.fan_out {
                    let z = h[i * layer.fan_out + j] + layer.b[j];
                    h[i * layer.fan_out + j] = match layer.activation {
                        Activation::Linear => z,
                        Activation::Relu => z.max(0.0),
                        Activation::Tanh => z.tanh(),
                    };
                }
            }
            x = h;
        }
        Ok(x)
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub v: TensorId,
    pub g: TensorId,
    pub b: TensorId,
}

/// Tape handles for a whole MLP.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<LayerVars>,
}

impl MlpVars {
    /// Gradients in the fixed (v, g, b) per-layer order, read after backward.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len() * 3);
        for l in &self.layers {
            out.push(tape.grad(l.v).to_vec());
            out.push(tape.grad(l.g).to_vec());
            out.push(tape.grad(l.b).to_vec());
        }
        out
    }

    /// Accumulate another tape's gradients into `acc` (same fixed order).
    pub fn accumulate_grads(&self, tape: &Tape, acc: &mut [Vec<f64>]) {
        let mut idx = 0;
        for l in &self.layers {
            for id in [l.v, l.g, l.b] {
                for (a, &g) in acc[idx].iter_mut().zip(tape.grad(id)) {
                    *a += g;
                }
                idx += 1;
            }
        }
    }
}

/// Record the forward pass of `mlp` on `input` ([rows, input_dim]) and return
/// the output tensor. Gradient flows to the input and to every v, g, b.
pub fn forward_mlp(
    tape: &mut Tape,
    mlp: &MlpParams,
    vars: &MlpVars,
    input: TensorId,
) -> Result<TensorId> {
    let in_cols = match tape.shape(input) {
        [_, c] => *c,
        [c] => *c,
        s => {
            return Err(Error::Dimension {
                context: "forward input".into(),
                expected: "rank 1 or 2".into(),
                got: format!("{s:?}"),
            })
        }
    };
    if in_cols != mlp.input_dim() {
        return Err(Error::Dimension {
            context: "layer 0 input".into(),
            expected: format!("{}", mlp.input_dim()),
            got: format!("{in_cols}"),
        });
    }
    let mut x = input;
    for (idx, (layer, lv)) in mlp.layers.iter().zip(&vars.layers).enumerate() {
        layer
            .row_norms()
            .map_err(|_| Error::DegenerateParameter(format!("zero direction row in layer {idx}")))?;
        let sq = tape.square(lv.v);
        let sumsq = tape.sum_rows(sq);
        let norms = tape.sqrt_eps(sumsq, 0.0);
        let scales = tape.div_elem(lv.g, norms);
        let w = tape.scale_rows(lv.v, scales);
        let h = tape.matmul_nt(x, w);
        let z = tape.add_row(h, lv.b);
        x = match layer.activation {
            Activation::Linear => z,
            Activation::Relu => tape.relu(z),
            Activation::Tanh => tape.tanh(z),
        };
    }
    Ok(x)
}
