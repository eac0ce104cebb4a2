//! NICE additive-coupling flow used as a learned prior density.
//!
//! Direction convention: the *density* direction maps data `x` to the base
//! variable `v = g(x)`. Each coupling layer keeps the conditioning block and
//! shifts the other block by the sub-network output,
//!
//! ```text
//!   v[I1] = x[I1]          v[I2] = x[I2] - h(x[I1])
//! ```
//!
//! and layers are applied first to last. Sampling runs the layers in reverse
//! with `x[I2] = v[I2] + h(v[I1])`. Every layer has unit Jacobian determinant,
//! so `log p(x) = log N(g(x); 0, I)` with no correction term.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, GradTape, Mlp};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// Coordinates passed through unchanged and fed to the sub-network (I1).
    pub conditioner: Vec<usize>,
    /// Coordinates shifted by the sub-network output (I2).
    pub shifted: Vec<usize>,
    pub net: Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "FlowRecord", into = "FlowRecord")]
pub struct NiceFlow {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

#[derive(Serialize, Deserialize)]
struct FlowRecord {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

impl From<NiceFlow> for FlowRecord {
    fn from(f: NiceFlow) -> Self {
        FlowRecord { dim: f.dim, layers: f.layers }
    }
}

impl TryFrom<FlowRecord> for NiceFlow {
    type Error = String;
    fn try_from(r: FlowRecord) -> std::result::Result<Self, String> {
        NiceFlow::from_layers(r.dim, r.layers).map_err(|e| e.to_string())
    }
}

/// Alternating odd/even coordinate split for layer `j`.
pub fn alternating_partition(dim: usize, j: usize) -> (Vec<usize>, Vec<usize>) {
    let even: Vec<usize> = (0..dim).step_by(2).collect();
    let odd: Vec<usize> = (1..dim).step_by(2).collect();
    if j % 2 == 0 {
        (even, odd)
    } else {
        (odd, even)
    }
}

struct LayerPass {
    tape: GradTape,
}

impl NiceFlow {
    /// Random flow with `n_layers` alternating couplings, each sub-network
    /// using `hidden` relu layers.
    pub fn new(dim: usize, n_layers: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        if dim < 2 {
            return Err(Error::FlowUnsupported { dim });
        }
        if n_layers == 0 {
            return Err(Error::Config("a flow needs at least one coupling layer".into()));
        }
        let layers = (0..n_layers)
            .map(|j| {
                let (conditioner, shifted) = alternating_partition(dim, j);
                let net = Mlp::with_hidden(conditioner.len(), hidden, shifted.len(), Activation::Relu, rng)?;
                Ok(CouplingLayer { conditioner, shifted, net })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NiceFlow { dim, layers })
    }

    pub fn from_layers(dim: usize, layers: Vec<CouplingLayer>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::FlowUnsupported { dim });
        }
        for (j, layer) in layers.iter().enumerate() {
            let mut seen = vec![false; dim];
            for &c in layer.conditioner.iter().chain(&layer.shifted) {
                if c >= dim || seen[c] {
                    return Err(Error::Config(format!("coupling layer {j} does not partition 0..{dim}")));
                }
                seen[c] = true;
            }
            if seen.iter().any(|s| !s) || layer.conditioner.is_empty() || layer.shifted.is_empty() {
                return Err(Error::Config(format!("coupling layer {j} does not partition 0..{dim}")));
            }
            if layer.net.input_dim() != layer.conditioner.len() || layer.net.output_dim() != layer.shifted.len() {
                return Err(Error::Config(format!("coupling layer {j} sub-network has the wrong shape")));
            }
        }
        Ok(NiceFlow { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.net.n_params()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.net.params());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::InputShape { expected: self.n_params(), got: values.len() });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.net.n_params();
            l.net.set_params(&values[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    fn check_cols(&self, xs: &ArrayView2<'_, f64>) -> Result<()> {
        if xs.ncols() != self.dim {
            return Err(Error::InputShape { expected: self.dim, got: xs.ncols() });
        }
        Ok(())
    }

    /// Density direction `v = g(x)` for a batch of rows.
    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_cols(&xs)?;
        let mut cur = xs.to_owned();
        for layer in &self.layers {
            let cond = Mlp::select_columns(cur.view(), &layer.conditioner);
            let h = layer.net.predict_batch(cond.view())?;
            for (j, &c) in layer.shifted.iter().enumerate() {
                let mut col = cur.column_mut(c);
                col -= &h.column(j);
            }
        }
        Ok(cur)
    }

    /// Sampling direction `x = g⁻¹(v)`.
    pub fn inverse_batch(&self, vs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_cols(&vs)?;
        let mut cur = vs.to_owned();
        for layer in self.layers.iter().rev() {
            let cond = Mlp::select_columns(cur.view(), &layer.conditioner);
            let h = layer.net.predict_batch(cond.view())?;
            for (j, &c) in layer.shifted.iter().enumerate() {
                let mut col = cur.column_mut(c);
                col += &h.column(j);
            }
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("one-row view");
        Ok(self.forward_batch(xs)?.row(0).to_vec())
    }

    pub fn inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        let vs = ArrayView2::from_shape((1, v.len()), v).expect("one-row view");
        Ok(self.inverse_batch(vs)?.row(0).to_vec())
    }

    fn base_log_density(&self, v: ndarray::ArrayView1<'_, f64>) -> f64 {
        -0.5 * self.dim as f64 * (2.0 * PI).ln() - 0.5 * v.dot(&v)
    }

    pub fn log_density_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let v = self.forward_batch(xs)?;
        Ok(v.axis_iter(Axis(0)).map(|r| self.base_log_density(r)).collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let v = self.forward(x)?;
        Ok(self.base_log_density(ndarray::ArrayView1::from(&v[..])))
    }

    /// Weighted reverse pass. Returns `Σ_r weights[r]·∇_γ log p(x_r)` and the
    /// per-row `weights[r]·∇_x log p(x_r)`, plus the log-densities.
    pub fn backward_batch(
        &self,
        xs: ArrayView2<'_, f64>,
        weights: &[f64],
    ) -> Result<(Array1<f64>, Vec<f64>, Array2<f64>)> {
        self.check_cols(&xs)?;
        if weights.len() != xs.nrows() {
            return Err(Error::InputShape { expected: xs.nrows(), got: weights.len() });
        }
        let mut cur = xs.to_owned();
        let mut passes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cond = Mlp::select_columns(cur.view(), &layer.conditioner);
            let tape = layer.net.forward_batch(cond.view())?;
            let h = tape.output();
            for (j, &c) in layer.shifted.iter().enumerate() {
                let mut col = cur.column_mut(c);
                col -= &h.column(j);
            }
            passes.push(LayerPass { tape });
        }
        let logp: Array1<f64> = cur.axis_iter(Axis(0)).map(|r| self.base_log_density(r)).collect();
        // d log N(v) / dv = -v
        let mut dv = cur;
        for (mut row, &w) in dv.axis_iter_mut(Axis(0)).zip(weights) {
            row.mapv_inplace(|v| -w * v);
        }
        let mut param_grads: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for (idx, (layer, pass)) in self.layers.iter().zip(&passes).enumerate().rev() {
            // v[I2] = x[I2] - h(x[I1])  =>  dL/dh = -dv[I2]
            let mut out_grad = Mlp::select_columns(dv.view(), &layer.shifted);
            out_grad.mapv_inplace(|g| -g);
            let g = layer.net.backward_batch(&pass.tape, out_grad.view())?;
            for (j, &c) in layer.conditioner.iter().enumerate() {
                let mut col = dv.column_mut(c);
                col += &g.input.column(j);
            }
            param_grads[idx] = g.params;
        }
        Ok((logp, param_grads.concat(), dv))
    }

    /// Draws `m` points by pushing base samples through the inverse map.
    pub fn sample(&self, rng: &mut Rng, m: usize) -> Result<Array2<f64>> {
        let v = Array2::from_shape_simple_fn((m, self.dim), || StandardNormal.sample(rng));
        self.inverse_batch(v.view())
    }
}
