//! Dense feed-forward networks with a recorded tape for exact reverse-mode
//! gradients, plus the Adam update rule.
//!
//! All parameters of an [`Mlp`] live in one flat buffer, layer by layer: the
//! row-major `(out × in)` weight matrix followed by the bias vector. Gradients
//! are returned in the same layout so optimizers can treat any network as a
//! plain slice.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
    Softplus,
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Linear => z,
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
            Activation::Softplus => sigmoid(z),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
            Activation::Softplus => "softplus",
        }
    }
}

const MLP_FORMAT: &str = "nnme-mlp";
const MLP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MlpRecord {
    format: String,
    version: u32,
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Fully connected feed-forward network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "MlpRecord", try_from = "MlpRecord")]
pub struct Mlp {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    stamp: u64,
}

impl From<Mlp> for MlpRecord {
    fn from(net: Mlp) -> Self {
        MlpRecord {
            format: MLP_FORMAT.to_string(),
            version: MLP_VERSION,
            widths: net.widths,
            activations: net.activations,
            params: net.params,
        }
    }
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = String;

    fn try_from(rec: MlpRecord) -> std::result::Result<Self, String> {
        if rec.format != MLP_FORMAT {
            return Err(format!("unexpected format tag `{}`", rec.format));
        }
        if rec.version != MLP_VERSION {
            return Err(format!("unsupported network format version {}", rec.version));
        }
        let mut net = Mlp::zeros(&rec.widths, &rec.activations).map_err(|e| e.to_string())?;
        if rec.params.len() != net.params.len() {
            return Err(format!(
                "parameter count {} does not match widths (expected {})",
                rec.params.len(),
                net.params.len()
            ));
        }
        net.params = rec.params;
        Ok(net)
    }
}

/// Everything recorded during one batched forward pass.
#[derive(Debug, Clone)]
pub struct GradTape {
    stamp: u64,
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl GradTape {
    pub fn output(&self) -> ArrayView2<'_, f64> {
        self.post.last().map(|a| a.view()).unwrap_or_else(|| self.input.view())
    }

    pub fn input(&self) -> ArrayView2<'_, f64> {
        self.input.view()
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.post.pop().unwrap_or(self.input)
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Gradients of `Σ_rows ⟨out_grad_row, output_row⟩`.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub params: Vec<f64>,
    pub input: Array2<f64>,
}

impl Mlp {
    /// Network with all weights and biases zero.
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("a network needs at least an input and an output width".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("layer widths must be positive, got {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                widths.len() - 1,
                widths.len() - 1,
                activations.len()
            )));
        }
        let n: usize = widths.windows(2).map(|p| p[1] * p[0] + p[1]).sum();
        Ok(Mlp { widths: widths.to_vec(), activations: activations.to_vec(), params: vec![0.0; n], stamp: fresh_stamp() })
    }

    /// Randomly initialized network: He scaling for relu layers, Xavier
    /// otherwise, zero biases.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(widths, activations)?;
        let mut offset = 0;
        for l in 0..net.n_layers() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let var = match activations[l] {
                Activation::Relu => 2.0 / fan_in as f64,
                _ => 2.0 / (fan_in + fan_out) as f64,
            };
            let sd = var.sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *p = sd * z;
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    /// Hidden layers share one activation; the output layer is linear.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (widths, acts) = Self::layout(input, hidden, output, activation);
        Self::new(&widths, &acts, rng)
    }

    pub fn layout(input: usize, hidden: &[usize], output: usize, activation: Activation) -> (Vec<usize>, Vec<Activation>) {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut acts = vec![activation; hidden.len()];
        acts.push(Activation::Linear);
        (widths, acts)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("widths is never empty")
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameter buffer. Invalidates existing tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.stamp = fresh_stamp();
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InputShape { expected: self.params.len(), got: values.len() });
        }
        self.params_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum()
    }

    fn offsets(&self, layer: usize) -> (usize, usize) {
        let mut offset = 0;
        for l in 0..layer {
            offset += self.widths[l + 1] * self.widths[l] + self.widths[l + 1];
        }
        (offset, offset + self.widths[layer + 1] * self.widths[layer])
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (w0, b0) = self.offsets(layer);
        ArrayView2::from_shape((self.widths[layer + 1], self.widths[layer]), &self.params[w0..b0])
            .expect("weight block matches layer shape")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (_, b0) = self.offsets(layer);
        ArrayView1::from(&self.params[b0..b0 + self.widths[layer + 1]])
    }

    /// Forward pass over a batch of row vectors, recording the tape.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<GradTape> {
        if input.ncols() != self.input_dim() {
            return Err(Error::InputShape { expected: self.input_dim(), got: input.ncols() });
        }
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let h = if l == 0 { input.view() } else { post[l - 1].view() };
            let mut z = h.dot(&self.weight(l).t());
            z += &self.bias(l);
            let act = self.activations[l];
            let a = if act == Activation::Linear { z.clone() } else { z.mapv(|v| act.apply(v)) };
            pre.push(z);
            post.push(a);
        }
        Ok(GradTape { stamp: self.stamp, input: input.to_owned(), pre, post })
    }

    /// Forward pass without keeping intermediate activations.
    pub fn predict_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.input_dim() {
            return Err(Error::InputShape { expected: self.input_dim(), got: input.ncols() });
        }
        let mut h = input.to_owned();
        for l in 0..self.n_layers() {
            let mut z = h.dot(&self.weight(l).t());
            z += &self.bias(l);
            let act = self.activations[l];
            if act != Activation::Linear {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, GradTape)> {
        let input = ArrayView2::from_shape((1, x.len()), x).expect("one-row view");
        let tape = self.forward_batch(input)?;
        let out = tape.output().row(0).to_vec();
        Ok((out, tape))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let input = ArrayView2::from_shape((1, x.len()), x).expect("one-row view");
        Ok(self.predict_batch(input)?.row(0).to_vec())
    }

    /// Re-runs the recorded input through the network.
    pub fn replay(&self, tape: &GradTape) -> Result<Array2<f64>> {
        if tape.stamp != self.stamp {
            return Err(Error::StaleTape);
        }
        Ok(self.forward_batch(tape.input.view())?.into_output())
    }

    /// Reverse pass: gradients of `Σ_r ⟨out_grad[r], output[r]⟩` with respect
    /// to all parameters (summed over rows) and to each input row.
    pub fn backward_batch(&self, tape: &GradTape, out_grad: ArrayView2<'_, f64>) -> Result<MlpGradients> {
        if tape.stamp != self.stamp {
            return Err(Error::StaleTape);
        }
        if out_grad.ncols() != self.output_dim() {
            return Err(Error::InputShape { expected: self.output_dim(), got: out_grad.ncols() });
        }
        if out_grad.nrows() != tape.batch_size() {
            return Err(Error::InputShape { expected: tape.batch_size(), got: out_grad.nrows() });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = out_grad.to_owned();
        for l in (0..self.n_layers()).rev() {
            let act = self.activations[l];
            if act != Activation::Linear {
                ndarray::Zip::from(&mut delta)
                    .and(&tape.pre[l])
                    .and(&tape.post[l])
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            }
            let h_prev = if l == 0 { tape.input.view() } else { tape.post[l - 1].view() };
            let (w0, b0) = self.offsets(l);
            let (rows, cols) = (self.widths[l + 1], self.widths[l]);
            let dw = delta.t().dot(&h_prev);
            ndarray::ArrayViewMut2::from_shape((rows, cols), &mut grads[w0..b0])
                .expect("gradient block matches layer shape")
                .assign(&dw);
            let db = delta.sum_axis(Axis(0));
            grads[b0..b0 + rows].copy_from_slice(db.as_slice().expect("contiguous"));
            delta = delta.dot(&self.weight(l));
        }
        Ok(MlpGradients { params: grads, input: delta })
    }

    pub fn backward(&self, tape: &GradTape, out_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if tape.batch_size() != 1 {
            return Err(Error::InputShape { expected: 1, got: tape.batch_size() });
        }
        let og = ArrayView2::from_shape((1, out_grad.len()), out_grad).expect("one-row view");
        let g = self.backward_batch(tape, og)?;
        Ok((g.params, g.input.row(0).to_vec()))
    }

    /// Copies the listed columns of a batch into a new matrix.
    pub fn select_columns(batch: ArrayView2<'_, f64>, cols: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((batch.nrows(), cols.len()));
        for (j, &c) in cols.iter().enumerate() {
            out.slice_mut(s![.., j]).assign(&batch.column(c));
        }
        out
    }
}

/// Adam constants `(α₀, α₁, α₂)` and the denominator offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { alpha0: 0.001, alpha1: 0.9, alpha2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState { config, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Effective step size `α₀·√(1−α₂ᵗ)/(1−α₁ᵗ)` at step `t ≥ 1`.
    pub fn step_size(&self, t: u64) -> f64 {
        let c = &self.config;
        let t = t as i32;
        c.alpha0 * (1.0 - c.alpha2.powi(t)).sqrt() / (1.0 - c.alpha1.powi(t))
    }

    /// One update moving `params` up the supplied gradient. Nothing is changed
    /// when a gradient entry is not finite.
    pub fn ascend(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InputShape { expected: self.m.len(), got: params.len() });
        }
        if grads.len() != self.m.len() {
            return Err(Error::InputShape { expected: self.m.len(), got: grads.len() });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.t += 1;
        let lr = self.step_size(self.t);
        let AdamConfig { alpha1, alpha2, eps, .. } = self.config;
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = alpha1 * *m + (1.0 - alpha1) * g;
            *v = alpha2 * *v + (1.0 - alpha2) * g * g;
            *p += lr * *m / (v.sqrt() + eps);
        }
        Ok(())
    }

    /// Convenience wrapper updating a network in place.
    pub fn ascend_mlp(&mut self, net: &mut Mlp, grads: &[f64]) -> Result<()> {
        let mut params = net.params().to_vec();
        self.ascend(&mut params, grads)?;
        net.params_mut().copy_from_slice(&params);
        Ok(())
    }
}

/// Random vector of standard normal draws.
pub fn standard_normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Straight-line evaluation with explicit loops, no tape.
    fn direct_eval(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..net.n_layers() {
            let w = net.weight(l);
            let b = net.bias(l);
            let mut out = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut acc = b[i];
                for j in 0..w.ncols() {
                    acc += w[(i, j)] * h[j];
                }
                out[i] = net.activations()[l].apply(acc);
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut net = Mlp::zeros(&[3, 2], &[Activation::Linear]).unwrap();
        net.params_mut()[6..8].copy_from_slice(&[0.5, -1.5]);
        let (out, _) = net.forward(&[9.0, -4.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.5, -1.5]);
    }

    #[test]
    fn relu_scalar() {
        let mut net = Mlp::zeros(&[1, 1], &[Activation::Relu]).unwrap();
        net.params_mut()[0] = 1.0;
        assert_eq!(net.forward(&[-2.0]).unwrap().0, vec![0.0]);
        assert_eq!(net.forward(&[3.0]).unwrap().0, vec![3.0]);
    }

    #[test]
    fn matches_direct_evaluation() {
        let mut rng = seeded(11);
        let net = Mlp::new(&[4, 7, 3], &[Activation::Tanh, Activation::Relu], &mut rng).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0];
        let (out, _) = net.forward(&x).unwrap();
        let direct = direct_eval(&net, &x);
        for (a, b) in out.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn input_shape_rejected() {
        let net = Mlp::zeros(&[2, 1], &[Activation::Linear]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::InputShape { expected: 2, got: 1 })));
    }

    #[test]
    fn linear_input_gradient_is_weight_row() {
        let mut net = Mlp::zeros(&[3, 1], &[Activation::Linear]).unwrap();
        net.params_mut()[..3].copy_from_slice(&[0.2, -0.7, 1.9]);
        let (_, tape) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        let (_, gin) = net.backward(&tape, &[1.0]).unwrap();
        assert_eq!(gin, vec![0.2, -0.7, 1.9]);
    }

    #[test]
    fn tanh_at_origin() {
        let mut net = Mlp::zeros(&[1, 1], &[Activation::Tanh]).unwrap();
        net.params_mut()[0] = 1.0;
        let (_, tape) = net.forward(&[0.0]).unwrap();
        let (_, gin) = net.backward(&tape, &[1.0]).unwrap();
        assert_eq!(gin, vec![1.0]);
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = seeded(3);
        let mut net = Mlp::new(&[2, 4, 1], &[Activation::Relu, Activation::Linear], &mut rng).unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2]).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&tape, &[1.0]), Err(Error::StaleTape)));
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let mut rng = seeded(5);
        let net = Mlp::with_hidden(3, &[8, 8], 2, Activation::Softplus, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let tape = net.forward_batch(x.view()).unwrap();
        let again = net.replay(&tape).unwrap();
        assert_eq!(tape.output(), again.view());
        assert_eq!(net.predict_batch(x.view()).unwrap(), again);
    }

    #[test]
    fn adam_first_step_size() {
        let adam = AdamState::new(1, AdamConfig::default());
        let expected = 0.001 * (1.0f64 - 0.999).sqrt() / (1.0 - 0.9);
        assert!((adam.step_size(1) - expected).abs() < 1e-15);
        // √0.001 = 0.0316..., so the first effective step is about 3.16e-4
        assert!((adam.step_size(1) - 0.001 * 0.031_622_776_601_683_79 / 0.1).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, -2.0];
        adam.ascend(&mut p, &[0.3, -0.1]).unwrap();
        let after_first = p.clone();
        let m_before = adam.first_moment().to_vec();
        adam.ascend(&mut p, &[0.0, 0.0]).unwrap();
        // moments decay but parameters still move from the decayed first moment
        for (m, mb) in adam.first_moment().iter().zip(&m_before) {
            assert!((m - 0.9 * mb).abs() < 1e-15);
        }
        let mut fresh = AdamState::new(2, AdamConfig::default());
        let mut q = vec![1.0, -2.0];
        fresh.ascend(&mut q, &[0.0, 0.0]).unwrap();
        assert_eq!(q, vec![1.0, -2.0]);
        assert_eq!(fresh.steps(), 1);
        assert_ne!(after_first, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut adam = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        let err = adam.ascend(&mut p, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1 }));
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn adam_ascends_concave_objective() {
        let cfg = AdamConfig { alpha0: 0.05, ..AdamConfig::default() };
        let mut adam = AdamState::new(1, cfg);
        let mut p = [0.0];
        for _ in 0..5000 {
            let g = -2.0 * (p[0] - 3.0);
            adam.ascend(&mut p, &[g]).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 0.5, "p = {}", p[0]);
    }

    #[test]
    fn serialization_round_trip_is_exact() {
        let mut rng = seeded(9);
        let net = Mlp::with_hidden(2, &[5], 3, Activation::Sigmoid, &mut rng).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        assert!(text.contains("\"format\":\"nnme-mlp\""));
        let back: Mlp = serde_json::from_str(&text).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.widths(), net.widths());
        assert_eq!(back.activations(), net.activations());
    }

    #[test]
    fn rejects_bad_parameter_count() {
        let text = r#"{"format":"nnme-mlp","version":1,"widths":[1,1],"activations":["linear"],"params":[1.0]}"#;
        assert!(serde_json::from_str::<Mlp>(text).is_err());
    }
}
