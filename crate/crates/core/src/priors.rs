//! Prior densities for the latent covariate `X`.
//!
//! All variants work in the standardized coordinates the trainer uses. The
//! gamma mixture lives on the raw scale and carries the affine map back to it.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::flow::NiceFlow;
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A closed-form density supplied by the caller, e.g. the true law of `X` in
/// an oracle experiment.
pub trait KnownDensity: Send + Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;

    /// Central-difference gradient; override when an exact one is cheap.
    fn grad_x(&self, x: &[f64]) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|j| {
                let h = 1e-5 * (1.0 + x[j].abs());
                probe[j] = x[j] + h;
                let up = self.log_density(&probe);
                probe[j] = x[j] - h;
                let down = self.log_density(&probe);
                probe[j] = x[j];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn sample(&self, _rng: &mut Rng, _m: usize) -> Option<Array2<f64>> {
        None
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

fn pick_component(rng: &mut Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return c;
        }
    }
    weights.len() - 1
}

/// Mixture of diagonal Gaussians. Learnable through softmax logits, means and
/// log-variances unless frozen.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub dim: usize,
    pub logits: Vec<f64>,
    /// Row-major `components × dim`.
    pub means: Vec<f64>,
    pub log_vars: Vec<f64>,
    #[serde(default)]
    pub frozen: bool,
}

impl GaussianMixture {
    pub fn new(weights: &[f64], means: &[Vec<f64>], vars: &[Vec<f64>]) -> Result<Self> {
        let c = weights.len();
        if c == 0 || means.len() != c || vars.len() != c {
            return Err(Error::Config("mixture needs matching weights, means and variances".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().chain(vars).any(|r| r.len() != dim) {
            return Err(Error::Config("mixture components must share one dimension".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture weights must be positive and sum to 1".into()));
        }
        if vars.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("mixture variances must be positive".into()));
        }
        Ok(GaussianMixture {
            dim,
            logits: weights.iter().map(|w| w.ln()).collect(),
            means: means.concat(),
            log_vars: vars.iter().flatten().map(|v| v.ln()).collect(),
            frozen: false,
        })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianMixture { dim, logits: vec![0.0], means: vec![0.0; dim], log_vars: vec![0.0; dim], frozen: false }
    }

    /// `components` equal-weight components centred at per-coordinate data
    /// quantiles, each with the column variance.
    pub fn from_data(xs: ArrayView2<'_, f64>, components: usize) -> Result<Self> {
        if components == 0 || xs.nrows() == 0 {
            return Err(Error::Config("mixture initialisation needs data and at least one component".into()));
        }
        let dim = xs.ncols();
        let mut means = vec![0.0; components * dim];
        let mut log_vars = vec![0.0; components * dim];
        for j in 0..dim {
            let mut col = xs.column(j).to_vec();
            col.sort_by(f64::total_cmp);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-6);
            for c in 0..components {
                let q = (c as f64 + 0.5) / components as f64;
                let idx = ((q * (n - 1.0)).round() as usize).min(col.len() - 1);
                means[c * dim + j] = col[idx];
                log_vars[c * dim + j] = (var / components as f64).ln();
            }
        }
        Ok(GaussianMixture { dim, logits: vec![0.0; components], means, log_vars, frozen: false })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    fn component_logs(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let lse = log_sum_exp(&self.logits);
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = self.logits[c] - lse - 0.5 * d as f64 * LN_2PI;
            for j in 0..d {
                let lv = self.log_vars[c * d + j];
                let diff = x[j] - self.means[c * d + j];
                s -= 0.5 * lv + 0.5 * diff * diff * (-lv).exp();
            }
            *o = s;
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut comp = vec![0.0; self.components()];
        self.component_logs(x, &mut comp);
        log_sum_exp(&comp)
    }

    /// Log-density, accumulating `weight·∂/∂params` into `pgrad` (if learnable)
    /// and writing `weight·∂/∂x` into `xgrad`.
    fn eval_row(&self, x: &[f64], weight: f64, comp: &mut [f64], pgrad: Option<&mut [f64]>, xgrad: &mut [f64]) -> f64 {
        let d = self.dim;
        let nc = self.components();
        self.component_logs(x, comp);
        let lp = log_sum_exp(comp);
        xgrad.iter_mut().for_each(|g| *g = 0.0);
        if weight == 0.0 {
            return lp;
        }
        let pis = softmax(&self.logits);
        let mut pgrad = pgrad;
        for c in 0..nc {
            let r = (comp[c] - lp).exp();
            if let Some(pg) = pgrad.as_deref_mut() {
                pg[c] += weight * (r - pis[c]);
            }
            for j in 0..d {
                let k = c * d + j;
                let inv_v = (-self.log_vars[k]).exp();
                let diff = x[j] - self.means[k];
                xgrad[j] -= weight * r * diff * inv_v;
                if let Some(pg) = pgrad.as_deref_mut() {
                    pg[nc + k] += weight * r * diff * inv_v;
                    pg[nc + nc * d + k] += weight * r * (0.5 * diff * diff * inv_v - 0.5);
                }
            }
        }
        lp
    }

    fn sample(&self, rng: &mut Rng, m: usize) -> Array2<f64> {
        let w = self.weights();
        let d = self.dim;
        let mut out = Array2::zeros((m, d));
        for mut row in out.axis_iter_mut(Axis(0)) {
            let c = pick_component(rng, &w);
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                row[j] = self.means[c * d + j] + (0.5 * self.log_vars[c * d + j]).exp() * z;
            }
        }
        out
    }
}

/// Independent coordinates, each `scale · t_df`. Never learnable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaledT {
    pub dim: usize,
    pub scale: f64,
    pub df: f64,
}

impl ScaledT {
    pub fn new(dim: usize, scale: f64, df: f64) -> Result<Self> {
        if dim == 0 || !(scale > 0.0) || !(df > 0.0) {
            return Err(Error::Config("scaled t needs dim ≥ 1, scale > 0, df > 0".into()));
        }
        Ok(ScaledT { dim, scale, df })
    }

    fn norm_const(&self) -> f64 {
        let nu = self.df;
        ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln() - self.scale.ln()
    }

    fn eval_row(&self, x: &[f64], weight: f64, xgrad: &mut [f64]) -> f64 {
        let nu = self.df;
        let c = self.norm_const();
        let mut lp = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            let t = xj / self.scale;
            lp += c - 0.5 * (nu + 1.0) * (1.0 + t * t / nu).ln();
            xgrad[j] = -weight * (nu + 1.0) * t / (nu + t * t) / self.scale;
        }
        lp
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.eval_row(x, 0.0, &mut g)
    }

    fn sample(&self, rng: &mut Rng, m: usize) -> Result<Array2<f64>> {
        let t = StudentT::new(self.df).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Array2::from_shape_simple_fn((m, self.dim), || self.scale * t.sample(rng)))
    }
}

/// Mixture of products of independent gammas, defined on raw coordinates
/// `r = shift + scale ⊙ x`. The density is reported for the standardized `x`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaMixture {
    pub dim: usize,
    pub logits: Vec<f64>,
    pub log_shapes: Vec<f64>,
    pub log_rates: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    #[serde(default)]
    pub frozen: bool,
}

impl GammaMixture {
    pub fn new(weights: &[f64], shapes: &[Vec<f64>], rates: &[Vec<f64>], shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let c = weights.len();
        if c == 0 || shapes.len() != c || rates.len() != c {
            return Err(Error::Config("gamma mixture needs matching weights, shapes and rates".into()));
        }
        let dim = shift.len();
        if dim == 0 || scale.len() != dim || shapes.iter().chain(rates).any(|r| r.len() != dim) {
            return Err(Error::Config("gamma mixture components must share one dimension".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("mixture weights must be positive and sum to 1".into()));
        }
        if shapes.iter().chain(rates).flatten().chain(&scale).any(|v| !(*v > 0.0)) {
            return Err(Error::Config("gamma shapes, rates and scales must be positive".into()));
        }
        Ok(GammaMixture {
            dim,
            logits: weights.iter().map(|w| w.ln()).collect(),
            log_shapes: shapes.iter().flatten().map(|v| v.ln()).collect(),
            log_rates: rates.iter().flatten().map(|v| v.ln()).collect(),
            shift,
            scale,
            frozen: false,
        })
    }

    /// Moment-matched components on quantile slices of the raw data.
    pub fn from_raw_data(raw: ArrayView2<'_, f64>, components: usize, shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let dim = raw.ncols();
        if components == 0 || raw.nrows() < components {
            return Err(Error::Config("gamma mixture initialisation needs at least one row per component".into()));
        }
        let mut shapes = vec![vec![0.0; dim]; components];
        let mut rates = vec![vec![0.0; dim]; components];
        for j in 0..dim {
            let mut col: Vec<f64> = raw.column(j).iter().cloned().filter(|v| *v > 0.0).collect();
            if col.len() < components {
                return Err(Error::Data("gamma prior needs positive raw covariates".into()));
            }
            col.sort_by(f64::total_cmp);
            let chunk = col.len() / components;
            for c in 0..components {
                let end = if c + 1 == components { col.len() } else { (c + 1) * chunk };
                let part = &col[c * chunk..end];
                let n = part.len() as f64;
                let mean = part.iter().sum::<f64>() / n;
                let var = (part.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(1e-6 * mean * mean).max(1e-12);
                shapes[c][j] = mean * mean / var;
                rates[c][j] = mean / var;
            }
        }
        let weights = vec![1.0 / components as f64; components];
        GammaMixture::new(&weights, &shapes, &rates, shift, scale)
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    fn log_jacobian(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    fn component_logs(&self, r: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let lse = log_sum_exp(&self.logits);
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = self.logits[c] - lse;
            for j in 0..d {
                let a = self.log_shapes[c * d + j].exp();
                let lb = self.log_rates[c * d + j];
                s += a * lb - ln_gamma(a) + (a - 1.0) * r[j].ln() - lb.exp() * r[j];
            }
            *o = s;
        }
    }

    fn eval_row(&self, x: &[f64], weight: f64, comp: &mut [f64], pgrad: Option<&mut [f64]>, xgrad: &mut [f64]) -> f64 {
        let d = self.dim;
        let nc = self.components();
        xgrad.iter_mut().for_each(|g| *g = 0.0);
        let r: Vec<f64> = (0..d).map(|j| self.shift[j] + self.scale[j] * x[j]).collect();
        if r.iter().any(|v| !(*v > 0.0)) {
            return f64::NEG_INFINITY;
        }
        self.component_logs(&r, comp);
        let lp_raw = log_sum_exp(comp);
        if weight == 0.0 {
            return lp_raw + self.log_jacobian();
        }
        let pis = softmax(&self.logits);
        let mut pgrad = pgrad;
        for c in 0..nc {
            let resp = (comp[c] - lp_raw).exp();
            if let Some(pg) = pgrad.as_deref_mut() {
                pg[c] += weight * (resp - pis[c]);
            }
            for j in 0..d {
                let k = c * d + j;
                let a = self.log_shapes[k].exp();
                let b = self.log_rates[k].exp();
                xgrad[j] += weight * resp * ((a - 1.0) / r[j] - b) * self.scale[j];
                if let Some(pg) = pgrad.as_deref_mut() {
                    pg[nc + k] += weight * resp * a * (self.log_rates[k] - digamma(a) + r[j].ln());
                    pg[nc + nc * d + k] += weight * resp * (a - b * r[j]);
                }
            }
        }
        lp_raw + self.log_jacobian()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut comp = vec![0.0; self.components()];
        let mut g = vec![0.0; self.dim];
        self.eval_row(x, 0.0, &mut comp, None, &mut g)
    }

    fn sample(&self, rng: &mut Rng, m: usize) -> Result<Array2<f64>> {
        let w = self.weights();
        let d = self.dim;
        let mut out = Array2::zeros((m, d));
        for mut row in out.axis_iter_mut(Axis(0)) {
            let c = pick_component(rng, &w);
            for j in 0..d {
                let k = c * d + j;
                let g = Gamma::new(self.log_shapes[k].exp(), (-self.log_rates[k]).exp())
                    .map_err(|e| Error::Numerical(e.to_string()))?;
                let raw: f64 = g.sample(rng);
                row[j] = (raw - self.shift[j]) / self.scale[j];
            }
        }
        Ok(out)
    }
}

#[derive(Clone)]
pub struct FixedKnown(pub Arc<dyn KnownDensity>);

impl fmt::Debug for FixedKnown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FixedKnown(dim = {})", self.0.dim())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Prior {
    GaussianMixture(GaussianMixture),
    ScaledT(ScaledT),
    GammaMixture(GammaMixture),
    NiceFlow(NiceFlow),
    #[serde(skip)]
    FixedKnown(FixedKnown),
}

/// Log-densities, summed weighted parameter gradient and per-row weighted
/// x-gradient for a batch of points.
#[derive(Debug, Clone)]
pub struct PriorBackward {
    pub log_density: Array1<f64>,
    pub params: Vec<f64>,
    pub x: Array2<f64>,
}

impl Prior {
    pub fn known(density: Arc<dyn KnownDensity>) -> Self {
        Prior::FixedKnown(FixedKnown(density))
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Prior::GaussianMixture(_) => "gaussian_mixture",
            Prior::ScaledT(_) => "scaled_t",
            Prior::GammaMixture(_) => "gamma_mixture",
            Prior::NiceFlow(_) => "nice_flow",
            Prior::FixedKnown(_) => "fixed_known",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::GaussianMixture(g) => g.dim,
            Prior::ScaledT(t) => t.dim,
            Prior::GammaMixture(g) => g.dim,
            Prior::NiceFlow(f) => f.dim(),
            Prior::FixedKnown(k) => k.0.dim(),
        }
    }

    /// Number of learnable parameters; zero for frozen variants.
    pub fn n_params(&self) -> usize {
        match self {
            Prior::GaussianMixture(g) if !g.frozen => g.logits.len() + g.means.len() + g.log_vars.len(),
            Prior::GammaMixture(g) if !g.frozen => g.logits.len() + g.log_shapes.len() + g.log_rates.len(),
            Prior::NiceFlow(f) => f.n_params(),
            _ => 0,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Prior::GaussianMixture(g) if !g.frozen => [&g.logits[..], &g.means, &g.log_vars].concat(),
            Prior::GammaMixture(g) if !g.frozen => [&g.logits[..], &g.log_shapes, &g.log_rates].concat(),
            Prior::NiceFlow(f) => f.params(),
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let n = self.n_params();
        if values.len() != n {
            return Err(Error::InputShape { expected: n, got: values.len() });
        }
        match self {
            Prior::GaussianMixture(g) if !g.frozen => {
                let (a, rest) = values.split_at(g.logits.len());
                let (b, c) = rest.split_at(g.means.len());
                g.logits.copy_from_slice(a);
                g.means.copy_from_slice(b);
                g.log_vars.copy_from_slice(c);
            }
            Prior::GammaMixture(g) if !g.frozen => {
                let (a, rest) = values.split_at(g.logits.len());
                let (b, c) = rest.split_at(g.log_shapes.len());
                g.logits.copy_from_slice(a);
                g.log_shapes.copy_from_slice(b);
                g.log_rates.copy_from_slice(c);
            }
            Prior::NiceFlow(f) => f.set_params(values)?,
            _ => {}
        }
        Ok(())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::InputShape { expected: self.dim(), got: x.len() });
        }
        Ok(match self {
            Prior::GaussianMixture(g) => g.log_density(x),
            Prior::ScaledT(t) => t.log_density(x),
            Prior::GammaMixture(g) => g.log_density(x),
            Prior::NiceFlow(f) => f.log_density(x)?,
            Prior::FixedKnown(k) => k.0.log_density(x),
        })
    }

    pub fn log_density_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if let Prior::NiceFlow(f) = self {
            return f.log_density_batch(xs);
        }
        if xs.ncols() != self.dim() {
            return Err(Error::InputShape { expected: self.dim(), got: xs.ncols() });
        }
        xs.axis_iter(Axis(0))
            .map(|r| self.log_density(&r.to_vec()))
            .collect()
    }

    /// Weighted reverse pass: `params = Σ_r weights[r]·∇_γ log p(x_r)` and
    /// `x[r] = weights[r]·∇_x log p(x_r)`.
    pub fn backward_batch(&self, xs: ArrayView2<'_, f64>, weights: &[f64]) -> Result<PriorBackward> {
        let d = self.dim();
        if xs.ncols() != d {
            return Err(Error::InputShape { expected: d, got: xs.ncols() });
        }
        if weights.len() != xs.nrows() {
            return Err(Error::InputShape { expected: xs.nrows(), got: weights.len() });
        }
        if let Prior::NiceFlow(f) = self {
            let (log_density, params, x) = f.backward_batch(xs, weights)?;
            return Ok(PriorBackward { log_density, params, x });
        }
        let rows = xs.nrows();
        let mut log_density = Array1::zeros(rows);
        let mut params = vec![0.0; self.n_params()];
        let mut xg = Array2::zeros((rows, d));
        let learn = !params.is_empty();
        let mut buf = vec![0.0; d];
        let mut xrow = vec![0.0; d];
        let mut comp = Vec::new();
        for (r, row) in xs.axis_iter(Axis(0)).enumerate() {
            xrow.iter_mut().zip(row.iter()).for_each(|(a, b)| *a = *b);
            let w = weights[r];
            let pg = if learn { Some(&mut params[..]) } else { None };
            let lp = match self {
                Prior::GaussianMixture(g) => {
                    comp.resize(g.components(), 0.0);
                    g.eval_row(&xrow, w, &mut comp, pg, &mut buf)
                }
                Prior::GammaMixture(g) => {
                    comp.resize(g.components(), 0.0);
                    g.eval_row(&xrow, w, &mut comp, pg, &mut buf)
                }
                Prior::ScaledT(t) => t.eval_row(&xrow, w, &mut buf),
                Prior::FixedKnown(k) => {
                    let lp = k.0.log_density(&xrow);
                    if w != 0.0 {
                        for (b, g) in buf.iter_mut().zip(k.0.grad_x(&xrow)) {
                            *b = w * g;
                        }
                    } else {
                        buf.iter_mut().for_each(|b| *b = 0.0);
                    }
                    lp
                }
                Prior::NiceFlow(_) => unreachable!(),
            };
            log_density[r] = lp;
            xg.row_mut(r).iter_mut().zip(&buf).for_each(|(a, b)| *a = *b);
        }
        Ok(PriorBackward { log_density, params, x: xg })
    }

    pub fn sample(&self, rng: &mut Rng, m: usize) -> Result<Array2<f64>> {
        match self {
            Prior::GaussianMixture(g) => Ok(g.sample(rng, m)),
            Prior::ScaledT(t) => t.sample(rng, m),
            Prior::GammaMixture(g) => g.sample(rng, m),
            Prior::NiceFlow(f) => f.sample(rng, m),
            Prior::FixedKnown(k) => k.0.sample(rng, m).ok_or(Error::UnsupportedSampling("fixed_known prior has no sampler")),
        }
    }
}
