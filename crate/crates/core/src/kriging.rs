//! Gaussian-process baselines: kriging that ignores location error (KILE) and
//! kriging with the error-adjusted kernels (KALE).
//!
//! Parameters are fitted on log scale by multi-start Nelder–Mead. KALE
//! maximizes the Gaussian log-likelihood with the adjusted Gram matrix as
//! covariance; that pseudo-likelihood is our reading of an unspecified step.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::linalg::{jitter_ladder, Cholesky};
use crate::model::{Dataset, LN_2PI};
use crate::{Error, Result};

pub const DEFAULT_MAX_N: usize = 2500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrigingKind {
    Kile,
    Kale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrigingParams {
    /// Kernel amplitude.
    pub tau2: f64,
    /// Inverse squared length scale.
    pub beta: f64,
    /// Nugget (response noise variance).
    pub sigma2: f64,
    /// Known measurement-error variance; ignored by KILE.
    pub sigma0_sq: f64,
}

impl KrigingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau2 > 0.0 && self.beta > 0.0 && self.sigma2 >= 0.0 && self.sigma0_sq >= 0.0) {
            return Err(Error::Config(format!("invalid kriging parameters {self:?}")));
        }
        Ok(())
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Training covariance between rows `i ≠ j`.
pub fn gram_entry(kind: KrigingKind, p: &KrigingParams, d2: f64, dim: usize) -> f64 {
    match kind {
        KrigingKind::Kile => p.tau2 * (-p.beta * d2).exp(),
        KrigingKind::Kale => {
            let c = 1.0 + 4.0 * p.beta * p.sigma0_sq;
            p.tau2 * (-p.beta * d2 / c).exp() / c.powf(dim as f64 / 2.0)
        }
    }
}

/// Covariance between a target location and a training row.
pub fn cross_entry(kind: KrigingKind, p: &KrigingParams, d2: f64, dim: usize) -> f64 {
    match kind {
        KrigingKind::Kile => p.tau2 * (-p.beta * d2).exp(),
        KrigingKind::Kale => {
            let c = 1.0 + p.beta * p.sigma0_sq;
            p.tau2 * (-p.beta * d2 / c).exp() / c.powf(dim as f64 / 2.0)
        }
    }
}

/// Kernel matrix of the training rows; the diagonal is `τ²` for both kinds.
pub fn gram(kind: KrigingKind, p: &KrigingParams, w: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = w.dim();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        k[[i, i]] = p.tau2;
        for j in 0..i {
            let v = gram_entry(kind, p, sq_dist(w.row(i), w.row(j)), d);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

fn covariance(kind: KrigingKind, p: &KrigingParams, w: ArrayView2<'_, f64>) -> Result<Cholesky> {
    let mut c = gram(kind, p, w);
    for i in 0..c.nrows() {
        c[[i, i]] += p.sigma2;
    }
    Cholesky::factor(c.view(), &jitter_ladder(1e-10 * p.tau2, 1e-6 * p.tau2))
}

/// Gaussian log-likelihood of centred responses under `K + σ²I`.
pub fn log_likelihood(kind: KrigingKind, p: &KrigingParams, w: ArrayView2<'_, f64>, y_centred: ArrayView1<'_, f64>) -> Result<f64> {
    let chol = covariance(kind, p, w)?;
    let alpha = chol.solve(y_centred);
    let n = y_centred.len() as f64;
    Ok(-0.5 * y_centred.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n * LN_2PI)
}

/// A fitted predictor: parameters plus the solved weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KrigingFit {
    pub kind: KrigingKind,
    pub params: KrigingParams,
    pub w: Array2<f64>,
    pub y_mean: f64,
    /// `(K + σ²I)⁻¹ (y − ȳ)`
    pub alpha: Array1<f64>,
    pub log_likelihood: f64,
    pub jitter: f64,
}

impl KrigingFit {
    /// Solves for the predictor weights at fixed parameters.
    pub fn with_params(kind: KrigingKind, params: KrigingParams, data: &Dataset) -> Result<Self> {
        params.validate()?;
        let y_mean = data.y.mean().unwrap_or(0.0);
        let yc = data.y.mapv(|v| v - y_mean);
        let chol = covariance(kind, &params, data.w.view())?;
        let alpha = chol.solve(yc.view());
        let n = yc.len() as f64;
        let log_likelihood = -0.5 * yc.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n * LN_2PI;
        Ok(KrigingFit { kind, params, w: data.w.clone(), y_mean, alpha, log_likelihood, jitter: chol.jitter })
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        let d = self.w.ncols();
        let xv = ArrayView1::from(x);
        let s: f64 = self
            .w
            .rows()
            .into_iter()
            .zip(&self.alpha)
            .map(|(wi, a)| a * cross_entry(self.kind, &self.params, sq_dist(xv, wi), d))
            .sum();
        s + self.y_mean
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.w.ncols() {
            return Err(Error::InputShape { expected: self.w.ncols(), got: x.ncols() });
        }
        Ok(x.rows().into_iter().map(|r| self.predict_one(&r.to_vec())).collect())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrigingConfig {
    #[serde(default = "default_max_n")]
    pub max_n: usize,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_evals")]
    pub max_evals: usize,
}

fn default_max_n() -> usize {
    DEFAULT_MAX_N
}
fn default_starts() -> usize {
    5
}
fn default_evals() -> usize {
    300
}

impl Default for KrigingConfig {
    fn default() -> Self {
        KrigingConfig { max_n: DEFAULT_MAX_N, starts: default_starts(), max_evals: default_evals() }
    }
}

/// Maximizes the (pseudo-)likelihood over `(log τ², log β, log σ²)`.
///
/// `sigma0_sq` is the known measurement variance (only KALE uses it).
pub fn fit(kind: KrigingKind, data: &Dataset, sigma0_sq: f64, config: &KrigingConfig) -> Result<KrigingFit> {
    let n = data.n();
    if n > config.max_n {
        return Err(Error::Config(format!("kriging is capped at n = {}, got {n}", config.max_n)));
    }
    if !(sigma0_sq >= 0.0) {
        return Err(Error::Config("σ₀² must be non-negative".into()));
    }
    if config.starts == 0 {
        return Err(Error::Config("need at least one optimizer start".into()));
    }
    let y_mean = data.y.mean().unwrap_or(0.0);
    let yc = data.y.mapv(|v| v - y_mean);
    let var_y = (yc.dot(&yc) / n as f64).max(1e-12);
    let spread: f64 = {
        let d = data.dim();
        let mut s = 0.0;
        for j in 0..d {
            let c = data.w.column(j);
            let m = c.mean().unwrap_or(0.0);
            s += c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        }
        s.max(1e-12)
    };
    let unpack = |t: &[f64]| KrigingParams { tau2: t[0].exp(), beta: t[1].exp(), sigma2: t[2].exp(), sigma0_sq };
    let objective = |t: &[f64]| -> f64 {
        if t.iter().any(|v| !v.is_finite() || v.abs() > 40.0) {
            return f64::INFINITY;
        }
        match log_likelihood(kind, &unpack(t), data.w.view(), yc.view()) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    };
    // Starts spread over length scale and signal-to-noise.
    let starts: Vec<[f64; 3]> = [(1.0, 0.1), (0.25, 0.1), (4.0, 0.1), (1.0, 0.5), (16.0, 0.02), (0.0625, 0.5), (1.0, 0.01)]
        .iter()
        .cycle()
        .take(config.starts)
        .map(|(len, noise)| {
            let beta = 1.0 / (len * spread);
            [(var_y * (1.0 - noise)).ln(), beta.ln(), (var_y * noise).ln()]
        })
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        let (t, v) = nelder_mead(&objective, s, 1.0, config.max_evals, 1e-9);
        if v.is_finite() && best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((t, v));
        }
    }
    let (t, _) = best.ok_or_else(|| Error::Numerical("kriging likelihood is not finite at any start".into()))?;
    KrigingFit::with_params(kind, unpack(&t), data)
}

/// Minimizes `f` from `x0` with initial simplex step `step`.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_evals: usize, tol: f64) -> (Vec<f64>, f64) {
    let m = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(m + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..m {
        let mut p = x0.to_vec();
        p[i] += step;
        let v = f(&p);
        simplex.push((p, v));
    }
    let mut evals = m + 1;
    let at = |c: &[f64], towards: &[f64], t: f64| -> Vec<f64> { c.iter().zip(towards).map(|(a, b)| a + t * (b - a)).collect() };
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (simplex[0].1, simplex[m].1);
        if hi.is_finite() && (hi - lo).abs() <= tol * (1.0 + lo.abs()) {
            break;
        }
        let centroid: Vec<f64> =
            (0..m).map(|j| simplex[..m].iter().map(|(p, _)| p[j]).sum::<f64>() / m as f64).collect();
        let worst = simplex[m].0.clone();
        let xr = at(&centroid, &worst, -1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = at(&centroid, &worst, -2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[m] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[m - 1].1 {
            simplex[m] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[m].1 {
                let xc = at(&centroid, &xr, 0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = at(&centroid, &worst, 0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < simplex[m].1.min(fr) {
                simplex[m] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p = at(&best, &entry.0, 0.5);
                    let v = f(&p);
                    *entry = (p, v);
                }
                evals += m;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}
