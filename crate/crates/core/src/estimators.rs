//! Monte Carlo machinery over importance-weighted bounds.
//!
//! A [`McBatch`] holds one set of standard-normal draws for a block of rows and
//! everything the model computed from them. All estimators below are
//! deterministic functions of the batch.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{normal_log_density, Dataset, MemModel, LN_2PI};
use crate::nn::{sigmoid, GradTape};
use crate::rng::Rng;

/// How draws of one row are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Softmax of log-weights over the K draws (importance-weighted bound).
    SelfNormalized,
    /// `1/K` each: the average of K single-draw bounds.
    Uniform,
}

/// Which φ-gradient to form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiGradient {
    /// Squared normalized weights, pathwise through `x` only.
    Dreg,
    /// Full derivative of the weighted log-ratio, including q's parameters.
    Plain,
    None,
}

pub struct McBatch {
    pub rows: Vec<usize>,
    pub k: usize,
    /// `(B·K) × d`; row `i·K + k` is draw `k` of batch row `i`.
    pub z: Array2<f64>,
    pub mu: Array2<f64>,
    pub var: Array2<f64>,
    pub x: Array2<f64>,
    /// Decoder output at each draw.
    pub f: Array1<f64>,
    /// `B × K` log importance weights.
    pub log_w: Array2<f64>,
    /// Rows whose every weight is non-finite.
    pub degenerate: Vec<bool>,
    enc_tape: Option<GradTape>,
    dec_tape: GradTape,
    w: Array2<f64>,
    y: Array1<f64>,
    su2: Option<Array1<f64>>,
    se2: Option<Array1<f64>>,
}

/// Gradient blocks for decoder (θ), encoder (φ) and prior (γ), summed over the
/// batch rows.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub gamma: Vec<f64>,
}

pub fn log_sum_exp(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax of one row of log-weights. A row with no finite
/// maximum yields zeros.
pub fn normalized_weights(log_w: &[f64]) -> Vec<f64> {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return vec![0.0; log_w.len()];
    }
    let e: Vec<f64> = log_w.iter().map(|a| (a - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn draw_z(rng: &mut Rng, rows: usize, k: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows * k, d), || StandardNormal.sample(rng))
}

impl McBatch {
    /// Draws K standard-normal vectors per row and evaluates the model.
    pub fn draw(model: &MemModel, data: &Dataset, rows: &[usize], k: usize, rng: &mut Rng) -> Result<Self> {
        let z = draw_z(rng, rows.len(), k, model.dim());
        Self::evaluate(model, data, rows, k, z)
    }

    /// Evaluates the model at given draws. `data` must be standardized.
    pub fn evaluate(model: &MemModel, data: &Dataset, rows: &[usize], k: usize, z: Array2<f64>) -> Result<Self> {
        let d = model.dim();
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if data.dim() != d {
            return Err(Error::InputShape { expected: d, got: data.dim() });
        }
        if z.dim() != (rows.len() * k, d) {
            return Err(Error::InputShape { expected: rows.len() * k, got: z.nrows() });
        }
        if model.error.needs_su2() && data.su2.is_none() {
            return Err(Error::Config("per-row measurement error needs an su2 column".into()));
        }
        if model.noise.is_heteroscedastic() && data.se2.is_none() {
            return Err(Error::Config("heteroscedastic response noise needs an se2 column".into()));
        }
        let sub = data.subset(rows);
        let b = rows.len();
        let dirac = model.error.is_dirac();

        let (enc_tape, mu, var) = if dirac {
            (None, sub.w.clone(), Array2::zeros((b, d)))
        } else {
            let tape = model.encoder.forward_batch(MemModel::encoder_input(sub.w.view(), sub.y.view()).view())?;
            let (mu, var) = model.proposal_from_output(sub.w.view(), tape.output());
            (Some(tape), mu, var)
        };

        let mut x = Array2::zeros((b * k, d));
        for i in 0..b {
            for kk in 0..k {
                let r = i * k + kk;
                for j in 0..d {
                    x[[r, j]] = if dirac { mu[[i, j]] } else { mu[[i, j]] + var[[i, j]].sqrt() * z[[r, j]] };
                }
            }
        }

        let dec_tape = model.decoder.forward_batch(x.view())?;
        let f = dec_tape.output().column(0).to_owned();
        let log_prior = model.prior.log_density_batch(x.view())?;

        let mut log_w = Array2::zeros((b, k));
        let mut u = vec![0.0; d];
        let mut ug = vec![0.0; d];
        for i in 0..b {
            let su2 = sub.su2.as_ref().map(|c| c[i]);
            let se2 = sub.se2.as_ref().map(|c| c[i]);
            let ve = model.noise.variance(se2);
            let log_q_const: f64 = if dirac { 0.0 } else { (0..d).map(|j| -0.5 * (LN_2PI + var[[i, j]].ln())).sum() };
            for kk in 0..k {
                let r = i * k + kk;
                let mut lw = log_prior[r] + normal_log_density(sub.y[i] - f[r], ve);
                if !dirac {
                    for j in 0..d {
                        u[j] = sub.w[[i, j]] - x[[r, j]];
                    }
                    lw += model.error.log_density_grad(&u, su2, &mut ug);
                    let zz: f64 = z.row(r).iter().map(|v| v * v).sum();
                    lw -= log_q_const - 0.5 * zz;
                }
                log_w[[i, kk]] = if lw.is_nan() { f64::NEG_INFINITY } else { lw };
            }
        }
        let degenerate = log_w.axis_iter(Axis(0)).map(|r| r.iter().all(|v| !v.is_finite())).collect();

        Ok(McBatch {
            rows: rows.to_vec(),
            k,
            z,
            mu,
            var,
            x,
            f,
            log_w,
            degenerate,
            enc_tape,
            dec_tape,
            w: sub.w,
            y: sub.y,
            su2: sub.su2,
            se2: sub.se2,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }

    pub fn n_degenerate(&self) -> usize {
        self.degenerate.iter().filter(|d| **d).count()
    }

    /// `B × K` combination weights.
    pub fn weights(&self, weighting: Weighting) -> Array2<f64> {
        let mut out = Array2::zeros(self.log_w.dim());
        for (i, row) in self.log_w.axis_iter(Axis(0)).enumerate() {
            if self.degenerate[i] {
                continue;
            }
            let w = match weighting {
                Weighting::SelfNormalized => normalized_weights(row.as_slice().expect("contiguous")),
                Weighting::Uniform => vec![1.0 / self.k as f64; self.k],
            };
            out.row_mut(i).assign(&Array1::from(w));
        }
        out
    }

    /// Per-row bound `log (1/K) Σ_k β_k`.
    pub fn row_elbo(&self) -> Array1<f64> {
        let lk = (self.k as f64).ln();
        self.log_w.axis_iter(Axis(0)).map(|r| log_sum_exp(r.iter().cloned()) - lk).collect()
    }

    /// Per-row average of single-draw bounds, the multi-draw VAE objective.
    pub fn row_vae(&self) -> Array1<f64> {
        self.log_w.mean_axis(Axis(1)).expect("K ≥ 1")
    }

    /// Per-row `Σ_k weight_k (y − f(x_k))²`.
    pub fn weighted_rss(&self, weighting: Weighting) -> Array1<f64> {
        let w = self.weights(weighting);
        (0..self.batch_size())
            .map(|i| (0..self.k).map(|kk| w[[i, kk]] * (self.y[i] - self.f[i * self.k + kk]).powi(2)).sum())
            .collect()
    }

    pub fn row_se2(&self) -> Option<&Array1<f64>> {
        self.se2.as_ref()
    }
}

/// Sum of the per-row importance-weighted bounds.
pub fn elbo_estimate(batch: &McBatch) -> f64 {
    batch.row_elbo().sum()
}

/// Gradients of the batch objective with respect to θ, γ and (optionally) φ.
///
/// The objective is `Σ_i log (1/K) Σ_k β_ik` for self-normalized weighting
/// and `Σ_i (1/K) Σ_k log β_ik` for uniform weighting.
pub fn gradients(model: &MemModel, batch: &McBatch, weighting: Weighting, phi: PhiGradient) -> Result<Gradients> {
    let d = model.dim();
    let (b, k) = (batch.batch_size(), batch.k);
    let wt = batch.weights(weighting);
    let wt_flat: Vec<f64> = wt.iter().cloned().collect();
    let dirac = model.error.is_dirac();

    // Decoder: ∂/∂f of log N(y − f; v) is (y − f)/v.
    let mut out_grad = Array2::zeros((b * k, 1));
    for i in 0..b {
        let ve = model.noise.variance(batch.se2.as_ref().map(|c| c[i]));
        for kk in 0..k {
            let r = i * k + kk;
            out_grad[[r, 0]] = wt_flat[r] * (batch.y[i] - batch.f[r]) / ve;
        }
    }
    let dec = model.decoder.backward_batch(&batch.dec_tape, out_grad.view())?;
    let prior = model.prior.backward_batch(batch.x.view(), &wt_flat)?;

    let phi_grads = if dirac || phi == PhiGradient::None {
        vec![0.0; model.encoder.n_params()]
    } else {
        let tape = batch.enc_tape.as_ref().expect("encoder tape outside Dirac mode");
        // gx[r] = weight_r · ∂ log p(w, y, x)/∂x at x_r
        let mut gx = prior.x;
        gx += &dec.input;
        let mut ug = vec![0.0; d];
        let mut u = vec![0.0; d];
        for i in 0..b {
            let su2 = batch.su2.as_ref().map(|c| c[i]);
            for kk in 0..k {
                let r = i * k + kk;
                for j in 0..d {
                    u[j] = batch.w[[i, j]] - batch.x[[r, j]];
                }
                model.error.log_density_grad(&u, su2, &mut ug);
                for j in 0..d {
                    // u = w − x, so ∂/∂x = −∂/∂u
                    gx[[r, j]] -= wt_flat[r] * ug[j];
                }
            }
        }
        let mut enc_grad = Array2::zeros((b, 2 * d));
        let raw = tape.output();
        for i in 0..b {
            for j in 0..d {
                let s = batch.var[[i, j]];
                let sd = s.sqrt();
                let (mut dmu, mut ds) = (0.0, 0.0);
                for kk in 0..k {
                    let r = i * k + kk;
                    let z = batch.z[[r, j]];
                    let path = match phi {
                        PhiGradient::Dreg => dreg_term(wt_flat[r], gx[[r, j]], z, sd),
                        _ => gx[[r, j]],
                    };
                    dmu += path;
                    ds += path * z / (2.0 * sd);
                }
                if phi == PhiGradient::Plain {
                    // −log q contributes ½ log s per draw, weighted
                    let wsum: f64 = (0..k).map(|kk| wt_flat[i * k + kk]).sum();
                    ds += wsum / (2.0 * s);
                }
                enc_grad[[i, j]] = dmu;
                enc_grad[[i, d + j]] = ds * sigmoid(raw[[i, d + j]]);
            }
        }
        model.encoder.backward_batch(tape, enc_grad.view())?.params
    };

    Ok(Gradients { theta: dec.params, phi: phi_grads, gamma: prior.params })
}

/// `w̃·(w̃·∂x log p + w̃·z/√s)` given `gx = w̃·∂x log p`.
fn dreg_term(wt: f64, gx: f64, z: f64, sd: f64) -> f64 {
    wt * (gx + wt * z / sd)
}

/// `(1/n) Σ_i Σ_k w̃_ik (y_i − f(x_ik))²` over the supplied per-row sums.
pub fn sigma2_update(weighted_rss: &[f64]) -> f64 {
    let n = weighted_rss.len() as f64;
    (weighted_rss.iter().sum::<f64>() / n).max(0.0)
}

/// `max(0, (1/n) Σ_i (Σ_k w̃_ik r_ik² − σ²_εi))`.
pub fn tau2_update(weighted_rss: &[f64], se2: &[f64]) -> Result<f64> {
    if se2.len() != weighted_rss.len() {
        return Err(Error::Config("τ² update needs one known variance per row".into()));
    }
    let n = weighted_rss.len() as f64;
    Ok((weighted_rss.iter().zip(se2).map(|(a, b)| a - b).sum::<f64>() / n).max(0.0))
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for m in 2..=n {
                let p2 = ((2 * m - 1) as f64 * x * p1 - (m - 1) as f64 * p0) / m as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn adaptive_gl(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: usize, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let mid = 0.5 * (a + b);
    let left = gl_panel(f, a, mid, rule);
    let right = gl_panel(f, mid, b, rule);
    if depth == 0 || (left + right - whole).abs() <= tol {
        return left + right;
    }
    adaptive_gl(f, a, mid, left, 0.5 * tol, depth - 1, rule) + adaptive_gl(f, mid, b, right, 0.5 * tol, depth - 1, rule)
}

fn gl_panel(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    rule.0.iter().zip(&rule.1).map(|(x, w)| w * f(c + h * x)).sum::<f64>() * h
}

/// `log ∫ exp(g(x)) dx` over `[lo, hi]` by adaptive Gauss–Legendre, shifted
/// by the maximum of `g` found on a scan so nothing overflows.
pub fn log_integrate(g: &dyn Fn(f64) -> f64, lo: f64, hi: f64, abs_tol: f64) -> f64 {
    let scan = 2001;
    let shift = (0..scan)
        .map(|i| g(lo + (hi - lo) * i as f64 / (scan - 1) as f64))
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return f64::NEG_INFINITY;
    }
    let rule = gauss_legendre(15);
    let h = |x: f64| {
        let v = g(x) - shift;
        if v.is_finite() { v.exp() } else { 0.0 }
    };
    // Split into panels first so narrow peaks are not missed by the first estimate.
    let panels = 64;
    let width = (hi - lo) / panels as f64;
    let total: f64 = (0..panels)
        .map(|p| {
            let (a, b) = (lo + p as f64 * width, lo + (p + 1) as f64 * width);
            let whole = gl_panel(&h, a, b, &rule);
            adaptive_gl(&h, a, b, whole, abs_tol / panels as f64, 30, &rule)
        })
        .sum();
    shift + total.ln()
}

/// Marginal log-likelihood `log p(w, y)` of one row for `d = 1`, integrating
/// the joint density over `w ± 8` error standard deviations.
pub fn marginal_loglik_quadrature(model: &MemModel, w: f64, y: f64, su2: Option<f64>, se2: Option<f64>) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::Unsupported(format!("quadrature oracle is one-dimensional, model has d = {}", model.dim())));
    }
    if model.error.is_dirac() {
        return model.joint_log_density(&[w], y, &[w], su2, se2);
    }
    let sd = model.error.spread(0, su2);
    let g = |x: f64| model.joint_log_density(&[w], y, &[x], su2, se2).unwrap_or(f64::NEG_INFINITY);
    Ok(log_integrate(&g, w - 8.0 * sd, w + 8.0 * sd, 1e-10))
}

/// Mean and standard error of a slice.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Rows `start..start+len` of a `(B·K) × d` block belonging to batch row `i`.
pub fn draws_of(batch: &McBatch, i: usize) -> ArrayView2<'_, f64> {
    batch.x.slice(s![i * batch.k..(i + 1) * batch.k, ..])
}
