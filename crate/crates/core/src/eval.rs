//! Scoring and inference: integrated squared error, posterior-mean
//! prediction, parametric bootstrap bands and repeated k-fold prediction error.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{log_sum_exp, mean_se};
use crate::kriging::{self, KrigingConfig, KrigingFit, KrigingKind};
use crate::model::Dataset;
use crate::rng::{derive_seed, stream, Rng};
use crate::trainers::{fold_assignment, train, ErrorSpec, FitResult, Method, TrainConfig};
use crate::{Error, Result};

const TAG_POSTERIOR: u64 = 201;
const TAG_BOOT: u64 = 202;
const TAG_PRED_CV: u64 = 203;

/// Where an integrated squared error is computed.
///
/// Grids are cell-centred: an interval with `points` cells is evaluated at the
/// cell midpoints, so the Riemann sum is the midpoint rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalRegion {
    Interval { lo: f64, hi: f64, points: usize },
    /// Union of axis-aligned boxes, evaluated on one uniform grid over
    /// `bounds` with `points` cells per axis. Points in several boxes count once.
    Boxes { boxes: Vec<Vec<[f64; 2]>>, bounds: Vec<[f64; 2]>, points: usize },
}

impl EvalRegion {
    pub fn unit_interval() -> Self {
        EvalRegion::Interval { lo: 0.0, hi: 1.0, points: 1000 }
    }

    pub fn interval(lo: f64, hi: f64, points: usize) -> Self {
        EvalRegion::Interval { lo, hi, points }
    }

    /// A single box with the given per-axis bounds.
    pub fn cube(bounds: Vec<[f64; 2]>, points: usize) -> Self {
        EvalRegion::Boxes { boxes: vec![bounds.clone()], bounds, points }
    }

    /// `[−1, 0.2]×[−1, 0.5] ∪ [−0.5, 1]×[−0.2, 1]` on a 72×72 grid over `[−1, 1]²`.
    pub fn two_rectangles() -> Self {
        EvalRegion::Boxes {
            boxes: vec![vec![[-1.0, 0.2], [-1.0, 0.5]], vec![[-0.5, 1.0], [-0.2, 1.0]]],
            bounds: vec![[-1.0, 1.0], [-1.0, 1.0]],
            points: 72,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EvalRegion::Interval { .. } => 1,
            EvalRegion::Boxes { bounds, .. } => bounds.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EvalRegion::Interval { lo, hi, points } => {
                if !(hi > lo) || *points == 0 {
                    return Err(Error::Config(format!("degenerate interval [{lo}, {hi}] with {points} points")));
                }
            }
            EvalRegion::Boxes { boxes, bounds, points } => {
                if *points == 0 || bounds.is_empty() || boxes.is_empty() {
                    return Err(Error::Config("box region needs bounds, boxes and a positive grid count".into()));
                }
                for b in boxes.iter().chain(std::iter::once(bounds)) {
                    if b.len() != bounds.len() || b.iter().any(|[lo, hi]| !(hi > lo)) {
                        return Err(Error::Config(format!("degenerate or mis-sized box {b:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Lebesgue measure of the region (the union of boxes counted once).
    pub fn measure(&self) -> f64 {
        match self {
            EvalRegion::Interval { lo, hi, .. } => hi - lo,
            EvalRegion::Boxes { boxes, bounds, .. } => union_volume(boxes, bounds.len()),
        }
    }

    /// Grid points inside the region, one per row.
    pub fn grid(&self) -> Array2<f64> {
        match self {
            EvalRegion::Interval { lo, hi, points } => {
                let h = (hi - lo) / *points as f64;
                Array2::from_shape_fn((*points, 1), |(i, _)| lo + (i as f64 + 0.5) * h)
            }
            EvalRegion::Boxes { boxes, bounds, points } => {
                let d = bounds.len();
                let axes: Vec<Vec<f64>> = bounds
                    .iter()
                    .map(|[lo, hi]| {
                        let h = (hi - lo) / *points as f64;
                        (0..*points).map(|i| lo + (i as f64 + 0.5) * h).collect()
                    })
                    .collect();
                let total = points.pow(d as u32);
                let mut rows = Vec::new();
                let mut p = vec![0.0; d];
                for flat in 0..total {
                    let mut rem = flat;
                    for j in (0..d).rev() {
                        p[j] = axes[j][rem % points];
                        rem /= points;
                    }
                    if boxes.iter().any(|b| inside(b, &p)) {
                        rows.extend_from_slice(&p);
                    }
                }
                let m = rows.len() / d;
                Array2::from_shape_vec((m, d), rows).expect("grid rows have d columns")
            }
        }
    }
}

fn inside(b: &[[f64; 2]], p: &[f64]) -> bool {
    b.iter().zip(p).all(|([lo, hi], x)| *x >= *lo && *x <= *hi)
}

/// Exact volume of a union of boxes by coordinate compression.
fn union_volume(boxes: &[Vec<[f64; 2]>], d: usize) -> f64 {
    let mut cuts: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut c: Vec<f64> = boxes.iter().flat_map(|b| [b[j][0], b[j][1]]).collect();
            c.sort_by(f64::total_cmp);
            c.dedup();
            c
        })
        .collect();
    for c in &mut cuts {
        if c.len() < 2 {
            return 0.0;
        }
    }
    let counts: Vec<usize> = cuts.iter().map(|c| c.len() - 1).collect();
    let total: usize = counts.iter().product();
    let mut vol = 0.0;
    let mut centre = vec![0.0; d];
    for flat in 0..total {
        let mut rem = flat;
        let mut cell = 1.0;
        for j in (0..d).rev() {
            let i = rem % counts[j];
            rem /= counts[j];
            centre[j] = 0.5 * (cuts[j][i] + cuts[j][i + 1]);
            cell *= cuts[j][i + 1] - cuts[j][i];
        }
        if boxes.iter().any(|b| inside(b, &centre)) {
            vol += cell;
        }
    }
    vol
}

/// Integrated squared error from values on `region.grid()`.
pub fn ise_values(estimate: ArrayView1<'_, f64>, truth: ArrayView1<'_, f64>, region: &EvalRegion) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::InputShape { expected: truth.len(), got: estimate.len() });
    }
    if truth.is_empty() {
        return Err(Error::Data("empty evaluation grid".into()));
    }
    let mse = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / truth.len() as f64;
    Ok(mse * region.measure())
}

/// `∫ (f̂ − f)²` over the region, by the grid Riemann sum.
pub fn ise(estimate: &dyn Fn(&[f64]) -> f64, truth: &dyn Fn(&[f64]) -> f64, region: &EvalRegion) -> Result<f64> {
    let grid = region.grid();
    let (a, b) = eval_rows(grid.view(), estimate, truth);
    ise_values(a.view(), b.view(), region)
}

fn eval_rows(
    grid: ArrayView2<'_, f64>,
    f: &dyn Fn(&[f64]) -> f64,
    g: &dyn Fn(&[f64]) -> f64,
) -> (Array1<f64>, Array1<f64>) {
    let a = grid.rows().into_iter().map(|r| f(&r.to_vec())).collect();
    let b = grid.rows().into_iter().map(|r| g(&r.to_vec())).collect();
    (a, b)
}

/// A fitted regression function from any method.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Neural(Box<FitResult>),
    Kriging(KrigingFit),
}

impl FittedModel {
    pub fn method(&self) -> Method {
        match self {
            FittedModel::Neural(f) => f.method,
            FittedModel::Kriging(k) => match k.kind {
                KrigingKind::Kile => Method::Kile,
                KrigingKind::Kale => Method::Kale,
            },
        }
    }

    /// `f̂` at raw covariates.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        match self {
            FittedModel::Neural(f) => f.predict(x),
            FittedModel::Kriging(k) => k.predict(x),
        }
    }

    /// Predicted responses for new `(w, ·)` rows: the posterior mean of `f̂`
    /// for neural fits, the kriging predictor at `w` otherwise.
    pub fn predict_response(&self, data: &Dataset, option: PosteriorOption, k: usize, seed: u64) -> Result<Array1<f64>> {
        match self {
            FittedModel::Neural(fit) => {
                let means = predict_posterior_mean(fit, option, data, k, seed)?;
                Ok(means.iter().map(|m| m.value).collect())
            }
            FittedModel::Kriging(fit) => fit.predict(data.w.view()),
        }
    }
}

/// Measurement variance used by kriging: `σ₀²`, or the mean `su2` for
/// per-row errors.
pub fn kriging_sigma0_sq(config: &TrainConfig, data: &Dataset) -> Result<f64> {
    match config.measurement_error {
        ErrorSpec::Gaussian { sigma0 } => Ok(sigma0 * sigma0),
        ErrorSpec::PerRow => data
            .su2
            .as_ref()
            .and_then(|c| c.mean())
            .ok_or_else(|| Error::Config("per-row measurement error needs an su2 column".into())),
    }
}

/// Fits `method` with the given settings.
pub fn fit_method(data: &Dataset, method: Method, config: &TrainConfig, kriging_config: &KrigingConfig) -> Result<FittedModel> {
    match method {
        Method::Kile => Ok(FittedModel::Kriging(kriging::fit(KrigingKind::Kile, data, 0.0, kriging_config)?)),
        Method::Kale => {
            let s0 = kriging_sigma0_sq(config, data)?;
            Ok(FittedModel::Kriging(kriging::fit(KrigingKind::Kale, data, s0, kriging_config)?))
        }
        _ => Ok(FittedModel::Neural(Box::new(train(data, config, method)?))),
    }
}

/// Which posterior of `x` given `w` averages `f̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorOption {
    /// `x ~ N(w, σ₀² I)`, a flat prior.
    Flat,
    /// Prior draws reweighted by `p_U(w − x)`.
    FittedPrior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMean {
    pub value: f64,
    /// Monte Carlo standard error.
    pub se: f64,
    /// Option 2 found no prior mass near `w` and used option 1.
    pub fell_back: bool,
}

/// `E[f̂(x) | w]` for one row. `var_u` holds the raw measurement variance per
/// coordinate; `prior_draws` (raw units) are needed for the fitted-prior option.
pub fn posterior_mean_with(
    f: &dyn Fn(ArrayView2<'_, f64>) -> Result<Array1<f64>>,
    option: PosteriorOption,
    w: &[f64],
    var_u: &[f64],
    prior_draws: Option<ArrayView2<'_, f64>>,
    k: usize,
    rng: &mut Rng,
) -> Result<PosteriorMean> {
    if k == 0 {
        return Err(Error::Config("posterior mean needs at least one draw".into()));
    }
    let d = w.len();
    if var_u.iter().all(|v| *v <= 0.0) {
        let v = f(ArrayView2::from_shape((1, d), w).expect("one row"))?[0];
        return Ok(PosteriorMean { value: v, se: 0.0, fell_back: false });
    }
    let flat = |rng: &mut Rng| -> Result<PosteriorMean> {
        let x = Array2::from_shape_fn((k, d), |(_, j)| {
            let z: f64 = StandardNormal.sample(rng);
            w[j] + var_u[j].max(0.0).sqrt() * z
        });
        let v = f(x.view())?;
        let (m, se) = mean_se(v.as_slice().expect("contiguous"));
        Ok(PosteriorMean { value: m, se, fell_back: false })
    };
    match option {
        PosteriorOption::Flat => flat(rng),
        PosteriorOption::FittedPrior => {
            let draws = prior_draws.ok_or_else(|| Error::Config("fitted-prior option needs prior draws".into()))?;
            let log_w: Vec<f64> = draws
                .rows()
                .into_iter()
                .map(|x| {
                    (0..d)
                        .map(|j| if var_u[j] > 0.0 { -0.5 * (w[j] - x[j]).powi(2) / var_u[j] } else { 0.0 })
                        .sum::<f64>()
                })
                .collect();
            let lse = log_sum_exp(log_w.iter().copied());
            // every weight would underflow to zero in linear space
            let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !lse.is_finite() || top < f64::MIN_POSITIVE.ln() {
                warn!("no prior mass near w = {w:?}; falling back to the flat-prior posterior");
                let mut out = flat(rng)?;
                out.fell_back = true;
                return Ok(out);
            }
            let weights: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
            let v = f(draws)?;
            let m: f64 = weights.iter().zip(&v).map(|(a, b)| a * b).sum();
            let se = weights.iter().zip(&v).map(|(a, b)| a * a * (b - m).powi(2)).sum::<f64>().sqrt();
            Ok(PosteriorMean { value: m, se, fell_back: false })
        }
    }
}

/// Raw measurement variances of row `i` under a fit's error settings.
fn row_var_u(config: &TrainConfig, data: &Dataset, i: usize) -> Result<Vec<f64>> {
    let d = data.dim();
    match config.measurement_error {
        ErrorSpec::Gaussian { sigma0 } => Ok(vec![sigma0 * sigma0; d]),
        ErrorSpec::PerRow => {
            let su2 = data.su2.as_ref().ok_or_else(|| Error::Config("per-row measurement error needs an su2 column".into()))?;
            Ok(vec![su2[i]; d])
        }
    }
}

/// Posterior-mean predictions of `f̂` at every row of `data` (raw units).
pub fn predict_posterior_mean(fit: &FitResult, option: PosteriorOption, data: &Dataset, k: usize, seed: u64) -> Result<Vec<PosteriorMean>> {
    let f = |x: ArrayView2<'_, f64>| fit.predict(x);
    let st = &fit.standardization;
    let mut rng = stream(seed, TAG_POSTERIOR);
    let mut out = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let var_u = row_var_u(&fit.config, data, i)?;
        let draws = match option {
            PosteriorOption::Flat => None,
            PosteriorOption::FittedPrior => Some(st.x_from_std(fit.model.prior.sample(&mut rng, k)?.view())),
        };
        let w = data.w.row(i).to_vec();
        out.push(posterior_mean_with(&f, option, &w, &var_u, draws.as_ref().map(|a| a.view()), k, &mut rng)?);
    }
    Ok(out)
}

/// Pointwise percentile band from bootstrap refits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapBand {
    pub estimate: Array1<f64>,
    pub lo: Array1<f64>,
    pub hi: Array1<f64>,
    pub successes: usize,
    pub failures: usize,
    /// Fewer than 80% of the refits succeeded.
    pub unreliable: bool,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (a, t) = (pos.floor() as usize, pos - pos.floor());
    if a + 1 < sorted.len() {
        sorted[a] * (1.0 - t) + sorted[a + 1] * t
    } else {
        sorted[a]
    }
}

/// One resampled dataset: `x* = x̂(w, y)`, `w* = x* + U`, `y* = f̂(x*) + ε`.
/// Per-row known variances are kept as observed.
pub fn bootstrap_dataset(fit: &FitResult, data: &Dataset, seed: u64) -> Result<Dataset> {
    let x = fit.imputed_x(data)?;
    let fx = fit.predict(x.view())?;
    let sigma2 = fit.noise_raw();
    let mut rng = crate::rng::seeded(seed);
    let mut w = x.clone();
    for i in 0..data.n() {
        let var_u = row_var_u(&fit.config, data, i)?;
        for (j, v) in var_u.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            w[[i, j]] += v.max(0.0).sqrt() * z;
        }
    }
    let y = Array1::from_iter((0..data.n()).map(|i| {
        let extra = if fit.config.heteroscedastic { data.se2.as_ref().map_or(0.0, |c| c[i]) } else { 0.0 };
        let z: f64 = StandardNormal.sample(&mut rng);
        fx[i] + (sigma2 + extra).max(0.0).sqrt() * z
    }));
    Dataset::new(w, y, data.su2.clone(), data.se2.clone())
}

/// Parametric bootstrap band for `f̂` on `grid` from `b ≥ 100` refits.
pub fn bootstrap_band(fit: &FitResult, data: &Dataset, grid: ArrayView2<'_, f64>, b: usize, level: f64, seed: u64) -> Result<BootstrapBand> {
    if b < 100 {
        return Err(Error::Config(format!("a bootstrap band needs at least 100 replicates, got {b}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("band level must lie in (0, 1), got {level}")));
    }
    let estimate = fit.predict(grid)?;
    let curves: Vec<Option<Array1<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let rs = derive_seed(derive_seed(seed, TAG_BOOT), r as u64);
            let run = || -> Result<Array1<f64>> {
                let boot = bootstrap_dataset(fit, data, rs)?;
                let mut cfg = fit.config.clone();
                cfg.seed = derive_seed(rs, 1);
                let refit = train(&boot, &cfg, fit.method)?;
                if refit.aborted {
                    return Err(Error::Numerical("bootstrap refit aborted".into()));
                }
                refit.predict(grid)
            };
            match run() {
                Ok(c) => Some(c),
                Err(e) => {
                    warn!("bootstrap replicate {r} dropped: {e}");
                    None
                }
            }
        })
        .collect();
    let ok: Vec<&Array1<f64>> = curves.iter().flatten().collect();
    let successes = ok.len();
    if successes == 0 {
        return Err(Error::Numerical("every bootstrap refit failed".into()));
    }
    let m = grid.nrows();
    let (mut lo, mut hi) = (Array1::zeros(m), Array1::zeros(m));
    let tail = (1.0 - level) / 2.0;
    let mut col = vec![0.0; successes];
    for g in 0..m {
        for (c, curve) in col.iter_mut().zip(&ok) {
            *c = curve[g];
        }
        col.sort_by(f64::total_cmp);
        lo[g] = quantile(&col, tail);
        hi[g] = quantile(&col, 1.0 - tail);
    }
    Ok(BootstrapBand { estimate, lo, hi, successes, failures: b - successes, unreliable: (successes as f64) < 0.8 * b as f64 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionError {
    /// Test mean squared error per repetition.
    pub per_rep: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean over repetitions.
    pub se: f64,
}

/// Repeated k-fold test MSE with a caller-supplied fit-and-predict routine.
pub fn prediction_error_cv_with(
    data: &Dataset,
    folds: usize,
    reps: usize,
    seed: u64,
    fit_predict: &(dyn Fn(&Dataset, &Dataset, u64) -> Result<Array1<f64>> + Sync),
) -> Result<PredictionError> {
    if folds < 2 || folds > data.n() || reps == 0 {
        return Err(Error::Config(format!("cannot run {reps} repetitions of {folds}-fold prediction error on {} rows", data.n())));
    }
    let per_rep: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<f64> {
            let rep_seed = derive_seed(derive_seed(seed, TAG_PRED_CV), rep as u64);
            let parts = fold_assignment(data.n(), folds, rep_seed);
            let mut sse = 0.0;
            for (f, held) in parts.iter().enumerate() {
                let train_rows: Vec<usize> = (0..data.n()).filter(|i| held.binary_search(i).is_err()).collect();
                let test = data.subset(held);
                let pred = fit_predict(&data.subset(&train_rows), &test, derive_seed(rep_seed, f as u64))?;
                sse += pred.iter().zip(&test.y).map(|(p, y)| (p - y).powi(2)).sum::<f64>();
            }
            Ok(sse / data.n() as f64)
        })
        .collect::<Result<_>>()?;
    let (mean, se) = mean_se(&per_rep);
    Ok(PredictionError { per_rep, mean, se })
}

/// Repeated k-fold prediction error of `method`, predicting held-out `y` by
/// the posterior mean of `f̂` (neural fits) or the kriging predictor.
pub fn prediction_error_cv(
    data: &Dataset,
    method: Method,
    config: &TrainConfig,
    option: PosteriorOption,
    k_pred: usize,
    folds: usize,
    reps: usize,
    seed: u64,
) -> Result<PredictionError> {
    let kc = KrigingConfig::default();
    prediction_error_cv_with(data, folds, reps, seed, &|train_set, test, s| {
        let mut cfg = config.clone();
        cfg.seed = s;
        fit_method(train_set, method, &cfg, &kc)?.predict_response(test, option, k_pred, derive_seed(s, 1))
    })
}
