//! Training procedures: the importance-weighted fit with doubly reparametrized
//! encoder gradients, and the NN, MJL, VAE and GA alternatives.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{gradients, sigma2_update, tau2_update, McBatch, PhiGradient, Weighting};
use crate::flow::NiceFlow;
use crate::model::{normal_log_density, Dataset, MeasurementError, MemModel, ResponseNoise, Standardization, VARIANCE_FLOOR};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp};
use crate::priors::{GammaMixture, GaussianMixture, Prior, ScaledT};
use crate::rng::{derive_seed, stream, Rng};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_DRAWS: u64 = 3;
const TAG_FOLDS: u64 = 4;
const TAG_VALID: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nnme,
    Nn,
    Mjl,
    Vae,
    Ga,
    Kile,
    Kale,
}

impl Method {
    pub const ALL: [Method; 7] = [Method::Nnme, Method::Nn, Method::Mjl, Method::Vae, Method::Ga, Method::Kile, Method::Kale];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nnme => "nnme",
            Method::Nn => "nn",
            Method::Mjl => "mjl",
            Method::Vae => "vae",
            Method::Ga => "ga",
            Method::Kile => "kile",
            Method::Kale => "kale",
        }
    }

    pub fn is_kriging(self) -> bool {
        matches!(self, Method::Kile | Method::Kale)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected nnme, nn, mjl, vae, ga, kile or kale)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
}

fn relu() -> Activation {
    Activation::Relu
}

impl NetShape {
    pub fn uniform(layers: usize, width: usize) -> Self {
        NetShape { hidden: vec![width; layers], activation: Activation::Relu }
    }
}

/// Prior family chosen in a run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// Scaled t for d = 1, NICE otherwise.
    Auto,
    ScaledT { scale: f64, df: f64 },
    GaussianMixture { components: usize },
    GammaMixture { components: usize },
    Nice { layers: usize, hidden: Vec<usize> },
    /// A fully specified prior in standardized coordinates.
    Fixed { prior: Prior },
}

impl PriorSpec {
    /// Builds the initial prior. `w_std` are standardized covariates; the gamma
    /// mixture is initialised on raw values.
    pub fn build(&self, w_std: &Array2<f64>, st: &Standardization, rng: &mut Rng) -> Result<Prior> {
        let d = w_std.ncols();
        match self {
            PriorSpec::Auto if d == 1 => Ok(Prior::ScaledT(ScaledT::new(1, 2.0, 3.0)?)),
            PriorSpec::Auto => Ok(Prior::NiceFlow(NiceFlow::new(d, 4, &[32, 32], rng)?)),
            PriorSpec::ScaledT { scale, df } => Ok(Prior::ScaledT(ScaledT::new(d, *scale, *df)?)),
            PriorSpec::GaussianMixture { components } => Ok(Prior::GaussianMixture(GaussianMixture::from_data(w_std.view(), *components)?)),
            PriorSpec::GammaMixture { components } => {
                let raw = st.x_from_std(w_std.view());
                Ok(Prior::GammaMixture(GammaMixture::from_raw_data(raw.view(), *components, st.x_mean.clone(), st.x_scale.clone())?))
            }
            PriorSpec::Nice { layers, hidden } => Ok(Prior::NiceFlow(NiceFlow::new(d, *layers, hidden, rng)?)),
            PriorSpec::Fixed { prior } => {
                if prior.dim() != d {
                    return Err(Error::Config(format!("fixed prior has dimension {}, data has {d}", prior.dim())));
                }
                Ok(prior.clone())
            }
        }
    }
}

/// How `p_U` is specified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorSpec {
    /// `U ~ N(0, σ₀² I)` in raw units.
    Gaussian { sigma0: f64 },
    /// `U_i ~ N(0, su2_i I)` from the dataset's `su2` column.
    PerRow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Importance samples per row.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Draws per row for the VAE objective.
    #[serde(default = "one")]
    pub l: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Defaults to `min(512, n)`.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda0: f64,
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_net")]
    pub decoder: NetShape,
    #[serde(default = "default_net")]
    pub encoder: NetShape,
    #[serde(default = "auto_prior")]
    pub prior: PriorSpec,
    pub measurement_error: ErrorSpec,
    /// Uses `τ² + se2_i` as the response variance.
    #[serde(default)]
    pub heteroscedastic: bool,
    #[serde(default)]
    pub residual_link: bool,
    #[serde(default = "default_pretrain")]
    pub pretrain_epochs: usize,
}

fn default_k() -> usize {
    50
}
fn one() -> usize {
    1
}
fn default_epochs() -> usize {
    500
}
fn default_lambda() -> f64 {
    1e-5
}
fn default_net() -> NetShape {
    NetShape::uniform(6, 32)
}
fn auto_prior() -> PriorSpec {
    PriorSpec::Auto
}
fn default_pretrain() -> usize {
    200
}

impl TrainConfig {
    pub fn new(error: ErrorSpec) -> Self {
        TrainConfig {
            k: default_k(),
            l: 1,
            epochs: default_epochs(),
            batch_size: None,
            lambda0: default_lambda(),
            lambda1: default_lambda(),
            lambda2: 0.0,
            adam: AdamConfig::default(),
            seed: 0,
            decoder: default_net(),
            encoder: default_net(),
            prior: PriorSpec::Auto,
            measurement_error: error,
            heteroscedastic: false,
            residual_link: false,
            pretrain_epochs: default_pretrain(),
        }
    }

    pub fn gaussian(sigma0: f64) -> Self {
        Self::new(ErrorSpec::Gaussian { sigma0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 {
            return Err(Error::Config("K and L must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if [self.lambda0, self.lambda1, self.lambda2].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("penalties must be non-negative".into()));
        }
        if self.decoder.hidden.iter().chain(&self.encoder.hidden).any(|w| *w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if let ErrorSpec::Gaussian { sigma0 } = self.measurement_error {
            if !(sigma0 >= 0.0) {
                return Err(Error::Config("σ₀ must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn batch_for(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(512).min(n)
    }

    /// Decoder plus encoder parameter count for an input dimension `d`.
    pub fn network_size(&self, d: usize) -> usize {
        let size = |input: usize, shape: &NetShape, output: usize| {
            let mut widths = vec![input];
            widths.extend(&shape.hidden);
            widths.push(output);
            widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>()
        };
        size(d, &self.decoder, 1) + size(d + 1, &self.encoder, 2 * d)
    }
}

/// Per-epoch record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// σ̂² or τ̂² (standardized units).
    pub noise: f64,
    /// Mean per-row training objective.
    pub objective: f64,
    /// Mean weighted squared residual on the training rows.
    pub rss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub model: MemModel,
    /// The `x̂ = g(w, y)` network of the joint-likelihood fit.
    pub mjl_map: Option<Mlp>,
    pub standardization: Standardization,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub aborted: bool,
    pub skipped_rows: usize,
    pub wall_seconds: f64,
    pub config: TrainConfig,
}

impl FitResult {
    /// Fitted regression function at raw covariates, in raw response units.
    pub fn predict(&self, x: ndarray::ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let xs = self.standardization.x_to_std(x);
        let f = self.model.decoder.predict_batch(xs.view())?;
        Ok(f.column(0).mapv(|v| self.standardization.y_from_std(v)))
    }

    /// Point imputation of the true covariates in raw units: the encoder
    /// mean, the joint-likelihood map, or `w` itself for plain regression.
    pub fn imputed_x(&self, data: &Dataset) -> Result<Array2<f64>> {
        let st = &self.standardization;
        let ds = data.standardized(st);
        let x = match (self.method, &self.mjl_map) {
            (Method::Nn, _) => return Ok(data.w.clone()),
            _ if self.model.error.is_dirac() => return Ok(data.w.clone()),
            (Method::Mjl, Some(map)) => {
                let mut x = map.predict_batch(MemModel::encoder_input(ds.w.view(), ds.y.view()).view())?;
                if self.config.residual_link {
                    x += &ds.w;
                }
                x
            }
            _ => self.model.proposal_params_batch(ds.w.view(), ds.y.view())?.0,
        };
        Ok(st.x_from_std(x.view()))
    }

    pub fn epochs_completed(&self) -> usize {
        self.trace.len()
    }

    /// Fitted noise level σ̂² (or τ̂²) in raw response units.
    pub fn noise_raw(&self) -> f64 {
        self.model.noise.level() * self.standardization.y_scale.powi(2)
    }
}

struct Optimizers {
    theta: AdamState,
    phi: AdamState,
    gamma: AdamState,
}

fn minibatches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

/// `scale·g − 2λ·p`: ascent on the penalized objective.
fn penalize(grads: &mut [f64], params: &[f64], scale: f64, lambda: f64) {
    for (g, p) in grads.iter_mut().zip(params) {
        *g = scale * *g - 2.0 * lambda * p;
    }
}

fn error_model(spec: &ErrorSpec, data: &Dataset, st: &Standardization) -> Result<MeasurementError> {
    match spec {
        ErrorSpec::Gaussian { sigma0 } => Ok(MeasurementError::isotropic(*sigma0, st)),
        ErrorSpec::PerRow if data.su2.is_none() => Err(Error::Config("per-row measurement error needs an su2 column".into())),
        ErrorSpec::PerRow => Ok(MeasurementError::per_row(st)),
    }
}

fn build_net(input: usize, shape: &NetShape, output: usize, rng: &mut Rng) -> Result<Mlp> {
    Mlp::with_hidden(input, &shape.hidden, output, shape.activation, rng)
}

/// Decoder MSE fit on `(w, y)`; returns the final training MSE.
fn fit_regression(decoder: &mut Mlp, data: &Dataset, epochs: usize, batch: usize, lambda: f64, adam: AdamConfig, rng: &mut Rng) -> Result<f64> {
    let n = data.n();
    let mut opt = AdamState::new(decoder.n_params(), adam);
    for _ in 0..epochs {
        let mut sse = 0.0;
        for rows in minibatches(n, batch, rng) {
            let w = data.w.select(Axis(0), &rows);
            let tape = decoder.forward_batch(w.view())?;
            let mut og = Array2::zeros((rows.len(), 1));
            for (r, &i) in rows.iter().enumerate() {
                let res = data.y[i] - tape.output()[[r, 0]];
                sse += res * res;
                // ∂/∂f of −(y − f)²
                og[[r, 0]] = 2.0 * res;
            }
            let mut g = decoder.backward_batch(&tape, og.view())?.params;
            penalize(&mut g, decoder.params(), n as f64 / rows.len() as f64, lambda);
            opt.ascend_mlp(decoder, &g)?;
        }
        if !sse.is_finite() {
            return Err(Error::Numerical("regression pretraining diverged".into()));
        }
    }
    let f = decoder.predict_batch(data.w.view())?;
    Ok(data.y.iter().zip(f.column(0)).map(|(y, f)| (y - f).powi(2)).sum::<f64>() / n as f64)
}

/// Maximum-likelihood fit of a learnable prior on the observed `w`.
fn fit_prior(prior: &mut Prior, w: &Array2<f64>, epochs: usize, batch: usize, lambda: f64, adam: AdamConfig, rng: &mut Rng) -> Result<()> {
    if prior.n_params() == 0 {
        return Ok(());
    }
    let n = w.nrows();
    let mut opt = AdamState::new(prior.n_params(), adam);
    for _ in 0..epochs {
        for rows in minibatches(n, batch, rng) {
            let xs = w.select(Axis(0), &rows);
            let back = prior.backward_batch(xs.view(), &vec![1.0; rows.len()])?;
            if back.log_density.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("prior pretraining produced a non-finite density".into()));
            }
            let mut params = prior.params();
            let mut g = back.params;
            penalize(&mut g, &params, n as f64 / rows.len() as f64, lambda);
            opt.ascend(&mut params, &g)?;
            prior.set_params(&params)?;
        }
    }
    Ok(())
}

/// `softplus⁻¹(v)` for `v > 0`.
fn softplus_inverse(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

/// Moves the encoder towards the flat-prior posterior `N(w, var_U)` by least
/// squares on its raw outputs, so the joint fit starts from sensible draws.
fn pretrain_encoder(model: &mut MemModel, data: &Dataset, epochs: usize, batch: usize, lambda: f64, adam: AdamConfig, rng: &mut Rng) -> Result<()> {
    let (n, d) = (data.n(), data.dim());
    let mut target = Array2::zeros((n, 2 * d));
    for i in 0..n {
        let su2 = data.su2.as_ref().map(|c| c[i]);
        for j in 0..d {
            if !model.residual_link {
                target[[i, j]] = data.w[[i, j]];
            }
            let s = model.error.spread(j, su2).powi(2);
            target[[i, d + j]] = softplus_inverse((s - model.scale_floor).max(1e-12));
        }
    }
    let input = MemModel::encoder_input(data.w.view(), data.y.view());
    let mut opt = AdamState::new(model.encoder.n_params(), adam);
    for _ in 0..epochs {
        for rows in minibatches(n, batch, rng) {
            let tape = model.encoder.forward_batch(input.select(Axis(0), &rows).view())?;
            let t = target.select(Axis(0), &rows);
            // ∂/∂out of −‖target − out‖²
            let og = (&t - &tape.output()) * 2.0;
            let mut g = model.encoder.backward_batch(&tape, og.view())?.params;
            penalize(&mut g, model.encoder.params(), n as f64 / rows.len() as f64, lambda);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("encoder pretraining diverged".into()));
            }
            opt.ascend_mlp(&mut model.encoder, &g)?;
        }
    }
    Ok(())
}

/// Initial decoder and prior, fitted as if the covariates were exact.
pub struct Pretrained {
    pub decoder: Mlp,
    pub prior: Prior,
    pub mse: f64,
}

pub fn pretrain(data_std: &Dataset, st: &Standardization, config: &TrainConfig, rng: &mut Rng) -> Result<Pretrained> {
    let d = data_std.dim();
    let mut decoder = build_net(d, &config.decoder, 1, rng)?;
    let mut prior = config.prior.build(&data_std.w, st, rng)?;
    let batch = config.batch_for(data_std.n());
    let mse = fit_regression(&mut decoder, data_std, config.pretrain_epochs, batch, config.lambda0, config.adam, rng)?;
    fit_prior(&mut prior, &data_std.w, config.pretrain_epochs, batch, config.lambda2, config.adam, rng)?;
    Ok(Pretrained { decoder, prior, mse })
}

fn initial_noise(config: &TrainConfig, data_std: &Dataset, mse: f64) -> Result<ResponseNoise> {
    if config.heteroscedastic {
        let se2 = data_std.se2.as_ref().ok_or_else(|| Error::Config("heteroscedastic fit needs an se2 column".into()))?;
        Ok(ResponseNoise::Heteroscedastic { tau2: (mse - se2.mean().unwrap_or(0.0)).max(0.0) })
    } else {
        Ok(ResponseNoise::Homoscedastic { sigma2: mse.max(VARIANCE_FLOOR) })
    }
}

fn update_noise(model: &mut MemModel, rss: &[f64], se2: Option<&Array1<f64>>) -> Result<()> {
    let level = match model.noise {
        ResponseNoise::Homoscedastic { .. } => sigma2_update(rss).max(VARIANCE_FLOOR),
        ResponseNoise::Heteroscedastic { .. } => {
            let se2 = se2.ok_or_else(|| Error::Config("τ² update needs se2".into()))?;
            tau2_update(rss, se2.as_slice().expect("contiguous"))?
        }
    };
    model.noise.set_level(level);
    Ok(())
}

/// Fits any of the neural methods.
pub fn train(data: &Dataset, config: &TrainConfig, method: Method) -> Result<FitResult> {
    match method {
        Method::Nnme | Method::Ga | Method::Vae => train_joint(data, config, method),
        Method::Nn => train_nn(data, config),
        Method::Mjl => train_mjl(data, config),
        Method::Kile | Method::Kale => Err(Error::Config(format!("{method} is a kriging method, not a neural trainer"))),
    }
}

pub fn train_nnme(data: &Dataset, config: &TrainConfig) -> Result<FitResult> {
    train_joint(data, config, Method::Nnme)
}

pub fn train_ga(data: &Dataset, config: &TrainConfig) -> Result<FitResult> {
    train_joint(data, config, Method::Ga)
}

pub fn train_vae(data: &Dataset, config: &TrainConfig) -> Result<FitResult> {
    train_joint(data, config, Method::Vae)
}

struct Setup {
    st: Standardization,
    data_std: Dataset,
    model: MemModel,
    rng: Rng,
}

fn setup(data: &Dataset, config: &TrainConfig) -> Result<Setup> {
    config.validate()?;
    let st = Standardization::fit(data);
    let data_std = data.standardized(&st);
    let error = error_model(&config.measurement_error, data, &st)?;
    let mut rng = stream(config.seed, TAG_INIT);
    let pre = pretrain(&data_std, &st, config, &mut rng)?;
    let d = data.dim();
    let encoder = build_net(d + 1, &config.encoder, 2 * d, &mut rng)?;
    let noise = initial_noise(config, &data_std, pre.mse)?;
    let mut model = MemModel::new(pre.decoder, encoder, pre.prior, noise, error)?.with_residual_link(config.residual_link);
    if !model.error.is_dirac() {
        let batch = config.batch_for(data_std.n());
        pretrain_encoder(&mut model, &data_std, config.pretrain_epochs, batch, config.lambda1, config.adam, &mut rng)?;
    }
    Ok(Setup { st, data_std, model, rng })
}

fn train_joint(data: &Dataset, config: &TrainConfig, method: Method) -> Result<FitResult> {
    let start = Instant::now();
    let Setup { st, data_std, mut model, .. } = setup(data, config)?;
    let n = data_std.n();
    let batch = config.batch_for(n);
    let (k, weighting, phi) = match method {
        Method::Nnme => (config.k, Weighting::SelfNormalized, PhiGradient::Dreg),
        Method::Ga => (config.k, Weighting::SelfNormalized, PhiGradient::Plain),
        Method::Vae => (config.l, Weighting::Uniform, PhiGradient::Plain),
        _ => unreachable!(),
    };
    let mut opt = Optimizers {
        theta: AdamState::new(model.decoder.n_params(), config.adam),
        phi: AdamState::new(model.encoder.n_params(), config.adam),
        gamma: AdamState::new(model.prior.n_params(), config.adam),
    };
    let mut shuffle = stream(config.seed, TAG_SHUFFLE);
    let draw_seed = derive_seed(config.seed, TAG_DRAWS);
    let mut step: u64 = 0;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, MemModel)> = None;
    let mut bad_epochs = 0;
    let mut aborted = false;
    let mut skipped_rows = 0;
    let se2 = data_std.se2.clone();

    for epoch in 0..config.epochs {
        let mut rss = vec![0.0; n];
        let mut objective = 0.0;
        let mut failed = false;
        for rows in minibatches(n, batch, &mut shuffle) {
            let mut rng = stream(draw_seed, step);
            step += 1;
            let mc = McBatch::draw(&model, &data_std, &rows, k, &mut rng)?;
            skipped_rows += mc.n_degenerate();
            let row_obj = match weighting {
                Weighting::SelfNormalized => mc.row_elbo(),
                Weighting::Uniform => mc.row_vae(),
            };
            objective += row_obj.iter().filter(|v| v.is_finite()).sum::<f64>();
            if row_obj.iter().any(|v| !v.is_finite()) {
                failed = true;
            }
            for (r, v) in rows.iter().zip(mc.weighted_rss(weighting)) {
                rss[*r] = v;
            }
            let mut g = gradients(&model, &mc, weighting, phi)?;
            let scale = n as f64 / rows.len() as f64;
            penalize(&mut g.theta, model.decoder.params(), scale, config.lambda0);
            penalize(&mut g.phi, model.encoder.params(), scale, config.lambda1);
            let mut gamma = model.prior.params();
            penalize(&mut g.gamma, &gamma, scale, config.lambda2);
            // a rejected step leaves every block untouched
            let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
            if !(finite(&g.theta) && finite(&g.phi) && finite(&g.gamma)) {
                failed = true;
                continue;
            }
            opt.theta.ascend_mlp(&mut model.decoder, &g.theta)?;
            opt.phi.ascend_mlp(&mut model.encoder, &g.phi)?;
            if !gamma.is_empty() {
                opt.gamma.ascend(&mut gamma, &g.gamma)?;
                model.prior.set_params(&gamma)?;
            }
        }
        update_noise(&mut model, &rss, se2.as_ref())?;
        let mean_rss = rss.iter().sum::<f64>() / n as f64;
        trace.push(EpochRecord { epoch, noise: model.noise.level(), objective: objective / n as f64, rss: mean_rss });
        if failed || !mean_rss.is_finite() {
            bad_epochs += 1;
            if bad_epochs >= 3 {
                aborted = true;
                break;
            }
            continue;
        }
        bad_epochs = 0;
        if best.as_ref().is_none_or(|(b, _, _)| mean_rss < *b) {
            best = Some((mean_rss, epoch, model.clone()));
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (trace.len().saturating_sub(1), model),
    };
    Ok(FitResult {
        method,
        model,
        mjl_map: None,
        standardization: st,
        trace,
        best_epoch,
        aborted,
        skipped_rows,
        wall_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

/// Regression on `(w, y)` ignoring measurement error.
pub fn train_nn(data: &Dataset, config: &TrainConfig) -> Result<FitResult> {
    let start = Instant::now();
    config.validate()?;
    let st = Standardization::fit(data);
    let data_std = data.standardized(&st);
    let error = error_model(&config.measurement_error, data, &st)?;
    let d = data.dim();
    let mut rng = stream(config.seed, TAG_INIT);
    let mut decoder = build_net(d, &config.decoder, 1, &mut rng)?;
    let mut shuffle = stream(config.seed, TAG_SHUFFLE);
    let batch = config.batch_for(data.n());
    let mut trace = Vec::with_capacity(config.epochs);
    let mut opt = AdamState::new(decoder.n_params(), config.adam);
    let n = data.n();
    for epoch in 0..config.epochs {
        let mut sse = 0.0;
        for rows in minibatches(n, batch, &mut shuffle) {
            let w = data_std.w.select(Axis(0), &rows);
            let tape = decoder.forward_batch(w.view())?;
            let mut og = Array2::zeros((rows.len(), 1));
            for (r, &i) in rows.iter().enumerate() {
                let res = data_std.y[i] - tape.output()[[r, 0]];
                sse += res * res;
                og[[r, 0]] = 2.0 * res;
            }
            let mut g = decoder.backward_batch(&tape, og.view())?.params;
            penalize(&mut g, decoder.params(), n as f64 / rows.len() as f64, config.lambda0);
            opt.ascend_mlp(&mut decoder, &g)?;
        }
        let mse = sse / n as f64;
        if !mse.is_finite() {
            return Err(Error::Numerical(format!("regression diverged at epoch {epoch}")));
        }
        trace.push(EpochRecord { epoch, noise: mse, objective: -mse, rss: mse });
    }
    let mse = trace.last().map(|t| t.rss).unwrap_or(1.0);
    let encoder = build_net(d + 1, &config.encoder, 2 * d, &mut rng)?;
    let prior = config.prior.build(&data_std.w, &st, &mut rng)?;
    let model = MemModel::new(decoder, encoder, prior, ResponseNoise::Homoscedastic { sigma2: mse.max(VARIANCE_FLOOR) }, error)?;
    Ok(FitResult {
        method: Method::Nn,
        model,
        mjl_map: None,
        standardization: st,
        best_epoch: trace.len() - 1,
        trace,
        aborted: false,
        skipped_rows: 0,
        wall_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

/// Joint maximization over the regression function and a map `x̂ = g(w, y)`.
pub fn train_mjl(data: &Dataset, config: &TrainConfig) -> Result<FitResult> {
    let start = Instant::now();
    let Setup { st, data_std, mut model, mut rng } = setup(data, config)?;
    let d = data.dim();
    let n = data.n();
    let mut map = build_net(d + 1, &config.encoder, d, &mut rng)?;
    let mut shuffle = stream(config.seed, TAG_SHUFFLE);
    let batch = config.batch_for(n);
    let mut opt_theta = AdamState::new(model.decoder.n_params(), config.adam);
    let mut opt_phi = AdamState::new(map.n_params(), config.adam);
    let mut trace = Vec::with_capacity(config.epochs);
    let dirac = model.error.is_dirac();
    let mut bad_epochs = 0;
    let mut aborted = false;

    for epoch in 0..config.epochs {
        let mut res2 = vec![0.0; n];
        let mut objective = 0.0;
        for rows in minibatches(n, batch, &mut shuffle) {
            let sub = data_std.subset(&rows);
            let b = rows.len();
            let map_tape = map.forward_batch(MemModel::encoder_input(sub.w.view(), sub.y.view()).view())?;
            let mut xhat = if dirac { sub.w.clone() } else { map_tape.output().to_owned() };
            if config.residual_link && !dirac {
                xhat += &sub.w;
            }
            let dec_tape = model.decoder.forward_batch(xhat.view())?;
            let mut og = Array2::zeros((b, 1));
            let mut u = vec![0.0; d];
            let mut ug = vec![0.0; d];
            let mut err_grad = Array2::zeros((b, d));
            for r in 0..b {
                let se2 = sub.se2.as_ref().map(|c| c[r]);
                let ve = model.noise.variance(se2);
                let res = sub.y[r] - dec_tape.output()[[r, 0]];
                res2[rows[r]] = res * res;
                objective += normal_log_density(res, ve);
                og[[r, 0]] = res / ve;
                if !dirac {
                    for j in 0..d {
                        u[j] = sub.w[[r, j]] - xhat[[r, j]];
                    }
                    objective += model.error.log_density_grad(&u, sub.su2.as_ref().map(|c| c[r]), &mut ug);
                    for j in 0..d {
                        err_grad[[r, j]] = -ug[j];
                    }
                }
            }
            let dec = model.decoder.backward_batch(&dec_tape, og.view())?;
            let scale = n as f64 / b as f64;
            let mut g_theta = dec.params;
            penalize(&mut g_theta, model.decoder.params(), scale, config.lambda0);
            opt_theta.ascend_mlp(&mut model.decoder, &g_theta)?;
            if !dirac {
                let xg = dec.input + err_grad;
                let mut g_phi = map.backward_batch(&map_tape, xg.view())?.params;
                penalize(&mut g_phi, map.params(), scale, config.lambda1);
                opt_phi.ascend_mlp(&mut map, &g_phi)?;
            }
        }
        update_noise(&mut model, &res2, data_std.se2.as_ref())?;
        let mean = res2.iter().sum::<f64>() / n as f64;
        trace.push(EpochRecord { epoch, noise: model.noise.level(), objective: objective / n as f64, rss: mean });
        if !objective.is_finite() {
            bad_epochs += 1;
            if bad_epochs >= 3 {
                aborted = true;
                break;
            }
        } else {
            bad_epochs = 0;
        }
    }
    Ok(FitResult {
        method: Method::Mjl,
        model,
        mjl_map: Some(map),
        standardization: st,
        best_epoch: trace.len().saturating_sub(1),
        trace,
        aborted,
        skipped_rows: 0,
        wall_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

/// Held-out scores of a fitted model, in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    /// Weighted residual mean square.
    pub rss: f64,
    /// Mean per-row bound on `log p(w, y)`.
    pub elbo: f64,
}

/// Weighted residual mean square and importance-weighted bound on held-out
/// rows, with fresh draws and frozen parameters.
pub fn validation_loss(fit: &FitResult, fold: &Dataset, k: usize, seed: u64) -> Result<ValidationScore> {
    let st = &fit.standardization;
    let data_std = fold.standardized(st);
    let n = fold.n();
    let y2 = st.y_scale * st.y_scale;
    let log_jac: f64 = st.y_scale.ln() + st.x_scale.iter().map(|s| s.ln()).sum::<f64>();
    match fit.method {
        Method::Nn | Method::Mjl => {
            let x = match (&fit.mjl_map, fit.model.error.is_dirac()) {
                (Some(map), false) => {
                    let mut x = map.predict_batch(MemModel::encoder_input(data_std.w.view(), data_std.y.view()).view())?;
                    if fit.config.residual_link {
                        x += &data_std.w;
                    }
                    x
                }
                _ => data_std.w.clone(),
            };
            let f = fit.model.decoder.predict_batch(x.view())?;
            let mut rss = 0.0;
            let mut ll = 0.0;
            for i in 0..n {
                let r = data_std.y[i] - f[[i, 0]];
                rss += r * r;
                ll += normal_log_density(r, fit.model.noise.variance(data_std.se2.as_ref().map(|c| c[i])));
            }
            Ok(ValidationScore { rss: rss / n as f64 * y2, elbo: ll / n as f64 - st.y_scale.ln() })
        }
        _ => {
            let rows: Vec<usize> = (0..n).collect();
            let mut rng = stream(seed, TAG_VALID);
            let mut rss = 0.0;
            let mut elbo = 0.0;
            for chunk in rows.chunks(512) {
                let mc = McBatch::draw(&fit.model, &data_std, chunk, k, &mut rng)?;
                rss += mc.weighted_rss(Weighting::SelfNormalized).sum();
                elbo += mc.row_elbo().sum();
            }
            Ok(ValidationScore { rss: rss / n as f64 * y2, elbo: elbo / n as f64 - log_jac })
        }
    }
}

/// Seeded partition of `0..n` into `folds` groups of near-equal size.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, TAG_FOLDS));
    let mut out = vec![Vec::new(); folds];
    for (p, i) in idx.into_iter().enumerate() {
        out[p % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvRow {
    pub config: usize,
    pub fold: usize,
    pub rss: f64,
    pub elbo: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
    /// Mean validation RSS per grid entry.
    pub mean_rss: Vec<f64>,
    pub mean_elbo: Vec<f64>,
    pub best: usize,
}

/// K-fold selection over a grid of configs by mean validation RSS. Ties go
/// to the smaller network, then the smaller K.
pub fn cross_validate(data: &Dataset, grid: &[TrainConfig], method: Method, folds: usize, seed: u64) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::Config("cross-validation grid is empty".into()));
    }
    if folds < 2 || folds > data.n() {
        return Err(Error::Config(format!("cannot split {} rows into {folds} folds", data.n())));
    }
    let parts = fold_assignment(data.n(), folds, seed);
    let mut rows = Vec::new();
    let mut mean_rss = Vec::with_capacity(grid.len());
    let mut mean_elbo = Vec::with_capacity(grid.len());
    for (c, config) in grid.iter().enumerate() {
        let (mut rs, mut es) = (0.0, 0.0);
        for (f, held) in parts.iter().enumerate() {
            let train_rows: Vec<usize> = (0..data.n()).filter(|i| held.binary_search(i).is_err()).collect();
            let mut cfg = config.clone();
            cfg.seed = derive_seed(seed, (c * folds + f) as u64);
            let fit = train(&data.subset(&train_rows), &cfg, method)?;
            let score = validation_loss(&fit, &data.subset(held), cfg.k, cfg.seed)?;
            rs += score.rss;
            es += score.elbo;
            rows.push(CvRow { config: c, fold: f, rss: score.rss, elbo: score.elbo });
        }
        mean_rss.push(rs / folds as f64);
        mean_elbo.push(es / folds as f64);
    }
    let d = data.dim();
    let best = (0..grid.len())
        .min_by(|&a, &b| {
            mean_rss[a]
                .total_cmp(&mean_rss[b])
                .then(grid[a].network_size(d).cmp(&grid[b].network_size(d)))
                .then(grid[a].k.cmp(&grid[b].k))
        })
        .expect("non-empty grid");
    Ok(CvReport { rows, mean_rss, mean_elbo, best })
}
