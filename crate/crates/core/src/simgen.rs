//! Synthetic data generators: named test functions, Gaussian-process draws,
//! random ReLU surfaces, covariate laws and noise injection.
//!
//! Everything is a pure function of the scenario and its seed.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eval::EvalRegion;
use crate::linalg::{jitter_ladder, Cholesky};
use crate::model::Dataset;
use crate::nn::{Activation, Mlp};
use crate::rng::{stream, Rng};
use crate::{Error, Result};

const TAG_X: u64 = 101;
const TAG_F: u64 = 102;
const TAG_NOISE: u64 = 103;
const TAG_VARIANCES: u64 = 104;

/// Closed-form regression functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedFunction {
    /// `sin(πx)`
    Sin,
    /// `(x₁x₂ + x₃)²`
    Trivariate,
    /// `sin((3x − 1.5)π) / (1 + 4(6x − 3)²[sgn(2x − 1) + 1])`
    Berry,
    /// `x`, handy for smoke tests.
    Linear,
}

impl NamedFunction {
    pub fn dim(self) -> usize {
        match self {
            NamedFunction::Trivariate => 3,
            _ => 1,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        match self {
            NamedFunction::Sin => (PI * x[0]).sin(),
            NamedFunction::Trivariate => (x[0] * x[1] + x[2]).powi(2),
            NamedFunction::Berry => {
                let t = x[0];
                let sgn = match 2.0 * t - 1.0 {
                    v if v > 0.0 => 1.0,
                    v if v < 0.0 => -1.0,
                    _ => 0.0,
                };
                ((3.0 * t - 1.5) * PI).sin() / (1.0 + 4.0 * (6.0 * t - 3.0).powi(2) * (sgn + 1.0))
            }
            NamedFunction::Linear => x[0],
        }
    }
}

impl FromStr for NamedFunction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin" => Ok(NamedFunction::Sin),
            "trivariate" => Ok(NamedFunction::Trivariate),
            "berry" => Ok(NamedFunction::Berry),
            "linear" => Ok(NamedFunction::Linear),
            _ => Err(Error::Config(format!("unknown function `{s}`"))),
        }
    }
}

/// Where the regression function comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSource {
    Named { name: NamedFunction },
    /// One draw from a zero-mean GP with kernel `amplitude·exp(−β‖x − x'‖²)`.
    Gp { beta: f64, amplitude: f64 },
    /// Pointwise maximum of two independent GP draws.
    GpMax { beta1: f64, beta2: f64, amplitude: f64 },
    /// Two GPs joined at the median covariate (d = 1 only).
    GpSpliced { beta1: f64, beta2: f64, amplitude: f64 },
    /// Random ReLU network on `[−1, 1]²`.
    NnSurface { layers: usize, width: usize, first_sd: f64, rest_sd: f64 },
}

impl FunctionSource {
    pub fn is_gp(&self) -> bool {
        matches!(self, FunctionSource::Gp { .. } | FunctionSource::GpMax { .. } | FunctionSource::GpSpliced { .. })
    }
}

/// Sampler for a user-defined covariate law.
pub trait CovariateSampler: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut Rng) -> Vec<f64>;
}

#[derive(Clone)]
pub struct CustomLaw(pub Arc<dyn CovariateSampler>);

impl fmt::Debug for CustomLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomLaw(dim = {})", self.0.dim())
    }
}

impl PartialEq for CustomLaw {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Distribution of the true covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum XLaw {
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Independent Beta(a, b) coordinates.
    Beta { a: f64, b: f64, dim: usize },
    /// Mixture of axis-aligned Gaussians.
    GaussianMixture { weights: Vec<f64>, means: Vec<Vec<f64>>, sds: Vec<Vec<f64>> },
    #[serde(skip)]
    Custom(CustomLaw),
}

impl XLaw {
    pub fn uniform(lo: f64, hi: f64, dim: usize) -> Self {
        XLaw::UniformBox { lo: vec![lo; dim], hi: vec![hi; dim] }
    }

    /// `0.7·N((−0.4, 0.2), diag(0.2², 0.3²)) + 0.3·N((0.2, 0.4), diag(0.3², 0.2²))`
    pub fn two_component_mixture() -> Self {
        XLaw::GaussianMixture {
            weights: vec![0.7, 0.3],
            means: vec![vec![-0.4, 0.2], vec![0.2, 0.4]],
            sds: vec![vec![0.2, 0.3], vec![0.3, 0.2]],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            XLaw::UniformBox { lo, .. } => lo.len(),
            XLaw::Beta { dim, .. } => *dim,
            XLaw::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            XLaw::Custom(c) => c.0.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            XLaw::UniformBox { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
                    return bad(format!("bad uniform box {lo:?} × {hi:?}"));
                }
            }
            XLaw::Beta { a, b, dim } => {
                if !(*a > 0.0 && *b > 0.0) || *dim == 0 {
                    return bad(format!("bad beta law ({a}, {b}) in {dim} dims"));
                }
            }
            XLaw::GaussianMixture { weights, means, sds } => {
                let d = self.dim();
                if weights.is_empty()
                    || d == 0
                    || means.len() != weights.len()
                    || sds.len() != weights.len()
                    || means.iter().chain(sds).any(|v| v.len() != d)
                    || weights.iter().any(|w| !(*w > 0.0))
                    || sds.iter().flatten().any(|s| !(*s > 0.0))
                {
                    return bad("inconsistent gaussian mixture law".into());
                }
            }
            XLaw::Custom(_) => {}
        }
        Ok(())
    }

    fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            XLaw::UniformBox { lo, hi } => lo.iter().zip(hi).map(|(a, b)| rng.random_range(*a..*b)).collect(),
            XLaw::Beta { a, b, dim } => {
                let law = Beta::new(*a, *b).expect("validated beta parameters");
                (0..*dim).map(|_| law.sample(rng)).collect()
            }
            XLaw::GaussianMixture { weights, means, sds } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut c = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        c = i;
                        break;
                    }
                    u -= w;
                }
                means[c]
                    .iter()
                    .zip(&sds[c])
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    })
                    .collect()
            }
            XLaw::Custom(c) => c.0.sample(rng),
        }
    }
}

/// Per-row known variances drawn uniformly from fixed lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroNoise {
    pub su2_choices: Vec<f64>,
    pub se2_choices: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub function: FunctionSource,
    pub x_law: XLaw,
    pub n: usize,
    /// Measurement-error standard deviation.
    pub sigma0: f64,
    /// Response-noise standard deviation (τ when `hetero` is set).
    pub sigma: f64,
    pub seed: u64,
    pub region: EvalRegion,
    #[serde(default)]
    pub hetero: Option<HeteroNoise>,
}

pub const SCENARIOS: [&str; 10] = [
    "exp1-sin",
    "exp2-trivariate",
    "ex1-berry",
    "ex1-berry-beta",
    "ex2-gp-spliced",
    "ex3-nn-surface",
    "ex3-gp-mixture",
    "ex3-gp-max",
    "depth-gp-uniform",
    "hetero-sin",
];

impl ScenarioSpec {
    /// A named experiment with its default size and noise levels.
    pub fn named(name: &str, seed: u64) -> Result<Self> {
        let named = |f| FunctionSource::Named { name: f };
        let (function, x_law, n, sigma0, sigma, region, hetero) = match name {
            "exp1-sin" => (named(NamedFunction::Sin), XLaw::uniform(-2.0, 2.0, 1), 1000, 0.1, 0.1, EvalRegion::interval(-2.0, 2.0, 1000), None),
            "exp2-trivariate" => (
                named(NamedFunction::Trivariate),
                XLaw::uniform(-1.0, 1.0, 3),
                1000,
                0.1,
                0.1,
                EvalRegion::cube(vec![[-1.0, 1.0]; 3], 20),
                None,
            ),
            "ex1-berry" => (named(NamedFunction::Berry), XLaw::uniform(0.0, 1.0, 1), 2000, 0.2, 0.1, EvalRegion::unit_interval(), None),
            "ex1-berry-beta" => (
                named(NamedFunction::Berry),
                XLaw::Beta { a: 2.0, b: 2.0, dim: 1 },
                2000,
                0.2,
                0.1,
                EvalRegion::unit_interval(),
                None,
            ),
            "ex2-gp-spliced" => (
                FunctionSource::GpSpliced { beta1: 16.0, beta2: 64.0, amplitude: 1.0 },
                XLaw::uniform(0.0, 1.0, 1),
                1000,
                0.1,
                0.2,
                EvalRegion::unit_interval(),
                None,
            ),
            "ex3-nn-surface" => (
                FunctionSource::NnSurface { layers: 5, width: 32, first_sd: 1.0, rest_sd: 0.2 },
                XLaw::uniform(-1.0, 1.0, 2),
                1000,
                0.1,
                0.2,
                EvalRegion::cube(vec![[-1.0, 1.0]; 2], 72),
                None,
            ),
            "ex3-gp-mixture" => (
                FunctionSource::Gp { beta: 16.0, amplitude: 1.0 },
                XLaw::two_component_mixture(),
                1000,
                0.1,
                0.2,
                EvalRegion::two_rectangles(),
                None,
            ),
            "ex3-gp-max" => (
                FunctionSource::GpMax { beta1: 16.0, beta2: 4.0, amplitude: 1.0 },
                XLaw::two_component_mixture(),
                1000,
                0.1,
                0.2,
                EvalRegion::two_rectangles(),
                None,
            ),
            "depth-gp-uniform" => (
                FunctionSource::Gp { beta: 16.0, amplitude: 1.0 },
                XLaw::uniform(-1.0, 1.0, 2),
                500,
                0.2,
                0.2,
                EvalRegion::cube(vec![[-1.0, 1.0]; 2], 72),
                None,
            ),
            "hetero-sin" => (
                named(NamedFunction::Sin),
                XLaw::uniform(-2.0, 2.0, 1),
                1000,
                0.0,
                0.1,
                EvalRegion::interval(-2.0, 2.0, 1000),
                Some(HeteroNoise { su2_choices: vec![0.0025, 0.01, 0.04], se2_choices: vec![0.0025, 0.01, 0.04] }),
            ),
            _ => {
                return Err(Error::Config(format!("unknown scenario `{name}`; known: {}", SCENARIOS.join(", "))));
            }
        };
        Ok(ScenarioSpec { name: name.to_string(), function, x_law, n, sigma0, sigma, seed, region, hetero })
    }

    pub fn dim(&self) -> usize {
        self.x_law.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(self.sigma0 >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config("σ₀ and σ must be non-negative".into()));
        }
        self.x_law.validate()?;
        self.region.validate()?;
        if self.region.dim() != self.dim() {
            return Err(Error::Config(format!("region is {}-D but covariates are {}-D", self.region.dim(), self.dim())));
        }
        match &self.function {
            FunctionSource::Named { name } if name.dim() != self.dim() => {
                return Err(Error::Config(format!("function needs {} covariates, law has {}", name.dim(), self.dim())));
            }
            FunctionSource::GpSpliced { .. } if self.dim() != 1 => {
                return Err(Error::Config("the spliced GP is one-dimensional".into()));
            }
            FunctionSource::GpSpliced { .. } if self.n % 2 != 0 || self.n < 2 => {
                return Err(Error::Config("the spliced GP needs an even n".into()));
            }
            FunctionSource::NnSurface { layers, width, .. } if *layers == 0 || *width == 0 => {
                return Err(Error::Config("surface network needs layers and width".into()));
            }
            FunctionSource::Gp { beta, amplitude } if !(*beta > 0.0 && *amplitude > 0.0) => {
                return Err(Error::Config("GP β and amplitude must be positive".into()));
            }
            FunctionSource::GpMax { beta1, beta2, amplitude } | FunctionSource::GpSpliced { beta1, beta2, amplitude }
                if !(*beta1 > 0.0 && *beta2 > 0.0 && *amplitude > 0.0) =>
            {
                return Err(Error::Config("GP β and amplitude must be positive".into()));
            }
            _ => {}
        }
        if let Some(h) = &self.hetero {
            if h.su2_choices.is_empty() || h.se2_choices.is_empty() || h.su2_choices.iter().chain(&h.se2_choices).any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("heteroscedastic variance lists must be non-empty and non-negative".into()));
            }
        }
        Ok(())
    }

    /// Closed-form truth, when the function is not a GP draw.
    pub fn evaluable(&self) -> Option<Box<dyn Fn(&[f64]) -> f64 + Send + Sync>> {
        match &self.function {
            FunctionSource::Named { name } => {
                let f = *name;
                Some(Box::new(move |x| f.eval(x)))
            }
            FunctionSource::NnSurface { layers, width, first_sd, rest_sd } => {
                let net = nn_surface(*layers, *width, *first_sd, *rest_sd, &mut stream(self.seed, TAG_F));
                Some(Box::new(move |x| net.predict(x).expect("surface input is 2-D")[0]))
            }
            _ => None,
        }
    }

    pub fn generate(&self) -> Result<Simulation> {
        self.validate()?;
        let mut x = sample_x_with(&self.x_law, self.n, &mut stream(self.seed, TAG_X));
        let grid = self.region.grid();
        let (fx, f_grid) = match &self.function {
            FunctionSource::Gp { beta, amplitude } => {
                let all = concatenate(Axis(0), &[x.view(), grid.view()]).expect("same column count");
                let v = gp_values_with(all.view(), *beta, *amplitude, &mut stream(self.seed, TAG_F))?;
                split(v, self.n)
            }
            FunctionSource::GpMax { beta1, beta2, amplitude } => {
                let all = concatenate(Axis(0), &[x.view(), grid.view()]).expect("same column count");
                let mut rng = stream(self.seed, TAG_F);
                let a = gp_values_with(all.view(), *beta1, *amplitude, &mut rng)?;
                let b = gp_values_with(all.view(), *beta2, *amplitude, &mut rng)?;
                split(Array1::from_iter(a.iter().zip(&b).map(|(p, q)| p.max(*q))), self.n)
            }
            FunctionSource::GpSpliced { beta1, beta2, amplitude } => {
                let mut xs: Vec<f64> = x.column(0).to_vec();
                xs.sort_by(f64::total_cmp);
                x = Array2::from_shape_vec((self.n, 1), xs.clone()).expect("n rows");
                let junction_value = xs[self.n / 2 - 1];
                // Merge data and grid; data first on ties so the junction is a data point.
                let mut tagged: Vec<(f64, usize)> = xs.iter().enumerate().map(|(i, v)| (*v, i)).collect();
                tagged.extend(grid.column(0).iter().enumerate().map(|(i, v)| (*v, self.n + i)));
                tagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let junction = tagged.iter().position(|(v, i)| *i == self.n / 2 - 1 && *v == junction_value).expect("junction present");
                let pts = Array1::from_iter(tagged.iter().map(|t| t.0));
                let vals = gp_spliced_at(pts.view(), junction, *beta1, *beta2, *amplitude, &mut stream(self.seed, TAG_F))?;
                let mut fx = Array1::zeros(self.n);
                let mut fg = Array1::zeros(grid.nrows());
                for (pos, (_, i)) in tagged.iter().enumerate() {
                    if *i < self.n {
                        fx[*i] = vals[pos];
                    } else {
                        fg[*i - self.n] = vals[pos];
                    }
                }
                (fx, fg)
            }
            FunctionSource::Named { .. } | FunctionSource::NnSurface { .. } => {
                let f = self.evaluable().expect("closed-form source");
                (eval_rows(x.view(), &*f), eval_rows(grid.view(), &*f))
            }
        };
        let data = match &self.hetero {
            None => add_noise_with(x.view(), fx.view(), self.sigma0, self.sigma, &mut stream(self.seed, TAG_NOISE))?,
            Some(h) => {
                let mut rng = stream(self.seed, TAG_VARIANCES);
                let su2: Array1<f64> = (0..self.n).map(|_| h.su2_choices[rng.random_range(0..h.su2_choices.len())]).collect();
                let se2: Array1<f64> = (0..self.n).map(|_| h.se2_choices[rng.random_range(0..h.se2_choices.len())]).collect();
                add_hetero_noise_with(x.view(), fx.view(), su2, se2, self.sigma, &mut stream(self.seed, TAG_NOISE))?
            }
        };
        Ok(Simulation { data, x, fx, grid, f_grid })
    }
}

fn split(v: Array1<f64>, n: usize) -> (Array1<f64>, Array1<f64>) {
    (v.slice(s![..n]).to_owned(), v.slice(s![n..]).to_owned())
}

fn eval_rows(x: ArrayView2<'_, f64>, f: &dyn Fn(&[f64]) -> f64) -> Array1<f64> {
    x.rows().into_iter().map(|r| f(&r.to_vec())).collect()
}

/// Generated dataset plus the truth needed to score fits.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: Dataset,
    /// True covariates.
    pub x: Array2<f64>,
    /// `f(x)` at the true covariates.
    pub fx: Array1<f64>,
    /// Evaluation grid of the scenario region.
    pub grid: Array2<f64>,
    /// `f` on the grid.
    pub f_grid: Array1<f64>,
}

pub fn sample_x(law: &XLaw, n: usize, seed: u64) -> Result<Array2<f64>> {
    law.validate()?;
    Ok(sample_x_with(law, n, &mut crate::rng::seeded(seed)))
}

fn sample_x_with(law: &XLaw, n: usize, rng: &mut Rng) -> Array2<f64> {
    let d = law.dim();
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let v = law.draw(rng);
        row.assign(&Array1::from(v));
    }
    out
}

/// `w = x + N(0, σ₀² I)`, `y = f(x) + N(0, σ²)`.
pub fn add_noise(x: ArrayView2<'_, f64>, fx: &Array1<f64>, sigma0: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    add_noise_with(x, fx.view(), sigma0, sigma, &mut crate::rng::seeded(seed))
}

fn add_noise_with(x: ArrayView2<'_, f64>, fx: ndarray::ArrayView1<'_, f64>, sigma0: f64, sigma: f64, rng: &mut Rng) -> Result<Dataset> {
    let w = x.mapv(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + sigma0 * z
    });
    let y = fx.mapv(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + sigma * z
    });
    Dataset::new(w, y, None, None)
}

/// Row-specific noise: `w_i = x_i + N(0, su2_i I)`, `y_i = f(x_i) + N(0, τ² + se2_i)`.
pub fn add_hetero_noise(
    x: ArrayView2<'_, f64>,
    fx: &Array1<f64>,
    su2: Array1<f64>,
    se2: Array1<f64>,
    tau: f64,
    seed: u64,
) -> Result<Dataset> {
    add_hetero_noise_with(x, fx.view(), su2, se2, tau, &mut crate::rng::seeded(seed))
}

fn add_hetero_noise_with(
    x: ArrayView2<'_, f64>,
    fx: ndarray::ArrayView1<'_, f64>,
    su2: Array1<f64>,
    se2: Array1<f64>,
    tau: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if su2.len() != x.nrows() || se2.len() != x.nrows() {
        return Err(Error::InputShape { expected: x.nrows(), got: su2.len().min(se2.len()) });
    }
    let mut w = x.to_owned();
    for (mut row, s) in w.rows_mut().into_iter().zip(&su2) {
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += s.sqrt() * z;
        }
    }
    let y = Array1::from_iter(fx.iter().zip(&se2).map(|(f, e)| {
        let z: f64 = StandardNormal.sample(rng);
        f + (tau * tau + e).sqrt() * z
    }));
    Dataset::new(w, y, Some(su2), Some(se2))
}

pub fn rbf_gram(points: ArrayView2<'_, f64>, beta: f64, amplitude: f64) -> Array2<f64> {
    let n = points.nrows();
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let d2: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = amplitude * (-beta * d2).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// Exact joint GP draw at `points` (one per row).
pub fn gp_values(points: ArrayView2<'_, f64>, beta: f64, amplitude: f64, seed: u64) -> Result<Array1<f64>> {
    gp_values_with(points, beta, amplitude, &mut crate::rng::seeded(seed))
}

/// Repeated points are drawn once, so they get identical values.
fn gp_values_with(points: ArrayView2<'_, f64>, beta: f64, amplitude: f64, rng: &mut Rng) -> Result<Array1<f64>> {
    let mut index = std::collections::HashMap::new();
    let mut unique = Vec::new();
    let slot: Vec<usize> = points
        .rows()
        .into_iter()
        .map(|r| {
            let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
            *index.entry(key).or_insert_with(|| {
                unique.extend(r.iter().copied());
                unique.len() / points.ncols() - 1
            })
        })
        .collect();
    let m = unique.len() / points.ncols().max(1);
    let unique = Array2::from_shape_vec((m, points.ncols()), unique).expect("rows of equal width");
    let gram = rbf_gram(unique.view(), beta, amplitude);
    let chol = Cholesky::factor(gram.view(), &jitter_ladder(1e-10 * amplitude, 1e-8 * amplitude))?;
    let z = Array1::from_iter((0..m).map(|_| StandardNormal.sample(rng)));
    let v = chol.lower_mul(z.view());
    Ok(slot.iter().map(|&i| v[i]).collect())
}

/// Spliced GP at sorted 1-D points with `n` even, joined at `x_m`, `m = n/2`.
pub fn gp_spliced(x_sorted: &[f64], beta1: f64, beta2: f64, amplitude: f64, seed: u64) -> Result<Array1<f64>> {
    let n = x_sorted.len();
    if n < 2 || n % 2 != 0 {
        return Err(Error::Config(format!("the spliced GP needs an even number of points, got {n}")));
    }
    if x_sorted.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::Config("spliced GP points must be sorted ascending".into()));
    }
    let pts = Array1::from(x_sorted.to_vec());
    gp_spliced_at(pts.view(), n / 2 - 1, beta1, beta2, amplitude, &mut crate::rng::seeded(seed))
}

/// Points `0..=j` from GP(β₁), points `j..` from GP(β₂) shifted so both halves
/// share the value at index `j`.
fn gp_spliced_at(
    pts: ndarray::ArrayView1<'_, f64>,
    j: usize,
    beta1: f64,
    beta2: f64,
    amplitude: f64,
    rng: &mut Rng,
) -> Result<Array1<f64>> {
    let n = pts.len();
    let as_col = |a: ndarray::ArrayView1<'_, f64>| a.to_owned().insert_axis(Axis(1));
    let left = gp_values_with(as_col(pts.slice(s![..=j])).view(), beta1, amplitude, rng)?;
    let right = gp_values_with(as_col(pts.slice(s![j..])).view(), beta2, amplitude, rng)?;
    let shift = left[j] - right[0];
    let mut out = Array1::zeros(n);
    out.slice_mut(s![..=j]).assign(&left);
    for i in (j + 1)..n {
        out[i] = right[i - j] + shift;
    }
    Ok(out)
}

/// ReLU network `ℝ² → ℝ` with `layers` hidden layers of `width` units.
/// Weights and biases of the first layer are `N(0, first_sd²)`, all later
/// ones `N(0, rest_sd²)`.
pub fn nn_surface(layers: usize, width: usize, first_sd: f64, rest_sd: f64, rng: &mut Rng) -> Mlp {
    let hidden = vec![width; layers];
    let (widths, acts) = Mlp::layout(2, &hidden, 1, Activation::Relu);
    let mut net = Mlp::zeros(&widths, &acts).expect("positive widths");
    let mut values = Vec::with_capacity(net.n_params());
    for l in 0..widths.len() - 1 {
        let sd = if l == 0 { first_sd } else { rest_sd };
        for _ in 0..widths[l] * widths[l + 1] + widths[l + 1] {
            let z: f64 = StandardNormal.sample(rng);
            values.push(sd * z);
        }
    }
    net.set_params(&values).expect("parameter count matches layout");
    net
}

/// Surface from a seed, as used by the `ex3-nn-surface` scenario.
pub fn nn_surface_from_seed(seed: u64) -> Mlp {
    nn_surface(5, 32, 1.0, 0.2, &mut stream(seed, TAG_F))
}
