//! The assembled measurement-error model and the data it is fitted to.

use std::path::Path;
use std::sync::Arc;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softplus, Mlp};
use crate::priors::Prior;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest response variance used in any density.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Error variances below this are treated as exactly zero: `X = W`.
pub const DIRAC_VARIANCE: f64 = 1e-12;

/// Per-coordinate affine map between raw and standardized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_sd(v: ArrayView1<'_, f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.sum() / n;
    let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization { x_mean: vec![0.0; dim], x_scale: vec![1.0; dim], y_mean: 0.0, y_scale: 1.0 }
    }

    /// Column means and population standard deviations of `w` and `y`; a
    /// constant column keeps scale 1.
    pub fn fit(data: &Dataset) -> Self {
        let (x_mean, x_scale) = data.w.axis_iter(Axis(1)).map(mean_sd).unzip();
        let (y_mean, y_scale) = mean_sd(data.y.view());
        Standardization { x_mean, x_scale, y_mean, y_scale }
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn x_to_std(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.x_mean[j]) / self.x_scale[j]);
        }
        out
    }

    pub fn x_from_std(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| self.x_mean[j] + self.x_scale[j] * v);
        }
        out
    }

    pub fn y_to_std(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_scale
    }

    pub fn y_from_std(&self, y: f64) -> f64 {
        self.y_mean + self.y_scale * y
    }
}

/// Observed rows `(w, y)` with optional known per-row variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub w: Array2<f64>,
    pub y: Array1<f64>,
    /// Isotropic measurement-error variance per row (raw units).
    pub su2: Option<Array1<f64>>,
    /// Response-noise variance per row.
    pub se2: Option<Array1<f64>>,
}

impl Dataset {
    pub fn new(w: Array2<f64>, y: Array1<f64>, su2: Option<Array1<f64>>, se2: Option<Array1<f64>>) -> Result<Self> {
        let n = y.len();
        if n == 0 || w.ncols() == 0 {
            return Err(Error::Data("dataset needs at least one row and one covariate".into()));
        }
        if w.nrows() != n {
            return Err(Error::InputShape { expected: n, got: w.nrows() });
        }
        if w.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        for (name, col) in [("su2", &su2), ("se2", &se2)] {
            if let Some(c) = col {
                if c.len() != n {
                    return Err(Error::InputShape { expected: n, got: c.len() });
                }
                if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Data(format!("{name} must be finite and non-negative")));
                }
            }
        }
        Ok(Dataset { w, y, su2, se2 })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            w: self.w.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            su2: self.su2.as_ref().map(|c| c.select(Axis(0), rows)),
            se2: self.se2.as_ref().map(|c| c.select(Axis(0), rows)),
        }
    }

    /// Standardized copy. `se2` is rescaled by `y_scale²`; `su2` stays in raw
    /// units because the per-coordinate factors live in the error model.
    pub fn standardized(&self, st: &Standardization) -> Dataset {
        Dataset {
            w: st.x_to_std(self.w.view()),
            y: self.y.mapv(|v| st.y_to_std(v)),
            su2: self.su2.clone(),
            se2: self.se2.as_ref().map(|c| c.mapv(|v| v / (st.y_scale * st.y_scale))),
        }
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let mut w_cols = Vec::new();
        let (mut y_col, mut su2_col, mut se2_col) = (None, None, None);
        for (i, h) in headers.iter().enumerate() {
            match h.trim() {
                "y" => y_col = Some(i),
                "su2" => su2_col = Some(i),
                "se2" => se2_col = Some(i),
                other => match other.strip_prefix('w').and_then(|k| k.parse::<usize>().ok()) {
                    Some(k) if k >= 1 => w_cols.push((k, i)),
                    _ => return Err(Error::parse(path, format!("unexpected column `{other}`"))),
                },
            }
        }
        w_cols.sort();
        if w_cols.is_empty() || w_cols.iter().enumerate().any(|(j, (k, _))| *k != j + 1) {
            return Err(Error::parse(path, "covariate columns must be w1..wd"));
        }
        let y_col = y_col.ok_or_else(|| Error::parse(path, "missing `y` column"))?;
        let d = w_cols.len();
        let (mut w, mut y, mut su2, mut se2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            let field = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::parse(path, format!("row {}: bad number in column {}", line + 1, i + 1)))
            };
            for &(_, i) in &w_cols {
                w.push(field(i)?);
            }
            y.push(field(y_col)?);
            if let Some(i) = su2_col {
                su2.push(field(i)?);
            }
            if let Some(i) = se2_col {
                se2.push(field(i)?);
            }
        }
        let n = y.len();
        let w = Array2::from_shape_vec((n, d), w).map_err(|e| Error::parse(path, e))?;
        let su2 = su2_col.map(|_| Array1::from(su2));
        let se2 = se2_col.map(|_| Array1::from(se2));
        Dataset::new(w, Array1::from(y), su2, se2)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("w{j}")).collect();
        header.push("y".into());
        if self.su2.is_some() {
            header.push("su2".into());
        }
        if self.se2.is_some() {
            header.push("se2".into());
        }
        out.write_record(&header).map_err(|e| csv_error(path, e))?;
        for i in 0..self.n() {
            let mut row: Vec<String> = self.w.row(i).iter().map(|v| fmt_f64(*v)).collect();
            row.push(fmt_f64(self.y[i]));
            if let Some(c) = &self.su2 {
                row.push(fmt_f64(c[i]));
            }
            if let Some(c) = &self.se2 {
                row.push(fmt_f64(c[i]));
            }
            out.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(path, format!("{other:?}")),
        }
    } else {
        Error::parse(path, e)
    }
}

/// Seventeen significant digits, enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A user-supplied measurement-error density `p_U(u)`.
pub trait ErrorDensity: Send + Sync {
    fn log_density(&self, u: &[f64]) -> f64;

    fn grad(&self, u: &[f64]) -> Vec<f64> {
        let mut probe = u.to_vec();
        (0..u.len())
            .map(|j| {
                let h = 1e-5 * (1.0 + u[j].abs());
                probe[j] = u[j] + h;
                let up = self.log_density(&probe);
                probe[j] = u[j] - h;
                let down = self.log_density(&probe);
                probe[j] = u[j];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Rough spread, used to size quadrature windows and default draws.
    fn scale(&self) -> f64 {
        1.0
    }
}

#[derive(Clone)]
pub struct CustomError(pub Arc<dyn ErrorDensity>);

impl fmt::Debug for CustomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomError")
    }
}

/// The law of `U = W − X`, in standardized coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasurementError {
    /// Independent Gaussian coordinates with these variances.
    Gaussian { variances: Vec<f64> },
    /// Row `i` has variance `su2_i · factors[j]` on coordinate `j`.
    PerRow { factors: Vec<f64> },
    #[serde(skip)]
    Custom(CustomError),
}

impl MeasurementError {
    /// Isotropic raw-unit variance `sigma0²` expressed in standardized units.
    pub fn isotropic(sigma0: f64, st: &Standardization) -> Self {
        MeasurementError::Gaussian { variances: st.x_scale.iter().map(|s| sigma0 * sigma0 / (s * s)).collect() }
    }

    pub fn per_row(st: &Standardization) -> Self {
        MeasurementError::PerRow { factors: st.x_scale.iter().map(|s| 1.0 / (s * s)).collect() }
    }

    pub fn custom(density: Arc<dyn ErrorDensity>) -> Self {
        MeasurementError::Custom(CustomError(density))
    }

    /// True when the error vanishes and `X = W` exactly.
    pub fn is_dirac(&self) -> bool {
        match self {
            MeasurementError::Gaussian { variances } => variances.iter().all(|v| *v <= DIRAC_VARIANCE),
            _ => false,
        }
    }

    pub fn needs_su2(&self) -> bool {
        matches!(self, MeasurementError::PerRow { .. })
    }

    /// Variance on coordinate `j`; `None` for custom densities.
    pub fn variance(&self, j: usize, su2: Option<f64>) -> Option<f64> {
        match self {
            MeasurementError::Gaussian { variances } => Some(variances[j]),
            MeasurementError::PerRow { factors } => Some(su2.unwrap_or(0.0) * factors[j]),
            MeasurementError::Custom(_) => None,
        }
    }

    pub fn spread(&self, j: usize, su2: Option<f64>) -> f64 {
        match self.variance(j, su2) {
            Some(v) => v.sqrt(),
            None => match self {
                MeasurementError::Custom(c) => c.0.scale(),
                _ => unreachable!(),
            },
        }
    }

    /// `log p_U(u)`, writing `∂/∂u` into `grad`.
    pub fn log_density_grad(&self, u: &[f64], su2: Option<f64>, grad: &mut [f64]) -> f64 {
        if let MeasurementError::Custom(c) = self {
            grad.copy_from_slice(&c.0.grad(u));
            return c.0.log_density(u);
        }
        let mut lp = 0.0;
        for (j, &uj) in u.iter().enumerate() {
            let v = self.variance(j, su2).expect("gaussian variance");
            lp -= 0.5 * (LN_2PI + v.ln() + uj * uj / v);
            grad[j] = -uj / v;
        }
        lp
    }

    pub fn log_density(&self, u: &[f64], su2: Option<f64>) -> f64 {
        let mut g = vec![0.0; u.len()];
        self.log_density_grad(u, su2, &mut g)
    }
}

/// The law of `ε`: a single variance, or `τ² + σ²_{εᵢ}` per row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResponseNoise {
    Homoscedastic { sigma2: f64 },
    Heteroscedastic { tau2: f64 },
}

impl ResponseNoise {
    /// Total variance of row's response, floored at [`VARIANCE_FLOOR`].
    pub fn variance(&self, se2: Option<f64>) -> f64 {
        let v = match *self {
            ResponseNoise::Homoscedastic { sigma2 } => sigma2,
            ResponseNoise::Heteroscedastic { tau2 } => tau2 + se2.unwrap_or(0.0),
        };
        v.max(VARIANCE_FLOOR)
    }

    pub fn is_heteroscedastic(&self) -> bool {
        matches!(self, ResponseNoise::Heteroscedastic { .. })
    }

    pub fn level(&self) -> f64 {
        match *self {
            ResponseNoise::Homoscedastic { sigma2 } => sigma2,
            ResponseNoise::Heteroscedastic { tau2 } => tau2,
        }
    }

    pub fn set_level(&mut self, value: f64) {
        match self {
            ResponseNoise::Homoscedastic { sigma2 } => *sigma2 = value,
            ResponseNoise::Heteroscedastic { tau2 } => *tau2 = value,
        }
    }
}

pub fn normal_log_density(r: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// The three factors of the joint density at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTerms {
    pub prior: f64,
    pub error: f64,
    pub response: f64,
}

impl JointTerms {
    pub fn total(&self) -> f64 {
        self.prior + self.error + self.response
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemModel {
    pub decoder: Mlp,
    pub encoder: Mlp,
    pub prior: Prior,
    pub noise: ResponseNoise,
    pub error: MeasurementError,
    /// Adds `w` to the encoder mean head.
    #[serde(default)]
    pub residual_link: bool,
    pub scale_floor: f64,
}

pub const DEFAULT_SCALE_FLOOR: f64 = 1e-6;

impl MemModel {
    pub fn new(decoder: Mlp, encoder: Mlp, prior: Prior, noise: ResponseNoise, error: MeasurementError) -> Result<Self> {
        let d = decoder.input_dim();
        if decoder.output_dim() != 1 {
            return Err(Error::Config("decoder must have one output".into()));
        }
        if encoder.input_dim() != d + 1 || encoder.output_dim() != 2 * d {
            return Err(Error::Config(format!("encoder must map {} inputs to {} outputs", d + 1, 2 * d)));
        }
        if prior.dim() != d {
            return Err(Error::Config("prior dimension differs from decoder input".into()));
        }
        match &error {
            MeasurementError::Gaussian { variances } if variances.len() != d || variances.iter().any(|v| !(*v >= 0.0)) => {
                return Err(Error::Config("measurement-error variances must be d non-negative values".into()));
            }
            MeasurementError::PerRow { factors } if factors.len() != d || factors.iter().any(|v| !(*v > 0.0)) => {
                return Err(Error::Config("per-row error factors must be d positive values".into()));
            }
            _ => {}
        }
        match noise {
            ResponseNoise::Homoscedastic { sigma2 } if !(sigma2 > 0.0) => {
                return Err(Error::Config("σ² must be positive".into()));
            }
            ResponseNoise::Heteroscedastic { tau2 } if !(tau2 >= 0.0) => {
                return Err(Error::Config("τ² must be non-negative".into()));
            }
            _ => {}
        }
        Ok(MemModel { decoder, encoder, prior, noise, error, residual_link: false, scale_floor: DEFAULT_SCALE_FLOOR })
    }

    pub fn with_residual_link(mut self, on: bool) -> Self {
        self.residual_link = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn joint_terms(&self, w: &[f64], y: f64, x: &[f64], su2: Option<f64>, se2: Option<f64>) -> Result<JointTerms> {
        let d = self.dim();
        if w.len() != d || x.len() != d {
            return Err(Error::InputShape { expected: d, got: if w.len() != d { w.len() } else { x.len() } });
        }
        let prior = self.prior.log_density(x)?;
        let error = if self.error.is_dirac() {
            0.0
        } else {
            let u: Vec<f64> = w.iter().zip(x).map(|(a, b)| a - b).collect();
            self.error.log_density(&u, su2)
        };
        let f = self.decoder.predict(x)?[0];
        let response = normal_log_density(y - f, self.noise.variance(se2));
        Ok(JointTerms { prior, error, response })
    }

    pub fn joint_log_density(&self, w: &[f64], y: f64, x: &[f64], su2: Option<f64>, se2: Option<f64>) -> Result<f64> {
        Ok(self.joint_terms(w, y, x, su2, se2)?.total())
    }

    pub fn encoder_input(w: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Array2<f64> {
        let (n, d) = w.dim();
        let mut input = Array2::zeros((n, d + 1));
        input.slice_mut(ndarray::s![.., ..d]).assign(&w);
        input.column_mut(d).assign(&y);
        input
    }

    /// Mean and diagonal variance of the proposal from a batch of encoder
    /// outputs.
    pub fn proposal_from_output(&self, w: ArrayView2<'_, f64>, out: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.dim();
        let mut mu = out.slice(ndarray::s![.., ..d]).to_owned();
        if self.residual_link {
            mu += &w;
        }
        let floor = self.scale_floor;
        let var = out.slice(ndarray::s![.., d..]).mapv(|r| softplus(r) + floor);
        (mu, var)
    }

    pub fn proposal_params_batch(&self, w: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.encoder.predict_batch(Self::encoder_input(w, y).view())?;
        Ok(self.proposal_from_output(w, out.view()))
    }

    pub fn proposal_params(&self, w: &[f64], y: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let wv = ArrayView2::from_shape((1, w.len()), w).map_err(|_| Error::InputShape { expected: self.dim(), got: w.len() })?;
        let (mu, var) = self.proposal_params_batch(wv, ArrayView1::from(&[y][..]))?;
        Ok((mu.row(0).to_vec(), var.row(0).to_vec()))
    }

    /// Log-density of the diagonal Gaussian proposal.
    pub fn proposal_log_density(x: &[f64], mu: &[f64], var: &[f64]) -> f64 {
        x.iter().zip(mu).zip(var).map(|((x, m), v)| normal_log_density(x - m, *v)).sum()
    }

    /// `log p(w, y, x) − log q(x | w, y)`.
    pub fn log_weight(&self, w: &[f64], y: f64, x: &[f64], mu: &[f64], var: &[f64], su2: Option<f64>, se2: Option<f64>) -> Result<f64> {
        let joint = self.joint_log_density(w, y, x, su2, se2)?;
        if self.error.is_dirac() {
            return Ok(joint);
        }
        Ok(joint - Self::proposal_log_density(x, mu, var))
    }
}

/// Reparametrized draw `x = μ + √Σ ⊙ z`.
pub fn proposal_sample(mu: &[f64], var: &[f64], z: &[f64]) -> Vec<f64> {
    mu.iter().zip(var).zip(z).map(|((m, v), z)| m + v.sqrt() * z).collect()
}
