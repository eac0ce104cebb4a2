use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array1, Array2};
use nnme::eval::{
    bootstrap_band, fit_method, ise_values, predict_posterior_mean, prediction_error_cv, EvalRegion, FittedModel,
};
use nnme::kriging::KrigingFit;
use nnme::model::Dataset;
use nnme::rng::derive_seed;
use nnme::simgen::{ScenarioSpec, Simulation};
use nnme::trainers::{cross_validate, ErrorSpec, FitResult, Method, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{self, RunConfig};
use crate::failure::{config_error, io_error, CliError, NUMERICAL};
use crate::output::{coord_header, num, Staging};
use crate::Args;

// Stream tags under the run seed.
const TAG_TRAIN: u64 = 1;
const TAG_EVAL: u64 = 2;
const TAG_CV: u64 = 3;
const TAG_REP: u64 = 4;

/// Default prediction grid for one-dimensional dataset inputs.
const DATA_GRID_POINTS: usize = 200;

pub struct Context {
    pub subcommand: &'static str,
    pub cfg: RunConfig,
    pub config_path: Option<PathBuf>,
    pub config_text: Option<String>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
    pub reps: Option<usize>,
    pub fit_path: Option<PathBuf>,
}

impl Context {
    pub fn new(subcommand: &'static str, args: Args, config_text: Option<String>) -> Result<Context, CliError> {
        let mut cfg = match &config_text {
            Some(t) => config::parse(t)?,
            None => RunConfig::default(),
        };
        // flags win over the document
        cfg.scenario = args.scenario.or(cfg.scenario);
        cfg.data = args.data.or(cfg.data);
        cfg.method = args.method.or(cfg.method);
        cfg.seed = args.seed.or(cfg.seed);
        cfg.n = args.n.or(cfg.n);
        cfg.sigma0 = args.sigma0.or(cfg.sigma0);
        cfg.sigma = args.sigma.or(cfg.sigma);
        Ok(Context {
            subcommand,
            seed: cfg.seed.unwrap_or(0),
            cfg,
            config_path: args.config,
            config_text,
            out: args.out,
            jobs: args.jobs,
            reps: args.reps,
            fit_path: args.fit,
        })
    }

    fn manifest(&self) -> Value {
        json!({
            "subcommand": self.subcommand,
            "config_path": self.config_path.as_ref().map(|p| p.display().to_string()),
            "out": self.out.display().to_string(),
            "seed": self.seed,
            "scenario": self.cfg.scenario,
            "data": self.cfg.data.as_ref().map(|p| p.display().to_string()),
            "method": self.cfg.method,
            "jobs": self.jobs,
            "reps": self.reps,
            "fit": self.fit_path.as_ref().map(|p| p.display().to_string()),
            "config": self.cfg,
        })
    }

    /// A staging directory already holding the manifest echo.
    fn stage(&self) -> Result<Staging, CliError> {
        let st = Staging::new(&self.out)?;
        st.json("manifest.json", &self.manifest())?;
        if let Some(t) = &self.config_text {
            st.write("config.json", t)?;
        }
        Ok(st)
    }

    fn method(&self) -> Result<Method, CliError> {
        config::parse_method(self.cfg.method.as_deref().unwrap_or("nnme"))
    }
}

fn scenario_spec(cfg: &RunConfig, name: &str, seed: u64) -> Result<ScenarioSpec, CliError> {
    let mut spec = ScenarioSpec::named(name, seed)?;
    if let Some(n) = cfg.n {
        spec.n = n;
    }
    if let Some(s) = cfg.sigma0 {
        spec.sigma0 = s;
    }
    if let Some(s) = cfg.sigma {
        spec.sigma = s;
    }
    spec.validate()?;
    Ok(spec)
}

/// The data to fit and, when known, the truth to score against.
struct Inputs {
    data: Dataset,
    error: Option<ErrorSpec>,
    region: Option<EvalRegion>,
    grid: Option<Array2<f64>>,
    truth: Option<Array1<f64>>,
}

impl Inputs {
    fn from_simulation(spec: &ScenarioSpec, sim: Simulation) -> Inputs {
        let sigma0 = if spec.hetero.is_some() { None } else { Some(spec.sigma0) };
        let error = config::default_error(sigma0, &sim.data);
        Inputs { data: sim.data, error, region: Some(spec.region.clone()), grid: Some(sim.grid), truth: Some(sim.f_grid) }
    }
}

fn inputs(cfg: &RunConfig, seed: u64) -> Result<Inputs, CliError> {
    match (&cfg.scenario, &cfg.data) {
        (Some(_), Some(_)) => Err(config_error("give either a scenario or a dataset, not both")),
        (None, None) => Err(config_error("no input: give --scenario or --data")),
        (Some(name), None) => {
            let spec = scenario_spec(cfg, name, seed)?;
            let sim = spec.generate()?;
            Ok(Inputs::from_simulation(&spec, sim))
        }
        (None, Some(path)) => {
            let data = Dataset::read_csv(path)?;
            let error = config::default_error(cfg.sigma0, &data);
            let region = match &cfg.region {
                Some(r) => {
                    r.validate()?;
                    if r.dim() != data.dim() {
                        return Err(config_error(format!("region is {}-D but the data are {}-D", r.dim(), data.dim())));
                    }
                    Some(r.clone())
                }
                None if data.dim() == 1 => {
                    let col = data.w.column(0);
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (hi > lo).then(|| EvalRegion::interval(lo, hi, DATA_GRID_POINTS))
                }
                None => None,
            };
            let grid = region.as_ref().map(EvalRegion::grid);
            let truth = match (&cfg.truth, &grid) {
                (Some(_), None) => return Err(config_error("a truth file needs a region")),
                (Some(_), Some(_)) if cfg.region.is_none() => return Err(config_error("a truth file needs an explicit region")),
                (Some(p), Some(g)) => Some(read_truth(p, g)?),
                (None, _) => None,
            };
            Ok(Inputs { data, error, region, grid, truth })
        }
    }
}

/// Reads `x1..xd, f` and checks the points are the region grid.
fn read_truth(path: &Path, grid: &Array2<f64>) -> Result<Array1<f64>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    let mut f = Vec::with_capacity(grid.nrows());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_error(path, e))?;
        let vals: Vec<f64> = rec.iter().map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| io_error(path, e))?;
        if vals.len() != grid.ncols() + 1 || i >= grid.nrows() {
            return Err(config_error(format!("{}: does not match the region grid", path.display())));
        }
        if grid.row(i).iter().zip(&vals).any(|(a, b)| (a - b).abs() > 1e-9 * a.abs().max(1.0)) {
            return Err(config_error(format!("{}: row {} is not on the region grid", path.display(), i + 1)));
        }
        f.push(vals[grid.ncols()]);
    }
    if f.len() != grid.nrows() {
        return Err(config_error(format!("{}: {} rows for a {}-point grid", path.display(), f.len(), grid.nrows())));
    }
    Ok(Array1::from(f))
}

fn train_config(cfg: &RunConfig, inputs: &Inputs, overrides: Option<&serde_json::Map<String, Value>>, seed: u64) -> Result<TrainConfig, CliError> {
    config::train_config(&cfg.train, overrides, inputs.error.clone(), &inputs.data, derive_seed(seed, TAG_TRAIN))
}

/// What `fit` writes to `fit.json` and `evaluate --fit` reads back.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SavedFit {
    Neural(Box<FitResult>),
    Kriging(KrigingFit),
}

impl SavedFit {
    fn from_model(m: &FittedModel) -> SavedFit {
        match m {
            FittedModel::Neural(f) => {
                let mut f = f.clone();
                // wall time would break byte-identical reruns
                f.wall_seconds = 0.0;
                SavedFit::Neural(f)
            }
            FittedModel::Kriging(k) => SavedFit::Kriging(k.clone()),
        }
    }

    fn into_model(self) -> FittedModel {
        match self {
            SavedFit::Neural(f) => FittedModel::Neural(f),
            SavedFit::Kriging(k) => FittedModel::Kriging(k),
        }
    }
}

fn load_fit(path: &Path) -> Result<FittedModel, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let saved: SavedFit = serde_json::from_str(&text).map_err(|e| io_error(path, e))?;
    Ok(saved.into_model())
}

struct Scored {
    prediction: Option<Array1<f64>>,
    ise: Option<f64>,
}

fn score(model: &FittedModel, inputs: &Inputs) -> Result<Scored, CliError> {
    let Some(grid) = &inputs.grid else {
        return Ok(Scored { prediction: None, ise: None });
    };
    let p = model.predict(grid.view())?;
    let ise = match (&inputs.truth, &inputs.region) {
        (Some(t), Some(r)) => Some(ise_values(p.view(), t.view(), r)?),
        _ => None,
    };
    Ok(Scored { prediction: Some(p), ise })
}

fn write_predictions(st: &Staging, inputs: &Inputs, scored: &Scored) -> Result<(), CliError> {
    let (Some(grid), Some(p)) = (&inputs.grid, &scored.prediction) else {
        return Ok(());
    };
    let mut header = coord_header("x", grid.ncols());
    header.push("estimate".into());
    if inputs.truth.is_some() {
        header.push("truth".into());
    }
    let rows = (0..grid.nrows()).map(|i| {
        let mut row: Vec<String> = grid.row(i).iter().map(|v| num(*v)).collect();
        row.push(num(p[i]));
        if let Some(t) = &inputs.truth {
            row.push(num(t[i]));
        }
        row
    });
    st.table("predictions.csv", &header, rows)
}

fn write_trace(st: &Staging, fit: &FitResult) -> Result<(), CliError> {
    let header = ["epoch", "noise", "objective", "rss"].map(String::from);
    let rows = fit.trace.iter().map(|r| vec![r.epoch.to_string(), num(r.noise), num(r.objective), num(r.rss)]);
    st.table("trace.csv", &header, rows)
}

/// Partial outputs for a run that failed numerically: the manifest plus a
/// summary flagging the failure.
fn flag_failure(st: Staging, e: CliError) -> CliError {
    if e.code == NUMERICAL {
        let written = st.json("summary.json", &json!({ "status": "failed", "error": e.message })).and_then(|_| st.commit());
        if let Err(w) = written {
            return w;
        }
    }
    e
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let name = ctx.cfg.scenario.as_deref().ok_or_else(|| config_error("simulate needs --scenario"))?;
    let spec = scenario_spec(&ctx.cfg, name, ctx.seed)?;
    let sim = spec.generate()?;
    let st = ctx.stage()?;
    st.json("scenario.json", &spec)?;
    let path = st.path("data.csv");
    sim.data.write_csv(&path)?;
    let d = sim.x.ncols();
    let mut header = coord_header("x", d);
    header.push("f".into());
    let points = |x: &Array2<f64>, f: &Array1<f64>| -> Vec<Vec<String>> {
        (0..x.nrows())
            .map(|i| {
                let mut row: Vec<String> = x.row(i).iter().map(|v| num(*v)).collect();
                row.push(num(f[i]));
                row
            })
            .collect()
    };
    st.table("truth.csv", &header, points(&sim.x, &sim.fx))?;
    st.table("grid.csv", &header, points(&sim.grid, &sim.f_grid))?;
    st.commit()?;
    println!("rows {}", sim.data.n());
    Ok(())
}

pub fn fit(ctx: &Context) -> Result<(), CliError> {
    let method = ctx.method()?;
    let inputs = inputs(&ctx.cfg, ctx.seed)?;
    let tc = train_config(&ctx.cfg, &inputs, None, ctx.seed)?;
    let st = ctx.stage()?;
    let model = match fit_method(&inputs.data, method, &tc, &ctx.cfg.kriging.unwrap_or_default()) {
        Ok(m) => m,
        Err(e) => return Err(flag_failure(st, e.into())),
    };
    st.json("fit.json", &SavedFit::from_model(&model))?;
    let scored = score(&model, &inputs)?;
    write_predictions(&st, &inputs, &scored)?;
    let mut summary = json!({ "method": method.name(), "n": inputs.data.n(), "ise": scored.ise });
    let mut aborted = false;
    match &model {
        FittedModel::Neural(f) => {
            write_trace(&st, f)?;
            aborted = f.aborted;
            summary["status"] = json!(if aborted { "aborted" } else { "ok" });
            summary["noise"] = json!(f.noise_raw());
            summary["best_epoch"] = json!(f.best_epoch);
            summary["skipped_rows"] = json!(f.skipped_rows);
        }
        FittedModel::Kriging(k) => {
            summary["status"] = json!("ok");
            summary["kriging"] = json!(k.params);
            summary["log_likelihood"] = json!(k.log_likelihood);
        }
    }
    st.json("summary.json", &summary)?;
    st.commit()?;
    println!("method {}", method.name());
    if let Some(ise) = scored.ise {
        println!("ise {}", num(ise));
    }
    if aborted {
        return Err(CliError { code: NUMERICAL, message: "training aborted on a non-finite objective; outputs flagged".into() });
    }
    Ok(())
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let ev = &ctx.cfg.evaluate;
    let inputs = inputs(&ctx.cfg, ctx.seed)?;
    let mut tc = train_config(&ctx.cfg, &inputs, None, ctx.seed)?;
    let st = ctx.stage()?;
    let model = match &ctx.fit_path {
        Some(p) => {
            let m = load_fit(p)?;
            if ctx.cfg.method.is_some() && ctx.method()? != m.method() {
                return Err(config_error(format!("--method {} does not match the saved {} fit", ctx.method()?, m.method())));
            }
            m
        }
        None => match fit_method(&inputs.data, ctx.method()?, &tc, &ctx.cfg.kriging.unwrap_or_default()) {
            Ok(m) => m,
            Err(e) => return Err(flag_failure(st, e.into())),
        },
    };
    let method = model.method();
    if let FittedModel::Neural(f) = &model {
        tc = f.config.clone();
    }
    let seed = derive_seed(ctx.seed, TAG_EVAL);
    let mut summary = json!({ "method": method.name(), "n": inputs.data.n(), "posterior": ev.posterior });

    let header = ["row", "y", "estimate", "se", "fell_back"].map(String::from);
    let rows: Vec<Vec<String>> = match &model {
        FittedModel::Neural(f) => {
            let means = predict_posterior_mean(f, ev.posterior, &inputs.data, ev.k_pred, seed)?;
            summary["fell_back"] = json!(means.iter().filter(|m| m.fell_back).count());
            means
                .iter()
                .enumerate()
                .map(|(i, m)| vec![i.to_string(), num(inputs.data.y[i]), num(m.value), num(m.se), m.fell_back.to_string()])
                .collect()
        }
        FittedModel::Kriging(k) => {
            let p = k.predict(inputs.data.w.view())?;
            (0..p.len()).map(|i| vec![i.to_string(), num(inputs.data.y[i]), num(p[i]), String::new(), "false".into()]).collect()
        }
    };
    st.table("posterior_mean.csv", &header, rows)?;

    let scored = score(&model, &inputs)?;
    write_predictions(&st, &inputs, &scored)?;
    summary["ise"] = json!(scored.ise);

    if ev.bootstrap > 0 {
        let FittedModel::Neural(f) = &model else {
            return Err(config_error("bootstrap bands need a neural fit"));
        };
        let grid = inputs.grid.as_ref().ok_or_else(|| config_error("bootstrap bands need a region"))?;
        let band = bootstrap_band(f, &inputs.data, grid.view(), ev.bootstrap, ev.level, derive_seed(seed, 1))?;
        let mut header = coord_header("x", grid.ncols());
        header.extend(["estimate", "lo", "hi"].map(String::from));
        let rows = (0..grid.nrows()).map(|i| {
            let mut row: Vec<String> = grid.row(i).iter().map(|v| num(*v)).collect();
            row.extend([num(band.estimate[i]), num(band.lo[i]), num(band.hi[i])]);
            row
        });
        st.table("band.csv", &header, rows)?;
        summary["bootstrap"] = json!({
            "refits": ev.bootstrap, "level": ev.level, "successes": band.successes,
            "failures": band.failures, "unreliable": band.unreliable,
        });
    }

    if ev.prediction_reps > 0 {
        let pe = prediction_error_cv(&inputs.data, method, &tc, ev.posterior, ev.k_pred, ev.prediction_folds, ev.prediction_reps, derive_seed(seed, 2))?;
        let header = ["rep", "mse"].map(String::from);
        st.table("prediction_error.csv", &header, pe.per_rep.iter().enumerate().map(|(r, v)| vec![r.to_string(), num(*v)]))?;
        summary["prediction_error"] = json!({ "folds": ev.prediction_folds, "mean": pe.mean, "se": pe.se });
        println!("prediction_error {} se {}", num(pe.mean), num(pe.se));
    }

    st.json("summary.json", &summary)?;
    st.commit()?;
    if let Some(ise) = scored.ise {
        println!("ise {}", num(ise));
    }
    Ok(())
}

pub fn cv(ctx: &Context) -> Result<(), CliError> {
    let method = ctx.method()?;
    let inputs = inputs(&ctx.cfg, ctx.seed)?;
    let grid: Vec<TrainConfig> =
        ctx.cfg.cv.grid.iter().map(|o| train_config(&ctx.cfg, &inputs, Some(o), ctx.seed)).collect::<Result<_, _>>()?;
    let st = ctx.stage()?;
    let report = match cross_validate(&inputs.data, &grid, method, ctx.cfg.cv.folds, derive_seed(ctx.seed, TAG_CV)) {
        Ok(r) => r,
        Err(e) => return Err(flag_failure(st, e.into())),
    };
    let header = ["config", "fold", "rss", "elbo"].map(String::from);
    st.table("losses.csv", &header, report.rows.iter().map(|r| vec![r.config.to_string(), r.fold.to_string(), num(r.rss), num(r.elbo)]))?;
    let header = ["config", "depth", "width", "k", "mean_rss", "mean_elbo", "selected"].map(String::from);
    let rows = grid.iter().enumerate().map(|(c, g)| {
        vec![
            c.to_string(),
            g.decoder.hidden.len().to_string(),
            g.decoder.hidden.first().copied().unwrap_or(0).to_string(),
            g.k.to_string(),
            num(report.mean_rss[c]),
            num(report.mean_elbo[c]),
            (c == report.best).to_string(),
        ]
    });
    st.table("summary.csv", &header, rows)?;
    st.json("selected_config.json", &grid[report.best])?;
    st.commit()?;
    println!("selected {} mean_rss {}", report.best, num(report.mean_rss[report.best]));
    Ok(())
}

struct JobResult {
    scenario: String,
    method: Method,
    n: usize,
    sigma0: f64,
    sigma: f64,
    rep: usize,
    seed: u64,
    ise: Option<f64>,
    status: String,
}

pub fn benchmark(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let scenarios = config::list(cfg.scenario.as_deref(), &cfg.benchmark.scenarios);
    let methods: Vec<Method> =
        config::list(cfg.method.as_deref(), &cfg.benchmark.methods).iter().map(|m| config::parse_method(m)).collect::<Result<_, _>>()?;
    let reps = ctx.reps.unwrap_or(cfg.benchmark.reps);
    if scenarios.is_empty() || methods.is_empty() || reps == 0 {
        return Err(config_error("benchmark needs at least one scenario, one method and one repetition"));
    }
    for s in &scenarios {
        scenario_spec(cfg, s, 0)?;
    }
    let st = ctx.stage()?;

    // datasets first, shared by every method of a repetition
    let cells: Vec<(usize, usize)> = (0..scenarios.len()).flat_map(|s| (0..reps).map(move |r| (s, r))).collect();
    let sims: Vec<(ScenarioSpec, Result<Inputs, String>)> = cells
        .par_iter()
        .map(|&(s, r)| {
            let seed = derive_seed(derive_seed(ctx.seed, TAG_REP), r as u64);
            let spec = scenario_spec(cfg, &scenarios[s], seed).expect("checked above");
            let sim = spec.generate().map(|sim| Inputs::from_simulation(&spec, sim)).map_err(|e| e.to_string());
            (spec, sim)
        })
        .collect();

    let jobs: Vec<(usize, Method)> = (0..cells.len()).flat_map(|c| methods.iter().map(move |m| (c, *m))).collect();
    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|&(c, method)| {
            let (spec, sim) = &sims[c];
            let outcome = sim.as_ref().map_err(Clone::clone).and_then(|inputs| {
                let tc = train_config(cfg, inputs, None, spec.seed).map_err(|e| e.message)?;
                let model = fit_method(&inputs.data, method, &tc, &cfg.kriging.unwrap_or_default()).map_err(|e| e.to_string())?;
                let aborted = matches!(&model, FittedModel::Neural(f) if f.aborted);
                let ise = score(&model, inputs).map_err(|e| e.message)?.ise;
                Ok((ise, aborted))
            });
            info!("{} {} rep {} done", spec.name, method, cells[c].1);
            let (ise, status) = match outcome {
                Ok((ise, false)) => (ise, "ok".to_string()),
                Ok((ise, true)) => (ise, "aborted".to_string()),
                Err(e) => (None, format!("error: {e}")),
            };
            JobResult {
                scenario: spec.name.clone(),
                method,
                n: spec.n,
                sigma0: spec.sigma0,
                sigma: spec.sigma,
                rep: cells[c].1,
                seed: spec.seed,
                ise,
                status,
            }
        })
        .collect();

    let header = ["scenario", "method", "n", "sigma0", "sigma", "rep", "seed", "ise", "status"].map(String::from);
    let rows = results.iter().map(|r| {
        vec![
            r.scenario.clone(),
            r.method.name().into(),
            r.n.to_string(),
            num(r.sigma0),
            num(r.sigma),
            r.rep.to_string(),
            r.seed.to_string(),
            r.ise.map(num).unwrap_or_default(),
            r.status.clone(),
        ]
    });
    st.table("results.csv", &header, rows)?;

    let header = ["scenario", "method", "n", "sigma0", "sigma", "ok", "failed", "mean", "sd", "se", "median"].map(String::from);
    let mut summary = Vec::new();
    for (s, name) in scenarios.iter().enumerate() {
        let spec = &sims[s * reps].0;
        for m in &methods {
            let group: Vec<&JobResult> = results.iter().filter(|r| &r.scenario == name && r.method == *m).collect();
            let ok: Vec<f64> = group.iter().filter(|r| r.status == "ok").filter_map(|r| r.ise).collect();
            let stats = Summary::of(&ok);
            println!("{name} {m} mean {} se {} ({} ok)", num(stats.mean), num(stats.se), ok.len());
            summary.push(vec![
                name.clone(),
                m.name().into(),
                spec.n.to_string(),
                num(spec.sigma0),
                num(spec.sigma),
                ok.len().to_string(),
                (group.len() - ok.len()).to_string(),
                num(stats.mean),
                num(stats.sd),
                num(stats.se),
                num(stats.median),
            ]);
        }
    }
    st.table("summary.csv", &header, summary)?;
    st.commit()
}

/// Mean, sample SD, SE of the mean and median; NaN where undefined.
struct Summary {
    mean: f64,
    sd: f64,
    se: f64,
    median: f64,
}

impl Summary {
    fn of(v: &[f64]) -> Summary {
        let n = v.len() as f64;
        if v.is_empty() {
            return Summary { mean: f64::NAN, sd: f64::NAN, se: f64::NAN, median: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { f64::NAN };
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let mid = s.len() / 2;
        let median = if s.len() % 2 == 1 { s[mid] } else { 0.5 * (s[mid - 1] + s[mid]) };
        Summary { mean, sd, se: sd / n.sqrt(), median }
    }
}
