//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every verdict is printed even when an
//! earlier one fails. `NNME_ACCEPTANCE_SKIP=5,6,7` skips the listed criteria.
//!
//! The training spot checks (5 to 7) use the desk budget documented in the
//! README: batch 128, Adam step 0.003, 150 epochs, other settings default.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array1, Array2};
use nnme::estimators::{
    gradients, marginal_loglik_quadrature, mean_se, sigma2_update, tau2_update, McBatch, PhiGradient, Weighting,
};
use nnme::eval::ise_values;
use nnme::kriging::{KrigingFit, KrigingKind, KrigingParams};
use nnme::model::{Dataset, MeasurementError, MemModel, ResponseNoise, DEFAULT_SCALE_FLOOR};
use nnme::nn::{Activation, Mlp};
use nnme::priors::{GaussianMixture, Prior};
use nnme::rng::seeded;
use nnme::simgen::ScenarioSpec;
use nnme::trainers::{train, Method, TrainConfig};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Verdict {
    let configs = 60;
    let mut failures = Vec::new();
    for c in 0..configs {
        let seed = c as u64;
        let (prior, xs) = common::prior_case(c, seed);
        let checks = [
            common::mlp_case(seed),
            common::check_prior(&prior, &xs, &common::PRIOR_WEIGHTS),
            common::estimator_case(c, seed),
            common::check_joint_x(seed),
        ];
        for r in checks {
            if let Err(e) = r {
                failures.push(format!("config {c}: {e}"));
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!("{configs} configurations × (network, prior, estimator, joint-x); {} mismatches{}", failures.len(), failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()),
    )
}

// ---------------------------------------------------------------- 2

/// Mean and SE of the K-sample bound for row 0 over `reps` independent draws.
fn bound_stats(model: &MemModel, data: &Dataset, k: usize, reps: usize, seed: u64) -> (f64, f64) {
    let mut rng = seeded(seed);
    let chunk = 5000;
    let mut values = Vec::with_capacity(reps);
    while values.len() < reps {
        let m = chunk.min(reps - values.len());
        let rows = vec![0; m];
        let z = nnme::estimators::draw_z(&mut rng, m, k, model.dim());
        let b = McBatch::evaluate(model, data, &rows, k, z).unwrap();
        values.extend(b.row_elbo());
    }
    mean_se(&values)
}

fn iwae_ordering() -> Verdict {
    let mut lines = Vec::new();
    let mut ok = true;
    for m in 0..5u64 {
        let gm = GaussianMixture::new(&[0.5, 0.5], &[vec![0.3], vec![-0.4]], &[vec![0.6], vec![1.5]]).unwrap();
        let (model, data) = common::toy_model(1, 300 + m, Prior::GaussianMixture(gm), false);
        let exact = marginal_loglik_quadrature(&model, data.w[[0, 0]], data.y[0], None, None).unwrap();
        let q: Vec<(f64, f64)> = [1, 5, 50].iter().map(|&k| bound_stats(&model, &data, k, 100_000, 400 + m * 10 + k as u64)).collect();
        let le = |a: (f64, f64), b: (f64, f64)| a.0 <= b.0 + 3.0 * (a.1 * a.1 + b.1 * b.1).sqrt();
        let this = le(q[0], q[1]) && le(q[1], q[2]) && le(q[2], (exact, 0.0));
        ok &= this;
        lines.push(format!("m{m}: {:.4}/{:.4}/{:.4} vs {:.4}", q[0].0, q[1].0, q[2].0, exact));
    }
    verdict(ok, format!("Q1/Q5/Q50 vs quadrature, 1e5 draws each: {}", lines.join("; ")))
}

// ---------------------------------------------------------------- 3

fn dreg_properties() -> Verdict {
    let reps = 10_000;
    let k = 50;
    let mut ok = true;
    let mut notes = Vec::new();
    for m in 0..3u64 {
        let gm = GaussianMixture::new(&[0.5, 0.5], &[vec![0.3], vec![-0.4]], &[vec![0.6], vec![1.5]]).unwrap();
        let (model, data) = common::toy_model(1, 500 + m, Prior::GaussianMixture(gm), false);
        let p = model.encoder.n_params();
        let (mut dreg, mut plain) = (vec![Vec::with_capacity(reps); p], vec![Vec::with_capacity(reps); p]);
        let mut rng = seeded(600 + m);
        for _ in 0..reps {
            let b = McBatch::draw(&model, &data, &[0], k, &mut rng).unwrap();
            let gd = gradients(&model, &b, Weighting::SelfNormalized, PhiGradient::Dreg).unwrap();
            let gp = gradients(&model, &b, Weighting::SelfNormalized, PhiGradient::Plain).unwrap();
            for j in 0..p {
                dreg[j].push(gd.phi[j]);
                plain[j].push(gp.phi[j]);
            }
        }
        let mut off = 0;
        let (mut var_d, mut var_p, mut lower) = (0.0, 0.0, 0);
        for j in 0..p {
            let (md, sd) = mean_se(&dreg[j]);
            let (mp, sp) = mean_se(&plain[j]);
            if (md - mp).abs() > 3.0 * (sd * sd + sp * sp).sqrt() {
                off += 1;
            }
            let (vd, vp) = (sd * sd * reps as f64, sp * sp * reps as f64);
            var_d += vd;
            var_p += vp;
            if vd <= vp {
                lower += 1;
            }
        }
        ok &= off == 0 && var_d <= var_p;
        notes.push(format!("m{m}: {off}/{p} means outside 3 SE, total var {var_d:.3e} vs {var_p:.3e}, {lower}/{p} coords lower"));
    }
    verdict(ok, format!("K = {k}, {reps} replications: {}", notes.join("; ")))
}

// ---------------------------------------------------------------- 4

fn nice_exactness() -> Verdict {
    let mut worst_rt = 0.0_f64;
    let mut worst_rel = 0.0_f64;
    for s in 0..50u64 {
        let dim = 2 + (s % 4) as usize;
        let flow = common::bent_flow(dim, 1 + (s % 5) as usize, s);
        worst_rt = worst_rt.max(common::flow_round_trip_error(&flow, s + 1000));
        let x: Vec<f64> = nnme::nn::standard_normal_vec(&mut seeded(s + 2000), dim);
        let ours = flow.log_density(&x).unwrap().exp();
        let numeric = common::change_of_variables_log_density(&flow, &x).exp();
        worst_rel = worst_rel.max((ours - numeric).abs() / ours);
    }
    let mass = common::flow_mass_2d(&common::bent_flow(2, 4, 3));
    let pass = worst_rt <= 1e-10 && worst_rel <= 1e-6 && (mass - 1.0).abs() <= 1e-2;
    verdict(pass, format!("round trip {worst_rt:.1e} (≤ 1e-10), density rel err {worst_rel:.1e} (≤ 1e-6), 2-D mass {mass:.5} (1 ± 1e-2)"))
}

// ---------------------------------------------------------------- 5–7

fn desk_config(sigma0: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::gaussian(sigma0);
    cfg.batch_size = Some(128);
    cfg.adam.alpha0 = 0.003;
    cfg.epochs = 150;
    cfg.seed = seed;
    cfg
}

fn scenario(name: &str, seed: u64, n: usize, sigma0: f64, sigma: f64) -> (ScenarioSpec, nnme::simgen::Simulation) {
    let mut spec = ScenarioSpec::named(name, seed).unwrap();
    spec.n = n;
    spec.sigma0 = sigma0;
    spec.sigma = sigma;
    let sim = spec.generate().unwrap();
    (spec, sim)
}

fn fit_ise(method: Method, spec: &ScenarioSpec, sim: &nnme::simgen::Simulation, seed: u64) -> f64 {
    let fit = train(&sim.data, &desk_config(spec.sigma0, seed), method).unwrap();
    let pred = fit.predict(sim.grid.view()).unwrap();
    ise_values(pred.view(), sim.f_grid.view(), &spec.region).unwrap()
}

fn berry_large_error() -> Verdict {
    let (mut ours, mut nn) = (Vec::new(), Vec::new());
    for r in 1..=10 {
        let (spec, sim) = scenario("ex1-berry", r, 2000, 0.2, 0.1);
        ours.push(fit_ise(Method::Nnme, &spec, &sim, r));
        nn.push(fit_ise(Method::Nn, &spec, &sim, r));
    }
    let wins = ours.iter().zip(&nn).filter(|(a, b)| a < b).count();
    let (mo, mn) = (median(&ours), median(&nn));
    verdict(
        mo <= 0.03 && mn >= 0.12 && wins >= 9,
        format!("median NNME {mo:.4} (≤ 0.03), NN {mn:.4} (≥ 0.12), NNME < NN in {wins}/10 (≥ 9); NNME [{}] NN [{}]", fmt_list(&ours), fmt_list(&nn)),
    )
}

fn berry_small_error() -> Verdict {
    let ours: Vec<f64> = (1..=10)
        .map(|r| {
            let (spec, sim) = scenario("ex1-berry", r, 500, 0.1, 0.3);
            fit_ise(Method::Nnme, &spec, &sim, r)
        })
        .collect();
    let m = median(&ours);
    verdict(m <= 0.03, format!("median NNME {m:.4} (≤ 0.03); [{}]", fmt_list(&ours)))
}

fn method_ordering() -> Verdict {
    let mut ise = [Vec::new(), Vec::new(), Vec::new()];
    for r in 1..=10 {
        let (spec, sim) = scenario("exp1-sin", r, 1000, 0.1, 0.1);
        for (slot, m) in [Method::Nnme, Method::Ga, Method::Mjl].into_iter().enumerate() {
            ise[slot].push(fit_ise(m, &spec, &sim, r));
        }
    }
    let [a, g, j] = [median(&ise[0]), median(&ise[1]), median(&ise[2])];
    verdict(
        a < g && a < j,
        format!(
            "median NNME {a:.4} < GA {g:.4} and < MJL {j:.4}; NNME [{}] GA [{}] MJL [{}]",
            fmt_list(&ise[0]),
            fmt_list(&ise[1]),
            fmt_list(&ise[2])
        ),
    )
}

// ---------------------------------------------------------------- 8

fn kriging_consistency() -> Verdict {
    let mut rng = seeded(800);
    let n = 80;
    let w = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0_f64..1.0));
    let y: Array1<f64> = w.rows().into_iter().map(|r| (3.0 * r[0]).sin() * r[1].cos() + 0.1 * rng.random::<f64>()).collect();
    let data = Dataset::new(w, y, None, None).unwrap();
    let p = |s0: f64| KrigingParams { tau2: 1.2, beta: 3.0, sigma2: 0.05, sigma0_sq: s0 };
    let grid = Array2::from_shape_fn((100, 2), |(i, j)| if j == 0 { -1.0 + 0.02 * i as f64 } else { -0.9 + 0.018 * i as f64 });
    let kile = KrigingFit::with_params(KrigingKind::Kile, p(0.0), &data).unwrap().predict(grid.view()).unwrap();
    let kale = KrigingFit::with_params(KrigingKind::Kale, p(1e-10), &data).unwrap().predict(grid.view()).unwrap();
    let diff = (&kile - &kale).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
    let hp = KrigingParams { tau2: 1.5, beta: 2.0, sigma2: 0.1, sigma0_sq: 0.05 };
    let hand = [
        common::three_point_blup_error(KrigingKind::Kile, KrigingParams { sigma0_sq: 0.0, ..hp }, 0.8),
        common::three_point_blup_error(KrigingKind::Kale, hp, 0.8),
        common::three_point_blup_error(KrigingKind::Kale, hp, -0.3),
    ]
    .into_iter()
    .fold(0.0_f64, f64::max);
    verdict(diff < 1e-6 && hand <= 1e-10, format!("KALE(σ₀² = 1e-10) vs KILE max diff {diff:.1e} (< 1e-6); 3-point BLUP error {hand:.1e} (≤ 1e-10)"))
}

// ---------------------------------------------------------------- 9

fn softplus_inverse(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}

fn variance_estimators() -> Verdict {
    let (a, b, s0sq, sigma2, n, k): (f64, f64, f64, f64, usize, usize) = (0.5, 1.5, 0.25, 0.16, 5000, 50);
    let mut rng = seeded(900);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    // homoscedastic: linear truth, N(0, 1) covariate, exact-posterior encoder
    let x: Vec<f64> = (0..n).map(|_| normal()).collect();
    let w = Array2::from_shape_fn((n, 1), |(i, _)| x[i] + s0sq.sqrt() * normal());
    let y = Array1::from_shape_fn(n, |i| a + b * x[i] + sigma2.sqrt() * normal());
    let data = Dataset::new(w, y, None, None).unwrap();
    let mut decoder = Mlp::zeros(&[1, 1], &[Activation::Linear]).unwrap();
    decoder.set_params(&[b, a]).unwrap();
    let prec = 1.0 + 1.0 / s0sq + b * b / sigma2;
    let mut encoder = Mlp::zeros(&[2, 2], &[Activation::Linear]).unwrap();
    encoder
        .set_params(&[1.0 / (s0sq * prec), b / (sigma2 * prec), 0.0, 0.0, -a * b / (sigma2 * prec), softplus_inverse(1.0 / prec - DEFAULT_SCALE_FLOOR)])
        .unwrap();
    let model = MemModel::new(
        decoder,
        encoder,
        Prior::GaussianMixture(GaussianMixture::standard(1)),
        ResponseNoise::Homoscedastic { sigma2 },
        MeasurementError::Gaussian { variances: vec![s0sq] },
    )
    .unwrap();
    let rows: Vec<usize> = (0..n).collect();
    let batch = McBatch::draw(&model, &data, &rows, k, &mut seeded(901)).unwrap();
    let spread = batch
        .log_w
        .rows()
        .into_iter()
        .map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - r.fold(f64::INFINITY, |m, &v| m.min(v)))
        .fold(0.0_f64, f64::max);
    let s2 = sigma2_update(batch.weighted_rss(Weighting::SelfNormalized).as_slice().unwrap());
    let s2_ok = (s2 / sigma2 - 1.0).abs() <= 0.10 && spread < 1e-8;

    // heteroscedastic: per-row known variances, draws from each row's exact posterior
    let (tau2, choices): (f64, [f64; 3]) = (0.04, [0.0025, 0.01, 0.04]);
    let mut rng = seeded(902);
    let mut rss = Vec::with_capacity(n);
    let mut se2 = Vec::with_capacity(n);
    for _ in 0..n {
        let su2_i = choices[rng.random_range(0..3)];
        let se2_i = choices[rng.random_range(0..3)];
        let z: [f64; 3] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
        let xi = z[0];
        let wi = xi + su2_i.sqrt() * z[1];
        let ve = tau2 + se2_i;
        let yi = a + b * xi + ve.sqrt() * z[2];
        let p_i = 1.0 + 1.0 / su2_i + b * b / ve;
        let m_i = (wi / su2_i + b * (yi - a) / ve) / p_i;
        let r: f64 = (0..k)
            .map(|_| {
                let zx: f64 = StandardNormal.sample(&mut rng);
                let xk = m_i + zx / p_i.sqrt();
                (yi - a - b * xk).powi(2)
            })
            .sum::<f64>()
            / k as f64;
        rss.push(r);
        se2.push(se2_i);
    }
    let t2 = tau2_update(&rss, &se2).unwrap();
    let t2_ok = (t2 / tau2 - 1.0).abs() <= 0.25;

    // algebraic identities
    let equal = sigma2_update(&vec![0.25; n]) == 0.25;
    let reduce = tau2_update(&rss, &vec![0.0; n]).unwrap() == sigma2_update(&rss);
    verdict(
        s2_ok && t2_ok && equal && reduce,
        format!(
            "σ̂² {s2:.5} vs {sigma2} (±10%, log-weight spread {spread:.1e}); τ̂² {t2:.5} vs {tau2} (±25%); equal residuals exact: {equal}; zero σ²_ε reduces to σ̂²: {reduce}"
        ),
    )
}

fn main() {
    let skip: Vec<u32> = std::env::var("NNME_ACCEPTANCE_SKIP")
        .unwrap_or_default()
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "gradient correctness", gradient_suite),
        (2, "importance-weighted bound ordering", iwae_ordering),
        (3, "DReG unbiasedness and variance", dreg_properties),
        (4, "coupling flow exactness", nice_exactness),
        (5, "Berry large-error spot check", berry_large_error),
        (6, "Berry small-error spot check", berry_small_error),
        (7, "method ordering on the sine experiment", method_ordering),
        (8, "KALE/KILE consistency", kriging_consistency),
        (9, "σ² and τ² estimators", variance_estimators),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if skip.contains(&id) {
            println!("criterion {id} SKIP {name}");
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!("criterion {id} {} {name}: {} [{:.1}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail, t.elapsed().as_secs_f64());
    }
    println!(
        "criterion 10 DECLARED full result tables, appendix grids and real-data studies are multi-CPU-day sweeps; \
         the benchmark command runs them, acceptance rests on 1 to 9"
    );
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
