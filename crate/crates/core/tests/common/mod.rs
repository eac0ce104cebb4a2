//! Checkers shared by the integration tests and the acceptance run. Each
//! returns `Err` with a description instead of panicking so callers can count.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use nnme::estimators::{gradients, McBatch, PhiGradient, Weighting};
use nnme::flow::NiceFlow;
use nnme::kriging::{KrigingFit, KrigingKind, KrigingParams};
use nnme::model::{Dataset, MeasurementError, MemModel, ResponseNoise};
use nnme::nn::{standard_normal_vec, Activation, Mlp};
use nnme::priors::{GammaMixture, GaussianMixture, Prior, ScaledT};
use nnme::rng::seeded;

pub type Check = std::result::Result<(), String>;

const STEP: f64 = 1e-5;

pub fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / scale < 1e-4
}

pub fn central(mut f: impl FnMut(f64) -> f64, at: f64) -> f64 {
    (f(at + STEP) - f(at - STEP)) / (2.0 * STEP)
}

/// Compares `analytic` with a central difference. When the default stencil
/// disagrees, smaller steps are tried; a step only counts when its forward and
/// backward differences agree, i.e. no relu kink lies inside the stencil.
/// Returns the numeric value that was compared last.
pub fn matches_fd(mut f: impl FnMut(f64) -> f64, at: f64, analytic: f64) -> (bool, f64) {
    let num = central(&mut f, at);
    if close(analytic, num) {
        return (true, num);
    }
    let f0 = f(at);
    for h in [1e-6, 1e-7] {
        let (up, down) = ((f(at + h) - f0) / h, (f0 - f(at - h)) / h);
        let c = 0.5 * (up + down);
        let smooth = (up - down).abs() <= 1e-3 * up.abs().max(down.abs()).max(1e-3);
        if smooth && close(analytic, c) {
            return (true, c);
        }
    }
    (false, num)
}

fn expect(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

/// Random network with small non-zero biases.
pub fn random_net(seed: u64, input: usize, hidden: &[usize], output: usize, act: Activation) -> Mlp {
    let mut rng = seeded(seed);
    let mut net = Mlp::with_hidden(input, hidden, output, act, &mut rng).unwrap();
    let jitter: Vec<f64> = standard_normal_vec(&mut rng, net.n_params());
    for (p, b) in net.params_mut().iter_mut().zip(jitter) {
        *p += 0.1 * b;
    }
    net
}

pub fn check_mlp(net: &Mlp, x: &[f64], out_grad: &[f64]) -> Check {
    let (_, tape) = net.forward(x).map_err(|e| e.to_string())?;
    let (pg, ig) = net.backward(&tape, out_grad).map_err(|e| e.to_string())?;
    let value = |n: &Mlp, x: &[f64]| -> f64 { n.predict(x).unwrap().iter().zip(out_grad).map(|(a, b)| a * b).sum() };
    for j in 0..x.len() {
        let mut probe = x.to_vec();
        let num = central(|v| { probe[j] = v; value(net, &probe) }, x[j]);
        expect(close(ig[j], num), || format!("mlp input {j}: analytic {} numeric {num}", ig[j]))?;
    }
    let mut probe = net.clone();
    for p in 0..net.n_params() {
        let base = net.params()[p];
        let num = central(|v| { probe.params_mut()[p] = v; value(&probe, x) }, base);
        probe.params_mut()[p] = base;
        expect(close(pg[p], num), || format!("mlp param {p}: analytic {} numeric {num}", pg[p]))?;
    }
    Ok(())
}

/// False when some relu pre-activation sits within the stencil of its kink.
pub fn stencil_is_smooth(net: &Mlp, x: &[f64]) -> bool {
    let mut h = x.to_vec();
    for l in 0..net.n_layers() {
        let w = net.weight(l);
        let b = net.bias(l);
        let z: Vec<f64> = (0..w.nrows()).map(|r| w.row(r).iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + b[r]).collect();
        if net.activations()[l] == Activation::Relu && z.iter().any(|v| v.abs() < 1e-3) {
            return false;
        }
        h = z.iter().map(|v| net.activations()[l].apply(*v)).collect();
    }
    true
}

/// Parameter and input gradients of a weighted sum of prior log-densities.
pub fn check_prior(prior: &Prior, xs: &Array2<f64>, weights: &[f64]) -> Check {
    let name = prior.variant_name();
    let back = prior.backward_batch(xs.view(), weights).map_err(|e| e.to_string())?;
    let objective = |p: &Prior| -> f64 {
        let lp = p.log_density_batch(xs.view()).unwrap();
        lp.iter().zip(weights).map(|(a, w)| a * w).sum()
    };
    let base = prior.params();
    let mut probe = prior.clone();
    for i in 0..base.len() {
        let (ok, num) = matches_fd(
            |v| {
                let mut p = base.clone();
                p[i] = v;
                probe.set_params(&p).unwrap();
                objective(&probe)
            },
            base[i],
            back.params[i],
        );
        expect(ok, || format!("{name} param {i}: {} vs {num}", back.params[i]))?;
    }
    for r in 0..xs.nrows() {
        for j in 0..xs.ncols() {
            let mut x = xs.row(r).to_vec();
            let (ok, num) = matches_fd(|v| { x[j] = v; weights[r] * prior.log_density(&x).unwrap() }, xs[[r, j]], back.x[[r, j]]);
            expect(ok, || format!("{name} x[{r},{j}]: {} vs {num}", back.x[[r, j]]))?;
        }
    }
    Ok(())
}

pub fn random_points(seed: u64, rows: usize, d: usize, shift: f64) -> Array2<f64> {
    let mut rng = seeded(seed);
    Array2::from_shape_vec((rows, d), standard_normal_vec(&mut rng, rows * d)).unwrap().mapv(|v| v + shift)
}

/// One of the four prior families, parameters varied by `seed`.
pub fn prior_case(kind: usize, seed: u64) -> (Prior, Array2<f64>) {
    let s = seed as f64 * 0.01;
    match kind % 4 {
        0 => {
            let gm = GaussianMixture::new(&[0.6, 0.4], &[vec![0.2 + s, -0.3], vec![-0.5, 0.4 - s]], &[vec![0.5, 1.2], vec![0.8, 0.3 + s]])
                .unwrap();
            (Prior::GaussianMixture(gm), random_points(seed, 4, 2, 0.0))
        }
        1 => (Prior::ScaledT(ScaledT::new(2, 2.0 + s, 3.0).unwrap()), random_points(seed, 4, 2, 0.0)),
        2 => {
            let mut flow = NiceFlow::new(2, 4, &[8, 8], &mut seeded(seed + 100)).unwrap();
            flow.set_params(&flow.params().iter().map(|p| p * 0.5).collect::<Vec<_>>()).unwrap();
            (Prior::NiceFlow(flow), random_points(seed, 4, 2, 0.0))
        }
        _ => {
            let gamma = GammaMixture::new(&[0.5, 0.5], &[vec![2.0 + s], vec![6.0]], &[vec![1.0], vec![2.0 - s]], vec![3.0], vec![0.8]).unwrap();
            (Prior::GammaMixture(gamma), random_points(seed + 200, 4, 1, 0.0).mapv(|v| v.clamp(-2.5, 3.0)))
        }
    }
}

pub const PRIOR_WEIGHTS: [f64; 4] = [0.3, 1.0, 0.0, 0.7];

/// Small model with tanh networks and five data rows.
pub fn toy_model(d: usize, seed: u64, prior: Prior, hetero: bool) -> (MemModel, Dataset) {
    let mut rng = seeded(seed);
    let decoder = random_net(seed, d, &[6, 5], 1, Activation::Tanh);
    let mut encoder = random_net(seed + 1, d + 1, &[7], 2 * d, Activation::Tanh);
    encoder.params_mut().iter_mut().for_each(|p| *p *= 0.5);
    let (noise, error, su2, se2) = if hetero {
        (
            ResponseNoise::Heteroscedastic { tau2: 0.3 },
            MeasurementError::PerRow { factors: vec![1.0; d] },
            Some(Array1::from(vec![0.2, 0.4, 0.1, 0.3, 0.25])),
            Some(Array1::from(vec![0.05; 5])),
        )
    } else {
        (ResponseNoise::Homoscedastic { sigma2: 0.4 }, MeasurementError::Gaussian { variances: vec![0.3; d] }, None, None)
    };
    let model = MemModel::new(decoder, encoder, prior, noise, error).unwrap();
    let w = Array2::from_shape_vec((5, d), standard_normal_vec(&mut rng, 5 * d)).unwrap();
    let y = Array1::from(standard_normal_vec(&mut rng, 5));
    (model, Dataset::new(w, y, su2, se2).unwrap())
}

/// At fixed draws the θ (decoder), φ (encoder heads, plain) and γ (prior)
/// gradients are exact derivatives of the batch objective.
pub fn check_estimator(model: &MemModel, data: &Dataset, k: usize, weighting: Weighting, seed: u64) -> Check {
    let rows: Vec<usize> = (0..data.n()).collect();
    let z = nnme::estimators::draw_z(&mut seeded(seed), rows.len(), k, model.dim());
    let objective = |m: &MemModel| -> f64 {
        let b = McBatch::evaluate(m, data, &rows, k, z.clone()).unwrap();
        match weighting {
            Weighting::SelfNormalized => b.row_elbo().sum(),
            Weighting::Uniform => b.row_vae().sum(),
        }
    };
    let batch = McBatch::evaluate(model, data, &rows, k, z.clone()).map_err(|e| e.to_string())?;
    let g = gradients(model, &batch, weighting, PhiGradient::Plain).map_err(|e| e.to_string())?;

    let mut probe = model.clone();
    for i in 0..model.decoder.n_params() {
        let base = model.decoder.params()[i];
        let (ok, num) = matches_fd(|v| { probe.decoder.params_mut()[i] = v; objective(&probe) }, base, g.theta[i]);
        probe.decoder.params_mut()[i] = base;
        expect(ok, || format!("theta {i}: {} vs {num}", g.theta[i]))?;
    }
    for i in 0..model.encoder.n_params() {
        let base = model.encoder.params()[i];
        let (ok, num) = matches_fd(|v| { probe.encoder.params_mut()[i] = v; objective(&probe) }, base, g.phi[i]);
        probe.encoder.params_mut()[i] = base;
        expect(ok, || format!("phi {i}: {} vs {num}", g.phi[i]))?;
    }
    let gamma = model.prior.params();
    for i in 0..gamma.len() {
        let (ok, num) = matches_fd(
            |v| {
                let mut p = gamma.clone();
                p[i] = v;
                probe.prior.set_params(&p).unwrap();
                objective(&probe)
            },
            gamma[i],
            g.gamma[i],
        );
        probe.prior.set_params(&gamma).unwrap();
        expect(ok, || format!("gamma {i}: {} vs {num}", g.gamma[i]))?;
    }
    Ok(())
}

/// One of five estimator settings covering every prior family, both
/// weightings, per-row errors and the residual link.
pub fn estimator_case(kind: usize, seed: u64) -> Check {
    match kind % 5 {
        0 => {
            let gm = GaussianMixture::new(&[0.5, 0.5], &[vec![0.3], vec![-0.4]], &[vec![0.6], vec![1.5]]).unwrap();
            let (m, data) = toy_model(1, seed, Prior::GaussianMixture(gm), false);
            check_estimator(&m, &data, 4, Weighting::SelfNormalized, seed)
        }
        1 => {
            let gm = GaussianMixture::new(&[0.5, 0.5], &[vec![0.3], vec![-0.4]], &[vec![0.6], vec![1.5]]).unwrap();
            let (m, data) = toy_model(1, seed, Prior::GaussianMixture(gm), false);
            check_estimator(&m, &data, 3, Weighting::Uniform, seed)
        }
        2 => {
            let flow = NiceFlow::new(2, 2, &[6], &mut seeded(seed + 50)).unwrap();
            let (m, data) = toy_model(2, seed + 10, Prior::NiceFlow(flow), false);
            check_estimator(&m, &data, 3, Weighting::SelfNormalized, seed)
        }
        3 => {
            let (m, data) = toy_model(2, seed + 20, Prior::ScaledT(ScaledT::new(2, 2.0, 3.0).unwrap()), true);
            check_estimator(&m, &data, 3, Weighting::SelfNormalized, seed)
        }
        _ => {
            let (m, data) = toy_model(1, seed + 30, Prior::ScaledT(ScaledT::new(1, 2.0, 3.0).unwrap()), false);
            check_estimator(&m.with_residual_link(true), &data, 5, Weighting::SelfNormalized, seed)
        }
    }
}

/// `∂/∂x log p(w, y, x)` assembled from prior, decoder and error factors.
pub fn check_joint_x(seed: u64) -> Check {
    let flow = NiceFlow::new(2, 2, &[6], &mut seeded(seed)).unwrap();
    let (m, data) = toy_model(2, seed, Prior::NiceFlow(flow), false);
    let x = standard_normal_vec(&mut seeded(seed + 7), 2);
    let w = data.w.row(0).to_vec();
    let y = data.y[0];
    let xs = Array2::from_shape_vec((1, 2), x.clone()).unwrap();
    let pb = m.prior.backward_batch(xs.view(), &[1.0]).map_err(|e| e.to_string())?;
    let tape = m.decoder.forward_batch(xs.view()).map_err(|e| e.to_string())?;
    let f = tape.output()[[0, 0]];
    let og = Array2::from_elem((1, 1), (y - f) / 0.4);
    let dec = m.decoder.backward_batch(&tape, og.view()).map_err(|e| e.to_string())?;
    for j in 0..2 {
        let analytic = pb.x[[0, j]] + dec.input[[0, j]] + (w[j] - x[j]) / 0.3;
        let mut probe = x.clone();
        let (ok, num) = matches_fd(|v| { probe[j] = v; m.joint_log_density(&w, y, &probe, None, None).unwrap() }, x[j], analytic);
        expect(ok, || format!("joint x[{j}]: {analytic} vs {num}"))?;
    }
    Ok(())
}

/// Random network shape and input for an MLP check, avoiding relu kinks.
pub fn mlp_case(seed: u64) -> Check {
    let acts = [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::Softplus, Activation::Linear];
    let act = acts[(seed % 5) as usize];
    let input = 1 + (seed % 4) as usize;
    let hidden: Vec<usize> = (0..(seed % 3)).map(|l| 3 + ((seed + l) % 9) as usize).collect();
    let output = 1 + (seed % 3) as usize;
    let net = random_net(seed, input, &hidden, output, act);
    let mut rng = seeded(seed ^ 0xABCD);
    for _ in 0..50 {
        let x = standard_normal_vec(&mut rng, input);
        if stencil_is_smooth(&net, &x) {
            let og = standard_normal_vec(&mut rng, output);
            return check_mlp(&net, &x, &og);
        }
    }
    Err("no smooth stencil found".into())
}

/// Coupling flow with sub-network weights large enough to bend space.
pub fn bent_flow(dim: usize, layers: usize, seed: u64) -> NiceFlow {
    let mut rng = seeded(seed);
    let mut flow = NiceFlow::new(dim, layers, &[16, 16], &mut rng).unwrap();
    let p: Vec<f64> = standard_normal_vec(&mut rng, flow.n_params()).iter().map(|z| 0.4 * z).collect();
    flow.set_params(&p).unwrap();
    flow
}

fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if p != c {
            a.swap(p, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    d
}

/// `log N(g(x)) + log |det ∂g/∂x|` with a finite-difference Jacobian.
pub fn change_of_variables_log_density(flow: &NiceFlow, x: &[f64]) -> f64 {
    let d = x.len();
    let h = 1e-5;
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[j] += h;
        b[j] -= h;
        let (ga, gb) = (flow.forward(&a).unwrap(), flow.forward(&b).unwrap());
        for i in 0..d {
            jac[i][j] = (ga[i] - gb[i]) / (2.0 * h);
        }
    }
    let v = flow.forward(x).unwrap();
    let base = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * v.iter().map(|a| a * a).sum::<f64>();
    base + det(jac).abs().ln()
}

/// Max round-trip error over 20 standard-normal rows.
pub fn flow_round_trip_error(flow: &NiceFlow, seed: u64) -> f64 {
    let dim = flow.dim();
    let x = Array2::from_shape_vec((20, dim), standard_normal_vec(&mut seeded(seed), 20 * dim)).unwrap();
    let back = flow.inverse_batch(flow.forward_batch(x.view()).unwrap().view()).unwrap();
    (&back - &x).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b))
}

/// Midpoint-rule integral of a 2-D flow density over `[−10, 10]²`.
pub fn flow_mass_2d(flow: &NiceFlow) -> f64 {
    let (lo, hi, m) = (-10.0, 10.0, 500);
    let h = (hi - lo) / m as f64;
    let grid = Array2::from_shape_fn((m * m, 2), |(r, c)| lo + h * (0.5 + if c == 0 { r / m } else { r % m } as f64));
    flow.log_density_batch(grid.view()).unwrap().mapv(f64::exp).sum() * h * h
}

/// Solves a 3×3 system by Cramer's rule.
fn cramer(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let det3 = |m: &Array2<f64>| {
        m[[0, 0]] * (m[[1, 1]] * m[[2, 2]] - m[[1, 2]] * m[[2, 1]]) - m[[0, 1]] * (m[[1, 0]] * m[[2, 2]] - m[[1, 2]] * m[[2, 0]])
            + m[[0, 2]] * (m[[1, 0]] * m[[2, 1]] - m[[1, 1]] * m[[2, 0]])
    };
    let d = det3(a);
    (0..3)
        .map(|c| {
            let mut m = a.clone();
            m.column_mut(c).assign(b);
            det3(&m) / d
        })
        .collect()
}

/// `|predicted − hand-solved|` for a 3-point 1-D BLUP at `x0`.
pub fn three_point_blup_error(kind: KrigingKind, p: KrigingParams, x0: f64) -> f64 {
    let w = ndarray::array![[0.0], [0.5], [1.2]];
    let y = ndarray::array![1.0, -0.5, 2.0];
    let data = Dataset::new(w.clone(), y.clone(), None, None).unwrap();
    let fitted = KrigingFit::with_params(kind, p, &data).unwrap();
    let s0 = p.sigma0_sq;
    let ybar = y.mean().unwrap();
    let mut a = Array2::zeros((3, 3));
    for i in 0..3 {
        for j in 0..3 {
            let d2 = (w[[i, 0]] - w[[j, 0]]).powi(2);
            a[[i, j]] = if i == j {
                p.tau2 + p.sigma2
            } else if kind == KrigingKind::Kile {
                p.tau2 * (-p.beta * d2).exp()
            } else {
                let c = 1.0 + 4.0 * p.beta * s0;
                p.tau2 * (-p.beta * d2 / c).exp() / c.sqrt()
            };
        }
    }
    let alpha = cramer(&a, &y.mapv(|v| v - ybar));
    let hand: f64 = ybar
        + (0..3)
            .map(|i| {
                let d2 = (x0 - w[[i, 0]]).powi(2);
                let k = match kind {
                    KrigingKind::Kile => p.tau2 * (-p.beta * d2).exp(),
                    KrigingKind::Kale => {
                        let c = 1.0 + p.beta * s0;
                        p.tau2 * (-p.beta * d2 / c).exp() / c.sqrt()
                    }
                };
                k * alpha[i]
            })
            .sum::<f64>();
    (fitted.predict_one(&[x0]) - hand).abs()
}
