//! Independent measurements shared by the property tests and the acceptance
//! suite. Each returns the quantity it measures; callers decide the bound.

use flowtame::autodiff::{BinaryOp, Matrix, ReduceOp, Tape, UnaryOp, Var};
use flowtame::flow::FlowModel;
use flowtame::metrics::{fit_gaussian, ks_normality_test, Gaussian};
use flowtame::seed::{stream_rng, Stream};
use flowtame::tame::{gaussian_kl, objective, StatsSource, TamingConfig};
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{max_rel_error, numeric_grad, randomize, uniform};

pub const FD_STEP: f64 = 1e-5;

/// Error of `d/dx sum(w * build(x))` for a random weight matrix `w`.
pub fn op_error<F>(name: &str, x: &Matrix, out_shape: (usize, usize), build: F) -> f64
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let w = uniform(out_shape.0, out_shape.1, -1.0, 1.0, &mut rng);
    let eval = |x: &Matrix| -> f64 {
        let tape = Tape::new();
        let out = build(tape.leaf(x.clone()));
        (&out.value() * &w).sum()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = build(xv);
    let loss = out.mul(tape.leaf(w.clone())).unwrap().sum().unwrap();
    tape.backward(loss).unwrap();
    max_rel_error(&xv.grad(), &numeric_grad(x, FD_STEP, eval))
}

/// Gradient error for every primitive, keyed by a readable name.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let any = uniform(3, 4, -2.0, 2.0, &mut rng);
    let positive = uniform(3, 4, 0.2, 3.0, &mut rng);
    // Keep |x| away from the kink at zero.
    let away = any.mapv(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let unary = [
        (UnaryOp::Exp, &any),
        (UnaryOp::Log, &positive),
        (UnaryOp::Tanh, &any),
        (UnaryOp::Sigmoid, &any),
        (UnaryOp::Neg, &any),
        (UnaryOp::Square, &any),
        (UnaryOp::Abs, &away),
        (UnaryOp::Sqrt, &positive),
    ];
    for (op, x) in unary {
        let name = format!("{op:?}");
        let e = op_error(&name, x, (3, 4), move |v| v.unary(op).unwrap());
        out.push((name, e));
    }

    let other = uniform(3, 4, 0.5, 2.0, &mut rng);
    let x = uniform(3, 4, -2.0, 2.0, &mut rng);
    let scalar = Matrix::from_elem((1, 1), 0.7);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let o = other.clone();
        let name = format!("{op:?} lhs");
        out.push((name.clone(), op_error(&name, &x, (3, 4), move |v| {
            v.binary(op, v.tape().leaf(o.clone())).unwrap()
        })));
        let l = x.clone();
        let name = format!("{op:?} rhs");
        out.push((name.clone(), op_error(&name, &other, (3, 4), move |v| {
            v.tape().leaf(l.clone()).binary(op, v).unwrap()
        })));
        let o = other.clone();
        let name = format!("{op:?} scalar lhs");
        out.push((name.clone(), op_error(&name, &scalar, (3, 4), move |v| {
            v.binary(op, v.tape().leaf(o.clone())).unwrap()
        })));
        let o = other.clone();
        let name = format!("{op:?} scalar rhs");
        out.push((name.clone(), op_error(&name, &scalar, (3, 4), move |v| {
            v.tape().leaf(o.clone()).binary(op, v).unwrap()
        })));
    }

    let a = uniform(3, 4, -1.0, 1.0, &mut rng);
    let b = uniform(4, 2, -1.0, 1.0, &mut rng);
    let bb = b.clone();
    out.push(("MatMul lhs".into(), op_error("MatMul lhs", &a, (3, 2), move |v| {
        v.matmul(v.tape().leaf(bb.clone())).unwrap()
    })));
    let aa = a.clone();
    out.push(("MatMul rhs".into(), op_error("MatMul rhs", &b, (3, 2), move |v| {
        v.tape().leaf(aa.clone()).matmul(v).unwrap()
    })));
    for op in [ReduceOp::Sum, ReduceOp::Mean] {
        let name = format!("{op:?}");
        out.push((name.clone(), op_error(&name, &a, (1, 1), move |v| v.reduce(op).unwrap())));
    }
    out
}

/// Small randomized flow used by the parameter-gradient checks.
pub fn toy_model(seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::build(2, 2, 4, &mut rng).unwrap();
    randomize(&mut model, 0.4, &mut rng);
    model
}

/// Worst parameter-gradient error of `value` against central differences.
fn parameter_error<V, A>(model: &FlowModel, value: V, analytic: A) -> f64
where
    V: Fn(&FlowModel) -> f64,
    A: Fn(&FlowModel) -> FlowModel,
{
    let with_grads = analytic(model);
    let mut worst = 0.0f64;
    for (k, p) in with_grads.parameters().iter().enumerate() {
        let numeric = numeric_grad(&p.value, FD_STEP, |v| {
            let mut m = model.clone();
            m.parameters_mut()[k].value = v.clone();
            value(&m)
        });
        worst = worst.max(max_rel_error(&p.grad, &numeric));
    }
    worst
}

pub fn log_prob_gradient_error() -> f64 {
    let model = toy_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(5, 2, -2.0, 2.0, &mut rng);
    parameter_error(
        &model,
        |m| m.log_prob(&x).unwrap().iter().sum(),
        |m| {
            let tape = Tape::new();
            let bound = m.bind(&tape);
            let lp = m.log_prob_var(&bound, tape.leaf(x.clone())).unwrap().sum().unwrap();
            tape.backward(lp).unwrap();
            let mut out = m.clone();
            out.accumulate_grads(&bound);
            out
        },
    )
}

/// Worst parameter-gradient error of the full taming objective.
pub fn objective_gradient_error(config: &TamingConfig, frozen: bool) -> f64 {
    let model = toy_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let forget = uniform(4, 2, 0.5, 1.5, &mut rng);
    let remember = uniform(16, 2, -2.0, 2.0, &mut rng);
    let fit = fit_gaussian(&model.nll(&remember).unwrap()).unwrap();
    // Offset the base fit so the KL terms sit away from their minimum.
    let base = Gaussian::new(fit.mu + 0.3, fit.sigma * 1.2).unwrap();
    let frozen_stats = Gaussian::new(fit.mu - 0.1, fit.sigma * 0.9).unwrap();
    let source = || if frozen { StatsSource::Frozen(&frozen_stats) } else { StatsSource::Batch };

    parameter_error(
        &model,
        |m| {
            let tape = Tape::new();
            let bound = m.bind(&tape);
            objective(m, &bound, tape.leaf(forget.clone()), tape.leaf(remember.clone()), &base, config, source())
                .unwrap()
                .total
                .scalar_value()
        },
        |m| {
            let tape = Tape::new();
            let bound = m.bind(&tape);
            let terms = objective(
                m,
                &bound,
                tape.leaf(forget.clone()),
                tape.leaf(remember.clone()),
                &base,
                config,
                source(),
            )
            .unwrap();
            tape.backward(terms.total).unwrap();
            let mut out = m.clone();
            out.accumulate_grads(&bound);
            out
        },
    )
}

pub fn random_flow(seed: u64, layers: usize, scale: f64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::build(2, layers, 8, &mut rng).unwrap();
    randomize(&mut model, scale, &mut rng);
    model
}

/// Max-norm error of inverse(forward(z)) on 1000 latent draws, and the
/// worst |logdet_forward + logdet_inverse|.
pub fn round_trip_errors(model: &FlowModel) -> (f64, f64) {
    let mut rng = stream_rng(7, Stream::Evaluation);
    let z = model.sample_latent(1000, &mut rng).unwrap();
    let (x, fwd) = model.forward(&z).unwrap();
    let (back, inv) = model.inverse(&x).unwrap();
    let err = (&back - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let anti = fwd.iter().zip(&inv).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    (err, anti)
}

/// `log |det J|` of `f` at `p` from a central-difference 2x2 Jacobian.
pub fn numeric_logdet(f: impl Fn(&Matrix) -> Matrix, p: [f64; 2]) -> f64 {
    let h = 1e-5;
    let mut jac = [[0.0; 2]; 2];
    for j in 0..2 {
        let mut plus = array![[p[0], p[1]]];
        let mut minus = plus.clone();
        plus[[0, j]] += h;
        minus[[0, j]] -= h;
        let (fp, fm) = (f(&plus), f(&minus));
        for i in 0..2 {
            jac[i][j] = (fp[[0, i]] - fm[[0, i]]) / (2.0 * h);
        }
    }
    (jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]).abs().ln()
}

/// Worst gap between the forward log-det and the brute-force Jacobian.
pub fn logdet_jacobian_error(model: &FlowModel) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = uniform(20, 2, -2.0, 2.0, &mut rng);
    let (_, logdet) = model.forward(&z).unwrap();
    z.rows()
        .into_iter()
        .zip(&logdet)
        .map(|(row, ld)| (ld - numeric_logdet(|p| model.forward(p).unwrap().0, [row[0], row[1]])).abs())
        .fold(0.0, f64::max)
}

/// Midpoint rule for the density over `[-half_width, half_width]^2`.
pub fn grid_integral(model: &FlowModel, half_width: f64, n: usize) -> f64 {
    let step = 2.0 * half_width / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let row = Matrix::from_shape_fn((n, 2), |(j, c)| {
            let k = if c == 0 { i } else { j };
            -half_width + (k as f64 + 0.5) * step
        });
        total += model.log_prob(&row).unwrap().iter().map(|v| v.exp()).sum::<f64>();
    }
    total * step * step
}

/// Worst |closed-form KL - Monte-Carlo KL| over a few random pairs.
pub fn kl_monte_carlo_error(pairs: usize, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let log_density = |g: &Gaussian, x: f64| {
        -0.5 * ((x - g.mu) / g.sigma).powi(2) - g.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let p = Gaussian::new(rng.random_range(-2.0..2.0), rng.random_range(0.5..2.0)).unwrap();
        let q = Gaussian::new(rng.random_range(-2.0..2.0), rng.random_range(0.5..2.0)).unwrap();
        let sampler = Normal::new(p.mu, p.sigma).unwrap();
        let mc = (0..samples)
            .map(|_| {
                let x = sampler.sample(&mut rng);
                log_density(&p, x) - log_density(&q, x)
            })
            .sum::<f64>()
            / samples as f64;
        worst = worst.max((gaussian_kl(&p, &q).unwrap() - mc).abs());
    }
    worst
}

/// Fraction of normal samples of size 2000 with KS p-value above 0.05.
pub fn ks_normal_acceptance(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let normal = Normal::new(3.0, 1.5).unwrap();
    let accepted = (0..trials)
        .filter(|_| {
            let xs: Vec<f64> = (0..2000).map(|_| normal.sample(&mut rng)).collect();
            ks_normality_test(&xs).unwrap().p_value > 0.05
        })
        .count();
    accepted as f64 / trials as f64
}

/// Largest KS p-value over uniform samples of size 2000.
pub fn ks_uniform_max_p(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let uniform = Uniform::new(0.0, 1.0).unwrap();
    (0..trials)
        .map(|_| {
            let xs: Vec<f64> = (0..2000).map(|_| uniform.sample(&mut rng)).collect();
            ks_normality_test(&xs).unwrap().p_value
        })
        .fold(0.0, f64::max)
}
