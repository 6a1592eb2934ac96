#![allow(dead_code)]

use flowtame::autodiff::Matrix;
use flowtame::flow::FlowModel;
use rand::Rng;

pub mod oracles;

/// Gradient-check error: absolute difference scaled by the larger magnitude,
/// floored so entries near zero are judged on absolute accuracy.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central differences of `f` at `x`, one entry at a time.
pub fn numeric_grad(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut plus = x.clone();
        plus[[r, c]] += h;
        let mut minus = x.clone();
        minus[[r, c]] -= h;
        g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

pub fn max_rel_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Perturb every parameter so the flow is far from identity.
pub fn randomize(model: &mut FlowModel, scale: f64, rng: &mut impl Rng) {
    for p in model.parameters_mut() {
        p.value.mapv_inplace(|v| v + rng.random_range(-scale..scale));
    }
}
