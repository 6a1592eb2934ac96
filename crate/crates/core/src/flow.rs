//! RealNVP-style affine coupling flow with a diagonal Gaussian prior.
//!
//! Direction convention: `forward` is the generative map `z -> x`,
//! `inverse` maps data back to the latent space and is what `log_prob` uses.
//!
//! A coupling layer keeps the coordinates where `mask == 1` and transforms the
//! rest as `y = x * exp(s(x_masked)) + t(x_masked)`, with the log-scale bounded
//! by `scale_clamp * tanh(raw / scale_clamp)`.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Parameter, Tape, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "flowtame-checkpoint/1";
pub const DEFAULT_SCALE_CLAMP: f64 = 3.0;
pub const DEFAULT_HIDDEN_WIDTH: usize = 64;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// `in -> hidden -> hidden -> out` with tanh between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
    scale_clamp: f64,
    gather: Matrix,
    scatter: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub mu: Parameter,
    pub log_sigma: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    layers: Vec<CouplingLayer>,
    pub prior: Prior,
    dim: usize,
    hidden_width: usize,
    scale_clamp: f64,
}

impl Dense {
    fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut R) -> Self {
        let weight = if zero {
            Matrix::zeros((fan_in, fan_out))
        } else {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng))
        };
        Dense {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Matrix::zeros((1, fan_out))),
        }
    }
}

impl Mlp {
    fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            layers: vec![
                Dense::new(&format!("{name}.0"), input, hidden, false, rng),
                Dense::new(&format!("{name}.1"), hidden, hidden, false, rng),
                Dense::new(&format!("{name}.2"), hidden, output, true, rng),
            ],
        }
    }

    fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|d| [&d.weight, &d.bias])
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
    }

    fn apply<'t>(vars: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let ones = tape.leaf(Matrix::ones((x.shape().0, 1)));
        let mut h = x;
        let n_layers = vars.len() / 2;
        for (i, wb) in vars.chunks(2).enumerate() {
            h = h.matmul(wb[0])?.add(ones.matmul(wb[1])?)?;
            if i + 1 < n_layers {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }
}

/// Masks alternate between even and odd coordinate indices.
pub fn alternating_mask(dim: usize, layer: usize) -> Vec<bool> {
    (0..dim).map(|i| i % 2 == layer % 2).collect()
}

impl CouplingLayer {
    fn with_nets(mask: Vec<bool>, scale_net: Mlp, shift_net: Mlp, scale_clamp: f64) -> Result<Self> {
        let kept: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let moved: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if kept.is_empty() || moved.is_empty() {
            return Err(Error::Config(
                "coupling mask needs at least one kept and one transformed coordinate".into(),
            ));
        }
        if !(scale_clamp > 0.0 && scale_clamp.is_finite()) {
            return Err(Error::Config(format!("scale_clamp must be positive, got {scale_clamp}")));
        }
        let dim = mask.len();
        let mut gather = Matrix::zeros((dim, kept.len()));
        for (col, &i) in kept.iter().enumerate() {
            gather[[i, col]] = 1.0;
        }
        let mut scatter = Matrix::zeros((moved.len(), dim));
        for (row, &i) in moved.iter().enumerate() {
            scatter[[row, i]] = 1.0;
        }
        Ok(CouplingLayer {
            mask,
            scale_net,
            shift_net,
            scale_clamp,
            gather,
            scatter,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_clamp(&self) -> f64 {
        self.scale_clamp
    }

    fn n_moved(&self) -> usize {
        self.scatter.nrows()
    }

    fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.scale_net.parameters().chain(self.shift_net.parameters())
    }

    fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.scale_net
            .parameters_mut()
            .chain(self.shift_net.parameters_mut())
    }

    /// Log-scale and shift, already scattered to full width, plus the
    /// per-row log-determinant of the forward direction.
    fn scale_shift<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let half = vars.len() / 2;
        let xin = x.matmul(tape.leaf(self.gather.clone()))?;
        let raw = Mlp::apply(&vars[..half], xin)?;
        let s = raw
            .scale(1.0 / self.scale_clamp)?
            .tanh()?
            .scale(self.scale_clamp)?;
        let t = Mlp::apply(&vars[half..], xin)?;
        let scatter = tape.leaf(self.scatter.clone());
        let logdet = s.matmul(tape.leaf(Matrix::ones((self.n_moved(), 1))))?;
        Ok((s.matmul(scatter)?, t.matmul(scatter)?, logdet))
    }

    fn forward_var<'t>(&self, vars: &[Var<'t>], z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (s, t, logdet) = self.scale_shift(vars, z)?;
        let x = z.mul(s.exp()?)?.add(t)?;
        Ok((x, logdet))
    }

    fn inverse_var<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (s, t, logdet) = self.scale_shift(vars, x)?;
        let z = x.sub(t)?.mul(s.neg()?.exp()?)?;
        Ok((z, logdet.neg()?))
    }
}

impl Prior {
    pub fn standard(dim: usize) -> Self {
        Prior {
            mu: Parameter::new("prior.mu", Matrix::zeros((1, dim))),
            log_sigma: Parameter::new("prior.log_sigma", Matrix::zeros((1, dim))),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.value.ncols()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.value.iter().map(|v| v.exp()).collect()
    }

    /// Per-row `sum_i log N(z_i; mu_i, sigma_i^2)` as an `n x 1` node.
    pub fn log_prob_var<'t>(mu: Var<'t>, log_sigma: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let (n, m) = z.shape();
        let ones_n = tape.leaf(Matrix::ones((n, 1)));
        let mu_b = ones_n.matmul(mu)?;
        let log_sigma_b = ones_n.matmul(log_sigma)?;
        let inv_sigma_b = ones_n.matmul(log_sigma.neg()?.exp()?)?;
        let u = z.sub(mu_b)?.mul(inv_sigma_b)?;
        let per_coord = u
            .square()?
            .scale(-0.5)?
            .sub(log_sigma_b)?
            .offset(-HALF_LN_2PI)?;
        per_coord.matmul(tape.leaf(Matrix::ones((m, 1))))
    }

    pub fn log_prob(&self, z: &Matrix) -> Result<Vec<f64>> {
        check_width(z, self.dim())?;
        let tape = Tape::new();
        let mu = tape.param(&self.mu);
        let ls = tape.param(&self.log_sigma);
        let lp = Prior::log_prob_var(mu, ls, tape.leaf(z.clone()))?;
        Ok(lp.value().into_iter().collect())
    }
}

fn check_width(x: &Matrix, dim: usize) -> Result<()> {
    if x.ncols() != dim {
        return Err(Error::Shape(format!(
            "expected batch of width {dim}, got {}",
            x.ncols()
        )));
    }
    Ok(())
}

fn check_finite(x: &Matrix, what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Parameter nodes of a [`FlowModel`] bound to one tape, in
/// [`FlowModel::parameters`] order.
pub struct BoundFlow<'t> {
    vars: Vec<Var<'t>>,
    per_layer: usize,
}

impl<'t> BoundFlow<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn layer(&self, i: usize) -> &[Var<'t>] {
        &self.vars[i * self.per_layer..(i + 1) * self.per_layer]
    }

    fn prior(&self) -> (Var<'t>, Var<'t>) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

impl FlowModel {
    pub fn build<R: Rng + ?Sized>(dim: usize, n_layers: usize, hidden_width: usize, rng: &mut R) -> Result<Self> {
        Self::build_with_clamp(dim, n_layers, hidden_width, DEFAULT_SCALE_CLAMP, rng)
    }

    pub fn build_with_clamp<R: Rng + ?Sized>(
        dim: usize,
        n_layers: usize,
        hidden_width: usize,
        scale_clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("coupling flows need dim >= 2, got {dim}")));
        }
        if n_layers < 2 || n_layers % 2 != 0 {
            return Err(Error::Config(format!(
                "n_layers must be even and at least 2, got {n_layers}"
            )));
        }
        if hidden_width == 0 {
            return Err(Error::Config("hidden_width must be at least 1".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mask = alternating_mask(dim, l);
            let kept = mask.iter().filter(|&&m| m).count();
            let moved = dim - kept;
            let scale_net = Mlp::new(&format!("layers.{l}.scale"), kept, hidden_width, moved, rng);
            let shift_net = Mlp::new(&format!("layers.{l}.shift"), kept, hidden_width, moved, rng);
            layers.push(CouplingLayer::with_nets(mask, scale_net, shift_net, scale_clamp)?);
        }
        Ok(FlowModel {
            layers,
            prior: Prior::standard(dim),
            dim,
            hidden_width,
            scale_clamp,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn scale_clamp(&self) -> f64 {
        self.scale_clamp
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|l| l.parameters())
            .chain([&self.prior.mu, &self.prior.log_sigma])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self
            .layers
            .iter_mut()
            .flat_map(|l| l.parameters_mut())
            .collect();
        out.push(&mut self.prior.mu);
        out.push(&mut self.prior.log_sigma);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundFlow<'t> {
        let vars: Vec<Var<'t>> = self.parameters().into_iter().map(|p| tape.param(p)).collect();
        let per_layer = self.layers.first().map(|l| l.parameters().count()).unwrap_or(0);
        BoundFlow { vars, per_layer }
    }

    /// Add the tape gradients of `bound` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, bound: &BoundFlow<'_>) {
        for (p, v) in self.parameters_mut().into_iter().zip(bound.vars()) {
            p.grad += &v.grad();
        }
    }

    pub fn forward_var<'t>(&self, bound: &BoundFlow<'t>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = z.tape();
        let mut x = z;
        let mut logdet = tape.leaf(Matrix::zeros((z.shape().0, 1)));
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward_var(bound.layer(i), x)?;
            x = next;
            logdet = logdet.add(ld)?;
        }
        Ok((x, logdet))
    }

    pub fn inverse_var<'t>(&self, bound: &BoundFlow<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let mut z = x;
        let mut logdet = tape.leaf(Matrix::zeros((x.shape().0, 1)));
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (next, ld) = layer.inverse_var(bound.layer(i), z)?;
            z = next;
            logdet = logdet.add(ld)?;
        }
        Ok((z, logdet))
    }

    /// Per-row log-likelihood as an `n x 1` node, differentiable in the
    /// bound parameters.
    pub fn log_prob_var<'t>(&self, bound: &BoundFlow<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (z, logdet) = self.inverse_var(bound, x)?;
        let (mu, log_sigma) = bound.prior();
        Prior::log_prob_var(mu, log_sigma, z)?.add(logdet)
    }

    pub fn forward(&self, z: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        check_width(z, self.dim)?;
        check_finite(z, "forward input")?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let (x, ld) = self.forward_var(&bound, tape.leaf(z.clone()))?;
        let x = x.value();
        check_finite(&x, "forward output")?;
        Ok((x, ld.value().into_iter().collect()))
    }

    pub fn inverse(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        check_width(x, self.dim)?;
        check_finite(x, "inverse input")?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let (z, ld) = self.inverse_var(&bound, tape.leaf(x.clone()))?;
        let z = z.value();
        check_finite(&z, "inverse output")?;
        Ok((z, ld.value().into_iter().collect()))
    }

    pub fn log_prob(&self, x: &Matrix) -> Result<Vec<f64>> {
        check_width(x, self.dim)?;
        check_finite(x, "log_prob input")?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let lp = self.log_prob_var(&bound, tape.leaf(x.clone()))?;
        let out: Vec<f64> = lp.value().into_iter().collect();
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log_prob output"));
        }
        Ok(out)
    }

    /// Per-point negative log-likelihood in nats.
    pub fn nll(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.log_prob(x)?.into_iter().map(|v| -v).collect())
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Matrix> {
        if n == 0 {
            return Err(Error::InvalidCount("sample count must be positive".into()));
        }
        let mu = &self.prior.mu.value;
        let sigma = self.prior.log_sigma.value.mapv(f64::exp);
        Ok(Array2::from_shape_fn((n, self.dim), |(_, j)| {
            let e: f64 = StandardNormal.sample(rng);
            mu[[0, j]] + sigma[[0, j]] * e
        }))
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Matrix> {
        let z = self.sample_latent(n, rng)?;
        Ok(self.forward(&z)?.0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let flatten = |net: &Mlp| -> Vec<f64> {
            net.parameters()
                .flat_map(|p| p.value.iter().copied().collect::<Vec<_>>())
                .collect()
        };
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            dim: self.dim,
            n_layers: self.layers.len(),
            hidden_width: self.hidden_width,
            scale_clamp: self.scale_clamp,
            prior: PriorRecord {
                mu: self.prior.mu.value.iter().copied().collect(),
                log_sigma: self.prior.log_sigma.value.iter().copied().collect(),
            },
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    mask: l.mask.iter().map(|&m| u8::from(m)).collect(),
                    scale_net: flatten(&l.scale_net),
                    shift_net: flatten(&l.shift_net),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion(ck.version.clone()));
        }
        let dim = ck.dim;
        if ck.layers.len() != ck.n_layers {
            return Err(Error::Config(format!(
                "checkpoint declares {} layers but stores {}",
                ck.n_layers,
                ck.layers.len()
            )));
        }
        // Build a skeleton with the declared architecture, then overwrite.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model =
            FlowModel::build_with_clamp(dim, ck.n_layers, ck.hidden_width, ck.scale_clamp, &mut rng)?;
        if ck.prior.mu.len() != dim || ck.prior.log_sigma.len() != dim {
            return Err(Error::Shape("prior vectors do not match dim".into()));
        }
        model.prior.mu.value = Matrix::from_shape_vec((1, dim), ck.prior.mu.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;
        model.prior.log_sigma.value = Matrix::from_shape_vec((1, dim), ck.prior.log_sigma.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;

        for (i, (layer, rec)) in model.layers.iter_mut().zip(&ck.layers).enumerate() {
            let mask: Vec<bool> = rec.mask.iter().map(|&m| m != 0).collect();
            if mask != layer.mask {
                return Err(Error::Config(format!("layer {i} mask does not alternate")));
            }
            fill_net(&mut layer.scale_net, &rec.scale_net, i, "scale_net")?;
            fill_net(&mut layer.shift_net, &rec.shift_net, i, "shift_net")?;
        }
        Ok(model)
    }
}

fn fill_net(net: &mut Mlp, flat: &[f64], layer: usize, which: &str) -> Result<()> {
    let expected: usize = net.parameters().map(|p| p.len()).sum();
    if flat.len() != expected {
        return Err(Error::Shape(format!(
            "layer {layer} {which}: expected {expected} weights, found {}",
            flat.len()
        )));
    }
    let mut offset = 0;
    for p in net.parameters_mut() {
        let n = p.len();
        p.value = Matrix::from_shape_vec(p.value.raw_dim(), flat[offset..offset + n].to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        offset += n;
    }
    Ok(())
}

/// On-disk checkpoint schema. Net weights are flattened layer by layer,
/// each weight matrix row-major followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub dim: usize,
    pub n_layers: usize,
    pub hidden_width: usize,
    pub scale_clamp: f64,
    pub prior: PriorRecord,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub mask: Vec<u8>,
    pub scale_net: Vec<f64>,
    pub shift_net: Vec<f64>,
}

/// `log N(0; 0, I)` in `dim` dimensions.
pub fn standard_normal_log_density_at_origin(dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(n: usize, dim: usize, r: &mut ChaCha8Rng) -> Matrix {
        let u = Uniform::new(-2.0, 2.0).unwrap();
        Array2::from_shape_fn((n, dim), |_| u.sample(r))
    }

    /// Perturb every parameter so the flow is far from identity.
    pub(crate) fn randomize(model: &mut FlowModel, scale: f64, r: &mut ChaCha8Rng) {
        let u = Uniform::new(-scale, scale).unwrap();
        for p in model.parameters_mut() {
            p.value.mapv_inplace(|v| v + u.sample(r));
        }
    }

    #[test]
    fn fresh_model_is_identity() {
        let mut r = rng(1);
        let model = FlowModel::build(2, 4, 16, &mut r).unwrap();
        let z = random_batch(50, 2, &mut r);
        let (x, ld) = model.forward(&z).unwrap();
        assert_eq!(x, z);
        assert!(ld.iter().all(|&v| v == 0.0));
        let (back, ld) = model.inverse(&z).unwrap();
        assert_eq!(back, z);
        assert!(ld.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_count_validation() {
        let mut r = rng(1);
        assert!(matches!(FlowModel::build(2, 1, 8, &mut r), Err(Error::Config(_))));
        assert!(matches!(FlowModel::build(2, 3, 8, &mut r), Err(Error::Config(_))));
        assert!(matches!(FlowModel::build(2, 2, 0, &mut r), Err(Error::Config(_))));
        assert!(matches!(FlowModel::build(1, 2, 8, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn masks_alternate() {
        let model = FlowModel::build(2, 6, 8, &mut rng(0)).unwrap();
        let masks: Vec<Vec<bool>> = model.layers().iter().map(|l| l.mask().to_vec()).collect();
        for (i, m) in masks.iter().enumerate() {
            let expected = if i % 2 == 0 { vec![true, false] } else { vec![false, true] };
            assert_eq!(m, &expected);
        }
        let wide = FlowModel::build(5, 2, 8, &mut rng(0)).unwrap();
        assert_eq!(wide.layers()[0].mask(), &[true, false, true, false, true]);
        assert_eq!(wide.layers()[1].mask(), &[false, true, false, true, false]);
    }

    fn translation_model(b: f64) -> FlowModel {
        let mut model = FlowModel::build(2, 2, 8, &mut rng(3)).unwrap();
        // First layer keeps coordinate 0 and shifts coordinate 1 by b.
        model.layers[0].shift_net.layers[2].bias.value = array![[b]];
        model
    }

    #[test]
    fn pure_translation() {
        let b = 1.75;
        let model = translation_model(b);
        let z = array![[0.3, -1.2], [2.0, 0.5]];
        let (x, ld) = model.forward(&z).unwrap();
        assert_eq!(x, array![[0.3, -1.2 + b], [2.0, 0.5 + b]]);
        assert_eq!(ld, vec![0.0, 0.0]);
        let (back, _) = model.inverse(&x).unwrap();
        assert_eq!(back, array![[0.3, -1.2], [2.0, 0.5]]);

        let lp = model.log_prob(&array![[0.0, b]]).unwrap();
        assert!((lp[0] + (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn standard_prior_at_origin() {
        let prior = Prior::standard(2);
        let lp = prior.log_prob(&array![[0.0, 0.0]]).unwrap();
        assert!((lp[0] - (-1.837_877_066_409_345_3)).abs() < 1e-12);
        assert!((lp[0] - standard_normal_log_density_at_origin(2)).abs() < 1e-15);
    }

    #[test]
    fn prior_sum_matches_product_form() {
        let mut prior = Prior::standard(3);
        prior.mu.value = array![[0.5, -1.0, 2.0]];
        prior.log_sigma.value = array![[0.1, -0.4, 0.7]];
        let z = array![[0.2, 0.3, -0.1], [1.5, -2.0, 3.0]];
        let lp = prior.log_prob(&z).unwrap();
        for (row, &value) in z.rows().into_iter().zip(&lp) {
            let mut prod = 1.0;
            for j in 0..3 {
                let s = prior.log_sigma.value[[0, j]].exp();
                let u = (row[j] - prior.mu.value[[0, j]]) / s;
                prod *= (-0.5 * u * u).exp() / (s * (2.0 * PI).sqrt());
            }
            assert!((value - prod.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_integrates_to_one_on_grid() {
        let mut prior = Prior::standard(2);
        prior.mu.value = array![[0.5, -0.25]];
        prior.log_sigma.value = array![[0.2, -0.3]];
        let (lo, hi, n) = (-8.0, 8.0, 400);
        let h = (hi - lo) / n as f64;
        let pts = Array2::from_shape_fn((n * n, 2), |(k, j)| {
            let idx = if j == 0 { k / n } else { k % n };
            lo + (idx as f64 + 0.5) * h
        });
        let total: f64 = prior.log_prob(&pts).unwrap().iter().map(|v| v.exp() * h * h).sum();
        assert!((total - 1.0).abs() < 1e-2, "integral {total}");
    }

    #[test]
    fn identity_flow_log_prob_equals_prior() {
        let mut r = rng(5);
        let model = FlowModel::build(2, 2, 8, &mut r).unwrap();
        let x = random_batch(20, 2, &mut r);
        assert_eq!(model.log_prob(&x).unwrap(), model.prior.log_prob(&x).unwrap());
    }

    #[test]
    fn round_trip_and_logdet_antisymmetry() {
        let mut r = rng(11);
        let mut model = FlowModel::build(2, 4, 16, &mut r).unwrap();
        randomize(&mut model, 0.5, &mut r);
        let z = random_batch(1000, 2, &mut r);
        let (x, ld_f) = model.forward(&z).unwrap();
        let (back, ld_i) = model.inverse(&x).unwrap();
        let err = (&back - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "round-trip error {err}");
        for (a, b) in ld_f.iter().zip(&ld_i) {
            assert!((a + b).abs() < 1e-9);
        }
    }

    #[test]
    fn log_scale_is_clamped() {
        let mut r = rng(2);
        let mut model = FlowModel::build_with_clamp(2, 2, 8, 0.5, &mut r).unwrap();
        randomize(&mut model, 10.0, &mut r);
        let z = random_batch(200, 2, &mut r);
        let (_, ld) = model.forward(&z).unwrap();
        // One transformed coordinate per layer, two layers.
        assert!(ld.iter().all(|v| v.abs() <= 2.0 * 0.5 + 1e-12));
    }

    #[test]
    fn sampling_is_seeded_and_rejects_zero() {
        let model = FlowModel::build(2, 2, 8, &mut rng(0)).unwrap();
        let a = model.sample(100, &mut rng(9)).unwrap();
        let b = model.sample(100, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(model.sample(0, &mut rng(9)), Err(Error::InvalidCount(_))));
    }

    #[test]
    fn identity_flow_sample_mean_matches_prior() {
        let mut model = FlowModel::build(2, 2, 8, &mut rng(0)).unwrap();
        model.prior.mu.value = array![[1.5, -2.0]];
        model.prior.log_sigma.value = array![[0.0, 0.5]];
        let n = 20_000;
        let s = model.sample(n, &mut rng(4)).unwrap();
        let sigma = model.prior.sigma();
        for j in 0..2 {
            let mean = s.column(j).sum() / n as f64;
            let tol = 3.0 * sigma[j] / (n as f64).sqrt();
            assert!((mean - model.prior.mu.value[[0, j]]).abs() < tol);
        }
    }

    #[test]
    fn width_and_finiteness_are_checked() {
        let model = FlowModel::build(2, 2, 8, &mut rng(0)).unwrap();
        assert!(matches!(model.forward(&Matrix::zeros((3, 3))), Err(Error::Shape(_))));
        assert!(matches!(model.log_prob(&Matrix::zeros((3, 1))), Err(Error::Shape(_))));
        assert!(matches!(
            model.inverse(&array![[f64::NAN, 0.0]]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_in_memory() {
        let mut r = rng(8);
        let mut model = FlowModel::build(3, 4, 6, &mut r).unwrap();
        randomize(&mut model, 0.3, &mut r);
        let back = FlowModel::from_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(back, model);

        let mut ck = model.to_checkpoint();
        ck.version = "flowtame-checkpoint/99".into();
        assert!(matches!(FlowModel::from_checkpoint(&ck), Err(Error::SchemaVersion(_))));
    }
}
