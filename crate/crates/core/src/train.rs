//! Maximum-likelihood training: minimize the average negative log-likelihood
//! of minibatches drawn with replacement.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{BoundFlow, FlowModel};
use crate::seed::{stream_rng, Stream};

/// Loss above which a run is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    step: u64,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    /// Adam with `(beta1, beta2) = (0.9, 0.999)` and `eps = 1e-8`.
    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update using each parameter's accumulated `grad`.
    ///
    /// Moments are allocated lazily on the first call and must see the same
    /// parameter list (same order, same shapes) on every later call.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad(p.name.clone()));
            }
        }
        if self.kind == OptimizerKind::Adam && self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Matrix::zeros(p.value.raw_dim())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.kind == OptimizerKind::Adam {
            if self.first_moment.len() != params.len()
                || self
                    .first_moment
                    .iter()
                    .zip(params.iter())
                    .any(|(m, p)| m.dim() != p.value.dim())
            {
                return Err(Error::Shape("optimizer moments do not match parameters".into()));
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let Parameter { value, grad, .. } = &mut **p;
                    value.scaled_add(-lr, grad);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for ((p, m), v) in params
                    .iter_mut()
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(m)
                        .and(v)
                        .for_each(|w, &g, m, v| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *w -= lr * m_hat / (v_hat.sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }
}

/// Average negative log-likelihood of `batch` as a scalar node.
pub fn nll<'t>(model: &FlowModel, bound: &BoundFlow<'t>, batch: Var<'t>) -> Result<Var<'t>> {
    if batch.shape().0 == 0 {
        return Err(Error::EmptyInput("nll batch"));
    }
    model.log_prob_var(bound, batch)?.mean()?.neg()
}

/// Average NLL of a whole point set, without gradients.
pub fn mean_nll(model: &FlowModel, points: &Matrix) -> Result<f64> {
    if points.nrows() == 0 {
        return Err(Error::EmptyInput("nll batch"));
    }
    let nll = model.nll(points)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Rows drawn uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(points: &Matrix, size: usize, rng: &mut R) -> Matrix {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..points.nrows())).collect();
    points.select(Axis(0), &idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 256,
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    /// Image-scale preset: Adam at `5e-5`.
    pub fn image_scale_preset() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    /// Minibatch NLL before each update, one entry per iteration.
    pub curve: Vec<(usize, f64)>,
    /// Full-dataset NLL every `eval_every` iterations and at the end.
    pub evals: Vec<(usize, f64)>,
}

/// Fit `model` to `data` by minibatch maximum likelihood.
pub fn train(model: &FlowModel, data: &Matrix, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.nrows() == 0 {
        return Err(Error::EmptyInput("training data"));
    }
    let mut model = model.clone();
    let mut optimizer = OptimizerState::new(config.optimizer, config.learning_rate)?;
    let mut rng = stream_rng(config.seed, Stream::TrainBatches);
    let mut curve = Vec::with_capacity(config.iterations);
    let mut evals = Vec::new();

    for it in 0..config.iterations {
        if it % config.eval_every == 0 {
            let value = mean_nll(&model, data)?;
            log::debug!("iteration {it}: dataset NLL {value:.4}");
            evals.push((it, value));
        }
        let batch = sample_batch(data, config.batch_size, &mut rng);
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let loss = nll(&model, &bound, tape.leaf(batch))?;
        let value = loss.scalar_value();
        if !value.is_finite() || value > DIVERGENCE_LIMIT {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                value,
                last_good: Box::new(model),
            });
        }
        curve.push((it, value));
        tape.backward(loss)?;
        crate::autodiff::zero_grad(model.parameters_mut());
        model.accumulate_grads(&bound);
        optimizer.step(&mut model.parameters_mut())?;
    }
    evals.push((config.iterations, mean_nll(&model, data)?));
    Ok(TrainOutcome { model, curve, evals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_update() {
        let mut p = Parameter::new("p", array![[1.0]]);
        p.grad = array![[2.0]];
        let mut opt = OptimizerState::sgd(0.1).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value[[0, 0]] - 0.8).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_grads_leave_parameters_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Parameter::new("p", array![[1.0, -2.0], [0.5, 3.0]]);
            let before = p.value.clone();
            let mut opt = OptimizerState::new(kind, 0.1).unwrap();
            for _ in 0..3 {
                opt.step(&mut [&mut p]).unwrap();
            }
            assert_eq!(p.value, before);
            assert_eq!(opt.steps_taken(), 3);
        }
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let lr = 5e-5;
        let mut p = Parameter::new("p", array![[0.25, -1.0, 4.0]]);
        p.grad.fill(1.0);
        let before = p.value.clone();
        let mut opt = OptimizerState::adam(lr).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        for (a, b) in p.value.iter().zip(&before) {
            assert!(((a - b) + lr).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_grad_is_rejected() {
        let mut p = Parameter::new("w", array![[1.0]]);
        p.grad = array![[f64::NAN]];
        let mut opt = OptimizerState::adam(0.1).unwrap();
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::NonFiniteGrad(n)) if n == "w"));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn nll_of_origin_under_identity_flow() {
        let model = FlowModel::build(2, 2, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let v = nll(&model, &bound, tape.leaf(array![[0.0, 0.0]])).unwrap();
        assert!((v.scalar_value() - 1.837_877_066_409_345_3).abs() < 1e-12);
    }

    #[test]
    fn nll_is_mean_of_pointwise() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let model = FlowModel::build(2, 2, 4, &mut r).unwrap();
        let x = array![[0.5, 1.0], [-1.0, 2.0], [0.0, -0.3]];
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let v = nll(&model, &bound, tape.leaf(x.clone())).unwrap().scalar_value();
        let pointwise = model.nll(&x).unwrap();
        assert!((v - pointwise.iter().sum::<f64>() / 3.0).abs() < 1e-14);

        let empty = tape.leaf(Matrix::zeros((0, 2)));
        assert!(matches!(nll(&model, &bound, empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let model = FlowModel::build(2, 2, 4, &mut r).unwrap();
        let data = array![[0.0, 1.0], [1.0, 0.0]];
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &cfg).unwrap();
        assert_eq!(out.model, model);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_lowers_nll() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let model = FlowModel::build(2, 2, 8, &mut r).unwrap();
        let data = Matrix::from_shape_fn((64, 2), |(i, j)| {
            3.0 + 0.3 * ((i * 7 + j * 3) % 11) as f64 / 11.0
        });
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve, b.curve);
        let first = a.evals.first().unwrap().1;
        let last = a.evals.last().unwrap().1;
        assert!(last < first - 1.0, "nll {first} -> {last}");
    }
}
