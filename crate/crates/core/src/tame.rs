//! Taming: fine-tune a trained flow so a forget set's NLL lands in a band
//! around `mu_R + delta * sigma_R` while the remember-set NLL distribution
//! stays close to the base model's.
//!
//! Each iteration samples a forget batch and a remember batch, checks the
//! stopping rule on the full forget set, and takes one optimizer step on
//! `alpha * L_F + (1 - alpha) * L_R`:
//!
//! * `L_F = mean(sigmoid(sigma_R^2 * dist^2))` over the forget batch, with
//!   `dist = (nll - (mu_R + delta * sigma_R)) / sigma_R`.
//! * `L_R = (1 - gamma) * mean_nll(X_R) + gamma * (KL(base || tamed) + KL(tamed || base))`
//!   between Gaussian fits of the remember NLLs.
//!
//! `(mu_R, sigma_R)` are re-estimated from the remember batch every
//! `stats_refresh` iterations. On a refresh iteration they stay attached to
//! the graph; on the iterations in between they are constants.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{BoundFlow, FlowModel};
use crate::metrics::{fit_gaussian, Gaussian, SIGMA_FLOOR};
use crate::seed::{stream_rng, Stream};
use crate::train::{sample_batch, OptimizerKind, OptimizerState};

/// Which remember-loss terms participate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_remember_loss: bool,
    pub use_forward_kl: bool,
    pub use_reverse_kl: bool,
    pub use_nll_anchor: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_remember_loss: true,
            use_forward_kl: true,
            use_reverse_kl: true,
            use_nll_anchor: true,
        }
    }
}

impl AblationFlags {
    fn any_remember_term(&self) -> bool {
        self.use_remember_loss && (self.use_forward_kl || self.use_reverse_kl || self.use_nll_anchor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamingConfig {
    /// Target offset in remember-set standard deviations. Negative values
    /// raise the forget set's likelihood instead of lowering it.
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub forget_batch: usize,
    pub remember_batch: usize,
    pub stats_refresh: usize,
    pub max_iterations: usize,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl Default for TamingConfig {
    fn default() -> Self {
        TamingConfig {
            delta: 4.0,
            epsilon: 0.6,
            alpha: 0.6,
            gamma: 0.6,
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Adam,
            forget_batch: 10,
            remember_batch: 256,
            stats_refresh: 10,
            max_iterations: 5000,
            flags: AblationFlags::default(),
            seed: 0,
        }
    }
}

impl TamingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.delta.is_finite() || self.delta == 0.0 {
            return bad(format!("delta must be finite and nonzero, got {}", self.delta));
        }
        if !(self.epsilon > 0.0) || self.epsilon >= self.delta.abs() {
            return bad(format!(
                "epsilon must lie in (0, |delta|), got {} with delta {}",
                self.epsilon, self.delta
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.forget_batch == 0 || self.remember_batch < 2 {
            return bad("forget_batch must be >= 1 and remember_batch >= 2".into());
        }
        if self.stats_refresh == 0 || self.max_iterations == 0 {
            return bad("stats_refresh and max_iterations must be positive".into());
        }
        Ok(())
    }
}

/// Differentiable Gaussian fit of remember-batch NLLs.
#[derive(Debug, Clone, Copy)]
pub struct NllStats<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl<'t> NllStats<'t> {
    /// Stats held as constants on `tape`.
    pub fn constant(tape: &'t Tape, g: &Gaussian) -> Result<Self> {
        g.validate()?;
        Ok(NllStats {
            mu: tape.scalar(g.mu),
            sigma: tape.scalar(g.sigma),
        })
    }

    pub fn values(&self) -> Gaussian {
        Gaussian {
            mu: self.mu.scalar_value(),
            sigma: self.sigma.scalar_value(),
        }
    }
}

/// Mean and population SD of an `n x 1` NLL node.
pub fn nll_stats<'t>(nll: Var<'t>) -> Result<NllStats<'t>> {
    let n = nll.shape().0 * nll.shape().1;
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mu = nll.mean()?;
    let var = nll.sub(mu)?.square()?.mean()?;
    let v = var.scalar_value();
    if !(v.sqrt() > SIGMA_FLOOR) {
        return Err(Error::DegenerateStats {
            sigma: v.sqrt(),
            floor: SIGMA_FLOOR,
        });
    }
    Ok(NllStats { mu, sigma: var.sqrt()? })
}

/// Per-point NLL of `batch` as an `n x 1` node.
pub fn nll_var<'t>(model: &FlowModel, bound: &BoundFlow<'t>, batch: Var<'t>) -> Result<Var<'t>> {
    model.log_prob_var(bound, batch)?.neg()
}

/// Stats of `model`'s NLL on `batch`, attached to `tape`.
pub fn estimate_nll_stats<'t>(model: &FlowModel, bound: &BoundFlow<'t>, batch: Var<'t>) -> Result<NllStats<'t>> {
    nll_stats(nll_var(model, bound, batch)?)
}

/// Distance of `nll` from the threshold in units of `sigma`.
pub fn signed_distance(nll: f64, stats: &Gaussian, delta: f64) -> f64 {
    (nll - (stats.mu + delta * stats.sigma)) / stats.sigma
}

pub fn signed_distance_var<'t>(nll: Var<'t>, stats: &NllStats<'t>, delta: f64) -> Result<Var<'t>> {
    let threshold = stats.mu.add(stats.sigma.scale(delta)?)?;
    nll.sub(threshold)?.div(stats.sigma)
}

/// `mean(sigmoid(sigma^2 * dist^2))` over the forget NLLs.
pub fn forget_loss<'t>(nll_forget: Var<'t>, stats: &NllStats<'t>, delta: f64) -> Result<Var<'t>> {
    if nll_forget.shape().0 == 0 {
        return Err(Error::EmptyInput("forget batch"));
    }
    let dist = signed_distance_var(nll_forget, stats, delta)?;
    dist.square()?
        .mul(stats.sigma.square()?)?
        .sigmoid()?
        .mean()
}

/// `KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2))`.
pub fn gaussian_kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    Ok((q.sigma / p.sigma).ln() + (p.sigma.powi(2) + (p.mu - q.mu).powi(2)) / (2.0 * q.sigma.powi(2))
        - 0.5)
}

/// Closed-form Gaussian KL on tape nodes.
pub fn gaussian_kl_var<'t>(p: &NllStats<'t>, q: &NllStats<'t>) -> Result<Var<'t>> {
    let log_ratio = q.sigma.div(p.sigma)?.ln()?;
    let num = p.sigma.square()?.add(p.mu.sub(q.mu)?.square()?)?;
    let den = q.sigma.square()?.scale(2.0)?;
    log_ratio.add(num.div(den)?)?.offset(-0.5)
}

/// Remember loss from the tamed model's remember-batch NLLs. Returns `None`
/// when every term is switched off.
pub fn remember_loss<'t>(
    nll_remember: Var<'t>,
    base: &Gaussian,
    gamma: f64,
    flags: &AblationFlags,
) -> Result<Option<Var<'t>>> {
    if nll_remember.shape().0 == 0 {
        return Err(Error::EmptyInput("remember batch"));
    }
    if !flags.any_remember_term() {
        return Ok(None);
    }
    let tape = nll_remember.tape();
    let mut terms: Vec<Var<'t>> = Vec::new();
    if flags.use_nll_anchor {
        terms.push(nll_remember.mean()?.scale(1.0 - gamma)?);
    }
    if flags.use_forward_kl || flags.use_reverse_kl {
        let tamed = nll_stats(nll_remember)?;
        let base = NllStats::constant(tape, base)?;
        if flags.use_forward_kl {
            terms.push(gaussian_kl_var(&base, &tamed)?.scale(gamma)?);
        }
        if flags.use_reverse_kl {
            terms.push(gaussian_kl_var(&tamed, &base)?.scale(gamma)?);
        }
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(Some(total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopCheck {
    pub met: bool,
    pub dists: Vec<f64>,
}

impl StopCheck {
    pub fn max_abs_dist(&self) -> f64 {
        self.dists.iter().fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

/// Stopping rule on precomputed distances: every `|dist| < epsilon`.
pub fn stopping_met_dists(dists: Vec<f64>, epsilon: f64) -> Result<StopCheck> {
    if dists.is_empty() {
        return Err(Error::EmptyInput("forget set"));
    }
    let met = dists.iter().all(|d| d.abs() < epsilon);
    Ok(StopCheck { met, dists })
}

/// Evaluate the stopping rule on the whole forget set.
pub fn stopping_met(
    model: &FlowModel,
    forget: &Matrix,
    stats: &Gaussian,
    delta: f64,
    epsilon: f64,
) -> Result<StopCheck> {
    if forget.nrows() == 0 {
        return Err(Error::EmptyInput("forget set"));
    }
    stats.validate()?;
    let dists = model
        .nll(forget)?
        .into_iter()
        .map(|v| signed_distance(v, stats, delta))
        .collect();
    stopping_met_dists(dists, epsilon)
}

/// Where the forget-loss stats come from when building the objective.
#[derive(Debug, Clone, Copy)]
pub enum StatsSource<'a> {
    /// Fit on the remember batch, differentiable.
    Batch,
    /// Held constant.
    Frozen(&'a Gaussian),
}

pub struct ObjectiveTerms<'t> {
    pub total: Var<'t>,
    pub forget: Var<'t>,
    pub remember: Option<Var<'t>>,
    pub stats: NllStats<'t>,
}

/// Build `alpha * L_F + (1 - alpha) * L_R` on `bound`'s tape.
pub fn objective<'t>(
    model: &FlowModel,
    bound: &BoundFlow<'t>,
    forget_batch: Var<'t>,
    remember_batch: Var<'t>,
    base: &Gaussian,
    config: &TamingConfig,
    source: StatsSource<'_>,
) -> Result<ObjectiveTerms<'t>> {
    let tape = forget_batch.tape();
    let nll_r = nll_var(model, bound, remember_batch)?;
    let stats = match source {
        StatsSource::Batch => nll_stats(nll_r)?,
        StatsSource::Frozen(g) => NllStats::constant(tape, g)?,
    };
    let nll_f = nll_var(model, bound, forget_batch)?;
    let forget = forget_loss(nll_f, &stats, config.delta)?;
    let remember = remember_loss(nll_r, base, config.gamma, &config.flags)?;
    let weighted_forget = forget.scale(config.alpha)?;
    let total = match remember {
        Some(r) => weighted_forget.add(r.scale(1.0 - config.alpha)?)?,
        None => weighted_forget,
    };
    Ok(ObjectiveTerms {
        total,
        forget,
        remember,
        stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss_forget: f64,
    pub loss_remember: f64,
    pub max_abs_dist: f64,
    pub mu_r: f64,
    pub sigma_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ThresholdMet,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct TamingOutcome {
    pub model: FlowModel,
    pub trace: Vec<TraceRow>,
    pub status: StopReason,
    /// Fit of the base model's NLL on the full remember set.
    pub base_stats: Gaussian,
    /// Stats in force at the last stopping check.
    pub exit_stats: Gaussian,
    /// Forget-set distances at the last stopping check.
    pub exit_dists: Vec<f64>,
}

impl TamingOutcome {
    pub fn threshold_met(&self) -> bool {
        self.status == StopReason::ThresholdMet
    }

    /// Turn a run that ran out of iterations into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            StopReason::ThresholdMet => Ok(self),
            StopReason::MaxIterations => Err(Error::MaxIterationsExceeded {
                iterations: self.trace.len(),
                trace: self.trace,
            }),
        }
    }
}

fn check_disjoint(forget: &Matrix, remember: &Matrix) -> Result<()> {
    let key = |row: ndarray::ArrayView1<'_, f64>| -> Vec<u64> { row.iter().map(|v| v.to_bits()).collect() };
    let forget_keys: HashSet<Vec<u64>> = forget.rows().into_iter().map(key).collect();
    let shared = remember
        .rows()
        .into_iter()
        .filter(|r| forget_keys.contains(&key(*r)))
        .count();
    if shared > 0 {
        return Err(Error::Overlap(shared));
    }
    Ok(())
}

pub fn tame(base: &FlowModel, forget: &Matrix, remember: &Matrix, config: &TamingConfig) -> Result<TamingOutcome> {
    tame_with_observer(base, forget, remember, config, |_, _| {})
}

/// [`tame`], calling `observer(iteration, model)` at the start of every
/// iteration with the parameters the stopping check is about to see.
pub fn tame_with_observer<F>(
    base: &FlowModel,
    forget: &Matrix,
    remember: &Matrix,
    config: &TamingConfig,
    mut observer: F,
) -> Result<TamingOutcome>
where
    F: FnMut(usize, &FlowModel),
{
    config.validate()?;
    if forget.nrows() == 0 {
        return Err(Error::EmptyInput("forget set"));
    }
    if remember.nrows() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: remember.nrows(),
        });
    }
    check_disjoint(forget, remember)?;

    let base_stats = fit_gaussian(&base.nll(remember)?)?;
    let mut model = base.clone();
    crate::autodiff::zero_grad(model.parameters_mut());
    let mut optimizer = OptimizerState::new(config.optimizer, config.learning_rate)?;
    let mut rng = stream_rng(config.seed, Stream::TameBatches);
    let mut trace = Vec::new();
    let mut frozen: Option<Gaussian> = None;
    let mut last_check = None;

    for iteration in 1..=config.max_iterations {
        observer(iteration, &model);
        let x_f = sample_batch(forget, config.forget_batch, &mut rng);
        let x_r = sample_batch(remember, config.remember_batch, &mut rng);

        let tape = Tape::new();
        let bound = model.bind(&tape);
        let refresh = (iteration - 1) % config.stats_refresh == 0;
        let source = match (&frozen, refresh) {
            (Some(g), false) => StatsSource::Frozen(g),
            _ => StatsSource::Batch,
        };
        let terms = objective(
            &model,
            &bound,
            tape.leaf(x_f),
            tape.leaf(x_r),
            &base_stats,
            config,
            source,
        )?;
        let stats = terms.stats.values();
        if refresh {
            frozen = Some(stats);
        }

        let check = stopping_met(&model, forget, &stats, config.delta, config.epsilon)?;
        let total = terms.total.scalar_value();
        trace.push(TraceRow {
            iteration,
            loss_forget: terms.forget.scalar_value(),
            loss_remember: terms.remember.map(|r| r.scalar_value()).unwrap_or(0.0),
            max_abs_dist: check.max_abs_dist(),
            mu_r: stats.mu,
            sigma_r: stats.sigma,
        });
        if refresh {
            log::debug!("iteration {iteration}: max |dist| {:.3}", check.max_abs_dist());
        }
        if check.met {
            log::info!("threshold met after {iteration} iterations");
            return Ok(TamingOutcome {
                model,
                trace,
                status: StopReason::ThresholdMet,
                base_stats,
                exit_stats: stats,
                exit_dists: check.dists,
            });
        }
        last_check = Some((stats, check.dists));

        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                value: total,
                last_good: Box::new(model),
            });
        }
        tape.backward(terms.total)?;
        crate::autodiff::zero_grad(model.parameters_mut());
        model.accumulate_grads(&bound);
        optimizer.step(&mut model.parameters_mut())?;
    }

    let (exit_stats, exit_dists) = last_check.expect("max_iterations is positive");
    log::warn!("threshold not met within {} iterations", config.max_iterations);
    Ok(TamingOutcome {
        model,
        trace,
        status: StopReason::MaxIterations,
        base_stats,
        exit_stats,
        exit_dists,
    })
}
