//! Command-line front end.
//!
//! Every command accepts `--config FILE` with flat `key = value` TOML whose
//! keys are the long flag names with `-` replaced by `_`. Flags given on the
//! command line win over the file. The fully resolved configuration, seed
//! included, is written next to the outputs so a run can be repeated with
//! `--config <echoed file>`.
//!
//! Relative output paths are resolved against `$FLOWTAME_OUT_ROOT` when set.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 taming stopped
//! without meeting the threshold, 4 runtime or data error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, ForgetSelector, LabeledDataset, MixtureSpec, RememberSelector, SplitSpec,
};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, DEFAULT_HIDDEN_WIDTH, DEFAULT_SCALE_CLAMP};
use crate::metrics::{self, fit_gaussian, histogram, ks_normality_test, nearest_mean, KsResult, QuantileReport};
use crate::seed::{stream_rng, Stream};
use crate::tame::{self, AblationFlags, StopReason, TamingConfig};
use crate::train::{self, OptimizerKind, TrainConfig};

pub const OUT_ROOT_ENV: &str = "FLOWTAME_OUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "flowtame", version, about = "Train normalizing flows and tame their likelihood on chosen subsets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic Gaussian-mixture dataset.
    Gen(GenArgs),
    /// Train a flow by maximum likelihood.
    Train(TrainArgs),
    /// Tame a trained flow on a forget set.
    Tame(TameArgs),
    /// Compare a base and a tamed model.
    Eval(EvalArgs),
    /// Draw samples and label them by nearest component.
    Sample(SampleArgs),
}

// Command-line arguments are all optional so that unset flags fall through
// to the config file and then to defaults.

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points_per_component: Option<usize>,
    /// Keep only these component labels (comma separated).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<usize>>,
    /// Offset added to every component mean (comma separated).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(short = 'o', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub preset: String,
    pub points_per_component: usize,
    pub components: Option<Vec<usize>>,
    pub shift: Option<Vec<f64>>,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            preset: data::FIVE_GAUSSIANS.into(),
            points_per_component: 200,
            components: None,
            shift: None,
            seed: 0,
            output: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_clamp: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub eval_every: usize,
    pub layers: usize,
    pub hidden: usize,
    pub scale_clamp: f64,
    pub seed: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainRunConfig {
            data: None,
            out_dir: None,
            iters: t.iterations,
            batch_size: t.batch_size,
            lr: t.learning_rate,
            optimizer: t.optimizer,
            eval_every: t.eval_every,
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN_WIDTH,
            scale_clamp: DEFAULT_SCALE_CLAMP,
            seed: 0,
        }
    }
}

pub const DEFAULT_LAYERS: usize = 8;

/// Split selection flags shared by `tame` and `eval`.
#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forget_label: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forget_indices: Option<Vec<usize>>,
    /// Dataset file whose points form the remember set.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remember_file: Option<PathBuf>,
    /// Remember every training point except those with these labels.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remember_exclude_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub forget_label: Option<Vec<usize>>,
    pub forget_indices: Option<Vec<usize>>,
    pub remember_file: Option<PathBuf>,
    pub remember_exclude_labels: Option<Vec<usize>>,
}

#[derive(Debug, Args, Serialize)]
pub struct TameArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forget_batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remember_batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats_refresh: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub no_remember: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub no_kl_forward: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub no_kl_reverse: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub no_nll_anchor: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TameRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub forget_label: Option<Vec<usize>>,
    pub forget_indices: Option<Vec<usize>>,
    pub remember_file: Option<PathBuf>,
    pub remember_exclude_labels: Option<Vec<usize>>,
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub forget_batch: usize,
    pub remember_batch: usize,
    pub stats_refresh: usize,
    pub max_iters: usize,
    pub no_remember: bool,
    pub no_kl_forward: bool,
    pub no_kl_reverse: bool,
    pub no_nll_anchor: bool,
    pub seed: u64,
}

impl Default for TameRunConfig {
    fn default() -> Self {
        let t = TamingConfig::default();
        TameRunConfig {
            checkpoint: None,
            data: None,
            out_dir: None,
            forget_label: None,
            forget_indices: None,
            remember_file: None,
            remember_exclude_labels: None,
            delta: t.delta,
            epsilon: t.epsilon,
            alpha: t.alpha,
            gamma: t.gamma,
            lr: t.learning_rate,
            optimizer: t.optimizer,
            forget_batch: t.forget_batch,
            remember_batch: t.remember_batch,
            stats_refresh: t.stats_refresh,
            max_iters: t.max_iterations,
            no_remember: false,
            no_kl_forward: false,
            no_kl_reverse: false,
            no_nll_anchor: false,
            seed: 0,
        }
    }
}

impl TameRunConfig {
    fn split_config(&self) -> SplitConfig {
        SplitConfig {
            forget_label: self.forget_label.clone(),
            forget_indices: self.forget_indices.clone(),
            remember_file: self.remember_file.clone(),
            remember_exclude_labels: self.remember_exclude_labels.clone(),
        }
    }

    pub fn taming_config(&self) -> TamingConfig {
        TamingConfig {
            delta: self.delta,
            epsilon: self.epsilon,
            alpha: self.alpha,
            gamma: self.gamma,
            learning_rate: self.lr,
            optimizer: self.optimizer,
            forget_batch: self.forget_batch,
            remember_batch: self.remember_batch,
            stats_refresh: self.stats_refresh,
            max_iterations: self.max_iters,
            flags: AblationFlags {
                use_remember_loss: !self.no_remember,
                use_forward_kl: !self.no_kl_forward,
                use_reverse_kl: !self.no_kl_reverse,
                use_nll_anchor: !self.no_nll_anchor,
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    /// Tamed checkpoint; defaults to the base model.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tamed: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitArgs,
    #[arg(long, allow_negative_numbers = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    pub base: Option<PathBuf>,
    pub tamed: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub forget_label: Option<Vec<usize>>,
    pub forget_indices: Option<Vec<usize>>,
    pub remember_file: Option<PathBuf>,
    pub remember_exclude_labels: Option<Vec<usize>>,
    pub delta: f64,
    pub epsilon: f64,
    pub bins: usize,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        let t = TamingConfig::default();
        EvalRunConfig {
            base: None,
            tamed: None,
            data: None,
            out_dir: None,
            forget_label: None,
            forget_indices: None,
            remember_file: None,
            remember_exclude_labels: None,
            delta: t.delta,
            epsilon: t.epsilon,
            bins: 40,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose component means label the samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(short = 'n', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(short = 'o', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            checkpoint: None,
            data: None,
            n: 10_000,
            seed: 0,
            output: None,
        }
    }
}

/// Layer `cli` over the config file at `file` and defaults.
pub fn resolve<A: Serialize, C: DeserializeOwned>(cli: &A, file: Option<&Path>) -> Result<C> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let overrides = toml::Table::try_from(cli).map_err(|e| Error::Config(e.to_string()))?;
    table.extend(overrides);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Resolve a relative output path against the output root, if one is set.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::Config(format!("missing required option --{flag}")))
}

fn echo_config<C: Serialize>(config: &C, path: &Path) -> Result<()> {
    let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// What a successful command reports back to `main`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    ThresholdNotMet,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Tame(a) => cmd_tame(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sample(a) => cmd_sample(&a),
    }
}

/// Map a command result to the process exit code, printing any error.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::ThresholdNotMet) => EXIT_THRESHOLD,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                e if e.is_config() => EXIT_USAGE,
                Error::MaxIterationsExceeded { .. } => EXIT_THRESHOLD,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<Outcome> {
    let cfg: GenConfig = resolve(args, args.config.as_deref())?;
    let output = output_path(require(&cfg.output, "output")?);
    let mut ds = data::generate_preset(&cfg.preset, cfg.points_per_component, cfg.seed)?;
    if cfg.components.is_some() || cfg.shift.is_some() {
        let mut spec: MixtureSpec = ds.spec.clone();
        if let Some(keep) = &cfg.components {
            if keep.iter().any(|&k| k >= spec.n_components()) {
                return Err(Error::Config(format!("components {keep:?} out of range")));
            }
            spec = spec.select(keep);
        }
        if let Some(offset) = &cfg.shift {
            if offset.len() != spec.dim() {
                return Err(Error::Config(format!("shift needs {} values", spec.dim())));
            }
            spec = spec.shifted(offset);
        }
        let preset = ds.preset.take();
        ds = data::generate_mixture(&spec, cfg.seed)?;
        ds.preset = preset;
    }
    data::save_dataset(&ds, &output)?;
    echo_config(&cfg, &PathBuf::from(format!("{}.config.toml", output.display())))?;
    println!(
        "wrote {}: n={} components={} seed={}",
        output.display(),
        ds.len(),
        ds.n_components(),
        cfg.seed
    );
    Ok(Outcome::Done)
}

pub fn cmd_train(args: &TrainArgs) -> Result<Outcome> {
    let cfg: TrainRunConfig = resolve(args, args.config.as_deref())?;
    let data_path = require(&cfg.data, "data")?;
    let out_dir = output_path(require(&cfg.out_dir, "out-dir")?);
    let ds = data::load_dataset(data_path)?;
    let train_cfg = TrainConfig {
        iterations: cfg.iters,
        batch_size: cfg.batch_size,
        learning_rate: cfg.lr,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
    };
    train_cfg.validate()?;
    let mut init_rng = stream_rng(cfg.seed, Stream::ModelInit);
    let model = FlowModel::build_with_clamp(ds.dim(), cfg.layers, cfg.hidden, cfg.scale_clamp, &mut init_rng)?;
    let outcome = train::train(&model, &ds.points, &train_cfg)?;

    create_dir(&out_dir)?;
    echo_config(&cfg, &out_dir.join("config.toml"))?;
    data::save_checkpoint(&outcome.model, &out_dir.join("checkpoint.json"))?;
    data::write_curve_csv(&out_dir.join("curve.csv"), &outcome.curve)?;
    data::write_curve_csv(&out_dir.join("evals.csv"), &outcome.evals)?;
    let first = outcome.evals.first().map_or(f64::NAN, |e| e.1);
    let last = outcome.evals.last().map_or(f64::NAN, |e| e.1);
    println!(
        "trained {} iterations: nll {first:.4} -> {last:.4} (seed {})",
        cfg.iters, cfg.seed
    );
    Ok(Outcome::Done)
}

fn split_spec(split: &SplitConfig) -> Result<SplitSpec> {
    let forget = match (&split.forget_label, &split.forget_indices) {
        (Some(labels), None) => ForgetSelector::Labels(labels.clone()),
        (None, Some(idx)) => ForgetSelector::Indices(idx.clone()),
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "use only one of --forget-label and --forget-indices".into(),
            ))
        }
        (None, None) => {
            return Err(Error::Config(
                "one of --forget-label or --forget-indices is required".into(),
            ))
        }
    };
    let remember = match (&split.remember_file, &split.remember_exclude_labels) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "use only one of --remember-file and --remember-exclude-labels".into(),
            ))
        }
        (Some(path), None) => RememberSelector::External(data::load_dataset(path)?.points),
        (None, Some(labels)) => RememberSelector::ExcludeLabels(labels.clone()),
        (None, None) => RememberSelector::Complement,
    };
    Ok(SplitSpec { forget, remember })
}

#[derive(Debug, Serialize)]
struct TameReport<'a> {
    status: StopReason,
    iterations: usize,
    split: &'a data::SplitMeta,
    exit_stats: metrics::Gaussian,
    exit_dists: &'a [f64],
    quantiles: QuantileReport,
}

pub fn cmd_tame(args: &TameArgs) -> Result<Outcome> {
    let cfg: TameRunConfig = resolve(args, args.config.as_deref())?;
    let taming = cfg.taming_config();
    taming.validate()?;
    let ck_path = require(&cfg.checkpoint, "checkpoint")?;
    let data_path = require(&cfg.data, "data")?;
    let out_dir = output_path(require(&cfg.out_dir, "out-dir")?);
    let spec = split_spec(&cfg.split_config())?;
    let base = data::load_checkpoint(ck_path)?;
    let ds = data::load_dataset(data_path)?;
    let split = data::split(&ds, &spec)?;

    let outcome = tame::tame(&base, &split.forget, &split.remember, &taming)?;

    create_dir(&out_dir)?;
    echo_config(&cfg, &out_dir.join("config.toml"))?;
    data::save_checkpoint(&outcome.model, &out_dir.join("tamed.json"))?;
    data::write_trace_csv(&out_dir.join("trace.csv"), &outcome.trace)?;
    let quantiles = metrics::quantile_report(
        &base,
        &outcome.model,
        &[("forget", &split.forget), ("remember", &split.remember)],
        &split.remember,
        taming.delta,
        taming.epsilon,
        outcome.threshold_met(),
    )?;
    data::write_quantile_report_csv(&out_dir.join("quantiles.csv"), &quantiles)?;
    let report = TameReport {
        status: outcome.status,
        iterations: outcome.trace.len(),
        split: &split.meta,
        exit_stats: outcome.exit_stats,
        exit_dists: &outcome.exit_dists,
        quantiles,
    };
    data::write_json(&out_dir.join("report.json"), &report)?;
    println!(
        "taming {:?} after {} iterations (max |dist| {:.4})",
        outcome.status,
        outcome.trace.len(),
        outcome.trace.last().map_or(f64::NAN, |r| r.max_abs_dist)
    );
    Ok(match outcome.status {
        StopReason::ThresholdMet => Outcome::Done,
        StopReason::MaxIterations => Outcome::ThresholdNotMet,
    })
}

#[derive(Debug, Serialize)]
struct EvalReport {
    quantiles: QuantileReport,
    /// `1 - phi(delta)`.
    forgotten_tail: f64,
    forget_forgotten: Vec<bool>,
    remember_bpd_base: f64,
    remember_bpd_tamed: f64,
    ks_base: Option<KsResult>,
    ks_tamed: Option<KsResult>,
}

fn ks_or_none(values: &[f64]) -> Result<Option<KsResult>> {
    match ks_normality_test(values) {
        Ok(r) => Ok(Some(r)),
        Err(Error::InsufficientData { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Outcome> {
    let cfg: EvalRunConfig = resolve(args, args.config.as_deref())?;
    let base_path = require(&cfg.base, "base")?;
    let data_path = require(&cfg.data, "data")?;
    let out_dir = output_path(require(&cfg.out_dir, "out-dir")?);
    if cfg.bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let spec = split_spec(&SplitConfig {
        forget_label: cfg.forget_label.clone(),
        forget_indices: cfg.forget_indices.clone(),
        remember_file: cfg.remember_file.clone(),
        remember_exclude_labels: cfg.remember_exclude_labels.clone(),
    })?;
    let base = data::load_checkpoint(base_path)?;
    let tamed = match &cfg.tamed {
        Some(p) => data::load_checkpoint(p)?,
        None => base.clone(),
    };
    let ds = data::load_dataset(data_path)?;
    let split = data::split(&ds, &spec)?;

    let nll_base = base.nll(&split.remember)?;
    let nll_tamed = tamed.nll(&split.remember)?;
    let tamed_stats = fit_gaussian(&nll_tamed)?;
    let check = tame::stopping_met(&tamed, &split.forget, &tamed_stats, cfg.delta, cfg.epsilon)?;
    let quantiles = metrics::quantile_report(
        &base,
        &tamed,
        &[("forget", &split.forget), ("remember", &split.remember), ("all", &ds.points)],
        &split.remember,
        cfg.delta,
        cfg.epsilon,
        check.met,
    )?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let report = EvalReport {
        forgotten_tail: metrics::forgotten_tail(cfg.delta),
        forget_forgotten: metrics::is_forgotten(&tamed, &split.forget, &tamed_stats, cfg.delta)?,
        remember_bpd_base: metrics::bpd(mean(&nll_base), ds.dim()),
        remember_bpd_tamed: metrics::bpd(mean(&nll_tamed), ds.dim()),
        ks_base: ks_or_none(&nll_base)?,
        ks_tamed: ks_or_none(&nll_tamed)?,
        quantiles,
    };

    create_dir(&out_dir)?;
    echo_config(&cfg, &out_dir.join("config.toml"))?;
    data::write_json(&out_dir.join("report.json"), &report)?;
    data::write_quantile_report_csv(&out_dir.join("quantiles.csv"), &report.quantiles)?;
    data::write_histogram_csv(&out_dir.join("hist_remember_base.csv"), &histogram(&nll_base, cfg.bins)?)?;
    data::write_histogram_csv(&out_dir.join("hist_remember_tamed.csv"), &histogram(&nll_tamed, cfg.bins)?)?;

    println!("1 - Phi(delta) = {:.6e}", report.forgotten_tail);
    for e in &report.quantiles.entries {
        println!(
            "{}: q_base {:.6} q_tamed {:.6} drop {:.6}",
            e.set_name, e.q_base, e.q_tamed, e.quantile_drop
        );
    }
    Ok(Outcome::Done)
}

/// Component means from the dataset generator, used as a nearest-mean classifier.
pub fn classifier_means(ds: &LabeledDataset) -> Vec<Vec<f64>> {
    ds.spec.means.clone()
}

pub fn cmd_sample(args: &SampleArgs) -> Result<Outcome> {
    let cfg: SampleConfig = resolve(args, args.config.as_deref())?;
    if cfg.n == 0 {
        return Err(Error::InvalidCount("n must be positive".into()));
    }
    let ck_path = require(&cfg.checkpoint, "checkpoint")?;
    let data_path = require(&cfg.data, "data")?;
    let output = output_path(require(&cfg.output, "output")?);
    let model = data::load_checkpoint(ck_path)?;
    let ds = data::load_dataset(data_path)?;
    let means = classifier_means(&ds);
    let mut rng = stream_rng(cfg.seed, Stream::Sampling);
    let samples = model.sample(cfg.n, &mut rng)?;
    let labels: Vec<usize> = samples.rows().into_iter().map(|r| nearest_mean(&means, r)).collect();
    data::write_samples_csv(&output, &samples, &labels)?;
    echo_config(&cfg, &PathBuf::from(format!("{}.config.toml", output.display())))?;
    let fractions = metrics::label_fractions(&samples, means.len(), |r| nearest_mean(&means, r));
    println!("wrote {} samples to {}", cfg.n, output.display());
    for (k, f) in fractions.iter().enumerate() {
        println!("component {k}: {f:.4}");
    }
    Ok(Outcome::Done)
}
