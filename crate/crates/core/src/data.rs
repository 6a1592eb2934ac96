//! Synthetic mixtures, forget/remember splits, and every on-disk format.
//!
//! Formats:
//!
//! * Checkpoint: JSON object with the fields of [`Checkpoint`] plus a
//!   `checksum` (SHA-256 hex of the canonical encoding of the other fields).
//!   Floats are written with 17 significant digits.
//! * Dataset: first line is a JSON header ([`DatasetHeader`]), the rest is a
//!   CSV table `x0,..,x{M-1},label`.
//! * CSV exports: `iteration,nll` (training curve), `iteration,loss_forget,
//!   loss_remember,max_abs_dist,mu_R,sigma_R` (taming trace),
//!   `bin_left,bin_right,density` (histograms), `x0,..,x{M-1},label`
//!   (samples), `set_name,q_base,q_tamed,quantile_drop` (quantile report).

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array1;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::flow::{Checkpoint, FlowModel, CHECKPOINT_VERSION};
use crate::metrics::{HistogramBin, QuantileReport};
use crate::seed::{stream_rng, Stream};
use crate::tame::TraceRow;

pub const DATASET_FORMAT: &str = "flowtame-dataset/1";
pub const FIVE_GAUSSIANS: &str = "five-gaussians";
pub const IMBALANCED_PAIR: &str = "imbalanced-pair";
pub const FIVE_GAUSSIANS_HALF_WIDTH: f64 = 4.0;
pub const FIVE_GAUSSIANS_SIGMA: f64 = 0.5;
/// Label of the center component in the five-Gaussian preset.
pub const CENTER_LABEL: usize = 0;

/// Mixture of isotropic Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub counts: Vec<usize>,
}

impl MixtureSpec {
    pub fn uniform(means: Vec<Vec<f64>>, sigmas: Vec<f64>, points_per_component: usize) -> Self {
        let counts = vec![points_per_component; means.len()];
        MixtureSpec { means, sigmas, counts }
    }

    /// Center plus the four vertices of a square; the center is label 0.
    pub fn five_gaussians(points_per_component: usize) -> Self {
        let h = FIVE_GAUSSIANS_HALF_WIDTH;
        let means = vec![
            vec![0.0, 0.0],
            vec![-h, -h],
            vec![h, -h],
            vec![h, h],
            vec![-h, h],
        ];
        MixtureSpec::uniform(means, vec![FIVE_GAUSSIANS_SIGMA; 5], points_per_component)
    }

    /// Two components with `major` and `minor` points; the minority is label 1.
    pub fn imbalanced_pair(major: usize, minor: usize) -> Self {
        MixtureSpec {
            means: vec![vec![-2.5, 0.0], vec![2.5, 0.0]],
            sigmas: vec![FIVE_GAUSSIANS_SIGMA; 2],
            counts: vec![major, minor],
        }
    }

    /// Same mixture with every mean moved by `offset`.
    pub fn shifted(&self, offset: &[f64]) -> Self {
        let mut out = self.clone();
        for m in &mut out.means {
            for (v, o) in m.iter_mut().zip(offset) {
                *v += o;
            }
        }
        out
    }

    /// Keep only the listed components, preserving order.
    pub fn select(&self, labels: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.means.len()).filter(|k| labels.contains(k)).collect();
        MixtureSpec {
            means: keep.iter().map(|&k| self.means[k].clone()).collect(),
            sigmas: keep.iter().map(|&k| self.sigmas[k]).collect(),
            counts: keep.iter().map(|&k| self.counts[k]).collect(),
        }
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let k = self.means.len();
        if k == 0 {
            return bad("mixture needs at least one component".into());
        }
        if self.sigmas.len() != k || self.counts.len() != k {
            return bad(format!(
                "mixture has {k} means but {} sigmas and {} counts",
                self.sigmas.len(),
                self.counts.len()
            ));
        }
        let dim = self.dim();
        if dim == 0 || self.means.iter().any(|m| m.len() != dim) {
            return bad("component means must share a positive dimension".into());
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return bad("component means must be finite".into());
        }
        let distinct: HashSet<Vec<u64>> = self
            .means
            .iter()
            .map(|m| m.iter().map(|v| v.to_bits()).collect())
            .collect();
        if distinct.len() != k {
            return bad("component means must be distinct".into());
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("component sigmas must be positive".into());
        }
        if self.counts.iter().any(|&c| c == 0) {
            return bad("points_per_component must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub spec: MixtureSpec,
    pub seed: u64,
    pub preset: Option<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.spec.n_components()
    }

    /// Rows at `indices`, in order.
    pub fn rows(&self, indices: &[usize]) -> Matrix {
        self.points.select(ndarray::Axis(0), indices)
    }

    pub fn indices_with_label(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }
}

/// Draw `counts[k]` points from each component in label order.
pub fn generate_mixture(spec: &MixtureSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let dim = spec.dim();
    let n: usize = spec.counts.iter().sum();
    let mut rng = stream_rng(seed, Stream::DataGen);
    let mut points = Matrix::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (k, (mean, &sigma)) in spec.means.iter().zip(&spec.sigmas).enumerate() {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for _ in 0..spec.counts[k] {
            for (j, m) in mean.iter().enumerate() {
                points[[row, j]] = m + normal.sample(&mut rng);
            }
            labels.push(k);
            row += 1;
        }
    }
    Ok(LabeledDataset {
        points,
        labels,
        spec: spec.clone(),
        seed,
        preset: None,
    })
}

pub fn generate_preset(name: &str, points_per_component: usize, seed: u64) -> Result<LabeledDataset> {
    let spec = match name {
        FIVE_GAUSSIANS => MixtureSpec::five_gaussians(points_per_component),
        IMBALANCED_PAIR => MixtureSpec::imbalanced_pair(4 * points_per_component, points_per_component),
        other => return Err(Error::Config(format!("unknown preset `{other}`"))),
    };
    let mut ds = generate_mixture(&spec, seed)?;
    ds.preset = Some(name.to_string());
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForgetSelector {
    Labels(Vec<usize>),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RememberSelector {
    /// Every point not selected for forgetting.
    Complement,
    /// Every point whose label is not listed.
    ExcludeLabels(Vec<usize>),
    /// Points from outside the training data.
    External(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub forget: ForgetSelector,
    pub remember: RememberSelector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    ByLabel,
    ByIndex,
    ExternalFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub mode: SplitMode,
    pub n_forget: usize,
    pub n_remember: usize,
    /// False when the remember set did not come from the training data.
    pub remember_from_training: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub forget: Matrix,
    pub remember: Matrix,
    pub forget_indices: Vec<usize>,
    pub meta: SplitMeta,
}

pub fn split(dataset: &LabeledDataset, spec: &SplitSpec) -> Result<Split> {
    let n = dataset.len();
    let forget_indices: Vec<usize> = match &spec.forget {
        ForgetSelector::Labels(labels) => (0..n).filter(|&i| labels.contains(&dataset.labels[i])).collect(),
        ForgetSelector::Indices(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Config(format!("forget index {bad} out of range for {n} points")));
            }
            let unique: BTreeSet<usize> = idx.iter().copied().collect();
            unique.into_iter().collect()
        }
    };
    if forget_indices.is_empty() {
        return Err(Error::EmptySplit("forget"));
    }
    let forget = dataset.rows(&forget_indices);
    let in_forget: HashSet<usize> = forget_indices.iter().copied().collect();

    let (remember, from_training) = match &spec.remember {
        RememberSelector::Complement => {
            let idx: Vec<usize> = (0..n).filter(|i| !in_forget.contains(i)).collect();
            (dataset.rows(&idx), true)
        }
        RememberSelector::ExcludeLabels(labels) => {
            let idx: Vec<usize> = (0..n).filter(|&i| !labels.contains(&dataset.labels[i])).collect();
            let shared = idx.iter().filter(|i| in_forget.contains(i)).count();
            if shared > 0 {
                return Err(Error::Overlap(shared));
            }
            (dataset.rows(&idx), true)
        }
        RememberSelector::External(points) => {
            if points.ncols() != dataset.dim() {
                return Err(Error::Shape(format!(
                    "remember set has {} columns, dataset has {}",
                    points.ncols(),
                    dataset.dim()
                )));
            }
            (points.clone(), false)
        }
    };
    if remember.nrows() == 0 {
        return Err(Error::EmptySplit("remember"));
    }
    let shared = count_shared_rows(&forget, &remember);
    if shared > 0 {
        return Err(Error::Overlap(shared));
    }
    let mode = match (&spec.forget, &spec.remember) {
        (_, RememberSelector::External(_)) => SplitMode::ExternalFile,
        (ForgetSelector::Labels(_), _) => SplitMode::ByLabel,
        (ForgetSelector::Indices(_), _) => SplitMode::ByIndex,
    };
    Ok(Split {
        meta: SplitMeta {
            mode,
            n_forget: forget.nrows(),
            n_remember: remember.nrows(),
            remember_from_training: from_training,
        },
        forget,
        remember,
        forget_indices,
    })
}

/// Number of rows of `b` bitwise equal to some row of `a`.
pub fn count_shared_rows(a: &Matrix, b: &Matrix) -> usize {
    let key = |row: ndarray::ArrayView1<'_, f64>| -> Vec<u64> { row.iter().map(|v| v.to_bits()).collect() };
    let keys: HashSet<Vec<u64>> = a.rows().into_iter().map(key).collect();
    b.rows().into_iter().filter(|r| keys.contains(&key(*r))).count()
}

fn open_read(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn open_write(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Deterministic JSON encoding: sorted keys, floats with 17 significant digits.
fn write_canonical(value: &Value, indent: usize, out: &mut String) -> Result<()> {
    let pad = |n: usize| "  ".repeat(n);
    match value {
        Value::Number(num) if num.is_f64() => {
            let x = num.as_f64().expect("is_f64");
            out.push_str(&format!("{x:.16e}"));
        }
        Value::Array(items) => {
            // Numeric arrays stay on one line.
            if items.iter().all(Value::is_number) {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_canonical(item, indent, out)?;
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (i, item) in items.iter().enumerate() {
                    out.push_str(&pad(indent + 1));
                    write_canonical(item, indent + 1, out)?;
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                out.push_str(&pad(indent));
                out.push(']');
            }
        }
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, v)) in map.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&serde_json::to_string(k)?);
                out.push_str(": ");
                write_canonical(v, indent + 1, out)?;
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
        other => out.push_str(&serde_json::to_string(other)?),
    }
    Ok(())
}

fn canonical_string(value: &Value) -> Result<String> {
    let mut s = String::new();
    write_canonical(value, 0, &mut s)?;
    Ok(s)
}

fn checksum_of(value: &Value) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_string(value)?.as_bytes())))
}

/// Checkpoint JSON text for `model`.
pub fn checkpoint_to_string(model: &FlowModel) -> Result<String> {
    let ck = model.to_checkpoint();
    let mut value = serde_json::to_value(&ck)?;
    let all_finite = ck.scale_clamp.is_finite()
        && ck.prior.mu.iter().chain(&ck.prior.log_sigma).all(|v| v.is_finite())
        && ck
            .layers
            .iter()
            .all(|l| l.scale_net.iter().chain(&l.shift_net).all(|v| v.is_finite()));
    if !all_finite {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    let sum = checksum_of(&value)?;
    value
        .as_object_mut()
        .expect("checkpoint serializes to an object")
        .insert("checksum".into(), Value::String(sum));
    let mut text = canonical_string(&value)?;
    text.push('\n');
    Ok(text)
}

/// Parse checkpoint text. `path` only labels errors.
pub fn checkpoint_from_str(text: &str, path: &Path) -> Result<FlowModel> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| corrupt(path, e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| corrupt(path, "checkpoint is not a JSON object"))?;
    match obj.get("version").and_then(Value::as_str) {
        Some(CHECKPOINT_VERSION) => {}
        Some(other) => return Err(Error::SchemaVersion(other.to_string())),
        None => return Err(corrupt(path, "missing version tag")),
    }
    let stored = match obj.remove("checksum") {
        Some(Value::String(s)) => s,
        _ => return Err(corrupt(path, "missing checksum")),
    };
    let actual = checksum_of(&value)?;
    if stored != actual {
        return Err(corrupt(path, format!("checksum mismatch: stored {stored}, computed {actual}")));
    }
    let ck: Checkpoint = serde_json::from_value(value).map_err(|e| corrupt(path, e.to_string()))?;
    FlowModel::from_checkpoint(&ck)
}

pub fn save_checkpoint(model: &FlowModel, path: &Path) -> Result<()> {
    let text = checkpoint_to_string(model)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text, path)
}

/// First line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub seed: u64,
    pub dim: usize,
    pub n_points: usize,
    pub preset: Option<String>,
    pub generator: MixtureSpec,
}

pub fn save_dataset(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        seed: dataset.seed,
        dim: dataset.dim(),
        n_points: dataset.len(),
        preset: dataset.preset.clone(),
        generator: dataset.spec.clone(),
    };
    let mut out = open_write(path)?;
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut head: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
        head.push("label".into());
        w.write_record(&head)?;
        for (row, label) in dataset.points.rows().into_iter().zip(&dataset.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut reader = open_read(path)?;
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(first.trim_end()).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::SchemaVersion(header.format));
    }
    let dim = header.dim;
    let mut r = csv::Reader::from_reader(reader);
    let mut flat = Vec::with_capacity(header.n_points * dim);
    let mut labels = Vec::with_capacity(header.n_points);
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != dim + 1 {
            return Err(corrupt(path, format!("row has {} fields, expected {}", rec.len(), dim + 1)));
        }
        for field in rec.iter().take(dim) {
            flat.push(field.parse::<f64>().map_err(|e| corrupt(path, e.to_string()))?);
        }
        labels.push(rec[dim].parse::<usize>().map_err(|e| corrupt(path, e.to_string()))?);
    }
    if labels.len() != header.n_points {
        return Err(corrupt(
            path,
            format!("header declares {} points, body has {}", header.n_points, labels.len()),
        ));
    }
    if labels.iter().any(|&l| l >= header.generator.n_components()) {
        return Err(corrupt(path, "label out of range"));
    }
    let points = Matrix::from_shape_vec((labels.len(), dim), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(LabeledDataset {
        points,
        labels,
        spec: header.generator,
        seed: header.seed,
        preset: header.preset,
    })
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let out = open_write(path)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `iteration,nll`.
pub fn write_curve_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    write_csv(
        path,
        &["iteration", "nll"],
        curve.iter().map(|(i, v)| vec![i.to_string(), v.to_string()]),
    )
}

pub const TRACE_COLUMNS: [&str; 6] = [
    "iteration",
    "loss_forget",
    "loss_remember",
    "max_abs_dist",
    "mu_R",
    "sigma_R",
];

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_csv(
        path,
        &TRACE_COLUMNS,
        trace.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.loss_forget.to_string(),
                r.loss_remember.to_string(),
                r.max_abs_dist.to_string(),
                r.mu_r.to_string(),
                r.sigma_r.to_string(),
            ]
        }),
    )
}

pub fn write_histogram_csv(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    write_csv(
        path,
        &["bin_left", "bin_right", "density"],
        bins.iter()
            .map(|b| vec![b.bin_left.to_string(), b.bin_right.to_string(), b.density.to_string()]),
    )
}

/// Samples with their nearest-component labels.
pub fn write_samples_csv(path: &Path, points: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != points.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            points.nrows()
        )));
    }
    let mut head: Vec<String> = (0..points.ncols()).map(|j| format!("x{j}")).collect();
    head.push("label".into());
    let head_refs: Vec<&str> = head.iter().map(String::as_str).collect();
    write_csv(
        path,
        &head_refs,
        points.rows().into_iter().zip(labels).map(|(row, l)| {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(l.to_string());
            rec
        }),
    )
}

pub fn write_quantile_report_csv(path: &Path, report: &QuantileReport) -> Result<()> {
    write_csv(
        path,
        &["set_name", "q_base", "q_tamed", "quantile_drop"],
        report.entries.iter().map(|e| {
            vec![
                e.set_name.clone(),
                e.q_base.to_string(),
                e.q_tamed.to_string(),
                e.quantile_drop.to_string(),
            ]
        }),
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = open_write(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Per-component sample means, for checking the generator.
pub fn component_means(dataset: &LabeledDataset) -> Vec<Array1<f64>> {
    (0..dataset.n_components())
        .map(|k| {
            let idx = dataset.indices_with_label(k);
            dataset
                .rows(&idx)
                .mean_axis(ndarray::Axis(0))
                .unwrap_or_else(|| Array1::zeros(dataset.dim()))
        })
        .collect()
}
