//! Entailment-style binary scoring: pair construction, probability and loss math,
//! and the train/score contract shared by every backend.

mod reference;
mod worker;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::BinaryMetrics;
use crate::prompting::substitute_definition;
use crate::types::{Label, RelationDefinition, RelationInstance};

pub use reference::{featurize, LinearModel, ReferenceBackend, UNTRAINED_HANDLE};
pub use worker::{WorkerBackend, WorkerCommand};

/// Clamp applied to probabilities inside the loss.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("non-finite logit in {0:?}")]
    NonFinite([f64; 3]),
    #[error("length mismatch: {probabilities} probabilities vs {labels} labels")]
    LengthMismatch { probabilities: usize, labels: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid train spec: {0}")]
    InvalidSpec(String),
    #[error("loss diverged (non-finite) in epoch {epoch}")]
    Divergent { epoch: usize },
    #[error("unknown model handle `{0}`")]
    UnknownHandle(String),
    #[error("classifier backend unreachable: {0}")]
    Transport(String),
    #[error("classifier backend failed: {0}")]
    BackendFailed(String),
    #[error("malformed backend data: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether the premise carries the entity tags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PremiseTagging {
    #[default]
    Off,
    On,
}

/// Premise/hypothesis input for one (instance, definition) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliPair {
    pub pair_id: String,
    pub premise: String,
    pub hypothesis: String,
}

/// `premise` is the untagged sentence; `hypothesis` is the definition with both
/// mentions substituted. The pair id is the instance id.
pub fn build_nli_pair(instance: &RelationInstance, definition: &RelationDefinition) -> NliPair {
    build_nli_pair_with(instance, definition, PremiseTagging::Off)
}

pub fn build_nli_pair_with(
    instance: &RelationInstance,
    definition: &RelationDefinition,
    tagging: PremiseTagging,
) -> NliPair {
    NliPair {
        pair_id: instance.id().to_string(),
        premise: match tagging {
            PremiseTagging::Off => instance.sentence().to_string(),
            PremiseTagging::On => instance.tagged_text(),
        },
        hypothesis: substitute_definition(definition, &instance.head().mention, &instance.tail().mention),
    }
}

/// A pair with its binary training label, as written to train/dev files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledNliPair {
    #[serde(flatten)]
    pub pair: NliPair,
    pub label: u8,
}

impl LabeledNliPair {
    pub fn new(pair: NliPair, label: Label) -> Self {
        LabeledNliPair {
            pair,
            label: u8::from(label.is_positive()),
        }
    }

    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }
}

/// Logits for (entailment, neutral, contradiction) and the entailment probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub pair_id: String,
    pub z_e: f64,
    pub z_n: f64,
    pub z_c: f64,
    pub p_pos: f64,
}

impl ScoreResult {
    pub fn from_logits(pair_id: impl Into<String>, z: [f64; 3]) -> Result<Self, ClassifierError> {
        Ok(ScoreResult {
            pair_id: pair_id.into(),
            z_e: z[0],
            z_n: z[1],
            z_c: z[2],
            p_pos: entailment_probability(z)?,
        })
    }

    pub fn logits(&self) -> [f64; 3] {
        [self.z_e, self.z_n, self.z_c]
    }
}

/// Softmax over three logits with max-subtraction.
pub fn softmax3(z: [f64; 3]) -> Result<[f64; 3], ClassifierError> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ClassifierError::NonFinite(z));
    }
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    let s = e[0] + e[1] + e[2];
    Ok(e.map(|v| v / s))
}

/// Softmax component at the entailment index.
pub fn entailment_probability(z: [f64; 3]) -> Result<f64, ClassifierError> {
    Ok(softmax3(z)?[0])
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64, ClassifierError> {
    if p.len() != y.len() {
        return Err(ClassifierError::LengthMismatch {
            probabilities: p.len(),
            labels: y.len(),
        });
    }
    if p.is_empty() {
        return Err(ClassifierError::EmptyBatch);
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp_p(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Gradient of the single-example loss with respect to the three logits.
///
/// Uses `s_n + s_c` rather than `1 - p` so saturated inputs keep precision. The
/// clamp is ignored, matching the unclamped loss on the interior.
pub fn bce_logit_gradient(z: [f64; 3], y: f64) -> Result<[f64; 3], ClassifierError> {
    let s = softmax3(z)?;
    let rest = s[1] + s[2];
    let d = s[0] - y;
    if rest == 0.0 {
        return Ok([d, 0.0, 0.0]);
    }
    Ok([d, -d * s[1] / rest, -d * s[2] / rest])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMetric {
    #[default]
    DevF1,
    DevLoss,
}

/// Hyperparameters of one training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub rng_seed: u64,
    pub checkpoint_metric: CheckpointMetric,
    /// Cut-off on `p_pos` for a positive prediction; kept with the trained model.
    pub threshold: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 12,
            learning_rate: 3e-5,
            batch_size: 64,
            weight_decay: 0.01,
            rng_seed: 0,
            checkpoint_metric: CheckpointMetric::DevF1,
            threshold: 0.5,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidSpec(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive and finite");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub train: Vec<LabeledNliPair>,
    pub dev: Vec<LabeledNliPair>,
    pub params: TrainParams,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.train.is_empty() {
            return Err(ClassifierError::InvalidSpec("train set is empty".into()));
        }
        if self.dev.is_empty() {
            return Err(ClassifierError::InvalidSpec("dev set is empty".into()));
        }
        self.params.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev: BinaryMetrics,
}

/// Opaque identifier of a trained model, valid for the backend that issued it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelHandle(pub String);

impl fmt::Display for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub backend: String,
    pub epochs: Vec<EpochRow>,
    /// 1-based epoch whose weights back `model_handle`.
    pub selected_epoch: usize,
    pub model_handle: ModelHandle,
    pub params: TrainParams,
    pub train_size: usize,
    pub dev_size: usize,
}

impl TrainReport {
    pub fn selected(&self) -> Option<&EpochRow> {
        self.epochs.iter().find(|r| r.epoch == self.selected_epoch)
    }

    pub fn threshold(&self) -> f64 {
        self.params.threshold
    }
}

/// Best epoch under `metric`; ties go to the earliest epoch.
pub fn select_epoch(rows: &[EpochRow], metric: CheckpointMetric) -> Option<usize> {
    let mut best: Option<&EpochRow> = None;
    for r in rows {
        let better = match best {
            None => true,
            Some(b) => match metric {
                CheckpointMetric::DevF1 => r.dev.f1 > b.dev.f1,
                CheckpointMetric::DevLoss => r.dev_loss < b.dev_loss,
            },
        };
        if better {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

/// Dev loss and metrics from probabilities.
pub fn dev_row(epoch: usize, train_loss: f64, p: &[f64], dev: &[LabeledNliPair], threshold: f64) -> EpochRow {
    let y: Vec<f64> = dev.iter().map(LabeledNliPair::y).collect();
    let dev_loss = bce_loss(p, &y).unwrap_or(f64::NAN);
    let predicted: Vec<bool> = p.iter().map(|&p| p > threshold).collect();
    let gold: Vec<bool> = dev.iter().map(|d| d.label == 1).collect();
    EpochRow {
        epoch,
        train_loss,
        dev_loss,
        dev: BinaryMetrics::from_predictions(&predicted, &gold),
    }
}

/// Anything that can train an entailment scorer and score pairs with it.
///
/// Scoring is read-only; backends serialize training internally.
pub trait ClassifierBackend: Send + Sync {
    fn name(&self) -> &str;
    fn train(&self, spec: &TrainSpec) -> Result<TrainReport, ClassifierError>;
    fn score(&self, handle: &ModelHandle, pairs: &[NliPair]) -> Result<Vec<ScoreResult>, ClassifierError>;
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), n + 1),
            )
        })?);
    }
    Ok(out)
}
