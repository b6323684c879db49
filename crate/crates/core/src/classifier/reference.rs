//! In-process reference backend: a linear model over hashed lexical features.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    bce_logit_gradient, bce_loss, dev_row, entailment_probability, select_epoch, ClassifierBackend, ClassifierError,
    LabeledNliPair, ModelHandle, NliPair, ScoreResult, TrainReport, TrainSpec,
};
use crate::types::sha256_hex;

/// Handle of the all-zero model; scores every pair at 1/3.
pub const UNTRAINED_HANDLE: &str = "reference-untrained";

const DEFAULT_DIM: usize = 1 << 14;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub type Features = Vec<(usize, f64)>;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Hashed premise unigrams and bigrams plus hypothesis unigrams, each scaled by
/// `1/sqrt(n)` so long sentences do not dominate. Colliding features add up.
pub fn featurize(pair: &NliPair, dim: usize) -> Features {
    let p = words(&pair.premise);
    let h = words(&pair.hypothesis);
    let mut keys: Vec<String> = p.iter().map(|w| format!("p:{w}")).collect();
    keys.extend(p.windows(2).map(|w| format!("pb:{}_{}", w[0], w[1])));
    keys.extend(h.iter().map(|w| format!("h:{w}")));
    if keys.is_empty() {
        return Vec::new();
    }
    let scale = 1.0 / (keys.len() as f64).sqrt();
    let mut acc: HashMap<usize, f64> = HashMap::new();
    for k in keys {
        *acc.entry((fnv1a(k.as_bytes()) % dim as u64) as usize).or_default() += scale;
    }
    let mut out: Features = acc.into_iter().collect();
    out.sort_by_key(|x| x.0);
    out
}

/// Three logit rows over `dim` hashed features plus a bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    dim: usize,
    /// `[W_e | W_n | W_c | b_e, b_n, b_c]`.
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SparseModel {
    dim: usize,
    bias: [f64; 3],
    rows: Vec<(usize, [f64; 3])>,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        LinearModel {
            dim,
            params: vec![0.0; 3 * dim + 3],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn logits(&self, x: &Features) -> [f64; 3] {
        let bias = 3 * self.dim;
        let mut z = [self.params[bias], self.params[bias + 1], self.params[bias + 2]];
        for &(i, v) in x {
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += v * self.params[k * self.dim + i];
            }
        }
        z
    }

    /// Mean clamped loss over the batch.
    pub fn loss(&self, batch: &[(&Features, f64)]) -> Result<f64, ClassifierError> {
        let mut p = Vec::with_capacity(batch.len());
        for (x, _) in batch {
            p.push(entailment_probability(self.logits(x))?);
        }
        let y: Vec<f64> = batch.iter().map(|b| b.1).collect();
        bce_loss(&p, &y)
    }

    /// Analytic gradient of [`LinearModel::loss`] with respect to every parameter.
    pub fn gradient(&self, batch: &[(&Features, f64)]) -> Result<Vec<f64>, ClassifierError> {
        let mut g = vec![0.0; self.params.len()];
        let n = batch.len() as f64;
        let bias = 3 * self.dim;
        for (x, y) in batch {
            let dz = bce_logit_gradient(self.logits(x), *y)?;
            for k in 0..3 {
                g[bias + k] += dz[k] / n;
                for &(i, v) in x.iter() {
                    g[k * self.dim + i] += dz[k] * v / n;
                }
            }
        }
        Ok(g)
    }

    pub fn fingerprint(&self) -> String {
        let bytes: Vec<u8> = self.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        sha256_hex(bytes)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let rows = (0..self.dim)
            .filter_map(|i| {
                let r = [self.params[i], self.params[self.dim + i], self.params[2 * self.dim + i]];
                (r != [0.0; 3]).then_some((i, r))
            })
            .collect();
        let b = 3 * self.dim;
        let sparse = SparseModel {
            dim: self.dim,
            bias: [self.params[b], self.params[b + 1], self.params[b + 2]],
            rows,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(&sparse)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let s: SparseModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut m = LinearModel::zeros(s.dim);
        for (i, r) in s.rows {
            if i >= s.dim {
                return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "feature index out of range"));
            }
            for k in 0..3 {
                m.params[k * s.dim + i] = r[k];
            }
        }
        m.params[3 * s.dim..].copy_from_slice(&s.bias);
        Ok(m)
    }
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Decoupled weight decay; the three bias terms are not decayed.
    fn step(&mut self, model: &mut LinearModel, g: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let bias = 3 * model.dim;
        for (i, w) in model.params.iter_mut().enumerate() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g[i] * g[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
            let decay = if i < bias { weight_decay * *w } else { 0.0 };
            *w -= lr * (update + decay);
        }
    }
}

/// Trainable linear scorer, deterministic for a fixed seed.
pub struct ReferenceBackend {
    dim: usize,
    models: RwLock<HashMap<String, Arc<LinearModel>>>,
    model_dir: Option<PathBuf>,
    train_lock: Mutex<()>,
}

impl Default for ReferenceBackend {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

impl ReferenceBackend {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "feature dimension must be positive");
        let mut models = HashMap::new();
        models.insert(UNTRAINED_HANDLE.to_string(), Arc::new(LinearModel::zeros(dim)));
        ReferenceBackend {
            dim,
            models: RwLock::new(models),
            model_dir: None,
            train_lock: Mutex::new(()),
        }
    }

    /// Trained models are also written here and loaded from here on unknown handles.
    pub fn with_model_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.model_dir = Some(dir.into());
        self
    }

    fn model_path(&self, handle: &str) -> Option<PathBuf> {
        self.model_dir.as_ref().map(|d| d.join(format!("{handle}.json")))
    }

    pub fn model(&self, handle: &ModelHandle) -> Result<Arc<LinearModel>, ClassifierError> {
        if let Some(m) = self.models.read().unwrap().get(&handle.0) {
            return Ok(m.clone());
        }
        let valid_name = handle.0.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        match self.model_path(&handle.0) {
            Some(p) if valid_name && p.exists() => {
                let m = Arc::new(LinearModel::load(&p)?);
                if m.dim != self.dim {
                    return Err(ClassifierError::Protocol(format!(
                        "model {} has dimension {}, backend expects {}",
                        handle, m.dim, self.dim
                    )));
                }
                self.models.write().unwrap().insert(handle.0.clone(), m.clone());
                Ok(m)
            }
            _ => Err(ClassifierError::UnknownHandle(handle.0.clone())),
        }
    }

    fn register(&self, model: LinearModel) -> Result<ModelHandle, ClassifierError> {
        let handle = format!("ref-{}", &model.fingerprint()[..16]);
        if let Some(p) = self.model_path(&handle) {
            model.save(&p)?;
        }
        self.models.write().unwrap().insert(handle.clone(), Arc::new(model));
        Ok(ModelHandle(handle))
    }

    fn dev_probabilities(&self, model: &LinearModel, dev: &[Features]) -> Result<Vec<f64>, ClassifierError> {
        dev.iter().map(|x| entailment_probability(model.logits(x))).collect()
    }
}

fn featurize_all(pairs: &[LabeledNliPair], dim: usize) -> Vec<Features> {
    pairs.par_iter().map(|p| featurize(&p.pair, dim)).collect()
}

impl ClassifierBackend for ReferenceBackend {
    fn name(&self) -> &str {
        "reference"
    }

    fn train(&self, spec: &TrainSpec) -> Result<TrainReport, ClassifierError> {
        spec.validate()?;
        let _guard = self.train_lock.lock().unwrap();
        let params = &spec.params;
        let train_x = featurize_all(&spec.train, self.dim);
        let dev_x = featurize_all(&spec.dev, self.dim);
        let mut model = LinearModel::zeros(self.dim);
        let mut opt = AdamW::new(model.params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        let mut rows = Vec::with_capacity(params.epochs);
        let mut snapshots = Vec::with_capacity(params.epochs);
        for epoch in 1..=params.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(params.batch_size) {
                let batch: Vec<(&Features, f64)> = chunk.iter().map(|&i| (&train_x[i], spec.train[i].y())).collect();
                let loss = model.loss(&batch)?;
                let grad = model.gradient(&batch)?;
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(ClassifierError::Divergent { epoch });
                }
                loss_sum += loss * batch.len() as f64;
                opt.step(&mut model, &grad, params.learning_rate, params.weight_decay);
            }
            if model.params.iter().any(|w| !w.is_finite()) {
                return Err(ClassifierError::Divergent { epoch });
            }
            let p = self
                .dev_probabilities(&model, &dev_x)
                .map_err(|_| ClassifierError::Divergent { epoch })?;
            let row = dev_row(epoch, loss_sum / train_x.len() as f64, &p, &spec.dev, params.threshold);
            log::debug!(
                "epoch {epoch}: train_loss={:.4} dev_loss={:.4} dev_f1={:.4}",
                row.train_loss,
                row.dev_loss,
                row.dev.f1
            );
            rows.push(row);
            snapshots.push(model.clone());
        }
        let selected = select_epoch(&rows, params.checkpoint_metric).expect("at least one epoch");
        let handle = self.register(snapshots.swap_remove(selected - 1))?;
        Ok(TrainReport {
            backend: self.name().to_string(),
            epochs: rows,
            selected_epoch: selected,
            model_handle: handle,
            params: params.clone(),
            train_size: spec.train.len(),
            dev_size: spec.dev.len(),
        })
    }

    fn score(&self, handle: &ModelHandle, pairs: &[NliPair]) -> Result<Vec<ScoreResult>, ClassifierError> {
        let model = self.model(handle)?;
        pairs
            .par_iter()
            .map(|p| ScoreResult::from_logits(p.pair_id.clone(), model.logits(&featurize(p, self.dim))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::TrainParams;

    fn pair(id: &str, premise: &str, label: u8) -> LabeledNliPair {
        LabeledNliPair {
            pair: NliPair {
                pair_id: id.into(),
                premise: premise.into(),
                hypothesis: "x relates to y".into(),
            },
            label,
        }
    }

    #[test]
    fn untrained_scores_one_third() {
        let b = ReferenceBackend::new(64);
        let pairs = vec![pair("a", "some text", 1).pair, pair("b", "other", 0).pair];
        let s = b.score(&ModelHandle(UNTRAINED_HANDLE.into()), &pairs).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|r| (r.p_pos - 1.0 / 3.0).abs() < 1e-15));
        assert!(b.score(&ModelHandle(UNTRAINED_HANDLE.into()), &[]).unwrap().is_empty());
        assert!(matches!(
            b.score(&ModelHandle("nope".into()), &pairs),
            Err(ClassifierError::UnknownHandle(_))
        ));
    }

    #[test]
    fn save_load_round_trip_and_handle_reload() {
        let dir = tempfile::tempdir().unwrap();
        let b = ReferenceBackend::new(256).with_model_dir(dir.path());
        let train = vec![pair("a", "alpha married beta", 1), pair("b", "alpha visited beta", 0)];
        let spec = TrainSpec {
            train: train.clone(),
            dev: train.clone(),
            params: TrainParams {
                learning_rate: 0.1,
                epochs: 3,
                ..TrainParams::default()
            },
        };
        let report = b.train(&spec).unwrap();
        assert_eq!(report.epochs.len(), 3);
        let fresh = ReferenceBackend::new(256).with_model_dir(dir.path());
        let pairs: Vec<NliPair> = train.iter().map(|p| p.pair.clone()).collect();
        assert_eq!(
            b.score(&report.model_handle, &pairs).unwrap(),
            fresh.score(&report.model_handle, &pairs).unwrap()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<LabeledNliPair> = (0..40)
            .map(|i| {
                let pos = i % 2 == 0;
                pair(&format!("i{i}"), &format!("{} token{i}", if pos { "married" } else { "met" }), u8::from(pos))
            })
            .collect();
        let spec = TrainSpec {
            train: data.clone(),
            dev: data,
            params: TrainParams {
                learning_rate: 0.05,
                batch_size: 8,
                rng_seed: 7,
                ..TrainParams::default()
            },
        };
        let a = ReferenceBackend::new(512).train(&spec).unwrap();
        let b = ReferenceBackend::new(512).train(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.selected().unwrap().dev.f1 > 0.99);
    }
}
