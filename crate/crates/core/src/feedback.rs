//! Corpus-wide scoring and probability-banded feedback sampling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    build_nli_pair_with, read_jsonl, write_jsonl, ClassifierBackend, ClassifierError, ModelHandle, PremiseTagging,
};
use crate::corpus::CorpusStore;
use crate::types::{sha256_hex, DedupKey, RelationDefinition, RelationInstance};

pub const SCORES_FILE: &str = "scores.jsonl";
pub const SCORES_META_FILE: &str = "scores.meta.json";

/// Pairs sent to the backend per scoring call.
const SCORE_BATCH: usize = 4096;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("score table {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub instance_id: String,
    pub p_pos: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreTableMeta {
    pub relation_id: String,
    pub iteration: u32,
    pub corpus_fingerprint: String,
    pub model_handle: ModelHandle,
    pub rows: usize,
    pub table_fingerprint: String,
}

/// One entailment probability per corpus instance, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub relation_id: String,
    pub iteration: u32,
    pub corpus_fingerprint: String,
    pub model_handle: ModelHandle,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn fingerprint(&self) -> String {
        let mut buf = String::new();
        for r in &self.rows {
            buf.push_str(&r.instance_id);
            buf.push('\t');
            buf.push_str(&format!("{:016x}\n", r.p_pos.to_bits()));
        }
        sha256_hex(buf)
    }

    pub fn meta(&self) -> ScoreTableMeta {
        ScoreTableMeta {
            relation_id: self.relation_id.clone(),
            iteration: self.iteration,
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            model_handle: self.model_handle.clone(),
            rows: self.rows.len(),
            table_fingerprint: self.fingerprint(),
        }
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        write_jsonl(&dir.join(SCORES_FILE), &self.rows)?;
        fs::write(
            dir.join(SCORES_META_FILE),
            serde_json::to_string_pretty(&self.meta()).expect("serializable"),
        )
    }

    pub fn load(dir: &Path) -> Result<Self, FeedbackError> {
        let meta_path = dir.join(SCORES_META_FILE);
        let corrupt = |message: String| FeedbackError::Corrupt {
            path: dir.join(SCORES_FILE).display().to_string(),
            message,
        };
        let meta: ScoreTableMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| corrupt(e.to_string()))?;
        let rows: Vec<ScoreRow> = read_jsonl(&dir.join(SCORES_FILE))?;
        let table = ScoreTable {
            relation_id: meta.relation_id.clone(),
            iteration: meta.iteration,
            corpus_fingerprint: meta.corpus_fingerprint.clone(),
            model_handle: meta.model_handle.clone(),
            rows,
        };
        if table.rows.len() != meta.rows || table.fingerprint() != meta.table_fingerprint {
            return Err(corrupt("rows do not match the metadata header".into()));
        }
        Ok(table)
    }
}

/// Scores every corpus instance against `definition`. Any backend failure
/// discards the partial table.
pub fn score_corpus(
    backend: &dyn ClassifierBackend,
    handle: &ModelHandle,
    definition: &RelationDefinition,
    corpus: &CorpusStore,
    tagging: PremiseTagging,
    iteration: u32,
) -> Result<ScoreTable, FeedbackError> {
    if corpus.is_empty() {
        return Err(FeedbackError::EmptyCorpus);
    }
    let mut rows = Vec::with_capacity(corpus.len());
    for chunk in corpus.instances().chunks(SCORE_BATCH) {
        let pairs: Vec<_> = chunk.iter().map(|i| build_nli_pair_with(i, definition, tagging)).collect();
        for s in backend.score(handle, &pairs)? {
            rows.push(ScoreRow {
                instance_id: s.pair_id,
                p_pos: s.p_pos,
            });
        }
    }
    Ok(ScoreTable {
        relation_id: definition.id().to_string(),
        iteration,
        corpus_fingerprint: corpus.fingerprint(),
        model_handle: handle.clone(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackPurpose {
    FollowupPositive,
    Negdef,
}

impl FeedbackPurpose {
    pub fn groups(self) -> usize {
        match self {
            FeedbackPurpose::FollowupPositive => 3,
            FeedbackPurpose::Negdef => 1,
        }
    }
}

/// Lower band bounds (exclusive); the upper bound is 1.0 inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackBands {
    pub followup_positive_min: f64,
    pub negdef_min: f64,
}

impl Default for FeedbackBands {
    fn default() -> Self {
        FeedbackBands {
            followup_positive_min: 0.85,
            negdef_min: 0.50,
        }
    }
}

impl FeedbackBands {
    pub fn lower(&self, purpose: FeedbackPurpose) -> f64 {
        match purpose {
            FeedbackPurpose::FollowupPositive => self.followup_positive_min,
            FeedbackPurpose::Negdef => self.negdef_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance: RelationInstance,
    pub p_pos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSample {
    pub purpose: FeedbackPurpose,
    /// Exclusive lower bound and inclusive upper bound.
    pub band: (f64, f64),
    pub instances: Vec<ScoredInstance>,
    pub rng_seed: u64,
}

impl FeedbackSample {
    pub fn plain_instances(&self) -> Vec<RelationInstance> {
        self.instances.iter().map(|s| s.instance.clone()).collect()
    }
}

/// Uniform in-band sampling without replacement.
///
/// Follow-up positives get up to three disjoint groups of `k`, filled greedily in
/// order when supply is short; negdef feedback is a single group. Rows whose
/// instance shares a dedup triple with `exclude` are never drawn.
pub fn sample_feedback(
    table: &ScoreTable,
    corpus: &CorpusStore,
    purpose: FeedbackPurpose,
    k: usize,
    bands: &FeedbackBands,
    rng_seed: u64,
    exclude: &HashSet<DedupKey>,
) -> Result<Vec<FeedbackSample>, FeedbackError> {
    if k == 0 {
        return Err(FeedbackError::ZeroK);
    }
    let lo = bands.lower(purpose);
    let candidates: Vec<(&RelationInstance, f64)> = table
        .rows
        .iter()
        .filter(|r| r.p_pos > lo && r.p_pos <= 1.0)
        .filter_map(|r| corpus.get(&r.instance_id).map(|i| (i, r.p_pos)))
        .filter(|(i, _)| !exclude.contains(&i.dedup_key()))
        .collect();
    let want = (k * purpose.groups()).min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let drawn = index::sample(&mut rng, candidates.len(), want).into_vec();
    Ok(drawn
        .chunks(k)
        .map(|chunk| FeedbackSample {
            purpose,
            band: (lo, 1.0),
            instances: chunk
                .iter()
                .map(|&i| ScoredInstance {
                    instance: candidates[i].0.clone(),
                    p_pos: candidates[i].1,
                })
                .collect(),
            rng_seed,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ReferenceBackend, UNTRAINED_HANDLE};
    use crate::types::InstanceSource;

    fn corpus(n: usize) -> CorpusStore {
        CorpusStore::from_instances((0..n).map(|i| {
            RelationInstance::from_tagged(
                "c",
                &format!("<ENT0> Alpha{i} </ENT0> saw <ENT1> Beta{i} </ENT1> ."),
                InstanceSource::Corpus,
                None,
            )
            .unwrap()
        }))
    }

    fn table(c: &CorpusStore, scores: &[f64]) -> ScoreTable {
        ScoreTable {
            relation_id: "R".into(),
            iteration: 1,
            corpus_fingerprint: c.fingerprint(),
            model_handle: ModelHandle("m".into()),
            rows: c
                .instances()
                .iter()
                .zip(scores)
                .map(|(i, &p)| ScoreRow {
                    instance_id: i.id().into(),
                    p_pos: p,
                })
                .collect(),
        }
    }

    #[test]
    fn small_band_examples() {
        let c = corpus(4);
        let t = table(&c, &[0.9, 0.86, 0.7, 0.4]);
        let b = FeedbackBands::default();
        let none = HashSet::new();
        let pos = sample_feedback(&t, &c, FeedbackPurpose::FollowupPositive, 2, &b, 1, &none).unwrap();
        assert_eq!(pos.len(), 1);
        let mut got: Vec<f64> = pos[0].instances.iter().map(|s| s.p_pos).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.86, 0.9]);
        let neg = sample_feedback(&t, &c, FeedbackPurpose::Negdef, 3, &b, 1, &none).unwrap();
        assert_eq!(neg.len(), 1);
        assert_eq!(neg[0].instances.len(), 3);
        assert!(neg[0].instances.iter().all(|s| s.p_pos > 0.5));
    }

    #[test]
    fn three_disjoint_groups_and_exclusion() {
        let c = corpus(100);
        let scores: Vec<f64> = (0..100).map(|i| if i < 60 { 0.95 } else { 0.2 }).collect();
        let t = table(&c, &scores);
        let b = FeedbackBands::default();
        let exclude: HashSet<DedupKey> = c.instances()[..5].iter().map(|i| i.dedup_key()).collect();
        let groups = sample_feedback(&t, &c, FeedbackPurpose::FollowupPositive, 10, &b, 3, &exclude).unwrap();
        assert_eq!(groups.len(), 3);
        let mut ids = HashSet::new();
        for g in &groups {
            assert_eq!(g.instances.len(), 10);
            for s in &g.instances {
                assert!(ids.insert(s.instance.id().to_string()));
                assert!(!exclude.contains(&s.instance.dedup_key()));
            }
        }
        let again = sample_feedback(&t, &c, FeedbackPurpose::FollowupPositive, 10, &b, 3, &exclude).unwrap();
        assert_eq!(groups, again);
        assert!(sample_feedback(&t, &c, FeedbackPurpose::Negdef, 0, &b, 3, &exclude).is_err());
    }

    #[test]
    fn greedy_fill_when_short() {
        let c = corpus(25);
        let t = table(&c, &[0.99; 25]);
        let g = sample_feedback(&t, &c, FeedbackPurpose::FollowupPositive, 10, &FeedbackBands::default(), 0, &HashSet::new())
            .unwrap();
        assert_eq!(g.iter().map(|g| g.instances.len()).collect::<Vec<_>>(), vec![10, 10, 5]);
        let empty = table(&c, &[0.1; 25]);
        assert!(sample_feedback(&empty, &c, FeedbackPurpose::Negdef, 10, &FeedbackBands::default(), 0, &HashSet::new())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn score_corpus_persists_and_reloads() {
        let c = corpus(30);
        let def = RelationDefinition::positive("R", "<ENT0> saw <ENT1>").unwrap();
        let b = ReferenceBackend::new(64);
        let h = ModelHandle(UNTRAINED_HANDLE.into());
        let t = score_corpus(&b, &h, &def, &c, PremiseTagging::Off, 1).unwrap();
        assert_eq!(t.rows.len(), 30);
        assert_eq!(t.fingerprint(), score_corpus(&b, &h, &def, &c, PremiseTagging::Off, 1).unwrap().fingerprint());
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(ScoreTable::load(dir.path()).unwrap(), t);
        let empty = CorpusStore::from_instances(Vec::new());
        assert!(matches!(
            score_corpus(&b, &h, &def, &empty, PremiseTagging::Off, 1),
            Err(FeedbackError::EmptyCorpus)
        ));
    }
}
