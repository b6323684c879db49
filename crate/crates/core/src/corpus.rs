//! Unlabeled corpus ingestion, cleaning, persistence and seeded sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{sha256_hex, DedupKey, InstanceError, InstanceRecord, RelationInstance};

/// Closed-class English personal pronouns rejected as entity mentions.
pub const PRONOUN_STOPLIST: [&str; 12] = [
    "i", "he", "she", "we", "they", "you", "it", "me", "him", "her", "us", "them",
];

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const INDEX_FILE: &str = "index.json";
pub const REJECTED_FILE: &str = "rejected.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no instance survived cleaning ({rejected} rejected)")]
    EmptyCorpus { rejected: usize },
    #[error("requested {requested} instances but only {available} are available (short by {})", requested - available)]
    Insufficient { requested: usize, available: usize },
    #[error("group size {group_size} exceeds the {available} available relations")]
    GroupTooLarge { group_size: usize, available: usize },
    #[error("corpus store at {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Malformed,
    InvalidSpan,
    Overlap,
    PronounMention,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub raw: String,
    pub reason: RejectReason,
    pub detail: String,
}

pub fn is_pronoun(mention: &str) -> bool {
    let m = mention.trim().to_lowercase();
    PRONOUN_STOPLIST.contains(&m.as_str())
}

/// Cleaning rules other than deduplication.
pub fn check_cleaning_rules(instance: &RelationInstance) -> Result<(), RejectReason> {
    if is_pronoun(&instance.head().mention) || is_pronoun(&instance.tail().mention) {
        return Err(RejectReason::PronounMention);
    }
    Ok(())
}

/// Deduplicated, cleaned collection of corpus instances.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    instances: Vec<RelationInstance>,
    by_key: HashMap<DedupKey, usize>,
    by_id: HashMap<String, usize>,
    rejected: Vec<Rejection>,
}

impl CorpusStore {
    /// Builds a store from already-validated instances, applying the same cleaning rules as ingest.
    pub fn from_instances(instances: impl IntoIterator<Item = RelationInstance>) -> Self {
        let mut store = CorpusStore::default();
        for inst in instances {
            let raw = inst.to_json_line();
            store.offer(inst, raw);
        }
        store
    }

    fn offer(&mut self, inst: RelationInstance, raw: String) -> bool {
        if let Err(reason) = check_cleaning_rules(&inst) {
            self.rejected.push(Rejection {
                raw,
                reason,
                detail: "pronoun mention".into(),
            });
            return false;
        }
        let key = inst.dedup_key();
        if self.by_key.contains_key(&key) {
            self.rejected.push(Rejection {
                raw,
                reason: RejectReason::Duplicate,
                detail: "duplicate (sentence, head, tail) triple".into(),
            });
            return false;
        }
        if self.by_id.contains_key(inst.id()) {
            self.rejected.push(Rejection {
                raw,
                reason: RejectReason::Duplicate,
                detail: format!("duplicate instance id {}", inst.id()),
            });
            return false;
        }
        let idx = self.instances.len();
        self.by_key.insert(key, idx);
        self.by_id.insert(inst.id().to_string(), idx);
        self.instances.push(inst);
        true
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[RelationInstance] {
        &self.instances
    }

    pub fn rejected(&self) -> &[Rejection] {
        &self.rejected
    }

    pub fn get(&self, id: &str) -> Option<&RelationInstance> {
        self.by_id.get(id).map(|&i| &self.instances[i])
    }

    pub fn contains_key(&self, key: &DedupKey) -> bool {
        self.by_key.contains_key(key)
    }

    /// SHA-256 over the ordered instance lines.
    pub fn fingerprint(&self) -> String {
        let mut buf = String::new();
        for inst in &self.instances {
            buf.push_str(&inst.to_json_line());
            buf.push('\n');
        }
        sha256_hex(buf)
    }

    /// Writes `instances.jsonl`, the dedup index and the rejection log into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(INSTANCES_FILE))?);
        for inst in &self.instances {
            writeln!(w, "{}", inst.to_json_line())?;
        }
        w.flush()?;
        self.write_index(dir)?;
        let mut r = BufWriter::new(File::create(dir.join(REJECTED_FILE))?);
        for rej in &self.rejected {
            writeln!(r, "{}", serde_json::to_string(rej).expect("serializable"))?;
        }
        r.flush()?;
        Ok(())
    }

    fn write_index(&self, dir: &Path) -> Result<(), CorpusError> {
        let index: BTreeMap<String, usize> = self.by_key.iter().map(|(k, &v)| (k.digest(), v)).collect();
        fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index).expect("serializable"))?;
        Ok(())
    }

    /// Appends the records of `records` that survive cleaning to the store on disk.
    pub fn append_to(&mut self, dir: &Path, records: impl IntoIterator<Item = String>) -> Result<usize, CorpusError> {
        let before = self.instances.len();
        let rejected_before = self.rejected.len();
        self.extend_raw(records);
        let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(dir.join(INSTANCES_FILE))?);
        for inst in &self.instances[before..] {
            writeln!(w, "{}", inst.to_json_line())?;
        }
        w.flush()?;
        let mut r = BufWriter::new(OpenOptions::new().create(true).append(true).open(dir.join(REJECTED_FILE))?);
        for rej in &self.rejected[rejected_before..] {
            writeln!(r, "{}", serde_json::to_string(rej).expect("serializable"))?;
        }
        r.flush()?;
        self.write_index(dir)?;
        Ok(self.instances.len() - before)
    }

    /// Loads a store written by [`CorpusStore::save`], checking it against its index.
    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let path = dir.join(INSTANCES_FILE);
        let corrupt = |message: String| CorpusError::Corrupt {
            path: path.clone(),
            message,
        };
        let reader = BufReader::new(File::open(&path)?);
        let mut store = CorpusStore::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let inst: RelationInstance =
                serde_json::from_str(&line).map_err(|e| corrupt(format!("line {}: {e}", n + 1)))?;
            if !store.offer(inst, line) {
                return Err(corrupt(format!("line {} violates cleaning rules", n + 1)));
            }
        }
        let index_path = dir.join(INDEX_FILE);
        if index_path.exists() {
            let index: BTreeMap<String, usize> = serde_json::from_str(&fs::read_to_string(&index_path)?)
                .map_err(|e| corrupt(format!("index: {e}")))?;
            if index.len() != store.len() {
                return Err(corrupt(format!(
                    "index lists {} entries but {} instances were read",
                    index.len(),
                    store.len()
                )));
            }
        }
        let rej_path = dir.join(REJECTED_FILE);
        if rej_path.exists() {
            for line in BufReader::new(File::open(rej_path)?).lines() {
                let line = line?;
                if let Ok(r) = serde_json::from_str::<Rejection>(&line) {
                    store.rejected.push(r);
                }
            }
        }
        Ok(store)
    }

    fn extend_raw(&mut self, records: impl IntoIterator<Item = String>) {
        for raw in records {
            if raw.trim().is_empty() {
                continue;
            }
            let record: InstanceRecord = match serde_json::from_str(&raw) {
                Ok(r) => r,
                Err(e) => {
                    self.rejected.push(Rejection {
                        raw,
                        reason: RejectReason::Malformed,
                        detail: e.to_string(),
                    });
                    continue;
                }
            };
            match RelationInstance::try_from(record) {
                Ok(inst) => {
                    self.offer(inst, raw);
                }
                Err(e) => {
                    let reason = match e {
                        InstanceError::Overlap => RejectReason::Overlap,
                        InstanceError::EmptyId => RejectReason::Malformed,
                        _ => RejectReason::InvalidSpan,
                    };
                    self.rejected.push(Rejection {
                        raw,
                        reason,
                        detail: e.to_string(),
                    });
                }
            }
        }
    }
}

/// Cleans and deduplicates raw JSON-line records. Bad records are logged, never fatal.
pub fn ingest(records: impl IntoIterator<Item = String>) -> Result<CorpusStore, CorpusError> {
    let mut store = CorpusStore::default();
    store.extend_raw(records);
    if store.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            rejected: store.rejected.len(),
        });
    }
    Ok(store)
}

/// Reads a JSON-lines file and ingests it.
pub fn ingest_file(path: &Path) -> Result<CorpusStore, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    ingest(lines)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample of `k` distinct instances not listed in `exclude`.
pub fn sample_negatives(
    store: &CorpusStore,
    k: usize,
    rng_seed: u64,
    exclude: &HashSet<String>,
) -> Result<Vec<RelationInstance>, CorpusError> {
    let candidates: Vec<&RelationInstance> =
        store.instances.iter().filter(|i| !exclude.contains(i.id())).collect();
    if candidates.len() < k {
        return Err(CorpusError::Insufficient {
            requested: k,
            available: candidates.len(),
        });
    }
    let mut r = rng(rng_seed);
    Ok(index::sample(&mut r, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

/// A set of test relations evaluated together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalGroup {
    pub relations: Vec<String>,
    pub instances_by_relation: BTreeMap<String, Vec<RelationInstance>>,
    pub group_seed: u64,
}

impl EvalGroup {
    pub fn new(instances_by_relation: BTreeMap<String, Vec<RelationInstance>>, group_seed: u64) -> Self {
        EvalGroup {
            relations: instances_by_relation.keys().cloned().collect(),
            instances_by_relation,
            group_seed,
        }
    }

    pub fn all_instances(&self) -> impl Iterator<Item = (&str, &RelationInstance)> {
        self.relations.iter().flat_map(move |r| {
            self.instances_by_relation
                .get(r)
                .into_iter()
                .flatten()
                .map(move |i| (r.as_str(), i))
        })
    }

    pub fn instance_count(&self) -> usize {
        self.instances_by_relation.values().map(Vec::len).sum()
    }
}

/// Groups labeled instances by their `relation` field, dropping unlabeled ones.
pub fn group_by_relation(instances: impl IntoIterator<Item = RelationInstance>) -> BTreeMap<String, Vec<RelationInstance>> {
    let mut map: BTreeMap<String, Vec<RelationInstance>> = BTreeMap::new();
    for inst in instances {
        if let Some(r) = inst.relation().map(str::to_string) {
            map.entry(r).or_default().push(inst);
        }
    }
    map
}

/// Draws `n_groups` groups of `group_size` relations.
///
/// Groups are pairwise disjoint when `n_groups * group_size` relations are available;
/// otherwise each group is drawn independently.
pub fn build_eval_groups(
    labeled: &BTreeMap<String, Vec<RelationInstance>>,
    group_size: usize,
    n_groups: usize,
    rng_seed: u64,
) -> Result<Vec<EvalGroup>, CorpusError> {
    let relations: Vec<&String> = labeled.keys().collect();
    if group_size > relations.len() {
        return Err(CorpusError::GroupTooLarge {
            group_size,
            available: relations.len(),
        });
    }
    let mut r = rng(rng_seed);
    let disjoint = group_size * n_groups <= relations.len();
    let order: Vec<usize> = if disjoint {
        index::sample(&mut r, relations.len(), group_size * n_groups).into_vec()
    } else {
        Vec::new()
    };
    let mut groups = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let picked: Vec<usize> = if disjoint {
            order[g * group_size..(g + 1) * group_size].to_vec()
        } else {
            index::sample(&mut r, relations.len(), group_size).into_vec()
        };
        let mut map = BTreeMap::new();
        for i in picked {
            let rel = relations[i].clone();
            let instances = labeled[&rel].clone();
            map.insert(rel, instances);
        }
        groups.push(EvalGroup::new(map, rng_seed.wrapping_add(g as u64)));
    }
    Ok(groups)
}

/// Uniform down-sample of exactly `n` instances, preserving corpus order.
pub fn downsample(store: &CorpusStore, n: usize, rng_seed: u64) -> Result<CorpusStore, CorpusError> {
    if n > store.len() {
        return Err(CorpusError::Insufficient {
            requested: n,
            available: store.len(),
        });
    }
    let mut r = rng(rng_seed);
    let mut picked = index::sample(&mut r, store.len(), n).into_vec();
    picked.sort_unstable();
    Ok(CorpusStore::from_instances(picked.into_iter().map(|i| store.instances[i].clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EntitySpan, InstanceSource};

    fn record(id: &str, sentence: &str, head: (&str, usize), tail: (&str, usize)) -> String {
        let span = |(m, s): (&str, usize)| EntitySpan::new(m, s, s + m.chars().count());
        serde_json::to_string(&InstanceRecord {
            id: id.into(),
            sentence: sentence.into(),
            head: span(head),
            tail: span(tail),
            relation: None,
            source: InstanceSource::Corpus,
        })
        .unwrap()
    }

    fn numbered_store(n: usize) -> CorpusStore {
        ingest((0..n).map(|i| record(&format!("c{i}"), &format!("Alpha{i} met Beta{i}."), (&format!("Alpha{i}"), 0), (&format!("Beta{i}"), format!("Alpha{i} met ").chars().count())))).unwrap()
    }

    #[test]
    fn pronoun_mentions_are_rejected() {
        let store = ingest(vec![
            record("a", "he met Bob", ("he", 0), ("Bob", 7)),
            record("b", "Ann met Bob", ("Ann", 0), ("Bob", 8)),
        ])
        .unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.rejected()[0].reason, RejectReason::PronounMention);
    }

    #[test]
    fn duplicate_triples_collapse() {
        let store = ingest(vec![
            record("a", "Ann met Bob", ("Ann", 0), ("Bob", 8)),
            record("b", "Ann met Bob", ("Ann", 0), ("Bob", 8)),
        ])
        .unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.rejected()[0].reason, RejectReason::Duplicate);
    }

    #[test]
    fn overlapping_spans_are_rejected() {
        let overlap = r#"{"id":"o","sentence":"abcdefghijkl","head":{"mention":"defgh","start":3,"end":8},"tail":{"mention":"fghij","start":5,"end":10},"source":"corpus"}"#;
        let store = ingest(vec![overlap.to_string(), record("b", "Ann met Bob", ("Ann", 0), ("Bob", 8))]).unwrap();
        assert_eq!(store.rejected()[0].reason, RejectReason::Overlap);
    }

    #[test]
    fn malformed_lines_do_not_abort() {
        let store = ingest(vec!["{not json".to_string(), record("b", "Ann met Bob", ("Ann", 0), ("Bob", 8))]).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.rejected()[0].reason, RejectReason::Malformed);
    }

    #[test]
    fn empty_result_is_an_error() {
        assert!(matches!(
            ingest(vec!["garbage".to_string()]),
            Err(CorpusError::EmptyCorpus { rejected: 1 })
        ));
    }

    #[test]
    fn cleaning_is_idempotent() {
        let store = numbered_store(50);
        let again = ingest(store.instances().iter().map(|i| i.to_json_line())).unwrap();
        assert!(again.rejected().is_empty());
        assert_eq!(again.fingerprint(), store.fingerprint());
    }

    #[test]
    fn sampling_is_seeded_and_excludes() {
        let store = numbered_store(100);
        assert!(sample_negatives(&store, 0, 1, &HashSet::new()).unwrap().is_empty());
        let a = sample_negatives(&store, 15, 7, &HashSet::new()).unwrap();
        let b = sample_negatives(&store, 15, 7, &HashSet::new()).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|i| i.id().to_string()).collect();
        assert_eq!(ids.len(), 15);
        let c = sample_negatives(&store, 85, 7, &ids).unwrap();
        assert!(c.iter().all(|i| !ids.contains(i.id())));
        match sample_negatives(&store, 86, 7, &ids) {
            Err(CorpusError::Insufficient { requested: 86, available: 85 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_selection_frequency() {
        let store = numbered_store(10);
        let mut counts = HashMap::new();
        for seed in 0..1000 {
            let s = sample_negatives(&store, 1, seed, &HashSet::new()).unwrap();
            *counts.entry(s[0].id().to_string()).or_insert(0usize) += 1;
        }
        for inst in store.instances() {
            let f = *counts.get(inst.id()).unwrap_or(&0) as f64 / 1000.0;
            assert!((0.06..=0.14).contains(&f), "{} frequency {f}", inst.id());
        }
    }

    #[test]
    fn downsample_exact_and_deterministic() {
        let store = numbered_store(200);
        let a = downsample(&store, 50, 3).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a.fingerprint(), downsample(&store, 50, 3).unwrap().fingerprint());
        assert_ne!(a.fingerprint(), downsample(&store, 50, 4).unwrap().fingerprint());
        assert_eq!(downsample(&store, 200, 9).unwrap().fingerprint(), store.fingerprint());
        assert!(downsample(&store, 201, 9).is_err());
    }

    fn labeled(n_rel: usize) -> BTreeMap<String, Vec<RelationInstance>> {
        (0..n_rel).map(|r| (format!("R{r}"), Vec::new())).collect()
    }

    #[test]
    fn eval_groups_shapes() {
        let g = build_eval_groups(&labeled(80), 14, 5, 1).unwrap();
        assert_eq!(g.len(), 5);
        let mut all = HashSet::new();
        for grp in &g {
            assert_eq!(grp.relations.len(), 14);
            let uniq: HashSet<_> = grp.relations.iter().collect();
            assert_eq!(uniq.len(), 14);
            all.extend(grp.relations.iter().cloned());
        }
        assert_eq!(all.len(), 70);
        let w = build_eval_groups(&labeled(113), 15, 3, 1).unwrap();
        assert!(w.iter().all(|g| g.relations.len() == 15));
        let full = build_eval_groups(&labeled(6), 6, 1, 0).unwrap();
        assert_eq!(full[0].relations.len(), 6);
        assert!(build_eval_groups(&labeled(5), 6, 1, 0).is_err());
        assert_eq!(build_eval_groups(&labeled(80), 14, 5, 1).unwrap(), g);
    }

    #[test]
    fn save_load_roundtrip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = numbered_store(20);
        store.save(dir.path()).unwrap();
        let loaded = CorpusStore::load(dir.path()).unwrap();
        assert_eq!(loaded.fingerprint(), store.fingerprint());
        let added = store
            .append_to(
                dir.path(),
                vec![
                    record("new", "Gamma met Delta", ("Gamma", 0), ("Delta", 10)),
                    record("c0", "Alpha0 met Beta0.", ("Alpha0", 0), ("Beta0", 11)),
                ],
            )
            .unwrap();
        assert_eq!(added, 1);
        assert_eq!(CorpusStore::load(dir.path()).unwrap().len(), 21);
    }
}
