//! Per-target binary evaluation over relation groups, plus random and LLM baselines.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{build_nli_pair_with, ClassifierBackend, ClassifierError, ModelHandle, PremiseTagging};
use crate::corpus::EvalGroup;
use crate::llm::{ChatParams, DialogueThread, LlmClient, LlmError};
use crate::prompting::{render_baseline_prompt, BaselineKind, IclExemplar, PromptError};
use crate::types::{RelationDefinition, RelationInstance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("target relation `{0}` is not in the group")]
    UnknownTarget(String),
    #[error("{} instances lack predictions for target `{target}`: {}", missing.len(), preview(missing))]
    MissingPredictions { target: String, missing: Vec<String> },
    #[error("instance id `{0}` appears more than once in the group")]
    DuplicateInstance(String),
    #[error("no relations to aggregate")]
    Empty,
    #[error("no definition for target relation `{0}`")]
    MissingDefinition(String),
    #[error("cannot down-sample {requested} instances of `{relation}`: only {available}")]
    Downsample {
        relation: String,
        requested: usize,
        available: usize,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 5 {
        s.push_str(", ...");
    }
    s
}

/// Confusion counts with precision, recall and F1 as fractions in `[0, 1]`.
/// Zero denominators give 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl BinaryMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BinaryMetrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }

    pub fn from_predictions(predicted: &[bool], gold: &[bool]) -> Self {
        assert_eq!(predicted.len(), gold.len(), "prediction/gold length mismatch");
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }
}

/// Counts (target, instance) judgments; a balanced group of R relations with N
/// instances each yields N·R² per full protocol pass.
#[derive(Debug, Default)]
pub struct PairCounter(AtomicU64);

impl PairCounter {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

fn check_unique_ids(group: &EvalGroup) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for (_, inst) in group.all_instances() {
        if !seen.insert(inst.id()) {
            return Err(EvalError::DuplicateInstance(inst.id().to_string()));
        }
    }
    Ok(())
}

/// Treats `target`'s instances as gold positives and every other relation's as
/// gold negatives. `predictions` maps instance id to the positive decision.
pub fn evaluate_target_relation(
    predictions: &HashMap<String, bool>,
    target: &str,
    group: &EvalGroup,
) -> Result<BinaryMetrics, EvalError> {
    if !group.instances_by_relation.contains_key(target) {
        return Err(EvalError::UnknownTarget(target.to_string()));
    }
    check_unique_ids(group)?;
    let mut predicted = Vec::with_capacity(group.instance_count());
    let mut gold = Vec::with_capacity(group.instance_count());
    let mut missing = Vec::new();
    for (rel, inst) in group.all_instances() {
        match predictions.get(inst.id()) {
            Some(&p) => {
                predicted.push(p);
                gold.push(rel == target);
            }
            None => missing.push(inst.id().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingPredictions {
            target: target.to_string(),
            missing,
        });
    }
    Ok(BinaryMetrics::from_predictions(&predicted, &gold))
}

/// Same as [`evaluate_target_relation`] with `p_pos > threshold` as the decision.
pub fn evaluate_target_scores(
    scores: &HashMap<String, f64>,
    threshold: f64,
    target: &str,
    group: &EvalGroup,
) -> Result<BinaryMetrics, EvalError> {
    let decisions = scores.iter().map(|(k, &p)| (k.clone(), p > threshold)).collect();
    evaluate_target_relation(&decisions, target, group)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub relations: Vec<String>,
    pub group_seed: u64,
    pub instance_count: usize,
}

impl From<&EvalGroup> for GroupSummary {
    fn from(g: &EvalGroup) -> Self {
        GroupSummary {
            relations: g.relations.clone(),
            group_seed: g.group_seed,
            instance_count: g.instance_count(),
        }
    }
}

/// Per-relation metrics and their unweighted means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub per_relation: BTreeMap<String, BinaryMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<GroupSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ProtocolReport {
    /// Header line with the averages in percent, two decimals.
    pub fn summary_line(&self) -> String {
        format!(
            "precision {:.2}  recall {:.2}  f1 {:.2}  ({} relations)",
            self.precision * 100.0,
            self.recall * 100.0,
            self.f1 * 100.0,
            self.per_relation.len()
        )
    }
}

pub fn aggregate_report(per_relation: BTreeMap<String, BinaryMetrics>) -> Result<ProtocolReport, EvalError> {
    if per_relation.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = per_relation.len() as f64;
    let mean = |f: fn(&BinaryMetrics) -> f64| per_relation.values().map(f).sum::<f64>() / n;
    Ok(ProtocolReport {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        per_relation,
        group: None,
        note: None,
    })
}

/// Runs the protocol for every target given per-target decisions.
pub fn evaluate_group(
    predictions: &BTreeMap<String, HashMap<String, bool>>,
    group: &EvalGroup,
    counter: Option<&PairCounter>,
) -> Result<ProtocolReport, EvalError> {
    let mut rows = BTreeMap::new();
    for target in &group.relations {
        let empty = HashMap::new();
        let preds = predictions.get(target).unwrap_or(&empty);
        rows.insert(target.clone(), evaluate_target_relation(preds, target, group)?);
        if let Some(c) = counter {
            c.add(group.instance_count() as u64);
        }
    }
    let mut report = aggregate_report(rows)?;
    report.group = Some(group.into());
    Ok(report)
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Number of set bits among `n` fair coin flips.
fn coin_heads(rng: &mut ChaCha8Rng, n: usize) -> u64 {
    let mut heads = 0u64;
    for _ in 0..n / 64 {
        heads += u64::from(rng.next_u64().count_ones());
    }
    let rest = n % 64;
    if rest > 0 {
        heads += u64::from((rng.next_u64() & ((1u64 << rest) - 1)).count_ones());
    }
    heads
}

/// Every (target, instance) judged positive with probability 1/2, independently.
pub fn random_guess_baseline(group: &EvalGroup, rng_seed: u64) -> Result<ProtocolReport, EvalError> {
    let mut rng = trial_rng(rng_seed, 0);
    let mut predictions = BTreeMap::new();
    for target in &group.relations {
        let preds: HashMap<String, bool> = group
            .all_instances()
            .map(|(_, i)| (i.id().to_string(), rng.random_bool(0.5)))
            .collect();
        predictions.insert(target.clone(), preds);
    }
    let mut report = evaluate_group(&predictions, group, None)?;
    report.note = Some(format!("random guess, seed {rng_seed}"));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanSd { mean, sd: var.sqrt() }
    }
}

/// Averaged protocol metrics over many random-guess trials, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub trials: usize,
    pub rng_seed: u64,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
    pub group: GroupSummary,
}

/// Monte-Carlo estimate of the random-guess protocol.
///
/// Only confusion counts matter, so each trial draws per-target head counts for
/// the positive and negative blocks instead of materializing predictions.
/// Trial `t` uses its own ChaCha stream, so the result is independent of threading.
pub fn random_guess_monte_carlo(group: &EvalGroup, trials: usize, rng_seed: u64) -> Result<MonteCarloReport, EvalError> {
    if trials == 0 || group.relations.is_empty() {
        return Err(EvalError::Empty);
    }
    let total = group.instance_count();
    let sizes: Vec<usize> = group
        .relations
        .iter()
        .map(|r| group.instances_by_relation.get(r).map_or(0, Vec::len))
        .collect();
    let per_trial: Vec<[f64; 3]> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(rng_seed, t as u64);
            let r = sizes.len() as f64;
            let mut acc = [0.0; 3];
            for &pos in &sizes {
                let tp = coin_heads(&mut rng, pos);
                let fp = coin_heads(&mut rng, total - pos);
                let m = BinaryMetrics::from_counts(tp, fp, pos as u64 - tp, (total - pos) as u64 - fp);
                acc[0] += m.precision / r;
                acc[1] += m.recall / r;
                acc[2] += m.f1 / r;
            }
            acc.map(|v| v * 100.0)
        })
        .collect();
    let col = |k: usize| per_trial.iter().map(|a| a[k]).collect::<Vec<_>>();
    Ok(MonteCarloReport {
        trials,
        rng_seed,
        precision: MeanSd::of(&col(0)),
        recall: MeanSd::of(&col(1)),
        f1: MeanSd::of(&col(2)),
        group: group.into(),
    })
}

fn answer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(option\s*1|option\s*2|yes|no)\b").expect("valid regex"))
}

/// Maps a free-text reply to a decision: the first of "option 1"/"yes" (positive)
/// or "option 2"/"no" (negative) wins. `None` when neither occurs.
pub fn normalize_answer(reply: &str) -> Option<bool> {
    let m = answer_regex().find(reply)?;
    let s = m.as_str().to_ascii_lowercase();
    Some(s == "yes" || (s.starts_with("option") && s.ends_with('1')))
}

/// Seeded per-relation down-sample that keeps the original instance order.
pub fn downsample_group(group: &EvalGroup, per_relation: usize, rng_seed: u64) -> Result<EvalGroup, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut map = BTreeMap::new();
    for rel in &group.relations {
        let all = group.instances_by_relation.get(rel).cloned().unwrap_or_default();
        if all.len() < per_relation {
            return Err(EvalError::Downsample {
                relation: rel.clone(),
                requested: per_relation,
                available: all.len(),
            });
        }
        let mut picked = index::sample(&mut rng, all.len(), per_relation).into_vec();
        picked.sort_unstable();
        map.insert(rel.clone(), picked.into_iter().map(|i| all[i].clone()).collect::<Vec<_>>());
    }
    Ok(EvalGroup {
        relations: group.relations.clone(),
        instances_by_relation: map,
        group_seed: group.group_seed,
    })
}

/// One LLM judgment of (target, instance).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub target: String,
    pub instance_id: String,
    pub reply: String,
    pub positive: bool,
    pub parsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub report: ProtocolReport,
    pub judgments: Vec<Judgment>,
    pub unparsed: usize,
}

/// Asks the LLM about every (target, instance) pair of `group`, one fresh thread each.
///
/// `params` has its temperature forced to 0. Unparseable replies count as negative.
pub fn llm_binary_baseline(
    group: &EvalGroup,
    definitions: &BTreeMap<String, RelationDefinition>,
    llm: &LlmClient,
    params: &ChatParams,
    kind: BaselineKind,
    icl: Option<&BTreeMap<String, Vec<IclExemplar>>>,
    counter: Option<&PairCounter>,
) -> Result<BaselineRun, EvalError> {
    let params = ChatParams {
        temperature: 0.0,
        ..params.clone()
    };
    let mut jobs: Vec<(&str, &RelationInstance, String)> = Vec::new();
    for target in &group.relations {
        let def = definitions
            .get(target)
            .ok_or_else(|| EvalError::MissingDefinition(target.clone()))?;
        let shots = icl.and_then(|m| m.get(target)).map(Vec::as_slice);
        for (_, inst) in group.all_instances() {
            let prompt = render_baseline_prompt(kind, std::slice::from_ref(def), inst, shots)?;
            jobs.push((target.as_str(), inst, prompt));
        }
    }
    let judgments: Vec<Judgment> = jobs
        .par_iter()
        .map(|(target, inst, prompt)| {
            let mut thread = DialogueThread::new(format!("baseline/{target}/{}", inst.id()), None);
            let reply = llm.chat(&mut thread, prompt, &params)?;
            let decision = normalize_answer(&reply);
            if decision.is_none() {
                log::warn!("unparseable baseline reply for {target}/{}: {reply:?}", inst.id());
            }
            Ok(Judgment {
                target: target.to_string(),
                instance_id: inst.id().to_string(),
                positive: decision.unwrap_or(false),
                parsed: decision.is_some(),
                reply,
            })
        })
        .collect::<Result<_, LlmError>>()?;
    let mut predictions: BTreeMap<String, HashMap<String, bool>> = BTreeMap::new();
    for j in &judgments {
        predictions
            .entry(j.target.clone())
            .or_default()
            .insert(j.instance_id.clone(), j.positive);
    }
    let mut report = evaluate_group(&predictions, group, counter)?;
    report.note = Some(format!("llm baseline {kind:?}, temperature 0"));
    Ok(BaselineRun {
        unparsed: judgments.iter().filter(|j| !j.parsed).count(),
        report,
        judgments,
    })
}

/// Decision record accepted by the `eval run` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub target: String,
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_pos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<bool>,
}

/// Groups prediction records per target; explicit `positive` wins over `p_pos`.
pub fn decisions_from_records(records: &[PredictionRecord], threshold: f64) -> BTreeMap<String, HashMap<String, bool>> {
    let mut out: BTreeMap<String, HashMap<String, bool>> = BTreeMap::new();
    for r in records {
        let decision = r.positive.or(r.p_pos.map(|p| p > threshold));
        if let Some(d) = decision {
            out.entry(r.target.clone()).or_default().insert(r.instance_id.clone(), d);
        }
    }
    out
}


/// Scores every group instance against each target's model.
pub fn predict_group(
    backend: &dyn ClassifierBackend,
    models: &[(RelationDefinition, ModelHandle)],
    group: &EvalGroup,
    tagging: PremiseTagging,
) -> Result<Vec<PredictionRecord>, ClassifierError> {
    let mut out = Vec::with_capacity(models.len() * group.instance_count());
    for (def, handle) in models {
        let pairs: Vec<_> = group
            .all_instances()
            .map(|(_, i)| build_nli_pair_with(i, def, tagging))
            .collect();
        for s in backend.score(handle, &pairs)? {
            out.push(PredictionRecord {
                target: def.id().to_string(),
                instance_id: s.pair_id,
                p_pos: Some(s.p_pos),
                positive: None,
            });
        }
    }
    Ok(out)
}
