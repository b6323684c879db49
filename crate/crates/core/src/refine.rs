//! Iteration controller: seed synthesis, training, corpus scoring, feedback-driven
//! follow-up synthesis and retraining, checkpointed after every stage.
//!
//! Layout under a run directory:
//!
//! ```text
//! config.json                       fingerprint + config + relation ids
//! models/                           reference-backend weights (when used)
//! <relation>/definition.json
//! <relation>/journal.jsonl          every LLM call for this relation
//! <relation>/summary.json
//! <relation>/iter<k>/stage.json     last completed stage of iteration k
//! <relation>/iter<k>/{feedback.json, synthesis/, trainset.jsonl, devset.jsonl,
//!                     negdefs.json, threads/, report.json, scores.jsonl, scores.meta.json}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    build_nli_pair_with, read_jsonl, write_jsonl, ClassifierBackend, ClassifierError, LabeledNliPair, PremiseTagging,
    TrainParams, TrainReport, TrainSpec,
};
use crate::corpus::{sample_negatives, CorpusError, CorpusStore};
use crate::feedback::{sample_feedback, FeedbackBands, FeedbackError, FeedbackPurpose, FeedbackSample, ScoreTable};
use crate::llm::{ChatParams, DialogueThread, LlmClient, LlmError};
use crate::prompting::SeedStyle;
use crate::synthesis::{
    seed_thread_id, synthesize_followup_positives, synthesize_initial_seeds, synthesize_negatives, Generation,
    KnownInstances, SynthesisConfig, SynthesisError, SynthesisRecord,
};
use crate::types::{sha256_hex, DedupKey, Label, LabeledPair, RelationDefinition};

pub const CONFIG_FILE: &str = "config.json";
pub const MODELS_DIR: &str = "models";

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("config-mismatch: run directory was created with config {persisted}, got {provided}")]
    ConfigMismatch { persisted: String, provided: String },
    #[error("corrupt checkpoint {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("relation `{relation}` iteration {iteration} failed while {stage}: {source}; resume with `loop resume --run {run}`")]
    Step {
        relation: String,
        iteration: u32,
        stage: &'static str,
        run: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Instance counts per round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Counts {
    pub initial_positives: usize,
    pub initial_negatives: usize,
    pub followup_positives: usize,
    pub followup_negatives: usize,
    pub negdefs: usize,
    pub feedback_k: usize,
    pub max_topup_turns: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            initial_positives: 15,
            initial_negatives: 15,
            followup_positives: 15,
            followup_negatives: 15,
            negdefs: 5,
            feedback_k: 10,
            max_topup_turns: 2,
        }
    }
}

/// Everything that determines a run's behavior. Paths are not part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub counts: Counts,
    pub bands: FeedbackBands,
    pub train: TrainParams,
    pub chat: ChatParams,
    pub premise_tagging: PremiseTagging,
    pub max_iterations: u32,
    pub rng_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            counts: Counts::default(),
            bands: FeedbackBands::default(),
            train: TrainParams::default(),
            chat: ChatParams::default(),
            premise_tagging: PremiseTagging::Off,
            max_iterations: 2,
            rng_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: String| Err(LoopError::InvalidConfig(m));
        let c = &self.counts;
        for (name, v) in [
            ("initial_positives", c.initial_positives),
            ("initial_negatives", c.initial_negatives),
            ("followup_positives", c.followup_positives),
            ("followup_negatives", c.followup_negatives),
            ("negdefs", c.negdefs),
            ("feedback_k", c.feedback_k),
        ] {
            if v == 0 {
                return bad(format!("counts.{name} must be at least 1"));
            }
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        for (name, v) in [
            ("followup_positive_min", self.bands.followup_positive_min),
            ("negdef_min", self.bands.negdef_min),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("bands.{name} must lie in [0, 1)"));
            }
        }
        self.train.validate().or_else(|e| bad(e.to_string()))?;
        self.chat.validate().or_else(|e| bad(e.to_string()))
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("serializable"))[..16].to_string()
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            positives: self.counts.initial_positives,
            negatives: self.counts.initial_negatives,
            max_topup_turns: self.counts.max_topup_turns,
            params: self.chat.clone(),
        }
    }
}

/// Stable per-purpose seed derived from the run seed.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let h = sha256_hex(format!("{base}/{}", parts.join("/")));
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

/// Last completed stage of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Started,
    FeedbackSampled,
    Synthesized,
    Trained,
    Scored,
}

impl Stage {
    fn next_action(self) -> &'static str {
        match self {
            Stage::Started => "sampling feedback / synthesizing seeds",
            Stage::FeedbackSampled => "synthesizing follow-up instances",
            Stage::Synthesized => "training",
            Stage::Trained => "scoring the corpus",
            Stage::Scored => "starting the next iteration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageFile {
    iteration: u32,
    stage: Stage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationFeedback {
    pub positive_groups: Vec<FeedbackSample>,
    pub negdef: Option<FeedbackSample>,
}

/// In-memory state of one relation's loop.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub relation_id: String,
    pub definition: RelationDefinition,
    pub iteration: u32,
    pub stage: Stage,
    pub train: Vec<LabeledPair>,
    pub dev: Vec<LabeledPair>,
    pub negdefs: Vec<RelationDefinition>,
    /// Brief, medium, implicit positive threads.
    pub threads: Vec<DialogueThread>,
    pub feedback: Option<IterationFeedback>,
    pub report: Option<TrainReport>,
    pub score_table: Option<ScoreTable>,
}

impl IterationState {
    pub fn new(definition: RelationDefinition) -> Self {
        IterationState {
            relation_id: definition.id().to_string(),
            definition,
            iteration: 1,
            stage: Stage::Started,
            train: Vec::new(),
            dev: Vec::new(),
            negdefs: Vec::new(),
            threads: Vec::new(),
            feedback: None,
            report: None,
            score_table: None,
        }
    }

    pub fn is_finished(&self, max_iterations: u32) -> bool {
        self.iteration >= max_iterations && self.stage == Stage::Scored
    }

    fn known(&self) -> KnownInstances {
        let mut k = KnownInstances::default();
        k.extend(self.train.iter().chain(&self.dev).map(LabeledPair::instance));
        k
    }

    fn dedup_keys(&self) -> HashSet<DedupKey> {
        self.train.iter().chain(&self.dev).map(|p| p.instance().dedup_key()).collect()
    }
}

fn count_labels(set: &[LabeledPair]) -> (usize, usize) {
    let pos = set.iter().filter(|p| p.label().is_positive()).count();
    (pos, set.len() - pos)
}

/// Per-iteration numbers written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u32,
    pub train_positives: usize,
    pub train_negatives: usize,
    pub dev_positives: usize,
    pub dev_negatives: usize,
    pub negdefs: usize,
    pub feedback_groups: Vec<usize>,
    pub selected_epoch: usize,
    pub dev_f1: f64,
    pub scores_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSummary {
    pub relation_id: String,
    pub iterations: Vec<IterationSummary>,
}

/// Shared services for a run.
pub struct Services<'a> {
    pub llm: &'a LlmClient,
    pub backend: &'a dyn ClassifierBackend,
    pub corpus: &'a CorpusStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PersistedConfig {
    fingerprint: String,
    config: RunConfig,
    relations: Vec<String>,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join(MODELS_DIR)
    }

    pub fn relation_dir(&self, relation: &str) -> PathBuf {
        self.root.join(sanitize(relation))
    }

    pub fn iter_dir(&self, relation: &str, k: u32) -> PathBuf {
        self.relation_dir(relation).join(format!("iter{k}"))
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, LoopError> {
    let text = fs::read_to_string(path).map_err(|e| LoopError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| LoopError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_pairs(path: &Path) -> Result<Vec<LabeledPair>, LoopError> {
    read_jsonl(path).map_err(|e| LoopError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn thread_file(dir: &Path, thread: &DialogueThread) -> PathBuf {
    dir.join("threads").join(format!("{}.json", sanitize(thread.thread_id())))
}

fn save_records(dir: &Path, records: &[SynthesisRecord]) -> std::io::Result<()> {
    let syn = dir.join("synthesis");
    for (i, r) in records.iter().enumerate() {
        r.save(&syn, &format!("{:02}-{}", i + 1, sanitize(&r.thread_id)))?;
    }
    Ok(())
}

fn step_error<E>(state: &IterationState, run: &RunDir, source: E) -> LoopError
where
    E: std::error::Error + Send + Sync + 'static,
{
    LoopError::Step {
        relation: state.relation_id.clone(),
        iteration: state.iteration,
        stage: state.stage.next_action(),
        run: run.root.display().to_string(),
        source: Box::new(source),
    }
}

#[derive(Debug, Error)]
enum StepFailure {
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runs one relation's loop from `state` until `max_iterations` are scored.
pub struct RelationLoop<'a> {
    pub config: &'a RunConfig,
    pub services: &'a Services<'a>,
    pub run: &'a RunDir,
    llm: LlmClient,
}

impl<'a> RelationLoop<'a> {
    pub fn new(config: &'a RunConfig, services: &'a Services<'a>, run: &'a RunDir, relation: &str) -> Self {
        let llm = services.llm.scoped(run.relation_dir(relation).join("journal.jsonl"));
        RelationLoop {
            config,
            services,
            run,
            llm,
        }
    }

    fn seed(&self, state: &IterationState, purpose: &str) -> u64 {
        derive_seed(
            self.config.rng_seed,
            &[&state.relation_id, &format!("iter{}", state.iteration), purpose],
        )
    }

    fn checkpoint(&self, state: &IterationState) -> std::io::Result<()> {
        write_json(
            &self.run.iter_dir(&state.relation_id, state.iteration).join("stage.json"),
            &StageFile {
                iteration: state.iteration,
                stage: state.stage,
            },
        )
    }

    /// Executes the next stage and persists its artifacts.
    pub fn advance(&self, state: &mut IterationState) -> Result<(), LoopError> {
        if state.stage == Stage::Scored {
            state.iteration += 1;
            state.stage = Stage::Started;
            state.feedback = None;
            state.report = None;
            return Ok(());
        }
        let result = match state.stage {
            Stage::Started if state.iteration == 1 => self.initial_seeds(state),
            Stage::Started => self.sample(state),
            Stage::FeedbackSampled => self.followup(state),
            Stage::Synthesized => self.train(state),
            Stage::Trained => self.score(state),
            Stage::Scored => unreachable!("handled above"),
        };
        result.map_err(|e| step_error(state, self.run, e))?;
        self.checkpoint(state)?;
        Ok(())
    }

    pub fn run_to_end(&self, state: &mut IterationState) -> Result<(), LoopError> {
        while !state.is_finished(self.config.max_iterations) {
            self.advance(state)?;
        }
        Ok(())
    }

    fn save_sets(&self, state: &IterationState, dir: &Path) -> std::io::Result<()> {
        write_jsonl(&dir.join("trainset.jsonl"), &state.train)?;
        write_jsonl(&dir.join("devset.jsonl"), &state.dev)?;
        write_json(&dir.join("negdefs.json"), &state.negdefs)?;
        for (t, style) in state.threads.iter().zip(SeedStyle::ALL) {
            write_json(&dir.join("threads").join(format!("pos-{style}.json")), t)?;
        }
        Ok(())
    }

    fn generation<'s>(&'s self, state: &'s IterationState) -> Generation<'s> {
        Generation {
            llm: &self.llm,
            params: &self.config.chat,
            relation_id: &state.relation_id,
            iteration: state.iteration,
            max_topup_turns: self.config.counts.max_topup_turns,
        }
    }

    fn initial_seeds(&self, state: &mut IterationState) -> Result<(), StepFailure> {
        let dir = self.run.iter_dir(&state.relation_id, 1);
        let mut known = KnownInstances::default();
        let seeds = synthesize_initial_seeds(
            &state.definition,
            &self.config.synthesis(),
            self.services.corpus,
            &self.llm,
            &mut known,
            self.seed(state, "negatives"),
        )?;
        for w in &seeds.warnings {
            log::warn!("{}: {w}", state.relation_id);
        }
        save_records(&dir, &seeds.records)?;
        state.train = seeds.train.labeled_pairs();
        state.dev = seeds.dev.labeled_pairs();
        state.threads = seeds.threads;
        state.stage = Stage::Synthesized;
        self.save_sets(state, &dir)?;
        Ok(())
    }

    fn sample(&self, state: &mut IterationState) -> Result<(), StepFailure> {
        let table = state
            .score_table
            .as_ref()
            .expect("iteration k > 1 starts from a scored iteration");
        let exclude = state.dedup_keys();
        let k = self.config.counts.feedback_k;
        let positive_groups = sample_feedback(
            table,
            self.services.corpus,
            FeedbackPurpose::FollowupPositive,
            k,
            &self.config.bands,
            self.seed(state, "feedback-positive"),
            &exclude,
        )?;
        let negdef = sample_feedback(
            table,
            self.services.corpus,
            FeedbackPurpose::Negdef,
            k,
            &self.config.bands,
            self.seed(state, "feedback-negdef"),
            &exclude,
        )?
        .into_iter()
        .next();
        let fb = IterationFeedback {
            positive_groups,
            negdef,
        };
        write_json(
            &self.run.iter_dir(&state.relation_id, state.iteration).join("feedback.json"),
            &fb,
        )?;
        state.feedback = Some(fb);
        state.stage = Stage::FeedbackSampled;
        Ok(())
    }

    fn followup(&self, state: &mut IterationState) -> Result<(), StepFailure> {
        let k = state.iteration;
        let rel = state.relation_id.clone();
        let dir = self.run.iter_dir(&rel, k);
        let counts = &self.config.counts;
        let fb = state.feedback.clone().unwrap_or_default();
        let groups: Vec<_> = fb.positive_groups.iter().map(FeedbackSample::plain_instances).collect();
        let negdef_feedback = fb.negdef.as_ref().map(FeedbackSample::plain_instances).unwrap_or_default();
        let mut known = state.known();
        let gen = self.generation(state);

        let mut dev_threads: Vec<DialogueThread> = state
            .threads
            .iter()
            .zip(SeedStyle::ALL)
            .map(|(t, s)| t.fork(format!("{rel}/dev/iter{k}/{s}")))
            .collect();
        let mut threads = state.threads.clone();
        let (pos, mut records) = synthesize_followup_positives(
            &gen,
            &mut threads,
            &state.definition,
            &groups,
            counts.followup_positives,
            &mut known,
        )?;
        let (dev_pos, dev_records) = synthesize_followup_positives(
            &gen,
            &mut dev_threads,
            &state.definition,
            &groups,
            counts.followup_positives,
            &mut known,
        )?;
        records.extend(dev_records);
        let neg = synthesize_negatives(
            &gen,
            &state.definition,
            &negdef_feedback,
            &state.negdefs,
            counts.negdefs,
            counts.followup_negatives,
            &mut known,
        )?;
        records.extend(neg.records.iter().cloned());
        let dev_neg = sample_negatives(
            self.services.corpus,
            counts.followup_negatives,
            self.seed(state, "dev-negatives"),
            known.ids(),
        )?;
        for (name, got, want) in [
            ("train positives", pos.len(), counts.followup_positives),
            ("dev positives", dev_pos.len(), counts.followup_positives),
            ("train negatives", neg.instances.len(), counts.followup_negatives),
        ] {
            if got < want {
                log::warn!("{rel} iteration {k}: {name} short ({got}/{want})");
            }
        }

        save_records(&dir, &records)?;
        for t in dev_threads.iter().chain([&neg.negdef_thread]).chain(&neg.instance_threads) {
            write_json(&thread_file(&dir, t), t)?;
        }
        state.threads = threads;
        state.train.extend(pos.into_iter().map(|i| LabeledPair::new(i, Label::Positive)));
        state.train.extend(neg.instances.into_iter().map(|i| LabeledPair::new(i, Label::Negative)));
        state.dev.extend(dev_pos.into_iter().map(|i| LabeledPair::new(i, Label::Positive)));
        state.dev.extend(dev_neg.into_iter().map(|i| LabeledPair::new(i, Label::Negative)));
        state.negdefs.extend(neg.definitions);
        state.stage = Stage::Synthesized;
        self.save_sets(state, &dir)?;
        Ok(())
    }

    fn nli_pairs(&self, state: &IterationState, set: &[LabeledPair]) -> Vec<LabeledNliPair> {
        set.iter()
            .map(|p| {
                LabeledNliPair::new(
                    build_nli_pair_with(p.instance(), &state.definition, self.config.premise_tagging),
                    p.label(),
                )
            })
            .collect()
    }

    fn train(&self, state: &mut IterationState) -> Result<(), StepFailure> {
        let spec = TrainSpec {
            train: self.nli_pairs(state, &state.train),
            dev: self.nli_pairs(state, &state.dev),
            params: TrainParams {
                rng_seed: self.seed(state, "train"),
                ..self.config.train.clone()
            },
        };
        let report = self.services.backend.train(&spec)?;
        write_json(
            &self.run.iter_dir(&state.relation_id, state.iteration).join("report.json"),
            &report,
        )?;
        state.report = Some(report);
        state.stage = Stage::Trained;
        Ok(())
    }

    fn score(&self, state: &mut IterationState) -> Result<(), StepFailure> {
        let report = state.report.as_ref().expect("trained before scoring");
        let table = crate::feedback::score_corpus(
            self.services.backend,
            &report.model_handle,
            &state.definition,
            self.services.corpus,
            self.config.premise_tagging,
            state.iteration,
        )?;
        table.save(&self.run.iter_dir(&state.relation_id, state.iteration))?;
        state.score_table = Some(table);
        state.stage = Stage::Scored;
        Ok(())
    }
}

fn latest_stage(run: &RunDir, relation: &str) -> Result<Option<(u32, Stage)>, LoopError> {
    let mut k = 0;
    let mut found = None;
    loop {
        let path = run.iter_dir(relation, k + 1).join("stage.json");
        if !path.exists() {
            return Ok(found);
        }
        let sf: StageFile = read_json(&path)?;
        k += 1;
        found = Some((k, sf.stage));
    }
}

/// Rebuilds the latest consistent state of a relation from its checkpoints.
pub fn load_state(run: &RunDir, definition: &RelationDefinition) -> Result<IterationState, LoopError> {
    let rel = definition.id();
    let mut state = IterationState::new(definition.clone());
    let Some((k, stage)) = latest_stage(run, rel)? else {
        return Ok(state);
    };
    state.iteration = k;
    state.stage = stage;
    let sets_iter = if stage >= Stage::Synthesized { k } else { k - 1 };
    if sets_iter >= 1 {
        let dir = run.iter_dir(rel, sets_iter);
        state.train = read_pairs(&dir.join("trainset.jsonl"))?;
        state.dev = read_pairs(&dir.join("devset.jsonl"))?;
        state.negdefs = read_json(&dir.join("negdefs.json"))?;
        state.threads = SeedStyle::ALL
            .iter()
            .map(|s| read_json(&dir.join("threads").join(format!("pos-{s}.json"))))
            .collect::<Result<_, _>>()?;
        if state.threads.iter().zip(SeedStyle::ALL).any(|(t, s)| t.thread_id() != seed_thread_id(rel, s)) {
            return Err(LoopError::Corrupt {
                path: dir.join("threads"),
                message: "positive thread ids do not match the relation".into(),
            });
        }
    }
    let dir = run.iter_dir(rel, k);
    if k >= 2 && stage >= Stage::FeedbackSampled {
        state.feedback = Some(read_json(&dir.join("feedback.json"))?);
    }
    if stage >= Stage::Trained {
        state.report = Some(read_json(&dir.join("report.json"))?);
    }
    let table_iter = if stage == Stage::Scored { k } else { k - 1 };
    if table_iter >= 1 && (stage == Stage::Scored || stage == Stage::Started) {
        let tdir = run.iter_dir(rel, table_iter);
        state.score_table = Some(ScoreTable::load(&tdir).map_err(|e| LoopError::Corrupt {
            path: tdir.join(crate::feedback::SCORES_FILE),
            message: e.to_string(),
        })?);
    }
    Ok(state)
}

/// Collects per-iteration numbers from the checkpoints on disk.
pub fn summarize_relation(run: &RunDir, relation: &str) -> Result<RelationSummary, LoopError> {
    let mut iterations = Vec::new();
    let last = latest_stage(run, relation)?.map_or(0, |x| x.0);
    for k in 1..=last {
        let dir = run.iter_dir(relation, k);
        let stage: StageFile = read_json(&dir.join("stage.json"))?;
        if stage.stage != Stage::Scored {
            continue;
        }
        let train = read_pairs(&dir.join("trainset.jsonl"))?;
        let dev = read_pairs(&dir.join("devset.jsonl"))?;
        let negdefs: Vec<RelationDefinition> = read_json(&dir.join("negdefs.json"))?;
        let report: TrainReport = read_json(&dir.join("report.json"))?;
        let fb_path = dir.join("feedback.json");
        let feedback_groups = if fb_path.exists() {
            let fb: IterationFeedback = read_json(&fb_path)?;
            fb.positive_groups.iter().map(|g| g.instances.len()).collect()
        } else {
            Vec::new()
        };
        let meta: crate::feedback::ScoreTableMeta = read_json(&dir.join(crate::feedback::SCORES_META_FILE))?;
        let (tp, tn) = count_labels(&train);
        let (dp, dn) = count_labels(&dev);
        iterations.push(IterationSummary {
            iteration: k,
            train_positives: tp,
            train_negatives: tn,
            dev_positives: dp,
            dev_negatives: dn,
            negdefs: negdefs.len(),
            feedback_groups,
            selected_epoch: report.selected_epoch,
            dev_f1: report.selected().map_or(0.0, |r| r.dev.f1),
            scores_fingerprint: meta.table_fingerprint,
        });
    }
    Ok(RelationSummary {
        relation_id: relation.to_string(),
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub fingerprint: String,
    pub relations: BTreeMap<String, RelationSummary>,
    /// True when the run was already complete and nothing was executed.
    pub already_finished: bool,
}

fn prepare(run: &RunDir, config: &RunConfig, definitions: &[RelationDefinition]) -> Result<(), LoopError> {
    config.validate()?;
    let path = run.root.join(CONFIG_FILE);
    let provided = config.fingerprint();
    if path.exists() {
        let persisted: PersistedConfig = read_json(&path)?;
        if persisted.fingerprint != provided {
            return Err(LoopError::ConfigMismatch {
                persisted: persisted.fingerprint,
                provided,
            });
        }
    } else {
        write_json(
            &path,
            &PersistedConfig {
                fingerprint: provided,
                config: config.clone(),
                relations: definitions.iter().map(|d| d.id().to_string()).collect(),
            },
        )?;
    }
    for d in definitions {
        let p = run.relation_dir(d.id()).join("definition.json");
        if !p.exists() {
            write_json(&p, d)?;
        }
    }
    Ok(())
}

/// Runs (or continues) the loop for every relation; relations run in parallel on
/// the current rayon pool.
pub fn run_loop(
    run: &RunDir,
    config: &RunConfig,
    definitions: &[RelationDefinition],
    services: &Services<'_>,
) -> Result<RunOutcome, LoopError> {
    prepare(run, config, definitions)?;
    let mut seen = HashSet::new();
    if let Some(d) = definitions.iter().find(|d| !seen.insert(d.id())) {
        return Err(LoopError::InvalidConfig(format!("relation `{}` listed twice", d.id())));
    }
    let states: Vec<IterationState> = definitions
        .iter()
        .map(|d| load_state(run, d))
        .collect::<Result<_, _>>()?;
    let already_finished = states.iter().all(|s| s.is_finished(config.max_iterations));
    let summaries: Vec<RelationSummary> = states
        .into_par_iter()
        .map(|mut state| {
            let rl = RelationLoop::new(config, services, run, &state.relation_id);
            rl.run_to_end(&mut state)?;
            let summary = summarize_relation(run, &state.relation_id)?;
            write_json(&run.relation_dir(&state.relation_id).join("summary.json"), &summary)?;
            Ok(summary)
        })
        .collect::<Result<_, LoopError>>()?;
    Ok(RunOutcome {
        fingerprint: config.fingerprint(),
        relations: summaries.into_iter().map(|s| (s.relation_id.clone(), s)).collect(),
        already_finished,
    })
}

/// Persisted config and definitions of an existing run.
pub fn read_run(run: &RunDir) -> Result<(RunConfig, Vec<RelationDefinition>), LoopError> {
    let persisted: PersistedConfig = read_json(&run.root.join(CONFIG_FILE))?;
    if persisted.config.fingerprint() != persisted.fingerprint {
        return Err(LoopError::Corrupt {
            path: run.root.join(CONFIG_FILE),
            message: "fingerprint does not match the stored config".into(),
        });
    }
    let defs = persisted
        .relations
        .iter()
        .map(|r| read_json(&run.relation_dir(r).join("definition.json")))
        .collect::<Result<_, _>>()?;
    Ok((persisted.config, defs))
}

/// Continues a run from its checkpoints. A provided config must match the persisted one.
pub fn resume(run: &RunDir, provided: Option<&RunConfig>, services: &Services<'_>) -> Result<RunOutcome, LoopError> {
    let (config, defs) = read_run(run)?;
    if let Some(p) = provided {
        if p.fingerprint() != config.fingerprint() {
            return Err(LoopError::ConfigMismatch {
                persisted: config.fingerprint(),
                provided: p.fingerprint(),
            });
        }
    }
    run_loop(run, &config, &defs, services)
}

/// Latest trained model of every relation in a run, with its definition.
pub fn final_models(run: &RunDir) -> Result<Vec<(RelationDefinition, TrainReport)>, LoopError> {
    let (_, defs) = read_run(run)?;
    let mut out = Vec::with_capacity(defs.len());
    for d in defs {
        let Some((mut k, stage)) = latest_stage(run, d.id())? else {
            continue;
        };
        if stage < Stage::Trained {
            k -= 1;
        }
        if k == 0 {
            continue;
        }
        let report: TrainReport = read_json(&run.iter_dir(d.id(), k).join("report.json"))?;
        out.push((d, report));
    }
    Ok(out)
}

