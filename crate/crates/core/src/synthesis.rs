//! Parsing LLM completions and orchestrating instance / definition generation.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{sample_negatives, CorpusError, CorpusStore};
use crate::llm::{ChatParams, DialogueThread, LlmClient, LlmError};
use crate::prompting::{self, PromptError, PromptKind, SeedStyle};
use crate::types::{
    parse_tagged_text, DedupKey, DefinitionOrigin, InstanceSource, Polarity, RelationDefinition, RelationInstance,
    SeedSet, TagError,
};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("no usable negative relation definition in completion ({rejected} items rejected)")]
    NoDefinitions { rejected: usize },
    #[error("could not derive a definition with both placeholders from the completion")]
    NoDerivedDefinition,
    #[error("expected {expected} dialogue threads, got {got}")]
    ThreadCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    MissingTag,
    DuplicateTag,
    Overlap,
    EmptyMention,
    NoOrdinal,
    /// Same (sentence, head, tail) as an instance already accepted for this relation.
    Duplicate,
}

impl From<TagError> for FailureReason {
    fn from(e: TagError) -> Self {
        match e {
            TagError::MissingTag => FailureReason::MissingTag,
            TagError::DuplicateTag => FailureReason::DuplicateTag,
            TagError::Overlap => FailureReason::Overlap,
            TagError::EmptyMention => FailureReason::EmptyMention,
        }
    }
}

/// One numbered item of a completion and what became of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedItem {
    pub ordinal: u32,
    pub raw: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parsed: Option<RelationInstance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<FailureReason>,
}

impl ParsedItem {
    fn ok(ordinal: u32, raw: String, inst: RelationInstance) -> Self {
        ParsedItem {
            ordinal,
            raw,
            parsed: Some(inst),
            failure_reason: None,
        }
    }

    fn failed(ordinal: u32, raw: String, reason: FailureReason) -> Self {
        ParsedItem {
            ordinal,
            raw,
            parsed: None,
            failure_reason: Some(reason),
        }
    }
}

/// Log of one generation request on one thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub relation_id: String,
    pub iteration: u32,
    pub thread_id: String,
    pub prompt_kind: PromptKind,
    pub requested: usize,
    pub accepted: Vec<RelationInstance>,
    pub rejected: Vec<ParsedItem>,
    /// Valid items beyond the request, dropped.
    pub surplus: usize,
    pub turns: usize,
}

impl SynthesisRecord {
    pub fn save(&self, dir: &Path, name: &str) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(self).expect("serializable"))
    }
}

fn ordinal_prefix(line: &str) -> Option<(u32, &str)> {
    let t = line.trim_start().trim_start_matches(['*', '#']).trim_start();
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || digits > 3 {
        return None;
    }
    let rest = &t[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    let rest = rest.trim_start_matches('*');
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    Some((t[..digits].parse().ok()?, rest.trim()))
}

/// Splits a completion into `(ordinal, body)` pairs.
///
/// An item starts at a line beginning with `N.` or `N)` and continues over the
/// following non-blank lines; a blank line ends it. Text before the first item and
/// unnumbered paragraphs after a blank line are dropped.
pub fn parse_numbered_items(completion: &str) -> Vec<(u32, String)> {
    let mut items: Vec<(u32, String)> = Vec::new();
    let mut open = false;
    for line in completion.lines() {
        if let Some((n, body)) = ordinal_prefix(line) {
            items.push((n, body.to_string()));
            open = true;
        } else if line.trim().is_empty() {
            open = false;
        } else if open {
            let body = &mut items.last_mut().expect("open item").1;
            if !body.is_empty() {
                body.push(' ');
            }
            body.push_str(line.trim());
        }
    }
    items
}

fn strip_wrapping(body: &str) -> &str {
    let b = body.trim();
    for (open, close) in [("\"", "\""), ("“", "”"), ("**", "**")] {
        if b.len() > open.len() + close.len() && b.starts_with(open) && b.ends_with(close) {
            return b[open.len()..b.len() - close.len()].trim();
        }
    }
    b
}

/// Parses one tagged item body into an instance with a content-derived id.
pub fn parse_instance_item(
    body: &str,
    id_prefix: &str,
    relation: Option<&str>,
) -> Result<RelationInstance, FailureReason> {
    let (sentence, head, tail) = parse_tagged_text(strip_wrapping(body))?;
    RelationInstance::with_content_id(
        id_prefix,
        sentence,
        head,
        tail,
        InstanceSource::LlmGenerated,
        relation.map(str::to_string),
    )
    .map_err(|_| FailureReason::EmptyMention)
}

/// Parses every item of a completion. A completion without numbered items yields
/// a single `no-ordinal` failure.
pub fn parse_instance_items(completion: &str, id_prefix: &str, relation: Option<&str>) -> Vec<ParsedItem> {
    let items = parse_numbered_items(completion);
    if items.is_empty() {
        if completion.trim().is_empty() {
            return Vec::new();
        }
        return vec![ParsedItem::failed(0, completion.trim().to_string(), FailureReason::NoOrdinal)];
    }
    items
        .into_iter()
        .map(|(n, body)| match parse_instance_item(&body, id_prefix, relation) {
            Ok(i) => ParsedItem::ok(n, body, i),
            Err(r) => ParsedItem::failed(n, body, r),
        })
        .collect()
}

/// A numbered item rejected while reading definitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedDefinition {
    pub ordinal: u32,
    pub raw: String,
    pub reason: String,
}

/// Reads numbered negative definitions. Ids are `<id_prefix><k>` for k = 1, 2, ...
pub fn parse_definition_items(
    completion: &str,
    id_prefix: &str,
) -> Result<(Vec<RelationDefinition>, Vec<RejectedDefinition>), SynthesisError> {
    let mut defs = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = HashSet::new();
    for (n, body) in parse_numbered_items(completion) {
        let text = strip_wrapping(&body).to_string();
        if !seen.insert(text.clone()) {
            rejected.push(RejectedDefinition {
                ordinal: n,
                raw: body,
                reason: "duplicate definition".into(),
            });
            continue;
        }
        match RelationDefinition::new(
            format!("{id_prefix}{}", defs.len() + 1),
            text,
            Polarity::Negative,
            DefinitionOrigin::LlmGeneratedNegative,
        ) {
            Ok(d) => defs.push(d),
            Err(e) => {
                log::info!("rejected definition item {n}: {e}");
                rejected.push(RejectedDefinition {
                    ordinal: n,
                    raw: body,
                    reason: e.to_string(),
                });
            }
        }
    }
    if defs.is_empty() {
        return Err(SynthesisError::NoDefinitions {
            rejected: rejected.len(),
        });
    }
    Ok((defs, rejected))
}

/// Splits `total` as evenly as possible over `parts`, earlier parts taking the remainder.
pub fn split_evenly(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub positives: usize,
    pub negatives: usize,
    pub max_topup_turns: usize,
    pub params: ChatParams,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            positives: 15,
            negatives: 15,
            max_topup_turns: 2,
            params: ChatParams::default(),
        }
    }
}

/// Dedup triples already claimed by this relation's run.
#[derive(Debug, Clone, Default)]
pub struct KnownInstances {
    keys: HashSet<DedupKey>,
    ids: HashSet<String>,
}

impl KnownInstances {
    pub fn insert(&mut self, inst: &RelationInstance) -> bool {
        let fresh = self.keys.insert(inst.dedup_key());
        if fresh {
            self.ids.insert(inst.id().to_string());
        }
        fresh
    }

    pub fn contains(&self, inst: &RelationInstance) -> bool {
        self.keys.contains(&inst.dedup_key())
    }

    pub fn ids(&self) -> &HashSet<String> {
        &self.ids
    }

    pub fn extend<'a>(&mut self, it: impl IntoIterator<Item = &'a RelationInstance>) {
        for i in it {
            self.insert(i);
        }
    }
}

/// Everything one generation turn needs besides the thread.
pub struct Generation<'a> {
    pub llm: &'a LlmClient,
    pub params: &'a ChatParams,
    pub relation_id: &'a str,
    pub iteration: u32,
    pub max_topup_turns: usize,
}

impl Generation<'_> {
    /// Sends `prompt` on `thread`, then up to `max_topup_turns` repair turns until
    /// `requested` new valid instances are collected. Valid items past the request
    /// are counted as surplus and dropped.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        thread: &mut DialogueThread,
        prompt: &str,
        kind: PromptKind,
        definition: &RelationDefinition,
        requested: usize,
        id_prefix: &str,
        label_relation: Option<&str>,
        known: &mut KnownInstances,
    ) -> Result<SynthesisRecord, SynthesisError> {
        let mut record = SynthesisRecord {
            relation_id: self.relation_id.to_string(),
            iteration: self.iteration,
            thread_id: thread.thread_id().to_string(),
            prompt_kind: kind,
            requested,
            accepted: Vec::new(),
            rejected: Vec::new(),
            surplus: 0,
            turns: 0,
        };
        let mut message = prompt.to_string();
        loop {
            let reply = self.llm.chat(thread, &message, self.params)?;
            record.turns += 1;
            for item in parse_instance_items(&reply, id_prefix, label_relation) {
                match item.parsed {
                    Some(ref inst) if record.accepted.len() >= requested => {
                        if !known.contains(inst) {
                            record.surplus += 1;
                        }
                    }
                    Some(ref inst) => {
                        if known.insert(inst) {
                            record.accepted.push(inst.clone());
                        } else {
                            record.rejected.push(ParsedItem::failed(item.ordinal, item.raw, FailureReason::Duplicate));
                        }
                    }
                    None => record.rejected.push(item),
                }
            }
            let have = record.accepted.len();
            if have >= requested || record.turns > self.max_topup_turns {
                break;
            }
            message = prompting::render_topup_prompt(definition, have, requested - have)?;
        }
        if record.accepted.len() < requested {
            log::warn!(
                "thread {}: accepted {}/{} after {} turns",
                record.thread_id,
                record.accepted.len(),
                requested,
                record.turns
            );
        }
        Ok(record)
    }
}

pub fn seed_thread_id(relation_id: &str, style: SeedStyle) -> String {
    format!("{relation_id}/{style}")
}

/// Result of the initial seeding round.
#[derive(Debug, Clone)]
pub struct InitialSeeds {
    pub train: SeedSet,
    pub dev: SeedSet,
    /// Brief, medium, implicit threads with their seed turns.
    pub threads: Vec<DialogueThread>,
    pub records: Vec<SynthesisRecord>,
    pub warnings: Vec<String>,
}

/// Three styled positive threads plus corpus-sampled negatives, for train and dev.
///
/// Dev positives come from re-issuing the same prompts on fresh throwaway threads;
/// dev negatives are sampled disjointly from the train negatives.
pub fn synthesize_initial_seeds(
    definition: &RelationDefinition,
    config: &SynthesisConfig,
    corpus: &CorpusStore,
    llm: &LlmClient,
    known: &mut KnownInstances,
    rng_seed: u64,
) -> Result<InitialSeeds, SynthesisError> {
    let rel = definition.id();
    let gen = Generation {
        llm,
        params: &config.params,
        relation_id: rel,
        iteration: 1,
        max_topup_turns: config.max_topup_turns,
    };
    let mut train = SeedSet::new(config.positives, config.negatives);
    let mut dev = SeedSet::new(config.positives, config.negatives);
    let mut threads = Vec::with_capacity(3);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let prefix = format!("{rel}-gen");

    // Check corpus supply before spending any LLM calls.
    let available = corpus.instances().iter().filter(|i| !known.ids().contains(i.id())).count();
    if available < 2 * config.negatives {
        return Err(CorpusError::Insufficient {
            requested: 2 * config.negatives,
            available,
        }
        .into());
    }

    for (style, n) in SeedStyle::ALL.into_iter().zip(split_evenly(config.positives, 3)) {
        let mut thread = DialogueThread::new(seed_thread_id(rel, style), Some(style));
        if n == 0 {
            threads.push(thread);
            continue;
        }
        let prompt = prompting::render_seed_prompt(definition, n, style)?;
        let kind = PromptKind::for_style(style);
        let rec = gen.generate(&mut thread, &prompt, kind, definition, n, &prefix, Some(rel), known)?;
        for i in &rec.accepted {
            train.push_positive(i.clone());
        }
        records.push(rec);
        threads.push(thread);

        let mut dev_thread = DialogueThread::new(format!("{rel}/dev/iter1/{style}"), Some(style));
        let rec = gen.generate(&mut dev_thread, &prompt, kind, definition, n, &prefix, Some(rel), known)?;
        for i in &rec.accepted {
            dev.push_positive(i.clone());
        }
        records.push(rec);
    }

    for inst in sample_negatives(corpus, config.negatives, rng_seed, known.ids())? {
        known.insert(&inst);
        train.push_negative(inst);
    }
    for inst in sample_negatives(corpus, config.negatives, rng_seed.wrapping_add(1), known.ids())? {
        known.insert(&inst);
        dev.push_negative(inst);
    }
    for (name, set) in [("train", &train), ("dev", &dev)] {
        if !set.is_complete() {
            warnings.push(format!(
                "{name} seed set is partial: {} of {} positives",
                set.positives().len(),
                config.positives
            ));
        }
    }
    Ok(InitialSeeds {
        train,
        dev,
        threads,
        records,
        warnings,
    })
}

/// Sends one follow-up positive turn per thread, each with its own feedback group.
pub fn synthesize_followup_positives(
    gen: &Generation<'_>,
    threads: &mut [DialogueThread],
    definition: &RelationDefinition,
    feedback_groups: &[Vec<RelationInstance>],
    n_total: usize,
    known: &mut KnownInstances,
) -> Result<(Vec<RelationInstance>, Vec<SynthesisRecord>), SynthesisError> {
    let mut out = Vec::new();
    let mut records = Vec::new();
    let prefix = format!("{}-gen", definition.id());
    let counts = split_evenly(n_total, threads.len());
    for (i, (thread, n)) in threads.iter_mut().zip(counts).enumerate() {
        if n == 0 {
            continue;
        }
        let group = feedback_groups.get(i).map(Vec::as_slice).unwrap_or(&[]);
        let prompt = prompting::render_followup_positive_prompt_or_placeholder(definition, n, group)?;
        let rec = gen.generate(
            thread,
            &prompt,
            PromptKind::FollowupPos,
            definition,
            n,
            &prefix,
            Some(definition.id()),
            known,
        )?;
        out.extend(rec.accepted.iter().cloned());
        records.push(rec);
    }
    Ok((out, records))
}

/// Negative definitions generated from feedback, and negative instances generated
/// from them round-robin.
#[derive(Debug, Clone)]
pub struct NegativeSynthesis {
    pub definitions: Vec<RelationDefinition>,
    pub instances: Vec<RelationInstance>,
    pub records: Vec<SynthesisRecord>,
    pub negdef_thread: DialogueThread,
    pub instance_threads: Vec<DialogueThread>,
    pub rejected_definitions: Vec<RejectedDefinition>,
}

pub fn synthesize_negatives(
    gen: &Generation<'_>,
    definition: &RelationDefinition,
    feedback: &[RelationInstance],
    previous_negdefs: &[RelationDefinition],
    n_defs: usize,
    n_instances: usize,
    known: &mut KnownInstances,
) -> Result<NegativeSynthesis, SynthesisError> {
    let rel = definition.id();
    let k = gen.iteration;
    let prompt = prompting::render_negdef_prompt(definition, feedback, n_defs, Some(previous_negdefs))?;
    let mut negdef_thread = DialogueThread::new(format!("{rel}/iter{k}/negdef"), None);
    let reply = gen.llm.chat(&mut negdef_thread, &prompt, gen.params)?;
    let id_prefix = format!("{rel}-neg{}-", k);
    let (mut defs, rejected_definitions) = parse_definition_items(&reply, &id_prefix)?;
    defs.truncate(n_defs);

    let mut instances = Vec::new();
    let mut records = Vec::new();
    let mut instance_threads = Vec::new();
    for (j, (negdef, n)) in defs.iter().zip(split_evenly(n_instances, defs.len())).enumerate() {
        if n == 0 {
            continue;
        }
        let mut thread = DialogueThread::new(format!("{rel}/iter{k}/neg/{}", j + 1), Some(SeedStyle::Medium));
        let prompt = prompting::render_negative_instance_prompt(negdef, n)?;
        let rec = gen.generate(
            &mut thread,
            &prompt,
            PromptKind::NegInstance,
            negdef,
            n,
            &format!("{rel}-neg"),
            Some(negdef.id()),
            known,
        )?;
        instances.extend(rec.accepted.iter().cloned());
        records.push(rec);
        instance_threads.push(thread);
    }
    Ok(NegativeSynthesis {
        definitions: defs,
        instances,
        records,
        negdef_thread,
        instance_threads,
        rejected_definitions,
    })
}

/// Extracts a single definition sentence with both placeholders from a reply.
pub fn parse_derived_definition(reply: &str, relation_id: &str) -> Result<RelationDefinition, SynthesisError> {
    let candidates = reply
        .lines()
        .map(|l| ordinal_prefix(l).map(|(_, b)| b).unwrap_or(l))
        .map(strip_wrapping)
        .map(|l| l.trim_start_matches("Relation definition:").trim_start_matches("Definition:").trim());
    for c in candidates {
        if let Ok(d) = RelationDefinition::new(relation_id, c, Polarity::Positive, DefinitionOrigin::DerivedFromFewshot) {
            return Ok(d);
        }
    }
    Err(SynthesisError::NoDerivedDefinition)
}

/// Asks the LLM to derive a definition from few-shot instances.
pub fn derive_definition(
    llm: &LlmClient,
    params: &ChatParams,
    relation_id: &str,
    fewshot: &[RelationInstance],
) -> Result<RelationDefinition, SynthesisError> {
    let shots: Vec<String> = fewshot.iter().map(RelationInstance::tagged_text).collect();
    let prompt = prompting::render_definition_derivation_prompt(&shots, &prompting::DERIVATION_DEMOS)?;
    let mut thread = DialogueThread::new(format!("{relation_id}/derive"), None);
    let reply = llm.chat(&mut thread, &prompt, params)?;
    parse_derived_definition(&reply, relation_id)
}
