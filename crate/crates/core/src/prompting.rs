//! Prompt templates and slot filling.
//!
//! Templates live in `templates/*.txt` and use `{slot_name}` markers. Filling is a
//! single pass over the template, so slot values are never re-scanned for markers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{RelationDefinition, RelationInstance, ENT0_OPEN, ENT1_OPEN};

/// Bumped whenever a template asset changes wording.
pub const TEMPLATE_VERSION: u32 = 1;

/// Block used when no feedback instances were sampled.
pub const NO_FEEDBACK_PLACEHOLDER: &str = "(no sampled predictions available)";

/// The three fixed definition demonstrations used for few-shot definition derivation.
pub const DERIVATION_DEMOS: [&str; 3] = [
    "<ENT1> is the league in which <ENT0> (team or player) plays or has played in.",
    "<ENT1> is the organization or person responsible for publishing <ENT0> (books, periodicals, printed music, podcasts, games or software).",
    "<ENT1> is the city, where <ENT0> (an organization)'s headquarters is or has been situated.",
];

const OPTION_LETTERS: &[u8; 26] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template {kind} needs slot `{slot}`")]
    MissingSlot { kind: PromptKind, slot: String },
    #[error("template {kind} has no slot `{slot}`")]
    UnknownSlot { kind: PromptKind, slot: String },
    #[error("follow-up prompt needs at least one feedback instance")]
    EmptyFeedback,
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("multi-choice prompt needs between 2 and 26 definitions, got {0}")]
    OptionCount(usize),
    #[error("few-shot derivation needs at least one instance")]
    EmptyFewshot,
    #[error("unknown prompt kind `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedStyle {
    Brief,
    Medium,
    Implicit,
}

impl SeedStyle {
    pub const ALL: [SeedStyle; 3] = [SeedStyle::Brief, SeedStyle::Medium, SeedStyle::Implicit];

    pub fn as_str(self) -> &'static str {
        match self {
            SeedStyle::Brief => "brief",
            SeedStyle::Medium => "medium",
            SeedStyle::Implicit => "implicit",
        }
    }
}

impl fmt::Display for SeedStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    InitialPosBrief,
    InitialPosMedium,
    InitialPosImplicit,
    FollowupPos,
    NegdefFirst,
    NegdefSubsequent,
    NegInstance,
    DefDerivation,
    BaselineBinary,
    BaselineQaBinary,
    BaselineQaMulti,
    Topup,
}

impl PromptKind {
    pub const ALL: [PromptKind; 12] = [
        PromptKind::InitialPosBrief,
        PromptKind::InitialPosMedium,
        PromptKind::InitialPosImplicit,
        PromptKind::FollowupPos,
        PromptKind::NegdefFirst,
        PromptKind::NegdefSubsequent,
        PromptKind::NegInstance,
        PromptKind::DefDerivation,
        PromptKind::BaselineBinary,
        PromptKind::BaselineQaBinary,
        PromptKind::BaselineQaMulti,
        PromptKind::Topup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::InitialPosBrief => "initial-pos-brief",
            PromptKind::InitialPosMedium => "initial-pos-medium",
            PromptKind::InitialPosImplicit => "initial-pos-implicit",
            PromptKind::FollowupPos => "followup-pos",
            PromptKind::NegdefFirst => "negdef-first",
            PromptKind::NegdefSubsequent => "negdef-subsequent",
            PromptKind::NegInstance => "neg-instance",
            PromptKind::DefDerivation => "def-derivation",
            PromptKind::BaselineBinary => "baseline-binary",
            PromptKind::BaselineQaBinary => "baseline-qa-binary",
            PromptKind::BaselineQaMulti => "baseline-qa-multi",
            PromptKind::Topup => "topup",
        }
    }

    pub fn for_style(style: SeedStyle) -> Self {
        match style {
            SeedStyle::Brief => PromptKind::InitialPosBrief,
            SeedStyle::Medium => PromptKind::InitialPosMedium,
            SeedStyle::Implicit => PromptKind::InitialPosImplicit,
        }
    }

    /// Raw template text, without its trailing newline.
    pub fn template(self) -> &'static str {
        let raw = match self {
            PromptKind::InitialPosBrief => include_str!("../templates/seed_brief.txt"),
            PromptKind::InitialPosMedium | PromptKind::NegInstance => include_str!("../templates/seed_medium.txt"),
            PromptKind::InitialPosImplicit => include_str!("../templates/seed_implicit.txt"),
            PromptKind::FollowupPos => include_str!("../templates/followup_positive.txt"),
            PromptKind::NegdefFirst => include_str!("../templates/negdef_first.txt"),
            PromptKind::NegdefSubsequent => include_str!("../templates/negdef_subsequent.txt"),
            PromptKind::DefDerivation => include_str!("../templates/def_derivation.txt"),
            PromptKind::BaselineBinary => include_str!("../templates/baseline_binary.txt"),
            PromptKind::BaselineQaBinary => include_str!("../templates/baseline_qa_binary.txt"),
            PromptKind::BaselineQaMulti => include_str!("../templates/baseline_qa_multi.txt"),
            PromptKind::Topup => include_str!("../templates/topup.txt"),
        };
        raw.strip_suffix('\n').unwrap_or(raw)
    }

    /// Slot names appearing in the template, in first-occurrence order.
    pub fn slots(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for seg in segments(self.template()) {
            if let Segment::Slot(name) = seg {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| PromptError::UnknownKind(s.to_string()))
    }
}

enum Segment<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn segments(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_slot_name(&after[..close]) => {
                if open > 0 {
                    out.push(Segment::Text(&rest[..open]));
                }
                out.push(Segment::Slot(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push(Segment::Text(&rest[..open + 1]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    out
}

/// A prompt kind plus its slot values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub kind: PromptKind,
    pub slots: BTreeMap<String, String>,
}

impl PromptRequest {
    pub fn new(kind: PromptKind) -> Self {
        PromptRequest {
            kind,
            slots: BTreeMap::new(),
        }
    }

    pub fn slot(mut self, name: &str, value: impl Into<String>) -> Self {
        self.slots.insert(name.to_string(), value.into());
        self
    }

    /// Fills every slot in one pass. Missing or unknown slots are errors.
    pub fn render(&self) -> Result<String, PromptError> {
        let known = self.kind.slots();
        if let Some(extra) = self.slots.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(PromptError::UnknownSlot {
                kind: self.kind,
                slot: extra.clone(),
            });
        }
        let mut out = String::new();
        for seg in segments(self.kind.template()) {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(name) => match self.slots.get(name) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(PromptError::MissingSlot {
                            kind: self.kind,
                            slot: name.to_string(),
                        })
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Numbered block, one item per line: `1. first\n2. second`.
pub fn numbered_block<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Feedback block in canonical tagged form, or the no-feedback placeholder.
pub fn feedback_block(feedback: &[RelationInstance]) -> String {
    if feedback.is_empty() {
        NO_FEEDBACK_PLACEHOLDER.to_string()
    } else {
        numbered_block(&feedback.iter().map(RelationInstance::tagged_text).collect::<Vec<_>>())
    }
}

/// Replaces `<ENT0>`/`<ENT1>` with the mentions in a single left-to-right pass.
pub fn substitute_definition(definition: &RelationDefinition, head_mention: &str, tail_mention: &str) -> String {
    let template = definition.template();
    let mut out = String::with_capacity(template.len() + head_mention.len() + tail_mention.len());
    let mut rest = template;
    loop {
        let next = [(ENT0_OPEN, head_mention), (ENT1_OPEN, tail_mention)]
            .into_iter()
            .filter_map(|(p, m)| rest.find(p).map(|pos| (pos, p, m)))
            .min_by_key(|x| x.0);
        match next {
            Some((pos, p, m)) => {
                out.push_str(&rest[..pos]);
                out.push_str(m);
                rest = &rest[pos + p.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

pub fn seed_request(definition: &RelationDefinition, n: usize, style: SeedStyle) -> Result<PromptRequest, PromptError> {
    if n == 0 {
        return Err(PromptError::ZeroCount("number of examples"));
    }
    Ok(PromptRequest::new(PromptKind::for_style(style))
        .slot("relation_definition", definition.template())
        .slot("number_of_examples", n.to_string()))
}

pub fn render_seed_prompt(definition: &RelationDefinition, n: usize, style: SeedStyle) -> Result<String, PromptError> {
    seed_request(definition, n, style)?.render()
}

/// Medium-style instance prompt for a negative definition.
pub fn render_negative_instance_prompt(negdef: &RelationDefinition, n: usize) -> Result<String, PromptError> {
    if n == 0 {
        return Err(PromptError::ZeroCount("number of examples"));
    }
    PromptRequest::new(PromptKind::NegInstance)
        .slot("relation_definition", negdef.template())
        .slot("number_of_examples", n.to_string())
        .render()
}

/// Follow-up positive prompt. `feedback` must be non-empty; use
/// [`render_followup_positive_prompt_or_placeholder`] when sampling may come back empty.
pub fn render_followup_positive_prompt(
    definition: &RelationDefinition,
    n: usize,
    feedback: &[String],
) -> Result<String, PromptError> {
    if feedback.is_empty() {
        return Err(PromptError::EmptyFeedback);
    }
    followup_request(definition, n, numbered_block(feedback))?.render()
}

pub fn render_followup_positive_prompt_or_placeholder(
    definition: &RelationDefinition,
    n: usize,
    feedback: &[RelationInstance],
) -> Result<String, PromptError> {
    followup_request(definition, n, feedback_block(feedback))?.render()
}

fn followup_request(definition: &RelationDefinition, n: usize, block: String) -> Result<PromptRequest, PromptError> {
    if n == 0 {
        return Err(PromptError::ZeroCount("number of examples"));
    }
    Ok(PromptRequest::new(PromptKind::FollowupPos)
        .slot("feedback_examples", block)
        .slot("number_of_examples", n.to_string())
        .slot("relation_definition", definition.template()))
}

/// Negative-definition prompt; the "existing definitions" form is used when
/// `previous_negdefs` is non-empty.
pub fn render_negdef_prompt(
    definition: &RelationDefinition,
    feedback: &[RelationInstance],
    n_neg_rels: usize,
    previous_negdefs: Option<&[RelationDefinition]>,
) -> Result<String, PromptError> {
    if n_neg_rels == 0 {
        return Err(PromptError::ZeroCount("number of negative relations"));
    }
    let base = |kind| {
        PromptRequest::new(kind)
            .slot("positive_relation_definition", definition.template())
            .slot("feedback_examples", feedback_block(feedback))
            .slot("number_of_negative_relations", n_neg_rels.to_string())
    };
    match previous_negdefs {
        Some(prev) if !prev.is_empty() => {
            let listed: Vec<&str> = prev.iter().map(RelationDefinition::template).collect();
            base(PromptKind::NegdefSubsequent)
                .slot("previously_generated_negative_relation_definitions", numbered_block(&listed))
                .render()
        }
        _ => base(PromptKind::NegdefFirst).render(),
    }
}

pub fn render_definition_derivation_prompt(
    fewshot_tagged: &[String],
    demo_definitions: &[&str; 3],
) -> Result<String, PromptError> {
    if fewshot_tagged.is_empty() {
        return Err(PromptError::EmptyFewshot);
    }
    PromptRequest::new(PromptKind::DefDerivation)
        .slot("demo_definition_1", demo_definitions[0])
        .slot("demo_definition_2", demo_definitions[1])
        .slot("demo_definition_3", demo_definitions[2])
        .slot("fewshot_instances", numbered_block(fewshot_tagged))
        .render()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    BinaryChoice,
    QaBinary,
    QaMulti,
}

/// A labeled demonstration placed before the query instance.
#[derive(Debug, Clone)]
pub struct IclExemplar {
    pub instance: RelationInstance,
    pub positive: bool,
}

fn option_answer(positive: bool) -> &'static str {
    if positive {
        "Option 1: Yes"
    } else {
        "Option 2: No"
    }
}

fn icl_block(kind: BaselineKind, definition: &RelationDefinition, exemplars: &[IclExemplar]) -> String {
    let mut out = String::new();
    for ex in exemplars {
        match kind {
            BaselineKind::BinaryChoice => {
                out.push_str(&format!(
                    "Example instance: \"{}\", answer: {}. ",
                    ex.instance.tagged_text(),
                    option_answer(ex.positive)
                ));
            }
            BaselineKind::QaBinary | BaselineKind::QaMulti => {
                out.push_str(&format!(
                    "Instance: {}\nQuestion: is the following statement true based on the instance: {}\nAnswer: {}\n\n",
                    ex.instance.tagged_text(),
                    substitute_definition(definition, &ex.instance.head().mention, &ex.instance.tail().mention),
                    option_answer(ex.positive)
                ));
            }
        }
    }
    out
}

/// LLM baseline prompt for one instance.
///
/// `definitions` holds the single target definition for the binary kinds and every
/// candidate (2..=26) for `QaMulti`.
pub fn render_baseline_prompt(
    kind: BaselineKind,
    definitions: &[RelationDefinition],
    instance: &RelationInstance,
    icl_exemplars: Option<&[IclExemplar]>,
) -> Result<String, PromptError> {
    let head = &instance.head().mention;
    let tail = &instance.tail().mention;
    match kind {
        BaselineKind::BinaryChoice | BaselineKind::QaBinary => {
            let def = definitions.first().ok_or(PromptError::OptionCount(0))?;
            let icl = icl_block(kind, def, icl_exemplars.unwrap_or(&[]));
            let req = if kind == BaselineKind::BinaryChoice {
                PromptRequest::new(PromptKind::BaselineBinary)
            } else {
                PromptRequest::new(PromptKind::BaselineQaBinary)
                    .slot("relation_definition_filled_with_instance_entities", substitute_definition(def, head, tail))
            };
            req.slot("relation_definition", def.template())
                .slot("icl_examples", icl)
                .slot("instance_sentence_with_entities_enclosed_by_tags", instance.tagged_text())
                .render()
        }
        BaselineKind::QaMulti => {
            if definitions.len() < 2 || definitions.len() > OPTION_LETTERS.len() {
                return Err(PromptError::OptionCount(definitions.len()));
            }
            let options: Vec<String> = definitions
                .iter()
                .zip(OPTION_LETTERS.iter())
                .map(|(d, &l)| format!("{}. {}", l as char, substitute_definition(d, head, tail)))
                .collect();
            let last = OPTION_LETTERS[definitions.len() - 1] as char;
            PromptRequest::new(PromptKind::BaselineQaMulti)
                .slot("instance_sentence", instance.sentence())
                .slot("options", options.join("\n"))
                .slot("last_option_letter", last.to_string())
                .render()
        }
    }
}

/// Repair turn asking for the shortfall after a partially unusable completion.
pub fn render_topup_prompt(definition: &RelationDefinition, valid: usize, missing: usize) -> Result<String, PromptError> {
    if missing == 0 {
        return Err(PromptError::ZeroCount("number of examples"));
    }
    PromptRequest::new(PromptKind::Topup)
        .slot("number_of_valid_examples", valid.to_string())
        .slot("number_of_examples", missing.to_string())
        .slot("relation_definition", definition.template())
        .render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EntitySpan, InstanceSource};

    fn p241() -> RelationDefinition {
        RelationDefinition::positive(
            "P241",
            "<ENT1> was/is the military branch to which <ENT0> (a military unit, award, office, or person) belonged/belongs",
        )
        .unwrap()
    }

    fn p40() -> RelationDefinition {
        RelationDefinition::positive("P40", "<ENT1> was/is the child (not stepchild) of <ENT0>").unwrap()
    }

    #[test]
    fn seed_prompt_styles() {
        let brief = render_seed_prompt(&p241(), 5, SeedStyle::Brief).unwrap();
        assert!(brief.contains("defined by \"<ENT1> was/is the military branch"));
        assert!(brief.contains("generate 5 examples (numbered from 1 to 5)"));
        assert!(brief.ends_with("Try as many different relation patterns or relation expressions as possible."));
        assert!(!brief.contains("implicit or complicated"));
        let one = render_seed_prompt(&p241(), 1, SeedStyle::Medium).unwrap();
        assert!(one.contains("numbered from 1 to 1"));
        assert!(one.contains("2. Generate rich and informative"));
        let imp = render_seed_prompt(&p241(), 5, SeedStyle::Implicit).unwrap();
        assert!(imp.contains("3. The relation patterns or relation expressions should be implicit or complicated"));
        assert!(render_seed_prompt(&p241(), 0, SeedStyle::Brief).is_err());
    }

    #[test]
    fn followup_prompt() {
        let fb: Vec<String> = (1..=10).map(|i| format!("<ENT0> a{i} </ENT0> x <ENT1> b </ENT1>")).collect();
        let p = render_followup_positive_prompt(&p241(), 5, &fb).unwrap();
        assert!(p.contains("1. <ENT0> a1 </ENT0>"));
        assert!(p.contains("10. <ENT0> a10 </ENT0>"));
        assert!(p.contains("If the sampled predicted examples are uninformative"));
        let p15 = render_followup_positive_prompt(&p241(), 15, &fb).unwrap();
        assert!(p15.contains("numbered from 1 to 15"));
        assert_eq!(render_followup_positive_prompt(&p241(), 5, &[]), Err(PromptError::EmptyFeedback));
        let ph = render_followup_positive_prompt_or_placeholder(&p241(), 5, &[]).unwrap();
        assert!(ph.contains(NO_FEEDBACK_PLACEHOLDER));
    }

    #[test]
    fn negdef_prompt_forms() {
        let first = render_negdef_prompt(&p40(), &[], 5, None).unwrap();
        assert!(first.contains("generate 5 negative binary relation definitions"));
        assert!(!first.contains("Existing generated negative relation definitions are"));
        assert_eq!(render_negdef_prompt(&p40(), &[], 5, Some(&[])).unwrap(), first);
        let prev: Vec<RelationDefinition> = (0..5)
            .map(|i| {
                RelationDefinition::new(
                    format!("N{i}"),
                    format!("<ENT1> is relative {i} of <ENT0>"),
                    crate::types::Polarity::Negative,
                    crate::types::DefinitionOrigin::LlmGeneratedNegative,
                )
                .unwrap()
            })
            .collect();
        let later = render_negdef_prompt(&p40(), &[], 5, Some(&prev)).unwrap();
        assert!(later.contains("Existing generated negative relation definitions are:\n\n1. <ENT1> is relative 0 of <ENT0>"));
        assert!(later.contains("generate 5 additional negative binary relation definitions"));
        assert!(later.contains("should not be the same as existing negative relation definitions"));
    }

    #[test]
    fn substitution_is_single_pass() {
        assert_eq!(
            substitute_definition(&p40(), "Francis Ford Coppola", "Sofia Coppola"),
            "Sofia Coppola was/is the child (not stepchild) of Francis Ford Coppola"
        );
        let d = RelationDefinition::positive("t", "<ENT0> x <ENT1>").unwrap();
        assert_eq!(substitute_definition(&d, "a", "b"), "a x b");
        assert_eq!(substitute_definition(&d, "<ENT1>", "b"), "<ENT1> x b");
    }

    #[test]
    fn slot_values_are_not_rescanned() {
        let d = RelationDefinition::positive("t", "<ENT0> {number_of_examples} <ENT1>").unwrap();
        let p = render_seed_prompt(&d, 3, SeedStyle::Brief).unwrap();
        assert!(p.contains("\"<ENT0> {number_of_examples} <ENT1>\""));
    }

    #[test]
    fn request_slot_checks() {
        let r = PromptRequest::new(PromptKind::InitialPosBrief).slot("relation_definition", "x");
        assert!(matches!(r.render(), Err(PromptError::MissingSlot { .. })));
        let r = r.slot("number_of_examples", "1").slot("bogus", "y");
        assert!(matches!(r.render(), Err(PromptError::UnknownSlot { .. })));
        assert_eq!("negdef-first".parse::<PromptKind>().unwrap(), PromptKind::NegdefFirst);
        for k in PromptKind::ALL {
            assert!(!k.slots().is_empty(), "{k}");
        }
    }

    fn coppola() -> RelationInstance {
        let s = "Sofia Coppola was born in New York City , New York , the youngest child and only daughter of set decorator / artist Eleanor Coppola ( née Neil ) and director Francis Ford Coppola .";
        let (h, t) = ("Francis Ford Coppola", "Eleanor Coppola");
        let hs = s.find(h).unwrap();
        let ts = s.find(t).unwrap();
        let cs = |b: usize| s[..b].chars().count();
        RelationInstance::new(
            "c",
            s,
            EntitySpan::new(h, cs(hs), cs(hs) + h.chars().count()),
            EntitySpan::new(t, cs(ts), cs(ts) + t.chars().count()),
            InstanceSource::GoldTest,
            None,
        )
        .unwrap()
    }

    #[test]
    fn baseline_prompts() {
        let inst = coppola();
        let qa = render_baseline_prompt(BaselineKind::QaBinary, &[p40()], &inst, None).unwrap();
        assert!(qa.contains(
            "Question: is the following statement true based on the instance: Eleanor Coppola was/is the child (not stepchild) of Francis Ford Coppola"
        ));
        let bc = render_baseline_prompt(BaselineKind::BinaryChoice, &[p40()], &inst, None).unwrap();
        assert!(bc.ends_with("Option 1: Yes\nOption 2: No\n\nAnswer:"));
        let defs: Vec<RelationDefinition> = (0..14)
            .map(|i| RelationDefinition::positive(format!("R{i}"), format!("<ENT0> r{i} <ENT1>")).unwrap())
            .collect();
        let multi = render_baseline_prompt(BaselineKind::QaMulti, &defs, &inst, None).unwrap();
        assert!(multi.contains("\nA. Francis Ford Coppola r0 Eleanor Coppola\n"));
        assert!(multi.contains("\nN. Francis Ford Coppola r13 Eleanor Coppola\n"));
        assert!(multi.ends_with("Respond with one letter from \"A\"-\"N\"."));
        let many: Vec<RelationDefinition> = (0..27)
            .map(|i| RelationDefinition::positive(format!("R{i}"), "<ENT0> r <ENT1>").unwrap())
            .collect();
        assert_eq!(
            render_baseline_prompt(BaselineKind::QaMulti, &many, &inst, None),
            Err(PromptError::OptionCount(27))
        );
        let ex = vec![
            IclExemplar { instance: inst.clone(), positive: true },
            IclExemplar { instance: inst.clone(), positive: true },
            IclExemplar { instance: inst.clone(), positive: false },
            IclExemplar { instance: inst.clone(), positive: false },
        ];
        let with_icl = render_baseline_prompt(BaselineKind::QaBinary, &[p40()], &inst, Some(&ex)).unwrap();
        assert_eq!(with_icl.matches("Instance: ").count(), 5);
        assert!(with_icl.find("Answer: Option 2: No").unwrap() < with_icl.find("Now answer:").unwrap());
    }

    #[test]
    fn derivation_prompt() {
        let shots = vec!["<ENT0>Pierre Maudru</ENT0> was a French <ENT1>screenwriter</ENT1> .".to_string()];
        let p = render_definition_derivation_prompt(&shots, &DERIVATION_DEMOS).unwrap();
        assert!(p.contains("1. <ENT1> is the league in which <ENT0> (team or player) plays or has played in."));
        assert!(p.ends_with("The list of relation instances/examples is:\n\n1. <ENT0>Pierre Maudru</ENT0> was a French <ENT1>screenwriter</ENT1> ."));
        assert_eq!(render_definition_derivation_prompt(&[], &DERIVATION_DEMOS), Err(PromptError::EmptyFewshot));
    }
}
