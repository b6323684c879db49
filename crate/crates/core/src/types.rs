//! Domain types shared by every stage of the pipeline.
//!
//! Offsets inside [`EntitySpan`] count Unicode scalar values, not bytes.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENT0_OPEN: &str = "<ENT0>";
pub const ENT0_CLOSE: &str = "</ENT0>";
pub const ENT1_OPEN: &str = "<ENT1>";
pub const ENT1_CLOSE: &str = "</ENT1>";

/// Escaped closing tags seen in LLM output (`<\/ENT0>`).
const ENT0_CLOSE_ESCAPED: &str = "<\\/ENT0>";
const ENT1_CLOSE_ESCAPED: &str = "<\\/ENT1>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefinitionOrigin {
    Given,
    DerivedFromFewshot,
    LlmGeneratedNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceSource {
    Corpus,
    LlmGenerated,
    GoldTest,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DefinitionError {
    #[error("definition id is empty")]
    EmptyId,
    #[error("template does not contain {0}")]
    MissingPlaceholder(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstanceError {
    #[error("{0} mention is empty")]
    EmptyMention(&'static str),
    #[error("{0} span is empty or reversed")]
    InvalidSpan(&'static str),
    #[error("{0} span lies outside the sentence")]
    SpanOutOfBounds(&'static str),
    #[error("{0} mention does not match the sentence text at its span")]
    MentionMismatch(&'static str),
    #[error("{0} mention starts or ends with whitespace")]
    UntrimmedMention(&'static str),
    #[error("head and tail spans overlap")]
    Overlap,
    #[error("instance id is empty")]
    EmptyId,
}

/// Failure modes when reading `<ENT0>`/`<ENT1>` tagged text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TagError {
    #[error("an entity tag is missing or unbalanced")]
    MissingTag,
    #[error("an entity tag occurs more than once")]
    DuplicateTag,
    #[error("tagged regions overlap")]
    Overlap,
    #[error("a tagged mention is empty")]
    EmptyMention,
}

/// A natural-language relation definition with `<ENT0>` and `<ENT1>` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "DefinitionRecord", into = "DefinitionRecord")]
pub struct RelationDefinition {
    id: String,
    template: String,
    polarity: Polarity,
    origin: DefinitionOrigin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DefinitionRecord {
    id: String,
    template: String,
    polarity: Polarity,
    origin: DefinitionOrigin,
}

impl TryFrom<DefinitionRecord> for RelationDefinition {
    type Error = DefinitionError;

    fn try_from(r: DefinitionRecord) -> Result<Self, Self::Error> {
        RelationDefinition::new(r.id, r.template, r.polarity, r.origin)
    }
}

impl From<RelationDefinition> for DefinitionRecord {
    fn from(d: RelationDefinition) -> Self {
        DefinitionRecord {
            id: d.id,
            template: d.template,
            polarity: d.polarity,
            origin: d.origin,
        }
    }
}

impl RelationDefinition {
    pub fn new(
        id: impl Into<String>,
        template: impl Into<String>,
        polarity: Polarity,
        origin: DefinitionOrigin,
    ) -> Result<Self, DefinitionError> {
        let id = id.into();
        let template = template.into();
        if id.is_empty() {
            return Err(DefinitionError::EmptyId);
        }
        // Usually once each, but some given definitions restate an entity in a
        // parenthetical ("... (<ENT1> is the sibling ... of <ENT0>)").
        for placeholder in [ENT0_OPEN, ENT1_OPEN] {
            if !template.contains(placeholder) {
                return Err(DefinitionError::MissingPlaceholder(placeholder));
            }
        }
        Ok(RelationDefinition {
            id,
            template,
            polarity,
            origin,
        })
    }

    /// Shorthand for a given positive definition.
    pub fn positive(id: impl Into<String>, template: impl Into<String>) -> Result<Self, DefinitionError> {
        Self::new(id, template, Polarity::Positive, DefinitionOrigin::Given)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn origin(&self) -> DefinitionOrigin {
        self.origin
    }
}

impl fmt::Display for RelationDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.template)
    }
}

/// One entity mention, located by character offsets `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpan {
    pub mention: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn new(mention: impl Into<String>, start: usize, end: usize) -> Self {
        EntitySpan {
            mention: mention.into(),
            start,
            end,
        }
    }

    fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Case-sensitive `(sentence, head mention, tail mention)` triple used for deduplication.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DedupKey {
    pub sentence: String,
    pub head: String,
    pub tail: String,
}

impl DedupKey {
    /// Hex SHA-256 of the triple, fields separated by a unit separator.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.sentence.as_bytes());
        h.update([0x1f]);
        h.update(self.head.as_bytes());
        h.update([0x1f]);
        h.update(self.tail.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Raw interchange record for an instance (one JSON line).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: String,
    pub sentence: String,
    pub head: EntitySpan,
    pub tail: EntitySpan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    pub source: InstanceSource,
}

/// A sentence with two located entity mentions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "InstanceRecord", into = "InstanceRecord")]
pub struct RelationInstance {
    id: String,
    sentence: String,
    head: EntitySpan,
    tail: EntitySpan,
    relation: Option<String>,
    source: InstanceSource,
}

impl TryFrom<InstanceRecord> for RelationInstance {
    type Error = InstanceError;

    fn try_from(r: InstanceRecord) -> Result<Self, Self::Error> {
        RelationInstance::new(r.id, r.sentence, r.head, r.tail, r.source, r.relation)
    }
}

impl From<RelationInstance> for InstanceRecord {
    fn from(i: RelationInstance) -> Self {
        InstanceRecord {
            id: i.id,
            sentence: i.sentence,
            head: i.head,
            tail: i.tail,
            relation: i.relation,
            source: i.source,
        }
    }
}

fn check_span(sentence: &[char], span: &EntitySpan, which: &'static str) -> Result<(), InstanceError> {
    if span.mention.is_empty() {
        return Err(InstanceError::EmptyMention(which));
    }
    if span.start >= span.end {
        return Err(InstanceError::InvalidSpan(which));
    }
    if span.end > sentence.len() {
        return Err(InstanceError::SpanOutOfBounds(which));
    }
    let slice = &sentence[span.start..span.end];
    if span.mention.chars().ne(slice.iter().copied()) {
        return Err(InstanceError::MentionMismatch(which));
    }
    let first = slice[0];
    let last = slice[slice.len() - 1];
    if first.is_whitespace() || last.is_whitespace() {
        return Err(InstanceError::UntrimmedMention(which));
    }
    Ok(())
}

impl RelationInstance {
    pub fn new(
        id: impl Into<String>,
        sentence: impl Into<String>,
        head: EntitySpan,
        tail: EntitySpan,
        source: InstanceSource,
        relation: Option<String>,
    ) -> Result<Self, InstanceError> {
        let id = id.into();
        let sentence = sentence.into();
        if id.is_empty() {
            return Err(InstanceError::EmptyId);
        }
        let chars: Vec<char> = sentence.chars().collect();
        check_span(&chars, &head, "head")?;
        check_span(&chars, &tail, "tail")?;
        if head.overlaps(&tail) {
            return Err(InstanceError::Overlap);
        }
        Ok(RelationInstance {
            id,
            sentence,
            head,
            tail,
            relation,
            source,
        })
    }

    /// Builds an instance whose id is derived from its content: `<prefix>-<16 hex chars>`.
    pub fn with_content_id(
        prefix: &str,
        sentence: impl Into<String>,
        head: EntitySpan,
        tail: EntitySpan,
        source: InstanceSource,
        relation: Option<String>,
    ) -> Result<Self, InstanceError> {
        let sentence = sentence.into();
        let key = DedupKey {
            sentence: sentence.clone(),
            head: head.mention.clone(),
            tail: tail.mention.clone(),
        };
        let id = format!("{prefix}-{}", &key.digest()[..16]);
        Self::new(id, sentence, head, tail, source, relation)
    }

    /// Parses tagged text into an instance with a content-derived id.
    pub fn from_tagged(
        prefix: &str,
        tagged: &str,
        source: InstanceSource,
        relation: Option<String>,
    ) -> Result<Self, TagError> {
        let (sentence, head, tail) = parse_tagged_text(tagged)?;
        // parse_tagged_text only yields trimmed, non-overlapping, in-bounds spans.
        Self::with_content_id(prefix, sentence, head, tail, source, relation)
            .map_err(|_| TagError::EmptyMention)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn sentence(&self) -> &str {
        &self.sentence
    }

    pub fn head(&self) -> &EntitySpan {
        &self.head
    }

    pub fn tail(&self) -> &EntitySpan {
        &self.tail
    }

    pub fn relation(&self) -> Option<&str> {
        self.relation.as_deref()
    }

    pub fn source(&self) -> InstanceSource {
        self.source
    }

    pub fn dedup_key(&self) -> DedupKey {
        DedupKey {
            sentence: self.sentence.clone(),
            head: self.head.mention.clone(),
            tail: self.tail.mention.clone(),
        }
    }

    /// Same instance with a different id.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        let id = id.into();
        if !id.is_empty() {
            self.id = id;
        }
        self
    }

    pub fn with_relation(mut self, relation: Option<String>) -> Self {
        self.relation = relation;
        self
    }

    pub fn with_source(mut self, source: InstanceSource) -> Self {
        self.source = source;
        self
    }

    pub fn tagged_text(&self) -> String {
        canonical_tagged_text(self)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("instance serialization is infallible")
    }
}

/// Renders the sentence with `<ENT0> head </ENT0>` and `<ENT1> tail </ENT1>` inserted.
pub fn canonical_tagged_text(instance: &RelationInstance) -> String {
    let mut inserts: Vec<(usize, usize, &str, &str)> = vec![
        (instance.head.start, instance.head.end, ENT0_OPEN, ENT0_CLOSE),
        (instance.tail.start, instance.tail.end, ENT1_OPEN, ENT1_CLOSE),
    ];
    inserts.sort_by_key(|i| i.0);
    let mut out = String::with_capacity(instance.sentence.len() + 32);
    let mut next = inserts.iter().peekable();
    let mut open_end: Option<(usize, &str)> = None;
    let n = instance.sentence.chars().count();
    for (pos, ch) in instance.sentence.chars().chain(std::iter::once('\0')).enumerate() {
        if let Some((end, close)) = open_end {
            if end == pos {
                out.push(' ');
                out.push_str(close);
                open_end = None;
            }
        }
        if let Some(&&(start, end, open, close)) = next.peek() {
            if start == pos {
                out.push_str(open);
                out.push(' ');
                open_end = Some((end, close));
                next.next();
            }
        }
        if pos < n {
            out.push(ch);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagKind {
    Open(u8),
    Close(u8),
}

fn scan_tags(text: &str) -> Vec<(usize, usize, TagKind)> {
    const PATTERNS: [(&str, TagKind); 6] = [
        (ENT0_OPEN, TagKind::Open(0)),
        (ENT1_OPEN, TagKind::Open(1)),
        (ENT0_CLOSE, TagKind::Close(0)),
        (ENT1_CLOSE, TagKind::Close(1)),
        (ENT0_CLOSE_ESCAPED, TagKind::Close(0)),
        (ENT1_CLOSE_ESCAPED, TagKind::Close(1)),
    ];
    let mut tags = Vec::new();
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        if bytes[i] == b'<' {
            if let Some((pat, kind)) = PATTERNS.iter().find(|(p, _)| text[i..].starts_with(p)) {
                tags.push((i, i + pat.len(), *kind));
                i += pat.len();
                continue;
            }
        }
        i += 1;
    }
    tags
}

/// Strips entity tags from `text`, returning the plain sentence and the two spans.
///
/// Whitespace between a tag and its mention is dropped; all other text is kept verbatim.
/// Both `</ENTk>` and `<\/ENTk>` close a region.
pub fn parse_tagged_text(text: &str) -> Result<(String, EntitySpan, EntitySpan), TagError> {
    let tags = scan_tags(text);
    let count = |k: TagKind| tags.iter().filter(|t| t.2 == k).count();
    for k in 0..2u8 {
        let (o, c) = (count(TagKind::Open(k)), count(TagKind::Close(k)));
        if o > 1 || c > 1 {
            return Err(TagError::DuplicateTag);
        }
        if o == 0 || c == 0 {
            return Err(TagError::MissingTag);
        }
    }
    // Exactly four tags remain; they must form two disjoint, ordered regions.
    let find = |k: TagKind| tags.iter().position(|t| t.2 == k).unwrap();
    let mut regions = Vec::with_capacity(2);
    for k in 0..2u8 {
        let (o, c) = (find(TagKind::Open(k)), find(TagKind::Close(k)));
        if c < o {
            return Err(TagError::MissingTag);
        }
        if c != o + 1 {
            return Err(TagError::Overlap);
        }
        regions.push((k, tags[o].0, tags[o].1, tags[c].0, tags[c].1));
    }
    regions.sort_by_key(|r| r.1);

    let mut sentence = String::with_capacity(text.len());
    let mut sentence_chars = 0usize;
    let mut cursor = 0usize;
    let mut spans: [Option<EntitySpan>; 2] = [None, None];
    for &(k, open_start, open_end, close_start, close_end) in &regions {
        let before = &text[cursor..open_start];
        sentence.push_str(before);
        sentence_chars += before.chars().count();
        let mention = text[open_end..close_start].trim();
        if mention.is_empty() {
            return Err(TagError::EmptyMention);
        }
        let len = mention.chars().count();
        spans[k as usize] = Some(EntitySpan::new(mention, sentence_chars, sentence_chars + len));
        sentence.push_str(mention);
        sentence_chars += len;
        cursor = close_end;
    }
    sentence.push_str(&text[cursor..]);
    let [head, tail] = spans;
    Ok((sentence, head.unwrap(), tail.unwrap()))
}

/// Training / evaluation label (`y = 1` for positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn y(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    instance: RelationInstance,
    label: Label,
}

impl LabeledPair {
    pub fn new(instance: RelationInstance, label: Label) -> Self {
        LabeledPair { instance, label }
    }

    pub fn instance(&self) -> &RelationInstance {
        &self.instance
    }

    pub fn label(&self) -> Label {
        self.label
    }
}

/// Positive and negative seed instances with their target sizes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    positives: Vec<RelationInstance>,
    negatives: Vec<RelationInstance>,
    target_counts: (usize, usize),
    #[serde(skip)]
    seen_pos: HashSet<DedupKey>,
    #[serde(skip)]
    seen_neg: HashSet<DedupKey>,
}

impl SeedSet {
    pub fn new(target_positives: usize, target_negatives: usize) -> Self {
        SeedSet {
            target_counts: (target_positives, target_negatives),
            ..Default::default()
        }
    }

    /// Adds a positive unless its dedup triple is already present. Returns whether it was added.
    pub fn push_positive(&mut self, instance: RelationInstance) -> bool {
        if self.seen_pos.insert(instance.dedup_key()) {
            self.positives.push(instance);
            true
        } else {
            false
        }
    }

    pub fn push_negative(&mut self, instance: RelationInstance) -> bool {
        if self.seen_neg.insert(instance.dedup_key()) {
            self.negatives.push(instance);
            true
        } else {
            false
        }
    }

    pub fn positives(&self) -> &[RelationInstance] {
        &self.positives
    }

    pub fn negatives(&self) -> &[RelationInstance] {
        &self.negatives
    }

    pub fn target_counts(&self) -> (usize, usize) {
        self.target_counts
    }

    pub fn is_complete(&self) -> bool {
        self.positives.len() >= self.target_counts.0 && self.negatives.len() >= self.target_counts.1
    }

    pub fn labeled_pairs(&self) -> Vec<LabeledPair> {
        self.positives
            .iter()
            .map(|i| LabeledPair::new(i.clone(), Label::Positive))
            .chain(self.negatives.iter().map(|i| LabeledPair::new(i.clone(), Label::Negative)))
            .collect()
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}
