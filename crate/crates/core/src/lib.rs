//! Definition-only zero-shot relation extraction.
//!
//! Starting from one natural-language relation definition and an unlabeled corpus,
//! the pipeline synthesizes training instances with a chat LLM, trains a binary
//! entailment classifier, and refines the training data over several rounds using
//! feedback sampled from the classifier's own predictions on the corpus.

pub mod classifier;
pub mod corpus;
pub mod evaluation;
pub mod feedback;
pub mod llm;
pub mod prompting;
pub mod refine;
pub mod synthesis;
pub mod synthetic;
pub mod types;

pub use types::{
    canonical_tagged_text, parse_tagged_text, DedupKey, DefinitionOrigin, EntitySpan, InstanceSource, Label,
    LabeledPair, Polarity, RelationDefinition, RelationInstance, SeedSet,
};
