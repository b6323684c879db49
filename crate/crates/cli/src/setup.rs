use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use relsynth::classifier::{ClassifierBackend, ReferenceBackend, WorkerBackend, WorkerCommand};
use relsynth::corpus::{ingest_file, CorpusStore};
use relsynth::llm::{ChatBackend, LlmClient, MockBackend, OpenAiCompatBackend, ENV_MODEL};
use relsynth::refine::RunConfig;
use relsynth::synthetic::SyntheticResponder;
use relsynth::RelationDefinition;
use serde::de::DeserializeOwned;

use crate::args::{BackendArgs, BackendKind, ConfigArgs, LlmArgs, LlmKind};
use crate::commands::Failure;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// JSON array or JSON lines.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), n + 1)))
        .collect()
}

pub fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        config.rng_seed = s;
    }
    if let Ok(model) = std::env::var(ENV_MODEL) {
        config.chat.model = model;
    }
    config.validate()?;
    Ok(config)
}

pub fn definitions(path: &Path) -> Result<Vec<RelationDefinition>> {
    read_records(path)
}

pub fn definition(path: &Path, relation: &str) -> Result<RelationDefinition, Failure> {
    definitions(path)?
        .into_iter()
        .find(|d| d.id() == relation)
        .ok_or_else(|| Failure::Usage(format!("relation `{relation}` is not in {}", path.display())))
}

/// Store directory or instance JSON-lines file.
pub fn corpus(path: &Path) -> Result<CorpusStore> {
    let store = if path.is_dir() {
        CorpusStore::load(path)?
    } else {
        ingest_file(path)?
    };
    if !store.rejected().is_empty() {
        log::warn!("{}: {} records rejected during ingest", path.display(), store.rejected().len());
    }
    Ok(store)
}

pub fn llm(args: &LlmArgs) -> Result<LlmClient> {
    let backend: Arc<dyn ChatBackend> = match args.llm {
        LlmKind::Openai => Arc::new(OpenAiCompatBackend::from_env()?),
        LlmKind::Mock => {
            let mut mock = MockBackend::new().with_responder(Arc::new(SyntheticResponder));
            if let Some(f) = &args.fixtures {
                mock = mock.with_fixtures(MockBackend::load_fixtures(f)?);
            }
            Arc::new(mock)
        }
    };
    Ok(LlmClient::new(backend))
}

pub fn backend(args: &BackendArgs, default_models: &Path) -> Result<Box<dyn ClassifierBackend>, Failure> {
    match args.backend {
        BackendKind::Reference => {
            let dir = args.models.clone().unwrap_or_else(|| default_models.to_path_buf());
            Ok(Box::new(ReferenceBackend::default().with_model_dir(dir)))
        }
        BackendKind::Worker => {
            let Some(cmd) = &args.worker_cmd else {
                return Err(Failure::Usage("--backend worker needs --worker-cmd".into()));
            };
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let Some(program) = parts.next() else {
                return Err(Failure::Usage("--worker-cmd is empty".into()));
            };
            let work = default_models.join("worker");
            Ok(Box::new(WorkerBackend::new(
                WorkerCommand {
                    program,
                    args: parts.collect(),
                },
                work,
            )))
        }
    }
}
