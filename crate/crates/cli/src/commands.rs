use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use relsynth::classifier::{build_nli_pair_with, write_jsonl, LabeledNliPair, ModelHandle, TrainSpec};
use relsynth::corpus::{downsample, ingest_file, EvalGroup};
use relsynth::evaluation::{
    decisions_from_records, downsample_group, evaluate_group, llm_binary_baseline, predict_group,
    random_guess_monte_carlo, PredictionRecord,
};
use relsynth::feedback::{sample_feedback, score_corpus, FeedbackPurpose, FeedbackSample, ScoreTable};
use relsynth::llm::{ChatParams, DialogueThread, LlmClient};
use relsynth::prompting::{
    render_followup_positive_prompt_or_placeholder, render_negdef_prompt, render_seed_prompt, BaselineKind,
    PromptKind, PromptRequest, SeedStyle,
};
use relsynth::refine::{final_models, resume, run_loop, summarize_relation, RunConfig, RunDir, Services};
use relsynth::synthesis::{
    seed_thread_id, split_evenly, synthesize_followup_positives, synthesize_initial_seeds, synthesize_negatives,
    Generation, KnownInstances, SynthesisRecord,
};
use relsynth::{synthetic, LabeledPair, RelationDefinition, RelationInstance};

use crate::args::*;
use crate::setup::{self, read_json, read_records, write_json};

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Corpus(c) => corpus(c),
        Command::Synthesize(c) => synthesize(c),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Feedback(c) => feedback(c),
        Command::Loop(c) => run(c),
        Command::Eval(c) => eval(c),
        Command::DeriveDef(a) => derive_def(a),
        Command::Report(a) => report(a),
        Command::Prompts(c) => prompts(c),
        Command::Synthetic(SyntheticCmd::Write { out, seed }) => {
            synthetic::write_bundle(&out, seed.unwrap_or(synthetic::BUNDLE_SEED))?;
            println!("wrote synthetic bundle to {}", out.display());
            Ok(())
        }
    }
}

fn corpus(cmd: CorpusCmd) -> Outcome {
    match cmd {
        CorpusCmd::Ingest { input, out } => {
            let store = ingest_file(&input)?;
            store.save(&out)?;
            println!(
                "{} instances stored, {} rejected, fingerprint {}",
                store.len(),
                store.rejected().len(),
                store.fingerprint()
            );
        }
        CorpusCmd::Downsample { corpus, n, seed, out } => {
            let store = setup::corpus(&corpus)?;
            let small = downsample(&store, n, seed)?;
            small.save(&out)?;
            println!("{} of {} instances kept, fingerprint {}", small.len(), store.len(), small.fingerprint());
        }
    }
    Ok(())
}

fn save_records(dir: &Path, records: &[SynthesisRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        r.save(&dir.join("synthesis"), &format!("{:02}-{}", i + 1, r.prompt_kind.as_str()))?;
    }
    Ok(())
}

fn save_threads<'a>(dir: &Path, threads: impl IntoIterator<Item = &'a DialogueThread>) -> Result<()> {
    for t in threads {
        let name = match t.style_tag() {
            Some(style) if t.thread_id().ends_with(&format!("/{style}")) && !t.thread_id().contains("/neg") => {
                format!("pos-{style}.json")
            }
            _ => format!("{}.json", t.thread_id().replace('/', "_")),
        };
        t.save(&dir.join("threads").join(name))?;
    }
    Ok(())
}

fn write_prompts(dir: &Path, prompts: &[(String, String)]) -> Result<()> {
    let d = dir.join("prompts");
    fs::create_dir_all(&d)?;
    for (name, text) in prompts {
        fs::write(d.join(format!("{name}.txt")), text)?;
    }
    println!("dry run: {} prompt(s) written to {}", prompts.len(), d.display());
    Ok(())
}

fn scoped_llm(llm: &LlmArgs, out: &Path) -> Result<LlmClient> {
    fs::create_dir_all(out)?;
    Ok(setup::llm(llm)?.scoped(out.join("journal.jsonl")))
}

fn feedback_groups(path: &Path) -> Result<Vec<FeedbackSample>> {
    read_json(path)
}

fn synthesize(cmd: SynthesizeCmd) -> Outcome {
    match cmd {
        SynthesizeCmd::Init {
            rel,
            corpus,
            out,
            dry_run,
            config,
            llm,
        } => {
            let def = setup::definition(&rel.definitions, &rel.relation)?;
            let config = setup::run_config(&config)?;
            let n = config.counts.initial_positives;
            if dry_run {
                let prompts = SeedStyle::ALL
                    .into_iter()
                    .zip(split_evenly(n, 3))
                    .filter(|(_, k)| *k > 0)
                    .map(|(s, k)| Ok((format!("seed-{s}"), render_seed_prompt(&def, k, s)?)))
                    .collect::<Result<Vec<_>>>()?;
                return Ok(write_prompts(&out, &prompts)?);
            }
            let Some(corpus) = corpus else {
                return Err(Failure::Usage("--corpus is required unless --dry-run is given".into()));
            };
            let store = setup::corpus(&corpus)?;
            let client = scoped_llm(&llm, &out)?;
            let mut known = KnownInstances::default();
            let seeds =
                synthesize_initial_seeds(&def, &config.synthesis(), &store, &client, &mut known, config.rng_seed)?;
            for w in &seeds.warnings {
                log::warn!("{w}");
            }
            write_jsonl(&out.join("trainset.jsonl"), &seeds.train.labeled_pairs())?;
            write_jsonl(&out.join("devset.jsonl"), &seeds.dev.labeled_pairs())?;
            save_threads(&out, &seeds.threads)?;
            save_records(&out, &seeds.records)?;
            println!(
                "train {}p{}n, dev {}p{}n written to {}",
                seeds.train.positives().len(),
                seeds.train.negatives().len(),
                seeds.dev.positives().len(),
                seeds.dev.negatives().len(),
                out.display()
            );
        }
        SynthesizeCmd::Followup {
            rel,
            threads,
            feedback,
            n,
            iteration,
            out,
            dry_run,
            config,
            llm,
        } => {
            let def = setup::definition(&rel.definitions, &rel.relation)?;
            let config = setup::run_config(&config)?;
            let groups: Vec<Vec<RelationInstance>> =
                feedback_groups(&feedback)?.iter().map(FeedbackSample::plain_instances).collect();
            if dry_run {
                let prompts = split_evenly(n, 3)
                    .into_iter()
                    .enumerate()
                    .filter(|(_, k)| *k > 0)
                    .map(|(i, k)| {
                        let group = groups.get(i).map(Vec::as_slice).unwrap_or(&[]);
                        Ok((
                            format!("followup-{}", SeedStyle::ALL[i]),
                            render_followup_positive_prompt_or_placeholder(&def, k, group)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                return Ok(write_prompts(&out, &prompts)?);
            }
            let mut loaded = SeedStyle::ALL
                .iter()
                .map(|s| DialogueThread::load(&threads.join(format!("pos-{s}.json"))))
                .collect::<std::io::Result<Vec<_>>>()
                .with_context(|| format!("loading positive threads from {}", threads.display()))?;
            for (t, s) in loaded.iter().zip(SeedStyle::ALL) {
                if t.thread_id() != seed_thread_id(def.id(), s) {
                    return Err(Failure::Usage(format!(
                        "thread {} does not belong to relation {}",
                        t.thread_id(),
                        def.id()
                    )));
                }
            }
            let client = scoped_llm(&llm, &out)?;
            let gen = Generation {
                llm: &client,
                params: &config.chat,
                relation_id: def.id(),
                iteration,
                max_topup_turns: config.counts.max_topup_turns,
            };
            let mut known = KnownInstances::default();
            for g in &groups {
                known.extend(g);
            }
            let (positives, records) =
                synthesize_followup_positives(&gen, &mut loaded, &def, &groups, n, &mut known)?;
            write_jsonl(&out.join("positives.jsonl"), &positives)?;
            save_threads(&out, &loaded)?;
            save_records(&out, &records)?;
            println!("{} follow-up positives written to {}", positives.len(), out.display());
        }
        SynthesizeCmd::Negatives {
            rel,
            feedback,
            previous,
            n_defs,
            n,
            iteration,
            out,
            dry_run,
            config,
            llm,
        } => {
            let def = setup::definition(&rel.definitions, &rel.relation)?;
            let config = setup::run_config(&config)?;
            let fb: Vec<RelationInstance> = feedback_groups(&feedback)?
                .iter()
                .flat_map(FeedbackSample::plain_instances)
                .collect();
            let prev: Vec<RelationDefinition> = match &previous {
                Some(p) => read_records(p)?,
                None => Vec::new(),
            };
            if dry_run {
                let prompt = render_negdef_prompt(&def, &fb, n_defs, Some(&prev))?;
                return Ok(write_prompts(&out, &[("negdef".to_string(), prompt)])?);
            }
            let client = scoped_llm(&llm, &out)?;
            let gen = Generation {
                llm: &client,
                params: &config.chat,
                relation_id: def.id(),
                iteration,
                max_topup_turns: config.counts.max_topup_turns,
            };
            let mut known = KnownInstances::default();
            known.extend(&fb);
            let neg = synthesize_negatives(&gen, &def, &fb, &prev, n_defs, n, &mut known)?;
            for r in &neg.rejected_definitions {
                log::warn!("rejected negative definition: {r:?}");
            }
            write_json(&out.join("negdefs.json"), &neg.definitions)?;
            write_jsonl(&out.join("negatives.jsonl"), &neg.instances)?;
            save_threads(&out, std::iter::once(&neg.negdef_thread).chain(&neg.instance_threads))?;
            save_records(&out, &neg.records)?;
            println!(
                "{} negative definitions and {} negative instances written to {}",
                neg.definitions.len(),
                neg.instances.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn nli_pairs(pairs: &[LabeledPair], def: &RelationDefinition, config: &RunConfig) -> Vec<LabeledNliPair> {
    pairs
        .iter()
        .map(|p| LabeledNliPair::new(build_nli_pair_with(p.instance(), def, config.premise_tagging), p.label()))
        .collect()
}

fn train(a: TrainArgs) -> Outcome {
    let def = setup::definition(&a.rel.definitions, &a.rel.relation)?;
    let config = setup::run_config(&a.config)?;
    let backend = setup::backend(&a.backend, &a.out.join("models"))?;
    let train: Vec<LabeledPair> = read_records(&a.train)?;
    let dev: Vec<LabeledPair> = read_records(&a.dev)?;
    let spec = TrainSpec {
        train: nli_pairs(&train, &def, &config),
        dev: nli_pairs(&dev, &def, &config),
        params: config.train.clone(),
    };
    let report = backend.train(&spec)?;
    write_json(&a.out.join("report.json"), &report)?;
    let sel = report.selected();
    println!(
        "model {} (epoch {} of {}, dev F1 {:.4})",
        report.model_handle.0,
        report.selected_epoch,
        report.epochs.len(),
        sel.map_or(f64::NAN, |r| r.dev.f1)
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Outcome {
    let def = setup::definition(&a.rel.definitions, &a.rel.relation)?;
    let config = setup::run_config(&a.config)?;
    let backend = setup::backend(&a.backend, &a.out.join("models"))?;
    let store = setup::corpus(&a.corpus)?;
    let table = score_corpus(
        backend.as_ref(),
        &ModelHandle(a.model),
        &def,
        &store,
        config.premise_tagging,
        a.iteration,
    )?;
    fs::create_dir_all(&a.out)?;
    table.save(&a.out)?;
    let positive = table.rows.iter().filter(|r| r.p_pos > config.train.threshold).count();
    println!("{} rows scored, {positive} above threshold", table.rows.len());
    Ok(())
}

fn feedback(cmd: FeedbackCmd) -> Outcome {
    let FeedbackCmd::Sample {
        scores,
        corpus,
        purpose,
        k,
        seed,
        exclude,
        out,
        config,
    } = cmd;
    let config = setup::run_config(&ConfigArgs { config, seed: None })?;
    let table = ScoreTable::load(&scores)?;
    let store = setup::corpus(&corpus)?;
    if table.corpus_fingerprint != store.fingerprint() {
        return Err(Failure::Usage(format!(
            "score table was computed on corpus {}, got {}",
            table.corpus_fingerprint,
            store.fingerprint()
        )));
    }
    let mut excluded = HashSet::new();
    for p in &exclude {
        let pairs: Vec<LabeledPair> = read_records(p)?;
        excluded.extend(pairs.iter().map(|x| x.instance().dedup_key()));
    }
    let purpose = match purpose {
        Purpose::FollowupPositive => FeedbackPurpose::FollowupPositive,
        Purpose::Negdef => FeedbackPurpose::Negdef,
    };
    let samples = sample_feedback(&table, &store, purpose, k, &config.bands, seed, &excluded)?;
    write_json(&out, &samples)?;
    let sizes: Vec<usize> = samples.iter().map(|s| s.instances.len()).collect();
    println!("feedback groups {sizes:?} written to {}", out.display());
    Ok(())
}

fn print_outcome(run: &Path, outcome: &relsynth::refine::RunOutcome) {
    println!("run {} (config {})", run.display(), outcome.fingerprint);
    if outcome.already_finished {
        println!("already finished; nothing to do");
    }
    for (rel, s) in &outcome.relations {
        for it in &s.iterations {
            println!(
                "  {rel} iter{}: train {}p{}n, dev {}p{}n, negdefs {}, dev F1 {:.4} (epoch {})",
                it.iteration,
                it.train_positives,
                it.train_negatives,
                it.dev_positives,
                it.dev_negatives,
                it.negdefs,
                it.dev_f1,
                it.selected_epoch
            );
        }
    }
}

fn run(cmd: LoopCmd) -> Outcome {
    match cmd {
        LoopCmd::Run {
            definitions,
            relations,
            iterations,
            corpus,
            run,
            config,
            llm,
            backend,
        } => {
            let mut config = setup::run_config(&config)?;
            if let Some(n) = iterations {
                config.max_iterations = n;
                config.validate()?;
            }
            let mut defs = setup::definitions(&definitions)?;
            if !relations.is_empty() {
                let missing: Vec<&String> = relations.iter().filter(|r| !defs.iter().any(|d| d.id() == *r)).collect();
                if !missing.is_empty() {
                    return Err(Failure::Usage(format!("unknown relation(s) {missing:?} in {}", definitions.display())));
                }
                defs.retain(|d| relations.iter().any(|r| r == d.id()));
            }
            let store = setup::corpus(&corpus)?;
            let dir = RunDir::new(&run);
            let client = setup::llm(&llm)?;
            let backend = setup::backend(&backend, &dir.models_dir())?;
            println!("config fingerprint {}", config.fingerprint());
            let services = Services {
                llm: &client,
                backend: backend.as_ref(),
                corpus: &store,
            };
            let outcome = run_loop(&dir, &config, &defs, &services)?;
            print_outcome(&run, &outcome);
        }
        LoopCmd::Resume {
            run,
            corpus,
            config,
            llm,
            backend,
        } => {
            let provided: Option<RunConfig> = config.map(|p| read_json(&p)).transpose()?;
            let store = setup::corpus(&corpus)?;
            let dir = RunDir::new(&run);
            let client = setup::llm(&llm)?;
            let backend = setup::backend(&backend, &dir.models_dir())?;
            let services = Services {
                llm: &client,
                backend: backend.as_ref(),
                corpus: &store,
            };
            let outcome = resume(&dir, provided.as_ref(), &services)?;
            print_outcome(&run, &outcome);
        }
    }
    Ok(())
}

fn emit<T: serde::Serialize>(out: Option<&PathBuf>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn eval(cmd: EvalCmd) -> Outcome {
    match cmd {
        EvalCmd::Predict {
            run,
            group,
            out,
            backend,
        } => {
            let dir = RunDir::new(&run);
            let (config, _) = relsynth::refine::read_run(&dir)?;
            let group: EvalGroup = read_json(&group)?;
            let backend = setup::backend(&backend, &dir.models_dir())?;
            let models: Vec<(RelationDefinition, ModelHandle)> = final_models(&dir)?
                .into_iter()
                .map(|(d, r)| (d, r.model_handle))
                .collect();
            let records = predict_group(backend.as_ref(), &models, &group, config.premise_tagging)?;
            write_jsonl(&out, &records)?;
            println!("{} predictions for {} model(s) written to {}", records.len(), models.len(), out.display());
        }
        EvalCmd::Run {
            group,
            predictions,
            threshold,
            out,
        } => {
            let group: EvalGroup = read_json(&group)?;
            let records: Vec<PredictionRecord> = read_records(&predictions)?;
            let report = evaluate_group(&decisions_from_records(&records, threshold), &group, None)?;
            eprintln!("{}", report.summary_line());
            emit(out.as_ref(), &report)?;
        }
        EvalCmd::Baseline {
            kind,
            group,
            trials,
            seed,
            definitions,
            per_relation,
            model,
            out,
            llm,
        } => {
            let group: EvalGroup = read_json(&group)?;
            let kind = match kind {
                BaselineName::Random => {
                    let report = random_guess_monte_carlo(&group, trials, seed)?;
                    eprintln!(
                        "random guess over {trials} trials: P {:.2} ± {:.2}, R {:.2} ± {:.2}, F1 {:.2} ± {:.2}",
                        report.precision.mean,
                        report.precision.sd,
                        report.recall.mean,
                        report.recall.sd,
                        report.f1.mean,
                        report.f1.sd
                    );
                    emit(out.as_ref(), &report)?;
                    return Ok(());
                }
                BaselineName::BinaryChoice => BaselineKind::BinaryChoice,
                BaselineName::QaBinary => BaselineKind::QaBinary,
            };
            let Some(defs_path) = definitions else {
                return Err(Failure::Usage("LLM baselines need --definitions".into()));
            };
            let defs: BTreeMap<String, RelationDefinition> = setup::definitions(&defs_path)?
                .into_iter()
                .map(|d| (d.id().to_string(), d))
                .collect();
            let small = downsample_group(&group, per_relation, seed)?;
            let client = setup::llm(&llm)?;
            let run = llm_binary_baseline(&small, &defs, &client, &ChatParams::baseline(model), kind, None, None)?;
            eprintln!("{} ({} unparsed replies)", run.report.summary_line(), run.unparsed);
            emit(out.as_ref(), &run)?;
        }
    }
    Ok(())
}

fn derive_def(a: DeriveDefArgs) -> Outcome {
    let shots: Vec<RelationInstance> = read_records(&a.shots)?;
    if shots.is_empty() {
        return Err(Failure::Usage(format!("{} holds no instances", a.shots.display())));
    }
    let relation = match a.relation_id.or_else(|| shots[0].relation().map(str::to_string)) {
        Some(r) => r,
        None => return Err(Failure::Usage("shots carry no relation id; pass --relation-id".into())),
    };
    let config = setup::run_config(&a.config)?;
    let client = setup::llm(&a.llm)?;
    let def = relsynth::synthesis::derive_definition(&client, &config.chat, &relation, &shots)?;
    write_json(&a.out, &vec![&def])?;
    println!("{}: {}", def.id(), def.template());
    Ok(())
}

fn report(a: ReportArgs) -> Outcome {
    let dir = RunDir::new(&a.run);
    let (config, defs) = relsynth::refine::read_run(&dir)?;
    let summaries = defs
        .iter()
        .map(|d| summarize_relation(&dir, d.id()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summaries)?);
        return Ok(());
    }
    println!("run {} (config {})", a.run.display(), config.fingerprint());
    println!("{:<16} {:>4} {:>9} {:>9} {:>7} {:>9} {:>6} {:>7}", "relation", "iter", "train", "dev", "negdefs", "feedback", "epoch", "dev F1");
    for s in &summaries {
        for it in &s.iterations {
            println!(
                "{:<16} {:>4} {:>9} {:>9} {:>7} {:>9} {:>6} {:>7.4}",
                s.relation_id,
                it.iteration,
                format!("{}p{}n", it.train_positives, it.train_negatives),
                format!("{}p{}n", it.dev_positives, it.dev_negatives),
                it.negdefs,
                it.feedback_groups.iter().map(usize::to_string).collect::<Vec<_>>().join("/"),
                it.selected_epoch,
                it.dev_f1
            );
        }
    }
    Ok(())
}

fn prompts(cmd: PromptsCmd) -> Outcome {
    match cmd {
        PromptsCmd::List => {
            for k in PromptKind::ALL {
                println!("{:<22} {}", k.as_str(), k.slots().join(", "));
            }
        }
        PromptsCmd::Render { kind, slots, out } => {
            let Some(kind) = PromptKind::ALL.into_iter().find(|k| k.as_str() == kind) else {
                return Err(Failure::Usage(format!("unknown prompt kind `{kind}`; see `prompts list`")));
            };
            let values: BTreeMap<String, String> = read_json(&slots)?;
            let mut req = PromptRequest::new(kind);
            for (k, v) in &values {
                req = req.slot(k, v.as_str());
            }
            let text = req.render()?;
            match out {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
