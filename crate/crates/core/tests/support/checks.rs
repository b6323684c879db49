//! One function per acceptance criterion. Each returns a short summary on
//! success and the first violation on failure.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relsynth::classifier::{
    bce_loss, build_nli_pair, entailment_probability, featurize, read_jsonl, softmax3, ClassifierBackend,
    LabeledNliPair, LinearModel, NliPair, ReferenceBackend, TrainParams, TrainSpec, PROB_EPSILON,
};
use relsynth::corpus::{CorpusStore, EvalGroup};
use relsynth::evaluation::{evaluate_target_relation, random_guess_monte_carlo, BinaryMetrics};
use relsynth::feedback::{sample_feedback, score_corpus, FeedbackBands, FeedbackPurpose};
use relsynth::prompting::PromptKind;
use relsynth::synthesis::{parse_definition_items, parse_instance_items, FailureReason};
use relsynth::types::{
    parse_tagged_text, EntitySpan, InstanceSource, Label, LabeledPair, RelationDefinition, RelationInstance,
};

use super::*;

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn span(text: &str, s: &EntitySpan) -> String {
    text.chars().skip(s.start).take(s.end - s.start).collect()
}

// ---------------------------------------------------------------------------

/// Per-relation checks on a finished run directory.
pub fn accumulation_shape(run: &Path, relations: &[String]) -> Outcome {
    for rel in relations {
        let iter2 = run.join(rel).join("iter2");
        for name in ["trainset.jsonl", "devset.jsonl"] {
            let pairs: Vec<LabeledPair> = read_jsonl(&iter2.join(name)).map_err(|e| format!("{rel}/{name}: {e}"))?;
            let pos = pairs.iter().filter(|p| p.label() == Label::Positive).count();
            ensure!(
                (pos, pairs.len() - pos) == (30, 30),
                "{rel}/{name}: {pos}p{}n",
                pairs.len() - pos
            );
        }
        let text = |f: &str| std::fs::read_to_string(iter2.join(f)).map_err(|e| format!("{rel}/{f}: {e}"));
        let negdefs: Vec<RelationDefinition> = serde_json::from_str(&text("negdefs.json")?).map_err(|e| e.to_string())?;
        ensure!(negdefs.len() == 5, "{rel}: {} negdefs", negdefs.len());
        let fb: serde_json::Value = serde_json::from_str(&text("feedback.json")?).map_err(|e| e.to_string())?;
        let groups = fb["positive_groups"].as_array().ok_or("feedback.json lacks positive_groups")?;
        ensure!(groups.len() == 3, "{rel}: {} feedback groups", groups.len());
        let mut seen = HashSet::new();
        for g in groups {
            let inst = g["instances"].as_array().ok_or("group without instances")?;
            ensure!(inst.len() == 10, "{rel}: feedback group of {}", inst.len());
            for i in inst {
                let id = i["instance"]["id"].as_str().ok_or("instance without id")?;
                ensure!(seen.insert(id.to_string()), "{rel}: {id} appears in two feedback groups");
            }
        }
    }
    Ok(format!("{} relations at 30p30n, 5 negdefs, 3x10 disjoint groups", relations.len()))
}

// ---------------------------------------------------------------------------

fn toy_instance(id: String, sentence: &str, head: &str, tail: &str) -> RelationInstance {
    let h = sentence.find(head).unwrap();
    let t = sentence.rfind(tail).unwrap();
    let (hs, ts) = (sentence[..h].chars().count(), sentence[..t].chars().count());
    RelationInstance::new(
        id,
        sentence,
        EntitySpan::new(head, hs, hs + head.chars().count()),
        EntitySpan::new(tail, ts, ts + tail.chars().count()),
        InstanceSource::Corpus,
        None,
    )
    .unwrap()
}

pub fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(719);
    let mut compared = 0;
    for set in 0..200 {
        let n_rel = rng.random_range(2..=8);
        let rate = rng.random_range(0.05..0.95);
        let mut by_rel = BTreeMap::new();
        let mut ids = BTreeMap::new();
        let mut predictions = HashMap::new();
        for r in 0..n_rel {
            let rel = format!("R{r}");
            let n = rng.random_range(1..=25);
            let mut insts = Vec::new();
            let mut rel_ids = Vec::new();
            for i in 0..n {
                let id = format!("s{set}-r{r}-{i}");
                predictions.insert(id.clone(), rng.random_bool(rate));
                insts.push(toy_instance(id.clone(), "Ann met Bob.", "Ann", "Bob"));
                rel_ids.push(id);
            }
            by_rel.insert(rel.clone(), insts);
            ids.insert(rel, rel_ids);
        }
        let group = EvalGroup::new(by_rel, set);
        for target in ids.keys() {
            let got = evaluate_target_relation(&predictions, target, &group).map_err(|e| e.to_string())?;
            let (tp, fp, fn_, tn) = brute_force_counts(&ids, &predictions, target);
            ensure!(
                (got.tp, got.fp, got.fn_, got.tn) == (tp, fp, fn_, tn),
                "set {set} target {target}: counts {:?} vs oracle {:?}",
                (got.tp, got.fp, got.fn_, got.tn),
                (tp, fp, fn_, tn)
            );
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f1 = if 2 * tp + fp + fn_ == 0 || tp == 0 {
                0.0
            } else {
                (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
            };
            ensure!(got.precision == p && got.recall == r, "set {set} target {target}: P/R differ");
            ensure!((got.f1 - f1).abs() <= 1e-12, "set {set} target {target}: F1 {} vs {f1}", got.f1);
            compared += 1;
        }
    }
    Ok(format!("200 prediction sets, {compared} target evaluations agree"))
}

// ---------------------------------------------------------------------------

pub fn balanced_group(relations: usize, per_relation: usize) -> EvalGroup {
    let mut by_rel = BTreeMap::new();
    for r in 0..relations {
        let insts = (0..per_relation)
            .map(|i| toy_instance(format!("g-{r}-{i}"), "Ann met Bob.", "Ann", "Bob"))
            .collect();
        by_rel.insert(format!("R{r:02}"), insts);
    }
    EvalGroup::new(by_rel, 0)
}

pub fn random_guess() -> Outcome {
    let group = balanced_group(14, 700);
    let t = Instant::now();
    let report = random_guess_monte_carlo(&group, 1000, 2024).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let (p, r) = (report.precision.mean, report.recall.mean);
    ensure!((p - 7.14).abs() <= 1.0, "precision {p:.2} outside 7.14 +/- 1.0");
    ensure!((r - 50.77).abs() <= 2.0, "recall {r:.2} outside 50.77 +/- 2.0");
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("P {p:.2}, R {r:.2}, F1 {:.2} in {secs:.2}s", report.f1.mean))
}

// ---------------------------------------------------------------------------

pub fn malformed_items() -> Vec<(&'static str, FailureReason)> {
    vec![
        ("1. <ENT0> Ricardo Sanchez </ENT0> served in the <ENT1> United States Army .", FailureReason::MissingTag),
        ("1. Ricardo Sanchez served in the <ENT1> United States Army </ENT1> .", FailureReason::MissingTag),
        (
            "1. <ENT0> USMC </ENT0> Major <ENT0> Donald Keyhoe </ENT0> briefed <ENT1> NICAP </ENT1> .",
            FailureReason::DuplicateTag,
        ),
        (
            "1. <ENT0> Donald <ENT1> Keyhoe </ENT0> of the USMC </ENT1> briefed the panel .",
            FailureReason::Overlap,
        ),
        ("1. <ENT0>  </ENT0> served in the <ENT1> Marine Corps </ENT1> .", FailureReason::EmptyMention),
        ("<ENT0> Sergeant John Doe </ENT0> served in the <ENT1> Marine Corps </ENT1> .", FailureReason::NoOrdinal),
    ]
}

fn check_item(inst: &RelationInstance, head: &str, tail: &str) -> Result<(), String> {
    ensure!(inst.head().mention == head, "head {:?}, expected {head:?}", inst.head().mention);
    ensure!(inst.tail().mention == tail, "tail {:?}, expected {tail:?}", inst.tail().mention);
    ensure!(span(inst.sentence(), inst.head()) == head, "head span does not cover {head:?}");
    ensure!(span(inst.sentence(), inst.tail()) == tail, "tail span does not cover {tail:?}");
    ensure!(!inst.sentence().contains("<ENT"), "tags left in {:?}", inst.sentence());
    Ok(())
}

const FUZZ_ALPHABET: [&str; 14] = [
    "<ENT0>", "</ENT0>", "<ENT1>", "</ENT1>", "<\\/ENT1>", "\n", "\n\n", "1. ", "12) ", "\"", "“", "é", "\u{2014}", "  ",
];

fn mutate(rng: &mut ChaCha8Rng, base: &str) -> String {
    let mut chars: Vec<char> = base.chars().collect();
    for _ in 0..rng.random_range(1..=4) {
        let at = rng.random_range(0..=chars.len());
        match rng.random_range(0..6) {
            0 if !chars.is_empty() => {
                let end = (at + rng.random_range(1..12)).min(chars.len());
                chars.drain(at.min(end)..end);
            }
            1 | 2 => {
                let tok = FUZZ_ALPHABET[rng.random_range(0..FUZZ_ALPHABET.len())];
                chars.splice(at..at, tok.chars());
            }
            3 => chars.truncate(at),
            4 => {
                let s: String = chars.iter().collect();
                let swapped = s.replace("ENT0", "ENTX").replace("ENT1", "ENT0").replace("ENTX", "ENT1");
                chars = swapped.chars().collect();
            }
            _ => {
                let c = char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?');
                chars.insert(at, c);
            }
        }
    }
    chars.into_iter().collect()
}

pub fn fuzz_parsers(cases: usize, seed: u64) -> Outcome {
    let mut corpus: Vec<String> = completions().into_iter().map(|c| c.completion).collect();
    corpus.extend(malformed_items().into_iter().map(|(s, _)| s.to_string()));
    corpus.extend(confusions().into_iter().map(|c| format!("1. {}", c.text)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parsed = 0usize;
    for case in 0..cases {
        let base = &corpus[rng.random_range(0..corpus.len())];
        let text = mutate(&mut rng, base);
        let result = catch_unwind(AssertUnwindSafe(|| {
            let items = parse_instance_items(&text, "fz-", None);
            let _ = parse_definition_items(&text, "neg-");
            let _ = parse_tagged_text(&text);
            items
        }));
        let items = result.map_err(|_| format!("case {case} panicked on {text:?}"))?;
        for item in items {
            ensure!(
                item.parsed.is_some() != item.failure_reason.is_some(),
                "case {case}: item {} has both or neither of parsed/failure_reason",
                item.ordinal
            );
            if let Some(inst) = item.parsed {
                // Whatever parses must survive a canonical round trip.
                let (s, h, t) = parse_tagged_text(&inst.tagged_text()).map_err(|e| format!("case {case}: {e}"))?;
                ensure!(
                    s == inst.sentence() && &h == inst.head() && &t == inst.tail(),
                    "case {case}: round trip changed {:?}",
                    inst.tagged_text()
                );
                parsed += 1;
            }
        }
    }
    Ok(format!("{cases} mutated completions, {parsed} items parsed, no panics"))
}

pub fn parser_fidelity() -> Outcome {
    let mut n = 0;
    for c in completions() {
        let items = parse_instance_items(&c.completion, "p-", Some(&c.relation));
        ensure!(items.len() == c.expected.len(), "{}: {} items", c.style, items.len());
        for (item, exp) in items.iter().zip(&c.expected) {
            let inst = item
                .parsed
                .as_ref()
                .ok_or_else(|| format!("{} item {}: {:?}", c.style, item.ordinal, item.failure_reason))?;
            check_item(inst, &exp.head, &exp.tail).map_err(|e| format!("{} item {}: {e}", c.style, item.ordinal))?;
            n += 1;
        }
    }
    for (k, c) in confusions().iter().enumerate() {
        let inst = instance(&format!("c{k}"), &c.text);
        check_item(&inst, &c.head, &c.tail).map_err(|e| format!("confusion {k}: {e}"))?;
        n += 1;
    }
    let defs = definition_lines();
    for line in &defs {
        serde_json::from_str::<RelationDefinition>(line).map_err(|e| format!("{line}: {e}"))?;
    }
    for (text, reason) in malformed_items() {
        let items = parse_instance_items(text, "m-", None);
        ensure!(items.len() == 1, "{text:?}: {} items", items.len());
        ensure!(
            items[0].failure_reason == Some(reason),
            "{text:?}: {:?}, expected {reason:?}",
            items[0].failure_reason
        );
    }
    let fuzz = fuzz_parsers(1000, 721)?;
    Ok(format!(
        "{n} tagged instances, {} definitions, {} malformed fixtures; {fuzz}",
        defs.len(),
        malformed_items().len()
    ))
}

// ---------------------------------------------------------------------------

pub fn math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(722);
    let mut worst_p: f64 = 0.0;
    let mut worst_l: f64 = 0.0;
    for i in 0..1000 {
        let scale = [1.0, 10.0, 40.0][i % 3];
        let z = [0; 3].map(|_| rng.random_range(-scale..scale));
        let got = entailment_probability(z).map_err(|e| e.to_string())?;
        let want = oracle_entailment_probability(z);
        worst_p = worst_p.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "entailment_probability{z:?}: {got} vs {want}");

        let n = rng.random_range(1..=8);
        let p: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => rng.random_range(0.0..1e-6),
                1 => 1.0 - rng.random_range(0.0..1e-6),
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        let got = bce_loss(&p, &y).map_err(|e| e.to_string())?;
        let want = oracle_bce(&p, &y, PROB_EPSILON);
        worst_l = worst_l.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "bce_loss({p:?}, {y:?}): {got} vs {want}");
    }

    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let z = [0; 3].map(|_| rng.random_range(-700.0..700.0));
        let s = softmax3(z).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((s.iter().sum::<f64>() - 1.0).abs());
    }
    ensure!(worst_sum <= 1e-12, "softmax sums off by {worst_sum:e}");

    let worst_g = gradient_check(&mut rng)?;
    Ok(format!(
        "max |dp| {worst_p:.1e}, max |dloss| {worst_l:.1e}, max |sum-1| {worst_sum:.1e}, max grad rel err {worst_g:.1e}"
    ))
}

fn gradient_check(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    const DIM: usize = 32;
    let pairs: Vec<NliPair> = confusions()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let inst = instance(&format!("g{i}"), &c.text);
            build_nli_pair(&inst, &definition(&c.predicted))
        })
        .collect();
    let feats: Vec<_> = pairs.iter().map(|p| featurize(p, DIM)).collect();
    let batch: Vec<(&Vec<(usize, f64)>, f64)> = feats.iter().enumerate().map(|(i, f)| (f, (i % 2) as f64)).collect();
    let mut model = LinearModel::zeros(DIM);
    for w in model.params_mut() {
        *w = rng.random_range(-0.3..0.3);
    }
    let grad = model.gradient(&batch).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = model.loss(&batch).map_err(|e| e.to_string())?;
        model.params_mut()[i] = orig - h;
        let down = model.loss(&batch).map_err(|e| e.to_string())?;
        model.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(fd.abs());
        // Parameters of unused hash buckets have exactly zero gradient.
        if denom < 1e-7 {
            ensure!(grad[i].abs() < 1e-7, "param {i}: analytic {} but no numeric change", grad[i]);
            continue;
        }
        let rel = (grad[i] - fd).abs() / denom;
        worst = worst.max(rel);
        ensure!(rel <= 1e-4, "param {i}: analytic {} vs numeric {fd}", grad[i]);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------

pub fn golden_prompts() -> Outcome {
    for kind in PromptKind::ALL {
        ensure!(identity_render(kind) == kind.template(), "{kind}: identity render differs from the template");
    }
    let cases = golden_cases();
    for (kind, rendered) in &cases {
        compare_golden(*kind, rendered)?;
    }
    Ok(format!("{} golden renders match byte-for-byte", cases.len()))
}

// ---------------------------------------------------------------------------

const TOY_NAMES: [&str; 12] = [
    "Avery", "Blake", "Casey", "Devon", "Emery", "Finley", "Harper", "Jordan", "Kendall", "Logan", "Morgan", "Quinn",
];
const TOY_FILLER: [&str; 10] = [
    "yesterday", "at the summit", "in a letter", "after lunch", "on the radio", "during the vote", "in public",
    "at the gala", "last spring", "in the report",
];
const TOY_KEYWORD: &str = "endorsed";
const TOY_OTHER: [&str; 4] = ["met", "interviewed", "criticized", "thanked"];

fn toy_definition() -> RelationDefinition {
    RelationDefinition::positive("TOY", "<ENT0> (a person) publicly endorsed <ENT1> (a person)").unwrap()
}

/// Instances whose label is the presence of one keyword.
fn toy_instances(rng: &mut ChaCha8Rng, prefix: &str, n: usize) -> Vec<(RelationInstance, Label)> {
    (0..n)
        .map(|i| {
            let a = TOY_NAMES[rng.random_range(0..TOY_NAMES.len())];
            let mut b = TOY_NAMES[rng.random_range(0..TOY_NAMES.len())];
            while b == a {
                b = TOY_NAMES[rng.random_range(0..TOY_NAMES.len())];
            }
            let positive = rng.random_bool(0.5);
            let verb = if positive { TOY_KEYWORD } else { TOY_OTHER[rng.random_range(0..TOY_OTHER.len())] };
            let filler = TOY_FILLER[rng.random_range(0..TOY_FILLER.len())];
            let sentence = format!("{a} {verb} {b} {filler} .");
            let label = if positive { Label::Positive } else { Label::Negative };
            (toy_instance(format!("{prefix}-{i}"), &sentence, a, b), label)
        })
        .collect()
}

fn toy_label(inst: &RelationInstance) -> Label {
    if inst.sentence().contains(TOY_KEYWORD) {
        Label::Positive
    } else {
        Label::Negative
    }
}

fn to_pairs(def: &RelationDefinition, xs: &[(RelationInstance, Label)]) -> Vec<LabeledNliPair> {
    xs.iter().map(|(i, l)| LabeledNliPair::new(build_nli_pair(i, def), *l)).collect()
}

pub fn toy_learning() -> Outcome {
    let def = toy_definition();
    let mut rng = ChaCha8Rng::seed_from_u64(724);
    let mut train = toy_instances(&mut rng, "tr", 200);
    let dev = toy_instances(&mut rng, "dv", 100);
    let pool = CorpusStore::from_instances(toy_instances(&mut rng, "pool", 400).into_iter().map(|(i, _)| i));
    let params = TrainParams {
        learning_rate: 0.5,
        batch_size: 8,
        ..TrainParams::default()
    };
    let backend = ReferenceBackend::new(1 << 12);
    let spec = |train: &[(RelationInstance, Label)]| TrainSpec {
        train: to_pairs(&def, train),
        dev: to_pairs(&def, &dev),
        params: params.clone(),
    };
    let first = backend.train(&spec(&train)).map_err(|e| e.to_string())?;
    let f1_1 = first.selected().ok_or("no selected epoch")?.dev.f1;
    ensure!(f1_1 >= 0.95, "iteration-1 selected-epoch dev F1 {f1_1:.3} < 0.95");

    // Scripted feedback: in-band predictions on the pool, labeled by the keyword rule.
    let table = score_corpus(&backend, &first.model_handle, &def, &pool, Default::default(), 1)
        .map_err(|e| e.to_string())?;
    let bands = FeedbackBands::default();
    let mut added = 0;
    for purpose in [FeedbackPurpose::FollowupPositive, FeedbackPurpose::Negdef] {
        let samples = sample_feedback(&table, &pool, purpose, 10, &bands, 7, &HashSet::new()).map_err(|e| e.to_string())?;
        for s in samples.iter().flat_map(|s| &s.instances) {
            train.push((s.instance.clone(), toy_label(&s.instance)));
            added += 1;
        }
    }
    let second = backend.train(&spec(&train)).map_err(|e| e.to_string())?;
    let f1_2 = second.selected().ok_or("no selected epoch")?.dev.f1;
    ensure!(f1_2 >= f1_1, "iteration-2 F1 {f1_2:.3} < iteration-1 F1 {f1_1:.3}");
    let dev_metrics: &BinaryMetrics = &second.selected().unwrap().dev;
    Ok(format!(
        "dev F1 {f1_1:.3} (epoch {}) -> {f1_2:.3} (epoch {}) after {added} feedback instances; tp {} fp {}",
        first.selected_epoch, second.selected_epoch, dev_metrics.tp, dev_metrics.fp
    ))
}
