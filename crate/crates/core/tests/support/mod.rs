//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_bigint::{BigInt, Sign};
use num_traits::{One, ToPrimitive, Zero};
use relsynth::prompting::{
    render_baseline_prompt, render_definition_derivation_prompt, render_followup_positive_prompt,
    render_negdef_prompt, render_seed_prompt, BaselineKind, PromptKind, PromptRequest, SeedStyle, DERIVATION_DEMOS,
};
use relsynth::types::{
    parse_tagged_text, DefinitionOrigin, InstanceSource, Polarity, RelationDefinition, RelationInstance,
};
use serde::Deserialize;

pub mod checks;

pub fn core_tests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests").canonicalize().unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    core_tests_dir().join("fixtures").join(name)
}

pub fn golden_dir() -> PathBuf {
    core_tests_dir().join("golden")
}

// ---------------------------------------------------------------------------
// Fixtures

#[derive(Debug, Deserialize)]
pub struct Expected {
    pub head: String,
    pub tail: String,
}

#[derive(Debug, Deserialize)]
pub struct Completion {
    pub relation: String,
    pub style: String,
    pub completion: String,
    pub expected: Vec<Expected>,
}

#[derive(Debug, Deserialize)]
pub struct TaggedCase {
    pub gold: String,
    pub predicted: String,
    pub text: String,
    pub head: String,
    pub tail: String,
}

pub fn completions() -> Vec<Completion> {
    serde_json::from_str(&std::fs::read_to_string(fixture("p241_completions.json")).unwrap()).unwrap()
}

pub fn confusions() -> Vec<TaggedCase> {
    serde_json::from_str(&std::fs::read_to_string(fixture("confusions.json")).unwrap()).unwrap()
}

/// Raw definition records; parse them with `serde_json` to validate.
pub fn definition_lines() -> Vec<String> {
    std::fs::read_to_string(fixture("fewrel_definitions.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect()
}

pub fn definitions() -> Vec<RelationDefinition> {
    definition_lines().iter().map(|l| serde_json::from_str(l).unwrap()).collect()
}

pub fn definition(id: &str) -> RelationDefinition {
    definitions().into_iter().find(|d| d.id() == id).unwrap()
}

pub fn instance(id: &str, tagged: &str) -> RelationInstance {
    let (sentence, head, tail) = parse_tagged_text(tagged).unwrap();
    RelationInstance::new(id, sentence, head, tail, InstanceSource::Corpus, None).unwrap()
}

fn items(c: &Completion) -> Vec<String> {
    c.completion
        .lines()
        .map(|l| l.split_once(". ").unwrap().1.to_string())
        .collect()
}

// ---------------------------------------------------------------------------
// Golden prompts

/// Every template kind with a golden file, and a rendering filled from the fixtures.
pub fn golden_cases() -> Vec<(PromptKind, String)> {
    let p241 = definition("P241");
    let comps = completions();
    let brief = items(&comps[0]);
    let feedback: Vec<RelationInstance> = confusions()
        .into_iter()
        .filter(|c| c.gold == "P241")
        .enumerate()
        .map(|(i, c)| instance(&format!("fb-{i}"), &c.text))
        .collect();
    let query = feedback[0].clone();
    let p410 = definition("P410");
    let prev = RelationDefinition::new(
        "P241-neg-1",
        p410.template(),
        Polarity::Negative,
        DefinitionOrigin::LlmGeneratedNegative,
    )
    .unwrap();
    let medium_items = items(&comps[1]);
    let all = definitions();
    vec![
        (PromptKind::InitialPosBrief, render_seed_prompt(&p241, 5, SeedStyle::Brief).unwrap()),
        (PromptKind::InitialPosMedium, render_seed_prompt(&p241, 5, SeedStyle::Medium).unwrap()),
        (PromptKind::InitialPosImplicit, render_seed_prompt(&p241, 5, SeedStyle::Implicit).unwrap()),
        (PromptKind::FollowupPos, render_followup_positive_prompt(&p241, 5, &medium_items).unwrap()),
        (PromptKind::NegdefFirst, render_negdef_prompt(&p241, &feedback, 5, None).unwrap()),
        (
            PromptKind::NegdefSubsequent,
            render_negdef_prompt(&p241, &feedback, 5, Some(std::slice::from_ref(&prev))).unwrap(),
        ),
        (
            PromptKind::BaselineBinary,
            render_baseline_prompt(BaselineKind::BinaryChoice, std::slice::from_ref(&p241), &query, None).unwrap(),
        ),
        (
            PromptKind::BaselineQaBinary,
            render_baseline_prompt(BaselineKind::QaBinary, std::slice::from_ref(&p241), &query, None).unwrap(),
        ),
        (
            PromptKind::BaselineQaMulti,
            render_baseline_prompt(BaselineKind::QaMulti, &all, &query, None).unwrap(),
        ),
        (PromptKind::DefDerivation, render_definition_derivation_prompt(&brief, &DERIVATION_DEMOS).unwrap()),
    ]
}

pub fn golden_path(kind: PromptKind) -> PathBuf {
    golden_dir().join(format!("{kind}.txt"))
}

/// Renders `kind` with every slot filled by its own `{name}`.
pub fn identity_render(kind: PromptKind) -> String {
    kind.slots()
        .into_iter()
        .fold(PromptRequest::new(kind), |r, s| r.slot(s, format!("{{{s}}}")))
        .render()
        .unwrap()
}

/// Byte-level comparison against the stored file; returns a description of the first difference.
pub fn compare_golden(kind: PromptKind, rendered: &str) -> Result<(), String> {
    let path = golden_path(kind);
    let stored = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if stored == rendered.as_bytes() {
        return Ok(());
    }
    let at = stored.iter().zip(rendered.as_bytes()).take_while(|(a, b)| a == b).count();
    Err(format!(
        "{kind}: differs at byte {at} (stored {} bytes, rendered {})",
        stored.len(),
        rendered.len()
    ))
}

// ---------------------------------------------------------------------------
// Metrics oracle

/// Straight recount: for every target and instance, tally the cell it lands in.
pub fn brute_force_counts(
    group: &BTreeMap<String, Vec<String>>,
    predictions: &std::collections::HashMap<String, bool>,
    target: &str,
) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (rel, ids) in group {
        for id in ids {
            let gold = rel == target;
            let pred = predictions[id];
            if gold && pred {
                tp += 1;
            } else if !gold && pred {
                fp += 1;
            } else if gold {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
    }
    (tp, fp, fn_, tn)
}

// ---------------------------------------------------------------------------
// Arbitrary-precision oracle: fixed point with 2^-FRAC resolution.

pub const FRAC: u32 = 320;

fn one() -> BigInt {
    BigInt::one() << FRAC
}

/// Exact fixed-point image of a finite f64 (truncated below 2^-FRAC).
pub fn fixed(x: f64) -> BigInt {
    assert!(x.is_finite());
    if x == 0.0 {
        return BigInt::zero();
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { Sign::Minus } else { Sign::Plus };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
    let m = BigInt::from_biguint(sign, mantissa.into());
    let shift = e + FRAC as i64;
    if shift >= 0 {
        m << shift as usize
    } else {
        m >> (-shift) as usize
    }
}

pub fn to_f64(v: &BigInt) -> f64 {
    // Keep 64 significant bits before converting so huge values stay in range.
    let bits = v.bits() as i64;
    let drop = (bits - 64).max(0);
    let head = (v >> drop as usize).to_f64().unwrap();
    head * 2f64.powi((drop - FRAC as i64) as i32)
}

fn mul(a: &BigInt, b: &BigInt) -> BigInt {
    (a * b) >> FRAC
}

fn div(a: &BigInt, b: &BigInt) -> BigInt {
    (a << FRAC) / b
}

/// e^x by halving the argument, a Taylor series, then repeated squaring.
pub fn exp_fixed(x: &BigInt) -> BigInt {
    if x.sign() == Sign::Minus {
        return div(&one(), &exp_fixed(&-x));
    }
    let mut halvings = 0;
    let mut r = x.clone();
    while r > (one() >> 4) {
        r >>= 1;
        halvings += 1;
    }
    let mut sum = one();
    let mut term = one();
    for k in 1..200u32 {
        term = mul(&term, &r) / k;
        if term.is_zero() {
            break;
        }
        sum += &term;
    }
    for _ in 0..halvings {
        sum = mul(&sum, &sum);
    }
    sum
}

/// 2·atanh(t) for |t| ≤ 1/3.
fn two_atanh(t: &BigInt) -> BigInt {
    let t2 = mul(t, t);
    let mut power = t.clone();
    let mut sum = BigInt::zero();
    let mut k = 1u32;
    while !power.is_zero() {
        sum += &power / k;
        power = mul(&power, &t2);
        k += 2;
    }
    sum * 2
}

/// ln(x) for x > 0: x = m·2^k with m in [1, 2), ln m via atanh.
pub fn ln_fixed(x: &BigInt) -> BigInt {
    assert!(x.sign() == Sign::Plus, "ln of a non-positive value");
    let k = x.bits() as i64 - 1 - FRAC as i64;
    let m = if k >= 0 { x >> k as usize } else { x << (-k) as usize };
    let ln2 = two_atanh(&div(&one(), &(one() * 3)));
    let t = div(&(&m - one()), &(&m + one()));
    two_atanh(&t) + ln2 * k
}

pub fn oracle_entailment_probability(z: [f64; 3]) -> f64 {
    let e: Vec<BigInt> = z.iter().map(|&v| exp_fixed(&fixed(v))).collect();
    let s = &e[0] + &e[1] + &e[2];
    to_f64(&div(&e[0], &s))
}

pub fn oracle_bce(p: &[f64], y: &[f64], eps: f64) -> f64 {
    let mut total = BigInt::zero();
    for (&p, &y) in p.iter().zip(y) {
        let pc = fixed(p.clamp(eps, 1.0 - eps));
        let yf = fixed(y);
        let term = mul(&yf, &ln_fixed(&pc)) + mul(&(one() - &yf), &ln_fixed(&(one() - &pc)));
        total -= term;
    }
    to_f64(&total) / p.len() as f64
}
