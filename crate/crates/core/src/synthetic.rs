//! A small synthetic relation world for offline runs: four relations with fixed
//! surface patterns and near-miss relations, a generator for an unlabeled corpus
//! and a gold test set, and a scripted [`Responder`] that answers every prompt
//! kind the pipeline sends.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::corpus::{group_by_relation, CorpusStore, EvalGroup};
use crate::llm::Responder;
use crate::llm::ChatRequest;
use crate::refine::{Counts, RunConfig};
use crate::classifier::TrainParams;
use crate::types::{InstanceSource, RelationDefinition, RelationInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityKind {
    Person,
    Org,
    Place,
    Country,
}

#[derive(Debug)]
pub struct NearMiss {
    pub definition: &'static str,
    pub patterns: &'static [&'static str],
}

/// One relation of the world. Patterns use `{h}` for the head and `{t}` for the tail.
#[derive(Debug)]
pub struct RelationSpec {
    pub id: &'static str,
    pub definition: &'static str,
    pub head: EntityKind,
    pub tail: EntityKind,
    /// Patterns the scripted LLM produces.
    pub patterns: &'static [&'static str],
    /// Patterns only found in the corpus and test set.
    pub corpus_only: &'static [&'static str],
    pub near_misses: &'static [NearMiss],
}

impl RelationSpec {
    pub fn relation_definition(&self) -> RelationDefinition {
        RelationDefinition::positive(self.id, self.definition).expect("static definitions are valid")
    }

    fn all_patterns(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.patterns.iter().chain(self.corpus_only).copied()
    }
}

use EntityKind::*;

pub static RELATIONS: [RelationSpec; 4] = [
    RelationSpec {
        id: "spouse",
        definition: "<ENT0> was/is married to <ENT1> (both are persons)",
        head: Person,
        tail: Person,
        patterns: &[
            "{h} married {t} in a small ceremony .",
            "{h} and {t} celebrated their tenth wedding anniversary .",
            "{h} has been the husband of {t} since 2004 .",
            "After a long courtship , {h} wed {t} .",
            "{h} lives in the countryside with his wife {t} .",
            "{t} , who is married to {h} , attended the gala .",
            "{h} introduced {t} as her husband .",
            "{h} tied the knot with {t} last summer .",
        ],
        corpus_only: &[
            "{h} exchanged vows with {t} at the chapel .",
            "{t} became the spouse of {h} in 1999 .",
        ],
        near_misses: &[
            NearMiss {
                definition: "<ENT0> was/is a sibling of <ENT1> (both are persons)",
                patterns: &["{h} grew up with her brother {t} .", "{h} is the younger sister of {t} ."],
            },
            NearMiss {
                definition: "<ENT0> was/is engaged to <ENT1> (both are persons)",
                patterns: &["{h} got engaged to {t} in spring .", "{h} announced the engagement to {t} ."],
            },
            NearMiss {
                definition: "<ENT0> was/is a parent of <ENT1> (both are persons)",
                patterns: &["{h} raised her son {t} alone .", "{h} is the father of {t} ."],
            },
            NearMiss {
                definition: "<ENT0> was/is a colleague of <ENT1> (both are persons)",
                patterns: &["{h} worked alongside {t} for a decade .", "{h} shared an office with {t} ."],
            },
            NearMiss {
                definition: "<ENT0> was/is divorced from <ENT1> (both are persons)",
                patterns: &["{h} divorced {t} after a long dispute .", "{h} separated from {t} in 2011 ."],
            },
            NearMiss {
                definition: "<ENT0> was/is a close friend of <ENT1> (both are persons)",
                patterns: &["{h} befriended {t} at school .", "{h} spent the holidays with her friend {t} ."],
            },
        ],
    },
    RelationSpec {
        id: "employer",
        definition: "<ENT1> (an organization) was/is the employer of <ENT0> (a person)",
        head: Person,
        tail: Org,
        patterns: &[
            "{h} works as an engineer at {t} .",
            "{h} joined {t} as chief analyst in 2015 .",
            "{h} , a senior manager at {t} , spoke to reporters .",
            "{t} hired {h} to lead its research team .",
            "{h} has been employed by {t} for six years .",
            "{t} promoted {h} to vice president .",
            "{h} is on the payroll of {t} .",
        ],
        corpus_only: &[
            "{h} took a job with {t} after graduating .",
            "{t} appointed {h} as head of sales .",
        ],
        near_misses: &[
            NearMiss {
                definition: "<ENT0> (a person) was/is the founder of <ENT1> (an organization)",
                patterns: &["{h} founded {t} in a garage .", "{h} started {t} with two friends ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) was/is a customer of <ENT1> (an organization)",
                patterns: &["{h} bought a laptop from {t} .", "{h} complained about the service of {t} ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) studied at <ENT1> (an organization)",
                patterns: &["{h} studied economics at {t} .", "{h} graduated from {t} ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) sued <ENT1> (an organization)",
                patterns: &["{h} filed a lawsuit against {t} .", "{h} sued {t} for damages ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) invested in <ENT1> (an organization)",
                patterns: &["{h} bought shares in {t} .", "{h} invested heavily in {t} ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) reported on <ENT1> (an organization)",
                patterns: &["{h} wrote an exposé on {t} .", "{h} covered the merger of {t} ."],
            },
        ],
    },
    RelationSpec {
        id: "birthplace",
        definition: "<ENT1> (a location) was/is the place of birth of <ENT0> (a person)",
        head: Person,
        tail: Place,
        patterns: &[
            "{h} was born in {t} .",
            "Born in {t} , {h} moved abroad as a teenager .",
            "{h} , a native of {t} , won the award .",
            "{t} is the hometown where {h} was born .",
            "{h} came into the world in {t} in 1970 .",
            "{h} was born and raised in {t} .",
        ],
        corpus_only: &[
            "{t} , the birthplace of {h} , unveiled a statue .",
            "{h} , born 1961 in {t} , is a painter .",
        ],
        near_misses: &[
            NearMiss {
                definition: "<ENT0> (a person) died in <ENT1> (a location)",
                patterns: &["{h} died in {t} at the age of 80 .", "{h} passed away in {t} ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) lived in <ENT1> (a location)",
                patterns: &["{h} lived in {t} for many years .", "{h} settled in {t} after the war ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) visited <ENT1> (a location)",
                patterns: &["{h} visited {t} during the tour .", "{h} travelled to {t} last week ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) was/is buried in <ENT1> (a location)",
                patterns: &["{h} is buried in {t} .", "{h} was laid to rest in {t} ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) studied in <ENT1> (a location)",
                patterns: &["{h} studied in {t} for two years .", "{h} attended college in {t} ."],
            },
            NearMiss {
                definition: "<ENT0> (a person) performed in <ENT1> (a location)",
                patterns: &["{h} performed in {t} to a sold-out crowd .", "{h} gave a concert in {t} ."],
            },
        ],
    },
    RelationSpec {
        id: "capital",
        definition: "<ENT1> (a city) was/is the capital of <ENT0> (a country)",
        head: Country,
        tail: Place,
        patterns: &[
            "{t} is the capital of {h} .",
            "The government of {h} sits in its capital {t} .",
            "{t} , capital city of {h} , hosted the summit .",
            "{h} moved its capital to {t} in 1960 .",
            "The parliament of {h} convenes in {t} , the national capital .",
        ],
        corpus_only: &[
            "{t} serves as the seat of government of {h} .",
            "The capital of {h} , {t} , is crowded in summer .",
        ],
        near_misses: &[
            NearMiss {
                definition: "<ENT1> (a city) was/is the largest city of <ENT0> (a country)",
                patterns: &["{t} is the largest city in {h} .", "{t} , the most populous city of {h} , grew fast ."],
            },
            NearMiss {
                definition: "<ENT1> (a city) was/is located in <ENT0> (a country)",
                patterns: &["{t} is a port town in {h} .", "{t} lies in the north of {h} ."],
            },
            NearMiss {
                definition: "<ENT1> (a city) was/is a former capital of <ENT0> (a country)",
                patterns: &["{t} was the capital of {h} until 1900 .", "{h} abandoned its old capital {t} ."],
            },
            NearMiss {
                definition: "<ENT1> (a city) was/is the financial center of <ENT0> (a country)",
                patterns: &["{t} is the financial hub of {h} .", "Banks of {h} cluster in {t} ."],
            },
            NearMiss {
                definition: "<ENT1> (a city) hosted an event of <ENT0> (a country)",
                patterns: &["{t} hosted the national games of {h} .", "{h} held its film festival in {t} ."],
            },
            NearMiss {
                definition: "<ENT1> (a city) was/is a sister city of a city in <ENT0> (a country)",
                patterns: &["{t} is twinned with a town in {h} .", "{t} signed a partnership with cities of {h} ."],
            },
        ],
    },
];

const DISTRACTORS: [&str; 6] = [
    "{h} met {t} at a conference .",
    "{h} wrote a book about {t} .",
    "{h} criticized {t} in an interview .",
    "{h} mentioned {t} in a speech .",
    "A photo shows {h} next to {t} .",
    "{h} and {t} appeared in the same report .",
];

const IMPLICIT_CONTEXT: [&str; 4] = [
    "According to local records , ",
    "As the archive notes , ",
    "In a little-known chapter , ",
    "Years later , it emerged that ",
];

const FIRST: [&str; 25] = [
    "Alma", "Bruno", "Celia", "Dario", "Elena", "Felix", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Lukas", "Mara",
    "Nico", "Olga", "Pavel", "Rosa", "Simon", "Tara", "Viktor", "Wanda", "Yannick", "Zora", "Emil", "Lena",
];
const LAST: [&str; 25] = [
    "Adler", "Brandt", "Costa", "Dekker", "Eriksen", "Fischer", "Garnier", "Horvat", "Ivanov", "Jansen", "Keller",
    "Lindqvist", "Moreau", "Novak", "Ortega", "Petrov", "Quist", "Rossi", "Sandoval", "Takahashi", "Umberto", "Varga",
    "Weber", "Yilmaz", "Zeller",
];
const ORG_A: [&str; 12] = [
    "Norvale", "Brightwater", "Kestrel", "Orion", "Silverline", "Redwood", "Bluepeak", "Ironbridge", "Northwind",
    "Suncrest", "Greyhaven", "Larkspur",
];
const ORG_B: [&str; 10] = [
    "Systems", "Labs", "Group", "Holdings", "Motors", "Analytics", "Bank", "Media", "Foods", "Logistics",
];
const PLACE_A: [&str; 16] = [
    "Ash", "Bel", "Cor", "Dun", "El", "Fair", "Glen", "Hal", "Kings", "Lin", "Mar", "Oak", "Pen", "Rock", "Stan", "Wex",
];
const PLACE_B: [&str; 10] = ["ford", "haven", "mouth", "bury", "ton", "wick", "field", "port", "stead", "more"];
const COUNTRIES: [&str; 24] = [
    "Arvenia", "Belmora", "Caldera", "Dravia", "Estoria", "Fenland", "Galvia", "Helvora", "Istria", "Jorvik",
    "Kaldoria", "Lusitara", "Merovia", "Novaria", "Ostrava", "Pelagia", "Quenara", "Rusovia", "Sarnia", "Tavira",
    "Ulmeria", "Valdora", "Westmark", "Zelandia",
];

fn entity(kind: EntityKind, rng: &mut impl Rng) -> String {
    let pick = |r: &mut dyn rand::RngCore, xs: &[&str]| xs[r.random_range(0..xs.len())].to_string();
    match kind {
        Person => format!("{} {}", pick(rng, &FIRST), pick(rng, &LAST)),
        Org => format!("{} {}", pick(rng, &ORG_A), pick(rng, &ORG_B)),
        Place => format!("{}{}", pick(rng, &PLACE_A), pick(rng, &PLACE_B)),
        Country => pick(rng, &COUNTRIES),
    }
}

/// Fills a pattern with tagged mentions.
pub fn tagged_sentence(pattern: &str, head: &str, tail: &str) -> String {
    pattern
        .replace("{h}", &format!("<ENT0> {head} </ENT0>"))
        .replace("{t}", &format!("<ENT1> {tail} </ENT1>"))
}

fn fill(pattern: &str, head: EntityKind, tail: EntityKind, rng: &mut impl Rng) -> String {
    let h = entity(head, rng);
    let mut t = entity(tail, rng);
    while t == h {
        t = entity(tail, rng);
    }
    tagged_sentence(pattern, &h, &t)
}

pub fn relation(id: &str) -> Option<&'static RelationSpec> {
    RELATIONS.iter().find(|r| r.id == id)
}

fn by_definition(template: &str) -> Option<&'static RelationSpec> {
    RELATIONS.iter().find(|r| r.definition == template)
}

fn near_miss_by_definition(template: &str) -> Option<(&'static RelationSpec, &'static NearMiss)> {
    RELATIONS
        .iter()
        .flat_map(|r| r.near_misses.iter().map(move |n| (r, n)))
        .find(|(_, n)| n.definition == template)
}

pub fn definitions() -> Vec<RelationDefinition> {
    RELATIONS.iter().map(RelationSpec::relation_definition).collect()
}

/// Generated corpus and gold test set.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Vec<RelationInstance>,
    pub test: Vec<RelationInstance>,
}

pub const CORPUS_SIZE: usize = 2000;
pub const TEST_PER_RELATION: usize = 40;
const CORPUS_POSITIVES: usize = 120;
const CORPUS_NEAR_MISSES: usize = 150;

fn push_unique(
    out: &mut Vec<RelationInstance>,
    seen: &mut HashSet<crate::types::DedupKey>,
    tagged: &str,
    source: InstanceSource,
    relation: Option<&str>,
    prefix: &str,
) {
    let inst = RelationInstance::from_tagged(prefix, tagged, source, relation.map(str::to_string))
        .expect("generated sentences are well formed");
    if seen.insert(inst.dedup_key()) {
        out.push(inst);
    }
}

/// Deterministic corpus (2,000 instances) and test set (40 per relation).
pub fn generate(seed: u64) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut corpus = Vec::with_capacity(CORPUS_SIZE);
    for r in &RELATIONS {
        let patterns: Vec<&str> = r.all_patterns().collect();
        let start = corpus.len();
        while corpus.len() - start < CORPUS_POSITIVES {
            let p = patterns.choose(&mut rng).expect("patterns");
            let s = fill(p, r.head, r.tail, &mut rng);
            push_unique(&mut corpus, &mut seen, &s, InstanceSource::Corpus, None, "corpus");
        }
        let start = corpus.len();
        while corpus.len() - start < CORPUS_NEAR_MISSES {
            let nm = r.near_misses.choose(&mut rng).expect("near misses");
            let s = fill(nm.patterns.choose(&mut rng).expect("patterns"), r.head, r.tail, &mut rng);
            push_unique(&mut corpus, &mut seen, &s, InstanceSource::Corpus, None, "corpus");
        }
    }
    let kinds = [Person, Org, Place, Country];
    while corpus.len() < CORPUS_SIZE {
        let p = DISTRACTORS.choose(&mut rng).expect("distractors");
        let (h, t) = (*kinds.choose(&mut rng).unwrap(), *kinds.choose(&mut rng).unwrap());
        let s = fill(p, h, t, &mut rng);
        push_unique(&mut corpus, &mut seen, &s, InstanceSource::Corpus, None, "corpus");
    }
    let mut test = Vec::new();
    for r in &RELATIONS {
        let patterns: Vec<&str> = r.all_patterns().collect();
        let start = test.len();
        while test.len() - start < TEST_PER_RELATION {
            let s = fill(patterns.choose(&mut rng).expect("patterns"), r.head, r.tail, &mut rng);
            push_unique(&mut test, &mut seen, &s, InstanceSource::GoldTest, Some(r.id), &format!("test-{}", r.id));
        }
    }
    SyntheticData { corpus, test }
}

/// Demo run config: two iterations, reference-backend learning rate.
pub fn demo_config() -> RunConfig {
    RunConfig {
        counts: Counts::default(),
        train: TrainParams {
            learning_rate: 0.5,
            batch_size: 8,
            ..TrainParams::default()
        },
        max_iterations: 2,
        rng_seed: 13,
        ..RunConfig::default()
    }
}

pub const BUNDLE_SEED: u64 = 2024;

/// Writes definitions, corpus, test set, few-shot file and demo config to `dir`.
pub fn write_bundle(dir: &Path, seed: u64) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let data = generate(seed);
    let lines = |xs: &[RelationInstance]| xs.iter().map(|i| i.to_json_line() + "\n").collect::<String>();
    fs::write(dir.join("corpus.jsonl"), lines(&data.corpus))?;
    fs::write(dir.join("test.jsonl"), lines(&data.test))?;
    let defs: String = definitions()
        .iter()
        .map(|d| serde_json::to_string(d).expect("serializable") + "\n")
        .collect();
    fs::write(dir.join("definitions.jsonl"), defs)?;
    let shots: Vec<RelationInstance> = data
        .test
        .iter()
        .filter(|i| i.relation() == Some("birthplace"))
        .take(5)
        .cloned()
        .collect();
    fs::write(dir.join("shots.jsonl"), lines(&shots))?;
    let group = EvalGroup::new(group_by_relation(data.test.iter().cloned()), seed);
    fs::write(
        dir.join("group.json"),
        serde_json::to_string(&group).expect("serializable") + "\n",
    )?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&demo_config()).expect("serializable") + "\n",
    )
}

pub fn corpus_store(seed: u64) -> CorpusStore {
    CorpusStore::from_instances(generate(seed).corpus)
}

/// Scripted LLM for the synthetic world.
///
/// Generation replies use the relation's producible patterns; the first turn of a
/// thread sometimes contains one malformed item so repair turns get exercised.
/// Baseline questions are answered by pattern lookup.
#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticResponder;

struct Patterns {
    defined_by: Regex,
    followup: Regex,
    topup: Regex,
    count: Regex,
    existing: Regex,
    binary_instance: Regex,
    qa_instance: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        defined_by: Regex::new(r#"defined by:? "([^"]+)""#).unwrap(),
        followup: Regex::new(r#"pre-defined relation: "([^"]+)""#).unwrap(),
        topup: Regex::new(r#"expressing the relation: "([^"]+)""#).unwrap(),
        count: Regex::new(r"(?i)generate (\d+) ").unwrap(),
        existing: Regex::new(r"(?s)Existing generated negative relation definitions are:\n\n(.*?)\n\nBased on").unwrap(),
        binary_instance: Regex::new(r#"Now given an instance: "(.+)", choose"#).unwrap(),
        qa_instance: Regex::new(r"Now answer:\nInstance: (.+)\n").unwrap(),
    })
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Literal fragments of a pattern around its placeholders.
fn fragments(pattern: &str) -> Vec<String> {
    pattern
        .split(['{', '}'])
        .filter(|s| *s != "h" && *s != "t")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Whether `sentence` is an instance of `pattern`.
pub fn matches_pattern(sentence: &str, pattern: &str) -> bool {
    let mut rest = sentence;
    for f in fragments(pattern) {
        match rest.find(&f) {
            Some(i) => rest = &rest[i + f.len()..],
            None => return false,
        }
    }
    true
}

fn expresses(spec: &RelationSpec, sentence: &str) -> bool {
    spec.all_patterns().any(|p| matches_pattern(sentence, p))
}

impl SyntheticResponder {
    fn generate_items(
        &self,
        patterns: &[&str],
        head: EntityKind,
        tail: EntityKind,
        n: usize,
        implicit: bool,
        allow_malformed: bool,
        rng: &mut ChaCha8Rng,
    ) -> String {
        let mut items: Vec<String> = (0..n)
            .map(|_| {
                let s = fill(patterns.choose(rng).expect("patterns"), head, tail, rng);
                if implicit {
                    let ctx = IMPLICIT_CONTEXT.choose(rng).expect("contexts");
                    format!("{ctx}{s}")
                } else {
                    s
                }
            })
            .collect();
        if allow_malformed && n >= 4 && rng.random_bool(0.5) {
            items[1] = items[1].replacen(" </ENT1>", "", 1);
        }
        format!("Here are the examples:\n\n{}", numbered(&items))
    }

    fn negdefs(&self, spec: &RelationSpec, prompt: &str, n: usize) -> String {
        let existing: HashSet<String> = patterns()
            .existing
            .captures(prompt)
            .map(|c| {
                crate::synthesis::parse_numbered_items(&c[1])
                    .into_iter()
                    .map(|(_, b)| b)
                    .collect()
            })
            .unwrap_or_default();
        let mut defs: Vec<String> = spec
            .near_misses
            .iter()
            .map(|m| m.definition.to_string())
            .filter(|d| !existing.contains(d))
            .take(n)
            .collect();
        let mut k = existing.len() + defs.len();
        while defs.len() < n {
            k += 1;
            defs.push(format!("<ENT0> was/is mentioned together with <ENT1> (variant {k})"));
        }
        format!(
            "The model seems to over-predict related but different relations.\n\n{}",
            numbered(&defs)
        )
    }

    fn judge(&self, prompt: &str) -> String {
        let p = patterns();
        let def = p.defined_by.captures(prompt).map(|c| c[1].to_string());
        let inst = p
            .binary_instance
            .captures(prompt)
            .or_else(|| p.qa_instance.captures(prompt))
            .map(|c| c[1].to_string());
        let yes = match (def.as_deref().and_then(by_definition), inst) {
            (Some(spec), Some(tagged)) => crate::types::parse_tagged_text(&tagged)
                .map(|(sentence, _, _)| expresses(spec, &sentence))
                .unwrap_or(false),
            _ => false,
        };
        if yes { "Option 1: Yes" } else { "Option 2: No" }.to_string()
    }

    fn derive(&self, prompt: &str) -> String {
        let list = prompt.split("The list of relation instances/examples is:").nth(1).unwrap_or("");
        let sentences: Vec<String> = crate::synthesis::parse_numbered_items(list)
            .into_iter()
            .filter_map(|(_, b)| crate::types::parse_tagged_text(&b).ok().map(|x| x.0))
            .collect();
        let best = RELATIONS
            .iter()
            .max_by_key(|r| sentences.iter().filter(|s| expresses(r, s)).count())
            .expect("relations");
        format!("Relation definition: {}", best.definition)
    }
}

impl Responder for SyntheticResponder {
    fn respond(&self, request: &ChatRequest, seed: u64) -> Option<String> {
        let prompt = &request.messages.last()?.content;
        let p = patterns();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p
            .count
            .captures(prompt)
            .and_then(|c| c[1].parse::<usize>().ok())
            .unwrap_or(5);
        if prompt.contains("negative binary relation definitions") {
            let def = p.defined_by.captures(prompt)?;
            return Some(self.negdefs(by_definition(&def[1])?, prompt, n));
        }
        if prompt.contains("derive the relation definition") {
            return Some(self.derive(prompt));
        }
        if prompt.contains("choose one option to answer") {
            return Some(self.judge(prompt));
        }
        if prompt.starts_with("Determine which option") {
            return Some("A".into());
        }
        let (def, first_turn) = if let Some(c) = p.topup.captures(prompt) {
            (c[1].to_string(), false)
        } else if let Some(c) = p.followup.captures(prompt) {
            (c[1].to_string(), true)
        } else {
            (p.defined_by.captures(prompt)?[1].to_string(), true)
        };
        let implicit = prompt.contains("implicit or complicated");
        if let Some(spec) = by_definition(&def) {
            return Some(self.generate_items(spec.patterns, spec.head, spec.tail, n, implicit, first_turn, &mut rng));
        }
        if let Some((spec, nm)) = near_miss_by_definition(&def) {
            return Some(self.generate_items(nm.patterns, spec.head, spec.tail, n, implicit, first_turn, &mut rng));
        }
        Some(self.generate_items(&DISTRACTORS, Person, Person, n, implicit, first_turn, &mut rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_sized() {
        let a = generate(1);
        let b = generate(1);
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.corpus.len(), CORPUS_SIZE);
        assert_eq!(a.test.len(), 4 * TEST_PER_RELATION);
        let ids: HashSet<&str> = a.corpus.iter().map(RelationInstance::id).collect();
        assert_eq!(ids.len(), CORPUS_SIZE);
    }

    #[test]
    fn pattern_matching() {
        let s = "Alma Adler married Bruno Brandt in a small ceremony .";
        assert!(matches_pattern(s, "{h} married {t} in a small ceremony ."));
        assert!(!matches_pattern(s, "{h} divorced {t} after a long dispute ."));
        assert!(expresses(&RELATIONS[0], s));
    }

    #[test]
    fn every_definition_and_near_miss_is_valid() {
        for r in &RELATIONS {
            r.relation_definition();
            for nm in r.near_misses {
                RelationDefinition::new(
                    "x",
                    nm.definition,
                    crate::types::Polarity::Negative,
                    crate::types::DefinitionOrigin::LlmGeneratedNegative,
                )
                .unwrap();
            }
            assert!(r.near_misses.len() >= 5);
        }
    }
}
