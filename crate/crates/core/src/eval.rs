//! Synthetic multi-session benchmark with planted evidence, and the
//! end-to-end evaluation run (ingest, then one retrieval loop per question).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construction::{chunk_turns, ingest_stream, ConstructionConfig, IngestFailure, IngestOutcome};
use crate::db::{DbSnapshot, MemoryDb};
use crate::embedding::Embedder;
use crate::memory::{TurnId, TurnRecord};
use crate::metrics::{accuracy, bleu1, token_f1, AccuracyRule};
use crate::policy::rules::{format_date, EVENTS, RELATIVE_TIMES};
use crate::policy::Policy;
use crate::retrieval::{retrieve_loop, RetrievalConfig, Sampling, Trajectory};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QaCategory {
    SingleHop,
    MultiHop,
    Temporal,
    Update,
}

impl QaCategory {
    pub const ALL: [QaCategory; 4] = [QaCategory::SingleHop, QaCategory::MultiHop, QaCategory::Temporal, QaCategory::Update];

    pub fn as_str(self) -> &'static str {
        match self {
            QaCategory::SingleHop => "single_hop",
            QaCategory::MultiHop => "multi_hop",
            QaCategory::Temporal => "temporal",
            QaCategory::Update => "update",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaCase {
    pub case_id: String,
    pub query: String,
    pub gold_answer: String,
    pub evidence_turn_ids: BTreeSet<TurnId>,
    pub category: QaCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSize {
    /// Lower bound; raised when the requested cases need more speakers.
    pub people: usize,
    pub single_hop: usize,
    pub multi_hop: usize,
    pub temporal: usize,
    pub update: usize,
    /// Informative turns per session (small talk comes on top).
    pub statements_per_session: usize,
}

impl Default for BenchmarkSize {
    fn default() -> Self {
        BenchmarkSize { people: 12, single_hop: 50, multi_hop: 10, temporal: 30, update: 20, statements_per_session: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub seed: u64,
    pub stream: Vec<TurnRecord>,
    pub cases: Vec<QaCase>,
}

const NAMES: &[&str] = &[
    "Alice", "Bruno", "Carmen", "Dmitri", "Elena", "Farid", "Greta", "Hiro", "Ingrid", "Jonas", "Keiko", "Lars",
    "Mina", "Nikolai", "Olga", "Pablo", "Quinn", "Rosa", "Sven", "Tamsin", "Umar", "Vera", "Wendell", "Ximena",
    "Yusuf", "Zora", "Anton", "Beatriz", "Cyrus", "Delphine", "Emeka", "Fiona", "Gustav", "Hana", "Ivo", "Jana",
];
const PROFESSIONS: &[&str] = &[
    "nurse", "engineer", "teacher", "chef", "architect", "pilot", "librarian", "dentist", "photographer",
    "electrician", "accountant", "veterinarian",
];
const ORGS: &[&str] = &[
    "Acme Robotics", "Blue Harbor Bank", "Cobalt Labs", "Driftwood Media", "Evergreen Health", "Falcon Freight",
    "Granite Systems", "Helios Energy", "Ironbark Studios", "Juniper Foods", "Kestrel Aviation", "Lumen Optics",
];
const CITIES: &[&str] = &[
    "Denver", "Austin", "Boston", "Seattle", "Portland", "Chicago", "Atlanta", "Phoenix", "Miami", "Detroit",
    "Raleigh", "Tucson", "Omaha", "Madison",
];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "purple", "orange", "teal", "silver", "maroon", "lavender"];
const ANIMALS: &[&str] = &["cat", "dog", "parrot", "rabbit", "hamster", "turtle"];
const PET_NAMES: &[&str] = &[
    "Milo", "Biscuit", "Pepper", "Ziggy", "Noodle", "Pickles", "Waffles", "Clover", "Mochi", "Sprout", "Tofu", "Gizmo",
    "Nacho", "Juniper", "Peanut", "Basil", "Kiwi", "Olive", "Maple", "Comet",
];
const HOBBIES: &[&str] = &[
    "playing chess", "hiking", "painting", "gardening", "rock climbing", "baking bread", "birdwatching", "swimming",
    "knitting", "playing guitar", "kayaking", "woodworking",
];
const SMALL_TALK: &[&str] = &[
    "How was your weekend?",
    "That sounds wonderful!",
    "Oh nice, tell me more.",
    "Ha, that is so typical.",
    "Good to hear from you again.",
    "What a week it has been.",
    "Wow, really?",
    "Let us catch up soon.",
];

const SLOTS: [&str; 6] = ["profession", "work", "home", "color", "pet", "hobby"];
const UPDATABLE: [&str; 4] = ["work", "home", "color", "hobby"];
const START_DATE: (i32, u32, u32) = (2023, 5, 1);

struct Person {
    name: &'static str,
    profession: &'static str,
    work: &'static str,
    home: &'static str,
    color: &'static str,
    pet: (&'static str, &'static str),
    hobby: &'static str,
}

/// Planted statement; `key` links it to the cases it supports.
struct Statement {
    speaker: &'static str,
    text: String,
    key: String,
    /// Relative-time offset when the statement dates an event.
    offset: Option<i64>,
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str], avoid: &str) -> &'a str {
    loop {
        let v = pool[rng.gen_range(0..pool.len())];
        if v != avoid {
            return v;
        }
    }
}

fn say(speaker: &'static str, text: String, key: String) -> Statement {
    Statement { speaker, text, key, offset: None }
}

fn slot_question(p: &Person, slot: &str) -> String {
    match slot {
        "profession" => format!("What does {} do for a living?", p.name),
        "work" => format!("Where does {} work?", p.name),
        "home" => format!("Where does {} live?", p.name),
        "color" => format!("What is {}'s favorite color?", p.name),
        "pet" => format!("What is the name of {}'s pet {}?", p.name, p.pet.0),
        _ => format!("What does {} enjoy doing?", p.name),
    }
}

fn slot_value(p: &Person, slot: &str) -> &'static str {
    match slot {
        "profession" => p.profession,
        "work" => p.work,
        "home" => p.home,
        "color" => p.color,
        "pet" => p.pet.1,
        _ => p.hobby,
    }
}

fn initial_statement(p: &Person, slot: &str) -> String {
    match slot {
        "profession" => format!("Hi, I'm {}, {} {}.", p.name, if p.profession.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" }, p.profession),
        "work" => format!("I work at {}.", p.work),
        "home" => format!("I live in {}.", p.home),
        "color" => format!("My favorite color is {}.", p.color),
        "pet" => format!("I have a pet {} named {}.", p.pet.0, p.pet.1),
        _ => format!("I enjoy {} on weekends.", p.hobby),
    }
}

fn update_statement(slot: &str, value: &str) -> String {
    match slot {
        "work" => format!("I got a job at {value} last week."),
        "home" => format!("I moved to {value} yesterday."),
        "color" => format!("My favorite color is now {value}."),
        _ => format!("These days I enjoy {value}."),
    }
}

/// Deterministic per seed. Statements are laid out in three phases
/// (profiles, dated events and company facts, then changes) so every
/// superseding statement comes after the one it replaces.
pub fn generate_benchmark(seed: u64, size: &BenchmarkSize) -> Benchmark {
    let mut rng = substream(seed, &["benchmark"]);
    let needed = size
        .people
        .max((size.single_hop + size.update).div_ceil(SLOTS.len()))
        .max(size.update.div_ceil(UPDATABLE.len()))
        .max(size.temporal.div_ceil(EVENTS.len()))
        .max(size.multi_hop)
        .clamp(2, NAMES.len());
    let mut names: Vec<&'static str> = NAMES.to_vec();
    names.shuffle(&mut rng);
    let mut pet_names: Vec<&'static str> = PET_NAMES.to_vec();
    pet_names.shuffle(&mut rng);
    let people: Vec<Person> = names[..needed]
        .iter()
        .enumerate()
        .map(|(i, &name)| Person {
            name,
            profession: pick(&mut rng, PROFESSIONS, ""),
            work: pick(&mut rng, ORGS, ""),
            home: pick(&mut rng, CITIES, ""),
            color: pick(&mut rng, COLORS, ""),
            pet: (pick(&mut rng, ANIMALS, ""), pet_names[i % pet_names.len()]),
            hobby: pick(&mut rng, HOBBIES, ""),
        })
        .collect();
    let hq: BTreeMap<&str, &str> = ORGS.iter().map(|o| (*o, pick(&mut rng, CITIES, ""))).collect();

    // Which (person, slot) pairs change, and to what.
    let mut updatable: Vec<(usize, &str)> =
        (0..people.len()).flat_map(|p| UPDATABLE.iter().map(move |s| (p, *s))).collect();
    updatable.shuffle(&mut rng);
    updatable.truncate(size.update);
    let updates: BTreeMap<(usize, &str), &'static str> = updatable
        .iter()
        .map(|&(p, slot)| {
            let old = slot_value(&people[p], slot);
            let new = match slot {
                "work" => pick(&mut rng, ORGS, old),
                "home" => pick(&mut rng, CITIES, old),
                "color" => pick(&mut rng, COLORS, old),
                _ => pick(&mut rng, HOBBIES, old),
            };
            ((p, slot), new)
        })
        .collect();
    let mut single: Vec<(usize, &str)> = (0..people.len())
        .flat_map(|p| SLOTS.iter().map(move |s| (p, *s)))
        .filter(|k| !updates.contains_key(k))
        .collect();
    single.shuffle(&mut rng);
    single.truncate(size.single_hop);
    let mut events: Vec<(usize, usize)> = (0..people.len()).flat_map(|p| (0..EVENTS.len()).map(move |e| (p, e))).collect();
    events.shuffle(&mut rng);
    events.truncate(size.temporal);
    let mut multi: Vec<usize> = (0..people.len()).collect();
    multi.shuffle(&mut rng);
    multi.truncate(size.multi_hop);

    let mut profiles = Vec::new();
    for (i, p) in people.iter().enumerate() {
        for slot in SLOTS {
            profiles.push(say(p.name, initial_statement(p, slot), format!("{i}:{slot}")));
        }
    }
    profiles.shuffle(&mut rng);
    let mut middle: Vec<Statement> = events
        .iter()
        .map(|&(p, e)| {
            let (phrase, offset) = RELATIVE_TIMES[rng.gen_range(0..RELATIVE_TIMES.len())];
            Statement {
                speaker: people[p].name,
                text: format!("I {} {phrase}.", EVENTS[e].1),
                key: format!("{p}:event:{e}"),
                offset: Some(offset),
            }
        })
        .collect();
    for (org, city) in &hq {
        let speaker = people[rng.gen_range(0..people.len())].name;
        middle.push(say(speaker, format!("By the way, {org} is headquartered in {city}."), format!("hq:{org}")));
    }
    middle.shuffle(&mut rng);
    let mut changes: Vec<Statement> = updates
        .iter()
        .map(|(&(p, slot), new)| say(people[p].name, update_statement(slot, new), format!("{p}:{slot}:new")))
        .collect();
    changes.shuffle(&mut rng);

    // Lay out sessions: informative turns interleaved with small talk.
    let start = NaiveDate::from_ymd_opt(START_DATE.0, START_DATE.1, START_DATE.2).expect("valid start date");
    let mut stream = Vec::new();
    let mut turn_of: BTreeMap<String, TurnId> = BTreeMap::new();
    let mut date_of: BTreeMap<String, NaiveDate> = BTreeMap::new();
    let per = size.statements_per_session.max(1);
    let all: Vec<Statement> = profiles.into_iter().chain(middle).chain(changes).collect();
    for (s, session) in all.chunks(per).enumerate() {
        let session_no = s + 1;
        let date = start + Duration::days(7 * s as i64);
        let mut n = 0;
        let mut push = |stream: &mut Vec<TurnRecord>, speaker: &str, content: String| -> TurnId {
            n += 1;
            let id = TurnId::new(format!("D{session_no}:{n}"));
            stream.push(TurnRecord {
                turn_id: id.clone(),
                session_id: format!("S{session_no}"),
                speaker: speaker.to_owned(),
                content,
                turn_time: format!("{}T{:02}:{:02}", format_date(date), 10 + n / 60, n % 60),
            });
            id
        };
        for st in session {
            if rng.gen_bool(0.4) {
                let other = people[rng.gen_range(0..people.len())].name;
                push(&mut stream, other, SMALL_TALK[rng.gen_range(0..SMALL_TALK.len())].to_owned());
            }
            let id = push(&mut stream, st.speaker, st.text.clone());
            turn_of.insert(st.key.clone(), id);
            if let Some(off) = st.offset {
                date_of.insert(st.key.clone(), date + Duration::days(off));
            }
        }
    }

    let mut cases = Vec::new();
    let mut add = |query: String, gold: String, evidence: Vec<&TurnId>, category: QaCategory| {
        let case_id = format!("q{:04}", cases.len() + 1);
        cases.push(QaCase { case_id, query, gold_answer: gold, evidence_turn_ids: evidence.into_iter().cloned().collect(), category });
    };
    for &(p, slot) in &single {
        let person = &people[p];
        add(slot_question(person, slot), slot_value(person, slot).to_owned(), vec![&turn_of[&format!("{p}:{slot}")]], QaCategory::SingleHop);
    }
    for &(p, e) in &events {
        let key = format!("{p}:event:{e}");
        let query = format!("When did {} {}?", people[p].name, EVENTS[e].0);
        add(query, format_date(date_of[&key]), vec![&turn_of[&key]], QaCategory::Temporal);
    }
    for (&(p, slot), new) in &updates {
        let original = &turn_of[&format!("{p}:{slot}")];
        let newer = &turn_of[&format!("{p}:{slot}:new")];
        add(slot_question(&people[p], slot), (*new).to_owned(), vec![original, newer], QaCategory::Update);
    }
    for &p in &multi {
        let person = &people[p];
        let (employer, employer_turn) = match updates.get(&(p, "work")) {
            Some(new) => (*new, &turn_of[&format!("{p}:work:new")]),
            None => (person.work, &turn_of[&format!("{p}:work")]),
        };
        let query = format!("In which city is {}'s employer headquartered?", person.name);
        add(query, hq[employer].to_owned(), vec![employer_turn, &turn_of[&format!("hq:{employer}")]], QaCategory::MultiHop);
    }
    Benchmark { seed, stream, cases }
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub construction: ConstructionConfig,
    pub retrieval: RetrievalConfig,
    pub accuracy_rule: AccuracyRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            construction: ConstructionConfig::default(),
            retrieval: RetrievalConfig::default(),
            accuracy_rule: AccuracyRule::Containment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub category: QaCategory,
    pub query: String,
    pub gold_answer: String,
    pub answer: String,
    pub f1: f64,
    pub bleu1: f64,
    pub accuracy: f64,
    /// Policy-chosen steps, excluding a forced final answer.
    pub steps: usize,
    pub forced: bool,
    /// characters/4 estimate of retrieval context sent to the policy.
    pub tokens_estimated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub f1: f64,
    pub bleu1: f64,
    pub accuracy: f64,
    pub mean_steps: f64,
    pub mean_tokens: f64,
}

impl Aggregate {
    pub fn over<'a>(rows: impl IntoIterator<Item = &'a CaseResult>) -> Aggregate {
        let mut a = Aggregate::default();
        for r in rows {
            a.count += 1;
            a.f1 += r.f1;
            a.bleu1 += r.bleu1;
            a.accuracy += r.accuracy;
            a.mean_steps += r.steps as f64;
            a.mean_tokens += r.tokens_estimated as f64;
        }
        if a.count > 0 {
            let n = a.count as f64;
            a.f1 /= n;
            a.bleu1 /= n;
            a.accuracy /= n;
            a.mean_steps /= n;
            a.mean_tokens /= n;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
    pub per_category: BTreeMap<QaCategory, Aggregate>,
    pub overall: Aggregate,
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseResult>) -> Self {
        let mut per_category = BTreeMap::new();
        for cat in QaCategory::ALL {
            let rows: Vec<&CaseResult> = cases.iter().filter(|c| c.category == cat).collect();
            if !rows.is_empty() {
                per_category.insert(cat, Aggregate::over(rows));
            }
        }
        let overall = Aggregate::over(&cases);
        EvalReport { cases, per_category, overall }
    }

    pub fn error_count(&self) -> usize {
        self.cases.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>5} {:>7} {:>7} {:>7} {:>6} {:>8}", "category", "n", "f1", "bleu1", "acc", "steps", "tokens~");
        let mut row = |name: &str, a: &Aggregate| {
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>7.4} {:>7.4} {:>7.4} {:>6.2} {:>8.1}",
                name, a.count, a.f1, a.bleu1, a.accuracy, a.mean_steps, a.mean_tokens
            );
        };
        for (cat, a) in &self.per_category {
            row(cat.as_str(), a);
        }
        row("overall", &self.overall);
        out
    }

    /// One record per case, then one per category aggregate and the overall line.
    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&serde_json::json!({"record": "case", "case": c}).to_string());
            out.push('\n');
        }
        for (cat, a) in &self.per_category {
            out.push_str(&serde_json::json!({"record": "category", "category": cat, "aggregate": a}).to_string());
            out.push('\n');
        }
        out.push_str(&serde_json::json!({"record": "overall", "aggregate": self.overall}).to_string());
        out.push('\n');
        out
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Ingest(#[from] IngestFailure),
}

pub struct EvalPolicies<'a> {
    pub formation: &'a dyn Policy,
    pub evolution: &'a dyn Policy,
    pub retrieval: &'a dyn Policy,
}

pub struct EvalRun {
    pub report: EvalReport,
    pub ingest: IngestOutcome,
    pub trajectories: Vec<Option<Trajectory>>,
    pub db: MemoryDb,
}

/// Scores one finished trajectory (or a failure) against its case.
pub fn score_case(case: &QaCase, outcome: Result<&Trajectory, String>, rule: AccuracyRule) -> CaseResult {
    let (answer, steps, forced, tokens, error) = match outcome {
        Ok(t) => {
            let steps = t.steps.iter().filter(|s| !s.forced).count();
            (t.answer.clone(), steps, t.forced, t.prompt_tokens(), None)
        }
        Err(e) => (String::new(), 0, false, 0, Some(e)),
    };
    CaseResult {
        case_id: case.case_id.clone(),
        category: case.category,
        query: case.query.clone(),
        gold_answer: case.gold_answer.clone(),
        f1: token_f1(&answer, &case.gold_answer),
        bleu1: bleu1(&answer, &case.gold_answer),
        accuracy: accuracy(&answer, &case.gold_answer, rule),
        answer,
        steps,
        forced,
        tokens_estimated: tokens,
        error,
    }
}

/// Retrieval for every case in parallel over one snapshot. Failures are
/// recorded per case.
pub fn answer_cases(
    snapshot: &DbSnapshot,
    cases: &[QaCase],
    policy: &dyn Policy,
    config: &EvalConfig,
) -> (EvalReport, Vec<Option<Trajectory>>) {
    let runs: Vec<Result<Trajectory, String>> = cases
        .par_iter()
        .map(|c| retrieve_loop(&c.query, snapshot, policy, &config.retrieval, Sampling::greedy()).map_err(|e| e.to_string()))
        .collect();
    let rows = cases
        .iter()
        .zip(&runs)
        .map(|(c, r)| score_case(c, r.as_ref().map_err(Clone::clone), config.accuracy_rule))
        .collect();
    (EvalReport::from_cases(rows), runs.into_iter().map(Result::ok).collect())
}

pub fn evaluate(
    stream: &[TurnRecord],
    cases: &[QaCase],
    policies: &EvalPolicies<'_>,
    embedder: Arc<dyn Embedder>,
    config: &EvalConfig,
) -> Result<EvalRun, EvalError> {
    let mut db = MemoryDb::new(embedder);
    let chunks = chunk_turns(stream, config.construction.chunk_size);
    let ingest = ingest_stream(&mut db, &chunks, policies.formation, policies.evolution, &config.construction, &[])?;
    let snapshot = db.snapshot();
    let (report, trajectories) = answer_cases(&snapshot, cases, policies.retrieval, config);
    Ok(EvalRun { report, ingest, trajectories, db })
}
