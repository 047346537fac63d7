//! Rule set behind the scripted policy.
//!
//! Covers a small controlled dialogue language (the one produced by the
//! synthetic benchmark generator): self-introductions, employment, home,
//! favourite colour, pets, hobbies, company locations, dated events and
//! lessons learned. Every rule emits canonical fact sentences so the
//! evolution and retrieval rules can parse them back with [`parse_fact`].

use chrono::{Datelike, Duration, NaiveDate};

use crate::memory::{MemoryItem, MemoryKind, TurnRecord};
use crate::retrieval::{ObservedHit, RetrievalStep};

use super::ToolCall;

/// Dated events: (base form used in questions, past form used in dialogue and facts).
pub const EVENTS: &[(&str, &str)] = &[
    ("adopt a dog", "adopted a dog"),
    ("adopt a kitten", "adopted a kitten"),
    ("visit the science museum", "visited the science museum"),
    ("buy a new car", "bought a new car"),
    ("run a half marathon", "ran a half marathon"),
    ("bake a lemon cake", "baked a lemon cake"),
    ("paint the garden fence", "painted the garden fence"),
    ("see a jazz concert", "saw a jazz concert"),
    ("fix the old bicycle", "fixed the old bicycle"),
    ("plant tomatoes", "planted tomatoes"),
    ("finish a pottery class", "finished a pottery class"),
    ("climb Mount Tam", "climbed Mount Tam"),
    ("host a board game night", "hosted a board game night"),
    ("donate blood", "donated blood"),
    ("repaint the kitchen", "repainted the kitchen"),
    ("attend a wedding", "attended a wedding"),
    ("sell the old piano", "sold the old piano"),
    ("join a chess club", "joined a chess club"),
    ("write a short story", "wrote a short story"),
    ("build a bookshelf", "built a bookshelf"),
];

/// Relative time phrases and their day offsets from the session date.
pub const RELATIVE_TIMES: &[(&str, i64)] = &[
    ("yesterday", -1),
    ("today", 0),
    ("this morning", 0),
    ("two days ago", -2),
    ("three days ago", -3),
    ("last weekend", -7),
    ("last week", -7),
    ("the week before", -14),
];

const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
    "November", "December",
];

const NOT_EVENT_VERBS: &[&str] = &["work", "live", "have", "enjoy", "am", "learned", "no", "moved", "got", "started"];

pub fn parse_date(text: &str) -> Option<NaiveDate> {
    let head = text.get(..10)?;
    NaiveDate::parse_from_str(head, "%Y-%m-%d").ok()
}

pub fn format_date(date: NaiveDate) -> String {
    date.format("%Y-%m-%d").to_string()
}

/// Resolves a relative phrase against the session date.
pub fn resolve_relative(phrase: &str, session: NaiveDate) -> Option<NaiveDate> {
    RELATIVE_TIMES
        .iter()
        .find(|(p, _)| *p == phrase)
        .map(|(_, offset)| session + Duration::days(*offset))
}

/// Resolves "May 1" style dates in the session's year.
fn resolve_month_day(text: &str, session: NaiveDate) -> Option<NaiveDate> {
    let (month, day) = text.trim().split_once(' ')?;
    let m = MONTHS.iter().position(|name| name.eq_ignore_ascii_case(month))? as u32 + 1;
    let d: u32 = day.trim_end_matches(|c: char| !c.is_ascii_digit()).parse().ok()?;
    NaiveDate::from_ymd_opt(session.year(), m, d)
}

/// Splits off a trailing relative-time phrase.
fn split_time_suffix(text: &str) -> (&str, Option<&'static str>) {
    for (phrase, _) in RELATIVE_TIMES {
        if let Some(rest) = text.strip_suffix(phrase) {
            if let Some(rest) = rest.strip_suffix(' ') {
                return (rest, Some(phrase));
            }
        }
    }
    (text, None)
}

pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        current.push(c);
        let boundary = matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if boundary {
            let s = current.trim().trim_end_matches(['.', '!', '?']).trim().to_owned();
            if !s.is_empty() {
                out.push(s);
            }
            current.clear();
        }
    }
    let s = current.trim().to_owned();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

fn capitalize(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn article(noun: &str) -> &'static str {
    if noun.starts_with(['a', 'e', 'i', 'o', 'u', 'A', 'E', 'I', 'O', 'U']) {
        "an"
    } else {
        "a"
    }
}

/// One unit of salient information pulled out of a turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Extract {
    Fact { content: String, start: String, end: String },
    Experience { content: String, start: String, end: String },
    Persona { name: String, profile: String },
}

impl Extract {
    pub fn content(&self) -> &str {
        match self {
            Extract::Fact { content, .. } | Extract::Experience { content, .. } => content,
            Extract::Persona { profile, .. } => profile,
        }
    }

    pub fn to_call(&self) -> ToolCall {
        match self {
            Extract::Fact { content, start, end } => {
                ToolCall::with_strings("create_fact", &[("fact", content), ("start_time", start), ("end_time", end)])
            }
            Extract::Experience { content, start, end } => ToolCall::with_strings(
                "create_experience",
                &[("experience", content), ("start_time", start), ("end_time", end)],
            ),
            Extract::Persona { name, profile } => {
                ToolCall::with_strings("update_persona", &[("name", name), ("profile", profile)])
            }
        }
    }
}

fn fact(content: String, start: Option<NaiveDate>) -> Extract {
    Extract::Fact {
        content,
        start: start.map(format_date).unwrap_or_default(),
        end: String::new(),
    }
}

/// Applies the sentence rules to one sentence spoken by `speaker`.
pub fn extract_sentence(speaker: &str, sentence: &str, session: Option<NaiveDate>) -> Option<Extract> {
    let s = sentence.trim();
    // Self-introduction: "Hi, I'm Alice, a nurse"
    for greeting in ["Hi, ", "Hello, ", "Hey, ", ""] {
        if let Some(rest) = s.strip_prefix(greeting).and_then(|r| r.strip_prefix("I'm ")) {
            if let Some((name, role)) = rest.split_once(", ") {
                let role = role.strip_prefix("a ").or_else(|| role.strip_prefix("an "))?;
                return Some(Extract::Persona {
                    name: name.to_owned(),
                    profile: format!("{name} is {} {role}.", article(role)),
                });
            }
            if let Some(role) = rest.strip_prefix("a ").or_else(|| rest.strip_prefix("an ")) {
                return Some(Extract::Persona {
                    name: speaker.to_owned(),
                    profile: format!("{speaker} is {} {role}.", article(role)),
                });
            }
        }
    }
    if let Some(org) = s.strip_prefix("I work at ").or_else(|| s.strip_prefix("I work for ")) {
        return Some(fact(format!("{speaker} works at {org}."), None));
    }
    for prefix in ["I got a job at ", "I started a new job at ", "I started working at "] {
        if let Some(rest) = s.strip_prefix(prefix) {
            let (org, start) = match rest.split_once(" on ") {
                Some((org, when)) => (org, session.and_then(|d| resolve_month_day(when, d))),
                None => {
                    let (org, phrase) = split_time_suffix(rest);
                    (org, session.map(|d| phrase.and_then(|p| resolve_relative(p, d)).unwrap_or(d)))
                }
            };
            return Some(fact(format!("{speaker} works at {org}."), start));
        }
    }
    if let Some(org) = s.strip_prefix("I no longer work at ") {
        return Some(fact(format!("{speaker} no longer works at {org}."), session));
    }
    if let Some(city) = s.strip_prefix("I live in ") {
        return Some(fact(format!("{speaker} lives in {city}."), None));
    }
    if let Some(rest) = s.strip_prefix("I moved to ") {
        let (city, phrase) = split_time_suffix(rest);
        let start = session.map(|d| phrase.and_then(|p| resolve_relative(p, d)).unwrap_or(d));
        return Some(fact(format!("{speaker} lives in {city}."), start));
    }
    if let Some(rest) = s.strip_prefix("My favorite color is ") {
        return Some(match rest.strip_prefix("now ") {
            Some(color) => fact(format!("{speaker}'s favorite color is {color}."), session),
            None => fact(format!("{speaker}'s favorite color is {rest}."), None),
        });
    }
    if let Some(rest) = s.strip_prefix("I have a pet ") {
        let (animal, name) = rest.split_once(" named ")?;
        return Some(fact(format!("{speaker} has a pet {animal} named {name}."), None));
    }
    if let Some(rest) = s.strip_prefix("I enjoy ") {
        let hobby = rest.strip_suffix(" on weekends").unwrap_or(rest);
        return Some(fact(format!("{speaker} enjoys {hobby}."), None));
    }
    if let Some(rest) = s.strip_prefix("These days I enjoy ") {
        return Some(fact(format!("{speaker} enjoys {rest}."), session));
    }
    if let Some((org, city)) = s.split_once(" is headquartered in ") {
        let org = org.strip_prefix("By the way, ").unwrap_or(org);
        return Some(fact(format!("{org} is headquartered in {city}."), None));
    }
    if let Some(lesson) = s.strip_prefix("I learned that ") {
        let content = format!("{}.", capitalize(lesson));
        return Some(Extract::Experience { content, start: String::new(), end: String::new() });
    }
    if let Some(rest) = s.strip_prefix("I ") {
        let (body, phrase) = split_time_suffix(rest);
        let first = body.split(' ').next().unwrap_or("");
        if let (Some(phrase), Some(date)) = (phrase, session) {
            if !NOT_EVENT_VERBS.contains(&first) && !body.is_empty() {
                return Some(fact(format!("{speaker} {body}."), resolve_relative(phrase, date)));
            }
        }
    }
    None
}

/// All extracts for one turn, in sentence order.
pub fn extract_turn(turn: &TurnRecord) -> Vec<Extract> {
    let session = parse_date(&turn.turn_time);
    split_sentences(&turn.content)
        .iter()
        .filter_map(|s| extract_sentence(&turn.speaker, s, session))
        .collect()
}

/// Rendering of a turn inside a Raw item.
pub fn render_turn(turn: &TurnRecord) -> String {
    format!("{}: {}", turn.speaker, turn.content)
}

/// Parses Raw item content back into (speaker, content) lines.
pub fn parse_raw(content: &str) -> Vec<(String, String)> {
    content
        .lines()
        .filter_map(|line| line.split_once(": "))
        .map(|(s, c)| (s.to_owned(), c.to_owned()))
        .collect()
}

/// Canonical key of a fact sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactKey {
    pub subject: String,
    pub slot: String,
    pub value: String,
    pub negated: bool,
}

fn key(subject: &str, slot: &str, value: &str, negated: bool) -> Option<FactKey> {
    if subject.is_empty() || value.is_empty() {
        return None;
    }
    Some(FactKey { subject: subject.to_owned(), slot: slot.to_owned(), value: value.to_owned(), negated })
}

/// Parses a canonical fact or persona sentence.
pub fn parse_fact(content: &str) -> Option<FactKey> {
    let s = content.trim().trim_end_matches('.');
    if let Some((subj, org)) = s.split_once(" no longer works at ") {
        return key(subj, "work", org, true);
    }
    if let Some((subj, org)) = s.split_once(" works at ") {
        return key(subj, "work", org, false);
    }
    if let Some((subj, city)) = s.split_once(" lives in ") {
        return key(subj, "home", city, false);
    }
    if let Some((subj, color)) = s.split_once("'s favorite color is ") {
        return key(subj, "color", color, false);
    }
    if let Some((subj, rest)) = s.split_once(" has a pet ") {
        let (_, name) = rest.split_once(" named ")?;
        return key(subj, "pet", name, false);
    }
    if let Some((subj, hobby)) = s.split_once(" enjoys ") {
        return key(subj, "hobby", hobby, false);
    }
    if let Some((org, city)) = s.split_once(" is headquartered in ") {
        return key(org, "hq", city, false);
    }
    for sep in [" is a ", " is an "] {
        if let Some((subj, role)) = s.split_once(sep) {
            if !subj.contains(' ') {
                return key(subj, "profession", role, false);
            }
        }
    }
    let (subj, rest) = s.split_once(' ')?;
    if subj.chars().next().is_some_and(char::is_uppercase) {
        return key(subj, &format!("event:{rest}"), rest, false);
    }
    None
}

// ---------------------------------------------------------------- formation

/// Working-summary text for a session: header followed by up to
/// [`SUMMARY_SENTENCES`] recent sentences.
pub const SUMMARY_SENTENCES: usize = 12;

pub fn summary_header(session_id: &str, date: &str) -> String {
    format!("Session {session_id} ({date}):")
}

pub fn next_summary(turns: &[TurnRecord], working_summary: &str, extracts: &[Extract]) -> String {
    let Some(first) = turns.first() else {
        return working_summary.to_owned();
    };
    let date = first.turn_time.get(..10).unwrap_or(&first.turn_time);
    let header = summary_header(&first.session_id, date);
    let mut sentences: Vec<String> = match working_summary.strip_prefix(&header) {
        Some(rest) => split_sentences(rest).into_iter().map(|s| format!("{s}.")).collect(),
        None => Vec::new(),
    };
    if extracts.is_empty() {
        let speakers: Vec<&str> = turns.iter().map(|t| t.speaker.as_str()).collect();
        sentences.push(format!("{} made small talk.", speakers.join(" and ")));
    } else {
        sentences.extend(extracts.iter().map(|e| {
            let c = e.content().trim();
            if c.ends_with('.') { c.to_owned() } else { format!("{c}.") }
        }));
    }
    let skip = sentences.len().saturating_sub(SUMMARY_SENTENCES);
    format!("{header} {}", sentences[skip..].join(" "))
}

/// Formation decisions for one chunk: one create/update call per extract,
/// then a summary update.
pub fn formation_calls(turns: &[TurnRecord], working_summary: &str) -> Vec<ToolCall> {
    let extracts: Vec<Extract> = turns.iter().flat_map(extract_turn).collect();
    let mut calls: Vec<ToolCall> = extracts.iter().map(Extract::to_call).collect();
    let summary = next_summary(turns, working_summary, &extracts);
    calls.push(ToolCall::with_strings("update_summary", &[("content", &summary)]));
    calls
}

// ---------------------------------------------------------------- evolution

fn same_window(a: &MemoryItem, b: &MemoryItem) -> bool {
    a.start_time == b.start_time && a.end_time == b.end_time
}

fn merge_profiles(old: &str, new: &str) -> String {
    let new_sentences = split_sentences(new);
    let new_slots: Vec<Option<(String, String)>> = new_sentences
        .iter()
        .map(|s| parse_fact(s).map(|k| (k.subject, k.slot)))
        .collect();
    let mut merged: Vec<String> = split_sentences(old)
        .into_iter()
        .filter(|s| {
            let slot = parse_fact(s).map(|k| (k.subject, k.slot));
            !new_sentences.contains(s) && (slot.is_none() || !new_slots.contains(&slot))
        })
        .collect();
    merged.extend(new_sentences);
    merged.iter().map(|s| format!("{s}.")).collect::<Vec<_>>().join(" ")
}

fn update_call(target: &MemoryItem, document: &str, candidate: &MemoryItem) -> ToolCall {
    ToolCall::with_strings(
        "update_item",
        &[
            ("id", target.item_id.as_str()),
            ("document", document),
            ("turn_time", &candidate.turn_time),
            ("start_time", &candidate.start_time),
            ("end_time", &candidate.end_time),
        ],
    )
}

/// Evolution decision for a candidate given its same-kind neighbours.
pub fn evolution_call(candidate: &MemoryItem, neighbors: &[MemoryItem]) -> ToolCall {
    if let Some(dup) = neighbors
        .iter()
        .find(|n| n.content == candidate.content && same_window(n, candidate))
    {
        let reason = format!("duplicate of {} in content and time range", dup.item_id);
        return ToolCall::with_strings("ignore_item", &[("reason", &reason)]);
    }
    if candidate.kind == MemoryKind::Persona {
        if let Some(existing) = neighbors.iter().find(|n| n.persona_name == candidate.persona_name) {
            let merged = merge_profiles(&existing.content, &candidate.content);
            if merged == existing.content {
                let reason = format!("profile of {} already up to date", candidate.persona_name);
                return ToolCall::with_strings("ignore_item", &[("reason", &reason)]);
            }
            return update_call(existing, &merged, candidate);
        }
    }
    if let Some(ck) = parse_fact(&candidate.content) {
        if ck.negated {
            let target = neighbors.iter().find(|n| {
                parse_fact(&n.content)
                    .is_some_and(|nk| !nk.negated && nk.subject == ck.subject && nk.slot == ck.slot && nk.value == ck.value)
            });
            return match target {
                Some(t) => ToolCall::with_strings("delete_item", &[("id", t.item_id.as_str())]),
                None => ToolCall::with_strings("ignore_item", &[("reason", "negates nothing stored")]),
            };
        }
        let same_slot = neighbors.iter().find(|n| {
            parse_fact(&n.content).is_some_and(|nk| !nk.negated && nk.subject == ck.subject && nk.slot == ck.slot)
        });
        if let Some(old) = same_slot {
            return update_call(old, &candidate.content, candidate);
        }
    }
    ToolCall::with_strings(
        "add_item",
        &[
            ("document", &candidate.content),
            ("turn_time", &candidate.turn_time),
            ("start_time", &candidate.start_time),
            ("end_time", &candidate.end_time),
        ],
    )
}

// ---------------------------------------------------------------- retrieval

/// Slots a question can ask about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Question {
    Slot { subject: String, slot: &'static str },
    Profession { subject: String },
    When { subject: String, event: String },
    EmployerCity { subject: String },
    Other(String),
}

fn strip_q(q: &str) -> &str {
    q.trim().trim_end_matches('?').trim()
}

pub fn parse_question(query: &str) -> Question {
    let q = strip_q(query);
    let slot = |subject: &str, slot: &'static str| Question::Slot { subject: subject.to_owned(), slot };
    if let Some(s) = q.strip_prefix("Where does ") {
        if let Some(subj) = s.strip_suffix(" work") {
            return slot(subj, "work");
        }
        if let Some(subj) = s.strip_suffix(" live") {
            return slot(subj, "home");
        }
    }
    if let Some(subj) = q.strip_prefix("What is ").and_then(|s| s.strip_suffix("'s favorite color")) {
        return slot(subj, "color");
    }
    if let Some(rest) = q.strip_prefix("What is the name of ") {
        if let Some((subj, _)) = rest.split_once("'s pet") {
            return slot(subj, "pet");
        }
    }
    if let Some(subj) = q.strip_prefix("What does ").and_then(|s| s.strip_suffix(" enjoy doing")) {
        return slot(subj, "hobby");
    }
    if let Some(subj) = q.strip_prefix("What does ").and_then(|s| s.strip_suffix(" do for a living")) {
        return Question::Profession { subject: subj.to_owned() };
    }
    if let Some(subj) = q.strip_prefix("What is ").and_then(|s| s.strip_suffix("'s profession")) {
        return Question::Profession { subject: subj.to_owned() };
    }
    if let Some(rest) = q.strip_prefix("When did ") {
        if let Some((subj, base)) = rest.split_once(' ') {
            let event = EVENTS
                .iter()
                .find(|(b, _)| *b == base)
                .map(|(_, past)| (*past).to_owned())
                .unwrap_or_else(|| base.to_owned());
            return Question::When { subject: subj.to_owned(), event };
        }
    }
    if let Some(subj) = q
        .strip_prefix("In which city is ")
        .and_then(|s| s.strip_suffix("'s employer headquartered"))
    {
        return Question::EmployerCity { subject: subj.to_owned() };
    }
    Question::Other(q.to_owned())
}

fn slot_fact_key(subject: &str, slot: &str) -> String {
    match slot {
        "work" => format!("{subject} works at"),
        "home" => format!("{subject} lives in"),
        "color" => format!("{subject}'s favorite color is"),
        "pet" => format!("{subject} has a pet named"),
        "hobby" => format!("{subject} enjoys"),
        "hq" => format!("{subject} is headquartered in"),
        _ => subject.to_owned(),
    }
}

fn slot_turn_key(subject: &str, slot: &str) -> String {
    match slot {
        "work" => format!("{subject} work job"),
        "home" => format!("{subject} live moved"),
        "color" => format!("{subject} favorite color"),
        "pet" => format!("{subject} pet named"),
        "hobby" => format!("{subject} enjoy weekends"),
        "hq" => format!("{subject} headquartered"),
        _ => subject.to_owned(),
    }
}

/// A fact recovered from an observation, with the time used to prefer
/// newer information.
#[derive(Debug, Clone)]
struct Evidence {
    key: FactKey,
    start: String,
    recency: String,
}

fn evidence_from_hit(hit: &ObservedHit) -> Vec<Evidence> {
    match hit.kind {
        MemoryKind::Raw => {
            let session = parse_date(&hit.turn_time);
            parse_raw(&hit.content)
                .iter()
                .flat_map(|(speaker, text)| {
                    split_sentences(text)
                        .into_iter()
                        .filter_map(|s| extract_sentence(speaker, &s, session))
                        .collect::<Vec<_>>()
                })
                .filter_map(|e| match e {
                    Extract::Fact { content, start, .. } => parse_fact(&content).map(|key| Evidence {
                        recency: hit.turn_time.clone().max(start.clone()),
                        key,
                        start,
                    }),
                    Extract::Persona { profile, .. } => parse_fact(&profile).map(|key| Evidence {
                        key,
                        start: String::new(),
                        recency: hit.turn_time.clone(),
                    }),
                    Extract::Experience { .. } => None,
                })
                .collect()
        }
        _ => split_sentences(&hit.content)
            .iter()
            .filter_map(|s| parse_fact(s))
            .map(|key| Evidence {
                key,
                start: hit.start_time.clone(),
                recency: hit.turn_time.clone().max(hit.start_time.clone()),
            })
            .collect(),
    }
}

fn all_evidence(history: &[RetrievalStep]) -> Vec<Evidence> {
    history
        .iter()
        .flat_map(|step| step.observation.iter())
        .flat_map(evidence_from_hit)
        .collect()
}

/// Latest non-negated value for (subject, slot). A later negation of the
/// same value cancels it.
fn latest_value(evidence: &[Evidence], subject: &str, slot: &str) -> Option<Evidence> {
    let mut best: Option<&Evidence> = None;
    for e in evidence {
        if e.key.subject != subject || e.key.slot != slot || e.key.negated {
            continue;
        }
        let cancelled = evidence.iter().any(|n| {
            n.key.negated && n.key.subject == subject && n.key.slot == slot && n.key.value == e.key.value && n.recency >= e.recency
        });
        if cancelled {
            continue;
        }
        if best.is_none_or(|b| e.recency > b.recency) {
            best = Some(e);
        }
    }
    best.cloned()
}

/// Best answer obtainable from the observations gathered so far.
pub fn answer_from_history(question: &Question, history: &[RetrievalStep]) -> Option<String> {
    let evidence = all_evidence(history);
    match question {
        Question::Slot { subject, slot } => latest_value(&evidence, subject, slot).map(|e| e.key.value),
        Question::Profession { subject } => latest_value(&evidence, subject, "profession").map(|e| e.key.value),
        Question::When { subject, event } => {
            let slot = format!("event:{event}");
            latest_value(&evidence, subject, &slot)
                .map(|e| e.start)
                .filter(|s| !s.is_empty())
        }
        Question::EmployerCity { subject } => {
            let employer = latest_value(&evidence, subject, "work")?;
            latest_value(&evidence, &employer.key.value, "hq").map(|e| e.key.value)
        }
        Question::Other(_) => None,
    }
}

fn search(tool: &str, query: &str) -> ToolCall {
    ToolCall::with_strings(tool, &[("query", query)])
}

/// Search plan for a question given what has been observed; the first
/// entry not yet executed is the next action.
pub fn search_plan(question: &Question, history: &[RetrievalStep]) -> Vec<ToolCall> {
    match question {
        Question::Slot { subject, slot } => vec![
            search("search_facts", &slot_fact_key(subject, slot)),
            search("search_turns", &slot_turn_key(subject, slot)),
        ],
        Question::Profession { subject } => vec![
            ToolCall::with_strings("search_personas", &[("name", subject), ("query", &format!("{subject} profession"))]),
            search("search_facts", &format!("{subject} is a")),
            search("search_turns", &format!("{subject} I'm")),
        ],
        Question::When { subject, event } => vec![
            search("search_facts", &format!("{subject} {event}")),
            search("search_turns", &format!("{subject} {event}")),
        ],
        Question::EmployerCity { subject } => {
            let mut plan = vec![
                search("search_facts", &slot_fact_key(subject, "work")),
                search("search_turns", &slot_turn_key(subject, "work")),
            ];
            if let Some(emp) = latest_value(&all_evidence(history), subject, "work") {
                plan.insert(1, search("search_facts", &slot_fact_key(&emp.key.value, "hq")));
                plan.insert(2, search("search_turns", &slot_turn_key(&emp.key.value, "hq")));
            }
            plan
        }
        Question::Other(q) => vec![
            search("search_summary", q),
            search("search_facts", q),
            search("search_experiences", q),
            search("search_turns", q),
        ],
    }
}

fn already_done(call: &ToolCall, history: &[RetrievalStep]) -> bool {
    history
        .iter()
        .any(|s| s.valid_format && s.action.tool_name == call.tool_name && s.action.arguments == call.arguments)
}

pub const UNKNOWN_ANSWER: &str = "unknown";

pub fn finish_call(answer: &str) -> ToolCall {
    ToolCall::with_strings("finish", &[("answer", answer)])
}

/// Next retrieval action: finish as soon as an answer is available,
/// otherwise the next unexecuted planned search, otherwise give up.
pub fn retrieval_call(query: &str, history: &[RetrievalStep], force_answer: bool) -> ToolCall {
    let question = parse_question(query);
    if let Some(answer) = answer_from_history(&question, history) {
        return finish_call(&answer);
    }
    if !force_answer {
        if let Some(next) = search_plan(&question, history).into_iter().find(|c| !already_done(c, history)) {
            return next;
        }
    }
    finish_call(UNKNOWN_ANSWER)
}

/// Alternative actions available at a step, used for exploration.
pub fn retrieval_alternatives(query: &str, history: &[RetrievalStep]) -> Vec<ToolCall> {
    let question = parse_question(query);
    let key = match &question {
        Question::Slot { subject, slot } => slot_fact_key(subject, slot),
        Question::Profession { subject } | Question::EmployerCity { subject } => subject.clone(),
        Question::When { subject, event } => format!("{subject} {event}"),
        Question::Other(q) => q.clone(),
    };
    let mut out: Vec<ToolCall> = ["search_summary", "search_facts", "search_experiences", "search_turns"]
        .iter()
        .map(|t| search(t, &key))
        .collect();
    out.push(ToolCall::with_strings("search_personas", &[("query", &key)]));
    let best = answer_from_history(&question, history).unwrap_or_else(|| UNKNOWN_ANSWER.to_owned());
    out.push(finish_call(&best));
    out
}
