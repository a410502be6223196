//! Contamination audit with bias-detector (BDQ) and bias-compensator (BCQ)
//! quizzes, scored by Cohen's kappa against the BDQ positional profile.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::CaseInstance;
use crate::llm::{generate_perturbations, take_quiz, Bridge};
use crate::util::rng_for;

pub const NONE_OPTION: &str = "None of the provided options.";
pub const CHANCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    A,
    B,
    C,
    D,
    E,
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::A,
        Position::B,
        Position::C,
        Position::D,
        Position::E,
    ];
    pub const SUBSTANTIVE: [Position; 4] = [Position::A, Position::B, Position::C, Position::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Position> {
        Position::ALL.get(i).copied()
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Position {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Position::A),
            "B" => Ok(Position::B),
            "C" => Ok(Position::C),
            "D" => Ok(Position::D),
            "E" => Ok(Position::E),
            other => Err(format!("`{other}` is not a quiz position")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizItem {
    pub id: String,
    pub options: Vec<String>,
    pub original_position: Option<Position>,
    pub source_case_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub item_id: String,
    pub chosen: Option<Position>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AuditError {
    #[error("no responses to profile")]
    NoResponses,
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// perturbation sources

pub trait PerturbationSource: Sync {
    fn variants(&self, case_id: &str, text: &str) -> Result<Vec<String>, String>;
}

/// Pre-generated variants, one JSON line `{"id":..,"variants":[..]}` per case.
#[derive(Debug, Clone, Default)]
pub struct FileVariants(pub HashMap<String, Vec<String>>);

#[derive(Deserialize)]
struct VariantLine {
    id: String,
    variants: Vec<String>,
}

impl FileVariants {
    pub fn parse(text: &str) -> Result<FileVariants, String> {
        let mut map = HashMap::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let v: VariantLine =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            map.insert(v.id, v.variants);
        }
        Ok(FileVariants(map))
    }
}

impl PerturbationSource for FileVariants {
    fn variants(&self, case_id: &str, _text: &str) -> Result<Vec<String>, String> {
        self.0
            .get(case_id)
            .cloned()
            .ok_or_else(|| format!("no variants for {case_id}"))
    }
}

pub struct LlmVariants<'a>(pub &'a Bridge);

impl PerturbationSource for LlmVariants<'_> {
    fn variants(&self, _case_id: &str, text: &str) -> Result<Vec<String>, String> {
        generate_perturbations(self.0, text)
            .map(|ps| ps.into_iter().map(|p| p.text).collect())
            .map_err(|e| e.to_string())
    }
}

/// Offline word-level synonym swaps drawn from a conservative bank.
#[derive(Debug, Clone)]
pub struct SynonymPerturber {
    seed: u64,
    rules: Vec<(Regex, Vec<&'static str>)>,
}

const SYNONYMS: &[(&str, &[&str])] = &[
    (r"\bdone\b", &["performed"]),
    (r"\btakes\b", &["claims", "uses"]),
    (r"\bfurnished\b", &["provided", "paid"]),
    (r"\bcosts\b", &["expenses"]),
    (r"\blived\b", &["resided"]),
    (r"\blives\b", &["resides"]),
    (r"\blive\b", &["reside"]),
    (r"\bwas paid\b", &["was compensated"]),
    (r"\bhad\b", &["earned", "received"]),
    (r"\bearned\b", &["received"]),
    (r"\b[Ii]n\b(?= \d{4}\b)", &["during", "for"]),
    (r"\b[Ff]or\b(?= (?:the year )?\d{4}\b)", &["during", "in"]),
    (r"\bis equal to\b", &["is equivalent to"]),
    (r"\bother\b", &["additional"]),
    (r"\bmarried\b", &["wed"]),
    (r"\btogether\b", &["jointly"]),
    (r"\bhas not\b", &["has never"]),
];

impl SynonymPerturber {
    pub fn new(seed: u64) -> SynonymPerturber {
        let rules = SYNONYMS
            .iter()
            .map(|(pat, subs)| (fancy_free(pat), subs.to_vec()))
            .collect();
        SynonymPerturber { seed, rules }
    }

    /// Candidate edits as (start, end, replacement), sorted and non-overlapping.
    fn sites(&self, text: &str) -> Vec<(usize, usize, Vec<String>)> {
        let mut sites: Vec<(usize, usize, Vec<String>)> = Vec::new();
        for (re, subs) in &self.rules {
            for m in re.find_iter(text) {
                let (start, end) = match_span(text, m.start(), m.end(), re.as_str());
                if sites.iter().any(|(s, e, _)| start < *e && *s < end) {
                    continue;
                }
                let orig = &text[start..end];
                let capital = orig.chars().next().is_some_and(char::is_uppercase);
                let reps = subs
                    .iter()
                    .map(|r| {
                        if capital {
                            capitalize(r)
                        } else {
                            r.to_string()
                        }
                    })
                    .collect();
                sites.push((start, end, reps));
            }
        }
        sites.sort_by_key(|s| s.0);
        sites
    }
}

/// The `regex` crate has no lookahead; year-guarded patterns are matched
/// with the lookahead folded into the match and trimmed afterwards.
fn fancy_free(pat: &str) -> Regex {
    Regex::new(&pat.replace("(?=", "(?:")).expect("synonym pattern")
}

fn match_span(text: &str, start: usize, end: usize, pat: &str) -> (usize, usize) {
    if pat.contains("(?: ") {
        let word_end = text[start..end].find(' ').map_or(end, |i| start + i);
        (start, word_end)
    } else {
        (start, end)
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl PerturbationSource for SynonymPerturber {
    fn variants(&self, case_id: &str, text: &str) -> Result<Vec<String>, String> {
        let sites = self.sites(text);
        if sites.is_empty() {
            return Err("no substitutable words".into());
        }
        let mut rng = rng_for(self.seed, "synonyms", case_id);
        let mut out: Vec<String> = Vec::new();
        for _ in 0..200 {
            if out.len() == 4 {
                break;
            }
            let k = rng.random_range(1..=sites.len().min(3));
            let mut chosen: Vec<usize> = (0..sites.len()).collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(k);
            chosen.sort_unstable();
            let mut v = String::with_capacity(text.len() + 16);
            let mut last = 0;
            for &i in &chosen {
                let (s, e, reps) = &sites[i];
                v.push_str(&text[last..*s]);
                v.push_str(&reps[rng.random_range(0..reps.len())]);
                last = *e;
            }
            v.push_str(&text[last..]);
            if v != text && !out.contains(&v) {
                out.push(v);
            }
        }
        if out.len() < 4 {
            return Err(format!("only {} distinct variants", out.len()));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// quiz construction

/// Option text for a case: fact pattern, question, and gold label.
pub fn quiz_text(case: &CaseInstance) -> String {
    let (pattern, question) = case.text_parts();
    let answer = case
        .answer
        .as_ref()
        .map(ToString::to_string)
        .unwrap_or_default();
    format!("Text: {pattern}\nQuestion: {question}\nAnswer: {answer}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BdqBuild {
    pub items: Vec<QuizItem>,
    pub skipped: Vec<(String, String)>,
}

/// One BDQ item per source: four perturbations in seed-determined order,
/// then the none-option.
pub fn build_bdq(
    sources: &[(String, String)],
    source: &dyn PerturbationSource,
    seed: u64,
) -> BdqBuild {
    let mut out = BdqBuild::default();
    for (id, text) in sources {
        let mut variants = match source.variants(id, text) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("BDQ {id}: skipped ({e})");
                out.skipped.push((id.clone(), e));
                continue;
            }
        };
        let distinct = variants
            .iter()
            .enumerate()
            .all(|(i, v)| !variants[..i].contains(v));
        let reason = if variants.len() < 4 || !distinct {
            Some("fewer than 4 distinct variants".to_string())
        } else if variants.iter().any(|v| v == text) {
            Some("a variant equals the original".to_string())
        } else {
            None
        };
        if let Some(r) = reason {
            log::warn!("BDQ {id}: skipped ({r})");
            out.skipped.push((id.clone(), r));
            continue;
        }
        variants.truncate(4);
        variants.shuffle(&mut rng_for(seed, "bdq-order", id));
        variants.push(NONE_OPTION.to_string());
        out.items.push(QuizItem {
            id: format!("{id}#bdq"),
            options: variants,
            original_position: None,
            source_case_id: id.clone(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionProfile {
    pub rates: BTreeMap<Position, f64>,
    pub n_items: usize,
    pub non_responses: usize,
    pub non_preferred: Vec<Position>,
}

impl PositionProfile {
    pub fn rate(&self, p: Position) -> f64 {
        self.rates.get(&p).copied().unwrap_or(0.0)
    }
}

/// Selection rate per position; non-responses are excluded and counted.
pub fn position_bias(responses: &[Response]) -> Result<PositionProfile, AuditError> {
    let mut counts = [0usize; 5];
    let mut non_responses = 0;
    for r in responses {
        match r.chosen {
            Some(p) => counts[p.index()] += 1,
            None => non_responses += 1,
        }
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(AuditError::NoResponses);
    }
    let rates: BTreeMap<Position, f64> = Position::ALL
        .iter()
        .map(|&p| (p, counts[p.index()] as f64 / n as f64))
        .collect();
    let non_preferred = Position::SUBSTANTIVE
        .iter()
        .copied()
        .filter(|p| rates[p] < CHANCE)
        .collect();
    Ok(PositionProfile {
        rates,
        n_items: n,
        non_responses,
        non_preferred,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcqPlan {
    pub splits: BTreeMap<Position, Vec<QuizItem>>,
    /// No position was non-preferred, so all of A-D were used.
    pub fallback: bool,
}

/// One split per non-preferred position, with the original swapped in there.
pub fn build_bcq(
    bdq: &[QuizItem],
    originals: &HashMap<String, String>,
    profile: &PositionProfile,
) -> BcqPlan {
    let fallback = profile.non_preferred.is_empty();
    let positions: Vec<Position> = if fallback {
        log::warn!("no non-preferred position; using A-D as BCQ splits");
        Position::SUBSTANTIVE.to_vec()
    } else {
        profile.non_preferred.clone()
    };
    let mut splits = BTreeMap::new();
    for p in positions {
        let items = bdq
            .iter()
            .filter_map(|item| {
                let original = originals.get(&item.source_case_id)?;
                let mut options = item.options.clone();
                options[p.index()] = original.clone();
                Some(QuizItem {
                    id: format!("{}#bcq-{p}", item.source_case_id),
                    options,
                    original_position: Some(p),
                    source_case_id: item.source_case_id.clone(),
                })
            })
            .collect();
        splits.insert(p, items);
    }
    BcqPlan { splits, fallback }
}

/// Fraction of answered items that picked the original, plus the number of
/// non-responses. `None` when nothing was answered.
pub fn bcq_accuracy(items: &[QuizItem], responses: &[Response]) -> (Option<f64>, usize) {
    let by_id: HashMap<&str, Option<Position>> = responses
        .iter()
        .map(|r| (r.item_id.as_str(), r.chosen))
        .collect();
    let mut hits = 0usize;
    let mut answered = 0usize;
    let mut missing = 0usize;
    for item in items {
        match by_id.get(item.id.as_str()).copied().flatten() {
            Some(p) => {
                answered += 1;
                if Some(p) == item.original_position {
                    hits += 1;
                }
            }
            None => missing += 1,
        }
    }
    if answered == 0 {
        (None, missing)
    } else {
        (Some(hits as f64 / answered as f64), missing)
    }
}

// ---------------------------------------------------------------------------
// scoring

/// Cohen's kappa; `None` when `p_e` is 1.
pub fn kappa(p_o: f64, p_e: f64) -> Option<f64> {
    if p_e >= 1.0 {
        None
    } else {
        Some((p_o - p_e) / (1.0 - p_e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionKappa {
    pub position: Position,
    pub p_o: f64,
    pub p_e: f64,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub per_position: Vec<PositionKappa>,
    pub min_contamination: Option<f64>,
    pub max_contamination: Option<f64>,
    pub best_position: Option<Position>,
    /// Kappa at the best-performing BCQ split.
    pub headline_kappa: Option<f64>,
    pub non_preferred: Vec<Position>,
    pub fallback: bool,
    pub seed: Option<u64>,
    pub non_responses: usize,
}

pub fn contamination_summary(
    profile: &PositionProfile,
    bcq_results: &BTreeMap<Position, f64>,
) -> ContaminationReport {
    let per_position: Vec<PositionKappa> = bcq_results
        .iter()
        .map(|(&position, &p_o)| {
            let p_e = profile.rate(position);
            PositionKappa {
                position,
                p_o,
                p_e,
                kappa: kappa(p_o, p_e),
            }
        })
        .collect();
    let fallback = profile.non_preferred.is_empty();
    let fold = |it: &mut dyn Iterator<Item = f64>, pick: fn(f64, f64) -> f64| it.reduce(pick);
    let min_contamination = fold(
        &mut per_position
            .iter()
            .filter(|k| fallback || profile.non_preferred.contains(&k.position))
            .filter_map(|k| k.kappa),
        f64::min,
    );
    let max_contamination = fold(&mut per_position.iter().filter_map(|k| k.kappa), f64::max);
    let best = per_position
        .iter()
        .fold(None::<&PositionKappa>, |best, k| match best {
            Some(b) if b.p_o >= k.p_o => Some(b),
            _ => Some(k),
        });
    ContaminationReport {
        min_contamination,
        max_contamination,
        best_position: best.map(|b| b.position),
        headline_kappa: best.and_then(|b| b.kappa),
        per_position,
        non_preferred: profile.non_preferred.clone(),
        fallback,
        seed: None,
        non_responses: profile.non_responses,
    }
}

// ---------------------------------------------------------------------------
// administration and simulation

pub trait Responder {
    fn respond(&mut self, item: &QuizItem) -> Option<Position>;
}

/// Picks the verbatim original when present, else the none-option.
pub struct Memorizer;

impl Responder for Memorizer {
    fn respond(&mut self, item: &QuizItem) -> Option<Position> {
        Some(item.original_position.unwrap_or(Position::E))
    }
}

/// Uniform over A-E, with separate streams for BDQ and BCQ items.
pub struct Uniform {
    bdq: ChaCha8Rng,
    bcq: ChaCha8Rng,
}

impl Uniform {
    pub fn new(seed: u64) -> Uniform {
        Uniform {
            bdq: rng_for(seed, "uniform", "bdq"),
            bcq: rng_for(seed, "uniform", "bcq"),
        }
    }
}

impl Responder for Uniform {
    fn respond(&mut self, item: &QuizItem) -> Option<Position> {
        let rng = if item.original_position.is_some() {
            &mut self.bcq
        } else {
            &mut self.bdq
        };
        Position::from_index(rng.random_range(0..5))
    }
}

/// Uniform over every position except the original.
pub struct AntiOriginal {
    rng: ChaCha8Rng,
}

impl AntiOriginal {
    pub fn new(seed: u64) -> AntiOriginal {
        AntiOriginal {
            rng: rng_for(seed, "anti", ""),
        }
    }
}

impl Responder for AntiOriginal {
    fn respond(&mut self, item: &QuizItem) -> Option<Position> {
        let choices: Vec<Position> = Position::ALL
            .iter()
            .copied()
            .filter(|&p| Some(p) != item.original_position)
            .collect();
        choices.choose(&mut self.rng).copied()
    }
}

/// Answers quizzes through the provider.
pub struct LlmResponder<'a> {
    pub bridge: &'a Bridge,
    pub split_name: String,
    pub dataset_name: String,
}

impl Responder for LlmResponder<'_> {
    fn respond(&mut self, item: &QuizItem) -> Option<Position> {
        take_quiz(self.bridge, item, &self.split_name, &self.dataset_name)
    }
}

pub fn administer(items: &[QuizItem], responder: &mut dyn Responder) -> Vec<Response> {
    items
        .iter()
        .map(|item| Response {
            item_id: item.id.clone(),
            chosen: responder.respond(item),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponderKind {
    Memorizer,
    Uniform,
    AntiOriginal,
}

impl std::str::FromStr for ResponderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "memorizer" => Ok(ResponderKind::Memorizer),
            "uniform" => Ok(ResponderKind::Uniform),
            "anti_original" | "anti-original" => Ok(ResponderKind::AntiOriginal),
            other => Err(format!("unknown responder `{other}`")),
        }
    }
}

pub fn responder(kind: ResponderKind, seed: u64) -> Box<dyn Responder> {
    match kind {
        ResponderKind::Memorizer => Box::new(Memorizer),
        ResponderKind::Uniform => Box::new(Uniform::new(seed)),
        ResponderKind::AntiOriginal => Box::new(AntiOriginal::new(seed)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRun {
    pub profile: PositionProfile,
    pub report: ContaminationReport,
}

/// Full BDQ -> profile -> BCQ -> kappa loop for one responder.
pub fn run_audit(
    bdq: &[QuizItem],
    originals: &HashMap<String, String>,
    responder: &mut dyn Responder,
    seed: u64,
) -> Result<AuditRun, AuditError> {
    let profile = position_bias(&administer(bdq, responder))?;
    let plan = build_bcq(bdq, originals, &profile);
    let mut results = BTreeMap::new();
    let mut missing = 0;
    for (p, items) in &plan.splits {
        let (acc, miss) = bcq_accuracy(items, &administer(items, responder));
        missing += miss;
        if let Some(acc) = acc {
            results.insert(*p, acc);
        }
    }
    let mut report = contamination_summary(&profile, &results);
    report.seed = Some(seed);
    report.non_responses += missing;
    Ok(AuditRun { profile, report })
}

/// Position encoded in a BCQ item id (`{case}#bcq-{P}`).
pub fn bcq_position(item_id: &str) -> Option<Position> {
    item_id.rsplit_once("#bcq-")?.1.parse().ok()
}

/// Per-position BCQ accuracy from responses alone; the item ids carry the
/// original's position. Returns the accuracies and the non-response count.
pub fn bcq_results(responses: &[Response]) -> Result<(BTreeMap<Position, f64>, usize), AuditError> {
    let mut tally: BTreeMap<Position, (usize, usize)> = BTreeMap::new();
    let mut missing = 0;
    for r in responses {
        let p = bcq_position(&r.item_id)
            .ok_or_else(|| AuditError::Invalid(format!("{} is not a BCQ item id", r.item_id)))?;
        let entry = tally.entry(p).or_default();
        match r.chosen {
            Some(c) => {
                entry.1 += 1;
                entry.0 += usize::from(c == p);
            }
            None => missing += 1,
        }
    }
    let results = tally
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(p, (hits, n))| (p, hits as f64 / n as f64))
        .collect();
    Ok((results, missing))
}

/// Report from the two response files of a finished audit.
pub fn report_from_responses(
    bdq: &[Response],
    bcq: &[Response],
    seed: Option<u64>,
) -> Result<AuditRun, AuditError> {
    let profile = position_bias(bdq)?;
    let (results, missing) = bcq_results(bcq)?;
    let mut report = contamination_summary(&profile, &results);
    report.seed = seed;
    report.non_responses += missing;
    Ok(AuditRun { profile, report })
}

/// Synthetic quiz bank of `n` items for responder simulations.
pub fn synthetic_bank(n: usize, seed: u64) -> (Vec<QuizItem>, HashMap<String, String>) {
    let sources: Vec<(String, String)> = (0..n)
        .map(|i| (format!("s{i:05}"), format!("Item {i} original")))
        .collect();
    let variants = FileVariants(
        sources
            .iter()
            .map(|(id, _)| {
                (
                    id.clone(),
                    (1..=4).map(|k| format!("{id} variant {k}")).collect(),
                )
            })
            .collect(),
    );
    let bdq = build_bdq(&sources, &variants, seed).items;
    (bdq, sources.into_iter().collect())
}

pub fn simulate(kind: ResponderKind, n: usize, seed: u64) -> AuditRun {
    let (bdq, originals) = synthetic_bank(n, seed);
    run_audit(&bdq, &originals, responder(kind, seed).as_mut(), seed)
        .expect("simulated responders always answer")
}

// ---------------------------------------------------------------------------
// files

pub fn write_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>, String> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn resp(p: Option<Position>) -> Response {
        Response {
            item_id: "i".into(),
            chosen: p,
        }
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa(0.2, 0.2), Some(0.0));
        assert_eq!(kappa(1.0, 0.1), Some(1.0));
        assert!((kappa(0.73, 0.2).unwrap() - 0.6625).abs() < 1e-12);
        assert_eq!(kappa(0.5, 1.0), None);
    }

    #[test]
    fn summary_single_split() {
        let mut rates = BTreeMap::new();
        for p in Position::ALL {
            rates.insert(p, if p == Position::C { 0.05 } else { 0.2375 });
        }
        let profile = PositionProfile {
            rates,
            n_items: 100,
            non_responses: 0,
            non_preferred: vec![Position::C],
        };
        let r = contamination_summary(&profile, &BTreeMap::from([(Position::C, 0.61)]));
        let expect = (0.61 - 0.05) / 0.95;
        assert!((r.min_contamination.unwrap() - expect).abs() < 1e-12);
        assert_eq!(r.min_contamination, r.max_contamination);
        assert!((expect - 0.589).abs() < 1e-3);
        assert_eq!(r.best_position, Some(Position::C));
    }

    #[test]
    fn profiles() {
        let all_e: Vec<Response> = (0..10).map(|_| resp(Some(Position::E))).collect();
        let p = position_bias(&all_e).unwrap();
        assert_eq!(p.rate(Position::E), 1.0);
        assert_eq!(p.non_preferred, Position::SUBSTANTIVE.to_vec());

        let mut mixed: Vec<Response> = (0..6).map(|_| resp(Some(Position::A))).collect();
        mixed.extend((0..4).map(|_| resp(Some(Position::E))));
        mixed.push(resp(None));
        let p = position_bias(&mixed).unwrap();
        assert_eq!(p.non_preferred, vec![Position::B, Position::C, Position::D]);
        assert_eq!((p.n_items, p.non_responses), (10, 1));

        assert_eq!(position_bias(&[]), Err(AuditError::NoResponses));
        assert_eq!(position_bias(&[resp(None)]), Err(AuditError::NoResponses));
    }

    #[test]
    fn exact_chance_rate_counts_as_preferred() {
        let rs: Vec<Response> = Position::ALL.iter().map(|&p| resp(Some(p))).collect();
        assert!(position_bias(&rs).unwrap().non_preferred.is_empty());
    }

    #[test]
    fn uniform_responder_is_roughly_unbiased() {
        let (bdq, _) = synthetic_bank(1000, 3);
        let p = position_bias(&administer(&bdq, &mut Uniform::new(3))).unwrap();
        for pos in Position::ALL {
            assert!((p.rate(pos) - 0.2).abs() < 0.04, "{pos}: {}", p.rate(pos));
        }
    }

    fn bank() -> (Vec<(String, String)>, FileVariants) {
        let sources = vec![("c1".to_string(), "orig".to_string())];
        let variants = FileVariants(HashMap::from([(
            "c1".to_string(),
            vec!["v1".into(), "v2".into(), "v3".into(), "v4".into()],
        )]));
        (sources, variants)
    }

    #[test]
    fn bdq_order_is_seeded() {
        let (sources, variants) = bank();
        let a = build_bdq(&sources, &variants, 7);
        assert_eq!(a, build_bdq(&sources, &variants, 7));
        let item = &a.items[0];
        assert_eq!(item.options.len(), 5);
        assert_eq!(item.options[4], NONE_OPTION);
        assert!(item.original_position.is_none());
        let mut sorted = item.options[..4].to_vec();
        sorted.sort();
        assert_eq!(sorted, ["v1", "v2", "v3", "v4"]);
    }

    #[test]
    fn bdq_skips_bad_variant_sets() {
        let (sources, mut variants) = bank();
        variants.0.get_mut("c1").unwrap()[2] = "orig".into();
        let b = build_bdq(&sources, &variants, 7);
        assert!(b.items.is_empty());
        assert_eq!(b.skipped.len(), 1);
        variants.0.get_mut("c1").unwrap().truncate(3);
        assert!(build_bdq(&sources, &variants, 7).items.is_empty());
    }

    #[test]
    fn bcq_replaces_only_the_target_position() {
        let (sources, variants) = bank();
        let bdq = build_bdq(&sources, &variants, 7).items;
        let originals: HashMap<String, String> = sources.into_iter().collect();
        let mut profile =
            position_bias(&[resp(Some(Position::A)), resp(Some(Position::B))]).unwrap();
        assert_eq!(profile.non_preferred, vec![Position::C, Position::D]);
        let plan = build_bcq(&bdq, &originals, &profile);
        assert_eq!(plan.splits.len(), 2);
        for (p, items) in &plan.splits {
            let item = &items[0];
            assert_eq!(item.options[p.index()], "orig");
            assert_eq!(item.options[4], NONE_OPTION);
            for q in Position::SUBSTANTIVE.iter().filter(|q| *q != p) {
                assert_eq!(item.options[q.index()], bdq[0].options[q.index()]);
            }
        }
        profile.non_preferred.clear();
        let fb = build_bcq(&bdq, &originals, &profile);
        assert!(fb.fallback);
        assert_eq!(fb.splits.len(), 4);
    }

    #[test]
    fn synonym_perturber_keeps_protected_spans() {
        let text = "Text: Alice was paid $72,500 in 2015. Alice takes the standard deduction. Bob lives with her.\nQuestion: How much tax does Alice have to pay in 2015?\nAnswer: 14000";
        let p = SynonymPerturber::new(1);
        let vs = p.variants("x", text).unwrap();
        crate::llm::validate_variants(text, &vs).unwrap();
        assert_eq!(vs, p.variants("x", text).unwrap());
        assert!(vs.iter().all(|v| v.ends_with("\nAnswer: 14000")));
        assert!(p.variants("y", "Nothing to swap here.").is_err());
    }

    #[test]
    fn synonym_year_prepositions_keep_capitals() {
        let p = SynonymPerturber::new(0);
        let vs = p
            .variants("k", "In 2016 Carol was paid $5.")
            .unwrap_or_default();
        for v in vs {
            assert!(
                v.starts_with("In 2016")
                    || v.starts_with("During 2016")
                    || v.starts_with("For 2016"),
                "{v}"
            );
        }
    }

    #[test]
    fn sandwich() {
        let mem = simulate(ResponderKind::Memorizer, 300, 1).report;
        assert!(mem.min_contamination.unwrap() >= 0.95);
        let anti = simulate(ResponderKind::AntiOriginal, 300, 1).report;
        assert!(anti.max_contamination.unwrap() < 0.0);
    }

    #[test]
    fn report_from_response_files_matches_run_audit() {
        let (bdq, originals) = synthetic_bank(200, 3);
        let mut r = responder(ResponderKind::Uniform, 3);
        let bdq_resp = administer(&bdq, r.as_mut());
        let profile = position_bias(&bdq_resp).unwrap();
        let plan = build_bcq(&bdq, &originals, &profile);
        let bcq: Vec<QuizItem> = plan.splits.values().flatten().cloned().collect();
        let bcq_resp = administer(&bcq, r.as_mut());
        let direct = run_audit(
            &bdq,
            &originals,
            responder(ResponderKind::Uniform, 3).as_mut(),
            3,
        )
        .unwrap();
        let from_files = report_from_responses(&bdq_resp, &bcq_resp, Some(3)).unwrap();
        assert_eq!(from_files, direct);
        assert_eq!(bcq_position("c1#bcq-C"), Some(Position::C));
        assert_eq!(bcq_position("c1#bdq"), None);
    }

    proptest! {
        #[test]
        fn kappa_monotone_in_p_o(p_e in 0.0f64..0.99, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(kappa(a, p_e).unwrap() < kappa(b, p_e).unwrap());
        }

        #[test]
        fn kappa_ignores_distractor_labels(rates in prop::array::uniform5(0u32..100), p_o in 0.0f64..1.0, perm in Just([1usize, 2, 3]).prop_shuffle()) {
            prop_assume!(rates.iter().sum::<u32>() > 0);
            let total: u32 = rates.iter().sum();
            let mk = |r: &[u32; 5]| {
                let rates = Position::ALL.iter().map(|&p| (p, r[p.index()] as f64 / total as f64)).collect::<BTreeMap<_, _>>();
                let non_preferred = Position::SUBSTANTIVE.iter().copied().filter(|p| rates[p] < CHANCE).collect();
                PositionProfile { rates, n_items: total as usize, non_responses: 0, non_preferred }
            };
            // Relabel B, C, D among themselves; A keeps its rate.
            let mut relabeled = rates;
            for (i, &j) in perm.iter().enumerate() {
                relabeled[i + 1] = rates[j];
            }
            let split = BTreeMap::from([(Position::A, p_o)]);
            let a = contamination_summary(&mk(&rates), &split);
            let b = contamination_summary(&mk(&relabeled), &split);
            prop_assert_eq!(a.per_position, b.per_position);
        }
    }
}
