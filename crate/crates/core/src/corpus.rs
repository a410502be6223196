//! Statute KBs, case records and program composition.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{EngineError, KnowledgeBase};
use crate::parser::{parse_program_with_id, parse_query, ParseError};
use crate::render::render_clause;
use crate::term::{Program, Term};

/// Entailment and numeric totals of the full upstream corpus.
pub const FULL_CORPUS_ENTAILMENT: usize = 276;
pub const FULL_CORPUS_NUMERIC: usize = 100;

pub const TAG_GENERATED: &str = "generated";
pub const TAG_ASSERTS_CONCLUSION: &str = "asserts_conclusion";
pub const TAG_HOLDOUT: &str = "holdout";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{error}")]
    Parse { path: String, error: ParseError },
    #[error("{} invalid record(s); first: {}", .0.len(), .0[0])]
    Records(Vec<RecordError>),
    #[error("case {case_id}: fact `{fact}` asserts computed predicate {predicate}")]
    Alignment {
        case_id: String,
        predicate: String,
        fact: String,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.id {
            Some(id) => write!(f, "line {} ({}): {}", self.line, id, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// answers and split tags

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Entailment,
    Contradiction,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Entailment => "Entailment",
            Verdict::Contradiction => "Contradiction",
        })
    }
}

impl std::str::FromStr for Verdict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "Entailment" => Ok(Verdict::Entailment),
            "Contradiction" => Ok(Verdict::Contradiction),
            other => Err(format!("`{other}` is not Entailment or Contradiction")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Answer {
    Verdict(Verdict),
    Numeric(BigInt),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerKind {
    Entailment,
    Numeric,
}

impl Answer {
    pub fn kind(&self) -> AnswerKind {
        match self {
            Answer::Verdict(_) => AnswerKind::Entailment,
            Answer::Numeric(_) => AnswerKind::Numeric,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Answer::Verdict(v) => serde_json::json!({"kind": "entailment", "value": v.to_string()}),
            Answer::Numeric(n) => serde_json::json!({"kind": "numeric", "value": int_json(n)}),
        }
    }

    pub fn from_json(v: &Value) -> Result<Answer, String> {
        let kind = v
            .get("kind")
            .and_then(Value::as_str)
            .ok_or("answer.kind missing")?;
        let value = v.get("value").ok_or("answer.value missing")?;
        match kind {
            "entailment" => {
                let s = value.as_str().ok_or("entailment answer must be a string")?;
                Ok(Answer::Verdict(s.parse()?))
            }
            "numeric" => {
                let n = json_int(value).ok_or("numeric answer must be an integer")?;
                if n.is_negative() {
                    return Err("numeric answer must be nonnegative".into());
                }
                Ok(Answer::Numeric(n))
            }
            other => Err(format!("unknown answer kind `{other}`")),
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Verdict(v) => v.fmt(f),
            Answer::Numeric(n) => n.fmt(f),
        }
    }
}

/// JSON number when it fits in 64 bits, decimal string otherwise.
pub fn int_json(n: &BigInt) -> Value {
    if let Some(i) = n.to_i64() {
        Value::from(i)
    } else if let Some(u) = n.to_u64() {
        Value::from(u)
    } else {
        Value::String(n.to_string())
    }
}

pub fn json_int(v: &Value) -> Option<BigInt> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .map(BigInt::from)
            .or_else(|| n.as_u64().map(BigInt::from)),
        Value::String(s) if !s.is_empty() => s.parse().ok(),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Base {
    Ee,
    En,
    N,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleVariant {
    Original,
    RPrime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseVariant {
    Original,
    NumericChanged,
    Paraphrased,
}

/// One of the ten split rows: N, N_r, N_c, N_rc, Ee, Ee_c, En, En_r, En_c, En_rc.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SplitTag {
    pub base: Base,
    pub rule: RuleVariant,
    pub case: CaseVariant,
}

pub const ALL_SPLITS: [&str; 10] = [
    "N", "N_r", "N_c", "N_rc", "Ee", "Ee_c", "En", "En_r", "En_c", "En_rc",
];

impl SplitTag {
    pub fn new(base: Base, rule: RuleVariant, case: CaseVariant) -> Result<SplitTag, String> {
        use CaseVariant as C;
        use RuleVariant as R;
        let ok = match base {
            Base::Ee => rule == R::Original && matches!(case, C::Original | C::Paraphrased),
            Base::N | Base::En => case != C::Paraphrased,
        };
        if ok {
            Ok(SplitTag { base, rule, case })
        } else {
            Err(format!(
                "({base:?}, {rule:?}, {case:?}) is not a valid split"
            ))
        }
    }

    pub fn original(base: Base) -> SplitTag {
        SplitTag {
            base,
            rule: RuleVariant::Original,
            case: CaseVariant::Original,
        }
    }

    pub fn answer_kind(&self) -> AnswerKind {
        match self.base {
            Base::N => AnswerKind::Numeric,
            Base::Ee | Base::En => AnswerKind::Entailment,
        }
    }

    pub fn name(&self) -> String {
        let base = match self.base {
            Base::Ee => "Ee",
            Base::En => "En",
            Base::N => "N",
        };
        let suffix = match (self.rule, self.case) {
            (RuleVariant::Original, CaseVariant::Original) => "",
            (RuleVariant::RPrime, CaseVariant::Original) => "_r",
            (RuleVariant::Original, _) => "_c",
            (RuleVariant::RPrime, _) => "_rc",
        };
        format!("{base}{suffix}")
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl std::str::FromStr for SplitTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (base, suffix) = s.split_once('_').unwrap_or((s, ""));
        let base = match base {
            "Ee" => Base::Ee,
            "En" => Base::En,
            "N" => Base::N,
            _ => return Err(format!("unknown split `{s}`")),
        };
        let paraphrase_or_numeric = if base == Base::Ee {
            CaseVariant::Paraphrased
        } else {
            CaseVariant::NumericChanged
        };
        let (rule, case) = match suffix {
            "" => (RuleVariant::Original, CaseVariant::Original),
            "r" => (RuleVariant::RPrime, CaseVariant::Original),
            "c" => (RuleVariant::Original, paraphrase_or_numeric),
            "rc" => (RuleVariant::RPrime, paraphrase_or_numeric),
            _ => return Err(format!("unknown split `{s}`")),
        };
        SplitTag::new(base, rule, case)
    }
}

// ---------------------------------------------------------------------------
// cases

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseInstance {
    pub id: String,
    pub split: SplitTag,
    pub text: String,
    pub gold_facts: Program,
    pub query: Term,
    /// `None` while the answer awaits regeneration.
    pub answer: Option<Answer>,
    pub provenance: Provenance,
    pub tags: Vec<String>,
}

/// On-disk record shape, one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub split: String,
    pub text: String,
    pub facts_pl: String,
    pub query_pl: String,
    pub answer: Value,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl CaseInstance {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    pub fn tag_value(&self, key: &str) -> Option<&str> {
        self.tags
            .iter()
            .find_map(|t| t.strip_prefix(key)?.strip_prefix('='))
    }

    /// Fact pattern and question, split at the last `Question:` line.
    pub fn text_parts(&self) -> (&str, &str) {
        match self.text.rfind("\nQuestion: ") {
            Some(i) => (&self.text[..i], &self.text[i + "\nQuestion: ".len()..]),
            None => (self.text.as_str(), ""),
        }
    }

    /// The variable whose binding answers a numeric query: the `answer_slot`
    /// tag if present, else the last distinct variable.
    pub fn answer_slot(&self) -> Option<String> {
        if let Some(v) = self.tag_value("answer_slot") {
            return Some(v.to_string());
        }
        self.query.variables().pop()
    }

    pub fn from_record(rec: &CaseRecord) -> Result<CaseInstance, String> {
        let split: SplitTag = rec.split.parse()?;
        let gold_facts =
            parse_program_with_id(&rec.facts_pl, &rec.id).map_err(|e| format!("facts_pl {e}"))?;
        if !gold_facts.facts_only() {
            return Err("facts_pl contains a rule; cases carry facts only".into());
        }
        let query = parse_query(&rec.query_pl).map_err(|e| format!("query_pl {e}"))?;
        let answer = Answer::from_json(&rec.answer)?;
        if answer.kind() != split.answer_kind() {
            return Err(format!(
                "answer kind {:?} does not match split {split}",
                answer.kind()
            ));
        }
        let provenance = if rec.tags.iter().any(|t| t == TAG_GENERATED) {
            Provenance::Generated
        } else {
            Provenance::Original
        };
        Ok(CaseInstance {
            id: rec.id.clone(),
            split,
            text: rec.text.clone(),
            gold_facts,
            query,
            answer: Some(answer),
            provenance,
            tags: rec.tags.clone(),
        })
    }

    /// Panics if the answer is still pending.
    pub fn to_record(&self) -> CaseRecord {
        let facts: Vec<String> = self.gold_facts.clauses.iter().map(render_clause).collect();
        let mut tags = self.tags.clone();
        if self.provenance == Provenance::Generated && !self.has_tag(TAG_GENERATED) {
            tags.push(TAG_GENERATED.to_string());
        }
        CaseRecord {
            id: self.id.clone(),
            split: self.split.name(),
            text: self.text.clone(),
            facts_pl: facts.join(" "),
            query_pl: self.query.to_string(),
            answer: self
                .answer
                .as_ref()
                .expect("answer regenerated before writing")
                .to_json(),
            tags,
        }
    }
}

pub fn parse_cases(text: &str) -> Result<Vec<CaseInstance>, CorpusError> {
    let mut cases = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(RecordError {
                    line: i + 1,
                    id: None,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match CaseInstance::from_record(&rec) {
            Ok(c) => cases.push(c),
            Err(message) => errors.push(RecordError {
                line: i + 1,
                id: Some(rec.id.clone()),
                message,
            }),
        }
    }
    if errors.is_empty() {
        Ok(cases)
    } else {
        Err(CorpusError::Records(errors))
    }
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<CaseInstance>, CorpusError> {
    let path = path.as_ref();
    let cases = parse_cases(&read(path)?)?;
    for (split, n) in split_counts(&cases) {
        log::info!("{}: {split} = {n}", path.display());
    }
    Ok(cases)
}

pub fn split_counts(cases: &[CaseInstance]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for c in cases {
        *counts.entry(c.split.name()).or_insert(0) += 1;
    }
    counts
}

/// Compares entailment/numeric totals against the full upstream corpus.
/// Returns a warning per mismatch.
pub fn check_full_corpus(cases: &[CaseInstance]) -> Vec<String> {
    let ent = cases
        .iter()
        .filter(|c| c.split.answer_kind() == AnswerKind::Entailment)
        .count();
    let num = cases.len() - ent;
    let mut warnings = Vec::new();
    if ent != FULL_CORPUS_ENTAILMENT {
        warnings.push(format!(
            "expected {FULL_CORPUS_ENTAILMENT} entailment cases, found {ent}"
        ));
    }
    if num != FULL_CORPUS_NUMERIC {
        warnings.push(format!(
            "expected {FULL_CORPUS_NUMERIC} numeric cases, found {num}"
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    warnings
}

pub fn write_cases(cases: &[CaseInstance]) -> String {
    let mut out = String::new();
    for c in cases {
        out.push_str(&serde_json::to_string(&c.to_record()).expect("records serialize"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// statutes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RulesetId {
    #[serde(rename = "r")]
    R,
    #[serde(rename = "r_prime")]
    RPrime,
}

impl fmt::Display for RulesetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RulesetId::R => "r",
            RulesetId::RPrime => "r_prime",
        })
    }
}

/// One rewritten integer literal. `arg_path` indexes from the clause:
/// `0` is the head, `k >= 1` is body goal `k-1`, then argument positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Substitution {
    pub clause_index: usize,
    pub arg_path: Vec<usize>,
    #[serde(with = "bigint_json")]
    pub old: BigInt,
    #[serde(with = "bigint_json")]
    pub new: BigInt,
}

pub(crate) mod bigint_json {
    use num_bigint::BigInt;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(n: &BigInt, s: S) -> Result<S::Ok, S::Error> {
        super::int_json(n).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigInt, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        super::json_int(&v).ok_or_else(|| D::Error::custom("expected an integer"))
    }
}

/// Computed predicates that case facts must not assert.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist {
    entries: Vec<(String, Option<usize>)>,
}

impl Blocklist {
    /// One `name/arity` or `name/*` per line; `#` and `%` start comments.
    pub fn parse(text: &str) -> Result<Blocklist, String> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', '%']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, arity) = line.rsplit_once('/').unwrap_or((line, "*"));
            let arity = match arity {
                "*" => None,
                a => Some(
                    a.parse()
                        .map_err(|_| format!("line {}: bad arity `{a}`", i + 1))?,
                ),
            };
            entries.push((name.to_string(), arity));
        }
        Ok(Blocklist { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Blocklist, CorpusError> {
        let path = path.as_ref();
        Blocklist::parse(&read(path)?).map_err(|message| {
            CorpusError::Records(vec![RecordError {
                line: 0,
                id: Some(path.display().to_string()),
                message,
            }])
        })
    }

    /// Matches the entry itself and its subsections (`s152` covers `s152_c_1`).
    pub fn blocks(&self, name: &str, arity: usize) -> bool {
        self.entries.iter().any(|(n, a)| {
            let name_hit = name == n
                || name
                    .strip_prefix(n.as_str())
                    .is_some_and(|rest| rest.starts_with('_'));
            name_hit && a.is_none_or(|a| a == arity)
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatuteKB {
    pub program: Program,
    pub ruleset_id: RulesetId,
    pub substitution_map: Vec<Substitution>,
    pub blocklist: Blocklist,
    /// Natural-language statute text, kept in step with the program.
    pub text: Option<String>,
}

impl StatuteKB {
    pub fn from_source(source: &str, source_id: &str) -> Result<StatuteKB, CorpusError> {
        let program =
            parse_program_with_id(source, source_id).map_err(|error| CorpusError::Parse {
                path: source_id.to_string(),
                error,
            })?;
        if program.is_empty() {
            log::warn!("{source_id}: statute file has no clauses");
        }
        Ok(StatuteKB {
            program,
            ruleset_id: RulesetId::R,
            substitution_map: Vec::new(),
            blocklist: Blocklist::default(),
            text: None,
        })
    }

    pub fn with_blocklist(mut self, blocklist: Blocklist) -> Self {
        self.blocklist = blocklist;
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }
}

pub fn load_statutes(path: impl AsRef<Path>) -> Result<StatuteKB, CorpusError> {
    let path = path.as_ref();
    StatuteKB::from_source(&read(path)?, &path.display().to_string())
}

/// Statutes first, then the case facts; frozen and ready for the query.
pub fn compose_program(kb: &StatuteKB, case: &CaseInstance) -> Result<KnowledgeBase, CorpusError> {
    compose_facts(
        kb,
        &case.id,
        &case.gold_facts,
        case.has_tag(TAG_ASSERTS_CONCLUSION),
    )
}

pub fn compose_facts(
    kb: &StatuteKB,
    case_id: &str,
    facts: &Program,
    allow_conclusions: bool,
) -> Result<KnowledgeBase, CorpusError> {
    if !allow_conclusions {
        if let Some(c) = facts.clauses.iter().find(|c| {
            let (n, a) = c.key();
            kb.blocklist.blocks(n, a)
        }) {
            let (n, a) = c.key();
            return Err(CorpusError::Alignment {
                case_id: case_id.to_string(),
                predicate: format!("{n}/{a}"),
                fact: render_clause(c),
            });
        }
    }
    let mut out = KnowledgeBase::new(kb.ruleset_id.to_string());
    out.consult(&kb.program)?.consult(facts)?.freeze();
    Ok(out)
}
