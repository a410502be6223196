//! Entailment and numeric evaluation with abstention, plus the metrics.

use std::fmt;
use std::time::Instant;

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::builtins::is_reserved;
use crate::corpus::{
    compose_facts, compose_program, Answer, AnswerKind, CaseInstance, CorpusError, RuleVariant,
    StatuteKB, Verdict,
};
use crate::engine::{solve, KnowledgeBase, SolveConfig, SolveOutcome};
use crate::llm::{
    direct_qa, translate_case, Bridge, DirectQaError, FinalAnswer, ReferenceCode, Task,
    TranslationError,
};
use crate::term::Term;
use crate::util::par_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainReason {
    ParseFailure,
    ResourceExhausted,
    ProviderError,
}

impl fmt::Display for AbstainReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbstainReason::ParseFailure => "parse_failure",
            AbstainReason::ResourceExhausted => "resource_exhausted",
            AbstainReason::ProviderError => "provider_error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Entailment,
    Contradiction,
    Value(BigInt),
    Abstain(AbstainReason),
}

impl Outcome {
    pub fn is_abstain(&self) -> bool {
        matches!(self, Outcome::Abstain(_))
    }

    pub fn abstain_reason(&self) -> Option<AbstainReason> {
        match self {
            Outcome::Abstain(r) => Some(*r),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Outcome::Entailment => json!("Entailment"),
            Outcome::Contradiction => json!("Contradiction"),
            Outcome::Value(v) => crate::corpus::int_json(v),
            Outcome::Abstain(_) => json!("Abstain"),
        }
    }
}

impl From<Verdict> for Outcome {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Entailment => Outcome::Entailment,
            Verdict::Contradiction => Outcome::Contradiction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub case_id: String,
    pub outcome: Outcome,
    pub latency_ms: u64,
    /// Free-form diagnostics: "no derivation", multiplicity, unknown functor.
    pub notes: Vec<String>,
}

impl Prediction {
    fn new(case_id: &str, outcome: Outcome) -> Self {
        Prediction {
            case_id: case_id.to_string(),
            outcome,
            latency_ms: 0,
            notes: Vec::new(),
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    fn abstain(case_id: &str, reason: AbstainReason, note: impl Into<String>) -> Self {
        Prediction::new(case_id, Outcome::Abstain(reason)).note(note)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub abstained: usize,
}

/// `None` marks a metric with no items of its kind in the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub em: Option<f64>,
    pub m10: Option<f64>,
    pub err: f64,
    pub counts: Counts,
    pub entailment_items: usize,
    pub numeric_items: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("predictions and golds differ in length ({preds} vs {golds})")]
    Length { preds: usize, golds: usize },
    #[error("prediction {index} is for {pred} but gold is for {gold}")]
    IdMismatch {
        index: usize,
        pred: String,
        gold: String,
    },
    #[error("case {0} has no gold answer")]
    MissingGold(String),
    #[error("mode {0} needs a configured provider")]
    NoProvider(Mode),
    #[error("cases from perturbed-rule splits need the perturbed rule set")]
    NoRPrime,
    #[error("direct_qa needs the statute text")]
    NoStatuteText,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// |pred - truth| <= 10% of truth; truth = 0 is a hit only for pred = 0.
pub fn within_ten_percent(pred: &BigInt, truth: &BigInt) -> bool {
    if truth.is_zero() {
        return pred.is_zero();
    }
    (pred - truth).abs() * 10 <= truth.abs()
}

fn run_query(
    kb: &KnowledgeBase,
    case_id: &str,
    goal: &Term,
    cfg: &SolveConfig,
) -> Result<SolveOutcome, Prediction> {
    solve(kb, goal, cfg).map_err(|e| {
        Prediction::abstain(
            case_id,
            AbstainReason::ParseFailure,
            format!("engine error: {e}"),
        )
    })
}

fn unknown_functor(kb: &KnowledgeBase, goal: &Term) -> Option<String> {
    let (name, arity) = goal.functor()?;
    (!kb.defines(name, arity) && !is_reserved(name, arity))
        .then(|| format!("unknown functor {name}/{arity}"))
}

fn decide_on(kb: &KnowledgeBase, case: &CaseInstance, cfg: &SolveConfig) -> Prediction {
    let outcome = match run_query(kb, &case.id, &case.query, cfg) {
        Ok(o) => o,
        Err(p) => return p,
    };
    let mut p = match outcome {
        SolveOutcome::Solutions(_) => Prediction::new(&case.id, Outcome::Entailment),
        SolveOutcome::NoSolution => Prediction::new(&case.id, Outcome::Contradiction),
        SolveOutcome::ResourceExhausted { depth_hit } => {
            return Prediction::abstain(
                &case.id,
                AbstainReason::ResourceExhausted,
                format!("depth {depth_hit}"),
            )
        }
    };
    if let Some(note) = unknown_functor(kb, &case.query) {
        p = p.note(note);
    }
    p
}

fn value_on(kb: &KnowledgeBase, case: &CaseInstance, cfg: &SolveConfig) -> Prediction {
    let Some(slot) = case.answer_slot() else {
        return Prediction::abstain(
            &case.id,
            AbstainReason::ParseFailure,
            "query has no answer slot",
        );
    };
    let sols = match run_query(kb, &case.id, &case.query, cfg) {
        Ok(SolveOutcome::Solutions(sols)) => sols,
        Ok(SolveOutcome::NoSolution) => {
            let p = Prediction::abstain(&case.id, AbstainReason::ParseFailure, "no derivation");
            return match unknown_functor(kb, &case.query) {
                Some(n) => p.note(n),
                None => p,
            };
        }
        Ok(SolveOutcome::ResourceExhausted { depth_hit }) => {
            return Prediction::abstain(
                &case.id,
                AbstainReason::ResourceExhausted,
                format!("depth {depth_hit}"),
            )
        }
        Err(p) => return p,
    };
    let first = sols[0].get(&slot);
    let Some(value) = first.as_ref().and_then(Term::as_int).cloned() else {
        let shown = first.map_or_else(|| "unbound".to_string(), |t| t.to_string());
        return Prediction::abstain(
            &case.id,
            AbstainReason::ParseFailure,
            format!("{slot} bound to non-integer {shown}"),
        );
    };
    let mut p = Prediction::new(&case.id, Outcome::Value(value.clone()));
    let others: Vec<String> = sols[1..]
        .iter()
        .filter_map(|b| b.get(&slot))
        .filter(|t| t.as_int() != Some(&value))
        .map(|t| t.to_string())
        .collect();
    if !others.is_empty() {
        p = p.note(format!(
            "multiplicity: later solutions bind {slot} to {}",
            others.join(", ")
        ));
    }
    p
}

/// Solutions mean Entailment, finite failure Contradiction.
pub fn decide_entailment(kb: &StatuteKB, case: &CaseInstance, cfg: &SolveConfig) -> Prediction {
    match compose_program(kb, case) {
        Ok(composed) => decide_on(&composed, case, cfg),
        Err(e) => Prediction::abstain(&case.id, AbstainReason::ParseFailure, e.to_string()),
    }
}

/// First solution's binding for the answer slot.
pub fn solve_numeric(kb: &StatuteKB, case: &CaseInstance, cfg: &SolveConfig) -> Prediction {
    match compose_program(kb, case) {
        Ok(composed) => value_on(&composed, case, cfg),
        Err(e) => Prediction::abstain(&case.id, AbstainReason::ParseFailure, e.to_string()),
    }
}

fn is_correct(outcome: &Outcome, gold: &Answer) -> bool {
    match (outcome, gold) {
        (Outcome::Entailment, Answer::Verdict(Verdict::Entailment)) => true,
        (Outcome::Contradiction, Answer::Verdict(Verdict::Contradiction)) => true,
        (Outcome::Value(p), Answer::Numeric(t)) => p == t,
        _ => false,
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Scores predictions against golds aligned by position and case id.
pub fn score_run(
    preds: &[Prediction],
    golds: &[(String, Answer)],
) -> Result<MetricsReport, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::Length {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut counts = Counts::default();
    let (mut ent, mut ent_ok, mut num, mut em, mut m10) = (0, 0, 0, 0, 0);
    for (index, (p, (id, gold))) in preds.iter().zip(golds).enumerate() {
        if &p.case_id != id {
            return Err(EvalError::IdMismatch {
                index,
                pred: p.case_id.clone(),
                gold: id.clone(),
            });
        }
        counts.total += 1;
        let correct = is_correct(&p.outcome, gold);
        if p.outcome.is_abstain() {
            counts.abstained += 1;
        } else if correct {
            counts.correct += 1;
        } else {
            counts.incorrect += 1;
        }
        match gold {
            Answer::Verdict(_) => {
                ent += 1;
                ent_ok += usize::from(correct);
            }
            Answer::Numeric(t) => {
                num += 1;
                em += usize::from(correct);
                if let Outcome::Value(v) = &p.outcome {
                    m10 += usize::from(within_ten_percent(v, t));
                }
            }
        }
    }
    Ok(MetricsReport {
        acc: (ent > 0).then(|| ratio(ent_ok, ent)),
        em: (num > 0).then(|| ratio(em, num)),
        m10: (num > 0).then(|| ratio(m10, num)),
        err: ratio(counts.incorrect, counts.total - counts.abstained),
        counts,
        entailment_items: ent,
        numeric_items: num,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    GoldFacts,
    LlmTranslated,
    DirectQa,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::GoldFacts => "gold_facts",
            Mode::LlmTranslated => "llm_translated",
            Mode::DirectQa => "direct_qa",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold_facts" => Ok(Mode::GoldFacts),
            "llm_translated" => Ok(Mode::LlmTranslated),
            "direct_qa" => Ok(Mode::DirectQa),
            _ => Err(format!(
                "unknown mode {s:?} (gold_facts, llm_translated, direct_qa)"
            )),
        }
    }
}

pub struct RunContext<'a> {
    pub solve: SolveConfig,
    pub bridge: Option<&'a Bridge>,
    pub reference: ReferenceCode,
    pub jobs: usize,
    /// Record wall-clock latency; off gives byte-stable reports.
    pub timing: bool,
}

impl Default for RunContext<'_> {
    fn default() -> Self {
        RunContext {
            solve: SolveConfig::default(),
            bridge: None,
            reference: ReferenceCode::default(),
            jobs: 1,
            timing: false,
        }
    }
}

fn task_of(case: &CaseInstance) -> Task {
    match case.split.answer_kind() {
        AnswerKind::Entailment => Task::Entail,
        AnswerKind::Numeric => Task::Numeric,
    }
}

fn gold_path(kb: &StatuteKB, case: &CaseInstance, cfg: &SolveConfig) -> Prediction {
    match task_of(case) {
        Task::Entail => decide_entailment(kb, case, cfg),
        Task::Numeric => solve_numeric(kb, case, cfg),
    }
}

fn translated_path(
    kb: &StatuteKB,
    case: &CaseInstance,
    ctx: &RunContext<'_>,
    bridge: &Bridge,
) -> Prediction {
    let (pattern, question) = case.text_parts();
    let task = task_of(case);
    let facts = match translate_case(
        bridge,
        pattern,
        question,
        task,
        &ctx.reference,
        &kb.blocklist,
    ) {
        Ok(f) => f,
        Err(TranslationError::Provider(e)) => {
            return Prediction::abstain(&case.id, AbstainReason::ProviderError, e.to_string())
        }
        Err(TranslationError::Template(e)) => {
            return Prediction::abstain(
                &case.id,
                AbstainReason::ProviderError,
                format!("template: {e}"),
            )
        }
        Err(TranslationError::Invalid { message, .. }) => {
            return Prediction::abstain(&case.id, AbstainReason::ParseFailure, message)
        }
    };
    // Computed predicates already passed the citation check in the translator.
    let composed = match compose_facts(kb, &case.id, &facts, true) {
        Ok(c) => c,
        Err(e) => return Prediction::abstain(&case.id, AbstainReason::ParseFailure, e.to_string()),
    };
    match task {
        Task::Entail => decide_on(&composed, case, &ctx.solve),
        Task::Numeric => value_on(&composed, case, &ctx.solve),
    }
}

fn direct_path(statute_text: &str, case: &CaseInstance, bridge: &Bridge) -> Prediction {
    let (pattern, question) = case.text_parts();
    match direct_qa(bridge, statute_text, pattern, question, task_of(case)) {
        Ok(ans) => {
            let outcome = match ans.final_answer {
                FinalAnswer::Verdict(v) => v.into(),
                FinalAnswer::Value(v) => Outcome::Value(v),
            };
            let mut p = Prediction::new(&case.id, outcome);
            if ans.rounded {
                p = p.note("rounded half-up to whole dollars");
            }
            if ans.lenient {
                p = p.note("answer taken from embedded JSON");
            }
            p
        }
        Err(DirectQaError::Provider(e)) => {
            Prediction::abstain(&case.id, AbstainReason::ProviderError, e.to_string())
        }
        Err(DirectQaError::Template(e)) => Prediction::abstain(
            &case.id,
            AbstainReason::ProviderError,
            format!("template: {e}"),
        ),
        Err(DirectQaError::Malformed { message, .. }) => {
            Prediction::abstain(&case.id, AbstainReason::ParseFailure, message)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub mode: Mode,
    /// Sorted by case id.
    pub predictions: Vec<Prediction>,
    pub golds: Vec<(String, Answer)>,
    pub report: MetricsReport,
}

/// Evaluates every case in `mode`. Per-case failures become abstentions;
/// only configuration problems abort.
pub fn run_split(
    kb: &StatuteKB,
    cases: &[CaseInstance],
    mode: Mode,
    ctx: &RunContext<'_>,
) -> Result<RunOutput, EvalError> {
    let bridge = match mode {
        Mode::GoldFacts => None,
        _ => Some(ctx.bridge.ok_or(EvalError::NoProvider(mode))?),
    };
    let statute_text = match mode {
        Mode::DirectQa => Some(kb.text.as_deref().ok_or(EvalError::NoStatuteText)?),
        _ => None,
    };
    let mut sorted: Vec<&CaseInstance> = cases.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let golds = sorted
        .iter()
        .map(|c| {
            c.answer
                .clone()
                .map(|a| (c.id.clone(), a))
                .ok_or_else(|| EvalError::MissingGold(c.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let predictions = par_map(&sorted, ctx.jobs, |case| {
        let start = ctx.timing.then(Instant::now);
        let mut p = match (mode, bridge) {
            (Mode::GoldFacts, _) => gold_path(kb, case, &ctx.solve),
            (Mode::LlmTranslated, Some(b)) => translated_path(kb, case, ctx, b),
            (Mode::DirectQa, Some(b)) => direct_path(statute_text.unwrap_or_default(), case, b),
            _ => unreachable!("provider checked above"),
        };
        if let Some(start) = start {
            p.latency_ms = start.elapsed().as_millis() as u64;
        }
        if let Some(r) = p.outcome.abstain_reason() {
            log::info!("{}: abstain ({r}) {}", p.case_id, p.notes.join("; "));
        }
        p
    });
    let report = score_run(&predictions, &golds)?;
    Ok(RunOutput {
        mode,
        predictions,
        golds,
        report,
    })
}

/// Like [`run_split`], but each case runs under the rule set its split
/// names: r for original-rule rows, `r_prime` for perturbed-rule rows.
pub fn run_cases(
    r: &StatuteKB,
    r_prime: Option<&StatuteKB>,
    cases: &[CaseInstance],
    mode: Mode,
    ctx: &RunContext<'_>,
) -> Result<RunOutput, EvalError> {
    let (perturbed, original): (Vec<CaseInstance>, Vec<CaseInstance>) = cases
        .iter()
        .cloned()
        .partition(|c| c.split.rule == RuleVariant::RPrime);
    let mut out = run_split(r, &original, mode, ctx)?;
    if !perturbed.is_empty() {
        let rp = r_prime.ok_or(EvalError::NoRPrime)?;
        let more = run_split(rp, &perturbed, mode, ctx)?;
        let mut rows: Vec<(Prediction, (String, Answer))> = out
            .predictions
            .into_iter()
            .zip(out.golds)
            .chain(more.predictions.into_iter().zip(more.golds))
            .collect();
        rows.sort_by(|a, b| a.0.case_id.cmp(&b.0.case_id));
        let (predictions, golds): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        out = RunOutput {
            report: score_run(&predictions, &golds)?,
            mode,
            predictions,
            golds,
        };
    }
    Ok(out)
}

impl RunOutput {
    pub fn rows(&self) -> Vec<Value> {
        self.predictions
            .iter()
            .zip(&self.golds)
            .map(|(p, (_, gold))| {
                json!({
                    "id": p.case_id,
                    "outcome": p.outcome.to_json(),
                    "gold": gold.to_json(),
                    "correct": is_correct(&p.outcome, gold),
                    "abstain_reason": p.outcome.abstain_reason().map(|r| r.to_string()),
                    "latency_ms": p.latency_ms,
                    "notes": p.notes,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Value {
        let mut notes = Vec::new();
        if self.mode == Mode::DirectQa {
            notes
                .push("numeric direct answers are rounded half-up to whole dollars before scoring");
        }
        json!({
            "mode": self.mode.to_string(),
            "metrics": self.report,
            "notes": notes,
            "rows": self.rows(),
        })
    }
}
