//! Perturbed test splits: seeded rescaling of statute and case numbers,
//! offset negatives, paraphrase passthrough, and answers regenerated by
//! running the solver under the item's own rule set.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{Signed, ToPrimitive, Zero};
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    compose_program, write_cases, Answer, Base, CaseInstance, CaseVariant, Provenance, RuleVariant,
    RulesetId, SplitTag, StatuteKB, Substitution, Verdict, TAG_GENERATED,
};
use crate::engine::{solve, SolveConfig, SolveOutcome};
use crate::term::{Clause, Program, Term};
use crate::util::{par_map, rng_for, sha256_hex};

const PPM: i64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleNumericPolicy {
    /// Literals with smaller magnitude (rates, ages, rounding constants) stay.
    pub min_amount: i64,
    /// Shift year literals (1900-2100) by 1-2 years instead of leaving them.
    pub shift_years: bool,
}

impl Default for RuleNumericPolicy {
    fn default() -> Self {
        RuleNumericPolicy {
            min_amount: 1000,
            shift_years: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub scale_range: (f64, f64),
    pub delta_range: (f64, f64),
    pub seed: u64,
    pub rule_numeric_policy: RuleNumericPolicy,
    /// Perturbed copies drawn per base case in numeric-changed splits.
    pub replicas: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            scale_range: (0.7, 1.3),
            delta_range: (0.01, 0.05),
            seed: 0,
            rule_numeric_policy: RuleNumericPolicy::default(),
            replicas: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GenError {
    #[error("invalid perturbation spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Split(String),
    #[error("{0}")]
    Input(String),
}

impl PerturbationSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn ppm(x: f64) -> i64 {
        (x * PPM as f64).round() as i64
    }

    fn scale_ppm(&self) -> (i64, i64) {
        (Self::ppm(self.scale_range.0), Self::ppm(self.scale_range.1))
    }

    fn delta_ppm(&self) -> (i64, i64) {
        (Self::ppm(self.delta_range.0), Self::ppm(self.delta_range.1))
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let (lo, hi) = self.scale_ppm();
        if !(0 < lo && lo < hi) {
            return Err(GenError::Spec(format!(
                "scale_range {:?} must satisfy 0 < lo < hi",
                self.scale_range
            )));
        }
        let (dlo, dhi) = self.delta_ppm();
        if !(0 < dlo && dlo <= dhi && dhi < PPM) {
            return Err(GenError::Spec(format!(
                "delta_range {:?} must lie inside (0, 1)",
                self.delta_range
            )));
        }
        if self.replicas == 0 {
            return Err(GenError::Spec("replicas must be at least 1".into()));
        }
        Ok(())
    }
}

/// `round_half_up(v * ppm / 1e6)` in exact integers.
pub fn scale_half_up(v: &BigInt, ppm: i64) -> BigInt {
    (v * BigInt::from(ppm) + BigInt::from(PPM / 2)).div_floor(&BigInt::from(PPM))
}

pub fn is_year(v: &BigInt) -> bool {
    v.to_i64().is_some_and(|y| (1900..=2100).contains(&y))
}

fn eligible(v: &BigInt, policy: &RuleNumericPolicy) -> bool {
    if is_year(v) {
        return policy.shift_years;
    }
    v.abs() >= BigInt::from(policy.min_amount)
}

/// Draws a changed value for `old` from a stream keyed by (purpose, key, old).
fn draw_new(old: &BigInt, spec: &PerturbationSpec, purpose: &str, key: &str) -> BigInt {
    let mut rng = rng_for(spec.seed, purpose, &format!("{key}/{old}"));
    if is_year(old) {
        let shift = rng.random_range(1..=2) * if rng.random_bool(0.5) { 1 } else { -1 };
        return old + shift;
    }
    let (lo, hi) = spec.scale_ppm();
    for _ in 0..1000 {
        let s = rng.random_range(lo..=hi);
        let new = scale_half_up(old, s);
        if &new != old {
            return new;
        }
    }
    // Only reachable for tiny magnitudes with a narrow range.
    old + 1
}

// ---------------------------------------------------------------------------
// literal locations

/// Integer literals of a clause with their paths (see [`Substitution`]).
pub fn int_literals(clause: &Clause) -> Vec<(Vec<usize>, BigInt)> {
    let mut out = Vec::new();
    let mut path = vec![0];
    walk(&clause.head, &mut path, &mut out);
    for (k, g) in clause.body.iter().enumerate() {
        path = vec![k + 1];
        walk(g, &mut path, &mut out);
    }
    out
}

fn walk(t: &Term, path: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, BigInt)>) {
    match t {
        Term::Int(v) => out.push((path.clone(), v.clone())),
        Term::Compound(_, args) => {
            for (i, a) in args.iter().enumerate() {
                path.push(i);
                walk(a, path, out);
                path.pop();
            }
        }
        _ => {}
    }
}

fn term_at_mut<'a>(clause: &'a mut Clause, path: &[usize]) -> Option<&'a mut Term> {
    let (&first, rest) = path.split_first()?;
    let mut t = if first == 0 {
        &mut clause.head
    } else {
        clause.body.get_mut(first - 1)?
    };
    for &i in rest {
        t = match t {
            Term::Compound(_, args) => args.get_mut(i)?,
            _ => return None,
        };
    }
    Some(t)
}

/// Rewrites `program` by the substitution list, checking each old value.
pub fn apply_substitutions(program: &Program, subs: &[Substitution]) -> Result<Program, String> {
    let mut out = program.clone();
    for s in subs {
        let clause = out
            .clauses
            .get_mut(s.clause_index)
            .ok_or_else(|| format!("clause {} out of range", s.clause_index))?;
        match term_at_mut(clause, &s.arg_path) {
            Some(t @ Term::Int(_)) if t.as_int() == Some(&s.old) => *t = Term::Int(s.new.clone()),
            _ => {
                return Err(format!(
                    "no literal {} at clause {} path {:?}",
                    s.old, s.clause_index, s.arg_path
                ))
            }
        }
    }
    Ok(out)
}

/// Substitution entries for every eligible literal present in `value_map`.
fn substitutions_for(program: &Program, value_map: &BTreeMap<BigInt, BigInt>) -> Vec<Substitution> {
    let mut subs = Vec::new();
    for (ci, clause) in program.clauses.iter().enumerate() {
        for (path, v) in int_literals(clause) {
            if let Some(new) = value_map.get(&v) {
                subs.push(Substitution {
                    clause_index: ci,
                    arg_path: path,
                    old: v,
                    new: new.clone(),
                });
            }
        }
    }
    subs
}

// ---------------------------------------------------------------------------
// numerals in text

fn numeral_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$?\d{1,3}(?:,\d{3})+\b|\$?\d+").unwrap())
}

fn numeral_value(token: &str) -> BigInt {
    token
        .trim_start_matches('$')
        .replace(',', "")
        .parse()
        .expect("numeral regex yields digits")
}

fn group_thousands(v: &BigInt) -> String {
    let digits = v.abs().to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    if v.is_negative() {
        format!("-{out}")
    } else {
        out
    }
}

/// Renders `v` in the style of `token` (dollar sign, digit grouping).
pub fn format_like(token: &str, v: &BigInt) -> String {
    let body = if token.contains(',') {
        group_thousands(v)
    } else {
        v.to_string()
    };
    if token.starts_with('$') {
        format!("${body}")
    } else {
        body
    }
}

/// Replaces every numeral whose value is a key of `map`; returns the text
/// and the keys that were found.
pub fn rewrite_numerals(text: &str, map: &BTreeMap<BigInt, BigInt>) -> (String, Vec<BigInt>) {
    let mut found = Vec::new();
    let out = numeral_re().replace_all(text, |caps: &regex::Captures<'_>| {
        let tok = &caps[0];
        let v = numeral_value(tok);
        match map.get(&v) {
            Some(new) => {
                if !found.contains(&v) {
                    found.push(v);
                }
                format_like(tok, new)
            }
            None => tok.to_string(),
        }
    });
    (out.into_owned(), found)
}

pub fn numerals(text: &str) -> Vec<BigInt> {
    numeral_re()
        .find_iter(text)
        .map(|m| numeral_value(m.as_str()))
        .collect()
}

// ---------------------------------------------------------------------------
// rule perturbation

#[derive(Debug, Clone, PartialEq)]
pub struct RulePerturbation {
    pub kb: StatuteKB,
    pub value_map: BTreeMap<BigInt, BigInt>,
    /// Threshold chains that had to be re-sorted.
    pub flags: Vec<String>,
    pub warnings: Vec<String>,
}

const COMPARISONS: [&str; 6] = ["<", ">", "=<", ">=", "=:=", "=\\="];

/// Comparison-operand literals grouped by (head functor, arity, first head
/// argument when constant), in clause order.
fn threshold_chains(
    program: &Program,
    policy: &RuleNumericPolicy,
) -> BTreeMap<String, Vec<BigInt>> {
    let mut chains: BTreeMap<String, Vec<BigInt>> = BTreeMap::new();
    for clause in &program.clauses {
        let (name, arity) = clause.key();
        let first = match clause.head.args().first() {
            Some(t @ (Term::Atom(_) | Term::Int(_) | Term::Str(_))) => t.to_string(),
            _ => "_".into(),
        };
        let key = format!("{name}/{arity}[{first}]");
        for goal in &clause.body {
            if let Term::Compound(op, args) = goal {
                if args.len() == 2 && COMPARISONS.contains(&op.as_str()) {
                    for a in args {
                        if let Term::Int(v) = a {
                            if eligible(v, policy) && !is_year(v) {
                                chains.entry(key.clone()).or_default().push(v.clone());
                            }
                        }
                    }
                }
            }
        }
    }
    chains.retain(|_, v| v.len() >= 2);
    chains
}

fn strictly_ascending(v: &[BigInt]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Rescales every eligible literal of `r` (one draw per distinct value, so
/// repeated constants stay equal) and records the substitution map.
pub fn perturb_rule_numbers(
    r: &StatuteKB,
    spec: &PerturbationSpec,
) -> Result<RulePerturbation, GenError> {
    spec.validate()?;
    let policy = &spec.rule_numeric_policy;
    let mut value_map: BTreeMap<BigInt, BigInt> = BTreeMap::new();
    for clause in &r.program.clauses {
        for (_, v) in int_literals(clause) {
            if eligible(&v, policy) && !value_map.contains_key(&v) {
                let new = draw_new(&v, spec, "rule", "");
                value_map.insert(v, new);
            }
        }
    }
    let mut warnings = Vec::new();
    if value_map.is_empty() {
        let w = "no eligible numeric literals; r' equals r".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }

    let mut flags = Vec::new();
    for (key, olds) in threshold_chains(&r.program, policy) {
        if !strictly_ascending(&olds) {
            continue;
        }
        let news: Vec<BigInt> = olds.iter().map(|o| value_map[o].clone()).collect();
        if strictly_ascending(&news) {
            continue;
        }
        let mut sorted = news.clone();
        sorted.sort();
        for i in 1..sorted.len() {
            if sorted[i] <= sorted[i - 1] {
                sorted[i] = &sorted[i - 1] + 1;
            }
        }
        for (old, new) in olds.iter().zip(sorted) {
            let new = if &new == old { new + 1 } else { new };
            value_map.insert(old.clone(), new);
        }
        let msg = format!("threshold chain {key} re-sorted after perturbation");
        log::warn!("{msg}");
        flags.push(msg);
    }

    let subs = substitutions_for(&r.program, &value_map);
    let program = apply_substitutions(&r.program, &subs).map_err(GenError::Input)?;
    let text = r.text.as_ref().map(|t| {
        let (new_text, found) = rewrite_numerals(t, &value_map);
        let missing: Vec<String> = value_map
            .keys()
            .filter(|k| !found.contains(k))
            .map(ToString::to_string)
            .collect();
        if !missing.is_empty() {
            let w = format!(
                "statute text does not mention perturbed value(s) {}",
                missing.join(", ")
            );
            log::warn!("{w}");
            warnings.push(w);
        }
        new_text
    });
    Ok(RulePerturbation {
        kb: StatuteKB {
            program,
            ruleset_id: RulesetId::RPrime,
            substitution_map: subs,
            blocklist: r.blocklist.clone(),
            text,
        },
        value_map,
        flags,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// case perturbation and regeneration

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CaseGenError {
    #[error("nothing to perturb")]
    NothingToPerturb,
    #[error("text_desync: value(s) {0} not found in case text")]
    TextDesync(String),
    #[error("no derivation")]
    NoDerivation,
    #[error("resource exhausted")]
    ResourceExhausted,
    #[error("engine error: {0}")]
    Engine(String),
    #[error("answer slot is not an integer: {0}")]
    NonNumeric(String),
    #[error("claim has no integer argument")]
    NoClaimAmount,
    #[error("zero truth value; offset undefined")]
    ZeroValue,
    #[error("negative claim still derivable after {0} attempts")]
    NegativeNotVerified(usize),
    #[error("missing paraphrase")]
    MissingParaphrase,
    #[error("label verification failed: {0}")]
    Verification(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedCase {
    pub case: CaseInstance,
    pub substitutions: Vec<Substitution>,
}

fn mark_generated(case: &mut CaseInstance) {
    case.provenance = Provenance::Generated;
    if !case.has_tag(TAG_GENERATED) {
        case.tags.push(TAG_GENERATED.to_string());
    }
}

/// Rescales the case's amounts in both facts and fact-pattern text; the
/// answer is cleared pending regeneration. `replica` keys the draw.
pub fn perturb_case_numbers(
    case: &CaseInstance,
    spec: &PerturbationSpec,
    replica: usize,
) -> Result<PerturbedCase, CaseGenError> {
    let policy = RuleNumericPolicy {
        shift_years: false,
        ..spec.rule_numeric_policy.clone()
    };
    let mut value_map = BTreeMap::new();
    let key = format!("{}#{replica}", case.id);
    for clause in &case.gold_facts.clauses {
        for (_, v) in int_literals(clause) {
            if eligible(&v, &policy) && !value_map.contains_key(&v) {
                let new = draw_new(&v, spec, "case", &key);
                value_map.insert(v, new);
            }
        }
    }
    if value_map.is_empty() {
        return Err(CaseGenError::NothingToPerturb);
    }
    let subs = substitutions_for(&case.gold_facts, &value_map);
    let facts = apply_substitutions(&case.gold_facts, &subs).map_err(CaseGenError::Engine)?;

    let (pattern, question) = case.text_parts();
    let (new_pattern, found) = rewrite_numerals(pattern, &value_map);
    let missing: Vec<String> = value_map
        .keys()
        .filter(|k| !found.contains(k))
        .map(ToString::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(CaseGenError::TextDesync(missing.join(", ")));
    }
    let mut out = case.clone();
    out.gold_facts = facts;
    out.text = if question.is_empty() && !case.text.contains("\nQuestion: ") {
        new_pattern
    } else {
        format!("{new_pattern}\nQuestion: {question}")
    };
    out.answer = None;
    mark_generated(&mut out);
    Ok(PerturbedCase {
        case: out,
        substitutions: subs,
    })
}

/// Index of the claimed amount: the `claim_arg` tag, else the last
/// top-level integer argument.
pub fn claim_arg(case: &CaseInstance) -> Option<usize> {
    if let Some(i) = case.tag_value("claim_arg").and_then(|v| v.parse().ok()) {
        return Some(i);
    }
    case.query
        .args()
        .iter()
        .rposition(|a| matches!(a, Term::Int(_)))
}

fn with_arg(query: &Term, i: usize, value: Term) -> Term {
    match query {
        Term::Compound(f, args) => {
            let mut args = args.clone();
            args[i] = value;
            Term::Compound(f.clone(), args)
        }
        other => other.clone(),
    }
}

fn run(
    kb: &StatuteKB,
    case: &CaseInstance,
    goal: &Term,
    cfg: &SolveConfig,
) -> Result<SolveOutcome, CaseGenError> {
    let composed = compose_program(kb, case).map_err(|e| CaseGenError::Engine(e.to_string()))?;
    solve(&composed, goal, cfg).map_err(|e| CaseGenError::Engine(e.to_string()))
}

fn first_value(outcome: SolveOutcome, slot: &str) -> Result<BigInt, CaseGenError> {
    match outcome {
        SolveOutcome::Solutions(sols) => {
            let t = sols[0].get(slot).ok_or(CaseGenError::NoDerivation)?;
            t.as_int()
                .cloned()
                .ok_or_else(|| CaseGenError::NonNumeric(t.to_string()))
        }
        SolveOutcome::NoSolution => Err(CaseGenError::NoDerivation),
        SolveOutcome::ResourceExhausted { .. } => Err(CaseGenError::ResourceExhausted),
    }
}

const CLAIM_VAR: &str = "Claim__";

/// The amount the statutes derive for the case's claim.
pub fn claim_value(
    kb: &StatuteKB,
    case: &CaseInstance,
    cfg: &SolveConfig,
) -> Result<BigInt, CaseGenError> {
    let i = claim_arg(case).ok_or(CaseGenError::NoClaimAmount)?;
    let goal = with_arg(&case.query, i, Term::var(CLAIM_VAR));
    first_value(run(kb, case, &goal, cfg)?, CLAIM_VAR)
}

/// Sets the claimed amount in both query and question text.
fn set_claim(
    case: &mut CaseInstance,
    i: usize,
    old: &BigInt,
    new: &BigInt,
) -> Result<(), CaseGenError> {
    case.query = with_arg(&case.query, i, Term::Int(new.clone()));
    let (pattern, question) = case.text_parts();
    let (q, found) = rewrite_numerals(question, &BTreeMap::from([(old.clone(), new.clone())]));
    if found.is_empty() {
        return Err(CaseGenError::TextDesync(old.to_string()));
    }
    case.text = format!("{pattern}\nQuestion: {q}");
    Ok(())
}

/// Solves the case under `kb` and stores the answer. Entailment-numeric
/// items come back as the positive claim with the recomputed amount.
pub fn regenerate_answer(
    kb: &StatuteKB,
    case: &CaseInstance,
    cfg: &SolveConfig,
) -> Result<CaseInstance, CaseGenError> {
    let mut out = case.clone();
    match case.split.base {
        Base::N => {
            let slot = case.answer_slot().ok_or(CaseGenError::NoDerivation)?;
            let v = first_value(run(kb, case, &case.query, cfg)?, &slot)?;
            out.answer = Some(Answer::Numeric(v));
        }
        Base::En => {
            let i = claim_arg(case).ok_or(CaseGenError::NoClaimAmount)?;
            let old = case.query.args()[i]
                .as_int()
                .cloned()
                .ok_or(CaseGenError::NoClaimAmount)?;
            let v = claim_value(kb, case, cfg)?;
            if v != old {
                set_claim(&mut out, i, &old, &v)?;
            }
            out.answer = Some(Answer::Verdict(Verdict::Entailment));
        }
        Base::Ee => {
            let verdict = match run(kb, case, &case.query, cfg)? {
                SolveOutcome::Solutions(_) => Verdict::Entailment,
                SolveOutcome::NoSolution => Verdict::Contradiction,
                SolveOutcome::ResourceExhausted { .. } => {
                    return Err(CaseGenError::ResourceExhausted)
                }
            };
            out.answer = Some(Answer::Verdict(verdict));
        }
    }
    Ok(out)
}

pub const MAX_NEGATIVE_ATTEMPTS: usize = 8;

/// Offsets the true claim amount V by a seeded delta, checks with the
/// solver that the shifted claim is not derivable, and labels it Contradiction.
pub fn make_negative_query(
    kb: &StatuteKB,
    positive: &CaseInstance,
    spec: &PerturbationSpec,
    key: &str,
    cfg: &SolveConfig,
) -> Result<CaseInstance, CaseGenError> {
    let i = claim_arg(positive).ok_or(CaseGenError::NoClaimAmount)?;
    let v = positive.query.args()[i]
        .as_int()
        .cloned()
        .ok_or(CaseGenError::NoClaimAmount)?;
    if v.is_zero() {
        return Err(CaseGenError::ZeroValue);
    }
    let (lo, hi) = spec.delta_ppm();
    let mut rng = rng_for(spec.seed, "delta", &format!("{}/{key}", positive.id));
    for _ in 0..MAX_NEGATIVE_ATTEMPTS {
        let d = rng.random_range(lo..=hi);
        let sign = if rng.random_bool(0.5) { 1 } else { -1 };
        let mut v2 = scale_half_up(&v, PPM + sign * d);
        if v2 == v {
            v2 = &v + sign;
        }
        let mut neg = positive.clone();
        set_claim(&mut neg, i, &v, &v2)?;
        if run(kb, &neg, &neg.query, cfg)? == SolveOutcome::NoSolution {
            neg.answer = Some(Answer::Verdict(Verdict::Contradiction));
            mark_generated(&mut neg);
            return Ok(neg);
        }
    }
    Err(CaseGenError::NegativeNotVerified(MAX_NEGATIVE_ATTEMPTS))
}

/// Re-derives an item's label under `kb` and compares it with the stored one.
pub fn verify_item(
    kb: &StatuteKB,
    case: &CaseInstance,
    cfg: &SolveConfig,
) -> Result<(), CaseGenError> {
    let outcome = run(kb, case, &case.query, cfg)?;
    let fail = |m: String| Err(CaseGenError::Verification(format!("{}: {m}", case.id)));
    match (&case.answer, outcome) {
        (Some(Answer::Verdict(Verdict::Entailment)), SolveOutcome::Solutions(_)) => Ok(()),
        (Some(Answer::Verdict(Verdict::Contradiction)), SolveOutcome::NoSolution) => Ok(()),
        (Some(Answer::Numeric(v)), outcome @ SolveOutcome::Solutions(_)) => {
            let slot = case.answer_slot().ok_or(CaseGenError::NoDerivation)?;
            let got = first_value(outcome, &slot)?;
            if &got == v {
                Ok(())
            } else {
                fail(format!("solver gives {got}, label {v}"))
            }
        }
        (answer, outcome) => fail(format!("label {answer:?} but solver gives {outcome:?}")),
    }
}

// ---------------------------------------------------------------------------
// split assembly

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseOp {
    None,
    Numeric,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRecord {
    pub case_id: String,
    pub replica: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitManifest {
    pub split: String,
    pub ruleset: RulesetId,
    pub emitted: usize,
    pub drops: Vec<DropRecord>,
    pub case_substitutions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutput {
    pub tag: SplitTag,
    pub cases: Vec<CaseInstance>,
    pub manifest: SplitManifest,
}

pub struct GenContext<'a> {
    pub r: &'a StatuteKB,
    /// Required for r' splits.
    pub r_prime: Option<&'a StatuteKB>,
    pub paraphrases: Option<&'a HashMap<String, String>>,
    pub spec: &'a PerturbationSpec,
    pub solve: SolveConfig,
    pub jobs: usize,
}

pub fn split_tag(base: Base, kb_choice: RulesetId, case_op: CaseOp) -> Result<SplitTag, GenError> {
    let rule = match kb_choice {
        RulesetId::R => RuleVariant::Original,
        RulesetId::RPrime => RuleVariant::RPrime,
    };
    let case = match case_op {
        CaseOp::None => CaseVariant::Original,
        CaseOp::Numeric => CaseVariant::NumericChanged,
        CaseOp::Paraphrase => CaseVariant::Paraphrased,
    };
    SplitTag::new(base, rule, case).map_err(GenError::Split)
}

type Work<'a> = (&'a CaseInstance, usize);

fn generate_one(
    ctx: &GenContext<'_>,
    tag: SplitTag,
    kb: &StatuteKB,
    case: &CaseInstance,
    replica: usize,
) -> Result<(Vec<CaseInstance>, usize), CaseGenError> {
    let suffix = if tag.case == CaseVariant::NumericChanged {
        format!("{}#{replica}", tag.name())
    } else {
        tag.name()
    };
    let mut working = case.clone();
    working.id = format!("{}@{suffix}", case.id);
    working.split = tag;
    mark_generated(&mut working);
    let mut n_subs = 0;
    match tag.case {
        CaseVariant::NumericChanged => {
            let p = perturb_case_numbers(&working, ctx.spec, replica)?;
            n_subs = p.substitutions.len();
            working = p.case;
        }
        CaseVariant::Paraphrased => {
            let text = ctx
                .paraphrases
                .and_then(|m| m.get(&case.id))
                .ok_or(CaseGenError::MissingParaphrase)?;
            working.text = text.clone();
            verify_item(kb, &working, &ctx.solve)?;
            return Ok((vec![working], 0));
        }
        CaseVariant::Original => {}
    }
    let regenerated = regenerate_answer(kb, &working, &ctx.solve)?;
    let items = if tag.base == Base::En {
        let mut pos = regenerated;
        let neg = make_negative_query(kb, &pos, ctx.spec, &suffix, &ctx.solve)?;
        let base_id = pos.id.clone();
        pos.id = format!("{base_id}+");
        let mut neg = neg;
        neg.id = format!("{base_id}-");
        vec![pos, neg]
    } else {
        vec![regenerated]
    };
    for item in &items {
        verify_item(kb, item, &ctx.solve)?;
    }
    Ok((items, n_subs))
}

/// Builds one split row. Original rows pass the base cases through; other
/// rows regenerate every label under the split's own rule set.
pub fn assemble_split(
    base_cases: &[CaseInstance],
    base: Base,
    kb_choice: RulesetId,
    case_op: CaseOp,
    ctx: &GenContext<'_>,
) -> Result<SplitOutput, GenError> {
    ctx.spec.validate()?;
    let tag = split_tag(base, kb_choice, case_op)?;
    let kb = match kb_choice {
        RulesetId::R => ctx.r,
        RulesetId::RPrime => ctx
            .r_prime
            .ok_or_else(|| GenError::Input("an r' split needs the perturbed rule set".into()))?,
    };
    if case_op == CaseOp::Paraphrase && ctx.paraphrases.is_none() {
        return Err(GenError::Input(
            "paraphrase splits need a paraphrase file".into(),
        ));
    }
    let mut sources: Vec<&CaseInstance> = base_cases
        .iter()
        .filter(|c| c.split == SplitTag::original(base))
        .collect();
    sources.sort_by(|a, b| a.id.cmp(&b.id));

    if tag == SplitTag::original(base) {
        let cases: Vec<CaseInstance> = sources.into_iter().cloned().collect();
        return Ok(SplitOutput {
            tag,
            manifest: SplitManifest {
                split: tag.name(),
                ruleset: RulesetId::R,
                emitted: cases.len(),
                drops: Vec::new(),
                case_substitutions: 0,
            },
            cases,
        });
    }

    let replicas = if case_op == CaseOp::Numeric {
        ctx.spec.replicas
    } else {
        1
    };
    let work: Vec<Work<'_>> = sources
        .iter()
        .flat_map(|c| (0..replicas).map(move |k| (*c, k)))
        .collect();
    let results = par_map(&work, ctx.jobs, |(case, k)| {
        generate_one(ctx, tag, kb, case, *k)
    });

    let mut cases = Vec::new();
    let mut drops = Vec::new();
    let mut case_substitutions = 0;
    for ((case, k), result) in work.iter().zip(results) {
        match result {
            Ok((items, n)) => {
                case_substitutions += n;
                cases.extend(items);
            }
            Err(e) => {
                log::info!("{}: dropped {}#{k}: {e}", tag, case.id);
                drops.push(DropRecord {
                    case_id: case.id.clone(),
                    replica: *k,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(SplitOutput {
        tag,
        manifest: SplitManifest {
            split: tag.name(),
            ruleset: kb.ruleset_id,
            emitted: cases.len(),
            drops,
            case_substitutions,
        },
        cases,
    })
}

/// Parses a split name into the (base, rule set, case operation) triple.
pub fn split_recipe(name: &str) -> Result<(Base, RulesetId, CaseOp), GenError> {
    let tag: SplitTag = name.parse().map_err(GenError::Split)?;
    let kb = match tag.rule {
        RuleVariant::Original => RulesetId::R,
        RuleVariant::RPrime => RulesetId::RPrime,
    };
    let op = match tag.case {
        CaseVariant::Original => CaseOp::None,
        CaseVariant::NumericChanged => CaseOp::Numeric,
        CaseVariant::Paraphrased => CaseOp::Paraphrase,
    };
    Ok((tag.base, kb, op))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenManifest {
    pub seed: u64,
    pub spec: PerturbationSpec,
    pub source_corpus_hash: String,
    pub rule_substitution_map: Vec<Substitution>,
    pub flags: Vec<String>,
    pub warnings: Vec<String>,
    pub splits: Vec<SplitManifest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub splits: Vec<SplitOutput>,
    pub r_prime: StatuteKB,
    pub manifest: GenManifest,
}

/// Generates the named splits from the base cases. The r' rule set is
/// derived once from the spec seed and shared by every r' split.
pub fn generate(
    base_cases: &[CaseInstance],
    r: &StatuteKB,
    split_names: &[String],
    spec: &PerturbationSpec,
    paraphrases: Option<&HashMap<String, String>>,
    solve: SolveConfig,
    jobs: usize,
) -> Result<Generation, GenError> {
    spec.validate()?;
    let rp = perturb_rule_numbers(r, spec)?;
    let ctx = GenContext {
        r,
        r_prime: Some(&rp.kb),
        paraphrases,
        spec,
        solve,
        jobs,
    };
    let mut splits = Vec::new();
    for name in split_names {
        let (base, kb, op) = split_recipe(name)?;
        splits.push(assemble_split(base_cases, base, kb, op, &ctx)?);
    }
    let manifest = GenManifest {
        seed: spec.seed,
        spec: spec.clone(),
        source_corpus_hash: sha256_hex(write_cases(base_cases).as_bytes()),
        rule_substitution_map: rp.kb.substitution_map.clone(),
        flags: rp.flags.clone(),
        warnings: rp.warnings.clone(),
        splits: splits.iter().map(|s| s.manifest.clone()).collect(),
    };
    Ok(Generation {
        splits,
        r_prime: rp.kb,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_cases, Blocklist};
    use crate::render::render_program;
    use proptest::prelude::*;

    const STATUTES: &str = include_str!("../fixtures/statutes.pl");
    const CASES: &str = include_str!("../fixtures/cases.jsonl");

    fn r() -> StatuteKB {
        StatuteKB::from_source(STATUTES, "statutes.pl")
            .unwrap()
            .with_blocklist(Blocklist::parse(include_str!("../fixtures/blocklist.txt")).unwrap())
            .with_text(include_str!("../fixtures/statutes.txt"))
    }

    fn cases() -> Vec<CaseInstance> {
        parse_cases(CASES).unwrap()
    }

    fn case(id: &str) -> CaseInstance {
        cases().into_iter().find(|c| c.id == id).unwrap()
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scale_half_up(&50000.into(), 1_200_000), BigInt::from(60000));
        assert_eq!(scale_half_up(&50000.into(), 1_000_010), BigInt::from(50001));
        assert_eq!(scale_half_up(&50000.into(), 1_000_009), BigInt::from(50000));
        assert_eq!(scale_half_up(&10.into(), 1_010_000), BigInt::from(10));
        assert_eq!(scale_half_up(&14000.into(), 1_030_000), BigInt::from(14420));
    }

    #[test]
    fn drawn_values_never_collide_and_stay_in_range() {
        let spec = PerturbationSpec::default();
        for v in [1000i64, 4000, 50000, 123457] {
            for k in 0..50 {
                let old = BigInt::from(v);
                let new = draw_new(&old, &spec, "t", &k.to_string());
                assert_ne!(new, old);
                let lo = scale_half_up(&old, 700_000);
                let hi = scale_half_up(&old, 1_300_000);
                assert!(lo <= new && new <= hi);
            }
        }
    }

    #[test]
    fn numerals_keep_their_format() {
        let map = BTreeMap::from([(BigInt::from(50000), BigInt::from(60000))]);
        let (t, found) = rewrite_numerals("paid $50,000 and 50000 on 2015-01-01", &map);
        assert_eq!(t, "paid $60,000 and 60000 on 2015-01-01");
        assert_eq!(found, vec![BigInt::from(50000)]);
        assert_eq!(format_like("$1,000", &BigInt::from(1234567)), "$1,234,567");
        assert_eq!(format_like("999", &BigInt::from(1000)), "1000");
    }

    #[test]
    fn case_perturbation_aligns_facts_and_text() {
        let mut c = case("n01_alice");
        c.text = "Alice was paid $50,000 in 2015.\nQuestion: How much tax does Alice have to pay in 2015?".into();
        c.gold_facts = crate::parse_program(
            "income_(e). agent_(e,alice). amount_(e,50000). start_(e,\"2015-12-31\").",
        )
        .unwrap();
        let p = perturb_case_numbers(&c, &PerturbationSpec::default().with_seed(3), 0).unwrap();
        assert_eq!(p.substitutions.len(), 1);
        let new = &p.substitutions[0].new;
        assert!(p.case.text.contains(&format_like("$50,000", new)));
        assert!(render_program(&p.case.gold_facts).contains(&format!("amount_(e,{new})")));
        assert!(p.case.answer.is_none());
        assert_eq!(p.case.provenance, Provenance::Generated);
        assert!(p.case.text.ends_with("pay in 2015?"));
    }

    #[test]
    fn case_perturbation_errors() {
        let mut c = case("ee01_alice_bob");
        assert_eq!(
            perturb_case_numbers(&c, &PerturbationSpec::default(), 0).unwrap_err(),
            CaseGenError::NothingToPerturb
        );
        c.gold_facts = crate::parse_program("amount_(e,50000).").unwrap();
        c.text = "Alice was paid fifty thousand dollars.".into();
        assert!(matches!(
            perturb_case_numbers(&c, &PerturbationSpec::default(), 0),
            Err(CaseGenError::TextDesync(_))
        ));
    }

    #[test]
    fn alice_regenerates_to_14000_under_r() {
        let c = regenerate_answer(&r(), &case("n01_alice"), &SolveConfig::default()).unwrap();
        assert_eq!(c.answer, Some(Answer::Numeric(14000.into())));
    }

    #[test]
    fn rule_perturbation_is_a_pure_substitution() {
        let r = r();
        let rp = perturb_rule_numbers(&r, &PerturbationSpec::default().with_seed(42)).unwrap();
        assert_eq!(rp.kb.ruleset_id, RulesetId::RPrime);
        assert!(!rp.kb.substitution_map.is_empty());
        assert!(rp.kb.substitution_map.iter().all(|s| s.old != s.new));
        let replay = apply_substitutions(&r.program, &rp.kb.substitution_map).unwrap();
        assert_eq!(render_program(&replay), render_program(&rp.kb.program));
        assert_eq!(r.program.len(), rp.kb.program.len());
        for (a, b) in r.program.clauses.iter().zip(&rp.kb.program.clauses) {
            assert_eq!(a.key(), b.key());
        }
        // rates, ages and rounding constants are not amounts
        for s in &rp.kb.substitution_map {
            assert!(s.old >= BigInt::from(1000));
        }
        assert!(rp.warnings.is_empty(), "{:?}", rp.warnings);
        let text = rp.kb.text.unwrap();
        for (old, new) in &rp.value_map {
            assert!(numerals(&text).contains(new), "{old} -> {new}");
        }
    }

    #[test]
    fn zero_eligible_literals_leave_rules_unchanged() {
        let kb = StatuteKB::from_source("p(X) :- X < 5.", "tiny").unwrap();
        let rp = perturb_rule_numbers(&kb, &PerturbationSpec::default()).unwrap();
        assert_eq!(rp.kb.program, kb.program);
        assert!(rp.kb.substitution_map.is_empty());
        assert_eq!(rp.warnings.len(), 1);
    }

    #[test]
    fn non_monotone_chains_are_resorted_and_flagged() {
        let kb = StatuteKB::from_source(
            "b(s, I, T) :- I =< 10000, !, T is 1.\nb(s, I, T) :- I =< 10500, !, T is 2.\nb(s, _, 3).",
            "chain",
        )
        .unwrap();
        let mut flagged = 0;
        for seed in 0..40 {
            let rp =
                perturb_rule_numbers(&kb, &PerturbationSpec::default().with_seed(seed)).unwrap();
            let chain = threshold_chains(&rp.kb.program, &RuleNumericPolicy::default());
            assert!(strictly_ascending(&chain["b/3[s]"]), "seed {seed}");
            flagged += rp.flags.len();
        }
        assert!(flagged > 0);
    }

    #[test]
    fn years_shift_only_when_enabled() {
        let kb = StatuteKB::from_source("cutoff(2015). limit(5000).", "y").unwrap();
        let rp = perturb_rule_numbers(&kb, &PerturbationSpec::default()).unwrap();
        assert_eq!(rp.value_map.len(), 1);
        let mut spec = PerturbationSpec::default();
        spec.rule_numeric_policy.shift_years = true;
        let rp = perturb_rule_numbers(&kb, &spec).unwrap();
        let y = &rp.value_map[&BigInt::from(2015)];
        assert!((BigInt::from(2013)..=BigInt::from(2017)).contains(y) && y != &BigInt::from(2015));
    }

    #[test]
    fn negatives() {
        let kb = r();
        let cfg = SolveConfig::default();
        let pos = regenerate_answer(&kb, &case("en01_alice"), &cfg).unwrap();
        let neg = make_negative_query(&kb, &pos, &PerturbationSpec::default(), "k", &cfg).unwrap();
        let v = BigInt::from(14000);
        let v2 = neg.query.args()[2].as_int().unwrap().clone();
        assert_ne!(v2, v);
        assert!((&v2 - &v).abs() * 100 <= BigInt::from(5 * 14000 + 100));
        assert_eq!(neg.answer, Some(Answer::Verdict(Verdict::Contradiction)));
        assert!(neg.text.contains(&format_like("$1,000", &v2)));
        verify_item(&kb, &neg, &cfg).unwrap();

        let mut zero = pos.clone();
        zero.query = with_arg(&pos.query, 2, Term::int(0));
        assert_eq!(
            make_negative_query(&kb, &zero, &PerturbationSpec::default(), "k", &cfg).unwrap_err(),
            CaseGenError::ZeroValue
        );
    }

    #[test]
    fn small_value_offset_bumps_to_one() {
        // V=10, delta 1% rounds back to 10, so the offset is forced to 1.
        assert_eq!(scale_half_up(&10.into(), PPM + 10_000), BigInt::from(10));
        let kb = StatuteKB::from_source("owes(a, 10).", "ten").unwrap();
        let mut c = case("en02_ben");
        c.gold_facts = Program::new("none");
        c.query = crate::parse_query("owes(a,10)").unwrap();
        c.text = "A owes.\nQuestion: A owes $10.".into();
        let spec = PerturbationSpec {
            delta_range: (0.01, 0.01),
            ..PerturbationSpec::default()
        };
        let neg = make_negative_query(&kb, &c, &spec, "k", &SolveConfig::default()).unwrap();
        let v2 = neg.query.args()[1].as_int().unwrap().clone();
        assert!(v2 == BigInt::from(11) || v2 == BigInt::from(9));
    }

    #[test]
    fn off_matrix_split_is_rejected() {
        assert!(split_tag(Base::Ee, RulesetId::R, CaseOp::Numeric).is_err());
        assert!(split_recipe("Ee_r").is_err());
    }

    #[test]
    fn seed_42_changes_alice() {
        let r = r();
        let rp = perturb_rule_numbers(&r, &PerturbationSpec::default().with_seed(42)).unwrap();
        let under_rp =
            regenerate_answer(&rp.kb, &case("n01_alice"), &SolveConfig::default()).unwrap();
        assert_ne!(under_rp.answer, Some(Answer::Numeric(14000.into())));
    }

    #[test]
    fn generation_is_deterministic_and_sound() {
        let r = r();
        let base = cases();
        let spec = PerturbationSpec {
            replicas: 2,
            ..PerturbationSpec::default().with_seed(5)
        };
        let para: HashMap<String, String> = include_str!("../fixtures/paraphrases.jsonl")
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (
                    v["id"].as_str().unwrap().to_string(),
                    v["text"].as_str().unwrap().to_string(),
                )
            })
            .collect();
        let names: Vec<String> = crate::corpus::ALL_SPLITS
            .iter()
            .map(|s| s.to_string())
            .collect();
        let a = generate(
            &base,
            &r,
            &names,
            &spec,
            Some(&para),
            SolveConfig::default(),
            4,
        )
        .unwrap();
        let b = generate(
            &base,
            &r,
            &names,
            &spec,
            Some(&para),
            SolveConfig::default(),
            1,
        )
        .unwrap();
        for (x, y) in a.splits.iter().zip(&b.splits) {
            assert_eq!(write_cases(&x.cases), write_cases(&y.cases));
        }
        for s in &a.splits {
            let kb = if s.tag.rule == RuleVariant::RPrime {
                &a.r_prime
            } else {
                &r
            };
            assert!(!s.cases.is_empty(), "{}", s.tag);
            for c in &s.cases {
                verify_item(kb, c, &SolveConfig::default()).unwrap();
                assert_eq!(c.split, s.tag);
            }
            if s.tag.base == Base::En && s.tag != SplitTag::original(Base::En) {
                let pos = s
                    .cases
                    .iter()
                    .filter(|c| c.answer == Some(Answer::Verdict(Verdict::Entailment)))
                    .count();
                assert_eq!(pos * 2, s.cases.len(), "{}", s.tag);
            }
        }
    }

    proptest! {
        #[test]
        fn half_up_matches_float_reference(v in 1i64..10_000_000, ppm in 700_000i64..=1_300_000) {
            let exact = scale_half_up(&BigInt::from(v), ppm);
            let num = v as i128 * ppm as i128;
            let expect = (num + 500_000).div_euclid(1_000_000);
            prop_assert_eq!(exact, BigInt::from(expect));
        }

        #[test]
        fn rewrite_then_scan_finds_every_new_value(vals in prop::collection::btree_set(1000i64..900_000, 1..5), seed in any::<u64>()) {
            let spec = PerturbationSpec::default().with_seed(seed);
            let map: BTreeMap<BigInt, BigInt> = vals.iter().map(|v| {
                let b = BigInt::from(*v);
                (b.clone(), draw_new(&b, &spec, "p", ""))
            }).collect();
            let text: String = vals.iter().map(|v| format!("paid ${} today. ", group_thousands(&BigInt::from(*v)))).collect();
            let (out, found) = rewrite_numerals(&text, &map);
            prop_assert_eq!(found.len(), vals.len());
            let seen = numerals(&out);
            for new in map.values() {
                prop_assert!(seen.contains(new));
            }
        }
    }
}
