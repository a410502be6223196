//! Browser bindings: solve a query, simulate a contamination audit, and
//! perturb the statute numbers. Every export returns a JSON string.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use taxlog::audit::{simulate, ResponderKind};
use taxlog::bundled;
use taxlog::corpus::{compose_facts, Answer, Base, SplitTag, StatuteKB};
use taxlog::parser::parse_program_with_id;
use taxlog::variants::{perturb_rule_numbers, regenerate_answer, PerturbationSpec};
use taxlog::{parse_query, solve, SolveConfig, SolveOutcome};

fn error(msg: impl std::fmt::Display) -> String {
    json!({"error": msg.to_string()}).to_string()
}

#[wasm_bindgen]
pub fn bundled_statutes() -> String {
    bundled::STATUTES_PL.to_string()
}

#[wasm_bindgen]
pub fn bundled_facts() -> String {
    bundled::ALICE_PL.to_string()
}

/// Statutes plus facts, then the query. An empty statute text means the
/// bundled statutes, which also brings their computed-predicate blocklist.
#[wasm_bindgen]
pub fn solve_query(statutes: &str, facts: &str, query: &str, max_depth: u32) -> String {
    let kb = if statutes.trim().is_empty() {
        bundled::statutes()
    } else {
        match StatuteKB::from_source(statutes, "statutes") {
            Ok(kb) => kb,
            Err(e) => return error(e),
        }
    };
    let facts = match parse_program_with_id(facts, "facts") {
        Ok(p) => p,
        Err(e) => return error(format!("facts: {e}")),
    };
    let goal = match parse_query(query) {
        Ok(q) => q,
        Err(e) => return error(format!("query: {e}")),
    };
    let composed = match compose_facts(&kb, "demo", &facts, false) {
        Ok(c) => c,
        Err(e) => return error(e),
    };
    let cfg = SolveConfig::default().with_max_depth(max_depth as usize);
    let vars = goal.variables();
    let v = match solve(&composed, &goal, &cfg) {
        Err(e) => json!({"outcome": "Abstain", "reason": "parse_failure", "detail": e.to_string()}),
        Ok(SolveOutcome::ResourceExhausted { .. }) => {
            json!({"outcome": "Abstain", "reason": "resource_exhausted"})
        }
        Ok(SolveOutcome::NoSolution) => json!({"outcome": "Contradiction"}),
        Ok(SolveOutcome::Solutions(sols)) => {
            let rows: Vec<Value> = sols
                .iter()
                .map(|b| {
                    vars.iter()
                        .map(|v| (v.clone(), json!(b.get(v).map(|t| t.to_string()))))
                        .collect::<serde_json::Map<_, _>>()
                        .into()
                })
                .collect();
            json!({"outcome": "Entailment", "solutions": rows})
        }
    };
    v.to_string()
}

/// Full quiz audit on a synthetic bank with a simulated responder.
#[wasm_bindgen]
pub fn simulate_audit(responder: &str, n: u32, seed: u32) -> String {
    let kind: ResponderKind = match responder.parse() {
        Ok(k) => k,
        Err(e) => return error(e),
    };
    json!(simulate(kind, n.clamp(1, 5000) as usize, seed as u64)).to_string()
}

/// Rescales the bundled statute numbers and shows how the numeric
/// fixtures' answers move.
#[wasm_bindgen]
pub fn perturb_rules(seed: u32) -> String {
    let r = bundled::statutes();
    let rp = match perturb_rule_numbers(&r, &PerturbationSpec::default().with_seed(seed as u64)) {
        Ok(rp) => rp,
        Err(e) => return error(e),
    };
    let cfg = SolveConfig::default();
    let value = |kb: &StatuteKB, c| match regenerate_answer(kb, c, &cfg).map(|c| c.answer) {
        Ok(Some(Answer::Numeric(v))) => json!(v.to_string()),
        Ok(_) => Value::Null,
        Err(e) => json!(e.to_string()),
    };
    let cases: Vec<Value> = bundled::cases()
        .iter()
        .filter(|c| c.split == SplitTag::original(Base::N))
        .map(|c| json!({"id": c.id, "r": value(&r, c), "r_prime": value(&rp.kb, c)}))
        .collect();
    let map: Vec<Value> = rp
        .value_map
        .iter()
        .map(|(old, new)| json!({"old": old.to_string(), "new": new.to_string()}))
        .collect();
    json!({"seed": seed, "values": map, "flags": rp.flags, "cases": cases}).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: String) -> Value {
        serde_json::from_str(&s).unwrap()
    }

    #[test]
    fn alice_through_the_bindings() {
        let v = parse(solve_query(
            "",
            &bundled_facts(),
            "owes_tax(alice, 2015, T)",
            4096,
        ));
        assert_eq!(v["outcome"], "Entailment");
        assert_eq!(v["solutions"][0]["T"], "14000");
        let v = parse(solve_query("p :- p.", "", "p", 64));
        assert_eq!(v["reason"], "resource_exhausted");
        assert!(parse(solve_query("", "", "owes_tax(", 10))["error"].is_string());
    }

    #[test]
    fn audit_and_perturbation() {
        let v = parse(simulate_audit("memorizer", 200, 1));
        assert!(v["report"]["min_contamination"].as_f64().unwrap() >= 0.95);
        assert!(parse(simulate_audit("oracle", 10, 1))["error"].is_string());
        let p = parse(perturb_rules(42));
        let alice = &p["cases"][0];
        assert_eq!(
            (alice["r"].as_str(), alice["r_prime"].as_str()),
            (Some("14000"), Some("13956"))
        );
    }
}
