use std::path::PathBuf;

use num_bigint::BigInt;
use taxlog::corpus::{compose_program, load_cases, load_statutes, Answer, Blocklist, Verdict};
use taxlog::parser::parse_program;
use taxlog::{render_program, solve, SolveConfig, SolveOutcome};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

#[test]
fn every_bundled_case_reproduces_its_gold_answer() {
    let kb = load_statutes(fixture("statutes.pl"))
        .unwrap()
        .with_blocklist(Blocklist::load(fixture("blocklist.txt")).unwrap());
    let cases = load_cases(fixture("cases.jsonl")).unwrap();
    for case in &cases {
        let composed = compose_program(&kb, case).unwrap();
        let outcome = solve(&composed, &case.query, &SolveConfig::default()).unwrap();
        match case.answer.as_ref().unwrap() {
            Answer::Verdict(Verdict::Entailment) => assert!(outcome.is_success(), "{}", case.id),
            Answer::Verdict(Verdict::Contradiction) => {
                assert_eq!(outcome, SolveOutcome::NoSolution, "{}", case.id)
            }
            Answer::Numeric(v) => {
                let SolveOutcome::Solutions(sols) = outcome else {
                    panic!("{}: {outcome:?}", case.id)
                };
                let slot = case.answer_slot().unwrap();
                let got = sols[0].get(&slot).unwrap();
                assert_eq!(got.as_int(), Some(v), "{}", case.id);
                assert!(
                    sols.iter()
                        .all(|b| b.get(&slot).unwrap().as_int() == Some(v)),
                    "{}",
                    case.id
                );
            }
        }
    }
}

#[test]
fn alice_owes_14000() {
    let kb = load_statutes(fixture("statutes.pl")).unwrap();
    let facts = parse_program(&std::fs::read_to_string(fixture("alice.pl")).unwrap()).unwrap();
    let mut composed = taxlog::KnowledgeBase::new("r");
    composed
        .consult(&kb.program)
        .unwrap()
        .consult(&facts)
        .unwrap()
        .freeze();
    let goal = taxlog::parse_query("owes_tax(alice,2015,T)").unwrap();
    let SolveOutcome::Solutions(sols) = solve(&composed, &goal, &SolveConfig::default()).unwrap()
    else {
        panic!()
    };
    assert_eq!(sols.len(), 1);
    assert_eq!(
        sols[0].get("T").unwrap().as_int(),
        Some(&BigInt::from(14000))
    );
}

#[test]
fn bundled_programs_round_trip_through_rendering() {
    let mut sources = vec![
        std::fs::read_to_string(fixture("statutes.pl")).unwrap(),
        std::fs::read_to_string(fixture("alice.pl")).unwrap(),
        std::fs::read_to_string(fixture("loop.pl")).unwrap(),
        std::fs::read_to_string(fixture("datalog/reachable.pl")).unwrap(),
    ];
    for case in load_cases(fixture("cases.jsonl")).unwrap() {
        sources.push(render_program(&case.gold_facts));
    }
    for src in sources {
        let p = parse_program(&src).unwrap();
        let again = parse_program(&render_program(&p)).unwrap();
        assert_eq!(p.clauses, again.clauses);
    }
}
