//! Offline runs of the three evaluation modes over the bundled suite.
//! Expected metrics were tallied from the fixture files by a separate script.

use taxlog::corpus::{load_cases, load_statutes, Blocklist, CaseInstance, StatuteKB};
use taxlog::eval::{run_split, AbstainReason, Mode, Outcome, RunContext};
use taxlog::llm::{Bridge, MockProvider};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn kb() -> StatuteKB {
    load_statutes(format!("{FIXTURES}/statutes.pl"))
        .unwrap()
        .with_blocklist(Blocklist::load(format!("{FIXTURES}/blocklist.txt")).unwrap())
        .with_text(std::fs::read_to_string(format!("{FIXTURES}/statutes.txt")).unwrap())
}

fn cases() -> Vec<CaseInstance> {
    load_cases(format!("{FIXTURES}/cases.jsonl")).unwrap()
}

fn bridge() -> Bridge {
    Bridge::mock(MockProvider::load(format!("{FIXTURES}/mock_responses.json")).unwrap())
}

#[test]
fn perfect_mock_translator_matches_gold_path() {
    let bridge = bridge();
    let ctx = RunContext {
        bridge: Some(&bridge),
        jobs: 4,
        ..RunContext::default()
    };
    let translated = run_split(&kb(), &cases(), Mode::LlmTranslated, &ctx).unwrap();
    let gold = run_split(&kb(), &cases(), Mode::GoldFacts, &RunContext::default()).unwrap();
    assert_eq!(translated.report, gold.report);
    assert_eq!(translated.report.em, Some(1.0));
    assert_eq!(translated.report.acc, Some(1.0));
}

#[test]
fn imperfect_mock_direct_answers() {
    let bridge = bridge();
    let ctx = RunContext {
        bridge: Some(&bridge),
        ..RunContext::default()
    };
    let out = run_split(&kb(), &cases(), Mode::DirectQa, &ctx).unwrap();
    let r = &out.report;
    assert_eq!(r.numeric_items, 12);
    assert_eq!(r.em, Some(9.0 / 12.0));
    assert_eq!(r.m10, Some(1.0));
    assert_eq!(r.entailment_items, 25);
    assert_eq!(r.acc, Some(18.0 / 25.0));
    assert_eq!(r.counts.abstained, 0);
    assert_eq!(r.err, 10.0 / 37.0);
}

#[test]
fn computed_predicate_in_translation_abstains() {
    let bridge = Bridge::mock(MockProvider::new().default_response("s151(alice, 2015, 4000)."));
    let ctx = RunContext {
        bridge: Some(&bridge),
        ..RunContext::default()
    };
    let out = run_split(&kb(), &cases()[..2], Mode::LlmTranslated, &ctx).unwrap();
    for p in &out.predictions {
        assert_eq!(p.outcome, Outcome::Abstain(AbstainReason::ParseFailure));
        assert!(p.notes[0].contains("s151/3"), "{:?}", p.notes);
    }
}
