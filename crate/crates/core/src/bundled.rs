//! The mini statute set, case suite and offline provider replies shipped
//! with the crate, so the CLI and demo run without any files on disk.

use std::collections::HashMap;

use crate::corpus::{parse_cases, Blocklist, CaseInstance, StatuteKB};
use crate::llm::{MockProvider, ReferenceCode};

pub const STATUTES_PL: &str = include_str!("../fixtures/statutes.pl");
pub const STATUTES_TXT: &str = include_str!("../fixtures/statutes.txt");
pub const BLOCKLIST: &str = include_str!("../fixtures/blocklist.txt");
pub const CASES_JSONL: &str = include_str!("../fixtures/cases.jsonl");
pub const PARAPHRASES_JSONL: &str = include_str!("../fixtures/paraphrases.jsonl");
pub const MOCK_RESPONSES: &str = include_str!("../fixtures/mock_responses.json");
pub const EVENTS_PL: &str = include_str!("../fixtures/events.pl");
pub const UTILS_PL: &str = include_str!("../fixtures/utils.pl");
pub const ALICE_PL: &str = include_str!("../fixtures/alice.pl");

pub fn statutes() -> StatuteKB {
    StatuteKB::from_source(STATUTES_PL, "statutes.pl")
        .expect("bundled statutes parse")
        .with_blocklist(Blocklist::parse(BLOCKLIST).expect("bundled blocklist parses"))
        .with_text(STATUTES_TXT)
}

pub fn cases() -> Vec<CaseInstance> {
    parse_cases(CASES_JSONL).expect("bundled cases parse")
}

pub fn paraphrases() -> HashMap<String, String> {
    parse_paraphrases(PARAPHRASES_JSONL).expect("bundled paraphrases parse")
}

/// `{"id":..,"text":..}` per line.
pub fn parse_paraphrases(text: &str) -> Result<HashMap<String, String>, String> {
    #[derive(serde::Deserialize)]
    struct Line {
        id: String,
        text: String,
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Line>(l)
                .map(|p| (p.id, p.text))
                .map_err(|e| format!("line {}: {e}", i + 1))
        })
        .collect()
}

pub fn mock_provider() -> MockProvider {
    MockProvider::from_json(MOCK_RESPONSES).expect("bundled mock replies parse")
}

pub fn reference_code() -> ReferenceCode {
    ReferenceCode {
        events_pl: EVENTS_PL.to_string(),
        utils_pl: UTILS_PL.to_string(),
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn everything_loads() {
        assert_eq!(super::statutes().program.len(), 42);
        assert_eq!(super::cases().len(), 37);
        assert_eq!(super::paraphrases().len(), 13);
        super::mock_provider();
    }
}
