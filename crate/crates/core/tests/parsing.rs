use std::path::Path;

use acu_core::corpus::Label;
use acu_core::llm_gateway::{MockBackend, MockRule};
use acu_core::promptkit::{parse_response, AnswerSection, ParseErrorKind};
use proptest::prelude::*;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/fixtures/responses")
            .join(name),
    )
    .unwrap()
}

#[test]
fn golden_well_formed_response() {
    let answer = parse_response(&fixture("well_formed.txt")).unwrap();
    assert_eq!(answer.decision, Label::NonViolating);
    assert_eq!(
        answer.summary,
        "Sunny Bakery is a family-owned bakery selling bread and\ncelebration cakes in its home town."
    );
    assert_eq!(answer.products_services, "Sourdough loaves, birthday cakes, pastries.");
    assert!(answer.rationale.starts_with("The flagged ad jokes"));
}

#[test]
fn golden_missing_decision() {
    let raw = fixture("missing_decision.txt");
    let err = parse_response(&raw).unwrap_err();
    assert_eq!(
        err.kind,
        ParseErrorKind::MissingSection {
            section: AnswerSection::Decision
        }
    );
    assert_eq!(err.raw, raw);
}

proptest! {
    #[test]
    fn parsing_is_total(raw in ".{0,300}") {
        // Either a verdict or exactly one error kind; never a panic.
        match parse_response(&raw) {
            Ok(a) => prop_assert!(!a.summary.is_empty() && !a.products_services.is_empty()),
            Err(e) => prop_assert_eq!(e.raw, raw),
        }
    }

    #[test]
    fn sections_in_any_case_and_order(
        upper in any::<bool>(),
        decision in prop_oneof![Just("VIOLATING"), Just("non_violating"), Just("Non-Violating")],
        order in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let labels = ["summary", "products", "decision", "rationale"];
        let values = ["s", "p", decision, "r"];
        let raw: String = order
            .iter()
            .map(|&i| {
                let label = if upper { labels[i].to_uppercase() } else { labels[i].to_string() };
                format!("{label}: {}\n", values[i])
            })
            .collect();
        let answer = parse_response(&raw).unwrap();
        let expected = if decision == "VIOLATING" { Label::Violating } else { Label::NonViolating };
        prop_assert_eq!(answer.decision, expected);
    }

    #[test]
    fn mock_answers_always_parse(text in "[a-z ]{0,200}", hit in any::<bool>()) {
        let mock = MockBackend::new(MockRule { lexicon: vec!["Strip Club".into(), "xxx".into()], decision_if_match: Label::Violating });
        let prompt = if hit { format!("{text} strip  club {text}") } else { text.replace("xxx", "") };
        let raw = mock.respond(&prompt);
        prop_assert_eq!(&raw, &mock.respond(&prompt));
        let answer = parse_response(&raw).unwrap();
        let matched = mock.matched_term(&prompt).is_some();
        prop_assert_eq!(answer.decision, if matched { Label::Violating } else { Label::NonViolating });
        if hit { prop_assert!(matched); }
    }
}
