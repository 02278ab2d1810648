mod common;

use std::sync::Arc;

use common::gateway;
use proptest::prelude::*;
use serde_json::json;
use tracecheck_core::gateway::{CallLog, Operation, Role, ScriptedTransport};
use tracecheck_core::model::{
    apply_edits, render_continuation_prefix, Claim, LabelSet, StepOrigin, ThinkMarkers, ThinkingTrace, TraceEdit,
};
use tracecheck_core::verifier::{Verifier, VerifierConfig};

fn sentence() -> impl Strategy<Value = String> {
    "[A-Z][a-z]{1,7}( [a-z]{1,7}){0,6}\\."
}

#[derive(Debug, Clone)]
struct Case {
    steps: Vec<String>,
    removals: Vec<bool>,
    guide: Option<String>,
    continuation: Vec<String>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(sentence(), n),
            prop::collection::vec(prop::bool::weighted(0.3), n),
            prop::option::of("[a-z]{3,10}( [a-z]{3,10}){0,2}"),
            prop::collection::vec(sentence(), 0..4),
        )
            .prop_map(|(steps, removals, guide, continuation)| Case { steps, removals, guide, continuation })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn continuation_keeps_the_prefix_byte_exact(c in case()) {
        let mut body = c.continuation.join("\n\n");
        body.push_str("\n</think>\nVERDICT: false\nEXPLANATION: done");
        let transport = Arc::new(
            ScriptedTransport::from_json(json!({"entries": [{"mode": "prefix", "responses": [body]}]})).unwrap(),
        );
        let log = CallLog::new();
        let verifier = Verifier::new(gateway(Role::Verifier, "v", &transport, &log), VerifierConfig::default());
        let labels = LabelSet::new(["true", "false"]).unwrap();
        let claim = Claim::new("p", "Some claim to check.").unwrap();

        let trace = ThinkingTrace::from_texts(c.steps.clone());
        let mut edits: Vec<TraceEdit> = c
            .removals
            .iter()
            .enumerate()
            .filter(|(_, r)| **r)
            .map(|(i, _)| TraceEdit::remove(i as u32, i as u32))
            .collect();
        if let Some(g) = &c.guide {
            edits.push(TraceEdit::guide(g.clone(), 99).unwrap());
        }
        let edited = apply_edits(&trace, &edits).unwrap();
        let bundle = verifier.bundle(&claim, &[], &labels);

        let result = verifier.continue_from(&edited, &bundle, &labels, true);
        if edited.is_empty() && edited.guidance.is_none() && c.continuation.is_empty() {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let solution = result.unwrap();

        let markers = ThinkMarkers::default();
        let sent = render_continuation_prefix(&edited, &markers);
        let requests = transport.requests();
        prop_assert_eq!(requests.len(), 1);
        prop_assert_eq!(requests[0].1, Operation::Generate);
        prop_assert_eq!(requests[0].2["prefix"].as_str().unwrap(), sent.as_str());
        prop_assert!(!sent.contains(&markers.close));

        // every kept step and the guidance survive untouched, in order, ahead of new steps
        let kept = edited.len() + usize::from(edited.guidance.is_some());
        prop_assert_eq!(solution.trace.len(), kept + c.continuation.len());
        for (a, b) in edited.steps.iter().zip(&solution.trace.steps) {
            prop_assert_eq!(a, b);
        }
        if let Some(g) = &edited.guidance {
            let step = &solution.trace.steps[edited.len()];
            prop_assert_eq!(step.text.as_str(), g.trim());
            prop_assert_eq!(step.origin, StepOrigin::Guidance);
        }
        let fresh: Vec<&str> = solution.trace.steps[kept..].iter().map(|s| s.text.as_str()).collect();
        let expected: Vec<&str> = c.continuation.iter().map(String::as_str).collect();
        prop_assert_eq!(fresh, expected);
        prop_assert!(render_continuation_prefix(&solution.trace, &markers).starts_with(&sent));
        prop_assert_eq!(solution.label.as_str(), "false");
    }
}
