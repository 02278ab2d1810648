use proptest::prelude::*;
use tracecheck_core::model::{
    apply_edits, diff_traces, render_continuation_prefix, StepOrigin, ThinkMarkers, ThinkingTrace, TraceEdit,
};

#[derive(Debug, Clone)]
enum Op {
    Keep,
    Remove,
    Modify(String),
}

fn step_text() -> impl Strategy<Value = String> {
    "[a-z]{1,8}( [a-z]{1,8}){0,5}\\."
}

fn case() -> impl Strategy<Value = (Vec<String>, Vec<Op>, Vec<String>, u64)> {
    (1usize..12).prop_flat_map(|n| {
        let ops = prop_oneof![
            3 => Just(Op::Keep),
            1 => Just(Op::Remove),
            1 => step_text().prop_map(Op::Modify),
        ];
        (
            prop::collection::vec(step_text(), n),
            prop::collection::vec(ops, n),
            prop::collection::vec("[a-z]{2,10}", 0..3),
            any::<u64>(),
        )
    })
}

fn edits_for(ops: &[Op], guides: &[String]) -> Vec<TraceEdit> {
    let mut edits = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        match op {
            Op::Keep => {}
            Op::Remove => edits.push(TraceEdit::remove(i as u32, i as u32)),
            Op::Modify(text) => edits.push(TraceEdit::modify(i as u32, text.clone(), i as u32).unwrap()),
        }
    }
    for (j, g) in guides.iter().enumerate() {
        edits.push(TraceEdit::guide(g.clone(), 100 + j as u32).unwrap());
    }
    edits
}

/// Deterministic Fisher-Yates driven by a seed.
fn shuffle<T>(items: &mut [T], mut seed: u64) {
    for i in (1..items.len()).rev() {
        seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let j = (seed >> 33) as usize % (i + 1);
        items.swap(i, j);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn edits_touch_only_their_targets((texts, ops, guides, seed) in case()) {
        let trace = ThinkingTrace::from_texts(texts.clone());
        let edits = edits_for(&ops, &guides);
        let out = apply_edits(&trace, &edits).unwrap();

        let removed = ops.iter().filter(|o| matches!(o, Op::Remove)).count();
        prop_assert_eq!(out.len(), trace.len() - removed);

        for (i, op) in ops.iter().enumerate() {
            let after = out.step(i as u32);
            match op {
                Op::Keep => prop_assert_eq!(after, trace.step(i as u32)),
                Op::Remove => prop_assert!(after.is_none()),
                Op::Modify(text) => {
                    let after = after.unwrap();
                    prop_assert_eq!(&after.text, text);
                    prop_assert_eq!(after.origin, StepOrigin::Modified);
                }
            }
        }
        // relative order is preserved
        let indices: Vec<u32> = out.steps.iter().map(|s| s.index).collect();
        prop_assert!(indices.windows(2).all(|w| w[0] < w[1]));

        prop_assert_eq!(out.guidance.is_some(), !guides.is_empty());
        if let Some(g) = &out.guidance {
            for item in &guides {
                prop_assert!(g.contains(item.as_str()));
            }
        }

        // order of the edit list does not matter
        let mut shuffled = edits.clone();
        shuffle(&mut shuffled, seed);
        let again = apply_edits(&trace, &shuffled).unwrap();
        prop_assert_eq!(&again.steps, &out.steps);
        if guides.len() < 2 {
            prop_assert_eq!(&again.guidance, &out.guidance);
        }

        // the diff replays to the same trace
        let diff = diff_traces(&trace, &out);
        prop_assert_eq!(diff.replay(&trace).steps, out.steps.clone());
    }

    #[test]
    fn untouched_prefix_is_byte_exact((texts, ops, _guides, _seed) in case()) {
        let trace = ThinkingTrace::from_texts(texts);
        let first_touched = ops.iter().position(|o| !matches!(o, Op::Keep)).unwrap_or(ops.len());
        let out = apply_edits(&trace, &edits_for(&ops, &[])).unwrap();
        let markers = ThinkMarkers::default();
        let before: Vec<&str> = trace.texts().take(first_touched).collect();
        let after: Vec<&str> = out.texts().take(first_touched).collect();
        prop_assert_eq!(before, after);
        if first_touched == ops.len() {
            prop_assert_eq!(
                render_continuation_prefix(&trace, &markers),
                render_continuation_prefix(&out, &markers)
            );
        }
    }

    #[test]
    fn indices_are_never_reused((texts, ops, _guides, _seed) in case()) {
        let trace = ThinkingTrace::from_texts(texts);
        let mut out = apply_edits(&trace, &edits_for(&ops, &[])).unwrap();
        let next = out.next_index();
        prop_assert!(next >= trace.len() as u32);
        out.extend_texts(["appended."], StepOrigin::Continuation);
        let last = out.steps.last().unwrap();
        prop_assert_eq!(last.index, next);
    }
}

#[test]
fn duplicate_targets_are_rejected() {
    let trace = ThinkingTrace::from_texts(["a.", "b."]);
    let edits = [TraceEdit::remove(1, 0), TraceEdit::modify(1, "c.", 1).unwrap()];
    assert!(apply_edits(&trace, &edits).is_err());
    assert!(apply_edits(&trace, &[TraceEdit::remove(9, 0)]).is_err());
}
