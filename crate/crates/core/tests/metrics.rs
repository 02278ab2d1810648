mod common;

use std::sync::Arc;

use common::*;
use proptest::prelude::*;
use tracecheck_core::editor::EditorConfig;
use tracecheck_core::eval::{
    entailment_with, evaluate_manifest, judge, label_metrics, lcs_length, lexical_overlap, mean_present,
    render_table, rubric, similarity_f, Artifact, EvalError, JudgeCriterion, Scorers,
};
use tracecheck_core::gateway::{CallLog, Role, ScriptedTransport};
use tracecheck_core::model::LabelSet;
use tracecheck_core::oracle::{Oracle, OracleJudge};
use tracecheck_core::session::{Protocol, SessionConfig};

fn lcs_dp(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn lcs_agrees_with_dynamic_programming(
        a in prop::collection::vec(0u8..6, 0..=30),
        b in prop::collection::vec(0u8..6, 0..=30),
    ) {
        prop_assert_eq!(lcs_length(&a, &b), lcs_dp(&a, &b));
        prop_assert_eq!(lcs_length(&a, &b), lcs_length(&b, &a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn long_lcs_agrees_with_dynamic_programming(
        a in prop::collection::vec(0u8..4, 60..200),
        b in prop::collection::vec(0u8..4, 0..150),
    ) {
        prop_assert_eq!(lcs_length(&a, &b), lcs_dp(&a, &b));
    }

    #[test]
    fn label_metrics_ignore_pair_order(
        pairs in prop::collection::vec((0usize..3, 0usize..4), 1..40),
        seed in any::<u64>(),
    ) {
        let names = ["true", "false", "mixed", "bogus"];
        let set = LabelSet::new(["true", "false", "mixed"]).unwrap();
        let mut pairs: Vec<(String, String)> =
            pairs.into_iter().map(|(g, p)| (names[g].to_string(), names[p].to_string())).collect();
        let before = label_metrics(&pairs, &set);
        let mut s = seed;
        for i in (1..pairs.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            pairs.swap(i, (s >> 33) as usize % (i + 1));
        }
        let after = label_metrics(&pairs, &set);
        prop_assert_eq!(&before, &after);
        prop_assert_eq!(before.violations, pairs.iter().filter(|p| p.1 == "bogus").count());
        for v in [before.precision, before.recall, before.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn entailment_is_monotone_in_the_grid(
        cells in prop::collection::vec(0.0f64..1.0, 9),
        bump in 0usize..9,
        delta in 0.0f64..0.5,
    ) {
        let trace = "T zero. T one. T two.";
        let article = "A zero. A one. A two.";
        let index = |s: &str| ["zero.", "one.", "two."].iter().position(|w| s.ends_with(w)).unwrap();
        let score = |grid: &[f64]| {
            entailment_with(trace, article, |p, h| Ok(grid[index(p) * 3 + index(h)])).unwrap()
        };
        let base = score(&cells);
        let mut raised = cells.clone();
        raised[bump] = (raised[bump] + delta).min(1.0);
        let up = score(&raised);
        prop_assert!(up.score >= base.score - 1e-12);
        prop_assert!(up.consistency >= base.consistency - 1e-12);
        prop_assert!(up.coverage >= base.coverage - 1e-12);
        prop_assert!((base.score - (base.consistency + base.coverage) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn lexical_overlap_cases() {
    assert_eq!(lexical_overlap("the cat sat", "the cat sat"), 1.0);
    assert_eq!(lexical_overlap("", ""), 1.0);
    assert_eq!(lexical_overlap("x", ""), 0.0);
    // LCS 2 of 3 and 2 of 4
    let expected = 2.0 * (2.0 / 3.0) * 0.5 / (2.0 / 3.0 + 0.5);
    assert!((lexical_overlap("a b c", "a x b y") - expected).abs() < 1e-12);
}

fn embedder(t: ScriptedTransport) -> tracecheck_core::gateway::Gateway {
    gateway(Role::Embed, "embed", &Arc::new(t), &CallLog::new())
}

#[test]
fn similarity_of_a_text_with_itself_is_one() {
    let g = embedder(ScriptedTransport::new());
    for text in ["a", "The Eiffel Tower is in Paris.", "repeat repeat words words"] {
        assert!((similarity_f(text, text, &g).unwrap() - 1.0).abs() < 1e-12);
    }
    assert_eq!(similarity_f("", "", &g).unwrap(), 1.0);
    assert_eq!(similarity_f("word", "", &g).unwrap(), 0.0);
}

#[test]
fn similarity_three_token_hand_computation() {
    let g = embedder(
        ScriptedTransport::new()
            .with_vector("cat", vec![1.0, 0.0])
            .with_vector("dog", vec![0.6, 0.8])
            .with_vector("bird", vec![0.8, 0.6])
            .with_vector("fish", vec![0.0, 1.0]),
    );
    // candidate -> reference: cat 1, dog max(0.6, 0.96), fish max(0, 0.6)
    let p = (1.0 + 0.96 + 0.6) / 3.0;
    // reference -> candidate: cat 1, bird max(0.8, 0.96, 0.6)
    let r = (1.0 + 0.96) / 2.0;
    let expected = 2.0 * p * r / (p + r);
    let got = similarity_f("cat dog fish", "cat bird", &g).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

fn judge_gateway(t: ScriptedTransport) -> (tracecheck_core::gateway::Gateway, Arc<ScriptedTransport>) {
    let t = Arc::new(t);
    (gateway(Role::Judge, "judge", &t, &CallLog::new()), t)
}

#[test]
fn judge_reasks_until_a_score_appears() {
    let (g, t) = judge_gateway(
        ScriptedTransport::new()
            .on_generate(&["did not end with a score line"], ["Fine.\nSCORE: 4"])
            .on_generate(&[], ["It reads well overall."]),
    );
    let r = rubric(Artifact::Explanation, JudgeCriterion::Correctness);
    let s = judge("claim", "text", "reference", &r, &g).unwrap();
    assert_eq!(s.score, 4);
    assert_eq!(s.attempts, 2);
    assert_eq!(s.rationale, "Fine.");
    assert_eq!(t.requests().len(), 2);
}

#[test]
fn judge_gives_up_after_two_reasks() {
    let (g, t) = judge_gateway(ScriptedTransport::new().on_generate(&[], ["SCORE: 9"]));
    let r = rubric(Artifact::Trace, JudgeCriterion::Comprehensibility);
    assert!(matches!(judge("c", "t", "r", &r, &g), Err(EvalError::Unparseable(3))));
    assert_eq!(t.requests().len(), 3);
}

#[test]
fn mean_skips_missing_judgments() {
    let five = [Some(5.0), None, Some(3.0), Some(4.0), None];
    assert_eq!(mean_present(five), Some(4.0));
    assert_eq!(mean_present([None, None]), None);
}

/// Independent macro F1 over gold/predicted label strings.
fn macro_f1(pairs: &[(String, String)], classes: &[&str]) -> f64 {
    let mut total = 0.0;
    for c in classes {
        let tp = pairs.iter().filter(|(g, p)| g == c && p == c).count() as f64;
        let fp = pairs.iter().filter(|(g, p)| g != c && p == c).count() as f64;
        let fn_ = pairs.iter().filter(|(g, p)| g == c && p != c).count() as f64;
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        total += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    total / classes.len() as f64
}

#[test]
fn manifest_evaluation_over_the_fixture() {
    let r = rig_with(fixture_transport(), fixture_corpus(), SessionConfig::default(), EditorConfig::default());
    let dataset = fixture_dataset();
    let items: Vec<_> = dataset.iter().map(|d| d.to_batch_item()).collect();
    let manifest = r.engine.run_batch(&items, Protocol::TraceEdit, &Oracle::new(OracleJudge::Overlap { threshold: 0.6 }));

    let scripted = Arc::new(
        ScriptedTransport::new()
            .on_generate(&["Thinking trace"], ["no score here"])
            .on_generate(&[], ["Solid.\nSCORE: 3"]),
    );
    let log = CallLog::new();
    let scorers = Scorers {
        embed: Some(gateway(Role::Embed, "embed", &scripted, &log)),
        nli: Some(gateway(Role::Nli, "nli", &scripted, &log)),
        judge: Some(gateway(Role::Judge, "judge", &scripted, &log)),
    };
    let report = evaluate_manifest(&manifest, &dataset, &scorers);
    assert_eq!(report.system, "trace_edit");
    let ids: Vec<&str> = report.claims.iter().map(|c| c.claim_id.as_str()).collect();
    assert_eq!(ids, vec!["c1", "c2", "c3"]);

    let pairs: Vec<(String, String)> = report
        .claims
        .iter()
        .map(|c| (c.gold_label.clone(), c.predicted_label.clone().unwrap()))
        .collect();
    let f1 = macro_f1(&pairs, &["true", "false", "misleading"]);
    assert!((report.aggregate.f1 - f1).abs() < 1e-12);
    assert_eq!(report.aggregate.averaging, "macro");

    for c in &report.claims {
        assert!(c.lexical_overlap.is_some());
        assert!(c.similarity.is_some());
        assert!(c.entailment.is_some_and(|e| (0.0..=1.0).contains(&e)));
        assert_eq!(c.judge.explanation_correctness, Some(3));
        assert_eq!(c.judge.trace_correctness, None);
    }
    assert_eq!(report.aggregate.judge.get("explanation_correctness"), Some(&3.0));
    assert!(!report.aggregate.judge.contains_key("trace_correctness"));

    // the judge sees the gold explanation and article as its reference
    let judged = log.snapshot().into_iter().filter(|c| c.role == Role::Judge).count();
    assert_eq!(judged, 3 * (2 + 2 * 3));
    let record = &dataset[0];
    assert!(log
        .snapshot()
        .iter()
        .any(|c| c.role == Role::Judge && c.request_text().contains(record.article.trim())));

    let table = render_table(&[report]);
    let header = table.lines().next().unwrap();
    for col in ["system", "P", "R", "F1", "R_L", "Sim", "ES"] {
        assert!(header.split_whitespace().any(|h| h == col), "{col}");
    }
    assert!(table.contains("trace_edit"));
}
