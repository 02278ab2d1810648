use std::collections::HashSet;

use tracecheck_capacity::*;

#[test]
fn ball_size_examples() {
    assert_eq!(edit_ball_size(8, 0, 4).unwrap(), 1);
    assert_eq!(edit_ball_size(8, 2, 4).unwrap(), 1 + 24 + 252);
    assert_eq!(edit_ball_size(8, 8, 2).unwrap(), 256);
    assert_eq!(edit_ball_size(7, 1, 2).unwrap(), 8);
    assert_eq!(edit_ball_size(15, 1, 2).unwrap(), 16);
    assert!(edit_ball_size(3, 4, 2).is_err());
}

#[test]
fn ball_size_overflow_is_reported() {
    assert_eq!(edit_ball_size(200, 200, 1 << 30), Err(CapacityError::Overflow));
    // the largest ball cell fits comfortably
    assert!(edit_ball_size(32, 4, 16).is_ok());
}

#[test]
fn closed_form_matches_bfs_up_to_length_ten() {
    for s in 2..=4 {
        for n in 1..=10 {
            for k in 0..=n {
                assert_eq!(edit_ball_size(n, k, s).unwrap(), edit_ball_bfs(n, k, s).unwrap(), "n={n} k={k} s={s}");
            }
        }
    }
}

#[test]
fn enumerated_traces_are_distinct_and_within_radius() {
    let traces = ball_traces(8, 2, 4).unwrap();
    assert_eq!(traces.len(), 277);
    let unique: HashSet<&Vec<u8>> = traces.iter().collect();
    assert_eq!(unique.len(), 277);
    for t in &traces {
        assert!(t.iter().filter(|&&x| x != 0).count() <= 2);
        assert!(t.iter().all(|&x| x < 4));
    }
    assert_eq!(traces[0], vec![0; 8]);
}

#[test]
fn ball_grid_holds_from_two_edits() {
    let cells = ball_grid(&[8, 16, 32], &[1, 2, 4], &[4, 16]).unwrap();
    assert_eq!(cells.len(), 18);
    for c in &cells {
        // independent float check of the exact comparison
        let float = c.log2_m_edit >= c.bound_bits - 1e-12;
        if c.k >= 2 {
            assert!(c.holds, "{c:?}");
            assert!(float);
            assert!(!c.informational);
        } else {
            assert!(c.informational);
            assert_eq!(c.holds, float);
        }
    }
    let first = ball_cell(8, 2, 4).unwrap();
    assert_eq!(first.m_edit, 277);
    assert_eq!(first.bound_bits, 8.0);
    // single substitutions fall short: 25 < 32
    let single = ball_cell(8, 1, 4).unwrap();
    assert_eq!(single.m_edit, 25);
    assert!(!single.holds);
}

#[test]
fn reachable_sets_acceptance_instance() {
    let setup = ReachableSetup::new(ChannelInstance::uniform(8, 2.0, 8, 2, 4));
    let r = verify_reachable_sets(&setup).unwrap();
    assert_eq!(r.states, 4);
    assert_eq!(r.m_edit, 277);
    assert!(r.s_f <= 4);
    assert_eq!(r.s_tau, 277);
    assert!(r.subset);
    assert_eq!(r.strict_subset, Some(true));
    assert!(r.many_to_one);
    assert_eq!(r.risk_tau, 0.0);
    assert!(r.risk_f >= 0.5);
    assert_eq!(r.risk_dominance, Some(true));
}

#[test]
fn large_message_alphabet_still_fits_the_bottleneck() {
    let setup = ReachableSetup {
        message_alphabet: 10,
        max_message_len: 4,
        ..ReachableSetup::new(ChannelInstance::uniform(8, 1.0, 8, 2, 4))
    };
    let r = verify_reachable_sets(&setup).unwrap();
    assert_eq!(r.messages, 11111);
    assert!(r.image_states <= 2);
    assert!(r.s_f <= 2);
}

#[test]
fn wide_bottleneck_claims_no_strictness() {
    // 2^3 = 8 states against a ball of 3 traces
    let r = verify_reachable_sets(&ReachableSetup::new(ChannelInstance::uniform(4, 3.0, 2, 1, 2))).unwrap();
    assert_eq!(r.m_edit, 3);
    assert_eq!(r.strict_subset, None);
    assert_eq!(r.risk_dominance, None);
    assert!(r.subset);
}

#[test]
fn default_grid_passes_and_serializes() {
    let start = std::time::Instant::now();
    let report = run_grid(&default_grid()).unwrap();
    assert!(start.elapsed().as_secs() < 10);
    assert!(report.failures().is_empty(), "{:?}", report.failures());
    assert_eq!(report.bfs_checked, 3 * (2 + 3 + 4 + 5 + 6 + 7 + 8 + 9 + 10 + 11));
    assert!(report.bfs_mismatches.is_empty());

    let json = serde_json::to_value(&report).unwrap();
    let first = &json["channels"][0];
    for key in ["instance", "H_C", "I_dialogue", "I_edit", "risk_dialogue", "risk_edit", "M_edit", "bound", "verdicts"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let back: GridReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);

    let table = render_table(&report);
    assert!(table.contains("Dominates"));
    assert!(table.contains("HypothesisNotMet"));
    assert!(table.contains("(informational)"));
}
