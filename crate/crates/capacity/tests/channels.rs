use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use tracecheck_capacity::*;

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

#[test]
fn entropy_examples() {
    assert_eq!(entropy(&uniform(8)).unwrap(), 3.0);
    assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
    assert_eq!(entropy(&[0.5, 0.25, 0.25]).unwrap(), 1.5);
    assert!(matches!(entropy(&[0.5, 0.4]), Err(CapacityError::InvalidDistribution(_))));
    assert!(entropy(&[1.2, -0.2]).is_err());
    assert!(entropy(&[]).is_err());
}

#[test]
fn dialogue_optimum_examples() {
    let at = |rate| dialogue_channel_optimum(&ChannelInstance::uniform(8, rate, 7, 1, 2)).unwrap();
    let r3 = at(3.0);
    assert_eq!(r3.bayes_risk, 0.0);
    assert!((r3.mutual_information - 3.0).abs() < 1e-12);
    let r2 = at(2.0);
    assert_eq!(r2.bayes_risk, 0.5);
    assert!((r2.mutual_information - 2.0).abs() < 1e-12);
    assert_eq!(at(0.0).bayes_risk, 0.875);
    assert_eq!(at(0.0).mutual_information, 0.0);
    // fractional rate: ⌊2^1.5⌋ = 2 cells
    assert_eq!(at(1.5).bayes_risk, 0.75);
}

#[test]
fn dialogue_rejects_infeasible_sizes() {
    let big = ChannelInstance::uniform(17, 2.0, 7, 1, 2);
    assert!(matches!(dialogue_channel_optimum(&big), Err(CapacityError::TooLarge(_))));
    let fast = ChannelInstance::uniform(8, 4.5, 7, 1, 2);
    assert!(matches!(dialogue_channel_optimum(&fast), Err(CapacityError::TooLarge(_))));
    let bad = ChannelInstance::uniform(1, 2.0, 7, 1, 2);
    assert!(matches!(dialogue_channel_optimum(&bad), Err(CapacityError::InvalidInstance(_))));
}

#[test]
fn edit_optimum_examples() {
    // M_edit = 8
    let e = edit_channel_optimum(&ChannelInstance::uniform(8, 0.0, 7, 1, 2)).unwrap();
    assert_eq!(e.outputs, 8);
    assert_eq!(e.bayes_risk, 0.0);
    assert!((e.mutual_information - 3.0).abs() < 1e-12);
    // M_edit = 4 mirrors the R=2 dialogue
    let e = edit_channel_optimum(&ChannelInstance::uniform(8, 0.0, 3, 1, 2)).unwrap();
    assert_eq!(e.outputs, 4);
    assert_eq!(e.bayes_risk, 0.5);
    // M_edit = 1 (radius 0) cannot tell two corrections apart
    let e = edit_channel_optimum(&ChannelInstance::uniform(2, 0.0, 3, 0, 2)).unwrap();
    assert_eq!(e.outputs, 1);
    assert_eq!(e.bayes_risk, 0.5);
}

#[test]
fn non_uniform_hand_case() {
    // p = (0.5, 0.25, 0.125, 0.125), two cells
    let p = [0.5, 0.25, 0.125, 0.125];
    // best split for information: {0.5} vs rest -> 1 bit
    assert!((partition_optimum(&p, 2, Objective::Information).unwrap() - 1.0).abs() < 1e-12);
    // best accuracy: two largest masses in different cells -> 0.75
    assert_eq!(partition_optimum(&p, 2, Objective::Accuracy).unwrap(), 0.75);
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1u32..20, 2..=6).prop_map(|w| {
        let total: u32 = w.iter().sum();
        w.iter().map(|&x| f64::from(x) / f64::from(total)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partition_search_matches_brute_force(p in distribution(), cells in 1usize..5) {
        let (info, risk) = brute_force_optimum(&p, cells).unwrap();
        let dp_info = partition_optimum(&p, cells, Objective::Information).unwrap();
        let dp_hits = partition_optimum(&p, cells, Objective::Accuracy).unwrap();
        prop_assert!((info - dp_info).abs() < 1e-9, "{info} vs {dp_info}");
        prop_assert!((risk - (1.0 - dp_hits)).abs() < 1e-9);
        let h = entropy(&p).unwrap();
        prop_assert!(dp_info <= h + 1e-9);
        prop_assert!(dp_info <= (cells as f64).log2() + 1e-9);
    }

    #[test]
    fn profile_is_monotone_and_ends_at_the_entropy(p in distribution()) {
        let info = partition_profile(&p, p.len(), Objective::Information).unwrap();
        let hits = partition_profile(&p, p.len(), Objective::Accuracy).unwrap();
        prop_assert_eq!(info.len(), p.len());
        for w in info.windows(2) { prop_assert!(w[1] > w[0] - 1e-12); }
        for w in hits.windows(2) { prop_assert!(w[1] > w[0] - 1e-12); }
        prop_assert!((info[p.len() - 1] - entropy(&p).unwrap()).abs() < 1e-9);
        prop_assert!((hits[p.len() - 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reports_respect_information_bounds(support in 2usize..10, rate in 0.0f64..4.0, n in 1u32..6, k in 0u32..3) {
        prop_assume!(k <= n);
        let inst = ChannelInstance::uniform(support, rate, n, k, 2);
        let r = verify_channel_gap(&inst).unwrap();
        prop_assert!(r.verdicts.within_entropy);
        prop_assert!(r.verdicts.dialogue_within_rate);
        prop_assert!(r.verdicts.risk_tracks_information);
        prop_assert!((0.0..=1.0).contains(&r.risk_dialogue));
        prop_assert!((0.0..=1.0).contains(&r.risk_edit));
        prop_assert!(r.verdicts.dominance != Verdict::NotDominated);
    }
}

/// Random row-stochastic kernels over at most four outputs never beat the
/// best deterministic compression at |C| = 4.
#[test]
fn randomized_compressions_do_not_beat_deterministic_ones() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    for cells in 1..=4usize {
        for _ in 0..2000 {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let kernel: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let row: Vec<f64> = (0..cells).map(|_| rng.gen::<f64>()).collect();
                    let s: f64 = row.iter().sum();
                    row.iter().map(|x| x / s).collect()
                })
                .collect();
            let best = 1.0 - partition_optimum(&p, cells, Objective::Accuracy).unwrap();
            assert!(randomized_bayes_risk(&p, &kernel) >= best - 1e-12);
        }
    }
}

#[test]
fn channel_gap_acceptance_instances() {
    for rate in [0.0, 1.0, 2.0] {
        let r = verify_channel_gap(&ChannelInstance::uniform(8, rate, 7, 1, 2)).unwrap();
        assert_eq!(r.m_edit, 8);
        assert_eq!(r.risk_dialogue, 1.0 - rate.exp2() / 8.0);
        assert_eq!(r.risk_edit, 0.0);
        assert_eq!(r.verdicts.dominance, Verdict::Dominates);
    }
    let r = verify_channel_gap(&ChannelInstance::uniform(16, 3.0, 15, 1, 2)).unwrap();
    assert_eq!(r.m_edit, 16);
    assert_eq!(r.risk_dialogue, 0.5);
    assert_eq!(r.risk_edit, 0.0);
    assert_eq!(r.verdicts.dominance, Verdict::Dominates);

    // H(C) = R: the gate closes
    let r = verify_channel_gap(&ChannelInstance::uniform(4, 2.0, 3, 1, 2)).unwrap();
    assert_eq!(r.verdicts.dominance, Verdict::HypothesisNotMet);
    // log2 M_edit = R with H(C) > R: both risks 0.5, nothing claimed
    let r = verify_channel_gap(&ChannelInstance::uniform(8, 2.0, 3, 1, 2)).unwrap();
    assert_eq!(r.verdicts.dominance, Verdict::HypothesisNotMet);
    assert_eq!(r.risk_edit, r.risk_dialogue);
}

#[test]
fn min_bound_is_reported_not_enforced() {
    // |C|=8 into M_edit=3 traces: best partition (3,3,2) carries < log2 3 bits
    let r = verify_channel_gap(&ChannelInstance::uniform(8, 1.0, 2, 1, 2)).unwrap();
    assert_eq!(r.m_edit, 3);
    let expected = 2.0 * (3.0 / 8.0) * (8.0f64 / 3.0).log2() + 0.25 * 2.0;
    assert!((r.i_edit - expected).abs() < 1e-12);
    assert!(!r.verdicts.edit_min_bound);
    assert_eq!(r.verdicts.dominance, Verdict::Dominates);
}
