use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{ball, CapacityError, ChannelInstance};

const MAX_MESSAGES: u128 = 1 << 20;

/// A constructed dialogue pipeline: every feedback string up to
/// `max_message_len` over `message_alphabet` symbols is hashed into one of
/// ⌊2^R⌋ internal states, and each state is decoded to a trace in the edit ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachableSetup {
    pub instance: ChannelInstance,
    pub message_alphabet: u32,
    pub max_message_len: u32,
}

impl ReachableSetup {
    pub fn new(instance: ChannelInstance) -> Self {
        Self {
            instance,
            message_alphabet: 4,
            max_message_len: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachableReport {
    pub rate: f64,
    /// ⌊2^R⌋ internal states.
    pub states: usize,
    pub m_edit: u128,
    pub messages: usize,
    /// Distinct internal states actually hit.
    pub image_states: usize,
    /// |S_F|: traces reachable through the bottleneck.
    pub s_f: usize,
    /// |S_τ|: traces reachable by direct edits.
    pub s_tau: usize,
    pub subset: bool,
    /// Only claimed when 2^R < M_edit.
    pub strict_subset: Option<bool>,
    pub many_to_one: bool,
    pub risk_f: f64,
    pub risk_tau: f64,
    pub risk_gap: f64,
    /// Claimed only when the bottleneck has fewer states than both the
    /// correction support and the edit ball.
    pub risk_dominance: Option<bool>,
}

/// FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn messages(alphabet: u32, max_len: u32) -> Result<Vec<Vec<u8>>, CapacityError> {
    let total: u128 = (0..=max_len).map(|l| u128::from(alphabet).pow(l)).sum();
    if alphabet == 0 || alphabet > 256 || total > MAX_MESSAGES {
        return Err(CapacityError::TooLarge(format!("{total} messages")));
    }
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet as usize);
        for m in &frontier {
            for a in 0..alphabet {
                let mut m2: Vec<u8> = m.clone();
                m2.push(a as u8);
                next.push(m2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    Ok(out)
}

/// 0-1 risk of recovering C when outputs are restricted to `set`. Correction
/// `c` is served only by its target trace, the `c`-th trace of the ball.
fn restricted_risk(p: &[f64], targets: &[Vec<u8>], set: &BTreeSet<Vec<u8>>) -> f64 {
    let served: f64 = p
        .iter()
        .enumerate()
        .filter(|(c, _)| targets.get(*c).is_some_and(|t| set.contains(t)))
        .map(|(_, pc)| pc)
        .sum();
    (1.0 - served).max(0.0)
}

pub fn verify_reachable_sets(setup: &ReachableSetup) -> Result<ReachableReport, CapacityError> {
    let inst = &setup.instance;
    inst.validate()?;
    let states = inst.cells();
    if states == 0 || states as u128 > MAX_MESSAGES {
        return Err(CapacityError::TooLarge(format!("{states} internal states")));
    }
    let traces = ball::ball_traces(inst.n, inst.k, inst.s)?;
    let m_edit = traces.len() as u128;
    let all_messages = messages(setup.message_alphabet, setup.max_message_len)?;

    let mut hit_states = BTreeSet::new();
    let mut s_f = BTreeSet::new();
    for m in &all_messages {
        let state = (fnv1a(m) % states as u64) as usize;
        hit_states.insert(state);
        s_f.insert(traces[state % traces.len()].clone());
    }
    let s_tau: BTreeSet<Vec<u8>> = traces.iter().cloned().collect();
    let subset = s_f.is_subset(&s_tau);
    let strict_subset = ((states as u128) < m_edit).then(|| subset && s_f.len() < s_tau.len());

    let p = inst.probabilities();
    let risk_f = restricted_risk(&p, &traces, &s_f);
    let risk_tau = restricted_risk(&p, &traces, &s_tau);
    Ok(ReachableReport {
        rate: inst.rate,
        states,
        m_edit,
        messages: all_messages.len(),
        image_states: hit_states.len(),
        s_f: s_f.len(),
        s_tau: s_tau.len(),
        subset,
        strict_subset,
        many_to_one: all_messages.len() > hit_states.len(),
        risk_f,
        risk_tau,
        risk_gap: risk_f - risk_tau,
        risk_dominance: (states < inst.support && (states as u128) < m_edit).then_some(risk_tau < risk_f),
    })
}
