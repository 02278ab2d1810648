use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ball::{ball_grid, edit_ball_bfs_profile, edit_ball_size, BallCell};
use crate::channel::{entropy, partition_profile, ChannelInstance, Objective};
use crate::reachable::{verify_reachable_sets, ReachableReport, ReachableSetup};
use crate::{CapacityError, MAX_RATE, MAX_SUPPORT};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Hypotheses hold and the edit channel's risk is strictly lower.
    Dominates,
    /// Hypotheses hold but strict dominance was not found.
    NotDominated,
    /// log2 M_edit > R and H(C) > R are not both true; nothing is claimed.
    HypothesisNotMet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub dominance: Verdict,
    /// Dialogue information never exceeds the rate.
    pub dialogue_within_rate: bool,
    /// Neither channel carries more than H(C).
    pub within_entropy: bool,
    /// Edit information reaches min(H(C), log2 M_edit). Reported, not enforced:
    /// with M_edit not dividing |C| the best partition can fall short.
    pub edit_min_bound: bool,
    /// Across the enumerated cell budgets, higher optimal information goes with
    /// lower optimal risk and vice versa.
    pub risk_tracks_information: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub instance: ChannelInstance,
    #[serde(rename = "H_C")]
    pub h_c: f64,
    #[serde(rename = "I_dialogue")]
    pub i_dialogue: f64,
    #[serde(rename = "I_edit")]
    pub i_edit: f64,
    pub risk_dialogue: f64,
    pub risk_edit: f64,
    #[serde(rename = "M_edit")]
    pub m_edit: u128,
    /// Edit-ball lower bound on log2 M_edit, in bits.
    pub bound: f64,
    pub verdicts: Verdicts,
}

fn monotone_pairing(info: &[f64], risk: &[f64]) -> bool {
    for a in 0..info.len() {
        for b in 0..info.len() {
            if info[a] > info[b] + EPS && risk[a] > risk[b] + EPS {
                return false;
            }
            if risk[a] < risk[b] - EPS && info[a] < info[b] + EPS {
                return false;
            }
        }
    }
    true
}

/// Enumerate both channel optima for one instance and judge strict dominance.
pub fn verify_channel_gap(instance: &ChannelInstance) -> Result<ChannelReport, CapacityError> {
    instance.validate()?;
    if instance.support > MAX_SUPPORT {
        return Err(CapacityError::TooLarge(format!("support {} > {MAX_SUPPORT}", instance.support)));
    }
    if instance.rate > MAX_RATE {
        return Err(CapacityError::TooLarge(format!("rate {} > {MAX_RATE}", instance.rate)));
    }
    let p = instance.probabilities();
    let h = entropy(&p)?;
    let m = edit_ball_size(instance.n, instance.k, instance.s)?;
    let dialogue_cells = instance.cells().min(instance.support);
    let edit_cells = m.min(instance.support as u128) as usize;

    // one pass per objective covers every budget up to the larger channel
    let budget = dialogue_cells.max(edit_cells);
    let info = partition_profile(&p, budget, Objective::Information)?;
    let hits = partition_profile(&p, budget, Objective::Accuracy)?;
    let risk: Vec<f64> = hits.iter().map(|x| (1.0 - x).max(0.0)).collect();

    let (i_d, r_d) = (info[dialogue_cells - 1], risk[dialogue_cells - 1]);
    let (i_e, r_e) = (info[edit_cells - 1], risk[edit_cells - 1]);
    let log2m = (m as f64).log2();

    let hypotheses = log2m > instance.rate + EPS && h > instance.rate + EPS;
    let dominance = if !hypotheses {
        Verdict::HypothesisNotMet
    } else if r_e < r_d {
        Verdict::Dominates
    } else {
        Verdict::NotDominated
    };
    if dominance == Verdict::NotDominated {
        tracing::warn!(?instance, r_e, r_d, "edit channel did not dominate");
    }
    Ok(ChannelReport {
        instance: instance.clone(),
        h_c: h,
        i_dialogue: i_d,
        i_edit: i_e,
        risk_dialogue: r_d,
        risk_edit: r_e,
        m_edit: m,
        bound: crate::ball::ball_bound_bits(instance.n, instance.k, instance.s),
        verdicts: Verdicts {
            dominance,
            dialogue_within_rate: i_d <= instance.rate + EPS,
            within_entropy: i_d <= h + EPS && i_e <= h + EPS,
            edit_min_bound: i_e >= h.min(log2m) - EPS,
            risk_tracks_information: monotone_pairing(&info, &risk),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallGridSpec {
    pub n: Vec<u32>,
    pub k: Vec<u32>,
    pub s: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub channels: Vec<ChannelInstance>,
    pub ball: BallGridSpec,
    /// Closed form is checked against BFS for every n ≤ this, k ≤ n, 2 ≤ s ≤ `bfs_max_s`.
    pub bfs_max_n: u32,
    pub bfs_max_s: u32,
    pub reachable: Vec<ReachableSetup>,
}

/// Instances named by their edit ball: n=7,k=1,s=2 gives M_edit=8,
/// n=15,k=1,s=2 gives 16, n=3,k=1,s=2 gives 4 and n=8,k=2,s=4 gives 277.
pub fn default_grid() -> GridSpec {
    let u = ChannelInstance::uniform;
    GridSpec {
        channels: vec![
            u(8, 0.0, 7, 1, 2),
            u(8, 1.0, 7, 1, 2),
            u(8, 2.0, 7, 1, 2),
            u(8, 3.0, 7, 1, 2),
            u(16, 3.0, 15, 1, 2),
            u(4, 2.0, 3, 1, 2),
            u(8, 2.0, 3, 1, 2),
            u(8, 2.0, 8, 2, 4),
        ],
        ball: BallGridSpec {
            n: vec![8, 16, 32],
            k: vec![1, 2, 4],
            s: vec![4, 16],
        },
        bfs_max_n: 10,
        bfs_max_s: 4,
        reachable: vec![
            ReachableSetup::new(u(8, 2.0, 8, 2, 4)),
            ReachableSetup {
                message_alphabet: 6,
                max_message_len: 4,
                ..ReachableSetup::new(u(8, 1.0, 8, 2, 4))
            },
            ReachableSetup::new(u(4, 3.0, 2, 1, 2)),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfsCheck {
    pub n: u32,
    pub k: u32,
    pub s: u32,
    pub closed_form: u128,
    pub bfs: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub channels: Vec<ChannelReport>,
    pub ball: Vec<BallCell>,
    pub bfs_checked: usize,
    pub bfs_mismatches: Vec<BfsCheck>,
    pub reachable: Vec<ReachableReport>,
}

impl GridReport {
    /// Human-readable list of every asserted check that failed.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.channels {
            let v = &r.verdicts;
            let tag = format!("|C|={} R={} M_edit={}", r.instance.support, r.instance.rate, r.m_edit);
            if v.dominance == Verdict::NotDominated {
                out.push(format!("{tag}: no strict dominance"));
            }
            if !v.dialogue_within_rate || !v.within_entropy {
                out.push(format!("{tag}: information bound violated"));
            }
            if !v.risk_tracks_information {
                out.push(format!("{tag}: risk and information disagree"));
            }
        }
        for c in self.ball.iter().filter(|c| !c.informational && !c.holds) {
            out.push(format!("ball n={} k={} s={} fails", c.n, c.k, c.s));
        }
        for m in &self.bfs_mismatches {
            out.push(format!("ball n={} k={} s={}: closed {} vs bfs {}", m.n, m.k, m.s, m.closed_form, m.bfs));
        }
        for r in &self.reachable {
            if r.s_f > r.states || !r.subset || r.strict_subset == Some(false) {
                out.push(format!("reachable sets R={}: containment fails", r.rate));
            }
            if r.risk_dominance == Some(false) {
                out.push(format!("reachable sets R={}: no risk gap", r.rate));
            }
        }
        out
    }
}

pub fn run_grid(spec: &GridSpec) -> Result<GridReport, CapacityError> {
    let channels: Vec<Result<ChannelReport, CapacityError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = spec
            .channels
            .iter()
            .map(|inst| scope.spawn(move || verify_channel_gap(inst)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("enumeration thread panicked"))
            .collect()
    });
    let channels = channels.into_iter().collect::<Result<Vec<_>, _>>()?;
    let ball = ball_grid(&spec.ball.n, &spec.ball.k, &spec.ball.s)?;

    let mut bfs_checked = 0;
    let mut bfs_mismatches = Vec::new();
    for s in 2..=spec.bfs_max_s {
        for n in 1..=spec.bfs_max_n {
            let per_depth = edit_ball_bfs_profile(n, s)?;
            let mut bfs = 0u128;
            for k in 0..=n {
                bfs += per_depth[k as usize];
                let closed_form = edit_ball_size(n, k, s)?;
                bfs_checked += 1;
                if closed_form != bfs {
                    bfs_mismatches.push(BfsCheck { n, k, s, closed_form, bfs });
                }
            }
        }
    }
    let reachable = spec
        .reachable
        .iter()
        .map(verify_reachable_sets)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GridReport {
        channels,
        ball,
        bfs_checked,
        bfs_mismatches,
        reachable,
    })
}

pub fn render_table(report: &GridReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "channel dominance");
    let _ = writeln!(
        out,
        "{:>4} {:>4} {:>7} {:>6} {:>6} {:>6} {:>8} {:>8}  verdict",
        "|C|", "R", "M_edit", "H(C)", "I_dlg", "I_edit", "risk_dlg", "risk_edt"
    );
    for r in &report.channels {
        let _ = writeln!(
            out,
            "{:>4} {:>4} {:>7} {:>6.3} {:>6.3} {:>6.3} {:>8.4} {:>8.4}  {:?}",
            r.instance.support, r.instance.rate, r.m_edit, r.h_c, r.i_dialogue, r.i_edit, r.risk_dialogue, r.risk_edit,
            r.verdicts.dominance
        );
    }
    let _ = writeln!(out, "\nedit-ball bound");
    let _ = writeln!(out, "{:>3} {:>2} {:>3} {:>14} {:>9} {:>9}  holds", "n", "k", "s", "M_edit", "log2 M", "bound");
    for c in &report.ball {
        let note = if c.informational { " (informational)" } else { "" };
        let _ = writeln!(
            out,
            "{:>3} {:>2} {:>3} {:>14} {:>9.3} {:>9.3}  {}{}",
            c.n, c.k, c.s, c.m_edit, c.log2_m_edit, c.bound_bits, c.holds, note
        );
    }
    let _ = writeln!(
        out,
        "\nclosed form vs BFS: {} cells, {} mismatches",
        report.bfs_checked,
        report.bfs_mismatches.len()
    );
    let _ = writeln!(out, "\nreachable sets");
    let _ = writeln!(
        out,
        "{:>4} {:>6} {:>7} {:>8} {:>5} {:>5}  strict  {:>6} {:>6}",
        "R", "states", "M_edit", "messages", "|S_F|", "|S_t|", "risk_F", "risk_t"
    );
    for r in &report.reachable {
        let strict = r.strict_subset.map_or("-".to_string(), |b| b.to_string());
        let _ = writeln!(
            out,
            "{:>4} {:>6} {:>7} {:>8} {:>5} {:>5}  {:<6}  {:>6.3} {:>6.3}",
            r.rate, r.states, r.m_edit, r.messages, r.s_f, r.s_tau, strict, r.risk_f, r.risk_tau
        );
    }
    out
}
