use serde::{Deserialize, Serialize};

use crate::{ball, CapacityError, MAX_RATE, MAX_SUPPORT};

const SUM_TOLERANCE: f64 = 1e-9;

/// One finite setting of both channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInstance {
    /// Vocabulary size `s`.
    pub s: u32,
    /// Trace length `n`.
    pub n: u32,
    /// Edit radius `k` (substitutions).
    pub k: u32,
    /// Support size of the correction variable.
    pub support: usize,
    /// Distribution of the correction variable; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<Vec<f64>>,
    /// Bottleneck rate in bits.
    pub rate: f64,
}

impl ChannelInstance {
    pub fn uniform(support: usize, rate: f64, n: u32, k: u32, s: u32) -> Self {
        Self {
            s,
            n,
            k,
            support,
            distribution: None,
            rate,
        }
    }

    pub fn validate(&self) -> Result<(), CapacityError> {
        let bad = |m: &str| Err(CapacityError::InvalidInstance(m.to_string()));
        if self.s < 2 {
            return bad("vocabulary needs at least 2 tokens");
        }
        if self.n < 1 {
            return bad("trace length must be positive");
        }
        if self.k > self.n {
            return bad("edit radius exceeds trace length");
        }
        if self.support < 2 {
            return bad("correction support needs at least 2 values");
        }
        if !self.rate.is_finite() || self.rate < 0.0 {
            return bad("rate must be a non-negative number of bits");
        }
        if let Some(d) = &self.distribution {
            if d.len() != self.support {
                return Err(CapacityError::InvalidDistribution(format!(
                    "{} probabilities for support {}",
                    d.len(),
                    self.support
                )));
            }
            entropy(d)?;
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.distribution
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.support as f64; self.support])
    }

    /// Distinct internal states a rate-`R` bottleneck can hold.
    pub fn cells(&self) -> usize {
        // 2^R for R ≤ 63 fits; larger rates are rejected before enumeration
        self.rate.exp2().floor().min(u64::MAX as f64) as usize
    }

    pub fn m_edit(&self) -> Result<u128, CapacityError> {
        ball::edit_ball_size(self.n, self.k, self.s)
    }
}

/// Shannon entropy in bits.
pub fn entropy(p: &[f64]) -> Result<f64, CapacityError> {
    if p.is_empty() {
        return Err(CapacityError::InvalidDistribution("empty".into()));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(CapacityError::InvalidDistribution(format!("bad probability {x}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(CapacityError::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Maximize H(Z), which equals I(C;Z) for a deterministic Z = f(C).
    Information,
    /// Maximize Σ_cells max p, i.e. minimize the 0-1 Bayes risk.
    Accuracy,
}

/// Best additive score over all partitions of the support into at most
/// `max_cells` non-empty blocks, by subset dynamic programming.
pub fn partition_optimum(p: &[f64], max_cells: usize, objective: Objective) -> Result<f64, CapacityError> {
    let profile = partition_profile(p, max_cells, objective)?;
    Ok(*profile.last().expect("at least one layer"))
}

/// Entry `j` is the best score with at most `j + 1` blocks, for every budget
/// up to `min(max_cells, |C|)`. One pass yields the whole family.
pub fn partition_profile(p: &[f64], max_cells: usize, objective: Objective) -> Result<Vec<f64>, CapacityError> {
    let n = p.len();
    if n == 0 {
        return Err(CapacityError::InvalidDistribution("empty".into()));
    }
    if n > MAX_SUPPORT {
        return Err(CapacityError::TooLarge(format!("support {n} > {MAX_SUPPORT}")));
    }
    if max_cells == 0 {
        return Err(CapacityError::InvalidInstance("no cells".into()));
    }
    let size = 1usize << n;
    let full = size - 1;
    // block score of every subset
    let mut mass = vec![0.0f64; size];
    let mut peak = vec![0.0f64; size];
    for mask in 1..size {
        let low = mask.trailing_zeros() as usize;
        let rest = mask & (mask - 1);
        mass[mask] = mass[rest] + p[low];
        peak[mask] = peak[rest].max(p[low]);
    }
    let value: Vec<f64> = match objective {
        Objective::Information => mass
            .iter()
            .map(|&q| if q > 0.0 { -q * q.log2() } else { 0.0 })
            .collect(),
        Objective::Accuracy => peak,
    };

    let layers = max_cells.min(n);
    let mut profile = Vec::with_capacity(layers);
    let mut prev = vec![f64::NEG_INFINITY; size];
    prev[0] = 0.0;
    for layer in 1..=layers {
        let last = layer == layers;
        let mut next = prev.clone();
        let (lo, hi) = if last { (full, size) } else { (1, size) };
        for mask in lo..hi {
            let low = mask & mask.wrapping_neg();
            let rest = mask ^ low;
            let mut best = next[mask];
            let mut sub = rest;
            loop {
                let block = sub | low;
                let tail = prev[mask ^ block];
                if tail > f64::NEG_INFINITY {
                    let v = value[block] + tail;
                    if v > best {
                        best = v;
                    }
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & rest;
            }
            next[mask] = best;
        }
        profile.push(next[full]);
        prev = next;
    }
    Ok(profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelOptimum {
    /// Maximum achievable I(C; output) in bits.
    pub mutual_information: f64,
    /// Minimum achievable 0-1 Bayes risk of recovering C.
    pub bayes_risk: f64,
    /// Distinguishable outputs the channel allows.
    pub outputs: u128,
}

fn optimum_with_cells(p: &[f64], cells: usize, outputs: u128) -> Result<ChannelOptimum, CapacityError> {
    let info = partition_optimum(p, cells, Objective::Information)?;
    let hits = partition_optimum(p, cells, Objective::Accuracy)?;
    Ok(ChannelOptimum {
        mutual_information: info,
        bayes_risk: (1.0 - hits).max(0.0),
        outputs,
    })
}

/// Best deterministic compression of C into at most ⌊2^R⌋ cells.
pub fn dialogue_channel_optimum(instance: &ChannelInstance) -> Result<ChannelOptimum, CapacityError> {
    instance.validate()?;
    if instance.support > MAX_SUPPORT {
        return Err(CapacityError::TooLarge(format!("support {} > {MAX_SUPPORT}", instance.support)));
    }
    if instance.rate > MAX_RATE {
        return Err(CapacityError::TooLarge(format!("rate {} > {MAX_RATE}", instance.rate)));
    }
    let cells = instance.cells();
    optimum_with_cells(&instance.probabilities(), cells, cells as u128)
}

/// Best deterministic assignment of corrections to traces in the edit ball.
///
/// With at least as many traces as corrections an injective assignment
/// exists; the partition search still runs and confirms it.
pub fn edit_channel_optimum(instance: &ChannelInstance) -> Result<ChannelOptimum, CapacityError> {
    instance.validate()?;
    if instance.support > MAX_SUPPORT {
        return Err(CapacityError::TooLarge(format!("support {} > {MAX_SUPPORT}", instance.support)));
    }
    let m = instance.m_edit()?;
    let cells = m.min(instance.support as u128) as usize;
    optimum_with_cells(&instance.probabilities(), cells, m)
}

/// Exhaustive search over every map C → {0..cells}. Exponential; test oracle only.
pub fn brute_force_optimum(p: &[f64], cells: usize) -> Result<(f64, f64), CapacityError> {
    let n = p.len();
    let total = (cells as f64).powi(n as i32);
    if total > 5e7 {
        return Err(CapacityError::TooLarge(format!("{cells}^{n} maps")));
    }
    let mut assign = vec![0usize; n];
    let (mut best_info, mut best_risk) = (0.0f64, 1.0f64);
    loop {
        let mut mass = vec![0.0; cells];
        let mut peak = vec![0.0f64; cells];
        for (c, &z) in assign.iter().enumerate() {
            mass[z] += p[c];
            peak[z] = peak[z].max(p[c]);
        }
        let info: f64 = mass.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.log2()).sum();
        let risk = 1.0 - peak.iter().sum::<f64>();
        best_info = best_info.max(info);
        best_risk = best_risk.min(risk);
        // odometer increment
        let mut i = 0;
        loop {
            if i == n {
                return Ok((best_info, best_risk.max(0.0)));
            }
            assign[i] += 1;
            if assign[i] < cells {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

/// Bayes risk of a randomized compression given as a row-stochastic kernel K(c, z).
pub fn randomized_bayes_risk(p: &[f64], kernel: &[Vec<f64>]) -> f64 {
    let outputs = kernel.first().map_or(0, Vec::len);
    let correct: f64 = (0..outputs)
        .map(|z| {
            p.iter()
                .zip(kernel)
                .map(|(pc, row)| pc * row[z])
                .fold(0.0, f64::max)
        })
        .sum();
    1.0 - correct
}
