use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::CapacityError;

/// Explicit enumeration bound for BFS and trace listing.
const MAX_STATES: u128 = 1 << 24;

fn binomial(n: u32, j: u32) -> Result<u128, CapacityError> {
    let mut c: u128 = 1;
    for i in 0..j {
        // exact at every step: c * (n - i) is divisible by (i + 1)
        c = c.checked_mul(u128::from(n - i)).ok_or(CapacityError::Overflow)? / u128::from(i + 1);
    }
    Ok(c)
}

/// Number of length-`n` traces over `s` tokens within `k` substitutions of a
/// fixed trace: Σ_{j≤k} C(n,j)(s−1)^j.
pub fn edit_ball_size(n: u32, k: u32, s: u32) -> Result<u128, CapacityError> {
    if s < 2 || k > n {
        return Err(CapacityError::InvalidInstance(format!("ball n={n} k={k} s={s}")));
    }
    let mut total: u128 = 0;
    for j in 0..=k {
        let ways = u128::from(s - 1).checked_pow(j).ok_or(CapacityError::Overflow)?;
        let term = binomial(n, j)?.checked_mul(ways).ok_or(CapacityError::Overflow)?;
        total = total.checked_add(term).ok_or(CapacityError::Overflow)?;
    }
    Ok(total)
}

/// Ball size by breadth-first search over single substitutions from 0^n.
pub fn edit_ball_bfs(n: u32, k: u32, s: u32) -> Result<u128, CapacityError> {
    if k > n {
        return Err(CapacityError::InvalidInstance(format!("ball n={n} k={k} s={s}")));
    }
    Ok(edit_ball_bfs_profile(n, s)?[..=k as usize].iter().sum())
}

/// Traces first reached at each BFS depth 0..=n; prefix sums are ball sizes.
pub fn edit_ball_bfs_profile(n: u32, s: u32) -> Result<Vec<u128>, CapacityError> {
    if s < 2 || n == 0 {
        return Err(CapacityError::InvalidInstance(format!("ball n={n} s={s}")));
    }
    let space = u128::from(s).checked_pow(n).filter(|&x| x <= MAX_STATES);
    let Some(space) = space else {
        return Err(CapacityError::TooLarge(format!("{s}^{n} traces")));
    };
    let (n, s) = (n as usize, s as usize);
    let mut depth = vec![u8::MAX; space as usize];
    let mut queue = VecDeque::from([0usize]);
    depth[0] = 0;
    let mut per_depth = vec![0u128; n + 1];
    per_depth[0] = 1;
    let mut powers = vec![1usize; n];
    for i in 1..n {
        powers[i] = powers[i - 1] * s;
    }
    while let Some(state) = queue.pop_front() {
        let d = depth[state];
        for &pw in &powers {
            let digit = (state / pw) % s;
            for t in 0..s {
                if t == digit {
                    continue;
                }
                let next = state - digit * pw + t * pw;
                if depth[next] == u8::MAX {
                    depth[next] = d + 1;
                    per_depth[usize::from(d) + 1] += 1;
                    queue.push_back(next);
                }
            }
        }
    }
    Ok(per_depth)
}

/// Every trace within `k` substitutions of 0^n, ordered by distance, then
/// edited positions, then substituted tokens.
pub fn ball_traces(n: u32, k: u32, s: u32) -> Result<Vec<Vec<u8>>, CapacityError> {
    let size = edit_ball_size(n, k, s)?;
    if size > MAX_STATES || s > 256 {
        return Err(CapacityError::TooLarge(format!("{size} traces")));
    }
    let mut out = Vec::with_capacity(size as usize);
    for j in 0..=k as usize {
        let mut positions: Vec<usize> = (0..j).collect();
        loop {
            let mut symbols = vec![1u32; j];
            loop {
                let mut trace = vec![0u8; n as usize];
                for (p, sym) in positions.iter().zip(&symbols) {
                    trace[*p] = *sym as u8;
                }
                out.push(trace);
                if !next_symbols(&mut symbols, s) {
                    break;
                }
            }
            if !next_combination(&mut positions, n as usize) {
                break;
            }
        }
    }
    debug_assert_eq!(out.len() as u128, size);
    Ok(out)
}

/// Odometer over substituted tokens 1..s.
fn next_symbols(symbols: &mut [u32], s: u32) -> bool {
    for sym in symbols.iter_mut().rev() {
        *sym += 1;
        if *sym < s {
            return true;
        }
        *sym = 1;
    }
    false
}

fn next_combination(c: &mut [usize], n: usize) -> bool {
    let j = c.len();
    for i in (0..j).rev() {
        if c[i] < n - j + i {
            c[i] += 1;
            for t in i + 1..j {
                c[t] = c[t - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// k(log2 s + log2(n/k)) bits.
pub fn ball_bound_bits(n: u32, k: u32, s: u32) -> f64 {
    if k == 0 {
        return 0.0;
    }
    f64::from(k) * (f64::from(s).log2() + (f64::from(n) / f64::from(k)).log2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallCell {
    pub n: u32,
    pub k: u32,
    pub s: u32,
    pub m_edit: u128,
    pub log2_m_edit: f64,
    pub bound_bits: f64,
    pub holds: bool,
    /// Single-edit cells are outside the substitution-only claim and are not asserted.
    pub informational: bool,
}

pub fn ball_cell(n: u32, k: u32, s: u32) -> Result<BallCell, CapacityError> {
    let m = edit_ball_size(n, k, s)?;
    let bound_bits = ball_bound_bits(n, k, s);
    // With k | n the bound is the integer (s·n/k)^k, so compare exactly.
    let holds = if k > 0 && n % k == 0 {
        match u128::from(s * (n / k)).checked_pow(k) {
            Some(b) => m >= b,
            None => false,
        }
    } else {
        (m as f64).log2() >= bound_bits
    };
    Ok(BallCell {
        n,
        k,
        s,
        m_edit: m,
        log2_m_edit: (m as f64).log2(),
        bound_bits,
        holds,
        informational: k == 1,
    })
}

pub fn ball_grid(ns: &[u32], ks: &[u32], ss: &[u32]) -> Result<Vec<BallCell>, CapacityError> {
    let mut out = Vec::new();
    for &n in ns {
        for &k in ks.iter().filter(|&&k| k <= n) {
            for &s in ss {
                out.push(ball_cell(n, k, s)?);
            }
        }
    }
    Ok(out)
}
