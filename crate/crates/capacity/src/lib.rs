//! Exhaustive small-instance comparison of two feedback channels.
//!
//! A correction variable `C` must reach the model. Through dialogue it passes
//! an internal bottleneck of `R` bits, so any deterministic interpretation
//! splits `C` into at most `⌊2^R⌋` cells. Through trace editing it selects one
//! trace out of the Hamming ball of radius `k` around the current trace, so
//! the number of distinguishable outputs is the ball size `M_edit`.
//!
//! Every optimum here is found by enumeration, never by formula, so the
//! closed forms in the tests act as independent oracles.

mod ball;
mod channel;
mod reachable;
mod report;

use thiserror::Error;

pub use ball::{
    ball_traces, ball_bound_bits, ball_cell, ball_grid, edit_ball_bfs, edit_ball_bfs_profile, edit_ball_size,
    BallCell,
};
pub use channel::{
    brute_force_optimum, dialogue_channel_optimum, edit_channel_optimum, entropy, partition_optimum, partition_profile,
    randomized_bayes_risk, ChannelInstance, ChannelOptimum, Objective,
};
pub use reachable::{verify_reachable_sets, ReachableReport, ReachableSetup};
pub use report::{
    default_grid, render_table, run_grid, verify_channel_gap, BfsCheck, ChannelReport, BallGridSpec, GridReport, GridSpec,
    Verdict, Verdicts,
};

/// Largest correction support the partition search accepts (3^16 subset pairs).
pub const MAX_SUPPORT: usize = 16;
/// Largest bottleneck rate in bits the dialogue search accepts.
pub const MAX_RATE: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CapacityError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("instance too large to enumerate: {0}")]
    TooLarge(String),
    #[error("edit-ball size overflows 128 bits")]
    Overflow,
}
