//! Session utility and per-step training reward.
//!
//! Utility is quality minus smoothness minus the stall and bandwidth
//! penalties. Quality and smoothness count played chunks only; stall time and
//! megabytes count everything, so a chunk that is fetched and then scrolled
//! past costs its size and earns nothing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{StepOutcome, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("trajectory has not reached the end of the session")]
    Incomplete,
    #[error("retention weight {0} outside [0, 1]")]
    Retention(f64),
    #[error("coefficients must be positive (mu={mu}, nu={nu})")]
    Coefficients { mu: f64, nu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreCoefficients {
    /// Penalty per second of stall.
    pub mu: f64,
    /// Penalty per megabyte downloaded.
    pub nu: f64,
}

impl Default for ScoreCoefficients {
    fn default() -> Self {
        ScoreCoefficients { mu: 1.85, nu: 0.5 }
    }
}

impl ScoreCoefficients {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.mu > 0.0 && self.nu > 0.0 {
            Ok(())
        } else {
            Err(ScoreError::Coefficients {
                mu: self.mu,
                nu: self.nu,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub quality: f64,
    pub smoothness: f64,
    pub rebuffer_s: f64,
    pub rebuffer_penalty: f64,
    pub bandwidth_mb: f64,
    pub bandwidth_penalty: f64,
    /// Megabytes downloaded but never played (informational).
    pub wasted_mb: f64,
    pub utility: f64,
}

impl ScoreBreakdown {
    /// Component-wise mean; the all-zero breakdown for an empty slice.
    pub fn mean(scores: &[ScoreBreakdown]) -> ScoreBreakdown {
        if scores.is_empty() {
            return ScoreBreakdown::default();
        }
        let n = scores.len() as f64;
        let sum = |f: fn(&ScoreBreakdown) -> f64| scores.iter().map(f).sum::<f64>() / n;
        ScoreBreakdown {
            quality: sum(|s| s.quality),
            smoothness: sum(|s| s.smoothness),
            rebuffer_s: sum(|s| s.rebuffer_s),
            rebuffer_penalty: sum(|s| s.rebuffer_penalty),
            bandwidth_mb: sum(|s| s.bandwidth_mb),
            bandwidth_penalty: sum(|s| s.bandwidth_penalty),
            wasted_mb: sum(|s| s.wasted_mb),
            utility: sum(|s| s.utility),
        }
    }
}

pub fn smoothness_term(r: f64, r_prev: Option<f64>) -> f64 {
    r_prev.map_or(0.0, |p| (r - p).abs())
}

/// Scores raw step outcomes. `complete` says whether they cover a whole session.
pub fn score_outcomes<'a>(
    outcomes: impl IntoIterator<Item = &'a StepOutcome>,
    complete: bool,
    coeffs: &ScoreCoefficients,
) -> Result<ScoreBreakdown, ScoreError> {
    if !complete {
        return Err(ScoreError::Incomplete);
    }
    let mut s = ScoreBreakdown::default();
    for out in outcomes {
        for p in &out.played {
            s.quality += p.bitrate_mbps;
            s.smoothness += p.smoothness;
        }
        s.rebuffer_s += out.rebuffer;
        if let Some(d) = &out.downloaded {
            s.bandwidth_mb += d.size_mb;
        }
        s.wasted_mb += out.wasted_mb();
    }
    s.rebuffer_penalty = coeffs.mu * s.rebuffer_s;
    s.bandwidth_penalty = coeffs.nu * s.bandwidth_mb;
    s.utility = s.quality - s.smoothness - s.rebuffer_penalty - s.bandwidth_penalty;
    Ok(s)
}

pub fn utility_score(
    trajectory: &Trajectory,
    coeffs: &ScoreCoefficients,
) -> Result<ScoreBreakdown, ScoreError> {
    score_outcomes(
        trajectory.steps.iter().map(|s| &s.outcome),
        trajectory.complete,
        coeffs,
    )
}

/// `weight·(R − S) − μT − ν·bw`; shared by the reward and the planners.
pub(crate) fn reward_terms(
    weight: f64,
    bitrate: f64,
    smoothness: f64,
    rebuffer: f64,
    size_mb: f64,
    coeffs: &ScoreCoefficients,
) -> f64 {
    weight * (bitrate - smoothness) - coeffs.mu * rebuffer - coeffs.nu * size_mb
}

/// Training reward for one step. `watched` is whether the viewer reaches the
/// downloaded chunk, `retention` its conditional retention. A sleep step is
/// charged only for the stall it allowed.
pub fn step_reward(
    out: &StepOutcome,
    watched: bool,
    retention: f64,
    coeffs: &ScoreCoefficients,
) -> Result<f64, ScoreError> {
    if !(0.0..=1.0).contains(&retention) {
        return Err(ScoreError::Retention(retention));
    }
    let w = if watched { 1.0 } else { 0.0 };
    Ok(match &out.downloaded {
        Some(d) => reward_terms(
            w * retention,
            d.bitrate_mbps,
            d.smoothness,
            out.rebuffer,
            d.size_mb,
            coeffs,
        ),
        None => reward_terms(0.0, 0.0, 0.0, out.rebuffer, 0.0, coeffs),
    })
}

/// [`step_reward`] with the watch indicator and retention recorded on the outcome.
pub fn outcome_reward(out: &StepOutcome, coeffs: &ScoreCoefficients) -> f64 {
    let (w, l) = out
        .downloaded
        .map_or((false, 0.0), |d| (d.will_watch, d.retention));
    step_reward(out, w, l, coeffs).expect("simulator retention lies in [0, 1]")
}
