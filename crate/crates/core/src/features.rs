//! Agent observations.
//!
//! The buffer-management agent sees the throughput history plus
//! `(retention, buffer, next size)` for every queue slot; the bitrate agent
//! sees the history plus a richer record for the one video it is serving.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{SessionState, VideoView, HISTORY_LEN};

const THROUGHPUT_SCALE: f64 = 10.0;
const BUFFER_SCALE: f64 = 10.0;
const SIZE_SCALE: f64 = 1.0;
const REBUFFER_SCALE: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("target chunk {n} precedes playing chunk {m}")]
    ChunkOrder { m: usize, n: usize },
    #[error("chunk index {0} outside the retention curve")]
    OutOfRange(usize),
    #[error("video {0} cannot be downloaded in this state")]
    Masked(usize),
}

/// `p[n] / p[m]`: probability of reaching chunk `n` given the viewer is at `m`.
pub fn conditional_retention(retention: &[f64], m: usize, n: usize) -> Result<f64, FeatureError> {
    if n < m {
        return Err(FeatureError::ChunkOrder { m, n });
    }
    if n >= retention.len() {
        return Err(FeatureError::OutOfRange(n));
    }
    if retention[m] <= 0.0 {
        return Ok(0.0);
    }
    Ok((retention[n] / retention[m]).clamp(0.0, 1.0))
}

pub fn bitrate_fluctuation(q: f64, q_prev: Option<f64>) -> f64 {
    q_prev.map_or(0.0, |p| (q - p).abs())
}

/// Last `HISTORY_LEN` throughputs, oldest first, zero-padded at the front.
pub fn throughput_history(state: &SessionState) -> [f64; HISTORY_LEN] {
    let log = state.throughput_log();
    let mut out = [0.0; HISTORY_LEN];
    let take = log.len().min(HISTORY_LEN);
    out[HISTORY_LEN - take..].copy_from_slice(&log[log.len() - take..]);
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotFeatures {
    pub retention: f64,
    pub buffer_s: f64,
    pub next_size_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmObservation {
    pub throughput: [f64; HISTORY_LEN],
    pub slots: Vec<SlotFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaObservation {
    pub throughput: [f64; HISTORY_LEN],
    /// Queue position the bitrate is being chosen for.
    pub queue_pos: usize,
    pub retention: f64,
    pub buffer_s: f64,
    pub next_size_mb: f64,
    pub last_rebuffer_s: f64,
    pub last_bitrate_kbps: Option<f64>,
    pub fluctuation_kbps: f64,
    pub ladder_max_kbps: f64,
}

fn slot_features(j: usize, v: &VideoView<'_>) -> SlotFeatures {
    if v.fully_downloaded() {
        return SlotFeatures {
            buffer_s: v.buffer_seconds,
            ..SlotFeatures::default()
        };
    }
    let m = if j == 0 { v.play_chunk } else { 0 };
    let n = v.next_chunk;
    SlotFeatures {
        retention: conditional_retention(v.asset.retention(), m, n).unwrap_or(0.0),
        buffer_s: v.buffer_seconds,
        next_size_mb: v.asset.mean_size(n),
    }
}

pub fn build_bm_observation(state: &SessionState) -> BmObservation {
    let q = state.config().queue_length;
    let mut slots = vec![SlotFeatures::default(); q];
    for (j, v) in state.videos().enumerate().take(q) {
        slots[j] = slot_features(j, &v);
    }
    BmObservation {
        throughput: throughput_history(state),
        slots,
    }
}

pub fn build_ba_observation(
    state: &SessionState,
    queue_pos: usize,
) -> Result<BaObservation, FeatureError> {
    if !state.valid_actions().can_download(queue_pos) {
        return Err(FeatureError::Masked(queue_pos));
    }
    let v = state.video(queue_pos).ok_or(FeatureError::Masked(queue_pos))?;
    let ladder = &state.config().ladder_kbps;
    let f = slot_features(queue_pos, &v);
    let last = v.last_level.map(|l| ladder[l]);
    let prev = v.prev_level.map(|l| ladder[l]);
    Ok(BaObservation {
        throughput: throughput_history(state),
        queue_pos,
        retention: f.retention,
        buffer_s: f.buffer_s,
        next_size_mb: f.next_size_mb,
        last_rebuffer_s: v.last_rebuffer,
        last_bitrate_kbps: last,
        fluctuation_kbps: last.map_or(0.0, |q| bitrate_fluctuation(q, prev)),
        ladder_max_kbps: ladder[ladder.len() - 1],
    })
}

/// Bitrate-agent view of the first fetchable video. The critic reads it on
/// every step so its value does not depend on which video the policy picks.
pub fn critic_ba_observation(state: &SessionState) -> Option<BaObservation> {
    let mask = state.valid_actions();
    (0..mask.queue_length())
        .find(|&j| mask.can_download(j))
        .and_then(|j| build_ba_observation(state, j).ok())
}

pub fn bm_input_width(queue_length: usize) -> usize {
    HISTORY_LEN + 3 * queue_length
}

pub const BA_INPUT_WIDTH: usize = HISTORY_LEN + 6;

impl BmObservation {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(bm_input_width(self.slots.len()));
        out.extend(self.throughput.iter().map(|b| b / THROUGHPUT_SCALE));
        for s in &self.slots {
            out.push(s.retention);
            out.push(s.buffer_s / BUFFER_SCALE);
            out.push(s.next_size_mb / SIZE_SCALE);
        }
        out
    }
}

impl BaObservation {
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(BA_INPUT_WIDTH);
        out.extend(self.throughput.iter().map(|b| b / THROUGHPUT_SCALE));
        out.extend([
            self.retention,
            self.buffer_s / BUFFER_SCALE,
            self.next_size_mb / SIZE_SCALE,
            self.last_rebuffer_s / REBUFFER_SCALE,
            self.last_bitrate_kbps.unwrap_or(0.0) / self.ladder_max_kbps,
            self.fluctuation_kbps / self.ladder_max_kbps,
        ]);
        out
    }
}
