//! Rule-based controllers and the horizon search behind them.
//!
//! `mpc_search` and `pdas_expert` share one depth-first search over
//! `(video, level)` download atoms plus sleep. They differ in where bandwidth
//! comes from (a robust prediction vs. the session's own trace) and in how
//! they value a chunk (assume every chunk is watched vs. weight it by its
//! conditional retention).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{build_bm_observation, BmObservation};
use crate::scoring::{outcome_reward, reward_terms, ScoreCoefficients};
use crate::sim::{
    Action, ActionMask, Bandwidth, ConstantBandwidth, Hooks, Playback, Policy, PolicyError,
    ScrollPlan, SessionConfig, SessionState, SimError,
};
use crate::traces::{BandwidthSample, NetworkTrace, VideoAsset, CHUNK_DURATION};

/// Samples the throughput predictor looks back over.
pub const PREDICTOR_WINDOW: usize = 5;
/// Prediction used before any throughput has been measured (Mbps).
pub const PREDICTOR_FLOOR: f64 = 0.1;
/// Slack on the pruning bound so rounding never cuts the optimal branch.
const PRUNE_SLACK: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Fixed preload

#[derive(Debug, Clone)]
pub struct FixedPreload {
    /// Playing-video buffer (seconds) to reach before prefetching others.
    pub threshold_s: f64,
}

impl Default for FixedPreload {
    fn default() -> Self {
        FixedPreload { threshold_s: 5.0 }
    }
}

/// Playing video first up to the threshold, then the least-buffered
/// recommended video, always at the lowest bitrate; sleep when nothing is open.
pub fn fixed_preload_decision(obs: &BmObservation, mask: &ActionMask, threshold_s: f64) -> Action {
    let low = |video| Action::Download { video, level: 0 };
    if mask.can_download(0) && obs.slots[0].buffer_s < threshold_s {
        return low(0);
    }
    (1..obs.slots.len())
        .filter(|&j| mask.can_download(j))
        .min_by(|&a, &b| obs.slots[a].buffer_s.total_cmp(&obs.slots[b].buffer_s))
        .map_or(Action::Sleep, low)
}

impl Policy for FixedPreload {
    fn name(&self) -> &str {
        "fixed-preload"
    }

    fn decide(&mut self, state: &SessionState, mask: &ActionMask) -> Result<Action, PolicyError> {
        Ok(fixed_preload_decision(
            &build_bm_observation(state),
            mask,
            self.threshold_s,
        ))
    }
}

// ---------------------------------------------------------------------------
// Throughput prediction

pub fn harmonic_mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.len() as f64 / xs.iter().map(|x| 1.0 / x).sum::<f64>())
}

fn window_mean(log: &[f64]) -> Option<f64> {
    let recent: Vec<f64> = log
        .iter()
        .rev()
        .filter(|&&x| x > 0.0)
        .take(PREDICTOR_WINDOW)
        .copied()
        .collect();
    harmonic_mean(&recent)
}

/// Harmonic mean of the last few nonzero samples, discounted by the worst
/// relative error the same predictor made on the last few samples.
pub fn robust_throughput_prediction(log: &[f64]) -> f64 {
    let Some(mean) = window_mean(log) else {
        return PREDICTOR_FLOOR;
    };
    let first = log.len().saturating_sub(PREDICTOR_WINDOW);
    let max_err = (first.max(1)..log.len())
        .filter(|&i| log[i] > 0.0)
        .filter_map(|i| window_mean(&log[..i]).map(|p| (p - log[i]).abs() / log[i]))
        .fold(0.0, f64::max);
    mean / (1.0 + max_err)
}

// ---------------------------------------------------------------------------
// Horizon search

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Plan against the session's true trace instead of a prediction.
    pub use_oracle_throughput: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 5,
            use_oracle_throughput: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub action: Action,
    /// Best planned value (reward sum minus terminal stall cost).
    pub value: f64,
    /// Simulated steps, a machine-independent cost measure.
    pub nodes: u64,
}

/// Leave point the planner assumes: the first chunk after `m` whose
/// conditional retention drops below one half.
pub fn median_leave_point(retention: &[f64], m: usize) -> usize {
    let base = retention[m.min(retention.len() - 1)];
    (m + 1..retention.len())
        .find(|&n| base <= 0.0 || retention[n] / base < 0.5)
        .unwrap_or(retention.len())
}

struct ModelHooks<'a> {
    playlist: &'a [Arc<VideoAsset>],
    weighted: bool,
}

impl Hooks for ModelHooks<'_> {
    fn asset(&self, video: usize) -> &VideoAsset {
        &self.playlist[video]
    }

    fn scroll_point(&mut self, video: usize) -> u32 {
        model_leave_point(&self.playlist[video], self.weighted) as u32
    }
}

/// Leaf cost for the horizon search: a lower bound on the stall still to
/// come, assuming everything left to watch is fetched back to back at the
/// lowest bitrate from the leaf onward.
pub(crate) struct LeafModel {
    /// Per playlist video: prefix sums of lowest-rung chunk sizes.
    prefix_mb: Vec<Vec<f64>>,
    /// Suffix sums over playlist positions of the planned-to-watch content.
    future_mb: Vec<f64>,
    future_s: Vec<f64>,
}

impl LeafModel {
    pub fn new(playlist: &[Arc<VideoAsset>], weighted: bool) -> Self {
        let prefix_mb: Vec<Vec<f64>> = playlist
            .iter()
            .map(|v| {
                let mut acc = vec![0.0];
                for row in v.chunk_sizes() {
                    acc.push(acc[acc.len() - 1] + row[0]);
                }
                acc
            })
            .collect();
        let mut future_mb = vec![0.0; playlist.len() + 1];
        let mut future_s = vec![0.0; playlist.len() + 1];
        for (i, v) in playlist.iter().enumerate().rev() {
            let leave = model_leave_point(v, weighted);
            future_mb[i] = future_mb[i + 1] + prefix_mb[i][leave];
            future_s[i] = future_s[i + 1] + leave as f64 * CHUNK_DURATION;
        }
        LeafModel {
            prefix_mb,
            future_mb,
            future_s,
        }
    }

    pub fn cost(
        &self,
        pb: &Playback,
        playlist: &[Arc<VideoAsset>],
        bw: &dyn Bandwidth,
        coeffs: &ScoreCoefficients,
    ) -> f64 {
        if pb.done {
            return 0.0;
        }
        let Some(stall) = pb.next_stall() else {
            return 0.0;
        };
        // The next missing chunk cannot arrive sooner than a direct fetch.
        let next = bw.download_time(playlist[stall.video].size(stall.chunk as usize, 0), pb.clock);
        let local = next - stall.after;

        // Nor can the whole remainder, and playback ends one chunk after it.
        let mut missing_mb = self.future_mb[pb.next_video.min(self.future_mb.len() - 1)];
        let mut content_s = self.future_s[pb.next_video.min(self.future_s.len() - 1)];
        for (i, s) in pb.slots.iter().enumerate() {
            let end = s.scroll_chunk.max(s.play_chunk) as usize;
            let from = (s.next_download as usize).min(end);
            missing_mb += self.prefix_mb[s.video][end] - self.prefix_mb[s.video][from];
            content_s += (end - s.play_chunk as usize) as f64 * CHUNK_DURATION;
            if i == 0 {
                content_s -= s.play_offset;
            }
        }
        let global = if missing_mb > 0.0 {
            bw.download_time(missing_mb, pb.clock) + CHUNK_DURATION - content_s
        } else {
            0.0
        };
        coeffs.mu * local.max(global).max(0.0)
    }
}

fn model_leave_point(asset: &VideoAsset, weighted: bool) -> usize {
    if weighted {
        median_leave_point(asset.retention(), 0)
    } else {
        asset.num_chunks()
    }
}

/// Largest reward any single step can earn in this playlist.
fn gain_bound(playlist: &[Arc<VideoAsset>], ladder: &[f64], coeffs: &ScoreCoefficients) -> f64 {
    let mut best = 0.0f64;
    for (level, &rate) in ladder.iter().enumerate() {
        let smallest = playlist
            .iter()
            .flat_map(|v| v.chunk_sizes().iter().map(move |row| row[level]))
            .fold(f64::INFINITY, f64::min);
        if smallest.is_finite() {
            best = best.max(rate - coeffs.nu * smallest);
        }
    }
    best
}

struct Planner<'a> {
    playlist: &'a [Arc<VideoAsset>],
    ladder: &'a [f64],
    bw: &'a dyn Bandwidth,
    coeffs: ScoreCoefficients,
    weighted: bool,
    max_prefetch: usize,
    sleep: f64,
    gain: f64,
    leaf: LeafModel,
    prune: bool,
    nodes: u64,
}

impl Planner<'_> {
    fn atoms(&self, pb: &Playback, out: &mut Vec<Action>) {
        out.clear();
        for level in 0..self.ladder.len() {
            for video in 0..pb.slots.len() {
                if pb.download_allowed(video, self.max_prefetch) {
                    out.push(Action::Download { video, level });
                }
            }
        }
        out.push(Action::Sleep);
    }

    fn apply(&mut self, pb: &Playback, action: Action) -> (Playback, f64) {
        self.nodes += 1;
        let mut child = pb.clone();
        let mut hooks = ModelHooks {
            playlist: self.playlist,
            weighted: self.weighted,
        };
        let reward = match action {
            Action::Sleep => {
                let (_, stall) = child.sleep(self.sleep, &mut hooks);
                reward_terms(0.0, 0.0, 0.0, stall, 0.0, &self.coeffs)
            }
            Action::Download { video, level } => {
                let r = child.download(video, level, self.ladder, self.bw, &mut hooks);
                let weight = if self.weighted { r.retention } else { 1.0 };
                reward_terms(
                    weight,
                    self.ladder[level],
                    r.fluctuation,
                    r.rebuffer,
                    r.size_mb,
                    &self.coeffs,
                )
            }
        };
        (child, reward)
    }

    fn leaf(&self, pb: &Playback, acc: f64) -> f64 {
        acc - self.leaf.cost(pb, self.playlist, self.bw, &self.coeffs)
    }

    /// Best completion value of `pb` with `depth` steps left, or `-inf` when
    /// the subtree cannot beat `incumbent`.
    fn dfs(&mut self, pb: &Playback, depth: usize, acc: f64, incumbent: &mut f64) -> f64 {
        if depth == 0 || pb.done {
            let v = self.leaf(pb, acc);
            if v > *incumbent {
                *incumbent = v;
            }
            return v;
        }
        if self.prune && acc + depth as f64 * self.gain + PRUNE_SLACK < *incumbent {
            return f64::NEG_INFINITY;
        }
        let mut atoms = Vec::with_capacity(self.ladder.len() * pb.slots.len() + 1);
        self.atoms(pb, &mut atoms);
        let mut best = f64::NEG_INFINITY;
        for a in atoms {
            let (child, r) = self.apply(pb, a);
            let v = self.dfs(&child, depth - 1, acc + r, incumbent);
            if v > best {
                best = v;
            }
        }
        best
    }
}

/// Depth-first search over every action sequence of length `horizon`;
/// returns the first action of the best one. Ties go to the lower bitrate,
/// then the lower queue position, with sleep last.
pub fn horizon_search(
    state: &SessionState,
    bw: &dyn Bandwidth,
    horizon: usize,
    retention_weighted: bool,
    coeffs: &ScoreCoefficients,
) -> SearchResult {
    search(state, bw, horizon, retention_weighted, coeffs, true)
}

fn search(
    state: &SessionState,
    bw: &dyn Bandwidth,
    horizon: usize,
    retention_weighted: bool,
    coeffs: &ScoreCoefficients,
    prune: bool,
) -> SearchResult {
    let cfg = state.config();
    let mut root = state.playback.clone();
    for (j, slot) in root.slots.iter_mut().enumerate() {
        let asset = &state.playlist()[slot.video];
        slot.scroll_chunk = if retention_weighted {
            let m = if j == 0 { slot.play_chunk as usize } else { 0 };
            median_leave_point(asset.retention(), m) as u32
        } else {
            slot.num_chunks
        };
    }
    let mut planner = Planner {
        playlist: state.playlist(),
        ladder: state.ladder_mbps(),
        bw,
        coeffs: *coeffs,
        weighted: retention_weighted,
        max_prefetch: cfg.max_prefetch,
        sleep: cfg.sleep_duration,
        gain: gain_bound(state.playlist(), state.ladder_mbps(), coeffs),
        leaf: LeafModel::new(state.playlist(), retention_weighted),
        prune,
        nodes: 0,
    };
    if horizon == 0 || root.done {
        return SearchResult {
            action: Action::Sleep,
            value: planner.leaf(&root, 0.0),
            nodes: 0,
        };
    }
    let mut atoms = Vec::new();
    planner.atoms(&root, &mut atoms);
    let mut incumbent = f64::NEG_INFINITY;
    let mut best = (Action::Sleep, f64::NEG_INFINITY);
    for a in atoms {
        let (child, r) = planner.apply(&root, a);
        let v = planner.dfs(&child, horizon - 1, r, &mut incumbent);
        if v > best.1 {
            best = (a, v);
        }
    }
    SearchResult {
        action: best.0,
        value: best.1,
        nodes: planner.nodes,
    }
}

/// Robust-MPC: plan against a discounted harmonic-mean throughput prediction,
/// assuming the viewer watches every chunk.
pub fn mpc_search(state: &SessionState, horizon: usize, coeffs: &ScoreCoefficients) -> SearchResult {
    let bw = ConstantBandwidth(robust_throughput_prediction(state.throughput_log()));
    horizon_search(state, &bw, horizon, false, coeffs)
}

/// Retention-weighted search against the session's real future bandwidth.
pub fn pdas_expert(state: &SessionState, horizon: usize, coeffs: &ScoreCoefficients) -> SearchResult {
    horizon_search(state, state.trace(), horizon, true, coeffs)
}

#[derive(Debug, Clone)]
pub struct MpcPolicy {
    pub config: MpcConfig,
    pub coeffs: ScoreCoefficients,
    pub nodes: u64,
}

impl MpcPolicy {
    pub fn new(config: MpcConfig, coeffs: ScoreCoefficients) -> Self {
        MpcPolicy {
            config,
            coeffs,
            nodes: 0,
        }
    }
}

impl Policy for MpcPolicy {
    fn name(&self) -> &str {
        "mpc"
    }

    fn decide(&mut self, state: &SessionState, _mask: &ActionMask) -> Result<Action, PolicyError> {
        let r = if self.config.use_oracle_throughput {
            horizon_search(state, state.trace(), self.config.horizon, false, &self.coeffs)
        } else {
            mpc_search(state, self.config.horizon, &self.coeffs)
        };
        self.nodes += r.nodes;
        Ok(r.action)
    }
}

#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub horizon: usize,
    pub coeffs: ScoreCoefficients,
    pub nodes: u64,
}

impl ExpertPolicy {
    pub fn new(horizon: usize, coeffs: ScoreCoefficients) -> Self {
        ExpertPolicy {
            horizon,
            coeffs,
            nodes: 0,
        }
    }
}

impl Policy for ExpertPolicy {
    fn name(&self) -> &str {
        "pdas-expert"
    }

    fn decide(&mut self, state: &SessionState, mask: &ActionMask) -> Result<Action, PolicyError> {
        let r = pdas_expert(state, self.horizon, &self.coeffs);
        self.nodes += r.nodes;
        // Waiting out a stall never brings the next chunk sooner, but the
        // search's leaf bound can make it look cheaper than fetching.
        if r.action == Action::Sleep && stalled_and_fetchable(state, mask) {
            return Ok(Action::Download { video: 0, level: 0 });
        }
        Ok(r.action)
    }
}

/// The playing video has nothing buffered and its next chunk may be fetched.
pub fn stalled_and_fetchable(state: &SessionState, mask: &ActionMask) -> bool {
    mask.can_download(0) && state.video(0).is_some_and(|v| v.buffer_seconds <= 0.0)
}

// ---------------------------------------------------------------------------
// Exhaustive oracle for tiny instances

/// Largest number of action sequences the oracle will enumerate.
pub const ORACLE_SEQUENCE_CAP: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("instance needs up to {0} action sequences, above the cap")]
    TooLarge(u128),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// A session small enough to enumerate: leave points are fixed and the
/// retention curves agree with them.
#[derive(Debug, Clone)]
pub struct MicroInstance {
    pub videos: Vec<Arc<VideoAsset>>,
    pub trace: Arc<NetworkTrace>,
    pub scroll_points: Vec<usize>,
    pub config: SessionConfig,
    /// Number of decisions to plan over.
    pub depth: usize,
}

impl MicroInstance {
    pub fn start(&self) -> Result<SessionState, SimError> {
        SessionState::with_scrolls(
            self.videos.clone(),
            self.trace.clone(),
            &self.config,
            ScrollPlan::Fixed(self.scroll_points.clone()),
            0,
        )
    }

    /// Retention of 1 before the leave point and 0 from it on.
    pub fn step_retention(chunks: usize, leave: usize) -> Vec<f64> {
        (0..chunks).map(|m| if m < leave { 1.0 } else { 0.0 }).collect()
    }

    /// Up to two videos of up to three chunks, two bitrates, a short
    /// piecewise-constant trace, and a depth that keeps enumeration small.
    pub fn random(rng: &mut impl Rng) -> Self {
        let low = rng.gen_range(300.0..1500.0f64).round();
        let high = (low * rng.gen_range(1.3..3.0f64)).round();
        let ladder_kbps = vec![low, high];
        let n_videos = rng.gen_range(1..=2usize);
        let mut videos = Vec::new();
        let mut scroll_points = Vec::new();
        for i in 0..n_videos {
            let chunks = rng.gen_range(1..=3usize);
            let sizes = (0..chunks)
                .map(|_| {
                    let jitter = rng.gen_range(0.8..1.2);
                    ladder_kbps.iter().map(|k| k / 8000.0 * jitter).collect()
                })
                .collect();
            let leave = rng.gen_range(1..=chunks);
            let asset = VideoAsset::new(
                format!("micro_{i}"),
                sizes,
                Self::step_retention(chunks, leave),
            )
            .expect("valid micro asset");
            videos.push(Arc::new(asset));
            scroll_points.push(leave);
        }
        let mut t = 0.0;
        let samples = (0..rng.gen_range(2..=4))
            .map(|_| {
                let s = BandwidthSample {
                    time: t,
                    mbps: (rng.gen_range(0.3..4.0f64) * 1000.0).round() / 1000.0,
                };
                t += rng.gen_range(0.5..3.0);
                s
            })
            .collect();
        let trace = NetworkTrace::new("micro", samples).expect("valid micro trace");
        let config = SessionConfig {
            queue_length: n_videos,
            ladder_kbps,
            videos_per_session: n_videos,
            ..SessionConfig::default()
        };
        MicroInstance {
            videos,
            trace: Arc::new(trace),
            scroll_points,
            config,
            depth: rng.gen_range(3..=7),
        }
    }

    /// Plays the expert receding-horizon (horizon shrinking to the depth
    /// left) on the real simulator; returns the realized reward total minus
    /// the leaf cost if the session outlives the depth.
    pub fn expert_realized_value(&self, coeffs: &ScoreCoefficients) -> Result<f64, SimError> {
        let mut state = self.start()?;
        let mut total = 0.0;
        for left in (1..=self.depth).rev() {
            if state.is_done() {
                break;
            }
            let action = pdas_expert(&state, left, coeffs).action;
            let out = state.step(action)?;
            total += outcome_reward(&out, coeffs);
        }
        let leaf = LeafModel::new(state.playlist(), true);
        Ok(total - leaf.cost(&state.playback, state.playlist(), state.trace(), coeffs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    pub action: Action,
    /// Best value reachable after each valid first action, in search order.
    pub first_actions: Vec<(Action, f64)>,
}

/// Runs every action sequence of length `depth` through the real simulator
/// and returns the best total reward (true watch indicators, same leaf cost
/// as the planners).
pub fn brute_force_oracle(
    inst: &MicroInstance,
    coeffs: &ScoreCoefficients,
) -> Result<OracleResult, OracleError> {
    if inst.videos.is_empty() || inst.depth == 0 {
        return Ok(OracleResult {
            value: 0.0,
            action: Action::Sleep,
            first_actions: Vec::new(),
        });
    }
    let branching = (inst.config.queue_length * inst.config.num_levels() + 1) as u128;
    let total = branching.checked_pow(inst.depth as u32).unwrap_or(u128::MAX);
    if total > ORACLE_SEQUENCE_CAP as u128 {
        return Err(OracleError::TooLarge(total));
    }
    let state = inst.start()?;
    let leaf = LeafModel::new(state.playlist(), true);
    let mut first_actions = Vec::new();
    let mut best = (Action::Sleep, f64::NEG_INFINITY);
    if state.is_done() {
        return Ok(OracleResult {
            value: 0.0,
            action: Action::Sleep,
            first_actions,
        });
    }
    for a in state.valid_actions().valid_actions() {
        let mut next = state.clone();
        let out = next.step(a)?;
        // Sum from the root outward, in the same order as the planner.
        let v = sequence_best(&next, inst.depth - 1, outcome_reward(&out, coeffs), &leaf, coeffs);
        first_actions.push((a, v));
        if v > best.1 {
            best = (a, v);
        }
    }
    Ok(OracleResult {
        value: best.1,
        action: best.0,
        first_actions,
    })
}

fn sequence_best(
    state: &SessionState,
    depth: usize,
    acc: f64,
    leaf: &LeafModel,
    coeffs: &ScoreCoefficients,
) -> f64 {
    if depth == 0 || state.is_done() {
        return acc - leaf.cost(&state.playback, state.playlist(), state.trace(), coeffs);
    }
    let mut best = f64::NEG_INFINITY;
    for a in state.valid_actions().valid_actions() {
        let mut next = state.clone();
        let out = next.step(a).expect("masked action");
        best = best.max(sequence_best(&next, depth - 1, acc + outcome_reward(&out, coeffs), leaf, coeffs));
    }
    best
}
