use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Action, ActionMask, SessionConfig, SessionState, SimError, StepOutcome};
use crate::derive_seed;
use crate::features::{build_ba_observation, build_bm_observation, BaObservation, BmObservation};
use crate::scoring::{utility_score, ScoreBreakdown, ScoreCoefficients};
use crate::traces::{NetworkTrace, TraceCorpus, VideoAsset};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("policy returned masked action {0:?}")]
    Masked(Action),
    #[error("{0}")]
    Other(String),
}

pub trait Policy {
    fn name(&self) -> &str;
    fn decide(&mut self, state: &SessionState, mask: &ActionMask) -> Result<Action, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn decide(&mut self, state: &SessionState, mask: &ActionMask) -> Result<Action, PolicyError> {
        (**self).decide(state, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub bm_obs: BmObservation,
    /// Present on download steps: what the bitrate agent saw.
    pub ba_obs: Option<BaObservation>,
    pub bm_mask: Vec<bool>,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub complete: bool,
}

impl Trajectory {
    /// One line per step: clock, action, bitrate, smoothness, stall, size, waste.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# schema: sabr-trajectory/1\nclock,action,video,level,bitrate_mbps,smoothness_mbps,rebuffer_s,size_mb,wasted_mb\n",
        );
        for s in &self.steps {
            let o = &s.outcome;
            let (kind, video, level, r, sm, bw) = match &o.downloaded {
                Some(d) => (
                    "download",
                    d.video.to_string(),
                    d.level.to_string(),
                    d.bitrate_mbps,
                    d.smoothness,
                    d.size_mb,
                ),
                None => ("sleep", String::new(), String::new(), 0.0, 0.0, 0.0),
            };
            let _ = writeln!(
                out,
                "{:.6},{kind},{video},{level},{r:.6},{sm:.6},{:.6},{bw:.6},{:.6}",
                o.clock,
                o.rebuffer,
                o.wasted_mb()
            );
        }
        out
    }
}

/// Plays one session to the end. The policy sees the full state but must
/// respect the mask it is handed.
pub fn run_session(
    policy: &mut dyn Policy,
    playlist: Vec<Arc<VideoAsset>>,
    trace: Arc<NetworkTrace>,
    cfg: &SessionConfig,
    seed: u64,
    coeffs: &ScoreCoefficients,
) -> Result<(Trajectory, ScoreBreakdown), PolicyError> {
    let state = SessionState::new(playlist, trace, cfg, seed)?;
    run_from(policy, state, coeffs)
}

pub(crate) fn run_from(
    policy: &mut dyn Policy,
    mut state: SessionState,
    coeffs: &ScoreCoefficients,
) -> Result<(Trajectory, ScoreBreakdown), PolicyError> {
    let mut traj = Trajectory::default();
    while !state.is_done() {
        let mask = state.valid_actions();
        let action = policy.decide(&state, &mask)?;
        if !mask.allows(action) {
            return Err(PolicyError::Masked(action));
        }
        let bm_obs = build_bm_observation(&state);
        let ba_obs = match action {
            Action::Download { video, .. } => Some(
                build_ba_observation(&state, video).map_err(|e| PolicyError::Other(e.to_string()))?,
            ),
            Action::Sleep => None,
        };
        let outcome = state.step(action)?;
        traj.steps.push(TrajectoryStep {
            bm_obs,
            ba_obs,
            bm_mask: mask.bm_mask(),
            outcome,
        });
    }
    traj.complete = true;
    let score = utility_score(&traj, coeffs).expect("completed trajectory");
    Ok((traj, score))
}

/// `len` videos drawn from `videos` in a seeded shuffled order, reshuffling
/// whenever the pool is exhausted.
pub fn make_playlist(videos: &[Arc<VideoAsset>], len: usize, seed: u64) -> Vec<Arc<VideoAsset>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    while out.len() < len && !videos.is_empty() {
        order.shuffle(&mut rng);
        out.extend(order.iter().take(len - out.len()).map(|&i| videos[i].clone()));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub id: usize,
    pub trace: Arc<NetworkTrace>,
    pub playlist: Vec<Arc<VideoAsset>>,
    pub seed: u64,
}

impl SessionSpec {
    pub fn start(&self, cfg: &SessionConfig) -> Result<SessionState, SimError> {
        SessionState::new(self.playlist.clone(), self.trace.clone(), cfg, self.seed)
    }

    pub fn run(
        &self,
        policy: &mut dyn Policy,
        cfg: &SessionConfig,
        coeffs: &ScoreCoefficients,
    ) -> Result<(Trajectory, ScoreBreakdown), PolicyError> {
        run_from(policy, self.start(cfg)?, coeffs)
    }
}

/// `n` sessions over `corpus`: traces are visited in a seeded shuffled cycle,
/// each session gets its own playlist and scroll seed.
pub fn session_specs(
    corpus: &TraceCorpus,
    cfg: &SessionConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<SessionSpec>, SimError> {
    if n > 0 && (corpus.network_traces.is_empty() || corpus.videos.is_empty()) {
        return Err(SimError::Config("corpus has no traces or no videos".into()));
    }
    let per_session = cfg.videos_per_session.max(cfg.queue_length);
    let mut order: Vec<usize> = (0..corpus.network_traces.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut specs = Vec::with_capacity(n);
    for id in 0..n {
        let k = id % order.len().max(1);
        if k == 0 {
            order.shuffle(&mut rng);
        }
        let session_seed = derive_seed(seed, 1 + id as u64);
        specs.push(SessionSpec {
            id,
            trace: corpus.network_traces[order[k]].clone(),
            playlist: make_playlist(&corpus.videos, per_session, derive_seed(session_seed, 0)),
            seed: derive_seed(session_seed, 1),
        });
    }
    Ok(specs)
}
