//! Discrete-event simulation of one short-video viewing session.
//!
//! Downloads and playback run concurrently in simulated time. The playing
//! video (queue position 0) stalls only when its next chunk is missing. When
//! the play head reaches a video's leave point the viewer scrolls: the video
//! is dropped, its unplayed chunks become waste, the queue shifts forward and
//! the next playlist entry is appended with a freshly drawn leave point.

mod playback;
mod run;

use std::sync::Arc;

use arrayvec::ArrayVec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::traces::{NetworkTrace, TraceError, VideoAsset};

pub use playback::MAX_QUEUE;
pub(crate) use playback::{Hooks, Playback, Slot};
pub use run::{
    make_playlist, run_session, session_specs, Policy, PolicyError, SessionSpec, Trajectory,
    TrajectoryStep,
};

/// Throughput samples kept for observations.
pub const HISTORY_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid session configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("action {0:?} is masked in the current state")]
    InvalidAction(Action),
    #[error("session already finished")]
    SessionDone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub queue_length: usize,
    pub ladder_kbps: Vec<f64>,
    /// Seconds a sleep action suspends downloading.
    pub sleep_duration: f64,
    /// Chunk cap for each recommended (not playing) video.
    pub max_prefetch: usize,
    pub videos_per_session: usize,
    pub min_trace_duration: f64,
    /// Sessions are cut off once the clock passes this many seconds.
    pub max_session_time: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            queue_length: 5,
            ladder_kbps: vec![750.0, 1200.0, 1850.0],
            sleep_duration: 0.2,
            max_prefetch: 4,
            videos_per_session: 10,
            min_trace_duration: 1.0,
            max_session_time: 1800.0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.queue_length == 0 || self.queue_length > MAX_QUEUE {
            return bad(format!(
                "queue_length must lie in 1..={MAX_QUEUE}, got {}",
                self.queue_length
            ));
        }
        if self.ladder_kbps.is_empty()
            || self.ladder_kbps.len() > u8::MAX as usize
            || self.ladder_kbps.iter().any(|b| !(*b > 0.0))
            || self.ladder_kbps.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("ladder_kbps must be positive and strictly increasing".into());
        }
        if !(self.sleep_duration > 0.0) {
            return bad("sleep_duration must be positive".into());
        }
        if !(self.max_session_time > 0.0) {
            return bad("max_session_time must be positive".into());
        }
        Ok(())
    }

    pub fn ladder_mbps(&self) -> Vec<f64> {
        self.ladder_kbps.iter().map(|k| k / 1000.0).collect()
    }

    pub fn num_levels(&self) -> usize {
        self.ladder_kbps.len()
    }
}

/// Anything that can say how long a transfer takes from a given start time.
pub trait Bandwidth {
    fn download_time(&self, size_mb: f64, start: f64) -> f64;
}

impl Bandwidth for NetworkTrace {
    fn download_time(&self, size_mb: f64, start: f64) -> f64 {
        download_time(size_mb, self, start)
    }
}

/// Fixed-rate link, used by planners that work from a throughput prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantBandwidth(pub f64);

impl Bandwidth for ConstantBandwidth {
    fn download_time(&self, size_mb: f64, _start: f64) -> f64 {
        size_mb * 8.0 / self.0
    }
}

/// Smallest `d` such that the trace delivers `size_mb * 8` megabits over
/// `[start, start + d]`. The trace repeats past its end.
pub fn download_time(size_mb: f64, trace: &NetworkTrace, start: f64) -> f64 {
    let mut need = size_mb * 8.0;
    if need <= 0.0 {
        return 0.0;
    }
    let (mut idx, into) = trace.locate(start);
    let samples = trace.samples();
    let mut elapsed = 0.0;

    // Partial first segment.
    let mut seg_left = trace.segment_len(idx) - into;
    loop {
        let rate = samples[idx].mbps;
        let avail = seg_left * rate;
        if avail >= need {
            return elapsed + need / rate;
        }
        need -= avail;
        elapsed += seg_left;
        idx = (idx + 1) % samples.len();
        seg_left = trace.segment_len(idx);
        if idx == 0 && need > trace.cycle_megabits() {
            let cycles = (need / trace.cycle_megabits()).floor();
            need -= cycles * trace.cycle_megabits();
            elapsed += cycles * trace.period();
        }
    }
}

/// First chunk index the viewer will not watch, drawn so that the viewer
/// watches chunk `m` with probability `retention[m]`.
pub fn sample_scroll_chunk(retention: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    retention.iter().take_while(|&&p| p > u).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Action {
    Download { video: usize, level: usize },
    Sleep,
}

impl Action {
    /// Index into the buffer-management action vector: videos first, sleep last.
    pub fn bm_index(self, queue_length: usize) -> usize {
        match self {
            Action::Download { video, .. } => video,
            Action::Sleep => queue_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionMask {
    downloads: ArrayVec<bool, MAX_QUEUE>,
    levels: usize,
}

impl ActionMask {
    pub fn can_download(&self, video: usize) -> bool {
        self.downloads.get(video).copied().unwrap_or(false)
    }

    pub fn allows(&self, action: Action) -> bool {
        match action {
            Action::Sleep => true,
            Action::Download { video, level } => level < self.levels && self.can_download(video),
        }
    }

    pub fn queue_length(&self) -> usize {
        self.downloads.len()
    }

    pub fn num_levels(&self) -> usize {
        self.levels
    }

    /// `queue_length + 1` flags, sleep last.
    pub fn bm_mask(&self) -> Vec<bool> {
        self.downloads.iter().copied().chain([true]).collect()
    }

    pub fn ba_mask(&self) -> Vec<bool> {
        vec![true; self.levels]
    }

    pub fn valid_actions(&self) -> Vec<Action> {
        let mut out = Vec::new();
        for level in 0..self.levels {
            for (video, &ok) in self.downloads.iter().enumerate() {
                if ok {
                    out.push(Action::Download { video, level });
                }
            }
        }
        out.push(Action::Sleep);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownloadedChunk {
    /// Playlist position of the video.
    pub video: usize,
    pub chunk: usize,
    pub level: usize,
    pub bitrate_mbps: f64,
    pub size_mb: f64,
    pub duration: f64,
    /// |R_n - R_{n-1}| against the previous chunk of the same video, Mbps.
    pub smoothness: f64,
    /// Conditional retention of this chunk when it was requested.
    pub retention: f64,
    /// Whether the viewer will reach this chunk.
    pub will_watch: bool,
    pub delivered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlayedChunk {
    pub video: usize,
    pub chunk: usize,
    pub level: usize,
    pub bitrate_mbps: f64,
    /// |R_m - R_{m-1}| against the previously played chunk of the same video.
    pub smoothness: f64,
    pub size_mb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScrollEvent {
    pub video: usize,
    pub at_chunk: usize,
    pub wasted_chunks: usize,
    pub wasted_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub action: Action,
    /// Clock after the step.
    pub clock: f64,
    pub duration: f64,
    pub downloaded: Option<DownloadedChunk>,
    pub rebuffer: f64,
    pub scrolls: Vec<ScrollEvent>,
    pub played: Vec<PlayedChunk>,
    pub session_done: bool,
}

impl StepOutcome {
    /// Megabytes thrown away during this step: cleared buffers plus any chunk
    /// that arrived after its video had already left the queue.
    pub fn wasted_mb(&self) -> f64 {
        let orphan = self
            .downloaded
            .filter(|d| !d.delivered)
            .map_or(0.0, |d| d.size_mb);
        self.scrolls.iter().map(|s| s.wasted_mb).sum::<f64>() + orphan
    }
}

/// Running byte totals; `downloaded = watched + wasted + buffered` holds
/// after every step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub downloaded_mb: f64,
    pub watched_mb: f64,
    pub wasted_mb: f64,
}

/// How leave points are chosen for videos entering the queue.
#[derive(Debug, Clone, PartialEq)]
pub enum ScrollPlan {
    /// Drawn from each video's retention curve with the session RNG.
    Sampled,
    /// Explicit leave point per playlist position (clamped to the video length).
    Fixed(Vec<usize>),
}

#[derive(Debug, Clone)]
enum ScrollSource {
    Sampled(ChaCha8Rng),
    Fixed(Vec<usize>),
}

/// Read-only view of one queued video.
#[derive(Debug, Clone, Copy)]
pub struct VideoView<'a> {
    pub asset: &'a VideoAsset,
    /// Playlist position.
    pub video: usize,
    pub next_chunk: usize,
    pub play_chunk: usize,
    pub play_offset: f64,
    pub buffered_chunks: usize,
    pub buffer_seconds: f64,
    pub last_level: Option<usize>,
    pub prev_level: Option<usize>,
    pub last_rebuffer: f64,
}

impl VideoView<'_> {
    pub fn fully_downloaded(&self) -> bool {
        self.next_chunk >= self.asset.num_chunks()
    }
}

#[derive(Debug, Clone)]
pub struct SessionState {
    cfg: SessionConfig,
    ladder_mbps: Vec<f64>,
    playlist: Arc<[Arc<VideoAsset>]>,
    trace: Arc<NetworkTrace>,
    pub(crate) playback: Playback,
    scrolls: ScrollSource,
    /// Level of every downloaded chunk, per playlist position.
    levels: Vec<Vec<u8>>,
    throughput: Vec<f64>,
    ledger: Ledger,
}

struct SessionHooks<'a> {
    playlist: &'a [Arc<VideoAsset>],
    ladder_mbps: &'a [f64],
    levels: &'a [Vec<u8>],
    scrolls: &'a mut ScrollSource,
    ledger: &'a mut Ledger,
    played: Vec<PlayedChunk>,
    left: Vec<ScrollEvent>,
}

impl Hooks for SessionHooks<'_> {
    fn asset(&self, video: usize) -> &VideoAsset {
        &self.playlist[video]
    }

    fn scroll_point(&mut self, video: usize) -> u32 {
        let asset = &self.playlist[video];
        let point = match self.scrolls {
            ScrollSource::Sampled(rng) => sample_scroll_chunk(asset.retention(), rng),
            ScrollSource::Fixed(points) => points.get(video).copied().unwrap_or(usize::MAX),
        };
        point.min(asset.num_chunks()) as u32
    }

    fn played(&mut self, slot: &Slot, chunk: u32) {
        let chunk = chunk as usize;
        let levels = &self.levels[slot.video];
        let level = levels[chunk] as usize;
        let size_mb = self.playlist[slot.video].size(chunk, level);
        let bitrate = self.ladder_mbps[level];
        let smoothness = if chunk > 0 {
            (bitrate - self.ladder_mbps[levels[chunk - 1] as usize]).abs()
        } else {
            0.0
        };
        self.ledger.watched_mb += size_mb;
        self.played.push(PlayedChunk {
            video: slot.video,
            chunk,
            level,
            bitrate_mbps: bitrate,
            smoothness,
            size_mb,
        });
    }

    fn left(&mut self, slot: &Slot) {
        let asset = &self.playlist[slot.video];
        let levels = &self.levels[slot.video];
        let wasted_mb: f64 = (slot.play_chunk..slot.next_download)
            .map(|c| asset.size(c as usize, levels[c as usize] as usize))
            .sum();
        self.ledger.wasted_mb += wasted_mb;
        self.left.push(ScrollEvent {
            video: slot.video,
            at_chunk: slot.play_chunk as usize,
            wasted_chunks: slot.buffered_chunks() as usize,
            wasted_mb,
        });
    }
}

impl SessionState {
    /// Fills the queue from the front of `playlist`; leave points are drawn
    /// with an RNG seeded from `seed`.
    pub fn new(
        playlist: Vec<Arc<VideoAsset>>,
        trace: Arc<NetworkTrace>,
        cfg: &SessionConfig,
        seed: u64,
    ) -> Result<Self, SimError> {
        Self::with_scrolls(playlist, trace, cfg, ScrollPlan::Sampled, seed)
    }

    pub fn with_scrolls(
        playlist: Vec<Arc<VideoAsset>>,
        trace: Arc<NetworkTrace>,
        cfg: &SessionConfig,
        plan: ScrollPlan,
        seed: u64,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        if playlist.len() < cfg.queue_length {
            return Err(SimError::Config(format!(
                "playlist supplies {} videos but the queue holds {}",
                playlist.len(),
                cfg.queue_length
            )));
        }
        for v in &playlist {
            if v.num_levels() != cfg.num_levels() {
                return Err(SimError::Config(format!(
                    "video `{}` has {} bitrate levels, the ladder has {}",
                    v.id,
                    v.num_levels(),
                    cfg.num_levels()
                )));
            }
        }
        trace.validate_min_duration(cfg.min_trace_duration)?;

        let playlist: Arc<[Arc<VideoAsset>]> = playlist.into();
        let mut scrolls = match plan {
            ScrollPlan::Sampled => ScrollSource::Sampled(ChaCha8Rng::seed_from_u64(seed)),
            ScrollPlan::Fixed(points) => ScrollSource::Fixed(points),
        };
        let ladder_mbps = cfg.ladder_mbps();
        let levels = vec![Vec::new(); playlist.len()];
        let mut ledger = Ledger::default();
        let playback = {
            let mut hooks = SessionHooks {
                playlist: &playlist,
                ladder_mbps: &ladder_mbps,
                levels: &levels,
                scrolls: &mut scrolls,
                ledger: &mut ledger,
                played: Vec::new(),
                left: Vec::new(),
            };
            Playback::new(
                cfg.queue_length,
                playlist.len(),
                cfg.max_session_time,
                &mut hooks,
            )
        };
        Ok(SessionState {
            cfg: cfg.clone(),
            ladder_mbps,
            playlist,
            trace,
            playback,
            scrolls,
            levels,
            throughput: Vec::new(),
            ledger,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn ladder_mbps(&self) -> &[f64] {
        &self.ladder_mbps
    }

    pub fn playlist(&self) -> &[Arc<VideoAsset>] {
        &self.playlist
    }

    pub fn trace(&self) -> &NetworkTrace {
        &self.trace
    }

    pub fn clock(&self) -> f64 {
        self.playback.clock
    }

    pub fn is_done(&self) -> bool {
        self.playback.done
    }

    pub fn ledger(&self) -> Ledger {
        self.ledger
    }

    /// Every throughput measurement so far (Mbps), oldest first.
    pub fn throughput_log(&self) -> &[f64] {
        &self.throughput
    }

    pub fn queue_len(&self) -> usize {
        self.playback.slots.len()
    }

    pub fn video(&self, j: usize) -> Option<VideoView<'_>> {
        self.playback.slots.get(j).map(|s| self.view(s))
    }

    pub fn videos(&self) -> impl Iterator<Item = VideoView<'_>> {
        self.playback.slots.iter().map(|s| self.view(s))
    }

    fn view(&self, s: &Slot) -> VideoView<'_> {
        VideoView {
            asset: &self.playlist[s.video],
            video: s.video,
            next_chunk: s.next_download as usize,
            play_chunk: s.play_chunk as usize,
            play_offset: s.play_offset,
            buffered_chunks: s.buffered_chunks() as usize,
            buffer_seconds: s.buffer_seconds(),
            last_level: s.last_level.map(usize::from),
            prev_level: s.prev_level.map(usize::from),
            last_rebuffer: s.last_rebuffer,
        }
    }

    /// Leave point of queue position `j`. Hidden from policies; exposed for
    /// tests and the reward's watch indicator.
    pub fn scroll_chunk(&self, j: usize) -> Option<usize> {
        self.playback.slots.get(j).map(|s| s.scroll_chunk as usize)
    }

    /// Megabytes downloaded and not yet played or discarded.
    pub fn buffered_mb(&self) -> f64 {
        self.playback
            .slots
            .iter()
            .map(|s| {
                let asset = &self.playlist[s.video];
                (s.play_chunk..s.next_download)
                    .map(|c| asset.size(c as usize, self.levels[s.video][c as usize] as usize))
                    .sum::<f64>()
            })
            .sum()
    }

    /// `downloaded - watched - wasted - buffered`; zero up to rounding.
    pub fn accounting_error(&self) -> f64 {
        let l = self.ledger;
        l.downloaded_mb - l.watched_mb - l.wasted_mb - self.buffered_mb()
    }

    pub fn valid_actions(&self) -> ActionMask {
        let downloads = (0..self.cfg.queue_length)
            .map(|j| self.playback.download_allowed(j, self.cfg.max_prefetch))
            .collect();
        ActionMask {
            downloads,
            levels: self.cfg.num_levels(),
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, SimError> {
        if self.playback.done {
            return Err(SimError::SessionDone);
        }
        if !self.valid_actions().allows(action) {
            return Err(SimError::InvalidAction(action));
        }
        let start = self.playback.clock;
        let mut hooks = SessionHooks {
            playlist: &self.playlist,
            ladder_mbps: &self.ladder_mbps,
            levels: &self.levels,
            scrolls: &mut self.scrolls,
            ledger: &mut self.ledger,
            played: Vec::new(),
            left: Vec::new(),
        };
        let (rebuffer, downloaded) = match action {
            Action::Sleep => {
                let (_, stall) = self.playback.sleep(self.cfg.sleep_duration, &mut hooks);
                (stall, None)
            }
            Action::Download { video, level } => {
                let target_scroll = self.playback.slots[video].scroll_chunk;
                let r = self.playback.download(
                    video,
                    level,
                    &self.ladder_mbps,
                    self.trace.as_ref(),
                    &mut hooks,
                );
                (
                    r.rebuffer,
                    Some((r, r.chunk < target_scroll)),
                )
            }
        };
        let played = std::mem::take(&mut hooks.played);
        let scrolls = std::mem::take(&mut hooks.left);

        let downloaded = downloaded.map(|(r, will_watch)| {
            self.ledger.downloaded_mb += r.size_mb;
            if r.delivered {
                self.levels[r.video].push(r.level as u8);
            } else {
                self.ledger.wasted_mb += r.size_mb;
            }
            if r.duration > 0.0 {
                self.throughput.push(r.size_mb * 8.0 / r.duration);
            }
            DownloadedChunk {
                video: r.video,
                chunk: r.chunk as usize,
                level: r.level,
                bitrate_mbps: self.ladder_mbps[r.level],
                size_mb: r.size_mb,
                duration: r.duration,
                smoothness: r.fluctuation,
                retention: r.retention,
                will_watch,
                delivered: r.delivered,
            }
        });
        Ok(StepOutcome {
            action,
            clock: self.playback.clock,
            duration: self.playback.clock - start,
            downloaded,
            rebuffer,
            scrolls,
            played,
            session_done: self.playback.done,
        })
    }
}

/// Builds a session from the front of `playlist`.
pub fn init_session(
    playlist: Vec<Arc<VideoAsset>>,
    trace: Arc<NetworkTrace>,
    cfg: &SessionConfig,
    seed: u64,
) -> Result<SessionState, SimError> {
    SessionState::new(playlist, trace, cfg, seed)
}

#[cfg(test)]
mod tests;
