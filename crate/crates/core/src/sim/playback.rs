//! Allocation-free playback/download dynamics.
//!
//! [`Playback`] holds no heap data, so the horizon search can branch on it cheaply.
//! Everything that differs between the live session and a planner (where
//! scroll points come from, what gets logged) goes through [`Hooks`].

use arrayvec::ArrayVec;

use super::Bandwidth;
use crate::traces::{VideoAsset, CHUNK_DURATION};

/// Largest supported queue (the E2 benchmark environment uses 7).
pub const MAX_QUEUE: usize = 8;

/// Chunk completion slack; keeps float drift from leaving 0.9999999 s offsets.
const PLAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Slot {
    /// Position of the video in the session playlist; unique per session.
    pub video: usize,
    pub num_chunks: u32,
    pub next_download: u32,
    pub play_chunk: u32,
    pub play_offset: f64,
    /// First chunk the viewer will not watch.
    pub scroll_chunk: u32,
    pub last_level: Option<u8>,
    pub prev_level: Option<u8>,
    pub last_rebuffer: f64,
}

impl Slot {
    pub fn buffered_chunks(&self) -> u32 {
        self.next_download - self.play_chunk
    }

    pub fn buffer_seconds(&self) -> f64 {
        self.buffered_chunks() as f64 * CHUNK_DURATION - self.play_offset
    }
}

pub(crate) trait Hooks {
    fn asset(&self, video: usize) -> &VideoAsset;
    /// Leave point for a video entering the queue.
    fn scroll_point(&mut self, video: usize) -> u32;
    fn played(&mut self, _slot: &Slot, _chunk: u32) {}
    fn left(&mut self, _slot: &Slot) {}
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DownloadResult {
    pub video: usize,
    pub chunk: u32,
    pub level: usize,
    pub size_mb: f64,
    pub duration: f64,
    pub rebuffer: f64,
    /// Bitrate change against the previous chunk of the same video, Mbps.
    pub fluctuation: f64,
    /// Conditional retention of the downloaded chunk at decision time.
    pub retention: f64,
    /// False when the target video left the queue before the chunk arrived.
    pub delivered: bool,
}

/// Where playback will next run dry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct StallPoint {
    pub video: usize,
    pub chunk: u32,
    /// Seconds of playback left before the stall.
    pub after: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Playback {
    pub clock: f64,
    pub slots: ArrayVec<Slot, MAX_QUEUE>,
    pub next_video: usize,
    pub playlist_len: usize,
    pub done: bool,
    pub time_limit: f64,
}

impl Playback {
    pub fn new(
        queue_length: usize,
        playlist_len: usize,
        time_limit: f64,
        hooks: &mut impl Hooks,
    ) -> Self {
        let mut pb = Playback {
            clock: 0.0,
            slots: ArrayVec::new(),
            next_video: 0,
            playlist_len,
            done: false,
            time_limit,
        };
        for _ in 0..queue_length.min(playlist_len) {
            pb.append(hooks);
        }
        pb.settle(hooks);
        pb
    }

    fn append(&mut self, hooks: &mut impl Hooks) {
        let video = self.next_video;
        self.next_video += 1;
        let num_chunks = hooks.asset(video).num_chunks() as u32;
        let scroll_chunk = hooks.scroll_point(video).min(num_chunks);
        self.slots.push(Slot {
            video,
            num_chunks,
            next_download: 0,
            play_chunk: 0,
            play_offset: 0.0,
            scroll_chunk,
            last_level: None,
            prev_level: None,
            last_rebuffer: 0.0,
        });
    }

    /// Fires every scroll due at the current instant.
    fn settle(&mut self, hooks: &mut impl Hooks) {
        while !self.done {
            let Some(head) = self.slots.first().copied() else {
                self.done = true;
                break;
            };
            if head.play_chunk < head.scroll_chunk {
                break;
            }
            hooks.left(&head);
            self.slots.remove(0);
            if self.next_video < self.playlist_len {
                self.append(hooks);
            }
        }
    }

    /// Plays for `dt` seconds (cut at the time limit), firing scrolls at chunk
    /// boundaries. Returns the stall time accrued.
    pub fn advance(&mut self, dt: f64, hooks: &mut impl Hooks) -> f64 {
        let start = self.clock;
        let dt = dt.min(self.time_limit - start).max(0.0);
        let mut remaining = dt;
        let mut stall = 0.0;
        loop {
            self.settle(hooks);
            if self.done || remaining <= 0.0 {
                break;
            }
            let s = &mut self.slots[0];
            if s.play_chunk < s.next_download {
                let left = CHUNK_DURATION - s.play_offset;
                if remaining + PLAY_EPS >= left {
                    remaining -= left;
                    self.clock += left;
                    s.play_offset = 0.0;
                    s.play_chunk += 1;
                    let chunk = s.play_chunk - 1;
                    let snapshot = *s;
                    hooks.played(&snapshot, chunk);
                } else {
                    s.play_offset += remaining;
                    self.clock += remaining;
                    remaining = 0.0;
                }
            } else {
                stall += remaining;
                self.clock += remaining;
                remaining = 0.0;
            }
        }
        if !self.done {
            self.clock = start + dt;
        }
        if self.clock >= self.time_limit - PLAY_EPS {
            self.done = true;
        }
        stall
    }

    pub fn download_allowed(&self, j: usize, max_prefetch: usize) -> bool {
        if self.done {
            return false;
        }
        let Some(s) = self.slots.get(j) else {
            return false;
        };
        s.next_download < s.num_chunks && (j == 0 || (s.buffered_chunks() as usize) < max_prefetch)
    }

    /// Playback walk to the first chunk that is not yet buffered. `None` when
    /// the session would end without stalling.
    pub fn next_stall(&self) -> Option<StallPoint> {
        if self.done {
            return None;
        }
        let mut t = 0.0;
        for (i, s) in self.slots.iter().enumerate() {
            let avail = s.next_download.min(s.scroll_chunk).max(s.play_chunk);
            t += (avail - s.play_chunk) as f64 * CHUNK_DURATION;
            if i == 0 {
                t -= s.play_offset;
            }
            if avail < s.scroll_chunk {
                return Some(StallPoint {
                    video: s.video,
                    chunk: avail,
                    after: t.max(0.0),
                });
            }
        }
        if self.next_video < self.playlist_len {
            return Some(StallPoint {
                video: self.next_video,
                chunk: 0,
                after: t.max(0.0),
            });
        }
        None
    }

    /// Sleeps for `duration`, cut short if playback would stall sooner.
    pub fn sleep(&mut self, duration: f64, hooks: &mut impl Hooks) -> (f64, f64) {
        let until_stall = self.next_stall().map_or(f64::INFINITY, |p| p.after);
        let dt = if until_stall > PLAY_EPS {
            until_stall.min(duration)
        } else {
            duration
        };
        let start = self.clock;
        let stall = self.advance(dt, hooks);
        (self.clock - start, stall)
    }

    /// Downloads the next chunk of queue position `j` at `level`. The caller
    /// checks [`Playback::download_allowed`] first.
    pub fn download(
        &mut self,
        j: usize,
        level: usize,
        bitrates_mbps: &[f64],
        bandwidth: &dyn Bandwidth,
        hooks: &mut impl Hooks,
    ) -> DownloadResult {
        let target = self.slots[j];
        let chunk = target.next_download;
        let asset = hooks.asset(target.video);
        let size_mb = asset.size(chunk as usize, level);
        let retention = {
            let p = asset.retention();
            let m = if j == 0 { target.play_chunk as usize } else { 0 };
            let m = m.min(p.len() - 1);
            if p[m] > 0.0 {
                p[chunk as usize] / p[m]
            } else {
                0.0
            }
        };
        let fluctuation = target
            .last_level
            .map_or(0.0, |prev| (bitrates_mbps[level] - bitrates_mbps[prev as usize]).abs());
        let duration = bandwidth.download_time(size_mb, self.clock);
        let rebuffer = self.advance(duration, hooks);

        let mut delivered = false;
        if let Some(s) = self.slots.iter_mut().find(|s| s.video == target.video) {
            debug_assert_eq!(s.next_download, chunk);
            s.next_download += 1;
            s.prev_level = s.last_level;
            s.last_level = Some(level as u8);
            s.last_rebuffer = rebuffer;
            delivered = true;
        }
        DownloadResult {
            video: target.video,
            chunk,
            level,
            size_mb,
            duration,
            rebuffer,
            fluctuation,
            retention,
            delivered,
        }
    }
}
