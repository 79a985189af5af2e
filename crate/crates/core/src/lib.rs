//! Short-video streaming simulator and the controllers that drive it.
//!
//! A session keeps a queue of videos, prefetches chunks of any of them over a
//! trace-driven link and plays the head of the queue until the viewer
//! scrolls away. Controllers pick, at every step, which video to fetch next
//! and at which bitrate, or to sleep.

pub mod baseline;
pub mod features;
pub mod neural;
pub mod scoring;
pub mod sim;
pub mod traces;
pub mod training;

/// Child seed for `stream` under `parent` (splitmix64 finalizer).
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    let mut z = parent
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
