//! Network bandwidth traces, per-video chunk/retention assets, the synthetic
//! corpus generator and the train/test split.
//!
//! Units: chunk sizes are megabytes, bandwidth is megabits per second. The
//! bit/byte conversion happens only in [`crate::sim::Bandwidth::download_time`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every chunk covers one second of playback.
pub const CHUNK_DURATION: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid trace: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

fn io_err(path: &Path, source: std::io::Error) -> TraceError {
    TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Bandwidth condition a synthetic trace was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    Medium,
    High,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Low => "low",
            Regime::Medium => "medium",
            Regime::High => "high",
        }
    }
}

impl FromStr for Regime {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(Regime::Low),
            "medium" => Ok(Regime::Medium),
            "high" => Ok(Regime::High),
            other => Err(TraceError::Validation(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSample {
    pub time: f64,
    pub mbps: f64,
}

/// Piecewise-constant bandwidth: sample `i` holds over `[t_i, t_{i+1})`, the
/// final sample holds for as long as the interval before it, and the whole
/// trace repeats with period [`NetworkTrace::period`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTrace {
    pub name: String,
    pub regime: Option<Regime>,
    samples: Vec<BandwidthSample>,
    period: f64,
    cycle_megabits: f64,
}

impl NetworkTrace {
    pub fn new(name: impl Into<String>, samples: Vec<BandwidthSample>) -> Result<Self, TraceError> {
        if samples.len() < 2 {
            return Err(TraceError::Validation(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.time.is_finite() || !s.mbps.is_finite() {
                return Err(TraceError::Validation(format!("sample {i} is not finite")));
            }
            if s.mbps <= 0.0 {
                return Err(TraceError::Validation(format!(
                    "sample {i} has non-positive bandwidth {}",
                    s.mbps
                )));
            }
            if i > 0 && s.time <= samples[i - 1].time {
                return Err(TraceError::Validation(format!(
                    "timestamps must be strictly increasing (sample {i}: {} after {})",
                    s.time,
                    samples[i - 1].time
                )));
            }
        }
        let n = samples.len();
        let last_interval = samples[n - 1].time - samples[n - 2].time;
        let period = samples[n - 1].time - samples[0].time + last_interval;
        let mut trace = NetworkTrace {
            name: name.into(),
            regime: None,
            samples,
            period,
            cycle_megabits: 0.0,
        };
        trace.cycle_megabits = (0..n).map(|i| trace.segment_len(i) * trace.samples[i].mbps).sum();
        Ok(trace)
    }

    /// A trace with one constant bandwidth level.
    pub fn constant(name: impl Into<String>, mbps: f64, duration: f64) -> Result<Self, TraceError> {
        Self::new(
            name,
            vec![
                BandwidthSample { time: 0.0, mbps },
                BandwidthSample {
                    time: duration / 2.0,
                    mbps,
                },
            ],
        )
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regime = Some(regime);
        self
    }

    pub fn samples(&self) -> &[BandwidthSample] {
        &self.samples
    }

    /// Length of one cycle of the trace in seconds.
    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn mean_mbps(&self) -> f64 {
        self.cycle_megabits / self.period
    }

    /// Megabits deliverable in one full cycle.
    pub(crate) fn cycle_megabits(&self) -> f64 {
        self.cycle_megabits
    }

    pub(crate) fn segment_len(&self, i: usize) -> f64 {
        let start = self.samples[i].time;
        let end = if i + 1 < self.samples.len() {
            self.samples[i + 1].time
        } else {
            self.samples[0].time + self.period
        };
        end - start
    }

    /// Index of the segment containing `t` and the time already spent inside it.
    pub(crate) fn locate(&self, t: f64) -> (usize, f64) {
        let t0 = self.samples[0].time;
        let rel = (t - t0).rem_euclid(self.period);
        let abs = t0 + rel;
        let idx = self
            .samples
            .partition_point(|s| s.time <= abs)
            .saturating_sub(1);
        let into = (abs - self.samples[idx].time).max(0.0);
        (idx, into)
    }

    pub fn bandwidth_at(&self, t: f64) -> f64 {
        self.samples[self.locate(t).0].mbps
    }

    pub fn validate_min_duration(&self, min_duration: f64) -> Result<(), TraceError> {
        if self.period < min_duration {
            return Err(TraceError::Validation(format!(
                "trace `{}` lasts {:.3} s, shorter than the minimum session length {:.3} s",
                self.name, self.period, min_duration
            )));
        }
        Ok(())
    }

    pub fn parse(name: &str, text: &str) -> Result<Self, TraceError> {
        let mut samples = Vec::new();
        let mut regime = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(r) = comment.trim().strip_prefix("regime=") {
                    regime = Some(r.trim().parse()?);
                }
                continue;
            }
            let mut fields = line.split_whitespace();
            let (Some(t), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(TraceError::Parse {
                    line: i + 1,
                    msg: format!("expected `timestamp_seconds bandwidth_mbps`, got `{line}`"),
                });
            };
            let parse = |v: &str, what: &str| {
                v.parse::<f64>().map_err(|e| TraceError::Parse {
                    line: i + 1,
                    msg: format!("bad {what} `{v}`: {e}"),
                })
            };
            samples.push(BandwidthSample {
                time: parse(t, "timestamp")?,
                mbps: parse(b, "bandwidth")?,
            });
        }
        let mut trace = Self::new(name, samples)?;
        trace.regime = regime;
        Ok(trace)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(r) = self.regime {
            let _ = writeln!(out, "# regime={}", r.as_str());
        }
        for s in &self.samples {
            let _ = writeln!(out, "{} {}", s.time, s.mbps);
        }
        out
    }
}

/// Reads a `timestamp_seconds bandwidth_mbps` file.
pub fn load_network_trace(path: &Path) -> Result<NetworkTrace, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    NetworkTrace::parse(&name, &text)
}

/// One short video: chunk sizes per bitrate level and the per-chunk
/// probability that a viewer is still watching.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAsset {
    pub id: String,
    /// `chunk_sizes[chunk][level]` in megabytes.
    chunk_sizes: Vec<Vec<f64>>,
    retention: Vec<f64>,
}

impl VideoAsset {
    pub fn new(
        id: impl Into<String>,
        chunk_sizes: Vec<Vec<f64>>,
        retention: Vec<f64>,
    ) -> Result<Self, TraceError> {
        let id = id.into();
        if chunk_sizes.is_empty() {
            return Err(TraceError::Validation(format!("video `{id}` has no chunks")));
        }
        if chunk_sizes.len() != retention.len() {
            return Err(TraceError::Validation(format!(
                "video `{id}`: {} chunk rows but {} retention values",
                chunk_sizes.len(),
                retention.len()
            )));
        }
        let levels = chunk_sizes[0].len();
        if levels == 0 {
            return Err(TraceError::Validation(format!("video `{id}` has no bitrate levels")));
        }
        for (c, row) in chunk_sizes.iter().enumerate() {
            if row.len() != levels {
                return Err(TraceError::Validation(format!(
                    "video `{id}` chunk {c}: {} levels, expected {levels}",
                    row.len()
                )));
            }
            for (l, &s) in row.iter().enumerate() {
                if !(s.is_finite() && s > 0.0) {
                    return Err(TraceError::Validation(format!(
                        "video `{id}` chunk {c} level {l}: size must be positive, got {s}"
                    )));
                }
                if l > 0 && s <= row[l - 1] {
                    return Err(TraceError::Validation(format!(
                        "video `{id}` chunk {c}: sizes must strictly increase with bitrate level"
                    )));
                }
            }
        }
        if retention[0] != 1.0 {
            return Err(TraceError::Validation(format!(
                "video `{id}`: retention of the first chunk must be 1.0, got {}",
                retention[0]
            )));
        }
        for (c, &p) in retention.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(TraceError::Validation(format!(
                    "video `{id}` chunk {c}: retention {p} outside [0, 1]"
                )));
            }
            if c > 0 && p > retention[c - 1] {
                return Err(TraceError::Validation(format!(
                    "video `{id}` chunk {c}: retention increases from {} to {p}",
                    retention[c - 1]
                )));
            }
        }
        Ok(VideoAsset {
            id,
            chunk_sizes,
            retention,
        })
    }

    pub fn num_chunks(&self) -> usize {
        self.chunk_sizes.len()
    }

    pub fn num_levels(&self) -> usize {
        self.chunk_sizes[0].len()
    }

    pub fn size(&self, chunk: usize, level: usize) -> f64 {
        self.chunk_sizes[chunk][level]
    }

    pub fn chunk_sizes(&self) -> &[Vec<f64>] {
        &self.chunk_sizes
    }

    /// Mean size of `chunk` across the bitrate ladder.
    pub fn mean_size(&self, chunk: usize) -> f64 {
        let row = &self.chunk_sizes[chunk];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn retention(&self) -> &[f64] {
        &self.retention
    }

    pub fn duration(&self) -> f64 {
        self.num_chunks() as f64 * CHUNK_DURATION
    }

    pub fn parse(id: &str, text: &str) -> Result<Self, TraceError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(TraceError::Parse {
            line: 1,
            msg: "missing `chunks=N levels=L` header".into(),
        })?;
        let mut chunks = None;
        let mut levels = None;
        for field in header.split_whitespace() {
            let bad = || TraceError::Parse {
                line: hline,
                msg: format!("bad header field `{field}`"),
            };
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            let v: usize = v.parse().map_err(|_| bad())?;
            match k {
                "chunks" => chunks = Some(v),
                "levels" => levels = Some(v),
                _ => return Err(bad()),
            }
        }
        let (Some(chunks), Some(levels)) = (chunks, levels) else {
            return Err(TraceError::Parse {
                line: hline,
                msg: "header must declare both `chunks=` and `levels=`".into(),
            });
        };
        let mut sizes = Vec::with_capacity(chunks);
        let mut retention = Vec::with_capacity(chunks);
        for (lineno, line) in lines {
            let values = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|e| TraceError::Parse {
                        line: lineno,
                        msg: format!("bad number `{v}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != levels + 1 {
                return Err(TraceError::Parse {
                    line: lineno,
                    msg: format!(
                        "expected {levels} sizes and a retention value, got {} fields",
                        values.len()
                    ),
                });
            }
            retention.push(values[levels]);
            sizes.push(values[..levels].to_vec());
        }
        if sizes.len() != chunks {
            return Err(TraceError::Parse {
                line: hline,
                msg: format!("header declares {chunks} chunks, found {}", sizes.len()),
            });
        }
        Self::new(id, sizes, retention)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("chunks={} levels={}\n", self.num_chunks(), self.num_levels());
        for (row, p) in self.chunk_sizes.iter().zip(&self.retention) {
            for s in row {
                let _ = write!(out, "{s} ");
            }
            let _ = writeln!(out, "{p}");
        }
        out
    }
}

/// Reads a video asset file: `chunks=N levels=L` then N rows of sizes and retention.
pub fn load_video_asset(path: &Path) -> Result<VideoAsset, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    VideoAsset::parse(&id, &text)
}

#[derive(Debug, Clone)]
pub struct TraceCorpus {
    pub network_traces: Vec<Arc<NetworkTrace>>,
    pub videos: Vec<Arc<VideoAsset>>,
    pub split_seed: u64,
}

impl TraceCorpus {
    /// Loads `<dir>/traces/*.txt` and `<dir>/videos/*.txt`, sorted by file name.
    pub fn load(dir: &Path) -> Result<Self, TraceError> {
        let list = |sub: &str| -> Result<Vec<std::path::PathBuf>, TraceError> {
            let d = dir.join(sub);
            let mut paths: Vec<_> = fs::read_dir(&d)
                .map_err(|e| io_err(&d, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            paths.sort();
            Ok(paths)
        };
        let network_traces = list("traces")?
            .iter()
            .map(|p| load_network_trace(p).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        let videos = list("videos")?
            .iter()
            .map(|p| load_video_asset(p).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TraceCorpus {
            network_traces,
            videos,
            split_seed: 0,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), TraceError> {
        for sub in ["traces", "videos"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        }
        for t in &self.network_traces {
            let p = dir.join("traces").join(format!("{}.txt", t.name));
            fs::write(&p, t.to_text()).map_err(|e| io_err(&p, e))?;
        }
        for v in &self.videos {
            let p = dir.join("videos").join(format!("{}.txt", v.id));
            fs::write(&p, v.to_text()).map_err(|e| io_err(&p, e))?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.network_traces.is_empty() || self.videos.is_empty()
    }
}

/// Settings for [`generate_synthetic_corpus`]. Every key is optional in the
/// TOML form; missing keys take the [`Default`] value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub network_traces: usize,
    pub videos: usize,
    pub trace_duration_s: f64,
    pub sample_interval_s: f64,
    /// Mean length of a constant-bandwidth segment (exponentially distributed).
    pub mean_segment_s: f64,
    /// Log-space standard deviation of segment bandwidth levels.
    pub lognormal_sigma: f64,
    /// Mean bandwidth per regime; traces cycle through the listed regimes.
    pub regimes: Vec<RegimeSpec>,
    pub min_mbps: f64,
    pub video_chunks_min: usize,
    pub video_chunks_max: usize,
    /// Per-chunk retention decay rate is drawn uniformly from this range.
    pub retention_decay_min: f64,
    pub retention_decay_max: f64,
    pub ladder_kbps: Vec<f64>,
    /// Relative per-chunk size variation around `bitrate * 1 s / 8`.
    pub size_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub label: Regime,
    pub mean_mbps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            network_traces: 30,
            videos: 60,
            trace_duration_s: 300.0,
            sample_interval_s: 1.0,
            mean_segment_s: 8.0,
            lognormal_sigma: 0.4,
            regimes: vec![
                RegimeSpec {
                    label: Regime::Low,
                    mean_mbps: 1.0,
                },
                RegimeSpec {
                    label: Regime::Medium,
                    mean_mbps: 2.0,
                },
                RegimeSpec {
                    label: Regime::High,
                    mean_mbps: 4.0,
                },
            ],
            min_mbps: 0.1,
            video_chunks_min: 8,
            video_chunks_max: 25,
            retention_decay_min: 0.02,
            retention_decay_max: 0.2,
            ladder_kbps: vec![750.0, 1200.0, 1850.0],
            size_jitter: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self, TraceError> {
        toml::from_str(text).map_err(|e| TraceError::Config(e.to_string()))
    }

    fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::Config(m.to_string()));
        if self.network_traces == 0 {
            return bad("network_traces must be positive");
        }
        if self.videos == 0 {
            return bad("videos must be positive");
        }
        if self.regimes.is_empty() {
            return bad("at least one bandwidth regime is required");
        }
        if self.regimes.iter().any(|r| !(r.mean_mbps > 0.0)) {
            return bad("regime means must be positive");
        }
        if !(self.sample_interval_s > 0.0) || self.trace_duration_s < 2.0 * self.sample_interval_s {
            return bad("trace_duration_s must cover at least two samples");
        }
        if !(self.mean_segment_s > 0.0) || !(self.min_mbps > 0.0) || self.lognormal_sigma < 0.0 {
            return bad("mean_segment_s and min_mbps must be positive, lognormal_sigma non-negative");
        }
        if self.video_chunks_min == 0 || self.video_chunks_max < self.video_chunks_min {
            return bad("video chunk range must satisfy 1 <= min <= max");
        }
        if self.retention_decay_min < 0.0 || self.retention_decay_max < self.retention_decay_min {
            return bad("retention decay range must satisfy 0 <= min <= max");
        }
        if self.ladder_kbps.is_empty() || self.ladder_kbps.windows(2).any(|w| w[1] <= w[0]) {
            return bad("ladder_kbps must be non-empty and strictly increasing");
        }
        if !(0.0..0.5).contains(&self.size_jitter) {
            return bad("size_jitter must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// Deterministic synthetic corpus for a fixed `(config, seed)`.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<TraceCorpus, TraceError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seg = Exp::new(1.0 / cfg.mean_segment_s).map_err(|e| TraceError::Config(e.to_string()))?;

    let mut network_traces = Vec::with_capacity(cfg.network_traces);
    for i in 0..cfg.network_traces {
        let regime = &cfg.regimes[i % cfg.regimes.len()];
        let sigma = cfg.lognormal_sigma;
        let level = LogNormal::new(regime.mean_mbps.ln() - sigma * sigma / 2.0, sigma)
            .map_err(|e| TraceError::Config(e.to_string()))?;
        let n = (cfg.trace_duration_s / cfg.sample_interval_s).floor() as usize;
        let mut samples = Vec::with_capacity(n);
        let mut current = level.sample(&mut rng).max(cfg.min_mbps);
        let mut seg_end = seg.sample(&mut rng);
        for k in 0..n {
            let t = k as f64 * cfg.sample_interval_s;
            while t >= seg_end {
                current = level.sample(&mut rng).max(cfg.min_mbps);
                seg_end += seg.sample(&mut rng);
            }
            // Round to 1 kbps so the text form stays short.
            samples.push(BandwidthSample {
                time: t,
                mbps: (current * 1000.0).round() / 1000.0,
            });
        }
        let name = format!("trace_{:03}_{}", i, regime.label.as_str());
        network_traces.push(Arc::new(NetworkTrace::new(name, samples)?.with_regime(regime.label)));
    }

    let mut videos = Vec::with_capacity(cfg.videos);
    for i in 0..cfg.videos {
        let chunks = rng.gen_range(cfg.video_chunks_min..=cfg.video_chunks_max);
        let decay = if cfg.retention_decay_max > cfg.retention_decay_min {
            rng.gen_range(cfg.retention_decay_min..cfg.retention_decay_max)
        } else {
            cfg.retention_decay_min
        };
        let mut sizes = Vec::with_capacity(chunks);
        let mut retention = Vec::with_capacity(chunks);
        let mut p = 1.0f64;
        for c in 0..chunks {
            let jitter = 1.0 + cfg.size_jitter * (2.0 * rng.gen::<f64>() - 1.0);
            sizes.push(
                cfg.ladder_kbps
                    .iter()
                    .map(|kbps| ((kbps / 1000.0 / 8.0 * jitter) * 1e6).round() / 1e6)
                    .collect(),
            );
            if c > 0 && decay > 0.0 {
                p *= (-decay * rng.gen_range(0.0..2.0)).exp();
                p = (p * 1e6).round() / 1e6;
            }
            retention.push(p);
        }
        videos.push(Arc::new(VideoAsset::new(format!("video_{i:03}"), sizes, retention)?));
    }

    Ok(TraceCorpus {
        network_traces,
        videos,
        split_seed: seed,
    })
}

/// Splits traces and videos independently: `round(ratio * n)` of each go to
/// the training side.
pub fn split_corpus(
    corpus: &TraceCorpus,
    ratio: f64,
    seed: u64,
) -> Result<(TraceCorpus, TraceCorpus), TraceError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TraceError::Config(format!(
            "split ratio must lie strictly between 0 and 1, got {ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn part<T: Clone>(items: &[T], ratio: f64, rng: &mut ChaCha8Rng) -> (Vec<T>, Vec<T>) {
        let mut idx: Vec<usize> = (0..items.len()).collect();
        idx.shuffle(rng);
        let n_train = (ratio * items.len() as f64).round() as usize;
        let (a, b) = idx.split_at(n_train.min(items.len()));
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        (
            a.iter().map(|&i| items[i].clone()).collect(),
            b.iter().map(|&i| items[i].clone()).collect(),
        )
    }
    let (tr_traces, te_traces) = part(&corpus.network_traces, ratio, &mut rng);
    let (tr_videos, te_videos) = part(&corpus.videos, ratio, &mut rng);
    Ok((
        TraceCorpus {
            network_traces: tr_traces,
            videos: tr_videos,
            split_seed: seed,
        },
        TraceCorpus {
            network_traces: te_traces,
            videos: te_videos,
            split_seed: seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_sample_trace() {
        let t = NetworkTrace::parse("t", "0.0 2.5\n1.0 3.1").unwrap();
        assert_eq!(t.samples().len(), 2);
        assert_eq!(t.samples()[0].mbps, 2.5);
        assert_eq!(t.samples()[1].mbps, 3.1);
        assert_eq!(t.period(), 2.0);
    }

    #[test]
    fn rejects_duplicate_timestamp() {
        let err = NetworkTrace::parse("t", "0.0 2.5\n0.0 3.1").unwrap_err();
        assert!(matches!(err, TraceError::Validation(_)), "{err}");
    }

    #[test]
    fn rejects_negative_bandwidth() {
        let err = NetworkTrace::parse("t", "0.0 2.5\n1.0 -3.1").unwrap_err();
        assert!(matches!(err, TraceError::Validation(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match NetworkTrace::parse("t", "0.0 2.5\n\n1.0 abc\n") {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn locate_wraps_cyclically() {
        let t = NetworkTrace::parse("t", "0 1\n1 2\n2 3").unwrap();
        assert_eq!(t.period(), 3.0);
        assert_eq!(t.bandwidth_at(0.5), 1.0);
        assert_eq!(t.bandwidth_at(2.5), 3.0);
        assert_eq!(t.bandwidth_at(3.5), 1.0);
        assert_eq!(t.bandwidth_at(4.0), 2.0);
        assert!((t.mean_mbps() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn valid_two_chunk_asset() {
        // 750/1200/1850 kbps for one second, in megabytes, rounded.
        let v = VideoAsset::parse(
            "v",
            "chunks=2 levels=3\n0.094 0.150 0.231 1.0\n0.094 0.150 0.231 0.8\n",
        )
        .unwrap();
        assert_eq!(v.num_chunks(), 2);
        assert_eq!(v.num_levels(), 3);
        assert_eq!(v.retention(), &[1.0, 0.8]);
        assert_eq!(v.size(1, 2), 0.231);
    }

    #[test]
    fn asset_retention_guards() {
        let inc = VideoAsset::parse("v", "chunks=2 levels=1\n0.1 1.0\n0.1 1.1\n").unwrap_err();
        assert!(matches!(inc, TraceError::Validation(_)));
        let first = VideoAsset::parse("v", "chunks=2 levels=1\n0.1 0.9\n0.1 0.8\n").unwrap_err();
        assert!(matches!(first, TraceError::Validation(_)));
        let rising = VideoAsset::parse("v", "chunks=2 levels=1\n0.1 1.0\n0.1 0.5\n0.1 0.7\n");
        assert!(rising.is_err());
    }

    #[test]
    fn asset_missing_column_is_parse_error() {
        let err = VideoAsset::parse("v", "chunks=1 levels=3\n0.1 0.2 1.0\n").unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn asset_sizes_must_increase_with_level() {
        let err = VideoAsset::parse("v", "chunks=1 levels=2\n0.2 0.2 1.0\n").unwrap_err();
        assert!(matches!(err, TraceError::Validation(_)));
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = generate_synthetic_corpus(&cfg, 7).unwrap();
        let b = generate_synthetic_corpus(&cfg, 7).unwrap();
        let text = |c: &TraceCorpus| {
            c.network_traces
                .iter()
                .map(|t| t.to_text())
                .chain(c.videos.iter().map(|v| v.to_text()))
                .collect::<String>()
        };
        assert_eq!(text(&a), text(&b));
        let c = generate_synthetic_corpus(&cfg, 8).unwrap();
        assert_ne!(text(&a), text(&c));
    }

    #[test]
    fn generator_labels_regimes() {
        let cfg = GeneratorConfig {
            network_traces: 6,
            ..GeneratorConfig::default()
        };
        let c = generate_synthetic_corpus(&cfg, 1).unwrap();
        let labels: Vec<_> = c.network_traces.iter().map(|t| t.regime.unwrap()).collect();
        assert_eq!(
            labels,
            [Regime::Low, Regime::Medium, Regime::High, Regime::Low, Regime::Medium, Regime::High]
        );
        let mean = |r: Regime| {
            let v: Vec<f64> = c
                .network_traces
                .iter()
                .filter(|t| t.regime == Some(r))
                .map(|t| t.mean_mbps())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(Regime::Low) < mean(Regime::Medium));
        assert!(mean(Regime::Medium) < mean(Regime::High));
    }

    #[test]
    fn zero_decay_gives_full_retention() {
        let cfg = GeneratorConfig {
            retention_decay_min: 0.0,
            retention_decay_max: 0.0,
            ..GeneratorConfig::default()
        };
        let c = generate_synthetic_corpus(&cfg, 3).unwrap();
        assert!(c.videos.iter().all(|v| v.retention().iter().all(|&p| p == 1.0)));
    }

    #[test]
    fn degenerate_generator_config() {
        for cfg in [
            GeneratorConfig {
                videos: 0,
                ..GeneratorConfig::default()
            },
            GeneratorConfig {
                network_traces: 0,
                ..GeneratorConfig::default()
            },
        ] {
            assert!(matches!(
                generate_synthetic_corpus(&cfg, 1),
                Err(TraceError::Config(_))
            ));
        }
    }

    #[test]
    fn generator_config_from_toml() {
        let cfg = GeneratorConfig::from_toml(
            "videos = 5\nregimes = [{ label = \"high\", mean_mbps = 5.0 }]\n",
        )
        .unwrap();
        assert_eq!(cfg.videos, 5);
        assert_eq!(cfg.regimes.len(), 1);
        assert_eq!(cfg.network_traces, GeneratorConfig::default().network_traces);
        assert!(GeneratorConfig::from_toml("vidoes = 5").is_err());
    }

    fn small_corpus(n: usize) -> TraceCorpus {
        let cfg = GeneratorConfig {
            network_traces: n,
            videos: n,
            trace_duration_s: 20.0,
            ..GeneratorConfig::default()
        };
        generate_synthetic_corpus(&cfg, 11).unwrap()
    }

    #[test]
    fn split_eighty_twenty() {
        let c = small_corpus(10);
        let (train, test) = split_corpus(&c, 0.8, 5).unwrap();
        assert_eq!(train.network_traces.len(), 8);
        assert_eq!(test.network_traces.len(), 2);
        assert_eq!(train.videos.len(), 8);
        let names: std::collections::HashSet<_> =
            train.network_traces.iter().map(|t| t.name.clone()).collect();
        assert!(test.network_traces.iter().all(|t| !names.contains(&t.name)));

        let (again, _) = split_corpus(&c, 0.8, 5).unwrap();
        let n2: Vec<_> = again.network_traces.iter().map(|t| t.name.clone()).collect();
        let n1: Vec<_> = train.network_traces.iter().map(|t| t.name.clone()).collect();
        assert_eq!(n1, n2);
    }

    #[test]
    fn split_ratio_bounds() {
        let c = small_corpus(4);
        assert!(matches!(split_corpus(&c, 1.0, 1), Err(TraceError::Config(_))));
        assert!(matches!(split_corpus(&c, 0.0, 1), Err(TraceError::Config(_))));
    }

    #[test]
    fn corpus_save_load() {
        let c = small_corpus(3);
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = TraceCorpus::load(dir.path()).unwrap();
        assert_eq!(back.network_traces.len(), 3);
        for (a, b) in c.network_traces.iter().zip(&back.network_traces) {
            assert_eq!(**a, **b);
        }
        for (a, b) in c.videos.iter().zip(&back.videos) {
            assert_eq!(**a, **b);
        }
    }

    proptest! {
        #[test]
        fn trace_text_round_trip(
            gaps in proptest::collection::vec(1e-3f64..10.0, 1..20),
            bws in proptest::collection::vec(1e-3f64..100.0, 20),
            t0 in -5.0f64..5.0,
        ) {
            let mut t = t0;
            let mut samples = vec![BandwidthSample { time: t, mbps: bws[0] }];
            for (i, g) in gaps.iter().enumerate() {
                t += g;
                samples.push(BandwidthSample { time: t, mbps: bws[i + 1] });
            }
            let trace = NetworkTrace::new("p", samples).unwrap();
            let back = NetworkTrace::parse("p", &trace.to_text()).unwrap();
            prop_assert_eq!(trace, back);
        }

        #[test]
        fn asset_text_round_trip(
            base in proptest::collection::vec(1e-3f64..1.0, 1..10),
            drops in proptest::collection::vec(0.0f64..0.3, 10),
        ) {
            let sizes: Vec<Vec<f64>> = base.iter().map(|b| vec![*b, b * 1.6, b * 2.5]).collect();
            let mut p = 1.0;
            let retention: Vec<f64> = (0..base.len()).map(|i| {
                if i > 0 { p *= 1.0 - drops[i]; }
                p
            }).collect();
            let v = VideoAsset::new("v", sizes, retention).unwrap();
            prop_assert_eq!(&VideoAsset::parse("v", &v.to_text()).unwrap(), &v);
        }
    }
}
