//! Batch experiment runner: corpus generation, simulation, training,
//! evaluation and inference benchmarks over the sabr simulator.
//!
//! Every command is a plain function so the binary and the tests share one
//! code path. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or runtime failure |
//! | 2 | usage error (bad flag, unknown policy) |
//! | 3 | validation error (malformed trace, empty corpus, bad dataset or checkpoint) |
//! | 4 | configuration error (missing or unknown key, out-of-range value) |

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use sabr_core::baseline::{ExpertPolicy, FixedPreload, MpcConfig, MpcPolicy};
use sabr_core::neural::{NeuralError, NeuralPolicy, PolicyNet};
use sabr_core::scoring::{ScoreCoefficients, ScoreError};
use sabr_core::sim::{Policy, PolicyError, SessionConfig, SimError};
use sabr_core::traces::{GeneratorConfig, TraceCorpus, TraceError};
use sabr_core::training::{TrainConfig, TrainError};

pub mod commands;

pub use commands::*;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Config(_) => 4,
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Parse { .. } | TraceError::Validation(_) => CliError::Validation(e.to_string()),
            TraceError::Config(_) => CliError::Config(e.to_string()),
            TraceError::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => CliError::Config(e.to_string()),
            SimError::Trace(t) => t.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::Config(_) => CliError::Config(e.to_string()),
            NeuralError::Checkpoint(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Sim(s) => s.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Dataset(_) => CliError::Validation(e.to_string()),
            TrainError::Neural(n) => n.into(),
            TrainError::Policy(p) => p.into(),
            TrainError::Sim(s) => s.into(),
            TrainError::Io(io) => CliError::Runtime(io.to_string()),
        }
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Configuration file

/// The TOML file behind `--config`. Every section is optional except
/// `[train]` for the train command, whose keys are all required.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus directory used by `train` when `--corpus` is not given.
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub session: SessionConfig,
    #[serde(default)]
    pub score: ScoreCoefficients,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default = "default_expert_horizon")]
    pub expert_horizon: usize,
    /// Synthetic corpus settings for `train` runs without a corpus.
    pub generator: Option<GeneratorConfig>,
    pub train: Option<TrainConfig>,
}

fn default_expert_horizon() -> usize {
    3
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            session: SessionConfig::default(),
            score: ScoreCoefficients::default(),
            mpc: MpcConfig::default(),
            expert_horizon: default_expert_horizon(),
            generator: None,
            train: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        self.session.validate()?;
        self.score.validate()?;
        if self.mpc.horizon == 0 || self.expert_horizon == 0 {
            return Err(CliError::Config("planner horizons must be positive".into()));
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Policies

/// A policy named on the command line. Built fresh for every session so
/// sessions can run in parallel.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    FixedPreload,
    Mpc(MpcConfig),
    Expert(usize),
    Neural { label: String, net: PolicyNet },
}

impl PolicySpec {
    /// Accepts `fixed-preload`, `mpc`, `pdas-expert` and `neural:<checkpoint>`.
    pub fn parse(name: &str, cfg: &RunConfig) -> Result<Self, CliError> {
        match name {
            "fixed-preload" => Ok(PolicySpec::FixedPreload),
            "mpc" => Ok(PolicySpec::Mpc(cfg.mpc)),
            "pdas-expert" => Ok(PolicySpec::Expert(cfg.expert_horizon)),
            _ => match name.strip_prefix("neural:") {
                Some(path) if !path.is_empty() => {
                    let path = Path::new(path);
                    let net = PolicyNet::load(path)?;
                    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok(PolicySpec::Neural {
                        label: format!("neural:{stem}"),
                        net,
                    })
                }
                _ => Err(CliError::Usage(format!(
                    "unknown policy '{name}' (expected fixed-preload, mpc, pdas-expert or neural:<checkpoint>)"
                ))),
            },
        }
    }

    pub fn label(&self) -> &str {
        match self {
            PolicySpec::FixedPreload => "fixed-preload",
            PolicySpec::Mpc(_) => "mpc",
            PolicySpec::Expert(_) => "pdas-expert",
            PolicySpec::Neural { label, .. } => label,
        }
    }

    pub fn build(&self, coeffs: &ScoreCoefficients) -> Box<dyn Policy> {
        match self {
            PolicySpec::FixedPreload => Box::new(FixedPreload::default()),
            PolicySpec::Mpc(c) => Box::new(MpcPolicy::new(*c, *coeffs)),
            PolicySpec::Expert(h) => Box::new(ExpertPolicy::new(*h, *coeffs)),
            PolicySpec::Neural { net, .. } => Box::new(NeuralPolicy::greedy(net.clone())),
        }
    }

    /// Rejects a checkpoint built for a different queue length or ladder.
    pub fn check_session(&self, session: &SessionConfig) -> Result<(), CliError> {
        if let PolicySpec::Neural { label, net } = self {
            let arch = net.arch();
            if arch.bm_actions != session.queue_length + 1 || arch.ba_actions != session.num_levels() {
                return Err(CliError::Config(format!(
                    "{label} expects {} videos and {} levels, session has {} and {}",
                    arch.bm_actions - 1,
                    arch.ba_actions,
                    session.queue_length,
                    session.num_levels()
                )));
            }
        }
        Ok(())
    }
}

/// Loads a corpus directory; an empty one is a validation error.
pub fn load_corpus(dir: &Path) -> Result<TraceCorpus, CliError> {
    let corpus = TraceCorpus::load(dir)?;
    if corpus.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: corpus needs at least one trace and one video",
            dir.display()
        )));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_policy_is_usage_error() {
        let err = PolicySpec::parse("bola", &RunConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = PolicySpec::parse("neural:", &RunConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn baseline_names_round_trip() {
        let cfg = RunConfig::default();
        for name in ["fixed-preload", "mpc", "pdas-expert"] {
            assert_eq!(PolicySpec::parse(name, &cfg).unwrap().label(), name);
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.session, SessionConfig::default());
        assert_eq!(cfg.expert_horizon, 3);
        assert!(cfg.train.is_none());
    }

    #[test]
    fn unknown_section_is_config_error() {
        let err = RunConfig::parse("[sesion]\nqueue_length = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn bad_session_value_is_config_error() {
        let err = RunConfig::parse("[session]\nqueue_length = 0\n").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn parse_errors_map_to_validation() {
        let e: CliError = TraceError::Parse {
            line: 1,
            msg: "x".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = TrainError::Config("x".into()).into();
        assert_eq!(e.exit_code(), 4);
    }
}
