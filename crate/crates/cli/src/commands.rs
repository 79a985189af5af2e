use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use sabr_core::baseline::{ExpertPolicy, FixedPreload, MpcPolicy};
use sabr_core::neural::{ArchConfig, NeuralPolicy, PolicyNet};
use sabr_core::scoring::{ScoreBreakdown, ScoreCoefficients};
use sabr_core::sim::{session_specs, Policy, SessionConfig, SessionSpec, SessionState};
use sabr_core::traces::{generate_synthetic_corpus, split_corpus, GeneratorConfig, TraceCorpus};
use sabr_core::training::{self, collect_expert_dataset, ExpertDataset, LogRow, TrainError, TrainObserver, TrainOutcome};

use crate::{load_corpus, write_file, CliError, PolicySpec, RunConfig};

const SCORE_COLUMNS: &str =
    "quality,smoothness,rebuffer_s,rebuffer_penalty,bandwidth_mb,bandwidth_penalty,wasted_mb,utility";

fn score_fields(s: &ScoreBreakdown) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        s.quality,
        s.smoothness,
        s.rebuffer_s,
        s.rebuffer_penalty,
        s.bandwidth_mb,
        s.bandwidth_penalty,
        s.wasted_mb,
        s.utility
    )
}

/// Runs `policy` over `specs` in parallel; results stay in session order.
pub fn run_sessions(
    policy: &PolicySpec,
    specs: &[SessionSpec],
    session: &SessionConfig,
    coeffs: &ScoreCoefficients,
) -> Result<Vec<ScoreBreakdown>, CliError> {
    policy.check_session(session)?;
    specs
        .par_iter()
        .map(|spec| {
            let mut p = policy.build(coeffs);
            Ok(spec.run(&mut *p, session, coeffs)?.1)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// gen-corpus / split

pub struct GenCorpusArgs {
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes a synthetic corpus from the config's `[generator]` section.
pub fn gen_corpus(args: &GenCorpusArgs) -> Result<TraceCorpus, CliError> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let corpus = generate_synthetic_corpus(&cfg.generator.unwrap_or_default(), args.seed)?;
    corpus.save(&args.out)?;
    Ok(corpus)
}

pub struct SplitArgs {
    pub corpus: PathBuf,
    pub ratio: f64,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes `<out>/train` and `<out>/test`.
pub fn split(args: &SplitArgs) -> Result<(TraceCorpus, TraceCorpus), CliError> {
    let corpus = load_corpus(&args.corpus)?;
    let (train, test) = split_corpus(&corpus, args.ratio, args.seed)?;
    train.save(&args.out.join("train"))?;
    test.save(&args.out.join("test"))?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// simulate

pub struct SimulateArgs {
    pub policy: String,
    pub corpus: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub sessions: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SimulateReport {
    pub sessions: Vec<ScoreBreakdown>,
    pub mean: ScoreBreakdown,
    pub csv: String,
}

/// One row per session plus a `mean` row.
pub fn simulate(args: &SimulateArgs) -> Result<SimulateReport, CliError> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let policy = PolicySpec::parse(&args.policy, &cfg)?;
    let corpus = load_corpus(&args.corpus)?;
    let specs = session_specs(&corpus, &cfg.session, args.sessions, args.seed)?;
    let sessions = run_sessions(&policy, &specs, &cfg.session, &cfg.score)?;
    let mean = ScoreBreakdown::mean(&sessions);
    let mut csv = format!("# schema: sabr-simulate/1\nsession,policy,trace,{SCORE_COLUMNS}\n");
    for (spec, s) in specs.iter().zip(&sessions) {
        let _ = writeln!(csv, "{},{},{},{}", spec.id, policy.label(), spec.trace.name, score_fields(s));
    }
    let _ = writeln!(csv, "mean,{},,{}", policy.label(), score_fields(&mean));
    write_file(&args.out, &csv)?;
    Ok(SimulateReport { sessions, mean, csv })
}

// ---------------------------------------------------------------------------
// evaluate

pub struct EvaluateArgs {
    pub policies: Vec<String>,
    pub corpus: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub sessions: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PolicyScores {
    pub label: String,
    pub mean: ScoreBreakdown,
    pub sessions: Vec<ScoreBreakdown>,
}

/// Min-max normalization over every session of every policy, so the best
/// session maps to 1 and the worst to 0.
pub fn normalize_scores(utilities: &[f64]) -> Vec<f64> {
    let lo = utilities.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    utilities
        .iter()
        .map(|u| if hi > lo { (u - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

/// Writes `summary.csv` (mean components per policy) and `cdf.csv`
/// (per-session normalized utility with its empirical CDF). Every policy
/// sees the same sessions.
pub fn evaluate(args: &EvaluateArgs) -> Result<Vec<PolicyScores>, CliError> {
    if args.policies.is_empty() {
        return Err(CliError::Usage("evaluate needs at least one --policy".into()));
    }
    if args.sessions == 0 {
        return Err(CliError::Usage("--sessions must be positive".into()));
    }
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let policies = args
        .policies
        .iter()
        .map(|p| PolicySpec::parse(p, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = load_corpus(&args.corpus)?;
    let specs = session_specs(&corpus, &cfg.session, args.sessions, args.seed)?;
    let mut results = Vec::with_capacity(policies.len());
    for p in &policies {
        let sessions = run_sessions(p, &specs, &cfg.session, &cfg.score)?;
        results.push(PolicyScores {
            label: p.label().to_string(),
            mean: ScoreBreakdown::mean(&sessions),
            sessions,
        });
    }

    let mut summary = String::from(
        "# schema: sabr-evaluate-summary/1\npolicy,sessions,quality,smoothness,rebuffer_s,wasted_mb,bandwidth_mb,utility\n",
    );
    for r in &results {
        let m = &r.mean;
        let _ = writeln!(
            summary,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.label,
            r.sessions.len(),
            m.quality,
            m.smoothness,
            m.rebuffer_s,
            m.wasted_mb,
            m.bandwidth_mb,
            m.utility
        );
    }

    let all: Vec<f64> = results.iter().flat_map(|r| r.sessions.iter().map(|s| s.utility)).collect();
    let norm = normalize_scores(&all);
    let mut cdf = String::from("# schema: sabr-evaluate-cdf/1\npolicy,session,utility,normalized,cdf\n");
    let mut offset = 0;
    for r in &results {
        let n = r.sessions.len();
        let mut rows: Vec<(usize, f64, f64)> = (0..n).map(|i| (i, r.sessions[i].utility, norm[offset + i])).collect();
        rows.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
        for (rank, (i, u, x)) in rows.iter().enumerate() {
            let _ = writeln!(cdf, "{},{},{:.6},{:.6},{:.6}", r.label, i, u, x, (rank + 1) as f64 / n as f64);
        }
        offset += n;
    }
    write_file(&args.out.join("summary.csv"), &summary)?;
    write_file(&args.out.join("cdf.csv"), &cdf)?;
    Ok(results)
}

// ---------------------------------------------------------------------------
// collect

pub struct CollectArgs {
    pub corpus: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub sessions: usize,
    pub out: PathBuf,
}

/// Expert state-action pairs as JSON lines.
pub fn collect(args: &CollectArgs) -> Result<ExpertDataset, CliError> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let corpus = load_corpus(&args.corpus)?;
    let specs = session_specs(&corpus, &cfg.session, args.sessions, args.seed)?;
    let ds = collect_expert_dataset(&specs, &cfg.session, cfg.expert_horizon, &cfg.score)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    ds.save(&args.out)?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// train

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

struct CheckpointWriter {
    dir: PathBuf,
    started: Instant,
    timing: String,
    quiet: bool,
}

impl TrainObserver for CheckpointWriter {
    fn checkpoint(&mut self, epoch: usize, net: &PolicyNet) -> Result<(), TrainError> {
        net.save(&self.dir.join("checkpoints").join(format!("epoch_{epoch:05}.ckpt")))?;
        Ok(())
    }

    fn progress(&mut self, row: &LogRow) {
        let secs = self.started.elapsed().as_secs_f64();
        let _ = writeln!(self.timing, "{} {} {secs:.3}", row.stage, row.epoch);
        if !self.quiet {
            if let Some(u) = row.eval_utility {
                eprintln!("{} epoch {}: eval utility {u:.3} ({secs:.1}s)", row.stage, row.epoch);
            }
        }
    }
}

/// Both training stages. Writes `train_log.csv`, `imitation.ckpt`,
/// `best.ckpt`, `last.ckpt`, periodic checkpoints under `checkpoints/`, and
/// `timing.txt` with wall-clock seconds per logged epoch (kept out of the
/// CSV so reruns compare byte for byte).
pub fn train(args: &TrainArgs) -> Result<TrainOutcome, CliError> {
    train_with(args, false)
}

pub fn train_with(args: &TrainArgs, quiet: bool) -> Result<TrainOutcome, CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let tcfg = cfg
        .train
        .clone()
        .ok_or_else(|| CliError::Config(format!("{}: missing [train] section", args.config.display())))?;
    let corpus = match args.corpus.as_ref().or(cfg.corpus.as_ref()) {
        Some(dir) => load_corpus(dir)?,
        None => generate_synthetic_corpus(&cfg.generator.clone().unwrap_or_default(), tcfg.seed)?,
    };
    let dataset = args.dataset.as_deref().map(ExpertDataset::load).transpose()?;
    let resume = args.resume.as_deref().map(PolicyNet::load).transpose()?;
    let dir = args.out.join("checkpoints");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let mut observer = CheckpointWriter {
        dir: args.out.clone(),
        started: Instant::now(),
        timing: String::from("# stage epoch wall_clock_s\n"),
        quiet,
    };
    let outcome = training::train(
        &tcfg,
        &cfg.session,
        &cfg.score,
        &corpus,
        dataset.as_ref(),
        resume.as_ref(),
        &mut observer,
    )?;
    write_file(&args.out.join("train_log.csv"), &outcome.log.to_csv())?;
    outcome.imitation.save(&args.out.join("imitation.ckpt"))?;
    outcome.best.save(&args.out.join("best.ckpt"))?;
    outcome.last.save(&args.out.join("last.ckpt"))?;
    write_file(&args.out.join("timing.txt"), &observer.timing)?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// bench

/// Benchmark environments: E1 is the default five-video, three-level
/// session; E2 widens both the queue and the ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchEnv {
    E1,
    E2,
}

impl BenchEnv {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "E1" | "e1" => Ok(BenchEnv::E1),
            "E2" | "e2" => Ok(BenchEnv::E2),
            _ => Err(CliError::Usage(format!("unknown environment '{s}' (expected E1 or E2)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchEnv::E1 => "E1",
            BenchEnv::E2 => "E2",
        }
    }

    pub fn session(self, base: &SessionConfig) -> SessionConfig {
        let (queue_length, ladder_kbps) = match self {
            BenchEnv::E1 => (5, vec![750.0, 1200.0, 1850.0]),
            BenchEnv::E2 => (7, vec![300.0, 750.0, 1200.0, 1850.0, 2850.0, 4300.0]),
        };
        SessionConfig {
            queue_length,
            ladder_kbps,
            videos_per_session: base.videos_per_session.max(queue_length),
            ..base.clone()
        }
    }
}

pub struct BenchArgs {
    /// `fixed-preload`, `mpc`, `pdas-expert`, `neural` (a fresh network sized
    /// for each environment) or `neural:<checkpoint>`. Empty means all but
    /// checkpoints.
    pub policies: Vec<String>,
    pub envs: Vec<BenchEnv>,
    pub reps: usize,
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub policy: String,
    pub env: BenchEnv,
    pub reps: usize,
    /// Mean search nodes per decision (planners only).
    pub nodes_per_decision: f64,
    /// Network parameters touched per decision (neural only).
    pub params: usize,
    pub mean_latency_s: f64,
}

/// States drawn from fixed-preload sessions on a small synthetic corpus
/// with the environment's ladder.
pub fn bench_states(session: &SessionConfig, seed: u64, count: usize) -> Result<Vec<SessionState>, CliError> {
    let gen = GeneratorConfig {
        network_traces: 3,
        videos: 2 * session.queue_length.max(session.videos_per_session),
        ladder_kbps: session.ladder_kbps.clone(),
        ..GeneratorConfig::default()
    };
    let corpus = generate_synthetic_corpus(&gen, seed)?;
    let specs = session_specs(&corpus, session, 3, seed)?;
    let mut all = Vec::new();
    for spec in &specs {
        let mut state = spec.start(session)?;
        let mut policy = FixedPreload::default();
        while !state.is_done() {
            all.push(state.clone());
            let mask = state.valid_actions();
            let a = policy.decide(&state, &mask)?;
            state.step(a)?;
        }
    }
    if all.is_empty() {
        return Err(CliError::Validation("benchmark sessions produced no states".into()));
    }
    let stride = (all.len() / count.max(1)).max(1);
    Ok(all.into_iter().step_by(stride).take(count).collect())
}

fn time_policy(policy: &mut dyn Policy, states: &[SessionState], reps: usize) -> Result<f64, CliError> {
    let masks: Vec<_> = states.iter().map(|s| s.valid_actions()).collect();
    let start = Instant::now();
    for r in 0..reps {
        let i = r % states.len();
        std::hint::black_box(policy.decide(&states[i], &masks[i])?);
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

/// Mean per-decision latency per policy and environment. `bench.csv` holds
/// the deterministic columns (search nodes, parameter counts); latencies go
/// to `bench_timing.txt`.
pub fn bench(args: &BenchArgs) -> Result<Vec<BenchRow>, CliError> {
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let names: Vec<String> = if args.policies.is_empty() {
        ["fixed-preload", "mpc", "pdas-expert", "neural"].map(String::from).to_vec()
    } else {
        args.policies.clone()
    };
    let envs = if args.envs.is_empty() {
        vec![BenchEnv::E1, BenchEnv::E2]
    } else {
        args.envs.clone()
    };
    let mut rows = Vec::new();
    for &env in &envs {
        let session = env.session(&cfg.session);
        let states = bench_states(&session, args.seed, 64)?;
        for name in &names {
            let (nodes, params, latency);
            if name == "neural" {
                let arch = ArchConfig::for_env(session.queue_length, session.num_levels());
                let net = PolicyNet::init(&arch, args.seed)?;
                params = net.num_params();
                let mut p = NeuralPolicy::greedy(net);
                latency = time_policy(&mut p, &states, args.reps)?;
                nodes = 0.0;
            } else {
                let spec = PolicySpec::parse(name, &cfg)?;
                spec.check_session(&session)?;
                match &spec {
                    PolicySpec::Mpc(c) => {
                        let mut p = MpcPolicy::new(*c, cfg.score);
                        latency = time_policy(&mut p, &states, args.reps)?;
                        nodes = p.nodes as f64 / args.reps as f64;
                        params = 0;
                    }
                    PolicySpec::Expert(h) => {
                        let mut p = ExpertPolicy::new(*h, cfg.score);
                        latency = time_policy(&mut p, &states, args.reps)?;
                        nodes = p.nodes as f64 / args.reps as f64;
                        params = 0;
                    }
                    PolicySpec::Neural { net, .. } => {
                        params = net.num_params();
                        let mut p = NeuralPolicy::greedy(net.clone());
                        latency = time_policy(&mut p, &states, args.reps)?;
                        nodes = 0.0;
                    }
                    PolicySpec::FixedPreload => {
                        let mut p = FixedPreload::default();
                        latency = time_policy(&mut p, &states, args.reps)?;
                        nodes = 0.0;
                        params = 0;
                    }
                }
            }
            let label = if name == "neural" { "neural".to_string() } else { PolicySpec::parse(name, &cfg)?.label().to_string() };
            rows.push(BenchRow {
                policy: label,
                env,
                reps: args.reps,
                nodes_per_decision: nodes,
                params,
                mean_latency_s: latency,
            });
        }
    }

    let mut csv = String::from("# schema: sabr-bench/1\npolicy,env,videos,levels,reps,nodes_per_decision,params\n");
    let mut timing = String::from("# policy env mean_latency_us\n");
    for r in &rows {
        let s = r.env.session(&cfg.session);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.3},{}",
            r.policy,
            r.env.name(),
            s.queue_length,
            s.num_levels(),
            r.reps,
            r.nodes_per_decision,
            r.params
        );
        let _ = writeln!(timing, "{} {} {:.3}", r.policy, r.env.name(), r.mean_latency_s * 1e6);
    }
    write_file(&args.out.join("bench.csv"), &csv)?;
    write_file(&args.out.join("bench_timing.txt"), &timing)?;
    Ok(rows)
}

/// Latency of `policy` in E2 over E1, when both were measured.
pub fn latency_ratio(rows: &[BenchRow], policy: &str) -> Option<f64> {
    let get = |env| rows.iter().find(|r| r.policy == policy && r.env == env).map(|r| r.mean_latency_s);
    Some(get(BenchEnv::E2)? / get(BenchEnv::E1)?)
}

/// Search-node growth of `policy` from E1 to E2.
pub fn node_ratio(rows: &[BenchRow], policy: &str) -> Option<f64> {
    let get = |env| rows.iter().find(|r| r.policy == policy && r.env == env).map(|r| r.nodes_per_decision);
    Some(get(BenchEnv::E2)? / get(BenchEnv::E1)?)
}
