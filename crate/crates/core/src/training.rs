//! Imitation pretraining from the expert, then clipped policy-gradient
//! fine-tuning of both actors against the shared critic.

use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::ExpertPolicy;
use crate::derive_seed;
use crate::features::{build_ba_observation, build_bm_observation, BaObservation, BmObservation};
use crate::neural::{
    argmax_action, il_gradients, il_gradients_of, rl_gradients, Adam, Agent, ArchConfig, IlSample, NeuralError,
    NeuralPolicy, PolicyNet, RlLossConfig, RlSample, RlStats,
};
use crate::scoring::{outcome_reward, ScoreBreakdown, ScoreCoefficients};
use crate::sim::{session_specs, Action, Policy, PolicyError, SessionConfig, SessionSpec, SimError};
use crate::traces::TraceCorpus;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Expert dataset

/// One expert decision: the buffer agent's view and choice, plus the bitrate
/// agent's view and choice when the expert downloaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub session: usize,
    pub bm_obs: BmObservation,
    pub bm_mask: Vec<bool>,
    pub bm_action: usize,
    pub ba: Option<(BaObservation, usize)>,
}

impl ExpertRecord {
    fn check(&self, num_levels: Option<usize>) -> Result<(), String> {
        if !self.bm_mask.get(self.bm_action).copied().unwrap_or(false) {
            return Err(format!("masked video choice {}", self.bm_action));
        }
        if self.bm_mask.len() != self.bm_obs.slots.len() + 1 {
            return Err("mask and observation widths differ".into());
        }
        if let Some((obs, level)) = &self.ba {
            if obs.queue_pos != self.bm_action {
                return Err("bitrate observation is for a different video".into());
            }
            if num_levels.is_some_and(|n| *level >= n) {
                return Err(format!("bitrate index {level} out of range"));
            }
        } else if self.bm_action + 1 != self.bm_mask.len() {
            return Err("download without a bitrate choice".into());
        }
        Ok(())
    }

    pub fn bm_sample(&self) -> IlSample {
        IlSample {
            agent: Agent::Bm,
            input: self.bm_obs.to_vector(),
            mask: self.bm_mask.clone(),
            target: self.bm_action,
        }
    }

    pub fn ba_sample(&self, num_levels: usize) -> Option<IlSample> {
        self.ba.as_ref().map(|(obs, level)| IlSample {
            agent: Agent::Ba,
            input: obs.to_vector(),
            mask: vec![true; num_levels],
            target: *level,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertDataset {
    pub num_levels: usize,
    pub records: Vec<ExpertRecord>,
}

impl ExpertDataset {
    pub fn bm_pairs(&self) -> usize {
        self.records.len()
    }

    pub fn ba_pairs(&self) -> usize {
        self.records.iter().filter(|r| r.ba.is_some()).count()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        for (i, r) in self.records.iter().enumerate() {
            r.check(Some(self.num_levels))
                .map_err(|e| TrainError::Dataset(format!("record {i}: {e}")))?;
        }
        Ok(())
    }

    /// JSON lines: a header with the ladder size, then one record per line.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{{\"num_levels\":{}}}", self.num_levels)?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r).map_err(|e| TrainError::Dataset(e.to_string()))?;
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        #[derive(Deserialize)]
        struct Header {
            num_levels: usize,
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header: Header = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(|e| TrainError::Dataset(format!("header: {e}")))?,
            None => return Err(TrainError::Dataset("empty file".into())),
        };
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(&line)
                .map_err(|e| TrainError::Dataset(format!("line {}: {e}", i + 2)))?;
            records.push(r);
        }
        let ds = ExpertDataset {
            num_levels: header.num_levels,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Runs the expert over `specs` and splits each step into the two agents'
/// state-action pairs.
pub fn collect_expert_dataset(
    specs: &[SessionSpec],
    cfg: &SessionConfig,
    horizon: usize,
    coeffs: &ScoreCoefficients,
) -> Result<ExpertDataset, TrainError> {
    let mut records = Vec::new();
    let q = cfg.queue_length;
    for spec in specs {
        let mut expert = ExpertPolicy::new(horizon, *coeffs);
        let (traj, _) = spec.run(&mut expert, cfg, coeffs)?;
        for step in traj.steps {
            let action = step.outcome.action;
            let ba = match (action, step.ba_obs) {
                (Action::Download { level, .. }, Some(obs)) => Some((obs, level)),
                _ => None,
            };
            records.push(ExpertRecord {
                session: spec.id,
                bm_obs: step.bm_obs,
                bm_mask: step.bm_mask,
                bm_action: action.bm_index(q),
                ba,
            });
        }
    }
    let ds = ExpertDataset {
        num_levels: cfg.num_levels(),
        records,
    };
    ds.validate()?;
    Ok(ds)
}

/// Expert labels for the states a learner visits. The learner's own actions
/// drive each session and the expert is only asked what it would have done,
/// so states the expert never reaches on its own (a stall right after a
/// scroll, say) still get a label. With `seed` the learner samples from its
/// distributions; without it the learner is greedy. When a learner action
/// leaves the observation unchanged the expert's action is taken instead, so
/// a greedy learner stuck in a loop contributes that state once and moves on.
pub fn collect_learner_states(
    net: &PolicyNet,
    specs: &[SessionSpec],
    cfg: &SessionConfig,
    horizon: usize,
    coeffs: &ScoreCoefficients,
    seed: Option<u64>,
) -> Result<Vec<ExpertRecord>, TrainError> {
    let q = cfg.queue_length;
    let mut records = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let mut learner = match seed {
            Some(s) => NeuralPolicy::sampling(net.clone(), derive_seed(s, i as u64)),
            None => NeuralPolicy::greedy(net.clone()),
        };
        let mut expert = ExpertPolicy::new(horizon, *coeffs);
        let mut state = spec.start(cfg)?;
        let mut stuck = false;
        while !state.is_done() {
            let mask = state.valid_actions();
            let label = expert.decide(&state, &mask)?;
            let bm_obs = build_bm_observation(&state);
            if !stuck {
                let ba = match label {
                    Action::Download { level, .. } => {
                        let obs = build_ba_observation(&state, label.bm_index(q))
                            .map_err(|e| TrainError::Dataset(e.to_string()))?;
                        Some((obs, level))
                    }
                    Action::Sleep => None,
                };
                records.push(ExpertRecord {
                    session: spec.id,
                    bm_obs: bm_obs.clone(),
                    bm_mask: mask.bm_mask(),
                    bm_action: label.bm_index(q),
                    ba,
                });
            }
            let act = if stuck { label } else { learner.decide(&state, &mask)? };
            state.step(act)?;
            stuck = !stuck && act != label && build_bm_observation(&state) == bm_obs;
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Configuration

/// Every key is required when read from a file so a typo or omission is
/// reported by name rather than silently defaulted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Adam step size for both stages.
    pub alpha: f64,
    pub gamma: f64,
    /// Apply `gamma` per simulated second instead of per decision, so a run
    /// of short sleeps is discounted by the time it spans.
    pub discount_per_second: bool,
    pub lambda_gae: f64,
    pub epsilon_clip: f64,
    pub beta_entropy: f64,
    /// Epochs without a new best mean reward before the entropy weight decays.
    pub entropy_patience: usize,
    pub entropy_decay: f64,
    pub value_coef: f64,
    /// Whether the value loss also trains the actors' hidden layers.
    pub critic_into_actors: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub expert_sessions: usize,
    pub expert_horizon: usize,
    /// Fraction of expert sessions held out to measure agreement.
    pub holdout_fraction: f64,
    pub il_epochs: usize,
    /// Records resampled from the stored dataset per imitation epoch.
    pub il_batch_size: usize,
    /// Records per gradient step within an imitation epoch.
    pub il_minibatch_size: usize,
    pub il_eval_every: usize,
    /// Rounds of relabelling: the imitated policy drives fresh sessions, the
    /// expert labels every state it visits, and imitation resumes on the
    /// grown dataset.
    pub dagger_rounds: usize,
    pub dagger_sessions: usize,
    /// Imitation epochs after each relabelling round.
    pub dagger_epochs: usize,
    /// Let the learner sample actions while relabelling instead of acting
    /// greedily.
    pub dagger_sampling: bool,
    pub rl_epochs: usize,
    pub rollout_sessions: usize,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub eval_sessions: usize,
    pub eval_every: usize,
    /// Write a checkpoint every this many RL epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            alpha: 1e-4,
            gamma: 0.95,
            discount_per_second: false,
            lambda_gae: 0.95,
            epsilon_clip: 0.2,
            beta_entropy: 0.01,
            entropy_patience: 100,
            entropy_decay: 0.5,
            value_coef: 0.5,
            critic_into_actors: false,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            critic_hidden: vec![64],
            expert_sessions: 300,
            expert_horizon: 3,
            holdout_fraction: 0.2,
            il_epochs: 2500,
            il_batch_size: 4096,
            il_minibatch_size: 256,
            il_eval_every: 100,
            dagger_rounds: 3,
            dagger_sessions: 100,
            dagger_epochs: 500,
            dagger_sampling: false,
            rl_epochs: 200,
            rollout_sessions: 16,
            ppo_epochs: 4,
            minibatch_size: 256,
            eval_sessions: 32,
            eval_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        let positive = [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lambda_gae", self.lambda_gae),
            ("epsilon_clip", self.epsilon_clip),
            ("entropy_decay", self.entropy_decay),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epsilon_clip >= 1.0 {
            return bad("epsilon_clip must be below 1");
        }
        if self.gamma > 1.0 || self.lambda_gae > 1.0 || self.entropy_decay > 1.0 {
            return bad("gamma, lambda_gae and entropy_decay must not exceed 1");
        }
        if !(self.beta_entropy >= 0.0 && self.value_coef >= 0.0 && self.max_grad_norm >= 0.0) {
            return bad("beta_entropy, value_coef and max_grad_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        let counts = [
            ("il_batch_size", self.il_batch_size),
            ("il_minibatch_size", self.il_minibatch_size),
            ("il_eval_every", self.il_eval_every),
            ("rollout_sessions", self.rollout_sessions),
            ("ppo_epochs", self.ppo_epochs),
            ("minibatch_size", self.minibatch_size),
            ("eval_sessions", self.eval_sessions),
            ("eval_every", self.eval_every),
            ("entropy_patience", self.entropy_patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.il_epochs > 0 && self.expert_sessions == 0 {
            return bad("imitation needs expert_sessions > 0");
        }
        if self.dagger_rounds > 0 && (self.il_epochs == 0 || self.dagger_sessions == 0) {
            return bad("relabelling rounds need il_epochs > 0 and dagger_sessions > 0");
        }
        Ok(())
    }

    pub fn arch(&self, session: &SessionConfig) -> ArchConfig {
        ArchConfig {
            hidden: self.hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            ..ArchConfig::for_env(session.queue_length, session.num_levels())
        }
    }

    fn loss_config(&self, beta: f64) -> RlLossConfig {
        RlLossConfig {
            clip_eps: self.epsilon_clip,
            entropy_beta: beta,
            value_coef: self.value_coef,
            critic_into_actors: self.critic_into_actors,
        }
    }
}

// ---------------------------------------------------------------------------
// Imitation

fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// One cross-entropy step on `batch`. Returns the loss before the step.
pub fn il_update(net: &mut PolicyNet, adam: &mut Adam, batch: &[IlSample]) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Dataset("empty imitation batch".into()));
    }
    let (loss, grad) = il_gradients(net, batch)?;
    adam.step(net.params_mut(), &grad);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Agreement {
    pub bm: f64,
    pub ba: f64,
}

/// Fraction of records where the greedy action matches the expert's.
pub fn agreement(net: &PolicyNet, records: &[ExpertRecord], num_levels: usize) -> Result<Agreement, TrainError> {
    let (mut bm_hit, mut ba_hit, mut ba_n) = (0usize, 0usize, 0usize);
    for r in records {
        let s = r.bm_sample();
        let out = net.forward(Agent::Bm, &s.input, &s.mask)?;
        bm_hit += (argmax_action(&out.probs) == s.target) as usize;
        if let Some(s) = r.ba_sample(num_levels) {
            let out = net.forward(Agent::Ba, &s.input, &s.mask)?;
            ba_hit += (argmax_action(&out.probs) == s.target) as usize;
            ba_n += 1;
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 1.0 } else { h as f64 / n as f64 };
    Ok(Agreement {
        bm: frac(bm_hit, records.len()),
        ba: frac(ba_hit, ba_n),
    })
}

/// Splits records by session so no held-out session leaks into training.
pub fn holdout_split(ds: &ExpertDataset, fraction: f64, seed: u64) -> (Vec<ExpertRecord>, Vec<ExpertRecord>) {
    let mut sessions: Vec<usize> = ds.records.iter().map(|r| r.session).collect();
    sessions.sort_unstable();
    sessions.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sessions.shuffle(&mut rng);
    let n_hold = ((sessions.len() as f64) * fraction).round() as usize;
    let held: std::collections::HashSet<usize> = sessions[..n_hold].iter().copied().collect();
    ds.records.iter().cloned().partition(|r| !held.contains(&r.session))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IlEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub agreement: Agreement,
}

/// Imitation epochs over `train`. Each epoch resamples `il_batch_size`
/// records uniformly from the stored dataset and steps through them in
/// minibatches. Agreement on `held_out` is reported every `il_eval_every`
/// epochs and at the last one.
pub fn il_pretrain(
    net: &mut PolicyNet,
    train: &[ExpertRecord],
    held_out: &[ExpertRecord],
    num_levels: usize,
    config: &TrainConfig,
) -> Result<Vec<IlEpoch>, TrainError> {
    imitate(net, train, held_out, num_levels, config, config.il_epochs, 0, derive_seed(config.seed, 10))
}

/// `epochs` imitation epochs numbered from `first + 1`.
#[allow(clippy::too_many_arguments)]
fn imitate(
    net: &mut PolicyNet,
    train: &[ExpertRecord],
    held_out: &[ExpertRecord],
    num_levels: usize,
    config: &TrainConfig,
    epochs: usize,
    first: usize,
    seed: u64,
) -> Result<Vec<IlEpoch>, TrainError> {
    let mut curve = Vec::new();
    if epochs == 0 {
        return Ok(curve);
    }
    if train.is_empty() {
        return Err(TrainError::Dataset("no imitation records".into()));
    }
    let bm: Vec<IlSample> = train.iter().map(ExpertRecord::bm_sample).collect();
    let ba: Vec<Option<IlSample>> = train.iter().map(|r| r.ba_sample(num_levels)).collect();
    let mut adam = Adam::new(net.num_params(), config.alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = Vec::with_capacity(config.il_batch_size);
    let mut batch = Vec::with_capacity(2 * config.il_minibatch_size);
    for epoch in 1..=epochs {
        draw.clear();
        draw.extend((0..config.il_batch_size).map(|_| rng.gen_range(0..train.len())));
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in draw.chunks(config.il_minibatch_size) {
            batch.clear();
            for &i in chunk {
                batch.push(&bm[i]);
                batch.extend(ba[i].as_ref());
            }
            let (loss, mut grad) = il_gradients_of(net, &batch)?;
            clip_gradient(&mut grad, config.max_grad_norm);
            adam.step(net.params_mut(), &grad);
            loss_sum += loss;
            steps += 1;
        }
        if epoch % config.il_eval_every == 0 || epoch == epochs {
            curve.push(IlEpoch {
                epoch: first + epoch,
                loss: loss_sum / steps as f64,
                agreement: agreement(net, held_out, num_levels)?,
            });
        }
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Reinforcement

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub sample: RlSample,
    pub reward: f64,
    pub value: f64,
    /// Simulated seconds the step took.
    pub duration: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// `A_t = Σ (γλ)^i δ_{t+i}` with `δ_t = r_t + γ V(s_{t+1})(1 − done_t) − V(s_t)`.
/// The value after the last step is taken as 0.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    compute_gae_with(rewards, values, dones, &vec![gamma; rewards.len()], lambda)
}

/// GAE with a separate discount for each step, as when steps differ in length.
pub fn compute_gae_with(rewards: &[f64], values: &[f64], dones: &[bool], discounts: &[f64], lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let gamma = discounts[t];
        let delta = rewards[t] + gamma * next_v * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    adv
}

/// One session under the sampling policy, recording what the update needs.
pub fn collect_rollout(
    net: &PolicyNet,
    spec: &SessionSpec,
    cfg: &SessionConfig,
    coeffs: &ScoreCoefficients,
    seed: u64,
) -> Result<Rollout, TrainError> {
    let mut policy = NeuralPolicy::sampling(net.clone(), seed);
    let mut state = spec.start(cfg)?;
    let mut steps = Vec::new();
    while !state.is_done() {
        let mask = state.valid_actions();
        let d = policy.decide_full(&state, &mask)?;
        let out = state.step(d.action)?;
        steps.push(RolloutStep {
            sample: RlSample {
                bm: d.bm,
                ba: d.ba,
                critic_ba: d.critic_ba,
                advantage: 0.0,
                ret: 0.0,
            },
            reward: outcome_reward(&out, coeffs),
            value: d.value,
            duration: out.duration,
            done: out.session_done,
        });
    }
    Ok(Rollout { steps })
}

/// Fills advantages and critic targets, normalizing advantages over the batch.
pub fn prepare_samples(rollouts: &[Rollout], gamma: f64, per_second: bool, lambda: f64) -> Vec<RlSample> {
    let mut out = Vec::new();
    for r in rollouts {
        let rewards: Vec<f64> = r.steps.iter().map(|s| s.reward).collect();
        let values: Vec<f64> = r.steps.iter().map(|s| s.value).collect();
        let dones: Vec<bool> = r.steps.iter().map(|s| s.done).collect();
        let discounts: Vec<f64> = r
            .steps
            .iter()
            .map(|s| if per_second { gamma.powf(s.duration) } else { gamma })
            .collect();
        let adv = compute_gae_with(&rewards, &values, &dones, &discounts, lambda);
        for (s, a) in r.steps.iter().zip(adv) {
            let mut sample = s.sample.clone();
            sample.advantage = a;
            sample.ret = a + s.value;
            out.push(sample);
        }
    }
    let n = out.len() as f64;
    if n > 1.0 {
        let mean = out.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = out.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-8);
        for s in &mut out {
            s.advantage = (s.advantage - mean) / sd;
        }
    }
    out
}

/// Several passes of shuffled minibatch steps on one batch of samples.
pub fn rl_update(
    net: &mut PolicyNet,
    adam: &mut Adam,
    samples: &[RlSample],
    config: &TrainConfig,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<RlStats, TrainError> {
    let loss_cfg = config.loss_config(beta);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last = RlStats::default();
    let mut batch = Vec::with_capacity(config.minibatch_size);
    for _ in 0..config.ppo_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let (stats, mut grad) = rl_gradients(net, &batch, &loss_cfg)?;
            clip_gradient(&mut grad, config.max_grad_norm);
            adam.step(net.params_mut(), &grad);
            last = stats;
        }
    }
    Ok(last)
}

/// Mean greedy utility over `specs`.
pub fn evaluate_policy(
    net: &PolicyNet,
    specs: &[SessionSpec],
    cfg: &SessionConfig,
    coeffs: &ScoreCoefficients,
) -> Result<ScoreBreakdown, TrainError> {
    let mut scores = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut p = NeuralPolicy::greedy(net.clone());
        scores.push(spec.run(&mut p, cfg, coeffs)?.1);
    }
    Ok(ScoreBreakdown::mean(&scores))
}

/// Halves (by `decay`) the entropy weight after `patience` epochs without a
/// new best mean reward.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropySchedule {
    pub beta: f64,
    decay: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl EntropySchedule {
    pub fn new(beta: f64, decay: f64, patience: usize) -> Self {
        EntropySchedule {
            beta,
            decay,
            patience,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Records one epoch's mean reward; returns true when the weight decayed.
    pub fn observe(&mut self, mean_reward: f64) -> bool {
        if mean_reward > self.best {
            self.best = mean_reward;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.beta *= self.decay;
            self.stale = 0;
            return true;
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Full pipeline

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: &'static str,
    pub loss: f64,
    pub mean_reward: Option<f64>,
    pub eval_utility: Option<f64>,
    pub bm_agreement: Option<f64>,
    pub ba_agreement: Option<f64>,
    pub entropy_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "# schema: sabr-train-log/1\nepoch,stage,loss,mean_reward,eval_utility,bm_agreement,ba_agreement,entropy_weight\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{},{},{},{:.6}",
                r.epoch,
                r.stage,
                r.loss,
                opt(r.mean_reward),
                opt(r.eval_utility),
                opt(r.bm_agreement),
                opt(r.ba_agreement),
                r.entropy_weight
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best evaluation utility (the imitation result
    /// counts as RL epoch 0).
    pub best: PolicyNet,
    pub best_epoch: usize,
    pub imitation: PolicyNet,
    pub last: PolicyNet,
    pub log: TrainLog,
    pub il_curve: Vec<IlEpoch>,
}

/// Called after evaluated RL epochs and at checkpoint intervals.
pub trait TrainObserver {
    fn checkpoint(&mut self, _epoch: usize, _net: &PolicyNet) -> Result<(), TrainError> {
        Ok(())
    }

    fn progress(&mut self, _row: &LogRow) {}
}

impl TrainObserver for () {}

/// Both stages end to end on `corpus`. Expert data, rollouts and evaluation
/// sessions all draw from `corpus` under distinct seed streams. With
/// `resume` the imitation stage is skipped and fine-tuning starts from the
/// given parameters.
pub fn train(
    config: &TrainConfig,
    session: &SessionConfig,
    coeffs: &ScoreCoefficients,
    corpus: &TraceCorpus,
    dataset: Option<&ExpertDataset>,
    resume: Option<&PolicyNet>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    session.validate()?;
    let arch = config.arch(session);
    let mut net = match resume {
        Some(n) if n.arch() != &arch => {
            return Err(TrainError::Config("checkpoint architecture does not match the config".into()))
        }
        Some(n) => n.clone(),
        None => PolicyNet::init(&arch, derive_seed(config.seed, 1))?,
    };
    let mut log = TrainLog::default();
    let eval_specs = session_specs(corpus, session, config.eval_sessions, derive_seed(config.seed, 2))?;

    let mut il_curve = Vec::new();
    if config.il_epochs > 0 && resume.is_none() {
        let collected;
        let ds = match dataset {
            Some(d) => d,
            None => {
                let specs = session_specs(corpus, session, config.expert_sessions, derive_seed(config.seed, 3))?;
                collected = collect_expert_dataset(&specs, session, config.expert_horizon, coeffs)?;
                &collected
            }
        };
        if ds.num_levels != session.num_levels() {
            return Err(TrainError::Dataset("dataset ladder does not match the session config".into()));
        }
        let (mut train_recs, held) = holdout_split(ds, config.holdout_fraction, derive_seed(config.seed, 4));
        let held = if held.is_empty() { train_recs.clone() } else { held };
        il_curve = il_pretrain(&mut net, &train_recs, &held, ds.num_levels, config)?;
        for round in 0..config.dagger_rounds {
            let salt = round as u64;
            let specs = session_specs(
                corpus,
                session,
                config.dagger_sessions,
                derive_seed(derive_seed(config.seed, 7), salt),
            )?;
            let learner_seed = config
                .dagger_sampling
                .then(|| derive_seed(derive_seed(config.seed, 8), salt));
            train_recs.extend(collect_learner_states(
                &net,
                &specs,
                session,
                config.expert_horizon,
                coeffs,
                learner_seed,
            )?);
            let first = config.il_epochs + round * config.dagger_epochs;
            let seed = derive_seed(derive_seed(config.seed, 9), salt);
            il_curve.extend(imitate(
                &mut net,
                &train_recs,
                &held,
                ds.num_levels,
                config,
                config.dagger_epochs,
                first,
                seed,
            )?);
        }
        for e in &il_curve {
            let row = LogRow {
                epoch: e.epoch,
                stage: "il",
                loss: e.loss,
                mean_reward: None,
                eval_utility: None,
                bm_agreement: Some(e.agreement.bm),
                ba_agreement: Some(e.agreement.ba),
                entropy_weight: config.beta_entropy,
            };
            observer.progress(&row);
            log.rows.push(row);
        }
    }
    let imitation = net.clone();
    let mut best_utility = evaluate_policy(&net, &eval_specs, session, coeffs)?.utility;
    let mut best = net.clone();
    let mut best_epoch = 0;
    let row = LogRow {
        epoch: 0,
        stage: "rl",
        loss: 0.0,
        mean_reward: None,
        eval_utility: Some(best_utility),
        bm_agreement: None,
        ba_agreement: None,
        entropy_weight: config.beta_entropy,
    };
    observer.progress(&row);
    log.rows.push(row);

    let mut adam = Adam::new(net.num_params(), config.alpha);
    let mut schedule = EntropySchedule::new(config.beta_entropy, config.entropy_decay, config.entropy_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 5));
    for epoch in 1..=config.rl_epochs {
        let epoch_seed = derive_seed(derive_seed(config.seed, 6), epoch as u64);
        let specs = session_specs(corpus, session, config.rollout_sessions, epoch_seed)?;
        let mut rollouts = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            rollouts.push(collect_rollout(&net, spec, session, coeffs, derive_seed(epoch_seed, 1000 + i as u64))?);
        }
        let mean_reward = rollouts.iter().map(Rollout::total_reward).sum::<f64>() / rollouts.len() as f64;
        let samples = prepare_samples(&rollouts, config.gamma, config.discount_per_second, config.lambda_gae);
        let beta = schedule.beta;
        let stats = rl_update(&mut net, &mut adam, &samples, config, beta, &mut rng)?;
        schedule.observe(mean_reward);
        let eval_utility = if epoch % config.eval_every == 0 || epoch == config.rl_epochs {
            let u = evaluate_policy(&net, &eval_specs, session, coeffs)?.utility;
            if u > best_utility {
                best_utility = u;
                best = net.clone();
                best_epoch = epoch;
            }
            Some(u)
        } else {
            None
        };
        let row = LogRow {
            epoch,
            stage: "rl",
            loss: stats.loss,
            mean_reward: Some(mean_reward),
            eval_utility,
            bm_agreement: None,
            ba_agreement: None,
            entropy_weight: beta,
        };
        observer.progress(&row);
        log.rows.push(row);
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            observer.checkpoint(epoch, &net)?;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        imitation,
        last: net,
        log,
        il_curve,
    })
}

#[cfg(test)]
mod tests;
