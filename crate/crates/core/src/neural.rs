//! Two small actors and a shared critic, with hand-written backprop.
//!
//! All weights live in one flat vector so the optimizer, the finite
//! difference checks and checkpoints can treat the model as a single array.
//! Each actor is a leaky-ReLU MLP ending in a masked softmax. The critic reads
//! the concatenated last hidden layers of both actors. Its bitrate half comes
//! from a fixed reference video rather than the one just picked, so the value
//! depends on the state alone and never on the action being scored.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{bm_input_width, build_ba_observation, build_bm_observation, critic_ba_observation, BA_INPUT_WIDTH};
use crate::sim::{Action, ActionMask, Policy, PolicyError, SessionState};

pub const LEAKY_SLOPE: f64 = 0.01;
/// Output layers start this much smaller than hidden ones.
const OUTPUT_INIT_SCALE: f64 = 0.1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SABRCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("every action is masked")]
    EmptyMask,
    #[error("non-finite {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Agent {
    /// Buffer management: which video to fetch, or sleep.
    Bm,
    /// Bitrate adaptation.
    Ba,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub bm_inputs: usize,
    pub bm_actions: usize,
    pub ba_inputs: usize,
    pub ba_actions: usize,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::for_env(5, 3)
    }
}

impl ArchConfig {
    pub fn for_env(queue_length: usize, levels: usize) -> Self {
        ArchConfig {
            bm_inputs: bm_input_width(queue_length),
            bm_actions: queue_length + 1,
            ba_inputs: BA_INPUT_WIDTH,
            ba_actions: levels,
            hidden: vec![64, 64],
            critic_hidden: vec![64],
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.hidden.is_empty() {
            return Err(NeuralError::Config("actors need at least one hidden layer".into()));
        }
        let widths = [self.bm_inputs, self.bm_actions, self.ba_inputs, self.ba_actions];
        if widths
            .iter()
            .chain(&self.hidden)
            .chain(&self.critic_hidden)
            .any(|&w| w == 0)
        {
            return Err(NeuralError::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Offset of the `outputs × inputs` row-major weight block.
    w: usize,
    /// Offset of the bias vector.
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    fn new(widths: &[usize], offset: &mut usize) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let l = Layer {
                    inputs: w[0],
                    outputs: w[1],
                    w: *offset,
                    b: *offset + w[0] * w[1],
                };
                *offset += w[0] * w[1] + w[1];
                l
            })
            .collect();
        Mlp { layers }
    }

    /// Forward pass over `rows` stacked inputs (row-major `rows × inputs`).
    fn forward(&self, theta: &[f64], x: &[f64], rows: usize) -> Trace {
        debug_assert_eq!(x.len(), rows * self.layers[0].inputs);
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(rows * l.outputs);
            for _ in 0..rows {
                out.extend_from_slice(&theta[l.b..l.b + l.outputs]);
            }
            // out (rows × outputs) += input (rows × inputs) · Wᵀ
            gemm(
                rows,
                l.inputs,
                l.outputs,
                (&acts[i], l.inputs as isize, 1),
                (&theta[l.w..], 1, l.inputs as isize),
                (&mut out, l.outputs as isize, 1),
            );
            if i < last {
                out.iter_mut().for_each(|v| *v = leaky(*v));
            }
            acts.push(out);
        }
        Trace { rows, acts }
    }

    /// Backprop of `d_out` (gradient w.r.t. the stacked outputs) plus an
    /// optional extra gradient on the last hidden activation. Accumulates
    /// into `grad`; returns the gradient w.r.t. the input when asked for.
    fn backward(
        &self,
        theta: &[f64],
        trace: &Trace,
        d_out: Vec<f64>,
        d_last_hidden: Option<&[f64]>,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let rows = trace.rows;
        let mut delta = d_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[i];
            for r in 0..rows {
                for (g, d) in grad[l.b..l.b + l.outputs]
                    .iter_mut()
                    .zip(&delta[r * l.outputs..(r + 1) * l.outputs])
                {
                    *g += d;
                }
            }
            // dW (outputs × inputs) += deltaᵀ · input
            gemm(
                l.outputs,
                rows,
                l.inputs,
                (&delta, 1, l.outputs as isize),
                (input, l.inputs as isize, 1),
                (&mut grad[l.w..l.w + l.outputs * l.inputs], l.inputs as isize, 1),
            );
            if i == 0 && !want_input {
                return None;
            }
            let mut d_in = vec![0.0; rows * l.inputs];
            // d_in (rows × inputs) = delta · W
            gemm(
                rows,
                l.outputs,
                l.inputs,
                (&delta, l.outputs as isize, 1),
                (&theta[l.w..], l.inputs as isize, 1),
                (&mut d_in, l.inputs as isize, 1),
            );
            if i == self.layers.len() - 1 {
                if let Some(extra) = d_last_hidden {
                    d_in.iter_mut().zip(extra).for_each(|(d, e)| *d += e);
                }
            }
            if i > 0 {
                // `input` is a leaky-ReLU output; its sign matches the pre-activation.
                for (d, a) in d_in.iter_mut().zip(input) {
                    if *a < 0.0 {
                        *d *= LEAKY_SLOPE;
                    }
                }
            }
            delta = d_in;
        }
        Some(delta)
    }
}

/// `C += A·B` for an `m × k` by `k × n` product; each operand is a slice
/// with its row and column strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: (&mut [f64], isize, isize),
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(a.0.len() as isize >= span(m, k, a.1, a.2));
    assert!(b.0.len() as isize >= span(k, n, b.1, b.2));
    assert!(c.0.len() as isize >= span(m, n, c.1, c.2));
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[derive(Debug, Clone)]
struct Trace {
    rows: usize,
    acts: Vec<Vec<f64>>,
}

impl Trace {
    fn width(&self, layer: usize) -> usize {
        self.acts[layer].len() / self.rows
    }

    fn output_row(&self, r: usize) -> &[f64] {
        let a = &self.acts[self.acts.len() - 1];
        let w = self.width(self.acts.len() - 1);
        &a[r * w..(r + 1) * w]
    }

    fn last_hidden(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

/// Softmax restricted to unmasked atoms; masked atoms get exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, NeuralError> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NeuralError::EmptyMask);
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    Ok(p)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

pub fn sample_action(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Highest-probability atom; ties go to the lowest index.
pub fn argmax_action(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ActorOutput {
    pub probs: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Stacked forward pass of one actor over several inputs.
struct ActorBatch {
    trace: Trace,
    probs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    arch: ArchConfig,
    theta: Vec<f64>,
    bm: Mlp,
    ba: Mlp,
    critic: Mlp,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl PolicyNet {
    /// All-zero weights.
    pub fn zeros(arch: &ArchConfig) -> Result<Self, NeuralError> {
        arch.validate()?;
        let mut off = 0;
        let bm = Mlp::new(&widths(arch.bm_inputs, &arch.hidden, arch.bm_actions), &mut off);
        let ba = Mlp::new(&widths(arch.ba_inputs, &arch.hidden, arch.ba_actions), &mut off);
        let last = arch.hidden[arch.hidden.len() - 1];
        let critic = Mlp::new(&widths(2 * last, &arch.critic_hidden, 1), &mut off);
        Ok(PolicyNet {
            arch: arch.clone(),
            theta: vec![0.0; off],
            bm,
            ba,
            critic,
        })
    }

    /// Uniform fan-in initialization (bound √(6/fan_in)), biases zero, output
    /// layers scaled down.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mlp in [&net.bm, &net.ba, &net.critic] {
            let last = mlp.layers.len() - 1;
            for (i, l) in mlp.layers.iter().enumerate() {
                let mut bound = (6.0 / l.inputs as f64).sqrt();
                if i == last {
                    bound *= OUTPUT_INIT_SCALE;
                }
                for w in &mut net.theta[l.w..l.w + l.inputs * l.outputs] {
                    *w = rng.gen_range(-bound..=bound);
                }
            }
        }
        Ok(net)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn mlp(&self, agent: Agent) -> &Mlp {
        match agent {
            Agent::Bm => &self.bm,
            Agent::Ba => &self.ba,
        }
    }

    pub fn forward(&self, agent: Agent, input: &[f64], mask: &[bool]) -> Result<ActorOutput, NeuralError> {
        let trace = self.mlp(agent).forward(&self.theta, input, 1);
        let probs = masked_softmax(trace.output_row(0), mask)?;
        Ok(ActorOutput {
            probs,
            hidden: trace.last_hidden().to_vec(),
        })
    }

    fn forward_batch<'a>(
        &self,
        agent: Agent,
        rows: impl Iterator<Item = (&'a [f64], &'a [bool])> + Clone,
    ) -> Result<ActorBatch, NeuralError> {
        let x: Vec<f64> = rows.clone().flat_map(|(x, _)| x.iter().copied()).collect();
        let n = rows.clone().count();
        let trace = self.mlp(agent).forward(&self.theta, &x, n);
        let probs = rows
            .enumerate()
            .map(|(r, (_, mask))| masked_softmax(trace.output_row(r), mask))
            .collect::<Result<_, _>>()?;
        Ok(ActorBatch { trace, probs })
    }

    fn critic_input(&self, bm_hidden: &[f64], ba_hidden: Option<&[f64]>) -> Vec<f64> {
        let mut x = bm_hidden.to_vec();
        match ba_hidden {
            Some(h) => x.extend_from_slice(h),
            None => x.extend(std::iter::repeat(0.0).take(bm_hidden.len())),
        }
        x
    }

    /// Last hidden activation of one actor, without the softmax.
    pub fn hidden(&self, agent: Agent, input: &[f64]) -> Vec<f64> {
        self.mlp(agent).forward(&self.theta, input, 1).last_hidden().to_vec()
    }

    /// State value from the two actors' last hidden layers (`None` when no
    /// video can be fetched, read as zeros).
    pub fn critic_value(&self, bm_hidden: &[f64], ba_hidden: Option<&[f64]>) -> f64 {
        let x = self.critic_input(bm_hidden, ba_hidden);
        self.critic.forward(&self.theta, &x, 1).output_row(0)[0]
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = serde_json::to_vec(&self.arch).expect("arch serializes");
        let mut out = Vec::with_capacity(32 + arch.len() + 8 * self.theta.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for w in &self.theta {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let bad = |m: &str| NeuralError::Checkpoint(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], NeuralError> {
            if cur.len() < n {
                return Err(bad("truncated file"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
        }
        let arch_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let arch: ArchConfig = serde_json::from_slice(take(arch_len)?)
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut net = Self::zeros(&arch)?;
        if n != net.theta.len() {
            return Err(bad("weight count does not match architecture"));
        }
        for w in net.theta.iter_mut() {
            *w = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// Losses and gradients

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlSample {
    pub agent: Agent,
    pub input: Vec<f64>,
    pub mask: Vec<bool>,
    pub target: usize,
}

/// Mean negative log-likelihood of the expert's choices, per agent, summed
/// over the two agents. Returns the loss and its gradient.
pub fn il_gradients(net: &PolicyNet, batch: &[IlSample]) -> Result<(f64, Vec<f64>), NeuralError> {
    let refs: Vec<&IlSample> = batch.iter().collect();
    il_gradients_of(net, &refs)
}

/// [`il_gradients`] over borrowed samples.
pub fn il_gradients_of(net: &PolicyNet, batch: &[&IlSample]) -> Result<(f64, Vec<f64>), NeuralError> {
    let mut grad = vec![0.0; net.theta.len()];
    let mut loss = 0.0;
    for agent in [Agent::Bm, Agent::Ba] {
        let samples = batch.iter().copied().filter(|s| s.agent == agent);
        let n = samples.clone().count();
        if n == 0 {
            continue;
        }
        let scale = 1.0 / n as f64;
        let out = net.forward_batch(agent, samples.clone().map(|s| (s.input.as_slice(), s.mask.as_slice())))?;
        let mut d_logits = Vec::with_capacity(n * out.probs[0].len());
        for (s, p) in samples.zip(&out.probs) {
            loss -= scale * p[s.target].ln();
            d_logits.extend(
                p.iter()
                    .enumerate()
                    .map(|(i, &pi)| scale * (pi - if i == s.target { 1.0 } else { 0.0 })),
            );
        }
        net.mlp(agent)
            .backward(&net.theta, &out.trace, d_logits, None, &mut grad, false);
    }
    if !loss.is_finite() {
        return Err(NeuralError::NonFinite {
            what: "imitation loss",
            value: loss,
        });
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub input: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    /// Log-probability of `action` under the behaviour policy.
    pub logp_old: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlSample {
    pub bm: AgentStep,
    /// Present on download steps.
    pub ba: Option<AgentStep>,
    /// Bitrate-agent input the critic conditions on (see [`critic_ba_observation`]).
    pub critic_ba: Option<Vec<f64>>,
    pub advantage: f64,
    /// Regression target for the critic.
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlLossConfig {
    pub clip_eps: f64,
    pub entropy_beta: f64,
    pub value_coef: f64,
    /// Let the value loss train the actors' hidden layers too. Off, the
    /// critic treats those activations as fixed inputs.
    pub critic_into_actors: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RlStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Agent decisions whose ratio fell in the clipped region.
    pub clipped: usize,
    /// Agent decisions skipped because the behaviour probability was zero.
    pub skipped: usize,
}

/// Clipped-surrogate loss with an entropy bonus and a squared-error critic
/// term, averaged over the batch. Both agents share each step's advantage.
pub fn rl_gradients(
    net: &PolicyNet,
    batch: &[RlSample],
    cfg: &RlLossConfig,
) -> Result<(RlStats, Vec<f64>), NeuralError> {
    let mut grad = vec![0.0; net.theta.len()];
    let mut stats = RlStats::default();
    if batch.is_empty() {
        return Ok((stats, grad));
    }
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let with_ba: Vec<(usize, &AgentStep)> = batch
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.ba.as_ref().map(|b| (i, b)))
        .collect();
    let bm = net.forward_batch(Agent::Bm, batch.iter().map(|s| (s.bm.input.as_slice(), s.bm.mask.as_slice())))?;
    let ba = if with_ba.is_empty() {
        None
    } else {
        Some(net.forward_batch(Agent::Ba, with_ba.iter().map(|(_, b)| (b.input.as_slice(), b.mask.as_slice())))?)
    };

    // Critic over [bm hidden | reference ba hidden or zeros].
    let with_ctx: Vec<(usize, &[f64])> = batch
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.critic_ba.as_deref().map(|x| (i, x)))
        .collect();
    let ctx = (!with_ctx.is_empty()).then(|| {
        let x: Vec<f64> = with_ctx.iter().flat_map(|(_, x)| x.iter().copied()).collect();
        net.ba.forward(&net.theta, &x, with_ctx.len())
    });
    let width = bm.trace.width(bm.trace.acts.len() - 2);
    let mut critic_x = vec![0.0; n * 2 * width];
    let bm_h = bm.trace.last_hidden();
    for r in 0..n {
        critic_x[r * 2 * width..r * 2 * width + width].copy_from_slice(&bm_h[r * width..(r + 1) * width]);
    }
    if let Some(ctx) = &ctx {
        let h = ctx.last_hidden();
        for (k, (r, _)) in with_ctx.iter().enumerate() {
            critic_x[r * 2 * width + width..(r + 1) * 2 * width].copy_from_slice(&h[k * width..(k + 1) * width]);
        }
    }
    let critic = net.critic.forward(&net.theta, &critic_x, n);
    let mut d_v = Vec::with_capacity(n);
    for (r, s) in batch.iter().enumerate() {
        let err = critic.output_row(r)[0] - s.ret;
        stats.value_loss += scale * err * err;
        d_v.push(scale * cfg.value_coef * 2.0 * err);
    }
    let d_critic_in = net
        .critic
        .backward(&net.theta, &critic, d_v, None, &mut grad, true)
        .expect("input gradient requested");

    let mut policy_head = |step: &AgentStep, probs: &[f64], advantage: f64, d: &mut Vec<f64>| {
        let start = d.len();
        d.resize(start + probs.len(), 0.0);
        let d = &mut d[start..];
        let ratio = (probs[step.action].ln() - step.logp_old).exp();
        if !ratio.is_finite() || !step.logp_old.is_finite() {
            stats.skipped += 1;
        } else {
            let clipped_ratio = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            stats.policy_loss -= scale * (ratio * advantage).min(clipped_ratio * advantage);
            let clipped = (advantage > 0.0 && ratio > 1.0 + cfg.clip_eps)
                || (advantage < 0.0 && ratio < 1.0 - cfg.clip_eps);
            if clipped {
                stats.clipped += 1;
            } else {
                // d(-ratio·A)/d logit_i = -A·ratio·(1[i=a] - p_i)
                for (i, di) in d.iter_mut().enumerate() {
                    let onehot = if i == step.action { 1.0 } else { 0.0 };
                    *di -= scale * advantage * ratio * (onehot - probs[i]);
                }
            }
        }
        // Loss carries -β·H; dH/dlogit_i = -p_i (ln p_i + H).
        let h = entropy(probs);
        stats.entropy += scale * h;
        for (di, &p) in d.iter_mut().zip(probs) {
            if p > 0.0 {
                *di += scale * cfg.entropy_beta * p * (p.ln() + h);
            }
        }
    };

    let mut d_bm = Vec::with_capacity(n * net.arch.bm_actions);
    let mut extra_bm = Vec::with_capacity(n * width);
    for (r, s) in batch.iter().enumerate() {
        policy_head(&s.bm, &bm.probs[r], s.advantage, &mut d_bm);
        extra_bm.extend_from_slice(&d_critic_in[r * 2 * width..r * 2 * width + width]);
    }
    let mut d_ba = Vec::with_capacity(with_ba.len() * net.arch.ba_actions);
    if let Some(ba) = &ba {
        for (k, (r, step)) in with_ba.iter().enumerate() {
            policy_head(step, &ba.probs[k], batch[*r].advantage, &mut d_ba);
        }
    }
    let couple = cfg.critic_into_actors;
    net.bm
        .backward(&net.theta, &bm.trace, d_bm, couple.then_some(extra_bm.as_slice()), &mut grad, false);
    if let Some(ba) = &ba {
        net.ba.backward(&net.theta, &ba.trace, d_ba, None, &mut grad, false);
    }
    if let (Some(ctx), true) = (&ctx, couple) {
        let extra: Vec<f64> = with_ctx
            .iter()
            .flat_map(|(r, _)| d_critic_in[r * 2 * width + width..(r + 1) * 2 * width].iter().copied())
            .collect();
        let d_out = vec![0.0; with_ctx.len() * net.arch.ba_actions];
        net.ba.backward(&net.theta, ctx, d_out, Some(&extra), &mut grad, false);
    }
    stats.loss = stats.policy_loss - cfg.entropy_beta * stats.entropy + cfg.value_coef * stats.value_loss;
    if !stats.loss.is_finite() {
        return Err(NeuralError::NonFinite {
            what: "policy loss",
            value: stats.loss,
        });
    }
    Ok((stats, grad))
}

/// Loss only, for finite-difference checks.
pub fn rl_loss(net: &PolicyNet, batch: &[RlSample], cfg: &RlLossConfig) -> Result<f64, NeuralError> {
    rl_gradients(net, batch, cfg).map(|(s, _)| s.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Acting

/// Runs the two actors on their own observations: the buffer agent picks a
/// video or sleep, then the bitrate agent picks a level for that video.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    pub net: PolicyNet,
    /// Sample from the distributions instead of taking the argmax.
    pub stochastic: bool,
    rng: ChaCha8Rng,
    name: String,
}

/// Everything the trainer needs from one decision.
#[derive(Debug, Clone)]
pub struct Decision {
    pub action: Action,
    pub bm: AgentStep,
    pub ba: Option<AgentStep>,
    /// Critic context and value; empty outside training.
    pub critic_ba: Option<Vec<f64>>,
    pub value: f64,
}

impl NeuralPolicy {
    pub fn greedy(net: PolicyNet) -> Self {
        NeuralPolicy {
            net,
            stochastic: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            name: "neural".into(),
        }
    }

    pub fn sampling(net: PolicyNet, seed: u64) -> Self {
        NeuralPolicy {
            net,
            stochastic: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            name: "neural".into(),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    fn pick(&mut self, probs: &[f64]) -> usize {
        if self.stochastic {
            sample_action(probs, &mut self.rng)
        } else {
            argmax_action(probs)
        }
    }

    pub fn decide_full(&mut self, state: &SessionState, mask: &ActionMask) -> Result<Decision, NeuralError> {
        self.act(state, mask, true)
    }

    fn act(&mut self, state: &SessionState, mask: &ActionMask, with_value: bool) -> Result<Decision, NeuralError> {
        let q = mask.queue_length();
        if self.net.arch.bm_actions != q + 1 || self.net.arch.ba_actions != mask.num_levels() {
            return Err(NeuralError::Config(format!(
                "network built for {} videos / {} levels, session has {} / {}",
                self.net.arch.bm_actions - 1,
                self.net.arch.ba_actions,
                q,
                mask.num_levels()
            )));
        }
        let bm_x = build_bm_observation(state).to_vector();
        let bm_mask = mask.bm_mask();
        let bm = self.net.forward(Agent::Bm, &bm_x, &bm_mask)?;
        let choice = self.pick(&bm.probs);
        let bm_step = AgentStep {
            logp_old: bm.probs[choice].ln(),
            input: bm_x,
            mask: bm_mask,
            action: choice,
        };
        let (critic_ba, value) = if with_value {
            let x = critic_ba_observation(state).map(|o| o.to_vector());
            let h = x.as_ref().map(|x| self.net.hidden(Agent::Ba, x));
            let v = self.net.critic_value(&bm.hidden, h.as_deref());
            (x, v)
        } else {
            (None, 0.0)
        };
        if choice == q {
            return Ok(Decision {
                action: Action::Sleep,
                bm: bm_step,
                ba: None,
                critic_ba,
                value,
            });
        }
        let ba_x = build_ba_observation(state, choice)
            .map_err(|e| NeuralError::Config(e.to_string()))?
            .to_vector();
        let ba_mask = mask.ba_mask();
        let ba = self.net.forward(Agent::Ba, &ba_x, &ba_mask)?;
        let level = self.pick(&ba.probs);
        Ok(Decision {
            action: Action::Download { video: choice, level },
            bm: bm_step,
            ba: Some(AgentStep {
                logp_old: ba.probs[level].ln(),
                input: ba_x,
                mask: ba_mask,
                action: level,
            }),
            critic_ba,
            value,
        })
    }
}

impl Policy for NeuralPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&mut self, state: &SessionState, mask: &ActionMask) -> Result<Action, PolicyError> {
        self.act(state, mask, false)
            .map(|d| d.action)
            .map_err(|e| PolicyError::Other(e.to_string()))
    }
}
