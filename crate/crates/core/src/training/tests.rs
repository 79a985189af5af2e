use super::*;
use crate::traces::{generate_synthetic_corpus, GeneratorConfig};
use proptest::prelude::*;

fn corpus() -> TraceCorpus {
    generate_synthetic_corpus(&GeneratorConfig::default(), 3).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![8],
        critic_hidden: vec![8],
        expert_sessions: 4,
        il_epochs: 6,
        il_batch_size: 64,
        il_minibatch_size: 32,
        il_eval_every: 2,
        dagger_rounds: 1,
        dagger_sessions: 2,
        dagger_epochs: 2,
        rl_epochs: 2,
        rollout_sessions: 2,
        minibatch_size: 64,
        eval_sessions: 2,
        eval_every: 1,
        ..TrainConfig::default()
    }
}

fn dataset(n: usize, seed: u64) -> ExpertDataset {
    let cfg = SessionConfig::default();
    let specs = session_specs(&corpus(), &cfg, n, seed).unwrap();
    collect_expert_dataset(&specs, &cfg, 2, &ScoreCoefficients::default()).unwrap()
}

// ---------------------------------------------------------------------------
// GAE

#[test]
fn gae_with_zero_lambda_is_the_td_error() {
    let r = [1.0, -0.5, 2.0, 0.25];
    let v = [0.3, 0.1, -0.2, 0.4];
    let d = [false, false, false, true];
    let a = compute_gae(&r, &v, &d, 0.9, 0.0);
    let expect = [1.0 + 0.9 * 0.1 - 0.3, -0.5 + 0.9 * -0.2 - 0.1, 2.0 + 0.9 * 0.4 + 0.2, 0.25 - 0.4];
    for (x, y) in a.iter().zip(expect) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn gae_with_unit_factors_is_the_remaining_return() {
    let r = [1.0, 2.0, -4.0, 0.5];
    let a = compute_gae(&r, &[0.0; 4], &[false; 4], 1.0, 1.0);
    assert_eq!(a, vec![-0.5, -1.5, -3.5, 0.5]);
}

#[test]
fn gae_hand_example() {
    let a = compute_gae(&[1.0, 0.0, 1.0], &[0.0; 3], &[false; 3], 0.5, 1.0);
    assert!((a[0] - 1.25).abs() < 1e-12);
}

#[test]
fn gae_does_not_cross_a_terminal() {
    let r = [1.0, 1.0, 5.0];
    let a = compute_gae(&r, &[0.0; 3], &[false, true, false], 1.0, 1.0);
    assert_eq!(a, vec![2.0, 1.0, 5.0]);
}

#[test]
fn per_step_discounts_reduce_to_the_constant_case() {
    let r = [0.5, -1.0, 2.0];
    let v = [0.1, 0.2, 0.3];
    let d = [false; 3];
    assert_eq!(
        compute_gae(&r, &v, &d, 0.9, 0.7),
        compute_gae_with(&r, &v, &d, &[0.9; 3], 0.7)
    );
}

proptest! {
    #[test]
    fn gae_satisfies_its_recursion(
        steps in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, any::<bool>()), 1..30),
        gamma in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let a = compute_gae(&r, &v, &d, gamma, lambda);
        let n = r.len();
        for t in 0..n {
            let live = if d[t] { 0.0 } else { 1.0 };
            let (nv, na) = if t + 1 < n { (v[t + 1], a[t + 1]) } else { (0.0, 0.0) };
            let delta = r[t] + gamma * nv * live - v[t];
            prop_assert!((a[t] - (delta + gamma * lambda * live * na)).abs() < 1e-9);
        }
    }
}

#[test]
fn prepared_advantages_are_standardized() {
    let cfg = SessionConfig::default();
    let coeffs = ScoreCoefficients::default();
    let net = PolicyNet::init(&tiny_config().arch(&cfg), 5).unwrap();
    let specs = session_specs(&corpus(), &cfg, 2, 9).unwrap();
    let rollouts: Vec<Rollout> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| collect_rollout(&net, s, &cfg, &coeffs, i as u64).unwrap())
        .collect();
    let samples = prepare_samples(&rollouts, 0.95, false, 0.95);
    assert_eq!(samples.len(), rollouts.iter().map(|r| r.steps.len()).sum::<usize>());
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-9);
    for r in &rollouts {
        assert!(r.steps.iter().all(|s| s.reward.is_finite() && s.duration > 0.0));
        assert!(r.steps.last().unwrap().done);
    }
}

// ---------------------------------------------------------------------------
// Entropy schedule

#[test]
fn entropy_decays_after_exactly_the_patience() {
    let mut s = EntropySchedule::new(0.01, 0.5, 100);
    assert!(!s.observe(5.0));
    for _ in 0..99 {
        assert!(!s.observe(5.0));
    }
    assert_eq!(s.beta, 0.01);
    assert!(s.observe(4.0));
    assert_eq!(s.beta, 0.005);
    // an improvement resets the count
    for _ in 0..50 {
        s.observe(1.0);
    }
    assert!(!s.observe(6.0));
    for _ in 0..99 {
        assert!(!s.observe(6.0));
    }
    assert!(s.observe(6.0));
    assert_eq!(s.beta, 0.0025);
}

// ---------------------------------------------------------------------------
// Imitation

fn fixed_batch() -> Vec<IlSample> {
    dataset(2, 11)
        .records
        .iter()
        .flat_map(|r| std::iter::once(r.bm_sample()).chain(r.ba_sample(3)))
        .take(64)
        .collect()
}

#[test]
fn imitation_loss_descends_on_a_fixed_batch() {
    let arch = ArchConfig::default();
    let mut net = PolicyNet::init(&arch, 2).unwrap();
    let batch = fixed_batch();
    let mut adam = Adam::new(net.num_params(), 1e-4);
    let mut prev = f64::INFINITY;
    for step in 0..100 {
        let loss = il_update(&mut net, &mut adam, &batch).unwrap();
        assert!(loss <= prev + 1e-12, "step {step}: {loss} > {prev}");
        prev = loss;
    }
}

#[test]
fn confident_expert_match_leaves_parameters_in_place() {
    let arch = ArchConfig::default();
    let mut net = PolicyNet::zeros(&arch).unwrap();
    let batch: Vec<IlSample> = fixed_batch().into_iter().filter(|s| s.agent == Agent::Bm && s.target == 0).collect();
    assert!(!batch.is_empty());
    // A huge bias on the output unit for queue position 0 makes the policy
    // match every sample with probability one.
    let bias = bm_output_bias(&net);
    net.params_mut()[bias] = 60.0;
    let before = net.params().to_vec();
    let mut adam = Adam::new(net.num_params(), 1e-4);
    il_update(&mut net, &mut adam, &batch).unwrap();
    let change: f64 = before.iter().zip(net.params()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(change < 1e-8, "{change}");
}

/// Index of the BM output bias for action 0 in the flat parameter vector.
fn bm_output_bias(net: &PolicyNet) -> usize {
    let a = net.arch();
    let mut widths = vec![a.bm_inputs];
    widths.extend(&a.hidden);
    widths.push(a.bm_actions);
    let weights: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    weights - a.bm_actions
}

#[test]
fn empty_imitation_batch_is_an_error() {
    let mut net = PolicyNet::zeros(&ArchConfig::default()).unwrap();
    let mut adam = Adam::new(net.num_params(), 1e-4);
    assert!(il_update(&mut net, &mut adam, &[]).is_err());
}

#[test]
fn zero_imitation_epochs_change_nothing() {
    let ds = dataset(2, 4);
    let mut cfg = tiny_config();
    cfg.il_epochs = 0;
    let mut net = PolicyNet::init(&cfg.arch(&SessionConfig::default()), 1).unwrap();
    let before = net.clone();
    let curve = il_pretrain(&mut net, &ds.records, &ds.records, 3, &cfg).unwrap();
    assert!(curve.is_empty());
    assert_eq!(net, before);
}

#[test]
fn pretraining_curve_is_deterministic() {
    let ds = dataset(3, 4);
    let cfg = tiny_config();
    let run = || {
        let mut net = PolicyNet::init(&cfg.arch(&SessionConfig::default()), 1).unwrap();
        let curve = il_pretrain(&mut net, &ds.records, &ds.records, 3, &cfg).unwrap();
        (curve, net)
    };
    let (a, na) = run();
    let (b, nb) = run();
    assert_eq!(a, b);
    assert_eq!(na, nb);
    assert_eq!(a.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![2, 4, 6]);
}

#[test]
fn holdout_split_keeps_sessions_whole() {
    let ds = dataset(6, 8);
    let (train, held) = holdout_split(&ds, 0.5, 3);
    assert_eq!(train.len() + held.len(), ds.records.len());
    assert!(!train.is_empty() && !held.is_empty());
    let train_ids: std::collections::BTreeSet<usize> = train.iter().map(|r| r.session).collect();
    assert!(held.iter().all(|r| !train_ids.contains(&r.session)));
}

// ---------------------------------------------------------------------------
// Expert data

#[test]
fn no_sessions_give_an_empty_dataset() {
    let ds = dataset(0, 1);
    assert_eq!(ds.bm_pairs(), 0);
    assert_eq!(ds.ba_pairs(), 0);
}

#[test]
fn expert_collection_is_deterministic() {
    assert_eq!(dataset(5, 21), dataset(5, 21));
}

#[test]
fn bitrate_pairs_follow_the_video_choice() {
    let ds = dataset(5, 2);
    assert!(ds.ba_pairs() > 0);
    for r in &ds.records {
        match &r.ba {
            Some((obs, level)) => {
                assert_eq!(obs.queue_pos, r.bm_action);
                assert!(*level < 3);
            }
            None => assert_eq!(r.bm_action, r.bm_mask.len() - 1),
        }
        assert!(r.bm_mask[r.bm_action]);
    }
}

#[test]
fn dataset_roundtrips_through_json_lines() {
    let ds = dataset(2, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("expert.jsonl");
    ds.save(&path).unwrap();
    assert_eq!(ExpertDataset::load(&path).unwrap(), ds);
}

#[test]
fn masked_expert_choice_is_rejected_at_load() {
    let mut ds = dataset(2, 6);
    let r = ds.records.iter_mut().find(|r| r.ba.is_some()).unwrap();
    r.bm_mask[r.bm_action] = false;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    ds.save(&path).unwrap();
    let err = ExpertDataset::load(&path).unwrap_err().to_string();
    assert!(err.contains("masked"), "{err}");
}

#[test]
fn learner_states_carry_valid_expert_labels() {
    let cfg = SessionConfig::default();
    let coeffs = ScoreCoefficients::default();
    let net = PolicyNet::init(&tiny_config().arch(&cfg), 3).unwrap();
    let specs = session_specs(&corpus(), &cfg, 2, 5).unwrap();
    let a = collect_learner_states(&net, &specs, &cfg, 2, &coeffs, Some(9)).unwrap();
    let b = collect_learner_states(&net, &specs, &cfg, 2, &coeffs, Some(9)).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let ds = ExpertDataset {
        num_levels: 3,
        records: a,
    };
    ds.validate().unwrap();
}

// ---------------------------------------------------------------------------
// Configuration

#[test]
fn default_config_is_valid() {
    TrainConfig::default().validate().unwrap();
}

#[test]
fn config_file_must_name_every_key() {
    let full = toml::to_string(&TrainConfig::default()).unwrap();
    let parsed: TrainConfig = toml::from_str(&full).unwrap();
    assert_eq!(parsed, TrainConfig::default());
    let missing: String = full.lines().filter(|l| !l.starts_with("gamma ")).collect::<Vec<_>>().join("\n");
    let err = toml::from_str::<TrainConfig>(&missing).unwrap_err().to_string();
    assert!(err.contains("gamma"), "{err}");
    let extra = format!("{full}\nlearning_rate = 0.1\n");
    assert!(toml::from_str::<TrainConfig>(&extra).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let cases: Vec<Box<dyn Fn(&mut TrainConfig)>> = vec![
        Box::new(|c| c.epsilon_clip = 1.0),
        Box::new(|c| c.alpha = 0.0),
        Box::new(|c| c.gamma = 1.5),
        Box::new(|c| c.beta_entropy = -0.1),
        Box::new(|c| c.minibatch_size = 0),
        Box::new(|c| c.hidden = vec![]),
        Box::new(|c| c.holdout_fraction = 1.0),
        Box::new(|c| {
            c.il_epochs = 0;
            c.dagger_rounds = 1;
        }),
    ];
    for (i, f) in cases.iter().enumerate() {
        let mut c = TrainConfig::default();
        f(&mut c);
        let ok = c.validate().is_ok() && c.arch(&SessionConfig::default()).validate().is_ok();
        assert!(!ok, "case {i} accepted");
    }
}

// ---------------------------------------------------------------------------
// Pipeline

#[test]
fn no_rl_epochs_return_the_imitation_parameters() {
    let mut cfg = tiny_config();
    cfg.rl_epochs = 0;
    let out = train(&cfg, &SessionConfig::default(), &ScoreCoefficients::default(), &corpus(), None, None, &mut ()).unwrap();
    assert_eq!(out.best, out.imitation);
    assert_eq!(out.last, out.imitation);
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn fixed_seeds_give_identical_runs() {
    let cfg = tiny_config();
    let run = || train(&cfg, &SessionConfig::default(), &ScoreCoefficients::default(), &corpus(), None, None, &mut ()).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.last, b.last);
    let csv = a.log.to_csv();
    assert!(csv.starts_with("# schema: "));
    // imitation rows cover the initial epochs and the relabelling round
    let il_rows = a.log.rows.iter().filter(|r| r.stage == "il").count();
    assert_eq!(il_rows, 4);
    assert_eq!(a.log.rows.iter().filter(|r| r.stage == "rl").count(), 3);
}

#[test]
fn different_seeds_give_different_runs() {
    let a = tiny_config();
    let b = TrainConfig { seed: 2, ..tiny_config() };
    let run = |c: &TrainConfig| train(c, &SessionConfig::default(), &ScoreCoefficients::default(), &corpus(), None, None, &mut ()).unwrap();
    assert_ne!(run(&a).last, run(&b).last);
}

#[test]
fn resuming_skips_imitation_and_checks_the_architecture() {
    let cfg = tiny_config();
    let session = SessionConfig::default();
    let start = PolicyNet::init(&cfg.arch(&session), 42).unwrap();
    let out = train(&cfg, &session, &ScoreCoefficients::default(), &corpus(), None, Some(&start), &mut ()).unwrap();
    assert_eq!(out.imitation, start);
    assert!(out.il_curve.is_empty());
    let other = PolicyNet::init(&ArchConfig::default(), 42).unwrap();
    assert!(train(&cfg, &session, &ScoreCoefficients::default(), &corpus(), None, Some(&other), &mut ()).is_err());
}

#[test]
fn checkpoints_arrive_at_the_configured_interval() {
    struct Seen(Vec<usize>);
    impl TrainObserver for Seen {
        fn checkpoint(&mut self, epoch: usize, _net: &PolicyNet) -> Result<(), TrainError> {
            self.0.push(epoch);
            Ok(())
        }
    }
    let cfg = TrainConfig {
        rl_epochs: 4,
        checkpoint_every: 2,
        il_epochs: 2,
        dagger_rounds: 0,
        ..tiny_config()
    };
    let mut seen = Seen(vec![]);
    train(&cfg, &SessionConfig::default(), &ScoreCoefficients::default(), &corpus(), None, None, &mut seen).unwrap();
    assert_eq!(seen.0, vec![2, 4]);
}

