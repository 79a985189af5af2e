use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scoring::ScoreCoefficients;
use crate::traces::BandwidthSample;

const SIZES: [f64; 3] = [0.09375, 0.15, 0.23125];

fn asset(id: &str, chunks: usize) -> Arc<VideoAsset> {
    Arc::new(VideoAsset::new(id, vec![SIZES.to_vec(); chunks], vec![1.0; chunks]).unwrap())
}

fn playlist(n: usize, chunks: usize) -> Vec<Arc<VideoAsset>> {
    (0..n).map(|i| asset(&format!("v{i}"), chunks)).collect()
}

fn constant(mbps: f64) -> Arc<NetworkTrace> {
    Arc::new(NetworkTrace::constant("c", mbps, 100.0).unwrap())
}

fn fixed(points: Vec<usize>, chunks: usize, mbps: f64) -> SessionState {
    let cfg = SessionConfig::default();
    SessionState::with_scrolls(
        playlist(cfg.queue_length + 2, chunks),
        constant(mbps),
        &cfg,
        ScrollPlan::Fixed(points),
        0,
    )
    .unwrap()
}

#[test]
fn download_time_examples() {
    let c = NetworkTrace::constant("c", 1.2, 10.0).unwrap();
    assert!((download_time(0.150, &c, 0.0) - 1.0).abs() < 1e-12);
    assert_eq!(download_time(0.0, &c, 3.0), 0.0);

    let step = NetworkTrace::new(
        "s",
        vec![
            BandwidthSample { time: 0.0, mbps: 2.4 },
            BandwidthSample { time: 0.5, mbps: 1.2 },
            BandwidthSample { time: 5.0, mbps: 1.2 },
        ],
    )
    .unwrap();
    assert!((download_time(0.3, &step, 0.0) - 1.5).abs() < 1e-12);
}

#[test]
fn download_time_wraps_around() {
    // 2 Mbps for 1 s, 1 Mbps for 1 s, repeating.
    let t = NetworkTrace::new(
        "w",
        vec![
            BandwidthSample { time: 0.0, mbps: 2.0 },
            BandwidthSample { time: 1.0, mbps: 1.0 },
        ],
    )
    .unwrap();
    // Starting at 1.5: 0.5 Mb by 2.0, then 2 Mb by 3.0, then 1 Mb by 4.0,
    // then 2 Mb by 5.0: 5.5 Mb total at 5.0.
    assert!((download_time(5.5 / 8.0, &t, 1.5) - 3.5).abs() < 1e-12);
    // Many whole cycles: 3 Mb per 2 s.
    assert!((download_time(300.0 / 8.0, &t, 0.0) - 200.0).abs() < 1e-9);
}

#[test]
fn scroll_sampling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        assert_eq!(sample_scroll_chunk(&[1.0, 1.0, 1.0], &mut rng), 3);
        assert_eq!(sample_scroll_chunk(&[1.0, 0.0], &mut rng), 1);
    }
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| sample_scroll_chunk(&[1.0, 0.5], &mut rng) >= 2)
        .count();
    assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
}

#[test]
fn scroll_sampling_matches_retention_curve() {
    let p = [1.0, 0.9, 0.6, 0.6, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut reach = [0usize; 5];
    for _ in 0..n {
        let s = sample_scroll_chunk(&p, &mut rng);
        for r in reach.iter_mut().take(s) {
            *r += 1;
        }
    }
    for (m, &count) in reach.iter().enumerate() {
        assert!((count as f64 / n as f64 - p[m]).abs() < 0.01, "chunk {m}");
    }
}

#[test]
fn init_fills_the_queue() {
    let cfg = SessionConfig::default();
    let s = SessionState::new(playlist(8, 4), constant(2.0), &cfg, 5).unwrap();
    assert_eq!(s.queue_len(), 5);
    assert_eq!(s.clock(), 0.0);
    for v in s.videos() {
        assert_eq!(v.buffered_chunks, 0);
        assert_eq!(v.play_chunk, 0);
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = SessionConfig::default();
    let videos: Vec<_> = (0..8)
        .map(|i| {
            Arc::new(
                VideoAsset::new(
                    format!("v{i}"),
                    vec![SIZES.to_vec(); 6],
                    vec![1.0, 0.9, 0.7, 0.5, 0.3, 0.1],
                )
                .unwrap(),
            )
        })
        .collect();
    let points = |seed| {
        let s = SessionState::new(videos.clone(), constant(2.0), &cfg, seed).unwrap();
        (0..5).map(|j| s.scroll_chunk(j).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(points(9), points(9));
}

#[test]
fn init_rejects_short_playlist_and_trace() {
    let cfg = SessionConfig::default();
    assert!(matches!(
        SessionState::new(playlist(3, 4), constant(2.0), &cfg, 0),
        Err(SimError::Config(_))
    ));
    let short = SessionConfig {
        min_trace_duration: 500.0,
        ..cfg
    };
    assert!(SessionState::new(playlist(5, 4), constant(2.0), &short, 0).is_err());
}

#[test]
fn config_validation() {
    let ok = SessionConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        SessionConfig {
            queue_length: 0,
            ..ok.clone()
        },
        SessionConfig {
            ladder_kbps: vec![1200.0, 750.0],
            ..ok.clone()
        },
        SessionConfig {
            sleep_duration: 0.0,
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn sleep_drains_buffer_without_stall() {
    let mut s = fixed(vec![], 6, 1000.0);
    for _ in 0..3 {
        s.step(Action::Download { video: 0, level: 0 }).unwrap();
    }
    let before = s.video(0).unwrap().buffer_seconds;
    assert!(before > 2.99);
    let clock = s.clock();
    let out = s.step(Action::Sleep).unwrap();
    assert!((out.clock - clock - 0.2).abs() < 1e-12);
    assert_eq!(out.rebuffer, 0.0);
    assert!((s.video(0).unwrap().buffer_seconds - (before - 0.2)).abs() < 1e-9);
}

#[test]
fn download_into_empty_buffer_stalls_for_its_duration() {
    let mut s = fixed(vec![], 4, 0.75);
    let out = s.step(Action::Download { video: 0, level: 0 }).unwrap();
    assert!((out.duration - 1.0).abs() < 1e-12);
    assert!((out.rebuffer - 1.0).abs() < 1e-12);
}

#[test]
fn sleep_ends_early_at_stall() {
    let mut s = fixed(vec![], 4, 1000.0);
    s.step(Action::Download { video: 0, level: 0 }).unwrap();
    let left = s.video(0).unwrap().buffer_seconds;
    let mut total = 0.0;
    while total < left - 1e-9 {
        let out = s.step(Action::Sleep).unwrap();
        assert_eq!(out.rebuffer, 0.0);
        total += out.duration;
    }
    assert!((total - left).abs() < 1e-9);
    // Buffer is dry now: a further sleep stalls for the full duration.
    let out = s.step(Action::Sleep).unwrap();
    assert!((out.rebuffer - 0.2).abs() < 1e-12);
}

#[test]
fn scroll_clears_unplayed_chunks() {
    let mut s = fixed(vec![1], 4, 1000.0);
    for _ in 0..3 {
        s.step(Action::Download { video: 0, level: 1 }).unwrap();
    }
    let mut events = Vec::new();
    while events.is_empty() {
        events = s.step(Action::Sleep).unwrap().scrolls;
    }
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].video, 0);
    assert_eq!(events[0].wasted_chunks, 2);
    assert!((events[0].wasted_mb - 2.0 * SIZES[1]).abs() < 1e-12);
    // Queue shifted and refilled.
    assert_eq!(s.video(0).unwrap().video, 1);
    assert_eq!(s.video(4).unwrap().video, 5);
    assert!(s.accounting_error().abs() < 1e-12);
}

#[test]
fn mask_examples() {
    let mut s = fixed(vec![], 6, 1000.0);
    assert_eq!(s.valid_actions().bm_mask(), vec![true; 6]);

    for _ in 0..4 {
        s.step(Action::Download { video: 2, level: 0 }).unwrap();
    }
    let m = s.valid_actions();
    assert!(!m.can_download(2));
    assert!(matches!(
        s.step(Action::Download { video: 2, level: 0 }),
        Err(SimError::InvalidAction(_))
    ));

    let mut s = fixed(vec![], 2, 1000.0);
    for _ in 0..2 {
        s.step(Action::Download { video: 0, level: 0 }).unwrap();
    }
    assert_eq!(
        s.valid_actions().bm_mask(),
        vec![false, true, true, true, true, true]
    );
}

#[test]
fn valid_action_enumeration_order() {
    let s = fixed(vec![], 2, 1.0);
    let acts = s.valid_actions().valid_actions();
    assert_eq!(acts.len(), 16);
    assert_eq!(acts[0], Action::Download { video: 0, level: 0 });
    assert_eq!(acts[1], Action::Download { video: 1, level: 0 });
    assert_eq!(acts[5], Action::Download { video: 0, level: 1 });
    assert_eq!(acts[15], Action::Sleep);
}

#[test]
fn chunk_in_flight_for_departing_video_is_wasted() {
    let trace = Arc::new(
        NetworkTrace::new(
            "drop",
            vec![
                BandwidthSample { time: 0.0, mbps: 1000.0 },
                BandwidthSample { time: 0.001, mbps: 0.1 },
                BandwidthSample { time: 100.0, mbps: 0.1 },
            ],
        )
        .unwrap(),
    );
    let cfg = SessionConfig::default();
    let mut s = SessionState::with_scrolls(
        playlist(6, 3),
        trace,
        &cfg,
        ScrollPlan::Fixed(vec![1]),
        0,
    )
    .unwrap();
    s.step(Action::Download { video: 0, level: 0 }).unwrap();
    let out = s.step(Action::Download { video: 0, level: 0 }).unwrap();
    let d = out.downloaded.unwrap();
    assert!(!d.delivered);
    assert!(!d.will_watch);
    assert_eq!(out.scrolls.len(), 1);
    assert!((out.wasted_mb() - SIZES[0]).abs() < 1e-12);
    assert!((s.ledger().wasted_mb - SIZES[0]).abs() < 1e-12);
    assert!(s.accounting_error().abs() < 1e-12);
}

#[test]
fn always_sleep_is_negative_with_no_bandwidth() {
    struct Sleeper;
    impl Policy for Sleeper {
        fn name(&self) -> &str {
            "sleep"
        }
        fn decide(&mut self, _: &SessionState, _: &ActionMask) -> Result<Action, PolicyError> {
            Ok(Action::Sleep)
        }
    }
    let cfg = SessionConfig {
        max_session_time: 30.0,
        ..SessionConfig::default()
    };
    let (traj, score) = run_session(
        &mut Sleeper,
        playlist(5, 3),
        constant(2.0),
        &cfg,
        1,
        &ScoreCoefficients::default(),
    )
    .unwrap();
    assert!(traj.complete);
    assert_eq!(score.bandwidth_mb, 0.0);
    assert!(score.utility < 0.0);
    assert!((score.rebuffer_s - 30.0).abs() < 1e-6);
}

struct PlayingOnly;

impl Policy for PlayingOnly {
    fn name(&self) -> &str {
        "playing-only"
    }
    fn decide(&mut self, _: &SessionState, mask: &ActionMask) -> Result<Action, PolicyError> {
        Ok(if mask.can_download(0) {
            Action::Download { video: 0, level: 0 }
        } else {
            Action::Sleep
        })
    }
}

#[test]
fn playing_only_on_ample_bandwidth_stalls_only_at_video_starts() {
    let cfg = SessionConfig::default();
    let (traj, score) = run_session(
        &mut PlayingOnly,
        playlist(7, 2),
        constant(100.0),
        &cfg,
        4,
        &ScoreCoefficients::default(),
    )
    .unwrap();
    for step in &traj.steps {
        if let Some(d) = step.outcome.downloaded {
            if d.chunk > 0 {
                assert_eq!(step.outcome.rebuffer, 0.0);
            }
        }
    }
    // Every video played in full: 7 videos x 2 chunks at the lowest rung.
    assert!((score.quality - 14.0 * 0.75).abs() < 1e-9);
    assert_eq!(score.wasted_mb, 0.0);
    let startup: f64 = 7.0 * SIZES[0] * 8.0 / 100.0;
    assert!((score.rebuffer_s - startup).abs() < 1e-9);
}

#[test]
fn runs_are_deterministic() {
    let cfg = SessionConfig::default();
    let run = || {
        run_session(
            &mut PlayingOnly,
            playlist(7, 5),
            constant(1.0),
            &cfg,
            8,
            &ScoreCoefficients::default(),
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn playlist_is_seeded_shuffle() {
    let videos = playlist(4, 2);
    let a = make_playlist(&videos, 10, 1);
    let b = make_playlist(&videos, 10, 1);
    let ids = |p: &[Arc<VideoAsset>]| p.iter().map(|v| v.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
    assert_eq!(a.len(), 10);
    let mut first: Vec<_> = ids(&a[..4]);
    first.sort();
    assert_eq!(first, vec!["v0", "v1", "v2", "v3"]);
}

#[test]
fn trajectory_csv_has_schema_and_one_row_per_step() {
    let cfg = SessionConfig::default();
    let (traj, _) = run_session(
        &mut PlayingOnly,
        playlist(5, 2),
        constant(5.0),
        &cfg,
        0,
        &ScoreCoefficients::default(),
    )
    .unwrap();
    let csv = traj.to_csv();
    assert!(csv.starts_with("# schema:"));
    assert_eq!(csv.lines().count(), traj.steps.len() + 2);
}

fn retention_curve(decays: &[f64]) -> Vec<f64> {
    let mut p = vec![1.0];
    for d in decays {
        let last = *p.last().unwrap();
        p.push(last * (1.0 - d));
    }
    p
}

prop_compose! {
    fn arb_session()(
        curves in proptest::collection::vec(
            proptest::collection::vec(0.0f64..0.4, 0..8), 5..9),
        bws in proptest::collection::vec(0.2f64..6.0, 2..10),
        seed in any::<u64>(),
    ) -> SessionState {
        let videos = curves.iter().enumerate().map(|(i, d)| {
            let p = retention_curve(d);
            Arc::new(VideoAsset::new(format!("v{i}"), vec![SIZES.to_vec(); p.len()], p).unwrap())
        }).collect();
        let samples = bws.iter().enumerate()
            .map(|(i, &mbps)| BandwidthSample { time: i as f64 * 1.5, mbps })
            .collect();
        let trace = Arc::new(NetworkTrace::new("p", samples).unwrap());
        SessionState::new(videos, trace, &SessionConfig::default(), seed).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariants_hold_under_random_policies(mut s in arb_session(), picks in proptest::collection::vec(any::<u32>(), 400)) {
        let mut picks = picks.into_iter().cycle();
        let mut steps = 0;
        let mut scroll = std::collections::HashMap::new();
        for j in 0..s.queue_len() {
            scroll.insert(s.video(j).unwrap().video, s.scroll_chunk(j).unwrap());
        }
        while !s.is_done() && steps < 2000 {
            let mask = s.valid_actions();
            let valid = mask.valid_actions();
            let a = valid[picks.next().unwrap() as usize % valid.len()];
            let clock = s.clock();
            let out = s.step(a).unwrap();
            prop_assert!(out.clock >= clock);
            prop_assert!(out.duration > 0.0 || out.session_done);
            prop_assert!(out.rebuffer >= 0.0);
            prop_assert!(s.accounting_error().abs() < 1e-9);
            for p in &out.played {
                if let Some(&sc) = scroll.get(&p.video) {
                    prop_assert!(p.chunk < sc);
                }
            }
            for j in 0..s.queue_len() {
                scroll.insert(s.video(j).unwrap().video, s.scroll_chunk(j).unwrap());
            }
            for j in 0..s.queue_len() {
                let v = s.video(j).unwrap();
                prop_assert!(v.play_chunk < s.scroll_chunk(j).unwrap() || j != 0);
                prop_assert!(v.next_chunk >= v.play_chunk);
                prop_assert!(v.next_chunk <= v.asset.num_chunks());
            }
            steps += 1;
        }
    }

    #[test]
    fn mask_is_sound(mut s in arb_session(), picks in proptest::collection::vec(any::<u32>(), 60)) {
        for p in picks {
            if s.is_done() {
                break;
            }
            let mask = s.valid_actions();
            for video in 0..MAX_QUEUE {
                for level in 0..4 {
                    let a = Action::Download { video, level };
                    let mut probe = s.clone();
                    prop_assert_eq!(mask.allows(a), probe.step(a).is_ok());
                }
            }
            let valid = mask.valid_actions();
            s.step(valid[p as usize % valid.len()]).unwrap();
        }
    }

    #[test]
    fn download_time_integrates_to_size(
        bws in proptest::collection::vec(0.1f64..10.0, 2..8),
        gaps in proptest::collection::vec(0.1f64..3.0, 8),
        size in 0.001f64..20.0,
        start in 0.0f64..50.0,
    ) {
        let mut t = 0.0;
        let samples: Vec<_> = bws.iter().zip(&gaps).map(|(&mbps, &g)| {
            let s = BandwidthSample { time: t, mbps };
            t += g;
            s
        }).collect();
        let trace = NetworkTrace::new("p", samples).unwrap();
        let d = download_time(size, &trace, start);
        prop_assert!(d > 0.0);
        // Integrate bandwidth_at over [start, start + d] by walking breakpoints.
        let period = trace.period();
        let mut cuts = vec![start, start + d];
        let first_cycle = (start / period).floor() as i64;
        let last_cycle = ((start + d) / period).floor() as i64;
        for c in first_cycle..=last_cycle {
            for s in trace.samples() {
                let x = c as f64 * period + s.time - trace.samples()[0].time;
                if x > start && x < start + d {
                    cuts.push(x);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        let mut megabits = 0.0;
        for w in cuts.windows(2) {
            megabits += (w[1] - w[0]) * trace.bandwidth_at(0.5 * (w[0] + w[1]));
        }
        prop_assert!((megabits - size * 8.0).abs() < 1e-6 * (1.0 + size));
    }
}
