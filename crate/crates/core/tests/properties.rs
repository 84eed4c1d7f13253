use bitrap::data::{make_windows, parse_bev, write_bev, AgentTrack, Scene, Standardizer};
use bitrap::gmm::{gmm_log_prob, GmmSpace, GmmStep};
use bitrap::latent::softmax;
use bitrap::metrics::{ade, best_of_n, fde, kde_nll, DisplacementMode};
use bitrap::tensor::Matrix;
use proptest::collection::vec;
use proptest::prelude::*;

const M: DisplacementMode = DisplacementMode::EuclideanM;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    vec(-50.0..50.0f64, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d))
}

/// Track frames built from positive gaps, so some tracks have holes.
fn track_strategy() -> impl Strategy<Value = (Vec<i64>, usize)> {
    vec(prop_oneof![4 => Just(1i64), 1 => 2..5i64], 0..40).prop_map(|gaps| {
        let mut frames = vec![0];
        for g in gaps {
            frames.push(frames.last().unwrap() + g);
        }
        let n = frames.len();
        (frames, n)
    })
}

/// Window count from run lengths: sum over runs of `floor((len - span) / stride) + 1`.
fn expected_windows(frames: &[i64], span: usize, stride: usize) -> usize {
    let mut count = 0;
    let mut len = 1;
    let flush = |len: usize| {
        if len >= span {
            (len - span) / stride + 1
        } else {
            0
        }
    };
    for w in frames.windows(2) {
        if w[1] - w[0] == 1 {
            len += 1;
        } else {
            count += flush(len);
            len = 1;
        }
    }
    count + flush(len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_count_matches_run_lengths(
        tracks in vec(track_strategy(), 1..5),
        tau in 1usize..6,
        delta in 1usize..8,
        stride in 1usize..4,
    ) {
        let agents: Vec<AgentTrack> = tracks
            .iter()
            .enumerate()
            .map(|(i, (frames, n))| {
                let states = Matrix::from_vec(*n, 2, (0..2 * n).map(|v| v as f64).collect());
                AgentTrack::new(format!("a{i}"), frames.clone(), states).unwrap()
            })
            .collect();
        let scene = Scene::new("s", 0.4, agents).unwrap();
        // Frame step is inferred as the gcd of gaps; force unit spacing semantics.
        prop_assume!(scene.frame_step == 1);
        let set = make_windows(&scene, tau, delta, stride).unwrap();
        let want: usize = tracks.iter().map(|(f, _)| expected_windows(f, tau + delta, stride)).sum();
        prop_assert_eq!(set.windows.len(), want);
        for w in &set.windows {
            prop_assert_eq!(w.tau(), tau);
            prop_assert_eq!(w.delta(), delta);
        }
    }

    #[test]
    fn standardizer_round_trips(states in matrix(10, 2), shift in vec(-5.0..5.0f64, 2), scale in vec(0.1..10.0f64, 2)) {
        let std = Standardizer { shift, scale };
        let back = std.invert_states(&std.apply_states(&states));
        for (a, b) in back.data().iter().zip(states.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bev_text_round_trips(rows in vec((0i64..5, 0i64..4, -100.0..100.0f64, -100.0..100.0f64), 1..30)) {
        let mut by_agent: std::collections::BTreeMap<i64, Vec<(i64, f64, f64)>> = Default::default();
        for (frame, agent, x, y) in rows {
            let e = by_agent.entry(agent).or_default();
            if !e.iter().any(|r| r.0 == frame * 10) {
                e.push((frame * 10, x, y));
            }
        }
        let tracks: Vec<AgentTrack> = by_agent
            .into_iter()
            .map(|(a, mut rs)| {
                rs.sort_by_key(|r| r.0);
                let frames = rs.iter().map(|r| r.0).collect();
                let states = Matrix::from_vec(rs.len(), 2, rs.iter().flat_map(|r| [r.1, r.2]).collect());
                AgentTrack::new(a.to_string(), frames, states).unwrap()
            })
            .collect();
        let scene = Scene::new("s", 0.4, tracks).unwrap();
        let parsed = parse_bev(&write_bev(&scene).unwrap(), "s", 0.4).unwrap();
        prop_assert_eq!(parsed.tracks.len(), scene.tracks.len());
        for (a, b) in parsed.tracks.iter().zip(&scene.tracks) {
            prop_assert_eq!(&a.frames, &b.frames);
            prop_assert_eq!(a.states.data(), b.states.data());
        }
    }

    #[test]
    fn displacement_errors_are_nonnegative_and_zero_on_self(p in matrix(6, 2), g in matrix(6, 2)) {
        prop_assert!(ade(&p, &g, M).unwrap() >= 0.0);
        prop_assert!(fde(&p, &g, M).unwrap() >= 0.0);
        prop_assert_eq!(ade(&g, &g, M).unwrap(), 0.0);
        prop_assert_eq!(fde(&g, &g, M).unwrap(), 0.0);
    }

    #[test]
    fn best_of_n_is_monotone_in_n(samples in vec(matrix(5, 2), 1..12), g in matrix(5, 2)) {
        let metric = |p: &Matrix, g: &Matrix| ade(p, g, M);
        let mut prev = f64::INFINITY;
        for n in 1..=samples.len() {
            let v = best_of_n(&samples[..n], &g, metric).unwrap();
            prop_assert!(v <= prev);
            prev = v;
        }
        // The minimum is attained by some sample.
        prop_assert!(samples.iter().any(|s| metric(s, &g).unwrap() == prev));
    }

    #[test]
    fn kde_average_is_mean_of_steps(samples in vec(matrix(4, 2), 2..20), g in matrix(4, 2)) {
        let r = kde_nll(&samples, &g, 0.01).unwrap();
        let mean = r.per_step.iter().sum::<f64>() / r.per_step.len() as f64;
        prop_assert!((r.average - mean).abs() < 1e-12);
        prop_assert_eq!(r.final_step, r.per_step[3]);
    }

    #[test]
    fn kde_nll_ignores_sample_order(samples in vec(matrix(3, 2), 2..15), g in matrix(3, 2), rot in 0usize..15) {
        let mut shuffled = samples.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let a = kde_nll(&samples, &g, 0.01).unwrap();
        let b = kde_nll(&shuffled, &g, 0.01).unwrap();
        for (x, y) in a.per_step.iter().zip(&b.per_step) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_density_ignores_component_order(
        logits in vec(-3.0..3.0f64, 3),
        means in vec(-3.0..3.0f64, 6),
        stds in vec(0.1..2.0f64, 6),
        corr in vec(-0.9..0.9f64, 3),
        y in vec(-4.0..4.0f64, 2),
    ) {
        let step = GmmStep {
            weights: softmax(&logits),
            means: (0..3).map(|c| [means[2 * c], means[2 * c + 1]]).collect(),
            covs: (0..3)
                .map(|c| {
                    let (sx, sy) = (stds[2 * c], stds[2 * c + 1]);
                    let off = corr[c] * sx * sy;
                    [[sx * sx, off], [off, sy * sy]]
                })
                .collect(),
            space: GmmSpace::Position,
        };
        let y = [y[0], y[1]];
        let a = gmm_log_prob(&step, &y).unwrap();
        let b = gmm_log_prob(&step.permuted(&[2, 0, 1]), &y).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
