use dfp::predictor::ConvSpec;
use dfp::{choose_action, Execution, PredictionSet, PredictorConfig, PredictorNet, Preset};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(variant: u8) -> PredictorConfig {
    PredictorConfig {
        image_height: 8,
        image_width: 8,
        image_channels: 3,
        input_measurements: 3,
        predicted_measurements: 3,
        offsets: 4,
        actions: 6,
        conv: vec![ConvSpec {
            channels: 4,
            kernel: 3,
            stride: 2,
        }],
        perception_width: 16,
        measurement_widths: vec![8],
        goal_widths: vec![8],
        expectation_hidden: 16,
        action_hidden: 16,
        disable_normalization: variant == 1,
        disable_split: variant == 2,
        disable_input_measurements: false,
    }
}

fn inputs(cfg: &PredictorConfig, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    (
        (0..cfg.sensory_len()).map(|_| rng.random()).collect(),
        (0..cfg.input_measurements).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..cfg.target_dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictions_average_to_the_expectation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = config(0);
        let net = PredictorNet::build(cfg.clone(), &mut rng).unwrap();
        let (s, m, g) = inputs(&cfg, &mut rng);
        let (p, e) = net.forward_with_expectation(&s, &m, &g).unwrap();
        let e = e.unwrap();
        for (j, &ej) in e.iter().enumerate().take(cfg.target_dim()) {
            let mean = (0..cfg.actions).map(|a| f64::from(p.row(a)[j])).sum::<f64>() / cfg.actions as f64;
            prop_assert!((mean - f64::from(ej)).abs() < 1e-4 * (1.0 + f64::from(ej).abs()));
        }
    }

    #[test]
    fn choice_is_the_brute_force_argmax_and_scale_invariant(
        values in prop::collection::vec(-10.0f32..10.0, 5 * 4),
        goal in prop::collection::vec(-1.0f32..1.0, 4),
        scale in 0.01f32..100.0,
    ) {
        let p = PredictionSet::new(5, 4, values.clone()).unwrap();
        let a = choose_action(&p, &goal).unwrap();
        let score = |a: usize| (0..4).map(|j| f64::from(values[a * 4 + j]) * f64::from(goal[j])).sum::<f64>();
        for b in 0..5 {
            prop_assert!(score(a) >= score(b));
        }
        let scaled: Vec<f32> = goal.iter().map(|g| g * scale).collect();
        let b = choose_action(&p, &scaled).unwrap();
        prop_assert!(b == a || (score(b) - score(a)).abs() < 1e-4 * (1.0 + score(a).abs()));
    }

    #[test]
    fn batched_forward_matches_single_rows(seed in any::<u64>(), variant in 0u8..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = config(variant);
        let net = PredictorNet::build(cfg.clone(), &mut rng).unwrap();
        let rows = 5;
        let mut all = (Vec::new(), Vec::new(), Vec::new());
        let mut single = Vec::new();
        for _ in 0..rows {
            let (s, m, g) = inputs(&cfg, &mut rng);
            single.push(net.forward(&s, &m, &g).unwrap());
            all.0.extend(s);
            all.1.extend(m);
            all.2.extend(g);
        }
        for exec in [Execution::Sequential, Execution::Parallel] {
            let batch = net.forward_batch(rows, &all.0, &all.1, &all.2, exec).unwrap();
            for (a, b) in batch.iter().zip(&single) {
                prop_assert_eq!(a.values(), b.values());
            }
        }
    }
}

#[test]
fn ties_go_to_the_lowest_action() {
    let p = PredictionSet::new(3, 2, vec![1.0, 1.0, 2.0, 0.0, 0.0, 2.0]).unwrap();
    assert_eq!(choose_action(&p, &[1.0, 1.0]).unwrap(), 0);
    assert_eq!(choose_action(&p, &[0.0, 0.0]).unwrap(), 0);
    assert!(choose_action(&p, &[1.0]).is_err());
}

#[test]
fn disabling_the_split_leaves_only_the_action_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = PredictorNet::build(config(2), &mut rng).unwrap();
    assert!(net.expectation_width().is_none());
    assert!(net.parameters().find("expectation.0.weight").is_none());
    assert_eq!(net.action_head_width(), 6 * 12);
}

#[test]
fn goal_changes_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = config(0);
    let net = PredictorNet::build(cfg.clone(), &mut rng).unwrap();
    let (s, m, g) = inputs(&cfg, &mut rng);
    let other: Vec<f32> = g.iter().map(|v| -v).collect();
    assert_ne!(
        net.forward(&s, &m, &g).unwrap().values(),
        net.forward(&s, &m, &other).unwrap().values()
    );
}

#[test]
fn reference_architecture_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = PredictorNet::build(PredictorConfig::a1(3, 6, 256), &mut rng).unwrap();
    let p = net.parameters();
    let shape = |n: &str| p.get(p.find(n).unwrap()).shape().to_vec();
    assert_eq!(shape("perception.conv0.kernel"), vec![8, 8, 1, 32]);
    assert_eq!(shape("perception.conv2.kernel"), vec![3, 3, 64, 64]);
    // 84 → 20 → 9 → 7 with valid padding.
    assert_eq!(shape("perception.dense.weight"), vec![7 * 7 * 64, 512]);
    assert_eq!(shape("action.1.weight"), vec![512, 256 * 18]);
    assert_eq!(shape("expectation.1.weight"), vec![512, 18]);
}

#[test]
fn preset_names_parse() {
    for p in [Preset::Desk, Preset::DeskLarge, Preset::A1] {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
    assert!("huge".parse::<Preset>().is_err());
}

#[test]
fn config_survives_key_value_round_trip() {
    for v in 0..3 {
        let cfg = config(v);
        assert_eq!(PredictorConfig::from_key_values(&cfg.to_key_values()).unwrap(), cfg);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cfg = config(0);
    cfg.actions = 0;
    assert!(PredictorNet::build(cfg, &mut rng).is_err());
    let mut cfg = config(0);
    cfg.conv[0].kernel = 9;
    assert!(PredictorNet::build(cfg, &mut rng).is_err());
}

#[test]
fn bad_input_lengths_are_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = config(0);
    let net = PredictorNet::build(cfg.clone(), &mut rng).unwrap();
    let (s, m, g) = inputs(&cfg, &mut rng);
    assert!(net.forward(&s[1..], &m, &g).is_err());
    assert!(net.forward(&s, &m[1..], &g).is_err());
    assert!(net.forward(&s, &m, &g[1..]).is_err());
}
