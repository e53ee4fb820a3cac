//! Sequential vs data-parallel execution of the hot loops.
//!
//! Both strategies produce bit-identical results; only wall time differs.
//! Without the `parallel` feature the two rows measure the same code.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dfp::envs::{Environment, GridWorld, GridWorldConfig, Scenario};
use dfp::harness::{predictor_for, Variant};
use dfp::predictor::TrainingBatch;
use dfp::trainer::{evaluate, TrainConfig, TrainedModel};
use dfp::memory::MeasurementNormalizer;
use dfp::{Execution, PredictorNet, Preset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STRATEGIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (GridWorldConfig, TrainConfig, PredictorNet) {
    let env = GridWorldConfig::new(Scenario::G3);
    let cfg = TrainConfig::new(3);
    let pc = predictor_for(Preset::Desk, &env, &cfg, &Variant::full());
    let net = PredictorNet::build(pc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (env, cfg, net)
}

fn batch(env: &GridWorldConfig, net: &PredictorNet, rows: usize) -> TrainingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut world = GridWorld::new(env.clone()).unwrap();
    let g = net.config().target_dim();
    let mut b = TrainingBatch::default();
    let mut obs = world.reset(0);
    for _ in 0..rows {
        b.sensory.extend(&obs.sensory);
        b.measurements.extend(obs.measurements.iter().map(|m| m / 30.0));
        b.goals.extend((0..g).map(|_| rng.random_range(0.0f32..1.0)));
        b.actions.push(rng.random_range(0..net.config().actions));
        b.targets.extend((0..g).map(|_| rng.random_range(-1.0f32..1.0)));
        b.masks.extend(std::iter::repeat_n(1.0, g));
        let t = world.step(rng.random_range(0..net.config().actions)).unwrap();
        obs = if t.terminal { world.reset(rng.random()) } else { t.observation };
    }
    b
}

fn gradients(c: &mut Criterion) {
    let (env, _, net) = setup();
    let mut group = c.benchmark_group("minibatch_gradient");
    for rows in [64, 256] {
        let b = batch(&env, &net, rows);
        for (name, exec) in STRATEGIES {
            group.bench_with_input(BenchmarkId::new(name, rows), &b, |bench, b| {
                bench.iter(|| black_box(net.loss_and_gradients(b, exec).unwrap()))
            });
        }
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (env, cfg, net) = setup();
    let model = TrainedModel {
        net,
        normalizer: MeasurementNormalizer::a1(),
        offsets: cfg.offsets.clone(),
        predicted: vec![0, 1, 2],
    };
    let make = || GridWorld::new(env.clone());
    let mut group = c.benchmark_group("evaluation_episodes");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(name, |bench| {
            bench.iter(|| black_box(evaluate(&model, &make, &cfg.eval_goal, 8, 3, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, evaluation);
criterion_main!(benches);
