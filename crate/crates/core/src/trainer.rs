//! Training loop, evaluation and checkpoints.
//!
//! Actors run in lockstep: every round each active actor picks an action
//! with the current parameters and steps its own environment (in parallel
//! under [`Execution::Parallel`]); the resulting experiences are then
//! appended in actor order, with one optimizer step after every `k`
//! appended experiences. Rounds therefore see parameters at most one round
//! old, and a run is reproducible from its seed for any actor count.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{
    build_goal_vector, sample_goal, select_action, EpsilonSchedule, GoalRegime, GoalSpec, DEFAULT_OFFSET_COEFFS,
};
use crate::config::{join_list, KeyValues};
use crate::envs::{Environment, Observation};
use crate::error::{Error, Result};
use crate::memory::{calibrate_normalizer, Experience, ExperienceMemory, MeasurementNormalizer, DEFAULT_OFFSETS};
use crate::numerics::checkpoint::{read_parameters, write_parameters};
use crate::numerics::AdamConfig;
use crate::parallel::Execution;
use crate::predictor::{choose_action, PredictorConfig, PredictorNet};

// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_CALIBRATION: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Agent steps summed over all actors.
    pub total_steps: u64,
    pub memory_capacity: usize,
    pub batch_size: usize,
    /// One optimizer step per this many appended experiences.
    pub update_interval: usize,
    pub actors: usize,
    pub learning_rate: f64,
    /// Factor applied at each milestone.
    pub lr_decay: f64,
    /// Fractions of the total number of updates at which the rate decays.
    pub lr_milestones: Vec<f64>,
    pub adam: AdamConfig,
    pub epsilon: EpsilonSchedule,
    pub goal_regime: GoalRegime,
    /// Training goal, or the base whose offsets random goals keep.
    pub train_goal: GoalSpec,
    /// Goal used by evaluations during training.
    pub eval_goal: GoalSpec,
    pub offsets: Vec<usize>,
    /// Indices of the measurements the predictor forecasts; empty means all.
    pub predicted: Vec<usize>,
    /// Evaluate every this many agent steps (0: only at the end).
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub calibration_steps: usize,
    /// Fixed normalizer; calibrated under a random policy when absent.
    pub normalizer: Option<MeasurementNormalizer>,
    pub seed: u64,
    pub execution: Execution,
    /// Print one progress line per evaluation point.
    pub verbose: bool,
}

impl TrainConfig {
    /// Defaults for an environment with `measurements` measurements: the
    /// goal weights are (0.5, 0.5, 1) with three measurements and all ones
    /// otherwise.
    pub fn new(measurements: usize) -> Self {
        let weights = if measurements == 3 {
            vec![0.5, 0.5, 1.0]
        } else {
            vec![1.0; measurements]
        };
        let goal = GoalSpec::with_default_offsets(weights);
        TrainConfig {
            total_steps: 2_000_000,
            memory_capacity: 20_000,
            batch_size: 64,
            update_interval: 64,
            actors: 8,
            learning_rate: 1e-4,
            lr_decay: 0.3,
            lr_milestones: vec![0.6, 0.85],
            adam: AdamConfig::default(),
            epsilon: EpsilonSchedule::default(),
            goal_regime: GoalRegime::Fixed,
            train_goal: goal.clone(),
            eval_goal: goal,
            offsets: DEFAULT_OFFSETS.to_vec(),
            predicted: Vec::new(),
            eval_every: 0,
            eval_episodes: 50,
            calibration_steps: 10_000,
            normalizer: None,
            seed: 0,
            execution: Execution::default(),
            verbose: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.update_interval == 0 || self.batch_size == 0 || self.memory_capacity == 0 || self.actors == 0 {
            return Err(Error::Config("k, N, M and the actor count must be positive".into()));
        }
        if self.offsets.is_empty() || self.offsets[0] == 0 || self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("offsets must be strictly increasing positive integers".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("evaluation needs at least one episode".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Measurement indices in the targets, given the environment's count.
    pub fn predicted_indices(&self, measurements: usize) -> Vec<usize> {
        if self.predicted.is_empty() {
            (0..measurements).collect()
        } else {
            self.predicted.clone()
        }
    }

    /// Learning rate for update `iteration` of `total_iterations`.
    pub fn learning_rate_at(&self, iteration: u64, total_iterations: u64) -> f64 {
        let progress = if total_iterations == 0 {
            0.0
        } else {
            iteration as f64 / total_iterations as f64
        };
        let passed = self.lr_milestones.iter().filter(|&&m| progress >= m).count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("steps", self.total_steps);
        kv.set("memory", self.memory_capacity);
        kv.set("batch", self.batch_size);
        kv.set("update_interval", self.update_interval);
        kv.set("actors", self.actors);
        kv.set("lr", self.learning_rate);
        kv.set("lr_decay", self.lr_decay);
        kv.set("lr_milestones", join_list(&self.lr_milestones));
        kv.set("adam_beta1", self.adam.beta1);
        kv.set("adam_beta2", self.adam.beta2);
        kv.set("adam_epsilon", self.adam.epsilon);
        kv.set("eps_start", self.epsilon.start);
        kv.set("eps_end", self.epsilon.end);
        kv.set("eps_horizon", self.epsilon.horizon);
        kv.set("goal_regime", self.goal_regime);
        kv.set("train_goal", join_list(&self.train_goal.weights));
        kv.set("offset_coeffs", join_list(&self.train_goal.offset_coeffs));
        kv.set("eval_goal", join_list(&self.eval_goal.weights));
        kv.set("eval_offset_coeffs", join_list(&self.eval_goal.offset_coeffs));
        kv.set("offsets", join_list(&self.offsets));
        kv.set("predicted", join_list(&self.predicted));
        kv.set("eval_every", self.eval_every);
        kv.set("eval_episodes", self.eval_episodes);
        kv.set("calibration_steps", self.calibration_steps);
        if let Some(n) = &self.normalizer {
            kv.set("normalizer", n.to_list());
        }
        kv.set("seed", self.seed);
        kv.set(
            "execution",
            match self.execution {
                Execution::Sequential => "sequential",
                Execution::Parallel => "parallel",
            },
        );
        kv
    }

    /// Overrides fields from any keys present in `kv`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        macro_rules! take_list {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get_list($key)? {
                    $field = v;
                }
            };
        }
        take!("steps", self.total_steps);
        take!("memory", self.memory_capacity);
        take!("batch", self.batch_size);
        take!("update_interval", self.update_interval);
        take!("actors", self.actors);
        take!("lr", self.learning_rate);
        take!("lr_decay", self.lr_decay);
        take_list!("lr_milestones", self.lr_milestones);
        take!("adam_beta1", self.adam.beta1);
        take!("adam_beta2", self.adam.beta2);
        take!("adam_epsilon", self.adam.epsilon);
        take!("eps_start", self.epsilon.start);
        take!("eps_end", self.epsilon.end);
        take!("eps_horizon", self.epsilon.horizon);
        take!("goal_regime", self.goal_regime);
        take_list!("train_goal", self.train_goal.weights);
        take_list!("offset_coeffs", self.train_goal.offset_coeffs);
        take_list!("eval_goal", self.eval_goal.weights);
        take_list!("eval_offset_coeffs", self.eval_goal.offset_coeffs);
        take_list!("offsets", self.offsets);
        take_list!("predicted", self.predicted);
        take!("eval_every", self.eval_every);
        take!("eval_episodes", self.eval_episodes);
        take!("calibration_steps", self.calibration_steps);
        if let Some(scales) = kv.get_list::<f64>("normalizer")? {
            self.normalizer = Some(MeasurementNormalizer::new(scales)?);
        }
        take!("seed", self.seed);
        if let Some(e) = kv.raw("execution") {
            self.execution = match e {
                "sequential" => Execution::Sequential,
                "parallel" => Execution::Parallel,
                other => return Err(Error::Config(format!("unknown execution {other}"))),
            };
        }
        Ok(())
    }
}

/// A predictor together with what is needed to act with it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: PredictorNet,
    pub normalizer: MeasurementNormalizer,
    pub offsets: Vec<usize>,
    /// Measurement indices the predictor forecasts.
    pub predicted: Vec<usize>,
}

impl TrainedModel {
    /// Flattened goal vector for this model.
    pub fn goal_vector(&self, goal: &GoalSpec) -> Result<Vec<f32>> {
        build_goal_vector(goal, self.predicted.len(), self.offsets.len())
    }

    /// The greedy action for an observation with raw measurements.
    pub fn act(&self, observation: &Observation, goal: &[f32]) -> Result<usize> {
        let m: Vec<f32> = self.normalizer.normalize_input(&observation.measurements).collect();
        let p = self.net.forward(&observation.sensory, &m, goal)?;
        choose_action(&p, goal)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub step: u64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub wall_clock: f64,
    pub steps_per_sec: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub measurements: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub steps: u64,
    pub appended: u64,
    pub updates: u64,
    pub skipped_updates: u64,
    pub episodes: u64,
    pub wall_clock: f64,
}

impl TrainReport {
    /// CSV with columns `step,eps,lr`, then `<m>_mean,<m>_std` for every
    /// measurement. Timing is left out so that reruns compare equal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,eps,lr");
        for m in &self.measurements {
            out.push_str(&format!(",{m}_mean,{m}_std"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.step, r.epsilon, r.learning_rate));
            for (m, s) in r.means.iter().zip(&r.stds) {
                out.push_str(&format!(",{m},{s}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Terminal measurement statistics over evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Final raw measurements of every episode.
    pub finals: Vec<Vec<f32>>,
}

impl EvalStats {
    fn from_finals(finals: Vec<Vec<f32>>) -> Self {
        let n = finals.first().map_or(0, Vec::len);
        let count = finals.len() as f64;
        let means: Vec<f64> = (0..n)
            .map(|j| finals.iter().map(|f| f64::from(f[j])).sum::<f64>() / count)
            .collect();
        let stds = (0..n)
            .map(|j| {
                let var = finals.iter().map(|f| (f64::from(f[j]) - means[j]).powi(2)).sum::<f64>() / count;
                var.sqrt()
            })
            .collect();
        EvalStats { means, stds, finals }
    }
}

struct Actor<E> {
    env: E,
    rng: ChaCha8Rng,
    observation: Observation,
    goal: GoalSpec,
    goal_vector: Vec<f32>,
    episode: u64,
    started: u64,
    t: u32,
    outcome: Option<Result<Vec<Experience>>>,
}

/// Checks that the predictor matches the environment and returns the
/// measurement names.
fn check_compatibility(
    spec: &crate::envs::EnvSpec,
    predictor: &PredictorConfig,
    cfg: &TrainConfig,
    predicted: &[usize],
) -> Result<()> {
    let (h, w, c) = spec.observation_shape;
    if (predictor.image_height, predictor.image_width, predictor.image_channels) != (h, w, c) {
        return Err(Error::Config(format!(
            "predictor expects {}x{}x{} images, environment produces {h}x{w}x{c}",
            predictor.image_height, predictor.image_width, predictor.image_channels
        )));
    }
    if predictor.actions != spec.actions {
        return Err(Error::Config("predictor and environment disagree on the action count".into()));
    }
    if predictor.input_measurements != spec.measurements.len() {
        return Err(Error::Config("predictor and environment disagree on the measurement count".into()));
    }
    if predictor.predicted_measurements != predicted.len() || predictor.offsets != cfg.offsets.len() {
        return Err(Error::Config("predictor output does not match predicted measurements × offsets".into()));
    }
    if predicted.iter().any(|&k| k >= spec.measurements.len()) {
        return Err(Error::Config("predicted measurement index out of range".into()));
    }
    Ok(())
}

fn new_episode<E: Environment>(actor: &mut Actor<E>, cfg: &TrainConfig, actors: usize, goal_len: (usize, usize)) -> Result<()> {
    actor.goal = sample_goal(cfg.goal_regime, &cfg.train_goal, &mut actor.rng);
    actor.goal_vector = build_goal_vector(&actor.goal, goal_len.0, goal_len.1)?;
    let seed = actor.rng.random();
    actor.observation = actor.env.reset(seed);
    actor.episode = actor.episode % actors as u64 + actor.started * actors as u64;
    actor.started += 1;
    actor.t = 0;
    Ok(())
}

/// Trains a predictor from scratch. `make_env` builds one environment per
/// actor.
pub fn train<F, E>(make_env: F, predictor: PredictorConfig, cfg: &TrainConfig) -> Result<(TrainedModel, TrainReport)>
where
    F: Fn() -> Result<E> + Sync,
    E: Environment,
{
    cfg.validate()?;
    let probe = make_env()?;
    let spec = probe.spec();
    let predicted = cfg.predicted_indices(spec.measurements.len());
    check_compatibility(&spec, &predictor, cfg, &predicted)?;
    let goal_len = (predicted.len(), cfg.offsets.len());
    build_goal_vector(&cfg.train_goal, goal_len.0, goal_len.1)?;
    build_goal_vector(&cfg.eval_goal, goal_len.0, goal_len.1)?;

    let stream = |s| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s);
        rng
    };
    let net = PredictorNet::build(predictor, &mut stream(STREAM_INIT))?;
    let normalizer = match &cfg.normalizer {
        Some(n) if n.len() == spec.measurements.len() => n.clone(),
        Some(_) => return Err(Error::Config("normalizer length does not match the measurements".into())),
        None => {
            let mut env = probe;
            calibrate_normalizer(&mut env, cfg.calibration_steps, &mut stream(STREAM_CALIBRATION))?
        }
    };
    let mut model = TrainedModel {
        net,
        normalizer,
        offsets: cfg.offsets.clone(),
        predicted,
    };
    let mut report = TrainReport {
        measurements: spec.measurements.iter().map(|s| s.to_string()).collect(),
        ..TrainReport::default()
    };
    if cfg.total_steps == 0 {
        return Ok((model, report));
    }

    let mut memory = ExperienceMemory::new(cfg.memory_capacity, &cfg.offsets)?;
    let mut sampler = stream(STREAM_SAMPLER);
    let total_updates = cfg.total_steps / cfg.update_interval as u64;
    let mut actors = Vec::with_capacity(cfg.actors);
    for i in 0..cfg.actors {
        let mut actor = Actor {
            env: make_env()?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64)),
            observation: Observation {
                sensory: Vec::new(),
                measurements: Vec::new(),
            },
            goal: cfg.train_goal.clone(),
            goal_vector: Vec::new(),
            episode: i as u64,
            started: 0,
            t: 0,
            outcome: None,
        };
        new_episode(&mut actor, cfg, cfg.actors, goal_len)?;
        actors.push(actor);
    }
    report.episodes = cfg.actors as u64;

    let start = Instant::now();
    let mut steps = 0u64;
    let mut next_eval = if cfg.eval_every == 0 { u64::MAX } else { cfg.eval_every };
    let mut loss_sum = 0.0f64;
    let mut loss_count = 0u64;
    let mut last_row_time = 0.0f64;
    let mut last_row_step = 0u64;

    while steps < cfg.total_steps {
        let active = (cfg.total_steps - steps).min(cfg.actors as u64) as usize;
        let epsilon = cfg.epsilon.value(steps, cfg.total_steps);
        {
            let model = &model;
            let actors_total = cfg.actors;
            cfg.execution.for_each_mut(&mut actors[..active], |_, actor| {
                let outcome = act_once(actor, model, epsilon, cfg, actors_total, goal_len);
                actor.outcome = Some(outcome);
            });
        }
        steps += active as u64;
        for actor in &mut actors[..active] {
            let experiences = actor.outcome.take().expect("actor ran this round")?;
            if experiences.last().is_some_and(|e| e.terminal) {
                report.episodes += 1;
            }
            for exp in experiences {
                memory.append(exp)?;
                if memory.inserted() % cfg.update_interval as u64 == 0 {
                    if memory.eligible_count() == 0 {
                        report.skipped_updates += 1;
                        continue;
                    }
                    let lr = cfg.learning_rate_at(report.updates, total_updates);
                    let (batch, _) =
                        memory.sample_minibatch(cfg.batch_size, &model.normalizer, &model.predicted, &mut sampler)?;
                    let loss = model
                        .net
                        .train_step(&batch, lr, &cfg.adam, cfg.execution)
                        .map_err(|e| match e {
                            Error::NonFiniteLoss { loss, .. } => Error::NonFiniteLoss { loss, step: steps },
                            other => other,
                        })?;
                    loss_sum += f64::from(loss);
                    loss_count += 1;
                    report.updates += 1;
                }
            }
        }

        if steps >= next_eval || steps >= cfg.total_steps {
            while next_eval <= steps {
                next_eval = next_eval.saturating_add(cfg.eval_every.max(1));
            }
            let eval_seed = cfg.seed ^ 0x5EED_E7A1 ^ steps;
            let stats = evaluate(&model, &make_env, &cfg.eval_goal, cfg.eval_episodes, eval_seed, cfg.execution)?;
            let elapsed = start.elapsed().as_secs_f64();
            let row = ReportRow {
                step: steps,
                epsilon,
                learning_rate: cfg.learning_rate_at(report.updates, total_updates),
                means: stats.means,
                stds: stats.stds,
                loss: if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 },
                wall_clock: elapsed,
                steps_per_sec: (steps - last_row_step) as f64 / (elapsed - last_row_time).max(1e-9),
            };
            if cfg.verbose {
                let summary: Vec<String> = report
                    .measurements
                    .iter()
                    .zip(&row.means)
                    .map(|(m, v)| format!("{m}={v:.2}"))
                    .collect();
                println!(
                    "step {:>9}  eps {:.3}  lr {:.2e}  loss {:.4}  {}  {:.0} steps/s",
                    row.step,
                    row.epsilon,
                    row.learning_rate,
                    row.loss,
                    summary.join(" "),
                    row.steps_per_sec
                );
            }
            last_row_time = elapsed;
            last_row_step = steps;
            loss_sum = 0.0;
            loss_count = 0;
            report.rows.push(row);
        }
    }
    report.steps = steps;
    report.appended = memory.inserted();
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok((model, report))
}

fn act_once<E: Environment>(
    actor: &mut Actor<E>,
    model: &TrainedModel,
    epsilon: f64,
    cfg: &TrainConfig,
    actors: usize,
    goal_len: (usize, usize),
) -> Result<Vec<Experience>> {
    let measurements: Vec<f32> = model.normalizer.normalize_input(&actor.observation.measurements).collect();
    let action = select_action(
        &model.net,
        &actor.observation.sensory,
        &measurements,
        &actor.goal_vector,
        epsilon,
        &mut actor.rng,
    )?;
    let transition = actor.env.step(action)?;
    let previous = std::mem::replace(&mut actor.observation, transition.observation);
    let mut out = Vec::with_capacity(2);
    out.push(Experience {
        sensory: previous.sensory,
        measurements: previous.measurements,
        action,
        goal: actor.goal.clone(),
        episode: actor.episode,
        step: actor.t,
        terminal: false,
    });
    actor.t += 1;
    if transition.terminal {
        out.push(Experience {
            sensory: actor.observation.sensory.clone(),
            measurements: actor.observation.measurements.clone(),
            action: 0,
            goal: actor.goal.clone(),
            episode: actor.episode,
            step: actor.t,
            terminal: true,
        });
        new_episode(actor, cfg, actors, goal_len)?;
    }
    Ok(out)
}

fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| rng.random()).collect()
}

fn run_episode<E: Environment>(
    env: &mut E,
    seed: u64,
    mut policy: impl FnMut(&Observation) -> Result<usize>,
) -> Result<Vec<f32>> {
    let mut observation = env.reset(seed);
    loop {
        let action = policy(&observation)?;
        let t = env.step(action)?;
        observation = t.observation;
        if t.terminal {
            return Ok(observation.measurements);
        }
    }
}

/// Greedy (ε = 0) evaluation: final measurements over `episodes` episodes,
/// run in parallel and each seeded from `seed`.
pub fn evaluate<F, E>(
    model: &TrainedModel,
    make_env: &F,
    goal: &GoalSpec,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<EvalStats>
where
    F: Fn() -> Result<E> + Sync,
    E: Environment,
{
    if episodes == 0 {
        return Err(Error::invalid_argument("evaluation needs at least one episode"));
    }
    let goal = model.goal_vector(goal)?;
    let seeds = episode_seeds(seed, episodes);
    let finals = exec.map_indices(episodes, |i| {
        let mut env = make_env()?;
        run_episode(&mut env, seeds[i], |obs| model.act(obs, &goal))
    });
    Ok(EvalStats::from_finals(finals.into_iter().collect::<Result<_>>()?))
}

/// Uniformly random policy over the same episode seeds [`evaluate`] uses.
pub fn evaluate_random<F, E>(make_env: &F, episodes: usize, seed: u64, exec: Execution) -> Result<EvalStats>
where
    F: Fn() -> Result<E> + Sync,
    E: Environment,
{
    if episodes == 0 {
        return Err(Error::invalid_argument("evaluation needs at least one episode"));
    }
    let seeds = episode_seeds(seed, episodes);
    let finals = exec.map_indices(episodes, |i| {
        let mut env = make_env()?;
        let actions = env.spec().actions;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        rng.set_stream(1);
        run_episode(&mut env, seeds[i], |_| Ok(rng.random_range(0..actions)))
    });
    Ok(EvalStats::from_finals(finals.into_iter().collect::<Result<_>>()?))
}

/// Path of the text header stored next to a checkpoint.
pub fn header_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".cfg");
    PathBuf::from(name)
}

/// Writes the parameters to `path` and the predictor configuration,
/// normalizer and target layout to `<path>.cfg`.
pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_parameters(model.net.parameters(), &mut out)?;
    out.flush()?;
    let mut kv = model.net.config().to_key_values();
    kv.set("normalizer", model.normalizer.to_list());
    kv.set("target_offsets", join_list(&model.offsets));
    kv.set("target_measurements", join_list(&model.predicted));
    fs::write(header_path(path), kv.render())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let header = fs::read_to_string(header_path(path))?;
    let kv = KeyValues::parse(&header)?;
    let config = PredictorConfig::from_key_values(&kv)?;
    let list = |key: &str| -> Result<Vec<usize>> {
        kv.get_list(key)?.ok_or_else(|| Error::Config(format!("missing key {key}")))
    };
    let offsets = list("target_offsets")?;
    let predicted = list("target_measurements")?;
    let scales = kv
        .get_list::<f64>("normalizer")?
        .ok_or_else(|| Error::Config("missing key normalizer".into()))?;
    if offsets.len() != config.offsets || predicted.len() != config.predicted_measurements {
        return Err(Error::Config("target layout does not match the predictor".into()));
    }

    let params = read_parameters(BufReader::new(fs::File::open(path)?))?;
    // The freshly built values are all overwritten below.
    let mut net = PredictorNet::build(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let store = net.parameters_mut();
    if params.len() != store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "checkpoint has {} parameters, network has {}",
            params.len(),
            store.len()
        )));
    }
    let (names, tensors): (Vec<String>, Vec<_>) = params.into_iter().unzip();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != names.len() {
        return Err(Error::CorruptCheckpoint("duplicate parameter names".into()));
    }
    store.replace_values(&names, tensors)?;
    Ok(TrainedModel {
        net,
        normalizer: MeasurementNormalizer::new(scales)?,
        offsets,
        predicted,
    })
}

/// Offset coefficients that weight only the longest offset.
pub fn last_offset_only(offsets: usize) -> Vec<f32> {
    let mut c = vec![0.0; offsets];
    if let Some(last) = c.last_mut() {
        *last = 1.0;
    }
    c
}

/// Default offset coefficients resized to `offsets` entries, keeping the
/// weights of the longest horizons.
pub fn default_offset_coeffs(offsets: usize) -> Vec<f32> {
    let d = &DEFAULT_OFFSET_COEFFS;
    if offsets >= d.len() {
        let mut c = vec![0.0; offsets - d.len()];
        c.extend_from_slice(d);
        c
    } else {
        d[d.len() - offsets..].to_vec()
    }
}
