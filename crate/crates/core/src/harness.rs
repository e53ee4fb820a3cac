//! Experiment suites: single runs, ablation tables, goal and environment
//! generalization matrices, and calibration. Every suite can persist a
//! config snapshot, CSV results and checkpoints into an output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{GoalRegime, GoalSpec};
use crate::config::KeyValues;
use crate::envs::{make_appearance_split, Environment, GridWorld, GridWorldConfig, Scenario};
use crate::error::{Error, Result};
use crate::memory::calibrate_normalizer;
use crate::parallel::Execution;
use crate::predictor::{PredictorConfig, Preset};
use crate::trainer::{
    default_offset_coeffs, evaluate, evaluate_random, last_offset_only, save_checkpoint, train, EvalStats,
    TrainConfig, TrainReport, TrainedModel,
};

/// Size of the randomized palette pool and its training share.
pub const PALETTE_POOL: usize = 100;
pub const PALETTE_TRAIN_FRACTION: f64 = 0.9;
/// The train/test palette split is the same for every experiment.
pub const PALETTE_SPLIT_SEED: u64 = 0x7E57;

/// Evaluation goals of the goal matrix.
pub const TEST_GOALS: [[f32; 3]; 5] = [
    [0.5, 0.5, 1.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
];

const FRAGS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Train,
    Evaluate,
    AblationTable,
    GoalMatrix,
    EnvMatrix,
    Calibrate,
}

/// Which palettes an environment draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PaletteSet {
    /// The single default palette.
    Default,
    /// Training share of the randomized pool.
    Train,
    /// Held-out share of the randomized pool.
    Test,
}

/// A scenario, optionally with appearance randomization (`G3-tx`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EnvSetting {
    pub scenario: Scenario,
    pub randomized: bool,
}

impl EnvSetting {
    pub fn new(scenario: Scenario, randomized: bool) -> Self {
        EnvSetting { scenario, randomized }
    }

    /// Palettes used when training in this setting.
    pub fn training_palettes(self) -> PaletteSet {
        if self.randomized {
            PaletteSet::Train
        } else {
            PaletteSet::Default
        }
    }

    /// Palettes used when testing in this setting.
    pub fn test_palettes(self) -> PaletteSet {
        if self.randomized {
            PaletteSet::Test
        } else {
            PaletteSet::Default
        }
    }
}

impl fmt::Display for EnvSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.randomized {
            write!(f, "{}-tx", self.scenario)
        } else {
            write!(f, "{}", self.scenario)
        }
    }
}

impl FromStr for EnvSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.strip_suffix("-tx") {
            Some(base) => Ok(EnvSetting::new(base.parse()?, true)),
            None => Ok(EnvSetting::new(lower.parse()?, false)),
        }
    }
}

pub fn palettes(set: PaletteSet) -> Vec<u32> {
    match set {
        PaletteSet::Default => vec![crate::envs::DEFAULT_PALETTE],
        PaletteSet::Train | PaletteSet::Test => {
            let mut rng = ChaCha8Rng::seed_from_u64(PALETTE_SPLIT_SEED);
            let (train, test) = make_appearance_split(PALETTE_POOL, PALETTE_TRAIN_FRACTION, &mut rng)
                .expect("pool split is valid");
            if set == PaletteSet::Train {
                train
            } else {
                test
            }
        }
    }
}

/// Shared environment configuration plus a factory for actor instances.
#[derive(Clone, Debug)]
pub struct EnvFactory {
    config: Arc<GridWorldConfig>,
}

impl EnvFactory {
    pub fn new(scenario: Scenario, palette_set: PaletteSet) -> Self {
        Self::from_config(GridWorldConfig::new(scenario).with_palettes(palettes(palette_set)))
    }

    pub fn from_config(config: GridWorldConfig) -> Self {
        EnvFactory {
            config: Arc::new(config),
        }
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.config
    }

    pub fn make(&self) -> Result<GridWorld> {
        GridWorld::shared(Arc::clone(&self.config))
    }
}

type VariantKey = (bool, bool, bool, bool, bool);

/// What differs between the rows of the ablation tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    /// Predict only frags instead of every measurement.
    pub frags_only: bool,
    /// Predict only the longest offset.
    pub one_offset: bool,
    pub disable_normalization: bool,
    pub disable_split: bool,
    pub disable_input_measurements: bool,
}

impl Variant {
    pub fn full() -> Self {
        Variant {
            name: "full".into(),
            frags_only: false,
            one_offset: false,
            disable_normalization: false,
            disable_split: false,
            disable_input_measurements: false,
        }
    }

    /// The measurement/offset variants, best expected first.
    pub fn target_variants() -> Vec<Variant> {
        let v = |name: &str, frags_only, one_offset| Variant {
            name: name.into(),
            frags_only,
            one_offset,
            ..Variant::full()
        };
        vec![
            v("all-measurements/all-offsets", false, false),
            v("all-measurements/one-offset", false, true),
            v("frags-only/all-offsets", true, false),
            v("frags-only/one-offset", true, true),
        ]
    }

    /// The architecture variants.
    pub fn architecture_variants() -> Vec<Variant> {
        vec![
            Variant::full(),
            Variant {
                name: "no-normalization".into(),
                disable_normalization: true,
                ..Variant::full()
            },
            Variant {
                name: "no-split".into(),
                disable_split: true,
                ..Variant::full()
            },
            Variant {
                name: "no-input-measurements".into(),
                disable_input_measurements: true,
                ..Variant::full()
            },
        ]
    }

    /// Stable key of the configuration, ignoring the display name.
    fn key(&self) -> VariantKey {
        (
            self.frags_only,
            self.one_offset,
            self.disable_normalization,
            self.disable_split,
            self.disable_input_measurements,
        )
    }
}

/// One training run.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub setting: EnvSetting,
    pub preset: Preset,
    pub variant: Variant,
    pub goal_regime: GoalRegime,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunSpec {
    pub fn new(setting: EnvSetting, preset: Preset, train: TrainConfig, seed: u64) -> Self {
        RunSpec {
            setting,
            preset,
            variant: Variant::full(),
            goal_regime: GoalRegime::Fixed,
            train,
            seed,
        }
    }

    pub fn name(&self) -> String {
        let variant = self.variant.name.replace('/', "_");
        format!(
            "{}_{}_{}_{}_seed{}",
            self.setting, self.preset, variant, self.goal_regime, self.seed
        )
    }

    /// Training config after applying the variant, regime and seed.
    pub fn resolved_train_config(&self, measurements: usize) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = self.seed;
        cfg.goal_regime = self.goal_regime;
        if self.variant.one_offset {
            cfg.offsets = vec![*cfg.offsets.last().expect("offsets are non-empty")];
        }
        let coeffs = if self.variant.one_offset {
            last_offset_only(cfg.offsets.len())
        } else {
            default_offset_coeffs(cfg.offsets.len())
        };
        if self.variant.frags_only && measurements > FRAGS {
            cfg.predicted = vec![FRAGS];
            cfg.train_goal = GoalSpec::new(vec![1.0], coeffs.clone());
            cfg.eval_goal = GoalSpec::new(vec![1.0], coeffs);
        } else {
            cfg.train_goal.offset_coeffs = coeffs.clone();
            cfg.eval_goal.offset_coeffs = coeffs;
        }
        cfg
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("setting", self.setting);
        kv.set("preset", self.preset);
        kv.set("variant", &self.variant.name);
        kv.set("frags_only", self.variant.frags_only);
        kv.set("one_offset", self.variant.one_offset);
        kv.set("disable_normalization", self.variant.disable_normalization);
        kv.set("disable_split", self.variant.disable_split);
        kv.set("disable_input_measurements", self.variant.disable_input_measurements);
        kv.merge(&self.resolved_train_config(3).to_key_values());
        kv
    }
}

/// Predictor for `env` under `preset`, with the variant's target layout and
/// architecture switches.
pub fn predictor_for(preset: Preset, env: &GridWorldConfig, train: &TrainConfig, variant: &Variant) -> PredictorConfig {
    let size = env.view_size();
    let measurements = env.measurements.len();
    let mut cfg = PredictorConfig::preset(
        preset,
        (size, size, env.channels()),
        measurements,
        train.offsets.len(),
        env.action_count(),
    );
    cfg.predicted_measurements = train.predicted_indices(measurements).len();
    cfg.disable_normalization = variant.disable_normalization;
    cfg.disable_split = variant.disable_split;
    cfg.disable_input_measurements = variant.disable_input_measurements;
    cfg
}

/// Trains one model as described by `run`.
pub fn train_run(run: &RunSpec) -> Result<(TrainedModel, TrainReport)> {
    let factory = EnvFactory::new(run.setting.scenario, run.setting.training_palettes());
    let cfg = run.resolved_train_config(factory.config().measurements.len());
    let predictor = predictor_for(run.preset, factory.config(), &cfg, &run.variant);
    train(|| factory.make(), predictor, &cfg)
}

/// Evaluates `model` in `setting` on its test palettes. The goal weights
/// are over the full measurement vector; models that predict a subset see
/// the matching sub-vector.
pub fn evaluate_in(
    model: &TrainedModel,
    setting: EnvSetting,
    weights: &[f32],
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<EvalStats> {
    let factory = EnvFactory::new(setting.scenario, setting.test_palettes());
    let sub: Vec<f32> = if model.predicted.len() == weights.len() {
        weights.to_vec()
    } else {
        model.predicted.iter().map(|&k| weights[k]).collect()
    };
    let coeffs = if model.offsets.len() == 1 {
        vec![1.0]
    } else {
        default_offset_coeffs(model.offsets.len())
    };
    let goal = GoalSpec::new(sub, coeffs);
    evaluate(model, &|| factory.make(), &goal, episodes, seed, exec)
}

/// Suite-level options.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub setting: EnvSetting,
    pub preset: Preset,
    pub train: TrainConfig,
    /// Seeds of the independent training runs averaged by the tables.
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, setting: EnvSetting, train: TrainConfig) -> Self {
        ExperimentSpec {
            kind,
            setting,
            preset: Preset::Desk,
            seeds: vec![train.seed],
            train,
            eval_episodes: 200,
            out_dir: None,
        }
    }

    pub fn snapshot(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("kind", format!("{:?}", self.kind));
        kv.set("setting", self.setting);
        kv.set("preset", self.preset);
        kv.set("seeds", crate::config::join_list(&self.seeds));
        // `eval_episodes` is taken by the in-training evaluations.
        kv.set("episodes", self.eval_episodes);
        kv.merge(&self.train.to_key_values());
        kv
    }

    fn prepare_out(&self) -> Result<Option<&Path>> {
        let Some(dir) = self.out_dir.as_deref() else {
            return Ok(None);
        };
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.snapshot().render())?;
        Ok(Some(dir))
    }
}

fn write_out(dir: Option<&Path>, file: &str, contents: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::write(dir.join(file), contents)?;
    }
    Ok(())
}

/// Trains `run`, persisting its report and checkpoint when `dir` is set.
fn train_and_store(run: &RunSpec, dir: Option<&Path>) -> Result<TrainedModel> {
    let (model, report) = train_run(run)?;
    if let Some(dir) = dir {
        let name = run.name();
        fs::write(dir.join(format!("{name}.csv")), report.to_csv())?;
        fs::write(dir.join(format!("{name}.cfg.txt")), run.to_key_values().render())?;
        save_checkpoint(&model, &dir.join(format!("{name}.dfp")))?;
    }
    Ok(model)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len().max(1) as f64).sqrt()
}

fn eval_seed(run_seed: u64) -> u64 {
    run_seed ^ 0xE7A1_0000
}

/// One training run with a final evaluation on its own setting.
pub fn run_train(spec: &ExperimentSpec) -> Result<(TrainedModel, TrainReport, EvalStats)> {
    let dir = spec.prepare_out()?;
    let seed = spec.seeds.first().copied().unwrap_or(spec.train.seed);
    let run = RunSpec::new(spec.setting, spec.preset, spec.train.clone(), seed);
    let mut run = run;
    run.goal_regime = spec.train.goal_regime;
    let (model, report) = train_run(&run)?;
    let weights = spec.train.eval_goal.weights.clone();
    let stats = evaluate_in(
        &model,
        spec.setting,
        &weights,
        spec.eval_episodes,
        eval_seed(seed),
        spec.train.execution,
    )?;
    if let Some(dir) = dir {
        fs::write(dir.join("report.csv"), report.to_csv())?;
        save_checkpoint(&model, &dir.join("model.dfp"))?;
        fs::write(dir.join("eval.csv"), eval_csv(&report.measurements, &[("final", &stats)]))?;
    }
    Ok((model, report, stats))
}

fn eval_csv(measurements: &[String], rows: &[(&str, &EvalStats)]) -> String {
    let mut out = String::from("name");
    for m in measurements {
        out.push_str(&format!(",{m}_mean,{m}_std"));
    }
    out.push('\n');
    for (name, s) in rows {
        out.push_str(name);
        for (m, sd) in s.means.iter().zip(&s.stds) {
            out.push_str(&format!(",{m},{sd}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub table: &'static str,
    pub variant: String,
    /// Mean terminal frags of every seed.
    pub frags: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        mean(&self.frags)
    }
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("table,variant,frags_mean,frags_seed_std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.table, r.variant, r.mean(), std(&r.frags)));
    }
    out
}

/// Trains and evaluates the measurement/offset variants and the
/// architecture variants, one row each with mean terminal frags. A
/// configuration shared by both tables is trained once.
pub fn run_ablation_table(spec: &ExperimentSpec) -> Result<Vec<AblationRow>> {
    if !spec.setting.scenario.is_battle() {
        return Err(Error::Config("ablation tables need a battle scenario".into()));
    }
    let dir = spec.prepare_out()?;
    let mut cache: Vec<(VariantKey, Vec<f64>)> = Vec::new();
    let mut rows = Vec::new();
    let tables = [
        ("targets", Variant::target_variants()),
        ("architecture", Variant::architecture_variants()),
    ];
    for (table, variants) in tables {
        for variant in variants {
            let frags = match cache.iter().find(|(k, _)| *k == variant.key()) {
                Some((_, f)) => f.clone(),
                None => {
                    let mut frags = Vec::new();
                    for &seed in &spec.seeds {
                        let mut run = RunSpec::new(spec.setting, spec.preset, spec.train.clone(), seed);
                        run.variant = variant.clone();
                        let model = train_and_store(&run, dir)?;
                        let stats = evaluate_in(
                            &model,
                            spec.setting,
                            &TEST_GOALS[0],
                            spec.eval_episodes,
                            eval_seed(seed),
                            spec.train.execution,
                        )?;
                        frags.push(stats.means[FRAGS]);
                    }
                    cache.push((variant.key(), frags.clone()));
                    frags
                }
            };
            rows.push(AblationRow {
                table,
                variant: variant.name,
                frags,
            });
        }
    }
    write_out(dir, "ablation.csv", &ablation_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalMatrixCell {
    pub regime: GoalRegime,
    pub goal: [f32; 3],
    /// Mean terminal (ammo, health, frags) over seeds.
    pub means: Vec<f64>,
}

/// Trains one model per goal regime and evaluates each under every test goal.
pub fn run_goal_matrix(spec: &ExperimentSpec) -> Result<Vec<GoalMatrixCell>> {
    if !spec.setting.scenario.is_battle() {
        return Err(Error::Config("the goal matrix needs a battle scenario".into()));
    }
    let dir = spec.prepare_out()?;
    let mut cells = Vec::new();
    for regime in [GoalRegime::Fixed, GoalRegime::Uniform01, GoalRegime::UniformSym] {
        let mut sums = vec![vec![0.0f64; 3]; TEST_GOALS.len()];
        for &seed in &spec.seeds {
            let mut run = RunSpec::new(spec.setting, spec.preset, spec.train.clone(), seed);
            run.goal_regime = regime;
            let model = train_and_store(&run, dir)?;
            for (g, goal) in TEST_GOALS.iter().enumerate() {
                let stats = evaluate_in(
                    &model,
                    spec.setting,
                    goal,
                    spec.eval_episodes,
                    eval_seed(seed),
                    spec.train.execution,
                )?;
                for (s, m) in sums[g].iter_mut().zip(&stats.means) {
                    *s += m;
                }
            }
        }
        for (g, goal) in TEST_GOALS.iter().enumerate() {
            cells.push(GoalMatrixCell {
                regime,
                goal: *goal,
                means: sums[g].iter().map(|s| s / spec.seeds.len() as f64).collect(),
            });
        }
    }
    let mut csv = String::from("regime,goal,ammo,health,frags\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},\"{}\",{},{},{}\n",
            c.regime,
            crate::config::join_list(&c.goal),
            c.means[0],
            c.means[1],
            c.means[2]
        ));
    }
    write_out(dir, "goal_matrix.csv", &csv)?;
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvMatrixRow {
    /// Training setting, with `-L` appended for the large preset.
    pub trained_on: String,
    /// Mean terminal frags on G3, G4, G3-tx, G4-tx test settings.
    pub frags: Vec<f64>,
}

pub fn env_matrix_settings() -> [EnvSetting; 4] {
    [
        EnvSetting::new(Scenario::G3, false),
        EnvSetting::new(Scenario::G4, false),
        EnvSetting::new(Scenario::G3, true),
        EnvSetting::new(Scenario::G4, true),
    ]
}

/// Trains one model per training setting, plus a large-preset model on
/// G4-tx, and evaluates each on all four test settings.
pub fn run_env_matrix(spec: &ExperimentSpec) -> Result<Vec<EnvMatrixRow>> {
    let dir = spec.prepare_out()?;
    let settings = env_matrix_settings();
    let mut trainings: Vec<(EnvSetting, Preset)> = settings.iter().map(|&s| (s, spec.preset)).collect();
    trainings.push((settings[3], Preset::DeskLarge));
    let mut rows = Vec::new();
    for (setting, preset) in trainings {
        let mut sums = vec![0.0f64; settings.len()];
        for &seed in &spec.seeds {
            let run = RunSpec::new(setting, preset, spec.train.clone(), seed);
            let model = train_and_store(&run, dir)?;
            for (i, &test) in settings.iter().enumerate() {
                let stats = evaluate_in(
                    &model,
                    test,
                    &TEST_GOALS[0],
                    spec.eval_episodes,
                    eval_seed(seed),
                    spec.train.execution,
                )?;
                sums[i] += stats.means[FRAGS];
            }
        }
        let suffix = if preset == Preset::DeskLarge { "-L" } else { "" };
        rows.push(EnvMatrixRow {
            trained_on: format!("{setting}{suffix}"),
            frags: sums.iter().map(|s| s / spec.seeds.len() as f64).collect(),
        });
    }
    let mut csv = String::from("trained_on");
    for s in settings {
        csv.push_str(&format!(",{s}"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.trained_on);
        for f in &r.frags {
            csv.push_str(&format!(",{f}"));
        }
        csv.push('\n');
    }
    write_out(dir, "env_matrix.csv", &csv)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub measurements: Vec<String>,
    pub scales: Vec<f64>,
    /// Random-policy terminal statistics.
    pub random: EvalStats,
}

/// Measures normalizer scales and the random-policy baseline.
pub fn calibrate(spec: &ExperimentSpec) -> Result<Calibration> {
    let dir = spec.prepare_out()?;
    let factory = EnvFactory::new(spec.setting.scenario, spec.setting.training_palettes());
    let mut env = factory.make()?;
    let seed = spec.seeds.first().copied().unwrap_or(spec.train.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalizer = calibrate_normalizer(&mut env, spec.train.calibration_steps, &mut rng)?;
    let random = evaluate_random(&|| factory.make(), spec.eval_episodes, seed, spec.train.execution)?;
    let measurements: Vec<String> = env.spec().measurements.iter().map(|s| s.to_string()).collect();
    let mut csv = String::from("measurement,scale,random_mean,random_std\n");
    for (j, m) in measurements.iter().enumerate() {
        csv.push_str(&format!("{m},{},{},{}\n", normalizer.scales()[j], random.means[j], random.stds[j]));
    }
    write_out(dir, "calibration.csv", &csv)?;
    Ok(Calibration {
        measurements,
        scales: normalizer.scales().to_vec(),
        random,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse() {
        let s: EnvSetting = "G3-tx".parse().unwrap();
        assert_eq!(s, EnvSetting::new(Scenario::G3, true));
        assert_eq!(s.to_string(), "G3-tx");
        assert_eq!("g1".parse::<EnvSetting>().unwrap().to_string(), "G1");
        assert!("G9".parse::<EnvSetting>().is_err());
    }

    #[test]
    fn palette_sets_are_disjoint() {
        let train = palettes(PaletteSet::Train);
        let test = palettes(PaletteSet::Test);
        assert_eq!((train.len(), test.len()), (90, 10));
        assert!(test.iter().all(|p| !train.contains(p)));
        assert_eq!(palettes(PaletteSet::Default), vec![0]);
    }

    #[test]
    fn frags_only_one_offset_variant_resolves() {
        let base = TrainConfig::new(3);
        let mut run = RunSpec::new(EnvSetting::new(Scenario::G3, true), Preset::Desk, base, 4);
        run.variant = Variant::target_variants()[3].clone();
        let cfg = run.resolved_train_config(3);
        assert_eq!(cfg.offsets, vec![32]);
        assert_eq!(cfg.predicted, vec![2]);
        assert_eq!(cfg.train_goal, GoalSpec::new(vec![1.0], vec![1.0]));
        assert_eq!(cfg.seed, 4);
    }
}
