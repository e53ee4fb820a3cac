use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfp::agent::parse_weights;
use dfp::config::KeyValues;
use dfp::harness::{
    calibrate, evaluate_in, run_ablation_table, run_env_matrix, run_goal_matrix, run_train, EnvSetting,
    ExperimentKind, ExperimentSpec,
};
use dfp::trainer::{load_checkpoint, TrainConfig};
use dfp::{Error, Execution, Preset, Result};

#[derive(Parser)]
#[command(name = "dfp", version, about = "Train and evaluate direct future prediction agents on grid worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on its own setting.
    Train(Common),
    /// Evaluate a saved checkpoint.
    Eval {
        /// Checkpoint written by `train` (the `.cfg` header must sit next to it).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Measurement/offset and architecture ablations.
    Ablate(Common),
    /// Fixed and randomized goal regimes under five test goals.
    GoalMatrix(Common),
    /// Train on G3, G4, G3-tx, G4-tx and test on all four.
    EnvMatrix(Common),
    /// Normalizer scales and the random-policy baseline.
    Calibrate(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// G1, G2, G3 or G4, with an optional `-tx` suffix for randomized palettes.
    #[arg(long)]
    scenario: Option<String>,
    /// desk, desk-large or a1.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total agent steps per training run.
    #[arg(long)]
    steps: Option<u64>,
    /// Comma-separated measurement weights, e.g. `0.5,0.5,1`.
    #[arg(long)]
    goal: Option<String>,
    /// Directory for the config snapshot, CSVs and checkpoints.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    actors: Option<usize>,
    /// Single actor, sequential execution: bit-reproducible runs.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    lr: Option<f64>,
    /// Evaluation episodes per setting.
    #[arg(long)]
    episodes: Option<usize>,
    /// Independent training runs (seeds `seed`, `seed+1`, ...) per table cell.
    #[arg(long)]
    runs: Option<usize>,
    /// `key=value` file; flags override its entries.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

fn default_setting(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Train | ExperimentKind::Calibrate => "G1",
        ExperimentKind::AblationTable => "G3-tx",
        _ => "G3",
    }
}

fn build_spec(kind: ExperimentKind, c: &Common) -> Result<ExperimentSpec> {
    let file = match &c.config {
        Some(path) => KeyValues::parse(&fs::read_to_string(path)?)?,
        None => KeyValues::new(),
    };
    let setting: EnvSetting = match (&c.scenario, file.raw("setting").or(file.raw("scenario"))) {
        (Some(s), _) => s.parse()?,
        (None, Some(s)) => s.parse()?,
        (None, None) => default_setting(kind).parse()?,
    };
    let measurements = if setting.scenario.is_battle() { 3 } else { 1 };
    let mut train = TrainConfig::new(measurements);
    train.apply(&file)?;
    if let Some(steps) = c.steps {
        train.total_steps = steps;
    }
    if let Some(actors) = c.actors {
        train.actors = actors;
    }
    if let Some(lr) = c.lr {
        train.learning_rate = lr;
    }
    if let Some(seed) = c.seed {
        train.seed = seed;
    }
    if let Some(goal) = &c.goal {
        let weights = parse_weights(goal)?;
        if weights.len() != measurements {
            return Err(Error::Config(format!(
                "{setting} has {measurements} measurements, goal has {} weights",
                weights.len()
            )));
        }
        train.train_goal.weights = weights.clone();
        train.eval_goal.weights = weights;
    }
    if c.deterministic {
        train.actors = 1;
        train.execution = Execution::Sequential;
    }
    train.verbose = !c.quiet;

    let mut spec = ExperimentSpec::new(kind, setting, train);
    if let Some(p) = c.preset.as_deref().or(file.raw("preset")) {
        spec.preset = p.parse::<Preset>()?;
    }
    if let Some(n) = c.episodes.or(file.get("episodes")?) {
        spec.eval_episodes = n;
    }
    let runs = match kind {
        ExperimentKind::AblationTable | ExperimentKind::GoalMatrix | ExperimentKind::EnvMatrix => 3,
        _ => 1,
    };
    spec.seeds = match (c.runs, file.get_list::<u64>("seeds")?) {
        (Some(n), _) => (0..n as u64).map(|i| spec.train.seed + i).collect(),
        (None, Some(seeds)) if c.seed.is_none() => seeds,
        _ => (0..runs as u64).map(|i| spec.train.seed + i).collect(),
    };
    if spec.seeds.is_empty() {
        return Err(Error::Config("at least one run is required".into()));
    }
    spec.out_dir = c.out.clone();
    Ok(spec)
}

fn print_stats(names: &[String], means: &[f64], stds: &[f64]) {
    for ((n, m), s) in names.iter().zip(means).zip(stds) {
        println!("  {n:<8} {m:>9.3} ± {s:.3}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let spec = build_spec(ExperimentKind::Train, &c)?;
            let (_, report, stats) = run_train(&spec)?;
            println!(
                "{} steps, {} updates, {} episodes in {:.1}s",
                report.steps, report.updates, report.episodes, report.wall_clock
            );
            println!("final evaluation on {} ({} episodes):", spec.setting, spec.eval_episodes);
            print_stats(&report.measurements, &stats.means, &stats.stds);
        }
        Command::Eval { model, common } => {
            let model = load_checkpoint(&model)?;
            let mut common = common;
            if common.scenario.is_none() && common.config.is_none() {
                let battle = model.net.config().input_measurements == 3;
                common.scenario = Some(if battle { "G3" } else { "G1" }.into());
            }
            let spec = build_spec(ExperimentKind::Evaluate, &common)?;
            let weights = spec.train.eval_goal.weights.clone();
            let stats = evaluate_in(
                &model,
                spec.setting,
                &weights,
                spec.eval_episodes,
                spec.train.seed,
                spec.train.execution,
            )?;
            let names: Vec<String> = dfp::envs::GridWorldConfig::new(spec.setting.scenario)
                .measurements
                .iter()
                .map(|m| m.name().to_string())
                .collect();
            println!("{} episodes on {}, goal {:?}:", spec.eval_episodes, spec.setting, weights);
            print_stats(&names, &stats.means, &stats.stds);
            if let Some(dir) = &spec.out_dir {
                fs::create_dir_all(dir)?;
                let mut csv = String::from("measurement,mean,std\n");
                for ((n, m), s) in names.iter().zip(&stats.means).zip(&stats.stds) {
                    csv.push_str(&format!("{n},{m},{s}\n"));
                }
                fs::write(dir.join("eval.csv"), csv)?;
            }
        }
        Command::Ablate(c) => {
            let spec = build_spec(ExperimentKind::AblationTable, &c)?;
            for row in run_ablation_table(&spec)? {
                println!("{:<13} {:<30} frags {:.3}", row.table, row.variant, row.mean());
            }
        }
        Command::GoalMatrix(c) => {
            let spec = build_spec(ExperimentKind::GoalMatrix, &c)?;
            println!("{:<12} {:<16} {:>8} {:>8} {:>8}", "regime", "goal", "ammo", "health", "frags");
            for cell in run_goal_matrix(&spec)? {
                println!(
                    "{:<12} {:<16} {:>8.2} {:>8.2} {:>8.2}",
                    cell.regime.to_string(),
                    format!("{:?}", cell.goal),
                    cell.means[0],
                    cell.means[1],
                    cell.means[2]
                );
            }
        }
        Command::EnvMatrix(c) => {
            let spec = build_spec(ExperimentKind::EnvMatrix, &c)?;
            let rows = run_env_matrix(&spec)?;
            print!("{:<10}", "trained");
            for s in dfp::harness::env_matrix_settings() {
                print!(" {:>8}", s.to_string());
            }
            println!();
            for r in rows {
                print!("{:<10}", r.trained_on);
                for f in r.frags {
                    print!(" {f:>8.2}");
                }
                println!();
            }
        }
        Command::Calibrate(c) => {
            let spec = build_spec(ExperimentKind::Calibrate, &c)?;
            let cal = calibrate(&spec)?;
            println!("{:<8} {:>10} {:>12}", "measure", "scale", "random mean");
            for (j, m) in cal.measurements.iter().enumerate() {
                println!("{m:<8} {:>10.4} {:>12.3}", cal.scales[j], cal.random.means[j]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
