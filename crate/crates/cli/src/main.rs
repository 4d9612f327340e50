mod config;
mod inspect;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use rearrange_core::environment::{aggregate, generate_task, run_episode, Difficulty, EpisodeMetrics};
use rearrange_core::hypotheses::{build_llm_belief, HypothesisTree, QueryContext, TreeShape};
use rearrange_core::{Kitchen, Observation};

use config::{config_hash, AgentArgs, BenchConfig, RunConfig, TaskSource};
use output::OutDir;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unrecognized artifact {0} (expected a task file, belief dump, tree, metrics file or step log)")]
    UnknownArtifact(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

const EXIT_TASK_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

/// Belief-space planning for open-ended kitchen rearrangement.
#[derive(Parser)]
#[command(name = "rearrange", version, about)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its config, metrics and step log.
    Run(RunArgs),
    /// Run seeded tasks per difficulty and write per-episode and aggregate tables.
    Bench(BenchArgs),
    /// Write a generated task file.
    Generate(GenerateArgs),
    /// Summarize a task file, belief dump, hypothesis tree, metrics file or step log.
    Inspect(InspectArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["task", "generate"])))]
struct RunArgs {
    #[command(flatten)]
    agent: AgentArgs,
    /// Task document to run.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Generate a task of this difficulty instead.
    #[arg(long)]
    generate: Option<Difficulty>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write the initial belief and hypothesis tree.
    #[arg(long)]
    dump_belief: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    agent: AgentArgs,
    /// Tasks per difficulty.
    #[arg(short = 'n', long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, value_delimiter = ',', default_value = "easy,medium,hard")]
    difficulties: Vec<Difficulty>,
    #[arg(long, default_value = "bench")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "one_wall")]
    kitchen: String,
    #[arg(long)]
    generate: Difficulty,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Inspect(a) => inspect::report(&a.path).map(|r| {
            print!("{r}");
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_TASK_FAILURE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

#[derive(Serialize)]
struct TreeDump<'a> {
    shape: TreeShape,
    tree: &'a HypothesisTree,
}

/// Returns whether the episode succeeded.
fn cmd_run(args: &RunArgs) -> Result<bool, CliError> {
    let setup = args.agent.setup()?;
    let (source, text) = match (&args.task, args.generate) {
        (Some(path), _) => {
            let (source, text) = TaskSource::file(path)?;
            (source, Some(text))
        }
        (None, Some(difficulty)) => {
            let kitchen = setup.kitchen.clone().unwrap_or_else(|| "one_wall".into());
            (TaskSource::Generated { kitchen, difficulty, seed: setup.seed }, None)
        }
        (None, None) => unreachable!("clap requires a task source"),
    };
    let task = source.load(text.as_deref(), setup.kitchen.as_deref())?;
    setup.check_generator()?;
    let config = RunConfig { task: source, setup };
    let out = OutDir::create(&args.out, config_hash(&config))?;
    out.json("config.json", &config)?;
    let setup = &config.setup;

    if args.dump_belief {
        let generator = setup.generator(&task, setup.seed)?;
        let graph = task.initial_graph().map_err(|e| CliError::Config(e.to_string()))?;
        let built = build_llm_belief(
            &Observation::new(&graph),
            &QueryContext::new(task.instruction.clone()),
            generator.as_ref(),
            setup.agent.c1,
            setup.agent.c2,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        out.text("belief.txt", &built.belief.to_string())?;
        out.json("tree.json", &TreeDump { shape: built.tree.shape(), tree: &built.tree })?;
    }

    let generator = setup.generator(&task, setup.seed)?;
    let metrics = run_episode(&task, &setup.agent, generator.as_ref(), &setup.limits(&task))
        .map_err(|e| CliError::Config(e.to_string()))?;
    out.json("metrics.json", &metrics)?;
    out.jsonl("steps.jsonl", &metrics.per_step)?;
    println!(
        "{}: {} in {} steps, reward {:.2}, planning {:.2}s ({})",
        task.kitchen_id(),
        if metrics.success { "success" } else { "failure" },
        metrics.steps_taken,
        metrics.cumulative_reward,
        metrics.planning_time,
        out.path("metrics.json").display(),
    );
    if let Some(reason) = &metrics.failure {
        println!("failure: {reason}");
    }
    Ok(metrics.success)
}

#[derive(Serialize)]
struct BenchEpisode<'a> {
    task_seed: u64,
    #[serde(flatten)]
    metrics: &'a EpisodeMetrics,
}

fn cmd_bench(args: &BenchArgs) -> Result<bool, CliError> {
    let setup = args.agent.setup()?;
    if args.tasks == 0 {
        return Err(CliError::Config("--tasks must be at least 1".into()));
    }
    if args.difficulties.is_empty() {
        return Err(CliError::Config("--difficulties must name at least one level".into()));
    }
    setup.check_generator()?;
    let kitchens: Vec<String> = match &setup.kitchen {
        Some(k) => vec![k.clone()],
        None => Kitchen::builtin_ids().map(str::to_owned).collect(),
    };
    let config = BenchConfig {
        tasks_per_difficulty: args.tasks,
        difficulties: args.difficulties.clone(),
        kitchens: kitchens.clone(),
        setup,
    };
    let out = OutDir::create(&args.out, config_hash(&config))?;
    out.json("config.json", &config)?;
    let setup = &config.setup;

    let jobs: Vec<(Difficulty, u64, &str)> = args
        .difficulties
        .iter()
        .flat_map(|&d| {
            (0..args.tasks as u64).map(move |i| (d, i))
        })
        .map(|(d, i)| (d, setup.seed + i, kitchens[i as usize % kitchens.len()].as_str()))
        .collect();
    let results: Vec<Result<(u64, EpisodeMetrics), CliError>> = jobs
        .par_iter()
        .map(|&(d, seed, kitchen)| {
            let task = generate_task(kitchen, d, seed).map_err(|e| CliError::Config(e.to_string()))?;
            let generator = setup.generator(&task, seed)?;
            let m = run_episode(&task, &setup.agent, generator.as_ref(), &setup.limits(&task))
                .map_err(|e| CliError::Config(e.to_string()))?;
            info!("{d} seed {seed} in {kitchen}: success {} after {} steps", m.success, m.steps_taken);
            Ok((seed, m))
        })
        .collect();
    let episodes: Vec<(u64, EpisodeMetrics)> = results.into_iter().collect::<Result<_, _>>()?;
    out.jsonl("episodes.jsonl", episodes.iter().map(|(seed, m)| BenchEpisode { task_seed: *seed, metrics: m }))?;
    let metrics: Vec<EpisodeMetrics> = episodes.into_iter().map(|(_, m)| m).collect();
    let rows = aggregate(&metrics);
    out.aggregate_csv(&rows)?;
    out.plot_csv(setup.method(), &rows, &metrics)?;

    println!("{:<8} {:>8} {:>16} {:>18} {:>14} {:>12}", "level", "episodes", "success", "reward", "steps", "tokens");
    for r in &rows {
        println!(
            "{:<8} {:>8} {:>7.1}% ± {:>5.1} {:>9.1} ± {:>6.1} {:>6.1} ± {:>5.1} {:>12.0}",
            r.difficulty,
            r.episodes,
            100.0 * r.success_rate,
            100.0 * r.success_se,
            r.reward_mean,
            r.reward_se,
            r.steps_mean,
            r.steps_se,
            r.tokens_mean,
        );
    }
    println!("results in {}", out.path("aggregate.csv").display());
    Ok(true)
}

fn cmd_generate(args: &GenerateArgs) -> Result<bool, CliError> {
    let task = generate_task(&args.kitchen, args.generate, args.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let json = task.to_json();
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))?,
        None => println!("{json}"),
    }
    Ok(true)
}
