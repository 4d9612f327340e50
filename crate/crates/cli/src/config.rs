use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rearrange_core::environment::{generate_task, load_task_with, AgentConfig, Difficulty, EpisodeLimits, TaskSpec};
use rearrange_core::hypotheses::{HypothesisGenerator, LlmConfig, LlmGenerator, MockConfig, MockGenerator};
use rearrange_core::planner::Planner;
use rearrange_core::{Kitchen, RewardConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Mock,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MockProfile {
    /// Truth favoured among decoys.
    Oracle,
    /// Truth present but weights drawn at random.
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RewardPreset {
    ModelDefault,
    Experiment,
}

impl RewardPreset {
    pub fn rewards(self) -> RewardConfig {
        match self {
            RewardPreset::ModelDefault => RewardConfig::model_default(),
            RewardPreset::Experiment => RewardConfig::experiment(),
        }
    }
}

/// Agent, generator and limit flags shared by `run` and `bench`.
#[derive(Debug, Clone, Args)]
pub struct AgentArgs {
    /// Built-in kitchen layout (one_wall, one_wall_island, l_shaped, l_shaped_island, galley).
    #[arg(long)]
    pub kitchen: Option<String>,
    #[arg(long, value_enum, default_value = "mock")]
    pub generator: GeneratorKind,
    #[arg(long, value_enum, default_value = "oracle")]
    pub mock_profile: MockProfile,
    #[arg(long, value_enum, default_value = "model-default")]
    pub reward_preset: RewardPreset,
    /// Sampled scenarios per planning call (k).
    #[arg(long)]
    pub scenarios: Option<usize>,
    /// Search horizon.
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub rollout_depth: Option<usize>,
    /// Leaf expansions per planning call.
    #[arg(long)]
    pub max_expansions: Option<usize>,
    /// Planner threads (0 = shared pool, 1 = sequential).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Supplementation threshold parameter: new hypotheses are queried when
    /// the surviving weight falls below 1 - epsilon.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Goal combinations per query.
    #[arg(long)]
    pub c1: Option<usize>,
    /// Location candidates per hidden object.
    #[arg(long)]
    pub c2: Option<usize>,
    /// Keep only the most likely particle after every update.
    #[arg(long)]
    pub collapse: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the difficulty's step limit.
    #[arg(long)]
    pub step_limit: Option<usize>,
    /// Planning seconds per episode.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Chat-completions endpoint for the llm generator.
    #[arg(long)]
    pub llm_endpoint: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    pub llm_key_env: String,
}

/// Everything that determines an episode's behaviour apart from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSetup {
    pub kitchen: Option<String>,
    pub generator: GeneratorKind,
    pub mock_profile: MockProfile,
    pub llm: Option<LlmConfig>,
    pub reward_preset: RewardPreset,
    pub agent: AgentConfig,
    pub step_limit: Option<usize>,
    pub time_limit: f64,
    pub seed: u64,
}

impl AgentArgs {
    pub fn setup(&self) -> Result<AgentSetup, CliError> {
        let mut agent = AgentConfig { rewards: self.reward_preset.rewards(), ..Default::default() };
        agent.planner.seed = self.seed;
        set(&mut agent.planner.num_scenarios, self.scenarios);
        set(&mut agent.planner.max_depth, self.max_depth);
        set(&mut agent.planner.rollout_depth, self.rollout_depth);
        set(&mut agent.planner.max_expansions, self.max_expansions);
        set(&mut agent.planner.threads, self.threads);
        set(&mut agent.belief.epsilon, self.epsilon);
        set(&mut agent.c1, self.c1);
        set(&mut agent.c2, self.c2);
        agent.collapse_to_max = self.collapse;

        Planner::new(agent.planner.clone(), agent.rewards).map_err(|e| CliError::Config(e.to_string()))?;
        agent.belief.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if agent.c1 == 0 || agent.c2 == 0 {
            return Err(CliError::Config("--c1 and --c2 must be at least 1".into()));
        }
        if let Some(k) = &self.kitchen {
            Kitchen::builtin(k).map_err(|e| CliError::Config(e.to_string()))?;
        }
        let time_limit = self.time_limit.unwrap_or(EpisodeLimits::TIME_LIMIT);
        if time_limit.is_nan() || time_limit <= 0.0 {
            return Err(CliError::Config(format!("--time-limit must be positive, got {time_limit}")));
        }
        if self.step_limit == Some(0) {
            return Err(CliError::Config("--step-limit must be at least 1".into()));
        }
        let llm = (self.generator == GeneratorKind::Llm).then(|| {
            let mut cfg = LlmConfig { api_key_env: self.llm_key_env.clone(), ..Default::default() };
            set(&mut cfg.endpoint, self.llm_endpoint.clone());
            set(&mut cfg.model, self.llm_model.clone());
            cfg
        });
        Ok(AgentSetup {
            kitchen: self.kitchen.clone(),
            generator: self.generator,
            mock_profile: self.mock_profile,
            llm,
            reward_preset: self.reward_preset,
            agent,
            step_limit: self.step_limit,
            time_limit,
            seed: self.seed,
        })
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl AgentSetup {
    pub fn limits(&self, task: &TaskSpec) -> EpisodeLimits {
        EpisodeLimits { step_limit: self.step_limit.unwrap_or_else(|| task.step_limit()), time_limit: self.time_limit }
    }

    /// Fails early when the llm backend has no API key.
    pub fn check_generator(&self) -> Result<(), CliError> {
        if let Some(cfg) = &self.llm {
            LlmGenerator::from_env(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Generator for one episode; the mock answers from the task's truth
    /// with the episode seed.
    pub fn generator(&self, task: &TaskSpec, seed: u64) -> Result<Box<dyn HypothesisGenerator>, CliError> {
        match &self.llm {
            Some(cfg) => {
                Ok(Box::new(LlmGenerator::from_env(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?))
            }
            None => {
                let mock = match self.mock_profile {
                    MockProfile::Oracle => MockConfig::oracle(seed),
                    MockProfile::Noisy => MockConfig::noisy(seed),
                };
                Ok(Box::new(MockGenerator::new(task.mock_truth(), mock).map_err(|e| CliError::Config(e.to_string()))?))
            }
        }
    }

    pub fn method(&self) -> &'static str {
        if self.agent.collapse_to_max {
            "collapsed-belief"
        } else {
            "full-belief"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSource {
    File { path: PathBuf, sha256: String },
    Generated { kitchen: String, difficulty: Difficulty, seed: u64 },
}

impl TaskSource {
    pub fn file(path: &Path) -> Result<(TaskSource, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read task {}: {e}", path.display())))?;
        Ok((TaskSource::File { path: path.to_path_buf(), sha256: sha256_hex(text.as_bytes()) }, text))
    }

    pub fn load(&self, text: Option<&str>, kitchen: Option<&str>) -> Result<TaskSpec, CliError> {
        let task = match self {
            TaskSource::File { .. } => load_task_with(text.expect("file source carries its text"), kitchen),
            TaskSource::Generated { kitchen, difficulty, seed } => generate_task(kitchen, *difficulty, *seed),
        };
        task.map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSource,
    pub setup: AgentSetup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub tasks_per_difficulty: usize,
    pub difficulties: Vec<Difficulty>,
    /// Layouts rotated over task seeds.
    pub kitchens: Vec<String>,
    pub setup: AgentSetup,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON form of a config.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}
