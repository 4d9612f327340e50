use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Difficulty, EnvError, Environment, TaskSpec};
use crate::belief::{eliminate, hybrid_update, predict, BeliefUpdateConfig, ParticleBelief};
use crate::hypotheses::{build_llm_belief, GeneratorUsage, HypothesisGenerator, QueryContext};
use crate::planner::{PlanStats, Planner, PlannerConfig};
use crate::pomdp::{Action, Observation, PlacementGoal, RewardConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub planner: PlannerConfig,
    pub rewards: RewardConfig,
    pub belief: BeliefUpdateConfig,
    /// Goal combinations requested per generator call.
    pub c1: usize,
    /// Location candidates requested per hidden object.
    pub c2: usize,
    /// Keep only the most likely particle after every update.
    pub collapse_to_max: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            planner: PlannerConfig::default(),
            rewards: RewardConfig::model_default(),
            belief: BeliefUpdateConfig::default(),
            c1: 3,
            c2: 3,
            collapse_to_max: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLimits {
    pub step_limit: usize,
    /// Total planning seconds per episode, belief updates included.
    pub time_limit: f64,
}

impl EpisodeLimits {
    pub const TIME_LIMIT: f64 = 600.0;

    pub fn for_task(task: &TaskSpec) -> Self {
        EpisodeLimits { step_limit: task.step_limit(), time_limit: Self::TIME_LIMIT }
    }

    pub fn for_difficulty(d: Difficulty) -> Self {
        EpisodeLimits { step_limit: d.step_limit(), time_limit: Self::TIME_LIMIT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub scenarios: usize,
    pub expansions: usize,
    pub tree_nodes: usize,
    pub root_lower: f64,
    pub root_upper: f64,
    pub converged: bool,
    pub wall_time: f64,
}

impl From<&PlanStats> for PlanSummary {
    fn from(s: &PlanStats) -> Self {
        PlanSummary {
            scenarios: s.scenarios,
            expansions: s.expansions,
            tree_nodes: s.tree_nodes,
            root_lower: s.root_lower,
            root_upper: s.root_upper,
            converged: s.converged,
            wall_time: s.wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: Action,
    pub reward: f64,
    pub feasible: bool,
    pub done: bool,
    /// Surviving mass after elimination (absent when the belief was empty).
    pub w_bf: Option<f64>,
    pub supplemented: bool,
    /// Particle count after the update.
    pub belief_size: usize,
    pub wrong_goals: Vec<PlacementGoal>,
    pub plan: Option<PlanSummary>,
    /// Planning plus belief-update seconds for this step.
    pub planning_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub kitchen: String,
    pub difficulty: Option<Difficulty>,
    pub success: bool,
    pub cumulative_reward: f64,
    /// Steps to success, or the step limit on failure.
    pub steps: usize,
    pub steps_taken: usize,
    pub step_limit: usize,
    pub planning_time: f64,
    pub generator_usage: GeneratorUsage,
    pub initial_belief_size: usize,
    pub failure: Option<String>,
    pub per_step: Vec<StepRecord>,
}

impl EpisodeMetrics {
    /// The executed action sequence.
    pub fn actions(&self) -> Vec<Action> {
        self.per_step.iter().map(|s| s.action.clone()).collect()
    }
}

fn planner_seed(base: u64, step: usize) -> u64 {
    base ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct Agent<'a> {
    config: &'a AgentConfig,
    generator: &'a dyn HypothesisGenerator,
    ctx: QueryContext,
}

impl Agent<'_> {
    fn generate(&self, z: &Observation) -> Result<ParticleBelief, String> {
        build_llm_belief(z, &self.ctx, self.generator, self.config.c1, self.config.c2)
            .map(|out| out.belief)
            .map_err(|e| format!("hypothesis generation failed: {e}"))
    }

    fn finish(&self, b: ParticleBelief) -> ParticleBelief {
        if self.config.collapse_to_max {
            b.collapse_to_max()
        } else {
            b
        }
    }

    /// Filter, record wrong goals, supplement when too little mass survives.
    fn update(
        &mut self,
        belief: &ParticleBelief,
        a: &Action,
        z: &Observation,
        record: &mut StepRecord,
    ) -> Result<ParticleBelief, String> {
        if belief.is_empty() {
            return Ok(belief.clone());
        }
        let predicted = predict(belief, a, &self.config.rewards).map_err(|e| e.to_string())?;
        let elim = eliminate(&predicted, z, false, &self.ctx.failed_goals);
        record.w_bf = Some(elim.w_bf);
        for g in &elim.wrong_goals {
            if !self.ctx.failed_goals.iter().any(|f| f.same_pairs(g)) {
                self.ctx.failed_goals.push(g.clone());
            }
        }
        record.wrong_goals = elim.wrong_goals.clone();
        let next = if self.config.belief.needs_supplement(elim.w_bf) {
            record.supplemented = true;
            let fresh = self.generate(z)?;
            if fresh.is_empty() {
                elim.belief.normalized()
            } else {
                hybrid_update(&elim.belief, elim.w_bf, Some(&fresh), &self.config.belief).map_err(|e| e.to_string())?
            }
        } else {
            hybrid_update(&elim.belief, elim.w_bf, None, &self.config.belief).map_err(|e| e.to_string())?
        };
        Ok(self.finish(next))
    }
}

/// Runs one episode: initial hypotheses from the instruction and first
/// observation, then plan, act, filter and supplement until the task is done
/// or a limit trips. Generator or planner failures end the episode as a
/// failure rather than an error.
pub fn run_episode(
    task: &TaskSpec,
    config: &AgentConfig,
    generator: &dyn HypothesisGenerator,
    limits: &EpisodeLimits,
) -> Result<EpisodeMetrics, EnvError> {
    config.belief.validate().map_err(|e| EnvError::Config(e.to_string()))?;
    if config.c1 == 0 || config.c2 == 0 {
        return Err(EnvError::Config("c1 and c2 must be at least 1".into()));
    }
    let planner = Planner::new(config.planner.clone(), config.rewards).map_err(|e| EnvError::Config(e.to_string()))?;
    let usage_before = generator.usage();
    let mut env = Environment::new(task.clone(), config.rewards)?;
    let mut fb = env.feedback();
    let mut agent = Agent { config, generator, ctx: QueryContext::new(task.instruction.clone()) };
    agent.ctx.satisfied_objects = fb.satisfied_objects.clone();

    let mut metrics = EpisodeMetrics {
        kitchen: task.kitchen_id().to_string(),
        difficulty: task.difficulty,
        success: fb.done,
        cumulative_reward: 0.0,
        steps: 0,
        steps_taken: 0,
        step_limit: limits.step_limit,
        planning_time: 0.0,
        generator_usage: GeneratorUsage::default(),
        initial_belief_size: 0,
        failure: None,
        per_step: Vec::new(),
    };
    if fb.done {
        return Ok(metrics);
    }

    let started = Instant::now();
    let mut belief = match agent.generate(&fb.observation) {
        Ok(b) => agent.finish(b),
        Err(e) => {
            metrics.failure = Some(e);
            ParticleBelief::default()
        }
    };
    metrics.initial_belief_size = belief.len();
    metrics.planning_time += started.elapsed().as_secs_f64();

    for step in 0..limits.step_limit {
        if metrics.failure.is_some() {
            break;
        }
        if metrics.planning_time > limits.time_limit {
            metrics.failure = Some(format!("planning time exceeded {} s", limits.time_limit));
            break;
        }
        let t = Instant::now();
        if belief.is_empty() {
            match agent.generate(&fb.observation) {
                Ok(b) => belief = agent.finish(b),
                Err(e) => {
                    metrics.failure = Some(e);
                    break;
                }
            }
        }
        let (action, plan) = if belief.is_empty() {
            (Action::Null, None)
        } else {
            match planner.plan_seeded(&belief, planner_seed(config.planner.seed, step)) {
                Ok(out) => (out.action, Some(PlanSummary::from(&out.stats))),
                Err(e) => {
                    metrics.failure = Some(format!("planning failed: {e}"));
                    break;
                }
            }
        };
        let mut step_time = t.elapsed().as_secs_f64();

        let (out, next_fb) = env.step(&action);
        fb = next_fb;
        metrics.cumulative_reward += out.reward;
        let mut record = StepRecord {
            step,
            action: action.clone(),
            reward: out.reward,
            feasible: out.feasible,
            done: fb.done,
            w_bf: None,
            supplemented: false,
            belief_size: belief.len(),
            wrong_goals: Vec::new(),
            plan,
            planning_time: 0.0,
        };
        if fb.done {
            metrics.success = true;
            metrics.steps_taken = step + 1;
            record.planning_time = step_time;
            metrics.planning_time += step_time;
            metrics.per_step.push(record);
            break;
        }

        let t = Instant::now();
        agent.ctx.satisfied_objects = fb.satisfied_objects.clone();
        match agent.update(&belief, &action, &fb.observation, &mut record) {
            Ok(b) => belief = b,
            Err(e) => metrics.failure = Some(e),
        }
        record.belief_size = belief.len();
        step_time += t.elapsed().as_secs_f64();
        record.planning_time = step_time;
        metrics.planning_time += step_time;
        metrics.steps_taken = step + 1;
        metrics.per_step.push(record);
    }

    if !metrics.success && metrics.failure.is_none() {
        if metrics.planning_time > limits.time_limit {
            metrics.failure = Some(format!("planning time exceeded {} s", limits.time_limit));
        } else {
            metrics.failure = Some("step limit reached".into());
        }
    }
    if metrics.success && metrics.planning_time > limits.time_limit {
        metrics.success = false;
        metrics.failure = Some(format!("planning time exceeded {} s", limits.time_limit));
    }
    metrics.steps = if metrics.success { metrics.steps_taken } else { limits.step_limit };
    metrics.generator_usage = generator.usage().since(&usage_before);
    Ok(metrics)
}

/// Mean and standard error of one metric within a difficulty group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub difficulty: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub success_se: f64,
    pub reward_mean: f64,
    pub reward_se: f64,
    pub steps_mean: f64,
    pub steps_se: f64,
    pub planning_time_mean: f64,
    pub planning_time_se: f64,
    pub tokens_mean: f64,
    pub tokens_se: f64,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-difficulty aggregates (easy, medium, hard, then unlabelled tasks).
pub fn aggregate(episodes: &[EpisodeMetrics]) -> Vec<AggregateRow> {
    let groups = Difficulty::ALL.iter().map(|d| Some(*d)).chain([None]);
    groups
        .filter_map(|d| {
            let eps: Vec<&EpisodeMetrics> = episodes.iter().filter(|e| e.difficulty == d).collect();
            if eps.is_empty() {
                return None;
            }
            let col = |f: &dyn Fn(&EpisodeMetrics) -> f64| mean_se(&eps.iter().map(|e| f(e)).collect::<Vec<_>>());
            let (success_rate, success_se) = col(&|e| f64::from(u8::from(e.success)));
            let (reward_mean, reward_se) = col(&|e| e.cumulative_reward);
            let (steps_mean, steps_se) = col(&|e| e.steps as f64);
            let (planning_time_mean, planning_time_se) = col(&|e| e.planning_time);
            let (tokens_mean, tokens_se) = col(&|e| e.generator_usage.total_tokens() as f64);
            Some(AggregateRow {
                difficulty: d.map_or("unspecified".to_string(), |d| d.to_string()),
                episodes: eps.len(),
                success_rate,
                success_se,
                reward_mean,
                reward_se,
                steps_mean,
                steps_se,
                planning_time_mean,
                planning_time_se,
                tokens_mean,
                tokens_se,
            })
        })
        .collect()
}
