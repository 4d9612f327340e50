//! Ground-truth episode host: tasks, oracle stepping, the agent loop and
//! metrics.

mod agent;
mod task;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pomdp::{apply_action, Action, GoalPair, Observation, PlacementGoal, RewardConfig};
use crate::scene_graph::{NodeId, SceneGraph};

pub use agent::{
    aggregate, run_episode, AgentConfig, AggregateRow, EpisodeLimits, EpisodeMetrics, PlanSummary, StepRecord,
};
pub use task::{generate_task, load_task, load_task_with, Difficulty, TaskSpec, HIDE_FRACTION, OBJECTS_PER_TASK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("task schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unknown area `{0}`")]
    UnknownArea(String),
    #[error("unknown kitchen `{0}`")]
    UnknownKitchen(String),
    #[error("invalid difficulty `{0}` (expected easy, medium or hard)")]
    InvalidDifficulty(String),
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error("invalid agent config: {0}")]
    Config(String),
}

/// What the oracle reports after each step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvFeedback {
    /// Some goal of the goal set is fully satisfied.
    pub done: bool,
    /// Objects currently sitting in a target area of some goal.
    pub satisfied_objects: BTreeSet<NodeId>,
    pub observation: Observation,
}

fn feedback(g: &SceneGraph, goal_set: &[PlacementGoal]) -> EnvFeedback {
    let done = goal_set.iter().any(|p| p.satisfied_mask(g).count_ones() as usize == p.len());
    let satisfied_objects = goal_set
        .iter()
        .flat_map(|p| p.pairs())
        .filter(|p| g.object_parent(p.object.as_str()) == Some(&p.target))
        .map(|p| p.object.clone())
        .collect();
    EnvFeedback { done, satisfied_objects, observation: Observation::new(g) }
}

fn satisfied_pairs<'a>(g: &SceneGraph, goal_set: &'a [PlacementGoal]) -> BTreeSet<&'a GoalPair> {
    goal_set
        .iter()
        .flat_map(|p| p.pairs())
        .filter(|p| g.object_parent(p.object.as_str()) == Some(&p.target))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvStep {
    pub reward: f64,
    pub feasible: bool,
    pub move_cost: f64,
}

fn step_with_credit(
    g: &SceneGraph,
    a: &Action,
    goal_set: &[PlacementGoal],
    cfg: &RewardConfig,
    credited: &mut BTreeSet<GoalPair>,
) -> (SceneGraph, EnvStep) {
    let Some((next, move_cost)) = apply_action(g, a, cfg) else {
        return (g.clone(), EnvStep { reward: -cfg.infeasible_cost, feasible: false, move_cost: 0.0 });
    };
    if *a == Action::Null {
        return (next, EnvStep { reward: 0.0, feasible: true, move_cost: 0.0 });
    }
    let mut reward = -(move_cost + cfg.manipulation_cost);
    for pair in satisfied_pairs(&next, goal_set) {
        if credited.insert(pair.clone()) {
            reward += cfg.subgoal_reward;
        }
    }
    let done_before = feedback_done(g, goal_set);
    if !done_before && feedback_done(&next, goal_set) {
        reward += cfg.completion_reward;
    }
    (next, EnvStep { reward, feasible: true, move_cost })
}

fn feedback_done(g: &SceneGraph, goal_set: &[PlacementGoal]) -> bool {
    goal_set.iter().any(|p| p.satisfied_mask(g).count_ones() as usize == p.len())
}

/// Stateless oracle step. Subgoal reward is paid for every goal-set pair
/// that becomes satisfied on this step; completion when some goal becomes
/// fully satisfied.
pub fn step(true_state: &SceneGraph, a: &Action, task: &TaskSpec, rcfg: &RewardConfig) -> (SceneGraph, f64, EnvFeedback) {
    let mut credited: BTreeSet<GoalPair> =
        satisfied_pairs(true_state, &task.goal_set).into_iter().cloned().collect();
    let (next, out) = step_with_credit(true_state, a, &task.goal_set, rcfg, &mut credited);
    let fb = feedback(&next, &task.goal_set);
    (next, out.reward, fb)
}

/// Stateful ground truth for one episode. Each goal-set pair earns its
/// subgoal reward at most once per episode.
#[derive(Debug, Clone)]
pub struct Environment {
    task: TaskSpec,
    graph: SceneGraph,
    rewards: RewardConfig,
    credited: BTreeSet<GoalPair>,
}

impl Environment {
    pub fn new(task: TaskSpec, rewards: RewardConfig) -> Result<Self, EnvError> {
        let graph = task.initial_graph()?;
        let credited = satisfied_pairs(&graph, &task.goal_set).into_iter().cloned().collect();
        Ok(Environment { task, graph, rewards, credited })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }

    pub fn feedback(&self) -> EnvFeedback {
        feedback(&self.graph, &self.task.goal_set)
    }

    pub fn step(&mut self, a: &Action) -> (EnvStep, EnvFeedback) {
        let (next, out) = step_with_credit(&self.graph, a, &self.task.goal_set, &self.rewards, &mut self.credited);
        self.graph = next;
        (out, self.feedback())
    }
}
