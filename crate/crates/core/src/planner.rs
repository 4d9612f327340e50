//! Online belief-tree search over a fixed set of sampled scenarios.
//!
//! Each node holds the scenarios consistent with its action/observation
//! history. Leaves get a lower bound from a rollout of the ported default
//! policy and an admissible upper bound; trials descend along the
//! upper-bound-greedy action and the widest-gap observation child, expand one
//! leaf and back bounds up. The answer is the root action with the best lower
//! bound.
//!
//! Null is modelled as "stop acting": its edge is terminal with value 0.
//! Without discounting, idling now and acting later is never better than
//! acting now, and treating Null as a resumable no-op lets truncated bounds
//! favour procrastination indefinitely.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::ParticleBelief;
use crate::pomdp::{transition, Action, GoalPair, RewardConfig, State};
use crate::scene_graph::{NodeId, SceneGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("cannot plan on an empty belief")]
    EmptyBelief,
    #[error("belief particles disagree on the visible scene")]
    InconsistentBelief,
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Number of sampled scenarios (k).
    pub num_scenarios: usize,
    /// Search horizon (d_s).
    pub max_depth: usize,
    /// Rollout horizon (d_r).
    pub rollout_depth: usize,
    pub discount: f64,
    /// Wall-clock cap per call, seconds.
    pub time_budget: f64,
    pub seed: u64,
    /// Deterministic cap on leaf expansions per call.
    pub max_expansions: usize,
    /// Root gap below which the search has converged (relative to the root
    /// upper bound magnitude when that exceeds 1).
    pub tolerance: f64,
    /// 0 uses the ambient rayon pool, 1 runs sequentially, n > 1 uses a
    /// dedicated pool of n threads.
    pub threads: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            num_scenarios: 30,
            max_depth: 20,
            rollout_depth: 10,
            discount: 1.0,
            time_budget: 600.0 / 35.0,
            seed: 0,
            max_expansions: 200,
            tolerance: 1e-9,
            threads: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::InvalidConfig(m.to_string()));
        if self.num_scenarios == 0 {
            return bad("num_scenarios must be at least 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must be in (0, 1]");
        }
        if self.time_budget.is_nan() || self.time_budget < 0.0 {
            return bad("time_budget must be non-negative");
        }
        if self.max_expansions == 0 {
            return bad("max_expansions must be at least 1");
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return bad("tolerance must be non-negative");
        }
        Ok(())
    }
}

/// Bounds of one root action after search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionValue {
    pub action: Action,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub scenarios: usize,
    pub expansions: usize,
    pub tree_nodes: usize,
    /// Root bounds, normalized by the total scenario weight.
    pub root_lower: f64,
    pub root_upper: f64,
    pub converged: bool,
    pub wall_time: f64,
    /// (expansions, lower, upper) after each expansion, normalized.
    pub bound_trace: Vec<(usize, f64, f64)>,
    pub root_actions: Vec<ActionValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub action: Action,
    pub stats: PlanStats,
}

/// Candidate actions for a set of states: Open for closed areas, Pick for
/// goal objects lying in open areas (empty hand only), Place into open areas
/// (when holding), and Null. Deduplicated and canonically ordered.
pub fn dynamic_actions(b: &ParticleBelief) -> Result<Vec<Action>, PlanError> {
    if b.is_empty() {
        return Err(PlanError::EmptyBelief);
    }
    Ok(actions_for(b.particles().iter().map(|p| &p.state)))
}

fn actions_for<'a>(states: impl Iterator<Item = &'a State>) -> Vec<Action> {
    let mut out = BTreeSet::new();
    for s in states {
        let g = &s.graph;
        let kitchen = g.kitchen();
        let hand = kitchen.robot_hand();
        let holding = g.held_object().is_some();
        for (ix, area) in kitchen.areas().iter().enumerate() {
            if ix == hand {
                continue;
            }
            if !g.is_open_ix(ix) {
                out.insert(Action::Open(area.id.clone()));
            } else if holding {
                out.insert(Action::Place(area.id.clone()));
            }
        }
        if !holding {
            for p in s.goal.pairs() {
                if let Some(ix) = g.parent_of(&p.object) {
                    if ix != hand && g.is_open_ix(ix) {
                        out.insert(Action::Pick { area: kitchen.area(ix).id.clone(), object: p.object.clone() });
                    }
                }
            }
        }
    }
    out.insert(Action::Null);
    out.into_iter().collect()
}

/// The default policy: works on the first unreached goal whose object and
/// area exist. Holding the goal object: open the target if closed, else place
/// it. Holding something else: put it back where it was picked (opening that
/// area first). Empty hand: open the object's area if closed, else pick it.
pub fn rollout_policy(g: &SceneGraph, unreached: &[&GoalPair]) -> Action {
    let kitchen = g.kitchen();
    for goal in unreached {
        let Some(goal_area) = kitchen.index_of(&goal.target) else {
            continue;
        };
        let Some(parent_of_goal) = g.parent_of(&goal.object) else {
            continue;
        };
        if parent_of_goal == goal_area {
            continue;
        }
        return match g.held_object() {
            Some(held) if *held == goal.object => {
                if !g.is_open_ix(goal_area) {
                    Action::Open(goal.target.clone())
                } else {
                    Action::Place(goal.target.clone())
                }
            }
            Some(_) => match g.held_origin_ix() {
                None => Action::Null,
                Some(origin) if !g.is_open_ix(origin) => Action::Open(kitchen.area(origin).id.clone()),
                Some(origin) => Action::Place(kitchen.area(origin).id.clone()),
            },
            None => {
                let area = kitchen.area(parent_of_goal).id.clone();
                if !g.is_open_ix(parent_of_goal) {
                    Action::Open(area)
                } else {
                    Action::Pick { area, object: goal.object.clone() }
                }
            }
        };
    }
    Action::Null
}

/// Rollout action for a state, using its own goal.
pub fn rollout_action(s: &State) -> Action {
    rollout_policy(&s.graph, &s.unreached())
}

/// Discounted return of following the default policy from `s` for at most
/// `depth` steps, stopping at goal completion or when the policy idles.
pub fn rollout_value(s: &State, depth: usize, cfg: &RewardConfig, discount: f64) -> f64 {
    let mut state = s.clone();
    let mut total = 0.0;
    let mut disc = 1.0;
    for _ in 0..depth {
        let unreached = state.unreached();
        if unreached.is_empty() {
            break;
        }
        let a = rollout_policy(&state.graph, &unreached);
        if a == Action::Null {
            break;
        }
        let step = transition(&state, &a, cfg);
        total += disc * step.reward;
        disc *= discount;
        state = step.next_state;
    }
    total
}

/// Policy rollout over a group of weighted scenarios sharing one history.
/// The group acts as one agent: it follows the first non-idle default-policy
/// action of its heaviest scenarios and splits only when an Open reveals
/// different contents. Returns the weighted (unnormalized) discounted return.
fn group_rollout(group: Vec<(f64, State)>, steps: usize, cfg: &RewardConfig, discount: f64) -> f64 {
    let mut total = 0.0;
    let mut stack = vec![(group, steps, 1.0)];
    while let Some((group, left, disc)) = stack.pop() {
        if left == 0 || group.is_empty() {
            continue;
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.sort_by(|&a, &b| group[b].0.total_cmp(&group[a].0));
        let Some(a) = order.iter().map(|&i| rollout_action(&group[i].1)).find(|a| *a != Action::Null) else {
            continue;
        };
        let mut next = Vec::with_capacity(group.len());
        for (w, s) in group {
            let step = transition(&s, &a, cfg);
            total += disc * w * step.reward;
            if !step.next_state.is_goal_satisfied() {
                next.push((w, step.next_state));
            }
        }
        for part in split_by_observation(next, &a) {
            stack.push((part, left - 1, disc * discount));
        }
    }
    total
}

/// Groups successors by what the action revealed. Scenarios that share a
/// visible scene before the action can only diverge through the contents an
/// Open exposes.
fn split_by_observation<T: HasState>(items: Vec<T>, a: &Action) -> Vec<Vec<T>> {
    let Action::Open(area) = a else {
        return vec![items];
    };
    let mut groups: BTreeMap<Vec<NodeId>, Vec<T>> = BTreeMap::new();
    for item in items {
        let key: Vec<NodeId> = item.state().graph.objects_in(area.as_str()).into_iter().cloned().collect();
        groups.entry(key).or_default().push(item);
    }
    groups.into_values().collect()
}

trait HasState {
    fn state(&self) -> &State;
}

impl HasState for (f64, State) {
    fn state(&self) -> &State {
        &self.1
    }
}

/// Upper bound on the return one scenario can still collect in `horizon`
/// steps: every remaining pair needs a Place (and a Pick unless held), every
/// closed area involved needs an Open, and each of those steps costs at least
/// the manipulation cost. With discounting the costs are dropped.
pub fn scenario_upper_bound(s: &State, horizon: usize, cfg: &RewardConfig, discount: f64) -> f64 {
    if horizon == 0 || s.goal.is_empty() || s.is_goal_satisfied() {
        return 0.0;
    }
    let g = &s.graph;
    let credited = s.credited_mask();
    let step_cost = if discount < 1.0 { 0.0 } else { cfg.manipulation_cost };
    let mut closed = BTreeSet::new();
    let mut needs = Vec::new();
    let mut uncredited = 0usize;
    let mut total_need = 0usize;
    for (i, p) in s.goal.pairs().iter().enumerate() {
        let Some(target) = g.kitchen().index_of(&p.target) else {
            return 0.0;
        };
        let Some(parent) = g.parent_of(&p.object) else {
            return 0.0;
        };
        if parent == target {
            continue;
        }
        let held = g.held_object() == Some(&p.object);
        let need = if held { 1 } else { 2 };
        if !held && !g.is_open_ix(parent) {
            closed.insert(parent);
        }
        if !g.is_open_ix(target) {
            closed.insert(target);
        }
        total_need += need;
        if credited & (1 << i) == 0 {
            uncredited += 1;
            needs.push(need);
        }
    }
    needs.sort_unstable();
    let mut partial = 0.0;
    let mut used = 0;
    for need in needs {
        if used + need > horizon {
            break;
        }
        used += need;
        partial += (cfg.subgoal_reward - step_cost * need as f64).max(0.0);
    }
    total_need += closed.len();
    let full = if total_need <= horizon {
        cfg.subgoal_reward * uncredited as f64 + cfg.completion_reward - step_cost * total_need as f64
    } else {
        f64::NEG_INFINITY
    };
    partial.max(full).max(0.0)
}

/// Initial (lower, upper) bounds of a node holding `scenarios` with
/// `horizon` steps left. Values are weighted sums, not averages.
pub fn initial_bounds(
    scenarios: &[(f64, State)],
    horizon: usize,
    rollout_depth: usize,
    cfg: &RewardConfig,
    discount: f64,
) -> (f64, f64) {
    if horizon == 0 || scenarios.is_empty() {
        return (0.0, 0.0);
    }
    // idling forever is always available, so 0 is a valid lower bound
    let lower = group_rollout(scenarios.to_vec(), rollout_depth.min(horizon), cfg, discount).max(0.0);
    let upper: f64 = scenarios.iter().map(|(w, s)| w * scenario_upper_bound(s, horizon, cfg, discount)).sum();
    (lower, upper.max(lower))
}

struct Node {
    depth: usize,
    scenarios: Vec<(f64, State)>,
    lower: f64,
    upper: f64,
    edges: Option<Vec<Edge>>,
}

struct Edge {
    action: Action,
    reward: f64,
    children: Vec<usize>,
    lower: f64,
    upper: f64,
}

struct ChildSpec {
    scenarios: Vec<(f64, State)>,
    lower: f64,
    upper: f64,
}

struct EdgeSpec {
    action: Action,
    reward: f64,
    children: Vec<ChildSpec>,
}

/// Reusable planner; owns the optional dedicated thread pool.
pub struct Planner {
    config: PlannerConfig,
    rewards: RewardConfig,
    pool: Option<rayon::ThreadPool>,
}

impl Planner {
    pub fn new(config: PlannerConfig, rewards: RewardConfig) -> Result<Self, PlanError> {
        config.validate()?;
        rewards.validate().map_err(|e| PlanError::InvalidConfig(e.to_string()))?;
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| PlanError::InvalidConfig(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Planner { config, rewards, pool })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn rewards(&self) -> &RewardConfig {
        &self.rewards
    }

    /// Plans with the configured seed.
    pub fn plan(&self, b: &ParticleBelief) -> Result<PlanOutcome, PlanError> {
        self.plan_seeded(b, self.config.seed)
    }

    pub fn plan_seeded(&self, b: &ParticleBelief, seed: u64) -> Result<PlanOutcome, PlanError> {
        match &self.pool {
            Some(pool) => pool.install(|| self.search(b, seed)),
            None => self.search(b, seed),
        }
    }

    fn sample_scenarios(&self, b: &ParticleBelief, seed: u64) -> Vec<(f64, State)> {
        let particles = b.particles();
        let k = self.config.num_scenarios;
        if particles.len() <= k {
            let total = b.total_weight();
            return particles.iter().map(|p| (p.weight / total, p.state.clone())).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = WeightedIndex::new(particles.iter().map(|p| p.weight)).expect("positive weights");
        let mut counts = vec![0usize; particles.len()];
        for _ in 0..k {
            counts[dist.sample(&mut rng)] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| *c > 0)
            .map(|(i, c)| (c as f64 / k as f64, particles[i].state.clone()))
            .collect()
    }

    fn search(&self, b: &ParticleBelief, seed: u64) -> Result<PlanOutcome, PlanError> {
        if b.is_empty() {
            return Err(PlanError::EmptyBelief);
        }
        let started = Instant::now();
        let cfg = &self.config;
        let first = b.particles()[0].state.graph.visible();
        if b.particles().iter().any(|p| !p.state.graph.visible_matches(&first)) {
            return Err(PlanError::InconsistentBelief);
        }
        let mut scenarios = self.sample_scenarios(b, seed);
        let scenario_count = scenarios.len();
        let weight: f64 = scenarios.iter().map(|(w, _)| w).sum();
        scenarios.retain(|(_, s)| !s.is_goal_satisfied());
        let mut stats = PlanStats { scenarios: scenario_count, ..Default::default() };
        if scenarios.is_empty() {
            stats.converged = true;
            stats.tree_nodes = 1;
            stats.root_actions = vec![ActionValue { action: Action::Null, lower: 0.0, upper: 0.0 }];
            stats.wall_time = started.elapsed().as_secs_f64();
            return Ok(PlanOutcome { action: Action::Null, stats });
        }

        let (lower, upper) = initial_bounds(&scenarios, cfg.max_depth, cfg.rollout_depth, &self.rewards, cfg.discount);
        let mut tree = vec![Node { depth: 0, scenarios, lower, upper, edges: None }];
        let tol = |t: &[Node]| cfg.tolerance * t[0].upper.abs().max(1.0);

        loop {
            let root_gap = tree[0].upper - tree[0].lower;
            if stats.expansions > 0 {
                if root_gap <= tol(&tree) {
                    stats.converged = true;
                    break;
                }
                if stats.expansions >= cfg.max_expansions || started.elapsed().as_secs_f64() >= cfg.time_budget {
                    break;
                }
            }
            // descend
            let mut path: Vec<(usize, usize)> = Vec::new();
            let mut at = 0;
            while let Some(edges) = &tree[at].edges {
                let e = argmax_by(edges, |e| e.upper);
                let Some(child) = edges[e]
                    .children
                    .iter()
                    .copied()
                    .filter(|&c| tree[c].upper - tree[c].lower > 0.0)
                    .fold(None, |best: Option<usize>, c| match best {
                        Some(b) if tree[b].upper - tree[b].lower >= tree[c].upper - tree[c].lower => Some(b),
                        _ => Some(c),
                    })
                else {
                    break;
                };
                path.push((at, e));
                at = child;
            }
            if tree[at].edges.is_some() || tree[at].depth >= cfg.max_depth {
                // nothing left to refine along the greedy path
                if stats.expansions > 0 {
                    stats.converged = tree[0].upper - tree[0].lower <= tol(&tree);
                    break;
                }
            }
            if tree[at].edges.is_none() && tree[at].depth < cfg.max_depth {
                self.expand(&mut tree, at);
                stats.expansions += 1;
            }
            update_node(&mut tree, at);
            for &(node, e) in path.iter().rev() {
                update_edge(&mut tree, node, e, cfg.discount);
                update_node(&mut tree, node);
            }
            stats.bound_trace.push((stats.expansions, tree[0].lower / weight, tree[0].upper / weight));
        }

        let root_edges = tree[0].edges.as_ref().expect("root expanded");
        // first maximum in canonical order; Null sorts last, so it is chosen
        // only when it is strictly better than every other action
        let best = argmax_by(root_edges, |e| e.lower);
        stats.root_actions = root_edges
            .iter()
            .map(|e| ActionValue { action: e.action.clone(), lower: e.lower / weight, upper: e.upper / weight })
            .collect();
        stats.tree_nodes = tree.len();
        stats.root_lower = tree[0].lower / weight;
        stats.root_upper = tree[0].upper / weight;
        stats.wall_time = started.elapsed().as_secs_f64();
        Ok(PlanOutcome { action: root_edges[best].action.clone(), stats })
    }

    fn expand(&self, tree: &mut Vec<Node>, at: usize) {
        let cfg = &self.config;
        let node = &tree[at];
        let depth = node.depth;
        let horizon = cfg.max_depth - depth - 1;
        let actions = actions_for(node.scenarios.iter().map(|(_, s)| s));
        let eval = |a: &Action| -> EdgeSpec {
            if *a == Action::Null {
                // idling for the rest of the horizon
                return EdgeSpec { action: Action::Null, reward: 0.0, children: Vec::new() };
            }
            let mut reward = 0.0;
            let mut next = Vec::with_capacity(node.scenarios.len());
            for (w, s) in &node.scenarios {
                let step = transition(s, a, &self.rewards);
                reward += w * step.reward;
                if !step.next_state.is_goal_satisfied() {
                    next.push((*w, step.next_state));
                }
            }
            let children = split_by_observation(next, a)
                .into_iter()
                .map(|scenarios| {
                    let (lower, upper) =
                        initial_bounds(&scenarios, horizon, cfg.rollout_depth, &self.rewards, cfg.discount);
                    ChildSpec { scenarios, lower, upper }
                })
                .collect();
            EdgeSpec { action: a.clone(), reward, children }
        };
        let specs: Vec<EdgeSpec> =
            if cfg.threads == 1 { actions.iter().map(eval).collect() } else { actions.par_iter().map(eval).collect() };
        let mut edges = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut children = Vec::with_capacity(spec.children.len());
            let (mut lower, mut upper) = (spec.reward, spec.reward);
            for c in spec.children {
                lower += cfg.discount * c.lower;
                upper += cfg.discount * c.upper;
                children.push(tree.len());
                tree.push(Node { depth: depth + 1, scenarios: c.scenarios, lower: c.lower, upper: c.upper, edges: None });
            }
            edges.push(Edge { action: spec.action, reward: spec.reward, children, lower, upper });
        }
        tree[at].edges = Some(edges);
    }
}

fn argmax_by<T>(items: &[T], key: impl Fn(&T) -> f64) -> usize {
    let mut best = 0;
    for (i, item) in items.iter().enumerate().skip(1) {
        if key(item) > key(&items[best]) {
            best = i;
        }
    }
    best
}

fn update_edge(tree: &mut [Node], node: usize, e: usize, discount: f64) {
    let edge = &tree[node].edges.as_ref().expect("expanded")[e];
    let lower = edge.reward + discount * edge.children.iter().map(|&c| tree[c].lower).sum::<f64>();
    let upper = edge.reward + discount * edge.children.iter().map(|&c| tree[c].upper).sum::<f64>();
    let edge = &mut tree[node].edges.as_mut().expect("expanded")[e];
    edge.lower = edge.lower.max(lower);
    edge.upper = edge.upper.min(upper).max(edge.lower);
}

fn update_node(tree: &mut [Node], at: usize) {
    let node = &mut tree[at];
    let Some(edges) = &node.edges else {
        return;
    };
    let lower = edges.iter().map(|e| e.lower).fold(f64::NEG_INFINITY, f64::max);
    let upper = edges.iter().map(|e| e.upper).fold(f64::NEG_INFINITY, f64::max);
    node.lower = node.lower.max(lower);
    node.upper = node.upper.min(upper).max(node.lower);
}

/// One-shot planning with a fresh [`Planner`].
pub fn plan(b: &ParticleBelief, cfg: &PlannerConfig, rewards: &RewardConfig) -> Result<PlanOutcome, PlanError> {
    Planner::new(cfg.clone(), *rewards)?.plan(b)
}
