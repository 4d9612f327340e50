//! The rearrangement POMDP: states, parameterized actions, deterministic
//! transition and observation functions, rewards and goal predicates.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::scene_graph::{AreaIx, NodeId, SceneGraph};

/// Largest placement goal accepted (hard tasks use 4–8 targets).
pub const MAX_GOAL_PAIRS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PomdpError {
    #[error("goal lists object `{0}` more than once")]
    DuplicateGoalObject(String),
    #[error("goal has {0} pairs, allowed range is 1..={MAX_GOAL_PAIRS}")]
    GoalSize(usize),
    #[error("goal object `{0}` is not in the scene graph")]
    MissingGoalObject(String),
    #[error("goal target `{0}` is not a placeable area")]
    InvalidTarget(String),
    #[error("unknown reward preset `{0}` (expected `model-default` or `experiment`)")]
    UnknownPreset(String),
    #[error("reward config field `{0}` must be non-negative")]
    NegativeReward(&'static str),
    #[error("cannot parse action `{0}`")]
    ActionSyntax(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoalPair {
    pub object: NodeId,
    pub target: NodeId,
}

impl GoalPair {
    pub fn new(object: impl AsRef<str>, target: impl AsRef<str>) -> Self {
        GoalPair { object: NodeId::new(object), target: NodeId::new(target) }
    }

    /// The object currently sits in the target area.
    pub fn holds(&self, g: &SceneGraph) -> bool {
        g.parent_of(&self.object).is_some_and(|ix| g.kitchen().area(ix).id == self.target)
    }
}

/// Ordered (object, target area) pairs; objects are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlacementGoal {
    pairs: Arc<[GoalPair]>,
}

impl PlacementGoal {
    pub fn new(pairs: Vec<GoalPair>) -> Result<Self, PomdpError> {
        if pairs.is_empty() || pairs.len() > MAX_GOAL_PAIRS {
            return Err(PomdpError::GoalSize(pairs.len()));
        }
        for (i, p) in pairs.iter().enumerate() {
            if pairs[..i].iter().any(|q| q.object == p.object) {
                return Err(PomdpError::DuplicateGoalObject(p.object.to_string()));
            }
        }
        Ok(PlacementGoal { pairs: pairs.into() })
    }

    pub fn from_pairs<O: AsRef<str>, T: AsRef<str>>(
        pairs: impl IntoIterator<Item = (O, T)>,
    ) -> Result<Self, PomdpError> {
        Self::new(pairs.into_iter().map(|(o, t)| GoalPair::new(o, t)).collect())
    }

    pub fn pairs(&self) -> &[GoalPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn target_of(&self, object: &str) -> Option<&NodeId> {
        self.pairs.iter().find(|p| p.object.as_str() == object).map(|p| &p.target)
    }

    pub fn contains_pair(&self, pair: &GoalPair) -> bool {
        self.pairs.contains(pair)
    }

    /// Order-insensitive comparison of the pair sets.
    pub fn same_pairs(&self, other: &PlacementGoal) -> bool {
        self.pairs.len() == other.pairs.len() && self.pairs.iter().all(|p| other.pairs.contains(p))
    }

    /// Copy without the pairs for which `drop` returns true. May be empty.
    pub fn without(&self, mut drop: impl FnMut(&GoalPair) -> bool) -> PlacementGoal {
        PlacementGoal { pairs: self.pairs.iter().filter(|p| !drop(p)).cloned().collect() }
    }

    /// Bitmask of the pairs currently satisfied in `g`.
    pub fn satisfied_mask(&self, g: &SceneGraph) -> u8 {
        let mut mask = 0u8;
        for (i, p) in self.pairs.iter().enumerate() {
            if p.holds(g) {
                mask |= 1 << i;
            }
        }
        mask
    }

    fn full_mask(&self) -> u8 {
        if self.pairs.len() >= 8 {
            u8::MAX
        } else {
            (1u8 << self.pairs.len()) - 1
        }
    }
}

impl fmt::Display for PlacementGoal {
    /// `a in X, b in Y`, the phrasing used in observation prompts.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.pairs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{} in {}", p.object, p.target)?;
        }
        Ok(())
    }
}

/// True iff every pair has its object parented by its target. Missing objects
/// count as unsatisfied; the empty goal is vacuously satisfied.
pub fn goal_satisfied(g: &SceneGraph, p: &PlacementGoal) -> bool {
    p.pairs.iter().all(|pair| pair.holds(g))
}

/// One POMDP state: a hypothesized complete scene graph and placement goal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    pub graph: SceneGraph,
    pub goal: PlacementGoal,
    /// Goal pairs whose subgoal reward has already been granted.
    credited: u8,
}

impl State {
    /// Validates that every goal object exists and every target is a placeable
    /// area. Pairs already satisfied are credited up front.
    pub fn new(graph: SceneGraph, goal: PlacementGoal) -> Result<State, PomdpError> {
        let kitchen = graph.kitchen();
        let mut pairs = Vec::with_capacity(goal.len());
        for p in goal.pairs() {
            let Some(object) = graph.canonical_object(&p.object) else {
                return Err(PomdpError::MissingGoalObject(p.object.to_string()));
            };
            match kitchen.area_index(p.target.as_str()) {
                Some(ix) if ix != kitchen.robot_hand() => {}
                _ => return Err(PomdpError::InvalidTarget(p.target.to_string())),
            }
            let target = kitchen.canonical_area(&p.target).expect("checked above");
            pairs.push(GoalPair { object: object.clone(), target: target.clone() });
        }
        // Share the graph's name allocations so lookups hit the pointer fast path.
        let goal = PlacementGoal { pairs: pairs.into() };
        let credited = goal.satisfied_mask(&graph);
        Ok(State { graph, goal, credited })
    }

    /// A state whose goal is empty (goal-agnostic simulation).
    pub fn without_goal(graph: SceneGraph) -> State {
        State { graph, goal: PlacementGoal::default(), credited: 0 }
    }

    pub fn credited_mask(&self) -> u8 {
        self.credited
    }

    pub fn is_goal_satisfied(&self) -> bool {
        goal_satisfied(&self.graph, &self.goal)
    }

    /// Goal pairs not yet satisfied, in goal order.
    pub fn unreached(&self) -> Vec<&GoalPair> {
        self.goal
            .pairs()
            .iter()
            .filter(|p| !p.holds(&self.graph))
            .collect()
    }
}

/// Parameterized action. The derived order (Open < Pick < Place < Null, then
/// parameters lexicographically) is the canonical tie-break order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Open(NodeId),
    Pick { area: NodeId, object: NodeId },
    Place(NodeId),
    Null,
}

impl Action {
    pub fn open(area: &str) -> Action {
        Action::Open(NodeId::new(area))
    }

    pub fn pick(area: &str, object: &str) -> Action {
        Action::Pick { area: NodeId::new(area), object: NodeId::new(object) }
    }

    pub fn place(area: &str) -> Action {
        Action::Place(NodeId::new(area))
    }

    pub fn area(&self) -> Option<&NodeId> {
        match self {
            Action::Open(a) | Action::Place(a) | Action::Pick { area: a, .. } => Some(a),
            Action::Null => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Open(a) => write!(f, "Open({a})"),
            Action::Pick { area, object } => write!(f, "Pick({area}, {object})"),
            Action::Place(a) => write!(f, "Place({a})"),
            Action::Null => f.write_str("Null"),
        }
    }
}

impl FromStr for Action {
    type Err = PomdpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "Null" {
            return Ok(Action::Null);
        }
        let err = || PomdpError::ActionSyntax(s.to_string());
        let open = s.find('(').ok_or_else(err)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(err)?;
        let args: Vec<&str> = inner.split(',').map(str::trim).collect();
        if args.iter().any(|a| a.is_empty()) {
            return Err(err());
        }
        match (&s[..open], args.as_slice()) {
            ("Open", [a]) => Ok(Action::open(a)),
            ("Place", [a]) => Ok(Action::place(a)),
            ("Pick", [a, o]) => Ok(Action::pick(a, o)),
            _ => Err(err()),
        }
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A partial scene graph: only objects in open areas (and the hand).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Observation {
    graph: SceneGraph,
}

impl Observation {
    /// Projects `graph` to its visible part.
    pub fn new(graph: &SceneGraph) -> Observation {
        Observation { graph: graph.visible() }
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub manipulation_cost: f64,
    /// Reward units per meter travelled.
    pub nav_scale: f64,
    pub nav_max: f64,
    pub infeasible_cost: f64,
    pub subgoal_reward: f64,
    pub completion_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig::model_default()
    }
}

impl RewardConfig {
    /// Costs of the POMDP model: manipulation 5, infeasible 100, subgoal 200,
    /// completion bonus 200.
    pub fn model_default() -> Self {
        RewardConfig {
            manipulation_cost: 5.0,
            nav_scale: 2.0,
            nav_max: 27.0,
            infeasible_cost: 100.0,
            subgoal_reward: 200.0,
            completion_reward: 200.0,
        }
    }

    /// Benchmark variant: no subgoal reward, completion 1000, infeasible 25.
    pub fn experiment() -> Self {
        RewardConfig {
            infeasible_cost: 25.0,
            subgoal_reward: 0.0,
            completion_reward: 1000.0,
            ..Self::model_default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, PomdpError> {
        match name {
            "model-default" => Ok(Self::model_default()),
            "experiment" => Ok(Self::experiment()),
            other => Err(PomdpError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), PomdpError> {
        let fields = [
            ("manipulation_cost", self.manipulation_cost),
            ("nav_scale", self.nav_scale),
            ("nav_max", self.nav_max),
            ("infeasible_cost", self.infeasible_cost),
            ("subgoal_reward", self.subgoal_reward),
            ("completion_reward", self.completion_reward),
        ];
        match fields.iter().find(|(_, v)| v.is_nan() || *v < 0.0) {
            Some((name, _)) => Err(PomdpError::NegativeReward(name)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub feasible: bool,
    pub executed_move_cost: f64,
}

/// Resolves the area an action operates on if its preconditions hold.
fn feasible_area(g: &SceneGraph, a: &Action) -> Option<Option<AreaIx>> {
    let kitchen = g.kitchen();
    let hand = kitchen.robot_hand();
    match a {
        Action::Null => Some(None),
        Action::Open(area) => {
            let ix = kitchen.index_of(area)?;
            (!g.is_open_ix(ix)).then_some(Some(ix))
        }
        Action::Pick { area, object } => {
            let ix = kitchen.index_of(area)?;
            let ok = ix != hand
                && g.is_open_ix(ix)
                && g.held_object().is_none()
                && g.parent_of(object) == Some(ix);
            ok.then_some(Some(ix))
        }
        Action::Place(area) => {
            let ix = kitchen.index_of(area)?;
            let ok = ix != hand && g.is_open_ix(ix) && g.held_object().is_some();
            ok.then_some(Some(ix))
        }
    }
}

pub fn is_feasible(s: &State, a: &Action) -> bool {
    feasible_area(&s.graph, a).is_some()
}

/// Applies the graph mutation of a feasible action, moving the robot in front
/// of the action's area. Returns the new graph and the navigation cost, or
/// `None` when infeasible.
pub(crate) fn apply_action(
    g: &SceneGraph,
    a: &Action,
    cfg: &RewardConfig,
) -> Option<(SceneGraph, f64)> {
    let ix = match feasible_area(g, a)? {
        None => return Some((g.clone(), 0.0)),
        Some(ix) => ix,
    };
    let move_cost = g.move_cost_ix(g.robot_at_ix(), ix, cfg);
    let mut next = g.clone();
    next.set_robot_at_ix(ix);
    let hand = g.kitchen().robot_hand();
    let mutated = match a {
        Action::Open(_) => next.open_ix(ix),
        Action::Pick { object, .. } => next.move_object_ix(object.as_str(), hand),
        Action::Place(_) => {
            let held = g.held_object().expect("feasible place holds an object").clone();
            next.move_object_ix(held.as_str(), ix)
        }
        Action::Null => unreachable!(),
    };
    debug_assert!(mutated.is_ok());
    Some((next, move_cost))
}

/// Deterministic transition with reward. Infeasible actions behave as `Null`
/// and are charged `infeasible_cost`.
pub fn transition(s: &State, a: &Action, cfg: &RewardConfig) -> StepResult {
    let Some((graph, move_cost)) = apply_action(&s.graph, a, cfg) else {
        return StepResult {
            next_state: s.clone(),
            reward: -cfg.infeasible_cost,
            feasible: false,
            executed_move_cost: 0.0,
        };
    };
    if matches!(a, Action::Null) {
        return StepResult { next_state: s.clone(), reward: 0.0, feasible: true, executed_move_cost: 0.0 };
    }
    let mut reward = -(move_cost + cfg.manipulation_cost);
    let mut credited = s.credited;
    // Satisfied pairs are always credited, so only a Place can earn reward:
    // Open moves nothing and Pick lifts an object into the hand.
    if matches!(a, Action::Place(_)) && !s.goal.is_empty() {
        let before = s.goal.satisfied_mask(&s.graph);
        let after = s.goal.satisfied_mask(&graph);
        let fresh = after & !credited;
        reward += cfg.subgoal_reward * f64::from(fresh.count_ones());
        credited |= after;
        let full = s.goal.full_mask();
        if after == full && before != full {
            reward += cfg.completion_reward;
        }
    }
    StepResult {
        next_state: State { graph, goal: s.goal.clone(), credited },
        reward,
        feasible: true,
        executed_move_cost: move_cost,
    }
}

pub fn observe(s: &State) -> Observation {
    Observation::new(&s.graph)
}

/// 1 if `z` is exactly the visible projection of `s_next`, else 0.
pub fn observation_likelihood(s_next: &State, z: &Observation) -> f64 {
    if s_next.graph.visible_matches(&z.graph) {
        1.0
    } else {
        0.0
    }
}
