//! Tree of hypotheses: goal combinations with target areas (one generator
//! call), then candidate locations for each target object that is not visible
//! (one call per object). Every root-to-leaf path becomes a particle whose
//! weight is the product of the confidences along it.

mod llm;
mod mock;
mod textualize;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{Particle, ParticleBelief};
use crate::pomdp::{GoalPair, Observation, PlacementGoal, State};
use crate::scene_graph::NodeId;

pub use llm::{extract_json_block, parse_goal_answer, parse_location_answer, LlmConfig, LlmGenerator};
pub use mock::{MockConfig, MockGenerator, MockTruth};
pub use textualize::{normalize_whitespace, textualize, ROBOT_HAND_TEXT};

/// Level-1/2 candidate: a placement goal with the generator's confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalCandidate {
    pub goal: PlacementGoal,
    pub confidence: f64,
}

/// Level-3 candidate: a possible current area of a target object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationCandidate {
    pub area: NodeId,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HypothesisTree {
    pub goal_candidates: Vec<GoalCandidate>,
    pub locations: BTreeMap<NodeId, Vec<LocationCandidate>>,
}

/// Size summary of a tree: goal candidates, widest location list, leaf count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
}

impl HypothesisTree {
    pub fn shape(&self) -> TreeShape {
        let c2 = self.locations.values().map(Vec::len).max().unwrap_or(0);
        let c3 = self
            .goal_candidates
            .iter()
            .map(|g| {
                g.goal
                    .pairs()
                    .iter()
                    .map(|p| self.locations.get(&p.object).map_or(1, |l| l.len().max(1)))
                    .product::<usize>()
            })
            .sum();
        TreeShape { c1: self.goal_candidates.len(), c2, c3 }
    }
}

/// Everything the generator is conditioned on besides the observation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    pub instruction: String,
    pub failed_goals: Vec<PlacementGoal>,
    pub satisfied_objects: BTreeSet<NodeId>,
    pub action_observation_history: Option<String>,
}

impl QueryContext {
    pub fn new(instruction: impl Into<String>) -> Self {
        QueryContext { instruction: instruction.into(), ..Default::default() }
    }

    pub fn observation_text(&self, z: &Observation) -> String {
        textualize(z, &self.failed_goals, &self.satisfied_objects)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub query_count: u64,
    /// Seconds spent inside generator calls.
    pub wall_time: f64,
}

impl GeneratorUsage {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Usage accrued since an earlier snapshot of the same generator.
    pub fn since(&self, earlier: &GeneratorUsage) -> GeneratorUsage {
        GeneratorUsage {
            prompt_tokens: self.prompt_tokens.saturating_sub(earlier.prompt_tokens),
            completion_tokens: self.completion_tokens.saturating_sub(earlier.completion_tokens),
            query_count: self.query_count.saturating_sub(earlier.query_count),
            wall_time: (self.wall_time - earlier.wall_time).max(0.0),
        }
    }
}

/// Unvalidated goal combination as emitted by a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGoal {
    /// (object, target area) pairs.
    pub pairs: Vec<(String, String)>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLocation {
    pub area: String,
    pub probability: f64,
}

pub struct GoalQuery<'a> {
    pub ctx: &'a QueryContext,
    pub observation: &'a Observation,
    pub observation_text: &'a str,
    pub k: usize,
}

pub struct LocationQuery<'a> {
    pub ctx: &'a QueryContext,
    pub observation: &'a Observation,
    pub observation_text: &'a str,
    pub object: &'a NodeId,
    pub k: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("generator transport failure: {0}")]
    Transport(String),
    #[error("generator answer unparseable after {attempts} attempts: {message}")]
    Parse { attempts: u32, message: String },
    #[error("generator configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypothesisError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error("no valid candidates: {0}")]
    EmptyResult(String),
    #[error("candidate count must be at least 1")]
    InvalidCount,
}

/// Source of goal and location hypotheses. Implementations must tolerate
/// concurrent calls.
pub trait HypothesisGenerator: Send + Sync {
    fn name(&self) -> &str;
    fn propose_goals(&self, query: &GoalQuery<'_>) -> Result<Vec<RawGoal>, GeneratorError>;
    fn propose_locations(&self, query: &LocationQuery<'_>) -> Result<Vec<RawLocation>, GeneratorError>;
    /// Cumulative usage since construction.
    fn usage(&self) -> GeneratorUsage;
}

fn valid_object_name(name: &str) -> bool {
    !name.is_empty() && !name.chars().any(char::is_whitespace)
}

/// Asks for up to `c1` goal combinations and keeps only well-formed ones.
///
/// Dropped (with a warning, never repaired): non-positive confidences,
/// malformed goals, object names that collide with area names, targets that
/// are not placeable areas of the observed kitchen, combinations that remap an
/// object already locked to another target by an earlier combination,
/// duplicates, and previously failed goals. Confidences are renormalized.
pub fn query_goals(
    gen: &dyn HypothesisGenerator,
    ctx: &QueryContext,
    z: &Observation,
    c1: usize,
) -> Result<Vec<GoalCandidate>, HypothesisError> {
    if c1 == 0 {
        return Err(HypothesisError::InvalidCount);
    }
    let text = ctx.observation_text(z);
    let raw = gen.propose_goals(&GoalQuery { ctx, observation: z, observation_text: &text, k: c1 })?;
    let kitchen = z.graph().kitchen();
    let mut locked: HashMap<NodeId, NodeId> = HashMap::new();
    let mut accepted: Vec<GoalCandidate> = Vec::new();
    for cand in raw {
        if accepted.len() == c1 {
            break;
        }
        if !(cand.probability.is_finite() && cand.probability > 0.0) {
            warn!("dropping goal candidate with confidence {}", cand.probability);
            continue;
        }
        if let Some((o, _)) = cand.pairs.iter().find(|(o, _)| !valid_object_name(o) || kitchen.area_index(o).is_some()) {
            warn!("dropping goal candidate: invalid object name `{o}`");
            continue;
        }
        if let Some((_, t)) = cand
            .pairs
            .iter()
            .find(|(_, t)| kitchen.area_index(t).is_none_or(|ix| ix == kitchen.robot_hand()))
        {
            warn!("dropping goal candidate: target `{t}` is not an observed area");
            continue;
        }
        let goal = match PlacementGoal::new(cand.pairs.iter().map(|(o, t)| GoalPair::new(o, t)).collect()) {
            Ok(g) => g,
            Err(e) => {
                warn!("dropping goal candidate: {e}");
                continue;
            }
        };
        if goal.pairs().iter().any(|p| locked.get(&p.object).is_some_and(|t| *t != p.target)) {
            warn!("dropping goal candidate `{goal}`: conflicts with a locked object mapping");
            continue;
        }
        if accepted.iter().any(|c| c.goal.same_pairs(&goal)) {
            continue;
        }
        if ctx.failed_goals.iter().any(|f| f.same_pairs(&goal)) {
            warn!("dropping goal candidate `{goal}`: previously failed");
            continue;
        }
        for p in goal.pairs() {
            locked.entry(p.object.clone()).or_insert_with(|| p.target.clone());
        }
        accepted.push(GoalCandidate { goal, confidence: cand.probability });
    }
    if accepted.is_empty() {
        return Err(HypothesisError::EmptyResult("no valid goal combination".into()));
    }
    let total: f64 = accepted.iter().map(|c| c.confidence).sum();
    for c in &mut accepted {
        c.confidence /= total;
    }
    Ok(accepted)
}

/// Candidate current areas for one target object. A visible object gets its
/// observed area with confidence 1 without consulting the generator; otherwise
/// only closed areas of the observation are kept, duplicates are summed, the
/// list is cut to the `c2` most confident and renormalized.
pub fn query_location(
    gen: &dyn HypothesisGenerator,
    ctx: &QueryContext,
    z: &Observation,
    object: &NodeId,
    c2: usize,
) -> Result<Vec<LocationCandidate>, HypothesisError> {
    if c2 == 0 {
        return Err(HypothesisError::InvalidCount);
    }
    let g = z.graph();
    if let Some(area) = g.object_parent(object.as_str()) {
        return Ok(vec![LocationCandidate { area: area.clone(), confidence: 1.0 }]);
    }
    let text = ctx.observation_text(z);
    let raw = gen.propose_locations(&LocationQuery {
        ctx,
        observation: z,
        observation_text: &text,
        object,
        k: c2,
    })?;
    let mut merged: Vec<LocationCandidate> = Vec::new();
    for r in raw {
        if !(r.probability.is_finite() && r.probability > 0.0) {
            continue;
        }
        if g.is_open(&r.area) != Some(false) {
            warn!("dropping location `{}` for `{object}`: not a closed area", r.area);
            continue;
        }
        match merged.iter_mut().find(|c| c.area.as_str() == r.area) {
            Some(c) => c.confidence += r.probability,
            None => merged.push(LocationCandidate { area: NodeId::new(&r.area), confidence: r.probability }),
        }
    }
    merged.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    merged.truncate(c2);
    if merged.is_empty() {
        return Err(HypothesisError::EmptyResult(format!("no closed-area location for `{object}`")));
    }
    let total: f64 = merged.iter().map(|c| c.confidence).sum();
    for c in &mut merged {
        c.confidence /= total;
    }
    Ok(merged)
}

#[derive(Debug, Clone, Default)]
pub struct LlmBelief {
    pub belief: ParticleBelief,
    pub tree: HypothesisTree,
}

/// Builds the normalized particle belief from a fresh hypothesis tree.
///
/// Each goal candidate is expanded over the cross product of its hidden
/// objects' location candidates; hidden objects are materialized in the
/// particle's copy of the observed graph. Goal candidates whose hidden objects
/// get no valid location are dropped. An empty tree gives an empty belief.
pub fn build_llm_belief(
    z: &Observation,
    ctx: &QueryContext,
    gen: &dyn HypothesisGenerator,
    c1: usize,
    c2: usize,
) -> Result<LlmBelief, HypothesisError> {
    let goals = match query_goals(gen, ctx, z, c1) {
        Ok(goals) => goals,
        Err(HypothesisError::EmptyResult(reason)) => {
            warn!("hypothesis tree is empty: {reason}");
            return Ok(LlmBelief::default());
        }
        Err(e) => return Err(e),
    };
    let g = z.graph();
    let hidden: BTreeSet<NodeId> = goals
        .iter()
        .flat_map(|c| c.goal.pairs().iter().map(|p| p.object.clone()))
        .filter(|o| !g.contains_object(o.as_str()))
        .collect();
    let hidden: Vec<NodeId> = hidden.into_iter().collect();
    let answers: Vec<Result<Vec<LocationCandidate>, HypothesisError>> =
        hidden.par_iter().map(|o| query_location(gen, ctx, z, o, c2)).collect();
    let mut locations = BTreeMap::new();
    for (object, answer) in hidden.into_iter().zip(answers) {
        match answer {
            Ok(list) => {
                locations.insert(object, list);
            }
            Err(HypothesisError::EmptyResult(reason)) => warn!("{reason}"),
            Err(e) => return Err(e),
        }
    }
    let goals: Vec<GoalCandidate> = goals
        .into_iter()
        .filter(|c| {
            c.goal
                .pairs()
                .iter()
                .all(|p| g.contains_object(p.object.as_str()) || locations.contains_key(&p.object))
        })
        .collect();

    let hand = g.kitchen().robot_hand();
    let mut particles = Vec::new();
    for cand in &goals {
        let hidden_here: Vec<(&NodeId, &Vec<LocationCandidate>)> = cand
            .goal
            .pairs()
            .iter()
            .filter_map(|p| locations.get_key_value(&p.object))
            .collect();
        // odometer over the per-object location lists
        let mut digits = vec![0usize; hidden_here.len()];
        loop {
            let mut graph = g.clone();
            let mut weight = cand.confidence;
            for (d, (object, list)) in digits.iter().zip(&hidden_here) {
                let loc = &list[*d];
                let ix = g.kitchen().area_index(loc.area.as_str()).expect("validated area");
                debug_assert_ne!(ix, hand);
                graph.insert_object_ix((*object).clone(), ix).expect("hidden object is new");
                weight *= loc.confidence;
            }
            let state = State::new(graph, cand.goal.clone()).expect("validated goal");
            particles.push(Particle { state, weight });
            let mut i = 0;
            loop {
                if i == digits.len() {
                    break;
                }
                digits[i] += 1;
                if digits[i] < hidden_here[i].1.len() {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
            if i == digits.len() {
                break;
            }
        }
    }
    Ok(LlmBelief {
        belief: ParticleBelief::normalized_from(particles),
        tree: HypothesisTree { goal_candidates: goals, locations },
    })
}
