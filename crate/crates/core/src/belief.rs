//! Weighted particle beliefs over (scene graph, placement goal) states.
//!
//! Updates follow a predict / eliminate / supplement cycle. Because both the
//! transition and observation models are deterministic, elimination is a hard
//! filter: a particle survives iff its visible projection equals the
//! observation. When too little mass survives, freshly generated particles are
//! merged in with weights scaled by the lost mass.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pomdp::{goal_satisfied, observation_likelihood, transition, Action, Observation, PlacementGoal, RewardConfig, State};

/// Particles below this weight are dropped after merging.
pub const PRUNE_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("belief has no particles")]
    EmptyBelief,
    #[error("surviving weight {w_bf} is below {threshold} but no supplement belief was given")]
    MissingSupplement { w_bf: f64, threshold: f64 },
    #[error("surviving weight {w_bf} is at least {threshold} but a supplement belief was given")]
    SpuriousSupplement { w_bf: f64, threshold: f64 },
    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub state: State,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefUpdateConfig {
    /// Supplementation triggers when surviving weight drops below `1 - epsilon`.
    pub epsilon: f64,
    pub duplicate_merge: bool,
}

impl Default for BeliefUpdateConfig {
    fn default() -> Self {
        BeliefUpdateConfig { epsilon: 0.7, duplicate_merge: true }
    }
}

impl BeliefUpdateConfig {
    pub fn threshold(&self) -> f64 {
        1.0 - self.epsilon
    }

    /// `w_bf < 1 - epsilon`, evaluated as `w_bf + epsilon < 1` so that a
    /// surviving weight of exactly `1 - epsilon` does not trigger
    /// (`1.0 - 0.7` rounds above 0.3).
    pub fn needs_supplement(&self, w_bf: f64) -> bool {
        w_bf + self.epsilon < 1.0
    }

    pub fn validate(&self) -> Result<(), BeliefError> {
        if self.epsilon > 0.0 && self.epsilon < 1.0 {
            Ok(())
        } else {
            Err(BeliefError::InvalidEpsilon(self.epsilon))
        }
    }
}

/// Particles kept in canonical state order, duplicate-free, all weights > 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleBelief {
    particles: Vec<Particle>,
    normalized: bool,
}

impl ParticleBelief {
    /// Builds a belief, merging structurally equal states and pruning
    /// negligible weights. The result is not normalized.
    pub fn from_particles(particles: Vec<Particle>) -> ParticleBelief {
        ParticleBelief { particles: merge(particles, true), normalized: false }
    }

    /// Builds and normalizes in one go.
    pub fn normalized_from(particles: Vec<Particle>) -> ParticleBelief {
        ParticleBelief::from_particles(particles).normalized()
    }

    pub fn single(state: State) -> ParticleBelief {
        ParticleBelief { particles: vec![Particle { state, weight: 1.0 }], normalized: true }
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// Weights divided by their sum. An empty belief stays empty.
    pub fn normalized(mut self) -> ParticleBelief {
        let total = self.total_weight();
        if total > 0.0 {
            for p in &mut self.particles {
                p.weight /= total;
            }
            self.normalized = true;
        }
        self
    }

    /// Heaviest particle; ties go to the canonically smallest state.
    pub fn max_weight_particle(&self) -> Option<&Particle> {
        self.particles
            .iter()
            .fold(None, |best: Option<&Particle>, p| match best {
                Some(b) if b.weight >= p.weight => Some(b),
                _ => Some(p),
            })
    }

    /// Keeps only the heaviest particle, with weight 1.
    pub fn collapse_to_max(&self) -> ParticleBelief {
        match self.max_weight_particle() {
            Some(p) => ParticleBelief::single(p.state.clone()),
            None => ParticleBelief::default(),
        }
    }

    /// Diagnostic text dump: particles sorted by descending weight.
    pub fn dump(&self) -> String {
        self.to_string()
    }
}

fn merge(mut particles: Vec<Particle>, dedup: bool) -> Vec<Particle> {
    particles.retain(|p| p.weight > 0.0);
    particles.sort_by(|a, b| a.state.cmp(&b.state));
    let mut out: Vec<Particle> = Vec::with_capacity(particles.len());
    for p in particles {
        match out.last_mut() {
            Some(last) if dedup && last.state == p.state => last.weight += p.weight,
            _ => out.push(p),
        }
    }
    out.retain(|p| p.weight >= PRUNE_WEIGHT);
    out
}

impl fmt::Display for ParticleBelief {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut order: Vec<&Particle> = self.particles.iter().collect();
        order.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.state.cmp(&b.state)));
        writeln!(f, "# belief particles={} total={:.12}", self.len(), self.total_weight())?;
        for (i, p) in order.iter().enumerate() {
            writeln!(f, "## particle {i} weight={:.12}", p.weight)?;
            writeln!(f, "goal: {}", p.state.goal)?;
            for line in p.state.graph.canonical_text().lines() {
                writeln!(f, "  {line}")?;
            }
        }
        Ok(())
    }
}

/// Pushes every particle through the transition model. Weights are unchanged;
/// states that coincide afterwards are merged.
pub fn predict(
    b: &ParticleBelief,
    a: &Action,
    cfg: &RewardConfig,
) -> Result<ParticleBelief, BeliefError> {
    if b.is_empty() {
        return Err(BeliefError::EmptyBelief);
    }
    let moved: Vec<Particle> = b
        .particles
        .par_iter()
        .map(|p| Particle { state: transition(&p.state, a, cfg).next_state, weight: p.weight })
        .collect();
    Ok(ParticleBelief { particles: merge(moved, true), normalized: b.normalized })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Elimination {
    /// Survivors with their original (unnormalized) weights.
    pub belief: ParticleBelief,
    pub w_bf: f64,
    /// Goals shown wrong by this observation: visibly satisfied while the task
    /// is reported as not done. Deduplicated, in canonical order.
    pub wrong_goals: Vec<PlacementGoal>,
}

/// Removes particles inconsistent with the observation and the done signal.
///
/// A particle is dropped when its visible projection differs from `z`, when
/// its goal is among `failed_goals`, or (for `task_done == false`) when its
/// goal is already satisfied in its own graph, since the environment would
/// have reported completion. Goals satisfied in `z` itself are returned as
/// wrong goals for the caller to record.
pub fn eliminate(
    b: &ParticleBelief,
    z: &Observation,
    task_done: bool,
    failed_goals: &[PlacementGoal],
) -> Elimination {
    let survivors: Vec<Particle> = b
        .particles
        .par_iter()
        .filter(|p| {
            observation_likelihood(&p.state, z) > 0.0
                && !failed_goals.iter().any(|g| g.same_pairs(&p.state.goal))
                && (task_done || !p.state.is_goal_satisfied())
        })
        .cloned()
        .collect();
    let mut wrong_goals: Vec<PlacementGoal> = Vec::new();
    if !task_done {
        for p in &b.particles {
            let goal = &p.state.goal;
            if !goal.is_empty()
                && goal_satisfied(z.graph(), goal)
                && !wrong_goals.iter().any(|g| g.same_pairs(goal))
                && !failed_goals.iter().any(|g| g.same_pairs(goal))
            {
                wrong_goals.push(goal.clone());
            }
        }
    }
    wrong_goals.sort();
    let w_bf = survivors.iter().map(|p| p.weight).sum();
    Elimination {
        belief: ParticleBelief { particles: survivors, normalized: false },
        w_bf,
        wrong_goals,
    }
}

/// Renormalizes the filtered belief, or tops it up with `b_llm` scaled by the
/// lost mass `1 - w_bf` when `w_bf < 1 - epsilon`.
pub fn hybrid_update(
    b_bf: &ParticleBelief,
    w_bf: f64,
    b_llm: Option<&ParticleBelief>,
    cfg: &BeliefUpdateConfig,
) -> Result<ParticleBelief, BeliefError> {
    cfg.validate()?;
    let threshold = cfg.threshold();
    let needs_supplement = cfg.needs_supplement(w_bf);
    match (needs_supplement, b_llm) {
        (false, None) => {
            let mut particles = b_bf.particles.clone();
            for p in &mut particles {
                p.weight /= w_bf;
            }
            let particles = merge(particles, cfg.duplicate_merge);
            Ok(ParticleBelief { particles, normalized: true })
        }
        (false, Some(_)) => Err(BeliefError::SpuriousSupplement { w_bf, threshold }),
        (true, None) => Err(BeliefError::MissingSupplement { w_bf, threshold }),
        (true, Some(llm)) if llm.is_empty() => Err(BeliefError::MissingSupplement { w_bf, threshold }),
        (true, Some(llm)) => {
            let llm_total = llm.total_weight();
            let scale = (1.0 - w_bf) / llm_total;
            let mut particles = b_bf.particles.clone();
            particles.extend(
                llm.particles
                    .iter()
                    .map(|p| Particle { state: p.state.clone(), weight: p.weight * scale }),
            );
            let particles = merge(particles, cfg.duplicate_merge);
            Ok(ParticleBelief { particles, normalized: true })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::{observe, GoalPair};
    use crate::scene_graph::{Kitchen, SceneGraph};

    fn base() -> SceneGraph {
        SceneGraph::new(Kitchen::builtin("one_wall").unwrap(), "Prep_Surface").unwrap()
    }

    fn goal(obj: &str, target: &str) -> PlacementGoal {
        PlacementGoal::new(vec![GoalPair::new(obj, target)]).unwrap()
    }

    fn particle(graph: SceneGraph, g: PlacementGoal, w: f64) -> Particle {
        Particle { state: State::new(graph, g).unwrap(), weight: w }
    }

    fn two_hypotheses() -> ParticleBelief {
        let g = goal("rice_jar", "Prep_Surface");
        ParticleBelief::normalized_from(vec![
            particle(base().with_object("rice_jar", "Dishware_Cabinet").unwrap(), g.clone(), 0.5),
            particle(base().with_object("rice_jar", "Utility_Cabinet").unwrap(), g, 0.5),
        ])
    }

    #[test]
    fn predict_null_is_identity() {
        let b = two_hypotheses();
        let cfg = RewardConfig::experiment();
        assert_eq!(predict(&b, &Action::Null, &cfg).unwrap(), b);
        assert_eq!(
            predict(&ParticleBelief::default(), &Action::Null, &cfg),
            Err(BeliefError::EmptyBelief)
        );
    }

    #[test]
    fn predict_open_diverges_visible_content() {
        let b = two_hypotheses();
        let p = predict(&b, &Action::open("Dishware_Cabinet"), &RewardConfig::experiment()).unwrap();
        assert_eq!(p.len(), 2);
        let weights: Vec<f64> = p.particles().iter().map(|p| p.weight).collect();
        assert_eq!(weights, vec![0.5, 0.5]);
        let visible: Vec<_> = p.particles().iter().map(|p| observe(&p.state)).collect();
        assert_ne!(visible[0], visible[1]);
    }

    #[test]
    fn predict_merges_duplicates() {
        let g = goal("apple", "Display_Surface");
        let with_apple = base().with_object("apple", "Prep_Surface").unwrap();
        let opened = with_apple.set_area_open("Dishware_Cabinet").unwrap().set_robot_at("Dishware_Cabinet").unwrap();
        let b = ParticleBelief::normalized_from(vec![
            particle(with_apple.clone(), g.clone(), 0.25),
            particle(opened, g.clone(), 0.75),
        ]);
        let p = predict(&b, &Action::open("Dishware_Cabinet"), &RewardConfig::experiment()).unwrap();
        // the already-open particle treats the Open as infeasible and ends up
        // identical to the other one
        assert_eq!(p.len(), 1);
        assert_eq!(p.particles()[0].weight, 1.0);
        let b = ParticleBelief::from_particles(vec![
            particle(with_apple.clone(), g.clone(), 0.25),
            particle(with_apple, g, 0.75),
        ]);
        assert_eq!(b.len(), 1);
        assert_eq!(b.particles()[0].weight, 1.0);
    }

    #[test]
    fn eliminate_keeps_consistent() {
        let b = two_hypotheses();
        let z = Observation::new(&base());
        let e = eliminate(&b, &z, false, &[]);
        assert_eq!(e.w_bf, 1.0);
        assert_eq!(e.belief.particles(), b.particles());
        assert!(e.wrong_goals.is_empty());
    }

    #[test]
    fn eliminate_removes_revealed_mismatch() {
        let b = two_hypotheses();
        let a = Action::open("Dishware_Cabinet");
        let cfg = RewardConfig::experiment();
        let predicted = predict(&b, &a, &cfg).unwrap();
        // truth: the jar is in the utility cabinet, so the opened cabinet is empty
        let truth = base().with_object("rice_jar", "Utility_Cabinet").unwrap();
        let truth = State::without_goal(truth);
        let z = observe(&transition(&truth, &a, &cfg).next_state);
        let e = eliminate(&predicted, &z, false, &[]);
        assert_eq!(e.belief.len(), 1);
        assert_eq!(e.w_bf, 0.5);
        assert_eq!(e.belief.particles()[0].state.graph.object_parent("rice_jar").unwrap().as_str(), "Utility_Cabinet");
    }

    #[test]
    fn eliminate_marks_visibly_satisfied_goal_wrong() {
        let g = base().with_object("apple", "Display_Surface").unwrap();
        let wrong = goal("apple", "Display_Surface");
        let right = goal("apple", "Human_Hand");
        let b = ParticleBelief::normalized_from(vec![
            particle(g.clone(), wrong.clone(), 0.4),
            particle(g.clone(), right, 0.6),
        ]);
        let e = eliminate(&b, &Observation::new(&g), false, &[]);
        assert_eq!(e.wrong_goals, vec![wrong.clone()]);
        assert_eq!(e.belief.len(), 1);
        assert!((e.w_bf - 0.6).abs() < 1e-12);
        // previously failed goals are removed without being reported again
        let e = eliminate(&b, &Observation::new(&g), false, &[wrong]);
        assert!(e.wrong_goals.is_empty());
        assert_eq!(e.belief.len(), 1);
        // done: nothing is wrong
        let e = eliminate(&b, &Observation::new(&g), true, &[]);
        assert_eq!(e.belief.len(), 2);
    }

    fn weighted(weights: &[f64]) -> ParticleBelief {
        let particles = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let g = base().with_object(&format!("obj_{i}"), "Dishware_Cabinet").unwrap();
                particle(g, goal(&format!("obj_{i}"), "Prep_Surface"), w)
            })
            .collect();
        ParticleBelief::from_particles(particles)
    }

    #[test]
    fn hybrid_renormalizes_above_threshold() {
        let b = weighted(&[0.3, 0.3]);
        let out = hybrid_update(&b, 0.6, None, &BeliefUpdateConfig::default()).unwrap();
        for p in out.particles() {
            assert!((p.weight - 0.5).abs() < 1e-12);
        }
        assert!(out.is_normalized());
    }

    #[test]
    fn hybrid_supplements_below_threshold() {
        let b = weighted(&[0.2]);
        let llm = ParticleBelief::normalized_from(vec![
            particle(base().with_object("x", "Cutlery_Drawer").unwrap(), goal("x", "Prep_Surface"), 0.5),
            particle(base().with_object("x", "Utility_Cabinet").unwrap(), goal("x", "Prep_Surface"), 0.5),
        ]);
        let out = hybrid_update(&b, 0.2, Some(&llm), &BeliefUpdateConfig::default()).unwrap();
        let mut weights: Vec<f64> = out.particles().iter().map(|p| p.weight).collect();
        weights.sort_by(f64::total_cmp);
        assert!((weights[0] - 0.2).abs() < 1e-12);
        assert!((weights[1] - 0.4).abs() < 1e-12);
        assert!((weights[2] - 0.4).abs() < 1e-12);
        assert!((out.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hybrid_zero_survivors_returns_supplement() {
        let llm = weighted(&[0.25, 0.75]).normalized();
        let out =
            hybrid_update(&ParticleBelief::default(), 0.0, Some(&llm), &BeliefUpdateConfig::default()).unwrap();
        assert_eq!(out.particles(), llm.particles());
    }

    #[test]
    fn hybrid_contract_errors() {
        let cfg = BeliefUpdateConfig::default();
        let b = weighted(&[0.1]);
        assert!(matches!(hybrid_update(&b, 0.1, None, &cfg), Err(BeliefError::MissingSupplement { .. })));
        let llm = weighted(&[1.0]);
        let b = weighted(&[0.9]);
        assert!(matches!(
            hybrid_update(&b, 0.9, Some(&llm), &cfg),
            Err(BeliefError::SpuriousSupplement { .. })
        ));
        let bad = BeliefUpdateConfig { epsilon: 1.0, ..cfg };
        assert!(matches!(hybrid_update(&b, 0.9, None, &bad), Err(BeliefError::InvalidEpsilon(_))));
    }

    #[test]
    fn dump_lists_particles_by_weight() {
        let text = weighted(&[0.25, 0.75]).normalized().dump();
        assert!(text.starts_with("# belief particles=2 total=1.000000000000\n"));
        let first = text.find("weight=0.750000000000").unwrap();
        let second = text.find("weight=0.250000000000").unwrap();
        assert!(first < second);
    }
}
