use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeneratorError, GeneratorUsage, GoalQuery, HypothesisGenerator, LocationQuery, RawGoal, RawLocation};
use crate::pomdp::PlacementGoal;
use crate::scene_graph::NodeId;

/// Ground truth the mock generator answers from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockTruth {
    pub goal: PlacementGoal,
    /// True area of every object in the episode.
    pub placements: BTreeMap<NodeId, NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    /// Confidence of the true goal (before renormalization).
    pub true_goal_weight: f64,
    /// Confidence of the true location of a hidden object.
    pub true_location_weight: f64,
    pub decoy_goals: usize,
    pub decoy_locations: usize,
    pub include_true_goal: bool,
    /// Draw every confidence uniformly instead of favouring the truth.
    pub randomize_weights: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 0,
            true_goal_weight: 0.6,
            true_location_weight: 0.6,
            decoy_goals: 2,
            decoy_locations: 2,
            include_true_goal: true,
            randomize_weights: false,
        }
    }
}

impl MockConfig {
    pub fn oracle(seed: u64) -> Self {
        MockConfig { seed, ..Default::default() }
    }

    /// Truth is present but not favoured.
    pub fn noisy(seed: u64) -> Self {
        MockConfig { seed, randomize_weights: true, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        for (name, w) in [("true_goal_weight", self.true_goal_weight), ("true_location_weight", self.true_location_weight)] {
            if !(w > 0.0 && w <= 1.0) {
                return Err(GeneratorError::Config(format!("{name} must be in (0, 1], got {w}")));
            }
        }
        Ok(())
    }
}

/// Deterministic, reentrant generator: answers are a pure function of the
/// seed, the truth and the query text.
pub struct MockGenerator {
    truth: MockTruth,
    config: MockConfig,
    usage: Mutex<GeneratorUsage>,
}

/// FNV-1a over the parts, so seeds stay stable across toolchains.
fn stable_hash(seed: u64, parts: &[&str]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in seed.to_le_bytes().into_iter().chain(parts.iter().flat_map(|p| p.bytes().chain([0xff]))) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl MockGenerator {
    pub fn new(truth: MockTruth, config: MockConfig) -> Result<Self, GeneratorError> {
        config.validate()?;
        Ok(MockGenerator { truth, config, usage: Mutex::new(GeneratorUsage::default()) })
    }

    pub fn truth(&self) -> &MockTruth {
        &self.truth
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stable_hash(self.config.seed, parts))
    }

    fn record(&self, started: Instant) {
        let mut u = self.usage.lock().expect("usage lock");
        u.query_count += 1;
        u.wall_time += started.elapsed().as_secs_f64();
    }

    fn weights(&self, rng: &mut ChaCha8Rng, n: usize, truth_first: bool, truth_weight: f64) -> Vec<f64> {
        if n == 0 {
            return Vec::new();
        }
        if self.config.randomize_weights {
            return (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        }
        if truth_first {
            if n == 1 {
                return vec![1.0];
            }
            let rest = (1.0 - truth_weight).max(0.0) / (n - 1) as f64;
            std::iter::once(truth_weight).chain(std::iter::repeat_n(rest, n - 1)).collect()
        } else {
            vec![1.0 / n as f64; n]
        }
    }
}

impl HypothesisGenerator for MockGenerator {
    fn name(&self) -> &str {
        "mock"
    }

    fn propose_goals(&self, q: &GoalQuery<'_>) -> Result<Vec<RawGoal>, GeneratorError> {
        let started = Instant::now();
        let mut rng = self.rng(&["goals", q.observation_text]);
        let g = q.observation.graph();
        let failed = |goal: &PlacementGoal| q.ctx.failed_goals.iter().any(|f| f.same_pairs(goal));
        // pairs already visibly achieved and reported are no longer asked for
        let truth = self.truth.goal.without(|p| {
            q.ctx.satisfied_objects.contains(&p.object) && g.object_parent(p.object.as_str()) == Some(&p.target)
        });
        let base = if truth.is_empty() { self.truth.goal.clone() } else { truth };

        let mut out: Vec<PlacementGoal> = Vec::new();
        let truth_present = self.config.include_true_goal && !failed(&base);
        if truth_present {
            out.push(base.clone());
        }
        let mut pool: Vec<&NodeId> =
            self.truth.placements.keys().filter(|o| base.target_of(o.as_str()).is_none()).collect();
        pool.sort();
        let targets: Vec<NodeId> = g
            .kitchen()
            .placeable_areas()
            .map(|ix| g.kitchen().area(ix).id.clone())
            .collect();
        let mut locked: BTreeMap<NodeId, NodeId> =
            base.pairs().iter().map(|p| (p.object.clone(), p.target.clone())).collect();
        let mut attempts = 0;
        while out.len() < usize::from(truth_present) + self.config.decoy_goals && attempts < 20 * (1 + self.config.decoy_goals) {
            attempts += 1;
            let mut pairs: Vec<(NodeId, NodeId)> =
                base.pairs().iter().map(|p| (p.object.clone(), p.target.clone())).collect();
            if pairs.len() > 1 && rng.gen_bool(0.5) {
                pairs.remove(rng.gen_range(0..pairs.len()));
            } else if let Some(&obj) = pool.choose(&mut rng) {
                let target = locked
                    .get(obj)
                    .cloned()
                    .unwrap_or_else(|| targets.choose(&mut rng).expect("kitchen has areas").clone());
                let i = rng.gen_range(0..pairs.len());
                pairs[i] = (obj.clone(), target);
            } else {
                continue;
            }
            let Ok(goal) = PlacementGoal::from_pairs(pairs.iter().map(|(o, t)| (o.as_str(), t.as_str()))) else {
                continue;
            };
            if failed(&goal) || out.iter().any(|o| o.same_pairs(&goal)) {
                continue;
            }
            for p in goal.pairs() {
                locked.entry(p.object.clone()).or_insert_with(|| p.target.clone());
            }
            out.push(goal);
        }
        let weights = self.weights(&mut rng, out.len(), truth_present, self.config.true_goal_weight);
        self.record(started);
        Ok(out
            .into_iter()
            .zip(weights)
            .take(q.k)
            .map(|(goal, probability)| RawGoal {
                pairs: goal.pairs().iter().map(|p| (p.object.to_string(), p.target.to_string())).collect(),
                probability,
            })
            .collect())
    }

    fn propose_locations(&self, q: &LocationQuery<'_>) -> Result<Vec<RawLocation>, GeneratorError> {
        let started = Instant::now();
        let mut rng = self.rng(&["location", q.object.as_str(), q.observation_text]);
        let g = q.observation.graph();
        let closed: Vec<NodeId> = g
            .kitchen()
            .areas()
            .iter()
            .filter(|a| g.is_open(a.id.as_str()) == Some(false))
            .map(|a| a.id.clone())
            .collect();
        let true_area = self
            .truth
            .placements
            .get(q.object)
            .filter(|a| closed.contains(a))
            .cloned();
        let mut areas: Vec<NodeId> = Vec::new();
        if let Some(a) = &true_area {
            areas.push(a.clone());
        }
        let mut others: Vec<&NodeId> = closed.iter().filter(|a| Some(*a) != true_area.as_ref()).collect();
        others.shuffle(&mut rng);
        let wanted = self.config.decoy_locations + usize::from(true_area.is_none());
        areas.extend(others.into_iter().take(wanted).cloned());
        let weights = self.weights(&mut rng, areas.len(), true_area.is_some(), self.config.true_location_weight);
        self.record(started);
        Ok(areas
            .into_iter()
            .zip(weights)
            .map(|(area, probability)| RawLocation { area: area.to_string(), probability })
            .collect())
    }

    fn usage(&self) -> GeneratorUsage {
        *self.usage.lock().expect("usage lock")
    }
}
