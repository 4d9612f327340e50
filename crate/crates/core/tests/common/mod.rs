//! Shared fixtures and brute-force oracles for the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rearrange_core::belief::{Particle, ParticleBelief};
use rearrange_core::hypotheses::{
    GeneratorError, GeneratorUsage, GoalQuery, HypothesisGenerator, LocationQuery, RawGoal, RawLocation,
};
use rearrange_core::pomdp::{is_feasible, transition, GoalPair};
use rearrange_core::scene_graph::{AreaKind, AreaNode};
use rearrange_core::{Action, Kitchen, NodeId, PlacementGoal, RewardConfig, SceneGraph, State};

pub const HAND: &str = "robot";

pub fn area(name: &str, kind: AreaKind, open: bool, position: [f64; 2]) -> AreaNode {
    AreaNode { id: NodeId::new(name), kind, open, position }
}

/// A tiny layout: `open` always-open surfaces, `closed` closed cabinets and
/// the robot hand. Positions are random on a 3 m grid.
pub fn micro_kitchen(rng: &mut ChaCha8Rng, open: usize, closed: usize) -> Arc<Kitchen> {
    let mut pos = || [f64::from(rng.gen_range(0..7u8)) * 0.5, f64::from(rng.gen_range(0..7u8)) * 0.5];
    let mut areas = Vec::new();
    for i in 0..open {
        areas.push(area(&format!("Surface_{i}"), AreaKind::Surface, true, pos()));
    }
    for i in 0..closed {
        areas.push(area(&format!("Cabinet_{i}"), AreaKind::Cabinet, false, pos()));
    }
    areas.push(area(HAND, AreaKind::RobotHand, true, [0.0, 0.0]));
    Arc::new(Kitchen::new("micro".into(), "Micro".into(), areas).expect("valid micro layout"))
}

pub fn open_areas(k: &Kitchen) -> Vec<String> {
    k.areas().iter().filter(|a| a.open && a.kind != AreaKind::RobotHand).map(|a| a.id.to_string()).collect()
}

pub fn closed_areas(k: &Kitchen) -> Vec<String> {
    k.areas().iter().filter(|a| !a.open).map(|a| a.id.to_string()).collect()
}

pub fn placeable(k: &Kitchen) -> Vec<String> {
    k.areas().iter().filter(|a| a.kind != AreaKind::RobotHand).map(|a| a.id.to_string()).collect()
}

/// Every grounded action over the layout and the given object names.
pub fn grounded_actions(k: &Kitchen, objects: &[String]) -> Vec<Action> {
    let mut out = Vec::new();
    for a in k.areas() {
        out.push(Action::Open(a.id.clone()));
        out.push(Action::Place(a.id.clone()));
        for o in objects {
            out.push(Action::pick(a.id.as_str(), o));
        }
    }
    out.push(Action::Null);
    out
}

pub fn object_names(g: &SceneGraph) -> Vec<String> {
    g.objects().map(|(o, _)| o.to_string()).collect()
}

// ---------------------------------------------------------------------------
// Exhaustive expectimax over a weighted scenario set.

/// Deterministic-POMDP expectimax with the planner's semantics: `Null` ends
/// the episode with value 0, scenarios leave the set once their goal holds,
/// and branches split on the full visible projection.
pub struct Expectimax<'a> {
    pub rewards: &'a RewardConfig,
    memo: HashMap<(Vec<(u64, State)>, usize), f64>,
}

impl<'a> Expectimax<'a> {
    pub fn new(rewards: &'a RewardConfig) -> Self {
        Expectimax { rewards, memo: HashMap::new() }
    }

    /// Every action worth considering: all grounded actions that are feasible
    /// in the (visibly identical) scenarios. An infeasible action leaves the
    /// state unchanged at a cost, so it never beats idling.
    fn candidates(scenarios: &[(f64, State)]) -> Vec<Action> {
        let g = &scenarios[0].1.graph;
        let mut objects: Vec<String> = Vec::new();
        for (_, s) in scenarios {
            for o in object_names(&s.graph) {
                if !objects.contains(&o) {
                    objects.push(o);
                }
            }
        }
        grounded_actions(g.kitchen(), &objects)
            .into_iter()
            .filter(|a| *a != Action::Null)
            .filter(|a| {
                let feasible: Vec<bool> = scenarios.iter().map(|(_, s)| is_feasible(s, a)).collect();
                assert!(feasible.iter().all(|f| *f == feasible[0]), "feasibility differs across scenarios for {a}");
                feasible[0]
            })
            .collect()
    }

    /// Q-value of `a` (weighted sum, not normalized).
    pub fn q(&mut self, scenarios: &[(f64, State)], a: &Action, horizon: usize) -> f64 {
        if *a == Action::Null || horizon == 0 {
            return 0.0;
        }
        let mut reward = 0.0;
        let mut children: BTreeMap<SceneGraph, Vec<(f64, State)>> = BTreeMap::new();
        for (w, s) in scenarios {
            let step = transition(s, a, self.rewards);
            reward += w * step.reward;
            if !step.next_state.is_goal_satisfied() {
                children.entry(step.next_state.graph.visible()).or_default().push((*w, step.next_state));
            }
        }
        reward + children.values().map(|c| self.value(c, horizon - 1)).sum::<f64>()
    }

    /// Optimal value (weighted sum) of `scenarios` with `horizon` steps left.
    pub fn value(&mut self, scenarios: &[(f64, State)], horizon: usize) -> f64 {
        let live: Vec<(f64, State)> = scenarios.iter().filter(|(_, s)| !s.is_goal_satisfied()).cloned().collect();
        if horizon == 0 || live.is_empty() {
            return 0.0;
        }
        let mut key: Vec<(u64, State)> = live.iter().map(|(w, s)| (w.to_bits(), s.clone())).collect();
        key.sort();
        if let Some(v) = self.memo.get(&(key.clone(), horizon)) {
            return *v;
        }
        let mut best = 0.0f64;
        for a in Self::candidates(&live) {
            best = best.max(self.q(&live, &a, horizon));
        }
        self.memo.insert((key, horizon), best);
        best
    }
}

/// Weighted scenarios of a belief, normalized to total weight 1.
pub fn scenarios_of(b: &ParticleBelief) -> Vec<(f64, State)> {
    let total = b.total_weight();
    b.particles().iter().map(|p| (p.weight / total, p.state.clone())).collect()
}

/// A random micro-POMDP: at most 4 placeable areas, at most 2 objects, at
/// most 3 particles sharing one visible scene.
pub fn micro_pomdp(rng: &mut ChaCha8Rng) -> ParticleBelief {
    loop {
        let n_areas = rng.gen_range(2..=4usize);
        let closed = rng.gen_range(0..n_areas);
        let kitchen = micro_kitchen(rng, n_areas - closed, closed);
        let open = open_areas(&kitchen);
        let closed = closed_areas(&kitchen);
        let targets = placeable(&kitchen);
        let robot_at = targets.choose(rng).unwrap().clone();
        let n_objects = rng.gen_range(1..=2usize);
        let objects: Vec<String> = (0..n_objects).map(|i| format!("item_{i}")).collect();
        // per object: Some(area) when visible, None when hidden
        let mut visible: Vec<Option<String>> = Vec::new();
        let mut holding = false;
        for _ in &objects {
            let hide = !closed.is_empty() && rng.gen_bool(0.5);
            if hide {
                visible.push(None);
            } else if !holding && rng.gen_bool(0.2) {
                holding = true;
                visible.push(Some(HAND.to_string()));
            } else {
                visible.push(Some(open.choose(rng).unwrap().clone()));
            }
        }
        let n_particles = rng.gen_range(1..=3usize);
        let mut particles = Vec::new();
        for _ in 0..n_particles {
            let mut g = SceneGraph::new(kitchen.clone(), &robot_at).unwrap();
            for (o, v) in objects.iter().zip(&visible) {
                let at = v.clone().unwrap_or_else(|| closed.choose(rng).unwrap().clone());
                g = g.with_object(o, &at).unwrap();
            }
            let mut chosen = objects.clone();
            chosen.shuffle(rng);
            chosen.truncate(rng.gen_range(1..=objects.len()));
            let pairs: Vec<GoalPair> = chosen.iter().map(|o| GoalPair::new(o, targets.choose(rng).unwrap())).collect();
            let goal = PlacementGoal::new(pairs).unwrap();
            let state = State::new(g, goal).unwrap();
            particles.push(Particle { state, weight: rng.gen_range(0.1..1.0) });
        }
        let b = ParticleBelief::normalized_from(particles);
        if b.particles().iter().any(|p| !p.state.is_goal_satisfied()) {
            return b;
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted hypothesis generator.

/// Answers every goal query with `goals` and location queries from
/// `locations`, counting calls.
pub struct Scripted {
    pub goals: Vec<RawGoal>,
    pub locations: BTreeMap<String, Vec<RawLocation>>,
    usage: Mutex<GeneratorUsage>,
}

impl Scripted {
    pub fn new(goals: Vec<(Vec<(&str, &str)>, f64)>, locations: Vec<(&str, Vec<(&str, f64)>)>) -> Self {
        Scripted {
            goals: goals
                .into_iter()
                .map(|(pairs, p)| RawGoal {
                    pairs: pairs.iter().map(|(o, t)| (o.to_string(), t.to_string())).collect(),
                    probability: p,
                })
                .collect(),
            locations: locations
                .into_iter()
                .map(|(o, locs)| {
                    (o.to_string(), locs.iter().map(|(a, p)| RawLocation { area: a.to_string(), probability: *p }).collect())
                })
                .collect(),
            usage: Mutex::new(GeneratorUsage::default()),
        }
    }
}

impl HypothesisGenerator for Scripted {
    fn name(&self) -> &str {
        "scripted"
    }

    fn propose_goals(&self, _q: &GoalQuery<'_>) -> Result<Vec<RawGoal>, GeneratorError> {
        self.usage.lock().unwrap().query_count += 1;
        Ok(self.goals.clone())
    }

    fn propose_locations(&self, q: &LocationQuery<'_>) -> Result<Vec<RawLocation>, GeneratorError> {
        self.usage.lock().unwrap().query_count += 1;
        Ok(self.locations.get(q.object.as_str()).cloned().unwrap_or_default())
    }

    fn usage(&self) -> GeneratorUsage {
        *self.usage.lock().unwrap()
    }
}

/// The scene of the textual-observation example: the one-wall kitchen with
/// four cabinets opened and eleven visible objects, two of them handed over.
pub fn example_scene() -> SceneGraph {
    let mut g = SceneGraph::new(Kitchen::builtin("one_wall").unwrap(), "Prep_Surface").unwrap();
    for area in ["Snack_Pantry_Cabinet", "Appliance_Cabinet", "Beverage_Storage_Cabinet", "Utility_Cabinet"] {
        if g.is_open(area) == Some(false) {
            g = g.set_area_open(area).unwrap();
        }
    }
    for (object, area) in [
        ("decorative_vase", "Display_Surface"),
        ("egg_timer", "Coffee_Tea_Surface"),
        ("gluten_free_cereal", "Human_Hand"),
        ("granola_bar", "Pantry_Shelf"),
        ("oatmeal", "Human_Hand"),
        ("regular_cereal", "Snack_Pantry_Cabinet"),
        ("rice_jar", "Pantry_Shelf"),
        ("rolling_pin", "Display_Surface"),
        ("wheat_bread", "Snack_Pantry_Cabinet"),
        ("wine_glass", "Beverage_Storage_Cabinet"),
        ("wine_opener", "Beverage_Storage_Cabinet"),
    ] {
        g = g.with_object(object, area).unwrap();
    }
    g
}

pub const EXAMPLE_BLOCK: &str = "Current Observation:
The closed areas are: Dishware_Cabinet, Cutlery_Drawer, Cleaning_Supply_Cabinet, Cookware_Cabinet, Bakeware_Cabinet, DishWasher_Inner_Space, Fridge_Cooler_Layer, Fridge_Freezer_Layer, Microwave_Inner_Space, Oven_Inner_Space,
The open areas are: Human_Hand, Prep_Surface, Coffee_Tea_Surface, Snack_Pantry_Cabinet, Appliance_Surface, Cookbook_Shelf, Pantry_Shelf, Spice_Shelf, Appliance_Cabinet, Drop_Zone_Surface, Beverage_Storage_Cabinet, Display_Surface, Utility_Cabinet,
The observed objects and their initial areas are: decorative_vase is in Display_Surface, egg_timer is in Coffee_Tea_Surface, gluten_free_cereal is in Human_Hand, granola_bar is in Pantry_Shelf, oatmeal is in Human_Hand, regular_cereal is in Snack_Pantry_Cabinet, rice_jar is in Pantry_Shelf, rolling_pin is in Display_Surface, wheat_bread is in Snack_Pantry_Cabinet, wine_glass is in Beverage_Storage_Cabinet, wine_opener is in Beverage_Storage_Cabinet,

The wrong goal states are:
1. gluten_free_cereal in Human_Hand.
2. regular_cereal in Snack_Pantry_Cabinet, gluten_free_cereal in Human_Hand.
3. oatmeal in Human_Hand.
4. gluten_free_cereal in Human_Hand, oatmeal in Human_Hand.

Objects already in target areas: gluten_free_cereal, oatmeal,
";

pub fn example_wrong_goals() -> Vec<PlacementGoal> {
    [
        vec![("gluten_free_cereal", "Human_Hand")],
        vec![("regular_cereal", "Snack_Pantry_Cabinet"), ("gluten_free_cereal", "Human_Hand")],
        vec![("oatmeal", "Human_Hand")],
        vec![("gluten_free_cereal", "Human_Hand"), ("oatmeal", "Human_Hand")],
    ]
    .into_iter()
    .map(|pairs| PlacementGoal::from_pairs(pairs).unwrap())
    .collect()
}

pub const EXAMPLE_TASK: &str = include_str!("../data/example_task.json");

// ---------------------------------------------------------------------------
// Enumeration Bayes filter.

/// A micro-world for filtering: hidden objects in closed areas, a known goal,
/// a random prior over every hidden placement, and the true hypothesis.
pub struct FilterWorld {
    pub hypotheses: Vec<(f64, State)>,
    pub truth: State,
    pub objects: Vec<String>,
}

/// At most 3 closed areas and at most 2 hidden objects; one or two open
/// surfaces and optionally one visible object.
pub fn filter_world(rng: &mut ChaCha8Rng) -> FilterWorld {
    loop {
        let n_closed = rng.gen_range(1..=3usize);
        let n_open = rng.gen_range(1..=2usize);
        let kitchen = micro_kitchen(rng, n_open, n_closed);
        let open = open_areas(&kitchen);
        let closed = closed_areas(&kitchen);
        let targets = placeable(&kitchen);
        let robot_at = targets.choose(rng).unwrap().clone();
        let n_hidden = rng.gen_range(1..=2usize);
        let hidden: Vec<String> = (0..n_hidden).map(|i| format!("hidden_{i}")).collect();
        let mut base = SceneGraph::new(kitchen.clone(), &robot_at).unwrap();
        let mut objects = hidden.clone();
        if rng.gen_bool(0.5) {
            base = base.with_object("visible_0", open.choose(rng).unwrap()).unwrap();
            objects.push("visible_0".into());
        }
        let mut chosen = objects.clone();
        chosen.shuffle(rng);
        chosen.truncate(rng.gen_range(1..=objects.len().min(2)));
        let goal = PlacementGoal::new(chosen.iter().map(|o| GoalPair::new(o, targets.choose(rng).unwrap())).collect())
            .unwrap();
        let mut hypotheses = Vec::new();
        let combos = closed.len().pow(n_hidden as u32);
        for mut code in 0..combos {
            let mut g = base.clone();
            for o in &hidden {
                g = g.with_object(o, &closed[code % closed.len()]).unwrap();
                code /= closed.len();
            }
            hypotheses.push((rng.gen_range(0.05..1.0), State::new(g, goal.clone()).unwrap()));
        }
        let live: Vec<usize> = (0..hypotheses.len()).filter(|&i| !hypotheses[i].1.is_goal_satisfied()).collect();
        if let Some(&i) = live.choose(rng) {
            let truth = hypotheses[i].1.clone();
            return FilterWorld { hypotheses, truth, objects };
        }
    }
}

/// Exact posterior over current states given the executed actions and the
/// observations `z_1..z_t` (each a visible projection with a not-done
/// signal): prior mass of every consistent hypothesis, pushed forward.
pub fn enumeration_posterior(world: &FilterWorld, actions: &[Action], rewards: &RewardConfig) -> BTreeMap<State, f64> {
    let mut truth = world.truth.clone();
    let mut observed = vec![truth.graph.visible()];
    for a in actions {
        truth = transition(&truth, a, rewards).next_state;
        observed.push(truth.graph.visible());
    }
    let mut post: BTreeMap<State, f64> = BTreeMap::new();
    'hyp: for (w, h) in &world.hypotheses {
        let mut s = h.clone();
        if s.graph.visible() != observed[0] || s.is_goal_satisfied() {
            continue;
        }
        for (a, z) in actions.iter().zip(&observed[1..]) {
            s = transition(&s, a, rewards).next_state;
            if s.graph.visible() != *z || s.is_goal_satisfied() {
                continue 'hyp;
            }
        }
        *post.entry(s).or_insert(0.0) += w;
    }
    let total: f64 = post.values().sum();
    post.values_mut().for_each(|v| *v /= total);
    post
}

/// A random action sequence of up to `len` steps that never completes the
/// true goal; about two thirds of the steps are feasible in the true state.
pub fn random_trace(world: &FilterWorld, len: usize, rng: &mut ChaCha8Rng, rewards: &RewardConfig) -> Vec<Action> {
    let mut s = world.truth.clone();
    let mut trace = Vec::new();
    let all = grounded_actions(s.graph.kitchen(), &world.objects);
    for _ in 0..len {
        let feasible: Vec<&Action> = all.iter().filter(|a| is_feasible(&s, a)).collect();
        let pool: Vec<&Action> = if rng.gen_bool(0.67) { feasible } else { all.iter().collect() };
        let options: Vec<&Action> =
            pool.into_iter().filter(|a| !transition(&s, a, rewards).next_state.is_goal_satisfied()).collect();
        let Some(a) = options.choose(rng) else {
            break;
        };
        s = transition(&s, a, rewards).next_state;
        trace.push((*a).clone());
    }
    trace
}
