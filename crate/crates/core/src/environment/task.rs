use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::hypotheses::MockTruth;
use crate::pomdp::{GoalPair, PlacementGoal};
use crate::scene_graph::{AreaKind, Kitchen, NodeId, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn step_limit(self) -> usize {
        match self {
            Difficulty::Easy => 25,
            Difficulty::Medium => 30,
            Difficulty::Hard => 35,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Difficulty {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(EnvError::InvalidDifficulty(other.to_string())),
        }
    }
}

// Wire format of a task file.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskDocument {
    placement: Vec<PlacementEntry>,
    robot: RobotEntry,
    task: TaskEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kitchen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlacementEntry {
    area: String,
    placed_object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotEntry {
    name: String,
    location: String,
    object_in_hand: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    instruction: String,
    goal_set: Vec<Vec<GoalEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoalEntry {
    target_area: String,
    placed_object: String,
}

/// A rearrangement task: initial placements, robot pose and the set of
/// placement goals any one of which fulfils the instruction.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub instruction: String,
    /// (area, object) in file order.
    pub placements: Vec<(NodeId, NodeId)>,
    pub robot_name: String,
    pub robot_location: NodeId,
    pub object_in_hand: Option<NodeId>,
    pub goal_set: Vec<PlacementGoal>,
    pub difficulty: Option<Difficulty>,
    pub kitchen: Arc<Kitchen>,
    kitchen_declared: bool,
}

impl PartialEq for TaskSpec {
    fn eq(&self, other: &Self) -> bool {
        self.kitchen.id == other.kitchen.id
            && self.kitchen_declared == other.kitchen_declared
            && self.instruction == other.instruction
            && self.placements == other.placements
            && self.robot_name == other.robot_name
            && self.robot_location == other.robot_location
            && self.object_in_hand == other.object_in_hand
            && self.goal_set == other.goal_set
            && self.difficulty == other.difficulty
    }
}

fn schema(path: &str, message: impl Into<String>) -> EnvError {
    EnvError::Schema { path: path.to_string(), message: message.into() }
}

impl TaskSpec {
    /// Builds and validates a task in the given kitchen.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kitchen: Arc<Kitchen>,
        instruction: String,
        placements: Vec<(NodeId, NodeId)>,
        robot_location: NodeId,
        object_in_hand: Option<NodeId>,
        goal_set: Vec<PlacementGoal>,
        difficulty: Option<Difficulty>,
    ) -> Result<TaskSpec, EnvError> {
        let task = TaskSpec {
            instruction,
            placements,
            robot_name: "robot".into(),
            robot_location,
            object_in_hand,
            goal_set,
            difficulty,
            kitchen,
            kitchen_declared: true,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.goal_set.is_empty() {
            return Err(schema("task.goal_set", "goal_set must contain at least one goal"));
        }
        self.initial_graph()?;
        let hand = self.kitchen.robot_hand();
        let known: HashSet<&NodeId> =
            self.placements.iter().map(|(_, o)| o).chain(self.object_in_hand.as_ref()).collect();
        let mut achievable = false;
        for (i, goal) in self.goal_set.iter().enumerate() {
            if goal.is_empty() {
                return Err(schema(&format!("task.goal_set[{i}]"), "goal must contain at least one pair"));
            }
            let mut ok = true;
            for p in goal.pairs() {
                match self.kitchen.area_index(p.target.as_str()) {
                    None => return Err(EnvError::UnknownArea(p.target.to_string())),
                    Some(ix) if ix == hand => ok = false,
                    Some(_) => {}
                }
                ok &= known.contains(&p.object);
            }
            achievable |= ok;
        }
        if !achievable {
            return Err(EnvError::Invalid("no goal in goal_set is achievable".into()));
        }
        Ok(())
    }

    /// Ground-truth scene at the start of the episode.
    pub fn initial_graph(&self) -> Result<SceneGraph, EnvError> {
        let hand = self.kitchen.robot_hand();
        if self.kitchen.area_index(self.robot_location.as_str()) == Some(hand) {
            return Err(schema("robot.location", "robot cannot stand in its own hand"));
        }
        let mut g = SceneGraph::new(self.kitchen.clone(), self.robot_location.as_str()).map_err(scene_err)?;
        for (area, object) in &self.placements {
            if self.kitchen.area_index(area.as_str()) == Some(hand) {
                return Err(schema("placement", format!("`{object}` is placed in the robot hand; use robot.object_in_hand")));
            }
            g = g.with_object(object.as_str(), area.as_str()).map_err(scene_err)?;
        }
        if let Some(held) = &self.object_in_hand {
            let hand_name = self.kitchen.area(hand).id.clone();
            g = g.with_object(held.as_str(), hand_name.as_str()).map_err(scene_err)?;
        }
        Ok(g)
    }

    pub fn kitchen_id(&self) -> &str {
        &self.kitchen.id
    }

    pub fn step_limit(&self) -> usize {
        self.difficulty.map_or(30, Difficulty::step_limit)
    }

    /// Every object mentioned by some goal.
    pub fn goal_objects(&self) -> BTreeSet<NodeId> {
        self.goal_set.iter().flat_map(|g| g.pairs().iter().map(|p| p.object.clone())).collect()
    }

    /// Truth for the mock generator: the first goal and every placement.
    pub fn mock_truth(&self) -> MockTruth {
        let hand = self.kitchen.area(self.kitchen.robot_hand()).id.clone();
        MockTruth {
            goal: self.goal_set[0].clone(),
            placements: self
                .placements
                .iter()
                .map(|(a, o)| (o.clone(), a.clone()))
                .chain(self.object_in_hand.iter().map(|o| (o.clone(), hand.clone())))
                .collect(),
        }
    }

    fn to_document(&self) -> TaskDocument {
        TaskDocument {
            placement: self
                .placements
                .iter()
                .map(|(a, o)| PlacementEntry { area: a.to_string(), placed_object: o.to_string() })
                .collect(),
            robot: RobotEntry {
                name: self.robot_name.clone(),
                location: self.robot_location.to_string(),
                object_in_hand: self.object_in_hand.as_ref().map(NodeId::to_string).unwrap_or_default(),
            },
            task: TaskEntry {
                instruction: self.instruction.clone(),
                goal_set: self
                    .goal_set
                    .iter()
                    .map(|g| {
                        g.pairs()
                            .iter()
                            .map(|p| GoalEntry { target_area: p.target.to_string(), placed_object: p.object.to_string() })
                            .collect()
                    })
                    .collect(),
            },
            kitchen: self.kitchen_declared.then(|| self.kitchen.id.clone()),
            difficulty: self.difficulty,
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self.to_document()).expect("task document serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("task document serializes")
    }
}

fn scene_err(e: crate::scene_graph::SceneError) -> EnvError {
    use crate::scene_graph::SceneError;
    match e {
        SceneError::UnknownArea(a) => EnvError::UnknownArea(a),
        SceneError::UnknownKitchen(k) => EnvError::UnknownKitchen(k),
        other => EnvError::Invalid(other.to_string()),
    }
}

/// Parses a task document. The kitchen comes from the optional `kitchen` key
/// or, failing that, is the first built-in layout containing every area the
/// task mentions.
pub fn load_task(document: &str) -> Result<TaskSpec, EnvError> {
    load_task_with(document, None)
}

/// Like [`load_task`], with an explicit kitchen overriding the document.
pub fn load_task_with(document: &str, kitchen: Option<&str>) -> Result<TaskSpec, EnvError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let doc: TaskDocument = serde_path_to_error::deserialize(de)
        .map_err(|e| schema(&e.path().to_string(), e.inner().to_string()))?;
    if doc.task.goal_set.is_empty() {
        return Err(schema("task.goal_set", "goal_set must contain at least one goal"));
    }
    let mut areas: Vec<&str> = doc.placement.iter().map(|p| p.area.as_str()).collect();
    areas.push(doc.robot.location.as_str());
    areas.extend(doc.task.goal_set.iter().flatten().map(|g| g.target_area.as_str()));
    let declared = kitchen.map(str::to_owned).or_else(|| doc.kitchen.clone());
    let kitchen = match &declared {
        Some(id) => Kitchen::builtin(id).map_err(scene_err)?,
        None => infer_kitchen(&areas)?,
    };
    let mut goal_set = Vec::with_capacity(doc.task.goal_set.len());
    for (i, goal) in doc.task.goal_set.iter().enumerate() {
        let pairs = goal.iter().map(|e| GoalPair::new(&e.placed_object, &e.target_area)).collect();
        goal_set.push(PlacementGoal::new(pairs).map_err(|e| schema(&format!("task.goal_set[{i}]"), e.to_string()))?);
    }
    let held = doc.robot.object_in_hand.trim();
    let task = TaskSpec {
        instruction: doc.task.instruction,
        placements: doc.placement.iter().map(|p| (NodeId::new(&p.area), NodeId::new(&p.placed_object))).collect(),
        robot_name: doc.robot.name,
        robot_location: NodeId::new(&doc.robot.location),
        object_in_hand: (!held.is_empty()).then(|| NodeId::new(held)),
        goal_set,
        difficulty: doc.difficulty,
        kitchen,
        kitchen_declared: doc.kitchen.is_some(),
    };
    task.validate()?;
    Ok(task)
}

fn infer_kitchen(areas: &[&str]) -> Result<Arc<Kitchen>, EnvError> {
    let layouts: Vec<Arc<Kitchen>> =
        Kitchen::builtin_ids().map(|id| Kitchen::builtin(id).expect("built-in layout")).collect();
    if let Some(missing) = areas.iter().find(|a| layouts.iter().all(|k| k.area_index(a).is_none())) {
        return Err(EnvError::UnknownArea(missing.to_string()));
    }
    let mut fitting = layouts.into_iter().filter(|k| areas.iter().all(|a| k.area_index(a).is_some()));
    let first = fitting
        .next()
        .ok_or_else(|| EnvError::Invalid("no single kitchen layout contains every referenced area".into()))?;
    if let Some(other) = fitting.next() {
        warn!("task fits several layouts ({}, {}, ...); using {}", first.id, other.id, first.id);
    }
    Ok(first)
}

const OBJECT_NAMES: &[&str] = &[
    "apple", "banana", "orange", "lemon", "avocado", "bread_loaf", "bagel", "croissant", "cereal_box", "oatmeal_jar",
    "gluten_free_flour", "sugar_jar", "honey_jar", "olive_oil", "soy_sauce", "ketchup", "mustard", "mayonnaise",
    "milk_carton", "oat_milk", "yogurt_cup", "butter_dish", "cheese_block", "egg_carton", "ice_cream_tub",
    "frozen_peas", "leftover_container", "lunchbox", "water_bottle", "coffee_mug", "tea_kettle", "coffee_beans",
    "tea_bags", "wine_glass", "wine_opener", "dinner_plate", "salad_bowl", "cereal_bowl", "serving_spoon",
    "soup_ladle", "spatula", "whisk", "measuring_cup", "measuring_spoons", "rolling_pin", "baking_sheet",
    "muffin_tin", "cookie_cutter", "mixing_bowl", "cutting_board", "chef_knife", "bread_knife", "potato_peeler",
    "cheese_grater", "can_opener", "frying_pan", "sauce_pan", "stock_pot", "rice_cooker", "blender", "toaster",
    "egg_timer", "oven_mitt", "dish_towel", "dish_soap", "sponge", "paper_towels", "trash_bags", "spice_jar",
    "pepper_grinder", "salt_shaker", "cookbook", "recipe_cards", "fruit_basket", "decorative_vase",
    "scented_candle", "napkin_holder", "placemat", "thermos", "storage_container",
];

/// Closed-area share of target-object initial placements.
pub const HIDE_FRACTION: f64 = 0.5;
/// Objects per generated scene.
pub const OBJECTS_PER_TASK: usize = 20;

fn humanize(object: &NodeId) -> String {
    let base = object.as_str().trim_end_matches(|c: char| c.is_ascii_digit() || c == '_');
    base.replace('_', " ")
}

/// Seeded task generator: targets per difficulty (2, 3 or 4 to 8), about half
/// of them hidden in closed areas, distractors up to 20 objects, and a goal
/// set made of the primary goal plus up to three single-target variants.
pub fn generate_task(kitchen_id: &str, difficulty: Difficulty, seed: u64) -> Result<TaskSpec, EnvError> {
    let kitchen = Kitchen::builtin(kitchen_id).map_err(scene_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (difficulty as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ kitchen_id.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b))),
    );
    let n_targets = match difficulty {
        Difficulty::Easy => 2,
        Difficulty::Medium => 3,
        Difficulty::Hard => rng.gen_range(4..=8),
    };
    let hand = kitchen.robot_hand();
    let storage: Vec<usize> = kitchen
        .placeable_areas()
        .filter(|&ix| !matches!(kitchen.area(ix).kind, AreaKind::HumanHand | AreaKind::RobotHand))
        .collect();
    let closed: Vec<usize> = storage.iter().copied().filter(|&ix| !kitchen.area(ix).open).collect();
    let open: Vec<usize> = storage.iter().copied().filter(|&ix| kitchen.area(ix).open).collect();
    let targets_pool: Vec<usize> = kitchen.placeable_areas().collect();

    let mut names: Vec<NodeId> = Vec::with_capacity(OBJECTS_PER_TASK);
    for base in OBJECT_NAMES.choose_multiple(&mut rng, OBJECTS_PER_TASK) {
        names.push(NodeId::new(format!("{base}_{}", rng.gen_range(1..=20))));
    }
    let area_name = |ix: usize| kitchen.area(ix).id.clone();
    let mut placements = Vec::with_capacity(OBJECTS_PER_TASK);
    let mut pairs = Vec::with_capacity(n_targets);
    for (i, object) in names.iter().enumerate() {
        let pool = if i < n_targets {
            if rng.gen_bool(HIDE_FRACTION) && !closed.is_empty() {
                &closed
            } else {
                &open
            }
        } else {
            &storage
        };
        let area = *pool.choose(&mut rng).expect("kitchen has storage areas");
        placements.push((area_name(area), object.clone()));
        if i < n_targets {
            let target = *targets_pool.iter().filter(|&&t| t != area).choose(&mut rng).expect("several areas");
            pairs.push(GoalPair { object: object.clone(), target: area_name(target) });
        }
    }
    let primary = PlacementGoal::new(pairs).map_err(|e| EnvError::Invalid(e.to_string()))?;
    let mut goal_set = vec![primary.clone()];
    let alternatives = rng.gen_range(0..=3);
    for _ in 0..alternatives * 4 {
        if goal_set.len() > alternatives {
            break;
        }
        let mut pairs = primary.pairs().to_vec();
        let i = rng.gen_range(0..pairs.len());
        let initial = &placements[i].0;
        let Some(&t) = targets_pool
            .iter()
            .filter(|&&t| kitchen.area(t).id != pairs[i].target && kitchen.area(t).id != *initial)
            .choose(&mut rng)
        else {
            continue;
        };
        pairs[i].target = area_name(t);
        let goal = PlacementGoal::new(pairs).map_err(|e| EnvError::Invalid(e.to_string()))?;
        if !goal_set.iter().any(|g| g.same_pairs(&goal)) {
            goal_set.push(goal);
        }
    }
    placements.shuffle(&mut rng);
    let robot_at = area_name(*open.choose(&mut rng).expect("kitchen has open areas"));
    debug_assert_ne!(kitchen.area_index(robot_at.as_str()), Some(hand));
    let listed: Vec<String> = primary.pairs().iter().map(|p| humanize(&p.object)).collect();
    let instruction = format!(
        "Please tidy up the kitchen so that the {} end up where they belong.",
        match listed.as_slice() {
            [one] => one.clone(),
            [init @ .., last] => format!("{} and {}", init.join(", "), last),
            [] => unreachable!("goals are non-empty"),
        }
    );
    TaskSpec::new(kitchen, instruction, placements, robot_at, None, goal_set, Some(difficulty))
}
