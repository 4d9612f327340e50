use std::collections::BTreeSet;
use std::fmt::Write;

use crate::pomdp::{Observation, PlacementGoal};
use crate::scene_graph::NodeId;

/// Name used for the robot hand in prompts.
pub const ROBOT_HAND_TEXT: &str = "robot";

/// Renders an observation as the text block given to the hypothesis generator:
/// closed areas, open areas, observed objects, numbered wrong goals, and the
/// objects already confirmed in their target areas.
///
/// Areas follow the kitchen's declaration order (the robot hand is omitted);
/// objects are listed lexicographically.
pub fn textualize(
    z: &Observation,
    failed_goals: &[PlacementGoal],
    satisfied_objects: &BTreeSet<NodeId>,
) -> String {
    let g = z.graph();
    let kitchen = g.kitchen();
    let hand = kitchen.robot_hand();
    let mut closed = String::new();
    let mut open = String::new();
    for (ix, area) in kitchen.areas().iter().enumerate() {
        if ix == hand {
            continue;
        }
        let list = if g.is_open_ix(ix) { &mut open } else { &mut closed };
        let _ = write!(list, "{}, ", area.id);
    }
    let mut objects = String::new();
    for (object, parent) in g.objects() {
        let area = if g.held_object() == Some(object) { ROBOT_HAND_TEXT } else { parent.as_str() };
        let _ = write!(objects, "{object} is in {area}, ");
    }
    let mut out = String::new();
    out.push_str("Current Observation: \n");
    let _ = writeln!(out, "The closed areas are: {closed}");
    let _ = writeln!(out, "The open areas are: {open}");
    let _ = writeln!(out, "The observed objects and their initial areas are: {objects}");
    out.push('\n');
    out.push_str("The wrong goal states are: \n");
    for (i, goal) in failed_goals.iter().enumerate() {
        let _ = writeln!(out, "{}. {goal}.", i + 1);
    }
    out.push('\n');
    out.push_str("Objects already in target areas: ");
    for o in satisfied_objects {
        let _ = write!(out, "{o}, ");
    }
    out.push('\n');
    out
}

/// Collapses runs of whitespace so renderings can be compared loosely.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
