//! Task documents and observation text.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use serde_json::{json, Value};

use rearrange_core::environment::{generate_task, load_task, load_task_with, Difficulty, EnvError};
use rearrange_core::hypotheses::{normalize_whitespace, textualize, ROBOT_HAND_TEXT};
use rearrange_core::{Kitchen, NodeId, Observation};

use common::*;

fn example_doc() -> Value {
    serde_json::from_str(EXAMPLE_TASK).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn generated_tasks_round_trip(k in 0usize..5, d in 0usize..3, seed in 0u64..10_000) {
        let kitchen = Kitchen::builtin_ids().nth(k).unwrap();
        let task = generate_task(kitchen, Difficulty::ALL[d], seed).unwrap();
        let text = task.to_json();
        let back = load_task(&text).unwrap();
        prop_assert_eq!(&back, &task);
        prop_assert_eq!(back.to_json_value(), task.to_json_value());
        prop_assert_eq!(back.kitchen_id(), kitchen);
        prop_assert!(back.initial_graph().unwrap().validate().is_ok());
    }
}

#[test]
fn example_document_is_reproduced_exactly() {
    let task = load_task(EXAMPLE_TASK).unwrap();
    assert_eq!(task.to_json_value(), example_doc());
    assert_eq!(load_task(&task.to_json()).unwrap(), task);
    assert_eq!(task.goal_set.len(), example_doc()["task"]["goal_set"].as_array().unwrap().len());
}

#[test]
fn malformed_documents_name_the_offending_field() {
    let mut doc = example_doc();
    doc["placement"][1]["area"] = json!(7);
    match load_task(&doc.to_string()) {
        Err(EnvError::Schema { path, .. }) => assert_eq!(path, "placement[1].area"),
        other => panic!("{other:?}"),
    }

    let mut doc = example_doc();
    doc["task"]["goal_set"] = json!([]);
    assert!(matches!(load_task(&doc.to_string()), Err(EnvError::Schema { path, .. }) if path == "task.goal_set"));

    let mut doc = example_doc();
    doc["placement"][0]["area"] = json!("Moon_Base");
    assert_eq!(load_task(&doc.to_string()), Err(EnvError::UnknownArea("Moon_Base".into())));

    assert!(matches!(load_task("{"), Err(EnvError::Schema { .. })));
    assert!(matches!(load_task_with(EXAMPLE_TASK, Some("no_such_layout")), Err(EnvError::UnknownKitchen(_))));
}

#[test]
fn observation_text_lists_visible_content_only() {
    let task = generate_task("galley", Difficulty::Hard, 11).unwrap();
    let graph = task.initial_graph().unwrap();
    let z = Observation::new(&graph);
    let text = textualize(&z, &[], &Default::default());
    for (object, area) in graph.objects() {
        let shown = text.contains(object.as_str());
        assert_eq!(shown, graph.is_open(area.as_str()) == Some(true), "{object} in {area}");
    }
    // whitespace normalization is idempotent
    let once = normalize_whitespace(&text);
    assert_eq!(normalize_whitespace(&once), once);
}

#[test]
fn wrong_goals_and_satisfied_objects_are_listed() {
    let z = Observation::new(&example_scene());
    let bare = textualize(&z, &[], &Default::default());
    assert!(bare.contains("The wrong goal states are:"));
    assert!(!bare.contains("1. "));

    let satisfied: BTreeSet<NodeId> = [NodeId::new("oatmeal")].into_iter().collect();
    let text = textualize(&z, &example_wrong_goals(), &satisfied);
    for (i, goal) in example_wrong_goals().iter().enumerate() {
        let line = format!("{}. ", i + 1);
        assert!(text.contains(&line), "{line}");
        for pair in goal.pairs() {
            assert!(text.contains(&format!("{} in {}", pair.object, pair.target)));
        }
    }
    let tail = text.split("Objects already in target areas:").nth(1).unwrap();
    assert!(tail.contains("oatmeal") && !tail.contains("gluten_free_cereal"));
    assert!(!ROBOT_HAND_TEXT.is_empty());
}
