//! Human-readable reports for run artifacts.

use std::fmt::Write;
use std::path::Path;

use serde_json::Value;

use rearrange_core::environment::{load_task, EpisodeMetrics, StepRecord, TaskSpec};
use rearrange_core::hypotheses::HypothesisTree;
use rearrange_core::pomdp::goal_satisfied;

use crate::CliError;

pub fn report(path: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let unknown = || CliError::UnknownArtifact(path.display().to_string());
    if text.contains("# belief particles=") {
        return Ok(belief_report(&text));
    }
    if let Ok(doc) = serde_json::from_str::<Value>(&text) {
        if doc.get("placement").is_some() {
            let task = load_task(&text).map_err(|e| CliError::Config(e.to_string()))?;
            return Ok(task_report(&task));
        }
        if doc.get("per_step").is_some() {
            let m: EpisodeMetrics = serde_json::from_value(doc).map_err(|_| unknown())?;
            return Ok(metrics_report(&m));
        }
        if let Some(tree) = doc.get("tree") {
            let tree: HypothesisTree = serde_json::from_value(tree.clone()).map_err(|_| unknown())?;
            return Ok(tree_report(&tree));
        }
        return Err(unknown());
    }
    // a steps.jsonl log
    let steps: Result<Vec<StepRecord>, _> =
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str::<StepRecord>).collect();
    match steps {
        Ok(steps) if !steps.is_empty() => Ok(bound_trace(&steps)),
        _ => Err(unknown()),
    }
}

fn belief_report(text: &str) -> String {
    let mut rows: Vec<(f64, String)> = Vec::new();
    let mut weight = None;
    for line in text.lines() {
        if let Some(w) = line.strip_prefix("## particle ").and_then(|r| r.split("weight=").nth(1)) {
            weight = w.trim().parse::<f64>().ok();
        } else if let (Some(goal), Some(w)) = (line.strip_prefix("goal: "), weight.take()) {
            rows.push((w, goal.to_string()));
        }
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut out = String::new();
    let total: f64 = rows.iter().map(|r| r.0).sum();
    let _ = writeln!(out, "belief: {} particles, total weight {total:.12}", rows.len());
    let _ = writeln!(out, "{:>4}  {:>14}  goal", "rank", "weight");
    for (i, (w, goal)) in rows.iter().enumerate() {
        let _ = writeln!(out, "{:>4}  {w:>14.12}  {goal}", i + 1);
    }
    out
}

fn task_report(task: &TaskSpec) -> String {
    let mut out = String::new();
    let difficulty = task.difficulty.map_or("unspecified".to_string(), |d| d.to_string());
    let _ = writeln!(out, "task: {}", task.instruction);
    let _ = writeln!(
        out,
        "kitchen {} ({} areas), difficulty {difficulty}, step limit {}, {} objects",
        task.kitchen_id(),
        task.kitchen.areas().len(),
        task.step_limit(),
        task.placements.len() + usize::from(task.object_in_hand.is_some()),
    );
    let graph = task.initial_graph().ok();
    let hand = task.kitchen.robot_hand();
    let known = |o: &str| task.placements.iter().any(|(_, p)| p.as_str() == o) || task.object_in_hand.as_ref().is_some_and(|h| h.as_str() == o);
    let mut any = false;
    for (i, goal) in task.goal_set.iter().enumerate() {
        let mut problems = Vec::new();
        for p in goal.pairs() {
            if !known(p.object.as_str()) {
                problems.push(format!("{} is not in the scene", p.object));
            }
            if task.kitchen.area_index(p.target.as_str()) == Some(hand) {
                problems.push(format!("{} is not a placeable area", p.target));
            }
        }
        let already = graph.as_ref().is_some_and(|g| goal_satisfied(g, goal));
        any |= problems.is_empty();
        let verdict = if problems.is_empty() { "achievable".to_string() } else { format!("unachievable: {}", problems.join("; ")) };
        let suffix = if already { ", already satisfied" } else { "" };
        let _ = writeln!(out, "goal {}: {goal} ({} pairs) {verdict}{suffix}", i + 1, goal.len());
    }
    let _ = writeln!(out, "achievability: {}", if any { "ok" } else { "no achievable goal" });
    out
}

fn tree_report(tree: &HypothesisTree) -> String {
    let shape = tree.shape();
    let mut out = String::new();
    let _ = writeln!(out, "hypothesis tree: C1 = {}, C2 = {}, C3 = {}", shape.c1, shape.c2, shape.c3);
    for c in &tree.goal_candidates {
        let _ = writeln!(out, "  goal {:.4}  {}", c.confidence, c.goal);
    }
    for (object, locations) in &tree.locations {
        let list: Vec<String> = locations.iter().map(|l| format!("{} {:.4}", l.area, l.confidence)).collect();
        let _ = writeln!(out, "  {object}: {}", list.join(", "));
    }
    out
}

fn metrics_report(m: &EpisodeMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "episode in {}: {} after {} of {} steps, reward {:.2}, planning {:.2}s, {} tokens, initial belief {}",
        m.kitchen,
        if m.success { "success" } else { "failure" },
        m.steps_taken,
        m.step_limit,
        m.cumulative_reward,
        m.planning_time,
        m.generator_usage.total_tokens(),
        m.initial_belief_size,
    );
    if let Some(reason) = &m.failure {
        let _ = writeln!(out, "failure: {reason}");
    }
    out.push_str(&bound_trace(&m.per_step));
    out
}

fn bound_trace(steps: &[StepRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4}  {:<48} {:>9} {:>12} {:>12} {:>10} {:>8}",
        "step", "action", "reward", "root_lower", "root_upper", "expansions", "belief"
    );
    for s in steps {
        let (lower, upper, expansions) = s.plan.as_ref().map_or((f64::NAN, f64::NAN, 0), |p| (p.root_lower, p.root_upper, p.expansions));
        let _ = writeln!(
            out,
            "{:>4}  {:<48} {:>9.2} {lower:>12.3} {upper:>12.3} {expansions:>10} {:>8}",
            s.step,
            s.action.to_string(),
            s.reward,
            s.belief_size
        );
    }
    out
}
