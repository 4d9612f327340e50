//! Belief-space task planning for open-ended object rearrangement.
//!
//! The crate is organised bottom-up:
//!
//! * [`scene_graph`] - symbolic kitchen world model and visibility projection.
//! * [`pomdp`] - states, actions, deterministic transitions, rewards.
//! * [`belief`] - weighted particle beliefs, elimination filtering and
//!   supplementation with freshly generated hypotheses.
//! * [`hypotheses`] - goal/placement hypothesis trees from a pluggable generator
//!   (deterministic mock or chat-completion LLM).
//! * [`planner`] - scenario-based belief-tree search with rollout lower bounds.
//! * [`environment`] - kitchens, tasks, ground-truth episodes and metrics.

pub mod belief;
pub mod environment;
pub mod hypotheses;
pub mod planner;
pub mod pomdp;
pub mod scene_graph;

pub use pomdp::{Action, Observation, PlacementGoal, RewardConfig, State};
pub use scene_graph::{Kitchen, NodeId, SceneGraph};
