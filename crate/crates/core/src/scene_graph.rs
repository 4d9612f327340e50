//! Symbolic kitchen world model.
//!
//! A [`SceneGraph`] is a value: the room is implicit, areas come from a shared
//! [`Kitchen`] layout (kind and position are fixed for an episode), objects hang
//! off areas through a single containment edge, and the robot is "in front of"
//! one area at a time. Mutations return new graphs.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pomdp::RewardConfig;

/// Human-readable node name, e.g. `Fridge_Cooler_Layer` or `gluten_free_flour_15`.
#[derive(Clone, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(Arc<str>);

impl PartialEq for NodeId {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0 == other.0
    }
}

impl std::hash::Hash for NodeId {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.hash(state);
    }
}

impl NodeId {
    pub fn new(name: impl AsRef<str>) -> Self {
        NodeId(Arc::from(name.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Same allocation (implies equal names).
    pub(crate) fn ptr_eq(&self, other: &NodeId) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

impl std::borrow::Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// Index of an area inside its [`Kitchen`].
pub type AreaIx = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaKind {
    FurnitureInnerSpace,
    Cabinet,
    Drawer,
    Surface,
    Shelf,
    HumanHand,
    RobotHand,
}

impl AreaKind {
    /// Surfaces, shelves and both hands can never be closed.
    pub fn always_open(self) -> bool {
        matches!(
            self,
            AreaKind::Surface | AreaKind::Shelf | AreaKind::HumanHand | AreaKind::RobotHand
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaNode {
    #[serde(rename = "name")]
    pub id: NodeId,
    pub kind: AreaKind,
    /// Initial open flag from the layout file.
    pub open: bool,
    /// Scene-local coordinate in meters.
    pub position: [f64; 2],
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("unknown area `{0}`")]
    UnknownArea(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("area `{0}` is already open")]
    AlreadyOpen(String),
    #[error("object `{0}` already exists in the scene")]
    DuplicateObject(String),
    #[error("robot hand already holds `{0}`")]
    HandOccupied(String),
    #[error("unknown kitchen `{0}`")]
    UnknownKitchen(String),
    #[error("invalid kitchen layout: {0}")]
    Layout(String),
    #[error("scene graph invariant violated: {0}")]
    Invariant(String),
}

#[derive(Deserialize)]
struct KitchenFile {
    id: String,
    name: String,
    area: Vec<AreaNode>,
}

/// Static description of one kitchen: the area list in declaration order.
#[derive(Debug)]
pub struct Kitchen {
    pub id: String,
    pub name: String,
    areas: Vec<AreaNode>,
    index: HashMap<NodeId, AreaIx>,
    robot_hand: AreaIx,
    human_hand: Option<AreaIx>,
}

const BUILTIN_KITCHENS: [(&str, &str); 5] = [
    ("one_wall", include_str!("../data/kitchens/one_wall.toml")),
    ("one_wall_island", include_str!("../data/kitchens/one_wall_island.toml")),
    ("l_shaped", include_str!("../data/kitchens/l_shaped.toml")),
    ("l_shaped_island", include_str!("../data/kitchens/l_shaped_island.toml")),
    ("galley", include_str!("../data/kitchens/galley.toml")),
];

impl Kitchen {
    pub fn from_toml(text: &str) -> Result<Kitchen, SceneError> {
        let file: KitchenFile =
            toml::from_str(text).map_err(|e| SceneError::Layout(e.to_string()))?;
        Kitchen::new(file.id, file.name, file.area)
    }

    pub fn new(id: String, name: String, areas: Vec<AreaNode>) -> Result<Kitchen, SceneError> {
        let mut index = HashMap::with_capacity(areas.len());
        let mut robot_hand = None;
        let mut human_hand = None;
        for (ix, area) in areas.iter().enumerate() {
            if index.insert(area.id.clone(), ix).is_some() {
                return Err(SceneError::Layout(format!("duplicate area `{}`", area.id)));
            }
            if area.kind.always_open() && !area.open {
                return Err(SceneError::Layout(format!(
                    "area `{}` of kind {:?} must be open",
                    area.id, area.kind
                )));
            }
            match area.kind {
                AreaKind::RobotHand if robot_hand.replace(ix).is_some() => {
                    return Err(SceneError::Layout("more than one robot-hand area".into()))
                }
                AreaKind::HumanHand => human_hand = Some(ix),
                _ => {}
            }
        }
        let robot_hand =
            robot_hand.ok_or_else(|| SceneError::Layout("missing robot-hand area".into()))?;
        Ok(Kitchen { id, name, areas, index, robot_hand, human_hand })
    }

    /// One of the shipped layouts: `one_wall`, `one_wall_island`, `l_shaped`,
    /// `l_shaped_island`, `galley`.
    pub fn builtin(id: &str) -> Result<Arc<Kitchen>, SceneError> {
        let (_, text) = BUILTIN_KITCHENS
            .iter()
            .find(|(k, _)| *k == id)
            .ok_or_else(|| SceneError::UnknownKitchen(id.to_string()))?;
        Kitchen::from_toml(text).map(Arc::new)
    }

    pub fn builtin_ids() -> impl Iterator<Item = &'static str> {
        BUILTIN_KITCHENS.iter().map(|(k, _)| *k)
    }

    pub fn areas(&self) -> &[AreaNode] {
        &self.areas
    }

    pub fn area(&self, ix: AreaIx) -> &AreaNode {
        &self.areas[ix]
    }

    pub fn area_index(&self, name: &str) -> Option<AreaIx> {
        self.index.get(name).copied()
    }

    /// Like [`Kitchen::area_index`], cheap when `id` shares the layout's
    /// allocation.
    pub(crate) fn index_of(&self, id: &NodeId) -> Option<AreaIx> {
        self.areas.iter().position(|a| a.id.ptr_eq(id)).or_else(|| self.area_index(id.as_str()))
    }

    /// The layout's own copy of an area name.
    pub(crate) fn canonical_area(&self, id: &NodeId) -> Option<&NodeId> {
        self.area_index(id.as_str()).map(|ix| &self.areas[ix].id)
    }

    pub fn robot_hand(&self) -> AreaIx {
        self.robot_hand
    }

    pub fn human_hand(&self) -> Option<AreaIx> {
        self.human_hand
    }

    /// Areas that can hold placed objects (everything except the robot hand).
    pub fn placeable_areas(&self) -> impl Iterator<Item = AreaIx> + '_ {
        (0..self.areas.len()).filter(move |&ix| ix != self.robot_hand)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct ObjectNode {
    id: NodeId,
    parent: AreaIx,
}

/// The world state substrate: open flags, object containment, robot pose.
#[derive(Clone)]
pub struct SceneGraph {
    kitchen: Arc<Kitchen>,
    open: Vec<bool>,
    /// Sorted by object id.
    objects: Vec<ObjectNode>,
    robot_at: AreaIx,
    held: Option<NodeId>,
    /// Area the held object was picked from.
    held_origin: Option<AreaIx>,
}

/// Field tuple used for equality, ordering and hashing of scene graphs.
type GraphKey<'a> = (&'a str, &'a [bool], &'a [ObjectNode], AreaIx, Option<&'a NodeId>, Option<AreaIx>);

impl SceneGraph {
    /// Empty scene with the layout's initial open flags.
    pub fn new(kitchen: Arc<Kitchen>, robot_at: &str) -> Result<SceneGraph, SceneError> {
        let robot_at = kitchen
            .area_index(robot_at)
            .ok_or_else(|| SceneError::UnknownArea(robot_at.to_string()))?;
        let open = kitchen.areas.iter().map(|a| a.open).collect();
        Ok(SceneGraph { kitchen, open, objects: Vec::new(), robot_at, held: None, held_origin: None })
    }

    pub fn kitchen(&self) -> &Arc<Kitchen> {
        &self.kitchen
    }

    pub fn robot_at(&self) -> &NodeId {
        &self.kitchen.areas[self.robot_at].id
    }

    pub fn robot_at_ix(&self) -> AreaIx {
        self.robot_at
    }

    pub fn held_object(&self) -> Option<&NodeId> {
        self.held.as_ref()
    }

    /// Area the held object came from, if it was picked inside this scene.
    pub fn held_origin(&self) -> Option<&NodeId> {
        self.held_origin.map(|ix| &self.kitchen.areas[ix].id)
    }

    pub(crate) fn held_origin_ix(&self) -> Option<AreaIx> {
        self.held_origin
    }

    pub fn is_open(&self, area: &str) -> Option<bool> {
        self.kitchen.area_index(area).map(|ix| self.open[ix])
    }

    pub(crate) fn is_open_ix(&self, ix: AreaIx) -> bool {
        self.open[ix]
    }

    pub fn objects(&self) -> impl Iterator<Item = (&NodeId, &NodeId)> + '_ {
        self.objects.iter().map(|o| (&o.id, &self.kitchen.areas[o.parent].id))
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn contains_object(&self, object: &str) -> bool {
        self.find(object).is_ok()
    }

    pub fn object_parent(&self, object: &str) -> Option<&NodeId> {
        self.parent_ix(object).map(|ix| &self.kitchen.areas[ix].id)
    }

    pub(crate) fn parent_ix(&self, object: &str) -> Option<AreaIx> {
        self.find(object).ok().map(|i| self.objects[i].parent)
    }

    /// Like [`SceneGraph::parent_ix`], cheap when `id` shares the graph's
    /// allocation.
    pub(crate) fn parent_of(&self, id: &NodeId) -> Option<AreaIx> {
        match self.objects.iter().find(|o| o.id.ptr_eq(id)) {
            Some(o) => Some(o.parent),
            None => self.parent_ix(id.as_str()),
        }
    }

    /// The graph's own copy of an object name.
    pub(crate) fn canonical_object(&self, id: &NodeId) -> Option<&NodeId> {
        self.find(id.as_str()).ok().map(|i| &self.objects[i].id)
    }

    pub fn objects_in(&self, area: &str) -> Vec<&NodeId> {
        match self.kitchen.area_index(area) {
            Some(ix) => self.objects.iter().filter(|o| o.parent == ix).map(|o| &o.id).collect(),
            None => Vec::new(),
        }
    }

    fn find(&self, object: &str) -> Result<usize, usize> {
        self.objects.binary_search_by(|o| o.id.as_str().cmp(object))
    }

    fn area_ix(&self, area: &str) -> Result<AreaIx, SceneError> {
        self.kitchen
            .area_index(area)
            .ok_or_else(|| SceneError::UnknownArea(area.to_string()))
    }

    /// Adds a new object under `area`. Placing into the robot hand makes it the
    /// held object (with no recorded origin).
    pub fn with_object(&self, object: &str, area: &str) -> Result<SceneGraph, SceneError> {
        let parent = self.area_ix(area)?;
        let mut next = self.clone();
        next.insert_object_ix(NodeId::new(object), parent)?;
        Ok(next)
    }

    pub(crate) fn insert_object_ix(&mut self, id: NodeId, parent: AreaIx) -> Result<(), SceneError> {
        let pos = match self.find(id.as_str()) {
            Ok(_) => return Err(SceneError::DuplicateObject(id.to_string())),
            Err(pos) => pos,
        };
        if parent == self.kitchen.robot_hand {
            if let Some(h) = &self.held {
                return Err(SceneError::HandOccupied(h.to_string()));
            }
            self.held = Some(id.clone());
            self.held_origin = None;
        }
        self.objects.insert(pos, ObjectNode { id, parent });
        Ok(())
    }

    pub fn set_robot_at(&self, area: &str) -> Result<SceneGraph, SceneError> {
        let ix = self.area_ix(area)?;
        let mut next = self.clone();
        next.robot_at = ix;
        Ok(next)
    }

    pub(crate) fn set_robot_at_ix(&mut self, ix: AreaIx) {
        self.robot_at = ix;
    }

    /// Copy with every object inside a closed area removed.
    pub fn visible(&self) -> SceneGraph {
        let mut next = self.clone();
        next.objects.retain(|o| self.open[o.parent]);
        next
    }

    /// `self.visible() == *projected` without building the projection.
    pub fn visible_matches(&self, projected: &SceneGraph) -> bool {
        if self.robot_at != projected.robot_at
            || self.held_origin != projected.held_origin
            || self.held != projected.held
            || self.open != projected.open
            || !(Arc::ptr_eq(&self.kitchen, &projected.kitchen)
                || self.kitchen.id == projected.kitchen.id)
        {
            return false;
        }
        let mut mine = self.objects.iter().filter(|o| self.open[o.parent]);
        let mut theirs = projected.objects.iter();
        loop {
            match (mine.next(), theirs.next()) {
                (None, None) => return true,
                (Some(a), Some(b)) if a == b => {}
                _ => return false,
            }
        }
    }

    /// Whether `visible(self) == self`.
    pub fn is_fully_visible(&self) -> bool {
        self.objects.iter().all(|o| self.open[o.parent])
    }

    pub fn set_area_open(&self, area: &str) -> Result<SceneGraph, SceneError> {
        let ix = self.area_ix(area)?;
        let mut next = self.clone();
        next.open_ix(ix)?;
        Ok(next)
    }

    pub(crate) fn open_ix(&mut self, ix: AreaIx) -> Result<(), SceneError> {
        if self.open[ix] {
            return Err(SceneError::AlreadyOpen(self.kitchen.areas[ix].id.to_string()));
        }
        self.open[ix] = true;
        Ok(())
    }

    /// Re-parents `object` under `dest`, keeping the held-object bookkeeping in
    /// sync when either end is the robot hand.
    pub fn move_object(&self, object: &str, dest: &str) -> Result<SceneGraph, SceneError> {
        let dest = self.area_ix(dest)?;
        let mut next = self.clone();
        next.move_object_ix(object, dest)?;
        Ok(next)
    }

    pub(crate) fn move_object_ix(&mut self, object: &str, dest: AreaIx) -> Result<(), SceneError> {
        let i = self.find(object).map_err(|_| SceneError::UnknownObject(object.to_string()))?;
        let hand = self.kitchen.robot_hand;
        let from = self.objects[i].parent;
        if from == dest {
            return Ok(());
        }
        if dest == hand {
            if let Some(h) = &self.held {
                return Err(SceneError::HandOccupied(h.to_string()));
            }
            self.held = Some(self.objects[i].id.clone());
            self.held_origin = Some(from);
        } else if from == hand {
            self.held = None;
            self.held_origin = None;
        }
        self.objects[i].parent = dest;
        Ok(())
    }

    /// Navigation cost between two areas: scaled Euclidean distance, rounded and
    /// clamped to `[0, nav_max]`.
    pub fn move_cost(&self, from: &str, to: &str, cfg: &RewardConfig) -> Result<f64, SceneError> {
        let a = self.area_ix(from)?;
        let b = self.area_ix(to)?;
        Ok(self.move_cost_ix(a, b, cfg))
    }

    pub(crate) fn move_cost_ix(&self, from: AreaIx, to: AreaIx, cfg: &RewardConfig) -> f64 {
        if from == to {
            return 0.0;
        }
        let [x0, y0] = self.kitchen.areas[from].position;
        let [x1, y1] = self.kitchen.areas[to].position;
        let d = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        (cfg.nav_scale * d).round().clamp(0.0, cfg.nav_max)
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<(), SceneError> {
        let n = self.kitchen.areas.len();
        let bad = |m: String| Err(SceneError::Invariant(m));
        if self.open.len() != n {
            return bad("open flag count differs from area count".into());
        }
        if self.robot_at >= n {
            return bad("robot_at out of range".into());
        }
        for (ix, a) in self.kitchen.areas.iter().enumerate() {
            if a.kind.always_open() && !self.open[ix] {
                return bad(format!("always-open area `{}` is closed", a.id));
            }
        }
        for w in self.objects.windows(2) {
            if w[0].id >= w[1].id {
                return bad("objects not strictly sorted".into());
            }
        }
        let hand = self.kitchen.robot_hand;
        let in_hand: Vec<_> = self.objects.iter().filter(|o| o.parent == hand).collect();
        if self.objects.iter().any(|o| o.parent >= n) {
            return bad("object parent out of range".into());
        }
        match (&self.held, in_hand.as_slice()) {
            (None, []) => {}
            (Some(h), [o]) if &o.id == h => {}
            _ => return bad("held_object does not match robot-hand contents".into()),
        }
        if self.held.is_none() && self.held_origin.is_some() {
            return bad("held origin recorded without a held object".into());
        }
        Ok(())
    }

    /// Canonical sorted text form used for golden tests and dumps.
    pub fn canonical_text(&self) -> String {
        self.to_string()
    }

    fn key(&self) -> GraphKey<'_> {
        (
            self.kitchen.id.as_str(),
            &self.open,
            &self.objects,
            self.robot_at,
            self.held.as_ref(),
            self.held_origin,
        )
    }
}

impl PartialEq for SceneGraph {
    fn eq(&self, other: &Self) -> bool {
        self.robot_at == other.robot_at
            && self.held_origin == other.held_origin
            && self.open == other.open
            && self.objects == other.objects
            && self.held == other.held
            && (Arc::ptr_eq(&self.kitchen, &other.kitchen) || self.kitchen.id == other.kitchen.id)
    }
}

impl Eq for SceneGraph {}

impl Hash for SceneGraph {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state)
    }
}

impl PartialOrd for SceneGraph {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SceneGraph {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Debug for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let areas = &self.kitchen.areas;
        writeln!(f, "kitchen {}", self.kitchen.id)?;
        writeln!(f, "robot_at {}", areas[self.robot_at].id)?;
        match (&self.held, self.held_origin) {
            (Some(h), Some(o)) => writeln!(f, "held {h} from {}", areas[o].id)?,
            (Some(h), None) => writeln!(f, "held {h}")?,
            _ => writeln!(f, "held -")?,
        }
        for (ix, a) in areas.iter().enumerate() {
            let flag = if self.open[ix] { "open" } else { "closed" };
            writeln!(f, "area {} {flag}", a.id)?;
        }
        for o in &self.objects {
            writeln!(f, "object {} {}", o.id, areas[o.parent].id)?;
        }
        Ok(())
    }
}
