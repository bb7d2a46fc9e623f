//! Deterministic symbolic household world.
//!
//! A [`World`] is an immutable definition loaded from an `m3-world v1` file:
//! zones, objects with affordances and initial states, action schemas, and
//! the per-action constraint rules used to judge task success. Transitions
//! are pure functions of `(state, action)`.

mod file;
mod scene;
mod schema;
pub mod vocab;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

pub use scene::{ObjectEntry, RelationTriple, Robot, SceneGraph, StateKey, StateSet, ZoneId};
pub use schema::{ActionSchema, Effect, ObjectReq, ParamKind, Pred, Prop, PropSet};
pub use vocab::{ActionName, GroundedAction, ObjectName, Param, Relation, StateSym};

use crate::error::{Error, Result};

pub const DESK_WORLD: &str = include_str!("../../data/desk.world");
pub const FULL_WORLD: &str = include_str!("../../data/full.world");

pub const HELD_ZONE: &str = "held-by-robot";
pub const EVERYWHERE_ZONE: &str = "everywhere";

#[derive(Clone, Debug)]
pub struct ObjectDef {
    pub id: u16,
    pub name: ObjectName,
    pub props: PropSet,
    /// Pairs that `changeState` may toggle.
    pub switchable: StateSet,
    pub initial_states: StateSet,
    pub initial_zone: ZoneId,
}

/// Which parameter (or fixed object) a constraint rule refers to.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RuleRef {
    P1,
    P2,
    Fixed(ObjectName),
}

/// How one action name turns into a task constraint.
#[derive(Clone, PartialEq, Debug)]
pub struct ConstraintRule {
    pub action: ActionName,
    pub object: RuleRef,
    pub target: Option<RuleRef>,
    pub position: Option<RuleRef>,
    /// A fixed state, or `None` with `state_from_param` for changeState.
    pub state: Option<StateSym>,
    pub state_from_param: bool,
    pub tolerance: f64,
    /// Objects whose earlier constraints this action invalidates.
    pub clears: Vec<ObjectName>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Status {
    Success,
    InvalidAction,
    PreconditionFailed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::InvalidAction => "invalid",
            Status::PreconditionFailed => "precondition",
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub status: Status,
    /// Equals the input state on failure.
    pub next_state: SceneGraph,
}

#[derive(Clone, Debug)]
pub struct World {
    pub name: String,
    zones: Vec<String>,
    objects: Vec<ObjectDef>,
    object_index: HashMap<ObjectName, u16>,
    schemas: Vec<ActionSchema>,
    rules: Vec<ConstraintRule>,
    initial: SceneGraph,
    robot: u16,
    floor: u16,
    held_zone: ZoneId,
    everywhere_zone: ZoneId,
    source_hash: String,
}

impl World {
    pub fn desk() -> World {
        World::parse(DESK_WORLD).expect("bundled desk world parses")
    }

    pub fn full() -> World {
        World::parse(FULL_WORLD).expect("bundled full world parses")
    }

    pub fn zones(&self) -> &[String] {
        &self.zones
    }

    pub fn zone_name(&self, z: ZoneId) -> &str {
        &self.zones[z.0 as usize]
    }

    pub fn zone_id(&self, name: &str) -> Result<ZoneId> {
        self.zones
            .iter()
            .position(|z| z == name)
            .map(|i| ZoneId(i as u8))
            .ok_or_else(|| Error::UnknownSymbol {
                kind: "zone",
                name: name.to_string(),
            })
    }

    pub fn objects(&self) -> &[ObjectDef] {
        &self.objects
    }

    pub fn object_names(&self) -> Vec<ObjectName> {
        self.objects.iter().map(|o| o.name).collect()
    }

    pub fn object_id(&self, name: ObjectName) -> Option<u16> {
        self.object_index.get(&name).copied()
    }

    pub fn def(&self, id: u16) -> &ObjectDef {
        &self.objects[id as usize]
    }

    pub fn schemas(&self) -> &[ActionSchema] {
        &self.schemas
    }

    pub fn schema(&self, name: ActionName) -> Option<&ActionSchema> {
        self.schemas.iter().find(|s| s.name == name)
    }

    pub fn rules(&self) -> &[ConstraintRule] {
        &self.rules
    }

    pub fn rule(&self, name: ActionName) -> Option<&ConstraintRule> {
        self.rules.iter().find(|r| r.action == name)
    }

    pub fn initial_state(&self) -> SceneGraph {
        self.initial.clone()
    }

    pub fn robot_id(&self) -> u16 {
        self.robot
    }

    pub fn robot_name(&self) -> ObjectName {
        self.objects[self.robot as usize].name
    }

    pub fn floor_id(&self) -> u16 {
        self.floor
    }

    pub fn held_zone(&self) -> ZoneId {
        self.held_zone
    }

    pub fn everywhere_zone(&self) -> ZoneId {
        self.everywhere_zone
    }

    /// SHA-256 of the definition text; identifies the world in artifacts.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Every `(name, params)` combination with the schema's arity and
    /// parameter kinds, including semantically invalid ones. Sorted.
    pub fn enumerate_actions(&self) -> Vec<GroundedAction> {
        enumerate(&self.schemas, &self.object_names())
    }

    /// Executes `action` in `state`. Deterministic; failures return the
    /// input state unchanged. A transition that would leave the state
    /// unchanged counts as a failed precondition.
    pub fn step(&self, state: &SceneGraph, action: &GroundedAction) -> StepOutcome {
        let fail = |status| StepOutcome {
            status,
            next_state: state.clone(),
        };
        let Some((schema, bound)) = self.bind(action) else {
            return fail(Status::InvalidAction);
        };
        if !schema
            .preconditions
            .iter()
            .all(|p| self.check(*p, state, &bound))
        {
            return fail(Status::PreconditionFailed);
        }
        let mut next = state.clone();
        next.objects.sort_by_key(|o| o.id);
        for e in &schema.effects {
            self.apply(*e, &mut next, &bound);
        }
        self.normalize(&mut next);
        if self.same_state(&next, state) {
            return fail(Status::PreconditionFailed);
        }
        StepOutcome {
            status: Status::Success,
            next_state: next,
        }
    }

    /// Only checks schema typing, e.g. to tell invalid actions apart.
    pub fn is_schema_valid(&self, action: &GroundedAction) -> bool {
        self.bind(action).is_some()
    }

    fn same_state(&self, a: &SceneGraph, b: &SceneGraph) -> bool {
        if a.robot != b.robot || a.relations != b.relations || a.objects.len() != b.objects.len() {
            return false;
        }
        a.objects.iter().all(|o| b.obj(o.id) == o)
    }

    /// Sorts objects by id, syncs the robot object's zone, and recomputes
    /// the derived Close relation (shared zone).
    pub fn normalize(&self, state: &mut SceneGraph) {
        state.objects.sort_by_key(|o| o.id);
        let robot_zone = state.robot.zone;
        state.obj_mut(self.robot).zone = robot_zone;
        state.relations.retain(|(_, r, _)| *r != Relation::CLOSE);
        let placed: Vec<(u16, ZoneId)> = state
            .objects
            .iter()
            .filter(|o| o.zone != self.held_zone && o.zone != self.everywhere_zone)
            .map(|o| (o.id, o.zone))
            .collect();
        for (a, za) in &placed {
            for (b, zb) in &placed {
                if a != b && za == zb {
                    state.relations.insert((*a, Relation::CLOSE, *b));
                }
            }
        }
    }

    pub fn canonical_state_id(&self, state: &SceneGraph) -> StateKey {
        StateKey::of_text(&state.canonical_text(self))
    }

    /// Checks every scene-graph invariant; returns the first violation.
    pub fn validate(&self, state: &SceneGraph) -> std::result::Result<(), String> {
        let ids: BTreeSet<u16> = state.objects.iter().map(|o| o.id).collect();
        if ids.len() != self.objects.len() || state.objects.len() != self.objects.len() {
            return Err("object set does not match the world".into());
        }
        for o in &state.objects {
            let def = self.objects.get(o.id as usize).ok_or("unknown object id")?;
            if def.name != o.name {
                return Err(format!("object id {} has name {}", o.id, o.name));
            }
            if o.zone.0 as usize >= self.zones.len() {
                return Err(format!("{} has undefined zone", o.name));
            }
            for s in o.states.iter() {
                if o.states.contains(s.partner()) {
                    return Err(format!("{} has both {} and {}", o.name, s, s.partner()));
                }
            }
            let possible = schema::possible_states(def.initial_states);
            if o.states.iter().any(|s| !possible.contains(s)) {
                return Err(format!("{} carries a state outside its pairs", o.name));
            }
        }
        for (s, r, o) in &state.relations {
            if !ids.contains(s) || !ids.contains(o) {
                return Err("relation endpoint missing".into());
            }
            if s == o {
                return Err("reflexive relation".into());
            }
            if *r == Relation::INSIDE && state.has_relation(*s, Relation::ON, *o) {
                return Err(format!(
                    "{} both inside and on {}",
                    state.obj(*s).name,
                    state.obj(*o).name
                ));
            }
            if *r != Relation::CLOSE {
                let (zs, zo) = (state.obj(*s).zone, state.obj(*o).zone);
                if zo != self.everywhere_zone && zs != zo {
                    return Err(format!(
                        "{} rests on {} in another zone",
                        state.obj(*s).name,
                        state.obj(*o).name
                    ));
                }
            }
            if *r == Relation::CLOSE {
                let (zs, zo) = (state.obj(*s).zone, state.obj(*o).zone);
                if zs != zo || zs == self.held_zone || zs == self.everywhere_zone {
                    return Err("close relation without shared zone".into());
                }
            }
        }
        let supports = state
            .relations
            .iter()
            .filter(|(_, r, _)| *r != Relation::CLOSE)
            .fold(HashMap::new(), |mut m: HashMap<u16, usize>, (s, _, _)| {
                *m.entry(*s).or_default() += 1;
                m
            });
        if supports.values().any(|n| *n > 1) {
            return Err("object with more than one support".into());
        }
        if state.obj(self.robot).zone != state.robot.zone {
            return Err("robot object zone out of sync".into());
        }
        let grabbed = StateSym::named("Grabbed");
        for o in &state.objects {
            let is_held = state.robot.held == Some(o.id);
            if o.states.contains(grabbed) != is_held {
                return Err(format!("{} grabbed flag disagrees with robot", o.name));
            }
            if is_held {
                if o.zone != self.held_zone {
                    return Err(format!("held {} not in held zone", o.name));
                }
                if state.support_of(o.id).is_some() {
                    return Err(format!("held {} still supported", o.name));
                }
            } else if o.zone == self.held_zone {
                return Err(format!("{} in held zone but not held", o.name));
            }
        }
        Ok(())
    }
}

/// Cross product of schemas and object/state vocabularies, sorted.
pub fn enumerate(schemas: &[ActionSchema], objects: &[ObjectName]) -> Vec<GroundedAction> {
    let mut out = Vec::new();
    for schema in schemas {
        for &o1 in objects {
            match schema.param2 {
                ParamKind::None => out.push(GroundedAction::unary(schema.name, o1)),
                ParamKind::Object(_) => out.extend(objects.iter().map(|&o2| GroundedAction {
                    name: schema.name,
                    param1: o1,
                    param2: Param::Object(o2),
                })),
                ParamKind::State => out.extend(StateSym::all().map(|s| GroundedAction {
                    name: schema.name,
                    param1: o1,
                    param2: Param::State(s),
                })),
            }
        }
    }
    out.sort();
    out
}

/// Immutable snapshots addressed by canonical state key. Hash collisions
/// are resolved by comparing stored canonical text.
#[derive(Default, Debug, Clone)]
pub struct SnapshotStore {
    entries: HashMap<StateKey, (String, Arc<SceneGraph>)>,
}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&mut self, world: &World, state: &SceneGraph) -> StateKey {
        let text = state.canonical_text(world);
        let mut key = StateKey::of_text(&text);
        let mut salt = 0u32;
        loop {
            match self.entries.get(&key) {
                None => {
                    let mut stored = state.clone();
                    stored.objects.sort_by_key(|o| o.id);
                    self.entries.insert(key, (text, Arc::new(stored)));
                    return key;
                }
                Some((existing, _)) if *existing == text => return key,
                Some(_) => {
                    salt += 1;
                    key = StateKey::of_text(&format!("{text}#{salt}"));
                }
            }
        }
    }

    pub fn restore(&self, key: &StateKey) -> Result<SceneGraph> {
        self.entries
            .get(key)
            .map(|(_, s)| (**s).clone())
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    /// Inserts a state under a key recorded earlier, e.g. when loading an
    /// artifact. Fails if the key already holds different text.
    pub fn insert_keyed(&mut self, world: &World, key: StateKey, state: SceneGraph) -> Result<()> {
        let text = state.canonical_text(world);
        if let Some((existing, _)) = self.entries.get(&key) {
            if *existing != text {
                return Err(Error::Parse(format!(
                    "state key {key} reused for a different state"
                )));
            }
            return Ok(());
        }
        let mut stored = state;
        stored.objects.sort_by_key(|o| o.id);
        self.entries.insert(key, (text, Arc::new(stored)));
        Ok(())
    }

    /// Canonical text stored under `key`.
    pub fn text(&self, key: &StateKey) -> Result<&str> {
        self.entries
            .get(key)
            .map(|(t, _)| t.as_str())
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    /// Shared handle to the stored state.
    pub fn get(&self, key: &StateKey) -> Result<Arc<SceneGraph>> {
        self.entries
            .get(key)
            .map(|(_, s)| Arc::clone(s))
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    pub fn contains(&self, key: &StateKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One world instance with a current state, as used by planning episodes.
#[derive(Clone, Debug)]
pub struct Env {
    world: Arc<World>,
    state: SceneGraph,
}

impl Env {
    pub fn new(world: Arc<World>, state: SceneGraph) -> Self {
        Env { world, state }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn state(&self) -> &SceneGraph {
        &self.state
    }

    pub fn step(&mut self, action: &GroundedAction) -> Status {
        let out = self.world.step(&self.state, action);
        if out.status == Status::Success {
            self.state = out.next_state;
        }
        out.status
    }
}

#[cfg(test)]
mod tests;
