//! Action schemas: static parameter typing, dynamic preconditions, and
//! deterministic effects.
//!
//! Static typing failures are reported as `InvalidAction` (they depend only
//! on object affordances, never on the current state), while dynamic
//! precondition failures are `PreconditionFailed`.

use std::fmt;
use std::str::FromStr;

use super::scene::{SceneGraph, StateSet};
use super::vocab::{ActionName, GroundedAction, Param, Relation, StateSym};
use super::World;
use crate::error::Error;

/// Static object affordances declared in the world file.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Prop {
    Landmark,
    Movable,
    Pushable,
    Surface,
    Container,
    Climbable,
    Uneven,
    Adhesive,
    Cleaner,
    StickTarget,
    NeedsUp,
    Robot,
}

impl Prop {
    pub const ALL: [Prop; 12] = [
        Prop::Landmark,
        Prop::Movable,
        Prop::Pushable,
        Prop::Surface,
        Prop::Container,
        Prop::Climbable,
        Prop::Uneven,
        Prop::Adhesive,
        Prop::Cleaner,
        Prop::StickTarget,
        Prop::NeedsUp,
        Prop::Robot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Prop::Landmark => "landmark",
            Prop::Movable => "movable",
            Prop::Pushable => "pushable",
            Prop::Surface => "surface",
            Prop::Container => "container",
            Prop::Climbable => "climbable",
            Prop::Uneven => "uneven",
            Prop::Adhesive => "adhesive",
            Prop::Cleaner => "cleaner",
            Prop::StickTarget => "sticktarget",
            Prop::NeedsUp => "needs_up",
            Prop::Robot => "robot",
        }
    }

    fn bit(self) -> u16 {
        1 << Prop::ALL.iter().position(|p| *p == self).unwrap()
    }
}

impl FromStr for Prop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Prop::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownSymbol {
                kind: "property",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Debug)]
pub struct PropSet(u16);

impl PropSet {
    pub fn has(self, p: Prop) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn insert(&mut self, p: Prop) {
        self.0 |= p.bit();
    }
}

/// Static requirement on an object parameter.
#[derive(Clone, PartialEq, Debug)]
pub enum ObjectReq {
    Any,
    /// At least one of the listed affordances.
    AnyOf(Vec<Prop>),
    /// None of the listed affordances.
    NoneOf(Vec<Prop>),
    /// The object possesses the exclusive pair containing this state.
    HasPair(StateSym),
}

#[derive(Clone, PartialEq, Debug)]
pub enum ParamKind {
    None,
    Object(ObjectReq),
    /// A state from one of the first parameter's switchable pairs.
    State,
}

impl ParamKind {
    pub fn label(&self) -> &'static str {
        match self {
            ParamKind::None => "none",
            ParamKind::Object(_) => "object",
            ParamKind::State => "state",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Pred {
    RobotDown,
    RobotUp,
    HandsFree,
    HoldingP1,
    HoldingProp(Prop),
    NearP1,
    NearP2,
    RobotAwayFromP1,
    ZonesDiffer,
    P1NotHeld,
    P2NotHeld,
    /// Not stuck, not inside a closed container, nothing resting on it.
    P1Accessible,
    /// Held by the robot, or accessible while the robot's hands are free.
    P1Takeable,
    P1Clear,
    /// `p2` can receive `p1`: not held, not stacked above `p1`, not uneven,
    /// open if it is a switchable container.
    P2Receives,
    P1LacksParamState,
    /// Objects flagged `needs_up` require the robot to be up; others down.
    ReachP1,
    P1Has(StateSym),
    P2Has(StateSym),
    RobotOnP1,
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Effect {
    MoveRobotToP1,
    GrabP1,
    DropP1,
    PlaceP1OnP2,
    PushP1ToP2,
    ClimbOntoP1,
    ClimbDown,
    SetParamState,
    SetP1(StateSym),
    SetP2(StateSym),
    StickP1ToP2,
}

fn split_arg(s: &str) -> (&str, Option<&str>) {
    match s.split_once(':') {
        Some((a, b)) => (a, Some(b)),
        None => (s, None),
    }
}

impl FromStr for Pred {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (head, arg) = split_arg(s);
        let state = || -> Result<StateSym, Error> {
            arg.ok_or_else(|| Error::World(format!("predicate `{s}` needs a state argument")))?
                .parse()
        };
        Ok(match head {
            "robot_down" => Pred::RobotDown,
            "robot_up" => Pred::RobotUp,
            "hands_free" => Pred::HandsFree,
            "holding_p1" => Pred::HoldingP1,
            "holding_prop" => Pred::HoldingProp(
                arg.ok_or_else(|| Error::World(format!("predicate `{s}` needs a property")))?
                    .parse()?,
            ),
            "near_p1" => Pred::NearP1,
            "near_p2" => Pred::NearP2,
            "robot_away_from_p1" => Pred::RobotAwayFromP1,
            "zones_differ" => Pred::ZonesDiffer,
            "p1_not_held" => Pred::P1NotHeld,
            "p2_not_held" => Pred::P2NotHeld,
            "p1_accessible" => Pred::P1Accessible,
            "p1_takeable" => Pred::P1Takeable,
            "p1_clear" => Pred::P1Clear,
            "p2_receives" => Pred::P2Receives,
            "p1_lacks_param_state" => Pred::P1LacksParamState,
            "reach_p1" => Pred::ReachP1,
            "p1_has" => Pred::P1Has(state()?),
            "p2_has" => Pred::P2Has(state()?),
            "robot_on_p1" => Pred::RobotOnP1,
            _ => {
                return Err(Error::UnknownSymbol {
                    kind: "predicate",
                    name: s.to_string(),
                })
            }
        })
    }
}

impl FromStr for Effect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (head, arg) = split_arg(s);
        let state = || -> Result<StateSym, Error> {
            arg.ok_or_else(|| Error::World(format!("effect `{s}` needs a state argument")))?
                .parse()
        };
        Ok(match head {
            "move_robot_to_p1" => Effect::MoveRobotToP1,
            "grab_p1" => Effect::GrabP1,
            "drop_p1" => Effect::DropP1,
            "place_p1_on_p2" => Effect::PlaceP1OnP2,
            "push_p1_to_p2" => Effect::PushP1ToP2,
            "climb_onto_p1" => Effect::ClimbOntoP1,
            "climb_down" => Effect::ClimbDown,
            "set_param_state" => Effect::SetParamState,
            "set_p1" => Effect::SetP1(state()?),
            "set_p2" => Effect::SetP2(state()?),
            "stick_p1_to_p2" => Effect::StickP1ToP2,
            _ => {
                return Err(Error::UnknownSymbol {
                    kind: "effect",
                    name: s.to_string(),
                })
            }
        })
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct ActionSchema {
    pub name: ActionName,
    pub param1: ObjectReq,
    pub param2: ParamKind,
    pub distinct: bool,
    pub preconditions: Vec<Pred>,
    pub effects: Vec<Effect>,
}

impl ActionSchema {
    pub fn arity(&self) -> usize {
        match self.param2 {
            ParamKind::None => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for ActionSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} arity={} param2={} pre={} eff={}",
            self.name,
            self.arity(),
            self.param2.label(),
            self.preconditions.len(),
            self.effects.len()
        )
    }
}

/// Parameters of one action resolved to object ids in a particular world.
pub(crate) struct Bound {
    pub p1: u16,
    pub p2: Option<u16>,
    pub state: Option<StateSym>,
}

impl World {
    /// Static validity: arity, parameter kinds, and affordances. Depends only
    /// on the world definition.
    pub(crate) fn bind(&self, action: &GroundedAction) -> Option<(&ActionSchema, Bound)> {
        let schema = self.schema(action.name)?;
        let p1 = self.object_id(action.param1)?;
        if !self.meets(p1, &schema.param1) {
            return None;
        }
        let bound = match (&schema.param2, action.param2) {
            (ParamKind::None, Param::None) => Bound {
                p1,
                p2: None,
                state: None,
            },
            (ParamKind::Object(req), Param::Object(o)) => {
                let p2 = self.object_id(o)?;
                if !self.meets(p2, req) || (schema.distinct && p1 == p2) {
                    return None;
                }
                Bound {
                    p1,
                    p2: Some(p2),
                    state: None,
                }
            }
            (ParamKind::State, Param::State(s)) => {
                if !self.def(p1).switchable.has_pair(s) {
                    return None;
                }
                Bound {
                    p1,
                    p2: None,
                    state: Some(s),
                }
            }
            _ => return None,
        };
        Some((schema, bound))
    }

    fn meets(&self, id: u16, req: &ObjectReq) -> bool {
        let def = self.def(id);
        match req {
            ObjectReq::Any => true,
            ObjectReq::AnyOf(props) => props.iter().any(|p| def.props.has(*p)),
            ObjectReq::NoneOf(props) => !props.iter().any(|p| def.props.has(*p)),
            ObjectReq::HasPair(s) => def.initial_states.has_pair(*s),
        }
    }

    fn effective_zone(&self, state: &SceneGraph, id: u16) -> super::ZoneId {
        let z = state.obj(id).zone;
        if z == self.everywhere_zone() {
            state.robot.zone
        } else {
            z
        }
    }

    fn robot_up(&self, state: &SceneGraph) -> bool {
        state
            .obj(self.robot_id())
            .states
            .contains(StateSym::named("Up"))
    }

    fn in_closed_container(&self, state: &SceneGraph, id: u16) -> bool {
        match state.support_of(id) {
            Some((r, c)) if r == Relation::INSIDE => {
                state.obj(c).states.contains(StateSym::named("Close"))
            }
            _ => false,
        }
    }

    pub(crate) fn check(&self, pred: Pred, state: &SceneGraph, b: &Bound) -> bool {
        let held = state.robot.held;
        let p2 = || b.p2.expect("schema has an object second parameter");
        match pred {
            Pred::RobotDown => !self.robot_up(state),
            Pred::RobotUp => self.robot_up(state),
            Pred::HandsFree => held.is_none(),
            Pred::HoldingP1 => held == Some(b.p1),
            Pred::HoldingProp(p) => held.is_some_and(|h| self.def(h).props.has(p)),
            Pred::NearP1 => self.effective_zone(state, b.p1) == state.robot.zone,
            Pred::NearP2 => self.effective_zone(state, p2()) == state.robot.zone,
            Pred::RobotAwayFromP1 => state.obj(b.p1).zone != state.robot.zone,
            Pred::ZonesDiffer => state.obj(b.p1).zone != state.obj(p2()).zone,
            Pred::P1NotHeld => held != Some(b.p1),
            Pred::P2NotHeld => held != Some(p2()),
            Pred::P1Accessible => {
                !matches!(state.support_of(b.p1), Some((Relation::STUCK, _)))
                    && !self.in_closed_container(state, b.p1)
                    && state.supported_by(b.p1).next().is_none()
            }
            Pred::P1Takeable => {
                held == Some(b.p1)
                    || (held.is_none()
                        && self.check(Pred::P1Accessible, state, b)
                        && self.effective_zone(state, b.p1) == state.robot.zone)
            }
            Pred::P1Clear => state.supported_by(b.p1).next().is_none(),
            Pred::P2Receives => {
                let target = p2();
                if held == Some(target) || state.stacked_on(b.p1).contains(&target) {
                    return false;
                }
                let tdef = self.def(target);
                if tdef.props.has(super::Prop::Uneven) {
                    return false;
                }
                if tdef.props.has(super::Prop::Container) {
                    let close = StateSym::named("Close");
                    if state.obj(target).states.contains(close) {
                        return false;
                    }
                }
                true
            }
            Pred::P1LacksParamState => {
                let s = b.state.expect("state parameter");
                !state.obj(b.p1).states.contains(s)
            }
            Pred::ReachP1 => self.def(b.p1).props.has(super::Prop::NeedsUp) == self.robot_up(state),
            Pred::P1Has(s) => state.obj(b.p1).states.contains(s),
            Pred::P2Has(s) => state.obj(p2()).states.contains(s),
            Pred::RobotOnP1 => state.has_relation(self.robot_id(), Relation::ON, b.p1),
        }
    }

    fn set_zone_with_load(&self, state: &mut SceneGraph, id: u16, zone: super::ZoneId) {
        let mut moved = state.stacked_on(id);
        moved.push(id);
        for m in moved {
            if state.robot.held != Some(m) {
                state.obj_mut(m).zone = zone;
            }
        }
    }

    fn release(&self, state: &mut SceneGraph, id: u16) {
        if state.robot.held == Some(id) {
            state.robot.held = None;
        }
        let st = &mut state.obj_mut(id).states;
        if st.has_pair(StateSym::named("Free")) {
            st.set(StateSym::named("Free"));
        }
    }

    pub(crate) fn apply(&self, effect: Effect, state: &mut SceneGraph, b: &Bound) {
        let p2 = || b.p2.expect("schema has an object second parameter");
        match effect {
            Effect::MoveRobotToP1 => {
                state.robot.zone = self.effective_zone(state, b.p1);
            }
            Effect::GrabP1 => {
                state.detach(b.p1);
                state.robot.held = Some(b.p1);
                let held_zone = self.held_zone();
                let o = state.obj_mut(b.p1);
                o.zone = held_zone;
                o.states.set(StateSym::named("Grabbed"));
            }
            Effect::DropP1 => {
                self.release(state, b.p1);
                state.detach(b.p1);
                let floor = self.floor_id();
                state.relations.insert((b.p1, Relation::ON, floor));
                let zone = state.robot.zone;
                self.set_zone_with_load(state, b.p1, zone);
            }
            Effect::PlaceP1OnP2 => {
                let target = p2();
                self.release(state, b.p1);
                state.detach(b.p1);
                let rel = if self.def(target).props.has(super::Prop::Container) {
                    Relation::INSIDE
                } else {
                    Relation::ON
                };
                state.relations.insert((b.p1, rel, target));
                let zone = self.effective_zone(state, target);
                self.set_zone_with_load(state, b.p1, zone);
                state.robot.zone = zone;
            }
            Effect::PushP1ToP2 => {
                let zone = self.effective_zone(state, p2());
                self.set_zone_with_load(state, b.p1, zone);
                state.robot.zone = zone;
            }
            Effect::ClimbOntoP1 => {
                let robot = self.robot_id();
                state.relations.insert((robot, Relation::ON, b.p1));
                state.obj_mut(robot).states.set(StateSym::named("Up"));
            }
            Effect::ClimbDown => {
                let robot = self.robot_id();
                state.detach(robot);
                state.obj_mut(robot).states.set(StateSym::named("Down"));
            }
            Effect::SetParamState => {
                let s = b.state.expect("state parameter");
                state.obj_mut(b.p1).states.set(s);
            }
            Effect::SetP1(s) => state.obj_mut(b.p1).states.set(s),
            Effect::SetP2(s) => state.obj_mut(p2()).states.set(s),
            Effect::StickP1ToP2 => {
                let target = p2();
                self.release(state, b.p1);
                state.detach(b.p1);
                state.relations.insert((b.p1, Relation::STUCK, target));
                let zone = self.effective_zone(state, target);
                self.set_zone_with_load(state, b.p1, zone);
            }
        }
    }
}

/// States an object may carry, as the union of both members of every pair
/// it starts with.
pub fn possible_states(initial: StateSet) -> StateSet {
    initial.iter().flat_map(|s| [s, s.partner()]).collect()
}
