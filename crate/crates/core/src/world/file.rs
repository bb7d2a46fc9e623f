//! Parser for `m3-world v1` definition files.
//!
//! ```text
//! m3-world v1
//! name desk
//! zone near-table
//! object apple zone=near-table props=movable,uneven states=Free on=table
//! schema pick p1=movable p2=none pre=robot_down,hands_free eff=grab_p1
//! rule pick object=p1 state=Grabbed
//! ```
//!
//! Lines starting with `#` are comments. Object ids follow declaration order.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use super::scene::{ObjectEntry, Robot, SceneGraph, StateSet, ZoneId};
use super::schema::{possible_states, ActionSchema, ObjectReq, ParamKind, Prop, PropSet};
use super::vocab::{ActionName, ObjectName, Relation, StateSym};
use super::{ConstraintRule, ObjectDef, RuleRef, World, EVERYWHERE_ZONE, HELD_ZONE};
use crate::error::{Error, Result};

pub const HEADER: &str = "m3-world v1";

fn err(line_no: usize, msg: impl std::fmt::Display) -> Error {
    Error::World(format!("line {line_no}: {msg}"))
}

fn fields<'a>(
    parts: impl Iterator<Item = &'a str>,
    line_no: usize,
) -> Result<HashMap<&'a str, &'a str>> {
    let mut map = HashMap::new();
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected key=value, got `{kv}`")))?;
        if map.insert(k, v).is_some() {
            return Err(err(line_no, format!("duplicate key `{k}`")));
        }
    }
    Ok(map)
}

fn list(v: Option<&&str>) -> Vec<String> {
    v.map(|s| {
        s.split(',')
            .filter(|x| !x.is_empty())
            .map(str::to_string)
            .collect()
    })
    .unwrap_or_default()
}

fn parse_req(s: &str) -> Result<ObjectReq> {
    if s == "any" {
        return Ok(ObjectReq::Any);
    }
    if let Some(state) = s.strip_prefix("pair:") {
        return Ok(ObjectReq::HasPair(state.parse()?));
    }
    if let Some(rest) = s.strip_prefix('!') {
        let props = rest
            .split('|')
            .map(str::parse)
            .collect::<Result<Vec<Prop>>>()?;
        return Ok(ObjectReq::NoneOf(props));
    }
    let props = s
        .split('|')
        .map(str::parse)
        .collect::<Result<Vec<Prop>>>()?;
    Ok(ObjectReq::AnyOf(props))
}

fn parse_ref(s: &str) -> Result<RuleRef> {
    Ok(match s {
        "p1" => RuleRef::P1,
        "p2" => RuleRef::P2,
        other => RuleRef::Fixed(other.parse()?),
    })
}

struct PendingObject {
    line_no: usize,
    def: ObjectDef,
    on: Option<ObjectName>,
    inside: Option<ObjectName>,
}

impl World {
    pub fn parse(text: &str) -> Result<World> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, other)) => {
                return Err(err(n, format!("expected header `{HEADER}`, got `{other}`")))
            }
            None => return Err(Error::World("empty world file".into())),
        }

        let mut name = String::from("unnamed");
        let mut zones: Vec<String> = Vec::new();
        let mut pending: Vec<PendingObject> = Vec::new();
        let mut schemas: Vec<ActionSchema> = Vec::new();
        let mut rules: Vec<ConstraintRule> = Vec::new();

        for (n, line) in lines {
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or_default();
            match kind {
                "name" => {
                    name = parts
                        .next()
                        .ok_or_else(|| err(n, "name without value"))?
                        .to_string();
                }
                "zone" => {
                    let z = parts.next().ok_or_else(|| err(n, "zone without name"))?;
                    if zones.iter().any(|x| x == z) {
                        return Err(err(n, format!("duplicate zone `{z}`")));
                    }
                    zones.push(z.to_string());
                }
                "object" => {
                    let oname: ObjectName = parts
                        .next()
                        .ok_or_else(|| err(n, "object without name"))?
                        .parse()?;
                    if pending.iter().any(|p| p.def.name == oname) {
                        return Err(err(n, format!("duplicate object `{oname}`")));
                    }
                    let f = fields(parts, n)?;
                    let zone_name = f.get("zone").ok_or_else(|| err(n, "object lacks zone"))?;
                    let zone = zones
                        .iter()
                        .position(|z| z == zone_name)
                        .map(|i| ZoneId(i as u8))
                        .ok_or_else(|| err(n, format!("undeclared zone `{zone_name}`")))?;
                    let mut props = PropSet::default();
                    for p in list(f.get("props")) {
                        props.insert(p.parse()?);
                    }
                    let mut states = StateSet::default();
                    for s in list(f.get("states")) {
                        let s: StateSym = s.parse()?;
                        if states.has_pair(s) {
                            return Err(err(n, format!("state pair of `{s}` given twice")));
                        }
                        states.insert(s);
                    }
                    let mut switchable = StateSet::default();
                    for s in list(f.get("switch")) {
                        let s: StateSym = s.parse()?;
                        if !states.has_pair(s) {
                            return Err(err(
                                n,
                                format!("switchable `{s}` not among the object's states"),
                            ));
                        }
                        switchable.insert(s);
                        switchable.insert(s.partner());
                    }
                    let parse_obj = |k: &str| -> Result<Option<ObjectName>> {
                        f.get(k).map(|v| v.parse()).transpose()
                    };
                    let on = parse_obj("on")?;
                    let inside = parse_obj("inside")?;
                    if on.is_some() && inside.is_some() {
                        return Err(err(n, "object both on and inside"));
                    }
                    pending.push(PendingObject {
                        line_no: n,
                        def: ObjectDef {
                            id: pending.len() as u16,
                            name: oname,
                            props,
                            switchable,
                            initial_states: states,
                            initial_zone: zone,
                        },
                        on,
                        inside,
                    });
                }
                "schema" => {
                    let aname: ActionName = parts
                        .next()
                        .ok_or_else(|| err(n, "schema without name"))?
                        .parse()?;
                    if schemas.iter().any(|s| s.name == aname) {
                        return Err(err(n, format!("duplicate schema `{aname}`")));
                    }
                    let rest: Vec<&str> = parts.collect();
                    let distinct = rest.contains(&"distinct");
                    let f = fields(rest.into_iter().filter(|p| *p != "distinct"), n)?;
                    let param1 = parse_req(f.get("p1").ok_or_else(|| err(n, "schema lacks p1"))?)?;
                    let param2 = match *f.get("p2").ok_or_else(|| err(n, "schema lacks p2"))? {
                        "none" => ParamKind::None,
                        "state" => ParamKind::State,
                        req => ParamKind::Object(parse_req(req)?),
                    };
                    let preconditions = list(f.get("pre"))
                        .iter()
                        .map(|p| p.parse())
                        .collect::<Result<Vec<_>>>()?;
                    let effects = list(f.get("eff"))
                        .iter()
                        .map(|p| p.parse())
                        .collect::<Result<Vec<_>>>()?;
                    if effects.is_empty() {
                        return Err(err(n, format!("schema `{aname}` has no effects")));
                    }
                    schemas.push(ActionSchema {
                        name: aname,
                        param1,
                        param2,
                        distinct,
                        preconditions,
                        effects,
                    });
                }
                "rule" => {
                    let aname: ActionName = parts
                        .next()
                        .ok_or_else(|| err(n, "rule without action"))?
                        .parse()?;
                    let f = fields(parts, n)?;
                    let object =
                        parse_ref(f.get("object").ok_or_else(|| err(n, "rule lacks object"))?)?;
                    let target = f.get("target").map(|v| parse_ref(v)).transpose()?;
                    let position = f.get("position").map(|v| parse_ref(v)).transpose()?;
                    let (state, state_from_param) = match f.get("state") {
                        None => (None, false),
                        Some(&"param") => (None, true),
                        Some(s) => (Some(s.parse()?), false),
                    };
                    if target.is_none()
                        && position.is_none()
                        && state.is_none()
                        && !state_from_param
                    {
                        return Err(err(n, "rule constrains nothing"));
                    }
                    let tolerance = match f.get("tolerance") {
                        None => 0.0,
                        Some(t) => t
                            .parse::<f64>()
                            .map_err(|e| err(n, format!("bad tolerance `{t}`: {e}")))?,
                    };
                    let clears = list(f.get("clears"))
                        .iter()
                        .map(|o| o.parse())
                        .collect::<Result<Vec<_>>>()?;
                    rules.push(ConstraintRule {
                        action: aname,
                        object,
                        target,
                        position,
                        state,
                        state_from_param,
                        tolerance,
                        clears,
                    });
                }
                other => return Err(err(n, format!("unknown record `{other}`"))),
            }
        }

        let find_zone = |z: &str| {
            zones
                .iter()
                .position(|x| x == z)
                .map(|i| ZoneId(i as u8))
                .ok_or_else(|| Error::World(format!("world must declare zone `{z}`")))
        };
        let held_zone = find_zone(HELD_ZONE)?;
        let everywhere_zone = find_zone(EVERYWHERE_ZONE)?;

        let object_index: HashMap<ObjectName, u16> =
            pending.iter().map(|p| (p.def.name, p.def.id)).collect();
        let robots: Vec<u16> = pending
            .iter()
            .filter(|p| p.def.props.has(Prop::Robot))
            .map(|p| p.def.id)
            .collect();
        let [robot] = robots[..] else {
            return Err(Error::World(format!(
                "expected exactly one robot object, found {}",
                robots.len()
            )));
        };
        let floor = *object_index
            .get(&ObjectName::named("floor"))
            .ok_or_else(|| Error::World("world must contain `floor`".into()))?;

        let mut relations = BTreeSet::new();
        for p in &pending {
            if p.def.initial_zone == held_zone {
                return Err(err(p.line_no, "objects cannot start held"));
            }
            for (rel, other) in [(Relation::ON, p.on), (Relation::INSIDE, p.inside)] {
                if let Some(o) = other {
                    let oid = *object_index
                        .get(&o)
                        .ok_or_else(|| err(p.line_no, format!("unknown support `{o}`")))?;
                    relations.insert((p.def.id, rel, oid));
                }
            }
            let grabbed = StateSym::named("Grabbed");
            if p.def.initial_states.contains(grabbed) {
                return Err(err(p.line_no, "objects cannot start grabbed"));
            }
            if p.def.props.has(Prop::Movable) && !p.def.initial_states.has_pair(grabbed) {
                return Err(err(p.line_no, "movable objects need the Grabbed/Free pair"));
            }
        }
        for s in &schemas {
            if s.effects
                .iter()
                .any(|e| matches!(e, super::Effect::SetParamState))
                && s.param2 != ParamKind::State
            {
                return Err(Error::World(format!(
                    "schema `{}` sets a param state without a state parameter",
                    s.name
                )));
            }
        }
        for r in &rules {
            let schema = schemas
                .iter()
                .find(|s| s.name == r.action)
                .ok_or_else(|| Error::World(format!("rule for `{}` has no schema", r.action)))?;
            let uses_p2 = [Some(r.object), r.target, r.position].contains(&Some(RuleRef::P2));
            if uses_p2 && !matches!(schema.param2, ParamKind::Object(_)) {
                return Err(Error::World(format!(
                    "rule for `{}` refers to p2",
                    r.action
                )));
            }
        }

        let objects: Vec<ObjectDef> = pending.into_iter().map(|p| p.def).collect();
        let robot_zone = objects[robot as usize].initial_zone;
        let initial = SceneGraph {
            objects: objects
                .iter()
                .map(|d| ObjectEntry {
                    id: d.id,
                    name: d.name,
                    states: d.initial_states,
                    zone: d.initial_zone,
                })
                .collect(),
            relations,
            robot: Robot {
                zone: robot_zone,
                held: None,
            },
        };
        let source_hash = hex::encode(Sha256::digest(text.as_bytes()));
        let mut world = World {
            name,
            zones,
            objects,
            object_index,
            schemas,
            rules,
            initial,
            robot,
            floor,
            held_zone,
            everywhere_zone,
            source_hash,
        };
        let mut init = world.initial.clone();
        world.normalize(&mut init);
        world
            .validate(&init)
            .map_err(|e| Error::World(format!("initial state invalid: {e}")))?;
        world.initial = init;
        // Exclusive pairs only ever come from declared states.
        debug_assert!(world
            .objects
            .iter()
            .all(|d| possible_states(d.initial_states).contains_all(d.switchable)));
        Ok(world)
    }
}
