//! Scene graphs: objects with per-object states and pairwise relations.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::vocab::{ObjectName, Relation, StateSym};
use super::World;
use crate::error::{Error, Result};

/// Index into a world's zone table.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct ZoneId(pub u8);

/// Bit set over the 28 state symbols.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Debug)]
pub struct StateSet(u32);

impl StateSet {
    pub fn contains(self, s: StateSym) -> bool {
        self.0 & (1 << s.index()) != 0
    }

    pub fn insert(&mut self, s: StateSym) {
        self.0 |= 1 << s.index();
    }

    pub fn remove(&mut self, s: StateSym) {
        self.0 &= !(1 << s.index());
    }

    /// Sets `s` and clears its exclusive partner.
    pub fn set(&mut self, s: StateSym) {
        self.remove(s.partner());
        self.insert(s);
    }

    pub fn has_pair(self, s: StateSym) -> bool {
        self.contains(s) || self.contains(s.partner())
    }

    pub fn iter(self) -> impl Iterator<Item = StateSym> {
        StateSym::all().filter(move |s| self.contains(*s))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains_all(self, other: StateSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn bits(self) -> u32 {
        self.0
    }
}

impl FromIterator<StateSym> for StateSet {
    fn from_iter<I: IntoIterator<Item = StateSym>>(iter: I) -> Self {
        let mut set = StateSet::default();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct ObjectEntry {
    pub id: u16,
    pub name: ObjectName,
    pub states: StateSet,
    pub zone: ZoneId,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Robot {
    pub zone: ZoneId,
    pub held: Option<u16>,
}

/// `(subject id, relation, object id)`.
pub type RelationTriple = (u16, Relation, u16);

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SceneGraph {
    pub objects: Vec<ObjectEntry>,
    pub relations: BTreeSet<RelationTriple>,
    pub robot: Robot,
}

/// Content hash of a canonical state serialization.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct StateKey(pub [u8; 16]);

impl StateKey {
    pub fn of_text(text: &str) -> StateKey {
        let digest = Sha256::digest(text.as_bytes());
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        StateKey(out)
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for StateKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Parse(format!("state key `{s}`: {e}")))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| Error::Parse(format!("state key `{s}` has wrong length")))?;
        Ok(StateKey(arr))
    }
}

impl SceneGraph {
    /// Entry for object `id`. Objects are kept sorted by id after
    /// [`SceneGraph::normalize`], so this is a direct lookup in that case.
    pub fn obj(&self, id: u16) -> &ObjectEntry {
        match self.objects.get(id as usize) {
            Some(o) if o.id == id => o,
            _ => self
                .objects
                .iter()
                .find(|o| o.id == id)
                .expect("object id present"),
        }
    }

    pub fn obj_mut(&mut self, id: u16) -> &mut ObjectEntry {
        let pos = match self.objects.get(id as usize) {
            Some(o) if o.id == id => id as usize,
            _ => self
                .objects
                .iter()
                .position(|o| o.id == id)
                .expect("object id present"),
        };
        &mut self.objects[pos]
    }

    pub fn id_of(&self, name: ObjectName) -> Option<u16> {
        self.objects.iter().find(|o| o.name == name).map(|o| o.id)
    }

    pub fn has_relation(&self, subj: u16, rel: Relation, obj: u16) -> bool {
        self.relations.contains(&(subj, rel, obj))
    }

    /// Objects that sit directly on, inside, or stuck to `id`.
    pub fn supported_by(&self, id: u16) -> impl Iterator<Item = u16> + '_ {
        self.relations
            .iter()
            .filter(move |(_, r, o)| *o == id && *r != Relation::CLOSE)
            .map(|(s, _, _)| *s)
    }

    /// What `id` rests on, inside, or is stuck to, if anything.
    pub fn support_of(&self, id: u16) -> Option<(Relation, u16)> {
        self.relations
            .range((id, Relation::INSIDE, 0)..=(id, Relation::STUCK, u16::MAX))
            .next()
            .map(|(_, r, o)| (*r, *o))
    }

    /// Removes every non-Close relation with `id` as subject.
    pub fn detach(&mut self, id: u16) {
        self.relations
            .retain(|(s, r, _)| *s != id || *r == Relation::CLOSE);
    }

    /// Transitive closure of objects supported by `id`, excluding `id`.
    pub fn stacked_on(&self, id: u16) -> Vec<u16> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            for s in self.supported_by(cur) {
                if !out.contains(&s) && s != id {
                    out.push(s);
                    stack.push(s);
                }
            }
        }
        out
    }

    fn sorted_objects(&self) -> Vec<&ObjectEntry> {
        let mut objs: Vec<&ObjectEntry> = self.objects.iter().collect();
        objs.sort_by_key(|o| o.name.as_str());
        objs
    }

    /// Canonical, sorted, line-oriented serialization. Equal states produce
    /// byte-identical text regardless of object or relation ordering.
    pub fn canonical_text(&self, world: &World) -> String {
        let mut out = String::new();
        let held = self
            .robot
            .held
            .map(|id| self.obj(id).name.as_str())
            .unwrap_or("-");
        out.push_str(&format!(
            "robot zone={} held={}\n",
            world.zone_name(self.robot.zone),
            held
        ));
        for o in self.sorted_objects() {
            let states: Vec<&str> = o.states.iter().map(|s| s.as_str()).collect();
            out.push_str(&format!(
                "object {} zone={} states={}\n",
                o.name,
                world.zone_name(o.zone),
                states.join(",")
            ));
        }
        let mut rels: Vec<(&str, &str, &str)> = self
            .relations
            .iter()
            .map(|(s, r, o)| {
                (
                    self.obj(*s).name.as_str(),
                    r.as_str(),
                    self.obj(*o).name.as_str(),
                )
            })
            .collect();
        rels.sort();
        for (s, r, o) in rels {
            out.push_str(&format!("relation {s} {r} {o}\n"));
        }
        out
    }

    /// Parses text produced by [`SceneGraph::canonical_text`].
    pub fn from_canonical(text: &str, world: &World) -> Result<SceneGraph> {
        let mut objects = Vec::new();
        let mut relations = BTreeSet::new();
        let mut robot_zone = None;
        let mut held_name: Option<String> = None;
        let mut rel_names = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("robot") => {
                    for kv in parts {
                        match kv.split_once('=') {
                            Some(("zone", z)) => robot_zone = Some(world.zone_id(z)?),
                            Some(("held", "-")) => held_name = None,
                            Some(("held", h)) => held_name = Some(h.to_string()),
                            _ => return Err(Error::Parse(format!("bad robot field `{kv}`"))),
                        }
                    }
                }
                Some("object") => {
                    let name: ObjectName = parts
                        .next()
                        .ok_or_else(|| Error::Parse("object line without name".into()))?
                        .parse()?;
                    let id = world
                        .object_id(name)
                        .ok_or_else(|| Error::Parse(format!("object `{name}` not in world")))?;
                    let mut zone = None;
                    let mut states = StateSet::default();
                    for kv in parts {
                        match kv.split_once('=') {
                            Some(("zone", z)) => zone = Some(world.zone_id(z)?),
                            Some(("states", s)) => {
                                for st in s.split(',').filter(|s| !s.is_empty()) {
                                    states.insert(st.parse()?);
                                }
                            }
                            _ => return Err(Error::Parse(format!("bad object field `{kv}`"))),
                        }
                    }
                    objects.push(ObjectEntry {
                        id,
                        name,
                        states,
                        zone: zone
                            .ok_or_else(|| Error::Parse(format!("object `{name}` lacks zone")))?,
                    });
                }
                Some("relation") => {
                    let fields: Vec<&str> = parts.collect();
                    if fields.len() != 3 {
                        return Err(Error::Parse(format!("bad relation line `{line}`")));
                    }
                    rel_names.push((
                        fields[0].parse::<ObjectName>()?,
                        fields[1].parse::<Relation>()?,
                        fields[2].parse::<ObjectName>()?,
                    ));
                }
                _ => return Err(Error::Parse(format!("unexpected state line `{line}`"))),
            }
        }
        let lookup = |n: ObjectName| {
            world
                .object_id(n)
                .ok_or_else(|| Error::Parse(format!("object `{n}` not in world")))
        };
        for (s, r, o) in rel_names {
            relations.insert((lookup(s)?, r, lookup(o)?));
        }
        let held = held_name
            .map(|h| h.parse::<ObjectName>().and_then(lookup))
            .transpose()?;
        let mut scene = SceneGraph {
            objects,
            relations,
            robot: Robot {
                zone: robot_zone.ok_or_else(|| Error::Parse("state lacks robot line".into()))?,
                held,
            },
        };
        scene.objects.sort_by_key(|o| o.id);
        Ok(scene)
    }
}
