//! Fixed symbol tables: objects, object states, action names and relations.
//!
//! Every world definition draws its objects from the same 36-name table, so
//! symbols are small indices that stay stable across worlds.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub const OBJECT_NAMES: [&str; 36] = [
    "floor",
    "walls",
    "door",
    "fridge",
    "cupboard",
    "husky",
    "table",
    "table2",
    "couch",
    "big-tray",
    "book",
    "paper",
    "cube_gray",
    "cube_green",
    "cube_red",
    "tray",
    "tray2",
    "bottle_blue",
    "chair",
    "stick",
    "bottle_gray",
    "bottle_red",
    "box",
    "apple",
    "orange",
    "dumpster",
    "light",
    "milk",
    "shelf",
    "glue",
    "tape",
    "stool",
    "mop",
    "sponge",
    "vacuum",
    "dirt",
];

/// States come in mutually exclusive pairs `(2k, 2k + 1)`.
pub const STATE_NAMES: [&str; 28] = [
    "Outside",
    "Inside",
    "On",
    "Off",
    "Close",
    "Open",
    "Up",
    "Down",
    "Sticky",
    "Non_Sticky",
    "Dirty",
    "Clean",
    "Grabbed",
    "Free",
    "Welded",
    "Not_Welded",
    "Drilled",
    "Not_Drilled",
    "Driven",
    "Not_Driven",
    "Fueled",
    "Not_Fueled",
    "Cut",
    "Not_Cut",
    "Painted",
    "Not_Painted",
    "Different_Height",
    "Same_Height",
];

pub const ACTION_NAMES: [&str; 11] = [
    "drop",
    "climbDown",
    "pick",
    "moveTo",
    "climbUp",
    "pushTo",
    "changeState",
    "pickNplaceAonB",
    "clean",
    "apply",
    "stick",
];

pub const RELATION_NAMES: [&str; 4] = ["Close", "Inside", "On", "Stuck"];

macro_rules! symbol {
    ($name:ident, $table:ident, $what:literal) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
        pub struct $name(u8);

        impl $name {
            pub const COUNT: usize = $table.len();

            pub fn from_index(idx: usize) -> Option<Self> {
                (idx < $table.len()).then(|| Self(idx as u8))
            }

            pub fn index(self) -> usize {
                self.0 as usize
            }

            pub fn as_str(self) -> &'static str {
                $table[self.0 as usize]
            }

            pub fn all() -> impl Iterator<Item = Self> {
                (0..$table.len()).map(|i| Self(i as u8))
            }

            /// Case-insensitive lookup.
            pub fn lookup(s: &str) -> Option<Self> {
                $table
                    .iter()
                    .position(|n| n.eq_ignore_ascii_case(s))
                    .map(|i| Self(i as u8))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                Self::lookup(s).ok_or_else(|| Error::UnknownSymbol {
                    kind: $what,
                    name: s.to_string(),
                })
            }
        }
    };
}

symbol!(ObjectName, OBJECT_NAMES, "object");
symbol!(StateSym, STATE_NAMES, "state");
symbol!(ActionName, ACTION_NAMES, "action");
symbol!(Relation, RELATION_NAMES, "relation");

impl StateSym {
    /// The other member of this state's exclusive pair.
    pub fn partner(self) -> StateSym {
        StateSym(self.0 ^ 1)
    }

    pub fn pair(self) -> usize {
        (self.0 >> 1) as usize
    }

    /// Lower-case form used inside action parameters, e.g. `<open>`.
    pub fn param_str(self) -> String {
        self.as_str().to_ascii_lowercase()
    }

    pub fn named(s: &str) -> StateSym {
        s.parse().expect("state symbol")
    }
}

impl ObjectName {
    pub fn named(s: &str) -> ObjectName {
        s.parse().expect("object symbol")
    }
}

impl Relation {
    pub const CLOSE: Relation = Relation(0);
    pub const INSIDE: Relation = Relation(1);
    pub const ON: Relation = Relation(2);
    pub const STUCK: Relation = Relation(3);
}

/// Second action parameter.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Param {
    None,
    Object(ObjectName),
    State(StateSym),
}

impl Param {
    fn sort_key(&self) -> String {
        match self {
            Param::None => String::new(),
            Param::Object(o) => o.as_str().to_string(),
            Param::State(s) => s.param_str(),
        }
    }
}

/// An action name bound to concrete parameters. Variants with different
/// parameters are distinct actions.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct GroundedAction {
    pub name: ActionName,
    pub param1: ObjectName,
    pub param2: Param,
}

impl GroundedAction {
    pub fn unary(name: ActionName, obj: ObjectName) -> Self {
        GroundedAction {
            name,
            param1: obj,
            param2: Param::None,
        }
    }

    pub fn arity(&self) -> usize {
        match self.param2 {
            Param::None => 1,
            _ => 2,
        }
    }

    pub fn object2(&self) -> Option<ObjectName> {
        match self.param2 {
            Param::Object(o) => Some(o),
            _ => None,
        }
    }

    pub fn state(&self) -> Option<StateSym> {
        match self.param2 {
            Param::State(s) => Some(s),
            _ => None,
        }
    }
}

impl Ord for GroundedAction {
    /// Lexicographic on the rendered form: name, then first parameter, then
    /// second (absent sorts first).
    fn cmp(&self, other: &Self) -> Ordering {
        self.name
            .as_str()
            .cmp(other.name.as_str())
            .then_with(|| self.param1.as_str().cmp(other.param1.as_str()))
            .then_with(|| self.param2.sort_key().cmp(&other.param2.sort_key()))
    }
}

impl PartialOrd for GroundedAction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for GroundedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} <{}>", self.name, self.param1)?;
        match self.param2 {
            Param::None => Ok(()),
            Param::Object(o) => write!(f, " <{}>", o),
            Param::State(s) => write!(f, " <{}>", s.param_str()),
        }
    }
}

impl FromStr for GroundedAction {
    type Err = Error;

    /// Parses `name <p1>` or `name <p1> <p2>`. A second parameter is read as
    /// an object when it names one, otherwise as a state.
    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Parse(format!("malformed action `{s}`"));
        let mut parts = s.split_whitespace();
        let name: ActionName = parts.next().ok_or_else(bad)?.parse()?;
        let strip = |p: &str| -> Result<String, Error> {
            p.strip_prefix('<')
                .and_then(|p| p.strip_suffix('>'))
                .map(str::to_string)
                .ok_or_else(bad)
        };
        let param1: ObjectName = strip(parts.next().ok_or_else(bad)?)?.parse()?;
        let param2 = match parts.next() {
            None => Param::None,
            Some(p) => {
                let p = strip(p)?;
                if let Some(o) = ObjectName::lookup(&p) {
                    Param::Object(o)
                } else {
                    Param::State(p.parse()?)
                }
            }
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(GroundedAction {
            name,
            param1,
            param2,
        })
    }
}
