//! Tasks sampled as knowledge-graph paths, stratified splits, rule-based
//! task constraints, and success checks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explorer::KnowledgeGraph;
use crate::io;
use crate::world::{
    GroundedAction, ObjectName, Param, Relation, RuleRef, SceneGraph, StateKey, StateSym, Status,
    World,
};

pub const DS_HEADER: &str = "m3-ds v1";
pub const SPLIT_HEADER: &str = "m3-split v1";

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConstraint {
    pub object: ObjectName,
    pub target: Option<ObjectName>,
    pub state: Vec<StateSym>,
    pub position: Option<ObjectName>,
    pub tolerance: f64,
}

impl std::fmt::Display for TaskConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "object={}", self.object)?;
        if let Some(t) = self.target {
            write!(f, " target={t}")?;
        }
        if let Some(p) = self.position {
            write!(f, " position={p}")?;
        }
        if !self.state.is_empty() {
            let s: Vec<&str> = self.state.iter().map(|s| s.as_str()).collect();
            write!(f, " state={}", s.join(","))?;
        }
        write!(f, " tolerance={}", self.tolerance)
    }
}

impl std::str::FromStr for TaskConstraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut c = TaskConstraint {
            object: ObjectName::named("floor"),
            target: None,
            state: Vec::new(),
            position: None,
            tolerance: 0.0,
        };
        let mut has_object = false;
        for kv in s.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad constraint field `{kv}`")))?;
            match k {
                "object" => {
                    c.object = v.parse()?;
                    has_object = true;
                }
                "target" => c.target = Some(v.parse()?),
                "position" => c.position = Some(v.parse()?),
                "state" => {
                    c.state = v.split(',').map(str::parse).collect::<Result<_>>()?;
                }
                "tolerance" => {
                    c.tolerance = v
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad tolerance `{v}`")))?
                }
                _ => return Err(Error::Parse(format!("unknown constraint key `{k}`"))),
            }
        }
        if !has_object {
            return Err(Error::Parse("constraint without object".into()));
        }
        Ok(c)
    }
}

fn resolve(r: RuleRef, a: &GroundedAction) -> Option<ObjectName> {
    match r {
        RuleRef::P1 => Some(a.param1),
        RuleRef::P2 => a.object2(),
        RuleRef::Fixed(o) => Some(o),
    }
}

/// Objects whose constraint an action writes or clears.
fn touched(world: &World, a: &GroundedAction) -> Vec<ObjectName> {
    let Some(rule) = world.rule(a.name) else {
        return Vec::new();
    };
    let mut out: Vec<ObjectName> = resolve(rule.object, a).into_iter().collect();
    out.extend(rule.clears.iter().copied());
    out
}

/// One constraint per task-relevant object; a later action on an object
/// overwrites whatever earlier actions said about it. Output is sorted by
/// object name.
pub fn make_constraints(world: &World, actions: &[GroundedAction]) -> Vec<TaskConstraint> {
    let mut by_object: BTreeMap<&'static str, TaskConstraint> = BTreeMap::new();
    for a in actions {
        let Some(rule) = world.rule(a.name) else {
            continue;
        };
        for c in &rule.clears {
            by_object.remove(c.as_str());
        }
        let Some(object) = resolve(rule.object, a) else {
            continue;
        };
        let mut state = Vec::new();
        if let Some(s) = rule.state {
            state.push(s);
        }
        if rule.state_from_param {
            if let Param::State(s) = a.param2 {
                state.push(s);
            }
        }
        let c = TaskConstraint {
            object,
            target: rule.target.and_then(|r| resolve(r, a)),
            state,
            position: rule.position.and_then(|r| resolve(r, a)),
            tolerance: rule.tolerance,
        };
        by_object.insert(object.as_str(), c);
    }
    by_object.into_values().collect()
}

/// Marks actions whose every constraint contribution is overwritten or
/// cleared by a later action.
pub fn superseded(world: &World, actions: &[GroundedAction]) -> Vec<bool> {
    (0..actions.len())
        .map(|i| {
            let mine = touched(world, &actions[i]);
            !mine.is_empty()
                && mine.iter().all(|o| {
                    actions[i + 1..]
                        .iter()
                        .any(|b| touched(world, b).contains(o))
                })
        })
        .collect()
}

/// Zone an object counts as occupying for position checks. Held objects
/// travel with the robot; `None` means the object is everywhere.
fn located(world: &World, state: &SceneGraph, id: u16) -> Option<crate::world::ZoneId> {
    let z = state.obj(id).zone;
    if z == world.everywhere_zone() {
        None
    } else if z == world.held_zone() {
        Some(state.robot.zone)
    } else {
        Some(z)
    }
}

/// True iff every constraint holds; objects without constraints are ignored.
pub fn check_success(world: &World, state: &SceneGraph, constraints: &[TaskConstraint]) -> bool {
    constraints.iter().all(|c| {
        let Some(id) = world.object_id(c.object) else {
            return false;
        };
        if let Some(t) = c.target {
            let Some(tid) = world.object_id(t) else {
                return false;
            };
            let related = [Relation::ON, Relation::INSIDE, Relation::STUCK]
                .iter()
                .any(|r| state.has_relation(id, *r, tid));
            if !related {
                return false;
            }
        }
        if let Some(p) = c.position {
            let Some(pid) = world.object_id(p) else {
                return false;
            };
            if let (Some(a), Some(b)) = (located(world, state, id), located(world, state, pid)) {
                if a != b {
                    return false;
                }
            }
        }
        let states = state.obj(id).states;
        c.state.iter().all(|s| states.contains(*s))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub id: usize,
    /// Path through the knowledge graph, `gt_actions.len() + 1` keys.
    pub nodes: Vec<StateKey>,
    pub gt_actions: Vec<GroundedAction>,
    pub constraints: Vec<TaskConstraint>,
}

impl TaskSample {
    pub fn gt_length(&self) -> usize {
        self.gt_actions.len()
    }

    pub fn start(&self) -> StateKey {
        self.nodes[0]
    }

    pub fn goal(&self) -> StateKey {
        *self.nodes.last().expect("nonempty path")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleReport {
    /// `(length, produced)` for lengths that fell short of the quota.
    pub shortfalls: Vec<(usize, usize)>,
    pub preferred: usize,
    pub filled: usize,
}

impl SampleReport {
    pub fn warning(&self) -> bool {
        !self.shortfalls.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    nodes: Vec<StateKey>,
    actions: Vec<GroundedAction>,
    constraints: Vec<TaskConstraint>,
}

/// Seeded random walk of exactly `len` edges visiting no node twice.
fn random_walk<R: Rng>(
    kg: &KnowledgeGraph,
    start: StateKey,
    len: usize,
    rng: &mut R,
) -> Option<(Vec<StateKey>, Vec<GroundedAction>)> {
    let mut nodes = vec![start];
    let mut actions = Vec::with_capacity(len);
    let mut cur = start;
    for _ in 0..len {
        let options: Vec<_> = kg
            .outgoing(&cur)
            .filter(|e| !nodes.contains(&e.dst))
            .collect();
        let e = options.choose(rng)?;
        nodes.push(e.dst);
        actions.push(e.action);
        cur = e.dst;
    }
    Some((nodes, actions))
}

/// Node-set containment in either direction of two paths.
pub fn paths_nested(a: &[StateKey], b: &[StateKey]) -> bool {
    let sa: HashSet<&StateKey> = a.iter().collect();
    let sb: HashSet<&StateKey> = b.iter().collect();
    sa.is_subset(&sb) || sb.is_subset(&sa)
}

/// Samples up to `per_length` tasks for every length in `lengths`.
///
/// Candidates come from seeded random walks with rejection (repeated node
/// sequences, tasks already satisfied at the start, or unsatisfiable goals
/// are dropped). Selection first takes paths whose endpoint pair is unused
/// and whose node set neither contains nor is contained in a chosen path,
/// processing longer lengths first; remaining quota is filled with any
/// unused candidates.
pub fn sample_paths<R: Rng>(
    world: &World,
    kg: &KnowledgeGraph,
    per_length: usize,
    lengths: std::ops::RangeInclusive<usize>,
    rng: &mut R,
) -> Result<(Vec<TaskSample>, SampleReport)> {
    let mut report = SampleReport::default();
    let nodes = kg.nodes().to_vec();
    let mut candidates: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
    for len in lengths.clone() {
        let mut seen: HashSet<Vec<StateKey>> = HashSet::new();
        let mut list = Vec::new();
        let tries = (per_length * 40).max(200);
        for _ in 0..tries {
            if nodes.is_empty() || len == 0 {
                break;
            }
            let start = nodes[rng.gen_range(0..nodes.len())];
            let Some((path, actions)) = random_walk(kg, start, len, rng) else {
                continue;
            };
            if !seen.insert(path.clone()) {
                continue;
            }
            let constraints = make_constraints(world, &actions);
            let s0 = kg.state(&path[0])?;
            let sg = kg.state(path.last().expect("nonempty"))?;
            if constraints.is_empty()
                || check_success(world, &s0, &constraints)
                || !check_success(world, &sg, &constraints)
            {
                continue;
            }
            list.push(Candidate {
                nodes: path,
                actions,
                constraints,
            });
        }
        candidates.insert(len, list);
    }

    let mut chosen: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
    let mut endpoints: HashSet<(StateKey, StateKey)> = HashSet::new();
    let mut used: HashSet<Vec<StateKey>> = HashSet::new();
    let mut kept: Vec<Vec<StateKey>> = Vec::new();
    for len in lengths.clone().rev() {
        let pool = candidates.get(&len).map(Vec::as_slice).unwrap_or_default();
        let picked = chosen.entry(len).or_default();
        for c in pool {
            if picked.len() >= per_length {
                break;
            }
            let ends = (c.nodes[0], *c.nodes.last().unwrap());
            if endpoints.contains(&ends) || kept.iter().any(|k| paths_nested(k, &c.nodes)) {
                continue;
            }
            endpoints.insert(ends);
            used.insert(c.nodes.clone());
            kept.push(c.nodes.clone());
            picked.push(c.clone());
            report.preferred += 1;
        }
    }
    for len in lengths.clone().rev() {
        let pool = candidates.get(&len).map(Vec::as_slice).unwrap_or_default();
        let picked = chosen.get_mut(&len).expect("entry created above");
        for c in pool {
            if picked.len() >= per_length {
                break;
            }
            if used.insert(c.nodes.clone()) {
                picked.push(c.clone());
                report.filled += 1;
            }
        }
        if picked.len() < per_length {
            report.shortfalls.push((len, picked.len()));
            log::warn!("length {len}: only {} of {per_length} tasks", picked.len());
        }
    }

    let mut out = Vec::new();
    for len in lengths {
        for c in chosen.remove(&len).unwrap_or_default() {
            out.push(TaskSample {
                id: out.len(),
                nodes: c.nodes,
                gt_actions: c.actions,
                constraints: c.constraints,
            });
        }
    }
    report.shortfalls.sort();
    Ok((out, report))
}

/// Train/val/test counts for `n` items at ratio 6:2:2: floor each share,
/// then hand the remainder to the largest fractional parts, ties in
/// train, val, test order.
pub fn split_counts(n: usize) -> [usize; 3] {
    let weights = [6usize, 2, 2];
    let total: usize = weights.iter().sum();
    let mut counts = [0usize; 3];
    let mut fracs = [(0usize, 0usize); 3];
    for i in 0..3 {
        counts[i] = n * weights[i] / total;
        fracs[i] = (n * weights[i] % total, i);
    }
    let mut rest = n - counts.iter().sum::<usize>();
    fracs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in fracs {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified by gt length: each length group is shuffled and cut with
/// [`split_counts`]. Ids within each part are sorted.
pub fn split<R: Rng>(samples: &[TaskSample], rng: &mut R) -> DatasetSplit {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.gt_length()).or_default().push(s.id);
    }
    let mut out = DatasetSplit::default();
    for (_, mut ids) in groups {
        ids.shuffle(rng);
        let [a, b, _] = split_counts(ids.len());
        out.train.extend(&ids[..a]);
        out.val.extend(&ids[a..a + b]);
        out.test.extend(&ids[a + b..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    out
}

/// Fraction of test samples whose action sequence occurs contiguously
/// inside some training sample.
pub fn action_overlap_rate(samples: &[TaskSample], split: &DatasetSplit) -> f64 {
    if split.test.is_empty() {
        return 0.0;
    }
    let hits = split
        .test
        .iter()
        .filter(|&&t| {
            let needle = &samples[t].gt_actions;
            split.train.iter().any(|&r| {
                samples[r]
                    .gt_actions
                    .windows(needle.len())
                    .any(|w| w == &needle[..])
            })
        })
        .count();
    hits as f64 / split.test.len() as f64
}

/// Fraction of test samples whose node path occurs contiguously inside a
/// training sample's path.
pub fn node_overlap_rate(samples: &[TaskSample], split: &DatasetSplit) -> f64 {
    if split.test.is_empty() {
        return 0.0;
    }
    let hits = split
        .test
        .iter()
        .filter(|&&t| {
            let needle = &samples[t].nodes;
            split.train.iter().any(|&r| {
                samples[r]
                    .nodes
                    .windows(needle.len())
                    .any(|w| w == &needle[..])
            })
        })
        .count();
    hits as f64 / split.test.len() as f64
}

/// Replays `actions` from `start`; true iff all succeed and the constraints
/// hold at the end.
pub fn replay(
    world: &World,
    start: &SceneGraph,
    actions: &[GroundedAction],
    constraints: &[TaskConstraint],
) -> bool {
    let mut state = start.clone();
    for a in actions {
        let out = world.step(&state, a);
        if out.status != Status::Success {
            return false;
        }
        state = out.next_state;
    }
    check_success(world, &state, constraints)
}

/// Samples together with the graph they index into.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kg_hash: String,
    pub samples: Vec<TaskSample>,
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Dataset {
    pub fn to_text(&self) -> String {
        let mut s = format!("{DS_HEADER}\nkg {}\n", self.kg_hash);
        for t in &self.samples {
            let nodes: Vec<String> = t.nodes.iter().map(|k| k.to_string()).collect();
            let _ = writeln!(
                s,
                "sample {} len={} nodes={}",
                t.id,
                t.gt_length(),
                nodes.join(",")
            );
            for a in &t.gt_actions {
                let _ = writeln!(s, "step {} {a}", t.id);
            }
            for c in &t.constraints {
                let _ = writeln!(s, "constraint {} {c}", t.id);
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        if lines.next() != Some(DS_HEADER) {
            return Err(Error::Parse(format!("missing `{DS_HEADER}` header")));
        }
        let bad = |l: &str| Error::Parse(format!("bad dataset line `{l}`"));
        let mut ds = Dataset {
            kg_hash: String::new(),
            samples: Vec::new(),
        };
        let mut lens: HashMap<usize, usize> = HashMap::new();
        for line in lines {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            if kind == "kg" {
                ds.kg_hash = rest.to_string();
                continue;
            }
            let (id, body) = rest.split_once(' ').ok_or_else(|| bad(line))?;
            let id: usize = id.parse().map_err(|_| bad(line))?;
            match kind {
                "sample" => {
                    if id != ds.samples.len() {
                        return Err(Error::Parse(format!("sample ids out of order at {id}")));
                    }
                    let mut nodes = Vec::new();
                    for kv in body.split_whitespace() {
                        match kv.split_once('=') {
                            Some(("len", v)) => {
                                lens.insert(id, v.parse().map_err(|_| bad(line))?);
                            }
                            Some(("nodes", v)) => {
                                nodes = v.split(',').map(str::parse).collect::<Result<_>>()?;
                            }
                            _ => return Err(bad(line)),
                        }
                    }
                    ds.samples.push(TaskSample {
                        id,
                        nodes,
                        gt_actions: Vec::new(),
                        constraints: Vec::new(),
                    });
                }
                "step" | "constraint" => {
                    let s = ds.samples.get_mut(id).ok_or_else(|| bad(line))?;
                    if kind == "step" {
                        s.gt_actions.push(body.parse()?);
                    } else {
                        s.constraints.push(body.parse()?);
                    }
                }
                _ => return Err(bad(line)),
            }
        }
        for s in &ds.samples {
            if lens.get(&s.id) != Some(&s.gt_length()) || s.nodes.len() != s.gt_length() + 1 {
                return Err(Error::Parse(format!(
                    "sample {} has inconsistent length",
                    s.id
                )));
            }
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_artifact(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = io::read_artifact(path, DS_HEADER)?;
        io::in_file(path, Dataset::from_text(&text))
    }
}

impl DatasetSplit {
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{SPLIT_HEADER}\ntrain {}\nval {}\ntest {}\n",
            join(&self.train),
            join(&self.val),
            join(&self.test)
        )
    }

    pub fn from_text(text: &str) -> Result<DatasetSplit> {
        let mut lines = text.lines();
        if lines.next() != Some(SPLIT_HEADER) {
            return Err(Error::Parse(format!("missing `{SPLIT_HEADER}` header")));
        }
        let mut out = DatasetSplit::default();
        for line in lines {
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            let ids: Vec<usize> = rest
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Parse(format!("bad split id `{s}`")))
                })
                .collect::<Result<_>>()?;
            match kind {
                "train" => out.train = ids,
                "val" => out.val = ids,
                "test" => out.test = ids,
                _ => return Err(Error::Parse(format!("bad split line `{line}`"))),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_artifact(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<DatasetSplit> {
        let text = io::read_artifact(path, SPLIT_HEADER)?;
        io::in_file(path, DatasetSplit::from_text(&text))
    }
}

/// Start and goal states of a sample, resolved through the graph.
pub fn endpoints(kg: &KnowledgeGraph, s: &TaskSample) -> Result<(SceneGraph, SceneGraph)> {
    Ok((
        (*kg.state(&s.start())?).clone(),
        (*kg.state(&s.goal())?).clone(),
    ))
}
