//! Task-agnostic exploration into a knowledge graph.
//!
//! Nodes are deduplicated state snapshots keyed by canonical state id and
//! edges are grounded actions. Actions are drawn by a weighted random
//! sampler favouring rarely tried actions; schema-invalid actions are banned
//! for the rest of the run.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::world::{GroundedAction, SceneGraph, SnapshotStore, StateKey, Status, World};

pub const KG_HEADER: &str = "m3-kg v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub initial_steps: usize,
    pub node_count: usize,
    pub steps_per_node: usize,
    pub max_wrong_per_node: usize,
    pub rng_seed: u64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            initial_steps: 20,
            node_count: 200,
            steps_per_node: 5,
            max_wrong_per_node: 30,
            rng_seed: 0,
        }
    }
}

/// Per-action attempt counts and ban flags, indexed like the action table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionStats {
    pub counts: Vec<u64>,
    /// Attempt number at which the action was banned.
    pub banned_at: Vec<Option<u64>>,
}

impl ActionStats {
    pub fn new(n: usize) -> Self {
        ActionStats {
            counts: vec![0; n],
            banned_at: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn is_banned(&self, i: usize) -> bool {
        self.banned_at[i].is_some()
    }

    pub fn weight(&self, i: usize) -> f64 {
        if self.is_banned(i) {
            0.0
        } else {
            1.0 / (self.counts[i] as f64 + 1.0)
        }
    }
}

/// Draws an index with probability proportional to `1 / (count + 1)` among
/// actions that are neither banned nor excluded.
pub fn weighted_sample<R: Rng>(
    stats: &ActionStats,
    exclude: &HashSet<usize>,
    rng: &mut R,
) -> Result<usize> {
    let eligible = |i: usize| !stats.is_banned(i) && !exclude.contains(&i);
    let total: f64 = (0..stats.len())
        .filter(|&i| eligible(i))
        .map(|i| stats.weight(i))
        .sum();
    if total <= 0.0 {
        return Err(Error::Exhausted);
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for i in (0..stats.len()).filter(|&i| eligible(i)) {
        let w = stats.weight(i);
        if u < w {
            return Ok(i);
        }
        u -= w;
        last = Some(i);
    }
    // Floating-point slack at the upper end.
    last.ok_or(Error::Exhausted)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: StateKey,
    pub action: GroundedAction,
    pub dst: StateKey,
    /// Attempt number that produced the edge.
    pub seq: u64,
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    pub world_hash: String,
    pub root: StateKey,
    store: SnapshotStore,
    order: Vec<StateKey>,
    out: HashMap<StateKey, Vec<usize>>,
    pub edges: Vec<Edge>,
    pub actions: Vec<GroundedAction>,
    pub stats: ActionStats,
    /// Successful transitions performed, counting revisits.
    pub successful_steps: usize,
    pub attempts: u64,
}

impl KnowledgeGraph {
    fn new(world: &World) -> Self {
        let actions = world.enumerate_actions();
        let mut store = SnapshotStore::new();
        let root = store.snapshot(world, &world.initial_state());
        KnowledgeGraph {
            world_hash: world.source_hash().to_string(),
            root,
            store,
            order: vec![root],
            out: HashMap::from([(root, Vec::new())]),
            edges: Vec::new(),
            stats: ActionStats::new(actions.len()),
            actions,
            successful_steps: 0,
            attempts: 0,
        }
    }

    pub fn node_count(&self) -> usize {
        self.order.len()
    }

    /// Node keys in insertion order.
    pub fn nodes(&self) -> &[StateKey] {
        &self.order
    }

    pub fn state(&self, key: &StateKey) -> Result<Arc<SceneGraph>> {
        self.store.get(key)
    }

    pub fn canonical_text(&self, key: &StateKey) -> Result<&str> {
        self.store.text(key)
    }

    pub fn outgoing(&self, key: &StateKey) -> impl Iterator<Item = &Edge> {
        self.out
            .get(key)
            .into_iter()
            .flatten()
            .map(|&i| &self.edges[i])
    }

    pub fn distinct_action_count(&self) -> usize {
        distinct_action_count(&self.edges)
    }

    /// A graph holding only the world's initial state.
    pub fn with_root(world: &World) -> Self {
        KnowledgeGraph::new(world)
    }

    /// Executes `action` from node `src` and records the edge on success.
    /// Returns the destination, or `None` if the action failed or the node
    /// already has an edge with this label.
    pub fn record(
        &mut self,
        world: &World,
        src: &StateKey,
        action: GroundedAction,
    ) -> Result<Option<StateKey>> {
        let state = self.state(src)?;
        if self.outgoing(src).any(|e| e.action == action) {
            return Ok(None);
        }
        self.attempts += 1;
        let outcome = world.step(&state, &action);
        if outcome.status != Status::Success {
            return Ok(None);
        }
        let dst = self.add_node(world, &outcome.next_state);
        let id = self.edges.len();
        self.edges.push(Edge {
            src: *src,
            action,
            dst,
            seq: self.attempts,
        });
        self.out.get_mut(src).expect("node exists").push(id);
        self.successful_steps += 1;
        Ok(Some(dst))
    }

    fn add_node(&mut self, world: &World, state: &SceneGraph) -> StateKey {
        let key = self.store.snapshot(world, state);
        if !self.out.contains_key(&key) {
            self.order.push(key);
            self.out.insert(key, Vec::new());
        }
        key
    }

    /// Serializes to the `m3-kg v1` text format with deterministic ordering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{KG_HEADER}");
        let _ = writeln!(s, "world {}", self.world_hash);
        let _ = writeln!(s, "root {}", self.root);
        let _ = writeln!(
            s,
            "meta nodes={} edges={} successful_steps={} attempts={}",
            self.order.len(),
            self.edges.len(),
            self.successful_steps,
            self.attempts
        );
        for key in &self.order {
            let text = self.store.text(key).expect("node stored");
            let _ = writeln!(s, "node {key} {}", text.trim_end().replace('\n', ";"));
        }
        for e in &self.edges {
            let _ = writeln!(s, "edge {} {} {} {}", e.seq, e.src, e.dst, e.action);
        }
        for (i, a) in self.actions.iter().enumerate() {
            let ban = self.stats.banned_at[i].map_or("-".to_string(), |b| b.to_string());
            let _ = writeln!(s, "stat {} {} {}", self.stats.counts[i], ban, a);
        }
        s
    }

    pub fn from_text(text: &str, world: &World) -> Result<KnowledgeGraph> {
        let mut lines = text.lines();
        if lines.next() != Some(KG_HEADER) {
            return Err(Error::Parse(format!("missing `{KG_HEADER}` header")));
        }
        let mut kg = KnowledgeGraph::new(world);
        kg.store = SnapshotStore::new();
        kg.order.clear();
        kg.out.clear();
        let mut stats_seen = 0usize;
        let bad = |l: &str| Error::Parse(format!("bad knowledge graph line `{l}`"));
        for line in lines {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            match kind {
                "world" => {
                    if rest != world.source_hash() {
                        return Err(Error::Parse(
                            "knowledge graph was built for a different world".into(),
                        ));
                    }
                    kg.world_hash = rest.to_string();
                }
                "root" => kg.root = rest.parse()?,
                "meta" => {
                    for kv in rest.split_whitespace() {
                        match kv.split_once('=') {
                            Some(("successful_steps", v)) => {
                                kg.successful_steps = v.parse().map_err(|_| bad(line))?
                            }
                            Some(("attempts", v)) => {
                                kg.attempts = v.parse().map_err(|_| bad(line))?
                            }
                            Some(("nodes" | "edges", _)) => {}
                            _ => return Err(bad(line)),
                        }
                    }
                }
                "node" => {
                    let (key, body) = rest.split_once(' ').ok_or_else(|| bad(line))?;
                    let key: StateKey = key.parse()?;
                    let state = SceneGraph::from_canonical(&body.replace(';', "\n"), world)?;
                    kg.store.insert_keyed(world, key, state)?;
                    kg.order.push(key);
                    kg.out.insert(key, Vec::new());
                }
                "edge" => {
                    let mut parts = rest.splitn(4, ' ');
                    let seq = parts
                        .next()
                        .ok_or_else(|| bad(line))?
                        .parse()
                        .map_err(|_| bad(line))?;
                    let src: StateKey = parts.next().ok_or_else(|| bad(line))?.parse()?;
                    let dst: StateKey = parts.next().ok_or_else(|| bad(line))?.parse()?;
                    let action: GroundedAction = parts.next().ok_or_else(|| bad(line))?.parse()?;
                    let list = kg
                        .out
                        .get_mut(&src)
                        .ok_or_else(|| Error::Parse(format!("edge from unknown node {src}")))?;
                    list.push(kg.edges.len());
                    kg.edges.push(Edge {
                        src,
                        action,
                        dst,
                        seq,
                    });
                }
                "stat" => {
                    let mut parts = rest.splitn(3, ' ');
                    let count = parts
                        .next()
                        .ok_or_else(|| bad(line))?
                        .parse()
                        .map_err(|_| bad(line))?;
                    let ban = match parts.next().ok_or_else(|| bad(line))? {
                        "-" => None,
                        b => Some(b.parse().map_err(|_| bad(line))?),
                    };
                    let action: GroundedAction = parts.next().ok_or_else(|| bad(line))?.parse()?;
                    if kg.actions.get(stats_seen) != Some(&action) {
                        return Err(Error::Parse(format!(
                            "stat table out of order at `{action}`"
                        )));
                    }
                    kg.stats.counts[stats_seen] = count;
                    kg.stats.banned_at[stats_seen] = ban;
                    stats_seen += 1;
                }
                _ => return Err(bad(line)),
            }
        }
        if stats_seen != kg.actions.len() {
            return Err(Error::Parse("stat table incomplete".into()));
        }
        if !kg.out.contains_key(&kg.root) {
            return Err(Error::Parse("root is not a node".into()));
        }
        if let Some(e) = kg.edges.iter().find(|e| !kg.out.contains_key(&e.dst)) {
            return Err(Error::Parse(format!("edge to unknown node {}", e.dst)));
        }
        Ok(kg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_artifact(path, &self.to_text())
    }

    pub fn load(path: &Path, world: &World) -> Result<KnowledgeGraph> {
        let text = io::read_artifact(path, KG_HEADER)?;
        io::in_file(path, KnowledgeGraph::from_text(&text, world))
    }
}

pub fn distinct_action_count(edges: &[Edge]) -> usize {
    edges.iter().map(|e| e.action).collect::<HashSet<_>>().len()
}

struct Explorer<'w> {
    world: &'w World,
    kg: KnowledgeGraph,
    index: HashMap<GroundedAction, usize>,
    rng: ChaCha8Rng,
    max_wrong: usize,
}

impl Explorer<'_> {
    /// Walks from `start` until `steps` successes or `max_wrong`
    /// consecutive failures.
    fn walk(&mut self, start: StateKey, steps: usize) {
        let mut cur = start;
        let mut state = (*self.kg.state(&cur).expect("node stored")).clone();
        let mut done = 0;
        let mut wrong = 0;
        while done < steps && wrong < self.max_wrong {
            let exclude: HashSet<usize> = self
                .kg
                .outgoing(&cur)
                .map(|e| self.index[&e.action])
                .collect();
            let Ok(i) = weighted_sample(&self.kg.stats, &exclude, &mut self.rng) else {
                break;
            };
            self.kg.attempts += 1;
            self.kg.stats.counts[i] += 1;
            let action = self.kg.actions[i];
            let outcome = self.world.step(&state, &action);
            match outcome.status {
                Status::Success => {
                    let dst = self.kg.add_node(self.world, &outcome.next_state);
                    let id = self.kg.edges.len();
                    self.kg.edges.push(Edge {
                        src: cur,
                        action,
                        dst,
                        seq: self.kg.attempts,
                    });
                    self.kg.out.get_mut(&cur).expect("node exists").push(id);
                    self.kg.successful_steps += 1;
                    cur = dst;
                    state = outcome.next_state;
                    done += 1;
                    wrong = 0;
                }
                Status::InvalidAction => {
                    self.kg.stats.banned_at[i] = Some(self.kg.attempts);
                    wrong += 1;
                }
                Status::PreconditionFailed => wrong += 1,
            }
        }
    }
}

pub fn explore(world: &World, config: &ExplorationConfig) -> KnowledgeGraph {
    let kg = KnowledgeGraph::new(world);
    let index = kg
        .actions
        .iter()
        .enumerate()
        .map(|(i, a)| (*a, i))
        .collect();
    let mut ex = Explorer {
        world,
        kg,
        index,
        rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
        max_wrong: config.max_wrong_per_node,
    };
    let root = ex.kg.root;
    ex.walk(root, config.initial_steps);
    for _ in 0..config.node_count {
        let pick = ex.rng.gen_range(0..ex.kg.order.len());
        let node = ex.kg.order[pick];
        ex.walk(node, config.steps_per_node);
    }
    log::info!(
        "explored {} nodes, {} edges, {} distinct actions",
        ex.kg.node_count(),
        ex.kg.edges.len(),
        ex.kg.distinct_action_count()
    );
    ex.kg
}

/// Results of a full consistency audit.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub edges_checked: usize,
    pub replay_failures: Vec<String>,
    pub duplicate_edges: Vec<String>,
    pub ban_violations: Vec<String>,
    pub dangling: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.replay_failures.is_empty()
            && self.duplicate_edges.is_empty()
            && self.ban_violations.is_empty()
            && self.dangling.is_empty()
    }
}

/// Re-executes every edge from its source snapshot and checks edge
/// uniqueness and ban permanence.
pub fn audit(world: &World, kg: &KnowledgeGraph) -> AuditReport {
    let mut report = AuditReport::default();
    let banned: HashMap<GroundedAction, u64> = kg
        .actions
        .iter()
        .zip(&kg.stats.banned_at)
        .filter_map(|(a, b)| b.map(|b| (*a, b)))
        .collect();
    let mut labels: BTreeSet<(StateKey, String)> = BTreeSet::new();
    for e in &kg.edges {
        report.edges_checked += 1;
        let (Ok(src), Ok(dst)) = (kg.state(&e.src), kg.state(&e.dst)) else {
            report.dangling.push(format!("{} -> {}", e.src, e.dst));
            continue;
        };
        let out = world.step(&src, &e.action);
        if out.status != Status::Success
            || out.next_state.canonical_text(world) != dst.canonical_text(world)
        {
            report
                .replay_failures
                .push(format!("{} {}", e.src, e.action));
        }
        if !labels.insert((e.src, e.action.to_string())) {
            report
                .duplicate_edges
                .push(format!("{} {}", e.src, e.action));
        }
        if banned.contains_key(&e.action) {
            report.ban_violations.push(e.action.to_string());
        }
    }
    report
}
