//! Action effect features: an extractor trained with action-mapping,
//! feature-distinguish and locally-additive losses, and a memory of
//! per-action mean features.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::apm::{target_vector, ActionDistribution, ActionHeads, EncoderInput, StateEncoder};
use crate::error::{Error, Result};
use crate::explorer::KnowledgeGraph;
use crate::io;
use crate::learncore::{self, Adam, Graph, ParamId, Params, Tensor, Var};
use crate::taskgen::{text_hash, Dataset, DatasetSplit, TaskSample};
use crate::world::{GroundedAction, SceneGraph, StateKey, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectConfig {
    pub width: usize,
    pub d_up: usize,
    pub epsilon: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
}

impl Default for EffectConfig {
    fn default() -> Self {
        EffectConfig {
            width: 64,
            d_up: 256,
            epsilon: 0.1,
            epochs: 30,
            lr: 3e-3,
            batch_size: 8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn init(
        params: &mut Params,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        Dense {
            w: params.add_glorot(&format!("{name}_w"), rows, cols, rng),
            b: params.add_zeros(&format!("{name}_b"), 1, cols),
        }
    }

    fn load(params: &Params, name: &str) -> Result<Self> {
        let get = |n: String| {
            params
                .id(&n)
                .ok_or_else(|| Error::Shape(format!("missing parameter block `{n}`")))
        };
        Ok(Dense {
            w: get(format!("{name}_w"))?,
            b: get(format!("{name}_b"))?,
        })
    }

    fn affine(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let z = g.matmul(x, w)?;
        g.add_row_bias(z, b)
    }

    fn tanh(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let z = self.affine(g, x)?;
        Ok(g.tanh(z))
    }

    fn relu(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let z = self.affine(g, x)?;
        Ok(g.relu(z))
    }
}

#[derive(Clone, Debug)]
pub struct EffectExtractor {
    pub params: Params,
    encoder: StateEncoder,
    up: [Dense; 2],
    down: [Dense; 2],
    heads: ActionHeads,
}

/// Graph handles for one extracted pair.
#[derive(Clone, Copy, Debug)]
pub struct Extracted {
    pub feature: Var,
    pub down: Var,
}

impl EffectExtractor {
    pub fn init(world: &World, width: usize, d_up: usize, seed: u64) -> Self {
        let mut params = Params::new();
        let mut rng = learncore::rng(seed ^ 0xeffe);
        let encoder = StateEncoder::init(&mut params, "enc", world, width, seed);
        let up = [
            Dense::init(&mut params, "up0", width, d_up, &mut rng),
            Dense::init(&mut params, "up1", d_up, d_up, &mut rng),
        ];
        let down = [
            Dense::init(&mut params, "down0", d_up, d_up, &mut rng),
            Dense::init(&mut params, "down1", d_up, width, &mut rng),
        ];
        let heads = ActionHeads::init(&mut params, "head", width, seed);
        EffectExtractor {
            params,
            encoder,
            up,
            down,
            heads,
        }
    }

    pub fn from_params(params: Params, world: &World) -> Result<Self> {
        Ok(EffectExtractor {
            encoder: StateEncoder::from_params(&params, "enc", world)?,
            up: [Dense::load(&params, "up0")?, Dense::load(&params, "up1")?],
            down: [
                Dense::load(&params, "down0")?,
                Dense::load(&params, "down1")?,
            ],
            heads: ActionHeads::from_params(&params, "head")?,
            params,
        })
    }

    pub fn d_up(&self) -> usize {
        self.params.get(self.up[1].w).cols
    }

    /// Encodes one state on the tape.
    pub fn encode(&self, g: &mut Graph<'_>, x: &EncoderInput) -> Result<Var> {
        self.encoder.forward(g, x)
    }

    /// Effect feature and downsampled feature from two pooled encodings.
    pub fn extract_encoded(&self, g: &mut Graph<'_>, gi: Var, gj: Var) -> Result<Extracted> {
        let psi = g.absdiff(gi, gj)?;
        let h = self.up[0].tanh(g, psi)?;
        let feature = self.up[1].tanh(g, h)?;
        let h = self.down[0].relu(g, feature)?;
        let down = self.down[1].relu(g, h)?;
        Ok(Extracted { feature, down })
    }

    pub fn extract_inputs(
        &self,
        si: &EncoderInput,
        sj: &EncoderInput,
    ) -> Result<(Vec<f64>, ActionDistribution)> {
        let mut g = Graph::new(&self.params);
        let gi = self.encode(&mut g, si)?;
        let gj = self.encode(&mut g, sj)?;
        let e = self.extract_encoded(&mut g, gi, gj)?;
        let dist = self.heads.distribution(&mut g, e.down)?;
        Ok((g.value(e.feature).data.clone(), dist))
    }

    pub fn extract(
        &self,
        si: &SceneGraph,
        sj: &SceneGraph,
    ) -> Result<(Vec<f64>, ActionDistribution)> {
        self.extract_inputs(&EncoderInput::new(si), &EncoderInput::new(sj))
    }

    /// Feature only; skips the action heads.
    pub fn feature(&self, si: &EncoderInput, sj: &EncoderInput) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let gi = self.encode(&mut g, si)?;
        let gj = self.encode(&mut g, sj)?;
        let psi = g.absdiff(gi, gj)?;
        let h = self.up[0].tanh(&mut g, psi)?;
        let f = self.up[1].tanh(&mut g, h)?;
        Ok(g.value(f).data.clone())
    }

    /// BCE of the pair's head prediction against `a`.
    pub fn pair_act_loss(
        &self,
        g: &mut Graph<'_>,
        e: Extracted,
        a: &GroundedAction,
    ) -> Result<Var> {
        let y = self.heads.forward_train(g, e.down, a.name)?;
        g.bce(y, target_vector(a))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path, world: &World) -> Result<Self> {
        EffectExtractor::from_params(Params::load(path)?, world)
            .map_err(|e| Error::artifact(path, e.to_string()))
    }
}

/// `1 - cos` for the same action, `max(0, cos - eps)` otherwise.
pub fn loss_feat(g: &mut Graph<'_>, a: Var, b: Var, same_action: bool, eps: f64) -> Result<Var> {
    let c = g.cosine(a, b)?;
    if same_action {
        let one = g.input(Tensor::row_vec(vec![1.0]));
        g.sub(one, c)
    } else {
        let e = g.input(Tensor::row_vec(vec![eps]));
        let d = g.sub(c, e)?;
        Ok(g.relu(d))
    }
}

/// Squared error of `left + right` against `skip`, averaged over width.
pub fn loss_add(g: &mut Graph<'_>, left: Var, right: Var, skip: Var) -> Result<Var> {
    let sum = g.add(left, right)?;
    g.mse(sum, skip)
}

pub fn loss_feat_value(a: &[f64], b: &[f64], same_action: bool, eps: f64) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(if same_action {
        1.0 - c
    } else {
        (c - eps).max(0.0)
    })
}

/// One overlapping segment `(s_{t-1}, a_{t-1}, s_t, a_t, s_{t+1})`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub states: [StateKey; 3],
    pub actions: [GroundedAction; 2],
}

/// All segments of a trajectory, in order.
pub fn segments(sample: &TaskSample) -> Vec<Segment> {
    (1..sample.gt_actions.len())
        .map(|t| Segment {
            states: [sample.nodes[t - 1], sample.nodes[t], sample.nodes[t + 1]],
            actions: [sample.gt_actions[t - 1], sample.gt_actions[t]],
        })
        .collect()
}

/// Per-component loss sums over one trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub act: f64,
    pub feat: f64,
    pub add: f64,
}

/// Builds the total loss of one trajectory on the tape. A trajectory with
/// one action contributes only its action-mapping pair; longer ones
/// contribute every segment. Returns the loss and the number of items.
fn trajectory_loss(
    ex: &EffectExtractor,
    g: &mut Graph<'_>,
    s: &TaskSample,
    cache: &HashMap<StateKey, EncoderInput>,
    eps: f64,
    parts: &mut LossParts,
) -> Result<(Var, usize)> {
    let enc: Vec<Var> = s
        .nodes
        .iter()
        .map(|k| ex.encode(g, &cache[k]))
        .collect::<Result<_>>()?;
    let adj: Vec<Extracted> = (0..s.gt_actions.len())
        .map(|t| ex.extract_encoded(g, enc[t], enc[t + 1]))
        .collect::<Result<_>>()?;
    let acts: Vec<Var> = adj
        .iter()
        .zip(&s.gt_actions)
        .map(|(e, a)| ex.pair_act_loss(g, *e, a))
        .collect::<Result<_>>()?;
    if acts.len() == 1 {
        parts.act += g.value(acts[0]).scalar();
        return Ok((acts[0], 1));
    }
    let mut terms = Vec::new();
    for t in 1..s.gt_actions.len() {
        let act = g.add(acts[t - 1], acts[t])?;
        parts.act += g.value(act).scalar();
        terms.push(act);
        let (l, r) = (adj[t - 1].feature, adj[t].feature);
        match loss_feat(g, l, r, s.gt_actions[t - 1] == s.gt_actions[t], eps) {
            Ok(f) => {
                parts.feat += g.value(f).scalar();
                terms.push(f);
            }
            Err(Error::ZeroVector) => {}
            Err(e) => return Err(e),
        }
        let skip = ex.extract_encoded(g, enc[t - 1], enc[t + 1])?.feature;
        let add = loss_add(g, l, r, skip)?;
        parts.add += g.value(add).scalar();
        terms.push(add);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, s.gt_actions.len() - 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectEpochLog {
    pub epoch: usize,
    pub total: f64,
    pub act: f64,
    pub feat: f64,
    pub add: f64,
}

pub fn effect_csv(log: &[EffectEpochLog]) -> String {
    let mut s = String::from("epoch,total,act,feat,add\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.total, e.act, e.feat, e.add
        ));
    }
    s
}

fn cache_for(
    kg: &KnowledgeGraph,
    samples: &[&TaskSample],
) -> Result<HashMap<StateKey, EncoderInput>> {
    crate::apm::input_cache(kg, samples)
}

/// Minimizes the unweighted sum of the three losses over the training
/// trajectories. Epoch values are per-item means.
pub fn train_extractor(
    world: &World,
    kg: &KnowledgeGraph,
    ds: &Dataset,
    split: &DatasetSplit,
    cfg: &EffectConfig,
    seed: u64,
) -> Result<(EffectExtractor, Vec<EffectEpochLog>)> {
    let train: Vec<&TaskSample> = split.train.iter().map(|&i| &ds.samples[i]).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let cache = cache_for(kg, &train)?;
    let mut ex = EffectExtractor::init(world, cfg.width, cfg.d_up, seed);
    let mut opt = Adam::new(&ex.params, cfg.lr);
    let mut rng = learncore::rng(seed ^ 0xef5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut parts = LossParts::default();
        let mut total = 0.0;
        let mut items = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let frozen = ex.clone();
            let mut batch_parts = LossParts::default();
            let mut batch_items = 0usize;
            let loss = learncore::train_step(&mut ex.params, &mut opt, step, cfg.clip_norm, |g| {
                batch_parts = LossParts::default();
                let mut sum: Option<Var> = None;
                batch_items = 0;
                for &i in batch {
                    let (l, n) = trajectory_loss(
                        &frozen,
                        g,
                        train[i],
                        &cache,
                        cfg.epsilon,
                        &mut batch_parts,
                    )?;
                    batch_items += n;
                    sum = Some(match sum {
                        None => l,
                        Some(s) => g.add(s, l)?,
                    });
                }
                Ok(g.scale(sum.expect("nonempty batch"), 1.0 / batch_items as f64))
            })?;
            step += 1;
            total += loss * batch_items as f64;
            items += batch_items;
            parts.act += batch_parts.act;
            parts.feat += batch_parts.feat;
            parts.add += batch_parts.add;
        }
        let n = items.max(1) as f64;
        let entry = EffectEpochLog {
            epoch,
            total: total / n,
            act: parts.act / n,
            feat: parts.feat / n,
            add: parts.add / n,
        };
        log::info!(
            "effect epoch {epoch}: total {:.5} act {:.5} feat {:.5} add {:.5}",
            entry.total,
            entry.act,
            entry.feat,
            entry.add
        );
        log.push(entry);
    }
    Ok((ex, log))
}

/// Mean effect feature per distinct training action; rows in
/// lexicographic action order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMemory {
    pub d_up: usize,
    pub train_hash: String,
    pub actions: Vec<GroundedAction>,
    pub counts: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

pub const MEMORY_HEADER: &str = "m3-mem v1";

/// Hash identifying the training trajectories a memory was built from.
pub fn train_hash(ds: &Dataset, split: &DatasetSplit) -> String {
    let mut text = String::new();
    for &i in &split.train {
        let s = &ds.samples[i];
        text.push_str(&s.id.to_string());
        for a in &s.gt_actions {
            text.push('\t');
            text.push_str(&a.to_string());
        }
        text.push('\n');
    }
    text_hash(&text)
}

pub fn build_memory(
    ex: &EffectExtractor,
    kg: &KnowledgeGraph,
    ds: &Dataset,
    split: &DatasetSplit,
) -> Result<FeatureMemory> {
    let train: Vec<&TaskSample> = split.train.iter().map(|&i| &ds.samples[i]).collect();
    let cache = cache_for(kg, &train)?;
    let d_up = ex.d_up();
    let mut sums: BTreeMap<GroundedAction, (Vec<f64>, usize)> = BTreeMap::new();
    for s in &train {
        for (t, a) in s.gt_actions.iter().enumerate() {
            let f = ex.feature(&cache[&s.nodes[t]], &cache[&s.nodes[t + 1]])?;
            let e = sums.entry(*a).or_insert_with(|| (vec![0.0; d_up], 0));
            for (x, y) in e.0.iter_mut().zip(&f) {
                *x += y;
            }
            e.1 += 1;
        }
    }
    let mut mem = FeatureMemory {
        d_up,
        train_hash: train_hash(ds, split),
        actions: Vec::new(),
        counts: Vec::new(),
        rows: Vec::new(),
    };
    for (a, (sum, n)) in sums {
        mem.actions.push(a);
        mem.counts.push(n);
        mem.rows
            .push(sum.into_iter().map(|x| x / n as f64).collect());
    }
    Ok(mem)
}

impl FeatureMemory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn row_of(&self, a: &GroundedAction) -> Option<usize> {
        self.actions.binary_search(a).ok()
    }

    /// `N x d_up` matrix of rows.
    pub fn matrix(&self) -> Tensor {
        Tensor {
            rows: self.len(),
            cols: self.d_up,
            data: self.rows.concat(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MEMORY_HEADER}\nmeta\td_up={}\ttrain={}\n",
            self.d_up, self.train_hash
        );
        for ((a, n), row) in self.actions.iter().zip(&self.counts).zip(&self.rows) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&format!("row\t{a}\t{n}\t{}\n", vals.join(" ")));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MEMORY_HEADER) {
            return Err(Error::Parse(format!("expected `{MEMORY_HEADER}`")));
        }
        let meta = lines
            .next()
            .ok_or_else(|| Error::Parse("missing meta line".into()))?;
        let mut d_up = None;
        let mut train_hash = None;
        for f in meta.split('\t').skip(1) {
            match f.split_once('=') {
                Some(("d_up", v)) => d_up = v.parse().ok(),
                Some(("train", v)) => train_hash = Some(v.to_string()),
                _ => return Err(Error::Parse(format!("bad meta field `{f}`"))),
            }
        }
        let d_up = d_up.ok_or_else(|| Error::Parse("missing d_up".into()))?;
        let mut mem = FeatureMemory {
            d_up,
            train_hash: train_hash.ok_or_else(|| Error::Parse("missing train hash".into()))?,
            actions: Vec::new(),
            counts: Vec::new(),
            rows: Vec::new(),
        };
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 || f[0] != "row" {
                return Err(Error::Parse(format!("bad memory line `{line}`")));
            }
            let a: GroundedAction = f[1].parse()?;
            let n: usize = f[2]
                .parse()
                .map_err(|_| Error::Parse(format!("bad count `{}`", f[2])))?;
            let row: Vec<f64> = f[3]
                .split(' ')
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Parse(format!("bad value `{v}`")))
                })
                .collect::<Result<_>>()?;
            if row.len() != d_up {
                return Err(Error::Parse(format!(
                    "row for `{a}` has width {}",
                    row.len()
                )));
            }
            if mem.actions.last().is_some_and(|p| *p >= a) {
                return Err(Error::Parse("memory rows out of order".into()));
            }
            mem.actions.push(a);
            mem.counts.push(n);
            mem.rows.push(row);
        }
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_artifact(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_artifact(path, MEMORY_HEADER)?;
        io::in_file(path, FeatureMemory::from_text(&text))
    }
}
