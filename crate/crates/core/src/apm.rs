//! Action predictive model: a shared scene-graph encoder, the absolute
//! feature difference between current and goal states, and factored
//! action heads (name, first object, second object, state).

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explorer::KnowledgeGraph;
use crate::learncore::{self, Adam, Graph, ParamId, Params, Sparse, Tensor, Var};
use crate::taskgen::{Dataset, DatasetSplit, TaskSample};
use crate::world::vocab::{ACTION_NAMES, OBJECT_NAMES, STATE_NAMES};
use crate::world::{
    ActionName, GroundedAction, ObjectName, Param, ParamKind, Relation, SceneGraph, StateKey,
    StateSym, World,
};

pub const N_ACT: usize = ActionName::COUNT;
pub const N_OBJ: usize = ObjectName::COUNT;
pub const N_STATE: usize = StateSym::COUNT;
/// Width of the concatenated target `(name, object 1, object 2, state)`.
pub const N_LABELS: usize = N_ACT + 2 * N_OBJ + N_STATE;
/// Self features plus Close and both directions of Inside, On and Stuck.
const N_BLOCKS: usize = 8;

/// Precomputed, order-canonical encoder input for one scene graph.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    obj: Vec<usize>,
    zone: Vec<usize>,
    states: Tensor,
    blocks: Vec<Sparse>,
}

impl EncoderInput {
    /// Objects are taken in id order, so the encoding does not depend on
    /// how the scene lists them.
    pub fn new(scene: &SceneGraph) -> Self {
        let mut objects: Vec<_> = scene.objects.iter().collect();
        objects.sort_by_key(|o| o.id);
        let n = objects.len();
        let row: HashMap<u16, usize> = objects.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
        let mut states = Tensor::zeros(n, N_STATE);
        for (i, o) in objects.iter().enumerate() {
            for s in o.states.iter() {
                states.data[i * N_STATE + s.index()] = 1.0;
            }
        }
        let mut lists: Vec<Vec<(usize, usize)>> = vec![Vec::new(); N_BLOCKS - 1];
        for &(s, r, o) in &scene.relations {
            let (si, oi) = (row[&s], row[&o]);
            if r == Relation::CLOSE {
                lists[0].push((si, oi));
            } else {
                let base = 1 + 2 * (r.index() - 1);
                lists[base].push((si, oi));
                lists[base + 1].push((oi, si));
            }
        }
        let blocks = lists
            .into_iter()
            .map(|pairs| {
                let mut deg = vec![0usize; n];
                for &(i, _) in &pairs {
                    deg[i] += 1;
                }
                Sparse {
                    rows: n,
                    cols: n,
                    entries: pairs
                        .into_iter()
                        .map(|(i, j)| (i, j, 1.0 / deg[i] as f64))
                        .collect(),
                }
            })
            .collect();
        EncoderInput {
            obj: objects.iter().map(|o| o.name.index()).collect(),
            zone: objects.iter().map(|o| o.zone.0 as usize).collect(),
            states,
            blocks,
        }
    }
}

/// One round of relation-typed mean aggregation over object embeddings,
/// then mean pooling to a fixed-width vector.
#[derive(Clone, Debug)]
pub struct StateEncoder {
    pub width: usize,
    obj: ParamId,
    state: ParamId,
    zone: ParamId,
    w: ParamId,
    b: ParamId,
}

fn need(params: &Params, name: &str) -> Result<ParamId> {
    params
        .id(name)
        .ok_or_else(|| Error::Shape(format!("missing parameter block `{name}`")))
}

impl StateEncoder {
    pub fn init(params: &mut Params, prefix: &str, world: &World, width: usize, seed: u64) -> Self {
        let mut rng = learncore::rng(seed ^ 0x0e5c);
        let zones: Vec<&str> = world.zones().iter().map(String::as_str).collect();
        StateEncoder {
            width,
            obj: params.add_symbol_table(&format!("{prefix}.obj"), &OBJECT_NAMES, width, seed),
            state: params.add_symbol_table(&format!("{prefix}.state"), &STATE_NAMES, width, seed),
            zone: params.add_symbol_table(&format!("{prefix}.zone"), &zones, width, seed),
            w: params.add_glorot(
                &format!("{prefix}.agg_w"),
                N_BLOCKS * width,
                width,
                &mut rng,
            ),
            b: params.add_zeros(&format!("{prefix}.agg_b"), 1, width),
        }
    }

    pub fn from_params(params: &Params, prefix: &str, world: &World) -> Result<Self> {
        let obj = need(params, &format!("{prefix}.obj"))?;
        let width = params.get(obj).cols;
        let enc = StateEncoder {
            width,
            obj,
            state: need(params, &format!("{prefix}.state"))?,
            zone: need(params, &format!("{prefix}.zone"))?,
            w: need(params, &format!("{prefix}.agg_w"))?,
            b: need(params, &format!("{prefix}.agg_b"))?,
        };
        if params.get(enc.zone).rows != world.zones().len() {
            return Err(Error::Shape("zone table does not match the world".into()));
        }
        if params.get(enc.w).shape() != (N_BLOCKS * width, width) {
            return Err(Error::Shape(format!("{prefix}.agg_w has the wrong shape")));
        }
        Ok(enc)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: &EncoderInput) -> Result<Var> {
        let obj = g.param(self.obj);
        let st = g.param(self.state);
        let zn = g.param(self.zone);
        let e_obj = g.gather_rows(obj, &x.obj)?;
        let e_zone = g.gather_rows(zn, &x.zone)?;
        let multi = g.input(x.states.clone());
        let e_state = g.matmul(multi, st)?;
        let h0 = g.add(e_obj, e_state)?;
        let h0 = g.add(h0, e_zone)?;
        let mut parts = vec![h0];
        for block in &x.blocks {
            parts.push(g.spmm(block, h0)?);
        }
        let cat = g.concat(&parts)?;
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(cat, w)?;
        let h = g.add_row_bias(h, b)?;
        let h = g.relu(h);
        g.mean_rows(h)
    }
}

/// Factored action distribution. Parameter heads are conditioned on the
/// action name, so they are stored per name. Every vector sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub name: Vec<f64>,
    pub o1: Vec<Vec<f64>>,
    pub o2: Vec<Vec<f64>>,
    pub state: Vec<Vec<f64>>,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

/// Highest value; ties go to the lexicographically smallest label.
fn argmax_by_label<F: Fn(usize) -> &'static str>(v: &[f64], label: F) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] || (v[i] == v[best] && label(i) < label(best)) {
            best = i;
        }
    }
    best
}

impl ActionDistribution {
    /// Probability product of the components `a` uses.
    pub fn score(&self, a: &GroundedAction) -> f64 {
        let n = a.name.index();
        let mut p = self.name[n] * self.o1[n][a.param1.index()];
        match a.param2 {
            Param::None => {}
            Param::Object(o) => p *= self.o2[n][o.index()],
            Param::State(s) => p *= self.state[n][s.index()],
        }
        p
    }

    /// Unrestricted: argmax name, then argmax of only the heads that name
    /// uses. Restricted: the member of `restriction` with the highest
    /// [`ActionDistribution::score`], ties to the lexicographically
    /// smallest action.
    pub fn assemble(
        &self,
        world: &World,
        restriction: Option<&[GroundedAction]>,
    ) -> Option<GroundedAction> {
        if let Some(set) = restriction {
            let mut best: Option<(f64, GroundedAction)> = None;
            for a in set {
                let s = self.score(a);
                best = match best {
                    Some((bs, ba)) if bs > s || (bs == s && ba <= *a) => Some((bs, ba)),
                    _ => Some((s, *a)),
                };
            }
            return best.map(|(_, a)| a);
        }
        let n = argmax_by_label(&self.name, |i| ACTION_NAMES[i]);
        let name = ActionName::from_index(n).expect("name index");
        let o1 = ObjectName::from_index(argmax_by_label(&self.o1[n], |i| OBJECT_NAMES[i]))
            .expect("object");
        let param2 = match world.schema(name).map(|s| &s.param2) {
            Some(ParamKind::Object(_)) => Param::Object(
                ObjectName::from_index(argmax_by_label(&self.o2[n], |i| OBJECT_NAMES[i]))
                    .expect("object"),
            ),
            Some(ParamKind::State) => Param::State(
                StateSym::from_index(argmax_by_label(&self.state[n], |i| STATE_NAMES[i]))
                    .expect("state"),
            ),
            _ => Param::None,
        };
        Some(GroundedAction {
            name,
            param1: o1,
            param2,
        })
    }
}

/// Name head on the feature; parameter heads on `concat(h_a, feature)`,
/// where `h_a` embeds the action name.
#[derive(Clone, Debug)]
pub struct ActionHeads {
    act_w: ParamId,
    act_emb: ParamId,
    o1_w: ParamId,
    o1_b: ParamId,
    o2_w: ParamId,
    o2_b: ParamId,
    s_w: ParamId,
    s_b: ParamId,
}

impl ActionHeads {
    pub fn init(params: &mut Params, prefix: &str, width: usize, seed: u64) -> Self {
        let mut rng = learncore::rng(seed ^ 0x4ead);
        let h = 2 * width;
        ActionHeads {
            act_w: params.add_glorot(&format!("{prefix}.act_w"), width, N_ACT, &mut rng),
            act_emb: params.add_symbol_table(
                &format!("{prefix}.act_emb"),
                &ACTION_NAMES,
                width,
                seed,
            ),
            o1_w: params.add_glorot(&format!("{prefix}.o1_w"), h, N_OBJ, &mut rng),
            o1_b: params.add_zeros(&format!("{prefix}.o1_b"), 1, N_OBJ),
            o2_w: params.add_glorot(&format!("{prefix}.o2_w"), h, N_OBJ, &mut rng),
            o2_b: params.add_zeros(&format!("{prefix}.o2_b"), 1, N_OBJ),
            s_w: params.add_glorot(&format!("{prefix}.s_w"), h, N_STATE, &mut rng),
            s_b: params.add_zeros(&format!("{prefix}.s_b"), 1, N_STATE),
        }
    }

    pub fn from_params(params: &Params, prefix: &str) -> Result<Self> {
        let p = |n: &str| need(params, &format!("{prefix}.{n}"));
        Ok(ActionHeads {
            act_w: p("act_w")?,
            act_emb: p("act_emb")?,
            o1_w: p("o1_w")?,
            o1_b: p("o1_b")?,
            o2_w: p("o2_w")?,
            o2_b: p("o2_b")?,
            s_w: p("s_w")?,
            s_b: p("s_b")?,
        })
    }

    fn param_heads(&self, g: &mut Graph<'_>, feat: Var, name: usize) -> Result<[Var; 3]> {
        let emb = g.param(self.act_emb);
        let ha = g.gather_rows(emb, &[name])?;
        let h = g.concat(&[ha, feat])?;
        let mut out = Vec::with_capacity(3);
        for (w, b) in [
            (self.o1_w, self.o1_b),
            (self.o2_w, self.o2_b),
            (self.s_w, self.s_b),
        ] {
            let (w, b) = (g.param(w), g.param(b));
            let z = g.matmul(h, w)?;
            let z = g.add_row_bias(z, b)?;
            out.push(g.sigmoid(z));
        }
        Ok([out[0], out[1], out[2]])
    }

    fn name_head(&self, g: &mut Graph<'_>, feat: Var) -> Result<Var> {
        let w = g.param(self.act_w);
        let z = g.matmul(feat, w)?;
        Ok(g.sigmoid(z))
    }

    /// Concatenated `1 x N_LABELS` prediction with teacher forcing on `name`.
    pub fn forward_train(&self, g: &mut Graph<'_>, feat: Var, name: ActionName) -> Result<Var> {
        let y_act = self.name_head(g, feat)?;
        let [o1, o2, s] = self.param_heads(g, feat, name.index())?;
        g.concat(&[y_act, o1, o2, s])
    }

    pub fn distribution(&self, g: &mut Graph<'_>, feat: Var) -> Result<ActionDistribution> {
        let y_act = self.name_head(g, feat)?;
        let name = normalize(&g.value(y_act).data);
        let mut dist = ActionDistribution {
            name,
            o1: Vec::with_capacity(N_ACT),
            o2: Vec::with_capacity(N_ACT),
            state: Vec::with_capacity(N_ACT),
        };
        for n in 0..N_ACT {
            let [o1, o2, s] = self.param_heads(g, feat, n)?;
            dist.o1.push(normalize(&g.value(o1).data));
            dist.o2.push(normalize(&g.value(o2).data));
            dist.state.push(normalize(&g.value(s).data));
        }
        Ok(dist)
    }
}

/// One-hot encoding of `a` over `(name, object 1, object 2, state)`.
pub fn target_vector(a: &GroundedAction) -> Tensor {
    let mut t = Tensor::zeros(1, N_LABELS);
    t.data[a.name.index()] = 1.0;
    t.data[N_ACT + a.param1.index()] = 1.0;
    match a.param2 {
        Param::None => {}
        Param::Object(o) => t.data[N_ACT + N_OBJ + o.index()] = 1.0,
        Param::State(s) => t.data[N_ACT + 2 * N_OBJ + s.index()] = 1.0,
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApmConfig {
    pub width: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    /// Weight each label by inverse training frequency instead of one.
    pub inverse_frequency_weights: bool,
}

impl Default for ApmConfig {
    fn default() -> Self {
        ApmConfig {
            width: 64,
            epochs: 30,
            lr: 3e-3,
            batch_size: 8,
            clip_norm: Some(5.0),
            inverse_frequency_weights: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub fn epoch_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_accuracy\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{}\n",
            e.epoch, e.train_loss, e.val_accuracy
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct Apm {
    pub params: Params,
    pub encoder: StateEncoder,
    pub heads: ActionHeads,
}

impl Apm {
    pub fn init(world: &World, width: usize, seed: u64) -> Self {
        let mut params = Params::new();
        let encoder = StateEncoder::init(&mut params, "enc", world, width, seed);
        let heads = ActionHeads::init(&mut params, "head", width, seed);
        Apm {
            params,
            encoder,
            heads,
        }
    }

    pub fn from_params(params: Params, world: &World) -> Result<Self> {
        let encoder = StateEncoder::from_params(&params, "enc", world)?;
        let heads = ActionHeads::from_params(&params, "head")?;
        Ok(Apm {
            params,
            encoder,
            heads,
        })
    }

    pub fn encode(&self, scene: &SceneGraph) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let v = self.encoder.forward(&mut g, &EncoderInput::new(scene))?;
        Ok(g.value(v).data.clone())
    }

    pub fn predict(&self, s: &SceneGraph, goal: &SceneGraph) -> Result<ActionDistribution> {
        self.predict_inputs(&EncoderInput::new(s), &EncoderInput::new(goal))
    }

    pub fn predict_inputs(
        &self,
        s: &EncoderInput,
        goal: &EncoderInput,
    ) -> Result<ActionDistribution> {
        let mut g = Graph::new(&self.params);
        let gs = self.encoder.forward(&mut g, s)?;
        let gg = self.encoder.forward(&mut g, goal)?;
        let psi = g.absdiff(gs, gg)?;
        self.heads.distribution(&mut g, psi)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path, world: &World) -> Result<Self> {
        Apm::from_params(Params::load(path)?, world)
            .map_err(|e| Error::artifact(path, e.to_string()))
    }
}

/// Encoder inputs for every graph node a set of samples touches.
pub fn input_cache(
    kg: &KnowledgeGraph,
    samples: &[&TaskSample],
) -> Result<HashMap<StateKey, EncoderInput>> {
    let mut cache = HashMap::new();
    for s in samples {
        for k in &s.nodes {
            if !cache.contains_key(k) {
                cache.insert(*k, EncoderInput::new(&*kg.state(k)?));
            }
        }
    }
    Ok(cache)
}

fn label_weights(samples: &[&TaskSample]) -> Tensor {
    let mut counts = vec![0.0f64; N_LABELS];
    let mut pairs = 0.0;
    for s in samples {
        for a in &s.gt_actions {
            pairs += 1.0;
            for (c, t) in counts.iter_mut().zip(target_vector(a).data) {
                *c += t;
            }
        }
    }
    let data = counts
        .iter()
        .map(|&c| if c > 0.0 { (pairs / c).sqrt() } else { 1.0 })
        .collect();
    Tensor {
        rows: 1,
        cols: N_LABELS,
        data,
    }
}

/// Fraction of `(state, goal, action)` pairs where the unrestricted
/// assembled action equals the ground truth.
pub fn pair_accuracy(
    apm: &Apm,
    world: &World,
    samples: &[&TaskSample],
    cache: &HashMap<StateKey, EncoderInput>,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let goal = &cache[&s.goal()];
        for (t, a) in s.gt_actions.iter().enumerate() {
            let d = apm.predict_inputs(&cache[&s.nodes[t]], goal)?;
            total += 1;
            if d.assemble(world, None) == Some(*a) {
                hits += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

/// Trains on every `(s_t, goal, a_t)` pair of the training trajectories
/// and returns the weights with the best validation accuracy.
pub fn train_apm(
    world: &World,
    kg: &KnowledgeGraph,
    ds: &Dataset,
    split: &DatasetSplit,
    cfg: &ApmConfig,
    seed: u64,
) -> Result<(Apm, Vec<EpochLog>)> {
    let train: Vec<&TaskSample> = split.train.iter().map(|&i| &ds.samples[i]).collect();
    let val: Vec<&TaskSample> = split.val.iter().map(|&i| &ds.samples[i]).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let all: Vec<&TaskSample> = train.iter().chain(&val).copied().collect();
    let cache = input_cache(kg, &all)?;
    let weights = cfg.inverse_frequency_weights.then(|| label_weights(&train));

    let mut apm = Apm::init(world, cfg.width, seed);
    let mut opt = Adam::new(&apm.params, cfg.lr);
    let mut rng = learncore::rng(seed ^ 0xa11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Params)> = None;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut pair_count = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let n_pairs: usize = batch.iter().map(|&i| train[i].gt_length()).sum();
            let (encoder, heads) = (apm.encoder.clone(), apm.heads.clone());
            let loss =
                learncore::train_step(&mut apm.params, &mut opt, step, cfg.clip_norm, |g| {
                    let mut terms = Vec::with_capacity(n_pairs);
                    for &i in batch {
                        let s = train[i];
                        let feats: Vec<Var> = s
                            .nodes
                            .iter()
                            .map(|k| encoder.forward(g, &cache[k]))
                            .collect::<Result<_>>()?;
                        let goal = *feats.last().expect("nonempty");
                        for (t, a) in s.gt_actions.iter().enumerate() {
                            let psi = g.absdiff(feats[t], goal)?;
                            let y = heads.forward_train(g, psi, a.name)?;
                            terms.push(g.bce_weighted(y, target_vector(a), weights.clone())?);
                        }
                    }
                    let mut total = terms[0];
                    for &t in &terms[1..] {
                        total = g.add(total, t)?;
                    }
                    Ok(g.scale(total, 1.0 / n_pairs as f64))
                })?;
            step += 1;
            loss_sum += loss * n_pairs as f64;
            pair_count += n_pairs;
        }
        let val_accuracy = pair_accuracy(&apm, world, &val, &cache)?;
        let train_loss = loss_sum / pair_count.max(1) as f64;
        log::info!("apm epoch {epoch}: loss {train_loss:.5} val acc {val_accuracy:.4}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(b, _)| val_accuracy > *b) {
            best = Some((val_accuracy, apm.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        apm.params = params;
    }
    Ok((apm, log))
}
