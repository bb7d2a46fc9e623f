#![allow(dead_code)]

use m3_core::apm::EncoderInput;
use m3_core::effectmem::{loss_add, loss_feat, EffectExtractor};
use m3_core::learncore::{gradcheck, gradcheck_in, gradcheck_params, Graph, Sparse, Tensor, Var};
use m3_core::world::{GroundedAction, World};
use m3_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_H: f64 = 1e-6;

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// Entries with magnitude in `[0.1, 1]`, away from kinks at zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor {
        rows,
        cols,
        data: (0..rows * cols)
            .map(|_| {
                let m = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    }
}

fn probs(rng: &mut ChaCha8Rng, cols: usize) -> Tensor {
    Tensor::row_vec((0..cols).map(|_| rng.gen_range(0.05..0.95)).collect())
}

fn bits(rng: &mut ChaCha8Rng, cols: usize) -> Tensor {
    Tensor::row_vec(
        (0..cols)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Scalar probe: squared distance to a fixed random target.
fn probe(g: &mut Graph<'_>, v: Var, target: &Tensor) -> Result<Var> {
    let t = g.input(target.clone());
    g.mse(v, t)
}

pub struct Extractor {
    pub world: World,
    pub ex: EffectExtractor,
}

pub fn small_extractor(seed: u64) -> Extractor {
    let world = World::desk();
    let ex = EffectExtractor::init(&world, 8, 16, seed);
    Extractor { world, ex }
}

fn random_action(world: &World, rng: &mut ChaCha8Rng) -> GroundedAction {
    let all = world.enumerate_actions();
    *all.choose(rng).expect("actions")
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n(a) * n(b))
}

/// Worst relative error per checked function over `instances` random draws.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, e: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name.to_string(), e)),
    };
    let fx = small_extractor(seed);
    for _ in 0..instances {
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let t32 = rand_tensor(&mut rng, 3, 2);
        record(
            "matmul",
            gradcheck(&[a.clone(), b], GRAD_H, |g, v| {
                let m = g.matmul(v[0], v[1])?;
                probe(g, m, &t32)
            })
            .unwrap(),
        );
        let c = rand_tensor(&mut rng, 3, 4);
        let t34 = rand_tensor(&mut rng, 3, 4);
        record(
            "add",
            gradcheck(&[a.clone(), c.clone()], GRAD_H, |g, v| {
                let m = g.add(v[0], v[1])?;
                probe(g, m, &t34)
            })
            .unwrap(),
        );
        record(
            "sub",
            gradcheck(&[a.clone(), c.clone()], GRAD_H, |g, v| {
                let m = g.sub(v[0], v[1])?;
                probe(g, m, &t34)
            })
            .unwrap(),
        );
        let bias = rand_tensor(&mut rng, 1, 4);
        record(
            "add_row_bias",
            gradcheck(&[a.clone(), bias], GRAD_H, |g, v| {
                let m = g.add_row_bias(v[0], v[1])?;
                probe(g, m, &t34)
            })
            .unwrap(),
        );
        let x = rand_tensor(&mut rng, 3, 2);
        let t36 = rand_tensor(&mut rng, 3, 6);
        record(
            "concat",
            gradcheck(&[a.clone(), x], GRAD_H, |g, v| {
                let m = g.concat(&[v[0], v[1]])?;
                probe(g, m, &t36)
            })
            .unwrap(),
        );
        let gap = away_from_zero(&mut rng, 3, 4);
        let a2 = Tensor {
            rows: 3,
            cols: 4,
            data: a.data.iter().zip(&gap.data).map(|(x, d)| x + d).collect(),
        };
        record(
            "absdiff",
            gradcheck(&[a.clone(), a2], GRAD_H, |g, v| {
                let m = g.absdiff(v[0], v[1])?;
                probe(g, m, &t34)
            })
            .unwrap(),
        );
        record(
            "sigmoid",
            gradcheck(std::slice::from_ref(&a), GRAD_H, |g, v| {
                let m = g.sigmoid(v[0]);
                probe(g, m, &t34)
            })
            .unwrap(),
        );
        record(
            "tanh",
            gradcheck(std::slice::from_ref(&a), GRAD_H, |g, v| {
                let m = g.tanh(v[0]);
                probe(g, m, &t34)
            })
            .unwrap(),
        );
        record(
            "relu",
            gradcheck(&[away_from_zero(&mut rng, 3, 4)], GRAD_H, |g, v| {
                let m = g.relu(v[0]);
                probe(g, m, &t34)
            })
            .unwrap(),
        );
        let f = rng.gen_range(-2.0..2.0);
        record(
            "scale",
            gradcheck(std::slice::from_ref(&a), GRAD_H, |g, v| {
                let m = g.scale(v[0], f);
                probe(g, m, &t34)
            })
            .unwrap(),
        );
        let t14 = rand_tensor(&mut rng, 1, 4);
        record(
            "mean_rows",
            gradcheck(std::slice::from_ref(&a), GRAD_H, |g, v| {
                let m = g.mean_rows(v[0])?;
                probe(g, m, &t14)
            })
            .unwrap(),
        );
        record(
            "sum_rows",
            gradcheck(std::slice::from_ref(&a), GRAD_H, |g, v| {
                let m = g.sum_rows(v[0]);
                probe(g, m, &t14)
            })
            .unwrap(),
        );
        let u = rand_tensor(&mut rng, 1, 6);
        let w = rand_tensor(&mut rng, 1, 6);
        record(
            "cosine",
            gradcheck(&[u.clone(), w.clone()], GRAD_H, |g, v| g.cosine(v[0], v[1])).unwrap(),
        );
        record(
            "mse",
            gradcheck(&[u, w], GRAD_H, |g, v| g.mse(v[0], v[1])).unwrap(),
        );
        let p = probs(&mut rng, 7);
        let y = bits(&mut rng, 7);
        let yc = y.clone();
        record(
            "bce",
            gradcheck(std::slice::from_ref(&p), GRAD_H, move |g, v| {
                g.bce(v[0], yc.clone())
            })
            .unwrap(),
        );
        let wts = Tensor::row_vec((0..7).map(|_| rng.gen_range(0.2..3.0)).collect());
        record(
            "bce_weighted",
            gradcheck(&[p], GRAD_H, |g, v| {
                g.bce_weighted(v[0], y.clone(), Some(wts.clone()))
            })
            .unwrap(),
        );
        let table = rand_tensor(&mut rng, 5, 3);
        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        let t43 = rand_tensor(&mut rng, 4, 3);
        record(
            "gather_rows",
            gradcheck(std::slice::from_ref(&table), GRAD_H, |g, v| {
                let m = g.gather_rows(v[0], &idx)?;
                probe(g, m, &t43)
            })
            .unwrap(),
        );
        let sp = Sparse {
            rows: 4,
            cols: 5,
            entries: (0..7)
                .map(|_| {
                    (
                        rng.gen_range(0..4),
                        rng.gen_range(0..5),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        };
        record(
            "spmm",
            gradcheck(&[table], GRAD_H, |g, v| {
                let m = g.spmm(&sp, v[0])?;
                probe(g, m, &t43)
            })
            .unwrap(),
        );

        // Model losses, differentiated through the extractor layers with
        // respect to the pooled state encodings.
        let encs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::row_vec((0..8).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let (a0, a1) = (
            random_action(&fx.world, &mut rng),
            random_action(&fx.world, &mut rng),
        );
        record(
            "loss_act",
            gradcheck_in(&fx.ex.params, &encs, GRAD_H, |g, v| {
                let e01 = fx.ex.extract_encoded(g, v[0], v[1])?;
                let e12 = fx.ex.extract_encoded(g, v[1], v[2])?;
                let l = fx.ex.pair_act_loss(g, e01, &a0)?;
                let r = fx.ex.pair_act_loss(g, e12, &a1)?;
                g.add(l, r)
            })
            .unwrap(),
        );
        let eps = 0.1;
        let same = rng.gen_bool(0.5);
        let (fa, fb) = loop {
            let fa = rand_tensor(&mut rng, 1, 16);
            let fb = rand_tensor(&mut rng, 1, 16);
            if same || (cos(&fa.data, &fb.data) - eps).abs() > 1e-3 {
                break (fa, fb);
            }
        };
        record(
            "loss_feat",
            gradcheck(&[fa, fb], GRAD_H, |g, v| {
                loss_feat(g, v[0], v[1], same, eps)
            })
            .unwrap(),
        );
        let trip: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, 1, 16)).collect();
        record(
            "loss_add",
            gradcheck(&trip, GRAD_H, |g, v| loss_add(g, v[0], v[1], v[2])).unwrap(),
        );
        record(
            "loss_total",
            gradcheck_in(&fx.ex.params, &encs, GRAD_H, |g, v| {
                let e01 = fx.ex.extract_encoded(g, v[0], v[1])?;
                let e12 = fx.ex.extract_encoded(g, v[1], v[2])?;
                let e02 = fx.ex.extract_encoded(g, v[0], v[2])?;
                let l = fx.ex.pair_act_loss(g, e01, &a0)?;
                let r = fx.ex.pair_act_loss(g, e12, &a1)?;
                let act = g.add(l, r)?;
                let add = loss_add(g, e01.feature, e12.feature, e02.feature)?;
                let t = g.add(act, add)?;
                match loss_feat(g, e01.feature, e12.feature, a0 == a1, eps) {
                    Ok(f) => g.add(t, f),
                    Err(_) => Ok(t),
                }
            })
            .unwrap(),
        );
    }
    worst.push(("param_grads".into(), param_gradient_check(&fx, seed)));
    worst
}

/// Sampled parameter-gradient check of the combined extractor loss on real
/// desk states.
pub fn param_gradient_check(fx: &Extractor, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a);
    let s0 = fx.world.initial_state().clone();
    let actions = fx.world.enumerate_actions();
    let mut states = vec![s0];
    let mut taken = Vec::new();
    while taken.len() < 2 {
        let a = *actions.choose(&mut rng).unwrap();
        let out = fx.world.step(states.last().unwrap(), &a);
        if out.status == m3_core::world::Status::Success {
            states.push(out.next_state);
            taken.push(a);
        }
    }
    let inputs: Vec<EncoderInput> = states.iter().map(EncoderInput::new).collect();
    let n = fx.ex.params.len();
    let entries: Vec<_> = (0..n)
        .flat_map(|b| {
            let id = m3_core::learncore::ParamId(b);
            let len = fx.ex.params.get(id).data.len();
            let mut r = ChaCha8Rng::seed_from_u64(b as u64);
            (0..3)
                .map(move |_| (id, r.gen_range(0..len)))
                .collect::<Vec<_>>()
        })
        .collect();
    gradcheck_params(&fx.ex.params, &entries, GRAD_H, |g| {
        let e: Vec<Var> = inputs
            .iter()
            .map(|x| fx.ex.encode(g, x))
            .collect::<Result<_>>()?;
        let e01 = fx.ex.extract_encoded(g, e[0], e[1])?;
        let e12 = fx.ex.extract_encoded(g, e[1], e[2])?;
        let e02 = fx.ex.extract_encoded(g, e[0], e[2])?;
        let l = fx.ex.pair_act_loss(g, e01, &taken[0])?;
        let r = fx.ex.pair_act_loss(g, e12, &taken[1])?;
        let act = g.add(l, r)?;
        let add = loss_add(g, e01.feature, e12.feature, e02.feature)?;
        g.add(act, add)
    })
    .unwrap()
}
