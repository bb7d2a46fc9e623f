mod common;

use m3_core::learncore::{
    bce_value, gradcheck, matmul_raw, rng, train_step, Adam, Graph, Params, Sparse, Tensor,
};
use m3_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

#[test]
fn bce_at_one_half_is_ln2() {
    for y in [0.0, 1.0] {
        assert!((bce_value(&[0.5], &[y]) - LN2).abs() < 1e-12);
    }
    let params = Params::new();
    let mut g = Graph::new(&params);
    let p = g.input(Tensor::row_vec(vec![0.5; 9]));
    let l = g
        .bce(
            p,
            Tensor::row_vec(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
    assert!((g.value(l).scalar() - LN2).abs() < 1e-12);
}

#[test]
fn bce_clamps_extreme_probabilities() {
    assert!(bce_value(&[0.0], &[0.0]) < 1e-6);
    assert!(bce_value(&[1.0], &[1.0]) < 1e-6);
    let worst = bce_value(&[0.0], &[1.0]);
    assert!((worst + (1e-7f64).ln()).abs() < 1e-9);
    assert!(worst.is_finite());
}

#[test]
fn weighted_bce_with_unit_weights_matches_plain() {
    let params = Params::new();
    let mut g = Graph::new(&params);
    let p = g.input(Tensor::row_vec(vec![0.2, 0.7, 0.9]));
    let y = Tensor::row_vec(vec![0.0, 1.0, 0.0]);
    let a = g.bce(p, y.clone()).unwrap();
    let b = g
        .bce_weighted(p, y, Some(Tensor::row_vec(vec![1.0; 3])))
        .unwrap();
    assert_eq!(g.value(a).scalar(), g.value(b).scalar());
}

#[test]
fn cosine_of_vector_with_itself_is_one() {
    let params = Params::new();
    let mut g = Graph::new(&params);
    let v = g.input(Tensor::row_vec(vec![0.3, -1.2, 4.0]));
    let c = g.cosine(v, v).unwrap();
    assert!((g.value(c).scalar() - 1.0).abs() < 1e-12);
    let z = g.input(Tensor::row_vec(vec![0.0; 3]));
    assert!(matches!(g.cosine(v, z), Err(Error::ZeroVector)));
}

#[test]
fn shape_mismatch_is_reported() {
    let params = Params::new();
    let mut g = Graph::new(&params);
    let a = g.input(Tensor::zeros(2, 3));
    let b = g.input(Tensor::zeros(2, 3));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    let c = g.input(Tensor::zeros(3, 2));
    assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
}

fn bowl(params: &mut Params, lr: f64, steps: usize) -> Vec<f64> {
    let w = params.id("w").unwrap();
    let target = Tensor::row_vec(vec![1.0, -2.0, 0.5, 3.0]);
    let mut opt = Adam::new(params, lr);
    (0..steps)
        .map(|s| {
            train_step(params, &mut opt, s, None, |g| {
                let v = g.param(w);
                let t = g.input(target.clone());
                g.mse(v, t)
            })
            .unwrap()
        })
        .collect()
}

#[test]
fn adam_decreases_a_quadratic_bowl_monotonically() {
    let mut p = Params::new();
    p.add("w", Tensor::row_vec(vec![0.0; 4]));
    let losses = bowl(&mut p, 0.05, 40);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut p = Params::new();
    p.add("w", Tensor::row_vec(vec![0.25, 0.5, 0.75, 1.0]));
    let before = p.clone().to_text();
    bowl(&mut p, 0.0, 5);
    assert_eq!(p.to_text(), before);
}

#[test]
fn linear_regression_recovers_weights() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let truth = Tensor::from_vec(3, 1, vec![0.7, -1.3, 2.1]).unwrap();
    let x = Tensor::from_vec(64, 3, (0..192).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = matmul_raw(&x, &truth);
    let mut p = Params::new();
    let w = p.add("w", Tensor::zeros(3, 1));
    let mut opt = Adam::new(&p, 0.05);
    for s in 0..3000 {
        train_step(&mut p, &mut opt, s, None, |g| {
            let xv = g.input(x.clone());
            let wv = g.param(w);
            let pred = g.matmul(xv, wv)?;
            let t = g.input(y.clone());
            g.mse(pred, t)
        })
        .unwrap();
    }
    for (a, b) in p.get(w).data.iter().zip(&truth.data) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn non_finite_loss_is_an_error() {
    let mut p = Params::new();
    let w = p.add("w", Tensor::row_vec(vec![f64::NAN]));
    let mut opt = Adam::new(&p, 0.1);
    let r = train_step(&mut p, &mut opt, 7, None, |g| {
        let v = g.param(w);
        g.mse(v, v)
    });
    assert!(matches!(r, Err(Error::NonFinite { step: 7, .. })));
}

#[test]
fn checkpoints_round_trip_exactly() {
    let mut p = Params::new();
    let mut r = rng(11);
    p.add_glorot("a", 5, 7, &mut r);
    p.add_symbol_table("t", &["x", "y", "z"], 4, 9);
    p.add_zeros("b", 1, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.wts");
    p.save(&path).unwrap();
    let q = Params::load(&path).unwrap();
    assert_eq!(q.to_text(), p.to_text());
    assert_eq!(q.values(), p.values());
    p.check_layout(&q).unwrap();
    let mut other = Params::new();
    other.add_zeros("a", 5, 6);
    assert!(p.check_layout(&other).is_err());
}

#[test]
fn malformed_checkpoints_are_rejected() {
    assert!(Params::from_text("m3-wts v0\n").is_err());
    assert!(Params::from_text("m3-wts v1\nparam a 1 2\n1.0\n").is_err());
    assert!(Params::from_text("m3-wts v1\nparam a 1 1\nbanana\n").is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.wts");
    std::fs::write(&path, "nope\n").unwrap();
    let err = Params::load(&path).unwrap_err().to_string();
    assert!(err.contains("w.wts"), "{err}");
}

#[test]
fn symbol_tables_depend_only_on_seed_and_label() {
    let mut a = Params::new();
    let mut b = Params::new();
    let ia = a.add_symbol_table("t", &["apple", "book"], 6, 1);
    let ib = b.add_symbol_table("t", &["book", "apple"], 6, 1);
    assert_eq!(a.get(ia).row(0), b.get(ib).row(1));
    assert_ne!(a.get(ia).row(0), a.get(ia).row(1));
    let mut c = Params::new();
    let ic = c.add_symbol_table("t", &["apple"], 6, 2);
    assert_ne!(a.get(ia).row(0), c.get(ic).row(0));
}

#[test]
fn gradient_suite_small() {
    for (name, err) in common::gradient_suite(5, 21) {
        assert!(err <= 1e-4, "{name}: {err}");
    }
}

fn dense(s: &Sparse) -> Tensor {
    let mut t = Tensor::zeros(s.rows, s.cols);
    for &(r, c, v) in &s.entries {
        t.data[r * s.cols + c] += v;
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_naive(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = common::rand_tensor(&mut r, n, k);
        let b = common::rand_tensor(&mut r, k, m);
        let c = matmul_raw(&a, &b);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|t| a.at(i, t) * b.at(t, j)).sum();
                prop_assert!((c.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spmm_matches_dense(seed in any::<u64>(), n in 1usize..5, m in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = Sparse {
            rows: n,
            cols: m,
            entries: (0..r.gen_range(0..8)).map(|_| (r.gen_range(0..n), r.gen_range(0..m), r.gen_range(-1.0..1.0))).collect(),
        };
        let x = common::rand_tensor(&mut r, m, 3);
        let params = Params::new();
        let mut g = Graph::new(&params);
        let xv = g.input(x.clone());
        let y = g.spmm(&s, xv).unwrap();
        let want = matmul_raw(&dense(&s), &x);
        for (a, b) in g.value(y).data.iter().zip(&want.data) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(seed in any::<u64>(), n in 1usize..4, d in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = common::rand_tensor(&mut r, n, d);
        let w = common::rand_tensor(&mut r, d, d);
        let y = Tensor::row_vec((0..d).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect());
        let err = gradcheck(&[x, w], common::GRAD_H, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.tanh(h);
            let m = g.mean_rows(h)?;
            let p = g.sigmoid(m);
            g.bce(p, y.clone())
        }).unwrap();
        prop_assert!(err <= 1e-4, "{}", err);
    }

    #[test]
    fn bce_is_nonnegative(p in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        prop_assert!(bce_value(&[p], &[y]) >= -1e-12);
    }
}
