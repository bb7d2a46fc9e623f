//! Candidate generation by feature decomposition: project the task
//! feature and the memory onto leading right singular vectors, solve for
//! action weights with a pseudo-inverse, and keep the top-K actions.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::effectmem::FeatureMemory;
use crate::error::{Error, Result};
use crate::world::GroundedAction;

/// Relative singular-value cutoff for pseudo-inverses.
pub const PINV_CUTOFF: f64 = 1e-10;

pub const DEFAULT_FAMILY: [(usize, usize); 7] = [
    (5, 2),
    (10, 5),
    (15, 5),
    (20, 5),
    (20, 10),
    (30, 5),
    (30, 10),
];
pub const ALL_SELECTION_FAMILY: [(usize, usize); 6] =
    [(2, 2), (5, 5), (10, 10), (15, 15), (20, 20), (30, 30)];

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedBasis {
    /// `M x r`, orthonormal columns.
    pub v: DMatrix<f64>,
    /// All singular values, non-increasing.
    pub singular: Vec<f64>,
    pub rank: usize,
    pub centered: bool,
}

fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = DMatrix::from_fn(vt.ncols(), order.len(), |r, c| vt[(order[c], r)]);
    (u, s, v)
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `PINV_CUTOFF * max(S)` treated as zero.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let (u, s, v) = sorted_svd(m);
    let cut = PINV_CUTOFF * s.first().copied().unwrap_or(0.0);
    let inv = DVector::from_iterator(
        s.len(),
        s.iter()
            .map(|&x| if x > cut && x > 0.0 { 1.0 / x } else { 0.0 }),
    );
    &v * DMatrix::from_diagonal(&inv) * u.transpose()
}

pub fn memory_matrix(mem: &FeatureMemory) -> DMatrix<f64> {
    DMatrix::from_fn(mem.len(), mem.d_up, |r, c| mem.rows[r][c])
}

/// SVD of `a_f` (optionally column-centered first), keeping `r` right
/// singular vectors.
pub fn reduce(a_f: &DMatrix<f64>, r: usize, centered: bool) -> Result<ReducedBasis> {
    let (n, m) = a_f.shape();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty feature matrix".into()));
    }
    if r == 0 || r > n.min(m) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} outside 1..={}",
            n.min(m)
        )));
    }
    let mut x = a_f.clone();
    if centered {
        for c in 0..m {
            let mean = x.column(c).mean();
            x.column_mut(c).add_scalar_mut(-mean);
        }
    }
    let (_, s, v) = sorted_svd(&x);
    Ok(ReducedBasis {
        v: v.columns(0, r).into_owned(),
        singular: s,
        rank: r,
        centered,
    })
}

/// Precomputed `V` and `(A_F V)^+` for repeated solves.
#[derive(Clone, Debug)]
pub struct IndexSolver {
    pub basis: Option<ReducedBasis>,
    projector: DMatrix<f64>,
}

impl IndexSolver {
    pub fn new(a_f: &DMatrix<f64>, basis: ReducedBasis) -> Self {
        let projector = pinv(&(a_f * &basis.v));
        IndexSolver {
            basis: Some(basis),
            projector,
        }
    }

    /// Least squares on the raw features, no projection.
    pub fn unreduced(a_f: &DMatrix<f64>) -> Self {
        IndexSolver {
            basis: None,
            projector: pinv(a_f),
        }
    }

    pub fn width(&self) -> usize {
        match &self.basis {
            Some(b) => b.v.nrows(),
            None => self.projector.nrows(),
        }
    }

    /// `(A_Task V)(A_F V)^+` as a row of action weights.
    pub fn solve(&self, a_task: &[f64]) -> Result<Vec<f64>> {
        if a_task.len() != self.width() {
            return Err(Error::Shape(format!(
                "task feature width {} against memory width {}",
                a_task.len(),
                self.width()
            )));
        }
        let t = DMatrix::from_row_slice(1, a_task.len(), a_task);
        let proj = match &self.basis {
            Some(b) => t * &b.v,
            None => t,
        };
        let w = proj * &self.projector;
        Ok(w.iter().copied().collect())
    }
}

pub fn solve_index(a_task: &[f64], a_f: &DMatrix<f64>, basis: &ReducedBasis) -> Result<Vec<f64>> {
    IndexSolver::new(a_f, basis.clone()).solve(a_task)
}

/// Indices of the top-`k` weights, descending, ties to the smaller action.
pub fn top_k(weights: &[f64], actions: &[GroundedAction], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| {
        weights[b]
            .total_cmp(&weights[a])
            .then(actions[a].cmp(&actions[b]))
    });
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidatePool {
    /// Descending weight.
    pub actions: Vec<GroundedAction>,
    pub pool_size: usize,
    pub select_count: usize,
    pub consumed: BTreeSet<GroundedAction>,
}

impl CandidatePool {
    pub fn available(&self) -> Vec<GroundedAction> {
        self.actions
            .iter()
            .filter(|a| !self.consumed.contains(a))
            .copied()
            .collect()
    }

    pub fn consume(&mut self, a: GroundedAction) {
        self.consumed.insert(a);
    }

    /// Whether the pool should be regenerated.
    pub fn spent(&self) -> bool {
        self.consumed.len() >= self.select_count || self.consumed.len() >= self.actions.len()
    }
}

pub fn make_pool(
    index: &[f64],
    actions: &[GroundedAction],
    pool_size: usize,
    select_count: usize,
) -> Result<CandidatePool> {
    if select_count == 0 || select_count > pool_size {
        return Err(Error::InvalidArgument(format!(
            "select count {select_count} outside 1..={pool_size}"
        )));
    }
    if index.len() != actions.len() {
        return Err(Error::Shape(
            "index and action list differ in length".into(),
        ));
    }
    Ok(CandidatePool {
        actions: top_k(index, actions, pool_size)
            .into_iter()
            .map(|i| actions[i])
            .collect(),
        pool_size,
        select_count,
        consumed: BTreeSet::new(),
    })
}

/// Fraction of pool actions absent from the ground-truth set.
pub fn pool_error(pool: &[GroundedAction], gt: &[GroundedAction]) -> f64 {
    if pool.is_empty() {
        return 0.0;
    }
    let gt: BTreeSet<_> = gt.iter().collect();
    pool.iter().filter(|a| !gt.contains(a)).count() as f64 / pool.len() as f64
}

/// `(K - |gt|) / K`; may be negative.
pub fn error_lower_bound(k: usize, gt_size: usize) -> f64 {
    (k as f64 - gt_size as f64) / k as f64
}

pub fn distinct(gt: &[GroundedAction]) -> BTreeSet<GroundedAction> {
    gt.iter().copied().collect()
}

/// `sum |pool_i ∩ gt_i| / sum |gt_i|` with ground truth as sets.
pub fn area_coverage(items: &[(Vec<GroundedAction>, Vec<GroundedAction>)]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (pool, gt) in items {
        let pool: BTreeSet<_> = pool.iter().collect();
        let gt = distinct(gt);
        hit += gt.iter().filter(|a| pool.contains(a)).count();
        total += gt.len();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiScalePool(pub Vec<(usize, usize)>);

impl MultiScalePool {
    pub fn validate(&self) -> Result<()> {
        for &(k, s) in &self.0 {
            if s == 0 || s > k {
                return Err(Error::InvalidArgument(format!(
                    "pool pair ({k}, {s}) needs 1 <= select <= size"
                )));
            }
        }
        Ok(())
    }
}

impl Default for MultiScalePool {
    fn default() -> Self {
        MultiScalePool(DEFAULT_FAMILY.to_vec())
    }
}
