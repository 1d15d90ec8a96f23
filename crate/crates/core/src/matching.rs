//! Query to ground-truth assignment and the per-query class targets.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Tensor, EPS_PROB};
use crate::registry::Registry;

/// How the classification part of the matching cost is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassCost {
    /// `1 − p`
    #[default]
    OneMinusProb,
    /// Difference of positive and negative focal terms, DETR-style.
    Focal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    pub lambda_cls: f64,
    pub lambda_center: f64,
    pub class_cost: ClassCost,
    pub solver: String,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_center: 0.25,
            class_cost: ClassCost::OneMinusProb,
            solver: HUNGARIAN.into(),
        }
    }
}

/// `k×G` costs plus the unweighted terms they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub costs: Tensor,
    pub class_term: Tensor,
    pub center_term: Tensor,
}

impl CostMatrix {
    /// Wraps a bare cost table (no component breakdown).
    pub fn from_costs(costs: Tensor) -> Result<Self> {
        costs.expect_matrix("cost matrix")?;
        if !costs.is_finite() {
            return Err(Error::NonFinite("cost matrix"));
        }
        let (k, g) = (costs.rows(), costs.cols());
        Ok(Self {
            class_term: Tensor::zeros(k, g),
            center_term: Tensor::zeros(k, g),
            costs,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.costs.rows()
    }

    pub fn num_gt(&self) -> usize {
        self.costs.cols()
    }
}

/// `(query, gt)` pairs sorted by gt index.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Sum of matched costs, accumulated in gt order so equal assignments
    /// give bitwise-equal totals.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost.costs.get(q, g)).sum()
    }

    /// Query matched to each gt.
    pub fn query_for_gt(&self, num_gt: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_gt];
        for &(q, g) in &self.pairs {
            if g < num_gt {
                out[g] = Some(q);
            }
        }
        out
    }

    pub fn validate(&self, k: usize, g: usize) -> Result<()> {
        let mut q_seen = vec![false; k];
        let mut g_seen = vec![false; g];
        for &(q, gi) in &self.pairs {
            if q >= k || gi >= g {
                return Err(Error::invalid(format!("pair ({q}, {gi}) out of range for {k}x{g}")));
            }
            if std::mem::replace(&mut q_seen[q], true) || std::mem::replace(&mut g_seen[gi], true) {
                return Err(Error::invalid(format!("index reused in pair ({q}, {gi})")));
            }
        }
        if self.pairs.len() != k.min(g) {
            return Err(Error::invalid(format!(
                "{} pairs, expected {}",
                self.pairs.len(),
                k.min(g)
            )));
        }
        Ok(())
    }
}

fn focal_cost(p: f64) -> f64 {
    let p = p.clamp(EPS_PROB, 1.0 - EPS_PROB);
    let (alpha, gamma) = (0.25, 2.0);
    let pos = alpha * (1.0 - p).powf(gamma) * -p.ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
    pos - neg
}

pub fn build_cost(
    class_probs: &Tensor,
    pred_centers: &Tensor,
    gt_classes: &[usize],
    gt_centers: &Tensor,
    cfg: &MatchingConfig,
) -> Result<CostMatrix> {
    let k = class_probs.rows();
    let n = class_probs.cols();
    let g = gt_classes.len();
    if pred_centers.rows() != k || pred_centers.cols() != 3 {
        return Err(Error::shape("build_cost centers", pred_centers.shape(), &[k, 3]));
    }
    if gt_centers.rows() != g || (g > 0 && gt_centers.cols() != 3) {
        return Err(Error::shape("build_cost gt centers", gt_centers.shape(), &[g, 3]));
    }
    if let Some(&c) = gt_classes.iter().find(|&&c| c >= n) {
        return Err(Error::invalid(format!("gt class {c} out of range for {n} classes")));
    }
    if class_probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("class probabilities must lie in [0, 1]"));
    }
    let mut class_term = Tensor::zeros(k, g);
    let mut center_term = Tensor::zeros(k, g);
    let mut costs = Tensor::zeros(k, g);
    for q in 0..k {
        for (gi, &c) in gt_classes.iter().enumerate() {
            let p = class_probs.get(q, c);
            let cls = match cfg.class_cost {
                ClassCost::OneMinusProb => 1.0 - p,
                ClassCost::Focal => focal_cost(p),
            };
            let l1: f64 = (0..3)
                .map(|d| (pred_centers.get(q, d) - gt_centers.get(gi, d)).abs())
                .sum();
            class_term.set(q, gi, cls);
            center_term.set(q, gi, l1);
            costs.set(q, gi, cfg.lambda_cls * cls + cfg.lambda_center * l1);
        }
    }
    if !costs.is_finite() {
        return Err(Error::NonFinite("cost matrix"));
    }
    Ok(CostMatrix {
        costs,
        class_term,
        center_term,
    })
}

/// Minimum-cost assignment. The rectangular table is padded to a square with
/// a constant above every real entry; pairs touching padding are dropped.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (k, g) = (cost.num_queries(), cost.num_gt());
    if k == 0 || g == 0 {
        return Assignment::default();
    }
    let n = k.max(g);
    let pad = cost.costs.max_abs() + 1.0;
    // rows = gt, columns = queries
    let at = |r: usize, c: usize| {
        if r < g && c < k {
            cost.costs.get(c, r)
        } else {
            pad
        }
    };

    // Potentials-based shortest augmenting path, 1-indexed with a sentinel column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for r in 1..=n {
        owner[0] = r;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (j - 1, owner[j] - 1))
        .filter(|&(q, gi)| q < k && gi < g)
        .collect();
    pairs.sort_by_key(|&(q, gi)| (gi, q));
    Assignment { pairs }
}

pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive search over injections; first minimum in lexicographic order wins.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<Assignment> {
    let (k, g) = (cost.num_queries(), cost.num_gt());
    if k.min(g) > BRUTE_FORCE_LIMIT {
        return Err(Error::invalid(format!(
            "brute force limited to min(k, G) <= {BRUTE_FORCE_LIMIT}, got {}",
            k.min(g)
        )));
    }
    if k == 0 || g == 0 {
        return Ok(Assignment::default());
    }
    let transpose = g > k;
    let (rows, cols) = if transpose { (k, g) } else { (g, k) };
    // Assign each of `rows` small-side items to a distinct large-side item.
    let at = |r: usize, c: usize| {
        if transpose {
            cost.costs.get(r, c)
        } else {
            cost.costs.get(c, r)
        }
    };
    struct Search<'a, F: Fn(usize, usize) -> f64> {
        at: &'a F,
        rows: usize,
        cols: usize,
        used: Vec<bool>,
        cur: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl<F: Fn(usize, usize) -> f64> Search<'_, F> {
        fn go(&mut self, r: usize) {
            if r == self.rows {
                let total: f64 = (0..self.rows).map(|i| (self.at)(i, self.cur[i])).sum();
                if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
                    self.best = Some((total, self.cur.clone()));
                }
                return;
            }
            for c in 0..self.cols {
                if !self.used[c] {
                    self.used[c] = true;
                    self.cur.push(c);
                    self.go(r + 1);
                    self.cur.pop();
                    self.used[c] = false;
                }
            }
        }
    }
    let mut s = Search {
        at: &at,
        rows,
        cols,
        used: vec![false; cols],
        cur: Vec::with_capacity(rows),
        best: None,
    };
    s.go(0);
    let (_, choice) = s.best.expect("non-empty search space");
    let mut pairs: Vec<(usize, usize)> = choice
        .into_iter()
        .enumerate()
        .map(|(r, c)| if transpose { (r, c) } else { (c, r) })
        .collect();
    pairs.sort_by_key(|&(q, gi)| (gi, q));
    Ok(Assignment { pairs })
}

/// `k×n` 0/1 targets: matched query rows are one-hot at their gt class.
pub fn target_matrix(assignment: &Assignment, gt_classes: &[usize], k: usize, n: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(k, n);
    for &(q, g) in &assignment.pairs {
        let c = *gt_classes
            .get(g)
            .ok_or_else(|| Error::invalid(format!("gt index {g} out of range")))?;
        if q >= k || c >= n {
            return Err(Error::invalid(format!("target ({q}, {c}) out of range for {k}x{n}")));
        }
        if t.row(q).iter().any(|&v| v != 0.0) {
            return Err(Error::invalid(format!("query {q} matched twice")));
        }
        t.set(q, c, 1.0);
    }
    Ok(t)
}

pub trait AssignmentSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, cost: &CostMatrix) -> Result<Assignment>;
}

pub const HUNGARIAN: &str = "hungarian";
pub const BRUTE_FORCE: &str = "brute_force";

struct Hungarian;

impl AssignmentSolver for Hungarian {
    fn name(&self) -> &'static str {
        HUNGARIAN
    }
    fn solve(&self, cost: &CostMatrix) -> Result<Assignment> {
        Ok(hungarian(cost))
    }
}

struct BruteForce;

impl AssignmentSolver for BruteForce {
    fn name(&self) -> &'static str {
        BRUTE_FORCE
    }
    fn solve(&self, cost: &CostMatrix) -> Result<Assignment> {
        brute_force_assignment(cost)
    }
}

pub fn assignment_solvers() -> Registry<dyn AssignmentSolver> {
    let mut reg: Registry<dyn AssignmentSolver> = Registry::new("assignment solver");
    reg.register(HUNGARIAN, Arc::new(Hungarian));
    reg.register(BRUTE_FORCE, Arc::new(BruteForce));
    reg
}
