//! Assignment of prediction slots to ground-truth segments.
//!
//! Three matchers are provided: the class-indexed fixed matching (valid when
//! `N == K`), bipartite matching by the Hungarian algorithm on the
//! class-plus-mask cost, and an exhaustive oracle for small problems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::PredictionSet;
use crate::segment::TargetSegment;

/// Largest number of ground-truth columns the exhaustive matcher accepts.
pub const BRUTE_FORCE_MAX_GT: usize = 8;

/// Which assignment rule training uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Fixed,
    Bipartite,
}

impl Matcher {
    pub fn as_str(&self) -> &'static str {
        match self {
            Matcher::Fixed => "fixed",
            Matcher::Bipartite => "bipartite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Matcher::Fixed),
            "bipartite" => Ok(Matcher::Bipartite),
            other => Err(Error::Config(format!("unknown matcher {other:?}"))),
        }
    }

    /// Assignment for one image on detached predictions.
    pub fn assign(&self, z: &PredictionSet, gt: &[TargetSegment], w: &LossWeights) -> Result<Assignment> {
        match self {
            Matcher::Fixed => fixed_matching(gt, z.num_queries(), z.num_classes()),
            Matcher::Bipartite => Ok(hungarian(&build_cost_matrix(z, gt, w)?)),
        }
    }
}

/// Dense `N × N_gt` matching cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("cost matrix", format!("{rows}×{cols} with {} entries", data.len())));
        }
        if rows < cols {
            return Err(Error::Input(format!(
                "{rows} predictions cannot cover {cols} ground-truth segments"
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("cost matrix", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `σ`: for every prediction slot, the ground-truth index it is matched to,
/// or `None` for the no-object target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    sigma: Vec<Option<usize>>,
    num_gt: usize,
}

impl Assignment {
    /// Validates that every ground-truth index appears exactly once.
    pub fn new(sigma: Vec<Option<usize>>, num_gt: usize) -> Result<Self> {
        let mut seen = vec![false; num_gt];
        for &j in sigma.iter().flatten() {
            if j >= num_gt {
                return Err(Error::Assignment(format!("ground-truth index {j} out of {num_gt}")));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::Assignment(format!("ground-truth index {j} assigned twice")));
            }
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(Error::Assignment(format!("ground-truth index {j} unassigned")));
        }
        Ok(Self { sigma, num_gt })
    }

    pub fn sigma(&self) -> &[Option<usize>] {
        &self.sigma
    }

    pub fn num_predictions(&self) -> usize {
        self.sigma.len()
    }

    pub fn num_gt(&self) -> usize {
        self.num_gt
    }

    pub fn num_no_object(&self) -> usize {
        self.sigma.iter().filter(|s| s.is_none()).count()
    }

    /// Prediction slot matched to each ground-truth column.
    pub fn row_of_gt(&self) -> Vec<usize> {
        let mut rows = vec![0; self.num_gt];
        for (i, j) in self.sigma.iter().enumerate() {
            if let Some(j) = j {
                rows[*j] = i;
            }
        }
        rows
    }

    /// `Σ_j cost(σ⁻¹(j), j)`, summed in column order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.row_of_gt().iter().enumerate().map(|(j, &i)| cost.get(i, j)).sum()
    }
}

/// `cost(i, j) = −p_i(c_j) + L_mask(m_i, m_j)` on detached predictions.
///
/// Focal and dice terms are evaluated as dot products against per-prediction
/// pixel tables; this equals [`losses::mask_loss`] up to summation order.
pub fn build_cost_matrix(z: &PredictionSet, gt: &[TargetSegment], w: &LossWeights) -> Result<CostMatrix> {
    let n = z.num_queries();
    let hw = z.pixels();
    if n < gt.len() {
        return Err(Error::Input(format!("{n} predictions cannot cover {} ground-truth segments", gt.len())));
    }
    for s in gt {
        if s.mask.len() != hw {
            return Err(Error::shape("build_cost_matrix", format!("mask of {} pixels vs {hw}", s.mask.len())));
        }
        if s.class > z.num_classes() {
            return Err(Error::Input(format!("class {} exceeds K = {}", s.class, z.num_classes())));
        }
    }
    let gt_area: Vec<f64> = gt.iter().map(|s| s.mask.iter().sum()).collect();
    let mut data = vec![0.0; n * gt.len()];
    let mut pos = vec![0.0; hw];
    let mut neg = vec![0.0; hw];
    let mut clamped = vec![0.0; hw];
    for i in 0..n {
        let probs = z.probs(i);
        let mut neg_total = 0.0;
        for (px, &m) in z.mask(i).iter().enumerate() {
            let m = losses::clamp_prob(m);
            clamped[px] = m;
            pos[px] = losses::focal_term(m, true, w.focal_gamma, w.focal_alpha);
            neg[px] = losses::focal_term(m, false, w.focal_gamma, w.focal_alpha);
            neg_total += neg[px];
        }
        let m_total: f64 = clamped.iter().sum();
        for (j, s) in gt.iter().enumerate() {
            let mut shift = 0.0;
            let mut inter = 0.0;
            for px in 0..hw {
                let t = s.mask[px];
                shift += t * (pos[px] - neg[px]);
                inter += t * clamped[px];
            }
            let focal = (neg_total + shift) / hw as f64;
            let dice = 1.0 - (2.0 * inter + w.dice_epsilon) / (m_total + gt_area[j] + w.dice_epsilon);
            data[i * gt.len() + j] = -probs[s.class - 1] + w.lambda_focal * focal + w.lambda_dice * dice;
        }
    }
    CostMatrix::new(n, gt.len(), data)
}

/// Minimum-cost injective assignment of columns to rows.
///
/// The rectangular problem is padded to square with a constant sentinel of
/// `max_entry + 1`; padded columns cost the same for every row, so they never
/// change which rows the real columns go to.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (n, m) = (cost.rows(), cost.cols());
    if m == 0 {
        return Assignment { sigma: vec![None; n], num_gt: 0 };
    }
    let sentinel = cost.data().iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let at = |i: usize, j: usize| if j < m { cost.get(i, j) } else { sentinel };

    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
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
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![None; n];
    for j in 1..=m {
        sigma[owner[j] - 1] = Some(j - 1);
    }
    Assignment { sigma, num_gt: m }
}

/// Slot `i` takes the segment of class `i + 1`, or no-object when absent.
pub fn fixed_matching(gt: &[TargetSegment], num_queries: usize, num_classes: usize) -> Result<Assignment> {
    if num_queries != num_classes {
        return Err(Error::Input(format!(
            "fixed matching needs N == K, got N = {num_queries}, K = {num_classes}"
        )));
    }
    let mut sigma = vec![None; num_queries];
    for (j, s) in gt.iter().enumerate() {
        if s.class == 0 || s.class > num_classes {
            return Err(Error::Input(format!("class {} outside 1..={num_classes}", s.class)));
        }
        let slot = &mut sigma[s.class - 1];
        if slot.is_some() {
            return Err(Error::Input(format!("class {} appears in more than one segment", s.class)));
        }
        *slot = Some(j);
    }
    Assignment::new(sigma, gt.len())
}

/// Exhaustive minimum over all injections; ties go to the lexicographically
/// smallest row sequence (column 0's row first).
pub fn brute_force_matching(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows(), cost.cols());
    if m > BRUTE_FORCE_MAX_GT {
        return Err(Error::Input(format!("brute force refuses {m} > {BRUTE_FORCE_MAX_GT} columns")));
    }

    struct Search<'a> {
        cost: &'a CostMatrix,
        rows: Vec<usize>,
        used: Vec<bool>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        fn go(&mut self, col: usize) {
            if col == self.cost.cols() {
                let total: f64 = self.rows.iter().enumerate().map(|(j, &i)| self.cost.get(i, j)).sum();
                if self.best.as_ref().is_none_or(|(b, _)| total < *b) {
                    self.best = Some((total, self.rows.clone()));
                }
                return;
            }
            for i in 0..self.cost.rows() {
                if !self.used[i] {
                    self.used[i] = true;
                    self.rows.push(i);
                    self.go(col + 1);
                    self.rows.pop();
                    self.used[i] = false;
                }
            }
        }
    }

    let mut search = Search { cost, rows: Vec::with_capacity(m), used: vec![false; n], best: None };
    search.go(0);
    let (_, rows) = search.best.expect("n >= m guarantees at least one injection");
    let mut sigma = vec![None; n];
    for (j, i) in rows.into_iter().enumerate() {
        sigma[i] = Some(j);
    }
    Assignment::new(sigma, m)
}
