//! Assignment solvers for per-layer channel matching.
//!
//! Two solvers share one input type. [`sinkhorn`] produces a doubly stochastic
//! (soft) plan by entropy-regularized iterative scaling, run in the log domain.
//! [`hungarian`] produces the exact maximum-similarity permutation (hard plan).
//! [`adaptive_match`] picks between them from the temperature and negates the
//! similarity for deep layers, so that the dissimilar channels get paired.
//!
//! Ties are broken everywhere by lowest row index, then lowest column index:
//! among all optimal permutations the solver returns the lexicographically
//! smallest column assignment.

use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, Result};

/// Node-pair similarity scores between the channels of two models in one
/// layer. Higher means more similar.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return invalid("similarity matrix must be non-empty");
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return invalid(format!("similarity entry ({r}, {c}) is not finite: {v}"));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return invalid("ragged similarity rows");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((n, m), flat)
            .map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
        Self::new(values)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_square(&self) -> bool {
        self.values.nrows() == self.values.ncols()
    }

    pub fn negated(&self) -> Self {
        Self {
            values: self.values.mapv(|v| -v),
        }
    }

    fn require_square(&self) -> Result<usize> {
        let (r, c) = self.shape();
        if r != c {
            return invalid(format!("similarity matrix must be square, got {r}x{c}"));
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Soft,
    Hard,
}

/// Matching between old-model channels (rows) and new-model channels
/// (columns). Soft plans are doubly stochastic, hard plans are permutation
/// matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    matrix: Array2<f64>,
    mode: PlanMode,
    converged: bool,
    iterations: usize,
}

impl TransportPlan {
    /// Hard plan sending row `a` to column `assignment[a]`.
    pub fn from_permutation(assignment: &[usize]) -> Result<Self> {
        let n = assignment.len();
        let mut seen = vec![false; n];
        for &c in assignment {
            if c >= n || seen[c] {
                return invalid(format!("{assignment:?} is not a permutation"));
            }
            seen[c] = true;
        }
        let mut matrix = Array2::zeros((n, n));
        for (a, &c) in assignment.iter().enumerate() {
            matrix[[a, c]] = 1.0;
        }
        Ok(Self {
            matrix,
            mode: PlanMode::Hard,
            converged: true,
            iterations: 0,
        })
    }

    pub fn identity(n: usize) -> Self {
        let ids: Vec<usize> = (0..n).collect();
        Self::from_permutation(&ids).expect("identity is a permutation")
    }

    /// Wraps an arbitrary nonnegative square matrix as a soft plan. Used for
    /// externally produced plans; marginals are not enforced here.
    pub fn soft_from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return invalid("transport plan must be square");
        }
        if matrix.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("transport plan entries must be finite and nonnegative");
        }
        Ok(Self {
            matrix,
            mode: PlanMode::Soft,
            converged: true,
            iterations: 0,
        })
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    pub fn mode(&self) -> PlanMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// False only for Sinkhorn plans that hit `max_iters` before the
    /// marginals were within tolerance.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Row-to-column assignment for hard plans, `None` for soft plans.
    pub fn permutation(&self) -> Option<Vec<usize>> {
        if self.mode != PlanMode::Hard {
            return None;
        }
        Some(
            self.matrix
                .rows()
                .into_iter()
                .map(|row| row.iter().position(|&v| v == 1.0).expect("hard plan row"))
                .collect(),
        )
    }

    pub fn is_identity(&self) -> bool {
        self.matrix
            .indexed_iter()
            .all(|((r, c), &v)| v == if r == c { 1.0 } else { 0.0 })
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn marginal_error(&self) -> f64 {
        let rows = self.matrix.rows().into_iter().map(|r| r.sum());
        let cols = self.matrix.columns().into_iter().map(|c| c.sum());
        rows.chain(cols).map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Entropy temperature applied to the similarity after rescaling to [0, 1].
    pub tau: f64,
    /// At or below this temperature the exact Hungarian solver is used.
    pub tau_min: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            tau_min: 1e-3,
            max_iters: 300,
            marginal_tol: 1e-6,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.tau_min > 0.0 && self.tau_min.is_finite()) {
            return invalid(format!("tau_min must be positive, got {}", self.tau_min));
        }
        if self.max_iters == 0 {
            return invalid("max_iters must be at least 1");
        }
        if !(self.marginal_tol > 0.0) {
            return invalid(format!("marginal_tol must be positive, got {}", self.marginal_tol));
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropy-regularized doubly stochastic plan maximizing similarity.
///
/// The similarity is rescaled to [0, 1] first, so `cfg.tau` is independent of
/// the similarity's units. Iterates alternating row and column normalization of
/// `exp(sim / tau)` through log-potentials. A plan that misses
/// `cfg.marginal_tol` after `cfg.max_iters` rounds is still returned, with
/// [`TransportPlan::converged`] false.
pub fn sinkhorn(sim: &SimilarityMatrix, cfg: &MatchConfig) -> Result<TransportPlan> {
    let n = sim.require_square()?;
    cfg.validate()?;
    let values = sim.values();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let kernel: Array2<f64> = if range > 0.0 {
        values.mapv(|v| (v - lo) / range / cfg.tau)
    } else {
        Array2::zeros((n, n))
    };

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        for i in 0..n {
            let row = kernel.row(i);
            f[i] = -log_sum_exp(row.iter().zip(&g).map(|(k, gj)| k + gj));
        }
        for j in 0..n {
            let col = kernel.column(j);
            g[j] = -log_sum_exp(col.iter().zip(&f).map(|(k, fi)| k + fi));
        }
        // Columns are exact after the column update; rows carry the residual.
        let row_err = (0..n)
            .map(|i| {
                let s: f64 = (0..n).map(|j| (kernel[[i, j]] + f[i] + g[j]).exp()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max);
        if row_err <= cfg.marginal_tol {
            converged = true;
            break;
        }
    }

    let matrix = Array2::from_shape_fn((n, n), |(i, j)| (kernel[[i, j]] + f[i] + g[j]).exp());
    let mut plan = TransportPlan {
        matrix,
        mode: PlanMode::Soft,
        converged,
        iterations,
    };
    if plan.converged && plan.marginal_error() > cfg.marginal_tol {
        plan.converged = false;
    }
    Ok(plan)
}

/// Exact maximum-similarity permutation.
pub fn hungarian(sim: &SimilarityMatrix) -> Result<TransportPlan> {
    sim.require_square()?;
    let assignment = max_weight_assignment(sim.values());
    TransportPlan::from_permutation(&assignment)
}

/// Picks the exact solver when `cfg.tau <= cfg.tau_min`, Sinkhorn otherwise.
/// Deep layers solve on the negated similarity.
pub fn adaptive_match(
    sim: &SimilarityMatrix,
    cfg: &MatchConfig,
    deep_layer: bool,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let negated;
    let target = if deep_layer {
        negated = sim.negated();
        &negated
    } else {
        sim
    };
    if cfg.tau <= cfg.tau_min {
        hungarian(target)
    } else {
        sinkhorn(target, cfg)
    }
}

/// Nearest hard permutation to a plan, by maximum-weight assignment on its
/// entries. Hard plans come back unchanged.
pub fn round_to_permutation(plan: &TransportPlan) -> Result<TransportPlan> {
    if plan.mode == PlanMode::Hard {
        return Ok(plan.clone());
    }
    let sim = SimilarityMatrix::new(plan.matrix.clone())?;
    hungarian(&sim)
}

/// Frobenius inner product `sum(plan * sim)`.
pub fn assignment_score(sim: &SimilarityMatrix, plan: &TransportPlan) -> Result<f64> {
    if sim.shape() != plan.matrix.dim() {
        return invalid(format!(
            "plan shape {:?} does not match similarity shape {:?}",
            plan.matrix.dim(),
            sim.shape()
        ));
    }
    Ok(sim
        .values()
        .iter()
        .zip(plan.matrix.iter())
        .map(|(s, p)| s * p)
        .sum())
}

/// Row-to-column assignment maximizing the total weight, lexicographically
/// smallest among optima.
fn max_weight_assignment(weights: ArrayView2<'_, f64>) -> Vec<usize> {
    let n = weights.nrows();
    if n == 0 {
        return Vec::new();
    }
    let cost = weights.mapv(|w| -w);
    let (assignment, u, v) = shortest_augmenting_path(&cost);

    let scale = cost.iter().fold(1.0_f64, |m, c| m.max(c.abs()));
    let tight_tol = 1e-9 * scale;
    let tight = |r: usize, c: usize| cost[[r, c]] - u[r] - v[c] <= tight_tol;
    let candidate = lexicographic_min_matching(n, assignment.clone(), tight);

    let total = |a: &[usize]| -> f64 { a.iter().enumerate().map(|(r, &c)| weights[[r, c]]).sum() };
    if candidate != assignment && total(&candidate) >= total(&assignment) {
        candidate
    } else {
        assignment
    }
}

/// O(n^3) Hungarian algorithm (shortest augmenting paths with potentials).
/// Returns the assignment together with the row and column duals.
fn shortest_augmenting_path(cost: &Array2<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.nrows();
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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

    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    (assignment, u[1..].to_vec(), v[1..].to_vec())
}

/// Walks rows in order and moves each to its lowest tight column that still
/// admits a perfect matching of the remaining rows, via alternating cycles.
fn lexicographic_min_matching(
    n: usize,
    mut assign: Vec<usize>,
    tight: impl Fn(usize, usize) -> bool,
) -> Vec<usize> {
    let mut owner = vec![0; n];
    for (r, &c) in assign.iter().enumerate() {
        owner[c] = r;
    }
    for a in 0..n {
        let target = assign[a];
        for c in 0..target {
            if owner[c] < a || !tight(a, c) {
                continue;
            }
            // Rematch owner[c] through rows > a until column `target` frees up.
            let start = owner[c];
            let mut prev_col: Vec<Option<usize>> = vec![None; n];
            let mut visited = vec![false; n];
            visited[c] = true;
            let mut queue = std::collections::VecDeque::from([(start, c)]);
            let mut found = None;
            while let Some((row, via)) = queue.pop_front() {
                for col in 0..n {
                    if visited[col] || !tight(row, col) || owner[col] < a {
                        continue;
                    }
                    if col != target && owner[col] == a {
                        continue;
                    }
                    visited[col] = true;
                    prev_col[col] = Some(via);
                    if col == target {
                        found = Some(col);
                        break;
                    }
                    queue.push_back((owner[col], col));
                }
                if found.is_some() {
                    break;
                }
            }
            if let Some(mut col) = found {
                // Shift each row on the path one column along.
                while let Some(from) = prev_col[col] {
                    let row = owner[from];
                    assign[row] = col;
                    owner[col] = row;
                    col = from;
                    if from == c {
                        break;
                    }
                }
                assign[a] = c;
                owner[c] = a;
                break;
            }
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn sinkhorn_uniform_input_gives_uniform_plan() {
        let s = sim(&[vec![2.0; 3], vec![2.0; 3], vec![2.0; 3]]);
        let cfg = MatchConfig {
            tau: 1.0,
            ..Default::default()
        };
        let plan = sinkhorn(&s, &cfg).unwrap();
        assert!(plan.converged());
        for v in plan.matrix() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_single_entry() {
        let plan = sinkhorn(&sim(&[vec![5.0]]), &MatchConfig::default()).unwrap();
        assert_eq!(plan.matrix()[[0, 0]], 1.0);
    }

    #[test]
    fn sinkhorn_rejects_rectangular() {
        let s = sim(&[vec![1.0, 2.0]]);
        assert!(sinkhorn(&s, &MatchConfig::default()).is_err());
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let s = sim(&[vec![1.0, 0.0, 0.3], vec![0.2, 0.9, 0.1], vec![0.4, 0.4, 0.0]]);
        let cfg = MatchConfig {
            tau: 0.01,
            max_iters: 1,
            marginal_tol: 1e-12,
            ..Default::default()
        };
        let plan = sinkhorn(&s, &cfg).unwrap();
        assert!(!plan.converged());
        assert_eq!(plan.iterations(), 1);
    }

    #[test]
    fn non_finite_similarity_is_rejected() {
        assert!(SimilarityMatrix::new(array![[1.0, f64::NAN], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn hungarian_small_cases() {
        let id = hungarian(&sim(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(id.permutation().unwrap(), vec![0, 1]);
        let swap = hungarian(&sim(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert_eq!(swap.permutation().unwrap(), vec![1, 0]);
    }

    #[test]
    fn hungarian_breaks_ties_lexicographically() {
        let plan = hungarian(&sim(&vec![vec![1.0; 4]; 4])).unwrap();
        assert_eq!(plan.permutation().unwrap(), vec![0, 1, 2, 3]);

        // Rows 0 and 1 both prefer columns {1, 2} equally.
        let s = sim(&[
            vec![0.0, 5.0, 5.0, 0.0],
            vec![0.0, 5.0, 5.0, 0.0],
            vec![3.0, 0.0, 0.0, 3.0],
            vec![3.0, 0.0, 0.0, 3.0],
        ]);
        assert_eq!(hungarian(&s).unwrap().permutation().unwrap(), vec![1, 2, 0, 3]);
    }

    #[test]
    fn round_to_permutation_cases() {
        let soft = TransportPlan::soft_from_matrix(array![[0.9, 0.1], [0.1, 0.9]]).unwrap();
        assert!(round_to_permutation(&soft).unwrap().is_identity());
        let flat = TransportPlan::soft_from_matrix(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(round_to_permutation(&flat).unwrap().is_identity());
        let hard = TransportPlan::identity(3);
        assert_eq!(round_to_permutation(&hard).unwrap(), hard);
    }

    #[test]
    fn assignment_score_shape_mismatch() {
        let s = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(assignment_score(&s, &TransportPlan::identity(3)).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = MatchConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = MatchConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
