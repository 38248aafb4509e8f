//! Two-step convex bit allocation: a simplex-constrained weighted
//! power-sum minimization, followed by a refinement step that adds the
//! smoothness penalty evaluated on first-order-linearized R-D models.
//!
//! The solver is a spectral projected gradient method with backtracking
//! line search on `{sum(x) = R, x >= floor}`. The budget equality is
//! without loss of generality: the objective is strictly decreasing in
//! every coordinate, so any optimum of the inequality-constrained problem
//! spends the whole budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ConfidenceGrid, GopGrouping, ScanOrder};
use crate::metrics;
use crate::rdmodel::HyperbolicModel;

/// Hard cap on solver iterations.
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Adjacency-weighted difference structure of the smoothness penalty,
/// materialized sparsely: only ordered frame pairs with nonzero weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpStructure {
    pub frame_count: usize,
    /// (i, j, weight) for ordered pairs i != j with positive weight.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl SpStructure {
    /// Builds the pair weights from the scan order and confidence grid:
    /// weight = delta(cell_i, cell_j) * phi(min(w_i, w_j)).
    pub fn build(scan: &ScanOrder, confidence: &ConfidenceGrid) -> Result<Self> {
        if scan.rows != confidence.rows || scan.cols != confidence.cols {
            return Err(Error::DimensionMismatch(format!(
                "scan order {}x{} vs confidence {}x{}",
                scan.rows, scan.cols, confidence.rows, confidence.cols
            )));
        }
        let n = scan.frame_count();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = pair_weight(scan, confidence, i, j)?;
                if w > 0.0 {
                    pairs.push((i, j, w));
                }
            }
        }
        Ok(SpStructure {
            frame_count: n,
            pairs,
        })
    }

    /// Empty structure (single-cell grids, or lambda = 0 shortcuts).
    pub fn empty(frame_count: usize) -> Self {
        SpStructure {
            frame_count,
            pairs: Vec::new(),
        }
    }

    /// Quadratic form `sum_pairs w * (d_i - d_j)^2` over a distortion vector.
    pub fn quadratic(&self, d: &[f64]) -> f64 {
        self.pairs
            .iter()
            .map(|&(i, j, w)| {
                let diff = d[i] - d[j];
                w * diff * diff
            })
            .sum()
    }

    /// Accumulates the gradient of `quadratic` with respect to `d` into `out`.
    pub fn quadratic_grad(&self, d: &[f64], out: &mut [f64]) {
        for &(i, j, w) in &self.pairs {
            let diff = d[i] - d[j];
            out[i] += 2.0 * w * diff;
            out[j] -= 2.0 * w * diff;
        }
    }
}

fn pair_weight(scan: &ScanOrder, confidence: &ConfidenceGrid, i: usize, j: usize) -> Result<f64> {
    let ci = scan.cell_of(i);
    let cj = scan.cell_of(j);
    let d = metrics::delta(ci, cj);
    if d == 0 {
        return Ok(0.0);
    }
    let w = metrics::adjacency_weight(
        confidence.get(ci.0, ci.1),
        confidence.get(cj.0, cj.1),
    )?;
    Ok(d as f64 * w)
}

/// Dense n^2 x n signed difference matrix; row k (1-based) addresses the
/// ordered pair (i, j) with i = ceil(k/n), j = k - n*floor((k-1)/n).
/// Reference path for tests; the solver uses the sparse pair list.
pub fn dense_difference_matrix(n: usize) -> Vec<Vec<f64>> {
    let mut z = vec![vec![0.0; n]; n * n];
    for k in 1..=n * n {
        let (i, j) = dense_row_pair(k, n);
        if i != j {
            z[k - 1][i - 1] = 1.0;
            z[k - 1][j - 1] = -1.0;
        }
    }
    z
}

/// 1-based (i, j) addressed by 1-based row k of the dense difference matrix.
pub fn dense_row_pair(k: usize, n: usize) -> (usize, usize) {
    let i = k.div_ceil(n);
    let j = k - n * ((k - 1) / n);
    (i, j)
}

/// Dense n^2 diagonal of pair weights matching `dense_difference_matrix`.
pub fn dense_psi(scan: &ScanOrder, confidence: &ConfidenceGrid) -> Result<Vec<f64>> {
    let n = scan.frame_count();
    let mut psi = vec![0.0; n * n];
    for k in 1..=n * n {
        let (i, j) = dense_row_pair(k, n);
        if i != j {
            psi[k - 1] = pair_weight(scan, confidence, i - 1, j - 1)?;
        }
    }
    Ok(psi)
}

/// Allocation variables: one per frame, or one per (virtual) GOP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VariableKind {
    PerFrame,
    PerGop(GopGrouping),
}

/// Fully assembled allocation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    /// Per-frame models (length = frame count, also for GOP variables).
    pub models: Vec<HyperbolicModel>,
    /// Per-frame confidence weights phi(f_i).
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub budget: f64,
    pub variables: VariableKind,
    pub sp: SpStructure,
    /// uv grid shape, for target normalization.
    pub grid_shape: (usize, usize),
}

impl AllocationProblem {
    pub fn frame_count(&self) -> usize {
        self.models.len()
    }

    pub fn variable_count(&self) -> usize {
        match &self.variables {
            VariableKind::PerFrame => self.models.len(),
            VariableKind::PerGop(g) => g.group_count(),
        }
    }

    /// Variable index owning frame `i`.
    pub fn variable_of(&self, frame: usize) -> usize {
        match &self.variables {
            VariableKind::PerFrame => frame,
            VariableKind::PerGop(g) => g.gop_of(frame),
        }
    }

    /// Per-variable lower bound, keeping the beta < 0 singularity at bay.
    pub fn floor(&self) -> f64 {
        (1e-6 * self.budget / self.variable_count() as f64).max(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.models.len();
        if n == 0 || self.weights.len() != n || self.sp.frame_count != n {
            return Err(Error::InvalidInput(
                "problem shape mismatch between models, weights and SP structure".into(),
            ));
        }
        if self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidInput("negative frame weight".into()));
        }
        if self.budget <= 0.0 || self.lambda < 0.0 {
            return Err(Error::InvalidInput("budget must be > 0, lambda >= 0".into()));
        }
        if self.models.iter().any(|m| m.beta >= 0.0) {
            return Err(Error::Solve(
                "non-convex model (beta >= 0) reached the optimizer".into(),
            ));
        }
        let v = self.variable_count() as f64;
        if v * self.floor() >= self.budget {
            return Err(Error::Solve(format!(
                "infeasible floor: {v} variables x floor {} >= budget {}",
                self.floor(),
                self.budget
            )));
        }
        Ok(())
    }

    /// Exact per-frame distortions implied by a per-variable allocation.
    pub fn distortions(&self, allocation: &[f64]) -> Vec<f64> {
        (0..self.frame_count())
            .map(|i| self.models[i].predict(allocation[self.variable_of(i)]))
            .collect()
    }

    /// Smooth weighted-distortion objective of step (a):
    /// `sum_i w_i * alpha_i * x_{v(i)}^{beta_i}`.
    pub fn step_a_objective(&self, allocation: &[f64]) -> f64 {
        (0..self.frame_count())
            .map(|i| self.weights[i] * self.models[i].predict(allocation[self.variable_of(i)]))
            .sum()
    }

    fn step_a_gradient(&self, allocation: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..self.frame_count() {
            let v = self.variable_of(i);
            let m = &self.models[i];
            out[v] += self.weights[i] * m.alpha * m.beta * allocation[v].powf(m.beta - 1.0);
        }
    }

    /// Predicted target value at an allocation, using the exact
    /// (non-linearized) models in both terms.
    pub fn predict_target(&self, allocation: &[f64]) -> Result<f64> {
        if allocation.len() != self.variable_count() {
            return Err(Error::InvalidInput(format!(
                "allocation length {} vs {} variables",
                allocation.len(),
                self.variable_count()
            )));
        }
        if allocation.iter().any(|r| *r <= 0.0) {
            return Err(Error::InvalidInput("infeasible allocation".into()));
        }
        let d = self.distortions(allocation);
        let cells = (self.grid_shape.0 * self.grid_shape.1) as f64;
        let wmse: f64 = d
            .iter()
            .zip(&self.weights)
            .map(|(di, wi)| wi * di)
            .sum::<f64>()
            / cells;
        let sp = self.sp.quadratic(&d);
        Ok(wmse + self.lambda * sp.sqrt() / cells)
    }
}

/// First-order tangent of each frame model at an expansion allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linearization {
    /// Per-frame intercepts `alpha_i * (1 - beta_i) * X^beta_i`.
    pub intercepts: Vec<f64>,
    /// Per-frame slopes `alpha_i * beta_i * X^(beta_i - 1)` with respect to
    /// the frame's own variable.
    pub slopes: Vec<f64>,
    pub expansion_point: Vec<f64>,
}

impl Linearization {
    pub fn distortion(&self, frame: usize, var_value: f64) -> f64 {
        self.intercepts[frame] + self.slopes[frame] * var_value
    }
}

/// Tangent expansion of all frame models at `expansion` (one entry per
/// variable, strictly positive).
pub fn linearize(problem: &AllocationProblem, expansion: &[f64]) -> Result<Linearization> {
    if expansion.len() != problem.variable_count() {
        return Err(Error::InvalidInput(format!(
            "expansion point length {} vs {} variables",
            expansion.len(),
            problem.variable_count()
        )));
    }
    if expansion.iter().any(|x| *x <= 0.0) {
        return Err(Error::InvalidInput(
            "expansion point must be strictly positive".into(),
        ));
    }
    let n = problem.frame_count();
    let mut intercepts = Vec::with_capacity(n);
    let mut slopes = Vec::with_capacity(n);
    for i in 0..n {
        let m = &problem.models[i];
        let x = expansion[problem.variable_of(i)];
        intercepts.push(m.alpha * (1.0 - m.beta) * x.powf(m.beta));
        slopes.push(m.alpha * m.beta * x.powf(m.beta - 1.0));
    }
    Ok(Linearization {
        intercepts,
        slopes,
        expansion_point: expansion.to_vec(),
    })
}

/// Result of one solve step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSolution {
    /// Per-variable bits (per frame or per GOP).
    pub allocation: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Relative spread of active-coordinate gradients (step (a) KKT check).
    pub kkt_residual: f64,
}

/// Euclidean projection onto `{x >= floor, sum(x) = budget}`.
pub fn project_simplex(x: &[f64], floor: f64, budget: f64) -> Vec<f64> {
    let n = x.len();
    let surplus = budget - n as f64 * floor;
    let y: Vec<f64> = x.iter().map(|v| v - floor).collect();
    let mut sorted = y.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - surplus) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0) + floor).collect()
}

struct SpgOutcome {
    x: Vec<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
}

/// Spectral projected gradient with Armijo backtracking on the simplex.
fn spg_minimize<F, G>(
    f: F,
    grad: G,
    x0: Vec<f64>,
    floor: f64,
    budget: f64,
    max_iter: usize,
) -> SpgOutcome
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64], &mut [f64]),
{
    let n = x0.len();
    let mut x = project_simplex(&x0, floor, budget);
    let mut g = vec![0.0; n];
    grad(&x, &mut g);
    let mut fx = f(&x);
    let mut step = initial_step(&x, &g);
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..max_iter {
        iterations = it + 1;
        let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
        let proj = project_simplex(&trial, floor, budget);
        let d: Vec<f64> = proj.iter().zip(&x).map(|(p, xi)| p - xi).collect();
        let d_norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        // Projected-gradient stationarity at the current step scale.
        if d_norm / (step.max(1e-300) * grad_scale(&g).max(1e-300)) <= 1e-8
            || d_norm <= 1e-14 * x_norm
        {
            converged = true;
            break;
        }
        let gd: f64 = g.iter().zip(&d).map(|(gi, di)| gi * di).sum();
        let mut theta = 1.0;
        let mut candidate: Vec<f64>;
        let mut f_new;
        loop {
            candidate = x.iter().zip(&d).map(|(xi, di)| xi + theta * di).collect();
            f_new = f(&candidate);
            if f_new <= fx + 1e-4 * theta * gd || theta < 1e-14 {
                break;
            }
            theta *= 0.5;
        }
        let mut g_new = vec![0.0; n];
        grad(&candidate, &mut g_new);
        // Barzilai-Borwein step from the accepted move.
        let s: Vec<f64> = candidate.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-30, 1e30)
        } else {
            step * 2.0
        };
        let rel_change = (fx - f_new).abs() / fx.abs().max(1e-300);
        x = candidate;
        g = g_new;
        fx = f_new;
        // Near machine precision; the gradient test above is the primary
        // stopping rule and decides well before this in ordinary cases.
        if rel_change <= 1e-15 {
            converged = true;
            break;
        }
    }
    SpgOutcome {
        x,
        objective: fx,
        iterations,
        converged,
    }
}

fn initial_step(x: &[f64], g: &[f64]) -> f64 {
    let gs = grad_scale(g);
    if gs > 0.0 {
        let xs = x.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
        (0.1 * xs / gs).clamp(1e-30, 1e30)
    } else {
        1.0
    }
}

fn grad_scale(g: &[f64]) -> f64 {
    g.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// Relative spread of the smooth-objective gradient across coordinates
/// strictly above the floor. Zero means exact KKT stationarity.
pub fn kkt_residual(problem: &AllocationProblem, allocation: &[f64]) -> f64 {
    let mut g = vec![0.0; allocation.len()];
    problem.step_a_gradient(allocation, &mut g);
    let floor = problem.floor();
    let active: Vec<f64> = allocation
        .iter()
        .zip(&g)
        .filter(|(x, _)| **x > floor * (1.0 + 1e-9) + 1e-12)
        .map(|(_, gi)| *gi)
        .collect();
    if active.len() < 2 {
        return 0.0;
    }
    let max = active.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = active.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = active.iter().map(|v| v.abs()).sum::<f64>() / active.len() as f64;
    (max - min) / scale.max(1e-300)
}

/// Step (a): minimize the weighted distortion sum over the budget simplex,
/// omitting the smoothness penalty.
pub fn solve_step_a(problem: &AllocationProblem) -> Result<AllocationSolution> {
    problem.validate()?;
    let v = problem.variable_count();
    let floor = problem.floor();
    let x0 = vec![problem.budget / v as f64; v];
    let out = spg_minimize(
        |x| problem.step_a_objective(x),
        |x, g| problem.step_a_gradient(x, g),
        x0,
        floor,
        problem.budget,
        DEFAULT_MAX_ITER,
    );
    let kkt = kkt_residual(problem, &out.x);
    Ok(AllocationSolution {
        allocation: out.x,
        objective: out.objective,
        converged: out.converged,
        iterations: out.iterations,
        kkt_residual: kkt,
    })
}

/// Composite objective of step (b): exact models in the weighted term,
/// linearized distortions in the smoothed L2 penalty.
pub fn step_b_objective(
    problem: &AllocationProblem,
    lin: &Linearization,
    allocation: &[f64],
) -> f64 {
    let smooth = problem.step_a_objective(allocation);
    if problem.lambda == 0.0 || problem.sp.pairs.is_empty() {
        return smooth;
    }
    let d: Vec<f64> = (0..problem.frame_count())
        .map(|i| lin.distortion(i, allocation[problem.variable_of(i)]))
        .collect();
    let q = problem.sp.quadratic(&d);
    smooth + problem.lambda * (q + smoothing_eps(lin).powi(2)).sqrt()
}

fn smoothing_eps(lin: &Linearization) -> f64 {
    let scale = lin
        .intercepts
        .iter()
        .map(|c| c.abs())
        .fold(0.0f64, f64::max)
        .max(1.0);
    1e-12 * scale
}

fn step_b_gradient(
    problem: &AllocationProblem,
    lin: &Linearization,
    allocation: &[f64],
    out: &mut [f64],
) {
    problem.step_a_gradient(allocation, out);
    if problem.lambda == 0.0 || problem.sp.pairs.is_empty() {
        return;
    }
    let n = problem.frame_count();
    let d: Vec<f64> = (0..n)
        .map(|i| lin.distortion(i, allocation[problem.variable_of(i)]))
        .collect();
    let q = problem.sp.quadratic(&d);
    let denom = 2.0 * (q + smoothing_eps(lin).powi(2)).sqrt();
    let mut dq = vec![0.0; n];
    problem.sp.quadratic_grad(&d, &mut dq);
    for i in 0..n {
        out[problem.variable_of(i)] += problem.lambda * dq[i] * lin.slopes[i] / denom;
    }
}

/// Step (b): refine the step-(a) solution with the linearized smoothness
/// penalty. With lambda = 0 the step-(a) solution is returned unchanged.
pub fn solve_step_b(
    problem: &AllocationProblem,
    lin: &Linearization,
    step_a: &AllocationSolution,
) -> Result<AllocationSolution> {
    problem.validate()?;
    if problem.lambda == 0.0 || problem.sp.pairs.is_empty() {
        return Ok(step_a.clone());
    }
    let floor = problem.floor();
    let out = spg_minimize(
        |x| step_b_objective(problem, lin, x),
        |x, g| step_b_gradient(problem, lin, x, g),
        step_a.allocation.clone(),
        floor,
        problem.budget,
        DEFAULT_MAX_ITER,
    );
    // The step-(a) point is feasible for step (b); never do worse.
    let step_a_value = step_b_objective(problem, lin, &step_a.allocation);
    let (x, objective) = if out.objective <= step_a_value {
        (out.x, out.objective)
    } else {
        (step_a.allocation.clone(), step_a_value)
    };
    Ok(AllocationSolution {
        allocation: x,
        objective,
        converged: out.converged,
        iterations: out.iterations,
        kkt_residual: f64::NAN,
    })
}

/// Exhaustive search over the discretized simplex, for verification only.
pub fn brute_force_oracle<F>(
    objective: F,
    budget: f64,
    floor: f64,
    n: usize,
    grid_steps: usize,
) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    if n > 4 {
        return Err(Error::InvalidInput(format!(
            "oracle dimensionality cap exceeded: n = {n} > 4"
        )));
    }
    if grid_steps > 400 {
        return Err(Error::InvalidInput(format!(
            "oracle resolution cap exceeded: {grid_steps} > 400"
        )));
    }
    let surplus = budget - n as f64 * floor;
    if surplus <= 0.0 {
        return Err(Error::Solve("infeasible floor in oracle".into()));
    }
    let unit = surplus / grid_steps as f64;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut alloc = vec![0.0; n];
    search(
        &objective,
        floor,
        unit,
        grid_steps,
        0,
        n,
        &mut alloc,
        &mut best,
    );
    Ok(best.unwrap())
}

#[allow(clippy::too_many_arguments)]
fn search<F>(
    objective: &F,
    floor: f64,
    unit: f64,
    remaining: usize,
    idx: usize,
    n: usize,
    alloc: &mut Vec<f64>,
    best: &mut Option<(Vec<f64>, f64)>,
) where
    F: Fn(&[f64]) -> f64,
{
    if idx == n - 1 {
        alloc[idx] = floor + unit * remaining as f64;
        let value = objective(alloc);
        if best.as_ref().map_or(true, |(_, b)| value < *b) {
            *best = Some((alloc.clone(), value));
        }
        return;
    }
    for c in 0..=remaining {
        alloc[idx] = floor + unit * c as f64;
        search(objective, floor, unit, remaining - c, idx + 1, n, alloc, best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ScanKind;
    use crate::rdmodel::ModelKind;

    fn model(alpha: f64, beta: f64) -> HyperbolicModel {
        HyperbolicModel {
            alpha,
            beta,
            r_squared: 1.0,
            kind: ModelKind::FrameBits,
            gop_index: None,
            non_monotone: false,
            mse_clamped: 0,
        }
    }

    fn per_frame_problem(
        alphas: &[f64],
        betas: &[f64],
        weights: &[f64],
        lambda: f64,
        budget: f64,
    ) -> AllocationProblem {
        let n = alphas.len();
        let scan = ScanOrder::build(ScanKind::Raster, 1, n, n).unwrap();
        let conf = ConfidenceGrid::uniform(1, n);
        AllocationProblem {
            models: alphas
                .iter()
                .zip(betas)
                .map(|(&a, &b)| model(a, b))
                .collect(),
            weights: weights.to_vec(),
            lambda,
            budget,
            variables: VariableKind::PerFrame,
            sp: SpStructure::build(&scan, &conf).unwrap(),
            grid_shape: (1, n),
        }
    }

    #[test]
    fn dense_difference_matrix_n2() {
        let z = dense_difference_matrix(2);
        assert_eq!(z[0], vec![0.0, 0.0]); // (f1, f1)
        assert_eq!(z[1], vec![1.0, -1.0]); // (f1, f2)
        assert_eq!(z[2], vec![-1.0, 1.0]); // (f2, f1)
        assert_eq!(z[3], vec![0.0, 0.0]); // (f2, f2)
    }

    #[test]
    fn dense_psi_values() {
        // Frames at (1,1),(1,2) with full confidence: 4-connected pair -> 2.
        let scan = ScanOrder::build(ScanKind::Raster, 1, 2, 2).unwrap();
        let conf = ConfidenceGrid::uniform(1, 2);
        let psi = dense_psi(&scan, &conf).unwrap();
        assert_eq!(psi, vec![0.0, 2.0, 2.0, 0.0]);

        // Frames at (1,1),(2,2), confidences (1, 0.5): diagonal pair -> 0.25.
        let mut cells = ScanOrder::build(ScanKind::Raster, 2, 2, 4).unwrap().to_csv();
        cells = cells.replace("2,1,2", "2,2,2").replace("4,2,2", "4,1,2");
        let scan = ScanOrder::from_csv(std::io::Cursor::new(cells), 2, 2).unwrap();
        let conf = ConfidenceGrid {
            rows: 2,
            cols: 2,
            values: vec![1.0, 1.0, 1.0, 0.5],
        };
        let psi = dense_psi(&scan, &conf).unwrap();
        // Row 2 of the dense layout is the ordered pair (f1, f2).
        assert_eq!(psi[1], 1.0 * 0.25);
    }

    #[test]
    fn sparse_matches_dense_quadratic_form() {
        let scan = ScanOrder::build(ScanKind::Snake, 3, 3, 9).unwrap();
        let conf =
            ConfidenceGrid::from_raw(3, 3, vec![0.2, 0.9, 0.4, 0.8, 1.0, 0.6, 0.1, 0.7, 0.5])
                .unwrap();
        let sp = SpStructure::build(&scan, &conf).unwrap();
        let z = dense_difference_matrix(9);
        let psi = dense_psi(&scan, &conf).unwrap();
        let d: Vec<f64> = (0..9).map(|i| (i as f64 * 1.37).sin() * 10.0 + 12.0).collect();
        let mut dense_val = 0.0;
        for (row, zk) in z.iter().enumerate() {
            let zd: f64 = zk.iter().zip(&d).map(|(a, b)| a * b).sum();
            dense_val += psi[row] * zd * zd;
        }
        let sparse_val = sp.quadratic(&d);
        assert!((dense_val - sparse_val).abs() <= 1e-12 * dense_val.abs().max(1.0));
    }

    #[test]
    fn projection_preserves_budget_and_floor() {
        let x = vec![5.0, -3.0, 10.0, 0.2];
        let p = project_simplex(&x, 1.0, 20.0);
        assert!((p.iter().sum::<f64>() - 20.0).abs() < 1e-9);
        assert!(p.iter().all(|v| *v >= 1.0 - 1e-12));
        // A feasible point projects to itself.
        let x = vec![4.0, 6.0, 10.0];
        let p = project_simplex(&x, 1.0, 20.0);
        for (a, b) in x.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn step_a_symmetric_split() {
        let p = per_frame_problem(&[2.0, 2.0], &[-1.0, -1.0], &[1.0, 1.0], 0.0, 10.0);
        let sol = solve_step_a(&p).unwrap();
        assert!((sol.allocation[0] - 5.0).abs() < 1e-6);
        assert!((sol.allocation[1] - 5.0).abs() < 1e-6);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn step_a_hand_derived_instance() {
        // KKT: 1/r1^2 = 4/r2^2 with r1 + r2 = 3 gives r = (1, 2), objective 3.
        let p = per_frame_problem(&[1.0, 1.0], &[-1.0, -1.0], &[1.0, 4.0], 0.0, 3.0);
        let sol = solve_step_a(&p).unwrap();
        assert!((sol.allocation[0] - 1.0).abs() < 1e-6, "{:?}", sol.allocation);
        assert!((sol.allocation[1] - 2.0).abs() < 1e-6);
        assert!((sol.objective - 3.0).abs() < 1e-9);
        assert!(sol.kkt_residual < 1e-6);
    }

    #[test]
    fn step_a_zero_weight_frame_gets_floor() {
        let p = per_frame_problem(&[1.0, 1.0], &[-1.0, -1.0], &[0.0, 1.0], 0.0, 100.0);
        let sol = solve_step_a(&p).unwrap();
        assert!(sol.allocation[0] <= p.floor() * (1.0 + 1e-6));
        assert!((sol.allocation.iter().sum::<f64>() - 100.0).abs() < 1e-7);
    }

    #[test]
    fn step_a_budget_is_tight() {
        let p = per_frame_problem(
            &[3.0, 1.0, 2.0],
            &[-0.7, -1.3, -1.0],
            &[1.0, 0.5, 0.8],
            0.0,
            1e6,
        );
        let sol = solve_step_a(&p).unwrap();
        let total: f64 = sol.allocation.iter().sum();
        assert!((total - 1e6).abs() <= 1e-9 * 1e6);
    }

    #[test]
    fn linearize_matches_tangent_values() {
        let p = per_frame_problem(&[2.0, 1.0], &[-1.0, -1.0], &[1.0, 1.0], 0.0, 3.0);
        let lin = linearize(&p, &[1.0, 2.0]).unwrap();
        // alpha=2, beta=-1 at X=1: d = -2r + 4, value 2 at r=1.
        assert!((lin.slopes[0] - (-2.0)).abs() < 1e-12);
        assert!((lin.intercepts[0] - 4.0).abs() < 1e-12);
        assert!((lin.distortion(0, 1.0) - 2.0).abs() < 1e-12);
        // alpha=1, beta=-1 at X=2: slope -0.25, intercept 1, value 0.5 at r=2.
        assert!((lin.slopes[1] - (-0.25)).abs() < 1e-12);
        assert!((lin.intercepts[1] - 1.0).abs() < 1e-12);
        assert!((lin.distortion(1, 2.0) - 0.5).abs() < 1e-12);
        assert!(lin.slopes.iter().all(|s| *s < 0.0));
        assert!(linearize(&p, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn step_b_with_zero_lambda_equals_step_a() {
        let p = per_frame_problem(&[2.0, 1.0, 3.0], &[-0.9, -1.1, -0.8], &[1.0, 0.7, 0.4], 0.0, 1e5);
        let a = solve_step_a(&p).unwrap();
        let lin = linearize(&p, &a.allocation).unwrap();
        let b = solve_step_b(&p, &lin, &a).unwrap();
        for (x, y) in a.allocation.iter().zip(&b.allocation) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn step_b_never_worse_than_step_a_point() {
        let p = per_frame_problem(&[5.0, 1.0], &[-1.0, -1.0], &[1.0, 0.2], 50.0, 1000.0);
        let a = solve_step_a(&p).unwrap();
        let lin = linearize(&p, &a.allocation).unwrap();
        let b = solve_step_b(&p, &lin, &a).unwrap();
        let at_a = step_b_objective(&p, &lin, &a.allocation);
        assert!(b.objective <= at_a + 1e-12 * at_a.abs());
    }

    #[test]
    fn step_b_large_lambda_equalizes_linearized_distortion() {
        // Asymmetric weights: lambda = 0 gives uneven distortions; a large
        // lambda pulls the linearized distortions together.
        let p0 = per_frame_problem(&[5.0, 1.0], &[-1.0, -1.0], &[1.0, 0.3], 0.0, 1000.0);
        let a = solve_step_a(&p0).unwrap();
        let lin = linearize(&p0, &a.allocation).unwrap();
        let mut p1 = p0.clone();
        p1.lambda = 1e4;
        let b = solve_step_b(&p1, &lin, &a).unwrap();
        let gap_at_a =
            (lin.distortion(0, a.allocation[0]) - lin.distortion(1, a.allocation[1])).abs();
        let gap_at_b =
            (lin.distortion(0, b.allocation[0]) - lin.distortion(1, b.allocation[1])).abs();
        assert!(gap_at_b < gap_at_a, "gaps: {gap_at_b} vs {gap_at_a}");
    }

    #[test]
    fn oracle_agrees_on_hand_instance() {
        let p = per_frame_problem(&[1.0, 1.0], &[-1.0, -1.0], &[1.0, 4.0], 0.0, 3.0);
        let floor = p.floor();
        let (alloc, obj) =
            brute_force_oracle(|x| p.step_a_objective(x), 3.0, floor, 2, 300).unwrap();
        let cell = (3.0 - 2.0 * floor) / 300.0;
        assert!((alloc[0] - 1.0).abs() <= cell + 1e-9);
        assert!((alloc[1] - 2.0).abs() <= cell + 1e-9);
        let sol = solve_step_a(&p).unwrap();
        assert!(sol.objective <= obj + 1e-9 * obj);
    }

    #[test]
    fn oracle_caps() {
        assert!(brute_force_oracle(|_| 0.0, 1.0, 0.0, 5, 10).is_err());
        assert!(brute_force_oracle(|_| 0.0, 1.0, 0.0, 2, 500).is_err());
    }

    #[test]
    fn predict_target_consistent_with_metrics_module() {
        use crate::metrics::MseGrid;
        let scan = ScanOrder::build(ScanKind::Snake, 2, 2, 4).unwrap();
        let conf = ConfidenceGrid::from_raw(2, 2, vec![0.3, 0.9, 0.6, 1.0]).unwrap();
        let models: Vec<HyperbolicModel> = [(2.0, -1.0), (3.0, -0.8), (1.5, -1.2), (2.5, -0.9)]
            .iter()
            .map(|&(a, b)| model(a, b))
            .collect();
        let weights: Vec<f64> = (0..4)
            .map(|i| {
                let (r, c) = scan.cell_of(i);
                let w = conf.get(r, c);
                w * w
            })
            .collect();
        let p = AllocationProblem {
            models,
            weights,
            lambda: 2.0,
            budget: 40.0,
            variables: VariableKind::PerFrame,
            sp: SpStructure::build(&scan, &conf).unwrap(),
            grid_shape: (2, 2),
        };
        let alloc = vec![10.0, 12.0, 8.0, 10.0];
        let t_opt = p.predict_target(&alloc).unwrap();

        // Same value through the metrics module on the implied MSE grid.
        let mut grid = vec![0.0; 4];
        for i in 0..4 {
            let (r, c) = scan.cell_of(i);
            grid[r * 2 + c] = p.models[i].predict(alloc[i]);
        }
        let mse = MseGrid::new(2, 2, grid).unwrap();
        let wmse = metrics::weighted_mse(&mse, &conf).unwrap();
        let sp = metrics::smoothness_penalty(&mse, &conf).unwrap();
        let t_metrics = metrics::target(wmse, sp, 2.0, (2, 2)).unwrap();
        assert!((t_opt - t_metrics).abs() <= 1e-12 * t_metrics.abs().max(1.0));
    }

    #[test]
    fn uniform_symmetric_predict_target() {
        let p = per_frame_problem(&[2.0; 3], &[-1.0; 3], &[1.0; 3], 3.0, 30.0);
        let t = p.predict_target(&vec![10.0; 3]).unwrap();
        // Uniform allocation: SP term vanishes, wMSE = phi*alpha*(R/n)^beta.
        assert!((t - 3.0 * (2.0 / 10.0) / 3.0).abs() < 1e-12);
    }
}
