//! Optimal-transport solvers over a precomputed cost matrix.
//!
//! Three routes to the same quantity: proximal-point IPOT iterations
//! (the training-path solver), an entropic Sinkhorn fixed-point (the
//! comparison method), and a factorial enumeration oracle for small
//! instances that the other two are tested against.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Norm floor used when normalizing feature columns for cosine costs.
pub const NORM_FLOOR: f64 = 1e-8;

/// Pairwise cosine-distance matrix. Entries live in `[0, 2]`.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    values: Tensor,
}

impl CostMatrix {
    /// Validates shape, finiteness and the `[0, 2]` range. Values within
    /// `1e-9` outside the range are clamped; anything worse is an error.
    pub fn new(values: Tensor) -> Result<Self> {
        if !values.is_matrix() {
            return Err(Error::Dim(format!(
                "cost matrix must be 2-D, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Numeric("non-finite cost entry".into()));
        }
        let mut values = values;
        for v in values.data_mut() {
            if *v < 0.0 || *v > 2.0 {
                if *v >= -1e-9 && *v <= 2.0 + 1e-9 {
                    *v = v.clamp(0.0, 2.0);
                } else {
                    return Err(Error::Param(format!(
                        "cost entry {v} outside [0, 2]"
                    )));
                }
            }
        }
        Ok(CostMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        CostMatrix::new(Tensor::from_rows(rows)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values.at(i, j)
    }
}

/// Coupling between two uniform discrete measures: entry `(i, j)` is the
/// mass moved from point `i` of the first batch to point `j` of the
/// second. Rows of an `n x m` plan sum to `1/n`, columns to `1/m`, the
/// whole matrix to one.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    values: Tensor,
}

impl TransportPlan {
    pub fn new(values: Tensor) -> Result<Self> {
        if !values.is_matrix() {
            return Err(Error::Dim(format!(
                "transport plan must be 2-D, got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Numeric("transport plan entry negative or non-finite".into()));
        }
        Ok(TransportPlan { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values.at(i, j)
    }
}

/// IPOT / Sinkhorn iteration controls.
///
/// `beta` is the proximity penalty on the Bregman term; it only affects
/// how fast the iterates converge, so the default just keeps
/// `exp(-C/beta)` well scaled for cosine costs in `[0, 2]`. `inner_k`
/// is the inner Sinkhorn sweep count per proximal step; one sweep is
/// standard practice because every outer step re-forms the kernel.
#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    pub beta: f64,
    pub inner_k: usize,
    pub outer_iters: usize,
    pub marginal_tol: f64,
}

impl Default for SolverConfig {
    /// Standalone-solver mode: run until the marginals are tight.
    fn default() -> Self {
        SolverConfig {
            beta: 0.5,
            inner_k: 1,
            outer_iters: 2000,
            marginal_tol: 1e-6,
        }
    }
}

impl SolverConfig {
    /// Training mode: a fixed iteration budget per critic call, so every
    /// step costs the same and the stop rule never depends on the data.
    pub fn training() -> Self {
        SolverConfig {
            beta: 0.5,
            inner_k: 1,
            outer_iters: 100,
            marginal_tol: 1e-15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Param(format!("beta must be positive, got {}", self.beta)));
        }
        if self.inner_k == 0 {
            return Err(Error::Param("inner_k must be >= 1".into()));
        }
        if self.outer_iters == 0 {
            return Err(Error::Param("outer_iters must be >= 1".into()));
        }
        if !(self.marginal_tol > 0.0 && self.marginal_tol.is_finite()) {
            return Err(Error::Param(format!(
                "marginal_tol must be positive, got {}",
                self.marginal_tol
            )));
        }
        Ok(())
    }
}

/// One per-iteration sample of a solver run.
#[derive(Clone, Copy, Debug)]
pub struct TraceRecord {
    pub iter: usize,
    pub value: f64,
    pub residual: f64,
}

/// Cosine-distance cost between two feature batches stored one feature
/// per column. Norms are floored at [`NORM_FLOOR`] so zero features
/// produce a defined (maximally uninformative) cost instead of NaN.
pub fn cosine_cost_matrix(f: &Tensor, g: &Tensor) -> Result<CostMatrix> {
    if !f.is_matrix() || !g.is_matrix() || f.shape()[0] != g.shape()[0] {
        return Err(Error::Dim(format!(
            "feature batches {:?} and {:?} must share the feature dimension",
            f.shape(),
            g.shape()
        )));
    }
    let d = f.shape()[0];
    let (n, m) = (f.shape()[1], g.shape()[1]);
    let col_norm = |t: &Tensor, j: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            let v = t.at(i, j);
            s += v * v;
        }
        s.sqrt().max(NORM_FLOOR)
    };
    let f_norms: Vec<f64> = (0..n).map(|j| col_norm(f, j)).collect();
    let g_norms: Vec<f64> = (0..m).map(|j| col_norm(g, j)).collect();
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut dot = 0.0;
            for r in 0..d {
                dot += f.at(r, i) * g.at(r, j);
            }
            out.set(i, j, 1.0 - dot / (f_norms[i] * g_norms[j]));
        }
    }
    CostMatrix::new(out)
}

/// Proximal-point transport solve.
///
/// Kernel `A = exp(-C/beta)`; each outer step forms `Q = A .* T`, runs
/// `inner_k` Sinkhorn sweeps `delta = 1/(n Q sigma)`,
/// `sigma = 1/(n Q' delta)`, then sets `T = diag(delta) Q diag(sigma)`.
/// Initial `sigma = 1/n`, initial `T` all ones. Stops after
/// `outer_iters` steps, or earlier once both the marginal residual and
/// the per-step plan movement drop under `marginal_tol`. The residual
/// alone is not a convergence signal: the scaling sweep can balance the
/// marginals exactly on the first step (any cost matrix with equal
/// column sums does this) while the plan is still far from optimal, so
/// the stop also requires the iterates themselves to have settled.
/// Nothing here is differentiated; callers treat the returned plan as a
/// constant.
pub fn ipot(cost: &CostMatrix, cfg: &SolverConfig) -> Result<TransportPlan> {
    Ok(ipot_traced(cost, cfg, false)?.0)
}

/// [`ipot`] plus a per-outer-iteration value/residual trace.
pub fn ipot_traced(
    cost: &CostMatrix,
    cfg: &SolverConfig,
    keep_trace: bool,
) -> Result<(TransportPlan, Vec<TraceRecord>)> {
    cfg.validate()?;
    if !cost.is_square() {
        return Err(Error::Dim(format!(
            "ipot expects a square cost matrix, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    let n = cost.rows();
    let nf = n as f64;

    let mut kernel = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let ratio = cost.at(i, j) / cfg.beta;
            let a = (-ratio).exp();
            if !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "kernel entry exp(-{ratio}) not finite at ({i}, {j})"
                )));
            }
            kernel.set(i, j, a);
        }
    }

    let mut sigma = vec![1.0 / nf; n];
    let mut delta = vec![0.0; n];
    let mut plan = Tensor::full(&[n, n], 1.0);
    let mut q = Tensor::zeros(&[n, n]);
    let mut trace = Vec::new();

    for iter in 1..=cfg.outer_iters {
        for idx in 0..n * n {
            q.data_mut()[idx] = kernel.data()[idx] * plan.data()[idx];
        }
        for _ in 0..cfg.inner_k {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += q.at(i, j) * sigma[j];
                }
                delta[i] = 1.0 / (nf * acc);
            }
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += q.at(i, j) * delta[i];
                }
                sigma[j] = 1.0 / (nf * acc);
            }
        }
        if delta.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "proximal scaling diverged at outer iteration {iter}"
            )));
        }
        let mut movement: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let next = delta[i] * q.at(i, j) * sigma[j];
                movement = movement.max((next - plan.at(i, j)).abs());
                plan.set(i, j, next);
            }
        }
        let residual = residual_of(&plan);
        if keep_trace {
            trace.push(TraceRecord {
                iter,
                value: plan.frob_dot(cost.values())?,
                residual,
            });
        }
        if residual < cfg.marginal_tol && movement < cfg.marginal_tol {
            break;
        }
    }
    Ok((TransportPlan::new(plan)?, trace))
}

/// Entropic-OT fixed point on the kernel `exp(-C/eps)`.
///
/// Runs exactly `iters` alternating scaling sweeps from the same
/// initialization as the proximal solver and returns the plan and its
/// transport cost `<T, C>` (entropy term excluded, for comparability
/// with the exact value).
pub fn sinkhorn(cost: &CostMatrix, eps: f64, iters: usize) -> Result<(TransportPlan, f64)> {
    let (plan, value, _) = sinkhorn_traced(cost, eps, iters, false)?;
    Ok((plan, value))
}

/// [`sinkhorn`] plus a per-iteration trace.
pub fn sinkhorn_traced(
    cost: &CostMatrix,
    eps: f64,
    iters: usize,
    keep_trace: bool,
) -> Result<(TransportPlan, f64, Vec<TraceRecord>)> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Param(format!("epsilon must be positive, got {eps}")));
    }
    if iters == 0 {
        return Err(Error::Param("iteration count must be >= 1".into()));
    }
    if !cost.is_square() {
        return Err(Error::Dim(format!(
            "sinkhorn expects a square cost matrix, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    let n = cost.rows();
    let nf = n as f64;

    let kernel = cost.values().map(|c| (-c / eps).exp());
    for i in 0..n {
        if (0..n).all(|j| kernel.at(i, j) == 0.0) {
            return Err(Error::Numeric(format!(
                "kernel row {i} underflowed to zero; use a larger epsilon"
            )));
        }
        if (0..n).all(|j| kernel.at(j, i) == 0.0) {
            return Err(Error::Numeric(format!(
                "kernel column {i} underflowed to zero; use a larger epsilon"
            )));
        }
    }

    let mut sigma = vec![1.0 / nf; n];
    let mut delta = vec![0.0; n];
    let mut trace = Vec::new();
    let mut plan = Tensor::zeros(&[n, n]);
    for iter in 1..=iters {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += kernel.at(i, j) * sigma[j];
            }
            delta[i] = 1.0 / (nf * acc);
        }
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += kernel.at(i, j) * delta[i];
            }
            sigma[j] = 1.0 / (nf * acc);
        }
        if delta.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "sinkhorn scaling diverged at iteration {iter}; use a larger epsilon"
            )));
        }
        if keep_trace || iter == iters {
            for i in 0..n {
                for j in 0..n {
                    plan.set(i, j, delta[i] * kernel.at(i, j) * sigma[j]);
                }
            }
            if keep_trace {
                trace.push(TraceRecord {
                    iter,
                    value: plan.frob_dot(cost.values())?,
                    residual: residual_of(&plan),
                });
            }
        }
    }
    let value = plan.frob_dot(cost.values())?;
    Ok((TransportPlan::new(plan)?, value, trace))
}

/// Exact transport value by enumerating all `n!` permutation plans (the
/// extreme points of the uniform-marginal polytope). Usable up to
/// `n = 8`.
pub fn exact_emd_oracle(cost: &CostMatrix) -> Result<(TransportPlan, f64)> {
    if !cost.is_square() {
        return Err(Error::Dim(format!(
            "oracle expects a square cost matrix, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    let n = cost.rows();
    if n > 8 {
        return Err(Error::Capacity(format!(
            "exact enumeration supports n <= 8, got {n}"
        )));
    }
    let nf = n as f64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best = permutation_cost(cost, &perm) / nf;

    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = permutation_cost(cost, &perm) / nf;
            if v < best {
                best = v;
                best_perm = perm.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }

    let mut plan = Tensor::zeros(&[n, n]);
    for (row, &col) in best_perm.iter().enumerate() {
        plan.set(row, col, 1.0 / nf);
    }
    Ok((TransportPlan::new(plan)?, best))
}

fn permutation_cost(cost: &CostMatrix, perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .map(|(i, &j)| cost.at(i, j))
        .sum()
}

/// Frobenius dot-product `<T, C>`.
pub fn transport_value(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    plan.values().frob_dot(cost.values())
}

/// Worst deviation of the plan's marginals from uniform.
pub fn marginal_residual(plan: &TransportPlan) -> f64 {
    residual_of(plan.values())
}

fn residual_of(plan: &Tensor) -> f64 {
    let (n, m) = (plan.shape()[0], plan.shape()[1]);
    let row_target = 1.0 / n as f64;
    let col_target = 1.0 / m as f64;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let s: f64 = plan.row(i).iter().sum();
        worst = worst.max((s - row_target).abs());
    }
    for j in 0..m {
        let mut s = 0.0;
        for i in 0..n {
            s += plan.at(i, j);
        }
        worst = worst.max((s - col_target).abs());
    }
    worst
}
