//! The feature-mover distance critic.
//!
//! The distance between two feature batches is the cheapest uniform
//! coupling under cosine cost. Its value comes from the proximal solver
//! in [`crate::ot`]; its gradient treats the solved plan as a constant
//! and differentiates only the cost entries, propagated through the
//! normalized-feature chain rule. That split — plan solve outside the
//! tape, cost evaluation inside — is the module's central structural
//! decision, and the finite-difference tests pin it down: the
//! fixed-plan gradient must match differences of the plan-re-solved
//! value.

use crate::error::{Error, Result};
use crate::ndgrad::{NodeId, Tape, Tensor};
use crate::ot::{self, CostMatrix, SolverConfig, TransportPlan};

/// A batch of feature vectors, one column per sentence.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    vectors: Tensor,
}

impl FeatureBatch {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if !vectors.is_matrix() {
            return Err(Error::Dim(format!(
                "feature batch must be d x n, got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::Numeric("non-finite feature entry".into()));
        }
        Ok(FeatureBatch { vectors })
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Dim("feature batch needs at least one column".into()));
        }
        let d = columns[0].len();
        if columns.iter().any(|c| c.len() != d) {
            return Err(Error::Dim("ragged feature columns".into()));
        }
        let mut m = Tensor::zeros(&[d, columns.len()]);
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        FeatureBatch::new(m)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees n >= 1
    }
}

fn check_pair(f: &FeatureBatch, g: &FeatureBatch) -> Result<()> {
    if f.dim() != g.dim() {
        return Err(Error::Dim(format!(
            "feature dims differ: {} vs {}",
            f.dim(),
            g.dim()
        )));
    }
    if f.len() != g.len() {
        return Err(Error::Dim(format!(
            "batch sizes differ: {} vs {} (training requires equal batches)",
            f.len(),
            g.len()
        )));
    }
    Ok(())
}

/// Feature-mover distance: solve the transport problem on the cosine
/// cost of the two batches and return `<T*, C>` with the plan.
pub fn fmd(f: &FeatureBatch, g: &FeatureBatch, cfg: &SolverConfig) -> Result<(f64, TransportPlan)> {
    check_pair(f, g)?;
    let cost = ot::cosine_cost_matrix(f.matrix(), g.matrix())?;
    let plan = ot::ipot(&cost, cfg)?;
    let value = ot::transport_value(&plan, &cost)?;
    Ok((value, plan))
}

/// Gradients of the feature-mover distance with respect to both feature
/// batches, with the transport plan held fixed at the solved optimum.
pub fn fmd_grad(
    f: &FeatureBatch,
    g: &FeatureBatch,
    cfg: &SolverConfig,
) -> Result<(Tensor, Tensor)> {
    check_pair(f, g)?;
    let mut tape = Tape::new();
    let fa = tape.leaf("f", f.matrix().clone())?;
    let ga = tape.leaf("g", g.matrix().clone())?;
    let loss = fmd_on_tape(&mut tape, fa, ga, cfg)?.value;
    let grads = tape.backward(loss)?;
    Ok((
        grads.get("f").unwrap().clone(),
        grads.get("g").unwrap().clone(),
    ))
}

/// A tape-embedded FMD evaluation.
pub struct TapeFmd {
    /// Scalar loss node `<T*, C>`; differentiable through `C` only.
    pub value: NodeId,
    /// The plan the solver returned (a constant as far as the tape knows).
    pub plan: TransportPlan,
    /// Marginal residual of that plan.
    pub residual: f64,
}

/// Build the FMD loss on an existing tape from two feature-batch nodes.
///
/// The cosine cost matrix is composed from differentiable ops; the
/// current cost values are then handed to the proximal solver outside
/// the tape, and the returned plan enters as a constant in a Frobenius
/// dot-product. The norm floor inside the cost composition is a max,
/// so degenerate near-zero features get no gradient through their norm.
pub fn fmd_on_tape(
    tape: &mut Tape,
    f: NodeId,
    g: NodeId,
    cfg: &SolverConfig,
) -> Result<TapeFmd> {
    let cost_node = cosine_cost_on_tape(tape, f, g)?;
    let cost = CostMatrix::new(tape.value(cost_node).clone())?;
    let plan = ot::ipot(&cost, cfg)?;
    let residual = ot::marginal_residual(&plan);
    let plan_node = tape.constant(plan.values().clone())?;
    let value = tape.frob_dot(plan_node, cost_node)?;
    Ok(TapeFmd {
        value,
        plan,
        residual,
    })
}

/// Differentiable cosine-distance matrix between two `d x n` feature
/// nodes: columns are normalized with a floored norm, then
/// `C = 1 - Fn' Gn`.
pub fn cosine_cost_on_tape(tape: &mut Tape, f: NodeId, g: NodeId) -> Result<NodeId> {
    let fn_norms = tape.col_norms_floored(f, ot::NORM_FLOOR)?;
    let f_unit = tape.scale_cols_inv(f, fn_norms)?;
    let gn_norms = tape.col_norms_floored(g, ot::NORM_FLOOR)?;
    let g_unit = tape.scale_cols_inv(g, gn_norms)?;
    let f_t = tape.transpose(f_unit)?;
    let sim = tape.matmul(f_t, g_unit)?;
    let neg = tape.mul_scalar(sim, -1.0)?;
    tape.add_scalar(neg, 1.0)
}
