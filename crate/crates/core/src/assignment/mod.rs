//! Credit assignment: turning a similarity matrix into one reward per
//! predicted call, either by hard one-to-one matching or by soft entropic
//! transport.

mod hungarian;
mod sinkhorn;

pub use hungarian::{brute_force_match, hungarian_match, HardAssignment, BRUTE_FORCE_LIMIT};
pub use sinkhorn::{
    cost_transform, sinkhorn_plan, uniform_marginal, CostTransform, SinkhornParams, TransportPlan,
    DEFAULT_MAX_ITER, DEFAULT_TEMPERATURE, DEFAULT_TOL,
};

use crate::error::{Error, Result};
use crate::matching::SimilarityMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    /// Hard matching (Kuhn-Munkres).
    #[default]
    Km,
    /// Soft matching (optimal transport).
    Ot,
}

impl std::str::FromStr for AssignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "km" | "hard" => Ok(Self::Km),
            "ot" | "soft" => Ok(Self::Ot),
            other => Err(Error::Config(format!(
                "assignment.mode must be km or ot, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for AssignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Km => "km",
            Self::Ot => "ot",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(untagged)]
pub enum Witness {
    Hard(HardAssignment),
    Soft(TransportPlan),
}

/// Per-call rewards together with the matching or plan that produced them.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CreditResult {
    pub per_call_rewards: Vec<f64>,
    pub mode: AssignmentMode,
    pub penalty: f64,
    pub witness: Witness,
}

fn check_penalty(penalty: f64) -> Result<()> {
    if penalty.is_finite() && penalty >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "assignment.penalty must be >= 0, got {penalty}"
        )))
    }
}

/// Matched calls earn their similarity; everything else earns `-penalty`.
pub fn hard_rewards(s: &SimilarityMatrix, penalty: f64) -> Result<CreditResult> {
    check_penalty(penalty)?;
    let assignment = hungarian_match(s);
    let mut rewards = vec![0.0 - penalty; s.rows()];
    for &(i, j) in assignment.matches() {
        rewards[i] = s.get(i, j);
    }
    Ok(CreditResult {
        per_call_rewards: rewards,
        mode: AssignmentMode::Km,
        penalty,
        witness: Witness::Hard(assignment),
    })
}

/// Transport-weighted similarity `r_i = sum_j Z_ij S_ij`.
pub fn soft_rewards(s: &SimilarityMatrix, plan: TransportPlan) -> Result<CreditResult> {
    if plan.plan.dim() != s.scores().dim() {
        return Err(Error::Dimension(format!(
            "plan is {:?} but similarity matrix is {:?}",
            plan.plan.dim(),
            s.scores().dim()
        )));
    }
    let rewards = (&plan.plan * s.scores())
        .outer_iter()
        .map(|row| row.sum())
        .collect();
    Ok(CreditResult {
        per_call_rewards: rewards,
        mode: AssignmentMode::Ot,
        penalty: 0.0,
        witness: Witness::Soft(plan),
    })
}

/// Soft credit with uniform marginals. With no predicted or no golden
/// calls there is no mass to move and every call earns 0.
pub fn soft_credit(
    s: &SimilarityMatrix,
    transform: CostTransform,
    params: SinkhornParams,
) -> Result<CreditResult> {
    let (m, n) = (s.rows(), s.cols());
    let plan = if m == 0 || n == 0 {
        TransportPlan::empty(m, n, params.temperature)
    } else {
        let cost = cost_transform(s, transform);
        sinkhorn_plan(&cost, &uniform_marginal(m), &uniform_marginal(n), params)?
    };
    soft_rewards(s, plan)
}
