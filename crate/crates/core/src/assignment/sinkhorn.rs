//! Entropic optimal transport by alternating Sinkhorn scaling, run in the
//! log domain so that small temperatures do not underflow.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::matching::SimilarityMatrix;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-9;

const MARGINAL_SUM_TOL: f64 = 1e-9;
const NORMALIZED_EPS: f64 = 1e-12;
const ANNEAL_FACTOR: f64 = 4.0;
const ANNEAL_STAGE_ITER: usize = 50;

/// Decreasing maps from similarity to transport cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CostTransform {
    /// `C = -S`
    #[default]
    Linear,
    /// `C = 1 - (S - min S) / (max S - min S + eps)`
    Normalized,
    /// `C = -exp(S)`
    Exponential,
}

impl std::str::FromStr for CostTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "normalized" => Ok(Self::Normalized),
            "exponential" => Ok(Self::Exponential),
            other => Err(Error::Config(format!(
                "assignment.cost_transform must be linear, normalized or exponential, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for CostTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Normalized => "normalized",
            Self::Exponential => "exponential",
        })
    }
}

pub fn cost_transform(s: &SimilarityMatrix, variant: CostTransform) -> Array2<f64> {
    let scores = s.scores();
    match variant {
        CostTransform::Linear => scores.mapv(|v| -v),
        CostTransform::Normalized => {
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = max - min + NORMALIZED_EPS;
            scores.mapv(|v| 1.0 - (v - min) / span)
        }
        CostTransform::Exponential => scores.mapv(|v| -v.exp()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub temperature: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// A coupling `Z` between predicted and golden calls.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TransportPlan {
    #[serde(serialize_with = "serialize_rows")]
    pub plan: Array2<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub temperature: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Largest absolute marginal violation at termination.
    pub violation: f64,
}

fn serialize_rows<S: serde::Serializer>(
    m: &Array2<f64>,
    ser: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = ser.serialize_seq(Some(m.nrows()))?;
    for row in m.outer_iter() {
        seq.serialize_element(&row.to_vec())?;
    }
    seq.end()
}

impl TransportPlan {
    /// The all-zero plan used when one side has no calls.
    pub fn empty(rows: usize, cols: usize, temperature: f64) -> Self {
        Self {
            plan: Array2::zeros((rows, cols)),
            row_marginal: uniform_marginal(rows),
            col_marginal: uniform_marginal(cols),
            temperature,
            iterations_used: 0,
            converged: true,
            violation: 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.outer_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.plan.columns().into_iter().map(|c| c.sum()).collect()
    }
}

pub fn uniform_marginal(len: usize) -> Vec<f64> {
    vec![1.0 / len as f64; len]
}

fn check_marginal(name: &str, w: &[f64], len: usize) -> Result<()> {
    if w.len() != len {
        return Err(Error::InvalidMarginals(format!(
            "{name} has length {}, expected {len}",
            w.len()
        )));
    }
    if w.is_empty() {
        return Err(Error::InvalidMarginals(format!("{name} is empty")));
    }
    if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::InvalidMarginals(format!(
            "{name} has non-positive mass {bad}"
        )));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > MARGINAL_SUM_TOL {
        return Err(Error::InvalidMarginals(format!(
            "{name} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropically regularized transport plan with marginals `a` and `b`.
///
/// The plan has the scaling form `Z_ij = exp((f_i + g_j - C_ij) / T)`,
/// i.e. `diag(u) K diag(v)` with `K = exp(-C / T)`. Failing to reach `tol`
/// within `max_iter` is reported through `converged = false`, not as an
/// error.
pub fn sinkhorn_plan(
    cost: &Array2<f64>,
    a: &[f64],
    b: &[f64],
    params: SinkhornParams,
) -> Result<TransportPlan> {
    let (m, n) = cost.dim();
    check_marginal("row marginal", a, m)?;
    check_marginal("column marginal", b, n)?;
    let t = params.temperature;
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Config(format!(
            "assignment.temperature must be positive, got {t}"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }

    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];

    let plan_of = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((m, n), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / t).exp())
    };
    let row_violation = |z: &Array2<f64>| {
        z.outer_iter()
            .zip(a)
            .map(|(row, ai)| (row.sum() - ai).abs())
            .fold(0.0, f64::max)
    };

    let mut iterations = 0;
    let sweep = |f: &mut [f64], g: &mut [f64], t: f64| {
        for i in 0..m {
            let lse = log_sum_exp((0..n).map(|j| (g[j] - cost[[i, j]]) / t));
            f[i] = t * (log_a[i] - lse);
        }
        for j in 0..n {
            let lse = log_sum_exp((0..m).map(|i| (f[i] - cost[[i, j]]) / t));
            g[j] = t * (log_b[j] - lse);
        }
    };

    // temperature annealing: coarse stages warm-start the potentials
    let span = cost.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - cost.iter().copied().fold(f64::INFINITY, f64::min);
    let mut stage_t = span;
    let anneal_budget = params.max_iter / 2;
    while stage_t > t * ANNEAL_FACTOR && iterations < anneal_budget {
        for _ in 0..ANNEAL_STAGE_ITER.min(anneal_budget - iterations) {
            iterations += 1;
            sweep(&mut f, &mut g, stage_t);
        }
        stage_t /= ANNEAL_FACTOR;
    }

    while iterations < params.max_iter {
        iterations += 1;
        sweep(&mut f, &mut g, t);
        // columns are exact after the g-update; rows carry the residual
        if row_violation(&plan_of(&f, &g)) <= params.tol {
            break;
        }
    }

    let plan = plan_of(&f, &g);
    let violation = row_violation(&plan);
    let col_violation = plan
        .columns()
        .into_iter()
        .zip(b)
        .map(|(col, bj)| (col.sum() - bj).abs())
        .fold(0.0, f64::max);
    let violation = violation.max(col_violation);
    Ok(TransportPlan {
        plan,
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
        temperature: t,
        iterations_used: iterations,
        converged: violation <= params.tol,
        violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cold_temperature_converges_to_permutation() {
        let cost = array![[-0.9, -0.1, -0.3], [-0.2, -0.8, -0.1], [-0.4, -0.3, -0.7]];
        let params = SinkhornParams {
            temperature: 1e-3,
            ..SinkhornParams::default()
        };
        let plan =
            sinkhorn_plan(&cost, &uniform_marginal(3), &uniform_marginal(3), params).unwrap();
        assert!(plan.converged, "violation {}", plan.violation);
        for i in 0..3 {
            assert!((plan.plan[[i, i]] - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forced_one_by_one() {
        for c in [-5.0, 0.0, 3.0] {
            let plan =
                sinkhorn_plan(&array![[c]], &[1.0], &[1.0], SinkhornParams::default()).unwrap();
            assert!((plan.plan[[0, 0]] - 1.0).abs() < 1e-12);
            assert!(plan.converged);
        }
    }

    #[test]
    fn transforms() {
        let s = SimilarityMatrix::from_rows(&[vec![0.6, 1.0]]).unwrap();
        assert_eq!(
            cost_transform(&s, CostTransform::Linear),
            array![[-0.6, -1.0]]
        );
        let s = SimilarityMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let c = cost_transform(&s, CostTransform::Normalized);
        assert!((c[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(c[[0, 1]].abs() < 1e-11);
        let s = SimilarityMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(
            cost_transform(&s, CostTransform::Exponential),
            array![[-1.0]]
        );
    }

    #[test]
    fn constant_matrix_normalizes_to_ones() {
        let s = SimilarityMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(
            cost_transform(&s, CostTransform::Normalized),
            array![[1.0, 1.0]]
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = array![[0.0, 1.0]];
        let p = SinkhornParams::default();
        assert!(matches!(
            sinkhorn_plan(&c, &[1.0], &[0.5, 0.4], p),
            Err(Error::InvalidMarginals(_))
        ));
        assert!(matches!(
            sinkhorn_plan(&c, &[1.0], &[1.0, 0.0], p),
            Err(Error::InvalidMarginals(_))
        ));
        assert!(matches!(
            sinkhorn_plan(&c, &[1.0], &[1.0], p),
            Err(Error::InvalidMarginals(_))
        ));
        let cold = SinkhornParams {
            temperature: 0.0,
            ..p
        };
        assert!(matches!(
            sinkhorn_plan(&c, &[1.0], &[0.5, 0.5], cold),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reports_non_convergence() {
        let c = array![[0.0, 1.0, 0.3], [0.2, 0.0, 0.9]];
        let params = SinkhornParams {
            temperature: 0.01,
            max_iter: 1,
            tol: 1e-15,
        };
        let plan = sinkhorn_plan(&c, &[0.5, 0.5], &[0.2, 0.3, 0.5], params).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations_used, 1);
        assert!(plan.violation > 1e-15);
    }

    #[test]
    fn scaling_form_holds() {
        let c = array![[0.1, 0.7], [0.4, 0.2], [0.9, 0.0]];
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.4];
        let t = 0.3;
        let plan = sinkhorn_plan(
            &c,
            &a,
            &b,
            SinkhornParams {
                temperature: t,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(plan.converged);
        // Z_ij / K_ij must factor as u_i * v_j: all 2x2 cross ratios equal 1
        let r = |i: usize, j: usize| plan.plan[[i, j]] / (-c[[i, j]] / t).exp();
        for i in 1..3 {
            let cross = r(0, 0) * r(i, 1) / (r(0, 1) * r(i, 0));
            assert!((cross - 1.0).abs() < 1e-9);
        }
    }
}
