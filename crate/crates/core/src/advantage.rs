//! Group-relative advantages at trajectory and turn level, their
//! integration, token broadcasting with a loss mask, and the clipped
//! surrogate objective on supplied log-probabilities.
//!
//! Standard deviations are population estimates and every normalization
//! divides by `std + guard`, so a group with identical rewards yields zero
//! advantage instead of a division by zero.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.9;
pub const DEFAULT_GUARD: f64 = 1e-6;
/// Scale of the local term in the weighted-product variant.
pub const DEFAULT_WP_SCALE: f64 = 0.1;

/// How per-turn advantages are formed from the reward schedules of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageVariant {
    /// Trajectory-level plus group-normalized turn-level advantage.
    #[default]
    Dual,
    /// Trajectory advantage scaled by the within-trajectory turn advantage.
    WeightedProduct,
    /// Trajectory advantage plus the within-trajectory turn advantage.
    WeightedSum,
    /// Turn-level term forced to zero (plain group-relative advantage).
    TrajectoryOnly,
    /// Trajectory-level term forced to zero.
    TurnOnly,
}

impl std::str::FromStr for AdvantageVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Self::Dual),
            "weighted_product" => Ok(Self::WeightedProduct),
            "weighted_sum" => Ok(Self::WeightedSum),
            "trajectory_only" => Ok(Self::TrajectoryOnly),
            "turn_only" => Ok(Self::TurnOnly),
            other => Err(Error::Config(format!(
                "advantage.variant must be one of dual, weighted_product, weighted_sum, \
                 trajectory_only, turn_only; got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for AdvantageVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dual => "dual",
            Self::WeightedProduct => "weighted_product",
            Self::WeightedSum => "weighted_sum",
            Self::TrajectoryOnly => "trajectory_only",
            Self::TurnOnly => "turn_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntraVariant {
    WeightedProduct,
    WeightedSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageParams {
    pub gamma: f64,
    pub guard: f64,
    pub variant: AdvantageVariant,
    pub wp_scale: f64,
}

impl Default for AdvantageParams {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            guard: DEFAULT_GUARD,
            variant: AdvantageVariant::Dual,
            wp_scale: DEFAULT_WP_SCALE,
        }
    }
}

impl AdvantageParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("advantage.gamma out of range".into()));
        }
        if !(self.guard.is_finite() && self.guard >= 0.0) {
            return Err(Error::Config("advantage.guard must be >= 0".into()));
        }
        if !self.wp_scale.is_finite() {
            return Err(Error::Config("advantage.wp_scale must be finite".into()));
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    // summation can land one ulp away from a constant group's value
    if let Some(first) = values.first() {
        if values.iter().all(|v| v == first) {
            return (*first, 0.0);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R_i - mean) / (std + guard)` over the group's trajectory totals.
pub fn trajectory_advantage(totals: &[f64], guard: f64) -> Result<Vec<f64>> {
    if totals.len() < 2 {
        return Err(Error::GroupTooSmall {
            found: totals.len(),
            required: 2,
        });
    }
    let (mean, std) = mean_std(totals);
    Ok(totals.iter().map(|r| (r - mean) / (std + guard)).collect())
}

/// Discounted reward-to-go `R_t = r_t + gamma * R_{t+1}`.
pub fn discounted_returns(per_turn: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; per_turn.len()];
    let mut acc = 0.0;
    for (t, r) in per_turn.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Normalizes each turn position over the rollouts that reach it. A turn
/// reached by a single rollout is normalized with mean 0 and std 1, so its
/// advantage is the return itself.
pub fn turn_advantage(group_returns: &[Vec<f64>], guard: f64) -> Vec<Vec<f64>> {
    let horizon = group_returns.iter().map(Vec::len).max().unwrap_or(0);
    let mut out: Vec<Vec<f64>> = group_returns.iter().map(|r| vec![0.0; r.len()]).collect();
    for t in 0..horizon {
        let reaching: Vec<usize> = (0..group_returns.len())
            .filter(|&i| group_returns[i].len() > t)
            .collect();
        if let [only] = reaching[..] {
            out[only][t] = group_returns[only][t];
            continue;
        }
        let values: Vec<f64> = reaching.iter().map(|&i| group_returns[i][t]).collect();
        let (mean, std) = mean_std(&values);
        for &i in &reaching {
            out[i][t] = (group_returns[i][t] - mean) / (std + guard);
        }
    }
    out
}

pub fn integrate(trajectory_adv: &[f64], turn_adv: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if trajectory_adv.len() != turn_adv.len() {
        return Err(Error::Dimension(format!(
            "{} trajectory advantages but {} turn-advantage rows",
            trajectory_adv.len(),
            turn_adv.len()
        )));
    }
    Ok(trajectory_adv
        .iter()
        .zip(turn_adv)
        .map(|(g, row)| row.iter().map(|l| g + l).collect())
        .collect())
}

/// Turn advantage normalized within a single trajectory.
pub fn local_turn_advantage(returns: &[f64], guard: f64) -> Vec<f64> {
    if returns.is_empty() {
        return Vec::new();
    }
    let (mean, std) = mean_std(returns);
    returns.iter().map(|r| (r - mean) / (std + guard)).collect()
}

/// Intra-trajectory alternatives to the group-normalized turn term.
pub fn intra_trajectory_advantage(
    returns: &[f64],
    trajectory_adv: f64,
    variant: IntraVariant,
    guard: f64,
    wp_scale: f64,
) -> Vec<f64> {
    let local = local_turn_advantage(returns, guard);
    match variant {
        IntraVariant::WeightedProduct => local
            .iter()
            .map(|l| (1.0 + wp_scale * sign(trajectory_adv) * l) * trajectory_adv)
            .collect(),
        IntraVariant::WeightedSum => local.iter().map(|l| trajectory_adv + l).collect(),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Advantages of one rollout group.
///
/// For the `dual`, `trajectory_only` and `turn_only` variants
/// `integrated = trajectory_adv + turn_adv` holds exactly. For the weighted
/// variants `turn_adv` holds the within-trajectory local advantage and
/// `integrated` the variant's combination.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageTable {
    pub group_size: usize,
    pub gamma: f64,
    pub variant: AdvantageVariant,
    pub trajectory_adv: Vec<f64>,
    pub turn_adv: Vec<Vec<f64>>,
    pub integrated: Vec<Vec<f64>>,
    pub discounted_returns: Vec<Vec<f64>>,
}

/// Computes the advantage table from each rollout's per-turn rewards.
pub fn compute_advantages(
    per_turn: &[Vec<f64>],
    params: &AdvantageParams,
) -> Result<AdvantageTable> {
    params.validate()?;
    let group_size = per_turn.len();
    let returns: Vec<Vec<f64>> = per_turn
        .iter()
        .map(|r| discounted_returns(r, params.gamma))
        .collect();
    let totals: Vec<f64> = per_turn.iter().map(|r| r.iter().sum()).collect();
    let zeros_like =
        |rows: &[Vec<f64>]| rows.iter().map(|r| vec![0.0; r.len()]).collect::<Vec<_>>();

    let (trajectory_adv, turn_adv, integrated) = match params.variant {
        AdvantageVariant::Dual => {
            let ag = trajectory_advantage(&totals, params.guard)?;
            let al = turn_advantage(&returns, params.guard);
            let it = integrate(&ag, &al)?;
            (ag, al, it)
        }
        AdvantageVariant::TrajectoryOnly => {
            let ag = trajectory_advantage(&totals, params.guard)?;
            let al = zeros_like(&returns);
            let it = integrate(&ag, &al)?;
            (ag, al, it)
        }
        AdvantageVariant::TurnOnly => {
            if group_size == 0 {
                return Err(Error::GroupTooSmall {
                    found: 0,
                    required: 1,
                });
            }
            let ag = vec![0.0; group_size];
            let al = turn_advantage(&returns, params.guard);
            let it = integrate(&ag, &al)?;
            (ag, al, it)
        }
        AdvantageVariant::WeightedProduct | AdvantageVariant::WeightedSum => {
            let ag = trajectory_advantage(&totals, params.guard)?;
            let intra = if params.variant == AdvantageVariant::WeightedProduct {
                IntraVariant::WeightedProduct
            } else {
                IntraVariant::WeightedSum
            };
            let local: Vec<Vec<f64>> = returns
                .iter()
                .map(|r| local_turn_advantage(r, params.guard))
                .collect();
            let it = returns
                .iter()
                .zip(&ag)
                .map(|(r, g)| {
                    intra_trajectory_advantage(r, *g, intra, params.guard, params.wp_scale)
                })
                .collect();
            (ag, local, it)
        }
    };

    Ok(AdvantageTable {
        group_size,
        gamma: params.gamma,
        variant: params.variant,
        trajectory_adv,
        turn_adv,
        integrated,
        discounted_returns: returns,
    })
}

/// Token positions of one rollout: a half-open span per turn and a loss
/// mask that is false on environment-generated (tool response) tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub turn_spans: Vec<(usize, usize)>,
    pub loss_mask: Vec<bool>,
}

impl TokenLayout {
    pub fn validate(&self) -> Result<()> {
        let len = self.loss_mask.len();
        let mut prev_end = 0;
        for (t, &(start, end)) in self.turn_spans.iter().enumerate() {
            if start > end {
                return Err(Error::Validation(format!(
                    "span {t} is reversed: [{start}, {end})"
                )));
            }
            if end > len {
                return Err(Error::Validation(format!(
                    "span {t} = [{start}, {end}) extends beyond sequence length {len}"
                )));
            }
            if start < prev_end {
                return Err(Error::Validation(format!(
                    "span {t} = [{start}, {end}) overlaps its predecessor"
                )));
            }
            prev_end = end;
        }
        Ok(())
    }
}

/// Spreads each turn's integrated advantage over its unmasked tokens.
/// Masked tokens and tokens outside every span carry 0.
pub fn broadcast_rollout(integrated: &[f64], layout: &TokenLayout) -> Result<Vec<f64>> {
    layout.validate()?;
    if layout.turn_spans.len() != integrated.len() {
        return Err(Error::Dimension(format!(
            "{} token spans for {} turns",
            layout.turn_spans.len(),
            integrated.len()
        )));
    }
    let mut out = vec![0.0; layout.loss_mask.len()];
    for (&(start, end), adv) in layout.turn_spans.iter().zip(integrated) {
        for (slot, &keep) in out[start..end]
            .iter_mut()
            .zip(&layout.loss_mask[start..end])
        {
            if keep {
                *slot = *adv;
            }
        }
    }
    Ok(out)
}

pub fn broadcast_tokens(integrated: &[Vec<f64>], layouts: &[TokenLayout]) -> Result<Vec<Vec<f64>>> {
    if integrated.len() != layouts.len() {
        return Err(Error::Dimension(format!(
            "{} layouts for {} rollouts",
            layouts.len(),
            integrated.len()
        )));
    }
    integrated
        .iter()
        .zip(layouts)
        .map(|(adv, layout)| broadcast_rollout(adv, layout))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveInputs {
    pub logprob_new: Vec<Vec<f64>>,
    pub logprob_old: Vec<Vec<f64>>,
    pub logprob_ref: Vec<Vec<f64>>,
    pub clip_range: f64,
    pub kl_coeff: f64,
}

/// Nonnegative KL estimator `exp(d) - d - 1` with `d = ref - new`.
pub fn kl_estimate(delta: f64) -> f64 {
    delta.exp() - delta - 1.0
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_range: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_range, 1.0 + clip_range);
    (ratio * advantage).min(clipped * advantage)
}

/// Clipped surrogate objective averaged over unmasked tokens per rollout,
/// then over rollouts. A rollout with no unmasked tokens contributes 0.
pub fn grpo_objective(
    inputs: &ObjectiveInputs,
    per_token_adv: &[Vec<f64>],
    loss_mask: &[Vec<bool>],
) -> Result<f64> {
    let eps = inputs.clip_range;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Config(format!(
            "clip range must lie in (0, 1), got {eps}"
        )));
    }
    if !(inputs.kl_coeff.is_finite() && inputs.kl_coeff >= 0.0) {
        return Err(Error::Config(format!(
            "kl coefficient must be >= 0, got {}",
            inputs.kl_coeff
        )));
    }
    let g = inputs.logprob_new.len();
    if [
        inputs.logprob_old.len(),
        inputs.logprob_ref.len(),
        per_token_adv.len(),
        loss_mask.len(),
    ]
    .iter()
    .any(|&l| l != g)
    {
        return Err(Error::Dimension(
            "objective inputs disagree on rollout count".into(),
        ));
    }
    if g == 0 {
        return Err(Error::GroupTooSmall {
            found: 0,
            required: 1,
        });
    }

    let mut total = 0.0;
    for i in 0..g {
        let new = &inputs.logprob_new[i];
        let len = new.len();
        if [
            inputs.logprob_old[i].len(),
            inputs.logprob_ref[i].len(),
            per_token_adv[i].len(),
            loss_mask[i].len(),
        ]
        .iter()
        .any(|&l| l != len)
        {
            return Err(Error::Dimension(format!(
                "rollout {i}: token vectors differ in length"
            )));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for k in 0..len {
            if !loss_mask[i][k] {
                continue;
            }
            let (lp_new, lp_old, lp_ref, adv) = (
                new[k],
                inputs.logprob_old[i][k],
                inputs.logprob_ref[i][k],
                per_token_adv[i][k],
            );
            if ![lp_new, lp_old, lp_ref, adv].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("rollout {i}, token {k}")));
            }
            let ratio = (lp_new - lp_old).exp();
            sum +=
                clipped_surrogate(ratio, adv, eps) - inputs.kl_coeff * kl_estimate(lp_ref - lp_new);
            count += 1;
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    Ok(total / g as f64)
}
