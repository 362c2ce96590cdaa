//! Turn-level rewards, the answer F1 outcome reward, and their assembly into
//! a per-turn schedule for one trajectory.

use std::collections::HashMap;

use serde::Serialize;

use crate::assignment::{AssignmentMode, CreditResult};
use crate::error::{Error, Result};
use crate::trace::{GroundTruthTrace, Trajectory};

/// Which reward signals enter the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScope {
    /// Tool-call turn rewards plus the outcome reward on the answer turn.
    #[default]
    Integrated,
    /// Only the outcome reward; tool-call turns score 0.
    OutcomeOnly,
    /// Only tool-call turn rewards; the answer turn scores 0.
    TurnOnly,
}

impl std::str::FromStr for RewardScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integrated" => Ok(Self::Integrated),
            "outcome_only" | "outcome-only" => Ok(Self::OutcomeOnly),
            "turn_only" | "turn-only" => Ok(Self::TurnOnly),
            other => Err(Error::Config(format!(
                "reward.scope must be integrated, outcome_only or turn_only, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for RewardScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Integrated => "integrated",
            Self::OutcomeOnly => "outcome_only",
            Self::TurnOnly => "turn_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardSchedule {
    pub per_turn: Vec<f64>,
    pub outcome: f64,
    pub trajectory_total: f64,
    pub mode: AssignmentMode,
}

/// Mean per-call reward of each turn. Turns without calls (including the
/// answer turn) get 0.
pub fn turn_rewards(trajectory: &Trajectory, credit: &CreditResult) -> Result<Vec<f64>> {
    let m = trajectory.call_count();
    if credit.per_call_rewards.len() != m {
        return Err(Error::Dimension(format!(
            "{} call rewards for a trajectory with {m} calls",
            credit.per_call_rewards.len()
        )));
    }
    let mut offset = 0;
    Ok(trajectory
        .turns()
        .iter()
        .map(|turn| {
            let count = turn.tool_calls.len();
            let rewards = &credit.per_call_rewards[offset..offset + count];
            offset += count;
            if count == 0 {
                0.0
            } else {
                rewards.iter().sum::<f64>() / count as f64
            }
        })
        .collect())
}

fn answer_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token-multiset F1 between two answers after lowercasing and stripping
/// ASCII punctuation.
pub fn outcome_f1(predicted: &str, golden: &str) -> f64 {
    let pred = answer_tokens(predicted);
    let gold = answer_tokens(golden);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in &gold {
        *counts.entry(tok).or_default() += 1;
    }
    let mut common = 0usize;
    for tok in &pred {
        if let Some(c) = counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    2.0 * common as f64 / (pred.len() + gold.len()) as f64
}

/// Full per-turn schedule of one rollout.
///
/// An answer turn is scored by the outcome F1 (0 under
/// [`RewardScope::TurnOnly`], which still reports the F1 in `outcome`). A
/// trajectory cut off at the turn limit keeps its last turn's call reward
/// and gets outcome 0.
pub fn assemble_schedule(
    trajectory: &Trajectory,
    credit: &CreditResult,
    gold: &GroundTruthTrace,
    scope: RewardScope,
) -> Result<RewardSchedule> {
    let mut per_turn = turn_rewards(trajectory, credit)?;
    if scope == RewardScope::OutcomeOnly {
        per_turn.iter_mut().for_each(|r| *r = 0.0);
    }
    let outcome = match trajectory.final_answer() {
        Some(answer) => {
            let f1 = outcome_f1(answer, &gold.golden_answer);
            if scope != RewardScope::TurnOnly {
                *per_turn
                    .last_mut()
                    .expect("trajectory has at least one turn") = f1;
            }
            f1
        }
        None => 0.0,
    };
    let trajectory_total = per_turn.iter().sum();
    Ok(RewardSchedule {
        per_turn,
        outcome,
        trajectory_total,
        mode: credit.mode,
    })
}
