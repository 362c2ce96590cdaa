//! Pairwise similarity between predicted and golden tool calls.
//!
//! A pair scores `S = S_tn * (S_tn + S_pn + S_pc) / (2 + |N_g|)` where
//! `S_tn` is tool-name equality, `S_pn` the Jaccard overlap of parameter
//! names and `S_pc` the number of golden parameters whose content the
//! prediction reproduces.

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::trace::{CallPosition, GroundTruthTrace, ToolCall, Trajectory};

/// Options for comparing parameter contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchOptions {
    /// When false, canonical contents are compared after lowercasing.
    pub case_sensitive: bool,
}

pub fn tool_name_score(pred: &ToolCall, gold: &ToolCall) -> f64 {
    if pred.name() == gold.name() {
        1.0
    } else {
        0.0
    }
}

/// Jaccard similarity of parameter-name sets. Two empty sets overlap
/// perfectly.
pub fn param_name_jaccard(pred: &ToolCall, gold: &ToolCall) -> f64 {
    let p: BTreeSet<&String> = pred.parameters().keys().collect();
    let g: BTreeSet<&String> = gold.parameters().keys().collect();
    let union = p.union(&g).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&g).count() as f64 / union as f64
}

fn contents_equal(a: &str, b: &str, options: MatchOptions) -> bool {
    if options.case_sensitive {
        a == b
    } else {
        a == b || a.to_lowercase() == b.to_lowercase()
    }
}

/// Number of golden parameters whose content the prediction reproduces.
/// Parameters the prediction omits count as misses; extra predicted
/// parameters are ignored here.
pub fn param_content_score(pred: &ToolCall, gold: &ToolCall, options: MatchOptions) -> usize {
    gold.parameters()
        .iter()
        .filter(|(k, g)| {
            pred.parameters()
                .get(*k)
                .is_some_and(|p| contents_equal(p, g, options))
        })
        .count()
}

pub fn pair_similarity(pred: &ToolCall, gold: &ToolCall, options: MatchOptions) -> f64 {
    let name = tool_name_score(pred, gold);
    if name == 0.0 {
        return 0.0;
    }
    let names = param_name_jaccard(pred, gold);
    let content = param_content_score(pred, gold, options) as f64;
    let max_score = 2.0 + gold.parameters().len() as f64;
    name * (name + names + content) / max_score
}

/// The m x n matching matrix between a trajectory's flattened calls and
/// the golden calls.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Array2<f64>,
    row_index: Vec<CallPosition>,
}

impl SimilarityMatrix {
    /// Wraps raw scores; rows are labelled as one call per turn.
    pub fn from_scores(scores: Array2<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Validation(format!(
                "similarity score {bad} outside [0, 1]"
            )));
        }
        let row_index = (0..scores.nrows())
            .map(|i| CallPosition {
                turn: i + 1,
                slot: 0,
            })
            .collect();
        Ok(Self { scores, row_index })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("ragged similarity rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let scores =
            Array2::from_shape_vec((m, n), flat).map_err(|e| Error::Dimension(e.to_string()))?;
        Self::from_scores(scores)
    }

    pub fn rows(&self) -> usize {
        self.scores.nrows()
    }

    pub fn cols(&self) -> usize {
        self.scores.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[[i, j]]
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn row_index(&self) -> &[CallPosition] {
        &self.row_index
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.scores.outer_iter().map(|r| r.to_vec()).collect()
    }
}

pub fn build_matrix(
    trajectory: &Trajectory,
    gold: &GroundTruthTrace,
    options: MatchOptions,
) -> SimilarityMatrix {
    let predicted = trajectory.predicted_calls();
    let m = predicted.len();
    let n = gold.calls.len();
    let flat: Vec<f64> = predicted
        .par_iter()
        .flat_map_iter(|(_, pred)| {
            gold.calls
                .iter()
                .map(move |g| pair_similarity(pred, g, options))
        })
        .collect();
    let scores = Array2::from_shape_vec((m, n), flat).expect("m * n scores");
    SimilarityMatrix {
        scores,
        row_index: predicted.into_iter().map(|(pos, _)| pos).collect(),
    }
}
