//! End-to-end scoring of rollout groups and the record streams emitted by
//! the `match`, `reward`, `advantage` and `objective` commands.
//!
//! Groups are scored in parallel; records are always returned in input
//! order so that identical inputs give byte-identical output.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::advantage::{self, AdvantageTable, ObjectiveInputs, TokenLayout};
use crate::assignment::{self, AssignmentMode, CreditResult, Witness};
use crate::config::{EngineConfig, OutputFormat};
use crate::error::{Error, Result};
use crate::matching::{build_matrix, SimilarityMatrix};
use crate::reward::{assemble_schedule, RewardSchedule};
use crate::trace::{GroundTruthTrace, RolloutGroup, Trajectory};

#[derive(Debug, Clone)]
pub struct RolloutScore {
    pub matrix: SimilarityMatrix,
    pub credit: CreditResult,
    pub schedule: RewardSchedule,
}

pub fn credit_for(matrix: &SimilarityMatrix, cfg: &EngineConfig) -> Result<CreditResult> {
    match cfg.mode {
        AssignmentMode::Km => assignment::hard_rewards(matrix, cfg.penalty),
        AssignmentMode::Ot => {
            let credit = assignment::soft_credit(matrix, cfg.cost_transform, cfg.sinkhorn)?;
            if let Witness::Soft(plan) = &credit.witness {
                if !plan.converged {
                    if cfg.strict {
                        return Err(Error::NonConvergence {
                            violation: plan.violation,
                            iterations: plan.iterations_used,
                        });
                    }
                    log::warn!(
                        "transport plan not converged: violation {:e} after {} iterations",
                        plan.violation,
                        plan.iterations_used
                    );
                }
            }
            Ok(credit)
        }
    }
}

pub fn score_rollout(
    trajectory: &Trajectory,
    gold: &GroundTruthTrace,
    cfg: &EngineConfig,
) -> Result<RolloutScore> {
    let matrix = build_matrix(trajectory, gold, cfg.matching);
    let credit = credit_for(&matrix, cfg)?;
    let schedule = assemble_schedule(trajectory, &credit, gold, cfg.reward_scope)?;
    Ok(RolloutScore {
        matrix,
        credit,
        schedule,
    })
}

pub fn score_group(group: &RolloutGroup, cfg: &EngineConfig) -> Result<Vec<RolloutScore>> {
    group
        .rollouts
        .iter()
        .map(|t| score_rollout(t, &group.ground_truth, cfg))
        .collect()
}

pub fn group_advantages(scores: &[RolloutScore], cfg: &EngineConfig) -> Result<AdvantageTable> {
    let per_turn: Vec<Vec<f64>> = scores.iter().map(|s| s.schedule.per_turn.clone()).collect();
    advantage::compute_advantages(&per_turn, &cfg.advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub turn: usize,
    pub slot: usize,
    pub name: String,
    /// Matched golden index (hard mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub golden: Option<usize>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRecord {
    pub query_id: String,
    pub rollout_index: usize,
    pub mode: AssignmentMode,
    pub golden: Vec<String>,
    pub calls: Vec<CallRecord>,
    pub similarity: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardRecord {
    pub query_id: String,
    pub rollout_index: usize,
    pub per_turn: Vec<f64>,
    pub outcome: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnAdvantageRecord {
    pub t: usize,
    pub r_t: f64,
    #[serde(rename = "R_t")]
    pub return_to_go: f64,
    #[serde(rename = "A_l")]
    pub turn_adv: f64,
    #[serde(rename = "A_tilde")]
    pub integrated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdvantageRecord {
    pub query_id: String,
    pub rollout_index: usize,
    #[serde(rename = "A_g")]
    pub trajectory_adv: f64,
    pub per_turn: Vec<TurnAdvantageRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<f64>>,
}

fn match_record(group: &RolloutGroup, index: usize, score: &RolloutScore) -> MatchRecord {
    let trajectory = &group.rollouts[index];
    let hard = match &score.credit.witness {
        Witness::Hard(h) => Some(h),
        Witness::Soft(_) => None,
    };
    let calls = trajectory
        .predicted_calls()
        .into_iter()
        .enumerate()
        .map(|(i, (pos, call))| CallRecord {
            turn: pos.turn,
            slot: pos.slot,
            name: call.name().to_string(),
            golden: hard.and_then(|h| h.golden_for(i)),
            reward: score.credit.per_call_rewards[i],
        })
        .collect();
    let (plan, converged) = match &score.credit.witness {
        Witness::Soft(p) => (
            Some(p.plan.outer_iter().map(|r| r.to_vec()).collect()),
            Some(p.converged),
        ),
        Witness::Hard(_) => (None, None),
    };
    MatchRecord {
        query_id: group.query_id.clone(),
        rollout_index: index,
        mode: score.credit.mode,
        golden: group
            .ground_truth
            .calls
            .iter()
            .map(|c| c.name().to_string())
            .collect(),
        calls,
        similarity: score.matrix.to_rows(),
        plan,
        converged,
    }
}

fn reward_record(query_id: &str, index: usize, schedule: &RewardSchedule) -> RewardRecord {
    RewardRecord {
        query_id: query_id.to_string(),
        rollout_index: index,
        per_turn: schedule.per_turn.clone(),
        outcome: schedule.outcome,
        total: schedule.trajectory_total,
    }
}

fn advantage_records(
    query_id: &str,
    scores: &[RolloutScore],
    table: &AdvantageTable,
    layouts: Option<&LayoutIndex>,
) -> Result<Vec<AdvantageRecord>> {
    scores
        .iter()
        .enumerate()
        .map(|(i, score)| {
            let per_turn = (0..score.schedule.per_turn.len())
                .map(|t| TurnAdvantageRecord {
                    t: t + 1,
                    r_t: score.schedule.per_turn[t],
                    return_to_go: table.discounted_returns[i][t],
                    turn_adv: table.turn_adv[i][t],
                    integrated: table.integrated[i][t],
                })
                .collect();
            let per_token = match layouts {
                None => None,
                Some(index) => {
                    let layout = index.get(query_id, i).ok_or_else(|| {
                        Error::Validation(format!(
                            "layout/trace mismatch: no layout for {query_id} rollout {i}"
                        ))
                    })?;
                    Some(
                        advantage::broadcast_rollout(&table.integrated[i], layout).map_err(
                            |e| {
                                Error::Validation(format!(
                                    "layout/trace mismatch for {query_id} rollout {i}: {e}"
                                ))
                            },
                        )?,
                    )
                }
            };
            Ok(AdvantageRecord {
                query_id: query_id.to_string(),
                rollout_index: i,
                trajectory_adv: table.trajectory_adv[i],
                per_turn,
                per_token,
            })
        })
        .collect()
}

/// Runs `f` on every group in parallel and returns results in input
/// order, reporting the first failing group.
fn per_group<T: Send>(
    groups: &[RolloutGroup],
    f: impl Fn(&RolloutGroup) -> Result<Vec<T>> + Sync + Send,
) -> Result<Vec<T>> {
    let results: Vec<Result<Vec<T>>> = groups.par_iter().map(f).collect();
    let mut out = Vec::new();
    for (group, r) in groups.iter().zip(results) {
        out.extend(r.map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("query {}: {msg}", group.query_id)),
            other => other,
        })?);
    }
    Ok(out)
}

pub fn match_records(groups: &[RolloutGroup], cfg: &EngineConfig) -> Result<Vec<MatchRecord>> {
    cfg.validate()?;
    per_group(groups, |g| {
        let scores = score_group(g, cfg)?;
        Ok(scores
            .iter()
            .enumerate()
            .map(|(i, s)| match_record(g, i, s))
            .collect())
    })
}

pub fn reward_records(groups: &[RolloutGroup], cfg: &EngineConfig) -> Result<Vec<RewardRecord>> {
    cfg.validate()?;
    per_group(groups, |g| {
        let scores = score_group(g, cfg)?;
        Ok(scores
            .iter()
            .enumerate()
            .map(|(i, s)| reward_record(&g.query_id, i, &s.schedule))
            .collect())
    })
}

pub fn advantage_records_for(
    groups: &[RolloutGroup],
    cfg: &EngineConfig,
    layouts: Option<&LayoutIndex>,
) -> Result<Vec<AdvantageRecord>> {
    cfg.validate()?;
    if let Some(index) = layouts {
        index.check_against(groups)?;
    }
    per_group(groups, |g| {
        let scores = score_group(g, cfg)?;
        let table = group_advantages(&scores, cfg).map_err(|e| match e {
            Error::GroupTooSmall { found, required } => Error::Validation(format!(
                "group too small: {found} rollout(s), need at least {required} for advantage.variant = {}",
                cfg.advantage.variant
            )),
            other => other,
        })?;
        advantage_records(&g.query_id, &scores, &table, layouts)
    })
}

/// Everything the bindings return for one group: reward schedules and the
/// advantage table, computed on the same path as the command line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub query_id: String,
    pub rewards: Vec<RewardRecord>,
    pub advantages: Option<Vec<AdvantageRecord>>,
    pub table: Option<AdvantageTable>,
}

/// Scores one group. Advantages are omitted when the group is too small
/// for the configured variant.
pub fn group_report(group: &RolloutGroup, cfg: &EngineConfig) -> Result<GroupReport> {
    cfg.validate()?;
    let scores = score_group(group, cfg)?;
    let rewards = scores
        .iter()
        .enumerate()
        .map(|(i, s)| reward_record(&group.query_id, i, &s.schedule))
        .collect();
    let (advantages, table) = match group_advantages(&scores, cfg) {
        Ok(table) => (
            Some(advantage_records(&group.query_id, &scores, &table, None)?),
            Some(table),
        ),
        Err(Error::GroupTooSmall { .. }) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(GroupReport {
        query_id: group.query_id.clone(),
        rewards,
        advantages,
        table,
    })
}

/// Serializes one record as a JSON line. Shared with the bindings so both
/// produce identical bytes.
pub fn to_json_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("records serialize")
}

fn write_lines<T: Serialize, W: Write>(records: &[T], out: &mut W) -> Result<()> {
    for r in records {
        writeln!(out, "{}", to_json_line(r))?;
    }
    Ok(())
}

fn fmt_row(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:>8.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_match<W: Write>(
    records: &[MatchRecord],
    format: OutputFormat,
    out: &mut W,
) -> Result<()> {
    if format == OutputFormat::JsonLines {
        return write_lines(records, out);
    }
    for r in records {
        writeln!(
            out,
            "== {} rollout {} ({})",
            r.query_id, r.rollout_index, r.mode
        )?;
        writeln!(out, "golden: {}", r.golden.join(", "))?;
        for (i, call) in r.calls.iter().enumerate() {
            let matched = match (r.mode, call.golden) {
                (AssignmentMode::Km, Some(j)) => format!("-> {}", r.golden[j]),
                (AssignmentMode::Km, None) => "unmatched".to_string(),
                (AssignmentMode::Ot, _) => String::new(),
            };
            let line = format!(
                "turn {:>2} call {} {:<32} S=[{}] reward={:.4} {}",
                call.turn,
                call.slot,
                call.name,
                fmt_row(&r.similarity[i]),
                call.reward,
                matched
            );
            writeln!(out, "{}", line.trim_end())?;
            if let Some(plan) = &r.plan {
                writeln!(out, "{:>47}Z=[{}]", "", fmt_row(&plan[i]))?;
            }
        }
    }
    Ok(())
}

pub fn write_reward<W: Write>(
    records: &[RewardRecord],
    format: OutputFormat,
    out: &mut W,
) -> Result<()> {
    if format == OutputFormat::JsonLines {
        return write_lines(records, out);
    }
    writeln!(
        out,
        "{:<20} {:>7} {:>8} {:>8}  per_turn",
        "query_id", "rollout", "outcome", "total"
    )?;
    for r in records {
        writeln!(
            out,
            "{:<20} {:>7} {:>8.4} {:>8.4}  [{}]",
            r.query_id,
            r.rollout_index,
            r.outcome,
            r.total,
            fmt_row(&r.per_turn)
        )?;
    }
    Ok(())
}

pub fn write_advantage<W: Write>(
    records: &[AdvantageRecord],
    format: OutputFormat,
    out: &mut W,
) -> Result<()> {
    if format == OutputFormat::JsonLines {
        return write_lines(records, out);
    }
    for r in records {
        writeln!(
            out,
            "== {} rollout {}  A_g = {:.4}",
            r.query_id, r.rollout_index, r.trajectory_adv
        )?;
        writeln!(
            out,
            "{:>4} {:>9} {:>9} {:>9} {:>9}",
            "t", "r_t", "R_t", "A_l", "A_tilde"
        )?;
        for t in &r.per_turn {
            writeln!(
                out,
                "{:>4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                t.t, t.r_t, t.return_to_go, t.turn_adv, t.integrated
            )?;
        }
        if let Some(tokens) = &r.per_token {
            writeln!(out, "tokens: [{}]", fmt_row(tokens))?;
        }
    }
    Ok(())
}

/// Token layouts keyed by `(query_id, rollout_index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayoutIndex {
    layouts: HashMap<(String, usize), TokenLayout>,
}

#[derive(serde::Deserialize)]
struct RawLayout {
    query_id: String,
    rollout_index: usize,
    spans: Vec<(usize, usize)>,
    mask: Vec<Value>,
}

impl LayoutIndex {
    pub fn get(&self, query_id: &str, rollout: usize) -> Option<&TokenLayout> {
        self.layouts.get(&(query_id.to_string(), rollout))
    }

    pub fn insert(&mut self, query_id: impl Into<String>, rollout: usize, layout: TokenLayout) {
        self.layouts.insert((query_id.into(), rollout), layout);
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    /// Parses a layout stream: one `{"query_id", "rollout_index", "spans",
    /// "mask"}` record per line, where `mask` holds booleans or 0/1.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut index = Self::default();
        for (k, line) in reader.lines().enumerate() {
            let lineno = k + 1;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawLayout =
                serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
            let loss_mask = raw
                .mask
                .iter()
                .map(|v| match v {
                    Value::Bool(b) => Ok(*b),
                    Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
                    Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
                    other => Err(Error::parse(
                        lineno,
                        format!("mask entries must be booleans or 0/1, got {other}"),
                    )),
                })
                .collect::<Result<Vec<bool>>>()?;
            let layout = TokenLayout {
                turn_spans: raw.spans,
                loss_mask,
            };
            layout
                .validate()
                .map_err(|e| Error::parse(lineno, e.to_string()))?;
            let key = (raw.query_id, raw.rollout_index);
            if index.layouts.contains_key(&key) {
                return Err(Error::parse(
                    lineno,
                    format!("duplicate layout for {} rollout {}", key.0, key.1),
                ));
            }
            index.layouts.insert(key, layout);
        }
        Ok(index)
    }

    /// Every layout must name an existing rollout.
    fn check_against(&self, groups: &[RolloutGroup]) -> Result<()> {
        let sizes: HashMap<&str, usize> = groups
            .iter()
            .map(|g| (g.query_id.as_str(), g.rollouts.len()))
            .collect();
        let mut keys: Vec<_> = self.layouts.keys().collect();
        keys.sort();
        for (query, rollout) in keys {
            match sizes.get(query.as_str()) {
                Some(&g) if *rollout < g => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "layout/trace mismatch: layout for unknown rollout {query} #{rollout}"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Parsed objective input file.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveFile {
    pub rollout_ids: Vec<String>,
    pub logprob_new: Vec<Vec<f64>>,
    pub logprob_old: Vec<Vec<f64>>,
    pub logprob_ref: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

impl ObjectiveFile {
    /// One token per line: `rollout logp_new logp_old logp_ref advantage
    /// mask`, whitespace separated. Tokens are grouped by rollout id in
    /// order of first appearance. `#` starts a comment.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self> {
        let mut file = ObjectiveFile {
            rollout_ids: Vec::new(),
            logprob_new: Vec::new(),
            logprob_old: Vec::new(),
            logprob_ref: Vec::new(),
            advantages: Vec::new(),
            mask: Vec::new(),
        };
        let mut slot_of: HashMap<String, usize> = HashMap::new();
        for (k, line) in reader.lines().enumerate() {
            let lineno = k + 1;
            let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::parse(
                    lineno,
                    format!("expected 6 columns, found {}", fields.len()),
                ));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(lineno, format!("not a number: `{s}`")))
            };
            let mask = match fields[5] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::parse(
                        lineno,
                        format!("mask must be 0 or 1, got `{other}`"),
                    ))
                }
            };
            let slot = *slot_of.entry(fields[0].to_string()).or_insert_with(|| {
                file.rollout_ids.push(fields[0].to_string());
                file.logprob_new.push(Vec::new());
                file.logprob_old.push(Vec::new());
                file.logprob_ref.push(Vec::new());
                file.advantages.push(Vec::new());
                file.mask.push(Vec::new());
                file.rollout_ids.len() - 1
            });
            file.logprob_new[slot].push(num(fields[1])?);
            file.logprob_old[slot].push(num(fields[2])?);
            file.logprob_ref[slot].push(num(fields[3])?);
            file.advantages[slot].push(num(fields[4])?);
            file.mask[slot].push(mask);
        }
        Ok(file)
    }

    pub fn objective(&self, cfg: &EngineConfig) -> Result<f64> {
        let inputs = ObjectiveInputs {
            logprob_new: self.logprob_new.clone(),
            logprob_old: self.logprob_old.clone(),
            logprob_ref: self.logprob_ref.clone(),
            clip_range: cfg.clip_range,
            kl_coeff: cfg.kl_coeff,
        };
        advantage::grpo_objective(&inputs, &self.advantages, &self.mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_file_groups_rollouts() {
        let text = "# id new old ref adv mask\na 0 0 0 1 1\nb 0 0 0 -1 1\na 0 0 0 3 0\n";
        let file = ObjectiveFile::parse(text.as_bytes()).unwrap();
        assert_eq!(file.rollout_ids, vec!["a", "b"]);
        assert_eq!(file.advantages, vec![vec![1.0, 3.0], vec![-1.0]]);
        let cfg = EngineConfig {
            kl_coeff: 0.0,
            ..Default::default()
        };
        assert_eq!(file.objective(&cfg).unwrap(), 0.0);
        assert!(ObjectiveFile::parse("a 0 0 0 1".as_bytes()).is_err());
        assert!(ObjectiveFile::parse("a 0 0 0 1 2".as_bytes()).is_err());
    }

    #[test]
    fn layout_parse() {
        let text = r#"{"query_id": "q", "rollout_index": 0, "spans": [[0, 2], [3, 4]], "mask": [1, 1, 0, true]}"#;
        let index = LayoutIndex::parse(text.as_bytes()).unwrap();
        let layout = index.get("q", 0).unwrap();
        assert_eq!(layout.loss_mask, vec![true, true, false, true]);
        let bad = r#"{"query_id": "q", "rollout_index": 0, "spans": [[0, 9]], "mask": [1]}"#;
        assert!(matches!(
            LayoutIndex::parse(bad.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
