//! Trace data model: tool calls, turns, trajectories, and rollout groups,
//! plus ingestion of the line-delimited trace format.
//!
//! Every parameter value is stored in canonical string form (see
//! [`canonicalize_content`]) so that content equality during matching is a
//! plain string comparison.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::Deserialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_TURNS: usize = 10;

/// One predicted or golden tool invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    name: String,
    parameters: BTreeMap<String, String>,
}

impl ToolCall {
    /// Builds a call from already-canonical parameter contents.
    pub fn new<K, V, I>(name: impl AsRef<str>, parameters: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: AsRef<str>,
    {
        let name = name.as_ref().trim();
        if name.is_empty() {
            return Err(Error::Validation("empty tool name".into()));
        }
        let parameters = parameters
            .into_iter()
            .map(|(k, v)| (k.into(), v.as_ref().trim().to_string()))
            .collect();
        Ok(Self {
            name: name.to_string(),
            parameters,
        })
    }

    /// Builds a call from raw JSON parameter values, canonicalizing each.
    pub fn from_json(name: impl AsRef<str>, parameters: &Map<String, Value>) -> Result<Self> {
        Self::new(
            name,
            parameters
                .iter()
                .map(|(k, v)| (k.clone(), canonicalize_content(v))),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parameters(&self) -> &BTreeMap<String, String> {
        &self.parameters
    }

    pub fn to_json(&self) -> Value {
        let params: Map<String, Value> = self
            .parameters
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        serde_json::json!({ "name": self.name, "parameters": params })
    }
}

/// One interaction step: reasoning, tool calls, and the environment's
/// observation. A final-answer turn carries no tool calls.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Turn {
    pub index: usize,
    pub reasoning: Option<String>,
    pub tool_calls: Vec<ToolCall>,
    pub observation: Option<String>,
    pub answer: Option<String>,
}

impl Turn {
    pub fn with_calls(index: usize, tool_calls: Vec<ToolCall>) -> Self {
        Self {
            index,
            tool_calls,
            ..Default::default()
        }
    }

    pub fn answer(index: usize, answer: impl Into<String>) -> Self {
        Self {
            index,
            answer: Some(answer.into()),
            ..Default::default()
        }
    }

    pub fn is_answer(&self) -> bool {
        self.answer.is_some()
    }
}

/// Location of a predicted call: 1-based turn number and 0-based position
/// within that turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub struct CallPosition {
    pub turn: usize,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    turns: Vec<Turn>,
    max_turns: usize,
}

impl Trajectory {
    pub fn new(turns: Vec<Turn>, max_turns: usize) -> Result<Self> {
        if max_turns == 0 {
            return Err(Error::Validation("max_turns must be at least 1".into()));
        }
        if turns.is_empty() {
            return Err(Error::Validation("trajectory has no turns".into()));
        }
        if turns.len() > max_turns {
            return Err(Error::Validation(format!(
                "trajectory has {} turns, exceeding max_turns = {max_turns}",
                turns.len()
            )));
        }
        let last = turns.len() - 1;
        for (pos, turn) in turns.iter().enumerate() {
            if turn.index != pos + 1 {
                return Err(Error::Validation(format!(
                    "turn index {} at position {}; indices must be consecutive from 1",
                    turn.index,
                    pos + 1
                )));
            }
            if turn.is_answer() && !turn.tool_calls.is_empty() {
                return Err(Error::Validation(format!(
                    "answer turn {} contains tool calls",
                    turn.index
                )));
            }
            if turn.is_answer() && pos != last {
                return Err(Error::Validation(format!(
                    "answer in non-final turn {}",
                    turn.index
                )));
            }
        }
        Ok(Self { turns, max_turns })
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    /// Number of turns `T`.
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.turns.last().and_then(|t| t.answer.as_deref())
    }

    /// The flattened predicted-call list in turn-major order.
    pub fn predicted_calls(&self) -> Vec<(CallPosition, &ToolCall)> {
        self.turns
            .iter()
            .flat_map(|turn| {
                turn.tool_calls.iter().enumerate().map(move |(slot, call)| {
                    (
                        CallPosition {
                            turn: turn.index,
                            slot,
                        },
                        call,
                    )
                })
            })
            .collect()
    }

    /// `m`, the total number of predicted calls.
    pub fn call_count(&self) -> usize {
        self.turns.iter().map(|t| t.tool_calls.len()).sum()
    }

    pub fn to_json(&self) -> Value {
        let turns: Vec<Value> = self
            .turns
            .iter()
            .map(|t| {
                let mut obj = Map::new();
                obj.insert("index".into(), Value::from(t.index));
                if let Some(r) = &t.reasoning {
                    obj.insert("reasoning".into(), Value::String(r.clone()));
                }
                obj.insert(
                    "tool_calls".into(),
                    Value::Array(t.tool_calls.iter().map(ToolCall::to_json).collect()),
                );
                if let Some(o) = &t.observation {
                    obj.insert("observation".into(), Value::String(o.clone()));
                }
                if let Some(a) = &t.answer {
                    obj.insert("answer".into(), Value::String(a.clone()));
                }
                Value::Object(obj)
            })
            .collect();
        serde_json::json!({ "turns": turns })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruthTrace {
    pub calls: Vec<ToolCall>,
    pub golden_answer: String,
}

impl GroundTruthTrace {
    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "calls": self.calls.iter().map(ToolCall::to_json).collect::<Vec<_>>(),
            "answer": self.golden_answer,
        })
    }
}

/// `G` rollouts sampled for one query, sharing one ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutGroup {
    pub query_id: String,
    pub rollouts: Vec<Trajectory>,
    pub ground_truth: GroundTruthTrace,
}

impl RolloutGroup {
    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "query_id": self.query_id,
            "ground_truth": self.ground_truth.to_json(),
            "rollouts": self.rollouts.iter().map(Trajectory::to_json).collect::<Vec<_>>(),
        })
    }

    /// Parses and validates a single record already decoded as JSON.
    pub fn from_json(value: Value, max_turns: usize) -> Result<Self> {
        let mut unknown = Vec::new();
        let group = parse_value(value, max_turns, &mut unknown)?;
        for field in unknown {
            log::warn!("ignoring unknown field `{field}`");
        }
        Ok(group)
    }
}

/// Canonical string form of a parameter value.
///
/// Strings are trimmed; numbers print in shortest form with no trailing
/// zeros and no sign on zero; arrays and objects serialize compactly with
/// sorted keys and canonical numbers.
pub fn canonicalize_content(raw: &Value) -> String {
    match raw {
        Value::String(s) => s.trim().to_string(),
        other => {
            let mut out = String::new();
            write_canonical(other, &mut out);
            out
        }
    }
}

fn canonical_number(n: &serde_json::Number) -> String {
    if let Some(i) = n.as_i64() {
        return i.to_string();
    }
    if let Some(u) = n.as_u64() {
        return u.to_string();
    }
    let f = n.as_f64().unwrap_or(0.0);
    if f == 0.0 {
        "0".to_string()
    } else {
        format!("{f}")
    }
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&canonical_number(n)),
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"))
        }
        Value::Array(items) => {
            out.push('[');
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (k, key) in keys.into_iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(
                    &serde_json::to_string(key).expect("string serialization is infallible"),
                );
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
    }
}

#[derive(Deserialize)]
struct RawCall {
    name: String,
    #[serde(default, alias = "arguments")]
    parameters: Map<String, Value>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawGroundTruth {
    #[serde(default)]
    calls: Vec<RawCall>,
    #[serde(default)]
    answer: String,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawTurn {
    #[serde(default)]
    index: Option<usize>,
    #[serde(default)]
    reasoning: Option<String>,
    #[serde(default)]
    tool_calls: Vec<RawCall>,
    #[serde(default)]
    observation: Option<String>,
    #[serde(default)]
    answer: Option<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawRollout {
    turns: Vec<RawTurn>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawRecord {
    query_id: String,
    ground_truth: RawGroundTruth,
    #[serde(default)]
    rollouts: Vec<RawRollout>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

fn note_unknown(path: &str, extra: &BTreeMap<String, Value>, unknown: &mut Vec<String>) {
    unknown.extend(extra.keys().map(|k| format!("{path}{k}")));
}

fn convert_call(raw: RawCall, path: &str, unknown: &mut Vec<String>) -> Result<ToolCall> {
    note_unknown(path, &raw.extra, unknown);
    ToolCall::from_json(&raw.name, &raw.parameters)
}

fn parse_value(value: Value, max_turns: usize, unknown: &mut Vec<String>) -> Result<RolloutGroup> {
    let raw: RawRecord = serde_json::from_value(value)
        .map_err(|e| Error::Validation(format!("malformed record: {e}")))?;
    note_unknown("", &raw.extra, unknown);
    note_unknown("ground_truth.", &raw.ground_truth.extra, unknown);

    let calls = raw
        .ground_truth
        .calls
        .into_iter()
        .enumerate()
        .map(|(j, c)| convert_call(c, &format!("ground_truth.calls[{j}]."), unknown))
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = GroundTruthTrace {
        calls,
        golden_answer: raw.ground_truth.answer,
    };

    let mut rollouts = Vec::with_capacity(raw.rollouts.len());
    for (r, rollout) in raw.rollouts.into_iter().enumerate() {
        note_unknown(&format!("rollouts[{r}]."), &rollout.extra, unknown);
        let mut turns = Vec::with_capacity(rollout.turns.len());
        let mut seen = std::collections::BTreeSet::new();
        for (pos, t) in rollout.turns.into_iter().enumerate() {
            let path = format!("rollouts[{r}].turns[{pos}].");
            note_unknown(&path, &t.extra, unknown);
            let index = t.index.unwrap_or(pos + 1);
            if !seen.insert(index) {
                return Err(Error::Validation(format!(
                    "rollout {r}: duplicate turn index {index}"
                )));
            }
            let tool_calls = t
                .tool_calls
                .into_iter()
                .enumerate()
                .map(|(k, c)| convert_call(c, &format!("{path}tool_calls[{k}]."), unknown))
                .collect::<Result<Vec<_>>>()?;
            turns.push(Turn {
                index,
                reasoning: t.reasoning,
                tool_calls,
                observation: t.observation,
                answer: t.answer,
            });
        }
        let trajectory = Trajectory::new(turns, max_turns)
            .map_err(|e| Error::Validation(format!("rollout {r}: {e}")))?;
        rollouts.push(trajectory);
    }

    Ok(RolloutGroup {
        query_id: raw.query_id,
        rollouts,
        ground_truth,
    })
}

/// Parses a line-delimited trace stream into validated rollout groups.
///
/// Blank lines are skipped. Errors carry the 1-based line number.
pub fn parse_trace<R: BufRead>(reader: R, max_turns: usize) -> Result<Vec<RolloutGroup>> {
    let mut groups = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| Error::parse(lineno, format!("invalid JSON: {e}")))?;
        let mut unknown = Vec::new();
        let group = parse_value(value, max_turns, &mut unknown).map_err(|e| match e {
            Error::Validation(msg) => Error::parse(lineno, msg),
            other => Error::parse(lineno, other.to_string()),
        })?;
        for field in unknown {
            log::warn!("line {lineno}: ignoring unknown field `{field}`");
        }
        groups.push(group);
    }
    Ok(groups)
}

pub fn parse_trace_str(input: &str, max_turns: usize) -> Result<Vec<RolloutGroup>> {
    parse_trace(input.as_bytes(), max_turns)
}
