//! Engine configuration: a flat `key = value` text format whose keys mirror
//! the fields below, e.g. `assignment.mode = ot`.

use crate::advantage::{AdvantageParams, AdvantageVariant};
use crate::assignment::{AssignmentMode, CostTransform, SinkhornParams};
use crate::error::{Error, Result};
use crate::matching::MatchOptions;
use crate::reward::RewardScope;
use crate::trace::DEFAULT_MAX_TURNS;

pub const DEFAULT_CLIP_RANGE: f64 = 0.2;
pub const DEFAULT_KL_COEFF: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    JsonLines,
    Table,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json-lines" | "jsonl" | "json" => Ok(Self::JsonLines),
            "table" => Ok(Self::Table),
            other => Err(Error::Config(format!(
                "output.format must be json-lines or table, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::JsonLines => "json-lines",
            Self::Table => "table",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub mode: AssignmentMode,
    pub penalty: f64,
    pub cost_transform: CostTransform,
    pub sinkhorn: SinkhornParams,
    pub advantage: AdvantageParams,
    pub reward_scope: RewardScope,
    pub matching: MatchOptions,
    pub max_turns: usize,
    pub output: OutputFormat,
    /// Treat a non-converged transport plan as an error.
    pub strict: bool,
    pub clip_range: f64,
    pub kl_coeff: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: AssignmentMode::Km,
            penalty: 0.0,
            cost_transform: CostTransform::Linear,
            sinkhorn: SinkhornParams::default(),
            advantage: AdvantageParams::default(),
            reward_scope: RewardScope::Integrated,
            matching: MatchOptions::default(),
            max_turns: DEFAULT_MAX_TURNS,
            output: OutputFormat::JsonLines,
            strict: false,
            clip_range: DEFAULT_CLIP_RANGE,
            kl_coeff: DEFAULT_KL_COEFF,
        }
    }
}

pub const KEYS: &[&str] = &[
    "assignment.mode",
    "assignment.penalty",
    "assignment.cost_transform",
    "assignment.temperature",
    "assignment.max_iter",
    "assignment.tol",
    "advantage.gamma",
    "advantage.guard",
    "advantage.variant",
    "advantage.wp_scale",
    "reward.scope",
    "matching.case_sensitive",
    "trace.max_turns",
    "output.format",
    "run.strict",
    "objective.clip_range",
    "objective.kl_coeff",
];

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got `{value}`"
        ))),
    }
}

impl EngineConfig {
    /// Sets one key. Values are checked for syntax here and for range in
    /// [`EngineConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "assignment.mode" => self.mode = value.parse()?,
            "assignment.penalty" => self.penalty = number(key, value)?,
            "assignment.cost_transform" => self.cost_transform = value.parse()?,
            "assignment.temperature" => self.sinkhorn.temperature = number(key, value)?,
            "assignment.max_iter" => self.sinkhorn.max_iter = number(key, value)?,
            "assignment.tol" => self.sinkhorn.tol = number(key, value)?,
            "advantage.gamma" => self.advantage.gamma = number(key, value)?,
            "advantage.guard" => self.advantage.guard = number(key, value)?,
            "advantage.variant" => self.advantage.variant = value.parse::<AdvantageVariant>()?,
            "advantage.wp_scale" => self.advantage.wp_scale = number(key, value)?,
            "reward.scope" => self.reward_scope = value.parse()?,
            "matching.case_sensitive" => self.matching.case_sensitive = boolean(key, value)?,
            "trace.max_turns" => self.max_turns = number(key, value)?,
            "output.format" => self.output = value.parse()?,
            "run.strict" => self.strict = boolean(key, value)?,
            "objective.clip_range" => self.clip_range = number(key, value)?,
            "objective.kl_coeff" => self.kl_coeff = number(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a config file. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected `key = value`", k + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.penalty.is_finite() && self.penalty >= 0.0) {
            return Err(Error::Config("assignment.penalty must be >= 0".into()));
        }
        let t = self.sinkhorn.temperature;
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Config(
                "assignment.temperature must be positive".into(),
            ));
        }
        if self.sinkhorn.max_iter == 0 {
            return Err(Error::Config(
                "assignment.max_iter must be at least 1".into(),
            ));
        }
        if !(self.sinkhorn.tol.is_finite() && self.sinkhorn.tol > 0.0) {
            return Err(Error::Config("assignment.tol must be positive".into()));
        }
        self.advantage.validate()?;
        if self.max_turns == 0 {
            return Err(Error::Config("trace.max_turns must be at least 1".into()));
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(Error::Config(
                "objective.clip_range must lie in (0, 1)".into(),
            ));
        }
        if !(self.kl_coeff.is_finite() && self.kl_coeff >= 0.0) {
            return Err(Error::Config("objective.kl_coeff must be >= 0".into()));
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.mode.to_string(),
            self.penalty.to_string(),
            self.cost_transform.to_string(),
            self.sinkhorn.temperature.to_string(),
            self.sinkhorn.max_iter.to_string(),
            self.sinkhorn.tol.to_string(),
            self.advantage.gamma.to_string(),
            self.advantage.guard.to_string(),
            self.advantage.variant.to_string(),
            self.advantage.wp_scale.to_string(),
            self.reward_scope.to_string(),
            self.matching.case_sensitive.to_string(),
            self.max_turns.to_string(),
            self.output.to_string(),
            self.strict.to_string(),
            self.clip_range.to_string(),
            self.kl_coeff.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.penalty, 0.0);
        assert_eq!(cfg.advantage.gamma, 0.9);
        assert_eq!(cfg.max_turns, 10);
        assert_eq!(cfg.sinkhorn.temperature, 0.05);
        assert_eq!(cfg.sinkhorn.max_iter, 1000);
        assert_eq!(cfg.sinkhorn.tol, 1e-9);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn parse_text() {
        let cfg = EngineConfig::from_text(
            "# run\nassignment.mode = ot\nassignment.temperature=0.01  # colder\nadvantage.variant = turn_only\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, AssignmentMode::Ot);
        assert_eq!(cfg.sinkhorn.temperature, 0.01);
        assert_eq!(cfg.advantage.variant, AdvantageVariant::TurnOnly);
    }

    #[test]
    fn rejects_bad_values() {
        assert_eq!(
            EngineConfig::from_text("advantage.gamma = 1.5")
                .unwrap_err()
                .to_string(),
            "advantage.gamma out of range"
        );
        assert!(EngineConfig::from_text("assignment.temperature = 0").is_err());
        assert!(EngineConfig::from_text("assignment.penalty = -1").is_err());
        assert!(EngineConfig::from_text("no.such.key = 1").is_err());
        assert!(EngineConfig::from_text("assignment.mode").is_err());
        assert!(EngineConfig::from_text("trace.max_turns = 0").is_err());
    }

    #[test]
    fn entries_round_trip() {
        let mut cfg = EngineConfig::default();
        cfg.set("assignment.mode", "ot").unwrap();
        cfg.set("advantage.gamma", "0.5").unwrap();
        let text: String = cfg
            .entries()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        assert_eq!(EngineConfig::from_text(&text).unwrap(), cfg);
    }
}
