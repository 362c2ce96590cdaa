use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use turncredit_core::config::EngineConfig;
use turncredit_core::pipeline::{self, LayoutIndex, ObjectiveFile};
use turncredit_core::trace::{parse_trace, RolloutGroup};
use turncredit_core::{Error, Result};

/// Turn-level credit assignment for multi-turn tool-call traces.
#[derive(Parser)]
#[command(name = "turncredit", version, about)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print similarity matrices, assignments and per-call rewards.
    Match {
        /// Trace file (JSON lines), or `-` for stdin.
        trace: PathBuf,
    },
    /// Print per-turn reward schedules.
    Reward { trace: PathBuf },
    /// Print group-relative advantages.
    Advantage {
        trace: PathBuf,
        /// Token layout file; adds per-token advantages to the output.
        #[arg(long)]
        layout: Option<PathBuf>,
    },
    /// Evaluate the clipped surrogate objective on a token file.
    Objective {
        /// Whitespace-separated `rollout new old ref advantage mask` rows.
        file: PathBuf,
    },
    /// Print the effective configuration as `key = value` lines.
    Config,
}

#[derive(Args)]
struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, env = "ENGINE_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,

    /// Set any config key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Assignment mode: km or ot.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Penalty for unmatched calls in km mode.
    #[arg(long, global = true)]
    penalty: Option<String>,
    #[arg(long, global = true)]
    cost_transform: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<String>,
    #[arg(long, global = true)]
    max_iter: Option<String>,
    #[arg(long, global = true)]
    tol: Option<String>,
    #[arg(long, global = true)]
    gamma: Option<String>,
    #[arg(long, global = true)]
    guard: Option<String>,
    /// dual, weighted_product, weighted_sum, trajectory_only or turn_only.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// integrated, outcome_only or turn_only.
    #[arg(long, global = true)]
    scope: Option<String>,
    #[arg(long, global = true)]
    max_turns: Option<String>,
    /// json-lines or table.
    #[arg(long, global = true)]
    format: Option<String>,
    #[arg(long, global = true)]
    clip_range: Option<String>,
    #[arg(long, global = true)]
    kl_coeff: Option<String>,
    /// Treat transport non-convergence as an error (exit 3).
    #[arg(long, global = true)]
    strict: bool,
    /// Compare parameter contents case-sensitively.
    #[arg(long, global = true)]
    case_sensitive: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<EngineConfig> {
        let mut cfg = EngineConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            cfg.set(key, value)?;
        }
        let flags = [
            ("assignment.mode", &self.mode),
            ("assignment.penalty", &self.penalty),
            ("assignment.cost_transform", &self.cost_transform),
            ("assignment.temperature", &self.temperature),
            ("assignment.max_iter", &self.max_iter),
            ("assignment.tol", &self.tol),
            ("advantage.gamma", &self.gamma),
            ("advantage.guard", &self.guard),
            ("advantage.variant", &self.variant),
            ("reward.scope", &self.scope),
            ("trace.max_turns", &self.max_turns),
            ("output.format", &self.format),
            ("objective.clip_range", &self.clip_range),
            ("objective.kl_coeff", &self.kl_coeff),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.strict {
            cfg.strict = true;
        }
        if self.case_sensitive {
            cfg.matching.case_sensitive = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn open(path: &Path) -> Result<Box<dyn BufRead>> {
    if path.as_os_str() == "-" {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(Box::new(BufReader::new(file)))
}

fn load(path: &Path, cfg: &EngineConfig) -> Result<Vec<RolloutGroup>> {
    parse_trace(open(path)?, cfg.max_turns)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cli.command {
        Command::Match { trace } => {
            let records = pipeline::match_records(&load(&trace, &cfg)?, &cfg)?;
            pipeline::write_match(&records, cfg.output, &mut out)?;
        }
        Command::Reward { trace } => {
            let records = pipeline::reward_records(&load(&trace, &cfg)?, &cfg)?;
            pipeline::write_reward(&records, cfg.output, &mut out)?;
        }
        Command::Advantage { trace, layout } => {
            let groups = load(&trace, &cfg)?;
            let layouts = layout.map(|p| LayoutIndex::parse(open(&p)?)).transpose()?;
            let records = pipeline::advantage_records_for(&groups, &cfg, layouts.as_ref())?;
            pipeline::write_advantage(&records, cfg.output, &mut out)?;
        }
        Command::Objective { file } => {
            let value = ObjectiveFile::parse(open(&file)?)?.objective(&cfg)?;
            writeln!(out, "{value}")?;
        }
        Command::Config => {
            for (key, value) in cfg.entries() {
                writeln!(out, "{key} = {value}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(msg)) if msg.contains("Broken pipe") => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
