use clap::{Parser, Subcommand, ValueEnum};
use kam::cli::config::{builtin_config, emit_config, parse_config, ConfigError, FieldError, ModeKind, RunConfig};
use kam::cli::runner::{apply_overrides, execute, exit_code, Command, RunError, EXIT_CONFIG, EXIT_INTERNAL};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kam", version, about = "Multi-scale KAM iteration, condition checks and resonance measures")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    FrequencyPreserving,
    Isoenergetic,
}

impl From<Mode> for ModeKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => ModeKind::Full,
            Mode::FrequencyPreserving => ModeKind::FrequencyPreserving,
            Mode::Isoenergetic => ModeKind::Isoenergetic,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// TOML config; the built-in example when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the measure seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Non-degeneracy conditions only.
    Check(Common),
    /// Conditions, iteration and the optional measure fit.
    Run(Common),
    /// Resonance measure fit only.
    Measure(Common),
    /// Prints the built-in example config.
    Example {
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig, RunError> {
    let cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                RunError::Config(ConfigError::Invalid(vec![FieldError {
                    field: "--config".into(),
                    message: format!("cannot read {}: {e}", path.display()),
                }]))
            })?;
            parse_config(&text).map_err(RunError::Config)?
        }
        None => builtin_config(ModeKind::Full),
    };
    apply_overrides(cfg, common.mode.map(Into::into), common.seed)
}

fn run(cmd: Command, common: &Common) -> Result<i32, RunError> {
    let cfg = load(common)?;
    let report = execute(&cfg, cmd)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let files = report
        .write_to(&dir)
        .map_err(|e| RunError::Internal(format!("writing {}: {e}", dir.display())))?;
    println!("{}", report.summary());
    println!("wrote {} in {}", files.join(", "), dir.display());
    Ok(exit_code(&report))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Check(c) => run(Command::Check, c),
        Cmd::Run(c) => run(Command::Run, c),
        Cmd::Measure(c) => run(Command::Measure, c),
        Cmd::Example { mode, out } => {
            let text = emit_config(&builtin_config((*mode).into()));
            match out {
                Some(p) => std::fs::write(p, text).map(|_| 0).map_err(|e| RunError::Internal(e.to_string())),
                None => {
                    print!("{text}");
                    Ok(0)
                }
            }
        }
    };
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            match e {
                RunError::Config(_) => EXIT_CONFIG,
                RunError::Internal(_) => EXIT_INTERNAL,
            }
        }
    };
    ExitCode::from(code as u8)
}
