//! Command-line front end over [`crate::scenario`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::scenario::{self, Loaded, ScenarioError, BUNDLED};

#[derive(Debug, Parser)]
#[command(name = "hemsim", version, about = "Run hardware-enabled governance scenarios")]
pub struct Cli {
    /// Treat unknown config keys as errors instead of warnings.
    #[arg(long, global = true)]
    pub strict: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario file or bundled scenario and write its reports.
    Run {
        /// Path to a JSON config, or the name of a bundled scenario.
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List bundled scenarios.
    List,
    /// Print a scenario with every default filled in.
    Describe { name: String },
}

fn resolve(target: &str, strict: bool) -> Result<Loaded, ScenarioError> {
    let path = Path::new(target);
    if path.exists() {
        return scenario::load_config(path, strict);
    }
    if target.ends_with(".json") || target.contains('/') {
        return Err(ScenarioError::Io { path: target.to_string(), message: "no such file".into() });
    }
    scenario::bundled(target).map(|config| Loaded { config, warnings: Vec::new() })
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code: 0 all predicates passed, 1 a predicate failed,
/// 2 invalid config or usage, 3 simulation or I/O failure.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::List => {
            for (name, _) in BUNDLED {
                let description = scenario::bundled(name).map(|c| c.description).unwrap_or_default();
                let _ = writeln!(out, "{name:<26} {description}");
            }
            Ok(0)
        }
        Command::Describe { name } => resolve(name, cli.strict).map(|loaded| {
            for w in &loaded.warnings {
                let _ = writeln!(err, "warning: {w}");
            }
            let _ = writeln!(out, "{}", scenario::describe(&loaded.config));
            0
        }),
        Command::Run { config, out: dir, seed } => resolve(config, cli.strict).and_then(|loaded| {
            for w in &loaded.warnings {
                let _ = writeln!(err, "warning: {w}");
            }
            let seed = seed.unwrap_or(loaded.config.seed);
            let report = scenario::run(&loaded.config, seed)?;
            report.write_to(dir)?;
            let _ = write!(out, "{}", report.files["summary.txt"]);
            Ok(if report.passed() { 0 } else { 1 })
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
