//! Command-line front end.
//!
//! ```text
//! seelab list [--json]
//! seelab run <name|file.toml> [overrides]
//! seelab check <name|file.toml> --only <check> [overrides]
//! ```
//!
//! Exit codes: `0` every enabled check passed, `1` a check failed
//! numerically, `2` configuration or usage error.
//!
//! Outputs written to the output directory (`--out`, else `$SEELAB_OUT`,
//! else `./seelab-out`):
//!
//! * `report.json`: the resolved configuration, seed and every check summary.
//! * `<check>.csv`: time series with header `t,quantity,estimate,stderr`.
//!
//! Config files are TOML. Unknown keys are rejected:
//!
//! ```toml
//! experiment = "linear-example2"
//! checks = ["mp", "dpp"]
//!
//! [grid]
//! paths = 20000
//! steps = 128
//! seed = 7
//!
//! [tolerances]
//! scale = 1.0
//! ```

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::experiments::{run_experiment, CheckKind, ExperimentConfig, ExperimentReport, BUILTINS};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SEELAB_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "seelab",
    version,
    about = "Recursive stochastic control laboratory for truncated SEEs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the built-in experiments.
    List {
        #[arg(long)]
        json: bool,
    },
    /// Run an experiment by name or from a TOML config file.
    Run {
        target: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run selected checks of an experiment.
    Check {
        target: String,
        /// Check to run; repeat for several.
        #[arg(long, required = true, value_parser = parse_check)]
        only: Vec<CheckKind>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub noise_modes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tol_scale: Option<f64>,
    /// Print the report as JSON on stdout.
    #[arg(long)]
    pub json: bool,
    /// Worker threads for the numerical kernels.
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_check(s: &str) -> Result<CheckKind, String> {
    CheckKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = CheckKind::ALL.iter().map(|c| c.name()).collect();
        format!("unknown check '{s}' (expected one of {})", names.join(", "))
    })
}

/// Load a built-in experiment or a TOML file and apply the overrides.
pub fn resolve_config(target: &str, ov: &Overrides) -> crate::Result<ExperimentConfig> {
    let mut cfg = if BUILTINS.iter().any(|(n, _)| *n == target) {
        ExperimentConfig::builtin(target)?
    } else if Path::new(target).is_file() {
        let text = std::fs::read_to_string(target)
            .map_err(|e| Error::Configuration(format!("{target}: {e}")))?;
        ExperimentConfig::from_toml(&text)?
    } else {
        return Err(Error::Configuration(format!(
            "'{target}' is neither a built-in experiment nor a readable file"
        )));
    };
    if let Some(v) = ov.paths {
        cfg.grid.paths = v;
    }
    if let Some(v) = ov.steps {
        cfg.grid.steps = v;
    }
    if let Some(v) = ov.seed {
        cfg.grid.seed = v;
    }
    if ov.modes.is_some() {
        cfg.space.modes = ov.modes;
    }
    if ov.noise_modes.is_some() {
        cfg.space.noise_modes = ov.noise_modes;
    }
    if let Some(v) = ov.tol_scale {
        cfg.tolerances.scale = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn output_dir(ov: &Overrides) -> PathBuf {
    ov.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("seelab-out"))
}

/// CSV text for one check's series.
pub fn series_csv(report: &ExperimentReport, kind: CheckKind) -> Option<String> {
    let c = report.check(kind)?;
    let mut s = String::from("t,quantity,estimate,stderr\n");
    for r in &c.series {
        let se = if r.stderr.is_finite() {
            r.stderr.max(0.0)
        } else {
            0.0
        };
        let _ = writeln!(s, "{},{},{},{}", r.t, r.quantity, r.estimate, se);
    }
    Some(s)
}

/// `report.json` contents; identical configs give identical bytes apart
/// from the `timestamp` field.
pub fn report_json(report: &ExperimentReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialises") + "\n"
}

pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report_json(report))?;
    for c in &report.checks {
        if let Some(csv) = series_csv(report, c.check) {
            std::fs::write(dir.join(format!("{}.csv", c.check.name())), csv)?;
        }
    }
    Ok(())
}

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{secs}")
}

fn cmd_list(json: bool) -> i32 {
    let mut out = std::io::stdout().lock();
    if json {
        let items: Vec<_> = BUILTINS
            .iter()
            .map(|(n, d)| serde_json::json!({ "name": n, "description": d }))
            .collect();
        let _ = writeln!(out, "{}", serde_json::Value::Array(items));
    } else {
        for (n, d) in BUILTINS {
            let _ = writeln!(out, "{n:<18} {d}");
        }
    }
    0
}

fn cmd_run(target: &str, only: Option<Vec<CheckKind>>, ov: &Overrides) -> i32 {
    let mut cfg = match resolve_config(target, ov) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("seelab: {e}");
            return 2;
        }
    };
    if only.is_some() {
        cfg.checks = only;
    }
    let dir = output_dir(ov);
    if let Err(e) = std::fs::create_dir_all(&dir) {
        eprintln!(
            "seelab: cannot create output directory {}: {e}",
            dir.display()
        );
        return 2;
    }
    let workers = ov.workers.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("seelab: cannot start worker pool: {e}");
            return 2;
        }
    };
    let mut report = match pool.install(|| run_experiment(&cfg)) {
        Ok(r) => r,
        Err(e @ Error::Configuration(_)) => {
            eprintln!("seelab: {e}");
            return 2;
        }
        Err(e) => {
            eprintln!("seelab: {e}");
            return 1;
        }
    };
    report.timestamp = Some(timestamp());
    if let Err(e) = write_outputs(&report, &dir) {
        eprintln!("seelab: cannot write to {}: {e}", dir.display());
        return 2;
    }
    let mut out = std::io::stdout().lock();
    if ov.json {
        let _ = out.write_all(report_json(&report).as_bytes());
    } else {
        for c in &report.checks {
            let status = if c.pass { "pass" } else { "FAIL" };
            let _ = match &c.error {
                Some(e) => writeln!(out, "{:<16} {status}  ({e})", c.check.name()),
                None => writeln!(out, "{:<16} {status}", c.check.name()),
            };
        }
        let _ = writeln!(out, "report: {}", dir.join("report.json").display());
    }
    if report.pass {
        0
    } else {
        1
    }
}

/// Parse `args` (including the program name) and execute; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::List { json } => cmd_list(json),
        Command::Run { target, overrides } => cmd_run(&target, None, &overrides),
        Command::Check {
            target,
            only,
            overrides,
        } => cmd_run(&target, Some(only), &overrides),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_validate() {
        let ov = Overrides {
            paths: Some(50),
            steps: Some(16),
            ..Default::default()
        };
        let cfg = resolve_config("linear-example2", &ov).unwrap();
        assert_eq!((cfg.grid.paths, cfg.grid.steps), (50, 16));
        let bad = Overrides {
            steps: Some(0),
            ..Default::default()
        };
        assert!(matches!(
            resolve_config("heat-example1", &bad),
            Err(Error::Configuration(_))
        ));
        assert!(resolve_config("no-such-thing", &Overrides::default()).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["seelab", "frobnicate"]), 2);
        assert_eq!(run(["seelab", "check", "lq-oracle", "--only", "nope"]), 2);
    }
}
