use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use sensobs::config::{load_config, LoadedConfig, Override};
use sensobs::kinematics::JointKind;
use sensobs::observability::snapshot;
use sensobs::scenarios::{run_scenario, ScenarioConfig, ScenarioSummary};
use sensobs::trajectory::{snapshot_csv_header, snapshot_csv_row, write_atomic, TrajectoryLog};
use sensobs::Error;

/// Sensor observability analysis and redundancy-resolution scenarios.
#[derive(Debug, Parser)]
#[command(name = "sensobs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Report S, s, o, w_k and the ellipsoids at one joint configuration.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Joint angles in degrees (prismatic joints in metres), comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        q: Vec<f64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Run one scenario and write its log plus a summary next to it.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Seed for randomised scenario inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every scenario of one or more configuration files in parallel.
    SweepGrid {
        /// Configuration files.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Restrict to these scenario names.
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
        /// `key=value` overrides; dotted keys address any table.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Load and validate a configuration without running anything.
    Check {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Scenario section to use.
    #[arg(long)]
    scenario: Option<String>,
    /// `key=value` override, repeatable. Bare keys set fields of `--scenario`.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<LoadedConfig, Error> {
        let overrides = parse_overrides(&self.overrides, self.scenario.as_deref())?;
        load_config(&self.config, &overrides)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn parse_overrides(raw: &[String], scenario: Option<&str>) -> Result<Vec<Override>, Error> {
    raw.iter().map(|s| Override::parse(s, scenario)).collect()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Aborted(_) => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Analyze { common, q, out, format } => {
            let config = common.load()?;
            let q: Vec<f64> = q
                .iter()
                .enumerate()
                .map(|(i, &v)| match config.model.rows.get(i).map(|r| r.kind) {
                    Some(JointKind::Prismatic) => v,
                    _ => v.to_radians(),
                })
                .collect();
            let snap = snapshot(&config.model, &config.sensors, &q, &config.analysis)?;
            let text = match format {
                Format::Json => serde_json::to_string_pretty(&snap).expect("snapshot serializes") + "\n",
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(snapshot_csv_header(&snap)).map_err(csv_io)?;
                    w.write_record(snapshot_csv_row(0.0, &snap)).map_err(csv_io)?;
                    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf-8")
                }
            };
            match out {
                Some(path) => write_atomic(&path, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Run {
            common,
            out,
            format,
            seed,
        } => {
            let config = common.load()?;
            let name = match &common.scenario {
                Some(name) => name.clone(),
                None if config.scenarios.len() == 1 => config.scenarios.keys().next().unwrap().clone(),
                None => {
                    return Err(Error::Validation {
                        field: "--scenario".into(),
                        message: format!(
                            "the file defines {} scenarios; choose one of: {}",
                            config.scenarios.len(),
                            config.scenarios.keys().cloned().collect::<Vec<_>>().join(", ")
                        ),
                    })
                }
            };
            let mut scenario = config.scenario(&name)?.clone();
            scenario.seed = seed;
            run_one(&scenario, &out, format)?;
            Ok(())
        }
        Command::SweepGrid {
            configs,
            scenarios,
            overrides,
            out,
            format,
            seed,
        } => {
            std::fs::create_dir_all(&out)?;
            let mut jobs: Vec<(String, ScenarioConfig)> = Vec::new();
            for path in &configs {
                let overrides = parse_overrides(&overrides, None)?;
                let loaded = load_config(path, &overrides)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                for (name, cfg) in loaded.scenarios {
                    if scenarios.is_empty() || scenarios.contains(&name) {
                        let mut cfg = cfg;
                        cfg.seed = seed;
                        jobs.push((format!("{stem}_{name}"), cfg));
                    }
                }
            }
            if let Some(missing) = scenarios.iter().find(|n| !jobs.iter().any(|(_, c)| &&c.name == n)) {
                return Err(Error::Validation {
                    field: "--scenario".into(),
                    message: format!("no configuration defines scenario `{missing}`"),
                });
            }
            let ext = match format {
                Format::Csv => "csv",
                Format::Json => "json",
            };
            let results: Vec<(String, Result<(), Error>)> = jobs
                .par_iter()
                .map(|(label, cfg)| {
                    let path = out.join(format!("{label}.{ext}"));
                    (label.clone(), run_one(cfg, &path, format).map(|_| ()))
                })
                .collect();
            let mut worst: Option<Error> = None;
            for (label, result) in results {
                match result {
                    Ok(()) => println!("{label}: ok"),
                    Err(e) => {
                        println!("{label}: {e}");
                        if worst.as_ref().is_none_or(|w| exit_code(&e) > exit_code(w)) {
                            worst = Some(e);
                        }
                    }
                }
            }
            worst.map_or(Ok(()), Err)
        }
        Command::Check { common } => {
            let config = common.load()?;
            if let Some(name) = &common.scenario {
                config.scenario(name)?;
            }
            println!(
                "{}: {} joints, {} sensors, {} task axes, {} scenarios ok",
                config.name,
                config.model.n_q(),
                config.sensors.len(),
                config.model.n_t(),
                config.scenarios.len()
            );
            Ok(())
        }
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn encode_log(log: &TrajectoryLog, format: Format) -> Result<Vec<u8>, Error> {
    Ok(match format {
        Format::Csv => log.to_csv_string()?.into_bytes(),
        Format::Json => {
            let mut text = serde_json::to_string_pretty(log).expect("log serializes");
            text.push('\n');
            text.into_bytes()
        }
    })
}

/// Summary lives next to the log: `run.csv` gives `run.summary.json`.
fn summary_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.summary.json"))
}

fn run_one(config: &ScenarioConfig, out: &Path, format: Format) -> Result<ScenarioSummary, Error> {
    match run_scenario(config) {
        Ok(outcome) => {
            write_atomic(out, &encode_log(&outcome.log, format)?)?;
            let mut summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
            summary.push('\n');
            write_atomic(&summary_path(out), summary.as_bytes())?;
            Ok(outcome.summary)
        }
        Err(Error::Aborted(aborted)) => {
            write_atomic(out, &encode_log(&aborted.partial, format)?)?;
            Err(Error::Aborted(aborted))
        }
        Err(e) => Err(e),
    }
}
