use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use l4slab::sim::scenario::{parse_value, set_param};
use l4slab::sim::{run, summarize, write_csv, Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "l4slab", version, about = "Packet-level L4S AQM laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics.csv and summary.txt.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario duration, in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Run the scenario once per value of a dotted parameter key.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Dotted key, e.g. `aqm.step.threshold_ms`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

enum Failure {
    Invalid(ScenarioError),
    Runtime(anyhow::Error),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Invalid(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn read_table(path: &Path) -> Result<toml::Table, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    text.parse::<toml::Table>().map_err(|e| {
        Failure::Invalid(ScenarioError {
            issues: vec![l4slab::sim::scenario::Issue {
                field: "<document>".into(),
                message: e.to_string().trim_end().into(),
            }],
        })
    })
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let t = read_table(path)?;
    Ok(Scenario::from_toml_value(toml::Value::Table(t))?)
}

fn write_run(s: &Scenario, dir: &Path, csv_name: &str) -> Result<(), Failure> {
    let out = run(s)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join(csv_name);
    let file = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_csv(&out.records, std::io::BufWriter::new(file)).context("writing metrics")?;
    let summary = summarize(&out.records).context("summarizing")?;
    let stem = csv_name.trim_end_matches(".csv").replace("metrics", "summary");
    fs::write(dir.join(format!("{stem}.txt")), summary.to_string()).context("writing summary")?;
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            scenario,
            out,
            seed,
            duration,
        } => {
            let mut s = load(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(d) = duration {
                s.duration_s = d;
            }
            s.validate()?;
            write_run(&s, &out, "metrics.csv")?;
            println!("wrote {}", out.join("metrics.csv").display());
        }
        Command::Sweep {
            scenario,
            param,
            values,
            out,
        } => {
            let base = read_table(&scenario)?;
            let mut runs = Vec::new();
            for v in &values {
                let mut t = base.clone();
                set_param(&mut t, &param, parse_value(v))?;
                let s = Scenario::from_toml_value(toml::Value::Table(t))?;
                s.validate()?;
                let safe: String = v
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                    .collect();
                runs.push((s, format!("metrics_{param}={safe}.csv")));
            }
            // independent runs share nothing, so they can go in parallel
            let results: Vec<Result<(), Failure>> = std::thread::scope(|sc| {
                let handles: Vec<_> = runs
                    .iter()
                    .map(|(s, name)| sc.spawn(|| write_run(s, &out, name)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("sweep run panicked").into())))
                    .collect()
            });
            for r in results {
                r?;
            }
            for (_, name) in &runs {
                println!("wrote {}", out.join(name).display());
            }
        }
        Command::Validate { scenario } => {
            load(&scenario)?.validate()?;
            println!("{}: ok", scenario.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
