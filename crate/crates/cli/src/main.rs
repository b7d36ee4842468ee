use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use marginsim_core::engine::RunOptions;
use marginsim_core::io::{self, parse_assignment, write_json, CsvTable};
use marginsim_core::rng::{read_series, write_series};
use marginsim_core::scenarios::{self, InvestorMetric, ScenarioRequest};
use marginsim_core::sweep::{parse_seeds, parse_values, sweep, DEFAULT_METRICS};
use marginsim_core::{run_with, Error, ModelConfig, Result};

#[derive(Parser)]
#[command(
    name = "marginsim",
    version,
    about = "Leveraged value investors, margin calls and fat tails"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write a run directory.
    Run {
        /// JSON configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "marginsim-run")]
        out: PathBuf,
        /// Override a key, e.g. `funds[*].lambda_max=10`. Applied in order after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Replay noise draws from a file (one per line) instead of the generator.
        #[arg(long)]
        chi_in: Option<PathBuf>,
        /// Write the noise draws used by the run.
        #[arg(long)]
        chi_out: Option<PathBuf>,
        /// Write only summary.json and manifest.json.
        #[arg(long)]
        compact: bool,
        /// Count steps whose excess demand has several roots.
        #[arg(long)]
        scan_roots: bool,
    },
    /// Run a grid of parameter values and seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Dotted key to vary, e.g. `funds[*].lambda_max`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// A count `n` (seeds 1..=n) or a comma-separated list.
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value = "marginsim-sweep")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Comma-separated metric names; defaults to the standard set.
        #[arg(long)]
        metrics: Option<String>,
    },
    /// Run a named experiment.
    Scenario {
        /// Scenario name; see `list-scenarios`.
        name: Option<String>,
        /// Repeat the scenario recorded in this manifest.
        #[arg(long, conflicts_with_all = ["name", "seeds", "steps", "investor_metric"])]
        manifest: Option<PathBuf>,
        /// A count `n` (seeds 1..=n) or a comma-separated list.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "marginsim-scenarios")]
        out: PathBuf,
        /// Horizon for every run of the scenario.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// `performance` or `capital_weighted`.
        #[arg(long)]
        investor_metric: Option<String>,
    },
    /// Recompute summary.json of a run directory from its CSV files.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print the registered scenarios.
    ListScenarios,
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter().map(|s| parse_assignment(s)).collect()
}

fn cmd_run(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    set: &[String],
    chi_in: Option<&Path>,
    chi_out: Option<&Path>,
    compact: bool,
    scan_roots: bool,
) -> Result<()> {
    let mut cfg = io::load_config(config, &overrides(set)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut opts = RunOptions {
        scan_roots,
        ..RunOptions::default()
    };
    if let Some(p) = chi_in {
        let draws = read_series(p)?;
        if (draws.len() as u64) < cfg.horizon {
            return Err(Error::InvalidInput(format!(
                "{} holds {} draws, the run needs {}",
                p.display(),
                draws.len(),
                cfg.horizon
            )));
        }
        opts.draws = Some(draws);
    }
    let artifact = run_with(&cfg, &opts)?;
    io::emit_run(&artifact, out, compact)?;
    if let Some(p) = chi_out {
        let chi: Vec<f64> = artifact.records.iter().map(|r| r.chi).collect();
        write_series(p, &chi)?;
    }
    println!("{}", out.display());
    Ok(())
}

fn cmd_sweep(
    config: Option<&Path>,
    set: &[String],
    param: &str,
    values: &str,
    seeds: &str,
    out: &Path,
    jobs: usize,
    metrics: Option<&str>,
) -> Result<()> {
    let base: ModelConfig = io::load_config(config, &overrides(set)?)?;
    let values = parse_values(values);
    if values.is_empty() {
        return Err(Error::InvalidInput("no sweep values given".into()));
    }
    let seeds = parse_seeds(seeds)?;
    let names: Vec<String> = match metrics {
        Some(m) => parse_values(m),
        None => DEFAULT_METRICS.iter().map(|s| s.to_string()).collect(),
    };
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let table = sweep(&base, param, &values, &seeds, jobs)?;
    io::create_dir(out)?;
    let rows: CsvTable = table.rows_table(&names)?;
    rows.write(&out.join("sweep_runs.csv"))?;
    table
        .aggregate_table(&names)?
        .write(&out.join("sweep.csv"))?;
    write_json(
        &out.join("manifest.json"),
        &serde_json::json!({
            "base": base,
            "param": param,
            "values": values,
            "seeds": seeds,
            "metrics": names,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    let failed = table.cells.iter().filter(|c| c.outcome.is_err()).count();
    println!(
        "{} runs, {failed} failed: {}",
        table.cells.len(),
        out.display()
    );
    Ok(())
}

fn parse_metric(s: &str) -> Result<InvestorMetric> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        Error::InvalidInput(format!(
            "investor metric must be performance or capital_weighted, got {s:?}"
        ))
    })
}

fn cmd_scenario(
    name: Option<&str>,
    manifest: Option<&Path>,
    seeds: Option<&str>,
    out: &Path,
    steps: Option<u64>,
    jobs: usize,
    investor_metric: Option<&str>,
) -> Result<()> {
    let m = if let Some(path) = manifest {
        scenarios::rerun(path, out, jobs)?
    } else {
        let name =
            name.ok_or_else(|| Error::InvalidInput("scenario name or --manifest required".into()))?;
        let mut req = ScenarioRequest::new(name)?;
        if let Some(s) = seeds {
            req.seeds = parse_seeds(s)?;
        }
        req.steps = steps;
        if let Some(im) = investor_metric {
            req.investor_metric = parse_metric(im)?;
        }
        scenarios::run_scenario(&req, out, jobs)?
    };
    let dir = out.join(&m.request.scenario);
    for f in &m.files {
        println!("{}", dir.join(f).display());
    }
    println!("{}", dir.join(scenarios::MANIFEST_FILE).display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            set,
            chi_in,
            chi_out,
            compact,
            scan_roots,
        } => cmd_run(
            config.as_deref(),
            seed,
            &out,
            &set,
            chi_in.as_deref(),
            chi_out.as_deref(),
            compact,
            scan_roots,
        ),
        Command::Sweep {
            config,
            set,
            param,
            values,
            seeds,
            out,
            jobs,
            metrics,
        } => cmd_sweep(
            config.as_deref(),
            &set,
            &param,
            &values,
            &seeds,
            &out,
            jobs,
            metrics.as_deref(),
        ),
        Command::Scenario {
            name,
            manifest,
            seeds,
            out,
            steps,
            jobs,
            investor_metric,
        } => cmd_scenario(
            name.as_deref(),
            manifest.as_deref(),
            seeds.as_deref(),
            &out,
            steps,
            jobs,
            investor_metric.as_deref(),
        ),
        Command::Analyze { input } => {
            let summary = io::analyze(&input)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).map_err(Error::from)?
            );
            Ok(())
        }
        Command::ListScenarios => {
            for name in scenarios::available() {
                println!("{name}\t{}", scenarios::describe(name).unwrap_or_default());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("bad arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
