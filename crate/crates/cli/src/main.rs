//! `parafio` experiment runner: one command per invocation, CSV data plus a
//! JSON summary per command.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use serde_json::{json, Value};

use config::{ExperimentConfig, Overrides, SUITE};

#[derive(Debug, Parser)]
#[command(name = "parafio", version, about = "Measurements for Fourier integral operators with rough phases")]
struct Cli {
    /// TOML experiment config
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config)
    #[arg(long)]
    out: Option<String>,
    /// Run seed (overrides `seed` in the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    threads: Option<usize>,
    /// Command to run (overrides `command` in the config)
    command: Option<String>,
}

enum Outcome {
    Pass,
    Fail,
}

fn write_report(dir: &Path, cfg: &ExperimentConfig, report: &commands::Report) -> Result<Value> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join(format!("{}.csv", cfg.command));
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    w.write_record(&report.header)?;
    for row in &report.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    let summary = json!({
        "command": cfg.command,
        "pass": report.pass,
        "metrics": report.metrics,
        "config": cfg,
    });
    let json_path = dir.join(format!("{}.json", cfg.command));
    fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    Ok(summary)
}

fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = PathBuf::from(&cfg.out);
    if cfg.command != "suite" {
        let report = commands::run(cfg)?;
        write_report(&dir, cfg, &report)?;
        println!("{} {}", if report.pass { "PASS" } else { "FAIL" }, cfg.command);
        return Ok(if report.pass { Outcome::Pass } else { Outcome::Fail });
    }
    let mut results = Vec::new();
    let mut all = true;
    for name in SUITE {
        let sub = ExperimentConfig { command: name.to_string(), ..cfg.clone() };
        let report = commands::run(&sub).with_context(|| format!("suite step {name}"))?;
        write_report(&dir, &sub, &report)?;
        println!("{} {name}", if report.pass { "PASS" } else { "FAIL" });
        all &= report.pass;
        results.push(json!({ "command": name, "pass": report.pass }));
    }
    let summary = json!({ "command": "suite", "pass": all, "steps": results, "config": cfg });
    fs::write(dir.join("suite.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(if all { Outcome::Pass } else { Outcome::Fail })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<Outcome> {
        if let Some(n) = cli.threads {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
        }
        let text = fs::read_to_string(&cli.config).with_context(|| format!("reading {}", cli.config.display()))?;
        let overrides = Overrides { seed: cli.seed, out: cli.out.clone(), command: cli.command.clone() };
        let cfg = config::parse(&text, &overrides)?;
        execute(&cfg)
    })();
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
