use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vfl_sim::config::ExperimentConfig;
use vfl_sim::report::{self, MetricsReport};
use vfl_sim::{experiment, Error};

/// Output directory override; takes precedence over --out.
const OUTPUT_ENV: &str = "VFL_SIM_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "vfl-sim",
    about = "Vertical federated learning attack simulator",
    version
)]
struct Cli {
    /// Directory for report files
    #[arg(long, global = true, default_value = "reports")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment config over its seed list
    Run { config: PathBuf },
    /// Re-run the config once per value of a swept parameter
    Sweep {
        config: PathBuf,
        /// Dot path into the config, e.g. defense.noise_sigma
        #[arg(long)]
        axis: String,
        /// Comma-separated TOML literals, e.g. 0,0.1,0.3
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Aggregate every .jsonl report in a directory
    Report { dir: PathBuf },
}

fn out_dir(cli_out: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cli_out.to_path_buf(),
    }
}

fn emit(reports: &[MetricsReport], dir: &Path, stem: &str) -> vfl_sim::Result<()> {
    std::fs::create_dir_all(dir)?;
    report::write_jsonl(reports, &dir.join(format!("{stem}.jsonl")))?;
    report::write_summary_csv(reports, &dir.join(format!("{stem}_summary.csv")))?;
    for r in reports {
        report::write_trace_csv(r, &dir.join(format!("{stem}_trace_seed{}.csv", r.seed)))?;
        report::write_detection_csv(
            r,
            &dir.join(format!("{stem}_detections_seed{}.csv", r.seed)),
        )?;
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn aggregate(dir: &Path) -> vfl_sim::Result<()> {
    let mut reports = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "jsonl") {
            reports.extend(report::read_jsonl(&path)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::Config(format!(
            "no .jsonl reports under {}",
            dir.display()
        )));
    }
    let mut by_mode: Vec<(String, Vec<&MetricsReport>)> = Vec::new();
    for r in &reports {
        let key = format!("{:?}", r.config.mode).to_lowercase();
        match by_mode.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => by_mode.push((key, vec![r])),
        }
    }
    println!("mode            runs  metric      mean      std");
    for (mode, rs) in &by_mode {
        for (name, get) in [
            (
                "accuracy",
                (|r: &MetricsReport| r.finals.accuracy) as fn(&MetricsReport) -> Option<f64>,
            ),
            ("recon_mse", |r| r.finals.recon_mse),
            ("emb_cos", |r| r.finals.emb_cos),
            ("emb_mse", |r| r.finals.emb_mse),
        ] {
            let vals: Vec<f64> = rs.iter().filter_map(|r| get(r)).collect();
            if vals.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&vals);
            println!(
                "{:<15} {:<5} {:<10} {:>9.4} {:>8.4}",
                mode,
                vals.len(),
                name,
                mean,
                std
            );
        }
    }
    report::write_summary_csv(&reports, &dir.join("aggregate_summary.csv"))?;
    Ok(())
}

fn execute(cli: Cli) -> vfl_sim::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let reports = experiment::run_all(&cfg)?;
            let dir = out_dir(&cli.out);
            emit(&reports, &dir, "run")?;
            for r in &reports {
                println!(
                    "seed {}: rounds={} accuracy={:?} recon_mse={:?}",
                    r.seed,
                    r.rounds.len(),
                    r.finals.accuracy,
                    r.finals.recon_mse
                );
            }
            println!("wrote {} report(s) to {}", reports.len(), dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            if values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            let parsed: Vec<toml::Value> = values
                .iter()
                .map(|v| ExperimentConfig::parse_axis_value(v))
                .collect::<vfl_sim::Result<_>>()?;
            // validate every point before any compute
            for v in &parsed {
                cfg.with_axis(&axis, v)?;
            }
            let reports = experiment::sweep(&cfg, &axis, &parsed)?;
            let dir = out_dir(&cli.out);
            emit(&reports, &dir, "sweep")?;
            println!(
                "swept {} over {} value(s) x {} seed(s); wrote {} report(s) to {}",
                axis,
                values.len(),
                cfg.seeds.len(),
                reports.len(),
                dir.display()
            );
        }
        Command::Report { dir } => aggregate(&dir)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {}", e);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(3)
        }
    }
}
