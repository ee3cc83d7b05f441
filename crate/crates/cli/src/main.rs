//! `fedlora`: runs simulations, threshold sweeps, rank analyses, cost
//! reports and method comparisons, writing CSV/JSON into an output directory.
//!
//! Exit status: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O failure (including refusing to overwrite without `--force`).

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fedlora_core::adapters::serialize_set;
use fedlora_core::costmodel::{
    cost_report, flops_estimate, flora_fullft_crossover, replicate_cohort, write_reports_csv, CostReport,
};
use fedlora_core::fedsim::{
    compare_methods, layer_rank_report, published_adapters, run_experiment, threshold_sweep, write_compare_csv,
    write_rank_csv, write_rounds_csv, write_spectra_csv, write_sweep_csv, ExperimentConfig,
};
use fedlora_core::{CostScenario, Error, ErrorKind, Method, Result};

#[derive(Parser)]
#[command(name = "fedlora", version, about = "Federated LoRA aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "fedlora-out")]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the federated loop; writes rounds.csv, rounds.json, final_adapter.bin.
    Simulate,
    /// FLoRIST threshold sweep over cached client uploads; writes sweep.csv.
    Sweep,
    /// Per-layer FLoRIST ranks and spectra; writes ranks.csv, spectra.csv.
    RankAnalysis,
    /// Closed-form costs over a client-count grid; writes cost.csv, cost_summary.json.
    CostReport,
    /// Every method on heterogeneous and homogeneous cohorts; writes compare.csv.
    Compare,
}

impl Command {
    fn outputs(self) -> &'static [&'static str] {
        match self {
            Command::Simulate => &["rounds.csv", "rounds.json", "final_adapter.bin"],
            Command::Sweep => &["sweep.csv", "sweep.json"],
            Command::RankAnalysis => &["ranks.csv", "spectra.csv", "ranks.json"],
            Command::CostReport => &["cost.csv", "cost_summary.json"],
            Command::Compare => &["compare.csv", "compare.json"],
        }
    }
}

struct Output {
    dir: PathBuf,
    quiet: bool,
}

impl Output {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(io::Error::from)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::config("--config", format!("{} does not exist", path.display())));
            }
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_json(cfg: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg).map_err(io::Error::from)? + "\n")
}

/// Creates the output directory and refuses to clobber existing outputs.
/// An identical `effective_config.json` is not a conflict, so several
/// commands can share a directory.
fn prepare(dir: &Path, names: &[&str], config: &str, force: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    if force {
        return Ok(());
    }
    let mut existing: Vec<String> = names
        .iter()
        .filter(|n| dir.join(n).exists())
        .map(|n| n.to_string())
        .collect();
    let echoed = dir.join("effective_config.json");
    if echoed.exists() && fs::read_to_string(&echoed).ok().as_deref() != Some(config) {
        existing.push("effective_config.json".into());
    }
    if existing.is_empty() {
        Ok(())
    } else {
        Err(io::Error::new(
            io::ErrorKind::AlreadyExists,
            format!(
                "{} already present in {}; pass --force to overwrite",
                existing.join(", "),
                dir.display()
            ),
        )
        .into())
    }
}

fn simulate(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let outcome = run_experiment(cfg)?;
    write_rounds_csv(&outcome.logs, out.create("rounds.csv")?)?;
    out.json("rounds.json", &outcome.logs)?;
    let model = cfg.model_config()?;
    serialize_set(
        &published_adapters(&outcome.final_aggregate, &model)?,
        out.path("final_adapter.bin"),
    )?;
    let last = outcome.logs.last().expect("at least one round");
    out.say(format!(
        "method={} final_loss={:.6e} total_rank={} download_params={}",
        last.method,
        last.holdout_loss,
        last.layer_ranks.iter().sum::<usize>(),
        last.cost.download_params
    ));
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let taus = cfg.sweep.grid()?;
    let result = threshold_sweep(cfg, &taus)?;
    write_sweep_csv(&result.rows, out.create("sweep.csv")?)?;
    out.json("sweep.json", &result.rows)?;
    for row in &result.rows {
        out.say(format!(
            "tau={:.2} total_rank={} holdout_loss={:.6e}",
            row.tau, row.total_rank, row.holdout_loss
        ));
    }
    Ok(())
}

fn rank_analysis(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    if cfg.method != Method::Florist {
        log::warn!("rank analysis uses FLoRIST; ignoring method {}", cfg.method);
    }
    let cfg = ExperimentConfig {
        method: Method::Florist,
        ..cfg.clone()
    };
    let outcome = run_experiment(&cfg)?;
    let report = layer_rank_report(&outcome.final_aggregate, &cfg.model_config()?)?;
    write_rank_csv(&report, out.create("ranks.csv")?)?;
    write_spectra_csv(&report, out.create("spectra.csv")?)?;
    out.json("ranks.json", &report)?;
    out.say(format!(
        "tau={} total_rank={} over {} matrices",
        cfg.tau,
        report.rows.iter().map(|r| r.p).sum::<usize>(),
        report.rows.len()
    ));
    Ok(())
}

#[derive(Serialize)]
struct CostSummary {
    base_clients: usize,
    florist_ranks: Vec<usize>,
    /// Smallest K at which FLoRA's download exceeds full fine-tuning's.
    flora_fullft_crossover: Option<usize>,
    flexlora_to_florist_flops: f64,
    base: Vec<CostReport>,
}

fn cost(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let model = cfg.model_config()?;
    let clients = cfg.client_configs();
    let florist_ranks = match &cfg.cost.florist_ranks {
        Some(p) => p.clone(),
        None => {
            log::info!("deriving FLoRIST ranks from one simulated round");
            let one = ExperimentConfig {
                method: Method::Florist,
                rounds: 1,
                ..cfg.clone()
            };
            let outcome = run_experiment(&one)?;
            outcome.logs[0].layer_ranks.clone()
        }
    };
    if florist_ranks.len() != model.matrix_count() {
        return Err(Error::config(
            "cost.florist_ranks",
            format!(
                "{} ranks for {} adapted matrices",
                florist_ranks.len(),
                model.matrix_count()
            ),
        ));
    }
    let scenario = |method: Method, k: usize| -> Result<CostScenario> {
        let p = (method == Method::Florist).then(|| florist_ranks.clone());
        CostScenario::new(model.clone(), replicate_cohort(&clients, k), method, p)
    };

    let mut reports = Vec::new();
    for &k in &cfg.cost.client_counts {
        for method in Method::ALL {
            reports.push(cost_report(&scenario(method, k)?)?);
        }
    }
    write_reports_csv(&reports, out.create("cost.csv")?)?;

    let base: Vec<CostReport> = Method::ALL
        .iter()
        .map(|&m| cost_report(&scenario(m, clients.len())?))
        .collect::<Result<_>>()?;
    let flex = flops_estimate(&scenario(Method::FlexLora, clients.len())?)?;
    let florist = flops_estimate(&scenario(Method::Florist, clients.len())?)?;
    let summary = CostSummary {
        base_clients: clients.len(),
        flora_fullft_crossover: flora_fullft_crossover(
            &scenario(Method::Flora, clients.len())?,
            cfg.cost.max_crossover_clients,
        )?,
        flexlora_to_florist_flops: if florist > 0 {
            flex as f64 / florist as f64
        } else {
            f64::INFINITY
        },
        florist_ranks,
        base,
    };
    out.json("cost_summary.json", &summary)?;
    out.say(format!(
        "crossover_k={} flexlora_to_florist_flops={:.1}",
        summary
            .flora_fullft_crossover
            .map_or_else(|| "none".to_string(), |k| k.to_string()),
        summary.flexlora_to_florist_flops
    ));
    Ok(())
}

fn compare(cfg: &ExperimentConfig, out: &Output) -> Result<()> {
    let rows = compare_methods(cfg)?;
    write_compare_csv(&rows, out.create("compare.csv")?)?;
    out.json("compare.json", &rows)?;
    for r in &rows {
        out.say(format!(
            "{:<13} {:<9} loss={:.6e} total_rank={} download_params={}",
            r.cohort, r.method, r.holdout_loss, r.total_rank, r.download_params
        ));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let echoed = config_json(&cfg)?;
    prepare(&cli.common.out, cli.command.outputs(), &echoed, cli.common.force)?;
    let out = Output {
        dir: cli.common.out.clone(),
        quiet: cli.common.quiet,
    };
    fs::write(out.path("effective_config.json"), echoed)?;
    match cli.command {
        Command::Simulate => simulate(&cfg, &out),
        Command::Sweep => sweep(&cfg, &out),
        Command::RankAnalysis => rank_analysis(&cfg, &out),
        Command::CostReport => cost(&cfg, &out),
        Command::Compare => compare(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.common.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            })
        }
    }
}
