use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedlm::bounds::{BoundParams, BoundReport};
use fedlm::fcrag::DEFAULT_S_MAX;
use fedlm::harness::{self, ExperimentId, ExperimentSpec};
use fedlm::Error;

#[derive(Parser)]
#[command(name = "fedlm", version, about = "Bandwidth-limited federated language modeling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its JSON summary.
    Run {
        /// One of e1, e1_5, e2, quant_check.
        experiment: String,
        #[arg(long)]
        seeds: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// TOML overrides applied on top of the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Published grids and seed counts instead of the reduced CI grids.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        master_seed: Option<u64>,
    },
    /// Evaluate every bound for one parameter tuple.
    Bounds(BoundArgs),
    /// Run the quantizer moment and bandwidth checks.
    QuantCheck {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        full: bool,
    },
    /// Check an experiment JSON file against the schema.
    Validate { path: PathBuf },
}

#[derive(clap::Args)]
struct BoundArgs {
    #[arg(long = "K", default_value_t = 4)]
    k: u64,
    #[arg(long = "n", default_value_t = 3000)]
    n: u64,
    #[arg(long = "m", default_value_t = 3000)]
    m: u64,
    #[arg(long = "V", default_value_t = 256)]
    vocab: u64,
    /// Defaults to V(V-1).
    #[arg(long = "d")]
    d: Option<u64>,
    /// Bits per coordinate.
    #[arg(long, default_value_t = 8)]
    bits: u64,
    #[arg(long, default_value_t = 20.0)]
    clip: f64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    #[arg(long, default_value_t = 1.0)]
    c2: f64,
    #[arg(long, default_value_t = 0.0)]
    drift_term: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 3000)]
    n_cal: u64,
    /// Per-node score bits; one value applies to every node.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    score_bits: Vec<u32>,
    #[arg(long, default_value_t = 8)]
    grid_bits: u32,
    #[arg(long, default_value_t = DEFAULT_S_MAX)]
    s_max: f64,
    #[arg(long, default_value_t = 1.0)]
    f_max: f64,
    #[arg(long, default_value_t = 1.0)]
    c_quantile: f64,
    #[arg(long, default_value_t = 0.0)]
    kl_bar: f64,
}

impl BoundArgs {
    fn params(&self) -> BoundParams {
        let score_bits = if self.score_bits.len() == 1 {
            vec![self.score_bits[0]; self.k as usize]
        } else {
            self.score_bits.clone()
        };
        BoundParams {
            k: self.k,
            n: self.n,
            m: self.m,
            vocab: self.vocab,
            d: self.d.unwrap_or(self.vocab * self.vocab.saturating_sub(1)),
            probe_bits: self.vocab * self.bits,
            rho: self.rho,
            delta: self.delta,
            c1: self.c1,
            c2: self.c2,
            clip: self.clip,
            drift_term: self.drift_term,
            alpha: self.alpha,
            n_cal: self.n_cal,
            score_bits,
            grid_bits: self.grid_bits,
            s_max: self.s_max,
            f_max: self.f_max,
            c_quantile: self.c_quantile,
            kl_bar: self.kl_bar,
            ..BoundParams::default()
        }
    }
}

fn write_output(json: &str, out: Option<&PathBuf>) -> fedlm::Result<()> {
    match out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run_experiment(spec: ExperimentSpec, out: Option<&PathBuf>) -> fedlm::Result<()> {
    let result = harness::run(&spec)?;
    write_output(&result.to_json()?, out)?;
    let failed: Vec<String> = result
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.name.clone())
        .chain(result.sweeps.iter().flat_map(|s| {
            s.points
                .iter()
                .filter(|p| !p.bound_holds)
                .map(move |p| format!("{}@{}", s.name, p.axis_value))
        }))
        .collect();
    eprintln!(
        "{}: {} sweeps, {:.1}s, {} failing checks{}",
        result.experiment,
        result.sweeps.len(),
        result.wall_time_secs,
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", failed.join(", "))
        }
    );
    Ok(())
}

fn dispatch(cli: Cli) -> fedlm::Result<()> {
    harness::init_threads()?;
    match cli.command {
        Command::Run {
            experiment,
            seeds,
            out,
            config,
            full,
            master_seed,
        } => {
            let id: ExperimentId = experiment.parse()?;
            let mut spec = ExperimentSpec::new(id, full);
            if let Some(path) = config {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                spec.apply_toml(&text)?;
            }
            if let Some(s) = seeds {
                spec.seeds = s;
            }
            if let Some(m) = master_seed {
                spec.master_seed = m;
            }
            run_experiment(spec, out.as_ref())
        }
        Command::Bounds(args) => {
            let report = BoundReport::evaluate(&args.params())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::QuantCheck { out, full } => {
            run_experiment(ExperimentSpec::new(ExperimentId::QuantCheck, full), out.as_ref())
        }
        Command::Validate { path } => {
            let text = std::fs::read_to_string(&path)?;
            let r = harness::validate_json(&text)?;
            println!(
                "{}: valid schema v{} ({}, {} sweeps, {} seeds)",
                path.display(),
                r.schema_version,
                r.experiment,
                r.sweeps.len(),
                r.seeds
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
            eprintln!("fedlm: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("fedlm: {e}");
            ExitCode::FAILURE
        }
    }
}
