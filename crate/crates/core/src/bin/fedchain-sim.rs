use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedchain::chain::{export_csv, import_unverified, restore_from_metadata, verify_chain, ConsensusKind};
use fedchain::sim::{run_state, write_outputs, DataSource, SimConfig, SimState};
use fedchain::{Error, Result};

#[derive(Parser)]
#[command(name = "fedchain-sim", version, about = "Blockchain-backed federated learning simulator")]
struct Cli {
    /// Log every round (repeat for phase-level logs).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a simulation and write metrics and chain exports.
    Run(Box<RunArgs>),
    /// Verify exported chains.
    Verify {
        #[arg(long)]
        chain_dir: PathBuf,
        /// Require at least this PoW difficulty instead of trusting the genesis block.
        #[arg(long)]
        pow_bits: Option<u32>,
    },
    /// Rebuild `chain.csv` from the per-block metadata files and verify the result.
    Restore {
        #[arg(long)]
        chain_dir: PathBuf,
        /// Write the restored export here instead of in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    roster: Option<PathBuf>,
    /// CMAPSS training file.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Number of synthetic rows.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dp_sigma: Option<f64>,
    #[arg(long)]
    dp_delta: Option<f64>,
    #[arg(long)]
    outlier_sigma: Option<f64>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
    #[arg(long)]
    consensus: Option<ConsensusKind>,
    #[arg(long)]
    pow_bits: Option<u32>,
    #[arg(long)]
    poet_mean_ms: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    export: PathBuf,
    /// Resume from a previous run's `chains/` directory.
    #[arg(long)]
    restore: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(p) => SimConfig::load(p)?,
            None => SimConfig::default(),
        };
        macro_rules! over {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        over! {
            clients => cfg.n_clients,
            rounds => cfg.n_rounds,
            seed => cfg.seed,
            epochs => cfg.train.epochs,
            lr => cfg.train.lr,
            dp_sigma => cfg.dp_sigma,
            dp_delta => cfg.dp_delta,
            outlier_sigma => cfg.outlier_sigma,
            kmeans_iters => cfg.kmeans_iters,
            consensus => cfg.consensus,
            pow_bits => cfg.pow_bits,
            poet_mean_ms => cfg.poet_mean_ms,
        }
        if let Some(r) = &self.roster {
            cfg.roster = Some(r.clone());
        }
        if let Some(p) = &self.data {
            cfg.data = DataSource::Turbofan { path: p.clone() };
        }
        if let Some(rows) = self.synthetic {
            cfg.data = DataSource::Synthetic { rows };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn chain_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("block-0.txt").exists() || dir.join("chain.csv").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.into(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::CorruptExport(format!("no chains under {}", dir.display())));
    }
    Ok(out)
}

fn run(args: RunArgs) -> Result<bool> {
    let cfg = args.config()?;
    let mut state = SimState::new(cfg)?;
    if let Some(dir) = &args.restore {
        state.restore_chains(dir)?;
        eprintln!("resuming after round {} from {}", state.round(), dir.display());
    }
    let outcome = run_state(state)?;
    write_outputs(&outcome, &args.export)?;
    let last = outcome.reports.last();
    println!(
        "{} rounds{}; final loss {}; outputs in {}",
        outcome.reports.len(),
        if outcome.converged { " (converged)" } else { "" },
        last.map_or(f64::NAN, |r| r.global_loss),
        args.export.display()
    );
    Ok(true)
}

fn verify_one(dir: &Path, pow_bits: Option<u32>) -> Result<usize> {
    let chain = import_unverified(dir)?;
    verify_chain(&chain)?;
    if let Some(min) = pow_bits {
        let p = chain.policy();
        if p.consensus == ConsensusKind::Pow && p.pow_bits < min {
            return Err(Error::InvalidArgument(format!("difficulty {} below required {min}", p.pow_bits)));
        }
    }
    Ok(chain.len())
}

fn verify(dir: &Path, pow_bits: Option<u32>) -> Result<bool> {
    let mut ok = true;
    for d in chain_dirs(dir)? {
        match verify_one(&d, pow_bits) {
            Ok(n) => println!("{}: ok ({n} blocks)", d.display()),
            Err(e) => {
                ok = false;
                println!("{}: FAILED: {e}", d.display());
            }
        }
    }
    Ok(ok)
}

fn restore(dir: &Path, out: Option<&Path>) -> Result<bool> {
    for d in chain_dirs(dir)? {
        let chain = restore_from_metadata(&d)?;
        let target = match out {
            Some(o) if d != dir => o.join(d.file_name().unwrap_or_default()),
            Some(o) => o.to_path_buf(),
            None => d.clone(),
        };
        export_csv(&chain, &target)?;
        println!("{}: restored {} blocks to {}", d.display(), chain.len(), target.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match cli.cmd {
        Cmd::Run(args) => run(*args),
        Cmd::Verify { chain_dir, pow_bits } => verify(&chain_dir, pow_bits),
        Cmd::Restore { chain_dir, out } => restore(&chain_dir, out.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
