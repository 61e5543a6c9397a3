use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

use fedsim_core::cloud::{parse_client_sizes, FederationState};
use fedsim_core::data_io::{self, generate_synthetic, ClientDataset};
use fedsim_core::nets::Backbone;
use fedsim_core::profiler::{self, ProfileResult, ProfileTraining, Rank1Scorer};
use fedsim_core::{ExperimentConfig, ExperimentReport, RunOptions};

const CONFIG_KEYS: &str = "\
Config file keys (TOML, all optional; defaults shown):

  [train]
  local_epochs = 5           local epochs per round (the cap when pe is on)
  first_round_epochs = 5     epochs in a client's first round (default: local_epochs)
  batch_size = 16
  rounds = 20                training rounds
  clients_per_round = 8      clients selected each round
  num_clients = 8            must equal the number of [[data.clients]] entries
  learning_rate = 0.5
  embedding_dim = 16
  merge_percent = 0.05       merge percent when pc is off
  pe = false                 personalized epoch (early stop)
  pc = false                 personalized clustering (profiled merge schedule)
  pu = false                 personalized update (EMA of local and global)
  seed = 0
  layer_distance = \"squared\" \"squared\" or \"euclidean\"
  linkage = \"single\"         \"single\" or \"average\"

  [train.architecture]
  kind = \"linear\"            or kind = \"hidden\" with width = <int>

  [train.profiling]
  merge_percent = 0.08
  rounds = 12
  first_epochs = 5
  rest_epochs = 1
  selection = \"shared\"       \"shared\" or \"per_client\"

  [data]
  input_dim = 32
  noise = 0.6
  spread = 0.8
  gallery_per_identity = 2
  [[data.clients]]           one table per client (default: 8 clients, 64..512 samples)
  samples = 64
  identities = 8

Log verbosity follows RUST_LOG (default: info).";

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Federated unsupervised person re-identification simulator"
)]
#[command(after_long_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the federated protocol and write a report.
    #[command(after_long_help = CONFIG_KEYS)]
    Run(RunArgs),
    /// Train every client alone, with no aggregation.
    #[command(after_long_help = CONFIG_KEYS)]
    Standalone(RunArgs),
    /// Only run the profiling pass and write the derived merge schedules.
    #[command(after_long_help = CONFIG_KEYS)]
    Profile(RunArgs),
    /// Validate a report file and print its summary.
    Report {
        path: PathBuf,
        /// Also export per-round metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config file; see the key list below.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Enable personalized epochs.
    #[arg(long)]
    pe: bool,
    /// Enable personalized clustering.
    #[arg(long)]
    pc: bool,
    /// Enable personalized update.
    #[arg(long)]
    pu: bool,
    /// Output directory (default: runs/<command>-<config hash>).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Client sizes as samples:identities pairs, e.g. 64:8,512:32.
    #[arg(long, value_name = "SPEC")]
    clients: Option<String>,
    #[arg(long, value_name = "INT")]
    first_round_epochs: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Standalone(args) => cmd_standalone(&args),
        Command::Profile(args) => cmd_profile(&args),
        Command::Report { path, csv } => cmd_report(&path, csv.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// File values, then command-line overrides.
fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text, &path.display().to_string())?
        }
        None => ExperimentConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(seed) = args.seed {
        t.seed = seed;
    }
    t.pe |= args.pe;
    t.pc |= args.pc;
    t.pu |= args.pu;
    if let Some(e) = args.first_round_epochs {
        t.first_round_epochs = Some(e);
    }
    if let Some(spec) = &args.clients {
        cfg.data.clients = parse_client_sizes(spec)?;
        t.num_clients = cfg.data.clients.len();
        t.clients_per_round = t.clients_per_round.min(t.num_clients);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(args: &RunArgs, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => {
            let digest = Sha256::digest(cfg.to_toml().as_bytes());
            let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
            PathBuf::from("runs").join(format!("{command}-{hex}"))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    Ok(dir)
}

fn datasets(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    Ok(generate_synthetic(&cfg.data.client_specs(cfg.train.seed))?)
}

fn write_csv(path: &Path, reports: &[ExperimentReport]) -> Result<()> {
    let rounds: Vec<_> = reports.iter().flat_map(|r| r.rounds.iter().cloned()).collect();
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    data_io::write_metrics_csv(BufWriter::new(file), &rounds)?;
    Ok(())
}

/// Reloads a written report and checks it against the in-memory one.
fn verify_report(path: &Path, written: &ExperimentReport) -> Result<()> {
    let back = data_io::load_report(path)?;
    if let Err(msg) = back.validate() {
        bail!("{} failed validation: {msg}", path.display());
    }
    if &back != written {
        bail!("{} does not round-trip", path.display());
    }
    Ok(())
}

fn print_summary(reports: &[ExperimentReport]) {
    println!(
        "{:>6}  {:>7}  {:>8}  {:>8}  {:>8}",
        "client", "rank-1", "local", "global", "mAP"
    );
    for r in reports {
        for b in &r.summary.best {
            let global = b.global_rank1.map_or("-".to_string(), |g| format!("{g:.4}"));
            println!(
                "{:>6}  {:>7.4}  {:>8.4}  {:>8}  {:>8.4}",
                b.client_id, b.rank1, b.local_rank1, global, b.local_map
            );
        }
    }
    let training: usize = reports.iter().map(|r| r.summary.training_epochs).sum();
    let profiling: usize = reports.iter().map(|r| r.summary.profiling_epochs).sum();
    println!(
        "total epochs: {} (training {training}, profiling {profiling})",
        training + profiling
    );
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = output_dir(args, "run", &cfg)?;
    info!("writing to {}", dir.display());
    let outcome = FederationState::new(&cfg.train, datasets(&cfg)?, RunOptions::default())?.run()?;
    let report = outcome.report;

    let report_path = dir.join("report.jsonl");
    data_io::save_report(&report_path, &report)?;
    write_csv(&dir.join("metrics.csv"), std::slice::from_ref(&report))?;
    if !report.profiles.is_empty() {
        data_io::save_profiles(&dir.join("profile.json"), &report.profiles)?;
    }
    data_io::write_params(&dir.join("global.params"), &outcome.global)?;
    verify_report(&report_path, &report)?;

    print_summary(std::slice::from_ref(&report));
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_standalone(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = output_dir(args, "standalone", &cfg)?;
    info!("writing to {}", dir.display());
    let reports = fedsim_core::run_standalone(&cfg.train, &datasets(&cfg)?)?;

    let mut profiles: Vec<ProfileResult> = Vec::new();
    for r in &reports {
        let client = r.summary.best.first().map_or(0, |b| b.client_id);
        let path = dir.join(format!("report-client{client}.jsonl"));
        data_io::save_report(&path, r)?;
        verify_report(&path, r)?;
        profiles.extend(r.profiles.iter().cloned());
    }
    write_csv(&dir.join("metrics.csv"), &reports)?;
    if !profiles.is_empty() {
        data_io::save_profiles(&dir.join("profile.json"), &profiles)?;
    }

    print_summary(&reports);
    println!("reports: {}", dir.display());
    Ok(())
}

fn cmd_profile(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = output_dir(args, "profile", &cfg)?;
    let t = &cfg.train;
    let clients = datasets(&cfg)?;
    let init = Backbone::init(t.architecture, cfg.data.input_dim, t.embedding_dim, t.seed)?;
    let training = ProfileTraining {
        learning_rate: t.learning_rate,
        batch_size: t.batch_size,
        linkage: t.linkage,
        seed: t.seed,
    };
    let mut profiles = profiler::profile_federation(&clients, &t.profiling, &init, &training, &Rank1Scorer, t.rounds)?;
    profiles.sort_by_key(|p| p.client_id);

    let path = dir.join("profile.json");
    data_io::save_profiles(&path, &profiles)?;
    if data_io::load_profiles(&path)? != profiles {
        bail!("{} does not round-trip", path.display());
    }

    println!(
        "{:>6}  {:>7}  {:>9}  {:>5}  {:>8}  {:>10}  {:>6}",
        "client", "samples", "M_profile", "m_k", "mp_k", "best_round", "epochs"
    );
    for (p, c) in profiles.iter().zip(&clients) {
        println!(
            "{:>6}  {:>7}  {:>9}  {:>5}  {:>8.5}  {:>10}  {:>6}",
            p.client_id,
            c.len(),
            p.m_profile,
            p.m_k,
            p.mp_k,
            p.best_round,
            p.epochs_spent
        );
    }
    let total: usize = profiles.iter().map(|p| p.epochs_spent).sum();
    println!("total profiling epochs: {total}");
    println!("profiles: {}", path.display());
    Ok(())
}

fn cmd_report(path: &Path, csv: Option<&Path>) -> Result<()> {
    let report = data_io::load_report(path)?;
    if let Err(msg) = report.validate() {
        bail!("{} failed validation: {msg}", path.display());
    }
    if let Some(out) = csv {
        write_csv(out, std::slice::from_ref(&report))?;
    }
    let t = &report.config;
    println!(
        "{:?} run: {} clients, {} rounds, pe={} pc={} pu={} seed={}",
        report.mode, t.num_clients, t.rounds, t.pe, t.pc, t.pu, t.seed
    );
    print_summary(std::slice::from_ref(&report));
    Ok(())
}
