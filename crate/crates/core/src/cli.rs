//! Command-line entry points. Every command reads one config file and writes
//! CSV files (9 significant digits, trailing newline) into an output
//! directory.
//!
//! | command         | files                                                   |
//! |-----------------|---------------------------------------------------------|
//! | `run`           | `metrics.csv`, `memory_report.csv`, `diagnostics.csv`, `config_resolved.toml` |
//! | `memory-report` | `memory_sweep.csv`                                      |
//! | `toa-bench`     | `toa_bench.csv`                                         |
//! | `partition`     | `partition_manifest.csv`                                |

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::costmodel::{self, MemoryMode, ModelProfile};
use crate::data::PartitionedDataset;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::federation::{self, ClientRecord, FederatedRun, Strategy};
use crate::nn::Model;
use crate::report::{Cell, Table};
use crate::toa;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const METRICS_COLUMNS: &[&str] = &["round", "accuracy", "loss", "bytes_down", "bytes_up", "flops", "joules_cum"];
pub const MEMORY_REPORT_COLUMNS: &[&str] = &[
    "client_id", "l_k", "mode", "mem_bytes", "flops_f", "flops_b", "bytes_down", "bytes_up", "joules",
];
pub const DIAGNOSTICS_COLUMNS: &[&str] = &["l_k", "L_hat", "gamma_hat", "D_hat", "epsilon", "regime"];
pub const MEMORY_SWEEP_COLUMNS: &[&str] = &["l_k", "ordered_bytes", "random_worst_case_bytes"];
pub const TOA_BENCH_COLUMNS: &[&str] = &[
    "method", "s", "bits", "accuracy", "bytes_down_total", "frozen_bytes", "budget_gap",
];

#[derive(Debug, Parser)]
#[command(name = "fedolf", version, about = "Federated learning with ordered layer freezing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write per-round metrics, per-client costs and diagnostics.
    Run(CommonArgs),
    /// Theoretical memory for every freezing level; no training.
    MemoryReport(CommonArgs),
    /// Accuracy versus downstream bytes across the sparsification grid, with
    /// byte-matched QSGD baselines.
    ToaBench(CommonArgs),
    /// Write the client partition only.
    Partition(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME }
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    let (Command::Run(a) | Command::MemoryReport(a) | Command::ToaBench(a) | Command::Partition(a)) = cmd;
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match cmd {
        Command::Run(_) => cmd_run(&cfg, &base, &out).map(|_| ()),
        Command::MemoryReport(_) => cmd_memory_report(&cfg, &out).map(|_| ()),
        Command::ToaBench(_) => cmd_toa_bench(&cfg, &base, &out).map(|_| ()),
        Command::Partition(_) => cmd_partition(&cfg, &base, &out).map(|_| ()),
    }
}

fn prepare(cfg: &ExperimentConfig, base: &Path) -> Result<(PartitionedDataset, Vec<Vec<usize>>)> {
    let full = cfg.dataset(base)?;
    cfg.partition(&full)
}

pub fn metrics_table(run: &FederatedRun, cfg: &ExperimentConfig) -> Table {
    let mut t = Table::new(METRICS_COLUMNS);
    let energy = costmodel::energy(&run.history.ledger, &cfg.energy);
    for (r, rec) in run.history.rounds.iter().enumerate() {
        let (mut down, mut up, mut flops) = (0u64, 0u64, 0u64);
        for c in run.history.ledger.round(r) {
            down += c.bytes_down;
            up += c.bytes_up;
            flops += c.flops();
        }
        let cum = energy.get(r).map_or(0.0, |e| e.cumulative);
        t.push(vec![
            rec.round.into(),
            rec.accuracy.into(),
            rec.loss.into(),
            down.into(),
            up.into(),
            flops.into(),
            cum.into(),
        ]);
    }
    t
}

/// Per-client totals over the run. Memory is the peak over rounds; clients
/// never sampled get the analytic figure for their level.
pub fn memory_report_table(run: &FederatedRun, cfg: &ExperimentConfig) -> Result<Table> {
    let profile = ModelProfile::from_model(&run.initial);
    let batch = cfg.federation.batch_size;
    let strategy = cfg.federation.strategy;
    let mode = match strategy {
        Strategy::RandomFreeze => MemoryMode::RandomWorstCase,
        _ => MemoryMode::Ordered,
    };
    let mut t = Table::new(MEMORY_REPORT_COLUMNS);
    for (id, &l) in run.levels.iter().enumerate() {
        let entries: Vec<_> = run.history.ledger.entries.iter().filter(|c| c.client_id == id).collect();
        let mem = match entries.iter().map(|c| c.mem_bytes).max() {
            Some(m) => m,
            None => costmodel::theoretical_memory(&profile, l, batch, &mode)?,
        };
        let sum = |f: fn(&costmodel::ClientCost) -> u64| entries.iter().map(|c| f(c)).sum::<u64>();
        let joules: f64 = entries.iter().map(|c| c.joules(&cfg.energy)).sum();
        t.push(vec![
            id.into(),
            l.into(),
            strategy.name().into(),
            mem.into(),
            sum(|c| c.flops_forward).into(),
            sum(|c| c.flops_backward).into(),
            sum(|c| c.bytes_down).into(),
            sum(|c| c.bytes_up).into(),
            joules.into(),
        ]);
    }
    Ok(t)
}

/// Convergence constants at the final global model, one row per distinct
/// freezing level.
pub fn diagnostics_table(run: &FederatedRun, data: &PartitionedDataset, cfg: &ExperimentConfig) -> Result<Table> {
    let model: &Model = &run.global;
    let records: Vec<ClientRecord> = data
        .shards
        .iter()
        .enumerate()
        .map(|(id, s)| ClientRecord::new(id, s.clone(), run.levels[id]))
        .collect();
    let n = cfg.diagnostics.l_samples.min(data.holdout.len());
    let probe = data.holdout.subset(&(0..n).collect::<Vec<_>>());
    let l_hat = diagnostics::estimate_l(model, &probe, cfg.diagnostics.l_trials, cfg.seed)?;
    let gamma_hat = if records.len() >= 2 {
        diagnostics::estimate_gamma(&records, model)?
    } else {
        0.0
    };
    let mut levels: Vec<usize> = run.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let mut t = Table::new(DIAGNOSTICS_COLUMNS);
    for l in levels {
        let mut d_hat = 0.0f64;
        for r in &records {
            d_hat = d_hat.max(diagnostics::gradient_divergence(model, &r.shard, l)?);
        }
        let (eps, regime) = diagnostics::epsilon_bounds(f64::from(cfg.federation.learning_rate), l_hat, gamma_hat, d_hat);
        t.push(vec![
            l.into(),
            l_hat.into(),
            gamma_hat.into(),
            d_hat.into(),
            eps.map_or(Cell::Text(String::new()), Cell::Float),
            regime.name().into(),
        ]);
    }
    Ok(t)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Partitions the data and trains; returns the run with the partition it used.
pub fn execute(cfg: &ExperimentConfig, base: &Path) -> Result<(FederatedRun, PartitionedDataset)> {
    let (data, _) = prepare(cfg, base)?;
    let arch = cfg.architecture()?;
    let run = federation::run_federated(&cfg.fed_config()?, &data, &arch)?;
    Ok((run, data))
}

/// Writes every `run` output file into `out`.
pub fn write_run_outputs(cfg: &ExperimentConfig, run: &FederatedRun, data: &PartitionedDataset, out: &Path) -> Result<()> {
    write_text(&out.join("config_resolved.toml"), &cfg.resolved_toml())?;
    metrics_table(run, cfg).write(&out.join("metrics.csv"))?;
    memory_report_table(run, cfg)?.write(&out.join("memory_report.csv"))?;
    if cfg.diagnostics.enabled {
        diagnostics_table(run, data, cfg)?.write(&out.join("diagnostics.csv"))?;
    }
    Ok(())
}

pub fn cmd_run(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<FederatedRun> {
    let (run, data) = execute(cfg, base)?;
    write_run_outputs(cfg, &run, &data, out)?;
    Ok(run)
}

pub fn memory_sweep_table(cfg: &ExperimentConfig) -> Result<Table> {
    let profile = ModelProfile::from_arch(&cfg.architecture()?)?;
    let batch = cfg.federation.batch_size;
    let mut t = Table::new(MEMORY_SWEEP_COLUMNS);
    for l in 0..profile.len() {
        t.push(vec![
            l.into(),
            costmodel::theoretical_memory(&profile, l, batch, &MemoryMode::Ordered)?.into(),
            costmodel::theoretical_memory(&profile, l, batch, &MemoryMode::RandomWorstCase)?.into(),
        ]);
    }
    Ok(t)
}

pub fn cmd_memory_report(cfg: &ExperimentConfig, out: &Path) -> Result<Table> {
    let t = memory_sweep_table(cfg)?;
    t.write(&out.join("memory_sweep.csv"))?;
    Ok(t)
}

/// Bytes of frozen stacks actually compressed (clients with two or more
/// frozen layers) and of all frozen stacks sent.
fn frozen_bytes(run: &FederatedRun) -> (u64, u64) {
    let mut compressed = 0;
    let mut all = 0;
    for c in &run.history.ledger.entries {
        let f = c.bytes_down - c.bytes_up;
        all += f;
        if c.l_k >= 2 {
            compressed += f;
        }
    }
    (compressed, all)
}

/// QSGD payload of a frozen stack of the given layers.
fn qsgd_stack_bytes(profile: &ModelProfile, l: usize, bits: u32) -> u64 {
    profile.kinds[..l]
        .iter()
        .flat_map(|k| k.param_shapes())
        .map(|s| toa::qsgd_payload_bytes(s.iter().product(), bits) as u64)
        .sum()
}

/// Bit width whose compressed frozen-stack traffic is closest to `target`,
/// for the same sequence of client levels.
pub fn match_qsgd_bits(profile: &ModelProfile, levels: &[usize], target: u64) -> (u32, f64) {
    let mut best = (16, f64::INFINITY);
    for bits in 1..=16 {
        let bytes: u64 = levels.iter().filter(|&&l| l >= 2).map(|&l| qsgd_stack_bytes(profile, l, bits)).sum();
        let gap = (bytes as f64 - target as f64) / target as f64;
        if gap.abs() < best.1.abs() {
            best = (bits, gap);
        }
    }
    best
}

pub fn cmd_toa_bench(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<Table> {
    let (data, _) = prepare(cfg, base)?;
    let arch = cfg.architecture()?;
    let profile = ModelProfile::from_arch(&arch)?;
    let mut base_fed = cfg.fed_config()?;
    base_fed.toa = None;
    base_fed.qsgd_bits = None;
    let toa_seed = cfg.toa.as_ref().and_then(|t| t.seed).unwrap_or(cfg.seed);

    let mut t = Table::new(TOA_BENCH_COLUMNS);
    let total_down = |r: &FederatedRun| r.history.ledger.entries.iter().map(|c| c.bytes_down).sum::<u64>();
    let acc = |r: &FederatedRun| r.history.final_accuracy().unwrap_or(f64::NAN);
    let blank = || Cell::Text(String::new());

    let plain = federation::run_federated(&base_fed, &data, &arch)?;
    t.push(vec![
        "none".into(),
        blank(),
        32u64.into(),
        acc(&plain).into(),
        total_down(&plain).into(),
        frozen_bytes(&plain).1.into(),
        blank(),
    ]);
    for &s in &cfg.bench.s_grid {
        let mut fed = base_fed.clone();
        fed.toa = Some(toa::ToaConfig::new(s, toa_seed)?);
        let run = federation::run_federated(&fed, &data, &arch)?;
        let (compressed, all) = frozen_bytes(&run);
        t.push(vec![
            "toa".into(),
            s.into(),
            32u64.into(),
            acc(&run).into(),
            total_down(&run).into(),
            all.into(),
            blank(),
        ]);
        if s >= 1.0 || compressed == 0 {
            continue;
        }
        let levels: Vec<usize> = run.history.ledger.entries.iter().map(|c| c.l_k).collect();
        let (bits, _) = match_qsgd_bits(&profile, &levels, compressed);
        let mut fed = base_fed.clone();
        fed.qsgd_bits = Some(bits);
        let q = federation::run_federated(&fed, &data, &arch)?;
        let (q_compressed, q_all) = frozen_bytes(&q);
        let gap = (q_compressed as f64 - compressed as f64) / compressed as f64;
        if gap.abs() > cfg.bench.budget_tolerance {
            eprintln!(
                "note: no QSGD width within {:.0}% of the s = {s} budget (closest: {bits} bits, gap {gap:+.3})",
                100.0 * cfg.bench.budget_tolerance
            );
        }
        t.push(vec![
            "qsgd".into(),
            s.into(),
            u64::from(bits).into(),
            acc(&q).into(),
            total_down(&q).into(),
            q_all.into(),
            gap.into(),
        ]);
    }
    t.write(&out.join("toa_bench.csv"))?;
    Ok(t)
}

pub fn cmd_partition(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<Table> {
    let (_, idx) = prepare(cfg, base)?;
    let mut t = Table::new(&["client_id", "sample_index"]);
    for (client, ids) in idx.iter().enumerate() {
        for &i in ids {
            t.push(vec![client.into(), i.into()]);
        }
    }
    t.write(&out.join("partition_manifest.csv"))?;
    Ok(t)
}
