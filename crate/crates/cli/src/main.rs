//! `dllm-sim`: drive the diffusion-LLM serving simulator from the shell.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dllm_sim_core::harness::{
    ablation_csv, event_log_csv, gen_burst, gen_poisson, metrics_csv, parse_config, parse_trace,
    run_ablation, validate_against_config, write_trace, LengthSpec, TraceRecord,
};
use dllm_sim_core::membudget::{
    kv_pool_capacity, profile_peak_activation, profile_peak_activation_monolithic, MemError,
};
use dllm_sim_core::simexec::verify::{run_numeric_verify_many, VerifyDims};
use dllm_sim_core::{run_sim, CostModel, LogitMode, SchedMode, ServeConfig, SimOptions};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const SEED_ENV: &str = "DLLM_SIM_SEED";

#[derive(Parser)]
#[command(
    name = "dllm-sim",
    version,
    about = "Serving simulator for block-diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation over a trace and write events + metrics CSVs.
    Simulate(SimulateArgs),
    /// Generate a synthetic arrival trace.
    Gen(GenArgs),
    /// Run the numeric kernel verification loop.
    Verify(VerifyArgs),
    /// Run the feature-ablation ladder over a trace.
    Ablate(AblateArgs),
    /// Print the memory plan for a configuration.
    Plan(PlanArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Multiplexed,
    Static,
}

impl From<ModeArg> for SchedMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Multiplexed => SchedMode::PhaseMultiplexed,
            ModeArg::Static => SchedMode::RequestLevelStatic,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "multiplexed")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit nonzero if any invariant violation or unschedulable request
    /// occurred.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(subcommand)]
    shape: GenShape,
}

#[derive(Args)]
struct LengthArgs {
    #[arg(long, default_value_t = 100)]
    prompt_mean: u32,
    #[arg(long, default_value_t = 0)]
    prompt_spread: u32,
    #[arg(long, default_value_t = 256)]
    gen_len: u32,
    #[arg(long, default_value_t = 32)]
    block_size: u32,
}

#[derive(Subcommand)]
enum GenShape {
    /// Poisson arrivals at a fixed rate.
    Poisson {
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[command(flatten)]
        lengths: LengthArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Alternating base/burst Poisson segments.
    Burst {
        #[arg(long)]
        base_rate: f64,
        #[arg(long)]
        burst_rate: f64,
        /// Seconds of base-rate traffic before each burst.
        #[arg(long, default_value_t = 20.0)]
        burst_every: f64,
        /// Seconds each burst lasts.
        #[arg(long, default_value_t = 5.0)]
        burst_len: f64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[command(flatten)]
        lengths: LengthArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 50)]
    seeds: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Batch size of the monolithic reference reservation.
    #[arg(long, default_value_t = 16)]
    mono_batch: u64,
    /// Sequence length of the monolithic reference reservation.
    #[arg(long, default_value_t = 2048)]
    mono_seq: u64,
}

fn load_config(path: &Option<PathBuf>) -> Result<ServeConfig> {
    match path {
        None => Ok(ServeConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn load_trace(path: &Path, cfg: &ServeConfig) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = parse_trace(&text).with_context(|| format!("parsing {}", path.display()))?;
    validate_against_config(&records, cfg)
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(records)
}

fn env_seed_override(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse::<u64>()
            .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got `{v}`")),
        Err(_) => Ok(seed),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    let trace = load_trace(&args.trace, &cfg)?;
    let seed = env_seed_override(args.seed)?;
    let opts = SimOptions {
        mode: args.mode.into(),
        logit_mode: LogitMode::ActiveBlock,
        seed,
    };
    let result = run_sim(&trace, &cfg, &CostModel::default_preset(), opts)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("events.csv"), event_log_csv(&result.events))?;
    match &result.metrics {
        Some(m) => {
            fs::write(
                args.out.join("metrics.csv"),
                metrics_csv(m, seed, &result.plan),
            )?;
            println!("requests finished:  {}", m.per_request.len());
            println!("throughput:         {:.2} tok/s", m.throughput);
            println!("mean latency:       {:.2} s", m.latency_mean);
            println!("latency std:        {:.2} s", m.latency_std);
            println!("tail span:          {:.2} s", m.tail_span);
        }
        None => println!("no request finished; no metrics written"),
    }
    println!("batches executed:   {}", result.batches);
    println!("kv pool slots:      {}", result.plan.kv_token_slots);
    if !result.unschedulable.is_empty() {
        println!("unschedulable requests:");
        for (id, why) in &result.unschedulable {
            println!("  {id}: {why}");
        }
    }
    for v in &result.violations {
        eprintln!("invariant violation: {v}");
    }
    let failed = !result.violations.is_empty() || !result.unschedulable.is_empty();
    if args.strict && failed {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode> {
    let (records, out) = match args.shape {
        GenShape::Poisson {
            rate,
            count,
            lengths,
            out,
            seed,
        } => {
            if rate <= 0.0 {
                bail!("--rate must be positive");
            }
            let seed = env_seed_override(seed)?;
            let spec = LengthSpec {
                prompt_mean: lengths.prompt_mean,
                prompt_spread: lengths.prompt_spread,
                gen_length: lengths.gen_len,
                block_size: lengths.block_size,
            };
            (gen_poisson(rate, count, &spec, seed), out)
        }
        GenShape::Burst {
            base_rate,
            burst_rate,
            burst_every,
            burst_len,
            count,
            lengths,
            out,
            seed,
        } => {
            if base_rate <= 0.0 || burst_rate <= 0.0 {
                bail!("rates must be positive");
            }
            let seed = env_seed_override(seed)?;
            let spec = LengthSpec {
                prompt_mean: lengths.prompt_mean,
                prompt_spread: lengths.prompt_spread,
                gen_length: lengths.gen_len,
                block_size: lengths.block_size,
            };
            (
                gen_burst(
                    base_rate,
                    burst_rate,
                    burst_every,
                    burst_len,
                    count,
                    &spec,
                    seed,
                ),
                out,
            )
        }
    };
    fs::write(&out, write_trace(&records)).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let report = run_numeric_verify_many(args.seeds, &VerifyDims::default())
        .map_err(|e| anyhow::anyhow!("verification setup failed: {e}"))?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    let trace = load_trace(&args.trace, &cfg)?;
    let report = run_ablation(&trace, &cfg, &CostModel::default_preset())?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("ablation.csv"), ablation_csv(&report))?;
    println!(
        "{:<24} {:>12} {:>10} {:>12} {:>12}",
        "arm", "tok/s", "relative", "mean lat s", "tail span s"
    );
    for a in &report.arms {
        println!(
            "{:<24} {:>12.2} {:>9.2}x {:>12.2} {:>12.2}",
            a.name, a.throughput, a.relative_throughput, a.latency_mean, a.tail_span
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan(args: PlanArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    cfg.validate()?;
    let aware_activation = profile_peak_activation(&cfg)?;
    let aware = kv_pool_capacity(&cfg, aware_activation)?;
    println!(
        "logit-bounded profile (max_num_logits = {}):",
        cfg.max_num_logits
    );
    println!(
        "  activation budget: {} bytes",
        aware.activation_budget_bytes
    );
    println!("  kv pool:           {} bytes", aware.kv_pool_bytes);
    println!("  kv token slots:    {}", aware.kv_token_slots);
    println!(
        "  logit chunk plan:  {:?} (worst-case step)",
        aware.logit_chunk_plan
    );
    println!(
        "monolithic reference reservation ({} x {} logits):",
        args.mono_batch, args.mono_seq
    );
    match profile_peak_activation_monolithic(&cfg, args.mono_batch, args.mono_seq)
        .and_then(|act| kv_pool_capacity(&cfg, act))
    {
        Ok(mono) => {
            println!(
                "  activation budget: {} bytes",
                mono.activation_budget_bytes
            );
            println!("  kv pool:           {} bytes", mono.kv_pool_bytes);
            println!("  kv token slots:    {}", mono.kv_token_slots);
        }
        Err(MemError::InsufficientCapacity { required, hbm }) => {
            println!(
                "  infeasible: weights + activation = {required} bytes exceed hbm {hbm} bytes"
            );
            println!("  kv token slots:    0");
        }
        Err(e) => return Err(e.into()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plan(a) => cmd_plan(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
