use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vrlab::bench;
use vrlab::config::{self, ConfigError, ExperimentConfig};
use vrlab::experiments;
use vrlab::report::Report;
use vrlab_core::checks::Suite;

#[derive(Parser)]
#[command(name = "vrlab", version, about = "Vision-token compression lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set train.lr=0`. `none` removes it.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every oracle, gradient and equivalence suite.
    Verify {
        /// Swap in a deliberately wrong adjoint to prove the suite can fail.
        #[arg(long)]
        inject_fault: bool,
        /// Write `verify_report.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per seed and write checkpoints.
    Train(Common),
    /// Held-out accuracy of trained checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to evaluate (defaults to every seed under the output directory).
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Linear-probe sweep over representation stages.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Probe this trained checkpoint instead of fresh models.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Checkpoint of the same model without blocks, for per-stage gains.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Analytic FLOP and KV-cache report.
    Cost(Common),
    /// Wall-clock prefill and decode benchmark.
    Bench(Common),
}

enum Failure {
    Config(ConfigError),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ConfigError>() {
            Ok(c) => Failure::Config(c),
            Err(e) => Failure::Run(e),
        }
    }
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let cfg = config::load(&c.config, &c.overrides).map_err(Failure::Config)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    Ok((cfg, out))
}

fn print_suites(suites: &[Suite]) {
    for s in suites {
        println!("{} {}", if s.passed() { "PASS" } else { "FAIL" }, s.name);
        for c in s.failures() {
            println!("    {}: {} (bound {})", c.name, c.value, c.bound);
        }
    }
}

fn wrote(path: &Path) {
    eprintln!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Verify { inject_fault, out } => {
            let suites = experiments::verify(inject_fault)?;
            print_suites(&suites);
            if let Some(dir) = out {
                let path = dir.join("verify_report.json");
                Report::new("verify", &ExperimentConfig::default(), suites.clone()).write(&path)?;
                wrote(&path);
            }
            Ok(suites.iter().all(Suite::passed))
        }
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            let r = experiments::train(&cfg, &out)?;
            for run in &r.body.runs {
                let last = run.losses.last().copied().unwrap_or(f64::NAN);
                println!("seed {}: final loss {last:.4}, test accuracy {:.4}", run.seed, run.test_accuracy);
            }
            println!("mean accuracy {:.4} ± {:.4}", r.body.mean_accuracy, r.body.sd_accuracy);
            wrote(&out.join("train_report.json"));
            Ok(true)
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let r = experiments::evaluate(&cfg, &out, &checkpoint)?;
            for run in &r.body.runs {
                println!("seed {}: test accuracy {:.4}", run.seed, run.test_accuracy);
            }
            println!("mean accuracy {:.4} ± {:.4}", r.body.mean_accuracy, r.body.sd_accuracy);
            wrote(&out.join("eval_report.json"));
            Ok(true)
        }
        Command::Probe { common, checkpoint, baseline } => {
            let (cfg, out) = load(&common)?;
            let r = experiments::probe(&cfg, &out, checkpoint.as_deref(), baseline.as_deref())?;
            for row in &r.body.table.rows {
                println!("{:<20} {:.4} ± {:.4}", row.stage.name(), row.mean, row.sd);
            }
            for c in r.body.table.compression_gap.iter().chain(&r.body.remember_gains) {
                println!("{}: {:+.4} (pooled sd {:.4})", c.label, c.gap, c.pooled_sd);
            }
            wrote(&out.join("probe_report.json"));
            Ok(true)
        }
        Command::Cost(c) => {
            let (cfg, out) = load(&c)?;
            let r = experiments::cost(&cfg, &out)?;
            let b = &r.body;
            println!("vision tokens {}", b.vision_token_count);
            println!("prefill flops {}", b.prefill_flops);
            println!("decode flops/token {}", b.decode_flops_per_token);
            println!("kv cache bytes {}", b.kv_cache_bytes);
            println!("vision remember flops {}", b.vr_overhead_flops);
            wrote(&out.join("cost_report.json"));
            Ok(true)
        }
        Command::Bench(c) => {
            let (cfg, out) = load(&c)?;
            let body = bench::run(&cfg)?;
            for s in &body.scenarios {
                println!(
                    "{:<14} tokens {:>4}  ttft {:.3} ms (mad {:.3})  tps {:.1} (mad {:.1})",
                    s.name, s.vision_tokens, s.ttft_median_ms, s.ttft_mad_ms, s.tps_median, s.tps_mad
                );
            }
            println!("compression prefill saving {:.1}%", 100.0 * body.compression_prefill_saving);
            println!("vision remember prefill overhead {:.1}%", 100.0 * body.vr_prefill_overhead);
            println!("vision remember tps change {:.1}%", 100.0 * body.vr_tps_change);
            let path = out.join("bench_report.json");
            Report::new("bench", &cfg, body).write(&path)?;
            wrote(&path);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
