use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moe_peft::backbone::BackboneConfig;
use moe_peft::moe::RouterScope;
use moe_peft::params::ArchSpec;
use moe_peft::{Error, Result};
use moe_peft_cli::commands::{self, MixingChoice, SplitSel, SweepAxis, FOLD_TOLERANCE};
use moe_peft_cli::config::{SuiteConfig, SuiteName};
use moe_peft_cli::output::{create_dir, exit_code, resolve_out, write_file, EXIT_OK};
use moe_peft_cli::RunConfig;

#[derive(Parser)]
#[command(name = "moe-peft", version, about = "Mixture-of-experts adapters on a frozen encoder-decoder")]
struct Cli {
    /// Run config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Without it, `<root>/<verb>-<seed>` is used with the
    /// root from MOE_PEFT_OUT, the config's `out`, or `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps; every run is single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train adapters into a run directory.
    Train,
    /// Rank-classification accuracy per task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// toy or separation; defaults to the checkpoint's suite.
        #[arg(long)]
        suite: Option<SuiteName>,
        #[arg(long, default_value_t = 0)]
        suite_seed: u64,
        /// train, eval or all.
        #[arg(long, default_value = "eval")]
        split: SplitSel,
        /// Instances per task, scored under every template.
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Train one run per value of an axis and collect a table.
    Sweep {
        /// n_experts, strategy, routing_input or batch_size.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 100)]
        eval_samples: usize,
    },
    /// Trainable-parameter budget of a plan on an architecture.
    Params {
        /// large, xl, xxl, toy or a TOML architecture file.
        #[arg(long, default_value = "xl")]
        arch: String,
        /// ia3, lora, mov-<n> or molora-<n>.
        #[arg(long, default_value = "ia3")]
        plan: String,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        /// block or site.
        #[arg(long, default_value = "block")]
        scope: String,
        /// Print every published reference row instead.
        #[arg(long)]
        reference: bool,
    },
    /// Mean expert probabilities per task and their pairwise JSD.
    RoutingStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: Option<SuiteName>,
        #[arg(long, default_value_t = 0)]
        suite_seed: u64,
        /// Router label such as dec.1.ffn; defaults to the last decoder
        /// feed-forward router.
        #[arg(long)]
        site: Option<String>,
        #[arg(long, default_value_t = 128)]
        samples: usize,
    },
    /// Fold adapters into the backbone under constant mixing and verify.
    ExportMerged {
        #[arg(long)]
        checkpoint: PathBuf,
        /// uniform, task-mean:<task> or comma-separated weights.
        #[arg(long, default_value = "uniform")]
        mixing: MixingChoice,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value_t = FOLD_TOLERANCE)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let path = path.ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn suite_arg(name: Option<SuiteName>, seed: u64) -> Option<SuiteConfig> {
    name.map(|name| SuiteConfig { name, seed })
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    match cli.command {
        Command::Train => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let dir = resolve_out(out, cfg.out.as_deref(), "train", cfg.train.seed);
            let res = commands::cmd_train(&cfg, &dir)?;
            let last = res.reports.last();
            println!(
                "{}",
                serde_json::json!({
                    "run_dir": dir.display().to_string(),
                    "steps": res.reports.len(),
                    "final_loss": last.map(|r| r.loss),
                    "mean_entropy": last.and_then(|r| r.mean_entropy()),
                })
            );
        }
        Command::Eval {
            checkpoint,
            suite,
            suite_seed,
            split,
            samples,
        } => {
            let dir = resolve_out(out, None, "eval", seed);
            let s = commands::cmd_eval(&checkpoint, suite_arg(suite, suite_seed).as_ref(), split, samples, seed, &dir)?;
            print!("{}", moe_peft_cli::output::csv_string(&commands::eval_header(), &commands::eval_rows(&s))?);
        }
        Command::Sweep {
            axis,
            values,
            eval_samples,
        } => {
            let cfg = load_config(cli.config.as_deref(), cli.seed)?;
            let dir = resolve_out(out, cfg.out.as_deref(), "sweep", cfg.train.seed);
            let rows = commands::cmd_sweep(&cfg, axis, &values, eval_samples, cli.threads, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join("sweep.csv")).unwrap_or_default());
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                eprintln!("{failed} of {} sweep runs did not complete", rows.len());
            }
        }
        Command::Params {
            arch,
            plan,
            rank,
            scope,
            reference,
        } => {
            let scope: RouterScope = serde_json::from_value(serde_json::json!(scope))
                .map_err(|_| Error::Config(format!("unknown router scope `{scope}` (block|site)")))?;
            let rows = if reference {
                commands::reference_rows(rank, scope)?
            } else {
                let (toy, mut routing) = match cli.config.as_deref() {
                    Some(p) => {
                        let c = RunConfig::load(p)?;
                        (c.backbone, c.routing)
                    }
                    None => (BackboneConfig::default(), Default::default()),
                };
                routing.scope = scope;
                let spec: ArchSpec = commands::resolve_arch(&arch, &toy)?;
                vec![commands::params_row(&spec, &plan, rank, &routing, None)?]
            };
            let text = commands::params_csv(&rows)?;
            if let Some(dir) = out {
                create_dir(dir)?;
                write_file(&dir.join("params.csv"), &text)?;
            }
            print!("{text}");
        }
        Command::RoutingStats {
            checkpoint,
            suite,
            suite_seed,
            site,
            samples,
        } => {
            let dir = resolve_out(out, None, "routing-stats", seed);
            let stats = commands::cmd_routing_stats(
                &checkpoint,
                suite_arg(suite, suite_seed).as_ref(),
                site.as_deref(),
                samples,
                seed,
                &dir,
            )?;
            print!("{}", std::fs::read_to_string(dir.join("routing_means.csv")).unwrap_or_default());
            eprintln!("router {}; tables in {}", stats.router, dir.display());
        }
        Command::ExportMerged {
            checkpoint,
            mixing,
            probes,
            tolerance,
        } => {
            let dir = resolve_out(out, None, "export", seed);
            let report = commands::cmd_export_merged(&checkpoint, &mixing, probes, tolerance, seed, &dir)?;
            println!("max deviation {:e} over {} probes; merged checkpoint in {}", report.max_deviation, report.probes, dir.display());
        }
    }
    Ok(())
}
