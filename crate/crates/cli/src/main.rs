//! lca-cli: run, sweep, verify, cost, and io-check entry points.
//!
//! Contract: stdout carries the JSONL report records (one object per line),
//! stderr carries human diagnostics. Exit status is 0 on success, 1 when an
//! invariant was violated, 2 on usage or execution errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use lca_cli::config::{
    self, parse_mask, parse_positional_pool, parse_precision, parse_semantic_pool, Mode,
    RunConfig,
};
use lca_cli::report::{report_path, write_jsonl};
use lca_cli::runner;

#[derive(Parser)]
#[command(
    name = "lca-cli",
    version,
    about = "Desk-scale latent attention engine with group-wise KV condensation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all generated weights and inputs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report file path (default: $LCA_OUT_DIR/<mode>.jsonl, else out/<mode>.jsonl).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Storage precision for generated data: f64 or f32.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Sequence length.
    #[arg(long, global = true)]
    l: Option<usize>,
    /// Group size g (also sets the summary-query count unless --n-queries is given).
    #[arg(long, global = true)]
    g: Option<usize>,
    /// Local window w.
    #[arg(long, global = true)]
    w: Option<usize>,
    /// Summary-query count for the importance scores.
    #[arg(long = "n-queries", global = true)]
    n_queries: Option<usize>,
    /// Mask policy: none or rep_causal.
    #[arg(long, global = true)]
    mask: Option<String>,
    /// Semantic pooling: weighted, mean, max_pool, or max_select.
    #[arg(long = "semantic-pool", global = true)]
    semantic_pool: Option<String>,
    /// Positional pooling: weighted, mean, max_pool, or max_select.
    #[arg(long = "positional-pool", global = true)]
    positional_pool: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one engine pass: prefill, decode, or gqa.
    Run {
        /// prefill | decode | gqa
        #[arg(long, default_value = "prefill")]
        mode: String,
        /// Decode steps (decode and gqa modes).
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid over g, w, summary-query counts, and pooling pairs.
    Sweep {
        /// Comma-separated group sizes, e.g. --sweep-g 8,16,32.
        #[arg(long = "sweep-g", value_delimiter = ',')]
        sweep_g: Option<Vec<usize>>,
        /// Comma-separated window sizes, e.g. --sweep-w 0,64,1024.
        #[arg(long = "sweep-w", value_delimiter = ',')]
        sweep_w: Option<Vec<usize>>,
        /// Comma-separated summary-query counts.
        #[arg(long = "sweep-n", value_delimiter = ',')]
        sweep_n: Option<Vec<usize>>,
        /// Visit all 16 pooling pairs per cell (true) or only the configured pair.
        #[arg(long = "pooling-matrix")]
        pooling_matrix: Option<bool>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-check the analytical guarantees on freshly sampled instances.
    Verify {
        /// bound | pooling | all
        #[arg(long, default_value = "all")]
        check: String,
        /// Number of sampled instances per check.
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score-operation and cache cost model at the configured length.
    Cost {
        #[command(flatten)]
        common: Common,
    },
    /// Round-trip the binary weight and cache formats and probe corruption handling.
    IoCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let (configs, out_flag) = resolve(cli.command)?;

    let mut any_violation = false;
    for cfg in &configs {
        let outcome = runner::run(cfg)?;
        let path = report_path(out_flag.as_deref(), &cfg.out_dir, cfg.mode.name());
        write_jsonl(&path, &outcome.records)?;
        for r in &outcome.records {
            println!("{}", serde_json::to_string(r)?);
        }
        eprintln!(
            "{}: {} record(s) -> {}",
            cfg.mode.name(),
            outcome.records.len(),
            path.display()
        );
        for v in &outcome.violations {
            eprintln!("violation: {v}");
            any_violation = true;
        }
    }
    Ok(if any_violation {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

/// Expands a subcommand into the run configurations it implies.
fn resolve(cmd: Command) -> Result<(Vec<RunConfig>, Option<PathBuf>)> {
    match cmd {
        Command::Run {
            mode,
            steps,
            common,
        } => {
            let mode = match mode.as_str() {
                "prefill" => Mode::Prefill,
                "decode" => Mode::Decode,
                "gqa" => Mode::Gqa,
                other => bail!("unknown run mode {other:?} (expected prefill, decode, or gqa)"),
            };
            let mut cfg = apply(&common, mode)?;
            if let Some(s) = steps {
                cfg.decode_steps = s;
            }
            Ok((vec![cfg], common.out))
        }
        Command::Sweep {
            sweep_g,
            sweep_w,
            sweep_n,
            pooling_matrix,
            common,
        } => {
            let mut cfg = apply(&common, Mode::Sweep)?;
            if let Some(g) = sweep_g {
                cfg.sweep.g = g;
            }
            if let Some(w) = sweep_w {
                cfg.sweep.w = w;
            }
            if let Some(n) = sweep_n {
                cfg.sweep.n_summary_queries = n;
            }
            if let Some(p) = pooling_matrix {
                cfg.sweep.pooling_matrix = p;
            }
            Ok((vec![cfg], common.out))
        }
        Command::Verify {
            check,
            trials,
            common,
        } => {
            let modes: Vec<Mode> = match check.as_str() {
                "bound" => vec![Mode::VerifyBound],
                "pooling" => vec![Mode::VerifyPooling],
                "all" => vec![Mode::VerifyBound, Mode::VerifyPooling],
                other => bail!("unknown check {other:?} (expected bound, pooling, or all)"),
            };
            if modes.len() > 1 && common.out.is_some() {
                bail!("--out names a single file; use --check bound or --check pooling with it");
            }
            let mut configs = Vec::new();
            for mode in modes {
                let mut cfg = apply(&common, mode)?;
                if let Some(t) = trials {
                    cfg.trials = t;
                }
                configs.push(cfg);
            }
            Ok((configs, common.out))
        }
        Command::Cost { common } => Ok((vec![apply(&common, Mode::Cost)?], common.out)),
        Command::IoCheck { common } => Ok((vec![apply(&common, Mode::IoCheck)?], common.out)),
    }
}

/// Defaults, then the TOML file, then flag overrides.
fn apply(common: &Common, mode: Mode) -> Result<RunConfig> {
    let mut cfg = config::load(mode, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(l) = common.l {
        cfg.l = l;
    }
    if let Some(p) = &common.precision {
        cfg.precision = parse_precision(p)?;
    }
    if let Some(g) = common.g {
        cfg.lca.g = g;
        cfg.lca.n_summary_queries = g;
        cfg.gqa.g = g;
        cfg.gqa.n_summary_queries = g;
    }
    if let Some(w) = common.w {
        cfg.lca.w = w;
        cfg.gqa.w = w;
    }
    if let Some(n) = common.n_queries {
        cfg.lca.n_summary_queries = n;
        cfg.gqa.n_summary_queries = n;
    }
    if let Some(m) = &common.mask {
        let m = parse_mask(m)?;
        cfg.lca.mask_policy = m;
        cfg.gqa.mask_policy = m;
    }
    if let Some(s) = &common.semantic_pool {
        cfg.lca.semantic_pool = parse_semantic_pool(s)?;
    }
    if let Some(p) = &common.positional_pool {
        cfg.lca.positional_pool = parse_positional_pool(p)?;
    }
    if let Some(dir) = std::env::var_os("LCA_OUT_DIR") {
        cfg.out_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}
