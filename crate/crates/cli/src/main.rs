use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ctxfront_core::config::RunConfig;
use ctxfront_core::datagen::Split;
use ctxfront_core::diagnostics::{gradient_suite, GRADCHECK_TOLERANCE};
use ctxfront_core::inference::{enhance_utterance, evaluate, evaluate_masks, EvalReport};
use ctxfront_core::model::load_checkpoint;
use ctxfront_core::trainer::train;
use ctxfront_core::{Dataset, FrontendModel, MaskPolicy, Matrix};

const THREADS_ENV: &str = "CTXFRONT_THREADS";

#[derive(Parser)]
#[command(name = "ctxfront", version, about = "Contextual speech-enhancement frontend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train a model; writes checkpoints and metrics.jsonl under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset for the held-out mask MAE.
        #[arg(long)]
        held_out: Option<PathBuf>,
    },
    /// Write masks and enhanced features for every example of a dataset.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Score a model (or the ideal mask) against the clean features.
    Eval {
        /// Checkpoint directory; without it a freshly initialised model is used.
        #[arg(long, conflicts_with = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Supplies the architecture and mask policy when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score the ideal ratio mask instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|()| run(cli.command)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, out, split } => {
            let cfg = RunConfig::load(&config)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let data = cfg.simulation.generate(split)?;
            data.write(&out)?;
            println!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            held_out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let train_set = Dataset::read(&data)?;
            let held = held_out.as_deref().map(Dataset::read).transpose()?;
            let model = FrontendModel::new(cfg.arch.clone(), cfg.train.seed)?;
            println!("training {} parameters on {} examples", model.num_params(), train_set.len());
            let (_, report) = train(model, &train_set, cfg.train.clone(), held.as_ref(), Some(&out))?;
            println!(
                "steps {}  spectral loss {:.4} -> {:.4}  train mask MAE {:.4}",
                report.steps, report.initial_spectral_loss, report.final_spectral_loss, report.final_train_mask_mae
            );
            if let Some(mae) = report.held_out_mask_mae {
                println!("held-out mask MAE {mae:.4}");
            }
        }
        Command::Enhance {
            ckpt,
            data,
            out,
            alpha,
            beta,
        } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let policy = override_policy(MaskPolicy::default(), alpha, beta)?;
            let data = Dataset::read(&data)?;
            enhance_dataset(&model, &data, &policy, &out)?;
            println!("enhanced {} examples into {}", data.len(), out.display());
        }
        Command::Eval {
            ckpt,
            data,
            report,
            config,
            seed,
            oracle,
            alpha,
            beta,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let base = cfg.as_ref().map(|c| c.policy).unwrap_or_default();
            let policy = override_policy(base, alpha, beta)?;
            let data = Dataset::read(&data)?;
            let result = if oracle {
                evaluate_masks(&data, &policy, |ex| Ok(ex.irm_target.clone()))?
            } else {
                let model = match ckpt {
                    Some(dir) => load_checkpoint(&dir)?.0,
                    None => {
                        let arch = cfg.map(|c| c.arch).unwrap_or_default();
                        FrontendModel::new(arch, seed)?
                    }
                };
                evaluate(&model, &data, &policy)?
            };
            write_json(&report, &result)?;
            print_report(&result);
        }
        Command::Gradcheck { seed } => {
            let cases = gradient_suite(seed)?;
            let mut failed = 0;
            for c in &cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{status:>4}  {:<34} max rel err {:.3e}  ({} entries)", c.name, c.max_rel_err, c.checked);
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks exceed {GRADCHECK_TOLERANCE:e}", cases.len());
            }
            println!("all {} gradient checks below {GRADCHECK_TOLERANCE:e}", cases.len());
        }
    }
    Ok(())
}

fn override_policy(mut policy: MaskPolicy, alpha: Option<f64>, beta: Option<f64>) -> Result<MaskPolicy> {
    if let Some(a) = alpha {
        policy.alpha = a;
    }
    if let Some(b) = beta {
        policy.beta = b;
    }
    policy.validate()?;
    Ok(policy)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_report(r: &EvalReport) {
    println!(
        "{:<13} {:>7} {:>4} {:>9} {:>10} {:>10} {:>8}",
        "condition", "snr_db", "n", "mask_mae", "lsd_noisy", "lsd_enh", "rel_imp"
    );
    for c in &r.conditions {
        for b in &c.by_snr {
            let snr = b.snr_db.map_or("-".to_string(), |s| format!("{s:.1}"));
            let s = &b.stats;
            println!(
                "{:<13} {:>7} {:>4} {:>9.4} {:>10.4} {:>10.4} {:>8.3}",
                c.condition.as_str(),
                snr,
                s.n,
                s.mask_mae,
                s.lsd_noisy,
                s.lsd_enhanced,
                s.relative_improvement
            );
        }
    }
}

#[derive(Serialize)]
struct EnhancedEntry {
    id: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize)]
struct TensorEntry {
    name: &'static str,
    file: String,
    shape: [usize; 2],
}

fn write_matrix(dir: &Path, file: &str, m: &Matrix) -> Result<()> {
    let bytes: Vec<u8> = m.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.join(file);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn enhance_dataset(model: &FrontendModel<f32>, data: &Dataset, policy: &MaskPolicy, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut entries = Vec::with_capacity(data.len());
    for (i, ex) in data.examples.iter().enumerate() {
        let e = enhance_utterance(model, ex, policy)?;
        let mut tensors = Vec::new();
        for (name, m) in [
            ("mask", &e.mask),
            ("enhanced_mel", &e.enhanced_mel.values),
            ("enhanced_lfbe", &e.enhanced_lfbe.values),
            ("stacked", &e.stacked.values),
        ] {
            let file = format!("{i:06}-{}.{name}.f32", ex.meta.id);
            write_matrix(out, &file, m)?;
            tensors.push(TensorEntry {
                name,
                file,
                shape: [m.rows, m.cols],
            });
        }
        entries.push(EnhancedEntry {
            id: ex.meta.id.clone(),
            tensors,
        });
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        policy: &'a MaskPolicy,
        examples: Vec<EnhancedEntry>,
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            policy,
            examples: entries,
        },
    )
}
