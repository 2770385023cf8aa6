use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use modalign::data::{export_dataset, generate_synthetic, DatasetSpec, Split};
use modalign::detector::{latency_bench, DetectorConfig};
use modalign::error::{Error, Result};
use modalign::mi_lab::{certify, VerifyOptions};
use modalign::tokens::{silhouette_score, TokenRegistry};
use modalign::train::{run_eval, run_pretrain, run_train, RunConfig};

/// Worker threads for commands that parallelize internally.
const THREADS_ENV: &str = "MODALIGN_THREADS";

#[derive(Parser)]
#[command(name = "modalign", version, about = "Modality-aligned query detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and export both splits.
    GenData {
        /// Dataset spec JSON; the built-in five-modality spec when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Seed for the built-in spec.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default run config as JSON.
    Config,
    /// Alignment pretraining on modality-distinct batches.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detection training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `detector.moca`.
        #[arg(long, value_enum)]
        moca: Option<Switch>,
        /// Pretraining run directory to start from.
        #[arg(long)]
        from_pretrain: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a training run directory.
    Eval {
        /// Run directory (checkpoint, config echo and token registry).
        #[arg(long)]
        ckpt: PathBuf,
        /// Exported dataset manifest; the run's validation split when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify the InfoNCE lower bound on seeded discrete joints.
    MiLab {
        #[arg(long, default_value_t = 20)]
        joints: usize,
        /// Comma-separated negative counts.
        #[arg(long = "K", value_delimiter = ',', default_values_t = vec![1usize, 3, 7, 15])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decoder latency with and without the modality token.
    Bench {
        /// Run config whose detector is benchmarked; desk defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        queries: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Token registry utilities.
    Tokens {
        #[command(subcommand)]
        action: TokensCommand,
    },
}

#[derive(Subcommand)]
enum TokensCommand {
    /// Synthesize a registry for a dataset spec's catalog.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        d_text: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a registry file.
    Inspect { file: PathBuf },
    /// Silhouette of the registry's vectors grouped by modality.
    Silhouette { file: PathBuf },
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset_spec(path: Option<&Path>, seed: u64) -> Result<DatasetSpec> {
    let spec = match path {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default_medical(seed),
    };
    spec.validate()?;
    Ok(spec)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, seed, out } => {
            let spec = dataset_spec(spec.as_deref(), seed)?;
            let catalog = spec.catalog();
            for (split, name) in [(Split::Train, "train"), (Split::Val, "val")] {
                let samples = generate_synthetic(&spec, split)?;
                export_dataset(&out, name, &catalog, &samples)?;
                eprintln!("{name}: {} samples", samples.len());
            }
            write_json(&out.join("spec.json"), &spec)?;
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::desk())?);
        }
        Command::Pretrain { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let r = run_pretrain(&cfg, &out)?;
            eprintln!("pretrain: {} steps, final loss {:.6}", r.steps, r.final_loss);
        }
        Command::Train {
            config,
            out,
            moca,
            from_pretrain,
            seed,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(m) = moca {
                cfg.detector.moca = matches!(m, Switch::On);
            }
            let r = run_train(&cfg, &out, from_pretrain.as_deref())?;
            eprintln!("train: {} steps, final loss {:.6}", r.steps, r.final_loss);
            if let Some(rep) = &r.report {
                eprintln!("val AP {:?}  AP50 {:?}", rep.overall.ap, rep.overall.ap50);
            }
        }
        Command::Eval { ckpt, data, out } => {
            let r = run_eval(&ckpt, data.as_deref(), &out)?;
            eprintln!("AP {:?}  AP50 {:?}  AP75 {:?}", r.overall.ap, r.overall.ap50, r.overall.ap75);
        }
        Command::MiLab {
            joints,
            k,
            samples,
            seed,
            report,
        } => {
            let opts = VerifyOptions {
                ks: k,
                n_samples: samples,
                seed,
                ..VerifyOptions::default()
            };
            let c = certify(joints, &opts, threads()?)?;
            if let Some(p) = &report {
                write_json(p, &c)?;
            }
            let cells: usize = c.joints.iter().map(|j| j.report.cells.len()).sum();
            println!("joints {}  cells {cells}  violations {}", c.joints.len(), c.violations);
            for j in c.joints.iter().filter(|j| !j.report.passed()) {
                for f in &j.report.failures {
                    eprintln!("joint {}: {f}", j.index);
                }
            }
            if c.violations > 0 {
                return Err(Error::Numerical(format!("{} bound violations", c.violations)));
            }
        }
        Command::Bench {
            config,
            queries,
            trials,
            image_size,
            seed,
        } => {
            let mut det: DetectorConfig = match config {
                Some(p) => RunConfig::from_path(&p)?.detector,
                None => RunConfig::desk().detector,
            };
            det.num_queries = queries;
            let r = latency_bench(&det, image_size, trials, seed)?;
            println!(
                "baseline_ms {:.4}  moca_ms {:.4}  overhead {:.2}%",
                r.baseline_ms,
                r.moca_ms,
                100.0 * r.overhead
            );
        }
        Command::Tokens { action } => match action {
            TokensCommand::Synth {
                spec,
                d_text,
                seed,
                out,
            } => {
                let spec = dataset_spec(spec.as_deref(), 0)?;
                let reg = TokenRegistry::synthetic(d_text, seed, &spec.catalog().token_grid())?;
                reg.save(&out)?;
                eprintln!("{} tokens, d_text {d_text}", reg.len());
            }
            TokensCommand::Inspect { file } => {
                let reg = TokenRegistry::load(&file)?;
                let mut out = std::io::stdout().lock();
                // A closed pipe (e.g. `| head`) just ends the listing.
                let _ = (|| -> std::io::Result<()> {
                    writeln!(out, "d_text {}  tokens {}", reg.d_text(), reg.len())?;
                    for (m, c, e) in reg.iter() {
                        let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
                        writeln!(out, "{m}|{c}  norm {norm:.6}")?;
                    }
                    Ok(())
                })();
            }
            TokensCommand::Silhouette { file } => {
                let reg = TokenRegistry::load(&file)?;
                let mods = reg.modalities().to_vec();
                let (mut vecs, mut labels) = (Vec::new(), Vec::new());
                for (m, _, e) in reg.iter() {
                    vecs.push(e.vector.clone());
                    labels.push(mods.iter().position(|x| x == m).expect("listed modality"));
                }
                println!("{:.6}", silhouette_score(&vecs, &labels)?);
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
