use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facedepth::ablate::{ablate, Variant};
use facedepth::checkpoint::Checkpoint;
use facedepth::config::TrainConfig;
use facedepth::dataset_io::{read_dataset, read_split, write_dataset};
use facedepth::gt_io::{compute_patch_targets, write_targets};
use facedepth::synth::{generate_dataset, DatasetConfig, DegradeLevel, GeneratorConfig, Split};
use facedepth::train::{evaluate, train};
use facedepth::viz::visualize;
use facedepth::{Error, Result};
use log::info;
use serde::Serialize;

/// Relative paths resolve against this directory (default `facedepth_out`).
const OUT_ENV: &str = "FACEDEPTH_OUT";

#[derive(Parser)]
#[command(name = "facedepth", version, about = "Depth-assisted face manipulation detection on synthetic data")]
struct Cli {
    /// Root for relative output and data paths.
    #[arg(long, global = true, env = OUT_ENV, default_value = "facedepth_out")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        /// raw, high or low
        #[arg(long, default_value = "raw")]
        quality: String,
        #[arg(long, default_value_t = 224)]
        image_size: usize,
        #[arg(long, default_value_t = 0.5)]
        fake_ratio: f64,
        #[arg(long, default_value_t = 1.0)]
        fake_strength: f64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Write patch-depth targets for every split of a dataset.
    MakeGt {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        lambda: u32,
        #[arg(long, default_value_t = 14)]
        patches: usize,
    },
    /// Train from a TOML or JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data_dir` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train each variant over several seeds and print a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Comma-separated variant names; all variants by default.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Render PNG panels for the first `n` records of a split.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
    },
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn data_dir(root: &Path, flag: Option<&PathBuf>, config: &TrainConfig) -> Result<PathBuf> {
    match (flag, &config.data_dir) {
        (Some(p), _) => Ok(resolve(root, p)),
        (None, Some(p)) => Ok(resolve(root, Path::new(p))),
        (None, None) => Err(Error::config("no dataset given (use --data or data_dir in the config)")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.root;
    match cli.command {
        Command::GenData {
            seed,
            count,
            quality,
            image_size,
            fake_ratio,
            fake_strength,
            out,
        } => {
            let quality = match quality.as_str() {
                "raw" => None,
                other => Some(other.parse::<DegradeLevel>()?),
            };
            let cfg = DatasetConfig {
                count,
                seed,
                fake_ratio,
                generator: GeneratorConfig {
                    image_size,
                    quality,
                    fake_strength,
                    ..GeneratorConfig::default()
                },
                ..DatasetConfig::default()
            };
            let ds = generate_dataset(&cfg)?;
            let dir = resolve(&root, &out);
            let m = write_dataset(&dir, &ds)?;
            println!(
                "wrote {} records to {} (train {}, val {}, test {})",
                m.record_count,
                dir.display(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len()
            );
        }
        Command::MakeGt { data, lambda, patches } => {
            let dir = resolve(&root, &data);
            let (manifest, ds) = read_dataset(&dir)?;
            let gt_dir = dir.join("gt").join(format!("l{lambda}_p{patches}"));
            ensure_dir(&gt_dir)?;
            for split in Split::ALL {
                let targets = compute_patch_targets(ds.split(split), lambda, patches)?;
                write_targets(&gt_dir.join(split.name()), &targets, manifest.global_seed)?;
            }
            println!("wrote patch targets to {}", gt_dir.display());
        }
        Command::Train { config, data, out } => {
            let cfg = TrainConfig::load(&resolve(&root, &config))?;
            let (_, ds) = read_dataset(&data_dir(&root, data.as_ref(), &cfg)?)?;
            let out = resolve(&root, &out);
            ensure_dir(&out)?;
            let result = train(&cfg, &ds, Some(&out))?;
            result.best.save(&out.join("best.ckpt"))?;
            result.last.save(&out.join("last.ckpt"))?;
            write_json(&out.join("runlog.json"), &result.log)?;
            let val = if ds.val.is_empty() {
                None
            } else {
                let m = evaluate(&result.best, &ds.val, "val")?;
                write_json(&out.join("metrics_val.json"), &m)?;
                Some(m)
            };
            println!(
                "best epoch {:?}; val acc {}; checkpoints in {}",
                result.log.best_epoch,
                val.map_or("-".into(), |m| format!("{:.4} auc {:.4}", m.acc, m.auc)),
                out.display()
            );
        }
        Command::Eval { ckpt, split, data } => {
            let ckpt = Checkpoint::load(&resolve(&root, &ckpt))?;
            let split: Split = split.parse()?;
            let records = read_split(&data_dir(&root, data.as_ref(), &ckpt.train)?, split)?;
            let report = evaluate(&ckpt, &records, split.name())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate {
            config,
            seeds,
            variants,
            data,
            out,
        } => {
            let cfg = TrainConfig::load(&resolve(&root, &config))?;
            let variants = match variants {
                Some(v) => v.iter().map(|s| s.parse()).collect::<Result<Vec<Variant>>>()?,
                None => Variant::ALL.to_vec(),
            };
            let (_, ds) = read_dataset(&data_dir(&root, data.as_ref(), &cfg)?)?;
            let table = ablate(&cfg, &ds, &variants, seeds)?;
            let out = resolve(&root, &out);
            ensure_dir(&out)?;
            write_json(&out.join("ablation.json"), &table)?;
            let md = table.to_markdown();
            std::fs::write(out.join("ablation.md"), &md).map_err(|e| Error::io(out.join("ablation.md"), e))?;
            print!("{md}");
        }
        Command::Viz {
            ckpt,
            n,
            split,
            data,
            out,
        } => {
            let ckpt = Checkpoint::load(&resolve(&root, &ckpt))?;
            let split: Split = split.parse()?;
            let records = read_split(&data_dir(&root, data.as_ref(), &ckpt.train)?, split)?;
            let take = n.min(records.len());
            let files = visualize(&ckpt, &records[..take], &resolve(&root, &out))?;
            info!("rendered {} panels", files.len());
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            ExitCode::from(e.exit_code())
        }
    }
}
