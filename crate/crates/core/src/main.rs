use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dismae::analysis;
use dismae::checkpoint::{self, TrainedState};
use dismae::config::RunConfig;
use dismae::datasets::{generate_factored_dataset, FactorSpec};
use dismae::evaluation::{
    evaluate, full_finetune, linear_probe, run_ablation, select_labeled_subset, embed_dataset, AblationGrid, Adaptation, Adapted,
};
use dismae::trainer::Trainer;
use dismae::{Error, Result};

#[derive(Parser)]
#[command(name = "dismae", version, about = "Disentangled masked autoencoder pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    S0,
    V0,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural colored-glyph dataset.
    GenData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unsupervised (or DG) pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen semantic features.
    Probe(AdaptArgs),
    /// Full finetuning of the semantic encoder.
    Finetune(AdaptArgs),
    /// Accuracy on the held-out domains.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid of reconstructions with swapped variation summaries.
    SwapGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated item ids or indices donating semantics.
        #[arg(long, value_delimiter = ',', required = true)]
        rows: Vec<String>,
        /// Comma-separated item ids or indices donating variation.
        #[arg(long, value_delimiter = ',', required = true)]
        cols: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
    /// Per-domain propensity series of a pretraining run (CSV + PNG).
    Scores {
        #[arg(long)]
        run: PathBuf,
        /// Output CSV; the plot goes next to it with a .png extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export s0 or v0 embeddings of a split.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "s0")]
        which: Which,
        #[arg(long)]
        out: PathBuf,
        /// Also write a 2-D PCA projection here.
        #[arg(long)]
        pca: Option<PathBuf>,
    },
    /// Run the ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON grid; defaults to the standard sweeps.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(clap::Args)]
struct AdaptArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides eval.label_fraction.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(path: &Path, seed: Option<u64>, out: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?.resolve(seed, Some(out))?;
    cfg.write_resolved(out)?;
    Ok(cfg)
}

fn load_ckpt(trainer: &Trainer, dir: &Path) -> Result<TrainedState> {
    trainer.load_state(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn trainer_for(cfg: &RunConfig) -> Result<Trainer> {
    Trainer::new(cfg.model.clone(), cfg.loss.clone(), cfg.train.clone())
}

fn cmd_adapt(args: &AdaptArgs, finetune: bool) -> Result<()> {
    let mut cfg = load_config(&args.config, args.seed, &args.out)?;
    if let Some(f) = args.fraction {
        cfg.eval.label_fraction = f;
        cfg.eval.validate()?;
        cfg.write_resolved(&args.out)?;
    }
    let want = if finetune { Adaptation::FullFinetune } else { Adaptation::LinearProbe };
    if cfg.eval.adaptation() != want {
        return Err(Error::config(format!(
            "label fraction {} with probe threshold {} dispatches to {}; run `dismae {}` instead",
            cfg.eval.label_fraction,
            cfg.eval.probe_threshold,
            if finetune { "the linear probe" } else { "full finetuning" },
            if finetune { "probe" } else { "finetune" },
        )));
    }
    let trainer = trainer_for(&cfg)?;
    let state = load_ckpt(&trainer, &args.ckpt)?;
    let splits = cfg.load_splits()?;
    let labeled = select_labeled_subset(&splits.train, cfg.eval.label_fraction, cfg.eval.seed)?;
    let adapted: Adapted = if finetune {
        full_finetune(&trainer.model, &state, &labeled, &cfg.eval)?
    } else {
        linear_probe(&trainer.model, &state, &labeled, &cfg.eval)?
    };
    let mut protocol = serde_json::to_value(&adapted.mapping)?;
    protocol["labeled_samples"] = labeled.len().into();
    protocol["epoch_losses"] = serde_json::to_value(&adapted.epoch_losses)?;
    write_text(
        &args.out.join("logs").join("protocol.json"),
        &(serde_json::to_string_pretty(&protocol)? + "\n"),
    )?;
    let out_state = TrainedState {
        params: adapted.params,
        ..state
    };
    checkpoint::save(&out_state, &args.out.join("adapted"))?;
    let metrics = evaluate(&trainer.model, &out_state.params, &splits.test)?;
    metrics.write_json(&args.out.join("metrics.json"))?;
    println!("overall {:.4} average {:.4}", metrics.overall, metrics.average);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData { spec, out } => {
            let spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str::<FactorSpec>(&text)
                        .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
                }
                None => FactorSpec::default(),
            };
            let ds = generate_factored_dataset(&spec, Some(&out))?;
            println!("{} images in {} domains", ds.len(), ds.num_domains());
        }
        Command::Pretrain { config, out, seed, resume } => {
            let cfg = load_config(&config, seed, &out)?;
            let trainer = trainer_for(&cfg)?;
            let splits = cfg.load_splits()?;
            let state = match resume {
                Some(dir) => load_ckpt(&trainer, &dir)?,
                None => trainer.init_state(),
            };
            let (state, _) = trainer.train(&splits.train, state, Some(&out))?;
            println!("trained to epoch {}", state.epoch);
        }
        Command::Probe(a) => cmd_adapt(&a, false)?,
        Command::Finetune(a) => cmd_adapt(&a, true)?,
        Command::Eval { config, ckpt, out } => {
            let cfg = load_config(&config, None, &out)?;
            let trainer = trainer_for(&cfg)?;
            let state = load_ckpt(&trainer, &ckpt)?;
            let splits = cfg.load_splits()?;
            let metrics = evaluate(&trainer.model, &state.params, &splits.test)?;
            metrics.write_json(&out.join("metrics.json"))?;
            println!("overall {:.4} average {:.4}", metrics.overall, metrics.average);
        }
        Command::SwapGrid {
            config,
            ckpt,
            rows,
            cols,
            out,
            split,
            seed,
            scale,
        } => {
            if scale == 0 {
                return Err(Error::config("--scale must be >= 1"));
            }
            let cfg = RunConfig::load(&config)?.resolve(seed, None)?;
            let trainer = trainer_for(&cfg)?;
            let state = load_ckpt(&trainer, &ckpt)?;
            let splits = cfg.load_splits()?;
            let ds = splits.get(&split)?;
            let r = analysis::resolve_ids(ds, &rows)?;
            let c = analysis::resolve_ids(ds, &cols)?;
            let grid = analysis::swap_grid(&trainer.model, &state.params, ds, &r, &c, cfg.train.seed, scale)?;
            analysis::write_png(&grid.image, &out)?;
        }
        Command::Scores { run, out } => {
            let series = analysis::score_series(&run)?;
            write_text(&out, &analysis::scores_csv(&series))?;
            let img = analysis::scores_plot(&series, 1.0 / series.len() as f64);
            analysis::write_png(&img, &out.with_extension("png"))?;
        }
        Command::Embed {
            config,
            ckpt,
            split,
            which,
            out,
            pca,
        } => {
            let cfg = RunConfig::load(&config)?.resolve(None, None)?;
            let trainer = trainer_for(&cfg)?;
            let state = load_ckpt(&trainer, &ckpt)?;
            let splits = cfg.load_splits()?;
            let ds = splits.get(&split)?;
            let emb = embed_dataset(&trainer.model, &state.params, ds, matches!(which, Which::V0))?;
            write_text(&out, &analysis::embeddings_csv(ds, &emb)?)?;
            if let Some(p) = pca {
                let proj = analysis::pca_project(&emb, 2)?;
                write_text(&p, &analysis::embeddings_csv(ds, &proj.coords)?)?;
            }
        }
        Command::Ablate { config, out, grid, seed } => {
            let cfg = load_config(&config, seed, &out)?;
            let grid = match grid {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str::<AblationGrid>(&text)
                        .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
                }
                None => AblationGrid::standard(),
            };
            let splits = cfg.load_splits()?;
            let table = run_ablation(&cfg.pipeline(), &grid, &splits.train, &splits.test);
            write_text(&out.join("ablation.json"), &(serde_json::to_string_pretty(&table)? + "\n"))?;
            println!("{} cells", table.len());
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
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
