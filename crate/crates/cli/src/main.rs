use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use splat::pipeline::{self, ExperimentConfig, GridPlan, LossSet, RunLayout, TransformerMode};
use splat::synthdata::Split;

#[derive(Parser)]
#[command(name = "splat", version, about = "Cycle-free pixel-level adaptation for object detectors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set detector_iters=500`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the four synthetic splits
    GenData,
    /// Train the source detector and record its source-style mAP
    TrainSource,
    /// Train the oracle detector on labeled target-train images
    TrainOracle,
    /// Pre-train the frozen segmentation task net
    TrainTasknet,
    /// Train the pixel transformer
    TrainTransformer {
        #[arg(long)]
        mode: Option<TransformerMode>,
    },
    /// Write pseudo-labels for source-seg with the source detector
    PseudoLabel {
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Translate source-seg images with a trained generator
    Adapt {
        #[arg(long)]
        mode: Option<TransformerMode>,
    },
    /// Train the target detector on adapted images
    TrainTarget {
        #[arg(long)]
        mode: Option<TransformerMode>,
        /// `pseudo`, `pair` or `pseudo,pair`
        #[arg(long)]
        losses: Option<LossSet>,
    },
    /// Evaluate a detector checkpoint (path without extension)
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target-eval")]
        split: String,
    },
    /// Time single-image transformer iterations per mode
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "lite,big,cycle")]
        modes: Vec<TransformerMode>,
    },
    /// Write table2.csv, table3.csv and ablation.csv from a run directory
    Report,
    /// Run every stage for one seed
    Run {
        /// Transformer modes trained end to end
        #[arg(long, value_delimiter = ',', default_value = "lite")]
        modes: Vec<TransformerMode>,
        /// Modes to benchmark; pass an empty string to skip
        #[arg(long, value_delimiter = ',', default_value = "lite,big,cycle")]
        bench_modes: Vec<String>,
        /// Skip the {pair} and {pseudo,pair} target detectors
        #[arg(long)]
        no_ablation: bool,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &c.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        cfg.set(k, v)?;
    }
    if let Some(d) = &c.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let layout = RunLayout::new(&cfg);
    match cli.cmd {
        Cmd::GenData => {
            pipeline::gen_data(&cfg)?;
            println!("data ready in {}", cfg.data_dir.display());
        }
        Cmd::TrainSource => {
            let map = pipeline::train_source(&cfg)?;
            println!("source detector: source-style mAP {map:.2}");
        }
        Cmd::TrainOracle => {
            pipeline::train_oracle(&cfg)?;
            println!("oracle detector: {}", layout.oracle_detector().display());
        }
        Cmd::TrainTasknet => {
            pipeline::train_tasknet_stage(&cfg)?;
            println!("task net: {}", layout.tasknet().display());
        }
        Cmd::TrainTransformer { mode } => {
            let mode = mode.unwrap_or(cfg.mode);
            let stats = pipeline::train_transformer(&cfg, mode)?;
            if let Some(s) = stats.last() {
                println!(
                    "{mode}: {} iterations, last: G {} D {} T {} passes",
                    stats.len(),
                    s.generator_forwards,
                    s.discriminator_forwards,
                    s.tasknet_forwards
                );
            }
        }
        Cmd::PseudoLabel { threshold } => {
            let t = threshold.unwrap_or(cfg.confidence_threshold);
            let (kept, total) = pipeline::pseudo_label(&cfg, t)?;
            println!("pseudo-labels: kept {kept} of {total} detections at threshold {t}");
        }
        Cmd::Adapt { mode } => {
            let mode = mode.unwrap_or(cfg.mode);
            let n = pipeline::adapt(&cfg, mode)?;
            println!("adapted {n} images into {}", layout.adapted(mode).display());
        }
        Cmd::TrainTarget { mode, losses } => {
            let mode = mode.unwrap_or(cfg.mode);
            if let Some(l) = losses {
                cfg.losses = l;
            }
            let map = pipeline::train_target(&cfg, mode, &cfg.losses)?;
            println!("target detector ({mode}, {}): target-eval mAP {map:.2}", cfg.losses);
        }
        Cmd::Eval { checkpoint, split } => {
            let split = Split::parse(&split)?;
            let r = pipeline::evaluate(&cfg, &checkpoint, split)?;
            print!("{}", r.to_csv());
        }
        Cmd::Bench { modes } => {
            let rows = pipeline::benchmark(&cfg, &modes)?;
            println!("mode   G  D  T  median_s  speedup");
            for r in rows {
                let sp = r.speedup.map(|s| format!("x{s:.2}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<6} {:>2} {:>2} {:>2}  {:.4}  {sp}",
                    r.mode.name(),
                    r.generator_forwards,
                    r.discriminator_forwards,
                    r.tasknet_forwards,
                    r.median_seconds
                );
            }
        }
        Cmd::Report => print_summary(&pipeline::report(&cfg)?),
        Cmd::Run {
            modes,
            bench_modes,
            no_ablation,
        } => {
            let bench_modes = bench_modes
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<TransformerMode>())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let plan = GridPlan {
                modes,
                ablation: !no_ablation,
                bench_modes,
            };
            let s = pipeline::run_experiment(&cfg, &plan)
                .with_context(|| format!("experiment in {}", layout.root.display()))?;
            print_summary(&s);
        }
    }
    Ok(())
}

fn print_summary(s: &pipeline::Summary) {
    let f = |x: Option<f64>| x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
    println!("source-only {}", f(s.source_only));
    println!("adapted     {}", f(s.adapted));
    println!("oracle      {}", f(s.oracle));
    println!("gap recovered % {}", f(s.gap_recovered));
    for (tag, m) in &s.ablation {
        println!("losses {tag}: {}", f(*m));
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
