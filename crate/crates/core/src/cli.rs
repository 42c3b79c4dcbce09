use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use amflow::checks::{model_suite, op_suite, ComponentCheck};
use amflow::config::{RunConfig, KEYS};
use amflow::error::{Error, Result};
use amflow::params::Component;
use amflow::ppm::write_patch_ppm;
use amflow::run::{config_beside, flow_images, load_model, read_dataset, run_dataset, train_run, write_dataset};
use amflow::synth::{load_clip, make_appearance_dataset, make_direction_dataset};
use amflow::train::{evaluate, pretrain_backbone, PRETRAIN_FRAMES_PER_CLASS};
use amflow::weights::save_weights;
use amflow::model::ParamCounts;

fn config_keys_help() -> String {
    let mut s = String::from("Config keys (file `key = value` lines or trailing key=value overrides):\n");
    for (k, d, help) in KEYS {
        s.push_str(&format!("  {k:<17} {help} [default: {d:?}]\n"));
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "amflow", version, about = "Attention-map flow video classification on synthetic clips")]
#[command(after_help = config_keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataKind {
    /// Moving sprites labelled by direction of motion.
    Direction,
    /// Single frames labelled by sprite shape.
    Appearance,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Scope {
    Op,
    Model,
    All,
}

#[derive(clap::Args, Debug)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` pairs applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for pair in &self.overrides {
            run.set_override(pair)?;
        }
        Ok(run)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset to clip files and a manifest.
    Synth {
        #[arg(long, value_enum)]
        kind: DataKind,
        /// Clips per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a backbone on appearance data and save its weights.
    Pretrain {
        /// Directory written by `synth --kind appearance`; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Frames per class when generating data.
        #[arg(long, default_value_t = PRETRAIN_FRAMES_PER_CLASS)]
        n: usize,
        /// Output weight file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train adapters and temporal heads; writes checkpoint, metrics and config echo.
    Train {
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the config's `data` key.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write one PCA-coloured flow image per placed block.
    VizFlow {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config.echo beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the parameter count of every component.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { kind, n, seed, out, cfg } => {
            let mut run = cfg.resolve()?;
            run.set("seed", seed)?;
            let synth = run.synth_config()?;
            let data = match kind {
                DataKind::Direction => make_direction_dataset(n, seed, &synth)?,
                DataKind::Appearance => make_appearance_dataset(n, seed, &synth)?,
            };
            let paths = write_dataset(&out, &data)?;
            println!("wrote {} clips to {}", paths.len(), out.display());
        }
        Command::Pretrain { data, n, out, cfg } => {
            let run = cfg.resolve()?;
            let pre = run.pretrain_config()?;
            let dataset = match data {
                Some(dir) => read_dataset(&dir)?,
                None => make_appearance_dataset(n, pre.seed, &run.synth_config()?)?,
            };
            let backbone = run.model_config()?.backbone;
            let (table, report) = pretrain_backbone(&backbone, &dataset.train, &dataset.val, dataset.categories, &pre)?;
            save_weights(&table, &out)?;
            println!(
                "pretrained backbone: train top1 {:.3}, val top1 {:.3}; weights in {}",
                report.train_top1,
                report.val_top1,
                out.display()
            );
        }
        Command::Train { out, cfg } => {
            let run = cfg.resolve()?;
            let report = train_run(&run, &out)?;
            for split in ["train", "val"] {
                if let Some(m) = report.last(split) {
                    println!("{split}: loss {:.4} top1 {:.3} top5 {:.3}", m.loss, m.top1, m.top5);
                }
            }
            match report.epochs_to_threshold {
                Some(e) => println!("train accuracy threshold reached at epoch {e}"),
                None => println!("train accuracy threshold not reached"),
            }
            println!("outputs in {}", out.display());
        }
        Command::Eval { checkpoint, data, cfg } => {
            let mut run = match cfg.config {
                Some(_) => cfg.resolve()?,
                None => {
                    let mut r = config_beside(&checkpoint)?;
                    for pair in &cfg.overrides {
                        r.set_override(pair)?;
                    }
                    r
                }
            };
            if let Some(dir) = data {
                run.set("data", dir.display())?;
            }
            let model = load_model(&run, &checkpoint)?;
            let dataset = run_dataset(&run)?;
            for (split, clips) in [("train", &dataset.train), ("val", &dataset.val)] {
                if clips.is_empty() {
                    continue;
                }
                let m = evaluate(&model, clips)?;
                println!(
                    "{}",
                    serde_json::json!({"split": split, "loss": m.loss, "top1": m.top1, "top5": m.top5})
                );
            }
        }
        Command::Gradcheck { scope, seed } => {
            let mut checks: Vec<ComponentCheck> = Vec::new();
            if scope != Scope::Model {
                checks.extend(op_suite(seed)?);
            }
            if scope != Scope::Op {
                checks.extend(model_suite(seed)?);
            }
            for c in &checks {
                println!("{}", c.line());
            }
            let worst = checks.iter().map(|c| c.report.max_rel_err()).fold(0.0, f64::max);
            let failed: Vec<_> = checks.iter().filter(|c| !c.report.passed()).map(|c| c.name.as_str()).collect();
            println!("{} checks, worst relative error {worst:.3e}", checks.len());
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for: {}", failed.join(", "))));
            }
        }
        Command::VizFlow {
            clip,
            checkpoint,
            out,
            config,
        } => {
            let run = match config {
                Some(path) => RunConfig::load(&path)?,
                None => config_beside(&checkpoint)?,
            };
            let model = load_model(&run, &checkpoint)?;
            let clip = load_clip(&clip)?;
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let b = &model.config.backbone;
            for (block, image) in flow_images(&model, &clip)? {
                let path = out.join(format!("block_{block}.ppm"));
                write_patch_ppm(&path, &image.rgb, b.grid(), b.patch_px)?;
                println!("{}", path.display());
            }
        }
        Command::Params { cfg } => {
            let run = cfg.resolve()?;
            let config = run.model_config()?;
            let formula = config.param_counts()?;
            let model = amflow::model::Model::new(config, 0)?;
            print_params(&formula, &ParamCounts::enumerate(&model.store));
        }
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        context: format!("creating {}", path.display()),
        source: e,
    }
}

fn print_params(formula: &ParamCounts, enumerated: &ParamCounts) {
    println!("{:<22} {:>12} {:>12}", "component", "formula", "enumerated");
    for c in Component::ALL {
        println!("{:<22} {:>12} {:>12}", c.label(), formula.component(c), enumerated.component(c));
    }
    println!("{:<22} {:>12} {:>12}", "trainable", formula.trainable(), enumerated.trainable());
    println!("{:<22} {:>12} {:>12}", "frozen", formula.frozen, enumerated.frozen);
    println!("{:<22} {:>12} {:>12}", "total", formula.total(), enumerated.total());
}
