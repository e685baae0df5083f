//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetPaths, RunConfig};
use crate::error::{GksError, Result};
use crate::eval::{Metrics, PredictMode};
use crate::grid::{Grid, Image};
use crate::imageio::{load_mask, save_image, save_map};
use crate::pipeline::{
    ablation_csv, combination_csv, mean_pcc, predict, preclassify, run_ablation, run_combination_matrix,
    run_sweep, source_dataset, sweep_csv, target_dataset, thread_pool, train_model, SweepAxis, Variant,
};
use crate::preclass::PixelClass;
use crate::synth::generate_synthetic_pair;
use crate::train::history_jsonl;

#[derive(Debug, Parser)]
#[command(name = "gksnet", version, about = "SAR change detection with graph-enhanced transfer learning")]
pub struct Cli {
    /// Master seed for every random stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FileFormat {
    Pgm,
    Png,
}

impl FileFormat {
    fn ext(self) -> &'static str {
        match self {
            FileFormat::Pgm => "pgm",
            FileFormat::Png => "png",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    UncertainOnly,
    Full,
}

impl From<ModeArg> for PredictMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::UncertainOnly => PredictMode::UncertainOnly,
            ModeArg::Full => PredictMode::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    /// Labeled source dataset directory (img1, img2, gt).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Target dataset directory (img1, img2, optional gt).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the configured base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic speckled pair with its change mask.
    GenSynth {
        /// Image height in pixels [default: 128].
        #[arg(long)]
        height: Option<usize>,
        /// Image width in pixels [default: 128].
        #[arg(long)]
        width: Option<usize>,
        /// Number of piecewise-constant reflectance regions [default: 12].
        #[arg(long)]
        regions: Option<usize>,
        /// Target share of changed pixels [default: 0.15].
        #[arg(long)]
        change_fraction: Option<f64>,
        /// Reflectance multiplier inside changed areas [default: 8].
        #[arg(long)]
        change_gain: Option<f64>,
        /// Number of looks of the speckle [default: 4].
        #[arg(long)]
        looks: Option<f64>,
        /// Output image format.
        #[arg(long, value_enum, default_value = "pgm")]
        format: FileFormat,
    },
    /// Write the difference image, preclassification map and training samples.
    Preclassify {
        /// Target dataset directory (img1, img2, optional gt).
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Train a model and write the checkpoint and history.
    Train {
        #[command(flatten)]
        data: TrainingArgs,
    },
    /// Produce a change map from a checkpoint.
    Predict {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target dataset directory (img1, img2, optional gt).
        #[arg(long)]
        target: Option<PathBuf>,
        /// Pixels sent through the network [default: uncertain-only].
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Score a change map against ground truth.
    Evaluate {
        /// Binary change map (nonzero = changed).
        #[arg(long)]
        map: PathBuf,
        /// Ground-truth mask.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Vary one setting over a grid.
    Sweep {
        /// One of n, r, ratio.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to the axis grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Comma-separated seeds; defaults to the global seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        data: TrainingArgs,
    },
    /// Compare model variants.
    Ablate {
        /// Comma-separated variants.
        #[arg(long, value_delimiter = ',', default_value = "basic,no_fusion,gaussian,full")]
        variants: Vec<String>,
        /// Comma-separated seeds; defaults to the global seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        data: TrainingArgs,
    },
    /// Train every ordered source/target pair of the given datasets.
    Combine {
        /// Comma-separated dataset directories, each with a gt mask.
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<PathBuf>,
        /// Comma-separated seeds; defaults to the global seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Overrides the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out).map_err(|e| GksError::io(&out, e))?;
        Ok(Ctx { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self, flag: &Option<PathBuf>, configured: &Option<DatasetPaths>, what: &str) -> Result<DatasetPaths> {
        match (flag, configured) {
            (Some(dir), _) => Ok(DatasetPaths::from_dir(dir)),
            (None, Some(d)) => Ok(d.clone()),
            (None, None) => Err(GksError::Config(format!(
                "no {what} dataset: pass --{what} <dir> or set it in --config"
            ))),
        }
    }

    fn apply_training(&mut self, data: &TrainingArgs) {
        if let Some(e) = data.epochs {
            self.cfg.train.epochs = e;
        }
        if let Some(lr) = data.lr {
            self.cfg.train.base_lr = lr;
        }
    }

    fn seeds(&self, given: &[u64]) -> Vec<u64> {
        if given.is_empty() {
            vec![self.cfg.seed]
        } else {
            given.to_vec()
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| GksError::io(path, e))
}

fn preclass_image(labels: &Grid<PixelClass>) -> Image {
    labels.map(|c| match c {
        PixelClass::Unchanged => 0.0,
        PixelClass::Uncertain => 0.5,
        PixelClass::Changed => 1.0,
    })
}

/// Runs a parsed command line; output files go under the output directory.
pub fn run(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::new(&cli)?;
    let seed = ctx.cfg.seed;
    match &cli.command {
        Command::GenSynth {
            height,
            width,
            regions,
            change_fraction,
            change_gain,
            looks,
            format,
        } => {
            let mut s = ctx.cfg.synth.clone();
            s.seed = seed;
            s.height = height.unwrap_or(s.height);
            s.width = width.unwrap_or(s.width);
            s.n_regions = regions.unwrap_or(s.n_regions);
            s.change_fraction = change_fraction.unwrap_or(s.change_fraction);
            s.change_gain = change_gain.unwrap_or(s.change_gain);
            s.looks = looks.unwrap_or(s.looks);
            let pair = generate_synthetic_pair(&s)?;
            let ext = format.ext();
            save_image(pair.img1(), &ctx.path(&format!("img1.{ext}")))?;
            save_image(pair.img2(), &ctx.path(&format!("img2.{ext}")))?;
            save_map(pair.ground_truth().expect("synthetic pairs carry a mask"), &ctx.path(&format!("gt.{ext}")))?;
        }
        Command::Preclassify { target } => {
            let pair = ctx.dataset(target, &ctx.cfg.target, "target")?.load()?;
            let pcfg = ctx.cfg.pipeline();
            let pre = preclassify(&pair, &pcfg, seed)?;
            let ds = target_dataset(&pair, &pre, &pcfg, seed)?;
            save_image(&pre.di.0, &ctx.path("di.pgm"))?;
            save_image(&preclass_image(&pre.map.labels), &ctx.path("preclass.pgm"))?;
            write(&ctx.path("samples.json"), &serde_json::to_string(&ds.samples)?)?;
            println!(
                "{}",
                serde_json::json!({
                    "changed": pre.map.count(PixelClass::Changed),
                    "unchanged": pre.map.count(PixelClass::Unchanged),
                    "uncertain": pre.map.count(PixelClass::Uncertain),
                    "samples": ds.len(),
                })
            );
        }
        Command::Train { data } => {
            ctx.apply_training(data);
            let pcfg = ctx.cfg.pipeline();
            pcfg.validate()?;
            let target = ctx.dataset(&data.target, &ctx.cfg.target, "target")?.load()?;
            let pre = preclassify(&target, &pcfg, seed)?;
            let tds = target_dataset(&target, &pre, &pcfg, seed)?;
            let sds = if pcfg.model.enhance {
                let source = ctx.dataset(&data.source, &ctx.cfg.source, "source")?.load()?;
                Some(source_dataset(&source, &pcfg, seed)?)
            } else {
                None
            };
            let trained = train_model(sds.as_ref(), &tds, &pcfg, seed)?;
            trained.checkpoint.save(&ctx.path("model.gks"))?;
            write(&ctx.path("history.jsonl"), &history_jsonl(&trained.history))?;
        }
        Command::Predict { checkpoint, target, mode } => {
            let ck = Checkpoint::load(checkpoint)?;
            let pair = ctx.dataset(target, &ctx.cfg.target, "target")?.load()?;
            let pcfg = ctx.cfg.pipeline();
            let pre = preclassify(&pair, &pcfg, seed)?;
            let mode = mode.map_or(pcfg.predict_mode, PredictMode::from);
            let map = predict(&pair, &pre, &ck, mode)?;
            save_map(&map, &ctx.path("change_map.pgm"))?;
            if let Some(gt) = pair.ground_truth() {
                let m = Metrics::evaluate(&map, gt)?;
                write(&ctx.path("metrics.json"), &m.to_json())?;
            }
        }
        Command::Evaluate { map, gt } => {
            let m = Metrics::evaluate(&load_mask(map)?, &load_mask(gt)?)?;
            let json = m.to_json();
            write(&ctx.path("metrics.json"), &json)?;
            println!("{json}");
        }
        Command::Sweep { axis, values, seeds, data } => {
            ctx.apply_training(data);
            let axis = SweepAxis::parse(axis)?;
            let values = if values.is_empty() { axis.default_values() } else { values.clone() };
            let source = ctx.dataset(&data.source, &ctx.cfg.source, "source")?.load()?;
            let target = ctx.dataset(&data.target, &ctx.cfg.target, "target")?.load()?;
            let seeds = ctx.seeds(seeds);
            let pcfg = ctx.cfg.pipeline();
            let rows = thread_pool()?.install(|| run_sweep(&source, &target, &pcfg, axis, &values, &seeds))?;
            let csv = sweep_csv(axis, &rows);
            write(&ctx.path(&format!("sweep_{}.csv", axis.name())), &csv)?;
            print!("{csv}");
        }
        Command::Ablate { variants, seeds, data } => {
            ctx.apply_training(data);
            let variants = variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?;
            let source = ctx.dataset(&data.source, &ctx.cfg.source, "source")?.load()?;
            let target = ctx.dataset(&data.target, &ctx.cfg.target, "target")?.load()?;
            let seeds = ctx.seeds(seeds);
            let pcfg = ctx.cfg.pipeline();
            let rows = thread_pool()?.install(|| run_ablation(&source, &target, &pcfg, &variants, &seeds))?;
            let csv = ablation_csv(&rows);
            write(&ctx.path("ablation.csv"), &csv)?;
            for (v, m) in mean_pcc(&rows) {
                println!("{} {m:.2}", v.name());
            }
        }
        Command::Combine { datasets, seeds, epochs } => {
            if let Some(e) = epochs {
                ctx.cfg.train.epochs = *e;
            }
            let paths: Vec<DatasetPaths> = if datasets.is_empty() {
                ctx.cfg.datasets.clone()
            } else {
                datasets.iter().map(DatasetPaths::from_dir).collect()
            };
            let loaded = paths
                .iter()
                .map(|d| Ok((d.label(), d.load()?)))
                .collect::<Result<Vec<_>>>()?;
            let names: Vec<String> = loaded.iter().map(|(n, _)| n.clone()).collect();
            let seeds = ctx.seeds(seeds);
            let pcfg = ctx.cfg.pipeline();
            let cells = thread_pool()?.install(|| run_combination_matrix(&loaded, &pcfg, &seeds))?;
            let csv = combination_csv(&names, &cells);
            write(&ctx.path("combination.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}
