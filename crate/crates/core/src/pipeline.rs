//! End-to-end runs: preclassification, training, prediction and scoring,
//! plus the ablation, combination and parameter-sweep harnesses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{GksError, Result};
use crate::eval::{predict_change_map, ChangeMap, Metrics, PredictMode};
use crate::model::{Fusion, ModelConfig, Similarity};
use crate::preclass::{
    hierarchical_preclassify, log_ratio_di, select_training_samples, DifferenceImage, ImagePair,
    PatchExtractor, PreclassMap, DEFAULT_LOG_EPS,
};
use crate::train::{build_support_set, train, EpochRecord, PatchDataset, TrainConfig};

/// Settings shared by every stage of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample_ratio: f64,
    pub log_eps: f64,
    pub predict_mode: PredictMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sample_ratio: 0.03,
            log_eps: DEFAULT_LOG_EPS,
            predict_mode: PredictMode::UncertainOnly,
        }
    }
}

impl PipelineConfig {
    /// Desk-scale profile: 30 epochs, otherwise the defaults.
    pub fn desk() -> Self {
        PipelineConfig {
            train: TrainConfig::desk(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(GksError::Config("sample_ratio must lie in (0, 1]".into()));
        }
        if !(self.log_eps > 0.0) {
            return Err(GksError::Config("log_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Independent stream seed for one stage of a run.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_PRECLASS: u64 = 1;
const STAGE_TARGET_SAMPLES: u64 = 2;
const STAGE_SOURCE_SAMPLES: u64 = 3;
const STAGE_TRAIN: u64 = 4;
const STAGE_SUPPORT: u64 = 5;

/// Target-side preprocessing.
#[derive(Debug, Clone)]
pub struct Preclassified {
    pub di: DifferenceImage,
    pub map: PreclassMap,
}

pub fn preclassify(pair: &ImagePair, cfg: &PipelineConfig, seed: u64) -> Result<Preclassified> {
    let di = log_ratio_di(pair, cfg.log_eps)?;
    let map = hierarchical_preclassify(&di, stage_seed(seed, STAGE_PRECLASS))?;
    Ok(Preclassified { di, map })
}

/// Training samples of the target, labeled by preclassification.
pub fn target_dataset(pair: &ImagePair, pre: &Preclassified, cfg: &PipelineConfig, seed: u64) -> Result<PatchDataset> {
    let samples = select_training_samples(&pre.map, cfg.sample_ratio, stage_seed(seed, STAGE_TARGET_SAMPLES))?;
    PatchDataset::new(pair, &pre.di, samples, cfg.model.r)
}

/// Training samples of a labeled source, drawn from its ground truth.
pub fn source_dataset(pair: &ImagePair, cfg: &PipelineConfig, seed: u64) -> Result<PatchDataset> {
    let gt = pair
        .ground_truth()
        .ok_or_else(|| GksError::InvalidInput("source dataset needs a ground-truth mask".into()))?;
    let di = log_ratio_di(pair, cfg.log_eps)?;
    let map = PreclassMap::from_mask(gt);
    let samples = select_training_samples(&map, cfg.sample_ratio, stage_seed(seed, STAGE_SOURCE_SAMPLES))?;
    PatchDataset::new(pair, &di, samples, cfg.model.r)
}

/// Trained model with its support set and per-epoch history.
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub fn train_model(
    source: Option<&PatchDataset>,
    target: &PatchDataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Trained> {
    let train_cfg = TrainConfig {
        seed: stage_seed(seed, STAGE_TRAIN),
        ..cfg.train.clone()
    };
    let source = if cfg.model.enhance { source } else { None };
    let outcome = train(source, target, &cfg.model, &train_cfg)?;
    let support = match source {
        Some(s) => Some(build_support_set(
            s,
            cfg.train.support_size.min(s.len()),
            stage_seed(seed, STAGE_SUPPORT),
        )?),
        None => None,
    };
    Ok(Trained {
        checkpoint: Checkpoint {
            config: cfg.model.clone(),
            params: outcome.params,
            support,
        },
        history: outcome.history,
    })
}

pub fn predict(
    pair: &ImagePair,
    pre: &Preclassified,
    checkpoint: &Checkpoint,
    mode: PredictMode,
) -> Result<ChangeMap> {
    let extractor = PatchExtractor::new(pair, &pre.di)?;
    predict_change_map(
        &extractor,
        &pre.map,
        &checkpoint.params,
        &checkpoint.config,
        checkpoint.support.as_ref(),
        mode,
    )
}

pub struct RunOutput {
    pub preclassified: Preclassified,
    pub trained: Trained,
    pub change_map: ChangeMap,
    /// Present when the target has ground truth.
    pub metrics: Option<Metrics>,
}

/// Full run with a labeled `source` and an unlabeled (for training) `target`.
pub fn run_pipeline(source: &ImagePair, target: &ImagePair, cfg: &PipelineConfig, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let pre = preclassify(target, cfg, seed)?;
    let target_ds = target_dataset(target, &pre, cfg, seed)?;
    let source_ds = if cfg.model.enhance {
        Some(source_dataset(source, cfg, seed)?)
    } else {
        None
    };
    let trained = train_model(source_ds.as_ref(), &target_ds, cfg, seed)?;
    let change_map = predict(target, &pre, &trained.checkpoint, cfg.predict_mode)?;
    let metrics = match target.ground_truth() {
        Some(gt) => Some(Metrics::evaluate(&change_map, gt)?),
        None => None,
    };
    Ok(RunOutput {
        preclassified: pre,
        trained,
        change_map,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Basic,
    NoFusion,
    Gaussian,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Basic, Variant::NoFusion, Variant::Gaussian, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::NoFusion => "no_fusion",
            Variant::Gaussian => "gaussian",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GksError::Config(format!("unknown variant {s:?} (basic, no_fusion, gaussian, full)")))
    }

    /// The base model config adjusted for this variant.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        match self {
            Variant::Basic => m.enhance = false,
            Variant::NoFusion => {
                m.enhance = true;
                m.fusion = Fusion::None;
            }
            Variant::Gaussian => {
                m.enhance = true;
                m.fusion = Fusion::Full;
                m.similarity = Similarity::Gaussian;
            }
            Variant::Full => {
                m.enhance = true;
                m.fusion = Fusion::Full;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Metrics,
}

fn require_gt(pair: &ImagePair, what: &str) -> Result<()> {
    if pair.ground_truth().is_none() {
        return Err(GksError::InvalidInput(format!("{what} needs a ground-truth mask")));
    }
    Ok(())
}

/// Runs every (variant, seed) cell; rows come back in variant-major order.
pub fn run_ablation(
    source: &ImagePair,
    target: &ImagePair,
    base: &PipelineConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(GksError::Config("ablation needs at least one seed".into()));
    }
    require_gt(target, "ablation target")?;
    let cells: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = PipelineConfig {
                model: variant.apply(&base.model),
                ..base.clone()
            };
            let out = run_pipeline(source, target, &cfg, seed)?;
            Ok(AblationRow {
                variant,
                seed,
                metrics: out.metrics.expect("target has ground truth"),
            })
        })
        .collect()
}

/// Mean PCC per variant, in first-appearance order.
pub fn mean_pcc(rows: &[AblationRow]) -> Vec<(Variant, f64)> {
    let mut out: Vec<(Variant, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(v, _, _)| *v == r.variant) {
            Some(e) => {
                e.1 += r.metrics.pcc;
                e.2 += 1;
            }
            None => out.push((r.variant, r.metrics.pcc, 1)),
        }
    }
    out.into_iter().map(|(v, s, n)| (v, s / n as f64)).collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,pcc,kc,f1,oe\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.name(),
            r.seed,
            r.metrics.pcc,
            crate::eval::csv_value(r.metrics.kc),
            crate::eval::csv_value(r.metrics.f1),
            r.metrics.oe
        ));
    }
    for (v, m) in mean_pcc(rows) {
        s.push_str(&format!("{},mean,{m},,,\n", v.name()));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationCell {
    pub source: String,
    pub target: String,
    pub seed: u64,
    pub metrics: Metrics,
}

/// Trains every ordered (source, target) pair with source ≠ target.
pub fn run_combination_matrix(
    datasets: &[(String, ImagePair)],
    cfg: &PipelineConfig,
    seeds: &[u64],
) -> Result<Vec<CombinationCell>> {
    if datasets.len() < 2 {
        return Err(GksError::Config("combination matrix needs at least two datasets".into()));
    }
    if seeds.is_empty() {
        return Err(GksError::Config("combination matrix needs at least one seed".into()));
    }
    for (name, pair) in datasets {
        require_gt(pair, name)?;
    }
    let mut cells = Vec::new();
    for s in 0..datasets.len() {
        for t in 0..datasets.len() {
            if s != t {
                for &seed in seeds {
                    cells.push((s, t, seed));
                }
            }
        }
    }
    cells
        .par_iter()
        .map(|&(s, t, seed)| {
            let out = run_pipeline(&datasets[s].1, &datasets[t].1, cfg, seed)?;
            Ok(CombinationCell {
                source: datasets[s].0.clone(),
                target: datasets[t].0.clone(),
                seed,
                metrics: out.metrics.expect("target has ground truth"),
            })
        })
        .collect()
}

/// Matrix CSV: one row per source, one column per target, diagonal `---`.
/// Cells hold the mean PCC over seeds.
pub fn combination_csv(names: &[String], cells: &[CombinationCell]) -> String {
    let mut s = String::from("source");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for src in names {
        s.push_str(src);
        for tgt in names {
            s.push(',');
            if src == tgt {
                s.push_str("---");
                continue;
            }
            let v: Vec<f64> = cells
                .iter()
                .filter(|c| &c.source == src && &c.target == tgt)
                .map(|c| c.metrics.pcc)
                .collect();
            if !v.is_empty() {
                s.push_str(&format!("{:.2}", v.iter().sum::<f64>() / v.len() as f64));
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    N,
    R,
    Ratio,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(SweepAxis::N),
            "r" => Ok(SweepAxis::R),
            "ratio" => Ok(SweepAxis::Ratio),
            _ => Err(GksError::Config(format!("unknown sweep axis {s:?} (n, r, ratio)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::R => "r",
            SweepAxis::Ratio => "ratio",
        }
    }

    /// Default grid for the axis.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::N => vec![1.0, 2.0, 3.0, 4.0, 5.0],
            SweepAxis::R => vec![3.0, 5.0, 7.0, 9.0, 11.0, 13.0],
            SweepAxis::Ratio => vec![0.01, 0.02, 0.03, 0.04, 0.05],
        }
    }

    pub fn apply(self, base: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(GksError::Config(format!("sweep value {v} must be a positive integer")))
            }
        };
        match self {
            SweepAxis::N => cfg.model.n_layers = as_count(value)?,
            SweepAxis::R => cfg.model.r = as_count(value)?,
            SweepAxis::Ratio => cfg.sample_ratio = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

pub fn run_sweep(
    source: &ImagePair,
    target: &ImagePair,
    base: &PipelineConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() || values.is_empty() {
        return Err(GksError::Config("sweep needs at least one value and one seed".into()));
    }
    require_gt(target, "sweep target")?;
    let cells: Vec<(PipelineConfig, f64, u64)> = values
        .iter()
        .map(|&v| axis.apply(base, v).map(|c| (c, v)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|(c, v)| seeds.iter().map(move |&s| (c.clone(), v, s)))
        .collect();
    cells
        .par_iter()
        .map(|(cfg, value, seed)| {
            let out = run_pipeline(source, target, cfg, *seed)?;
            Ok(SweepRow {
                value: *value,
                seed: *seed,
                metrics: out.metrics.expect("target has ground truth"),
            })
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{},seed,pcc,kc,f1,oe\n", axis.name());
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value,
            r.seed,
            r.metrics.pcc,
            crate::eval::csv_value(r.metrics.kc),
            crate::eval::csv_value(r.metrics.f1),
            r.metrics.oe
        ));
    }
    s
}

/// Worker pool sized by `GKS_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("GKS_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| GksError::Config(format!("GKS_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| GksError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_projection() {
        let base = ModelConfig::default();
        assert!(!Variant::Basic.apply(&base).enhance);
        assert_eq!(Variant::NoFusion.apply(&base).fusion, Fusion::None);
        assert_eq!(Variant::Gaussian.apply(&base).similarity, Similarity::Gaussian);
        assert_eq!(Variant::Full.apply(&base), base);
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn sweep_grids() {
        assert_eq!(SweepAxis::N.default_values(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(SweepAxis::R.default_values().len(), 6);
        assert!(SweepAxis::R.apply(&PipelineConfig::default(), 4.0).is_err());
    }

    #[test]
    fn combination_csv_diagonal() {
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = combination_csv(&names, &[]);
        assert_eq!(csv, "source,a,b\na,---,\nb,,---\n");
    }
}
