//! JSON run configuration and dataset locations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GksError, Result};
use crate::eval::PredictMode;
use crate::imageio::{load_image, load_mask};
use crate::model::ModelConfig;
use crate::pipeline::PipelineConfig;
use crate::preclass::{ImagePair, DEFAULT_LOG_EPS};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// File names used inside a dataset directory.
pub const IMG1_STEM: &str = "img1";
pub const IMG2_STEM: &str = "img2";
pub const GT_STEM: &str = "gt";

/// Location of an image pair. Either `dir` (holding `img1`, `img2` and an
/// optional `gt` as `.pgm` or `.png`) or explicit file paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPaths {
    pub dir: Option<PathBuf>,
    pub img1: Option<PathBuf>,
    pub img2: Option<PathBuf>,
    pub gt: Option<PathBuf>,
}

fn find_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["pgm", "png"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn require_file(p: &Path) -> Result<PathBuf> {
    if p.is_file() {
        Ok(p.to_path_buf())
    } else {
        Err(GksError::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

/// Resolved image-pair files.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedDataset {
    pub img1: PathBuf,
    pub img2: PathBuf,
    pub gt: Option<PathBuf>,
}

impl DatasetPaths {
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        DatasetPaths {
            dir: Some(dir.into()),
            ..Default::default()
        }
    }

    /// Checks that every referenced file exists.
    pub fn resolve(&self) -> Result<ResolvedDataset> {
        let pick = |explicit: &Option<PathBuf>, stem: &str| -> Result<PathBuf> {
            if let Some(p) = explicit {
                return require_file(p);
            }
            let dir = self
                .dir
                .as_ref()
                .ok_or_else(|| GksError::Config(format!("dataset needs `dir` or `{stem}`")))?;
            find_stem(dir, stem).ok_or_else(|| {
                GksError::io(
                    dir.join(format!("{stem}.pgm")),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                )
            })
        };
        let gt = match (&self.gt, &self.dir) {
            (Some(p), _) => Some(require_file(p)?),
            (None, Some(dir)) => find_stem(dir, GT_STEM),
            (None, None) => None,
        };
        Ok(ResolvedDataset {
            img1: pick(&self.img1, IMG1_STEM)?,
            img2: pick(&self.img2, IMG2_STEM)?,
            gt,
        })
    }

    pub fn load(&self) -> Result<ImagePair> {
        let r = self.resolve()?;
        let gt = match &r.gt {
            Some(p) => Some(load_mask(p)?),
            None => None,
        };
        ImagePair::new(load_image(&r.img1)?, load_image(&r.img2)?, gt)
    }

    /// Short label: the directory name, or the first image's stem.
    pub fn label(&self) -> String {
        self.dir
            .as_ref()
            .or(self.img1.as_ref())
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source: Option<DatasetPaths>,
    pub target: Option<DatasetPaths>,
    /// Datasets for the combination matrix.
    pub datasets: Vec<DatasetPaths>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample_ratio: f64,
    pub log_eps: f64,
    pub predict_mode: PredictMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            source: None,
            target: None,
            datasets: Vec::new(),
            seed: 0,
            out_dir: None,
            synth: SynthConfig::default(),
            model: p.model,
            train: p.train,
            sample_ratio: p.sample_ratio,
            log_eps: DEFAULT_LOG_EPS,
            predict_mode: p.predict_mode,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates, including that referenced files exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GksError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.synth.validate()?;
        for d in self.source.iter().chain(&self.target).chain(&self.datasets) {
            d.resolve()?;
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            sample_ratio: self.sample_ratio,
            log_eps: self.log_eps,
            predict_mode: self.predict_mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::from_json(r#"{"model": {"r": 9}, "train": {"epochs": 5}}"#).unwrap();
        assert_eq!(cfg.model.r, 9);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.base_lr, 1e-4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_json(r#"{"model": {"r": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sample_ratio": 0}"#).is_err());
        let err = RunConfig::from_json(r#"{"target": {"dir": "/nonexistent/xyz"}}"#).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/xyz"));
    }
}
