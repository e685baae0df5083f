//! Change maps and accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GksError, Result};
use crate::grid::Mask;
use crate::kernels::BnMode;
use crate::model::{self, Bound, ModelConfig, ModelParams};
use crate::preclass::{Center, PatchExtractor, PixelClass, PreclassMap};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::SupportSet;

/// Binary change map, 1 = changed.
pub type ChangeMap = Mask;

/// Patches per inference forward pass.
pub const INFERENCE_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    #[default]
    UncertainOnly,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Overall error, `FP + FN`.
    pub fn oe(&self) -> u64 {
        self.fp + self.fn_
    }

    /// Changed pixels in the ground truth.
    pub fn n_c(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Unchanged pixels in the ground truth.
    pub fn n_u(&self) -> u64 {
        self.tn + self.fp
    }

    /// Counts with the roles of changed and unchanged swapped.
    pub fn complement(&self) -> Counts {
        Counts {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

pub fn confusion_counts(cm: &ChangeMap, gt: &Mask) -> Result<Counts> {
    if !cm.same_dims(gt) {
        return Err(shape_err!(
            "change map is {:?} but ground truth is {:?}",
            cm.dims(),
            gt.dims()
        ));
    }
    let mut c = Counts::default();
    for (&p, &g) in cm.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Percentage of correctly classified pixels.
pub fn pcc(counts: &Counts, pixels: u64) -> f64 {
    assert!(pixels > 0, "pcc needs a nonempty image");
    let n = pixels as f64;
    (n - counts.oe() as f64) / n * 100.0
}

/// Expected chance agreement used by the kappa coefficient.
pub fn pre(counts: &Counts) -> f64 {
    let (n_c, n_u) = (counts.n_c() as f64, counts.n_u() as f64);
    let (fp, fn_) = (counts.fp as f64, counts.fn_ as f64);
    let n = n_c + n_u;
    ((n_c + fp - fn_) * n_c + (n_u + fn_ - fp) * n_u) / (n * n)
}

/// Kappa coefficient in percent, `None` when chance agreement is 1.
pub fn kc(counts: &Counts) -> Option<f64> {
    if counts.total() == 0 {
        return None;
    }
    let pre = pre(counts);
    if pre >= 1.0 {
        return None;
    }
    let p = pcc(counts, counts.total()) / 100.0;
    Some((p - pre) / (1.0 - pre) * 100.0)
}

/// `2TP / (2TP + FP + FN)`, `None` when the denominator is zero.
pub fn f1(counts: &Counts) -> Option<f64> {
    let den = 2 * counts.tp + counts.fp + counts.fn_;
    if den == 0 {
        return None;
    }
    Some(2.0 * counts.tp as f64 / den as f64)
}

fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

/// Report form of the metrics: PCC and KC in percent with two decimals, F1
/// as a fraction with four. Undefined values serialize as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
    pub tn: u64,
    pub oe: u64,
    pub pcc: f64,
    pub kc: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    pub fn from_counts(c: &Counts) -> Self {
        Metrics {
            fp: c.fp,
            fn_: c.fn_,
            tp: c.tp,
            tn: c.tn,
            oe: c.oe(),
            pcc: round_to(pcc(c, c.total()), 2),
            kc: kc(c).map(|v| round_to(v, 2)),
            f1: f1(c).map(|v| round_to(v, 4)),
        }
    }

    pub fn evaluate(cm: &ChangeMap, gt: &Mask) -> Result<Self> {
        Ok(Self::from_counts(&confusion_counts(cm, gt)?))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// CSV cell for an optional metric.
pub fn csv_value(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

/// Network decisions (0/1) for the given pixels.
///
/// Target patch `j` of the list is paired with support sample
/// `j mod k`. Support backbone features are computed once.
pub fn classify_pixels(
    params: &ModelParams,
    cfg: &ModelConfig,
    support: Option<&SupportSet>,
    extractor: &PatchExtractor,
    centers: &[Center],
) -> Result<Vec<u8>> {
    if let Some(bad) = params.first_non_finite() {
        return Err(GksError::NonFinite(format!("model parameter {bad}")));
    }
    let mut buffers = params.buffers.clone();
    let support_features = if cfg.enhance {
        let s = support
            .filter(|s| !s.is_empty())
            .ok_or_else(|| GksError::Config("graph-enhanced prediction needs a nonempty support set".into()))?;
        if s.r() != cfg.r {
            return Err(GksError::Config(format!(
                "support patches use r={} but the model expects r={}",
                s.r(),
                cfg.r
            )));
        }
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let x = tape.constant(s.patches.clone());
        let f = model::backbone_forward(&mut tape, &bound, &mut buffers, x, BnMode::Infer)?;
        Some(tape.value(f).clone())
    } else {
        None
    };

    let mut out = Vec::with_capacity(centers.len());
    for (b, chunk) in centers.chunks(INFERENCE_BATCH).enumerate() {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let input = tape.constant(extractor.batch(chunk, cfg.r)?);
        let xt = model::backbone_forward(&mut tape, &bound, &mut buffers, input, BnMode::Infer)?;
        let features = match &support_features {
            Some(sf) => {
                let k = sf.shape()[0];
                let per = sf.len() / k;
                let mut shape = sf.shape().to_vec();
                shape[0] = chunk.len();
                let mut data = Vec::with_capacity(chunk.len() * per);
                for j in 0..chunk.len() {
                    let s = (b * INFERENCE_BATCH + j) % k;
                    data.extend_from_slice(&sf.data()[s * per..(s + 1) * per]);
                }
                let xl = tape.constant(Tensor::new(&shape, data)?);
                model::enhance_features(&mut tape, &bound, cfg, xt, Some(xl))?.target
            }
            None => xt,
        };
        let logits = model::classify(&mut tape, &bound, features)?;
        let l = tape.value(logits);
        if !l.is_finite() {
            return Err(GksError::NonFinite("prediction logits".into()));
        }
        out.extend(l.data().chunks_exact(2).map(|row| u8::from(row[1] > row[0])));
    }
    Ok(out)
}

/// Assembles the change map. In `UncertainOnly` mode confident pixels keep
/// their preclassification label and only uncertain pixels reach the network.
pub fn predict_change_map(
    extractor: &PatchExtractor,
    preclass: &PreclassMap,
    params: &ModelParams,
    cfg: &ModelConfig,
    support: Option<&SupportSet>,
    mode: PredictMode,
) -> Result<ChangeMap> {
    let (h, w) = preclass.dims();
    if extractor.dims() != (h, w) {
        return Err(shape_err!(
            "preclassification is {:?} but the image pair is {:?}",
            (h, w),
            extractor.dims()
        ));
    }
    let mut map = Mask::filled(h, w, 0);
    let mut queued = Vec::new();
    for row in 0..h {
        for col in 0..w {
            match (mode, *preclass.labels.get(row, col)) {
                (PredictMode::UncertainOnly, PixelClass::Changed) => map.set(row, col, 1),
                (PredictMode::UncertainOnly, PixelClass::Unchanged) => {}
                _ => queued.push((row, col)),
            }
        }
    }
    if queued.is_empty() {
        return Ok(map);
    }
    let decisions = classify_pixels(params, cfg, support, extractor, &queued)?;
    for (&(row, col), d) in queued.iter().zip(decisions) {
        map.set(row, col, d);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Counts {
        Counts { tp, tn, fp, fn_ }
    }

    #[test]
    fn pcc_examples() {
        let c = counts(0, 65536 - 1010, 706, 304);
        assert!((pcc(&c, 65536) - 98.46).abs() < 0.005);
        let c = counts(0, 290 * 350 - 1654, 825, 829);
        assert!((pcc(&c, 290 * 350) - 98.37).abs() < 0.005);
        assert_eq!(pcc(&counts(5, 5, 0, 0), 10), 100.0);
    }

    #[test]
    fn kc_examples() {
        let c = counts(900, 8900, 100, 100);
        assert!((pre(&c) - 0.82).abs() < 1e-12);
        assert!((kc(&c).unwrap() - 100.0 * 0.16 / 0.18).abs() < 1e-9);
        assert_eq!(kc(&counts(10, 10, 0, 0)), Some(100.0));
        assert_eq!(kc(&counts(0, 50, 0, 50)), Some(0.0));
        assert_eq!(kc(&counts(0, 100, 0, 0)), None);
    }

    #[test]
    fn f1_examples() {
        assert!((f1(&counts(900, 8900, 100, 100)).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(f1(&counts(10, 10, 0, 0)), Some(1.0));
        assert_eq!(f1(&counts(0, 90, 10, 0)), Some(0.0));
        assert_eq!(f1(&counts(0, 100, 0, 0)), None);
    }

    #[test]
    fn metrics_json_shape() {
        let m = Metrics::from_counts(&counts(3, 5, 0, 0));
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(v["oe"], 0);
        assert_eq!(v["pcc"], 100.0);
        assert_eq!(v["fn"], 0);
        let m = Metrics::from_counts(&counts(0, 8, 0, 0));
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert!(v["kc"].is_null() && v["f1"].is_null());
        assert_eq!(csv_value(m.kc), "undefined");
    }
}
