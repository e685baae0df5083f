//! Joint optimization on a labeled source dataset and a pseudo-labeled
//! target dataset.

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GksError, Result};
use crate::kernels::BnMode;
use crate::model::{self, Bound, ModelConfig, ModelParams};
use crate::optim::{adam_step, sgd_step, AdamState, OptimizerKind};
use crate::preclass::{DifferenceImage, ImagePair, LabeledCenter, PatchExtractor, PATCH_CHANNELS};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    /// Last epoch trained at `base_lr`.
    pub decay_start: usize,
    pub decay_every: usize,
    pub batch_size: usize,
    /// Weight of the source-label loss.
    pub loss_weight: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub support_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            base_lr: 1e-4,
            decay_factor: 0.5,
            decay_start: 100,
            decay_every: 50,
            batch_size: 32,
            loss_weight: 1.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            support_size: 64,
        }
    }
}

impl TrainConfig {
    /// Short profile for desk-scale runs: 30 epochs, otherwise the defaults.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(GksError::Config(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be at least 1");
        }
        if !(self.base_lr > 0.0) {
            return fail("base_lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("decay_factor must lie in (0, 1]");
        }
        if self.decay_every < 1 {
            return fail("decay_every must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(self.loss_weight >= 0.0) {
            return fail("loss_weight must be nonnegative");
        }
        if self.support_size < 1 {
            return fail("support_size must be at least 1");
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: constant through `decay_start`, then
/// multiplied by `decay_factor` at `decay_start + 1` and every `decay_every`
/// epochs after that.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    if epoch <= cfg.decay_start {
        return cfg.base_lr;
    }
    let decays = (epoch - cfg.decay_start - 1) / cfg.decay_every + 1;
    cfg.base_lr * cfg.decay_factor.powi(decays as i32)
}

/// Patches available for training, drawn from one image pair.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub extractor: PatchExtractor,
    pub samples: Vec<LabeledCenter>,
    pub r: usize,
}

impl PatchDataset {
    pub fn new(pair: &ImagePair, di: &DifferenceImage, samples: Vec<LabeledCenter>, r: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(GksError::InvalidInput("dataset has no samples".into()));
        }
        Ok(PatchDataset {
            extractor: PatchExtractor::new(pair, di)?,
            samples,
            r,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `B×r×r×3` patches and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let centers: Vec<_> = indices
            .iter()
            .map(|&i| (self.samples[i].row, self.samples[i].col))
            .collect();
        let labels = indices.iter().map(|&i| self.samples[i].label as usize).collect();
        Ok((self.extractor.batch(&centers, self.r)?, labels))
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Index-aligned `(source, target)` batches for one epoch.
///
/// Both index lists are shuffled with a generator derived from `seed` and
/// `epoch`. Every target index appears exactly once; the source permutation
/// is cycled (or truncated) to the target length.
pub fn pair_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    assert!(n_source > 0 && n_target > 0 && batch_size > 0);
    let mut rng = epoch_rng(seed, epoch);
    let mut target: Vec<usize> = (0..n_target).collect();
    target.shuffle(&mut rng);
    let mut source: Vec<usize> = (0..n_source).collect();
    source.shuffle(&mut rng);
    let cycled: Vec<usize> = (0..n_target).map(|k| source[k % n_source]).collect();
    cycled
        .chunks(batch_size)
        .zip(target.chunks(batch_size))
        .map(|(s, t)| (s.to_vec(), t.to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_target: f64,
    pub loss_source: f64,
    pub acc_target_train: f64,
}

/// Fixed source patches that partner target patches at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    /// `k×r×r×3`.
    pub patches: Tensor,
    pub labels: Vec<u8>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn r(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Support patches for `count` consecutive targets starting at `offset`,
    /// assigned round-robin.
    pub fn round_robin(&self, offset: usize, count: usize) -> Result<Tensor> {
        let r = self.r();
        let len = r * r * PATCH_CHANNELS;
        let k = self.len();
        let mut data = Vec::with_capacity(count * len);
        for j in 0..count {
            let s = (offset + j) % k;
            data.extend_from_slice(&self.patches.data()[s * len..(s + 1) * len]);
        }
        Tensor::new(&[count, r, r, PATCH_CHANNELS], data)
    }
}

/// Draws `k` source samples uniformly without replacement.
pub fn build_support_set(source: &PatchDataset, k: usize, seed: u64) -> Result<SupportSet> {
    if k == 0 || k > source.len() {
        return Err(GksError::Config(format!(
            "support size {k} must be between 1 and the source dataset size {}",
            source.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, source.len(), k).into_vec();
    let (patches, labels) = source.batch(&picks)?;
    Ok(SupportSet {
        patches,
        labels: labels.into_iter().map(|l| l as u8).collect(),
    })
}

/// Losses and gradients of one training step.
pub struct StepResult {
    pub loss_target: f64,
    pub loss_source: Option<f64>,
    pub correct_target: usize,
    pub grads: IndexMap<String, Tensor>,
}

fn describe_node(bound: &Bound, idx: usize) -> String {
    bound
        .iter()
        .find(|(_, v)| v.index() == idx)
        .map(|(n, _)| n.to_string())
        .unwrap_or_else(|| format!("intermediate tensor #{idx}"))
}

/// Forward and backward pass for one paired batch in train mode.
///
/// The loss is `CE(target) + loss_weight · CE(source)`; the source term is
/// present whenever the model has a graph branch and a source batch is given.
/// Batch-norm running statistics in `params.buffers` are updated.
pub fn train_step(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    target: (Tensor, &[usize]),
    source: Option<(Tensor, &[usize])>,
    loss_weight: f64,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let t = tape.constant(target.0);
    let (s, source_labels) = match source {
        Some((x, l)) if cfg.enhance => (Some(tape.constant(x)), Some(l)),
        _ => (None, None),
    };
    let out = model::forward(&mut tape, &bound, &mut params.buffers, cfg, t, s, BnMode::Train)?;
    let lt = tape.cross_entropy(out.target_logits, target.1)?;
    let (loss, ls) = match (out.source_logits, source_labels) {
        (Some(logits), Some(labels)) => {
            let ls = tape.cross_entropy(logits, labels)?;
            let weighted = tape.scale(ls, loss_weight);
            (tape.add(lt, weighted)?, Some(ls))
        }
        _ => (lt, None),
    };
    if !tape.value(loss).item().is_finite() {
        let idx = tape.first_non_finite().unwrap_or(loss.index());
        return Err(GksError::NonFinite(format!(
            "training loss; first non-finite tensor is {}",
            describe_node(&bound, idx)
        )));
    }
    let logits = tape.value(out.target_logits);
    let correct_target = logits
        .data()
        .chunks_exact(2)
        .zip(target.1)
        .filter(|(row, &l)| usize::from(row[1] > row[0]) == l)
        .count();
    let mut g = tape.backward(loss)?;
    let mut grads = IndexMap::new();
    for (name, var) in bound.iter() {
        let grad = g
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(params.trainable[name].shape()));
        if !grad.is_finite() {
            return Err(GksError::NonFinite(format!("gradient of {name}")));
        }
        grads.insert(name.to_string(), grad);
    }
    Ok(StepResult {
        loss_target: tape.value(lt).item(),
        loss_source: ls.map(|v| tape.value(v).item()),
        correct_target,
        grads,
    })
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// Trains a freshly initialized model. `source` may be `None` only for a
/// model without graph enhancement.
pub fn train(
    source: Option<&PatchDataset>,
    target: &PatchDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_callback(source, target, model_cfg, cfg, |_| {})
}

pub fn train_with_callback(
    source: Option<&PatchDataset>,
    target: &PatchDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if target.r != model_cfg.r {
        return Err(GksError::Config(format!(
            "target patches use r={} but the model expects r={}",
            target.r, model_cfg.r
        )));
    }
    let source = if model_cfg.enhance {
        let s = source.ok_or_else(|| {
            GksError::Config("graph-enhanced training needs a source dataset".into())
        })?;
        if s.r != model_cfg.r {
            return Err(GksError::Config(format!(
                "source patches use r={} but the model expects r={} (one common patch side)",
                s.r, model_cfg.r
            )));
        }
        Some(s)
    } else {
        None
    };

    let mut params = model::model_init(model_cfg, cfg.seed)?;
    let names: Vec<String> = params.trainable.keys().cloned().collect();
    let mut adam = AdamState::new(&params.trainable.values().collect::<Vec<_>>());
    let mut history = Vec::with_capacity(cfg.epochs);
    let n_source = source.map_or(1, |s| s.len());

    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let (mut sum_t, mut sum_s, mut correct, mut seen, mut seen_s) = (0.0, 0.0, 0, 0, 0);
        for (sidx, tidx) in pair_batches(n_source, target.len(), cfg.batch_size, cfg.seed, epoch) {
            let (tx, tl) = target.batch(&tidx)?;
            let src = match source {
                Some(s) => Some(s.batch(&sidx)?),
                None => None,
            };
            let step = train_step(
                &mut params,
                model_cfg,
                (tx, &tl),
                src.as_ref().map(|(x, l)| (x.clone(), l.as_slice())),
                cfg.loss_weight,
            )?;
            let b = tidx.len();
            sum_t += step.loss_target * b as f64;
            if let Some(ls) = step.loss_source {
                sum_s += ls * b as f64;
                seen_s += b;
            }
            correct += step.correct_target;
            seen += b;

            let grads: Vec<&Tensor> = names.iter().map(|n| &step.grads[n]).collect();
            let mut ps: Vec<&mut Tensor> = params.trainable.values_mut().collect();
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(&mut ps, &grads, lr, &mut adam),
                OptimizerKind::Sgd => sgd_step(&mut ps, &grads, lr),
            }
            if let Some(bad) = params.first_non_finite() {
                return Err(GksError::NonFinite(format!("parameter {bad} after update")));
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss_target: sum_t / seen as f64,
            loss_source: if seen_s > 0 { sum_s / seen_s as f64 } else { 0.0 },
            acc_target_train: correct as f64 / seen as f64,
        };
        log::debug!(
            "epoch {epoch}: lr {lr:.2e} target loss {:.4} source loss {:.4} acc {:.3}",
            record.loss_target,
            record.loss_source,
            record.acc_target_train
        );
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { params, history })
}

/// History as JSON lines.
pub fn history_jsonl(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in history {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}
