//! The change classifier: convolutional backbone, graph projection,
//! intra-graph reasoning on both datasets, inter-graph fusion into the
//! target branch, residual reprojection and a two-layer classifier.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GksError, Result};
use crate::kernels::BnMode;
use crate::preclass::PATCH_CHANNELS;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Node similarity used to build the transfer matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Cosine,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Full,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch side in pixels (odd).
    pub r: usize,
    /// Width of the three 3x3 backbone layers.
    pub width: usize,
    /// Backbone output channels.
    pub c: usize,
    /// Graph node feature dimension.
    pub d: usize,
    /// Number of graph convolutions.
    pub n_layers: usize,
    pub similarity: Similarity,
    pub fusion: Fusion,
    /// Classifier hidden width.
    pub hidden: usize,
    /// When false the model is the plain backbone plus classifier and has no
    /// graph parameters.
    pub enhance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            r: 7,
            width: 64,
            c: 128,
            d: 64,
            n_layers: 3,
            similarity: Similarity::Cosine,
            fusion: Fusion::Full,
            hidden: 64,
            enhance: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GksError::Config(m));
        if self.r == 0 || self.r % 2 == 0 {
            return fail(format!("r must be odd, got {}", self.r));
        }
        if self.enhance && self.n_layers < 1 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d < 1 || self.c < 1 || self.width < 1 || self.hidden < 1 {
            return fail("d, c, width and hidden must all be at least 1".into());
        }
        Ok(())
    }

    /// Graph node count `r·r`.
    pub fn nodes(&self) -> usize {
        self.r * self.r
    }

    /// Classifier input width `r·r·c`.
    pub fn flat_width(&self) -> usize {
        self.nodes() * self.c
    }
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub trainable: IndexMap<String, Tensor>,
    pub buffers: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.trainable
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| GksError::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.trainable.get_mut(name) {
            Some(t) => Ok(t),
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| GksError::Config(format!("missing parameter {name}"))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.trainable
            .iter()
            .chain(self.buffers.iter())
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn has_graph(&self) -> bool {
        self.trainable.contains_key(names::PROJECT)
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable.values().map(Tensor::len).sum()
    }
}

/// Parameter naming scheme.
pub mod names {
    pub const BACKBONE_LAYERS: usize = 5;
    pub const PROJECT: &str = "graph.project";
    pub const REPROJECT: &str = "graph.reproject";
    pub const FC1_W: &str = "classifier.fc1.weight";
    pub const FC1_B: &str = "classifier.fc1.bias";
    pub const FC2_W: &str = "classifier.fc2.weight";
    pub const FC2_B: &str = "classifier.fc2.bias";

    pub fn conv_w(l: usize) -> String {
        format!("backbone.conv{l}.weight")
    }
    pub fn conv_b(l: usize) -> String {
        format!("backbone.conv{l}.bias")
    }
    pub fn bn_gamma(l: usize) -> String {
        format!("backbone.bn{l}.gamma")
    }
    pub fn bn_beta(l: usize) -> String {
        format!("backbone.bn{l}.beta")
    }
    pub fn bn_mean(l: usize) -> String {
        format!("backbone.bn{l}.running_mean")
    }
    pub fn bn_var(l: usize) -> String {
        format!("backbone.bn{l}.running_var")
    }
    pub fn target_adj(i: usize) -> String {
        format!("graph.target.adj.{i}")
    }
    pub fn target_w(i: usize) -> String {
        format!("graph.target.weight.{i}")
    }
    pub fn source_adj(i: usize) -> String {
        format!("graph.source.adj.{i}")
    }
    pub fn source_w(i: usize) -> String {
        format!("graph.source.weight.{i}")
    }
    pub fn inter_w(i: usize) -> String {
        format!("graph.inter.weight.{i}")
    }
    pub fn fusion_w(i: usize) -> String {
        format!("graph.fusion.weight.{i}")
    }
    pub fn fusion_b(i: usize) -> String {
        format!("graph.fusion.bias.{i}")
    }
}

/// `(kernel side, in channels, out channels)` of each backbone convolution.
pub fn backbone_layout(cfg: &ModelConfig) -> [(usize, usize, usize); names::BACKBONE_LAYERS] {
    [
        (3, PATCH_CHANNELS, cfg.width),
        (3, cfg.width, cfg.width),
        (3, cfg.width, cfg.width),
        (1, cfg.width, cfg.c),
        (1, cfg.c, cfg.c),
    ]
}

/// Names of parameters only reachable through the source branch.
pub fn source_only_names(cfg: &ModelConfig) -> Vec<String> {
    if !cfg.enhance {
        return Vec::new();
    }
    (0..cfg.n_layers)
        .flat_map(|i| {
            [
                names::source_adj(i),
                names::source_w(i),
                names::inter_w(i),
                names::fusion_w(i),
                names::fusion_b(i),
            ]
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub const ADJ_INIT_STDDEV: f64 = 0.01;

/// Deterministic initialization.
///
/// Weights feeding a ReLU use a uniform bound of `sqrt(6 / fan_in)`, the
/// others `1 / sqrt(fan_in)`. Biases start at zero, adjacency matrices at
/// the identity plus small Gaussian noise, and the reprojection at zero so
/// the enhancement block starts as the identity.
pub fn model_init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trainable = IndexMap::new();
    let mut buffers = IndexMap::new();
    let relu_bound = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
    let lin_bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

    for (i, (k, cin, cout)) in backbone_layout(cfg).into_iter().enumerate() {
        let l = i + 1;
        trainable.insert(
            names::conv_w(l),
            uniform(&mut rng, &[k, k, cin, cout], relu_bound(k * k * cin)),
        );
        trainable.insert(names::conv_b(l), Tensor::zeros(&[cout]));
        trainable.insert(names::bn_gamma(l), Tensor::full(&[cout], 1.0));
        trainable.insert(names::bn_beta(l), Tensor::zeros(&[cout]));
        buffers.insert(names::bn_mean(l), Tensor::zeros(&[cout]));
        buffers.insert(names::bn_var(l), Tensor::full(&[cout], 1.0));
    }

    if cfg.enhance {
        let (n, d, c) = (cfg.nodes(), cfg.d, cfg.c);
        let noise = Normal::new(0.0, ADJ_INIT_STDDEV).expect("valid stddev");
        trainable.insert(names::PROJECT.into(), uniform(&mut rng, &[c, d], lin_bound(c)));
        for i in 0..cfg.n_layers {
            for (adj, w) in [
                (names::target_adj(i), names::target_w(i)),
                (names::source_adj(i), names::source_w(i)),
            ] {
                let mut a = Tensor::eye(n);
                for v in a.data_mut() {
                    *v += noise.sample(&mut rng);
                }
                trainable.insert(adj, a);
                trainable.insert(w, uniform(&mut rng, &[d, d], relu_bound(d)));
            }
            trainable.insert(names::inter_w(i), uniform(&mut rng, &[d, d], lin_bound(d)));
            trainable.insert(
                names::fusion_w(i),
                uniform(&mut rng, &[3 * d, d], relu_bound(3 * d)),
            );
            trainable.insert(names::fusion_b(i), Tensor::zeros(&[d]));
        }
        trainable.insert(names::REPROJECT.into(), Tensor::zeros(&[d, c]));
    }

    let flat = cfg.flat_width();
    trainable.insert(
        names::FC1_W.into(),
        uniform(&mut rng, &[flat, cfg.hidden], relu_bound(flat)),
    );
    trainable.insert(names::FC1_B.into(), Tensor::zeros(&[cfg.hidden]));
    trainable.insert(
        names::FC2_W.into(),
        uniform(&mut rng, &[cfg.hidden, 2], lin_bound(cfg.hidden)),
    );
    trainable.insert(names::FC2_B.into(), Tensor::zeros(&[2]));
    Ok(ModelParams { trainable, buffers })
}

/// Trainable parameters recorded as leaves on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Records every trainable tensor of `params` on `tape`.
    pub fn new(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params
            .trainable
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Pairs already-recorded leaves with names, in the order of `names`.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Bound {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GksError::Config(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Running statistics of the backbone batch norms.
pub type Buffers = IndexMap<String, Tensor>;

fn bn_stats<'a>(buffers: &'a mut Buffers, l: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mean = buffers
        .get(&names::bn_mean(l))
        .ok_or_else(|| GksError::Config(format!("missing {}", names::bn_mean(l))))?;
    let var = buffers
        .get(&names::bn_var(l))
        .ok_or_else(|| GksError::Config(format!("missing {}", names::bn_var(l))))?;
    Ok((mean.data().to_vec(), var.data().to_vec()))
}

fn store_bn_stats(buffers: &mut Buffers, l: usize, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
    let shape = [mean.len()];
    buffers.insert(names::bn_mean(l), Tensor::new(&shape, mean)?);
    buffers.insert(names::bn_var(l), Tensor::new(&shape, var)?);
    Ok(())
}

/// Convolutional backbone: three 3x3 and two 1x1 conv/BN/ReLU layers, the sum
/// of the two 1x1 outputs, and a final ReLU. Spatial size is preserved.
pub fn backbone_forward(
    tape: &mut Tape,
    bound: &Bound,
    buffers: &mut Buffers,
    input: Var,
    mode: BnMode,
) -> Result<Var> {
    let channels = tape.value(input).shape().last().copied().unwrap_or(0);
    if tape.value(input).rank() != 4 || channels != PATCH_CHANNELS {
        return Err(shape_err!(
            "backbone expects B×r×r×{PATCH_CHANNELS} input, got {:?}",
            tape.value(input).shape()
        ));
    }
    let mut x = input;
    let mut layer4 = None;
    for l in 1..=names::BACKBONE_LAYERS {
        let conv = tape.conv2d(x, bound.get(&names::conv_w(l))?, bound.get(&names::conv_b(l))?)?;
        let (mut mean, mut var) = bn_stats(buffers, l)?;
        let bn = tape.batch_norm(
            conv,
            bound.get(&names::bn_gamma(l))?,
            bound.get(&names::bn_beta(l))?,
            &mut mean,
            &mut var,
            mode,
        )?;
        if mode == BnMode::Train {
            store_bn_stats(buffers, l, mean, var)?;
        }
        x = tape.relu(bn);
        if l == 4 {
            layer4 = Some(x);
        }
    }
    let summed = tape.add(layer4.expect("layer 4 ran"), x)?;
    Ok(tape.relu(summed))
}

/// Flattens `B×h×w×c` features to `B×(h·w)×c` nodes in row-major pixel order
/// and maps each node through `projection` (`c×d`).
pub fn project_to_graph(tape: &mut Tape, features: Var, projection: Var) -> Result<Var> {
    let s = tape.value(features).shape().to_vec();
    if s.len() != 4 {
        return Err(shape_err!("projection expects B×h×w×c features, got {s:?}"));
    }
    let nodes = tape.reshape(features, &[s[0], s[1] * s[2], s[3]])?;
    tape.matmul(nodes, projection)
}

/// `ReLU(A · Y · W)` for every item of the batch, with one shared `A`.
pub fn graph_conv_step(tape: &mut Tape, graph: Var, adjacency: Var, weight: Var) -> Result<Var> {
    let yw = tape.matmul(graph, weight)?;
    let ayw = tape.adj_propagate(adjacency, yw)?;
    Ok(tape.relu(ayw))
}

/// Row-stochastic `B×N_t×N_l` matrix of softmax-normalized node similarities.
pub fn transfer_matrix(tape: &mut Tape, target: Var, source: Var, sim: Similarity) -> Result<Var> {
    let scores = match sim {
        Similarity::Cosine => tape.cosine_similarity(target, source)?,
        Similarity::Gaussian => tape.gaussian_similarity(target, source)?,
    };
    tape.softmax_rows(scores)
}

/// Source nodes carried into the target node space: `A_tr · Y_l · W_i`.
pub fn intermediate_graph(tape: &mut Tape, transfer: Var, source: Var, weight: Var) -> Result<Var> {
    let moved = tape.batched_matmul(transfer, source)?;
    tape.matmul(moved, weight)
}

/// `Y_t + ReLU([Y_t, Y_i, Y_l] · W_f + b_f)` per node.
pub fn inter_graph_fusion(
    tape: &mut Tape,
    target: Var,
    intermediate: Var,
    source: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let nt = tape.value(target).shape().to_vec();
    for v in [intermediate, source] {
        let s = tape.value(v).shape();
        if s.len() != nt.len() || (s.len() >= 2 && s[1] != nt[1]) {
            return Err(GksError::Config(format!(
                "inter-graph fusion needs equal node counts (one common patch side r for both datasets); got {:?} and {:?}",
                nt, s
            )));
        }
    }
    let cat = tape.concat(&[target, intermediate, source])?;
    let fc = tape.matmul(cat, weight)?;
    let fc = tape.add_bias(fc, bias)?;
    let gated = tape.relu(fc);
    tape.add(target, gated)
}

/// Enhanced target features and, when a source batch is present, the source
/// branch's own enhanced features (intra-graph reasoning only).
pub struct Enhanced {
    pub target: Var,
    pub source: Option<Var>,
}

/// Graph enhancement of backbone features.
///
/// Both branches are projected to graphs and evolved layer by layer. With
/// full fusion each layer recomputes the transfer matrix from the current
/// evolved graphs and replaces the target graph by its fusion with the
/// source. The final target graph is reprojected and added to `target`.
pub fn enhance_features(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    target: Var,
    source: Option<Var>,
) -> Result<Enhanced> {
    let ts = tape.value(target).shape().to_vec();
    if let Some(s) = source {
        let ss = tape.value(s).shape();
        if ss[1..] != ts[1..] {
            return Err(GksError::Config(format!(
                "source features {:?} and target features {:?} must share r (one common patch side)",
                ss, ts
            )));
        }
        if cfg.fusion == Fusion::Full && ss[0] != ts[0] {
            return Err(shape_err!(
                "paired batches differ in size: target {} vs source {}",
                ts[0],
                ss[0]
            ));
        }
    }
    if cfg.fusion == Fusion::Full && source.is_none() {
        return Err(GksError::InvalidInput(
            "full fusion needs a paired source batch".into(),
        ));
    }
    let proj = bound.get(names::PROJECT)?;
    let mut yt = project_to_graph(tape, target, proj)?;
    let mut yl = match source {
        Some(s) => Some(project_to_graph(tape, s, proj)?),
        None => None,
    };
    for i in 0..cfg.n_layers {
        yt = graph_conv_step(tape, yt, bound.get(&names::target_adj(i))?, bound.get(&names::target_w(i))?)?;
        if let Some(l) = yl {
            yl = Some(graph_conv_step(
                tape,
                l,
                bound.get(&names::source_adj(i))?,
                bound.get(&names::source_w(i))?,
            )?);
        }
        if cfg.fusion == Fusion::Full {
            let l = yl.expect("checked above");
            let atr = transfer_matrix(tape, yt, l, cfg.similarity)?;
            let yi = intermediate_graph(tape, atr, l, bound.get(&names::inter_w(i))?)?;
            yt = inter_graph_fusion(
                tape,
                yt,
                yi,
                l,
                bound.get(&names::fusion_w(i))?,
                bound.get(&names::fusion_b(i))?,
            )?;
        }
    }
    let reproj = bound.get(names::REPROJECT)?;
    let residual = |tape: &mut Tape, graph: Var, base: Var| -> Result<Var> {
        let back = tape.matmul(graph, reproj)?;
        let shape = tape.value(base).shape().to_vec();
        let back = tape.reshape(back, &shape)?;
        tape.add(base, back)
    };
    let target_out = residual(tape, yt, target)?;
    let source_out = match (yl, source) {
        (Some(l), Some(s)) => Some(residual(tape, l, s)?),
        _ => None,
    };
    Ok(Enhanced {
        target: target_out,
        source: source_out,
    })
}

/// Flatten, affine to the hidden width, ReLU, affine to two logits.
pub fn classify(tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
    let s = tape.value(features).shape().to_vec();
    let batch = *s.first().ok_or_else(|| shape_err!("classifier input is a scalar"))?;
    let flat_width = tape.value(features).len() / batch.max(1);
    let flat = tape.reshape(features, &[batch, flat_width])?;
    let h = tape.matmul(flat, bound.get(names::FC1_W)?)?;
    let h = tape.add_bias(h, bound.get(names::FC1_B)?)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, bound.get(names::FC2_W)?)?;
    tape.add_bias(o, bound.get(names::FC2_B)?)
}

pub struct ForwardOutput {
    pub target_logits: Var,
    pub source_logits: Option<Var>,
    pub target_features: Var,
}

/// Full forward pass over a target batch and an optional paired source batch
/// (both `B×r×r×3`).
pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    buffers: &mut Buffers,
    cfg: &ModelConfig,
    target: Var,
    source: Option<Var>,
    mode: BnMode,
) -> Result<ForwardOutput> {
    let xt = backbone_forward(tape, bound, buffers, target, mode)?;
    if !cfg.enhance {
        let logits = classify(tape, bound, xt)?;
        return Ok(ForwardOutput {
            target_logits: logits,
            source_logits: None,
            target_features: xt,
        });
    }
    let xl = match source {
        Some(s) => Some(backbone_forward(tape, bound, buffers, s, mode)?),
        None => None,
    };
    let enhanced = enhance_features(tape, bound, cfg, xt, xl)?;
    let target_logits = classify(tape, bound, enhanced.target)?;
    let source_logits = match enhanced.source {
        Some(s) => Some(classify(tape, bound, s)?),
        None => None,
    };
    Ok(ForwardOutput {
        target_logits,
        source_logits,
        target_features: enhanced.target,
    })
}

/// Untracked convenience versions of the graph operations on single graphs.
pub mod eval {
    use super::*;

    fn batched(t: &Tensor) -> Result<Tensor> {
        match t.shape() {
            [n, d] => t.reshape(&[1, *n, *d]),
            [_, _, _] => Ok(t.clone()),
            s => Err(shape_err!("expected N×d or B×N×d, got {s:?}")),
        }
    }

    fn unbatched(t: &Tensor, like: &Tensor) -> Result<Tensor> {
        if like.rank() == 2 {
            t.reshape(&t.shape()[1..])
        } else {
            Ok(t.clone())
        }
    }

    pub fn transfer_matrix(target: &Tensor, source: &Tensor, sim: Similarity) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = tape.constant(batched(target)?);
        let s = tape.constant(batched(source)?);
        let a = super::transfer_matrix(&mut tape, t, s, sim)?;
        unbatched(tape.value(a), target)
    }

    pub fn graph_conv_step(graph: &Tensor, adjacency: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = tape.constant(batched(graph)?);
        let a = tape.constant(adjacency.clone());
        let w = tape.constant(weight.clone());
        let out = super::graph_conv_step(&mut tape, y, a, w)?;
        unbatched(tape.value(out), graph)
    }

    pub fn intermediate_graph(transfer: &Tensor, source: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(batched(transfer)?);
        let y = tape.constant(batched(source)?);
        let w = tape.constant(weight.clone());
        let out = super::intermediate_graph(&mut tape, a, y, w)?;
        unbatched(tape.value(out), source)
    }

    pub fn inter_graph_fusion(
        target: &Tensor,
        intermediate: &Tensor,
        source: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = tape.constant(batched(target)?);
        let i = tape.constant(batched(intermediate)?);
        let s = tape.constant(batched(source)?);
        let w = tape.constant(weight.clone());
        let b = tape.constant(bias.clone());
        let out = super::inter_graph_fusion(&mut tape, t, i, s, w, b)?;
        unbatched(tape.value(out), target)
    }

    pub fn project_to_graph(features: &Tensor, projection: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let p = tape.constant(projection.clone());
        let out = super::project_to_graph(&mut tape, x, p)?;
        Ok(tape.value(out).clone())
    }
}
