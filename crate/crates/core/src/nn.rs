//! Classifier models with partitioned parameters.
//!
//! Every parameter belongs to exactly one of three roles: updatable
//! (adapted at test time, by default the batch-norm affine scale/shift),
//! batch-norm running statistics, or frozen backbone weights. Model
//! forwards run on a [`Tape`](crate::tensor::Tape) so callers choose which
//! roles receive gradients.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const BN_EPS: f64 = 1e-5;

const CKPT_MAGIC: &[u8; 8] = b"TTDPCKP1";
const CKPT_VERSION: u32 = 1;

/// Which parameters are designated updatable at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpdatableScope {
    /// Batch-norm affine scale/shift only.
    BnAffine,
    /// Every weight outside the running statistics.
    FullBackbone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Updatable,
    BnStat,
    Frozen,
}

impl ParamRole {
    fn code(self) -> u8 {
        match self {
            ParamRole::Updatable => 0,
            ParamRole::BnStat => 1,
            ParamRole::Frozen => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ParamRole::Updatable),
            1 => Some(ParamRole::BnStat),
            2 => Some(ParamRole::Frozen),
            _ => None,
        }
    }
}

/// Reference architectures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    /// input -> hidden -> hidden -> classes, 1-D batch norm after each
    /// hidden linear layer.
    Mlp {
        input_dim: usize,
        hidden: usize,
        classes: usize,
    },
    /// Two conv blocks (stride 1 then stride 2) with 2-D batch norm,
    /// global average pooling and a linear head.
    SmallCnn {
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    },
}

impl Arch {
    pub fn tag(&self) -> String {
        match self {
            Arch::Mlp {
                input_dim,
                hidden,
                classes,
            } => format!("mlp:in={input_dim},h={hidden},k={classes}"),
            Arch::SmallCnn {
                channels,
                height,
                width,
                classes,
            } => format!("cnn:c={channels},h={height},w={width},k={classes}"),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Arch> {
        let bad = || Error::Format(format!("unknown architecture tag `{tag}`"));
        let (kind, rest) = tag.split_once(':').ok_or_else(bad)?;
        let mut fields = std::collections::HashMap::new();
        for part in rest.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            let v: usize = v.parse().map_err(|_| bad())?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        match kind {
            "mlp" => Ok(Arch::Mlp {
                input_dim: get("in")?,
                hidden: get("h")?,
                classes: get("k")?,
            }),
            "cnn" => Ok(Arch::SmallCnn {
                channels: get("c")?,
                height: get("h")?,
                width: get("w")?,
                classes: get("k")?,
            }),
            _ => Err(bad()),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Arch::Mlp { classes, .. } => *classes,
            Arch::SmallCnn { classes, .. } => *classes,
        }
    }

    /// Per-sample input shape (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Mlp { input_dim, .. } => vec![*input_dim],
            Arch::SmallCnn {
                channels,
                height,
                width,
                ..
            } => vec![*channels, *height, *width],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
}

impl ParamTensor {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            values: vec![0.0; n],
            shape,
        }
    }

    fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            values: vec![v; n],
            shape,
        }
    }

    fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        ParamTensor {
            values: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            shape,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear {
        weight: ParamTensor, // (in, out)
        bias: ParamTensor,   // (out,)
    },
    Conv2d {
        weight: ParamTensor, // (out, in, k, k)
        bias: ParamTensor,   // (out,)
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        gamma: ParamTensor,
        beta: ParamTensor,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Relu,
    GlobalAvgPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Whether a forward pass normalizes with current-batch statistics
/// (refreshing material for the stored ones) or the stored statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    TrainStats,
    EvalStats,
}

/// Which parameter roles receive gradients during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    NoParams,
    Updatable,
    AllParams,
}

/// Pre-normalization activations, one entry per batch-norm layer.
pub struct FeatureTrace {
    pub maps: Vec<FeatureMap>,
}

pub struct FeatureMap {
    pub tensor: Tensor,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub struct ParamBinding {
    pub layer: usize,
    pub slot: ParamSlot,
    pub role: ParamRole,
    pub node: Tensor,
}

/// Per-BN-layer statistics of the batch that just passed through.
pub struct BatchStatsRecord {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct ForwardPass {
    pub logits: Tensor,
    pub features: Option<FeatureTrace>,
    pub params: Vec<ParamBinding>,
    pub batch_stats: Vec<BatchStatsRecord>,
}

impl ForwardPass {
    pub fn posteriors(&self) -> Result<Tensor> {
        self.logits.softmax()
    }
}

#[derive(Clone, Debug)]
pub struct ModelState {
    arch: Arch,
    scope: UpdatableScope,
    layers: Vec<Layer>,
}

impl ModelState {
    pub fn new(arch: Arch, scope: UpdatableScope, rng: &mut impl Rng) -> Self {
        let layers = build_layers(&arch, Some(rng));
        ModelState { arch, scope, layers }
    }

    /// All-zero skeleton used as a checkpoint-loading target.
    fn zeroed(arch: Arch, scope: UpdatableScope) -> Self {
        let layers = build_layers(&arch, None);
        ModelState { arch, scope, layers }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn arch_tag(&self) -> String {
        self.arch.tag()
    }

    pub fn scope(&self) -> UpdatableScope {
        self.scope
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn bn_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::BatchNorm { .. }))
            .count()
    }

    fn role_of(&self, layer: &Layer, slot: ParamSlot) -> ParamRole {
        match (layer, self.scope) {
            (Layer::BatchNorm { .. }, _) => {
                debug_assert!(matches!(slot, ParamSlot::Gamma | ParamSlot::Beta));
                ParamRole::Updatable
            }
            (_, UpdatableScope::FullBackbone) => ParamRole::Updatable,
            (_, UpdatableScope::BnAffine) => ParamRole::Frozen,
        }
    }

    /// Scalar counts per role: (updatable, bn statistics, frozen).
    /// Together these cover every stored value exactly once.
    pub fn partition_counts(&self) -> (usize, usize, usize) {
        let mut u = 0;
        let mut b = 0;
        let mut f = 0;
        for entry in self.tensor_entries() {
            match entry.role {
                ParamRole::Updatable => u += entry.values.len(),
                ParamRole::BnStat => b += entry.values.len(),
                ParamRole::Frozen => f += entry.values.len(),
            }
        }
        (u, b, f)
    }

    pub fn total_scalars(&self) -> usize {
        self.tensor_entries().map(|e| e.values.len()).sum()
    }

    /// Bitwise equality over every stored tensor.
    pub fn bitwise_eq(&self, other: &ModelState) -> bool {
        if self.arch != other.arch {
            return false;
        }
        self.tensor_entries().zip(other.tensor_entries()).all(|(a, b)| {
            a.values.len() == b.values.len()
                && a.values
                    .iter()
                    .zip(b.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    /// Forward from raw values (creates a constant input leaf).
    pub fn forward(
        &self,
        tape: &Tape,
        batch: &[f64],
        batch_size: usize,
        mode: StatsMode,
        grad_scope: GradScope,
        capture: bool,
    ) -> Result<ForwardPass> {
        let mut shape = vec![batch_size];
        shape.extend(self.arch.input_shape());
        let input = tape.constant(batch.to_vec(), shape)?;
        self.forward_from(&input, mode, grad_scope, capture)
    }

    /// Forward from an existing tensor (which may itself require grad).
    pub fn forward_from(
        &self,
        input: &Tensor,
        mode: StatsMode,
        grad_scope: GradScope,
        capture: bool,
    ) -> Result<ForwardPass> {
        let shape = input.shape();
        let mut expect = vec![shape.first().copied().unwrap_or(0)];
        expect.extend(self.arch.input_shape());
        if shape != expect {
            return Err(Error::Shape {
                op: "model-forward",
                left: shape,
                right: expect,
            });
        }
        let batch = shape[0];
        if mode == StatsMode::TrainStats && batch < 2 {
            return Err(Error::DegenerateBatch(batch));
        }

        let tape = input.tape().clone();
        let wants_grad = |role: ParamRole| match grad_scope {
            GradScope::NoParams => false,
            GradScope::Updatable => role == ParamRole::Updatable,
            GradScope::AllParams => true,
        };

        let mut cur = input.clone();
        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        let mut maps = Vec::new();

        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear { weight, bias } => {
                    let role = self.role_of(layer, ParamSlot::Weight);
                    let w = tape.leaf(weight.values.clone(), weight.shape.clone(), wants_grad(role))?;
                    let b = tape.leaf(bias.values.clone(), bias.shape.clone(), wants_grad(role))?;
                    cur = cur.matmul(&w, false, false)?.add(&b)?;
                    params.push(ParamBinding { layer: idx, slot: ParamSlot::Weight, role, node: w });
                    params.push(ParamBinding { layer: idx, slot: ParamSlot::Bias, role, node: b });
                }
                Layer::Conv2d { weight, bias, stride, padding } => {
                    let role = self.role_of(layer, ParamSlot::Weight);
                    let w = tape.leaf(weight.values.clone(), weight.shape.clone(), wants_grad(role))?;
                    let b = tape.leaf(bias.values.clone(), bias.shape.clone(), wants_grad(role))?;
                    cur = cur.conv2d(&w, &b, *stride, *padding)?;
                    params.push(ParamBinding { layer: idx, slot: ParamSlot::Weight, role, node: w });
                    params.push(ParamBinding { layer: idx, slot: ParamSlot::Bias, role, node: b });
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    if capture {
                        let s = cur.shape();
                        let (channels, height, width) = if s.len() == 4 {
                            (s[1], s[2], s[3])
                        } else {
                            (s[1], 1, 1)
                        };
                        maps.push(FeatureMap {
                            tensor: cur.clone(),
                            batch,
                            channels,
                            height,
                            width,
                        });
                    }
                    let role = ParamRole::Updatable;
                    let g = tape.leaf(gamma.values.clone(), gamma.shape.clone(), wants_grad(role))?;
                    let b = tape.leaf(beta.values.clone(), beta.shape.clone(), wants_grad(role))?;
                    match mode {
                        StatsMode::TrainStats => {
                            let (mean, var) = crate::tensor::batch_statistics_of(&cur)?;
                            batch_stats.push(BatchStatsRecord { layer: idx, mean, var });
                            cur = cur.batch_norm_train(&g, &b, BN_EPS)?;
                        }
                        StatsMode::EvalStats => {
                            let m = tape.constant(running_mean.clone(), vec![running_mean.len()])?;
                            let v = tape.constant(running_var.clone(), vec![running_var.len()])?;
                            cur = cur.batch_norm_eval(&g, &b, &m, &v, BN_EPS)?;
                        }
                    }
                    params.push(ParamBinding { layer: idx, slot: ParamSlot::Gamma, role, node: g });
                    params.push(ParamBinding { layer: idx, slot: ParamSlot::Beta, role, node: b });
                }
                Layer::Relu => {
                    cur = cur.relu()?;
                }
                Layer::GlobalAvgPool => {
                    cur = cur.mean_spatial()?;
                }
            }
        }

        Ok(ForwardPass {
            logits: cur,
            features: if capture { Some(FeatureTrace { maps }) } else { None },
            params,
            batch_stats,
        })
    }

    /// Fold the recorded batch statistics into the stored running
    /// statistics: running <- (1 - momentum) * running + momentum * batch.
    pub fn apply_batch_stats(&mut self, pass: &ForwardPass, momentum: f64) {
        for rec in &pass.batch_stats {
            if let Layer::BatchNorm { running_mean, running_var, .. } = &mut self.layers[rec.layer] {
                for (r, &b) in running_mean.iter_mut().zip(&rec.mean) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
                for (r, &b) in running_var.iter_mut().zip(&rec.var) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }

    /// One plain gradient-descent step over every bound parameter that
    /// received a gradient. Returns the L2 norm of the applied update.
    pub fn apply_gradient_step(&mut self, pass: &ForwardPass, lr: f64) -> f64 {
        let mut sq = 0.0;
        for binding in &pass.params {
            let Some(grad) = binding.node.grad() else { continue };
            if !binding.node.requires_grad() {
                continue;
            }
            let param = self.param_mut(binding.layer, binding.slot);
            for (p, g) in param.values.iter_mut().zip(&grad) {
                let step = lr * g;
                *p -= step;
                sq += step * step;
            }
        }
        sq.sqrt()
    }

    fn param_mut(&mut self, layer: usize, slot: ParamSlot) -> &mut ParamTensor {
        match (&mut self.layers[layer], slot) {
            (Layer::Linear { weight, .. }, ParamSlot::Weight) => weight,
            (Layer::Linear { bias, .. }, ParamSlot::Bias) => bias,
            (Layer::Conv2d { weight, .. }, ParamSlot::Weight) => weight,
            (Layer::Conv2d { bias, .. }, ParamSlot::Bias) => bias,
            (Layer::BatchNorm { gamma, .. }, ParamSlot::Gamma) => gamma,
            (Layer::BatchNorm { beta, .. }, ParamSlot::Beta) => beta,
            _ => unreachable!("binding does not match layer"),
        }
    }

    fn tensor_entries(&self) -> impl Iterator<Item = TensorEntry<'_>> {
        let scope = self.scope;
        self.layers.iter().enumerate().flat_map(move |(i, layer)| {
            let mut out: Vec<TensorEntry<'_>> = Vec::new();
            let backbone_role = match scope {
                UpdatableScope::FullBackbone => ParamRole::Updatable,
                UpdatableScope::BnAffine => ParamRole::Frozen,
            };
            match layer {
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    out.push(TensorEntry::new(i, "weight", backbone_role, &weight.values, &weight.shape));
                    out.push(TensorEntry::new(i, "bias", backbone_role, &bias.values, &bias.shape));
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    out.push(TensorEntry::new(i, "gamma", ParamRole::Updatable, &gamma.values, &gamma.shape));
                    out.push(TensorEntry::new(i, "beta", ParamRole::Updatable, &beta.values, &beta.shape));
                    let c = running_mean.len();
                    out.push(TensorEntry { layer: i, name: "running_mean", role: ParamRole::BnStat, values: running_mean, shape_owned: vec![c] });
                    let c = running_var.len();
                    out.push(TensorEntry { layer: i, name: "running_var", role: ParamRole::BnStat, values: running_var, shape_owned: vec![c] });
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
            out
        })
    }

    fn tensor_entries_mut(&mut self) -> Vec<TensorEntryMut<'_>> {
        let scope = self.scope;
        let backbone_role = match scope {
            UpdatableScope::FullBackbone => ParamRole::Updatable,
            UpdatableScope::BnAffine => ParamRole::Frozen,
        };
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    out.push(TensorEntryMut { layer: i, name: "weight", role: backbone_role, values: &mut weight.values });
                    out.push(TensorEntryMut { layer: i, name: "bias", role: backbone_role, values: &mut bias.values });
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    out.push(TensorEntryMut { layer: i, name: "gamma", role: ParamRole::Updatable, values: &mut gamma.values });
                    out.push(TensorEntryMut { layer: i, name: "beta", role: ParamRole::Updatable, values: &mut beta.values });
                    out.push(TensorEntryMut { layer: i, name: "running_mean", role: ParamRole::BnStat, values: running_mean });
                    out.push(TensorEntryMut { layer: i, name: "running_var", role: ParamRole::BnStat, values: running_var });
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        out
    }
}

struct TensorEntry<'a> {
    layer: usize,
    name: &'static str,
    role: ParamRole,
    values: &'a [f64],
    shape_owned: Vec<usize>,
}

impl<'a> TensorEntry<'a> {
    fn new(layer: usize, name: &'static str, role: ParamRole, values: &'a [f64], shape: &[usize]) -> Self {
        TensorEntry {
            layer,
            name,
            role,
            values,
            shape_owned: shape.to_vec(),
        }
    }

    fn qualified_name(&self) -> String {
        format!("layer{}.{}", self.layer, self.name)
    }
}

struct TensorEntryMut<'a> {
    layer: usize,
    name: &'static str,
    role: ParamRole,
    values: &'a mut Vec<f64>,
}

impl TensorEntryMut<'_> {
    fn qualified_name(&self) -> String {
        format!("layer{}.{}", self.layer, self.name)
    }
}

fn build_layers(arch: &Arch, rng: Option<&mut dyn rand::RngCore>) -> Vec<Layer> {
    let init = rng.is_some();
    let mut rng = rng;
    let mut weight = |shape: Vec<usize>, fan_in: usize| -> ParamTensor {
        match rng.as_deref_mut() {
            Some(mut r) => ParamTensor::kaiming(shape, fan_in, &mut r),
            None => ParamTensor::zeros(shape),
        }
    };
    let bn = |c: usize| Layer::BatchNorm {
        gamma: if init { ParamTensor::filled(vec![c], 1.0) } else { ParamTensor::zeros(vec![c]) },
        beta: ParamTensor::zeros(vec![c]),
        running_mean: vec![0.0; c],
        running_var: vec![if init { 1.0 } else { 0.0 }; c],
    };
    match *arch {
        Arch::Mlp { input_dim, hidden, classes } => {
            let l1 = weight(vec![input_dim, hidden], input_dim);
            let l2 = weight(vec![hidden, hidden], hidden);
            let head = weight(vec![hidden, classes], hidden);
            vec![
                Layer::Linear { weight: l1, bias: ParamTensor::zeros(vec![hidden]) },
                bn(hidden),
                Layer::Relu,
                Layer::Linear { weight: l2, bias: ParamTensor::zeros(vec![hidden]) },
                bn(hidden),
                Layer::Relu,
                Layer::Linear { weight: head, bias: ParamTensor::zeros(vec![classes]) },
            ]
        }
        Arch::SmallCnn { channels, classes, .. } => {
            let c1 = weight(vec![8, channels, 3, 3], channels * 9);
            let c2 = weight(vec![16, 8, 3, 3], 8 * 9);
            let head = weight(vec![16, classes], 16);
            vec![
                Layer::Conv2d { weight: c1, bias: ParamTensor::zeros(vec![8]), stride: 1, padding: 1 },
                bn(8),
                Layer::Relu,
                Layer::Conv2d { weight: c2, bias: ParamTensor::zeros(vec![16]), stride: 2, padding: 1 },
                bn(16),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Linear { weight: head, bias: ParamTensor::zeros(vec![classes]) },
            ]
        }
    }
}

// ---------------------------------------------------------------------------
// EMA shadow model
// ---------------------------------------------------------------------------

/// Exponential-moving-average shadow of a model.
#[derive(Clone, Debug)]
pub struct EmaModel {
    pub shadow: ModelState,
    pub momentum: f64,
}

impl EmaModel {
    pub fn new(source: &ModelState, momentum: f64) -> Self {
        EmaModel {
            shadow: source.clone(),
            momentum,
        }
    }

    /// shadow <- m * shadow + (1 - m) * online, over every parameter and
    /// every running statistic.
    pub fn update(&mut self, online: &ModelState) -> Result<()> {
        if self.shadow.arch_tag() != online.arch_tag() {
            return Err(Error::Contract(format!(
                "ema architecture {} does not match online {}",
                self.shadow.arch_tag(),
                online.arch_tag()
            )));
        }
        let m = self.momentum;
        let online_entries: Vec<Vec<f64>> = online.tensor_entries().map(|e| e.values.to_vec()).collect();
        for (entry, online_vals) in self.shadow.tensor_entries_mut().into_iter().zip(online_entries) {
            for (s, o) in entry.values.iter_mut().zip(online_vals) {
                *s = m * *s + (1.0 - m) * o;
            }
        }
        Ok(())
    }
}

/// Independently reset each updatable scalar to its source value with
/// probability `p`. Returns how many were reset.
pub fn stochastic_restore(
    model: &mut ModelState,
    source: &ModelState,
    p: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("restore probability {p} outside [0, 1]")));
    }
    if model.arch_tag() != source.arch_tag() {
        return Err(Error::Contract("restore source architecture mismatch".into()));
    }
    let source_vals: Vec<(ParamRole, Vec<f64>)> = source
        .tensor_entries()
        .map(|e| (e.role, e.values.to_vec()))
        .collect();
    let mut restored = 0;
    for (entry, (role, src)) in model.tensor_entries_mut().into_iter().zip(source_vals) {
        debug_assert_eq!(entry.role, role);
        if entry.role != ParamRole::Updatable {
            continue;
        }
        for (v, s) in entry.values.iter_mut().zip(src) {
            if rng.random::<f64>() < p {
                *v = s;
                restored += 1;
            }
        }
    }
    Ok(restored)
}

/// Max-norm distance over updatable parameters (for contraction checks).
pub fn updatable_max_distance(a: &ModelState, b: &ModelState) -> f64 {
    a.tensor_entries()
        .zip(b.tensor_entries())
        .filter(|(e, _)| e.role == ParamRole::Updatable)
        .flat_map(|(ea, eb)| ea.values.iter().zip(eb.values).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// Bitwise equality of the updatable partition only.
pub fn updatable_bitwise_eq(a: &ModelState, b: &ModelState) -> bool {
    a.tensor_entries()
        .zip(b.tensor_entries())
        .filter(|(e, _)| e.role == ParamRole::Updatable)
        .all(|(ea, eb)| {
            ea.values
                .iter()
                .zip(eb.values)
                .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// L2 norm of the elementwise difference over all parameters.
pub fn param_distance(a: &ModelState, b: &ModelState) -> f64 {
    let mut sq = 0.0;
    for (ea, eb) in a.tensor_entries().zip(b.tensor_entries()) {
        for (x, y) in ea.values.iter().zip(eb.values) {
            sq += (x - y) * (x - y);
        }
    }
    sq.sqrt()
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact_fmt(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_fmt(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(Error::Format(format!("implausible string length {n}")));
    }
    let mut b = vec![0u8; n];
    read_exact_fmt(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("non-utf8 string".into()))
}

/// Versioned binary checkpoint: magic, architecture tag, then per-tensor
/// (name, role, shape, 64-bit little-endian values). Round-trips bit-exactly.
pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION)?;
    write_str(&mut w, &model.arch_tag())?;
    w.write_all(&[match model.scope {
        UpdatableScope::BnAffine => 0u8,
        UpdatableScope::FullBackbone => 1u8,
    }])?;
    let entries: Vec<_> = model.tensor_entries().collect();
    write_u32(&mut w, entries.len() as u32)?;
    for e in entries {
        write_str(&mut w, &e.qualified_name())?;
        w.write_all(&[e.role.code()])?;
        write_u32(&mut w, e.shape_owned.len() as u32)?;
        for d in &e.shape_owned {
            write_u32(&mut w, *d as u32)?;
        }
        for v in e.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    load_checkpoint_expect(path, None)
}

/// Load a checkpoint, optionally requiring a specific architecture tag.
pub fn load_checkpoint_expect(path: &Path, expect_tag: Option<&str>) -> Result<ModelState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_fmt(&mut r, &mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let tag = read_str(&mut r)?;
    if let Some(expect) = expect_tag {
        if tag != expect {
            return Err(Error::Format(format!(
                "architecture tag mismatch: checkpoint has `{tag}`, expected `{expect}`"
            )));
        }
    }
    let arch = Arch::from_tag(&tag)?;
    let mut scope_byte = [0u8; 1];
    read_exact_fmt(&mut r, &mut scope_byte)?;
    let scope = match scope_byte[0] {
        0 => UpdatableScope::BnAffine,
        1 => UpdatableScope::FullBackbone,
        b => return Err(Error::Format(format!("unknown scope byte {b}"))),
    };
    let count = read_u32(&mut r)? as usize;

    let mut model = ModelState::zeroed(arch, scope);
    {
        let mut entries = model.tensor_entries_mut();
        if count != entries.len() {
            return Err(Error::Format(format!(
                "tensor count {count} does not match architecture ({} expected)",
                entries.len()
            )));
        }
        for entry in entries.iter_mut() {
            let name = read_str(&mut r)?;
            if name != entry.qualified_name() {
                return Err(Error::Format(format!(
                    "tensor `{name}` does not match expected `{}`",
                    entry.qualified_name()
                )));
            }
            let mut role = [0u8; 1];
            read_exact_fmt(&mut r, &mut role)?;
            let role = ParamRole::from_code(role[0])
                .ok_or_else(|| Error::Format(format!("bad role byte for `{name}`")))?;
            if role != entry.role {
                return Err(Error::Format(format!("role mismatch for `{name}`")));
            }
            let rank = read_u32(&mut r)? as usize;
            let mut numel = 1usize;
            for _ in 0..rank {
                numel = numel.saturating_mul(read_u32(&mut r)? as usize);
            }
            if numel != entry.values.len() {
                return Err(Error::Format(format!(
                    "shape mismatch for `{name}`: {numel} values vs {}",
                    entry.values.len()
                )));
            }
            let mut buf = [0u8; 8];
            for v in entry.values.iter_mut() {
                read_exact_fmt(&mut r, &mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
    }
    // trailing garbage means the file is not what it claims to be
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    for layer in &model.layers {
        if let Layer::BatchNorm { running_var, .. } = layer {
            if running_var.iter().any(|&v| v <= 0.0) {
                return Err(Error::Format("checkpoint has non-positive running variance".into()));
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
pub(crate) mod test_access {
    use super::*;

    pub fn scale_last_linear(model: &mut ModelState, factor: f64) {
        for layer in model.layers.iter_mut().rev() {
            if let Layer::Linear { weight, bias } = layer {
                weight.values.iter_mut().for_each(|v| *v *= factor);
                bias.values.iter_mut().for_each(|v| *v *= factor);
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mlp(rng: &mut ChaCha8Rng) -> ModelState {
        ModelState::new(
            Arch::Mlp { input_dim: 6, hidden: 8, classes: 4 },
            UpdatableScope::BnAffine,
            rng,
        )
    }

    fn cnn(rng: &mut ChaCha8Rng) -> ModelState {
        ModelState::new(
            Arch::SmallCnn { channels: 3, height: 8, width: 8, classes: 4 },
            UpdatableScope::BnAffine,
            rng,
        )
    }

    fn random_batch(rng: &mut ChaCha8Rng, model: &ModelState, batch: usize) -> Vec<f64> {
        let per: usize = model.arch().input_shape().iter().product();
        (0..batch * per).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn zeroed_head_gives_uniform_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = mlp(&mut rng);
        // zero the classifier head
        let last = model.layers.len() - 1;
        if let Layer::Linear { weight, bias } = &mut model.layers[last] {
            weight.values.iter_mut().for_each(|v| *v = 0.0);
            bias.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = random_batch(&mut rng, &model, 3);
        let tape = Tape::new();
        let pass = model
            .forward(&tape, &batch, 3, StatsMode::EvalStats, GradScope::NoParams, false)
            .unwrap();
        let p = pass.posteriors().unwrap().values();
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn train_then_eval_identity_at_momentum_one() {
        for seed in [0u64, 1] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = if seed == 0 { mlp(&mut rng) } else { cnn(&mut rng) };
            let batch = random_batch(&mut rng, &model, 5);
            let tape = Tape::new();
            let train = model
                .forward(&tape, &batch, 5, StatsMode::TrainStats, GradScope::NoParams, false)
                .unwrap();
            model.apply_batch_stats(&train, 1.0);
            let eval = model
                .forward(&tape, &batch, 5, StatsMode::EvalStats, GradScope::NoParams, false)
                .unwrap();
            let a = train.logits.values();
            let b = eval.logits.values();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-8, "train {x} vs eval {y}");
            }
        }
    }

    #[test]
    fn feature_trace_matches_bn_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = cnn(&mut rng);
        let batch = random_batch(&mut rng, &model, 2);
        let tape = Tape::new();
        let pass = model
            .forward(&tape, &batch, 2, StatsMode::TrainStats, GradScope::NoParams, true)
            .unwrap();
        assert_eq!(pass.features.unwrap().maps.len(), model.bn_layer_count());
        assert_eq!(model.bn_layer_count(), 2);
    }

    #[test]
    fn train_stats_rejects_batch_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = mlp(&mut rng);
        let batch = random_batch(&mut rng, &model, 1);
        let tape = Tape::new();
        let r = model.forward(&tape, &batch, 1, StatsMode::TrainStats, GradScope::NoParams, false);
        assert!(matches!(r, Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn eval_forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = mlp(&mut rng);
        let batch = random_batch(&mut rng, &model, 4);
        let run = || {
            let tape = Tape::new();
            model
                .forward(&tape, &batch, 4, StatsMode::EvalStats, GradScope::NoParams, false)
                .unwrap()
                .logits
                .values()
        };
        let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_covers_all_scalars_exactly_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in [mlp(&mut rng), cnn(&mut rng)] {
            let (u, b, f) = model.partition_counts();
            assert_eq!(u + b + f, model.total_scalars());
            assert!(u > 0 && b > 0 && f > 0);
        }
    }

    #[test]
    fn partition_is_stable_across_adaptation_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = mlp(&mut rng);
        let before = model.partition_counts();
        let batch = random_batch(&mut rng, &model, 4);
        let tape = Tape::new();
        let pass = model
            .forward(&tape, &batch, 4, StatsMode::TrainStats, GradScope::Updatable, false)
            .unwrap();
        // entropy loss
        let p = pass.posteriors().unwrap();
        let loss = p
            .mul(&p.clamp_min(1e-12).unwrap().log().unwrap())
            .unwrap()
            .mean_all()
            .unwrap()
            .neg()
            .unwrap();
        loss.backward().unwrap();
        let norm = model.apply_gradient_step(&pass, 0.1);
        model.apply_batch_stats(&pass, 1.0);
        assert!(norm > 0.0);
        assert_eq!(model.partition_counts(), before);
    }

    #[test]
    fn gradient_step_touches_only_updatable_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = mlp(&mut rng);
        let source = model.clone();
        let batch = random_batch(&mut rng, &model, 4);
        let tape = Tape::new();
        let pass = model
            .forward(&tape, &batch, 4, StatsMode::TrainStats, GradScope::Updatable, false)
            .unwrap();
        let p = pass.posteriors().unwrap();
        let loss = p
            .mul(&p.clamp_min(1e-12).unwrap().log().unwrap())
            .unwrap()
            .mean_all()
            .unwrap()
            .neg()
            .unwrap();
        loss.backward().unwrap();
        model.apply_gradient_step(&pass, 0.5);
        assert!(!updatable_bitwise_eq(&model, &source));
        // frozen partition untouched
        for (a, b) in model.tensor_entries().zip(source.tensor_entries()) {
            if a.role == ParamRole::Frozen {
                assert!(a.values.iter().zip(b.values).all(|(x, y)| x == y));
            }
        }
    }

    #[test]
    fn ema_degenerate_momenta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let online = mlp(&mut rng);
        let other = mlp(&mut rng);

        let mut frozen = EmaModel::new(&other, 1.0);
        frozen.update(&online).unwrap();
        assert!(frozen.shadow.bitwise_eq(&other));

        let mut tracking = EmaModel::new(&other, 0.0);
        tracking.update(&online).unwrap();
        assert!(tracking.shadow.bitwise_eq(&online));
    }

    #[test]
    fn ema_scalar_arithmetic() {
        // m = 0.999, shadow 0, online 1 -> 0.001
        let s: f64 = 0.999 * 0.0 + (1.0 - 0.999) * 1.0;
        assert!((s - 0.001).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let online = mlp(&mut rng);
        let mut zeroed = online.clone();
        for e in zeroed.tensor_entries_mut() {
            e.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut ema = EmaModel::new(&zeroed, 0.999);
        ema.update(&online).unwrap();
        for (se, oe) in ema.shadow.tensor_entries().zip(online.tensor_entries()) {
            for (s, o) in se.values.iter().zip(oe.values) {
                assert!((s - 0.001 * o).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ema_is_a_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let online = mlp(&mut rng);
        let start = mlp(&mut rng);
        let mut ema = EmaModel::new(&start, 0.9);
        let mut last = updatable_max_distance(&ema.shadow, &online);
        for _ in 0..20 {
            ema.update(&online).unwrap();
            let d = updatable_max_distance(&ema.shadow, &online);
            assert!(d <= last + 1e-15);
            last = d;
        }
    }

    #[test]
    fn ema_arch_mismatch_is_contract_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let online = mlp(&mut rng);
        let other = cnn(&mut rng);
        let mut ema = EmaModel::new(&other, 0.5);
        assert!(matches!(ema.update(&online), Err(Error::Contract(_))));
    }

    #[test]
    fn restore_probability_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let source = mlp(&mut rng);
        let mut drifted = source.clone();
        for e in drifted.tensor_entries_mut() {
            if e.role == ParamRole::Updatable {
                e.values.iter_mut().for_each(|v| *v += 1.0);
            }
        }
        let mut m0 = drifted.clone();
        assert_eq!(stochastic_restore(&mut m0, &source, 0.0, &mut rng).unwrap(), 0);
        assert!(m0.bitwise_eq(&drifted));

        let mut m1 = drifted.clone();
        let (u, _, _) = source.partition_counts();
        assert_eq!(stochastic_restore(&mut m1, &source, 1.0, &mut rng).unwrap(), u);
        assert!(updatable_bitwise_eq(&m1, &source));
    }

    #[test]
    fn restore_count_concentrates_at_binomial_mean() {
        // 1e5 updatable scalars at p = 0.01: within 3 sigma (~95) of 1000
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let source = ModelState::new(
            Arch::Mlp { input_dim: 311, hidden: 200, classes: 4 },
            UpdatableScope::FullBackbone,
            &mut rng,
        );
        let (u, _, _) = source.partition_counts();
        assert!(u > 100_000, "need >= 1e5 updatable scalars, got {u}");
        let mut drifted = source.clone();
        for e in drifted.tensor_entries_mut() {
            if e.role == ParamRole::Updatable {
                e.values.iter_mut().for_each(|v| *v += 1.0);
            }
        }
        let restored = stochastic_restore(&mut drifted, &source, 0.01, &mut rng).unwrap();
        let mean = u as f64 * 0.01;
        let sigma = (u as f64 * 0.01 * 0.99).sqrt();
        assert!(
            (restored as f64 - mean).abs() < 3.0 * sigma,
            "restored {restored}, expected {mean} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dir = tempfile::tempdir().unwrap();
        for mut model in [mlp(&mut rng), cnn(&mut rng)] {
            // make running stats non-trivial
            let batch = random_batch(&mut rng, &model, 4);
            let tape = Tape::new();
            let pass = model
                .forward(&tape, &batch, 4, StatsMode::TrainStats, GradScope::NoParams, false)
                .unwrap();
            model.apply_batch_stats(&pass, 1.0);

            let path = dir.path().join(format!("{}.ckpt", model.arch_tag().replace(':', "_")));
            save_checkpoint(&model, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert!(loaded.bitwise_eq(&model));
            assert_eq!(loaded.scope(), model.scope());
        }
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = mlp(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_arch_tag_is_format_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = mlp(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let err = load_checkpoint_expect(&path, Some("cnn:c=3,h=8,w=8,k=4"));
        assert!(matches!(err, Err(Error::Format(_))));
        assert!(load_checkpoint_expect(&path, Some(&model.arch_tag())).is_ok());
    }

    #[test]
    fn arch_tag_round_trip() {
        for arch in [
            Arch::Mlp { input_dim: 6, hidden: 8, classes: 4 },
            Arch::SmallCnn { channels: 3, height: 16, width: 16, classes: 5 },
        ] {
            assert_eq!(Arch::from_tag(&arch.tag()).unwrap(), arch);
        }
        assert!(Arch::from_tag("resnet:50").is_err());
    }
}
