//! Poison synthesis: attack objectives, the per-layer Gaussian
//! feature-consistency regularizer, and the PGD loop with Lagrangian
//! ascent on the per-layer multipliers.
//!
//! Each PGD iteration forwards the current poisons through the frozen
//! attack model with current-batch statistics, evaluates
//! `L = L_atk + (1/L) sum_l lambda_l * L_reg_l`, descends the
//! perturbation by the sign of its gradient, projects onto the
//! L-infinity ball and the unit box, and ascends each multiplier by
//! `rate * L_reg_l / L` (the closed-form gradient, since the loss is
//! linear in lambda).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{ConfusionState, MappingSolver};
use crate::error::{Error, Result};
use crate::nn::{FeatureTrace, GradScope, ModelState, StatsMode};
use crate::surrogate::SurrogateState;
use crate::tensor::{gaussian_kld, gaussian_kld_value, Tape, TapeMode, Tensor};
use crate::util::entropy_rows;

pub const DEFAULT_BUDGET: f64 = 0.3;
pub const DEFAULT_STEP_SIZE: f64 = 0.01;
pub const DEFAULT_STEPS: usize = 40;
pub const DEFAULT_LAMBDA_RATE: f64 = 0.001;
pub const DEFAULT_CONFUSION_BETA: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AttackKind {
    /// Cross-entropy toward uniform-minus-ground-truth targets.
    Nhe,
    /// Cross-entropy toward a confusion-derived derangement of the labels.
    Ble {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_solver")]
        solver: MappingSolver,
    },
    /// Maximize cross-entropy on the initial surrogate.
    MaxCe,
    /// Maximize prediction entropy on the initial surrogate.
    TepaMaxEnt,
    /// Minimize cross-entropy on a randomly initialized reference model.
    Unlearnable,
    /// Cross-entropy toward the cyclically shifted label (y + 1) mod K.
    AdvPoison,
    /// Maximize cross-entropy of the held half of the batch, poisoning
    /// the other half, on the initial surrogate.
    DiaAdapted,
}

fn default_beta() -> f64 {
    DEFAULT_CONFUSION_BETA
}

fn default_solver() -> MappingSolver {
    MappingSolver::Greedy
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::Nhe => "nhe",
            AttackKind::Ble { .. } => "ble",
            AttackKind::MaxCe => "max-ce",
            AttackKind::TepaMaxEnt => "tepa-maxent",
            AttackKind::Unlearnable => "unlearnable",
            AttackKind::AdvPoison => "adv-poison",
            AttackKind::DiaAdapted => "dia-adapted",
        }
    }

    /// The proposed objectives attack the live distilled surrogate; the
    /// ported baselines attack the initial surrogate (or a random
    /// reference), matching how they were defined.
    fn uses_live_surrogate(&self) -> bool {
        matches!(self, AttackKind::Nhe | AttackKind::Ble { .. })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Feature-consistency regularization with lambda ascent.
    pub feature_reg: bool,
    /// Swap the KLD argument order (sensitivity flag).
    #[serde(default)]
    pub flip_kld: bool,
    pub label: String,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        let feature_reg = kind.uses_live_surrogate();
        let label = kind.label().to_string();
        AttackSpec {
            kind,
            feature_reg,
            flip_kld: false,
            label,
        }
    }

    pub fn named(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }

    pub fn with_feature_reg(mut self, on: bool) -> Self {
        self.feature_reg = on;
        self
    }
}

/// Adversary-side state for one attack objective across a stream.
pub struct Attacker {
    pub spec: AttackSpec,
    pub confusion: Option<ConfusionState>,
    reference: Option<ModelState>,
}

impl Attacker {
    pub fn new(spec: AttackSpec, classes: usize) -> Result<Self> {
        let confusion = match spec.kind {
            AttackKind::Ble { beta, solver } => Some(ConfusionState::new(classes, beta, solver)?),
            _ => None,
        };
        Ok(Attacker {
            spec,
            confusion,
            reference: None,
        })
    }

    fn reference_model(&mut self, like: &ModelState, rng: &mut ChaCha8Rng) -> &ModelState {
        self.reference.get_or_insert_with(|| {
            ModelState::new(like.arch().clone(), like.scope(), rng)
        })
    }
}

/// Clean inputs, their additive perturbations, and the PGD settings.
#[derive(Clone, Debug)]
pub struct PoisonBatch {
    pub clean: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub labels: Vec<usize>,
    pub batch_size: usize,
    pub budget: f64,
    pub step_size: f64,
    pub steps: usize,
}

impl PoisonBatch {
    pub fn new(clean: Vec<f64>, labels: Vec<usize>, budget: f64, step_size: f64, steps: usize) -> Result<Self> {
        if labels.is_empty() || clean.len() % labels.len() != 0 {
            return Err(Error::Contract(format!(
                "{} values do not form whole samples for {} labels",
                clean.len(),
                labels.len()
            )));
        }
        let batch_size = labels.len();
        Ok(PoisonBatch {
            epsilon: vec![0.0; clean.len()],
            clean,
            labels,
            batch_size,
            budget,
            step_size,
            steps,
        })
    }

    /// The submitted inputs: clean + epsilon, which projection keeps
    /// inside the unit box.
    pub fn poisoned(&self) -> Vec<f64> {
        self.clean
            .iter()
            .zip(&self.epsilon)
            .map(|(x, e)| (x + e).clamp(0.0, 1.0))
            .collect()
    }

    pub fn max_eps(&self) -> f64 {
        self.epsilon.iter().fold(0.0f64, |a, &e| a.max(e.abs()))
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.max_eps() > self.budget + 1e-9 {
            return Err(Error::Contract(format!(
                "perturbation {} exceeds budget {}",
                self.max_eps(),
                self.budget
            )));
        }
        for (x, e) in self.clean.iter().zip(&self.epsilon) {
            let v = x + e;
            if !(-1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(Error::Contract(format!("poisoned value {v} escapes the unit box")));
            }
        }
        Ok(())
    }
}

/// One Lagrange multiplier per feature layer, updated only by ascent.
#[derive(Clone, Debug)]
pub struct LagrangeState {
    pub lambdas: Vec<f64>,
    pub rate: f64,
    pub enabled: bool,
}

impl LagrangeState {
    pub fn active(layers: usize, rate: f64) -> Self {
        LagrangeState {
            lambdas: vec![0.0; layers],
            rate,
            enabled: true,
        }
    }

    /// Multipliers pinned at zero: the regularizer contributes nothing.
    pub fn pinned(layers: usize) -> Self {
        LagrangeState {
            lambdas: vec![0.0; layers],
            rate: 0.0,
            enabled: false,
        }
    }

    fn ascend(&mut self, reg_values: &[f64]) {
        if !self.enabled {
            return;
        }
        let l = reg_values.len() as f64;
        for (lam, &reg) in self.lambdas.iter_mut().zip(reg_values) {
            *lam += self.rate * reg.max(0.0) / l;
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub iterations: usize,
    pub final_attack_loss: f64,
    pub lambda_history: Vec<Vec<f64>>,
    /// Largest |epsilon| observed after any projection step.
    pub max_eps_seen: f64,
    /// Count of poisoned values outside [0, 1] after any step (must be 0).
    pub box_violations: usize,
    /// Mean per-layer feature KLD of the final poisons to their cleans.
    pub mean_feature_kld: f64,
    /// Mean prediction entropy of the final poisons under the attack model.
    pub mean_poison_entropy: f64,
}

// ---------------------------------------------------------------------------
// attack objectives
// ---------------------------------------------------------------------------

/// Target rows for the notch-high-entropy objective: zero mass on the
/// ground-truth label, uniform mass elsewhere.
pub fn nhe_targets(labels: &[usize], classes: usize) -> Vec<f64> {
    let off = 1.0 / (classes as f64 - 1.0);
    let mut q = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..classes {
            q[i * classes + c] = if c == y { 0.0 } else { off };
        }
    }
    q
}

fn cross_entropy_rows(posteriors: &Tensor, targets: Vec<f64>) -> Result<Tensor> {
    let shape = posteriors.shape();
    let cols = shape[1];
    let t = posteriors.tape().constant(targets, shape)?;
    t.mul(&posteriors.clamp_min(1e-12)?.log()?)?
        .neg()?
        .mean_all()?
        .scale(cols as f64)
}

fn onehot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        t[i * classes + y] = 1.0;
    }
    t
}

/// Notch-high-entropy loss: cross-entropy of the posteriors against the
/// uniform-minus-ground-truth target distribution.
pub fn nhe_loss(logits: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    if classes < 2 {
        return Err(Error::Contract("high-entropy targets need K >= 2".into()));
    }
    let p = logits.softmax()?;
    cross_entropy_rows(&p, nhe_targets(labels, classes))
}

/// Balanced-low-entropy loss: updates the confusion with the current
/// posteriors, refreshes the derangement, and pushes each sample toward
/// its mapped label.
pub fn ble_loss(logits: &Tensor, labels: &[usize], confusion: &mut ConfusionState) -> Result<Tensor> {
    let k = confusion.classes();
    let p = logits.softmax()?;
    confusion.update(&p.values(), labels)?;
    confusion.refresh_mapping()?;
    let mapped: Vec<usize> = labels.iter().map(|&y| confusion.mapping()[y]).collect();
    cross_entropy_rows(&p, onehot(&mapped, k))
}

/// Mean cross-entropy toward the given labels.
fn cross_entropy(logits: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let p = logits.softmax()?;
    cross_entropy_rows(&p, onehot(labels, classes))
}

/// Mean prediction entropy.
fn entropy(logits: &Tensor) -> Result<Tensor> {
    let p = logits.softmax()?;
    let cols = p.shape()[1];
    p.mul(&p.clamp_min(1e-12)?.log()?)?
        .neg()?
        .mean_all()?
        .scale(cols as f64)
}

// ---------------------------------------------------------------------------
// feature consistency
// ---------------------------------------------------------------------------

/// Detached per-layer Gaussian statistics of a clean trace. Spatial
/// layers (H*W > 1) get one Gaussian per sample over positions; dense
/// layers fall back to a single Gaussian over the batch.
pub struct LayerGaussians {
    /// (mu, cov) pairs; one per sample, or a single batch-level pair.
    pub gaussians: Vec<(Vec<f64>, Vec<f64>)>,
    pub dim: usize,
}

pub fn clean_gaussians(trace: &FeatureTrace) -> Result<Vec<LayerGaussians>> {
    trace
        .maps
        .iter()
        .map(|map| {
            let values = map.tensor.values();
            let (b, c, hw) = (map.batch, map.channels, map.height * map.width);
            if hw > 1 {
                let mut gaussians = Vec::with_capacity(b);
                for i in 0..b {
                    let sample = &values[i * c * hw..(i + 1) * c * hw];
                    gaussians.push(spatial_moments(sample, c, hw));
                }
                Ok(LayerGaussians { gaussians, dim: c })
            } else {
                Ok(LayerGaussians {
                    gaussians: vec![batch_moments(&values, b, c)],
                    dim: c,
                })
            }
        })
        .collect()
}

/// Per-sample spatial Gaussian: mean and biased covariance over the
/// H*W positions, each position a C-dimensional point.
fn spatial_moments(sample: &[f64], c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; c];
    for ch in 0..c {
        mu[ch] = sample[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    let mut cov = vec![0.0; c * c];
    for p in 0..hw {
        for a in 0..c {
            let da = sample[a * hw + p] - mu[a];
            for bq in a..c {
                cov[a * c + bq] += da * (sample[bq * hw + p] - mu[bq]);
            }
        }
    }
    for a in 0..c {
        for bq in a..c {
            let v = cov[a * c + bq] / hw as f64;
            cov[a * c + bq] = v;
            cov[bq * c + a] = v;
        }
    }
    (mu, cov)
}

/// Batch-level Gaussian over samples for dense (H = W = 1) layers.
fn batch_moments(values: &[f64], b: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; c];
    for i in 0..b {
        for ch in 0..c {
            mu[ch] += values[i * c + ch];
        }
    }
    mu.iter_mut().for_each(|v| *v /= b as f64);
    let mut cov = vec![0.0; c * c];
    for i in 0..b {
        for a in 0..c {
            let da = values[i * c + a] - mu[a];
            for bq in a..c {
                cov[a * c + bq] += da * (values[i * c + bq] - mu[bq]);
            }
        }
    }
    for a in 0..c {
        for bq in a..c {
            let v = cov[a * c + bq] / b as f64;
            cov[a * c + bq] = v;
            cov[bq * c + a] = v;
        }
    }
    (mu, cov)
}

/// Taped Gaussian moments of one poison feature map sample, laid out as
/// channels x positions.
fn taped_spatial_moments(z: &Tensor, c: usize, hw: usize) -> Result<(Tensor, Tensor)> {
    let tape = z.tape().clone();
    let ones_col = tape.constant(vec![1.0 / hw as f64; hw], vec![hw, 1])?;
    let mu_col = z.matmul(&ones_col, false, false)?; // (C, 1)
    let ones_row = tape.constant(vec![1.0; hw], vec![1, hw])?;
    let mu_rep = mu_col.matmul(&ones_row, false, false)?; // (C, HW)
    let centered = z.sub(&mu_rep)?;
    let cov = centered.matmul(&centered, false, true)?.scale(1.0 / hw as f64)?;
    Ok((mu_col.reshape(&[c])?, cov))
}

/// Taped batch-level moments of a (B, C) feature block.
fn taped_batch_moments(z: &Tensor, b: usize) -> Result<(Tensor, Tensor)> {
    let mu = z.mean_rows()?; // (C,)
    let centered = z.sub(&mu)?;
    let cov = centered.matmul(&centered, true, false)?.scale(1.0 / b as f64)?;
    Ok((mu, cov))
}

/// Per-layer feature-consistency scalars: the mean over samples of the
/// Gaussian KLD between the detached clean statistics and the poisons'.
pub fn feature_consistency(
    poison_trace: &FeatureTrace,
    clean: &[LayerGaussians],
    flip_kld: bool,
) -> Result<Vec<Tensor>> {
    if poison_trace.maps.len() != clean.len() {
        return Err(Error::Contract(format!(
            "poison trace has {} layers, clean trace {}",
            poison_trace.maps.len(),
            clean.len()
        )));
    }
    let mut layers = Vec::with_capacity(clean.len());
    for (map, clean_layer) in poison_trace.maps.iter().zip(clean) {
        let tape = map.tensor.tape().clone();
        let (b, c, hw) = (map.batch, map.channels, map.height * map.width);
        if c != clean_layer.dim {
            return Err(Error::Contract(format!(
                "layer misalignment: {c} channels vs {}",
                clean_layer.dim
            )));
        }
        let mut total: Option<Tensor> = None;
        if hw > 1 {
            if clean_layer.gaussians.len() != b {
                return Err(Error::Contract(format!(
                    "clean trace has {} sample Gaussians for a batch of {b}",
                    clean_layer.gaussians.len()
                )));
            }
            for i in 0..b {
                let z = map.tensor.slice(0, i, 1)?.reshape(&[c, hw])?;
                let (mu_p, cov_p) = taped_spatial_moments(&z, c, hw)?;
                let (mu_c, cov_c) = &clean_layer.gaussians[i];
                let mu_c = tape.constant(mu_c.clone(), vec![c])?;
                let cov_c = tape.constant(cov_c.clone(), vec![c, c])?;
                let kld = if flip_kld {
                    gaussian_kld(&mu_p, &cov_p, &mu_c, &cov_c)?
                } else {
                    gaussian_kld(&mu_c, &cov_c, &mu_p, &cov_p)?
                };
                total = Some(match total {
                    Some(t) => t.add(&kld)?,
                    None => kld,
                });
            }
            layers.push(total.expect("batch nonempty").scale(1.0 / b as f64)?);
        } else {
            let z = map.tensor.reshape(&[b, c])?;
            let (mu_p, cov_p) = taped_batch_moments(&z, b)?;
            let (mu_c, cov_c) = &clean_layer.gaussians[0];
            let mu_c = tape.constant(mu_c.clone(), vec![c])?;
            let cov_c = tape.constant(cov_c.clone(), vec![c, c])?;
            let kld = if flip_kld {
                gaussian_kld(&mu_p, &cov_p, &mu_c, &cov_c)?
            } else {
                gaussian_kld(&mu_c, &cov_c, &mu_p, &cov_p)?
            };
            layers.push(kld);
        }
    }
    Ok(layers)
}

/// Value-only mean per-layer feature KLD between a model's clean and
/// poisoned traces (current-batch statistics, no recording).
pub fn measure_feature_kld(
    model: &ModelState,
    clean: &[f64],
    poisoned: &[f64],
    batch_size: usize,
    flip_kld: bool,
) -> Result<f64> {
    let trace = |values: &[f64]| -> Result<Vec<LayerGaussians>> {
        let tape = Tape::new();
        tape.set_mode(TapeMode::Frozen);
        let pass = model.forward(&tape, values, batch_size, StatsMode::TrainStats, GradScope::NoParams, true)?;
        clean_gaussians(&pass.features.expect("capture requested"))
    };
    let clean_g = trace(clean)?;
    let poison_g = trace(poisoned)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (cl, pl) in clean_g.iter().zip(&poison_g) {
        for (cg, pg) in cl.gaussians.iter().zip(&pl.gaussians) {
            let (a, b) = if flip_kld { (pg, cg) } else { (cg, pg) };
            total += gaussian_kld_value(&a.0, &a.1, &b.0, &b.1, cl.dim)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Mean posterior entropy of a batch under a model (current-batch
/// statistics, no recording).
pub fn mean_prediction_entropy(model: &ModelState, values: &[f64], batch_size: usize) -> Result<f64> {
    let tape = Tape::new();
    tape.set_mode(TapeMode::Frozen);
    let pass = model.forward(&tape, values, batch_size, StatsMode::TrainStats, GradScope::NoParams, false)?;
    let p = pass.posteriors()?.values();
    let k = model.classes();
    Ok(entropy_rows(&p, batch_size, k).iter().sum::<f64>() / batch_size as f64)
}

// ---------------------------------------------------------------------------
// synthesis
// ---------------------------------------------------------------------------

/// Run the PGD loop for one adversary batch against a frozen surrogate.
pub fn synthesize(
    mut batch: PoisonBatch,
    attacker: &mut Attacker,
    surrogate: &SurrogateState,
    lagrange: &mut LagrangeState,
    rng: &mut ChaCha8Rng,
) -> Result<(PoisonBatch, SynthesisReport)> {
    let dim = batch.clean.len() / batch.batch_size;
    let k = surrogate.model.classes();
    let spec_kind = attacker.spec.kind.clone();
    let feature_reg = attacker.spec.feature_reg;
    let flip_kld = attacker.spec.flip_kld;

    // DIA splits the batch by index parity: even indices are poisoned,
    // odd indices form the held objective half. Work in
    // evens-then-odds order so the held half is a contiguous slice.
    let order: Vec<usize> = if matches!(spec_kind, AttackKind::DiaAdapted) {
        let mut o: Vec<usize> = (0..batch.batch_size).step_by(2).collect();
        o.extend((1..batch.batch_size).step_by(2));
        o
    } else {
        (0..batch.batch_size).collect()
    };
    let poisoned_rows = if matches!(spec_kind, AttackKind::DiaAdapted) {
        batch.batch_size.div_ceil(2)
    } else {
        batch.batch_size
    };
    let mut clean = vec![0.0; batch.clean.len()];
    let mut labels = vec![0usize; batch.batch_size];
    for (w, &orig) in order.iter().enumerate() {
        clean[w * dim..(w + 1) * dim].copy_from_slice(&batch.clean[orig * dim..(orig + 1) * dim]);
        labels[w] = batch.labels[orig];
    }

    let attack_model: &ModelState = match spec_kind {
        AttackKind::Unlearnable => attacker.reference_model(&surrogate.model, rng),
        ref kind if kind.uses_live_surrogate() => &surrogate.model,
        _ => &surrogate.initial,
    };
    // reborrow after the rng-consuming branch
    let attack_model = attack_model.clone();

    let mut eps = vec![0.0; batch.clean.len()];
    let mut report = SynthesisReport {
        iterations: batch.steps,
        ..Default::default()
    };
    let mut input_shape = vec![batch.batch_size];
    input_shape.extend(attack_model.arch().input_shape());

    for iter in 0..batch.steps {
        // clean trace, recomputed every iteration, gradients detached
        let clean_stats = if feature_reg {
            let tape = Tape::new();
            tape.set_mode(TapeMode::Frozen);
            let pass = attack_model.forward(
                &tape,
                &clean,
                batch.batch_size,
                StatsMode::TrainStats,
                GradScope::NoParams,
                true,
            )?;
            Some(clean_gaussians(&pass.features.expect("capture"))?)
        } else {
            None
        };

        let tape = Tape::new();
        let poisoned: Vec<f64> = clean.iter().zip(&eps).map(|(x, e)| x + e).collect();
        let input = tape.leaf(poisoned, input_shape.clone(), true)?;
        let pass = attack_model.forward_from(&input, StatsMode::TrainStats, GradScope::NoParams, feature_reg)?;

        let attack_loss = match &spec_kind {
            AttackKind::Nhe => nhe_loss(&pass.logits, &labels, k)?,
            AttackKind::Ble { .. } => {
                let confusion = attacker
                    .confusion
                    .as_mut()
                    .ok_or_else(|| Error::Contract("low-entropy attack without confusion state".into()))?;
                ble_loss(&pass.logits, &labels, confusion)?
            }
            AttackKind::MaxCe => cross_entropy(&pass.logits, &labels, k)?.neg()?,
            AttackKind::TepaMaxEnt => entropy(&pass.logits)?.neg()?,
            AttackKind::Unlearnable => cross_entropy(&pass.logits, &labels, k)?,
            AttackKind::AdvPoison => {
                let shifted: Vec<usize> = labels.iter().map(|&y| (y + 1) % k).collect();
                cross_entropy(&pass.logits, &shifted, k)?
            }
            AttackKind::DiaAdapted => {
                let held = pass.logits.slice(0, poisoned_rows, batch.batch_size - poisoned_rows)?;
                cross_entropy(&held, &labels[poisoned_rows..], k)?.neg()?
            }
        };

        let mut reg_values = Vec::new();
        let total = if feature_reg {
            let regs = feature_consistency(
                pass.features.as_ref().expect("capture requested"),
                clean_stats.as_ref().expect("clean stats"),
                flip_kld,
            )?;
            let l = regs.len() as f64;
            let mut total = attack_loss.clone();
            for (reg, &lam) in regs.iter().zip(&lagrange.lambdas) {
                reg_values.push(reg.item());
                if lam != 0.0 {
                    total = total.add(&reg.scale(lam / l)?)?;
                }
            }
            total
        } else {
            attack_loss.clone()
        };

        let loss_value = total.item();
        if !loss_value.is_finite() {
            return Err(Error::Numerics(format!(
                "poison loss became {loss_value} at iteration {iter}"
            )));
        }
        report.final_attack_loss = attack_loss.item();

        total.backward()?;
        let grad = input.grad().ok_or_else(|| Error::Contract("input gradient missing".into()))?;

        // sign step on the poisoned rows, then project
        for i in 0..poisoned_rows * dim {
            let g = grad[i];
            if g != 0.0 {
                eps[i] -= batch.step_size * g.signum();
            }
            eps[i] = eps[i].clamp(-batch.budget, batch.budget);
            let boxed = (clean[i] + eps[i]).clamp(0.0, 1.0);
            eps[i] = boxed - clean[i];
        }
        let step_max = eps.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
        report.max_eps_seen = report.max_eps_seen.max(step_max);
        report.box_violations += clean
            .iter()
            .zip(&eps)
            .filter(|(x, e)| {
                let v = **x + **e;
                !(-1e-12..=1.0 + 1e-12).contains(&v)
            })
            .count();

        if feature_reg {
            lagrange.ascend(&reg_values);
            report.lambda_history.push(lagrange.lambdas.clone());
        }
    }

    // scatter the perturbation back to the original sample order
    for (w, &orig) in order.iter().enumerate() {
        batch.epsilon[orig * dim..(orig + 1) * dim].copy_from_slice(&eps[w * dim..(w + 1) * dim]);
    }
    batch.check_invariants()?;

    let final_poison = batch.poisoned();
    report.mean_feature_kld =
        measure_feature_kld(&attack_model, &batch.clean, &final_poison, batch.batch_size, flip_kld)?;
    report.mean_poison_entropy = mean_prediction_entropy(&attack_model, &final_poison, batch.batch_size)?;
    Ok((batch, report))
}
