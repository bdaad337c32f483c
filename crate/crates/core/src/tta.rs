//! Test-time-adaptation victims and their defense stack.
//!
//! Every method follows the online protocol: the predictions returned for
//! a batch are produced before the gradient update that batch triggers.
//! Defenses compose in a fixed order: entropy filtering, augmentation
//! consistency, the gradient step, the EMA update, stochastic restore.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{stochastic_restore, EmaModel, GradScope, ModelState, StatsMode};
use crate::tensor::{Tape, TapeMode, Tensor};
use crate::util::{argmax_rows, entropy_rows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtaMethod {
    /// No adaptation; eval-statistics inference only.
    Source,
    /// Entropy minimization over batch-norm affine parameters.
    TentLite,
    /// Self-training with the generalized cross-entropy loss.
    RplLite,
    /// Entropy minimization with entropy filtering and diversity weighting.
    EataLite,
    /// EMA-teacher consistency training.
    CottaLite,
}

impl TtaMethod {
    pub fn label(&self) -> &'static str {
        match self {
            TtaMethod::Source => "source",
            TtaMethod::TentLite => "tent-lite",
            TtaMethod::RplLite => "rpl-lite",
            TtaMethod::EataLite => "eata-lite",
            TtaMethod::CottaLite => "cotta-lite",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TtaConfig {
    /// Label used in reports; defaults to the method label.
    pub name: String,
    pub method: TtaMethod,
    /// Defense flags, applied on top of whatever the method does.
    #[serde(default)]
    pub entropy_threshold: bool,
    #[serde(default)]
    pub data_augmentation: bool,
    #[serde(default)]
    pub ema_update: bool,
    #[serde(default)]
    pub stochastic_restore: bool,
    pub learning_rate: f64,
    pub threshold_coefficient: f64,
    pub ema_momentum: f64,
    pub restore_probability: f64,
    pub gce_q: f64,
    pub augmentation_count: usize,
    pub augmentation_noise: f64,
    /// Momentum of the running statistics toward the current batch.
    pub bn_momentum: f64,
    /// Base of the entropy logarithm. The threshold comparison is
    /// base-invariant; this only affects reported entropy units.
    pub entropy_log_base: f64,
}

impl TtaConfig {
    pub fn new(method: TtaMethod) -> Self {
        TtaConfig {
            name: method.label().to_string(),
            method,
            entropy_threshold: false,
            data_augmentation: false,
            ema_update: false,
            stochastic_restore: false,
            learning_rate: 0.1,
            threshold_coefficient: 0.05,
            ema_momentum: 0.999,
            restore_probability: 0.01,
            gce_q: 0.8,
            augmentation_count: 4,
            augmentation_noise: 0.05,
            bn_momentum: 1.0,
            entropy_log_base: std::f64::consts::E,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Contract(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.threshold_coefficient > 0.0 && self.threshold_coefficient < 1.0) {
            return Err(Error::Contract(format!(
                "threshold coefficient {} must lie in (0, 1)",
                self.threshold_coefficient
            )));
        }
        if !(0.0..=1.0).contains(&self.restore_probability) {
            return Err(Error::Contract(format!(
                "restore probability {} must lie in [0, 1]",
                self.restore_probability
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Contract("ema momentum outside [0, 1]".into()));
        }
        if !(self.gce_q > 0.0 && self.gce_q <= 1.0) {
            return Err(Error::Contract(format!("gce exponent {} outside (0, 1]", self.gce_q)));
        }
        if self.entropy_log_base <= 1.0 {
            return Err(Error::Contract("entropy log base must exceed 1".into()));
        }
        Ok(())
    }

    pub fn needs_ema(&self) -> bool {
        self.ema_update || self.method == TtaMethod::CottaLite
    }
}

/// Telemetry for one adaptation step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptationStep {
    /// Error of the returned predictions; filled in by the harness,
    /// which holds the labels.
    pub pre_step_error: Option<f64>,
    /// True for samples that contributed to the loss.
    pub selected: Vec<bool>,
    /// Per-sample loss weights (zero for unselected samples).
    pub weights: Vec<f64>,
    pub loss: f64,
    pub update_norm: f64,
}

/// Mask of samples whose posterior entropy lies strictly below
/// `coefficient * log(K)`.
pub fn entropy_filter(posteriors: &[f64], classes: usize, coefficient: f64) -> Vec<bool> {
    let rows = posteriors.len() / classes;
    let threshold = coefficient * (classes as f64).ln();
    entropy_rows(posteriors, rows, classes)
        .into_iter()
        .map(|h| h < threshold)
        .collect()
}

/// Sum along each row of a (B, K) tensor, producing (B, 1).
fn row_sums(t: &Tensor) -> Result<Tensor> {
    let shape = t.shape();
    let ones = t.tape().constant(vec![1.0; shape[1]], vec![shape[1], 1])?;
    t.matmul(&ones, false, false)
}

/// Per-sample weighted mean of a (B, 1) loss column. Normalizes by the
/// number of samples with nonzero weight so an empty selection yields 0.
fn weighted_mean(rows: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let selected = weights.iter().filter(|&&w| w > 0.0).count().max(1);
    let scaled: Vec<f64> = weights.iter().map(|&w| w / selected as f64).collect();
    let w = rows.tape().constant(scaled, vec![weights.len(), 1])?;
    rows.mul(&w)?.sum_all()
}

/// Mean entropy of the posterior rows as a taped scalar, weighted.
fn entropy_loss(posteriors: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let logp = posteriors.clamp_min(1e-12)?.log()?;
    let per_elem = posteriors.mul(&logp)?.neg()?;
    weighted_mean(&row_sums(&per_elem)?, weights)
}

/// Generalized cross-entropy toward the argmax pseudo-labels:
/// mean over samples of (1 - p_label^q) / q.
pub fn gce_loss(posteriors: &Tensor, pseudo_labels: &[usize], q: f64) -> Result<Tensor> {
    let shape = posteriors.shape();
    let (b, k) = (shape[0], shape[1]);
    if pseudo_labels.len() != b {
        return Err(Error::Contract(format!(
            "{} pseudo-labels for a batch of {b}",
            pseudo_labels.len()
        )));
    }
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in pseudo_labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let sel = posteriors.tape().constant(onehot, vec![b, k])?;
    let p_label = row_sums(&posteriors.mul(&sel)?)?;
    // p^q = exp(q ln p)
    let pq = p_label.clamp_min(1e-12)?.log()?.scale(q)?.exp()?;
    pq.neg()?.add_scalar(1.0)?.scale(1.0 / q)?.mean_all()
}

/// Cross-entropy of posterior rows against fixed target rows.
fn cross_entropy_to_targets(posteriors: &Tensor, targets: &[f64], weights: &[f64]) -> Result<Tensor> {
    let shape = posteriors.shape();
    let t = posteriors.tape().constant(targets.to_vec(), shape.clone())?;
    let per_elem = t.mul(&posteriors.clamp_min(1e-12)?.log()?)?.neg()?;
    weighted_mean(&row_sums(&per_elem)?, weights)
}

/// A victim: the adapting model plus everything its method needs.
pub struct VictimState {
    pub cfg: TtaConfig,
    pub model: ModelState,
    pub source: ModelState,
    pub ema: Option<EmaModel>,
    /// Running mean posterior for diversity weighting.
    diversity_mean: Option<Vec<f64>>,
}

/// What one submitted batch produced.
pub struct StepOutcome {
    pub predictions: Vec<usize>,
    /// Posteriors of the returned predictions (the query response).
    pub posteriors: Vec<f64>,
    pub step: AdaptationStep,
}

impl VictimState {
    pub fn new(cfg: TtaConfig, source: ModelState) -> Result<Self> {
        cfg.validate()?;
        let ema = cfg
            .needs_ema()
            .then(|| EmaModel::new(&source, cfg.ema_momentum));
        Ok(VictimState {
            model: source.clone(),
            source,
            ema,
            cfg,
            diversity_mean: None,
        })
    }

    /// Observe one batch: emit predictions (pre-update), then adapt.
    pub fn adapt_step(&mut self, batch: &[f64], batch_size: usize, rng: &mut impl Rng) -> Result<StepOutcome> {
        if batch_size == 0 {
            return Err(Error::Contract("adapt_step on an empty batch".into()));
        }
        if self.cfg.needs_ema() && self.ema.is_none() {
            return Err(Error::Contract(format!(
                "method {} requires an EMA companion model",
                self.cfg.method.label()
            )));
        }
        let k = self.model.classes();

        if self.cfg.method == TtaMethod::Source {
            let tape = Tape::new();
            let pass = self.model.forward(
                &tape,
                batch,
                batch_size,
                StatsMode::EvalStats,
                GradScope::NoParams,
                false,
            )?;
            let posteriors = pass.posteriors()?.values();
            return Ok(StepOutcome {
                predictions: argmax_rows(&posteriors, batch_size, k),
                posteriors: posteriors.clone(),
                step: AdaptationStep {
                    pre_step_error: None,
                    selected: vec![true; batch_size],
                    weights: vec![1.0; batch_size],
                    loss: 0.0,
                    update_norm: 0.0,
                },
            });
        }

        // single recorded forward with current-batch statistics
        let tape = Tape::new();
        let pass = self.model.forward(
            &tape,
            batch,
            batch_size,
            StatsMode::TrainStats,
            GradScope::Updatable,
            false,
        )?;
        let posterior_node = pass.posteriors()?;
        let online_posteriors = posterior_node.values();

        // deployed predictions: the EMA teacher answers when present
        let response_posteriors = match &self.ema {
            Some(ema) => {
                let t = Tape::new();
                t.set_mode(TapeMode::Frozen);
                ema.shadow
                    .forward(&t, batch, batch_size, StatsMode::TrainStats, GradScope::NoParams, false)?
                    .posteriors()?
                    .values()
            }
            None => online_posteriors.clone(),
        };
        let predictions = argmax_rows(&response_posteriors, batch_size, k);

        // defense order: entropy filtering -> augmentation consistency ->
        // gradient step -> EMA update -> stochastic restore
        let filtering = self.cfg.entropy_threshold || self.cfg.method == TtaMethod::EataLite;
        let selected: Vec<bool> = if filtering {
            entropy_filter(&online_posteriors, k, self.cfg.threshold_coefficient)
        } else {
            vec![true; batch_size]
        };
        let mut weights: Vec<f64> = selected.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        if self.cfg.method == TtaMethod::EataLite {
            if let Some(mean) = &self.diversity_mean {
                for (i, w) in weights.iter_mut().enumerate() {
                    if *w > 0.0 {
                        let row = &online_posteriors[i * k..(i + 1) * k];
                        *w = 1.0 - cosine_similarity(row, mean).abs();
                    }
                }
            }
        }

        let mut loss = match self.cfg.method {
            TtaMethod::TentLite | TtaMethod::EataLite => entropy_loss(&posterior_node, &weights)?,
            TtaMethod::RplLite => {
                let pseudo = argmax_rows(&online_posteriors, batch_size, k);
                // weights still gate which samples train
                let masked = gce_loss_masked(&posterior_node, &pseudo, self.cfg.gce_q, &weights)?;
                masked
            }
            TtaMethod::CottaLite => {
                let teacher = response_posteriors.clone();
                cross_entropy_to_targets(&posterior_node, &teacher, &weights)?
            }
            TtaMethod::Source => unreachable!(),
        };
        if self.cfg.data_augmentation {
            let aug = augmentation_consistency_on(
                &self.model,
                &tape,
                batch,
                batch_size,
                &online_posteriors,
                self.cfg.augmentation_count,
                self.cfg.augmentation_noise,
                rng,
            )?;
            loss = loss.add(&aug)?;
        }

        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::Numerics(format!(
                "adaptation loss became {loss_value} for {}",
                self.cfg.name
            )));
        }
        loss.backward()?;
        let update_norm = self.model.apply_gradient_step(&pass, self.cfg.learning_rate);
        self.model.apply_batch_stats(&pass, self.cfg.bn_momentum);

        if self.cfg.method == TtaMethod::EataLite {
            self.update_diversity_mean(&online_posteriors, &selected, k);
        }
        if let Some(ema) = &mut self.ema {
            ema.update(&self.model)?;
        }
        if self.cfg.stochastic_restore || self.cfg.method == TtaMethod::CottaLite {
            stochastic_restore(&mut self.model, &self.source, self.cfg.restore_probability, rng)?;
        }

        Ok(StepOutcome {
            predictions,
            posteriors: response_posteriors,
            step: AdaptationStep {
                pre_step_error: None,
                selected,
                weights,
                loss: loss_value,
                update_norm,
            },
        })
    }

    fn update_diversity_mean(&mut self, posteriors: &[f64], selected: &[bool], k: usize) {
        let picked: Vec<usize> = selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect();
        if picked.is_empty() {
            return;
        }
        let mut mean = vec![0.0; k];
        for &i in &picked {
            for c in 0..k {
                mean[c] += posteriors[i * k + c];
            }
        }
        mean.iter_mut().for_each(|v| *v /= picked.len() as f64);
        self.diversity_mean = Some(match self.diversity_mean.take() {
            Some(old) => old
                .iter()
                .zip(&mean)
                .map(|(o, m)| 0.9 * o + 0.1 * m)
                .collect(),
            None => mean,
        });
    }
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn gce_loss_masked(posteriors: &Tensor, pseudo: &[usize], q: f64, weights: &[f64]) -> Result<Tensor> {
    let shape = posteriors.shape();
    let (b, k) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in pseudo.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let sel = posteriors.tape().constant(onehot, vec![b, k])?;
    let p_label = row_sums(&posteriors.mul(&sel)?)?;
    let pq = p_label.clamp_min(1e-12)?.log()?.scale(q)?.exp()?;
    let per_sample = pq.neg()?.add_scalar(1.0)?.scale(1.0 / q)?;
    weighted_mean(&per_sample, weights)
}

/// Mean cross-entropy between each augmented view's posterior and the
/// unaugmented posterior (a fixed target).
pub fn augmentation_consistency(
    model: &ModelState,
    tape: &Tape,
    batch: &[f64],
    batch_size: usize,
    n_aug: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if n_aug == 0 {
        return Err(Error::Contract("augmentation count must be >= 1".into()));
    }
    let base = model
        .forward(tape, batch, batch_size, StatsMode::TrainStats, GradScope::Updatable, false)?
        .posteriors()?
        .values();
    augmentation_consistency_on(model, tape, batch, batch_size, &base, n_aug, noise, rng)
}

#[allow(clippy::too_many_arguments)]
fn augmentation_consistency_on(
    model: &ModelState,
    tape: &Tape,
    batch: &[f64],
    batch_size: usize,
    base_posteriors: &[f64],
    n_aug: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if n_aug == 0 {
        return Err(Error::Contract("augmentation count must be >= 1".into()));
    }
    let input_shape = model.arch().input_shape();
    let mut total: Option<Tensor> = None;
    let weights = vec![1.0; batch_size];
    for _ in 0..n_aug {
        let view = augment(batch, batch_size, &input_shape, noise, rng);
        let pass = model.forward(tape, &view, batch_size, StatsMode::TrainStats, GradScope::Updatable, false)?;
        let p = pass.posteriors()?;
        let ce = cross_entropy_to_targets(&p, base_posteriors, &weights)?;
        total = Some(match total {
            Some(t) => t.add(&ce)?,
            None => ce,
        });
    }
    total.expect("n_aug >= 1").scale(1.0 / n_aug as f64)
}

/// Additive Gaussian noise, plus a horizontal flip half the time for
/// image-shaped inputs.
fn augment(batch: &[f64], batch_size: usize, input_shape: &[usize], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let per: usize = input_shape.iter().product();
    let mut out = batch.to_vec();
    if input_shape.len() == 3 && rng.random::<bool>() {
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        for b in 0..batch_size {
            for ci in 0..c {
                for y in 0..h {
                    let row = (b * per) + (ci * h + y) * w;
                    out[row..row + w].reverse();
                }
            }
        }
    }
    if noise > 0.0 {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise * z;
        }
    }
    out
}
