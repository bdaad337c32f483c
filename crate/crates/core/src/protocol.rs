//! The evaluation harness: stream scheduling, batch composition, query
//! auditing and attack-success metrics.
//!
//! One stream is strictly sequential. The adversary owns half the pools,
//! sees only its own query responses, and is scored on the benign pools
//! it never touches. The audit trail proves those properties for every
//! completed run; any violation aborts the run, since it can only mean a
//! harness bug.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::poison::{
    synthesize, Attacker, AttackSpec, LagrangeState, PoisonBatch, SynthesisReport,
};
use crate::surrogate::SurrogateState;
use crate::tta::{StepOutcome, TtaConfig, VictimState};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyMode {
    /// Adversary batches evenly spaced through each segment.
    Uniform,
    /// Adversary batches contiguous at the start of each segment.
    NonUniform,
}

impl FrequencyMode {
    pub fn label(&self) -> &'static str {
        match self {
            FrequencyMode::Uniform => "uniform",
            FrequencyMode::NonUniform => "non-uniform",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotOrigin {
    Adversary,
    Benign,
}

/// One scheduled batch: which segment, which pool, and where in it.
#[derive(Clone, Copy, Debug)]
pub struct SlotPlan {
    pub segment: usize,
    pub origin: SlotOrigin,
    /// Sample offset into the segment's pool for this origin.
    pub pool_offset: usize,
}

#[derive(Clone, Debug)]
pub struct StreamSchedule {
    pub batch_size: usize,
    pub ratio: f64,
    pub mode: FrequencyMode,
    pub slots: Vec<SlotPlan>,
}

impl StreamSchedule {
    /// Lay out the stream over the dataset's segments. Benign batches
    /// consume each segment's benign pool in full; adversary batches are
    /// injected on top so that the realized poison fraction lands within
    /// 1/T of the requested ratio.
    pub fn build(dataset: &Dataset, batch_size: usize, ratio: f64, mode: FrequencyMode) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("attack budget {ratio} outside [0, 1)")));
        }
        let mut benign_per_segment = Vec::new();
        let mut capacity_per_segment = Vec::new();
        for (i, seg) in dataset.segments.iter().enumerate() {
            if seg.benign.len() % batch_size != 0 || seg.benign.is_empty() {
                return Err(Error::Config(format!(
                    "segment {i} benign pool of {} is not a positive multiple of batch size {batch_size}",
                    seg.benign.len()
                )));
            }
            benign_per_segment.push(seg.benign.len() / batch_size);
            capacity_per_segment.push(seg.adversary.len() / batch_size);
        }
        let benign_total: usize = benign_per_segment.iter().sum();
        let adversary_total = (benign_total as f64 * ratio / (1.0 - ratio)).round() as usize;
        if adversary_total > capacity_per_segment.iter().sum::<usize>() {
            return Err(Error::Config(format!(
                "adversary pools cannot supply {adversary_total} batches for ratio {ratio}"
            )));
        }

        // spread the adversary budget across segments by largest
        // remainder, respecting each segment's pool capacity
        let shares: Vec<f64> = benign_per_segment
            .iter()
            .map(|&b| b as f64 * ratio / (1.0 - ratio))
            .collect();
        let mut adv_per_segment: Vec<usize> = shares
            .iter()
            .zip(&capacity_per_segment)
            .map(|(s, &cap)| (s.floor() as usize).min(cap))
            .collect();
        let mut assigned: usize = adv_per_segment.iter().sum();
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - shares[a].floor();
            let fb = shares[b] - shares[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        let mut guard = 0;
        while assigned < adversary_total {
            let mut progressed = false;
            for &i in &order {
                if assigned == adversary_total {
                    break;
                }
                if adv_per_segment[i] < capacity_per_segment[i] {
                    adv_per_segment[i] += 1;
                    assigned += 1;
                    progressed = true;
                }
            }
            guard += 1;
            if !progressed || guard > adversary_total + 1 {
                return Err(Error::Config("could not place the adversary budget".into()));
            }
        }

        let mut slots = Vec::new();
        for (seg_idx, (&benign, &adv)) in benign_per_segment.iter().zip(&adv_per_segment).enumerate() {
            let batches = benign + adv;
            // adversary positions within the segment
            let adv_positions: Vec<usize> = match mode {
                FrequencyMode::Uniform => (0..adv).map(|j| j * batches / adv.max(1)).collect(),
                FrequencyMode::NonUniform => (0..adv).collect(),
            };
            let mut is_adv = vec![false; batches];
            for &p in &adv_positions {
                debug_assert!(!is_adv[p]);
                is_adv[p] = true;
            }
            let mut adv_seen = 0;
            let mut ben_seen = 0;
            for flag in is_adv {
                if flag {
                    slots.push(SlotPlan {
                        segment: seg_idx,
                        origin: SlotOrigin::Adversary,
                        pool_offset: adv_seen * batch_size,
                    });
                    adv_seen += 1;
                } else {
                    slots.push(SlotPlan {
                        segment: seg_idx,
                        origin: SlotOrigin::Benign,
                        pool_offset: ben_seen * batch_size,
                    });
                    ben_seen += 1;
                }
            }
        }
        let schedule = StreamSchedule {
            batch_size,
            ratio,
            mode,
            slots,
        };
        debug_assert!(
            (schedule.realized_ratio() - ratio).abs()
                <= 1.0 / schedule.slots.len() as f64 + 1e-12,
            "realized ratio {} drifted from {ratio}",
            schedule.realized_ratio()
        );
        Ok(schedule)
    }

    pub fn realized_ratio(&self) -> f64 {
        let adv = self
            .slots
            .iter()
            .filter(|s| s.origin == SlotOrigin::Adversary)
            .count();
        adv as f64 / self.slots.len() as f64
    }

    pub fn total_batches(&self) -> usize {
        self.slots.len()
    }
}

// ---------------------------------------------------------------------------
// audited online model
// ---------------------------------------------------------------------------

/// Per-batch audit record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchAudit {
    pub origin: SlotOrigin,
    pub online_forwards: usize,
    pub param_reads: usize,
}

/// Query accounting for a full run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct QueryAudit {
    pub per_batch: Vec<BatchAudit>,
    /// Sample ids of every batch handed to the surrogate for distillation.
    pub surrogate_batches: Vec<Vec<usize>>,
    pub violations: Vec<String>,
}

impl QueryAudit {
    fn record_batch(&mut self, origin: SlotOrigin, forwards: usize, reads: usize) -> Result<()> {
        self.per_batch.push(BatchAudit {
            origin,
            online_forwards: forwards,
            param_reads: reads,
        });
        if forwards != 1 {
            let msg = format!("batch {} saw {forwards} online forwards", self.per_batch.len() - 1);
            self.violations.push(msg.clone());
            return Err(Error::Audit(msg));
        }
        if reads != 0 {
            let msg = format!("batch {} read online parameters {reads} times", self.per_batch.len() - 1);
            self.violations.push(msg.clone());
            return Err(Error::Audit(msg));
        }
        Ok(())
    }

    fn record_surrogate_input(&mut self, origin: SlotOrigin, sample_ids: &[usize]) -> Result<()> {
        if origin != SlotOrigin::Adversary {
            let msg = "surrogate received a benign-origin batch".to_string();
            self.violations.push(msg.clone());
            return Err(Error::Audit(msg));
        }
        self.surrogate_batches.push(sample_ids.to_vec());
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
            && self.per_batch.iter().all(|b| b.online_forwards == 1 && b.param_reads == 0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditSummary {
    pub batches: usize,
    pub online_forwards: usize,
    pub online_param_reads: usize,
    pub surrogate_batches: usize,
    pub violations: usize,
}

/// The deployed model behind its query interface. The harness can only
/// submit batches; parameter reads are counted, and the adversary side
/// never holds a reference to this struct's internals.
pub struct OnlineModel {
    victim: VictimState,
    forwards_in_flight: usize,
    param_reads: usize,
}

impl OnlineModel {
    pub fn new(victim: VictimState) -> Self {
        OnlineModel {
            victim,
            forwards_in_flight: 0,
            param_reads: 0,
        }
    }

    /// The single query-response cycle for one batch.
    fn submit(&mut self, batch: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        self.forwards_in_flight += 1;
        self.victim.adapt_step(batch, n, rng)
    }

    /// Deliberate access path for white-box baselines; counted so the
    /// audit can prove it was never taken.
    pub fn read_parameters(&mut self) -> &ModelState {
        self.param_reads += 1;
        &self.victim.model
    }

    fn take_counters(&mut self) -> (usize, usize) {
        let f = self.forwards_in_flight;
        self.forwards_in_flight = 0;
        (f, self.param_reads)
    }
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PoisonSummary {
    pub batches: usize,
    pub max_eps: f64,
    pub box_violations: usize,
    pub mean_feature_kld: f64,
    pub mean_poison_entropy: f64,
    pub final_lambda_mean: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DistillSummary {
    pub rounds: usize,
    pub mean_initial_divergence: f64,
    pub mean_final_divergence: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub victim: String,
    pub attack: String,
    pub mode: String,
    pub ratio: f64,
    pub realized_ratio: f64,
    pub seed: u64,
    pub batches: usize,
    pub benign_samples: usize,
    /// Classification error on benign samples, per segment and overall.
    /// The overall number is the attack success rate.
    pub per_segment_error: Vec<f64>,
    pub overall_error: f64,
    pub audit: AuditSummary,
    pub poison: PoisonSummary,
    pub distill: DistillSummary,
    /// Open protocol choice, recorded per run: the surrogate's running
    /// statistics are refreshed from adversary batches during distillation.
    pub surrogate_bn_refreshed_from_adversary_batches: bool,
}

/// Stream-level knobs shared by every run in a grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamConfig {
    pub batch_size: usize,
    pub ratio: f64,
    pub mode: FrequencyMode,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub pgd_budget: f64,
    pub lambda_rate: f64,
    pub surrogate_learning_rate: f64,
    pub surrogate_iterations: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            batch_size: 32,
            ratio: 0.5,
            mode: FrequencyMode::Uniform,
            pgd_steps: crate::poison::DEFAULT_STEPS,
            pgd_step_size: crate::poison::DEFAULT_STEP_SIZE,
            pgd_budget: crate::poison::DEFAULT_BUDGET,
            lambda_rate: crate::poison::DEFAULT_LAMBDA_RATE,
            surrogate_learning_rate: crate::surrogate::DEFAULT_DISTILL_LR,
            surrogate_iterations: crate::surrogate::DEFAULT_DISTILL_ITERS,
        }
    }
}

/// Run one full test stream: schedule batches, synthesize poisons on the
/// adversary slots, adapt the victim online, score the benign slots.
pub fn run_stream(
    dataset: &Dataset,
    source: &ModelState,
    victim_cfg: &TtaConfig,
    attack: Option<&AttackSpec>,
    stream: &StreamConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    let schedule = StreamSchedule::build(dataset, stream.batch_size, stream.ratio, stream.mode)?;
    let victim = VictimState::new(victim_cfg.clone(), source.clone())?;
    let mut online = OnlineModel::new(victim);
    let mut victim_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "victim"));
    let mut adversary_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "adversary"));

    let mut audit = QueryAudit::default();
    let classes = dataset.classes;
    let mut adversary_side = match attack {
        Some(spec) => Some((
            SurrogateState::new(source, stream.surrogate_learning_rate, stream.surrogate_iterations),
            Attacker::new(spec.clone(), classes)?,
        )),
        None => None,
    };

    let dim = dataset.form.sample_len();
    let n_segments = dataset.segments.len();
    let mut wrong = vec![0usize; n_segments];
    let mut counted = vec![0usize; n_segments];
    let mut poison_summary = PoisonSummary::default();
    let mut distill_summary = DistillSummary::default();
    let mut synth_reports: Vec<SynthesisReport> = Vec::new();

    // benign ids for the isolation check
    let benign_ids: std::collections::HashSet<usize> = dataset
        .segments
        .iter()
        .flat_map(|s| s.benign.sample_ids.iter().copied())
        .collect();

    for slot in &schedule.slots {
        let seg = &dataset.segments[slot.segment];
        let n = schedule.batch_size;
        match slot.origin {
            SlotOrigin::Adversary => {
                let pool = &seg.adversary;
                let values = &pool.values[slot.pool_offset * dim..(slot.pool_offset + n) * dim];
                let labels = &pool.labels[slot.pool_offset..slot.pool_offset + n];
                let ids = &pool.sample_ids[slot.pool_offset..slot.pool_offset + n];

                let submitted: Vec<f64> = match (&mut adversary_side, attack) {
                    (Some((surrogate, attacker)), Some(spec)) => {
                        let batch = PoisonBatch::new(
                            values.to_vec(),
                            labels.to_vec(),
                            stream.pgd_budget,
                            stream.pgd_step_size,
                            stream.pgd_steps,
                        )?;
                        let layers = source.bn_layer_count();
                        let mut lagrange = if spec.feature_reg {
                            LagrangeState::active(layers, stream.lambda_rate)
                        } else {
                            LagrangeState::pinned(layers)
                        };
                        let (poisoned, report) =
                            synthesize(batch, attacker, surrogate, &mut lagrange, &mut adversary_rng)?;
                        poison_summary.batches += 1;
                        poison_summary.max_eps = poison_summary.max_eps.max(report.max_eps_seen);
                        poison_summary.box_violations += report.box_violations;
                        poison_summary.mean_feature_kld += report.mean_feature_kld;
                        poison_summary.mean_poison_entropy += report.mean_poison_entropy;
                        if let Some(last) = report.lambda_history.last() {
                            poison_summary.final_lambda_mean +=
                                last.iter().sum::<f64>() / last.len().max(1) as f64;
                        }
                        synth_reports.push(report);
                        poisoned.poisoned()
                    }
                    _ => values.to_vec(),
                };

                let outcome = online.submit(&submitted, n, &mut victim_rng)?;
                let (forwards, reads) = online.take_counters();
                audit.record_batch(SlotOrigin::Adversary, forwards, reads)?;

                if let Some((surrogate, _)) = &mut adversary_side {
                    audit.record_surrogate_input(SlotOrigin::Adversary, ids)?;
                    let trace = surrogate.distill(&submitted, n, &outcome.posteriors)?;
                    if let (Some(&first), Some(&last)) = (trace.first(), trace.last()) {
                        distill_summary.rounds += 1;
                        distill_summary.mean_initial_divergence += first;
                        distill_summary.mean_final_divergence += last;
                    }
                }
            }
            SlotOrigin::Benign => {
                let pool = &seg.benign;
                let values = &pool.values[slot.pool_offset * dim..(slot.pool_offset + n) * dim];
                let labels = &pool.labels[slot.pool_offset..slot.pool_offset + n];
                for id in &pool.sample_ids[slot.pool_offset..slot.pool_offset + n] {
                    debug_assert!(benign_ids.contains(id));
                }

                let outcome = online.submit(values, n, &mut victim_rng)?;
                let (forwards, reads) = online.take_counters();
                audit.record_batch(SlotOrigin::Benign, forwards, reads)?;

                counted[slot.segment] += n;
                wrong[slot.segment] += outcome
                    .predictions
                    .iter()
                    .zip(labels)
                    .filter(|(p, l)| p != l)
                    .count();
            }
        }
    }

    // isolation: nothing the surrogate saw may come from the benign pools
    for batch_ids in &audit.surrogate_batches {
        if batch_ids.iter().any(|id| benign_ids.contains(id)) {
            return Err(Error::Audit("benign sample reached the surrogate".into()));
        }
    }
    if !audit.is_clean() {
        return Err(Error::Audit(format!("{} violations recorded", audit.violations.len())));
    }

    if poison_summary.batches > 0 {
        let b = poison_summary.batches as f64;
        poison_summary.mean_feature_kld /= b;
        poison_summary.mean_poison_entropy /= b;
        poison_summary.final_lambda_mean /= b;
    }
    if distill_summary.rounds > 0 {
        let r = distill_summary.rounds as f64;
        distill_summary.mean_initial_divergence /= r;
        distill_summary.mean_final_divergence /= r;
    }

    let per_segment_error: Vec<f64> = wrong
        .iter()
        .zip(&counted)
        .map(|(&w, &c)| if c == 0 { 0.0 } else { w as f64 / c as f64 })
        .collect();
    let total_wrong: usize = wrong.iter().sum();
    let total_counted: usize = counted.iter().sum();

    Ok(ExperimentReport {
        victim: victim_cfg.name.clone(),
        attack: attack.map_or_else(|| "none".to_string(), |a| a.label.clone()),
        mode: stream.mode.label().to_string(),
        ratio: stream.ratio,
        realized_ratio: schedule.realized_ratio(),
        seed,
        batches: schedule.total_batches(),
        benign_samples: total_counted,
        per_segment_error,
        overall_error: if total_counted == 0 {
            0.0
        } else {
            total_wrong as f64 / total_counted as f64
        },
        audit: AuditSummary {
            batches: audit.per_batch.len(),
            online_forwards: audit.per_batch.iter().map(|b| b.online_forwards).sum(),
            online_param_reads: audit.per_batch.iter().map(|b| b.param_reads).sum(),
            surrogate_batches: audit.surrogate_batches.len(),
            violations: audit.violations.len(),
        },
        poison: poison_summary,
        distill: distill_summary,
        surrogate_bn_refreshed_from_adversary_batches: true,
    })
}

/// Per-attack average rank over a complete attacks x victims error table.
/// Rank 1 goes to the highest error in each victim column; ties share the
/// mean of their positions.
pub fn average_rank(errors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let rows = errors.len();
    if rows == 0 {
        return Err(Error::Contract("empty rank table".into()));
    }
    let cols = errors[0].len();
    if cols == 0 || errors.iter().any(|r| r.len() != cols) {
        return Err(Error::Contract("rank table is ragged or empty".into()));
    }
    if errors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Contract("rank table holds non-finite entries".into()));
    }
    let mut rank_sum = vec![0.0; rows];
    for col in 0..cols {
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| errors[b][col].partial_cmp(&errors[a][col]).unwrap());
        let mut i = 0;
        while i < rows {
            let mut j = i;
            while j + 1 < rows && errors[order[j + 1]][col] == errors[order[i]][col] {
                j += 1;
            }
            // positions i..=j share the mean rank
            let mean = (i + 1 + j + 1) as f64 / 2.0;
            for &row in &order[i..=j] {
                rank_sum[row] += mean;
            }
            i = j + 1;
        }
    }
    Ok(rank_sum.iter().map(|s| s / cols as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{self, CorruptionKind, CorruptionStep, InputForm, PretrainSettings, SyntheticSpec};
    use crate::nn::UpdatableScope;
    use crate::poison::AttackKind;
    use crate::tta::TtaMethod;
    use rand::{Rng, SeedableRng};

    fn toy_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            form: InputForm::Vector { dim: 16 },
            separation: 0.3,
            noise: 0.08,
            segments: vec![
                CorruptionStep { kind: CorruptionKind::GaussianNoise, severity: 3 },
                CorruptionStep { kind: CorruptionKind::Contrast, severity: 4 },
            ],
            samples_per_segment: 32,
            seed,
        }
    }

    fn toy_setup(seed: u64) -> (Dataset, ModelState) {
        let spec = toy_spec(seed);
        let data = datagen::generate(&spec).unwrap();
        let (model, _) = datagen::pretrain_source(
            &spec,
            UpdatableScope::BnAffine,
            &PretrainSettings { epochs: 15, train_samples: 256, ..Default::default() },
        )
        .unwrap();
        (data, model)
    }

    fn fast_stream() -> StreamConfig {
        StreamConfig {
            batch_size: 8,
            pgd_steps: 10,
            ..Default::default()
        }
    }

    #[test]
    fn zero_ratio_schedules_no_adversary_slots() {
        let spec = toy_spec(1);
        let data = datagen::generate(&spec).unwrap();
        for mode in [FrequencyMode::Uniform, FrequencyMode::NonUniform] {
            let s = StreamSchedule::build(&data, 8, 0.0, mode).unwrap();
            assert!(s.slots.iter().all(|sl| sl.origin == SlotOrigin::Benign));
        }
    }

    #[test]
    fn modes_schedule_identical_multisets_of_adversary_content() {
        let spec = toy_spec(2);
        let data = datagen::generate(&spec).unwrap();
        let content = |mode| {
            let s = StreamSchedule::build(&data, 8, 0.5, mode).unwrap();
            let mut blocks: Vec<Vec<usize>> = s
                .slots
                .iter()
                .filter(|sl| sl.origin == SlotOrigin::Adversary)
                .map(|sl| {
                    data.segments[sl.segment].adversary.sample_ids
                        [sl.pool_offset..sl.pool_offset + 8]
                        .to_vec()
                })
                .collect();
            blocks.sort();
            blocks
        };
        let uniform = content(FrequencyMode::Uniform);
        let non_uniform = content(FrequencyMode::NonUniform);
        assert_eq!(uniform, non_uniform);
        assert!(!uniform.is_empty());

        // orderings differ: non-uniform front-loads each segment
        let order = |mode| {
            StreamSchedule::build(&data, 8, 0.5, mode)
                .unwrap()
                .slots
                .iter()
                .map(|s| s.origin)
                .collect::<Vec<_>>()
        };
        assert_ne!(order(FrequencyMode::Uniform), order(FrequencyMode::NonUniform));
    }

    #[test]
    fn realized_ratio_stays_within_one_over_t() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let spec = toy_spec(3);
        let data = datagen::generate(&spec).unwrap();
        for _ in 0..30 {
            let ratio: f64 = rng.random_range(0.0..0.5);
            let s = StreamSchedule::build(&data, 8, ratio, FrequencyMode::Uniform).unwrap();
            let t = s.total_batches() as f64;
            assert!(
                (s.realized_ratio() - ratio).abs() <= 1.0 / t + 1e-12,
                "ratio {ratio}, realized {}",
                s.realized_ratio()
            );
        }
    }

    #[test]
    fn over_budget_ratio_is_rejected() {
        let spec = toy_spec(4);
        let data = datagen::generate(&spec).unwrap();
        assert!(matches!(
            StreamSchedule::build(&data, 8, 0.9, FrequencyMode::Uniform),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn no_attack_report_matches_manual_replay() {
        let (data, model) = toy_setup(5);
        let cfg = TtaConfig::new(TtaMethod::TentLite);
        let stream = fast_stream();
        let report = run_stream(&data, &model, &cfg, None, &stream, 7).unwrap();

        // independent replay of the same schedule
        let schedule = StreamSchedule::build(&data, stream.batch_size, stream.ratio, stream.mode).unwrap();
        let mut victim = VictimState::new(cfg, model.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(7, "victim"));
        let dim = 16;
        let mut wrong = 0usize;
        let mut counted = 0usize;
        for slot in &schedule.slots {
            let seg = &data.segments[slot.segment];
            let pool = match slot.origin {
                SlotOrigin::Adversary => &seg.adversary,
                SlotOrigin::Benign => &seg.benign,
            };
            let values = &pool.values[slot.pool_offset * dim..(slot.pool_offset + 8) * dim];
            let labels = &pool.labels[slot.pool_offset..slot.pool_offset + 8];
            let out = victim.adapt_step(values, 8, &mut rng).unwrap();
            if slot.origin == SlotOrigin::Benign {
                counted += 8;
                wrong += out.predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
            }
        }
        assert_eq!(report.benign_samples, counted);
        assert_eq!(report.overall_error, wrong as f64 / counted as f64);
        assert_eq!(report.attack, "none");
    }

    #[test]
    fn attack_run_passes_audit_and_respects_budget() {
        let (data, model) = toy_setup(6);
        let cfg = TtaConfig::new(TtaMethod::TentLite);
        let attack = AttackSpec::new(AttackKind::Nhe).with_feature_reg(false);
        let report = run_stream(&data, &model, &cfg, Some(&attack), &fast_stream(), 11).unwrap();
        assert_eq!(report.audit.violations, 0);
        assert_eq!(report.audit.online_forwards, report.batches);
        assert_eq!(report.audit.online_param_reads, 0);
        assert!(report.poison.batches > 0);
        assert_eq!(report.audit.surrogate_batches, report.poison.batches);
        assert!(report.poison.max_eps <= 0.3 + 1e-9);
        assert_eq!(report.poison.box_violations, 0);
        assert!(report.distill.rounds == report.poison.batches);
        assert!(report.surrogate_bn_refreshed_from_adversary_batches);
        // realized budget matches the request
        assert!((report.realized_ratio - 0.5).abs() <= 1.0 / report.batches as f64);
    }

    #[test]
    fn reports_are_deterministic_per_seed() {
        let (data, model) = toy_setup(7);
        let cfg = TtaConfig::new(TtaMethod::TentLite);
        let attack = AttackSpec::new(AttackKind::Ble { beta: 0.9, solver: crate::assignment::MappingSolver::Greedy })
            .with_feature_reg(false);
        let a = run_stream(&data, &model, &cfg, Some(&attack), &fast_stream(), 3).unwrap();
        let b = run_stream(&data, &model, &cfg, Some(&attack), &fast_stream(), 3).unwrap();
        assert_eq!(a.overall_error.to_bits(), b.overall_error.to_bits());
        assert_eq!(a.poison.mean_feature_kld.to_bits(), b.poison.mean_feature_kld.to_bits());
    }

    #[test]
    fn rank_of_a_single_victim_column() {
        let errors = vec![vec![30.0], vec![20.0], vec![10.0]];
        assert_eq!(average_rank(&errors).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn tied_attacks_share_the_mean_rank() {
        let errors = vec![vec![25.0], vec![25.0], vec![10.0]];
        assert_eq!(average_rank(&errors).unwrap(), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn rank_matches_brute_force_on_random_tables() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let errors: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let got = average_rank(&errors).unwrap();
            // oracle: rank = 1 + number of strictly larger entries,
            // plus half the number of equal entries (other than self)
            for (a, row) in errors.iter().enumerate() {
                let mut expect = 0.0;
                for col in 0..3 {
                    let larger = errors.iter().filter(|r| r[col] > row[col]).count();
                    let equal = errors.iter().filter(|r| r[col] == row[col]).count() - 1;
                    expect += 1.0 + larger as f64 + equal as f64 / 2.0;
                }
                expect /= 3.0;
                assert!((got[a] - expect).abs() < 1e-12, "row {a}: {} vs {expect}", got[a]);
            }
        }
    }

    #[test]
    fn incomplete_table_is_contract_error() {
        assert!(matches!(average_rank(&[]), Err(Error::Contract(_))));
        let ragged = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(average_rank(&ragged), Err(Error::Contract(_))));
    }
}
