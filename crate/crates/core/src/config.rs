//! Experiment configuration and the grid runner.
//!
//! Configs are TOML with sections mirroring the module layout and a
//! required `schema_version`. Command-line flags override config values,
//! which override defaults.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::assignment::MappingSolver;
use crate::datagen::{self, Dataset, InputForm, PretrainSettings, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint_expect, ModelState, UpdatableScope};
use crate::poison::{AttackKind, AttackSpec, DEFAULT_CONFUSION_BETA};
use crate::protocol::{average_rank, run_stream, ExperimentReport, StreamConfig};
use crate::tta::{TtaConfig, TtaMethod};
use crate::util::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;
pub const WORKERS_ENV: &str = "TTDP_WORKERS";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Optional pretrained source checkpoint; pretrained in-process when
    /// absent.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub stream: StreamConfig,
    pub victims: Vec<VictimConfig>,
    pub attacks: Vec<AttackConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Generated in-process from a synthetic spec.
    Synthetic(SyntheticSpec),
    /// Loaded from the binary dataset format and chunked into segments.
    File {
        path: PathBuf,
        samples_per_segment: usize,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    pub method: TtaMethod,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub entropy_threshold: Option<bool>,
    #[serde(default)]
    pub data_augmentation: Option<bool>,
    #[serde(default)]
    pub ema_update: Option<bool>,
    #[serde(default)]
    pub stochastic_restore: Option<bool>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub threshold_coefficient: Option<f64>,
    #[serde(default)]
    pub ema_momentum: Option<f64>,
    #[serde(default)]
    pub restore_probability: Option<f64>,
    #[serde(default)]
    pub gce_q: Option<f64>,
    #[serde(default)]
    pub augmentation_count: Option<usize>,
    #[serde(default)]
    pub augmentation_noise: Option<f64>,
    #[serde(default)]
    pub bn_momentum: Option<f64>,
}

impl VictimConfig {
    pub fn of_method(method: TtaMethod) -> Self {
        VictimConfig {
            method,
            name: None,
            entropy_threshold: None,
            data_augmentation: None,
            ema_update: None,
            stochastic_restore: None,
            learning_rate: None,
            threshold_coefficient: None,
            ema_momentum: None,
            restore_probability: None,
            gce_q: None,
            augmentation_count: None,
            augmentation_noise: None,
            bn_momentum: None,
        }
    }

    pub fn resolve(&self) -> TtaConfig {
        let mut cfg = TtaConfig::new(self.method);
        if let Some(v) = &self.name {
            cfg.name = v.clone();
        }
        if let Some(v) = self.entropy_threshold {
            cfg.entropy_threshold = v;
        }
        if let Some(v) = self.data_augmentation {
            cfg.data_augmentation = v;
        }
        if let Some(v) = self.ema_update {
            cfg.ema_update = v;
        }
        if let Some(v) = self.stochastic_restore {
            cfg.stochastic_restore = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.threshold_coefficient {
            cfg.threshold_coefficient = v;
        }
        if let Some(v) = self.ema_momentum {
            cfg.ema_momentum = v;
        }
        if let Some(v) = self.restore_probability {
            cfg.restore_probability = v;
        }
        if let Some(v) = self.gce_q {
            cfg.gce_q = v;
        }
        if let Some(v) = self.augmentation_count {
            cfg.augmentation_count = v;
        }
        if let Some(v) = self.augmentation_noise {
            cfg.augmentation_noise = v;
        }
        if let Some(v) = self.bn_momentum {
            cfg.bn_momentum = v;
        }
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackName {
    None,
    Nhe,
    Ble,
    MaxCe,
    TepaMaxent,
    Unlearnable,
    AdvPoison,
    DiaAdapted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackName,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub solver: Option<MappingSolver>,
    #[serde(default)]
    pub feature_reg: Option<bool>,
    #[serde(default)]
    pub flip_kld: Option<bool>,
}

impl AttackConfig {
    pub fn of_kind(kind: AttackName) -> Self {
        AttackConfig {
            kind,
            label: None,
            beta: None,
            solver: None,
            feature_reg: None,
            flip_kld: None,
        }
    }

    /// `None` encodes the no-attack baseline row.
    pub fn resolve(&self) -> Option<AttackSpec> {
        let kind = match self.kind {
            AttackName::None => return None,
            AttackName::Nhe => AttackKind::Nhe,
            AttackName::Ble => AttackKind::Ble {
                beta: self.beta.unwrap_or(DEFAULT_CONFUSION_BETA),
                solver: self.solver.unwrap_or(MappingSolver::Greedy),
            },
            AttackName::MaxCe => AttackKind::MaxCe,
            AttackName::TepaMaxent => AttackKind::TepaMaxEnt,
            AttackName::Unlearnable => AttackKind::Unlearnable,
            AttackName::AdvPoison => AttackKind::AdvPoison,
            AttackName::DiaAdapted => AttackKind::DiaAdapted,
        };
        let mut spec = AttackSpec::new(kind);
        if let Some(on) = self.feature_reg {
            spec = spec.with_feature_reg(on);
        }
        if let Some(flip) = self.flip_kld {
            spec.flip_kld = flip;
        }
        if let Some(label) = &self.label {
            spec = spec.named(label);
        }
        Some(spec)
    }

    pub fn display_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.resolve() {
            Some(spec) => spec.label,
            None => "none".to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.victims.is_empty() {
            return Err(Error::Config("at least one victim is required".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("at least one attack entry (possibly `none`) is required".into()));
        }
        for v in &self.victims {
            v.resolve().validate()?;
        }
        let mut labels: Vec<String> = self.victims.iter().map(|v| v.resolve().name).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.victims.len() {
            return Err(Error::Config("victim names must be unique".into()));
        }
        let mut labels: Vec<String> = self.attacks.iter().map(|a| a.display_label()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.attacks.len() {
            return Err(Error::Config("attack labels must be unique".into()));
        }
        match &self.dataset {
            DatasetSource::Synthetic(spec) => spec.validate()?,
            DatasetSource::File { path, samples_per_segment } => {
                if !path.exists() {
                    return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
                }
                if *samples_per_segment < 2 {
                    return Err(Error::Config("samples_per_segment must be at least 2".into()));
                }
            }
        }
        if let Some(ckpt) = &self.checkpoint {
            if !ckpt.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", ckpt.display())));
            }
        }
        Ok(())
    }

    /// The synthetic spec with its seed re-derived for one run, so each
    /// seed sees a fresh draw from the same distribution family.
    pub fn dataset_for_seed(&self, seed: u64) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => {
                let mut per_run = spec.clone();
                per_run.seed = derive_seed(spec.seed, &format!("run-{seed}"));
                datagen::generate(&per_run)
            }
            DatasetSource::File { path, samples_per_segment } => {
                let loaded = datagen::load_dataset(path)?;
                dataset_from_flat(&loaded, *samples_per_segment)
            }
        }
    }

    pub fn base_synthetic_spec(&self) -> Result<&SyntheticSpec> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => Ok(spec),
            DatasetSource::File { .. } => Err(Error::Config(
                "operation requires a synthetic dataset spec".into(),
            )),
        }
    }

    /// Pretrain the source model, or load it from the configured
    /// checkpoint.
    pub fn source_model(&self) -> Result<ModelState> {
        if let Some(ckpt) = &self.checkpoint {
            let expected = match &self.dataset {
                DatasetSource::Synthetic(spec) => Some(spec.form.arch(spec.classes).tag()),
                DatasetSource::File { path, .. } => {
                    let loaded = datagen::load_dataset(path)?;
                    Some(loaded.form.arch(loaded.classes).tag())
                }
            };
            return load_checkpoint_expect(ckpt, expected.as_deref());
        }
        let spec = self.base_synthetic_spec()?;
        let (model, _) = datagen::pretrain_source(spec, UpdatableScope::BnAffine, &self.pretrain)?;
        Ok(model)
    }
}

/// Chunk a flat labeled set into uncorrupted segments with parity pools.
fn dataset_from_flat(loaded: &datagen::LoadedDataset, samples_per_segment: usize) -> Result<Dataset> {
    use crate::datagen::{CorruptionKind, CorruptionStep, SamplePool, SegmentData};
    let n = loaded.labels.len();
    if n == 0 || n % samples_per_segment != 0 {
        return Err(Error::Config(format!(
            "{n} samples do not divide into segments of {samples_per_segment}"
        )));
    }
    let dim = loaded.form.sample_len();
    let mut segments = Vec::new();
    for (seg_idx, chunk_start) in (0..n).step_by(samples_per_segment).enumerate() {
        let mut adversary = SamplePool { values: Vec::new(), labels: Vec::new(), sample_ids: Vec::new() };
        let mut benign = SamplePool { values: Vec::new(), labels: Vec::new(), sample_ids: Vec::new() };
        for i in 0..samples_per_segment {
            let id = chunk_start + i;
            let pool = if i % 2 == 0 { &mut adversary } else { &mut benign };
            pool.values.extend_from_slice(&loaded.values[id * dim..(id + 1) * dim]);
            pool.labels.push(loaded.labels[id]);
            pool.sample_ids.push(id);
        }
        let _ = seg_idx;
        segments.push(SegmentData {
            corruption: CorruptionStep { kind: CorruptionKind::GaussianNoise, severity: 0 },
            adversary,
            benign,
        });
    }
    Ok(Dataset {
        classes: loaded.classes,
        form: loaded.form,
        segments,
    })
}

// ---------------------------------------------------------------------------
// grid execution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankTable {
    pub victims: Vec<String>,
    pub attacks: Vec<String>,
    /// mean overall error, attacks x victims
    pub mean_errors: Vec<Vec<f64>>,
    pub average_ranks: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridOutcome {
    pub runs: Vec<ExperimentReport>,
    pub rank_table: RankTable,
}

fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Ok(n) = std::env::var(WORKERS_ENV) {
            if let Ok(n) = n.parse::<usize>() {
                if n > 0 {
                    builder = builder.num_threads(n);
                }
            }
        }
        builder.build().expect("worker pool")
    })
}

/// Run the full victim x attack x seed grid and assemble the rank table.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    cfg.validate()?;
    let source = cfg.source_model()?;
    let datasets: Vec<Dataset> = cfg
        .seeds
        .iter()
        .map(|&s| cfg.dataset_for_seed(s))
        .collect::<Result<_>>()?;
    let victims: Vec<TtaConfig> = cfg.victims.iter().map(|v| v.resolve()).collect();
    let attacks: Vec<(String, Option<AttackSpec>)> = cfg
        .attacks
        .iter()
        .map(|a| (a.display_label(), a.resolve()))
        .collect();

    let mut cells = Vec::new();
    for (vi, _) in victims.iter().enumerate() {
        for (ai, _) in attacks.iter().enumerate() {
            for (si, &seed) in cfg.seeds.iter().enumerate() {
                cells.push((vi, ai, si, seed));
            }
        }
    }

    use rayon::prelude::*;
    let mut runs: Vec<((usize, usize, usize), ExperimentReport)> = worker_pool().install(|| {
        cells
            .par_iter()
            .map(|&(vi, ai, si, seed)| {
                let mut report = run_stream(
                    &datasets[si],
                    &source,
                    &victims[vi],
                    attacks[ai].1.as_ref(),
                    &cfg.stream,
                    seed,
                )?;
                report.attack = attacks[ai].0.clone();
                Ok(((vi, ai, si), report))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    runs.sort_by_key(|(key, _)| *key);
    let runs: Vec<ExperimentReport> = runs.into_iter().map(|(_, r)| r).collect();

    let rank_table = build_rank_table(
        &victims.iter().map(|v| v.name.clone()).collect::<Vec<_>>(),
        &attacks.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>(),
        &runs,
    )?;
    Ok(GridOutcome { runs, rank_table })
}

/// Mean errors per (attack, victim) and average ranks across victims.
pub fn build_rank_table(victims: &[String], attacks: &[String], runs: &[ExperimentReport]) -> Result<RankTable> {
    let mut sums = vec![vec![0.0; victims.len()]; attacks.len()];
    let mut counts = vec![vec![0usize; victims.len()]; attacks.len()];
    for run in runs {
        let vi = victims
            .iter()
            .position(|v| *v == run.victim)
            .ok_or_else(|| Error::Contract(format!("run references unknown victim {}", run.victim)))?;
        let ai = attacks
            .iter()
            .position(|a| *a == run.attack)
            .ok_or_else(|| Error::Contract(format!("run references unknown attack {}", run.attack)))?;
        sums[ai][vi] += run.overall_error;
        counts[ai][vi] += 1;
    }
    if counts.iter().flatten().any(|&c| c == 0) {
        return Err(Error::Contract("rank table is incomplete: missing cells".into()));
    }
    let mean_errors: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(row, crow)| row.iter().zip(crow).map(|(s, &c)| s / c as f64).collect())
        .collect();
    let average_ranks = average_rank(&mean_errors)?;
    Ok(RankTable {
        victims: victims.to_vec(),
        attacks: attacks.to_vec(),
        mean_errors,
        average_ranks,
    })
}
