//! Synthetic desk-scale datasets with controllable distribution shift.
//!
//! Vector classes are Gaussian blobs around separated centers; image
//! classes are smooth procedural textures (random low-frequency Fourier
//! fields) plus per-sample noise. A corruption sequence turns the stream
//! into ordered segments of increasing-or-varied shift, standing in for a
//! continual corruption benchmark. All draws are deterministic per seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Arch, GradScope, ModelState, StatsMode, UpdatableScope};
use crate::tensor::{Tape, TapeMode};
use crate::util::{argmax_rows, derive_seed};

const DATA_MAGIC: &[u8; 8] = b"TTDPDSE1";
const DATA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputForm {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputForm {
    pub fn sample_len(&self) -> usize {
        match self {
            InputForm::Vector { dim } => *dim,
            InputForm::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn arch(&self, classes: usize) -> Arch {
        match *self {
            InputForm::Vector { dim } => Arch::Mlp { input_dim: dim, hidden: 64, classes },
            InputForm::Image { channels, height, width } => Arch::SmallCnn { channels, height, width, classes },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    BlurProxy,
    Contrast,
    RotationProxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionStep {
    pub kind: CorruptionKind,
    /// 0 disables the corruption; 1..=5 are increasingly severe.
    pub severity: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub form: InputForm,
    /// Distance scale between class centers / texture amplitude.
    pub separation: f64,
    /// Per-sample noise around the class center.
    pub noise: f64,
    pub segments: Vec<CorruptionStep>,
    pub samples_per_segment: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        if self.segments.is_empty() {
            return Err(Error::Config("dataset needs at least one segment".into()));
        }
        if self.samples_per_segment < 2 {
            return Err(Error::Config("segments need at least 2 samples".into()));
        }
        if self.segments.iter().any(|s| s.severity > 5) {
            return Err(Error::Config("corruption severity must lie in 0..=5".into()));
        }
        Ok(())
    }
}

/// One side of the adversary/benign split.
#[derive(Clone, Debug)]
pub struct SamplePool {
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    /// Global sample ids, used by the audit to prove pool isolation.
    pub sample_ids: Vec<usize>,
}

impl SamplePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SegmentData {
    pub corruption: CorruptionStep,
    pub adversary: SamplePool,
    pub benign: SamplePool,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub form: InputForm,
    pub segments: Vec<SegmentData>,
}

impl Dataset {
    /// Samples in generation order (segment-major), rejoining both pools.
    pub fn flatten(&self) -> (Vec<f64>, Vec<usize>) {
        let dim = self.form.sample_len();
        let total: usize = self.segments.iter().map(|s| s.adversary.len() + s.benign.len()).sum();
        let mut values = vec![0.0; total * dim];
        let mut labels = vec![0usize; total];
        for seg in &self.segments {
            for pool in [&seg.adversary, &seg.benign] {
                for (i, &id) in pool.sample_ids.iter().enumerate() {
                    values[id * dim..(id + 1) * dim]
                        .copy_from_slice(&pool.values[i * dim..(i + 1) * dim]);
                    labels[id] = pool.labels[i];
                }
            }
        }
        (values, labels)
    }
}

/// Class prototypes: either vector centers or per-channel texture fields.
struct ClassPrototypes {
    patterns: Vec<Vec<f64>>, // classes x sample_len, already centered at 0.5
}

fn prototypes(spec: &SyntheticSpec) -> ClassPrototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "class-prototypes"));
    let dim = spec.form.sample_len();
    let mut patterns = Vec::with_capacity(spec.classes);
    match spec.form {
        InputForm::Vector { dim } => {
            // smooth 1-D fields so blur and shift corruptions degrade
            // gradually instead of destroying the class signal outright
            for _ in 0..spec.classes {
                let comps: Vec<(f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(0.5..1.5),
                            rng.random_range(0.0..std::f64::consts::TAU),
                            rng.random_range(0.5..1.0),
                        )
                    })
                    .collect();
                let norm: f64 = comps.iter().map(|c| c.2).sum();
                patterns.push(
                    (0..dim)
                        .map(|d| {
                            let mut v = 0.0;
                            for &(freq, phase, amp) in &comps {
                                v += amp
                                    * (std::f64::consts::TAU * freq * d as f64 / dim as f64 + phase)
                                        .sin();
                            }
                            0.5 + spec.separation * v / norm
                        })
                        .collect(),
                );
            }
        }
        InputForm::Image { channels, height, width } => {
            for _ in 0..spec.classes {
                let mut pat = vec![0.0; dim];
                for c in 0..channels {
                    // superpose a few random low-frequency waves; mixed
                    // frequencies avoid exact periodicity under shifts
                    let comps: Vec<(f64, f64, f64, f64)> = (0..3)
                        .map(|_| {
                            (
                                rng.random_range(0.5..1.5),
                                rng.random_range(0.5..1.5),
                                rng.random_range(0.0..std::f64::consts::TAU),
                                rng.random_range(0.5..1.0),
                            )
                        })
                        .collect();
                    let norm: f64 = comps.iter().map(|c| c.3).sum();
                    for y in 0..height {
                        for x in 0..width {
                            let mut v = 0.0;
                            for &(fu, fv, phase, amp) in &comps {
                                let t = std::f64::consts::TAU
                                    * (fu * y as f64 / height as f64 + fv * x as f64 / width as f64)
                                    + phase;
                                v += amp * t.sin();
                            }
                            pat[(c * height + y) * width + x] = 0.5 + spec.separation * v / norm;
                        }
                    }
                }
                patterns.push(pat);
            }
        }
    }
    ClassPrototypes { patterns }
}

fn clamp_unit(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Apply one corruption in place to a single sample.
fn corrupt(sample: &mut Vec<f64>, form: &InputForm, step: CorruptionStep, rng: &mut ChaCha8Rng) {
    if step.severity == 0 {
        return;
    }
    let sev = step.severity as f64;
    match step.kind {
        CorruptionKind::GaussianNoise => {
            for v in sample.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += 0.08 * sev * z;
            }
        }
        CorruptionKind::Contrast => {
            let factor = 1.0 - 0.15 * sev;
            for v in sample.iter_mut() {
                *v = 0.5 + (*v - 0.5) * factor;
            }
        }
        CorruptionKind::BlurProxy => {
            // severity blends toward a fixed-radius box blur, so damage
            // is graded instead of saturating at large radii
            let alpha = sev / 5.0;
            let radius: isize = 2;
            let src = sample.clone();
            match *form {
                InputForm::Vector { dim } => {
                    for i in 0..dim {
                        let mut acc = 0.0;
                        let mut count = 0.0;
                        for o in -radius..=radius {
                            let j = i as isize + o;
                            if j >= 0 && j < dim as isize {
                                acc += src[j as usize];
                                count += 1.0;
                            }
                        }
                        sample[i] = (1.0 - alpha) * src[i] + alpha * acc / count;
                    }
                }
                InputForm::Image { channels, height, width } => {
                    for c in 0..channels {
                        for y in 0..height {
                            for x in 0..width {
                                let mut acc = 0.0;
                                let mut count = 0.0;
                                for dy in -radius..=radius {
                                    for dx in -radius..=radius {
                                        let yy = y as isize + dy;
                                        let xx = x as isize + dx;
                                        if yy >= 0 && yy < height as isize && xx >= 0 && xx < width as isize {
                                            acc += src[(c * height + yy as usize) * width + xx as usize];
                                            count += 1.0;
                                        }
                                    }
                                }
                                let i = (c * height + y) * width + x;
                                sample[i] = (1.0 - alpha) * src[i] + alpha * acc / count;
                            }
                        }
                    }
                }
            }
        }
        CorruptionKind::RotationProxy => {
            let shift = step.severity as usize;
            match *form {
                InputForm::Vector { dim } => {
                    sample.rotate_right(shift % dim);
                }
                InputForm::Image { channels, height, width } => {
                    let src = sample.clone();
                    for c in 0..channels {
                        for y in 0..height {
                            for x in 0..width {
                                let sy = (y + height - shift % height) % height;
                                let sx = (x + width - shift % width) % width;
                                sample[(c * height + y) * width + x] =
                                    src[(c * height + sy) * width + sx];
                            }
                        }
                    }
                }
            }
        }
    }
    clamp_unit(sample);
}

fn draw_sample(
    proto: &ClassPrototypes,
    label: usize,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut sample: Vec<f64> = proto.patterns[label]
        .iter()
        .map(|&p| {
            let z: f64 = StandardNormal.sample(rng);
            p + spec.noise * z
        })
        .collect();
    clamp_unit(&mut sample);
    sample
}

/// Generate the full corrupted stream, split per segment into disjoint
/// adversary and benign pools by index parity.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let proto = prototypes(spec);
    let dim = spec.form.sample_len();
    let mut segments = Vec::with_capacity(spec.segments.len());
    let mut next_id = 0usize;
    for (si, &corruption) in spec.segments.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("segment-{si}")));
        let n = spec.samples_per_segment;
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(&mut rng);
        let mut adversary = SamplePool { values: Vec::new(), labels: Vec::new(), sample_ids: Vec::new() };
        let mut benign = SamplePool { values: Vec::new(), labels: Vec::new(), sample_ids: Vec::new() };
        for (i, &label) in labels.iter().enumerate() {
            let mut sample = draw_sample(&proto, label, spec, &mut rng);
            corrupt(&mut sample, &spec.form, corruption, &mut rng);
            debug_assert_eq!(sample.len(), dim);
            let pool = if i % 2 == 0 { &mut adversary } else { &mut benign };
            pool.values.extend_from_slice(&sample);
            pool.labels.push(label);
            pool.sample_ids.push(next_id);
            next_id += 1;
        }
        segments.push(SegmentData { corruption, adversary, benign });
    }
    Ok(Dataset {
        classes: spec.classes,
        form: spec.form,
        segments,
    })
}

/// Clean draw (no corruption) for supervised pretraining.
pub fn generate_training_set(spec: &SyntheticSpec, count: usize) -> (Vec<f64>, Vec<usize>) {
    let proto = prototypes(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "pretrain-draw"));
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut values = Vec::with_capacity(count * spec.form.sample_len());
    for &label in &labels {
        values.extend(draw_sample(&proto, label, spec, &mut rng));
    }
    (values, labels)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_samples: usize,
    pub target_accuracy: f64,
    pub floor_accuracy: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            epochs: 40,
            batch_size: 64,
            learning_rate: 0.1,
            train_samples: 512,
            target_accuracy: 0.98,
            floor_accuracy: 0.80,
        }
    }
}

/// Fraction of samples the model classifies correctly (eval statistics).
pub fn accuracy(model: &ModelState, values: &[f64], labels: &[usize]) -> Result<f64> {
    let dim = model.arch().input_shape().iter().product::<usize>();
    let n = labels.len();
    let k = model.classes();
    let mut correct = 0usize;
    let chunk = 256;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let tape = Tape::new();
        tape.set_mode(TapeMode::Frozen);
        let pass = model.forward(
            &tape,
            &values[start * dim..end * dim],
            end - start,
            StatsMode::EvalStats,
            GradScope::NoParams,
            false,
        )?;
        let p = pass.logits.values();
        let preds = argmax_rows(&p, end - start, k);
        correct += preds
            .iter()
            .zip(&labels[start..end])
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

/// Supervised pretraining on a clean draw. Stops early once training
/// accuracy reaches the target; errors out below the accuracy floor.
pub fn pretrain_source(
    spec: &SyntheticSpec,
    scope: UpdatableScope,
    settings: &PretrainSettings,
) -> Result<(ModelState, f64)> {
    spec.validate()?;
    let arch = spec.form.arch(spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "pretrain-init"));
    let mut model = ModelState::new(arch, scope, &mut rng);
    if settings.epochs == 0 {
        return Ok((model, 0.0));
    }
    let (values, labels) = generate_training_set(spec, settings.train_samples);
    let dim = spec.form.sample_len();
    let k = spec.classes;
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut acc = 0.0;
    for _epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = Vec::with_capacity(chunk.len() * dim);
            let mut onehot = vec![0.0; chunk.len() * k];
            for (row, &i) in chunk.iter().enumerate() {
                batch.extend_from_slice(&values[i * dim..(i + 1) * dim]);
                onehot[row * k + labels[i]] = 1.0;
            }
            let tape = Tape::new();
            let pass = model.forward(
                &tape,
                &batch,
                chunk.len(),
                StatsMode::TrainStats,
                GradScope::AllParams,
                false,
            )?;
            let p = pass.posteriors()?;
            let targets = tape.constant(onehot, vec![chunk.len(), k])?;
            let loss = targets
                .mul(&p.clamp_min(1e-12)?.log()?)?
                .neg()?
                .mean_all()?
                .scale(k as f64)?;
            loss.backward()?;
            model.apply_gradient_step(&pass, settings.learning_rate);
            model.apply_batch_stats(&pass, 0.1);
        }
        // calibrate running statistics on the full set, then measure
        let tape = Tape::new();
        tape.set_mode(TapeMode::Frozen);
        let calib = model.forward(&tape, &values, n, StatsMode::TrainStats, GradScope::NoParams, false)?;
        tape.set_mode(TapeMode::Recording);
        model.apply_batch_stats(&calib, 1.0);
        acc = accuracy(&model, &values, &labels)?;
        if acc >= settings.target_accuracy {
            break;
        }
    }
    if acc < settings.floor_accuracy {
        return Err(Error::TrainingDiverged(format!(
            "train accuracy {acc:.3} below floor {:.3} for {}",
            settings.floor_accuracy,
            spec.form.arch(spec.classes).tag()
        )));
    }
    Ok((model, acc))
}

// ---------------------------------------------------------------------------
// dataset file format
// ---------------------------------------------------------------------------

fn read_exact_fmt(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated dataset file: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_fmt(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Write labeled samples in the binary dataset format.
pub fn save_dataset(
    path: &Path,
    classes: usize,
    form: &InputForm,
    values: &[f64],
    labels: &[usize],
) -> Result<()> {
    let dim = form.sample_len();
    if values.len() != labels.len() * dim {
        return Err(Error::Contract(format!(
            "{} values for {} samples of {dim}",
            values.len(),
            labels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    w.write_all(&(classes as u32).to_le_bytes())?;
    match *form {
        InputForm::Vector { dim } => {
            w.write_all(&[0u8])?;
            w.write_all(&1u32.to_le_bytes())?;
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        InputForm::Image { channels, height, width } => {
            w.write_all(&[1u8])?;
            w.write_all(&3u32.to_le_bytes())?;
            for d in [channels, height, width] {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
    }
    w.write_all(&(labels.len() as u64).to_le_bytes())?;
    for (i, &label) in labels.iter().enumerate() {
        w.write_all(&(label as u32).to_le_bytes())?;
        for v in &values[i * dim..(i + 1) * dim] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct LoadedDataset {
    pub classes: usize,
    pub form: InputForm,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_fmt(&mut r, &mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let classes = read_u32(&mut r)? as usize;
    let mut form_byte = [0u8; 1];
    read_exact_fmt(&mut r, &mut form_byte)?;
    let rank = read_u32(&mut r)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut r)? as usize);
    }
    let form = match (form_byte[0], dims.as_slice()) {
        (0, [dim]) => InputForm::Vector { dim: *dim },
        (1, [c, h, w]) => InputForm::Image { channels: *c, height: *h, width: *w },
        _ => return Err(Error::Format("bad input form descriptor".into())),
    };
    let mut count_b = [0u8; 8];
    read_exact_fmt(&mut r, &mut count_b)?;
    let count = u64::from_le_bytes(count_b) as usize;
    let dim = form.sample_len();
    let mut values = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        let label = read_u32(&mut r)? as usize;
        if label >= classes {
            return Err(Error::Format(format!("label {label} out of range")));
        }
        labels.push(label);
        for _ in 0..dim {
            read_exact_fmt(&mut r, &mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after dataset payload".into()));
    }
    Ok(LoadedDataset { classes, form, values, labels })
}

/// Import a small external vector dataset from CSV: a header row, then
/// one row per sample with the label in the first column.
pub fn import_csv(path: &Path) -> Result<LoadedDataset> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let _header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty csv".into()))?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad label on data row {}", lineno + 1)))?;
        let feats: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad feature on data row {}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::Format(format!(
                    "row {} has {} features, expected {d}",
                    lineno + 1,
                    feats.len()
                )))
            }
            _ => {}
        }
        labels.push(label);
        values.extend(feats);
    }
    let dim = dim.ok_or_else(|| Error::Format("csv has no data rows".into()))?;
    if dim == 0 {
        return Err(Error::Format("csv rows carry no features".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::Format("csv needs at least 2 classes".into()));
    }
    Ok(LoadedDataset {
        classes,
        form: InputForm::Vector { dim },
        values,
        labels,
    })
}
