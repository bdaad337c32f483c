//! Grey-box surrogate maintenance.
//!
//! The adversary holds a copy of the victim's initial weights and keeps it
//! aligned with the drifting online model by distilling from the only
//! feedback it legitimately sees: the posteriors the online model returned
//! for the adversary's own batches. The signature is the isolation
//! boundary; there is no access path from here to benign data or to live
//! online parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradScope, ModelState, StatsMode};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_DISTILL_LR: f64 = 0.1;
pub const DEFAULT_DISTILL_ITERS: usize = 10;

/// Mean over rows of the symmetric KL divergence between two posterior
/// matrices. Probabilities are floored at 1e-12 before the logs.
pub fn symmetric_kld_loss(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let ps = p.shape();
    let qs = q.shape();
    if ps != qs || ps.len() != 2 {
        return Err(Error::Contract(format!(
            "symmetric KLD over mismatched posterior blocks {ps:?} vs {qs:?}"
        )));
    }
    let cols = ps[1];
    let lp = p.clamp_min(1e-12)?.log()?;
    let lq = q.clamp_min(1e-12)?.log()?;
    let forward = p.mul(&lp.sub(&lq)?)?;
    let reverse = q.mul(&lq.sub(&lp)?)?;
    // mean over the batch of the per-row sums
    forward
        .add(&reverse)?
        .scale(0.5)?
        .mean_all()?
        .scale(cols as f64)
}

/// Value-only symmetric KLD with the same flooring.
pub fn symmetric_kld_value(p: &[f64], q: &[f64], rows: usize, cols: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..rows * cols {
        let pi = p[i].max(1e-12);
        let qi = q[i].max(1e-12);
        acc += 0.5 * (p[i] * (pi.ln() - qi.ln()) + q[i] * (qi.ln() - pi.ln()));
    }
    acc / rows as f64
}

/// One recorded feedback exchange.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub batch: Vec<f64>,
    pub batch_size: usize,
    pub online_posteriors: Vec<f64>,
    pub trace: Vec<f64>,
}

/// The adversary-side surrogate: a live distilled model plus the frozen
/// initial weights used by attack objectives that predate distillation.
pub struct SurrogateState {
    pub model: ModelState,
    pub initial: ModelState,
    pub learning_rate: f64,
    pub iterations: usize,
    pub feedback_log: Vec<FeedbackRecord>,
}

impl SurrogateState {
    pub fn new(source: &ModelState, learning_rate: f64, iterations: usize) -> Self {
        SurrogateState {
            model: source.clone(),
            initial: source.clone(),
            learning_rate,
            iterations,
            feedback_log: Vec::new(),
        }
    }

    /// Distill the online model's feedback into the surrogate: a fixed
    /// number of gradient steps on the symmetric KLD between the
    /// surrogate's recomputed posteriors (current-batch statistics) and
    /// the fixed online posteriors. Returns the per-iteration loss trace.
    pub fn distill(
        &mut self,
        adversary_batch: &[f64],
        batch_size: usize,
        online_posteriors: &[f64],
    ) -> Result<Vec<f64>> {
        if batch_size == 0 {
            return Err(Error::Contract("distill on an empty batch".into()));
        }
        let k = self.model.classes();
        if online_posteriors.len() != batch_size * k {
            return Err(Error::Contract(format!(
                "online posteriors of length {} for batch of {batch_size} over {k} classes",
                online_posteriors.len()
            )));
        }
        let mut trace = Vec::with_capacity(self.iterations);
        for _ in 0..self.iterations {
            let tape = Tape::new();
            let pass = self.model.forward(
                &tape,
                adversary_batch,
                batch_size,
                StatsMode::TrainStats,
                GradScope::AllParams,
                false,
            )?;
            let p = pass.posteriors()?;
            let q = tape.constant(online_posteriors.to_vec(), vec![batch_size, k])?;
            let loss = symmetric_kld_loss(&p, &q)?;
            trace.push(loss.item());
            loss.backward()?;
            self.model.apply_gradient_step(&pass, self.learning_rate);
            // surrogate running statistics follow the adversary batches
            self.model.apply_batch_stats(&pass, 1.0);
        }
        self.feedback_log.push(FeedbackRecord {
            batch: adversary_batch.to_vec(),
            batch_size,
            online_posteriors: online_posteriors.to_vec(),
            trace: trace.clone(),
        });
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, UpdatableScope};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelState::new(
            Arch::Mlp { input_dim: 6, hidden: 16, classes: 4 },
            UpdatableScope::BnAffine,
            &mut rng,
        )
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n * 6).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn identical_posteriors_give_zero() {
        let tape = Tape::new();
        let p = tape.constant(vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1], vec![2, 3]).unwrap();
        let v = symmetric_kld_loss(&p, &p).unwrap().item();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn matches_independent_scalar_evaluation() {
        let tape = Tape::new();
        let pv = vec![1.0, 0.0];
        let qv = vec![0.5, 0.5];
        let p = tape.constant(pv.clone(), vec![1, 2]).unwrap();
        let q = tape.constant(qv.clone(), vec![1, 2]).unwrap();
        let got = symmetric_kld_loss(&p, &q).unwrap().item();
        let expect = symmetric_kld_value(&pv, &qv, 1, 2);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        // reverse term dominates through the floor
        assert!(got > 5.0);
    }

    #[test]
    fn symmetric_by_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        for _ in 0..20 {
            let rows = 3;
            let mut a = Vec::new();
            let mut b = Vec::new();
            for _ in 0..rows {
                let mut ra: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = ra.iter().sum();
                ra.iter_mut().for_each(|v| *v /= s);
                a.extend(ra);
                let mut rb: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = rb.iter().sum();
                rb.iter_mut().for_each(|v| *v /= s);
                b.extend(rb);
            }
            let ta = tape.constant(a.clone(), vec![rows, 4]).unwrap();
            let tb = tape.constant(b.clone(), vec![rows, 4]).unwrap();
            let ab = symmetric_kld_loss(&ta, &tb).unwrap().item();
            let ba = symmetric_kld_loss(&tb, &ta).unwrap().item();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn row_count_mismatch_is_contract_error() {
        let tape = Tape::new();
        let p = tape.constant(vec![0.5, 0.5], vec![1, 2]).unwrap();
        let q = tape.constant(vec![0.5, 0.5, 0.5, 0.5], vec![2, 2]).unwrap();
        assert!(matches!(symmetric_kld_loss(&p, &q), Err(Error::Contract(_))));
    }

    #[test]
    fn distill_at_fixed_point_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let source = model(3);
        let b = batch(&mut rng, 8);
        // online posteriors = the surrogate's own current-stats posteriors
        let tape = Tape::new();
        let own = source
            .forward(&tape, &b, 8, StatsMode::TrainStats, GradScope::NoParams, false)
            .unwrap()
            .posteriors()
            .unwrap()
            .values();
        let mut surrogate = SurrogateState::new(&source, DEFAULT_DISTILL_LR, DEFAULT_DISTILL_ITERS);
        let trace = surrogate.distill(&b, 8, &own).unwrap();
        assert!(trace[0] < 1e-9, "initial loss {}", trace[0]);
        for v in &trace {
            assert!(*v <= trace[0] + 1e-9);
        }
    }

    #[test]
    fn distill_descends_on_fresh_targets() {
        let mut passes = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = model(100 + seed);
            let target_model = model(200 + seed);
            let b = batch(&mut rng, 8);
            let tape = Tape::new();
            let targets = target_model
                .forward(&tape, &b, 8, StatsMode::TrainStats, GradScope::NoParams, false)
                .unwrap()
                .posteriors()
                .unwrap()
                .values();
            let mut surrogate = SurrogateState::new(&start, DEFAULT_DISTILL_LR, DEFAULT_DISTILL_ITERS);
            let trace = surrogate.distill(&b, 8, &targets).unwrap();
            assert!(trace.iter().all(|v| v.is_finite()));
            if *trace.last().unwrap() < trace[0] {
                passes += 1;
            }
        }
        assert!(passes >= 19, "descent on only {passes}/20 seeds");
    }

    #[test]
    fn zero_iterations_is_a_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let source = model(5);
        let mut surrogate = SurrogateState::new(&source, 0.1, 0);
        let b = batch(&mut rng, 4);
        let trace = surrogate.distill(&b, 4, &vec![0.25; 16]).unwrap();
        assert!(trace.is_empty());
        assert!(surrogate.model.bitwise_eq(&source));
    }

    #[test]
    fn trace_stays_finite_on_extreme_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let source = model(7);
        let mut surrogate = SurrogateState::new(&source, 0.1, 10);
        let b = batch(&mut rng, 6);
        // hard one-hot targets drive log terms toward the floor
        let mut targets = vec![0.0; 6 * 4];
        for i in 0..6 {
            targets[i * 4 + (i % 4)] = 1.0;
        }
        let trace = surrogate.distill(&b, 6, &targets).unwrap();
        assert!(trace.iter().all(|v| v.is_finite()));
        assert_eq!(surrogate.feedback_log.len(), 1);
    }
}
