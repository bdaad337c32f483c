//! Finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on fresh tapes, so it
//! is independent of the reverse-mode implementation it is used to check.

use rand::Rng;

use super::{gaussian_kld, Tape, Tensor};
use crate::error::Result;

/// Central finite differences of a scalar function.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst relative disagreement, with a small absolute floor so that
/// near-zero gradients are compared absolutely.
pub fn worst_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}

/// One randomized gradient-check case per differentiable op family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpFamily {
    Add,
    Sub,
    Mul,
    MulFeature,
    Matmul,
    MatmulTransposed,
    Conv2d,
    Conv2dStride2,
    Relu,
    Softmax,
    Log,
    Exp,
    MeanAll,
    SumAll,
    MeanRows,
    MeanSpatial,
    Reshape,
    Slice,
    Clamp,
    BatchNormTrain1d,
    BatchNormTrain2d,
    BatchNormEval,
    GaussianKld,
    BatchNormTrainComposed,
}

pub const ALL_FAMILIES: [OpFamily; 24] = [
    OpFamily::Add,
    OpFamily::Sub,
    OpFamily::Mul,
    OpFamily::MulFeature,
    OpFamily::Matmul,
    OpFamily::MatmulTransposed,
    OpFamily::Conv2d,
    OpFamily::Conv2dStride2,
    OpFamily::Relu,
    OpFamily::Softmax,
    OpFamily::Log,
    OpFamily::Exp,
    OpFamily::MeanAll,
    OpFamily::SumAll,
    OpFamily::MeanRows,
    OpFamily::MeanSpatial,
    OpFamily::Reshape,
    OpFamily::Slice,
    OpFamily::Clamp,
    OpFamily::BatchNormTrain1d,
    OpFamily::BatchNormTrain2d,
    OpFamily::BatchNormEval,
    OpFamily::GaussianKld,
    OpFamily::BatchNormTrainComposed,
];

impl OpFamily {
    /// Relative tolerance for this family; looser where gradients flow
    /// through batch statistics.
    pub fn tolerance(&self) -> f64 {
        match self {
            OpFamily::BatchNormTrain1d
            | OpFamily::BatchNormTrain2d
            | OpFamily::BatchNormTrainComposed => 1e-3,
            _ => 1e-4,
        }
    }
}

struct Case {
    /// Input buffers, shape and whether the gradient is checked.
    inputs: Vec<(Vec<f64>, Vec<usize>, bool)>,
    build: fn(&Tape, &[Tensor]) -> Result<Tensor>,
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from `avoid` by `margin` (for kinked ops).
fn uniform_avoiding(rng: &mut impl Rng, n: usize, lo: f64, hi: f64, avoid: f64, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if (v - avoid).abs() > margin {
                break v;
            }
        })
        .collect()
}

fn spd_matrix(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let a = uniform(rng, d * d, -1.0, 1.0);
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * a[j * d + k];
            }
            cov[i * d + j] = s / d as f64;
        }
        cov[i * d + i] += 0.5;
    }
    cov
}

/// Scalar readout: weighted sum of the op output against the last input.
fn weighted(out: &Tensor, w: &Tensor) -> Result<Tensor> {
    out.mul(w)?.sum_all()
}

fn make_case(family: OpFamily, rng: &mut impl Rng) -> Case {
    fn with_weights(
        shapes: Vec<(Vec<usize>, bool)>,
        values: Vec<Vec<f64>>,
        out_shape: Vec<usize>,
        wgen: &mut dyn FnMut(usize) -> Vec<f64>,
    ) -> Vec<(Vec<f64>, Vec<usize>, bool)> {
        let mut inputs: Vec<(Vec<f64>, Vec<usize>, bool)> = shapes
            .into_iter()
            .zip(values)
            .map(|((s, g), v)| (v, s, g))
            .collect();
        let n = out_shape.iter().product();
        inputs.push((wgen(n), out_shape, false));
        inputs
    }
    let mut wgen = {
        // deterministic weight stream drawn up-front from the same rng
        let vals: Vec<f64> = (0..4096)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(0.5..1.5)
            })
            .collect();
        let mut i = 0;
        move |n: usize| {
            let w = vals[i..i + n].to_vec();
            i += n;
            w
        }
    };

    match family {
        OpFamily::Add | OpFamily::Sub | OpFamily::Mul => {
            let shape = vec![3, 4];
            let a = uniform(rng, 12, -2.0, 2.0);
            let b = uniform(rng, 12, -2.0, 2.0);
            let build: fn(&Tape, &[Tensor]) -> Result<Tensor> = match family {
                OpFamily::Add => |_, t| weighted(&t[0].add(&t[1])?, &t[2]),
                OpFamily::Sub => |_, t| weighted(&t[0].sub(&t[1])?, &t[2]),
                _ => |_, t| weighted(&t[0].mul(&t[1])?, &t[2]),
            };
            Case {
                inputs: with_weights(
                    vec![(shape.clone(), true), (shape.clone(), true)],
                    vec![a, b],
                    shape,
                    &mut wgen,
                ),
                build,
            }
        }
        OpFamily::MulFeature => {
            let a = uniform(rng, 24, -2.0, 2.0);
            let b = uniform(rng, 3, -2.0, 2.0);
            Case {
                inputs: with_weights(
                    vec![(vec![2, 3, 2, 2], true), (vec![3], true)],
                    vec![a, b],
                    vec![2, 3, 2, 2],
                    &mut wgen,
                ),
                build: |_, t| weighted(&t[0].mul(&t[1])?, &t[2]),
            }
        }
        OpFamily::Matmul => {
            let a = uniform(rng, 6, -1.5, 1.5);
            let b = uniform(rng, 12, -1.5, 1.5);
            Case {
                inputs: with_weights(
                    vec![(vec![2, 3], true), (vec![3, 4], true)],
                    vec![a, b],
                    vec![2, 4],
                    &mut wgen,
                ),
                build: |_, t| weighted(&t[0].matmul(&t[1], false, false)?, &t[2]),
            }
        }
        OpFamily::MatmulTransposed => {
            let a = uniform(rng, 6, -1.5, 1.5);
            let b = uniform(rng, 12, -1.5, 1.5);
            Case {
                inputs: with_weights(
                    vec![(vec![3, 2], true), (vec![4, 3], true)],
                    vec![a, b],
                    vec![2, 4],
                    &mut wgen,
                ),
                build: |_, t| weighted(&t[0].matmul(&t[1], true, true)?, &t[2]),
            }
        }
        OpFamily::Conv2d | OpFamily::Conv2dStride2 => {
            let x = uniform(rng, 2 * 2 * 5 * 5, -1.0, 1.0);
            let w = uniform(rng, 3 * 2 * 3 * 3, -0.8, 0.8);
            let b = uniform(rng, 3, -0.5, 0.5);
            let (out_shape, build): (Vec<usize>, fn(&Tape, &[Tensor]) -> Result<Tensor>) =
                if family == OpFamily::Conv2d {
                    (vec![2, 3, 5, 5], |_, t| {
                        weighted(&t[0].conv2d(&t[1], &t[2], 1, 1)?, &t[3])
                    })
                } else {
                    (vec![2, 3, 3, 3], |_, t| {
                        weighted(&t[0].conv2d(&t[1], &t[2], 2, 1)?, &t[3])
                    })
                };
            Case {
                inputs: with_weights(
                    vec![
                        (vec![2, 2, 5, 5], true),
                        (vec![3, 2, 3, 3], true),
                        (vec![3], true),
                    ],
                    vec![x, w, b],
                    out_shape,
                    &mut wgen,
                ),
                build,
            }
        }
        OpFamily::Relu => {
            let x = uniform_avoiding(rng, 12, -2.0, 2.0, 0.0, 1e-2);
            Case {
                inputs: with_weights(vec![(vec![3, 4], true)], vec![x], vec![3, 4], &mut wgen),
                build: |_, t| weighted(&t[0].relu()?, &t[1]),
            }
        }
        OpFamily::Softmax => {
            let x = uniform(rng, 12, -2.0, 2.0);
            Case {
                inputs: with_weights(vec![(vec![3, 4], true)], vec![x], vec![3, 4], &mut wgen),
                build: |_, t| weighted(&t[0].softmax()?, &t[1]),
            }
        }
        OpFamily::Log => {
            let x = uniform(rng, 12, 0.2, 2.0);
            Case {
                inputs: with_weights(vec![(vec![3, 4], true)], vec![x], vec![3, 4], &mut wgen),
                build: |_, t| weighted(&t[0].log()?, &t[1]),
            }
        }
        OpFamily::Exp => {
            let x = uniform(rng, 12, -1.5, 1.5);
            Case {
                inputs: with_weights(vec![(vec![3, 4], true)], vec![x], vec![3, 4], &mut wgen),
                build: |_, t| weighted(&t[0].exp()?, &t[1]),
            }
        }
        OpFamily::MeanAll | OpFamily::SumAll => {
            let x = uniform(rng, 12, -2.0, 2.0);
            let build: fn(&Tape, &[Tensor]) -> Result<Tensor> = if family == OpFamily::MeanAll {
                |_, t| weighted(&t[0].mean_all()?, &t[1])
            } else {
                |_, t| weighted(&t[0].sum_all()?, &t[1])
            };
            Case {
                inputs: with_weights(vec![(vec![3, 4], true)], vec![x], vec![1], &mut wgen),
                build,
            }
        }
        OpFamily::MeanRows => {
            let x = uniform(rng, 12, -2.0, 2.0);
            Case {
                inputs: with_weights(vec![(vec![4, 3], true)], vec![x], vec![3], &mut wgen),
                build: |_, t| weighted(&t[0].mean_rows()?, &t[1]),
            }
        }
        OpFamily::MeanSpatial => {
            let x = uniform(rng, 24, -2.0, 2.0);
            Case {
                inputs: with_weights(vec![(vec![2, 3, 2, 2], true)], vec![x], vec![2, 3], &mut wgen),
                build: |_, t| weighted(&t[0].mean_spatial()?, &t[1]),
            }
        }
        OpFamily::Reshape => {
            let x = uniform(rng, 24, -2.0, 2.0);
            Case {
                inputs: with_weights(vec![(vec![2, 3, 4], true)], vec![x], vec![6, 4], &mut wgen),
                build: |_, t| weighted(&t[0].reshape(&[6, 4])?, &t[1]),
            }
        }
        OpFamily::Slice => {
            let x = uniform(rng, 24, -2.0, 2.0);
            Case {
                inputs: with_weights(vec![(vec![4, 3, 2], true)], vec![x], vec![1, 3, 2], &mut wgen),
                build: |_, t| weighted(&t[0].slice(0, 1, 1)?, &t[1]),
            }
        }
        OpFamily::Clamp => {
            let x: Vec<f64> = (0..12)
                .map(|_| loop {
                    let v: f64 = rng.random_range(-2.0..2.0);
                    if (v + 0.5).abs() > 1e-2 && (v - 0.5).abs() > 1e-2 {
                        break v;
                    }
                })
                .collect();
            Case {
                inputs: with_weights(vec![(vec![3, 4], true)], vec![x], vec![3, 4], &mut wgen),
                build: |_, t| weighted(&t[0].clamp(Some(-0.5), Some(0.5))?, &t[1]),
            }
        }
        OpFamily::BatchNormTrain1d => {
            let x = uniform(rng, 5 * 3, -2.0, 2.0);
            let g = uniform(rng, 3, 0.5, 1.5);
            let b = uniform(rng, 3, -0.5, 0.5);
            Case {
                inputs: with_weights(
                    vec![(vec![5, 3], true), (vec![3], true), (vec![3], true)],
                    vec![x, g, b],
                    vec![5, 3],
                    &mut wgen,
                ),
                build: |_, t| weighted(&t[0].batch_norm_train(&t[1], &t[2], 1e-5)?, &t[3]),
            }
        }
        OpFamily::BatchNormTrain2d => {
            let x = uniform(rng, 3 * 2 * 2 * 2, -2.0, 2.0);
            let g = uniform(rng, 2, 0.5, 1.5);
            let b = uniform(rng, 2, -0.5, 0.5);
            Case {
                inputs: with_weights(
                    vec![(vec![3, 2, 2, 2], true), (vec![2], true), (vec![2], true)],
                    vec![x, g, b],
                    vec![3, 2, 2, 2],
                    &mut wgen,
                ),
                build: |_, t| weighted(&t[0].batch_norm_train(&t[1], &t[2], 1e-5)?, &t[3]),
            }
        }
        OpFamily::BatchNormEval => {
            let x = uniform(rng, 5 * 3, -2.0, 2.0);
            let g = uniform(rng, 3, 0.5, 1.5);
            let b = uniform(rng, 3, -0.5, 0.5);
            let m = uniform(rng, 3, -0.5, 0.5);
            let v = uniform(rng, 3, 0.5, 1.5);
            Case {
                inputs: with_weights(
                    vec![
                        (vec![5, 3], true),
                        (vec![3], true),
                        (vec![3], true),
                        (vec![3], false),
                        (vec![3], false),
                    ],
                    vec![x, g, b, m, v],
                    vec![5, 3],
                    &mut wgen,
                ),
                build: |_, t| {
                    weighted(
                        &t[0].batch_norm_eval(&t[1], &t[2], &t[3], &t[4], 1e-5)?,
                        &t[5],
                    )
                },
            }
        }
        OpFamily::GaussianKld => {
            let d = 3;
            let mu0 = uniform(rng, d, -1.0, 1.0);
            let mu1 = uniform(rng, d, -1.0, 1.0);
            let c0 = spd_matrix(rng, d);
            let c1 = spd_matrix(rng, d);
            Case {
                inputs: with_weights(
                    vec![
                        (vec![d], true),
                        (vec![d, d], true),
                        (vec![d], true),
                        (vec![d, d], true),
                    ],
                    vec![mu0, c0, mu1, c1],
                    vec![1],
                    &mut wgen,
                ),
                build: |_, t| weighted(&gaussian_kld(&t[0], &t[1], &t[2], &t[3])?, &t[4]),
            }
        }
        OpFamily::BatchNormTrainComposed => {
            let x = uniform(rng, 6 * 3, -2.0, 2.0);
            let g = uniform(rng, 3, 0.5, 1.5);
            let b = uniform(rng, 3, -0.5, 0.5);
            let w = uniform(rng, 3 * 4, -1.0, 1.0);
            Case {
                inputs: with_weights(
                    vec![
                        (vec![6, 3], true),
                        (vec![3], true),
                        (vec![3], true),
                        (vec![3, 4], false),
                    ],
                    vec![x, g, b, w],
                    vec![1],
                    &mut wgen,
                ),
                build: |_, t| {
                    let h = t[0].batch_norm_train(&t[1], &t[2], 1e-5)?.relu()?;
                    let logits = h.matmul(&t[3], false, false)?;
                    let p = logits.softmax()?;
                    let lp = p.clamp_min(1e-12)?.log()?;
                    weighted(&p.mul(&lp)?.sum_all()?.neg()?, &t[4])
                },
            }
        }
    }
}

/// Run one randomized finite-difference case for an op family.
/// Returns the worst relative error across all checked inputs.
pub fn check_family(family: OpFamily, rng: &mut impl Rng) -> Result<f64> {
    let case = make_case(family, rng);
    let h = 1e-4;

    let tape = Tape::new();
    let tensors: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|(v, s, g)| tape.leaf(v.clone(), s.clone(), *g))
        .collect::<Result<_>>()?;
    let root = (case.build)(&tape, &tensors)?;
    root.backward()?;

    let mut worst: f64 = 0.0;
    for (idx, (values, _, checked)) in case.inputs.iter().enumerate() {
        if !checked {
            continue;
        }
        let analytic = tensors[idx].grad().expect("grad allocated");
        let mut eval = |x: &[f64]| -> f64 {
            let t = Tape::new();
            let inputs: Vec<Tensor> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(i, (v, s, _))| {
                    let vals = if i == idx { x.to_vec() } else { v.clone() };
                    t.constant(vals, s.clone()).expect("leaf")
                })
                .collect();
            (case.build)(&t, &inputs).expect("forward").item()
        };
        let numeric = numeric_gradient(&mut eval, values, h);
        worst = worst.max(worst_rel_err(&analytic, &numeric));
    }
    Ok(worst)
}
