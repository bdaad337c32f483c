use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_family, numeric_gradient, worst_rel_err, ALL_FAMILIES};
use super::linalg::cholesky;
use super::*;

fn t2(tape: &Tape, v: &[f64], shape: &[usize]) -> Tensor {
    tape.leaf(v.to_vec(), shape.to_vec(), false).unwrap()
}

#[test]
fn softmax_uniform_logits() {
    let tape = Tape::new();
    let x = t2(&tape, &[0.0, 0.0, 0.0], &[1, 3]);
    let p = x.softmax().unwrap();
    for v in p.values() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::new();
    let vals: Vec<f64> = (0..40).map(|_| rng.random_range(-30.0..30.0)).collect();
    let p = t2(&tape, &vals, &[8, 5]).softmax().unwrap();
    let pv = p.values();
    for r in 0..8 {
        let s: f64 = pv[r * 5..(r + 1) * 5].iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
        // entropy of any softmax row lies in [0, ln K]
        let h: f64 = pv[r * 5..(r + 1) * 5]
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        assert!(h >= -1e-12 && h <= (5.0f64).ln() + 1e-12);
    }
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let a: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
    let out = t2(&tape, &eye, &[3, 3])
        .matmul(&t2(&tape, &a, &[3, 3]), false, false)
        .unwrap();
    for (o, e) in out.values().iter().zip(&a) {
        assert!((o - e).abs() < 1e-14);
    }
}

/// Brute-force im2col reference convolution.
fn conv_reference(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    b: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let patch = cin * kh * kw;
    let mut out = Vec::new();
    for bi in 0..batch {
        // columns of the padded image, one per output position
        let mut cols = vec![0.0; oh * ow * patch];
        for oy in 0..oh {
            for ox in 0..ow {
                let col = (oy * ow + ox) * patch;
                let mut p = 0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            cols[col + p] = if iy >= 0
                                && iy < h as isize
                                && ix >= 0
                                && ix < wd as isize
                            {
                                x[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                            } else {
                                0.0
                            };
                            p += 1;
                        }
                    }
                }
            }
        }
        for co in 0..cout {
            let kernel = &w[co * patch..(co + 1) * patch];
            for pos in 0..oh * ow {
                let col = &cols[pos * patch..(pos + 1) * patch];
                let dot: f64 = kernel.iter().zip(col).map(|(a, b)| a * b).sum();
                out.push(dot + b[co]);
            }
        }
    }
    out
}

#[test]
fn conv2d_local_sums() {
    let tape = Tape::new();
    let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
    let xt = t2(&tape, &x, &[1, 1, 3, 3]);
    let w = t2(&tape, &[1.0; 4], &[1, 1, 2, 2]);
    let b = t2(&tape, &[0.0], &[1]);
    let out = xt.conv2d(&w, &b, 1, 0).unwrap();
    assert_eq!(out.shape(), vec![1, 1, 2, 2]);
    // 2x2 windows of [[1,2,3],[4,5,6],[7,8,9]]
    assert_eq!(out.values(), vec![12.0, 16.0, 24.0, 28.0]);
    let reference = conv_reference(&x, &[1, 1, 3, 3], &[1.0; 4], &[1, 1, 2, 2], &[0.0], 1, 0);
    assert_eq!(out.values(), reference);
}

#[test]
fn conv2d_matches_im2col_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let xs = [2, 3, 6, 5];
        let ws = [4, 3, 3, 3];
        let x: Vec<f64> = (0..xs.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let w: Vec<f64> = (0..ws.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
        let tape = Tape::new();
        let out = t2(&tape, &x, &xs)
            .conv2d(&t2(&tape, &w, &ws), &t2(&tape, &b, &[4]), stride, padding)
            .unwrap();
        let reference = conv_reference(&x, &xs, &w, &ws, &b, stride, padding);
        for (a, e) in out.values().iter().zip(&reference) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0, 3.0], vec![1, 3], true).unwrap();
    let root = x.mul(&x).unwrap().sum_all().unwrap();
    root.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let y = x.mul(&x).unwrap();
    assert!(matches!(y.backward(), Err(Error::Contract(_))));
}

#[test]
fn entropy_gradient_vanishes_at_uniform() {
    let tape = Tape::new();
    let logits = tape.leaf(vec![0.3; 4], vec![1, 4], true).unwrap();
    let p = logits.softmax().unwrap();
    let h = p
        .mul(&p.clamp_min(1e-12).unwrap().log().unwrap())
        .unwrap()
        .sum_all()
        .unwrap()
        .neg()
        .unwrap();
    h.backward().unwrap();
    for g in logits.grad().unwrap() {
        assert!(g.abs() < 1e-12, "entropy gradient {g} at uniform");
    }
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w1: Vec<f64> = (0..4 * 6).map(|_| rng.random_range(-0.8..0.8)).collect();
    let b1: Vec<f64> = (0..6).map(|_| rng.random_range(-0.3..0.3)).collect();
    let w2: Vec<f64> = (0..6 * 3).map(|_| rng.random_range(-0.8..0.8)).collect();
    let b2: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3)).collect();
    let x: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();

    let build = |tape: &Tape, params: [&Tensor; 4]| -> Tensor {
        let xin = tape.constant(x.clone(), vec![5, 4]).unwrap();
        let h = xin
            .matmul(params[0], false, false)
            .unwrap()
            .add(params[1])
            .unwrap()
            .relu()
            .unwrap();
        let logits = h
            .matmul(params[2], false, false)
            .unwrap()
            .add(params[3])
            .unwrap();
        let p = logits.softmax().unwrap();
        // mean negative log-likelihood of class 0
        p.slice(1, 0, 1)
            .unwrap()
            .clamp_min(1e-12)
            .unwrap()
            .log()
            .unwrap()
            .mean_all()
            .unwrap()
            .neg()
            .unwrap()
    };

    let tape = Tape::new();
    let pw1 = tape.leaf(w1.clone(), vec![4, 6], true).unwrap();
    let pb1 = tape.leaf(b1.clone(), vec![6], true).unwrap();
    let pw2 = tape.leaf(w2.clone(), vec![6, 3], true).unwrap();
    let pb2 = tape.leaf(b2.clone(), vec![3], true).unwrap();
    let root = build(&tape, [&pw1, &pb1, &pw2, &pb2]);
    root.backward().unwrap();

    let all = [
        (w1.clone(), vec![4, 6], 0usize),
        (b1.clone(), vec![6], 1),
        (w2.clone(), vec![6, 3], 2),
        (b2.clone(), vec![3], 3),
    ];
    let taped = [&pw1, &pb1, &pw2, &pb2];
    for (values, _, idx) in &all {
        let mut eval = |v: &[f64]| {
            let t = Tape::new();
            let leaves: Vec<Tensor> = all
                .iter()
                .map(|(w, s, i)| {
                    let vals = if i == idx { v.to_vec() } else { w.clone() };
                    t.constant(vals, s.clone()).unwrap()
                })
                .collect();
            build(&t, [&leaves[0], &leaves[1], &leaves[2], &leaves[3]]).item()
        };
        let numeric = numeric_gradient(&mut eval, values, 1e-4);
        let analytic = taped[*idx].grad().unwrap();
        let err = worst_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "param {idx}: worst rel err {err}");
    }
}

#[test]
fn every_op_family_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for family in ALL_FAMILIES {
        for _ in 0..2 {
            let err = check_family(family, &mut rng).unwrap();
            assert!(
                err < family.tolerance(),
                "{family:?}: worst rel err {err} exceeds {}",
                family.tolerance()
            );
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let x = tape
        .leaf(
            (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
            vec![4, 6],
            true,
        )
        .unwrap();
    let w = tape
        .leaf(
            (0..18).map(|_| rng.random_range(-1.0..1.0)).collect(),
            vec![6, 3],
            true,
        )
        .unwrap();
    let root = x
        .matmul(&w, false, false)
        .unwrap()
        .softmax()
        .unwrap()
        .clamp_min(1e-12)
        .unwrap()
        .log()
        .unwrap()
        .mean_all()
        .unwrap();
    root.backward().unwrap();
    let g1: Vec<u64> = x.grad().unwrap().iter().map(|v| v.to_bits()).collect();
    root.backward().unwrap();
    let g2: Vec<u64> = x.grad().unwrap().iter().map(|v| v.to_bits()).collect();
    assert_eq!(g1, g2);
}

#[test]
fn frozen_tape_registers_no_edges() {
    let tape = Tape::new();
    tape.set_mode(TapeMode::Frozen);
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    assert!(!x.requires_grad());
    let y = x.mul(&x).unwrap().sum_all().unwrap();
    assert_eq!(y.item(), 5.0);
    tape.set_mode(TapeMode::Recording);
    assert!(matches!(y.backward(), Ok(())));
    // nothing required grad, so nothing was accumulated
    assert!(x.grad().is_none());
}

#[test]
fn shape_mismatch_reports_shapes() {
    let tape = Tape::new();
    let a = t2(&tape, &[1.0, 2.0], &[2]);
    let b = t2(&tape, &[1.0, 2.0, 3.0], &[3]);
    match a.add(&b) {
        Err(Error::Shape { op, left, right }) => {
            assert_eq!(op, "add");
            assert_eq!(left, vec![2]);
            assert_eq!(right, vec![3]);
        }
        other => panic!("expected shape error, got {other:?}", other = other.map(|t| t.shape())),
    }
}

#[test]
fn strict_tape_rejects_non_finite() {
    let tape = Tape::strict();
    let a = t2(&tape, &[1.0, f64::NAN], &[2]);
    assert!(matches!(a.relu(), Err(Error::Numerics(_))));
}

#[test]
fn gaussian_kld_identical_is_zero() {
    let tape = Tape::new();
    let mu = t2(&tape, &[0.3, -0.7], &[2]);
    let cov = t2(&tape, &[1.2, 0.4, 0.4, 0.9], &[2, 2]);
    let kld = gaussian_kld(&mu, &cov, &mu, &cov).unwrap();
    assert!(kld.item().abs() < 1e-9);
    assert!(kld.item() >= -1e-9);
}

/// Univariate closed form with the documented jitter folded in.
fn univariate_kld(m0: f64, v0: f64, m1: f64, v1: f64) -> f64 {
    let j = COV_JITTER;
    0.5 * (((v1 + j) / (v0 + j)).ln() + (v0 + j + (m0 - m1) * (m0 - m1)) / (v1 + j) - 1.0)
}

#[test]
fn gaussian_kld_univariate_closed_form() {
    // KL(N(0,1) || N(1,1)) = 1/2, up to the diagonal jitter
    let v = gaussian_kld_value(&[0.0], &[1.0], &[1.0], &[1.0], 1).unwrap();
    assert!((v - 0.5).abs() < 1e-5, "got {v}");
    assert!((v - univariate_kld(0.0, 1.0, 1.0, 1.0)).abs() < 1e-9);

    let (m0, v0, m1, v1) = (0.2, 0.8, -0.4, 1.7);
    let got = gaussian_kld_value(&[m0], &[v0], &[m1], &[v1], 1).unwrap();
    let expect = univariate_kld(m0, v0, m1, v1);
    assert!((got - expect).abs() < 1e-9, "got {got}, expect {expect}");
}

/// Monte-Carlo estimate of E_{N0}[log p0 - log p1] for D=2.
fn mc_kld_2d(mu0: &[f64], cov0: &[f64], mu1: &[f64], cov1: &[f64], samples: usize) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let l0 = cholesky(cov0, 2).unwrap();
    let l1 = cholesky(cov1, 2).unwrap();
    let logdet = |l: &[f64]| 2.0 * (l[0].ln() + l[3].ln());
    let (ld0, ld1) = (logdet(&l0), logdet(&l1));
    let inv = |c: &[f64]| {
        let det = c[0] * c[3] - c[1] * c[2];
        [c[3] / det, -c[1] / det, -c[2] / det, c[0] / det]
    };
    let (i0, i1) = (inv(cov0), inv(cov1));
    let quad = |i: &[f64; 4], d: &[f64; 2]| {
        i[0] * d[0] * d[0] + (i[1] + i[2]) * d[0] * d[1] + i[3] * d[1] * d[1]
    };
    let mut acc = 0.0;
    for _ in 0..samples {
        let z0: f64 = StandardNormal.sample(&mut rng);
        let z1: f64 = StandardNormal.sample(&mut rng);
        // x ~ N(mu0, cov0) via x = mu0 + L0 z
        let x = [mu0[0] + l0[0] * z0, mu0[1] + l0[2] * z0 + l0[3] * z1];
        let d0 = [x[0] - mu0[0], x[1] - mu0[1]];
        let d1 = [x[0] - mu1[0], x[1] - mu1[1]];
        let log_p0 = -0.5 * (quad(&i0, &d0) + ld0);
        let log_p1 = -0.5 * (quad(&i1, &d1) + ld1);
        acc += log_p0 - log_p1;
    }
    acc / samples as f64
}

#[test]
fn gaussian_kld_matches_monte_carlo_2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let spd = |rng: &mut ChaCha8Rng| {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                c[i * 2 + j] = (0..2).map(|k| a[i * 2 + k] * a[j * 2 + k]).sum::<f64>() / 2.0;
            }
            c[i * 2 + i] += 0.6;
        }
        c.to_vec()
    };
    let mu0: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mu1: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
    let c0 = spd(&mut rng);
    let c1 = spd(&mut rng);
    let analytic = gaussian_kld_value(&mu0, &c0, &mu1, &c1, 2).unwrap();
    let mc = mc_kld_2d(&mu0, &c0, &mu1, &c1, 1_000_000);
    let rel = (analytic - mc).abs() / mc.abs().max(1e-3);
    assert!(rel < 0.02, "analytic {analytic} vs MC {mc} (rel {rel})");
}

#[test]
fn gaussian_kld_nonnegative_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let d = rng.random_range(1..5usize);
        let mu0: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu1: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let spd = |rng: &mut ChaCha8Rng| {
            let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] =
                        (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() / d as f64;
                }
                c[i * d + i] += 0.2;
            }
            c
        };
        let c0 = spd(&mut rng);
        let c1 = spd(&mut rng);
        let v = gaussian_kld_value(&mu0, &c0, &mu1, &c1, d).unwrap();
        assert!(v >= -1e-9, "kld {v} < 0");
    }
}

#[test]
fn gaussian_kld_singular_after_jitter_fails() {
    // a covariance with a hugely negative eigenvalue cannot be rescued by jitter
    let c = vec![-1.0, 0.0, 0.0, -1.0];
    let r = gaussian_kld_value(&[0.0, 0.0], &c, &[0.0, 0.0], &c, 2);
    assert!(matches!(r, Err(Error::SingularCovariance(2))));
}

#[test]
fn unreachable_grad_leaf_gets_zeros() {
    let tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
    let y = tape.leaf(vec![3.0, 4.0], vec![2], true).unwrap();
    let root = x.mul(&x).unwrap().sum_all().unwrap();
    root.backward().unwrap();
    assert_eq!(y.grad().unwrap(), vec![0.0, 0.0]);
}
