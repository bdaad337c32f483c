//! Differentiable KL divergence between multivariate Gaussians.
//!
//! KL(N(mu0, cov0) || N(mu1, cov1)) =
//!   1/2 [ tr(cov1^-1 cov0) + (mu1-mu0)^T cov1^-1 (mu1-mu0) - D
//!         + ln det cov1 - ln det cov0 ]
//!
//! Covariances are symmetrized and jittered (`+ delta I`) before Cholesky
//! factorization. The backward pass uses the closed-form matrix gradients,
//! so the op is differentiable with respect to all four arguments.

use super::linalg::{cholesky, log_det, spd_inverse};
use super::ops::OpOutput;
use super::{OpKind, Tensor, COV_JITTER};
use crate::error::{Error, Result};

type View<'a> = (&'a [f64], &'a [usize]);

fn sym_jitter(c: &[f64], n: usize, jitter: f64) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 0.5 * (c[i * n + j] + c[j * n + i]);
        }
        s[i * n + i] += jitter;
    }
    s
}

fn mat_vec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
        .collect()
}

fn mat_mat(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += av * b[k * n + j];
            }
        }
    }
    out
}

struct KldParts {
    kld: f64,
    inv0: Vec<f64>,
    inv1: Vec<f64>,
    diff: Vec<f64>,
    s0: Vec<f64>,
}

fn kld_parts(mu0: &[f64], cov0: &[f64], mu1: &[f64], cov1: &[f64], d: usize, jitter: f64) -> Result<KldParts> {
    let s0 = sym_jitter(cov0, d, jitter);
    let s1 = sym_jitter(cov1, d, jitter);
    let l0 = cholesky(&s0, d).ok_or(Error::SingularCovariance(d))?;
    let l1 = cholesky(&s1, d).ok_or(Error::SingularCovariance(d))?;
    let ld0 = log_det(&l0, d);
    let ld1 = log_det(&l1, d);
    let inv0 = spd_inverse(&l0, d);
    let inv1 = spd_inverse(&l1, d);
    let tr: f64 = inv1.iter().zip(&s0).map(|(a, b)| a * b).sum();
    let diff: Vec<f64> = mu1.iter().zip(mu0).map(|(a, b)| a - b).collect();
    let u = mat_vec(&inv1, &diff, d);
    let quad: f64 = diff.iter().zip(&u).map(|(a, b)| a * b).sum();
    let kld = 0.5 * (tr + quad - d as f64 + ld1 - ld0);
    Ok(KldParts {
        kld,
        inv0,
        inv1,
        diff,
        s0,
    })
}

fn check_shapes(mu0: &[usize], cov0: &[usize], mu1: &[usize], cov1: &[usize]) -> Result<usize> {
    let d = match mu0 {
        [d] => *d,
        _ => {
            return Err(Error::Shape {
                op: "gaussian-kld",
                left: mu0.to_vec(),
                right: cov0.to_vec(),
            })
        }
    };
    if cov0 != [d, d] || mu1 != [d] || cov1 != [d, d] || d == 0 {
        return Err(Error::Shape {
            op: "gaussian-kld",
            left: mu1.to_vec(),
            right: cov1.to_vec(),
        });
    }
    Ok(d)
}

pub(crate) fn kld_forward(mu0: View, cov0: View, mu1: View, cov1: View, jitter: f64) -> Result<OpOutput> {
    let d = check_shapes(mu0.1, cov0.1, mu1.1, cov1.1)?;
    let parts = kld_parts(mu0.0, cov0.0, mu1.0, cov1.0, d, jitter)?;
    Ok(OpOutput {
        values: vec![parts.kld],
        shape: vec![1],
        saved: vec![parts.inv0, parts.inv1, parts.diff, parts.s0],
    })
}

pub(crate) fn kld_backward(
    views: &[View],
    saved: &[Vec<f64>],
    out_grad: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let d = views[0].1[0];
    let g = out_grad[0];
    let inv0 = &saved[0];
    let inv1 = &saved[1];
    let diff = &saved[2];
    let s0 = &saved[3];
    let u = mat_vec(inv1, diff, d);

    let dmu1: Vec<f64> = u.iter().map(|&x| g * x).collect();
    let dmu0: Vec<f64> = u.iter().map(|&x| -g * x).collect();

    let mut dcov0 = vec![0.0; d * d];
    for i in 0..d * d {
        dcov0[i] = g * 0.5 * (inv1[i] - inv0[i]);
    }

    // d/dcov1 = g/2 (inv1 - inv1 s0 inv1 - u u^T)
    let isi = mat_mat(&mat_mat(inv1, s0, d), inv1, d);
    let mut dcov1 = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let idx = i * d + j;
            dcov1[idx] = g * 0.5 * (inv1[idx] - isi[idx] - u[i] * u[j]);
        }
    }

    vec![Some(dmu0), Some(dcov0), Some(dmu1), Some(dcov1)]
}

/// Taped Gaussian KLD of `N(mu0, cov0)` from `N(mu1, cov1)`.
pub fn gaussian_kld(mu0: &Tensor, cov0: &Tensor, mu1: &Tensor, cov1: &Tensor) -> Result<Tensor> {
    mu0.tape().forward_op(
        OpKind::GaussianKld { jitter: COV_JITTER },
        &[mu0, cov0, mu1, cov1],
    )
}

/// Value-only Gaussian KLD over plain slices (row-major `d x d` covariances).
pub fn gaussian_kld_value(
    mu0: &[f64],
    cov0: &[f64],
    mu1: &[f64],
    cov1: &[f64],
    d: usize,
) -> Result<f64> {
    if mu0.len() != d || mu1.len() != d || cov0.len() != d * d || cov1.len() != d * d || d == 0 {
        return Err(Error::Shape {
            op: "gaussian-kld",
            left: vec![mu0.len(), cov0.len()],
            right: vec![mu1.len(), cov1.len()],
        });
    }
    Ok(kld_parts(mu0, cov0, mu1, cov1, d, COV_JITTER)?.kld)
}
