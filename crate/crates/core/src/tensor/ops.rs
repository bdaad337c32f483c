//! Forward and backward kernels for every op kind.

use super::gaussian;
use super::{Node, OpKind, OpRecord, Reduce};
use crate::error::{Error, Result};

pub(crate) struct OpOutput {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    pub saved: Vec<Vec<f64>>,
}

impl OpOutput {
    fn plain(values: Vec<f64>, shape: Vec<usize>) -> Self {
        OpOutput {
            values,
            shape,
            saved: Vec::new(),
        }
    }
}

type View<'a> = (&'a [f64], &'a [usize]);

fn arity(kind: &OpKind) -> usize {
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Matmul { .. } => 2,
        OpKind::Conv2d { .. } | OpKind::BatchNormTrain { .. } => 3,
        OpKind::BatchNormEval { .. } => 5,
        OpKind::GaussianKld { .. } => 4,
        _ => 1,
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

pub(crate) fn forward(kind: &OpKind, inputs: &[View]) -> Result<OpOutput> {
    if inputs.len() != arity(kind) {
        return Err(Error::Contract(format!(
            "{kind:?} expects {} inputs, got {}",
            arity(kind),
            inputs.len()
        )));
    }
    match kind {
        OpKind::Add => ew_forward(inputs[0], inputs[1], "add", |a, b| a + b),
        OpKind::Sub => ew_forward(inputs[0], inputs[1], "sub", |a, b| a - b),
        OpKind::Mul => ew_forward(inputs[0], inputs[1], "mul", |a, b| a * b),
        OpKind::Matmul { ta, tb } => matmul_forward(inputs[0], inputs[1], *ta, *tb),
        OpKind::Conv2d { stride, padding } => {
            conv2d_forward(inputs[0], inputs[1], inputs[2], *stride, *padding)
        }
        OpKind::Relu => {
            let (x, s) = inputs[0];
            let v = x.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
            Ok(OpOutput::plain(v, s.to_vec()))
        }
        OpKind::Softmax => softmax_forward(inputs[0]),
        OpKind::Log => {
            let (x, s) = inputs[0];
            Ok(OpOutput::plain(x.iter().map(|a| a.ln()).collect(), s.to_vec()))
        }
        OpKind::Exp => {
            let (x, s) = inputs[0];
            Ok(OpOutput::plain(x.iter().map(|a| a.exp()).collect(), s.to_vec()))
        }
        OpKind::Mean(r) => reduce_forward(inputs[0], *r, true),
        OpKind::Sum(r) => reduce_forward(inputs[0], *r, false),
        OpKind::Reshape { shape } => {
            let (x, s) = inputs[0];
            let numel: usize = shape.iter().product();
            if numel != x.len() {
                return Err(shape_err("reshape", s, shape));
            }
            Ok(OpOutput::plain(x.to_vec(), shape.clone()))
        }
        OpKind::Slice { axis, start, len } => slice_forward(inputs[0], *axis, *start, *len),
        OpKind::Clamp { lo, hi } => {
            let (x, s) = inputs[0];
            let lo = lo.unwrap_or(f64::NEG_INFINITY);
            let hi = hi.unwrap_or(f64::INFINITY);
            let v = x.iter().map(|&a| a.clamp(lo, hi)).collect();
            Ok(OpOutput::plain(v, s.to_vec()))
        }
        OpKind::BatchNormTrain { eps } => bn_train_forward(inputs[0], inputs[1], inputs[2], *eps),
        OpKind::BatchNormEval { eps } => {
            bn_eval_forward(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], *eps)
        }
        OpKind::GaussianKld { jitter } => {
            gaussian::kld_forward(inputs[0], inputs[1], inputs[2], inputs[3], *jitter)
        }
    }
}

/// Gradient contributions per parent, in parent order. `None` entries carry
/// no gradient (e.g. the running statistics of an eval batch norm).
pub(crate) fn backward(
    op: &OpRecord,
    node: &Node,
    nodes: &[Node],
    out_grad: &[f64],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let views: Vec<View> = op
        .parents
        .iter()
        .map(|&p| (nodes[p].values.as_slice(), nodes[p].shape.as_slice()))
        .collect();
    let grads: Vec<Option<Vec<f64>>> = match &op.kind {
        OpKind::Add => ew_backward(&views, out_grad, |_, _| (1.0, 1.0)),
        OpKind::Sub => ew_backward(&views, out_grad, |_, _| (1.0, -1.0)),
        OpKind::Mul => ew_backward(&views, out_grad, |a, b| (b, a)),
        OpKind::Matmul { ta, tb } => matmul_backward(&views, out_grad, *ta, *tb),
        OpKind::Conv2d { stride, padding } => conv2d_backward(&views, out_grad, *stride, *padding),
        OpKind::Relu => {
            let (x, _) = views[0];
            vec![Some(
                x.iter()
                    .zip(out_grad)
                    .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                    .collect(),
            )]
        }
        OpKind::Softmax => softmax_backward(&node.values, &node.shape, out_grad),
        OpKind::Log => {
            let (x, _) = views[0];
            vec![Some(x.iter().zip(out_grad).map(|(&a, &g)| g / a).collect())]
        }
        OpKind::Exp => vec![Some(
            node.values.iter().zip(out_grad).map(|(&y, &g)| g * y).collect(),
        )],
        OpKind::Mean(r) => reduce_backward(&views, out_grad, *r, true),
        OpKind::Sum(r) => reduce_backward(&views, out_grad, *r, false),
        OpKind::Reshape { .. } => vec![Some(out_grad.to_vec())],
        OpKind::Slice { axis, start, len } => slice_backward(&views, out_grad, *axis, *start, *len),
        OpKind::Clamp { lo, hi } => {
            let (x, _) = views[0];
            let lo = lo.unwrap_or(f64::NEG_INFINITY);
            let hi = hi.unwrap_or(f64::INFINITY);
            vec![Some(
                x.iter()
                    .zip(out_grad)
                    .map(|(&a, &g)| if a > lo && a < hi { g } else { 0.0 })
                    .collect(),
            )]
        }
        OpKind::BatchNormTrain { .. } => bn_train_backward(&views, &op.saved, out_grad),
        OpKind::BatchNormEval { .. } => bn_eval_backward(&views, &op.saved, out_grad),
        OpKind::GaussianKld { .. } => gaussian::kld_backward(&views, &op.saved, out_grad),
    };
    Ok(op
        .parents
        .iter()
        .zip(grads)
        .filter_map(|(&p, g)| g.map(|g| (p, g)))
        .collect())
}

// ---------------------------------------------------------------------------
// elementwise with limited broadcasting
// ---------------------------------------------------------------------------

/// Supported layouts for binary elementwise ops.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs has a single element.
    ScalarRhs,
    /// lhs has a single element.
    ScalarLhs,
    /// rhs is 1-D and matches the feature axis (axis 1) of lhs.
    FeatureRhs,
}

fn broadcast_kind(ls: &[usize], rs: &[usize]) -> Option<Broadcast> {
    let ln: usize = ls.iter().product();
    let rn: usize = rs.iter().product();
    if ls == rs {
        return Some(Broadcast::Same);
    }
    if rn == 1 {
        return Some(Broadcast::ScalarRhs);
    }
    if ln == 1 {
        return Some(Broadcast::ScalarLhs);
    }
    if rs.len() == 1 && ls.len() >= 2 && rs[0] == ls[1] {
        return Some(Broadcast::FeatureRhs);
    }
    None
}

/// Index of the feature-axis element of `rhs` feeding `lhs[idx]`.
fn feature_index(ls: &[usize], idx: usize) -> usize {
    let inner: usize = ls[2..].iter().product();
    (idx / inner) % ls[1]
}

fn ew_forward(a: View, b: View, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<OpOutput> {
    let (av, ash) = a;
    let (bv, bsh) = b;
    let kind = broadcast_kind(ash, bsh).ok_or_else(|| shape_err(name, ash, bsh))?;
    let (values, shape) = match kind {
        Broadcast::Same => (
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            ash.to_vec(),
        ),
        Broadcast::ScalarRhs => (av.iter().map(|&x| f(x, bv[0])).collect(), ash.to_vec()),
        Broadcast::ScalarLhs => (bv.iter().map(|&y| f(av[0], y)).collect(), bsh.to_vec()),
        Broadcast::FeatureRhs => (
            av.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[feature_index(ash, i)]))
                .collect(),
            ash.to_vec(),
        ),
    };
    Ok(OpOutput::plain(values, shape))
}

/// `coeffs(a, b)` returns the local partials (dy/da, dy/db) at one element.
fn ew_backward(
    views: &[View],
    out_grad: &[f64],
    coeffs: impl Fn(f64, f64) -> (f64, f64),
) -> Vec<Option<Vec<f64>>> {
    let (av, ash) = views[0];
    let (bv, bsh) = views[1];
    let kind = broadcast_kind(ash, bsh).expect("validated in forward");
    let mut da = vec![0.0; av.len()];
    let mut db = vec![0.0; bv.len()];
    match kind {
        Broadcast::Same => {
            for i in 0..out_grad.len() {
                let (ca, cb) = coeffs(av[i], bv[i]);
                da[i] += out_grad[i] * ca;
                db[i] += out_grad[i] * cb;
            }
        }
        Broadcast::ScalarRhs => {
            for i in 0..out_grad.len() {
                let (ca, cb) = coeffs(av[i], bv[0]);
                da[i] += out_grad[i] * ca;
                db[0] += out_grad[i] * cb;
            }
        }
        Broadcast::ScalarLhs => {
            for i in 0..out_grad.len() {
                let (ca, cb) = coeffs(av[0], bv[i]);
                da[0] += out_grad[i] * ca;
                db[i] += out_grad[i] * cb;
            }
        }
        Broadcast::FeatureRhs => {
            for i in 0..out_grad.len() {
                let j = feature_index(ash, i);
                let (ca, cb) = coeffs(av[i], bv[j]);
                da[i] += out_grad[i] * ca;
                db[j] += out_grad[i] * cb;
            }
        }
    }
    vec![Some(da), Some(db)]
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

fn transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

/// Plain (m,k)x(k,n) product, ikj order.
fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn matmul_forward(a: View, b: View, ta: bool, tb: bool) -> Result<OpOutput> {
    let (av, ash) = a;
    let (bv, bsh) = b;
    if ash.len() != 2 || bsh.len() != 2 {
        return Err(shape_err("matmul", ash, bsh));
    }
    let (m, ka) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
    let (kb, n) = if tb { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
    if ka != kb {
        return Err(shape_err("matmul", ash, bsh));
    }
    let am = if ta {
        transpose(av, ash[0], ash[1])
    } else {
        av.to_vec()
    };
    let bm = if tb {
        transpose(bv, bsh[0], bsh[1])
    } else {
        bv.to_vec()
    };
    Ok(OpOutput::plain(mat_mul(&am, &bm, m, ka, n), vec![m, n]))
}

fn matmul_backward(views: &[View], out_grad: &[f64], ta: bool, tb: bool) -> Vec<Option<Vec<f64>>> {
    let (av, ash) = views[0];
    let (bv, bsh) = views[1];
    let (m, k) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
    let n = if tb { bsh[0] } else { bsh[1] };
    let am = if ta {
        transpose(av, ash[0], ash[1])
    } else {
        av.to_vec()
    };
    let bm = if tb {
        transpose(bv, bsh[0], bsh[1])
    } else {
        bv.to_vec()
    };
    // dMa = G . Mb^T, dMb = Ma^T . G
    let bt = transpose(&bm, k, n);
    let d_ma = mat_mul(out_grad, &bt, m, n, k);
    let at = transpose(&am, m, k);
    let d_mb = mat_mul(&at, out_grad, k, m, n);
    let da = if ta { transpose(&d_ma, m, k) } else { d_ma };
    let db = if tb { transpose(&d_mb, k, n) } else { d_mb };
    vec![Some(da), Some(db)]
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn conv2d_forward(x: View, w: View, b: View, stride: usize, padding: usize) -> Result<OpOutput> {
    let (xv, xs) = x;
    let (wv, ws) = w;
    let (bv, bs) = b;
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(shape_err("conv2d", xs, ws));
    }
    if bs.len() != 1 || bs[0] != ws[0] {
        return Err(shape_err("conv2d", ws, bs));
    }
    if stride == 0 {
        return Err(Error::Contract("conv2d stride must be >= 1".into()));
    }
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = conv_out_extent(h, kh, stride, padding).ok_or_else(|| shape_err("conv2d", xs, ws))?;
    let ow = conv_out_extent(wd, kw, stride, padding).ok_or_else(|| shape_err("conv2d", xs, ws))?;
    let mut out = vec![0.0; batch * cout * oh * ow];
    for bi in 0..batch {
        for co in 0..cout {
            let obase = (bi * cout + co) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bv[co];
                    for ci in 0..cin {
                        let xbase = (bi * cin + ci) * h * wd;
                        let wbase = (co * cin + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xv[xbase + iy as usize * wd + ix as usize]
                                    * wv[wbase + ky * kw + kx];
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = acc;
                }
            }
        }
    }
    Ok(OpOutput::plain(out, vec![batch, cout, oh, ow]))
}

fn conv2d_backward(
    views: &[View],
    out_grad: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<Option<Vec<f64>>> {
    let (xv, xs) = views[0];
    let (wv, ws) = views[1];
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = conv_out_extent(h, kh, stride, padding).expect("validated in forward");
    let ow = conv_out_extent(wd, kw, stride, padding).expect("validated in forward");
    let mut dx = vec![0.0; xv.len()];
    let mut dw = vec![0.0; wv.len()];
    let mut db = vec![0.0; cout];
    for bi in 0..batch {
        for co in 0..cout {
            let obase = (bi * cout + co) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = out_grad[obase + oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    db[co] += g;
                    for ci in 0..cin {
                        let xbase = (bi * cin + ci) * h * wd;
                        let wbase = (co * cin + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = xbase + iy as usize * wd + ix as usize;
                                let wi = wbase + ky * kw + kx;
                                dx[xi] += g * wv[wi];
                                dw[wi] += g * xv[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    vec![Some(dx), Some(dw), Some(db)]
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn softmax_forward(x: View) -> Result<OpOutput> {
    let (xv, xs) = x;
    if xs.len() != 2 {
        return Err(shape_err("softmax", xs, &[]));
    }
    let (rows, cols) = (xs[0], xs[1]);
    let mut out = vec![0.0; xv.len()];
    for r in 0..rows {
        let row = &xv[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for c in 0..cols {
            let e = (row[c] - mx).exp();
            orow[c] = e;
            z += e;
        }
        for v in orow.iter_mut() {
            *v /= z;
        }
    }
    Ok(OpOutput::plain(out, xs.to_vec()))
}

fn softmax_backward(values: &[f64], shape: &[usize], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (rows, cols) = (shape[0], shape[1]);
    let mut dx = vec![0.0; values.len()];
    for r in 0..rows {
        let p = &values[r * cols..(r + 1) * cols];
        let g = &out_grad[r * cols..(r + 1) * cols];
        let dot: f64 = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
        let d = &mut dx[r * cols..(r + 1) * cols];
        for c in 0..cols {
            d[c] = p[c] * (g[c] - dot);
        }
    }
    vec![Some(dx)]
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

fn reduce_forward(x: View, r: Reduce, mean: bool) -> Result<OpOutput> {
    let (xv, xs) = x;
    match r {
        Reduce::All => {
            let mut s: f64 = xv.iter().sum();
            if mean {
                s /= xv.len() as f64;
            }
            Ok(OpOutput::plain(vec![s], vec![1]))
        }
        Reduce::Rows => {
            if xs.len() != 2 {
                return Err(shape_err("reduce-rows", xs, &[]));
            }
            let (rows, cols) = (xs[0], xs[1]);
            let mut out = vec![0.0; cols];
            for r0 in 0..rows {
                for c in 0..cols {
                    out[c] += xv[r0 * cols + c];
                }
            }
            if mean {
                for v in out.iter_mut() {
                    *v /= rows as f64;
                }
            }
            Ok(OpOutput::plain(out, vec![cols]))
        }
        Reduce::Spatial => {
            if xs.len() != 4 {
                return Err(shape_err("reduce-spatial", xs, &[]));
            }
            let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let hw = h * w;
            let mut out = vec![0.0; b * c];
            for i in 0..b * c {
                let block = &xv[i * hw..(i + 1) * hw];
                let mut s: f64 = block.iter().sum();
                if mean {
                    s /= hw as f64;
                }
                out[i] = s;
            }
            Ok(OpOutput::plain(out, vec![b, c]))
        }
    }
}

fn reduce_backward(views: &[View], out_grad: &[f64], r: Reduce, mean: bool) -> Vec<Option<Vec<f64>>> {
    let (xv, xs) = views[0];
    let mut dx = vec![0.0; xv.len()];
    match r {
        Reduce::All => {
            let scale = if mean { 1.0 / xv.len() as f64 } else { 1.0 };
            let g = out_grad[0] * scale;
            for v in dx.iter_mut() {
                *v = g;
            }
        }
        Reduce::Rows => {
            let (rows, cols) = (xs[0], xs[1]);
            let scale = if mean { 1.0 / rows as f64 } else { 1.0 };
            for r0 in 0..rows {
                for c in 0..cols {
                    dx[r0 * cols + c] = out_grad[c] * scale;
                }
            }
        }
        Reduce::Spatial => {
            let hw = xs[2] * xs[3];
            let scale = if mean { 1.0 / hw as f64 } else { 1.0 };
            for i in 0..xs[0] * xs[1] {
                let g = out_grad[i] * scale;
                for v in dx[i * hw..(i + 1) * hw].iter_mut() {
                    *v = g;
                }
            }
        }
    }
    vec![Some(dx)]
}

// ---------------------------------------------------------------------------
// slice
// ---------------------------------------------------------------------------

fn slice_layout(xs: &[usize], axis: usize, start: usize, len: usize) -> Result<(usize, usize, usize)> {
    if axis >= xs.len() || start + len > xs[axis] || len == 0 {
        return Err(Error::Contract(format!(
            "slice [{start}, {}) on axis {axis} of shape {xs:?}",
            start + len
        )));
    }
    let outer: usize = xs[..axis].iter().product();
    let inner: usize = xs[axis + 1..].iter().product();
    Ok((outer, xs[axis], inner))
}

fn slice_forward(x: View, axis: usize, start: usize, len: usize) -> Result<OpOutput> {
    let (xv, xs) = x;
    let (outer, dim, inner) = slice_layout(xs, axis, start, len)?;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        out.extend_from_slice(&xv[base..base + len * inner]);
    }
    let mut shape = xs.to_vec();
    shape[axis] = len;
    Ok(OpOutput::plain(out, shape))
}

fn slice_backward(
    views: &[View],
    out_grad: &[f64],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<Option<Vec<f64>>> {
    let (xv, xs) = views[0];
    let (outer, dim, inner) = slice_layout(xs, axis, start, len).expect("validated in forward");
    let mut dx = vec![0.0; xv.len()];
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        let gbase = o * len * inner;
        dx[base..base + len * inner].copy_from_slice(&out_grad[gbase..gbase + len * inner]);
    }
    vec![Some(dx)]
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// (channels, per-channel count, index stride helper) for (B,C) or (B,C,H,W).
fn bn_layout(xs: &[usize]) -> Result<(usize, usize)> {
    match xs.len() {
        2 => Ok((xs[1], xs[0])),
        4 => Ok((xs[1], xs[0] * xs[2] * xs[3])),
        _ => Err(shape_err("batch-norm", xs, &[])),
    }
}

fn bn_for_each(xs: &[usize], c: usize, mut f: impl FnMut(usize)) {
    match xs.len() {
        2 => {
            let cols = xs[1];
            for b in 0..xs[0] {
                f(b * cols + c);
            }
        }
        _ => {
            let (ch, h, w) = (xs[1], xs[2], xs[3]);
            let hw = h * w;
            for b in 0..xs[0] {
                let base = (b * ch + c) * hw;
                for i in 0..hw {
                    f(base + i);
                }
            }
        }
    }
}

/// Per-channel biased batch statistics of a (B,C) or (B,C,H,W) tensor.
pub(crate) fn batch_statistics(xv: &[f64], xs: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (channels, n) = bn_layout(xs)?;
    if n < 2 {
        return Err(Error::DegenerateBatch(xs[0]));
    }
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        bn_for_each(xs, c, |i| s += xv[i]);
        let m = s / n as f64;
        let mut v = 0.0;
        bn_for_each(xs, c, |i| {
            let d = xv[i] - m;
            v += d * d;
        });
        mean[c] = m;
        var[c] = v / n as f64;
    }
    Ok((mean, var))
}

fn bn_train_forward(x: View, gamma: View, beta: View, eps: f64) -> Result<OpOutput> {
    let (xv, xs) = x;
    let (gv, gs) = gamma;
    let (bv, bs) = beta;
    let (channels, _) = bn_layout(xs)?;
    if gs != [channels] || bs != [channels] {
        return Err(shape_err("batch-norm-train", xs, gs));
    }
    let (mean, var) = batch_statistics(xv, xs)?;
    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for c in 0..channels {
        bn_for_each(xs, c, |i| {
            let h = (xv[i] - mean[c]) * invstd[c];
            xhat[i] = h;
            out[i] = gv[c] * h + bv[c];
        });
    }
    Ok(OpOutput {
        values: out,
        shape: xs.to_vec(),
        saved: vec![xhat, invstd, mean, var],
    })
}

fn bn_train_backward(views: &[View], saved: &[Vec<f64>], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (xv, xs) = views[0];
    let (gv, _) = views[1];
    let xhat = &saved[0];
    let invstd = &saved[1];
    let (channels, n) = bn_layout(xs).expect("validated in forward");
    let nf = n as f64;
    let mut dx = vec![0.0; xv.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let mut sum_g = 0.0;
        let mut sum_gh = 0.0;
        bn_for_each(xs, c, |i| {
            sum_g += out_grad[i];
            sum_gh += out_grad[i] * xhat[i];
        });
        dgamma[c] = sum_gh;
        dbeta[c] = sum_g;
        // gradient through the batch statistics
        let k = gv[c] * invstd[c] / nf;
        bn_for_each(xs, c, |i| {
            dx[i] = k * (nf * out_grad[i] - sum_g - xhat[i] * sum_gh);
        });
    }
    vec![Some(dx), Some(dgamma), Some(dbeta)]
}

fn bn_eval_forward(
    x: View,
    gamma: View,
    beta: View,
    mean: View,
    var: View,
    eps: f64,
) -> Result<OpOutput> {
    let (xv, xs) = x;
    let (gv, gs) = gamma;
    let (bv, _) = beta;
    let (mv, ms) = mean;
    let (vv, vs) = var;
    let (channels, _) = bn_layout(xs)?;
    if gs != [channels] || ms != [channels] || vs != [channels] {
        return Err(shape_err("batch-norm-eval", xs, gs));
    }
    let invstd: Vec<f64> = vv.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for c in 0..channels {
        bn_for_each(xs, c, |i| {
            let h = (xv[i] - mv[c]) * invstd[c];
            xhat[i] = h;
            out[i] = gv[c] * h + bv[c];
        });
    }
    Ok(OpOutput {
        values: out,
        shape: xs.to_vec(),
        saved: vec![xhat, invstd],
    })
}

fn bn_eval_backward(views: &[View], saved: &[Vec<f64>], out_grad: &[f64]) -> Vec<Option<Vec<f64>>> {
    let (xv, xs) = views[0];
    let (gv, _) = views[1];
    let xhat = &saved[0];
    let invstd = &saved[1];
    let (channels, _) = bn_layout(xs).expect("validated in forward");
    let mut dx = vec![0.0; xv.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let k = gv[c] * invstd[c];
        bn_for_each(xs, c, |i| {
            dx[i] = out_grad[i] * k;
            dgamma[c] += out_grad[i] * xhat[i];
            dbeta[c] += out_grad[i];
        });
    }
    // running statistics are constants: no gradient
    vec![Some(dx), Some(dgamma), Some(dbeta), None, None]
}
