//! Raw forward/backward computations behind the tape operators.
//!
//! Everything here is a pure function over slices; the tape layer owns
//! shape checking, recording, and gradient accumulation. Inner loops keep
//! the channel axis contiguous so they auto-vectorize.

use super::Element;

#[inline]
pub fn conv_out_dim(input: usize, pad: usize, k: usize, stride: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

// ── Matrix products ─────────────────────────────────────────────────

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// out[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// out[m,k] = a[m,n] * b[k,n]^T
pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = E::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    }
    out
}

// ── Convolution family ──────────────────────────────────────────────
//
// Layouts: input B,H,W,Ci — kernel Kh,Kw,Ci,Co — output B,Oh,Ow,Co.
// The transposed convolution is the exact linear adjoint of the forward
// convolution with the same kernel tensor, so its forward pass reuses
// `conv_bw_input` and vice versa.

#[allow(clippy::too_many_arguments)]
pub fn conv_fw<E: Element>(
    x: &[E],
    k: &[E],
    bias: Option<&[E]>,
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let oh = conv_out_dim(h, pad, kh, stride);
    let ow = conv_out_dim(w, pad, kw, stride);
    let mut out = vec![E::ZERO; b * oh * ow * co];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = {
                    let base = ((bi * oh + oy) * ow + ox) * co;
                    &mut out[base..base + co]
                };
                if let Some(bias) = bias {
                    orow.copy_from_slice(bias);
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let kbase = (ky * kw + kx) * ci * co;
                        for c_in in 0..ci {
                            let xv = x[xbase + c_in];
                            let krow = &k[kbase + c_in * co..kbase + (c_in + 1) * co];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o = *o + xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input (also the transposed-conv forward).
#[allow(clippy::too_many_arguments)]
pub fn conv_bw_input<E: Element>(
    dy: &[E],
    k: &[E],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let oh = conv_out_dim(h, pad, kh, stride);
    let ow = conv_out_dim(w, pad, kw, stride);
    let mut dx = vec![E::ZERO; b * h * w * ci];
    for bi in 0..b {
        for iy in 0..h {
            for ix in 0..w {
                let dxrow = {
                    let base = ((bi * h + iy) * w + ix) * ci;
                    &mut dx[base..base + ci]
                };
                for ky in 0..kh {
                    // iy = oy*stride + ky - pad  =>  oy = (iy + pad - ky)/stride
                    let oy_num = iy as isize + pad as isize - ky as isize;
                    if oy_num < 0 || oy_num % stride as isize != 0 {
                        continue;
                    }
                    let oy = (oy_num / stride as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..kw {
                        let ox_num = ix as isize + pad as isize - kx as isize;
                        if ox_num < 0 || ox_num % stride as isize != 0 {
                            continue;
                        }
                        let ox = (ox_num / stride as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        let dybase = ((bi * oh + oy) * ow + ox) * co;
                        let dyrow = &dy[dybase..dybase + co];
                        let kbase = (ky * kw + kx) * ci * co;
                        for (c_in, d) in dxrow.iter_mut().enumerate() {
                            let krow = &k[kbase + c_in * co..kbase + (c_in + 1) * co];
                            let mut acc = E::ZERO;
                            for (&dv, &kv) in dyrow.iter().zip(krow) {
                                acc = acc + dv * kv;
                            }
                            *d = *d + acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv_bw_kernel<E: Element>(
    x: &[E],
    dy: &[E],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let oh = conv_out_dim(h, pad, kh, stride);
    let ow = conv_out_dim(w, pad, kw, stride);
    let mut dk = vec![E::ZERO; kh * kw * ci * co];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let dybase = ((bi * oh + oy) * ow + ox) * co;
                let dyrow = &dy[dybase..dybase + co];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = ((bi * h + iy as usize) * w + ix as usize) * ci;
                        let kbase = (ky * kw + kx) * ci * co;
                        for c_in in 0..ci {
                            let xv = x[xbase + c_in];
                            let krow = &mut dk[kbase + c_in * co..kbase + (c_in + 1) * co];
                            for (d, &dv) in krow.iter_mut().zip(dyrow) {
                                *d = *d + xv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

/// Per-output-channel sum of the upstream gradient.
pub fn sum_over_rows<E: Element>(dy: &[E], rows: usize, c: usize) -> Vec<E> {
    let mut db = vec![E::ZERO; c];
    for i in 0..rows {
        let row = &dy[i * c..(i + 1) * c];
        for (d, &v) in db.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    db
}

// ── Normalization ───────────────────────────────────────────────────

/// Per-group normalization statistics: `groups` rows of length `c` are
/// reduced over `rows_per_group` interleaved rows. Used by layer norm
/// (group = one cell) and batch norm (group = one channel, transposed view).
pub struct NormStats<E> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Layer norm forward over the last axis: x is [n, c]; returns normalized
/// values and per-row statistics.
pub fn layernorm_fw<E: Element>(x: &[E], n: usize, c: usize, eps: E) -> (Vec<E>, NormStats<E>) {
    let mut xhat = vec![E::ZERO; n * c];
    let mut mean = vec![E::ZERO; n];
    let mut inv_std = vec![E::ZERO; n];
    let cn = E::from_f64(c as f64);
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let mu = row.iter().copied().sum::<E>() / cn;
        let mut var = E::ZERO;
        for &v in row {
            let d = v - mu;
            var = var + d * d;
        }
        var = var / cn;
        let is = E::ONE / (var + eps).sqrt();
        mean[i] = mu;
        inv_std[i] = is;
        let xrow = &mut xhat[i * c..(i + 1) * c];
        for (o, &v) in xrow.iter_mut().zip(row) {
            *o = (v - mu) * is;
        }
    }
    (xhat, NormStats { mean, inv_std })
}

/// Gradient of layer norm w.r.t. x given d_xhat (upstream already folded
/// with the affine scale): standard three-term formula per row.
pub fn layernorm_bw_input<E: Element>(
    d_xhat: &[E],
    xhat: &[E],
    inv_std: &[E],
    n: usize,
    c: usize,
) -> Vec<E> {
    let mut dx = vec![E::ZERO; n * c];
    let cn = E::from_f64(c as f64);
    for i in 0..n {
        let dh = &d_xhat[i * c..(i + 1) * c];
        let xh = &xhat[i * c..(i + 1) * c];
        let mut sum_dh = E::ZERO;
        let mut sum_dh_xh = E::ZERO;
        for (&a, &b) in dh.iter().zip(xh) {
            sum_dh = sum_dh + a;
            sum_dh_xh = sum_dh_xh + a * b;
        }
        let m1 = sum_dh / cn;
        let m2 = sum_dh_xh / cn;
        let is = inv_std[i];
        let drow = &mut dx[i * c..(i + 1) * c];
        for ((o, &a), &b) in drow.iter_mut().zip(dh).zip(xh) {
            *o = is * (a - m1 - b * m2);
        }
    }
    dx
}

/// Batch norm forward statistics: x is [n, c] with the reduction over the
/// row axis (one mean/variance per channel).
pub fn batchnorm_fw<E: Element>(x: &[E], n: usize, c: usize, eps: E) -> (Vec<E>, NormStats<E>) {
    let nn = E::from_f64(n as f64);
    let mut mean = vec![E::ZERO; c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    for m in mean.iter_mut() {
        *m = *m / nn;
    }
    let mut var = vec![E::ZERO; c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = xv - m;
            *v = *v + d * d;
        }
    }
    let mut inv_std = vec![E::ZERO; c];
    for (is, v) in inv_std.iter_mut().zip(var.iter_mut()) {
        *v = *v / nn;
        *is = E::ONE / (*v + eps).sqrt();
    }
    let mut xhat = vec![E::ZERO; n * c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let orow = &mut xhat[i * c..(i + 1) * c];
        for (((o, &xv), &m), &is) in orow.iter_mut().zip(row).zip(&mean).zip(&inv_std) {
            *o = (xv - m) * is;
        }
    }
    // Reuse NormStats, stashing the variance in `mean` slot is avoided:
    // callers read mean/inv_std, variance is recomputed from inv_std when
    // updating running statistics.
    (xhat, NormStats { mean, inv_std })
}

/// Batch norm input gradient given d_xhat: same structure as layer norm but
/// reduced over rows per channel.
pub fn batchnorm_bw_input<E: Element>(
    d_xhat: &[E],
    xhat: &[E],
    inv_std: &[E],
    n: usize,
    c: usize,
) -> Vec<E> {
    let nn = E::from_f64(n as f64);
    let mut sum_dh = vec![E::ZERO; c];
    let mut sum_dh_xh = vec![E::ZERO; c];
    for i in 0..n {
        let dh = &d_xhat[i * c..(i + 1) * c];
        let xh = &xhat[i * c..(i + 1) * c];
        for ((s1, s2), (&a, &b)) in sum_dh.iter_mut().zip(sum_dh_xh.iter_mut()).zip(dh.iter().zip(xh)) {
            *s1 = *s1 + a;
            *s2 = *s2 + a * b;
        }
    }
    for s in sum_dh.iter_mut() {
        *s = *s / nn;
    }
    for s in sum_dh_xh.iter_mut() {
        *s = *s / nn;
    }
    let mut dx = vec![E::ZERO; n * c];
    for i in 0..n {
        let dh = &d_xhat[i * c..(i + 1) * c];
        let xh = &xhat[i * c..(i + 1) * c];
        let drow = &mut dx[i * c..(i + 1) * c];
        for c_i in 0..c {
            drow[c_i] = inv_std[c_i] * (dh[c_i] - sum_dh[c_i] - xh[c_i] * sum_dh_xh[c_i]);
        }
    }
    dx
}

// ── Localized self-attention ────────────────────────────────────────
//
// Queries attend to the keys/values of their 3x3 Moore neighborhood.
// Out-of-lattice neighbors are excluded from the softmax, so border cells
// normalize over fewer than nine scores.

pub const NEIGHBOR_OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Forward pass. q/k/v are [b*h*w, heads*dh] in BHWC cell order. Returns
/// (output, probs) with probs laid out [cell, head, 9] (zero where the
/// neighbor is out of bounds).
#[allow(clippy::too_many_arguments)]
pub fn local_attention_fw<E: Element>(
    q: &[E],
    k: &[E],
    v: &[E],
    b: usize,
    h: usize,
    w: usize,
    heads: usize,
    dh: usize,
) -> (Vec<E>, Vec<E>) {
    let c = heads * dh;
    let cells = b * h * w;
    let scale = E::ONE / E::from_f64((dh as f64).sqrt());
    let mut out = vec![E::ZERO; cells * c];
    let mut probs = vec![E::ZERO; cells * heads * 9];
    let mut scores = [E::ZERO; 9];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let cell = (bi * h + y) * w + x;
                for head in 0..heads {
                    let qv = &q[cell * c + head * dh..cell * c + (head + 1) * dh];
                    let mut valid = [false; 9];
                    let mut max_s = E::from_f64(f64::NEG_INFINITY);
                    for (j, (dy, dx)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                        let ny = y as isize + dy;
                        let nx = x as isize + dx;
                        if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            continue;
                        }
                        let ncell = (bi * h + ny as usize) * w + nx as usize;
                        let kv = &k[ncell * c + head * dh..ncell * c + (head + 1) * dh];
                        let mut s = E::ZERO;
                        for (&a, &bb) in qv.iter().zip(kv) {
                            s = s + a * bb;
                        }
                        s = s * scale;
                        scores[j] = s;
                        valid[j] = true;
                        if s > max_s {
                            max_s = s;
                        }
                    }
                    let mut denom = E::ZERO;
                    for j in 0..9 {
                        if valid[j] {
                            let e = (scores[j] - max_s).exp();
                            scores[j] = e;
                            denom = denom + e;
                        }
                    }
                    let pbase = (cell * heads + head) * 9;
                    let obase = cell * c + head * dh;
                    for (j, (dy, dx)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                        if !valid[j] {
                            continue;
                        }
                        let p = scores[j] / denom;
                        probs[pbase + j] = p;
                        let ny = (y as isize + dy) as usize;
                        let nx = (x as isize + dx) as usize;
                        let ncell = (bi * h + ny) * w + nx;
                        let vv = &v[ncell * c + head * dh..ncell * c + (head + 1) * dh];
                        for (o, &val) in out[obase..obase + dh].iter_mut().zip(vv) {
                            *o = *o + p * val;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Backward pass; returns (dq, dk, dv). Runs in two sweeps: the first
/// computes per-cell score gradients and dq, the second gathers dk/dv so
/// every output location is written by exactly one iteration.
#[allow(clippy::too_many_arguments)]
pub fn local_attention_bw<E: Element>(
    d_out: &[E],
    q: &[E],
    k: &[E],
    v: &[E],
    probs: &[E],
    b: usize,
    h: usize,
    w: usize,
    heads: usize,
    dh: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let c = heads * dh;
    let cells = b * h * w;
    let scale = E::ONE / E::from_f64((dh as f64).sqrt());
    let mut dq = vec![E::ZERO; cells * c];
    let mut dk = vec![E::ZERO; cells * c];
    let mut dv = vec![E::ZERO; cells * c];
    let mut d_scores = vec![E::ZERO; cells * heads * 9];

    // Sweep 1: d_scores and dq.
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let cell = (bi * h + y) * w + x;
                for head in 0..heads {
                    let dout = &d_out[cell * c + head * dh..cell * c + (head + 1) * dh];
                    let pbase = (cell * heads + head) * 9;
                    let mut dp = [E::ZERO; 9];
                    let mut dot = E::ZERO;
                    for (j, (dy, dx)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                        let ny = y as isize + dy;
                        let nx = x as isize + dx;
                        if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            continue;
                        }
                        let ncell = (bi * h + ny as usize) * w + nx as usize;
                        let vv = &v[ncell * c + head * dh..ncell * c + (head + 1) * dh];
                        let mut acc = E::ZERO;
                        for (&a, &bb) in dout.iter().zip(vv) {
                            acc = acc + a * bb;
                        }
                        dp[j] = acc;
                        dot = dot + probs[pbase + j] * acc;
                    }
                    let dqrow = &mut dq[cell * c + head * dh..cell * c + (head + 1) * dh];
                    for (j, (dy, dx)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                        let p = probs[pbase + j];
                        if p == E::ZERO && dp[j] == E::ZERO {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        d_scores[pbase + j] = ds;
                        let ny = y as isize + dy;
                        let nx = x as isize + dx;
                        if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            continue;
                        }
                        let ncell = (bi * h + ny as usize) * w + nx as usize;
                        let kv = &k[ncell * c + head * dh..ncell * c + (head + 1) * dh];
                        for (o, &kvv) in dqrow.iter_mut().zip(kv) {
                            *o = *o + ds * kvv;
                        }
                    }
                }
            }
        }
    }

    // Sweep 2: for each cell j, gather contributions from the cells i whose
    // neighborhood contains j (offset symmetry: i = j - offset).
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let cell = (bi * h + y) * w + x;
                for head in 0..heads {
                    let dkrow_base = cell * c + head * dh;
                    for (j, (dy, dx)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                        let iy = y as isize - dy;
                        let ix = x as isize - dx;
                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let icell = (bi * h + iy as usize) * w + ix as usize;
                        let pbase = (icell * heads + head) * 9;
                        let ds = d_scores[pbase + j];
                        let p = probs[pbase + j];
                        if ds != E::ZERO {
                            let qrow = &q[icell * c + head * dh..icell * c + (head + 1) * dh];
                            for (o, &qv) in dk[dkrow_base..dkrow_base + dh].iter_mut().zip(qrow) {
                                *o = *o + ds * qv;
                            }
                        }
                        if p != E::ZERO {
                            let dout = &d_out[icell * c + head * dh..icell * c + (head + 1) * dh];
                            for (o, &dv_) in dv[dkrow_base..dkrow_base + dh].iter_mut().zip(dout) {
                                *o = *o + p * dv_;
                            }
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
