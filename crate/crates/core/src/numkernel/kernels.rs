//! Eager forward/backward kernels shared by the tape and by tape-free inference.

use super::tensor::{AttnMask, Tensor};
use crate::error::{Error, Result};

/// Score substituted for masked positions before the softmax.
pub const MASKED_SCORE: f32 = -1e9;

const LN_EPS: f64 = 1e-5;

/// Branch-free `exp` for f32 with ~1 ulp error on the range used by softmax.
/// Written so the compiler can vectorise loops over it.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Adding 1.5 * 2^23 rounds to the nearest integer and leaves it in the low mantissa bits.
    const SHIFT: f32 = 12_582_912.0;
    let underflow = x < -87.0;
    let x = x.clamp(-87.0, 88.0);
    let t = x * LOG2E + SHIFT;
    let n = t - SHIFT;
    let ni = t.to_bits().wrapping_sub(SHIFT.to_bits()) as i32;
    let r = x - n * LN2_HI - n * LN2_LO;
    // Taylor series to degree 7; |r| <= ln2 / 2.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let bits = ((ni + 127) as u32) << 23;
    let v = p * f32::from_bits(bits);
    if underflow {
        0.0
    } else {
        v
    }
}

/// Dot product with 16 independent partial sums.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 16];
    let chunks = a.len() / 16;
    for c in 0..chunks {
        let x = &a[c * 16..c * 16 + 16];
        let y = &b[c * 16..c * 16 + 16];
        for l in 0..16 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 16..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += Σ_c coeffs[c] · rows[c]` where `rows` holds `coeffs.len()`
/// consecutive rows of length `out.len()`. Four rows are fused per pass.
#[inline]
fn accumulate_rows(coeffs: &[f32], rows: &[f32], out: &mut [f32]) {
    let n = out.len();
    let mut chunks = coeffs.chunks_exact(4);
    let mut base = 0;
    for c in &mut chunks {
        let (a0, a1, a2, a3) = (c[0], c[1], c[2], c[3]);
        let r = &rows[base..base + 4 * n];
        let (r0, r) = r.split_at(n);
        let (r1, r) = r.split_at(n);
        let (r2, r3) = r.split_at(n);
        for ((((o, x0), x1), x2), x3) in out.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
            *o += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
        }
        base += 4 * n;
    }
    for a in chunks.remainder() {
        axpy(*a, &rows[base..base + n], out);
        base += n;
    }
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        })
    }
}

/// `a[m,k] · b[k,n]`. Each output row depends only on the matching row of `a`
/// and is accumulated in the same order regardless of `m`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_2d("matmul", a)?;
    check_2d("matmul", b)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    if n > 0 {
        for (arow, orow) in ad.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)) {
            accumulate_rows(&arow[..k], bd, orow);
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// `aᵀ · g` for `a[m,k]`, `g[m,n]`.
pub fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = g.cols();
    let mut out = vec![0.0f32; k * n];
    let (ad, gd) = (a.data(), g.data());
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = ad[i * k + kk];
            if aik != 0.0 {
                axpy(aik, grow, &mut out[kk * n..(kk + 1) * n]);
            }
        }
    }
    Tensor::matrix(k, n, out)
}

/// `g · bᵀ` for `g[m,n]`, `b[k,n]`.
pub fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let bt = b.transpose();
    matmul(g, &bt).expect("matmul_nt shapes")
}

/// Maximum with 16 independent lanes so the reduction vectorises.
#[inline]
fn row_max(row: &[f32]) -> f32 {
    let mut acc = [f32::NEG_INFINITY; 16];
    let mut chunks = row.chunks_exact(16);
    for c in &mut chunks {
        for l in 0..16 {
            acc[l] = if c[l] > acc[l] { c[l] } else { acc[l] };
        }
    }
    let mut m = chunks.remainder().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for a in acc {
        m = m.max(a);
    }
    m
}

/// In-place masked softmax of one row. Masked entries get `MASKED_SCORE`
/// before normalisation and are forced to exactly zero afterwards.
pub fn softmax_row(row: &mut [f32], allowed: Option<&[bool]>) -> Result<()> {
    if let Some(a) = allowed {
        debug_assert_eq!(a.len(), row.len());
        if !a.iter().any(|x| *x) {
            return Err(Error::AllMasked("softmax"));
        }
        for (r, ok) in row.iter_mut().zip(a) {
            if !ok {
                *r = MASKED_SCORE;
            }
        }
    } else if row.is_empty() {
        return Err(Error::AllMasked("softmax"));
    }
    let max = row_max(row);
    for r in row.iter_mut() {
        *r = exp_f32(*r - max);
    }
    if let Some(a) = allowed {
        for (r, ok) in row.iter_mut().zip(a) {
            if !ok {
                *r = 0.0;
            }
        }
    }
    let mut acc = [0.0f32; 16];
    let chunks = row.len() / 16;
    for c in 0..chunks {
        for l in 0..16 {
            acc[l] += row[c * 16 + l];
        }
    }
    let mut sum: f32 = acc.iter().sum();
    for r in &row[chunks * 16..] {
        sum += r;
    }
    let inv = 1.0 / sum;
    for r in row.iter_mut() {
        *r *= inv;
    }
    Ok(())
}

/// Softmax along the last axis, with the same key mask applied to every row.
pub fn masked_softmax(scores: &Tensor, mask: &AttnMask) -> Result<Tensor> {
    if scores.cols() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "masked_softmax",
            lhs: scores.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let mut out = scores.clone();
    for i in 0..out.rows() {
        softmax_row(out.row_mut(i), Some(mask.allowed()))?;
    }
    Ok(out)
}

pub fn masked_softmax_backward(probs: &Tensor, dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(probs.shape());
    for i in 0..probs.rows() {
        let p = probs.row(i);
        let g = dout.row(i);
        let s: f64 = p.iter().zip(g).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let s = s as f32;
        for (d, (pj, gj)) in dx.row_mut(i).iter_mut().zip(p.iter().zip(g)) {
            *d = pj * (gj - s);
        }
    }
    dx
}

fn attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    let (m, d) = (q.rows(), q.cols());
    let n = k.rows();
    let dv = v.cols();
    if k.cols() != d || v.rows() != n || heads == 0 || !d.is_multiple_of(heads) || !dv.is_multiple_of(heads) {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    Ok((m, n, d, dv))
}

/// Multi-head scaled dot-product attention over already-projected inputs.
/// Returns the output `[m, dv]` and the attention weights `[heads, m, n]`.
pub fn mha_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<(Tensor, Vec<f32>)> {
    let mut probs = Vec::new();
    let out = mha_impl(q, k, v, heads, mask, Some(&mut probs))?;
    Ok((out, probs))
}

/// [`mha_forward`] without keeping the attention weights.
pub fn mha_infer(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&AttnMask>) -> Result<Tensor> {
    mha_impl(q, k, v, heads, mask, None)
}

fn mha_impl(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&AttnMask>,
    mut keep: Option<&mut Vec<f32>>,
) -> Result<Tensor> {
    let (m, n, d, dv) = attention_shapes(q, k, v, heads)?;
    if let Some(mk) = mask {
        if mk.len() != n {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: vec![n],
                rhs: vec![mk.len()],
            });
        }
    }
    if n == 0 {
        return Err(Error::AllMasked("attention"));
    }
    let allowed = mask.map(|mk| mk.allowed());
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; m * dv];
    let mut row = vec![0.0f32; n];
    if let Some(p) = keep.as_deref_mut() {
        p.clear();
        p.resize(heads * m * n, 0.0);
    }
    let mut kt = vec![0.0f32; dh * n];
    let mut vt = vec![0.0f32; dvh * n];
    let mut qs = vec![0.0f32; dh];
    for h in 0..heads {
        for j in 0..n {
            for c in 0..dh {
                kt[c * n + j] = kd[j * d + h * dh + c];
            }
            for c in 0..dvh {
                vt[c * n + j] = vd[j * dv + h * dvh + c];
            }
        }
        for i in 0..m {
            let p: &mut [f32] = match keep.as_deref_mut() {
                Some(all) => &mut all[(h * m + i) * n..(h * m + i + 1) * n],
                None => {
                    row.fill(0.0);
                    &mut row
                }
            };
            for (s, q) in qs.iter_mut().zip(&qd[i * d + h * dh..i * d + (h + 1) * dh]) {
                *s = q * scale;
            }
            accumulate_rows(&qs, &kt, p);
            softmax_row(p, allowed)?;
            // Masked weights are exactly zero, so they add nothing here.
            let orow = &mut out[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            for (c, o) in orow.iter_mut().enumerate() {
                *o = dot(p, &vt[c * n..(c + 1) * n]);
            }
        }
    }
    Ok(Tensor::matrix(m, dv, out))
}

pub fn mha_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f32],
    mask: Option<&AttnMask>,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (m, d) = (q.rows(), q.cols());
    let n = k.rows();
    let dv = v.cols();
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let allowed = mask.map(|mk| mk.allowed());
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dout.data());
    let mut dq = vec![0.0f32; m * d];
    let mut dk = vec![0.0f32; n * d];
    let mut dvv = vec![0.0f32; n * dv];
    let mut vt = vec![0.0f32; dvh * n];
    let mut da = vec![0.0f32; n];
    for h in 0..heads {
        for j in 0..n {
            for c in 0..dvh {
                vt[c * n + j] = vd[j * dv + h * dvh + c];
            }
        }
        for i in 0..m {
            let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
            let grow = &gd[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            da.fill(0.0);
            for c in 0..dvh {
                axpy(grow[c], &vt[c * n..(c + 1) * n], &mut da);
            }
            let s: f64 = p.iter().zip(&da).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let s = s as f32;
            let qrow = &qd[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n {
                if !allowed.is_none_or(|a| a[j]) {
                    continue;
                }
                let pj = p[j];
                axpy(pj, grow, &mut dvv[j * dv + h * dvh..j * dv + (h + 1) * dvh]);
                let ds = pj * (da[j] - s) * scale;
                if ds != 0.0 {
                    axpy(
                        ds,
                        &kd[j * d + h * dh..j * d + (h + 1) * dh],
                        &mut dq[i * d + h * dh..i * d + (h + 1) * dh],
                    );
                    axpy(ds, qrow, &mut dk[j * d + h * dh..j * d + (h + 1) * dh]);
                }
            }
        }
    }
    (
        Tensor::matrix(m, d, dq),
        Tensor::matrix(n, d, dk),
        Tensor::matrix(n, dv, dvv),
    )
}

/// Single-head attention `o = Σ α_i u_i`, `α = masked_softmax(q·k_i/√d)`.
/// `q` may be a vector `[d]` or a batch of queries `[m, d]`.
pub fn attention(q: &Tensor, keys: &Tensor, values: &Tensor, mask: &AttnMask) -> Result<Tensor> {
    let vector = q.shape().len() == 1;
    let q2 = if vector {
        q.clone().reshape(&[1, q.len()])?
    } else {
        q.clone()
    };
    let out = mha_infer(&q2, keys, values, 1, Some(mask))?;
    if vector {
        let dv = out.cols();
        out.reshape(&[dv])
    } else {
        Ok(out)
    }
}

/// Cached intermediates of a feature-attention evaluation.
pub struct FeatureAttnCache {
    pub probs: Vec<f32>,
    pub query: Vec<f32>,
}

/// Per-step attention over the variable embeddings of that step.
///
/// `e` is `[steps, vars, d]`. The query of a step is the sum (or mean) of the
/// embeddings of present variables; keys and values are the embeddings
/// themselves. Absent variables get weight exactly zero.
pub fn feature_attention_forward(e: &Tensor, present: &[bool], mean: bool) -> Result<(Tensor, FeatureAttnCache)> {
    let shape = e.shape();
    if shape.len() != 3 || shape[1] != present.len() {
        return Err(Error::ShapeMismatch {
            op: "feature_attention",
            lhs: shape.to_vec(),
            rhs: vec![present.len()],
        });
    }
    let (s_len, nv, d) = (shape[0], shape[1], shape[2]);
    let count = present.iter().filter(|p| **p).count();
    if count == 0 {
        return Err(Error::AllMasked("feature_attention"));
    }
    let qscale = if mean { 1.0 / count as f32 } else { 1.0 };
    let scale = 1.0 / (d as f32).sqrt();
    let ed = e.data();
    let mut out = vec![0.0f32; s_len * d];
    let mut probs = vec![0.0f32; s_len * nv];
    let mut query = vec![0.0f32; s_len * d];
    for s in 0..s_len {
        let q = &mut query[s * d..(s + 1) * d];
        for v in 0..nv {
            if present[v] {
                axpy(qscale, &ed[(s * nv + v) * d..(s * nv + v + 1) * d], q);
            }
        }
        let p = &mut probs[s * nv..(s + 1) * nv];
        for v in 0..nv {
            p[v] = dot(q, &ed[(s * nv + v) * d..(s * nv + v + 1) * d]) * scale;
        }
        softmax_row(p, Some(present))?;
        let orow = &mut out[s * d..(s + 1) * d];
        for v in 0..nv {
            if present[v] {
                axpy(p[v], &ed[(s * nv + v) * d..(s * nv + v + 1) * d], orow);
            }
        }
    }
    Ok((Tensor::matrix(s_len, d, out), FeatureAttnCache { probs, query }))
}

pub fn feature_attention_backward(
    e: &Tensor,
    present: &[bool],
    mean: bool,
    cache: &FeatureAttnCache,
    dout: &Tensor,
) -> Tensor {
    let shape = e.shape();
    let (s_len, nv, d) = (shape[0], shape[1], shape[2]);
    let count = present.iter().filter(|p| **p).count();
    let qscale = if mean { 1.0 / count as f32 } else { 1.0 };
    let scale = 1.0 / (d as f32).sqrt();
    let ed = e.data();
    let gd = dout.data();
    let mut de = vec![0.0f32; e.len()];
    let mut dalpha = vec![0.0f32; nv];
    let mut dq = vec![0.0f32; d];
    for s in 0..s_len {
        let g = &gd[s * d..(s + 1) * d];
        let p = &cache.probs[s * nv..(s + 1) * nv];
        let q = &cache.query[s * d..(s + 1) * d];
        for v in 0..nv {
            dalpha[v] = if present[v] {
                dot(g, &ed[(s * nv + v) * d..(s * nv + v + 1) * d])
            } else {
                0.0
            };
        }
        let sum: f32 = p.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
        dq.fill(0.0);
        for v in 0..nv {
            if !present[v] {
                continue;
            }
            let ev = &ed[(s * nv + v) * d..(s * nv + v + 1) * d];
            let dev = &mut de[(s * nv + v) * d..(s * nv + v + 1) * d];
            axpy(p[v], g, dev);
            let ds = p[v] * (dalpha[v] - sum) * scale;
            axpy(ds, q, dev);
            axpy(ds, ev, &mut dq);
        }
        for v in 0..nv {
            if present[v] {
                axpy(qscale, &dq, &mut de[(s * nv + v) * d..(s * nv + v + 1) * d]);
            }
        }
    }
    Tensor::new(shape.to_vec(), de).expect("feature attention grad shape")
}

pub struct LayerNormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Row-wise layer normalisation with learned gain and bias.
pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let (r, c) = (x.rows(), x.cols());
    if gain.len() != c || bias.len() != c {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut y = vec![0.0f32; r * c];
    let mut xhat = vec![0.0f32; r * c];
    let mut inv_std = vec![0.0f32; r];
    let (g, b) = (gain.data(), bias.data());
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().map(|v| *v as f64).sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv as f32;
        for j in 0..c {
            let h = ((row[j] as f64 - mean) * inv) as f32;
            xhat[i * c + j] = h;
            y[i * c + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(gain: &Tensor, cache: &LayerNormCache, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (r, c) = (dy.rows(), dy.cols());
    let g = gain.data();
    let mut dx = vec![0.0f32; r * c];
    let mut dg = vec![0.0f32; c];
    let mut db = vec![0.0f32; c];
    let mut dxhat = vec![0.0f32; c];
    for i in 0..r {
        let dyr = dy.row(i);
        let xh = &cache.xhat[i * c..(i + 1) * c];
        let mut s1 = 0.0f64;
        let mut s2 = 0.0f64;
        for j in 0..c {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            s1 += dxhat[j] as f64;
            s2 += (dxhat[j] * xh[j]) as f64;
        }
        let inv = cache.inv_std[i] as f64;
        let n = c as f64;
        for j in 0..c {
            dx[i * c + j] = (inv / n * (n * dxhat[j] as f64 - s1 - xh[j] as f64 * s2)) as f32;
        }
    }
    (
        Tensor::new(dy.shape().to_vec(), dx).expect("ln dx"),
        Tensor::new(gain.shape().to_vec(), dg).expect("ln dg"),
        Tensor::new(gain.shape().to_vec(), db).expect("ln db"),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a bias vector to every row.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = a.cols();
    if bias.len() != c {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    let b = bias.data();
    for i in 0..out.rows() {
        for (o, bb) in out.row_mut(i).iter_mut().zip(b) {
            *o += bb;
        }
    }
    Ok(out)
}

pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|x| x.max(0.0)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("relu shape")
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    let data = a.data().iter().map(|x| x * s).collect();
    Tensor::new(a.shape().to_vec(), data).expect("scale shape")
}

/// Rows of `table` selected by `idx`.
pub fn gather_rows(table: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = table.rows();
    if let Some(bad) = idx.iter().find(|i| **i >= n) {
        return Err(Error::invalid(format!("gather index {bad} out of range {n}")));
    }
    Ok(table.select_rows(idx))
}

/// Stacks `vars` tensors of shape `[s, d]` into `[s, vars, d]`.
pub fn stack_vars(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
    let (s, d) = (first.rows(), first.cols());
    for p in parts {
        if p.rows() != s || p.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let nv = parts.len();
    let mut data = vec![0.0f32; s * nv * d];
    for (v, p) in parts.iter().enumerate() {
        for i in 0..s {
            data[(i * nv + v) * d..(i * nv + v + 1) * d].copy_from_slice(p.row(i));
        }
    }
    Tensor::new(vec![s, nv, d], data)
}
