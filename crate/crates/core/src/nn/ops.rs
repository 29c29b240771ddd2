use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::kernels::{gemm, Mat};
use crate::nn::{GradStore, Mode, Tape, Tensor, Var};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn rank(tape: &Tape, op: &'static str, x: Var, r: usize) -> Result<()> {
    if tape.shape(x).len() != r {
        return Err(Error::Shape {
            op,
            lhs: tape.shape(x).to_vec(),
            rhs: vec![0; r],
        });
    }
    Ok(())
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "add", a, b)?;
    let out: Vec<f64> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| x + y)
        .collect();
    let shape = tape.shape(a).to_vec();
    Ok(tape.push(Tensor::new(shape, out)?, &[a, b], move |g, _, grads| {
        for v in [a, b] {
            if grads.wants(v) {
                for (d, gi) in grads.slot(v).iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
    }))
}

pub fn scale(tape: &mut Tape, x: Var, s: f64) -> Var {
    let mut value = tape.value(x).clone();
    value.data_mut().iter_mut().for_each(|v| *v *= s);
    tape.push(value, &[x], move |g, _, grads| {
        for (d, gi) in grads.slot(x).iter_mut().zip(g) {
            *d += s * gi;
        }
    })
}

/// Elementwise product with a constant array of the same length.
pub fn mul_const(tape: &mut Tape, x: Var, factors: Vec<f64>) -> Result<Var> {
    if factors.len() != tape.value(x).len() {
        return Err(Error::Shape {
            op: "mul_const",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![factors.len()],
        });
    }
    let mut value = tape.value(x).clone();
    value
        .data_mut()
        .iter_mut()
        .zip(&factors)
        .for_each(|(v, f)| *v *= f);
    Ok(tape.push(value, &[x], move |g, _, grads| {
        for ((d, gi), f) in grads.slot(x).iter_mut().zip(g).zip(&factors) {
            *d += gi * f;
        }
    }))
}

/// `sum_i weights[i] * x[i]` as a scalar.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: Vec<f64>) -> Result<Var> {
    if weights.len() != tape.value(x).len() {
        return Err(Error::Shape {
            op: "weighted_sum",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![weights.len()],
        });
    }
    let s: f64 = tape
        .value(x)
        .data()
        .iter()
        .zip(&weights)
        .map(|(a, b)| a * b)
        .sum();
    Ok(tape.push(Tensor::scalar(s), &[x], move |g, _, grads| {
        for (d, w) in grads.slot(x).iter_mut().zip(&weights) {
            *d += g[0] * w;
        }
    }))
}

pub fn mean_all(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len().max(1) as f64;
    let weights = vec![1.0 / n; tape.value(x).len()];
    weighted_sum(tape, x, weights).expect("weights sized from input")
}

pub fn reshape(tape: &mut Tape, x: Var, shape: Vec<usize>) -> Result<Var> {
    let value = tape.value(x).clone().reshape(shape)?;
    Ok(tape.push(value, &[x], move |g, _, grads| {
        for (d, gi) in grads.slot(x).iter_mut().zip(g) {
            *d += gi;
        }
    }))
}

/// Standard normal CDF.
pub fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * phi_cdf(x)
}

pub fn gelu(tape: &mut Tape, x: Var) -> Var {
    let mut value = tape.value(x).clone();
    value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = gelu_scalar(*v));
    tape.push(value, &[x], move |g, vals, grads| {
        let xs = vals[x.index()].data();
        for ((d, gi), &xi) in grads.slot(x).iter_mut().zip(g).zip(xs) {
            let pdf = INV_SQRT_2PI * (-0.5 * xi * xi).exp();
            *d += gi * (phi_cdf(xi) + xi * pdf);
        }
    })
}

/// `x[..., in] * weight[out, in]^T + bias[out]`.
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    let in_dim = *xs.last().unwrap_or(&0);
    if ws.len() != 2 || ws[1] != in_dim || in_dim == 0 {
        return Err(Error::Shape {
            op: "linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let out_dim = ws[0];
    if let Some(b) = bias {
        if tape.shape(b) != [out_dim] {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: ws,
                rhs: tape.shape(b).to_vec(),
            });
        }
    }
    let rows = tape.value(x).len() / in_dim;
    let mut out = vec![0.0; rows * out_dim];
    gemm(
        rows,
        in_dim,
        out_dim,
        1.0,
        Mat::rows(tape.value(x).data(), 0, in_dim),
        Mat::rows_t(tape.value(weight).data(), 0, in_dim),
        0.0,
        &mut out,
        0,
        out_dim,
    );
    if let Some(b) = bias {
        let bv = tape.value(b).data();
        for row in out.chunks_mut(out_dim) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
    }
    let mut shape = xs;
    *shape.last_mut().unwrap() = out_dim;
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(tape.push(Tensor::new(shape, out)?, &parents, move |g, vals, grads| {
        if grads.wants(x) {
            let w = vals[weight.index()].data();
            gemm(
                rows,
                out_dim,
                in_dim,
                1.0,
                Mat::rows(g, 0, out_dim),
                Mat::rows(w, 0, in_dim),
                1.0,
                grads.slot(x),
                0,
                in_dim,
            );
        }
        if grads.wants(weight) {
            let xv = vals[x.index()].data();
            gemm(
                out_dim,
                rows,
                in_dim,
                1.0,
                Mat::rows_t(g, 0, out_dim),
                Mat::rows(xv, 0, in_dim),
                1.0,
                grads.slot(weight),
                0,
                in_dim,
            );
        }
        if let Some(b) = bias {
            if grads.wants(b) {
                let db = grads.slot(b);
                for row in g.chunks(out_dim) {
                    db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                }
            }
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

pub fn conv_output_length(length: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let padded = length + 2 * spec.padding;
    if spec.stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / spec.stride + 1)
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    len_out: usize,
    kernel: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn im2col(&self, x: &[f64], b: usize, g: usize, cols: &mut [f64]) {
        let ConvGeom {
            c_in,
            len,
            len_out,
            kernel,
            cin_g,
            spec,
            ..
        } = *self;
        for c in 0..cin_g {
            let xrow = &x[(b * c_in + g * cin_g + c) * len..][..len];
            for k in 0..kernel {
                let row = &mut cols[(c * kernel + k) * len_out..][..len_out];
                for (t, r) in row.iter_mut().enumerate() {
                    let pos = t * spec.stride + k;
                    *r = if pos >= spec.padding && pos - spec.padding < len {
                        xrow[pos - spec.padding]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], b: usize, g: usize, dx: &mut [f64]) {
        let ConvGeom {
            c_in,
            len,
            len_out,
            kernel,
            cin_g,
            spec,
            ..
        } = *self;
        for c in 0..cin_g {
            let xrow = &mut dx[(b * c_in + g * cin_g + c) * len..][..len];
            for k in 0..kernel {
                let row = &cols[(c * kernel + k) * len_out..][..len_out];
                for (t, r) in row.iter().enumerate() {
                    let pos = t * spec.stride + k;
                    if pos >= spec.padding && pos - spec.padding < len {
                        xrow[pos - spec.padding] += r;
                    }
                }
            }
        }
    }
}

/// Grouped 1-D cross-correlation over `[batch, channels, length]`.
pub fn conv1d(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    spec: ConvSpec,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    let mismatch = || Error::Shape {
        op: "conv1d",
        lhs: xs.clone(),
        rhs: ws.clone(),
    };
    if xs.len() != 3 || ws.len() != 3 || spec.groups == 0 {
        return Err(mismatch());
    }
    let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
    let (c_out, cin_g, kernel) = (ws[0], ws[1], ws[2]);
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 || cin_g * spec.groups != c_in {
        return Err(mismatch());
    }
    let len_out = conv_output_length(len, kernel, spec).ok_or_else(mismatch)?;
    if let Some(b) = bias {
        if tape.shape(b) != [c_out] {
            return Err(mismatch());
        }
    }
    let geom = ConvGeom {
        batch,
        c_in,
        c_out,
        len,
        len_out,
        kernel,
        cin_g,
        cout_g: c_out / spec.groups,
        spec,
    };
    let ck = cin_g * kernel;
    let mut out = vec![0.0; batch * c_out * len_out];
    let mut cols = vec![0.0; ck * len_out];
    {
        let xv = tape.value(x).data();
        let wv = tape.value(weight).data();
        for b in 0..batch {
            for g in 0..spec.groups {
                geom.im2col(xv, b, g, &mut cols);
                gemm(
                    geom.cout_g,
                    ck,
                    len_out,
                    1.0,
                    Mat::rows(wv, g * geom.cout_g * ck, ck),
                    Mat::rows(&cols, 0, len_out),
                    0.0,
                    &mut out,
                    (b * c_out + g * geom.cout_g) * len_out,
                    len_out,
                );
            }
        }
        if let Some(bv) = bias {
            let bv = tape.value(bv).data();
            for (i, row) in out.chunks_mut(len_out).enumerate() {
                let bias = bv[i % c_out];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    let mut parents = vec![x, weight];
    parents.extend(bias);
    let value = Tensor::new(vec![batch, c_out, len_out], out)?;
    Ok(tape.push(value, &parents, move |g, vals, grads| {
        let xv = vals[x.index()].data();
        let wv = vals[weight.index()].data();
        let cout_g = geom.cout_g;
        if grads.wants(weight) {
            let mut cols = vec![0.0; ck * len_out];
            let dw = grads.slot(weight);
            for b in 0..geom.batch {
                for grp in 0..spec.groups {
                    geom.im2col(xv, b, grp, &mut cols);
                    gemm(
                        cout_g,
                        len_out,
                        ck,
                        1.0,
                        Mat::rows(g, (b * geom.c_out + grp * cout_g) * len_out, len_out),
                        Mat::rows_t(&cols, 0, len_out),
                        1.0,
                        dw,
                        grp * cout_g * ck,
                        ck,
                    );
                }
            }
        }
        if grads.wants(x) {
            let mut dcols = vec![0.0; ck * len_out];
            let dx = grads.slot(x);
            for b in 0..geom.batch {
                for grp in 0..spec.groups {
                    gemm(
                        ck,
                        cout_g,
                        len_out,
                        1.0,
                        Mat::rows_t(wv, grp * cout_g * ck, ck),
                        Mat::rows(g, (b * geom.c_out + grp * cout_g) * len_out, len_out),
                        0.0,
                        &mut dcols,
                        0,
                        len_out,
                    );
                    geom.col2im_add(&dcols, b, grp, dx);
                }
            }
        }
        if let Some(bv) = bias {
            if grads.wants(bv) {
                let db = grads.slot(bv);
                for (i, row) in g.chunks(len_out).enumerate() {
                    db[i % geom.c_out] += row.iter().sum::<f64>();
                }
            }
        }
    }))
}

/// Normalises contiguous blocks of `block` values, then applies a per-channel
/// affine where channel `c` covers `channel_len` consecutive values.
fn normalize_blocks(
    tape: &mut Tape,
    x: Var,
    block: usize,
    channel_len: usize,
    gain: Var,
    offset: Var,
    eps: f64,
) -> Var {
    let xv = tape.value(x).data();
    let channels = tape.value(gain).len();
    let gv = tape.value(gain).data();
    let ov = tape.value(offset).data();
    let mut xhat = vec![0.0; xv.len()];
    let mut inv_std = Vec::with_capacity(xv.len() / block);
    for (xb, hb) in xv.chunks(block).zip(xhat.chunks_mut(block)) {
        let n = block as f64;
        let mean = xb.iter().sum::<f64>() / n;
        let var = xb.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        hb.iter_mut()
            .zip(xb)
            .for_each(|(h, v)| *h = (v - mean) * is);
    }
    let out: Vec<f64> = xhat
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let c = (i / channel_len) % channels;
            h * gv[c] + ov[c]
        })
        .collect();
    let shape = tape.shape(x).to_vec();
    let value = Tensor::new(shape, out).expect("shape preserved");
    tape.push(value, &[x, gain, offset], move |g, vals, grads| {
        let gv = vals[gain.index()].data();
        let chan = |i: usize| (i / channel_len) % channels;
        if grads.wants(gain) {
            let dg = grads.slot(gain);
            for (i, (gi, h)) in g.iter().zip(&xhat).enumerate() {
                dg[chan(i)] += gi * h;
            }
        }
        if grads.wants(offset) {
            let db = grads.slot(offset);
            for (i, gi) in g.iter().enumerate() {
                db[chan(i)] += gi;
            }
        }
        if grads.wants(x) {
            let dx = grads.slot(x);
            let n = block as f64;
            for (bi, is) in inv_std.iter().enumerate() {
                let base = bi * block;
                let mut sum_d = 0.0;
                let mut sum_dh = 0.0;
                for i in base..base + block {
                    let d = g[i] * gv[chan(i)];
                    sum_d += d;
                    sum_dh += d * xhat[i];
                }
                let (md, mdh) = (sum_d / n, sum_dh / n);
                for i in base..base + block {
                    let d = g[i] * gv[chan(i)];
                    dx[i] += is * (d - md - xhat[i] * mdh);
                }
            }
        }
    })
}

/// Normalises each vector along the last dimension, then applies `gain` and
/// `offset`.
pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
    let dim = *tape.shape(x).last().unwrap_or(&0);
    if dim == 0 || tape.shape(gain) != [dim] || tape.shape(offset) != [dim] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(gain).to_vec(),
        });
    }
    Ok(normalize_blocks(tape, x, dim, 1, gain, offset, eps))
}

/// Group normalisation over `[batch, channels, length]`; statistics are taken
/// per batch item and channel group.
pub fn group_norm(
    tape: &mut Tape,
    x: Var,
    groups: usize,
    gain: Var,
    offset: Var,
    eps: f64,
) -> Result<Var> {
    rank(tape, "group_norm", x, 3)?;
    let (channels, len) = (tape.shape(x)[1], tape.shape(x)[2]);
    if groups == 0 || channels % groups != 0 {
        return Err(Error::invalid(format!(
            "group_norm: {channels} channels not divisible into {groups} groups"
        )));
    }
    if tape.shape(gain) != [channels] || tape.shape(offset) != [channels] {
        return Err(Error::Shape {
            op: "group_norm",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(gain).to_vec(),
        });
    }
    let block = channels / groups * len;
    Ok(normalize_blocks(tape, x, block, len, gain, offset, eps))
}

/// Per-head scaled dot-product attention over `[batch, time, dim]` inputs.
///
/// Keys at positions `>= valid_lengths[b]` get a score of minus infinity.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    valid_lengths: Option<&[usize]>,
) -> Result<Var> {
    rank(tape, "attention", q, 3)?;
    same_shape(tape, "attention", q, k)?;
    same_shape(tape, "attention", q, v)?;
    let shape = tape.shape(q).to_vec();
    let (batch, time, dim) = (shape[0], shape[1], shape[2]);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::invalid(format!(
            "attention: dim {dim} not divisible by {heads} heads"
        )));
    }
    let valid: Vec<usize> = match valid_lengths {
        Some(v) if v.len() != batch => {
            return Err(Error::invalid("attention: one valid length per item"))
        }
        Some(v) => v.iter().map(|&l| l.min(time)).collect(),
        None => vec![time; batch],
    };
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let tt = time * time;
    let mut probs = vec![0.0; batch * heads * tt];
    let mut out = vec![0.0; batch * time * dim];
    {
        let (qv, kv, vv) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
        for b in 0..batch {
            for h in 0..heads {
                let off = b * time * dim + h * dh;
                let p = &mut probs[(b * heads + h) * tt..][..tt];
                gemm(
                    time,
                    dh,
                    time,
                    scale,
                    Mat::strided(qv, off, dim, 1),
                    Mat::strided(kv, off, 1, dim),
                    0.0,
                    p,
                    0,
                    time,
                );
                for row in p.chunks_mut(time) {
                    softmax_prefix(row, valid[b]);
                }
                gemm(
                    time,
                    time,
                    dh,
                    1.0,
                    Mat::rows(p, 0, time),
                    Mat::strided(vv, off, dim, 1),
                    0.0,
                    &mut out,
                    off,
                    dim,
                );
            }
        }
    }
    let value = Tensor::new(shape, out)?;
    Ok(tape.push(value, &[q, k, v], move |g, vals, grads| {
        let (qv, kv, vv) = (
            vals[q.index()].data(),
            vals[k.index()].data(),
            vals[v.index()].data(),
        );
        let mut ds = vec![0.0; batch * heads * tt];
        let mut dp = vec![0.0; tt];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * time * dim + h * dh;
                let p = &probs[(b * heads + h) * tt..][..tt];
                gemm(
                    time,
                    dh,
                    time,
                    1.0,
                    Mat::strided(g, off, dim, 1),
                    Mat::strided(vv, off, 1, dim),
                    0.0,
                    &mut dp,
                    0,
                    time,
                );
                let dsb = &mut ds[(b * heads + h) * tt..][..tt];
                for ((pr, dpr), dsr) in p
                    .chunks(time)
                    .zip(dp.chunks(time))
                    .zip(dsb.chunks_mut(time))
                {
                    let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for ((d, pi), dpi) in dsr.iter_mut().zip(pr).zip(dpr) {
                        *d = pi * (dpi - dot);
                    }
                }
            }
        }
        let each_head = |f: &mut dyn FnMut(usize, usize, usize)| {
            for b in 0..batch {
                for h in 0..heads {
                    f(b * time * dim + h * dh, (b * heads + h) * tt, 0);
                }
            }
        };
        if grads.wants(v) {
            let dv = grads.slot(v);
            each_head(&mut |off, poff, _| {
                gemm(
                    time,
                    time,
                    dh,
                    1.0,
                    Mat::rows_t(&probs, poff, time),
                    Mat::strided(g, off, dim, 1),
                    1.0,
                    dv,
                    off,
                    dim,
                )
            });
        }
        if grads.wants(q) {
            let dq = grads.slot(q);
            each_head(&mut |off, poff, _| {
                gemm(
                    time,
                    time,
                    dh,
                    scale,
                    Mat::rows(&ds, poff, time),
                    Mat::strided(kv, off, dim, 1),
                    1.0,
                    dq,
                    off,
                    dim,
                )
            });
        }
        if grads.wants(k) {
            let dk = grads.slot(k);
            each_head(&mut |off, poff, _| {
                gemm(
                    time,
                    time,
                    dh,
                    scale,
                    Mat::rows_t(&ds, poff, time),
                    Mat::strided(qv, off, dim, 1),
                    1.0,
                    dk,
                    off,
                    dim,
                )
            });
        }
    }))
}

/// In-place softmax over `row[..valid]`; the remainder is set to zero.
fn softmax_prefix(row: &mut [f64], valid: usize) {
    let (live, dead) = row.split_at_mut(valid);
    dead.iter_mut().for_each(|v| *v = 0.0);
    if live.is_empty() {
        return;
    }
    let max = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    live.iter_mut().for_each(|v| *v /= sum);
}

/// Projection parameters of one self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q_weight: Var,
    pub q_bias: Var,
    pub k_weight: Var,
    pub k_bias: Var,
    pub v_weight: Var,
    pub v_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

/// Query/key/value projections, per-head attention and the output projection.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    heads: usize,
    params: &AttentionParams,
    valid_lengths: Option<&[usize]>,
) -> Result<Var> {
    let q = linear(tape, x, params.q_weight, Some(params.q_bias))?;
    let k = linear(tape, x, params.k_weight, Some(params.k_bias))?;
    let v = linear(tape, x, params.v_weight, Some(params.v_bias))?;
    let att = scaled_dot_attention(tape, q, k, v, heads, valid_lengths)?;
    linear(tape, att, params.out_weight, Some(params.out_bias))
}

/// Inverted dropout: kept values are scaled by `1 / (1 - p)`.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    mul_const(tape, x, mask)
}

/// `[batch, a, b]` to `[batch, b, a]`.
pub fn transpose12(tape: &mut Tape, x: Var) -> Result<Var> {
    rank(tape, "transpose12", x, 3)?;
    let s = tape.shape(x).to_vec();
    let (batch, a, b) = (s[0], s[1], s[2]);
    let xv = tape.value(x).data();
    let mut out = vec![0.0; xv.len()];
    for n in 0..batch {
        let base = n * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = xv[base + i * b + j];
            }
        }
    }
    let value = Tensor::new(vec![batch, b, a], out)?;
    Ok(tape.push(value, &[x], move |g, _, grads| {
        let dx = grads.slot(x);
        for n in 0..batch {
            let base = n * a * b;
            for i in 0..a {
                for j in 0..b {
                    dx[base + i * b + j] += g[base + j * a + i];
                }
            }
        }
    }))
}

/// Keeps the first `len` entries of the last axis.
pub fn narrow_last(tape: &mut Tape, x: Var, len: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let last = *shape.last().unwrap_or(&0);
    if len > last {
        return Err(Error::Shape {
            op: "narrow_last",
            lhs: shape,
            rhs: vec![len],
        });
    }
    let xv = tape.value(x).data();
    let out: Vec<f64> = xv.chunks(last).flat_map(|r| r[..len].to_vec()).collect();
    let mut new_shape = shape;
    *new_shape.last_mut().unwrap() = len;
    let value = Tensor::new(new_shape, out)?;
    Ok(tape.push(value, &[x], move |g, _, grads| {
        let dx = grads.slot(x);
        for (dr, gr) in dx.chunks_mut(last).zip(g.chunks(len)) {
            dr[..len].iter_mut().zip(gr).for_each(|(d, gi)| *d += gi);
        }
    }))
}

/// Where a frame of a gathered sequence comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrameSource {
    /// Copy frame `time` of batch item `item`.
    Frame { item: usize, time: usize },
    /// A constant vector with every entry equal to the value.
    Const(f64),
}

/// Builds a new `[items, time, dim]` batch by copying frames out of `x` or
/// filling constants. Shorter plans are padded with zero frames.
pub fn gather_frames(tape: &mut Tape, x: Var, plan: &[Vec<FrameSource>]) -> Result<Var> {
    rank(tape, "gather_frames", x, 3)?;
    let s = tape.shape(x).to_vec();
    let (batch, time, dim) = (s[0], s[1], s[2]);
    for src in plan.iter().flatten() {
        if let FrameSource::Frame { item, time: t } = *src {
            if item >= batch || t >= time {
                return Err(Error::invalid(format!(
                    "gather_frames: frame ({item}, {t}) outside [{batch}, {time}]"
                )));
            }
        }
    }
    let out_time = plan.iter().map(Vec::len).max().unwrap_or(0);
    let plan: Vec<Vec<FrameSource>> = plan.to_vec();
    let xv = tape.value(x).data();
    let mut out = vec![0.0; plan.len() * out_time * dim];
    for (i, row) in plan.iter().enumerate() {
        for (t, src) in row.iter().enumerate() {
            let dst = &mut out[(i * out_time + t) * dim..][..dim];
            match *src {
                FrameSource::Frame { item, time: st } => {
                    dst.copy_from_slice(&xv[(item * time + st) * dim..][..dim])
                }
                FrameSource::Const(c) => dst.iter_mut().for_each(|v| *v = c),
            }
        }
    }
    let value = Tensor::new(vec![plan.len(), out_time, dim], out)?;
    Ok(tape.push(value, &[x], move |g, _, grads| {
        let dx = grads.slot(x);
        for (i, row) in plan.iter().enumerate() {
            for (t, src) in row.iter().enumerate() {
                if let FrameSource::Frame { item, time: st } = *src {
                    let gs = &g[(i * out_time + t) * dim..][..dim];
                    let ds = &mut dx[(item * time + st) * dim..][..dim];
                    ds.iter_mut().zip(gs).for_each(|(d, gi)| *d += gi);
                }
            }
        }
    }))
}

/// Stacks `a` over `b` along the leading axis.
pub fn concat_batch(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
        return Err(Error::Shape {
            op: "concat_batch",
            lhs: sa,
            rhs: sb,
        });
    }
    let split = tape.value(a).len();
    let mut data = tape.value(a).data().to_vec();
    data.extend_from_slice(tape.value(b).data());
    let mut shape = sa;
    shape[0] += sb[0];
    Ok(tape.push(Tensor::new(shape, data)?, &[a, b], move |g, _, grads| {
        accumulate(grads, a, &g[..split]);
        accumulate(grads, b, &g[split..]);
    }))
}

/// Stacks `[n_i, c, l_i]` tensors along the leading axis, zero-padding the
/// last axis to the longest input.
pub fn stack_padded(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let Some(&first) = parts.first() else {
        return Err(Error::invalid("stack_padded needs at least one input"));
    };
    let channels = tape.shape(first).get(1).copied().unwrap_or(0);
    for &v in parts {
        rank(tape, "stack_padded", v, 3)?;
        if tape.shape(v)[1] != channels {
            return Err(Error::Shape {
                op: "stack_padded",
                lhs: tape.shape(first).to_vec(),
                rhs: tape.shape(v).to_vec(),
            });
        }
    }
    let width = parts.iter().map(|&v| tape.shape(v)[2]).max().unwrap_or(0);
    let rows: usize = parts.iter().map(|&v| tape.shape(v)[0]).sum();
    let mut out = vec![0.0; rows * channels * width];
    let mut layout = Vec::with_capacity(parts.len());
    let mut row = 0;
    for &v in parts {
        let (n, len) = (tape.shape(v)[0], tape.shape(v)[2]);
        let src = tape.value(v).data();
        for r in 0..n * channels {
            out[(row * channels + r) * width..][..len].copy_from_slice(&src[r * len..][..len]);
        }
        layout.push((v, row, n, len));
        row += n;
    }
    let value = Tensor::new(vec![rows, channels, width], out)?;
    Ok(tape.push(value, parts, move |g, _, grads| {
        for &(v, row, n, len) in &layout {
            if !grads.wants(v) {
                continue;
            }
            let dv = grads.slot(v);
            for r in 0..n * channels {
                let src = &g[(row * channels + r) * width..][..len];
                dv[r * len..][..len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }))
}

/// Accumulates `g` into the gradient slot of `x`; helper for custom ops.
pub fn accumulate(grads: &mut GradStore, x: Var, g: &[f64]) {
    if grads.wants(x) {
        grads
            .slot(x)
            .iter_mut()
            .zip(g)
            .for_each(|(d, gi)| *d += gi);
    }
}
