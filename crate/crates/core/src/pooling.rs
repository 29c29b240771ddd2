//! Reduction of encoder output sequences to fixed-size speaker embeddings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::audio::{normalize, WaveBatch, Waveform};
use crate::encoder::{Encoder, FrameSequence};
use crate::error::{Error, Result};
use crate::nn::{self, FrameSource, Mode, ParameterStore, Tape, Tensor, Var};

/// Quantile levels of quantile pooling.
pub const QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Variance floor used in the gradient of the std statistic.
pub const STD_VARIANCE_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolingMethod {
    Mean,
    Max,
    MeanStd,
    Quantile,
    First,
    Middle,
    Last,
    Random,
    FirstCls,
}

impl PoolingMethod {
    pub const ALL: [PoolingMethod; 9] = [
        PoolingMethod::Mean,
        PoolingMethod::Max,
        PoolingMethod::MeanStd,
        PoolingMethod::Quantile,
        PoolingMethod::First,
        PoolingMethod::Middle,
        PoolingMethod::Last,
        PoolingMethod::Random,
        PoolingMethod::FirstCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolingMethod::Mean => "mean",
            PoolingMethod::Max => "max",
            PoolingMethod::MeanStd => "mean+std",
            PoolingMethod::Quantile => "quantile",
            PoolingMethod::First => "first",
            PoolingMethod::Middle => "middle",
            PoolingMethod::Last => "last",
            PoolingMethod::Random => "random",
            PoolingMethod::FirstCls => "first+cls",
        }
    }

    pub fn output_dim(self, model_dim: usize) -> usize {
        match self {
            PoolingMethod::MeanStd => 2 * model_dim,
            PoolingMethod::Quantile => QUANTILES.len() * model_dim,
            _ => model_dim,
        }
    }

    /// Whether the result depends on the evaluation random stream.
    pub fn is_stochastic(self) -> bool {
        self == PoolingMethod::Random
    }
}

impl fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::invalid(format!(
                    "unknown pooling method '{s}' (expected one of: {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
    pub source_utterance: String,
}

/// Prepends a frame of all `+1` to every item.
pub fn insert_cls_token(tape: &mut Tape, mut seq: FrameSequence) -> Result<FrameSequence> {
    if seq.has_cls {
        return Err(Error::invalid("sequence already carries a cls token"));
    }
    let (batch, time) = (seq.batch(tape), seq.time(tape));
    let plan: Vec<Vec<FrameSource>> = (0..batch)
        .map(|item| {
            std::iter::once(FrameSource::Const(1.0))
                .chain((0..time).map(|t| FrameSource::Frame { item, time: t }))
                .collect()
        })
        .collect();
    seq.data = nn::gather_frames(tape, seq.data, &plan)?;
    seq.valid_lengths.iter_mut().for_each(|v| *v += 1);
    seq.has_cls = true;
    Ok(seq)
}

fn checked_lengths(tape: &Tape, seq: &FrameSequence) -> Result<(usize, usize, usize)> {
    let (batch, time, dim) = (seq.batch(tape), seq.time(tape), seq.dim(tape));
    if seq.valid_lengths.len() != batch {
        return Err(Error::invalid("one valid length per batch item"));
    }
    if let Some(b) = seq.valid_lengths.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("item {b} has no valid frames to pool")));
    }
    if seq.valid_lengths.iter().any(|&n| n > time) {
        return Err(Error::invalid("valid length exceeds sequence length"));
    }
    Ok((batch, time, dim))
}

fn select(tape: &mut Tape, seq: &FrameSequence, index: &[usize]) -> Result<Var> {
    let plan: Vec<Vec<FrameSource>> = index
        .iter()
        .enumerate()
        .map(|(item, &t)| vec![FrameSource::Frame { item, time: t }])
        .collect();
    let picked = nn::gather_frames(tape, seq.data, &plan)?;
    let (batch, dim) = (index.len(), seq.dim(tape));
    nn::reshape(tape, picked, vec![batch, dim])
}

/// Per-dimension statistics over the valid frames of each item, producing
/// `[batch, blocks * dim]`. `stat` maps one item-dimension column to its
/// block values plus a sparse/dense gradient rule.
fn column_stat(
    tape: &mut Tape,
    seq: &FrameSequence,
    blocks: usize,
    stat: fn(&[f64], &mut [f64], &mut Vec<ColumnGrad>),
) -> Result<Var> {
    let (batch, time, dim) = checked_lengths(tape, seq)?;
    let lengths = seq.valid_lengths.clone();
    let xv = tape.value(seq.data).data();
    let mut out = vec![0.0; batch * blocks * dim];
    let mut rules: Vec<Vec<ColumnGrad>> = Vec::with_capacity(batch * dim);
    let mut column = vec![0.0; time];
    let mut vals = vec![0.0; blocks];
    for b in 0..batch {
        let n = lengths[b];
        for d in 0..dim {
            for t in 0..n {
                column[t] = xv[(b * time + t) * dim + d];
            }
            let mut rule = Vec::new();
            stat(&column[..n], &mut vals, &mut rule);
            for (k, v) in vals.iter().enumerate() {
                out[b * blocks * dim + k * dim + d] = *v;
            }
            rules.push(rule);
        }
    }
    let x = seq.data;
    let value = Tensor::new(vec![batch, blocks * dim], out)?;
    Ok(tape.push(value, &[x], move |g, vals, grads| {
        let xv = vals[x.index()].data();
        let dx = grads.slot(x);
        for b in 0..batch {
            let n = lengths[b];
            for d in 0..dim {
                for rule in &rules[b * dim + d] {
                    let go = g[b * blocks * dim + rule.block * dim + d];
                    match rule.kind {
                        GradKind::Point { t, weight } => {
                            dx[(b * time + t) * dim + d] += go * weight;
                        }
                        GradKind::Mean => {
                            for t in 0..n {
                                dx[(b * time + t) * dim + d] += go / n as f64;
                            }
                        }
                        GradKind::Std { mean, denom } => {
                            for t in 0..n {
                                let i = (b * time + t) * dim + d;
                                dx[i] += go * (xv[i] - mean) / denom;
                            }
                        }
                    }
                }
            }
        }
    }))
}

struct ColumnGrad {
    block: usize,
    kind: GradKind,
}

enum GradKind {
    Point { t: usize, weight: f64 },
    Mean,
    /// d std / d x_t = (x_t - mean) / denom
    Std { mean: f64, denom: f64 },
}

fn mean_of(col: &[f64]) -> f64 {
    col.iter().sum::<f64>() / col.len() as f64
}

fn stat_mean(col: &[f64], out: &mut [f64], rules: &mut Vec<ColumnGrad>) {
    out[0] = mean_of(col);
    rules.push(ColumnGrad {
        block: 0,
        kind: GradKind::Mean,
    });
}

fn stat_max(col: &[f64], out: &mut [f64], rules: &mut Vec<ColumnGrad>) {
    let (t, v) = col
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bt, bv), (t, &v)| {
            if v > bv {
                (t, v)
            } else {
                (bt, bv)
            }
        });
    out[0] = v;
    rules.push(ColumnGrad {
        block: 0,
        kind: GradKind::Point { t, weight: 1.0 },
    });
}

fn stat_mean_std(col: &[f64], out: &mut [f64], rules: &mut Vec<ColumnGrad>) {
    let n = col.len() as f64;
    let mean = mean_of(col);
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    out[0] = mean;
    out[1] = var.sqrt();
    rules.push(ColumnGrad {
        block: 0,
        kind: GradKind::Mean,
    });
    rules.push(ColumnGrad {
        block: 1,
        kind: GradKind::Std {
            mean,
            denom: n * var.max(STD_VARIANCE_FLOOR).sqrt(),
        },
    });
}

/// Linear interpolation between order statistics at position `q * (n - 1)`.
fn stat_quantile(col: &[f64], out: &mut [f64], rules: &mut Vec<ColumnGrad>) {
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
    let last = col.len() - 1;
    for (k, q) in QUANTILES.iter().enumerate() {
        let h = q * last as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(last);
        let frac = h - lo as f64;
        let (vl, vh) = (col[order[lo]], col[order[hi]]);
        out[k] = vl + frac * (vh - vl);
        rules.push(ColumnGrad {
            block: k,
            kind: GradKind::Point {
                t: order[lo],
                weight: 1.0 - frac,
            },
        });
        if frac > 0.0 {
            rules.push(ColumnGrad {
                block: k,
                kind: GradKind::Point {
                    t: order[hi],
                    weight: frac,
                },
            });
        }
    }
}

/// Pools each item of `seq` over its valid frames into `[batch, out_dim]`.
pub fn pool<R: Rng + ?Sized>(
    tape: &mut Tape,
    seq: &FrameSequence,
    method: PoolingMethod,
    rng: &mut R,
) -> Result<Var> {
    checked_lengths(tape, seq)?;
    let n = &seq.valid_lengths;
    match method {
        PoolingMethod::Mean => column_stat(tape, seq, 1, stat_mean),
        PoolingMethod::Max => column_stat(tape, seq, 1, stat_max),
        PoolingMethod::MeanStd => column_stat(tape, seq, 2, stat_mean_std),
        PoolingMethod::Quantile => column_stat(tape, seq, QUANTILES.len(), stat_quantile),
        PoolingMethod::First => select(tape, seq, &vec![0; n.len()]),
        PoolingMethod::Middle => {
            let idx: Vec<usize> = n.iter().map(|&k| (k - 1) / 2).collect();
            select(tape, seq, &idx)
        }
        PoolingMethod::Last => {
            let idx: Vec<usize> = n.iter().map(|&k| k - 1).collect();
            select(tape, seq, &idx)
        }
        PoolingMethod::Random => {
            let idx: Vec<usize> = n.iter().map(|&k| rng.random_range(0..k)).collect();
            select(tape, seq, &idx)
        }
        PoolingMethod::FirstCls => {
            if !seq.has_cls {
                return Err(Error::invalid(
                    "first+cls pooling needs a sequence with a cls token",
                ));
            }
            select(tape, seq, &vec![0; n.len()])
        }
    }
}

/// Splits a pooled `[batch, dim]` value into per-utterance embeddings.
pub fn embeddings_from(tape: &Tape, pooled: Var, utterance_ids: &[String]) -> Vec<SpeakerEmbedding> {
    let v = tape.value(pooled);
    let dim = v.dim(1);
    v.data()
        .chunks(dim)
        .zip(utterance_ids)
        .map(|(values, id)| SpeakerEmbedding {
            values: values.to_vec(),
            source_utterance: id.clone(),
        })
        .collect()
}

/// Normalise, encode in eval mode, pool.
pub fn embed_utterance<R: Rng + ?Sized>(
    encoder: &Encoder,
    params: &ParameterStore,
    w: &Waveform,
    method: PoolingMethod,
    rng: &mut R,
) -> Result<SpeakerEmbedding> {
    let batch = WaveBatch::from_waveforms(&[normalize(w)])?;
    let mut tape = Tape::new();
    let binds = params.bind(&mut tape, false);
    let seq = encoder.encode(&mut tape, &binds, &batch, Mode::Eval, rng)?;
    let pooled = pool(&mut tape, &seq, method, rng)?;
    let mut out = embeddings_from(&tape, pooled, &batch.utterance_ids);
    Ok(out.remove(0))
}
