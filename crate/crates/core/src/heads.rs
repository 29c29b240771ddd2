//! Training heads: softmax classification (plain or additive angular
//! margin) over pooled embeddings, and joint-sequence pair scoring.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::audio::TrialLabel;
use crate::encoder::{Encoder, FrameSequence};
use crate::error::{Error, Result};
use crate::nn::{self, Bindings, FrameSource, Mode, ParameterStore, Tape, Tensor, Var};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
pub const PAIR_WEIGHT: &str = "pair_head.weight";
pub const PAIR_BIAS: &str = "pair_head.bias";

pub const START_TOKEN: f64 = 1.0;
pub const SEP_TOKEN: f64 = -1.0;
pub const END_TOKEN: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Ce,
    Aam,
    Bce,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ce => "ce",
            Variant::Aam => "aam",
            Variant::Bce => "bce",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Variant::Ce),
            "aam" => Ok(Variant::Aam),
            "bce" => Ok(Variant::Bce),
            _ => Err(Error::invalid(format!(
                "unknown variant '{s}' (expected ce, aam or bce)"
            ))),
        }
    }
}

/// Scale and margin of the angular margin loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AamSpec {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AamSpec {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.2,
        }
    }
}

impl AamSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.scale > 0.0) {
            out.push(format!("head.scale = {} must be positive", self.scale));
        }
        if !(0.0..PI / 2.0).contains(&self.margin) {
            out.push(format!("head.margin = {} outside [0, pi/2)", self.margin));
        }
        out
    }

    /// Target logit for cosine `c`: `s*cos(theta + m)` while
    /// `theta + m <= pi`, the linear fallback `s*(c - m*sin m)` beyond.
    pub fn target_logit(&self, c: f64) -> f64 {
        let (s, m) = (self.scale, self.margin);
        if c > (PI - m).cos() {
            let sine = (1.0 - c * c).max(0.0).sqrt();
            s * (c * m.cos() - sine * m.sin())
        } else {
            s * (c - m * m.sin())
        }
    }

    /// Derivative of [`Self::target_logit`] in `c`. The sine is floored so
    /// the derivative stays finite at `c = 1`.
    fn target_slope(&self, c: f64) -> f64 {
        let (s, m) = (self.scale, self.margin);
        if c > (PI - m).cos() {
            let sine = (1.0 - c * c).max(1e-12).sqrt();
            s * (m.cos() + c * m.sin() / sine)
        } else {
            s
        }
    }
}

/// Single-utterance classifier over pooled embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierHead {
    pub variant: Variant,
    pub classes: usize,
    pub embedding_dim: usize,
    pub aam: AamSpec,
}

impl ClassifierHead {
    pub fn new(variant: Variant, classes: usize, embedding_dim: usize, aam: AamSpec) -> Result<Self> {
        if variant == Variant::Bce {
            return Err(Error::invalid("the bce variant uses a pair head"));
        }
        if classes < 2 || embedding_dim == 0 {
            return Err(Error::invalid("classifier needs at least 2 classes and a nonzero dimension"));
        }
        let problems = aam.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self {
            variant,
            classes,
            embedding_dim,
            aam,
        })
    }

    pub fn init_parameters<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let std = (1.0 / self.embedding_dim as f64).sqrt();
        store.insert(
            HEAD_WEIGHT,
            Tensor::randn(&[self.classes, self.embedding_dim], std, rng),
        )?;
        if self.variant == Variant::Ce {
            store.insert(HEAD_BIAS, Tensor::zeros(&[self.classes]))?;
        }
        Ok(())
    }

    /// Logits and mean loss for a batch of pooled embeddings `[batch, dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, e: Var, targets: &[usize]) -> Result<(Var, Var)> {
        match self.variant {
            Variant::Ce => ce_forward(tape, e, p.get(HEAD_WEIGHT)?, p.get(HEAD_BIAS)?, targets),
            _ => aam_forward(tape, e, p.get(HEAD_WEIGHT)?, targets, self.aam),
        }
    }
}

/// Mean over rows of `-log softmax(logits)[target]`, max-subtracted.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::invalid(format!("target {t} out of range for {classes} classes")));
    }
    let z = tape.value(logits).data();
    let mut probs = vec![0.0; batch * classes];
    let mut loss = 0.0;
    for b in 0..batch {
        let row = &z[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (c, v) in row.iter().enumerate() {
            probs[b * classes + c] = (v - max).exp() / sum;
        }
        loss += max + sum.ln() - row[targets[b]];
    }
    let targets = targets.to_vec();
    Ok(tape.push(Tensor::scalar(loss / batch as f64), &[logits], move |g, _, grads| {
        let dz = grads.slot(logits);
        let k = g[0] / batch as f64;
        for b in 0..batch {
            for c in 0..classes {
                let onehot = if c == targets[b] { 1.0 } else { 0.0 };
                dz[b * classes + c] += k * (probs[b * classes + c] - onehot);
            }
        }
    }))
}

pub fn ce_forward(
    tape: &mut Tape,
    e: Var,
    weight: Var,
    bias: Var,
    targets: &[usize],
) -> Result<(Var, Var)> {
    let logits = nn::linear(tape, e, weight, Some(bias))?;
    let loss = cross_entropy(tape, logits, targets)?;
    Ok((logits, loss))
}

fn unit_rows(x: &[f64], dim: usize, what: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = vec![0.0; x.len()];
    let mut norms = Vec::with_capacity(x.len() / dim);
    for (r, row) in x.chunks(dim).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite {
                context: format!("norm of {what} row {r}"),
                index: r,
            });
        }
        if n == 0.0 {
            return Err(Error::invalid(format!("{what} row {r} has zero norm and cannot be normalized")));
        }
        for (u, v) in unit[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *u = v / n;
        }
        norms.push(n);
    }
    Ok((unit, norms))
}

/// Scaled-cosine logits with the angular margin applied to each row's
/// target class. `e` is `[batch, dim]`, `weight` is `[classes, dim]`.
pub fn aam_logits(tape: &mut Tape, e: Var, weight: Var, targets: &[usize], spec: AamSpec) -> Result<Var> {
    let (es, ws) = (tape.shape(e).to_vec(), tape.shape(weight).to_vec());
    if es.len() != 2 || ws.len() != 2 || es[1] != ws[1] || es[0] != targets.len() {
        return Err(Error::Shape {
            op: "aam_logits",
            lhs: es,
            rhs: ws,
        });
    }
    let (batch, dim, classes) = (es[0], es[1], ws[0]);
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::invalid(format!("target {t} out of range for {classes} classes")));
    }
    let (eu, en) = unit_rows(tape.value(e).data(), dim, "embedding")?;
    let (wu, wn) = unit_rows(tape.value(weight).data(), dim, "weight")?;
    let mut cos = vec![0.0; batch * classes];
    for b in 0..batch {
        for c in 0..classes {
            cos[b * classes + c] = (0..dim).map(|d| eu[b * dim + d] * wu[c * dim + d]).sum();
        }
    }
    let logits: Vec<f64> = cos
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if i % classes == targets[i / classes] {
                spec.target_logit(c)
            } else {
                spec.scale * c
            }
        })
        .collect();
    let targets = targets.to_vec();
    let value = Tensor::new(vec![batch, classes], logits)?;
    Ok(tape.push(value, &[e, weight], move |g, _, grads| {
        // dL/dcos per entry.
        let dcos: Vec<f64> = (0..batch * classes)
            .map(|i| {
                let slope = if i % classes == targets[i / classes] {
                    spec.target_slope(cos[i])
                } else {
                    spec.scale
                };
                g[i] * slope
            })
            .collect();
        if grads.wants(e) {
            let de = grads.slot(e);
            for b in 0..batch {
                for c in 0..classes {
                    let k = dcos[b * classes + c] / en[b];
                    let cbc = cos[b * classes + c];
                    for d in 0..dim {
                        de[b * dim + d] += k * (wu[c * dim + d] - cbc * eu[b * dim + d]);
                    }
                }
            }
        }
        if grads.wants(weight) {
            let dw = grads.slot(weight);
            for b in 0..batch {
                for c in 0..classes {
                    let k = dcos[b * classes + c] / wn[c];
                    let cbc = cos[b * classes + c];
                    for d in 0..dim {
                        dw[c * dim + d] += k * (eu[b * dim + d] - cbc * wu[c * dim + d]);
                    }
                }
            }
        }
    }))
}

pub fn aam_forward(
    tape: &mut Tape,
    e: Var,
    weight: Var,
    targets: &[usize],
    spec: AamSpec,
) -> Result<(Var, Var)> {
    let logits = aam_logits(tape, e, weight, targets, spec)?;
    let loss = cross_entropy(tape, logits, targets)?;
    Ok((logits, loss))
}

/// Logistic scorer over the first output frame of a jointly encoded pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairHead {
    pub model_dim: usize,
}

impl PairHead {
    pub fn init_parameters<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let std = (1.0 / self.model_dim as f64).sqrt();
        store.insert(PAIR_WEIGHT, Tensor::randn(&[1, self.model_dim], std, rng))?;
        store.insert(PAIR_BIAS, Tensor::zeros(&[1]))
    }
}

/// `[start, seq[a], sep, seq[b], end]` for each `(a, b)` item pair, each
/// part trimmed to its valid length.
pub fn join_pairs(tape: &mut Tape, seq: &FrameSequence, pairs: &[(usize, usize)]) -> Result<FrameSequence> {
    let batch = seq.batch(tape);
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to join"));
    }
    let mut lengths = Vec::with_capacity(pairs.len());
    let mut plan = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a >= batch || b >= batch {
            return Err(Error::invalid(format!("pair ({a}, {b}) outside batch of {batch}")));
        }
        let (la, lb) = (seq.valid_lengths[a], seq.valid_lengths[b]);
        if la == 0 || lb == 0 {
            return Err(Error::invalid("cannot pair an empty sequence"));
        }
        lengths.push(la + lb + 3);
        plan.push(
            std::iter::once(FrameSource::Const(START_TOKEN))
                .chain((0..la).map(|time| FrameSource::Frame { item: a, time }))
                .chain(std::iter::once(FrameSource::Const(SEP_TOKEN)))
                .chain((0..lb).map(|time| FrameSource::Frame { item: b, time }))
                .chain(std::iter::once(FrameSource::Const(END_TOKEN)))
                .collect::<Vec<_>>(),
        );
    }
    let data = nn::gather_frames(tape, seq.data, &plan)?;
    Ok(FrameSequence::new(data, lengths))
}

/// Runs the transformer stack over the joined pairs of `seq` and returns
/// one logit per pair, `[pairs]`.
pub fn pair_logits<R: Rng + ?Sized>(
    tape: &mut Tape,
    encoder: &Encoder,
    p: &Bindings,
    seq: &FrameSequence,
    pairs: &[(usize, usize)],
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let joint = join_pairs(tape, seq, pairs)?;
    let out = encoder.transformer_stack(tape, p, joint, mode, rng)?;
    let first: Vec<Vec<FrameSource>> = (0..pairs.len())
        .map(|item| vec![FrameSource::Frame { item, time: 0 }])
        .collect();
    let frame0 = nn::gather_frames(tape, out.data, &first)?;
    let dim = tape.shape(frame0)[2];
    let frame0 = nn::reshape(tape, frame0, vec![pairs.len(), dim])?;
    let logit = nn::linear(tape, frame0, p.get(PAIR_WEIGHT)?, Some(p.get(PAIR_BIAS)?))?;
    nn::reshape(tape, logit, vec![pairs.len()])
}

/// Stacks two item-aligned sequences so item `i` of `a` pairs with item
/// `i` of `b`.
fn stack_pair(tape: &mut Tape, a: &FrameSequence, b: &FrameSequence) -> Result<(FrameSequence, Vec<(usize, usize)>)> {
    let batch = a.batch(tape);
    if b.batch(tape) != batch || a.dim(tape) != b.dim(tape) {
        return Err(Error::Shape {
            op: "pair_forward",
            lhs: tape.shape(a.data).to_vec(),
            rhs: tape.shape(b.data).to_vec(),
        });
    }
    let to3 = |tape: &mut Tape, s: &FrameSequence| nn::transpose12(tape, s.data);
    let (ta, tb) = (to3(tape, a)?, to3(tape, b)?);
    let both = nn::stack_padded(tape, &[ta, tb])?;
    let both = nn::transpose12(tape, both)?;
    let lengths = a.valid_lengths.iter().chain(&b.valid_lengths).copied().collect();
    let pairs = (0..batch).map(|i| (i, batch + i)).collect();
    Ok((FrameSequence::new(both, lengths), pairs))
}

/// `[start, a, sep, b, end]` per item of two item-aligned sequences.
pub fn join_pair(tape: &mut Tape, a: &FrameSequence, b: &FrameSequence) -> Result<FrameSequence> {
    let (seq, pairs) = stack_pair(tape, a, b)?;
    join_pairs(tape, &seq, &pairs)
}

/// Joins two post-positional sequences, runs the transformer stack on the
/// joint sequence and returns one logit per pair, `[batch]`.
pub fn pair_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    encoder: &Encoder,
    p: &Bindings,
    a: &FrameSequence,
    b: &FrameSequence,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let (seq, pairs) = stack_pair(tape, a, b)?;
    pair_logits(tape, encoder, p, &seq, &pairs, mode, rng)
}

/// Mean binary cross-entropy with logits; `same` is the positive class.
pub fn bce_loss(tape: &mut Tape, logits: Var, labels: &[TrialLabel]) -> Result<Var> {
    let z = tape.value(logits).data().to_vec();
    if z.len() != labels.len() {
        return Err(Error::Shape {
            op: "bce_loss",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if *l == TrialLabel::Same { 1.0 } else { 0.0 })
        .collect();
    let n = z.len() as f64;
    let loss: f64 = z.iter().zip(&y).map(|(&z, &y)| bce_value(z, y)).sum::<f64>() / n;
    Ok(tape.push(Tensor::scalar(loss), &[logits], move |g, _, grads| {
        let dz = grads.slot(logits);
        for i in 0..z.len() {
            dz[i] += g[0] * (sigmoid(z[i]) - y[i]) / n;
        }
    }))
}

/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_value(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
