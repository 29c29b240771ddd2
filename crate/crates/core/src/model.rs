//! A complete speaker model (encoder plus head parameters) and the shared
//! forward plumbing used by training and evaluation.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{normalize_in_place, Waveform};
use crate::encoder::{output_length, Encoder, EncoderConfig, FrameSequence, EXTRACTOR_PREFIX};
use crate::error::{Error, Result};
use crate::heads::{AamSpec, ClassifierHead, PairHead, Variant, HEAD_WEIGHT};
use crate::nn::{self, Bindings, Mode, ParameterStore, Tape, Tensor, Var};
use crate::pooling::PoolingMethod;

/// Extractor outputs `[channels, frames]` of normalised whole utterances,
/// keyed by utterance id. Only meaningful while the extractor is frozen.
#[derive(Clone, Debug, Default)]
pub struct LatentCache {
    map: HashMap<String, Tensor>,
    pub hits: usize,
    pub misses: usize,
}

impl LatentCache {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One extractor input: normalised samples, and whether they are the whole
/// normalised utterance `id` (and so may come from or go to the cache).
#[derive(Clone, Copy, Debug)]
pub struct LatentInput<'a> {
    pub id: &'a str,
    pub samples: &'a [f64],
    pub whole_utterance: bool,
}

#[derive(Clone, Debug)]
pub struct SpeakerModel {
    pub encoder: Encoder,
    pub params: ParameterStore,
    pub variant: Variant,
    pub pooling: PoolingMethod,
    pub aam: AamSpec,
}

impl SpeakerModel {
    /// Fresh parameters: encoder plus a classifier over `classes` speakers
    /// (ce, aam) or a pair scorer (bce).
    pub fn init<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        variant: Variant,
        pooling: PoolingMethod,
        aam: AamSpec,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if pooling == PoolingMethod::FirstCls && !cfg.cls_token && variant != Variant::Bce {
            return Err(Error::Config(vec![
                "pooling first+cls requires encoder.cls_token = true".into(),
            ]));
        }
        let encoder = Encoder::new(cfg)?;
        let mut params = encoder.init_parameters(rng)?;
        let dim = encoder.config().model_dim;
        match variant {
            Variant::Bce => PairHead { model_dim: dim }.init_parameters(&mut params, rng)?,
            _ => ClassifierHead::new(variant, classes, pooling.output_dim(dim), aam)?
                .init_parameters(&mut params, rng)?,
        }
        Ok(Self {
            encoder,
            params,
            variant,
            pooling,
            aam,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    /// The classifier matching the stored head weight; `None` for bce.
    pub fn classifier(&self) -> Result<Option<ClassifierHead>> {
        if self.variant == Variant::Bce {
            return Ok(None);
        }
        let w = self
            .params
            .get(HEAD_WEIGHT)
            .ok_or_else(|| Error::invalid("model has no classifier head"))?;
        ClassifierHead::new(self.variant, w.dim(0), w.dim(1), self.aam).map(Some)
    }

    /// True when every extractor parameter is frozen.
    pub fn extractor_frozen(&self) -> bool {
        self.params
            .names()
            .filter(|n| n.starts_with(EXTRACTOR_PREFIX))
            .all(|n| self.params.is_frozen(n))
    }

    /// Extractor outputs for each input, stacked as `[batch, channels,
    /// frames]` with zero frames past each item's own length. Every item is
    /// extracted without padding, so results do not depend on batch mates.
    /// The cache is consulted only for whole utterances and only while the
    /// extractor is frozen.
    pub fn latents(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        inputs: &[LatentInput<'_>],
        mut cache: Option<&mut LatentCache>,
    ) -> Result<(Var, Vec<usize>)> {
        let cfg = self.encoder.config();
        let use_cache = self.extractor_frozen();
        let lengths = inputs
            .iter()
            .map(|i| output_length(i.samples.len(), cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut parts: Vec<Option<Var>> = vec![None; inputs.len()];
        if let (true, Some(cache)) = (use_cache, cache.as_deref_mut()) {
            for (slot, input) in parts.iter_mut().zip(inputs) {
                if !input.whole_utterance {
                    continue;
                }
                if let Some(t) = cache.map.get(input.id) {
                    let (c, f) = (t.dim(0), t.dim(1));
                    *slot = Some(tape.constant(t.clone().reshape(vec![1, c, f])?));
                    cache.hits += 1;
                }
            }
        }
        // Extract the rest, grouping equal lengths into one call.
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, input) in inputs.iter().enumerate() {
            if parts[i].is_none() {
                groups.entry(input.samples.len()).or_default().push(i);
            }
        }
        for (len, members) in groups {
            let mut data = Vec::with_capacity(members.len() * len);
            for &i in &members {
                data.extend_from_slice(inputs[i].samples);
            }
            let waves = Tensor::new(vec![members.len(), len], data)?;
            let latent = self.encoder.extract_features(tape, p, &waves)?;
            let (c, f) = (tape.shape(latent)[1], tape.shape(latent)[2]);
            if members.len() == 1 {
                parts[members[0]] = Some(latent);
            } else {
                let all = tape.value(latent).data().to_vec();
                let frozen_batch = !tape.requires_grad(latent);
                for (k, &i) in members.iter().enumerate() {
                    parts[i] = Some(if frozen_batch {
                        let t = Tensor::new(vec![1, c, f], all[k * c * f..(k + 1) * c * f].to_vec())?;
                        tape.constant(t)
                    } else {
                        select_item(tape, latent, k)?
                    });
                }
            }
            if let (true, Some(cache)) = (use_cache, cache.as_deref_mut()) {
                let v = tape.value(latent).data();
                for (k, &i) in members.iter().enumerate() {
                    if inputs[i].whole_utterance {
                        cache.misses += 1;
                        let t = Tensor::new(vec![c, f], v[k * c * f..(k + 1) * c * f].to_vec())?;
                        cache.map.insert(inputs[i].id.to_string(), t);
                    }
                }
            }
        }
        let parts: Vec<Var> = parts.into_iter().map(|p| p.expect("every item extracted")).collect();
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            nn::stack_padded(tape, &parts)?
        };
        Ok((stacked, lengths))
    }

    /// Transformer outputs (ce, aam) or post-positional sequences (bce) of
    /// whole utterances in eval mode, one `[frames, dim]` tensor each.
    pub fn eval_sequences(
        &self,
        waves: &[&Waveform],
        cache: Option<&mut LatentCache>,
    ) -> Result<Vec<Tensor>> {
        let normalized: Vec<Vec<f64>> = waves
            .iter()
            .map(|w| {
                let mut s = w.samples.clone();
                normalize_in_place(&mut s);
                s
            })
            .collect();
        let inputs: Vec<LatentInput<'_>> = waves
            .iter()
            .zip(&normalized)
            .map(|(w, s)| LatentInput {
                id: &w.utterance_id,
                samples: s,
                whole_utterance: true,
            })
            .collect();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (latent, lengths) = self.latents(&mut tape, &p, &inputs, cache)?;
        // Eval mode draws nothing from the generator.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let seq = match self.variant {
            Variant::Bce => {
                self.encoder
                    .latent_to_positional(&mut tape, &p, latent, lengths, Mode::Eval, &mut unused)?
            }
            _ => self
                .encoder
                .encode_latent(&mut tape, &p, latent, lengths, Mode::Eval, &mut unused)?,
        };
        split_sequence(&tape, &seq)
    }
}

/// Item `k` of a `[batch, c, l]` value as `[1, c, l]`.
fn select_item(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (c, l) = (s[1], s[2]);
    let t = nn::transpose12(tape, x)?;
    let plan = vec![(0..l).map(|time| nn::FrameSource::Frame { item: k, time }).collect()];
    let picked = nn::gather_frames(tape, t, &plan)?;
    debug_assert_eq!(tape.shape(picked), &[1, l, c]);
    nn::transpose12(tape, picked)
}

/// Valid frames of every item, as `[frames, dim]` tensors.
pub fn split_sequence(tape: &Tape, seq: &FrameSequence) -> Result<Vec<Tensor>> {
    let (time, dim) = (seq.time(tape), seq.dim(tape));
    let v = tape.value(seq.data).data();
    seq.valid_lengths
        .iter()
        .enumerate()
        .map(|(b, &n)| Tensor::new(vec![n, dim], v[b * time * dim..][..n * dim].to_vec()))
        .collect()
}

/// Stacks `[frames, dim]` tensors into a constant padded sequence.
pub fn sequence_from(tape: &mut Tape, items: &[&Tensor], has_cls: bool) -> Result<FrameSequence> {
    let dim = items.first().map(|t| t.dim(1)).unwrap_or(0);
    let time = items.iter().map(|t| t.dim(0)).max().unwrap_or(0);
    let mut data = vec![0.0; items.len() * time * dim];
    for (b, t) in items.iter().enumerate() {
        if t.dim(1) != dim {
            return Err(Error::invalid("sequences differ in model dimension"));
        }
        data[b * time * dim..][..t.len()].copy_from_slice(t.data());
    }
    let x = tape.constant(Tensor::new(vec![items.len(), time, dim], data)?);
    let mut seq = FrameSequence::new(x, items.iter().map(|t| t.dim(0)).collect());
    seq.has_cls = has_cls;
    Ok(seq)
}
