//! The wav2vec2 network body: convolutional feature extractor, feature
//! projection, span masking, convolutional relative positional embedding and
//! the post-norm transformer stack with LayerDrop.

mod config;
mod weights;

use rand::Rng;

pub use config::{EncoderConfig, MaskSpec};
pub use weights::{export_weights, import_weights, read_weight_manifest, ImportReport};

use crate::audio::WaveBatch;
use crate::error::{Error, Result};
use crate::nn::{
    self, AttentionParams, Bindings, ConvSpec, Mode, ParameterStore, Tape, Tensor, Var,
};

/// Parameter-name prefix of the convolutional feature extractor.
pub const EXTRACTOR_PREFIX: &str = "feature_extractor.";

/// Spans zeroed by [`Encoder::apply_masks`], as `(start, len)` per item.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskRecord {
    pub time_spans: Vec<Vec<(usize, usize)>>,
    pub channel_spans: Vec<Vec<(usize, usize)>>,
}

impl MaskRecord {
    pub fn is_empty(&self) -> bool {
        self.time_spans.iter().all(Vec::is_empty) && self.channel_spans.iter().all(Vec::is_empty)
    }
}

/// A `[batch, time, dim]` sequence on a tape with per-item valid lengths.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub data: Var,
    pub valid_lengths: Vec<usize>,
    pub mask_metadata: Option<MaskRecord>,
    pub has_cls: bool,
}

impl FrameSequence {
    pub fn new(data: Var, valid_lengths: Vec<usize>) -> Self {
        Self {
            data,
            valid_lengths,
            mask_metadata: None,
            has_cls: false,
        }
    }

    pub fn batch(&self, tape: &Tape) -> usize {
        tape.shape(self.data)[0]
    }

    pub fn time(&self, tape: &Tape) -> usize {
        tape.shape(self.data)[1]
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.data)[2]
    }
}

/// Frames produced from `input_samples` samples by the convolution stack.
pub fn output_length(input_samples: usize, cfg: &EncoderConfig) -> Result<usize> {
    let field = cfg.receptive_field();
    if input_samples < field {
        return Err(Error::invalid(format!(
            "{input_samples} samples is shorter than the {field}-sample receptive field"
        )));
    }
    Ok(cfg
        .conv_kernels
        .iter()
        .zip(&cfg.conv_strides)
        .fold(input_samples, |len, (&k, &s)| (len - k) / s + 1))
}

fn conv_name(i: usize, part: &str) -> String {
    format!("{EXTRACTOR_PREFIX}conv_layers.{i}.{part}")
}

fn layer_name(i: usize, part: &str) -> String {
    format!("encoder.layers.{i}.{part}")
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Name and shape of every encoder parameter.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.cfg;
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, &k) in c.conv_kernels.iter().enumerate() {
            out.push((conv_name(i, "conv.weight"), vec![c.conv_channels, c_in, k]));
            out.push((conv_name(i, "conv.bias"), vec![c.conv_channels]));
            if i == 0 {
                out.push((conv_name(0, "layer_norm.weight"), vec![c.conv_channels]));
                out.push((conv_name(0, "layer_norm.bias"), vec![c.conv_channels]));
            }
            c_in = c.conv_channels;
        }
        let d = c.model_dim;
        out.push(("feature_projection.layer_norm.weight".into(), vec![c.conv_channels]));
        out.push(("feature_projection.layer_norm.bias".into(), vec![c.conv_channels]));
        out.push(("feature_projection.projection.weight".into(), vec![d, c.conv_channels]));
        out.push(("feature_projection.projection.bias".into(), vec![d]));
        out.push((
            "encoder.pos_conv_embed.conv.weight".into(),
            vec![d, d / c.pos_conv_groups, c.pos_conv_kernel],
        ));
        out.push(("encoder.pos_conv_embed.conv.bias".into(), vec![d]));
        out.push(("encoder.layer_norm.weight".into(), vec![d]));
        out.push(("encoder.layer_norm.bias".into(), vec![d]));
        for i in 0..c.layers {
            for p in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                out.push((layer_name(i, &format!("attention.{p}.weight")), vec![d, d]));
                out.push((layer_name(i, &format!("attention.{p}.bias")), vec![d]));
            }
            out.push((layer_name(i, "layer_norm.weight"), vec![d]));
            out.push((layer_name(i, "layer_norm.bias"), vec![d]));
            out.push((
                layer_name(i, "feed_forward.intermediate_dense.weight"),
                vec![c.ffn_dim, d],
            ));
            out.push((layer_name(i, "feed_forward.intermediate_dense.bias"), vec![c.ffn_dim]));
            out.push((
                layer_name(i, "feed_forward.output_dense.weight"),
                vec![d, c.ffn_dim],
            ));
            out.push((layer_name(i, "feed_forward.output_dense.bias"), vec![d]));
            out.push((layer_name(i, "final_layer_norm.weight"), vec![d]));
            out.push((layer_name(i, "final_layer_norm.bias"), vec![d]));
        }
        out
    }

    /// Random initialisation; norms start as identity, biases at zero.
    /// Extractor parameters are frozen when the config says so.
    pub fn init_parameters<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for (name, shape) in self.parameter_shapes() {
            let value = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.contains("norm") {
                Tensor::full(&shape, 1.0)
            } else if name.starts_with("encoder.pos_conv_embed") {
                let std = (4.0 / (shape[2] * self.cfg.model_dim) as f64).sqrt();
                Tensor::randn(&shape, std, rng)
            } else if shape.len() == 3 {
                let std = (2.0 / (shape[1] * shape[2]) as f64).sqrt();
                Tensor::randn(&shape, std, rng)
            } else {
                Tensor::randn(&shape, (1.0 / shape[1] as f64).sqrt(), rng)
            };
            store.insert(name, value)?;
        }
        if self.cfg.freeze_feature_extractor {
            store.freeze_prefix(EXTRACTOR_PREFIX);
        }
        Ok(store)
    }

    /// Frame valid lengths for per-item sample counts.
    pub fn frame_lengths(&self, valid_samples: &[usize]) -> Result<Vec<usize>> {
        valid_samples
            .iter()
            .map(|&n| output_length(n, &self.cfg))
            .collect()
    }

    /// Convolution stack: conv, group norm and GELU for the first layer,
    /// conv and GELU for the rest. Returns `[batch, conv_channels, frames]`.
    pub fn extract_features(&self, tape: &mut Tape, p: &Bindings, waves: &Tensor) -> Result<Var> {
        if waves.shape().len() != 2 {
            return Err(Error::Shape {
                op: "extract_features",
                lhs: waves.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        output_length(waves.dim(1), &self.cfg)?;
        let input = waves.clone().reshape(vec![waves.dim(0), 1, waves.dim(1)])?;
        let mut x = tape.constant(input);
        for (i, (&_k, &stride)) in self.cfg.conv_kernels.iter().zip(&self.cfg.conv_strides).enumerate() {
            let spec = ConvSpec {
                stride,
                padding: 0,
                groups: 1,
            };
            x = nn::conv1d(
                tape,
                x,
                p.get(&conv_name(i, "conv.weight"))?,
                Some(p.get(&conv_name(i, "conv.bias"))?),
                spec,
            )?;
            if i == 0 {
                x = nn::group_norm(
                    tape,
                    x,
                    self.cfg.group_norm_groups,
                    p.get(&conv_name(0, "layer_norm.weight"))?,
                    p.get(&conv_name(0, "layer_norm.bias"))?,
                    self.cfg.layer_norm_eps,
                )?;
            }
            x = nn::gelu(tape, x);
        }
        Ok(x)
    }

    /// Per-frame layer norm, linear projection to `model_dim`, dropout.
    /// Frames past each item's valid length are zeroed.
    pub fn project<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        latent: Var,
        valid_lengths: Vec<usize>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FrameSequence> {
        let x = nn::transpose12(tape, latent)?;
        let x = nn::layer_norm(
            tape,
            x,
            p.get("feature_projection.layer_norm.weight")?,
            p.get("feature_projection.layer_norm.bias")?,
            self.cfg.layer_norm_eps,
        )?;
        let x = nn::linear(
            tape,
            x,
            p.get("feature_projection.projection.weight")?,
            Some(p.get("feature_projection.projection.bias")?),
        )?;
        let mut x = nn::dropout(tape, x, self.cfg.dropout_p, mode, rng)?;
        let (batch, time, dim) = {
            let s = tape.shape(x);
            (s[0], s[1], s[2])
        };
        if valid_lengths.len() != batch {
            return Err(Error::invalid("one valid length per batch item"));
        }
        if valid_lengths.iter().any(|&v| v < time) {
            let mut keep = vec![1.0; batch * time * dim];
            for (b, &v) in valid_lengths.iter().enumerate() {
                keep[(b * time + v.min(time)) * dim..(b + 1) * time * dim]
                    .iter_mut()
                    .for_each(|k| *k = 0.0);
            }
            x = nn::mul_const(tape, x, keep)?;
        }
        Ok(FrameSequence::new(x, valid_lengths))
    }

    /// Zeroes sampled time spans (whole frames) and channel spans (one
    /// channel across all frames). Every valid frame, and every channel,
    /// starts a span independently with the configured probability; spans
    /// may overlap. Eval mode is the identity.
    pub fn apply_masks<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        seq: FrameSequence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FrameSequence> {
        if mode == Mode::Eval {
            return Ok(seq);
        }
        let (batch, time, dim) = (seq.batch(tape), seq.time(tape), seq.dim(tape));
        let draw = |n: usize, spec: MaskSpec, rng: &mut R| -> Vec<(usize, usize)> {
            if spec.prob == 0.0 {
                return Vec::new();
            }
            (0..n)
                .filter(|_| rng.random::<f64>() < spec.prob)
                .map(|start| (start, spec.span.min(n - start)))
                .collect()
        };
        let mut record = MaskRecord::default();
        for b in 0..batch {
            let valid = seq.valid_lengths[b].min(time);
            record.time_spans.push(draw(valid, self.cfg.time_mask, rng));
            record.channel_spans.push(draw(dim, self.cfg.channel_mask, rng));
        }
        self.apply_mask_record(tape, seq, record)
    }

    /// Zeroes exactly the spans in `record`.
    pub fn apply_mask_record(
        &self,
        tape: &mut Tape,
        mut seq: FrameSequence,
        record: MaskRecord,
    ) -> Result<FrameSequence> {
        let (batch, time, dim) = (seq.batch(tape), seq.time(tape), seq.dim(tape));
        if record.time_spans.len() != batch || record.channel_spans.len() != batch {
            return Err(Error::invalid("mask record must cover every batch item"));
        }
        if !record.is_empty() {
            let mut keep = vec![1.0; batch * time * dim];
            for b in 0..batch {
                let item = &mut keep[b * time * dim..(b + 1) * time * dim];
                for &(start, len) in &record.time_spans[b] {
                    for t in start..(start + len).min(time) {
                        item[t * dim..(t + 1) * dim].iter_mut().for_each(|k| *k = 0.0);
                    }
                }
                for &(start, len) in &record.channel_spans[b] {
                    for frame in item.chunks_mut(dim) {
                        frame[start..(start + len).min(dim)]
                            .iter_mut()
                            .for_each(|k| *k = 0.0);
                    }
                }
            }
            seq.data = nn::mul_const(tape, seq.data, keep)?;
        }
        seq.mask_metadata = Some(record);
        Ok(seq)
    }

    /// Grouped convolution over time, GELU, residual sum with the input,
    /// layer norm and dropout. The convolution output is trimmed back to the
    /// input length from the end.
    pub fn add_positional<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        mut seq: FrameSequence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FrameSequence> {
        let time = seq.time(tape);
        let x = nn::transpose12(tape, seq.data)?;
        let spec = ConvSpec {
            stride: 1,
            padding: self.cfg.pos_conv_kernel / 2,
            groups: self.cfg.pos_conv_groups,
        };
        let pos = nn::conv1d(
            tape,
            x,
            p.get("encoder.pos_conv_embed.conv.weight")?,
            Some(p.get("encoder.pos_conv_embed.conv.bias")?),
            spec,
        )?;
        let pos = nn::narrow_last(tape, pos, time)?;
        let pos = nn::gelu(tape, pos);
        let pos = nn::transpose12(tape, pos)?;
        let y = nn::add(tape, seq.data, pos)?;
        let y = nn::layer_norm(
            tape,
            y,
            p.get("encoder.layer_norm.weight")?,
            p.get("encoder.layer_norm.bias")?,
            self.cfg.layer_norm_eps,
        )?;
        seq.data = nn::dropout(tape, y, self.cfg.dropout_p, mode, rng)?;
        Ok(seq)
    }

    fn transformer_layer<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        i: usize,
        x: Var,
        valid: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let eps = self.cfg.layer_norm_eps;
        let drop = self.cfg.dropout_p;
        let w = |part: &str| p.get(&layer_name(i, part));
        let att = AttentionParams {
            q_weight: w("attention.q_proj.weight")?,
            q_bias: w("attention.q_proj.bias")?,
            k_weight: w("attention.k_proj.weight")?,
            k_bias: w("attention.k_proj.bias")?,
            v_weight: w("attention.v_proj.weight")?,
            v_bias: w("attention.v_proj.bias")?,
            out_weight: w("attention.out_proj.weight")?,
            out_bias: w("attention.out_proj.bias")?,
        };
        let a = nn::multi_head_self_attention(tape, x, self.cfg.heads, &att, Some(valid))?;
        let a = nn::dropout(tape, a, drop, mode, rng)?;
        let x = nn::add(tape, x, a)?;
        let x = nn::layer_norm(
            tape,
            x,
            w("layer_norm.weight")?,
            w("layer_norm.bias")?,
            eps,
        )?;
        let h = nn::linear(
            tape,
            x,
            w("feed_forward.intermediate_dense.weight")?,
            Some(w("feed_forward.intermediate_dense.bias")?),
        )?;
        let h = nn::gelu(tape, h);
        let h = nn::dropout(tape, h, drop, mode, rng)?;
        let h = nn::linear(
            tape,
            h,
            w("feed_forward.output_dense.weight")?,
            Some(w("feed_forward.output_dense.bias")?),
        )?;
        let h = nn::dropout(tape, h, drop, mode, rng)?;
        let x = nn::add(tape, x, h)?;
        nn::layer_norm(
            tape,
            x,
            w("final_layer_norm.weight")?,
            w("final_layer_norm.bias")?,
            eps,
        )
    }

    /// Post-norm transformer layers. In train mode each layer is skipped
    /// with probability `layerdrop_p`.
    pub fn transformer_stack<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        mut seq: FrameSequence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FrameSequence> {
        for i in 0..self.cfg.layers {
            if mode == Mode::Train
                && self.cfg.layerdrop_p > 0.0
                && rng.random::<f64>() < self.cfg.layerdrop_p
            {
                continue;
            }
            seq.data =
                self.transformer_layer(tape, p, i, seq.data, &seq.valid_lengths, mode, rng)?;
        }
        Ok(seq)
    }

    /// Everything between the extractor output and the transformer stack:
    /// projection, masking and positional embedding.
    pub fn latent_to_positional<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        latent: Var,
        frame_lengths: Vec<usize>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FrameSequence> {
        let seq = self.project(tape, p, latent, frame_lengths, mode, rng)?;
        let seq = self.apply_masks(tape, seq, mode, rng)?;
        self.add_positional(tape, p, seq, mode, rng)
    }

    /// The rest of the forward pass from extractor output: positional
    /// sequence, optional cls token, transformer stack.
    pub fn encode_latent<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        latent: Var,
        frame_lengths: Vec<usize>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FrameSequence> {
        let mut seq = self.latent_to_positional(tape, p, latent, frame_lengths, mode, rng)?;
        if self.cfg.cls_token {
            seq = crate::pooling::insert_cls_token(tape, seq)?;
        }
        self.transformer_stack(tape, p, seq, mode, rng)
    }

    /// Full forward pass from waveforms.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        batch: &WaveBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<FrameSequence> {
        let lengths = self.frame_lengths(&batch.valid_lengths)?;
        let latent = self.extract_features(tape, p, &batch.data)?;
        self.encode_latent(tape, p, latent, lengths, mode, rng)
    }
}
