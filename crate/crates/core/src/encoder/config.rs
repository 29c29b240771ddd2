/// Start probability and fixed length of masked spans.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub prob: f64,
    pub span: usize,
}

impl MaskSpec {
    pub const OFF: MaskSpec = MaskSpec { prob: 0.0, span: 1 };

    /// Expected fraction of `n` positions covered by at least one span when
    /// every position starts a span independently with probability `prob`.
    pub fn expected_coverage(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let miss = 1.0 - self.prob;
        let covered: f64 = (0..n)
            .map(|t| 1.0 - miss.powi((t + 1).min(self.span) as i32))
            .sum();
        covered / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub conv_channels: usize,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    /// Group count of the group norm after the first convolution.
    pub group_norm_groups: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub dropout_p: f64,
    pub layerdrop_p: f64,
    pub time_mask: MaskSpec,
    pub channel_mask: MaskSpec,
    pub freeze_feature_extractor: bool,
    pub cls_token: bool,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_channels: 512,
            conv_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            conv_strides: vec![5, 2, 2, 2, 2, 2, 2],
            group_norm_groups: 512,
            model_dim: 768,
            ffn_dim: 3072,
            layers: 12,
            heads: 12,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            dropout_p: 0.1,
            layerdrop_p: 0.05,
            time_mask: MaskSpec {
                prob: 0.05,
                span: 10,
            },
            channel_mask: MaskSpec {
                prob: 0.0016,
                span: 64,
            },
            freeze_feature_extractor: true,
            cls_token: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// The small network used for desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            conv_channels: 32,
            group_norm_groups: 32,
            model_dim: 48,
            ffn_dim: 192,
            layers: 2,
            heads: 2,
            channel_mask: MaskSpec {
                prob: 0.01,
                span: 4,
            },
            ..Self::default()
        }
    }

    /// Every violated constraint, as readable messages.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.conv_kernels.is_empty() {
            out.push("encoder.conv_kernels must not be empty".into());
        }
        if self.conv_kernels.len() != self.conv_strides.len() {
            out.push(format!(
                "encoder.conv_kernels has {} entries but encoder.conv_strides has {}",
                self.conv_kernels.len(),
                self.conv_strides.len()
            ));
        }
        if self.conv_kernels.contains(&0) || self.conv_strides.contains(&0) {
            out.push("conv kernels and strides must be positive".into());
        }
        if self.conv_channels == 0 {
            out.push("encoder.conv_channels must be positive".into());
        }
        if self.group_norm_groups == 0 || !self.conv_channels.is_multiple_of(self.group_norm_groups) {
            out.push(format!(
                "encoder.conv_channels {} not divisible by encoder.group_norm_groups {}",
                self.conv_channels, self.group_norm_groups
            ));
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            out.push(format!(
                "encoder.model_dim {} not divisible by encoder.heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ffn_dim == 0 {
            out.push("encoder.ffn_dim must be positive".into());
        }
        if self.pos_conv_kernel == 0 {
            out.push("encoder.pos_conv_kernel must be positive".into());
        }
        if self.pos_conv_groups == 0 || !self.model_dim.is_multiple_of(self.pos_conv_groups) {
            out.push(format!(
                "encoder.model_dim {} not divisible by encoder.pos_conv_groups {}",
                self.model_dim, self.pos_conv_groups
            ));
        }
        for (name, p) in [
            ("encoder.dropout_p", self.dropout_p),
            ("encoder.layerdrop_p", self.layerdrop_p),
            ("encoder.time_mask.prob", self.time_mask.prob),
            ("encoder.channel_mask.prob", self.channel_mask.prob),
        ] {
            if !(0.0..1.0).contains(&p) {
                out.push(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if self.time_mask.span == 0 || self.channel_mask.span == 0 {
            out.push("mask spans must be at least 1".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            out.push("encoder.layer_norm_eps must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> crate::Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(problems))
        }
    }

    /// Samples covered by one output frame of the convolution stack.
    pub fn receptive_field(&self) -> usize {
        self.conv_kernels
            .iter()
            .zip(&self.conv_strides)
            .rev()
            .fold(1, |rf, (&k, &s)| (rf - 1) * s + k)
    }

    /// Product of the convolution strides, in samples per frame.
    pub fn hop(&self) -> usize {
        self.conv_strides.iter().product()
    }
}
