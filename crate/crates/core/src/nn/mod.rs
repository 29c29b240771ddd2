//! Differentiable primitives on a reverse-mode tape.

mod gradcheck;
mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;


pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use ops::{
    accumulate, add, concat_batch, conv1d, conv_output_length, dropout, gather_frames, gelu, gelu_scalar,
    group_norm, layer_norm, linear, mean_all, mul_const, multi_head_self_attention, narrow_last,
    phi_cdf, reshape, scale, scaled_dot_attention, stack_padded, transpose12, weighted_sum, AttentionParams,
    ConvSpec, FrameSource,
};
pub use params::{Bindings, ParameterStore};
pub use tape::{GradStore, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Whether stochastic layers (dropout, masking, LayerDrop) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
