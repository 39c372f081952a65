//! Parameter handling and transformer building blocks.

mod layers;
mod params;

pub use layers::{
    add_positions, check_mask, sinusoidal_positions, Attended, Conv1d, CrossBlock, EncoderBlock, FeedForward,
    LayerNorm, Linear, MultiHeadAttention,
};
pub use params::{Ctx, Init, Param, ParamId, ParamStore};
