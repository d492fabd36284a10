//! The voxel encoder: a single cross-attention layer from a learned voxel
//! embedding onto the token sequence, a feedforward block and one linear
//! read-out per voxel.

mod config;
mod forward;
mod model;
mod params;

pub use config::EncoderConfig;
pub use forward::{
    backward, backward_accumulate, forward, gelu, gelu_grad, ig_token_scores, predict_from_kv,
    project_tokens, ForwardCache,
};
pub use model::{mse_loss, riemann_ig, LinearProbe, TokenModel};
pub use params::{EncoderParams, ParamsMut, ParamsRef, Tensor};
