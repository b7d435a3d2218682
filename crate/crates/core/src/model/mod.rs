//! Encoder, heads, token masking and momentum updates.

mod blocks;
mod config;
mod encoder;
mod heads;
mod masking;
mod momentum;

pub use blocks::{fold, unfold, PatchEmbed, PatchMerging, ResConvBlock, Stage, SwinBlock};
pub use config::EncoderConfig;
pub use encoder::{Encoder, EncoderCache, FeaturePyramid, TokenMask};
pub use heads::{DecoderCache, FpnDecoder, ProjCache, ProjectionHead};
pub use masking::{make_bottleneck_mask, upsample_mask, TokenMasks};
pub use momentum::{momentum_schedule, momentum_update, MomentumSchedule};
