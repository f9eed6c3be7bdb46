//! Attention mechanisms and fusion blocks.

pub mod adjacency;
pub mod blocks;
pub mod mha;

pub use adjacency::{adjacency_weight, build_regional_adjacency, pearson_matrix, sigma_dist, RegionalAdjacency};
pub use blocks::{
    bipartite_transform, gaussian_mask, spatial_attention, swap_nt, temporal_attention, temporal_transform,
    DynamicConv, GateKind, GatedFusion, GaussianMask, GridConv,
};
pub use mha::{AttentionConfig, AttnOutput, MultiHead};
