//! Road and cell spatio-temporal embeddings.

pub mod node2vec;
pub mod ste;

pub use node2vec::{load_embedding, node2vec_embed, save_embedding, Node2VecOptions, E_X_KEY};
pub use ste::{onehot_tensor, temporal_onehot, CellGeoFeatures, SteEncoder, ONEHOT_WIDTH};
