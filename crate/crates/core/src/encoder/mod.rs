//! The multimodal encoding network.

mod checkpoint;
mod config;
mod model;
mod params;
pub mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Modality, ModelConfig};
pub use model::{
    bind, embed_image, embed_text, encode, forward, fuse, patchify, pool, pooled, predict,
    reduce_and_map, transformer_block, Bound, BoundBlock, BoundText, Forward, FusedSequence,
    Stimulus, LAYER_NORM_EPS,
};
pub use params::{BlockParams, Decay, ModelParams, TextParams};
pub use tokenizer::{tokenize, tokenize_pad, Vocab};
