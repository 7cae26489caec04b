//! The keyword-spotting transformer and its architecture variants.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub(crate) use checkpoint::{decode as decode_container, encode as encode_container};
pub use config::{LocHead, ModelConfig, Variant};
pub use forward::{
    encode_text, encode_video, forward, forward_padded, joint_forward, positional_encoding, Graph,
    Heads, LocNodes, Localization, Prediction,
};
pub use params::{init_parameters, Parameters};
