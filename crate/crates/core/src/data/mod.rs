//! Clip storage formats and the synthetic stand-in corpus.

mod features;
mod manifest;
mod synth;

pub use features::{read_features, write_features, FeatureSequence, TPFT_MAGIC, TPFT_VERSION};
pub use manifest::{
    load_dataset, load_manifest, parse_manifest, serialize_manifest, write_manifest, Clip,
    ClipRecord, WordSpan,
};
pub use synth::{synthesize_dataset, SyntheticConfig, SyntheticDataset};
