//! Feature files, dataset manifests, synthetic data and batching.

mod batch;
mod format;
mod manifest;
mod synth;

pub use batch::{make_batch, Batch};
pub use format::{
    read_features, read_features_as, write_features, HiddenStack, FEATURE_MAGIC, FEATURE_VERSION, HEADER_LEN,
};
pub use manifest::{Label, Manifest, ManifestRow};
pub use synth::{synth_conditions, synth_generate, SynthOutput, SynthSpec, CHANNEL_KEY, CONDITION_KEY, SYNTH_SPLITS};
