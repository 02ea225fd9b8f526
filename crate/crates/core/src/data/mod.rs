//! Synthetic corpus with ground-truth factors, feature files and
//! normalization.

mod corpus;
mod featfile;
mod norm;
mod synth;

pub use corpus::{hex_digest, Corpus, Split, SplitCounts, Utterance};
pub use featfile::{load_feature_file, write_feature_file};
pub use norm::NormStats;
pub use synth::{frame_labels, StyleTransform, Synth, SynthSpec};

pub mod feature_file {
    pub use super::featfile::{decode, encode, DTYPE_F32, MAGIC, VERSION};
}
