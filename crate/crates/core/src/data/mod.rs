//! Feature files, manifests, segment arithmetic and synthetic data.

pub mod feature;
pub mod manifest;
pub mod segments;
pub mod synth;

pub use feature::{read_feature, write_feature, Precision};
pub use manifest::{load_dataset, Dataset, Label, Manifest, Split, TrackletMap, VideoFeatures, VideoRecord};
pub use segments::segment_boundaries;
pub use synth::{synthesize_dataset, synthesize_in_memory, synthesize_videos, AnomalyKind, GroundTruth, SynthSpec};
