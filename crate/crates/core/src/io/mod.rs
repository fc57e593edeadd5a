//! On-disk formats: feature stacks, manifests, and model checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod stack;

pub use checkpoint::{
    parse_checkpoint_header, read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC,
};
pub use manifest::{
    load_manifest, split_dataset, write_manifest, DatasetManifest, SampleRecord, Split, SplitRatios,
};
pub use stack::{parse_stack_header, read_feature_stack, write_feature_stack, FeatureStack, StackHeader, STACK_MAGIC};
