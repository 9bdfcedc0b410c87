//! Synthetic datasets, point-cloud files and checkpoints.
//!
//! Classification sets sample the surface of simple solids; segmentation
//! sets sample a bent tube carrying one ellipsoidal blob. Clouds are stored
//! either as text or in a fixed little-endian binary layout, and datasets as
//! a directory of such files plus a `manifest.csv`.

mod dataset;
mod format;
mod synth;

pub use dataset::{Dataset, Generator, Split, MANIFEST};
pub use format::{
    checkpoint_from_bytes, checkpoint_to_bytes, cloud_from_bytes, cloud_from_text, cloud_to_bytes, cloud_to_text,
    read_checkpoint, read_cloud, write_checkpoint, write_cloud, CloudFormat, CHECKPOINT_MAGIC, CLOUD_MAGIC,
};
pub use synth::{
    gen_classification_set, gen_segmentation_set, random_rotation, sample_surface, shape_cloud, vessel_cloud, Ellipsoid,
    ShapeKind, TEST_FRACTION,
};
