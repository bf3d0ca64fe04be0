//! Depth completion: every pixel dropped by the consistency check picks one
//! of ten consistent disparities gathered along its row, chosen by a small
//! convolutional classifier that also sees the image.

pub mod fill;
pub mod gather;
pub mod net;
pub mod train;

pub use fill::{fill_disparities, labelled_holes, DcSample, GatherField, LabelledHoles};
pub use gather::{compute_class_weights, gather_valid, make_label, GatherVector, GATHER_COUNT};
pub use net::{DcNet, DC_CHANNELS, DC_PATCH};
pub use train::DcTrainer;
