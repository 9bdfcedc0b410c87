//! Point-cloud transformer building blocks on a small `f64` autodiff engine.
//!
//! The crate covers dense tensors with a reverse-mode tape ([`tensor`],
//! [`autodiff`]), point-set geometry ([`geometry`]), the lambda attention
//! block with local context augmentation and relative positional embeddings
//! ([`attention`]), multi-graph reasoning over value channels ([`mgr`]),
//! classification and segmentation networks with training ([`network`]) and
//! synthetic data plus file formats ([`dataio`]). [`bench`] times the
//! attention core against softmax attention.

pub mod attention;
pub mod dataio;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod mgr;
pub mod network;
pub mod nn;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
