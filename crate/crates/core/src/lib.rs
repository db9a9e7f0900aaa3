//! Neural window fully-connected CRF depth estimation.
//!
//! The crate is `no_std` (it needs only `alloc`) and holds all of the
//! numerics: a small reverse-mode tensor engine, the hand-crafted CRF
//! energies and window partitioning used as references, the learned window
//! CRF block, the four-level depth network, and the training and evaluation
//! machinery. File formats and the command-line driver live in the `nwcrf`
//! crate.
#![no_std]
// `!(x > y)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod crf_classic;
pub mod depth_net;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod neural_crf;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod partition;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use depth_net::{DecoderKind, DepthNet, Model, ModelConfig};
pub use error::{Error, Result};
pub use params::{Bound, Initializer, ParamId, ParamStore};
pub use partition::{partition_windows, shifted_mask, WindowPartition};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{train, TrainConfig};
