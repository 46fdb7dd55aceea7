//! Extreme video frame interpolation.
//!
//! The crate implements a scale-recursive frame interpolation network on
//! top of a small dense tensor type:
//!
//! * [`tensor`], [`conv`], [`resample`]: CHW tensors and the deterministic
//!   kernels the network needs.
//! * [`flow`]: backward warping, forward splatting and the three t-flow
//!   approximators (linear combination, flow reversal, complementary flow
//!   reversal).
//! * [`weights`], [`net`]: parameter storage and the sub-networks.
//! * [`pipeline`]: bidirectional flow estimation across scales and
//!   synthesis of the intermediate frame.
//! * [`eval`], [`blockmatch`]: training losses and quality metrics.
//! * [`curation`]: dataset statistics and occlusion-driven clip selection.
//! * [`io`]: PPM/PGM/PFM frames and Middlebury `.flo` files.
//! * [`parallel`]: worker-thread configuration.

pub mod blockmatch;
pub mod conv;
pub mod curation;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod net;
pub mod parallel;
pub mod pipeline;
pub mod resample;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use flow::{FlowField, ImportanceLogits};
pub use tensor::{Shape, Tensor};
pub use weights::{ModelConfig, WeightStore};
