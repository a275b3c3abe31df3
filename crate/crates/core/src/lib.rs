//! Progressive scene-text erasing: stroke prediction, iterative shared-weight
//! erasing, a stroke-consistency pretext task, losses, a two-stream
//! discriminator, a synthetic pair generator and inpainting metrics.

pub mod augment;
pub mod discriminator;
pub mod error;
pub mod features;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod synthgen;

pub use error::{PenError, Result};
