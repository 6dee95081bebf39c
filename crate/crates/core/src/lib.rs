//! Loss-of-tracking guided segmentation of cine image sequences.
//!
//! A deformable registration network is trained without supervision on
//! frame pairs, a posterior ensemble of its weights is drawn with
//! stochastic-gradient HMC, and the ensemble's disagreement (`u_b`) plus the
//! warp residual (`u_s`) flag regions that cannot be tracked over time. A
//! dual-encoder U-Net consumes those maps alongside the image, and its own
//! posterior ensemble yields a mean segmentation plus the per-class volume
//! spread `sigma_v`. The [`eval`] module implements regional Dice and the
//! Wilcoxon signed-rank test used to compare methods.

pub mod cinedata;
pub mod error;
pub mod eval;
pub mod nn;
pub mod phantom;
pub mod posterior;
pub mod segnet;
pub(crate) mod store;
pub mod tracknet;

pub use error::{Error, Result};
pub use store::CHECKPOINT_VERSION;
