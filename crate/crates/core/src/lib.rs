//! Evidential multi-channel segmentation.
//!
//! One small convolutional evidence network is trained per diffusion
//! parameter map (FA, MD and the three tensor eigenvalues). Each network
//! emits non-negative per-class evidence, read as Dirichlet parameters;
//! the per-network predictions are fused voxel by voxel, picking the
//! network with the least Dirichlet uncertainty and reporting the entropy
//! of the averaged beliefs as the final uncertainty map.
//!
//! Synthetic diffusion phantoms stand in for clinical data so that every
//! stage can be checked end to end.

pub mod ensemble;
pub mod error;
pub mod eval;
pub mod evidential;
pub mod format;
pub mod kv;
pub mod losses;
pub mod phantom;
pub mod pipeline;
pub mod special;
pub mod subnet;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, LabelMap, Mask, Volume};
