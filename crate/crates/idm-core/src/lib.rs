//! One-shot domain-adaptive semantic segmentation.
//!
//! A model pretrained on a labeled synthetic source domain is adapted to an
//! unlabeled target domain from which exactly one image is available. The
//! pipeline stylizes source images toward the target's channel statistics,
//! gates them through uncertainty-based sample selection, mixes the survivors
//! patch-wise with the target image, and trains the student under a weighted
//! cross-entropy plus prototype-contrastive and information-maximization
//! objectives, with a mean-teacher providing pseudo labels.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mixing;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod scalar;
pub mod seeds;
pub mod selection;
pub mod styletx;
pub mod tensor;
pub mod trainer;

pub use error::{IdmError, Result};
pub use scalar::Scalar;
pub use tensor::{Image, LabelMap, Tensor3, IGNORE_LABEL};
