//! Concept erasure for a tiny multimodal diffusion transformer trained on a
//! synthetic world of shaped, coloured "videos".

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mmdit;
pub mod optim;
pub mod paths;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unlearn;
pub mod verify;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{DType, Element, ParamStore, Tensor};
