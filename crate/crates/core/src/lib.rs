//! Boundary-aware salient-object segmentation: a small reverse-mode tensor
//! engine, contour-weighted cross entropy, global-contrast attention, a
//! pyramid network, training, and saliency evaluation.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use maps::{BinaryMask, Plane, SaliencyMap};
pub use ops::Padding;
pub use tensor::{Element, Tensor};

// The guide's code listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/contour-loss.md")]
    mod contour_loss {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
