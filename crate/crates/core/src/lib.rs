//! Multi-scale feature-pyramid classification of retinal OCT B-scans.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), layers built on it ([`nn`]), a VGG-style pyramidal
//! encoder ([`backbone`]), the feature-pyramid fusion head ([`fusion`]),
//! data handling ([`data`]), training ([`train`]), metrics ([`eval`]) and
//! Grad-CAM explanations ([`gradcam`]).
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod fusion;
pub mod gradcam;
pub mod model;
pub mod oracle;
pub mod nn;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Stream;
pub use tensor::{DType, Scalar, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/pyramid.md")]
    mod pyramid {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/gradcam.md")]
    mod gradcam {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
