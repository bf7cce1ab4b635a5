//! Fractional-order Gaussian derivative filters for convolutional networks.
//!
//! Each kernel of a [`layers::FracSrfConv`] is a single weighted separable
//! Gaussian derivative `α · G^νx(x;σ) ⊗ G^νy(y;σ)` whose orders and scale are
//! trained by gradient descent along with everything else. Non-integer
//! orders interpolate linearly between the neighbouring integer orders.
//!
//! The crate carries its own small reverse-mode engine ([`tape`], [`ops`]),
//! a structured-receptive-field baseline, the synthetic sinusoid dataset,
//! and the training / evaluation drivers used by the `fracsrf` CLI.

pub mod basis;
pub mod caputo;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod quadrature;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
