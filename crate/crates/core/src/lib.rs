//! CNN kernels that compute convolution, nonlinearities and gradients only
//! inside a coarse binary guidance mask, together with the pieces around
//! them: ground-truth mask construction, a small guidance subnetwork with a
//! pyramid-pooling context module, block-wise random mask synthesis for
//! training, a toy sparse-text detector, and synthetic scene generation.
//!
//! The dense kernels in [`ops`] are the reference implementations; every
//! guided kernel in [`guided`] is tested against them for exact agreement at
//! mask-true cells.

pub mod detector;
pub mod element;
pub mod error;
pub mod guidance;
pub mod guided;
pub mod io;
pub mod layer;
pub mod mask;
pub mod ops;
pub mod postprocess;
pub mod scene;
pub mod synthesis;
pub mod tensor;

pub use element::Element;
pub use error::{Error, Result};
pub use layer::ConvLayer;
pub use mask::{GuidanceMask, MaskView};
pub use tensor::Tensor;
