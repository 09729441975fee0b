//! Joint missing-modality synthesis and lesion segmentation.
//!
//! A generator U-Net maps a T1-like slice to a FLAIR-like slice, and a
//! segmentation U-Net consumes the T1 slice together with the synthetic
//! one. The two can be trained separately (offline synthesis), jointly
//! with the segmentation loss flowing back into the generator, or the
//! segmenter can be trained on T1 alone.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod nets;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Network64 = nets::Network<f64>;
pub type Network32 = nets::Network<f32>;
pub type Volume64 = data::Volume<f64>;
pub type Volume32 = data::Volume<f32>;
pub type Subject64 = data::Subject<f64>;
pub type Subject32 = data::Subject<f32>;
