//! Point-cloud semantic segmentation with local split attention pooling.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod cloud_io;
pub mod error;
pub mod fma;
pub mod lsnet;
pub mod lsap;
pub mod neighbors;
pub mod pae;
pub mod synth;
pub mod verify;
pub mod work;

pub use error::{Error, Result};
