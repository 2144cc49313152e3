pub mod clrm;
pub mod config;
pub mod error;
pub mod geostat;
pub mod hm;
pub mod nn;
pub mod proxy;
pub mod resim;
pub mod rng;
pub mod robustopt;

pub use error::{Error, Result};
