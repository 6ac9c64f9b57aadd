pub mod data;
pub mod error;
pub mod fsutil;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod pim;
pub mod training;

pub use error::{Error, Result};
