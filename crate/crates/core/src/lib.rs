//! Personalized feature translation for source-free, neutral-only subject
//! adaptation of expression classifiers.

pub mod error;
pub mod export;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod pairing;
pub mod persist;
pub mod pipeline;
pub mod synthdata;

pub use error::{Error, FormatError, Result};
