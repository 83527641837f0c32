#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod models;
pub mod tokenizer;
pub mod error;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
