//! Caption-supervised visual pretraining: a residual backbone trained through
//! transformer caption decoders, with the tokenizer, data pipeline,
//! objectives, optimizer, decoding and probing around it.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod head;
pub mod model;
pub mod optim;
pub mod params;
pub mod probe;
pub mod rng;
pub mod tasks;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
