//! Persistence, configuration text and report emission.

pub mod format;
pub mod kv;
pub mod reports;

pub use format::{
    decode_batch, decode_weights, encode_batch, encode_weights, load_batch, load_params, save_batch, save_params,
};
