//! Data pipeline and reference model for unified image-and-text training on
//! raw pixel patches.
//!
//! Images are resized to patch-aligned sizes, cut into patches and laid out
//! as vision spans alongside text tokens. Examples are packed into
//! fixed-length sequences with per-example attention and loss masks, mixed
//! across datasets by weight, and fed to a small transformer trainer.

pub mod corpus;
pub mod encoding;
pub mod mixture;
pub mod model;
pub mod packing;
pub mod preprocess;
pub mod tensor;
pub mod tokenizer;
