//! Weakly-supervised semantic segmentation with learned background prompts.
//!
//! A mask generator learns per-class soft masks from image-level labels by
//! matching masked foregrounds to class text under a frozen dual encoder.
//! Learned background prompts then capture scenery that co-occurs with a
//! class, and a refinement phase pushes the masks away from it.

pub mod archive;
pub mod cam;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod masking;
pub mod objectives;
pub mod optim;
pub mod prompts;
pub mod synth;
pub mod trainer;

pub use config::{default_config, LossFlags, RunConfig};
pub use data::{ClassCatalog, Image, LabeledImage};
pub use encoder::{DualEncoder, ToyEncoder, ToyEncoderSpec};
pub use error::{Error, Result};
pub use masking::{MaskGenerator, MaskSet};
pub use prompts::PromptBank;
