//! Frozen vision-language dual encoder contract.
//!
//! Encoders are never trained here, but every encoding is differentiable with
//! respect to its *input*, which is how gradients reach the mask generator
//! (through masked images) and the prompt bank (through token embeddings).
//! Backends expose this as vector-Jacobian products.

mod toy;

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{bail, Error, Result};

pub use toy::{ToyConcept, ToyEncoder, ToyEncoderSpec};

/// A sequence of token embeddings, one row per token.
pub type TokenSeq = Array2<f64>;

pub trait DualEncoder: Send + Sync {
    /// Width of the shared embedding space.
    fn embed_dim(&self) -> usize;

    /// Width of a single token embedding.
    fn token_dim(&self) -> usize;

    fn patch_size(&self) -> usize;

    fn tokenize(&self, text: &str) -> Result<TokenSeq>;

    /// Unit-norm embedding of an `H x W x 3` image in raw `[0, 1]` space.
    fn encode_image(&self, img: &Image) -> Result<Array1<f64>>;

    /// Gradient of `grad_out · encode_image(img)` with respect to `img`.
    fn image_vjp(&self, img: &Image, grad_out: ArrayView1<f64>) -> Result<Image>;

    /// Unit-norm embedding of a token sequence.
    fn encode_tokens(&self, tokens: ArrayView2<f64>) -> Result<Array1<f64>>;

    /// Gradient of `grad_out · encode_tokens(tokens)` with respect to `tokens`.
    fn tokens_vjp(&self, tokens: ArrayView2<f64>, grad_out: ArrayView1<f64>) -> Result<TokenSeq>;

    /// Canonical byte serialization of every encoder parameter. Used to
    /// check that no training phase touches the encoder.
    fn param_bytes(&self) -> Vec<u8>;

    fn encode_text(&self, text: &str) -> Result<Array1<f64>> {
        let tokens = self.tokenize(text)?;
        self.encode_tokens(tokens.view())
    }

    /// One unit-norm embedding per `patch_size` square, row-major.
    fn encode_patches(&self, img: &Image) -> Result<Vec<Array1<f64>>> {
        let p = self.patch_size();
        let (h, w) = (img.shape()[0], img.shape()[1]);
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            bail!(
                Invalid,
                "image of {h}x{w} is not divisible into patches; both sides must be a multiple of {p}"
            );
        }
        let mut out = Vec::with_capacity((h / p) * (w / p));
        for py in 0..h / p {
            for px in 0..w / p {
                let patch = img
                    .slice(s![py * p..(py + 1) * p, px * p..(px + 1) * p, ..])
                    .to_owned();
                out.push(self.encode_image(&patch)?);
            }
        }
        Ok(out)
    }
}

/// On-disk encoder description. Only the toy backend is built in; other
/// backends plug in by adding a variant here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EncoderCheckpoint {
    Toy(ToyEncoderSpec),
}

/// Loads an encoder checkpoint written by [`save_encoder`].
pub fn load_encoder(path: &Path) -> Result<Box<dyn DualEncoder>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: EncoderCheckpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: unreadable encoder checkpoint: {e}", path.display())))?;
    match ckpt {
        EncoderCheckpoint::Toy(spec) => Ok(Box::new(ToyEncoder::new(spec)?)),
    }
}

pub fn save_encoder(path: &Path, ckpt: &EncoderCheckpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt).expect("encoder checkpoint serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn check_finite_image(img: &Image) -> Result<()> {
    if img.ndim() != 3 || img.shape()[2] != 3 {
        bail!(Invalid, "expected an H x W x 3 image, got shape {:?}", img.shape());
    }
    if img.shape()[0] == 0 || img.shape()[1] == 0 {
        bail!(Invalid, "image has zero area");
    }
    if img.iter().any(|v| !v.is_finite()) {
        bail!(Invalid, "image contains non-finite values");
    }
    Ok(())
}

/// `z / |z|` together with `|z|`.
pub(crate) fn normalize(z: &Array1<f64>) -> Result<(Array1<f64>, f64)> {
    let norm = z.dot(z).sqrt();
    if !norm.is_finite() || norm <= 1e-12 {
        bail!(Invalid, "cannot normalize a vector of norm {norm}");
    }
    Ok((z / norm, norm))
}

/// Backpropagates through `v = z / |z|`.
pub(crate) fn normalize_vjp(unit: &Array1<f64>, norm: f64, grad: ArrayView1<f64>) -> Array1<f64> {
    let along = unit.dot(&grad);
    (&grad - &(unit * along)) / norm
}
