//! Per-class learnable background prompts.
//!
//! Each class owns a sequence of `prompt_len` free token embeddings. No class
//! name token is attached; the sequence is fed to the text encoder as is.

use std::path::Path;

use ndarray::{Array1, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::data::ClassCatalog;
use crate::encoder::DualEncoder;
use crate::error::{bail, Result};

pub const DEFAULT_INIT_STD: f64 = 0.02;
pub const BANK_MAGIC: &[u8; 4] = b"SEMP";

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    /// `K x prompt_len x token_dim`
    embeddings: Array3<f64>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub catalog_digest: String,
    pub classes: usize,
    pub prompt_len: usize,
    pub token_dim: usize,
    pub seed: u64,
}

impl PromptBank {
    pub fn init(catalog: &ClassCatalog, prompt_len: usize, encoder: &dyn DualEncoder, seed: u64) -> Result<Self> {
        Self::init_with_std(catalog, prompt_len, encoder, seed, DEFAULT_INIT_STD)
    }

    /// Gaussian `N(0, std^2)` initialization, deterministic in `seed`.
    pub fn init_with_std(
        catalog: &ClassCatalog,
        prompt_len: usize,
        encoder: &dyn DualEncoder,
        seed: u64,
        std: f64,
    ) -> Result<Self> {
        if prompt_len == 0 {
            bail!(Invalid, "prompt length must be at least 1");
        }
        let normal = Normal::new(0.0, std).map_err(|e| crate::error::Error::Invalid(format!("prompt init std: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = Array3::from_shape_simple_fn((catalog.len(), prompt_len, encoder.token_dim()), || {
            normal.sample(&mut rng)
        });
        Ok(Self { embeddings, seed })
    }

    pub fn classes(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn prompt_len(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.embeddings.shape()[2]
    }

    pub fn embeddings(&self) -> &Array3<f64> {
        &self.embeddings
    }

    pub fn row(&self, k: usize) -> Result<ArrayView2<'_, f64>> {
        if k >= self.classes() {
            bail!(Invalid, "prompt index {k} out of range for {} classes", self.classes());
        }
        Ok(self.embeddings.index_axis(Axis(0), k))
    }

    pub fn params(&self) -> &[f64] {
        self.embeddings.as_slice().expect("bank is contiguous")
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.embeddings.as_slice_mut().expect("bank is contiguous")
    }

    pub fn digest(&self) -> String {
        archive::digest(self.params())
    }

    /// Text-encoder embedding of prompt `k`.
    pub fn background_embedding(&self, k: usize, encoder: &dyn DualEncoder) -> Result<Array1<f64>> {
        self.check_encoder(encoder)?;
        encoder.encode_tokens(self.row(k)?)
    }

    /// Gradient over the whole bank of `grad · background_embedding(k)`.
    /// Every row other than `k` is zero.
    pub fn background_embedding_vjp(
        &self,
        k: usize,
        encoder: &dyn DualEncoder,
        grad: ndarray::ArrayView1<f64>,
    ) -> Result<Array3<f64>> {
        self.check_encoder(encoder)?;
        let row_grad = encoder.tokens_vjp(self.row(k)?, grad)?;
        let mut out = Array3::zeros(self.embeddings.raw_dim());
        out.index_axis_mut(Axis(0), k).assign(&row_grad);
        Ok(out)
    }

    fn check_encoder(&self, encoder: &dyn DualEncoder) -> Result<()> {
        if encoder.token_dim() != self.token_dim() {
            bail!(
                Invalid,
                "bank token width {} does not match encoder token width {}",
                self.token_dim(),
                encoder.token_dim()
            );
        }
        Ok(())
    }

    pub fn manifest(&self, catalog: &ClassCatalog) -> BankManifest {
        BankManifest {
            catalog_digest: catalog.digest(),
            classes: self.classes(),
            prompt_len: self.prompt_len(),
            token_dim: self.token_dim(),
            seed: self.seed,
        }
    }

    pub fn save(&self, path: &Path, catalog: &ClassCatalog) -> Result<()> {
        if catalog.len() != self.classes() {
            bail!(Invalid, "bank has {} prompts for a catalog of {}", self.classes(), catalog.len());
        }
        archive::write(path, BANK_MAGIC, &self.manifest(catalog), self.params())
    }

    /// Loads a bank and checks it was trained for `catalog`.
    pub fn load(path: &Path, catalog: &ClassCatalog) -> Result<Self> {
        let (m, params): (BankManifest, Vec<f64>) = archive::read(path, BANK_MAGIC)?;
        if m.catalog_digest != catalog.digest() {
            bail!(Data, "{}: prompt bank was built for a different class catalog", path.display());
        }
        let embeddings = Array3::from_shape_vec((m.classes, m.prompt_len, m.token_dim), params)
            .map_err(|e| crate::error::Error::Data(format!("{}: {e}", path.display())))?;
        if embeddings.iter().any(|v| !v.is_finite()) {
            bail!(Data, "{}: prompt bank contains non-finite values", path.display());
        }
        Ok(Self { embeddings, seed: m.seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{ToyEncoder, ToyEncoderSpec};

    fn setup(n: usize) -> (ClassCatalog, ToyEncoder) {
        let names: Vec<String> = (0..n).map(|i| format!("class{i}")).collect();
        let cat = ClassCatalog::new(names).unwrap();
        let enc = ToyEncoder::new(ToyEncoderSpec::for_catalog(&cat, 0)).unwrap();
        (cat, enc)
    }

    #[test]
    fn shape_matches_catalog_and_length() {
        let (cat, enc) = setup(20);
        let bank = PromptBank::init(&cat, 30, &enc, 1).unwrap();
        assert_eq!(bank.embeddings().dim(), (20, 30, enc.token_dim()));
    }

    #[test]
    fn init_is_seeded() {
        let (cat, enc) = setup(3);
        let a = PromptBank::init(&cat, 4, &enc, 9).unwrap();
        let b = PromptBank::init(&cat, 4, &enc, 9).unwrap();
        let c = PromptBank::init(&cat, 4, &enc, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| x != y));
        assert!(PromptBank::init(&cat, 0, &enc, 9).is_err());
    }

    #[test]
    fn init_std_is_roughly_honoured() {
        let (cat, enc) = setup(4);
        let bank = PromptBank::init(&cat, 30, &enc, 2).unwrap();
        let n = bank.params().len() as f64;
        let mean = bank.params().iter().sum::<f64>() / n;
        let var = bank.params().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.002);
        assert!((var.sqrt() - DEFAULT_INIT_STD).abs() < 0.002);
    }

    #[test]
    fn rows_are_independent() {
        let (cat, enc) = setup(3);
        let mut bank = PromptBank::init(&cat, 5, &enc, 4).unwrap();
        let before = bank.background_embedding(0, &enc).unwrap();
        let u1 = bank.background_embedding(1, &enc).unwrap();
        assert!(((u1.dot(&u1)).sqrt() - 1.0).abs() < 1e-12);
        let (l, d) = (bank.prompt_len(), bank.token_dim());
        for v in &mut bank.params_mut()[l * d..2 * l * d] {
            *v += 0.3;
        }
        assert_eq!(bank.background_embedding(0, &enc).unwrap(), before);
        let g = Array1::from_elem(d, 0.1);
        let grad = bank.background_embedding_vjp(2, &enc, g.view()).unwrap();
        assert!(grad.index_axis(Axis(0), 0).iter().all(|v| *v == 0.0));
        assert!(grad.index_axis(Axis(0), 1).iter().all(|v| *v == 0.0));
        assert!(grad.index_axis(Axis(0), 2).iter().any(|v| *v != 0.0));
        assert!(bank.background_embedding(3, &enc).is_err());
    }

    #[test]
    fn persistence_is_bit_exact() {
        let (cat, enc) = setup(3);
        let bank = PromptBank::init(&cat, 6, &enc, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.semp");
        bank.save(&path, &cat).unwrap();
        let back = PromptBank::load(&path, &cat).unwrap();
        assert!(bank.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let (other, _) = setup(2);
        assert!(PromptBank::load(&path, &other).is_err());
    }
}
