//! Deterministic toy dual encoder.
//!
//! Image side: every pixel is lifted onto a small palette of *concepts* by a
//! soft chroma assignment `phi_j(x) = |x| * softmax_j(sharpness * <c_j, x/|x|>)`,
//! which is homogeneous of degree one, so dimming a pixel by a mask value
//! scales its contribution linearly. The lifted channels are average-pooled
//! on a 4x4 grid, projected by a fixed linear map that sends concept `j` to
//! its own axis of the embedding space, offset by a small constant "void"
//! direction and normalized. An all-zero image therefore encodes to the void
//! axis `e_0`.
//!
//! Text side: words are mapped to token embeddings. Concept names map to
//! their concept axis, optionally mixed with linked concepts (this is how the
//! toy models a class name whose text embedding leans towards a co-occurring
//! background). Every other word hashes to a fixed random unit vector in the
//! subspace orthogonal to the concept axes. A token sequence encodes to the
//! normalized sum of its rows plus a fixed text offset along the mean concept
//! direction. The offset gives every text embedding, including that of a
//! freshly initialized prompt, a positive cosine with every non-blank image,
//! as in pretrained vision-language models.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_finite_image, normalize, normalize_vjp, DualEncoder, TokenSeq};
use crate::data::{ClassCatalog, Image};
use crate::error::{bail, Result};

const GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConcept {
    pub name: String,
    /// Representative RGB colour; only its chroma (direction) matters.
    pub color: [f64; 3],
    /// Other concepts blended into this concept's text token, with weights.
    #[serde(default)]
    pub text_links: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderSpec {
    pub embed_dim: usize,
    pub seed: u64,
    /// Softmax sharpness of the chroma assignment.
    pub sharpness: f64,
    /// Length of the constant void offset added before normalization.
    pub void_scale: f64,
    /// Length of the constant offset added to every token sum.
    pub text_offset: f64,
    pub patch_size: usize,
    pub concepts: Vec<ToyConcept>,
}

impl ToyEncoderSpec {
    /// One concept per class, with hues spread evenly around the colour wheel.
    pub fn for_catalog(catalog: &ClassCatalog, seed: u64) -> Self {
        let n = catalog.len();
        let concepts = catalog
            .names()
            .iter()
            .enumerate()
            .map(|(k, name)| ToyConcept {
                name: name.clone(),
                color: hsv_to_rgb(k as f64 / n as f64, 0.8, 0.9),
                text_links: Vec::new(),
            })
            .collect();
        ToyEncoderSpec {
            embed_dim: (n + 2).max(32),
            seed,
            sharpness: 30.0,
            void_scale: 0.02,
            text_offset: 1.0,
            patch_size: 16,
            concepts,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    spec: ToyEncoderSpec,
    /// Unit chroma of each concept.
    chroma: Vec<[f64; 3]>,
    /// `embed_dim x (GRID * GRID * n_concepts)`, column index `cell * P + j`.
    projection: Array2<f64>,
    bias: Array1<f64>,
    text_bias: Array1<f64>,
    /// Concept name split into lowercase words, and its token embedding.
    concept_tokens: Vec<(Vec<String>, Array1<f64>)>,
}

impl ToyEncoder {
    pub fn new(spec: ToyEncoderSpec) -> Result<Self> {
        let p = spec.concepts.len();
        if p == 0 {
            bail!(Invalid, "toy encoder needs at least one concept");
        }
        if spec.embed_dim < p + 2 {
            bail!(
                Invalid,
                "embed_dim {} too small for {p} concepts (need at least {})",
                spec.embed_dim,
                p + 2
            );
        }
        if !(spec.sharpness > 0.0 && spec.void_scale > 0.0 && spec.patch_size > 0) {
            bail!(Invalid, "sharpness, void_scale and patch_size must be positive");
        }
        if !(spec.text_offset >= 0.0 && spec.text_offset.is_finite()) {
            bail!(Invalid, "text_offset must be finite and non-negative");
        }
        let mut chroma = Vec::with_capacity(p);
        for c in &spec.concepts {
            let n = c.color.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= 1e-9 || c.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
                bail!(Invalid, "concept {:?} needs a non-black colour in [0,1]^3", c.name);
            }
            chroma.push([c.color[0] / n, c.color[1] / n, c.color[2] / n]);
        }

        let d = spec.embed_dim;
        let cells = GRID * GRID;
        let mut projection = Array2::zeros((d, cells * p));
        for cell in 0..cells {
            for j in 0..p {
                projection[[1 + j, cell * p + j]] = 1.0 / cells as f64;
            }
        }
        let mut bias = Array1::zeros(d);
        bias[0] = spec.void_scale;
        let mut text_bias = Array1::zeros(d);
        for j in 0..p {
            text_bias[1 + j] = spec.text_offset / (p as f64).sqrt();
        }

        let index: HashMap<&str, usize> = spec
            .concepts
            .iter()
            .enumerate()
            .map(|(j, c)| (c.name.as_str(), j))
            .collect();
        if index.len() != p {
            bail!(Invalid, "toy concept names must be unique");
        }
        let mut concept_tokens = Vec::with_capacity(p);
        for (j, c) in spec.concepts.iter().enumerate() {
            let words = split_words(&c.name);
            if words.is_empty() {
                bail!(Invalid, "concept name {:?} has no words", c.name);
            }
            let mut tok = Array1::zeros(d);
            tok[1 + j] = 1.0;
            for (other, w) in &c.text_links {
                match index.get(other.as_str()) {
                    Some(&o) => tok[1 + o] += w,
                    None => bail!(Invalid, "concept {:?} links to unknown concept {other:?}", c.name),
                }
            }
            let (tok, _) = normalize(&tok)?;
            concept_tokens.push((words, tok));
        }
        // longest names first so multi-word concepts win the match
        concept_tokens.sort_by_key(|t| std::cmp::Reverse(t.0.len()));

        Ok(Self {
            spec,
            chroma,
            projection,
            bias,
            text_bias,
            concept_tokens,
        })
    }

    pub fn spec(&self) -> &ToyEncoderSpec {
        &self.spec
    }

    /// Embedding axis of concept `j` on the image side.
    pub fn concept_axis(&self, j: usize) -> Array1<f64> {
        let mut e = Array1::zeros(self.spec.embed_dim);
        e[1 + j] = 1.0;
        e
    }

    /// The unit vector every all-zero image encodes to.
    pub fn void_axis(&self) -> Array1<f64> {
        let mut e = Array1::zeros(self.spec.embed_dim);
        e[0] = 1.0;
        e
    }

    fn n_concepts(&self) -> usize {
        self.chroma.len()
    }

    fn hashed_token(&self, word: &str) -> Array1<f64> {
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        h.update(word.as_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let free = 1 + self.n_concepts();
        let mut v = Array1::<f64>::zeros(self.spec.embed_dim);
        for i in free..self.spec.embed_dim {
            v[i] = StandardNormal.sample(&mut rng);
        }
        let n = v.dot(&v).sqrt();
        v / n
    }

    /// Per-pixel soft palette lift. Returns `phi` and the softmax weights.
    fn lift(&self, x: [f64; 3]) -> (Vec<f64>, Vec<f64>, f64) {
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let p = self.n_concepts();
        if r < 1e-12 {
            return (vec![0.0; p], vec![0.0; p], 0.0);
        }
        let unit = [x[0] / r, x[1] / r, x[2] / r];
        let scores: Vec<f64> = self
            .chroma
            .iter()
            .map(|c| self.spec.sharpness * (c[0] * unit[0] + c[1] * unit[1] + c[2] * unit[2]))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / z).collect();
        (w.iter().map(|wj| r * wj).collect(), w, r)
    }

    fn lift_vjp(&self, x: [f64; 3], g: &[f64]) -> [f64; 3] {
        let (_, w, r) = self.lift(x);
        if r < 1e-12 {
            return [0.0; 3];
        }
        let unit = [x[0] / r, x[1] / r, x[2] / r];
        let gbar: f64 = g.iter().zip(&w).map(|(gj, wj)| gj * wj).sum();
        let mut out = [gbar * unit[0], gbar * unit[1], gbar * unit[2]];
        for (i, c) in self.chroma.iter().enumerate() {
            let a = self.spec.sharpness * w[i] * (g[i] - gbar);
            let cu = c[0] * unit[0] + c[1] * unit[1] + c[2] * unit[2];
            for ch in 0..3 {
                out[ch] += a * (c[ch] - cu * unit[ch]);
            }
        }
        out
    }

    /// Pre-normalization embedding.
    fn image_preact(&self, img: &Image) -> Array1<f64> {
        let p = self.n_concepts();
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mut pooled = Array1::<f64>::zeros(GRID * GRID * p);
        for (gy, (y0, y1)) in bins(h).into_iter().enumerate() {
            for (gx, (x0, x1)) in bins(w).into_iter().enumerate() {
                let cell = gy * GRID + gx;
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let (phi, _, _) = self.lift([img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]]);
                        for j in 0..p {
                            pooled[cell * p + j] += phi[j] / area;
                        }
                    }
                }
            }
        }
        self.projection.dot(&pooled) + &self.bias
    }
}

/// Adaptive pooling bins: `[floor(i*n/G), ceil((i+1)*n/G))`.
fn bins(n: usize) -> Vec<(usize, usize)> {
    (0..GRID)
        .map(|i| ((i * n) / GRID, ((i + 1) * n).div_ceil(GRID)))
        .collect()
}

fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '_'))
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

impl DualEncoder for ToyEncoder {
    fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn token_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn patch_size(&self) -> usize {
        self.spec.patch_size
    }

    fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let words = split_words(text);
        let mut rows: Vec<Array1<f64>> = Vec::new();
        let mut i = 0;
        'outer: while i < words.len() {
            for (name, tok) in &self.concept_tokens {
                if words[i..].starts_with(name) {
                    rows.push(tok.clone());
                    i += name.len();
                    continue 'outer;
                }
            }
            rows.push(self.hashed_token(&words[i]));
            i += 1;
        }
        if rows.is_empty() {
            bail!(Invalid, "text {text:?} produced no tokens");
        }
        let d = self.spec.embed_dim;
        let mut out = Array2::zeros((rows.len(), d));
        for (r, row) in rows.iter().enumerate() {
            out.row_mut(r).assign(row);
        }
        Ok(out)
    }

    fn encode_image(&self, img: &Image) -> Result<Array1<f64>> {
        check_finite_image(img)?;
        let (v, _) = normalize(&self.image_preact(img))?;
        Ok(v)
    }

    fn image_vjp(&self, img: &Image, grad_out: ArrayView1<f64>) -> Result<Image> {
        check_finite_image(img)?;
        if grad_out.len() != self.spec.embed_dim {
            bail!(Invalid, "gradient has length {}, expected {}", grad_out.len(), self.spec.embed_dim);
        }
        let (v, norm) = normalize(&self.image_preact(img))?;
        let dz = normalize_vjp(&v, norm, grad_out);
        let dpooled = self.projection.t().dot(&dz);

        let p = self.n_concepts();
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mut dphi = Array3::<f64>::zeros((h, w, p));
        for (gy, (y0, y1)) in bins(h).into_iter().enumerate() {
            for (gx, (x0, x1)) in bins(w).into_iter().enumerate() {
                let cell = gy * GRID + gx;
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        for j in 0..p {
                            dphi[[y, x, j]] += dpooled[cell * p + j] / area;
                        }
                    }
                }
            }
        }
        let mut grad = Array3::zeros((h, w, 3));
        let mut g = vec![0.0; p];
        for y in 0..h {
            for x in 0..w {
                for j in 0..p {
                    g[j] = dphi[[y, x, j]];
                }
                let dx = self.lift_vjp([img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]], &g);
                for c in 0..3 {
                    grad[[y, x, c]] = dx[c];
                }
            }
        }
        Ok(grad)
    }

    fn encode_tokens(&self, tokens: ArrayView2<f64>) -> Result<Array1<f64>> {
        let sum = self.token_sum(tokens)?;
        Ok(normalize(&sum)?.0)
    }

    fn tokens_vjp(&self, tokens: ArrayView2<f64>, grad_out: ArrayView1<f64>) -> Result<TokenSeq> {
        if grad_out.len() != self.spec.embed_dim {
            bail!(Invalid, "gradient has length {}, expected {}", grad_out.len(), self.spec.embed_dim);
        }
        let sum = self.token_sum(tokens)?;
        let (u, norm) = normalize(&sum)?;
        let ds = normalize_vjp(&u, norm, grad_out);
        let mut out = Array2::zeros(tokens.raw_dim());
        for mut row in out.rows_mut() {
            row.assign(&ds);
        }
        Ok(out)
    }

    fn param_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.spec).expect("spec serializes");
        for v in self.projection.iter().chain(&self.bias).chain(&self.text_bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (words, tok) in &self.concept_tokens {
            out.extend_from_slice(words.join(" ").as_bytes());
            for v in tok {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

impl ToyEncoder {
    fn token_sum(&self, tokens: ArrayView2<f64>) -> Result<Array1<f64>> {
        if tokens.nrows() == 0 {
            bail!(Invalid, "token sequence is empty");
        }
        if tokens.ncols() != self.spec.embed_dim {
            bail!(
                Invalid,
                "token width {} does not match the encoder's {}",
                tokens.ncols(),
                self.spec.embed_dim
            );
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            bail!(Invalid, "token embeddings contain non-finite values");
        }
        Ok(tokens.sum_axis(ndarray::Axis(0)) + &self.text_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ToyEncoderSpec {
        ToyEncoderSpec {
            embed_dim: 16,
            seed: 7,
            sharpness: 30.0,
            void_scale: 0.02,
            text_offset: 1.0,
            patch_size: 16,
            concepts: vec![
                ToyConcept {
                    name: "boat".into(),
                    color: [0.85, 0.15, 0.1],
                    text_links: vec![("water".into(), 0.45)],
                },
                ToyConcept {
                    name: "water".into(),
                    color: [0.08, 0.25, 0.7],
                    text_links: vec![],
                },
                ToyConcept {
                    name: "sea wall".into(),
                    color: [0.6, 0.6, 0.6],
                    text_links: vec![],
                },
            ],
        }
    }

    fn unit_norm(v: &Array1<f64>) -> bool {
        (v.dot(v).sqrt() - 1.0).abs() < 1e-9
    }

    #[test]
    fn zero_image_encodes_to_void_axis() {
        let enc = ToyEncoder::new(spec()).unwrap();
        let v = enc.encode_image(&Array3::zeros((8, 8, 3))).unwrap();
        assert!((v.clone() - enc.void_axis()).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn text_and_image_outputs_are_unit_norm() {
        let enc = ToyEncoder::new(spec()).unwrap();
        let img = Array3::from_shape_fn((12, 10, 3), |(y, x, c)| ((y + 2 * x + 3 * c) % 7) as f64 / 7.0);
        assert!(unit_norm(&enc.encode_image(&img).unwrap()));
        let a = enc.encode_text("a photo of boat").unwrap();
        let b = enc.encode_text("a photo of boat").unwrap();
        assert!(unit_norm(&a));
        assert_eq!(a, b);
    }

    #[test]
    fn multi_word_concepts_are_single_tokens() {
        let enc = ToyEncoder::new(spec()).unwrap();
        assert_eq!(enc.tokenize("a photo of sea wall").unwrap().nrows(), 4);
        let t = enc.tokenize("sea wall").unwrap();
        assert!((t[[0, 3]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_prompts_see_every_image_positively() {
        use rand_distr::Normal;
        let enc = ToyEncoder::new(spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.02).unwrap();
        for _ in 0..50 {
            let rows = Array2::from_shape_simple_fn((30, 16), || normal.sample(&mut rng));
            let u = enc.encode_tokens(rows.view()).unwrap();
            for c in &enc.spec().concepts {
                let img = Array3::from_shape_fn((8, 8, 3), |(_, _, ch)| c.color[ch]);
                assert!(u.dot(&enc.encode_image(&img).unwrap()) > 0.1);
            }
        }
    }

    #[test]
    fn hashed_tokens_avoid_concept_axes() {
        let enc = ToyEncoder::new(spec()).unwrap();
        let t = enc.tokenize("photo").unwrap();
        for j in 0..4 {
            assert_eq!(t[[0, j]], 0.0);
        }
    }

    #[test]
    fn empty_inputs_are_errors() {
        let enc = ToyEncoder::new(spec()).unwrap();
        assert!(enc.tokenize("  ,, ").is_err());
        assert!(enc.encode_tokens(Array2::zeros((0, 16)).view()).is_err());
        let mut img = Array3::zeros((4, 4, 3));
        img[[0, 0, 0]] = f64::NAN;
        assert!(enc.encode_image(&img).is_err());
    }

    #[test]
    fn patch_counts() {
        let enc = ToyEncoder::new(spec()).unwrap();
        let img = Array3::from_elem((32, 32, 3), 0.4);
        let patches = enc.encode_patches(&img).unwrap();
        assert_eq!(patches.len(), 4);
        assert!(patches.iter().all(unit_norm));
        let err = enc.encode_patches(&Array3::from_elem((20, 32, 3), 0.4)).unwrap_err();
        assert!(err.to_string().contains("multiple of 16"), "{err}");
    }

    #[test]
    fn vit_b32_geometry() {
        let mut s = spec();
        s.patch_size = 32;
        let enc = ToyEncoder::new(s).unwrap();
        let img = Array3::from_elem((224, 224, 3), 0.3);
        assert_eq!(enc.encode_patches(&img).unwrap().len(), 49);
    }

    #[test]
    fn catalog_spec_builds() {
        let cat = ClassCatalog::new(["cat", "dog", "potted plant"]).unwrap();
        let enc = ToyEncoder::new(ToyEncoderSpec::for_catalog(&cat, 1)).unwrap();
        assert_eq!(enc.tokenize("a photo of potted plant").unwrap().nrows(), 4);
    }

    #[test]
    fn degree_one_homogeneous_lift() {
        let enc = ToyEncoder::new(spec()).unwrap();
        let x = [0.3, 0.5, 0.2];
        let (phi, _, _) = enc.lift(x);
        let (phi_half, _, _) = enc.lift([0.15, 0.25, 0.1]);
        for (a, b) in phi.iter().zip(&phi_half) {
            assert!((a * 0.5 - b).abs() < 1e-12);
        }
    }
}
