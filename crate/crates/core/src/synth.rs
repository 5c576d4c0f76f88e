//! Synthetic two-class corpus with a co-occurring background texture.
//!
//! Class `boat` (red hulls) sits on blue striped water in almost every image;
//! class `ball` (green discs) sits on a plain gray wall. A few images hold
//! both, on water. Alongside the corpus the generator writes per-pixel class
//! maps, water-texture masks and a matching toy encoder checkpoint.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{write_corpus, write_gray, ClassCatalog, LabeledImage};
use crate::encoder::{save_encoder, EncoderCheckpoint, ToyConcept, ToyEncoderSpec};
use crate::error::{bail, Error, Result};

pub const MASKS_DIR: &str = "masks";
pub const TEXTURE_DIR: &str = "texture";
pub const ENCODER_FILE: &str = "encoder.json";
pub const CLASS_NAMES: [&str; 2] = ["boat", "ball"];

const BOAT: [f64; 3] = [0.85, 0.15, 0.1];
const BALL: [f64; 3] = [0.15, 0.75, 0.2];
const WATER: [f64; 3] = [0.08, 0.25, 0.7];
const WATER_DARK: [f64; 3] = [0.05, 0.2, 0.6];
const WALL: [f64; 3] = [0.6, 0.6, 0.6];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCorpusSpec {
    pub samples: usize,
    pub size: usize,
    /// Fraction of boat images drawn on water.
    pub water_rate: f64,
    /// Fraction of images holding both classes.
    pub both_rate: f64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            samples: 64,
            size: 64,
            water_rate: 0.95,
            both_rate: 0.1,
        }
    }
}

/// The toy encoder matching the corpus palette. The `boat` text token leans
/// towards `water`, the way a class name absorbs its usual scenery.
pub fn toy_encoder_spec(seed: u64) -> ToyEncoderSpec {
    let concept = |name: &str, color, links: Vec<(String, f64)>| ToyConcept {
        name: name.to_string(),
        color,
        text_links: links,
    };
    ToyEncoderSpec {
        embed_dim: 32,
        seed,
        sharpness: 30.0,
        void_scale: 0.02,
        text_offset: 1.0,
        patch_size: 16,
        concepts: vec![
            concept("boat", BOAT, vec![("water".to_string(), 0.45)]),
            concept("ball", BALL, Vec::new()),
            concept("water", WATER, Vec::new()),
            concept("wall", WALL, Vec::new()),
        ],
    }
}

pub fn toy_catalog() -> ClassCatalog {
    ClassCatalog::new(CLASS_NAMES).expect("toy class names are valid")
}

/// One generated image with its ground truth.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub image: LabeledImage,
    /// `0` background, `k + 1` class `k`.
    pub class_map: Array2<u8>,
    /// Visible water pixels.
    pub texture: Array2<bool>,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Boat { water: bool },
    Ball,
    Both,
}

fn kinds(spec: &ToyCorpusSpec, rng: &mut ChaCha8Rng) -> Vec<Kind> {
    let n = spec.samples;
    let both = ((n as f64 * spec.both_rate).round() as usize).min(n);
    let rest = n - both;
    let boat_only = rest.div_ceil(2);
    let ball_only = rest - boat_only;
    // exact counts so the water rate holds by construction
    let with_boat = boat_only + both;
    let dry = ((with_boat as f64) * (1.0 - spec.water_rate)).floor() as usize;
    let dry = dry.min(boat_only);
    let mut out = Vec::with_capacity(n);
    out.extend((0..boat_only).map(|i| Kind::Boat { water: i >= dry }));
    out.extend((0..ball_only).map(|_| Kind::Ball));
    out.extend((0..both).map(|_| Kind::Both));
    out.shuffle(rng);
    out
}

fn paint_background(img: &mut Array3<f64>, water: bool, rng: &mut ChaCha8Rng) {
    let size = img.shape()[0];
    let period = rng.random_range(5..9);
    let phase = rng.random_range(0..period);
    for y in 0..size {
        for x in 0..size {
            let c = if !water {
                WALL
            } else if (y + phase) % period < 2 {
                WATER_DARK
            } else {
                WATER
            };
            for ch in 0..3 {
                img[[y, x, ch]] = c[ch];
            }
        }
    }
}

/// Trapezoid hull with its wide side up, inside `[x0, x1) x [y0, y1)`.
fn paint_boat(img: &mut Array3<f64>, map: &mut Array2<u8>, x0: usize, x1: usize, y0: usize, y1: usize) {
    let h = (y1 - y0) as f64;
    for y in y0..y1 {
        let inset = ((y - y0) as f64 / h * (x1 - x0) as f64 * 0.25) as usize;
        for x in x0 + inset..x1 - inset {
            for ch in 0..3 {
                img[[y, x, ch]] = BOAT[ch];
            }
            map[[y, x]] = 1;
        }
    }
}

fn paint_ball(img: &mut Array3<f64>, map: &mut Array2<u8>, cx: f64, cy: f64, r: f64) {
    let size = img.shape()[0];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                for ch in 0..3 {
                    img[[y, x, ch]] = BALL[ch];
                }
                map[[y, x]] = 2;
            }
        }
    }
}

/// Places a boat in the horizontal band `[lo, hi)`.
fn place_boat(img: &mut Array3<f64>, map: &mut Array2<u8>, lo: usize, hi: usize, rng: &mut ChaCha8Rng) {
    let size = img.shape()[0];
    let w = rng.random_range(size * 5 / 16..=size * 7 / 16).min(hi - lo - 2);
    let h = rng.random_range(size / 5..=size * 5 / 16);
    let x0 = rng.random_range(lo + 1..=hi - w - 1);
    let y0 = rng.random_range(1..=size - h - 1);
    paint_boat(img, map, x0, x0 + w, y0, y0 + h);
}

fn place_ball(img: &mut Array3<f64>, map: &mut Array2<u8>, lo: usize, hi: usize, rng: &mut ChaCha8Rng) {
    let size = img.shape()[0] as f64;
    let r = rng.random_range(size * 0.11..size * 0.17).min((hi - lo) as f64 / 2.0 - 1.0);
    let cx = rng.random_range(lo as f64 + r + 1.0..hi as f64 - r - 1.0);
    let cy = rng.random_range(r + 1.0..size - r - 1.0);
    paint_ball(img, map, cx, cy, r);
}

/// Generates the corpus in memory; deterministic in `seed`.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, seed: u64) -> Result<Vec<ToySample>> {
    if spec.samples == 0 || spec.size < 32 {
        bail!(Invalid, "toy corpus needs at least one sample of at least 32x32 pixels");
    }
    if !(0.0..=1.0).contains(&spec.water_rate) || !(0.0..=1.0).contains(&spec.both_rate) {
        bail!(Invalid, "toy corpus rates must lie in [0, 1]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.size;
    let width = (spec.samples - 1).to_string().len().max(3);
    kinds(spec, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut img = Array3::zeros((size, size, 3));
            let mut map = Array2::zeros((size, size));
            let water = !matches!(kind, Kind::Ball | Kind::Boat { water: false });
            paint_background(&mut img, water, &mut rng);
            let labels = match kind {
                Kind::Boat { .. } => {
                    place_boat(&mut img, &mut map, 0, size, &mut rng);
                    vec![1, 0]
                }
                Kind::Ball => {
                    place_ball(&mut img, &mut map, 0, size, &mut rng);
                    vec![0, 1]
                }
                Kind::Both => {
                    place_boat(&mut img, &mut map, 0, size / 2, &mut rng);
                    place_ball(&mut img, &mut map, size / 2, size, &mut rng);
                    vec![1, 1]
                }
            };
            let texture = map.mapv(|c| water && c == 0);
            Ok(ToySample {
                image: LabeledImage::new(format!("toy_{i:0width$}"), img, labels)?,
                class_map: map,
                texture,
            })
        })
        .collect()
}

/// Writes a toy corpus, its ground truth and the toy encoder under `out_dir`.
pub fn make_toy_corpus(out_dir: &Path, seed: u64) -> Result<Vec<ToySample>> {
    write_toy_corpus(out_dir, &ToyCorpusSpec::default(), seed)
}

pub fn write_toy_corpus(out_dir: &Path, spec: &ToyCorpusSpec, seed: u64) -> Result<Vec<ToySample>> {
    let samples = generate_toy_corpus(spec, seed)?;
    let catalog = toy_catalog();
    let images: Vec<LabeledImage> = samples.iter().map(|s| s.image.clone()).collect();
    write_corpus(out_dir, &images, &catalog)?;
    for dir in [MASKS_DIR, TEXTURE_DIR] {
        let d = out_dir.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in &samples {
        let name = format!("{}.png", s.image.id());
        write_gray(&out_dir.join(MASKS_DIR).join(&name), &s.class_map)?;
        write_gray(
            &out_dir.join(TEXTURE_DIR).join(&name),
            &s.texture.mapv(|t| if t { 255 } else { 0 }),
        )?;
    }
    save_encoder(&out_dir.join(ENCODER_FILE), &EncoderCheckpoint::Toy(toy_encoder_spec(seed)))?;
    Ok(samples)
}
