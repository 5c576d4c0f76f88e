//! CAM extraction, pseudo masks, mIoU and prompt-region heatmaps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_gray, ClassCatalog, Image};
use crate::encoder::DualEncoder;
use crate::error::{bail, Error, Result};
use crate::masking::{MaskGenerator, MaskSet};
use crate::prompts::PromptBank;

pub const CAM_MAGIC: &[u8; 4] = b"SEMC";
pub const CAM_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.3;
/// Ground-truth pixels with this value are left out of the counts.
pub const IGNORE_LABEL: u8 = 255;

/// Generator masks gated by the image labels: absent classes are zeroed and
/// each remaining channel is divided by its maximum. All-zero channels stay zero.
pub fn extract_cams(gen: &MaskGenerator, img: &Image, labels: &[u8]) -> Result<MaskSet> {
    let masks = gen.generate_masks(img)?;
    if labels.len() != masks.classes() {
        bail!(
            Invalid,
            "label vector has {} entries for a {}-class generator",
            labels.len(),
            masks.classes()
        );
    }
    Ok(normalize_cams(masks.into_inner(), labels))
}

pub(crate) fn normalize_cams(mut raw: Array3<f64>, labels: &[u8]) -> MaskSet {
    for (k, mut ch) in raw.axis_iter_mut(Axis(0)).enumerate() {
        let max = ch.fold(0.0f64, |m, &v| m.max(v));
        if labels[k] == 0 || max <= 0.0 {
            ch.fill(0.0);
        } else {
            ch.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
        }
    }
    MaskSet::new(raw).expect("normalized CAMs lie in [0, 1]")
}

/// Hard per-pixel class map: `0` is background, `k + 1` is class `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    class_map: Array2<u8>,
}

impl PseudoMask {
    pub fn new(class_map: Array2<u8>) -> Self {
        Self { class_map }
    }

    pub fn class_map(&self) -> &Array2<u8> {
        &self.class_map
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_gray(path, &self.class_map)
    }
}

/// Argmax over channels where the maximum reaches `bg_threshold`; ties go
/// to the lowest class index.
pub fn cams_to_pseudo_mask(cams: &MaskSet, bg_threshold: f64) -> Result<PseudoMask> {
    if !(0.0..=1.0).contains(&bg_threshold) {
        bail!(Invalid, "background threshold {bg_threshold} is outside [0, 1]");
    }
    if cams.classes() >= IGNORE_LABEL as usize {
        bail!(Invalid, "{} classes do not fit an 8-bit class map", cams.classes());
    }
    let v = cams.values();
    let map = Array2::from_shape_fn((cams.height(), cams.width()), |(y, x)| {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..cams.classes() {
            if v[[k, y, x]] > best_v {
                best_v = v[[k, y, x]];
                best = k;
            }
        }
        if best_v >= bg_threshold {
            (best + 1) as u8
        } else {
            0
        }
    });
    Ok(PseudoMask::new(map))
}

/// One-hot CAMs of a class map; the inverse of thresholding.
pub fn pseudo_mask_to_one_hot(mask: &PseudoMask, classes: usize) -> Result<MaskSet> {
    let (h, w) = mask.class_map.dim();
    let mut out = Array3::zeros((classes, h, w));
    for ((y, x), &c) in mask.class_map.indexed_iter() {
        if c as usize > classes {
            bail!(Invalid, "class map value {c} exceeds {classes} classes");
        }
        if c > 0 {
            out[[c as usize - 1, y, x]] = 1.0;
        }
    }
    MaskSet::new(out)
}

/// Per-class IoU with background at index 0. `None` marks a class absent
/// from both predictions and truth.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

#[derive(Serialize, Deserialize)]
struct IoUJson {
    per_class: BTreeMap<String, Option<f64>>,
    miou: f64,
}

impl IoUReport {
    pub fn to_json(&self) -> String {
        let per_class = self
            .class_names
            .iter()
            .cloned()
            .zip(self.per_class_iou.iter().copied())
            .collect();
        serde_json::to_string_pretty(&IoUJson {
            per_class,
            miou: self.miou,
        })
        .expect("report serializes")
    }
}

/// Integer intersection and union counters for `classes + 1` labels.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Counts {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl Counts {
    fn new(n: usize) -> Self {
        Self {
            inter: vec![0; n],
            union: vec![0; n],
        }
    }

    fn merge(mut self, o: Counts) -> Counts {
        for i in 0..self.inter.len() {
            self.inter[i] += o.inter[i];
            self.union[i] += o.union[i];
        }
        self
    }
}

/// Dataset-level mIoU. Predictions and truths are paired by position;
/// `ids` names samples in error messages. Truth pixels equal to
/// [`IGNORE_LABEL`] are skipped.
pub fn compute_miou(
    preds: &[PseudoMask],
    truths: &[Array2<u8>],
    ids: &[String],
    catalog: &ClassCatalog,
) -> Result<IoUReport> {
    if preds.len() != truths.len() || preds.len() != ids.len() {
        bail!(
            Data,
            "{} predictions, {} truths and {} ids do not line up",
            preds.len(),
            truths.len(),
            ids.len()
        );
    }
    let n = catalog.len() + 1;
    let counts = preds
        .par_iter()
        .zip(truths.par_iter())
        .zip(ids.par_iter())
        .map(|((p, t), id)| -> Result<Counts> {
            let p = p.class_map();
            if p.dim() != t.dim() {
                bail!(Data, "sample {id}: prediction is {:?} but truth is {:?}", p.dim(), t.dim());
            }
            let mut c = Counts::new(n);
            for (&a, &b) in p.iter().zip(t.iter()) {
                if b == IGNORE_LABEL {
                    continue;
                }
                let (a, b) = (a as usize, b as usize);
                if a >= n || b >= n {
                    bail!(Data, "sample {id}: class value {} out of range", a.max(b));
                }
                if a == b {
                    c.inter[a] += 1;
                    c.union[a] += 1;
                } else {
                    c.union[a] += 1;
                    c.union[b] += 1;
                }
            }
            Ok(c)
        })
        .try_reduce(|| Counts::new(n), |a, b| Ok(a.merge(b)))?;

    let per_class_iou: Vec<Option<f64>> = (0..n)
        .map(|i| (counts.union[i] > 0).then(|| counts.inter[i] as f64 / counts.union[i] as f64))
        .collect();
    let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let mut class_names = vec!["background".to_string()];
    class_names.extend(catalog.names().iter().cloned());
    Ok(IoUReport {
        class_names,
        per_class_iou,
        miou,
    })
}

/// Writes a CAM container: magic, version, K, H, W, then `f32` values.
pub fn write_cams(path: &Path, cams: &MaskSet) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + cams.values().len() * 4);
    buf.extend_from_slice(CAM_MAGIC);
    for v in [CAM_VERSION, cams.classes() as u32, cams.height() as u32, cams.width() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in cams.values().iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_cams(path: &Path) -> Result<MaskSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != CAM_MAGIC {
        return Err(bad("not a CAM container"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != CAM_VERSION as usize {
        return Err(bad("unsupported CAM container version"));
    }
    let (k, h, w) = (word(1), word(2), word(3));
    let body = &bytes[20..];
    if body.len() != k * h * w * 4 {
        return Err(bad("CAM payload length does not match its header"));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let arr = Array3::from_shape_vec((k, h, w), values).map_err(|e| bad(&e.to_string()))?;
    MaskSet::new(arr).map_err(|e| bad(&e.to_string()))
}

/// Cosine similarity between prompt `k` and each patch, as a patch grid.
pub fn prompt_patch_similarity(
    bank: &PromptBank,
    encoder: &dyn DualEncoder,
    img: &Image,
    k: usize,
) -> Result<Array2<f64>> {
    let u = bank.background_embedding(k, encoder)?;
    let patches = encoder.encode_patches(img)?;
    let p = encoder.patch_size();
    let (gh, gw) = (img.shape()[0] / p, img.shape()[1] / p);
    let un = u.dot(&u).sqrt();
    let sims: Vec<f64> = patches
        .iter()
        .map(|v| {
            let d = un * v.dot(v).sqrt();
            if d > 0.0 {
                u.dot(v) / d
            } else {
                0.0
            }
        })
        .collect();
    Array2::from_shape_vec((gh, gw), sims).map_err(|e| Error::Invalid(e.to_string()))
}

/// Min-max normalization; a constant map becomes 0.5 everywhere.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = map.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if (hi - lo).is_nan() || hi - lo <= 1e-12 {
        return Array2::from_elem(map.raw_dim(), 0.5);
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Blue to white to red ramp for values in `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let s = t * 2.0;
        (s, s, 1.0)
    } else {
        let s = (1.0 - t) * 2.0;
        (1.0, s, s)
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

pub const HEATMAP_MAGIC: &[u8; 4] = b"SEMH";

/// Renders the prompt-to-patch similarity of class `k` at image resolution.
///
/// Writes `out_path` (RGB PNG through [`colormap`]) and a sidecar with the
/// extension `.f32`: magic `SEMH`, H and W as `u32`, then the normalized
/// heatmap as `f32`, all little-endian. Returns the normalized map.
pub fn visualize_prompt_regions(
    bank: &PromptBank,
    encoder: &dyn DualEncoder,
    img: &Image,
    k: usize,
    out_path: &Path,
) -> Result<Array2<f64>> {
    let grid = min_max_normalize(&prompt_patch_similarity(bank, encoder, img, k)?);
    let p = encoder.patch_size();
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let heat = Array2::from_shape_fn((h, w), |(y, x)| grid[[y / p, x / p]]);

    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in heat.indexed_iter() {
        rgb.put_pixel(x as u32, y as u32, image::Rgb(colormap(v)));
    }
    rgb.save(out_path).map_err(|e| Error::Image {
        path: out_path.to_path_buf(),
        source: e,
    })?;

    let sidecar = out_path.with_extension("f32");
    let mut f = std::fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut buf = Vec::with_capacity(12 + h * w * 4);
    buf.extend_from_slice(HEATMAP_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in heat.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| Error::io(&sidecar, e))?;
    Ok(heat)
}
