//! Corpus ingestion and the shared value types.
//!
//! A corpus lives on disk as
//!
//! ```text
//! root/images/<id>.png
//! root/labels.tsv        id<TAB>comma-separated class names, one sample per line
//! root/classes.txt       optional, one class name per line
//! ```
//!
//! Pixels are decoded to `[0, 1]` reals at load time. Encoder-specific
//! normalization is the encoder's business, so masks and triplets always
//! operate in raw image space.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

/// Image tensor laid out `H x W x 3`, values in `[0, 1]`.
pub type Image = Array3<f64>;

pub const LABELS_FILE: &str = "labels.tsv";
pub const IMAGES_DIR: &str = "images";
pub const CLASSES_FILE: &str = "classes.txt";

/// An RGB image with its multi-hot image-level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    id: String,
    pixels: Image,
    labels: Vec<u8>,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, pixels: Image, labels: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if pixels.ndim() != 3 || pixels.shape()[2] != 3 {
            bail!(Data, "sample {id}: pixels must be H x W x 3, got {:?}", pixels.shape());
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            bail!(Data, "sample {id}: pixel values must be finite and within [0, 1]");
        }
        if labels.iter().any(|&l| l > 1) {
            bail!(Data, "sample {id}: label vector must be binary");
        }
        if !labels.contains(&1) {
            bail!(Data, "sample {id}: at least one class must be present");
        }
        Ok(Self { id, pixels, labels })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &Image {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.labels.get(k).copied() == Some(1)
    }

    /// Indices of the classes flagged present, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Ordered class names plus the text template used to build class prompts.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
    template: String,
}

pub const DEFAULT_TEMPLATE: &str = "a photo of {}";

impl ClassCatalog {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::with_template(names, DEFAULT_TEMPLATE)
    }

    pub fn with_template<S: Into<String>>(
        names: impl IntoIterator<Item = S>,
        template: &str,
    ) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            bail!(Data, "class catalog is empty");
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                bail!(Data, "class names must be non-empty");
            }
            if name.contains(',') || name.contains('\t') {
                bail!(Data, "class name {name:?} contains a separator character");
            }
            if !seen.insert(name.as_str()) {
                bail!(Data, "duplicate class name {name:?}");
            }
        }
        if template.matches("{}").count() != 1 {
            bail!(Data, "template {template:?} must contain exactly one {{}} placeholder");
        }
        Ok(Self {
            names,
            template: template.to_string(),
        })
    }

    /// Reads one class name per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self::new(names)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, k: usize) -> Option<&str> {
        self.names.get(k).map(String::as_str)
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// The template filled with the name of class `k`.
    pub fn prompt_text(&self, k: usize) -> Result<String> {
        match self.names.get(k) {
            Some(name) => Ok(self.template.replacen("{}", name, 1)),
            None => bail!(Invalid, "class index {k} out of range for {} classes", self.len()),
        }
    }

    /// Hex SHA-256 over the template and the ordered names.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.template.as_bytes());
        for name in &self.names {
            h.update([0u8]);
            h.update(name.as_bytes());
        }
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads every sample listed in `root/labels.tsv`, ordered by id.
pub fn load_corpus(root: &Path, catalog: &ClassCatalog) -> Result<Vec<LabeledImage>> {
    let labels_path = root.join(LABELS_FILE);
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;

    let mut rows: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, names) = match line.split_once('\t') {
            Some((id, names)) => (id.trim(), names.trim()),
            None => (line.trim(), ""),
        };
        if id.is_empty() {
            bail!(Data, "{}:{}: empty sample id", labels_path.display(), lineno + 1);
        }
        if names.is_empty() {
            bail!(Data, "sample {id}: empty label row");
        }
        let mut vector = vec![0u8; catalog.len()];
        for name in names.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match catalog.index_of(name) {
                Some(k) => vector[k] = 1,
                None => bail!(Data, "sample {id}: unknown class {name:?}"),
            }
        }
        if rows.insert(id.to_string(), vector).is_some() {
            bail!(Data, "sample {id}: listed more than once");
        }
    }

    let images_dir = root.join(IMAGES_DIR);
    rows.into_par_iter()
        .map(|(id, labels)| {
            let path = images_dir.join(format!("{id}.png"));
            if !path.is_file() {
                bail!(Data, "sample {id}: missing image file {}", path.display());
            }
            let pixels = read_rgb(&path)?;
            LabeledImage::new(id, pixels, labels)
        })
        .collect()
}

/// Writes samples in the corpus layout. Pixels are quantized to 8 bits.
pub fn write_corpus(root: &Path, samples: &[LabeledImage], catalog: &ClassCatalog) -> Result<()> {
    let images_dir = root.join(IMAGES_DIR);
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut sorted: Vec<&LabeledImage> = samples.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut tsv = String::new();
    for sample in sorted {
        if sample.labels.len() != catalog.len() {
            bail!(
                Data,
                "sample {}: {} labels for a catalog of {}",
                sample.id,
                sample.labels.len(),
                catalog.len()
            );
        }
        write_rgb(&images_dir.join(format!("{}.png", sample.id)), &sample.pixels)?;
        let names: Vec<&str> = sample
            .present_classes()
            .into_iter()
            .map(|k| catalog.names[k].as_str())
            .collect();
        tsv.push_str(&sample.id);
        tsv.push('\t');
        tsv.push_str(&names.join(","));
        tsv.push('\n');
    }
    let labels_path = root.join(LABELS_FILE);
    fs::write(&labels_path, tsv).map_err(|e| Error::io(&labels_path, e))?;
    catalog.write_file(&root.join(CLASSES_FILE))
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

pub fn write_rgb(path: &Path, pixels: &Image) -> Result<()> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| to_u8(pixels[[y as usize, x as usize, c]]);
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

pub fn write_gray(path: &Path, values: &Array2<u8>) -> Result<()> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([values[[y as usize, x as usize]]])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
