//! The mask generator and foreground/background triplet composition.

mod layers;

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::config::RunConfig;
use crate::data::{ClassCatalog, Image, LabeledImage};
use crate::error::{bail, Result};

use layers::{avg_pool2, avg_pool2_backward, bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward};

/// Per-class soft foreground masks, `K x H x W`, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet(Array3<f64>);

impl MaskSet {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            bail!(Invalid, "mask values must be finite and within [0, 1]");
        }
        Ok(MaskSet(values))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn channel(&self, k: usize) -> ArrayView2<'_, f64> {
        self.0.index_axis(Axis(0), k)
    }
}

/// Foreground image, background image and class text for one present class.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub foreground: Image,
    pub background: Image,
    pub text: String,
}

/// `(M * X, (1 - M) * X)` for a single-channel mask broadcast over colour.
pub fn split_by_mask(img: &Image, mask: ArrayView2<f64>) -> Result<(Image, Image)> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if mask.dim() != (h, w) {
        bail!(Invalid, "mask of {:?} does not match image of {h}x{w}", mask.dim());
    }
    let m = mask.insert_axis(Axis(2));
    let fg = img * &m;
    let bg = img * &(1.0 - &m);
    Ok((fg, bg))
}

/// Gradient with respect to the mask channel, given gradients with respect
/// to the foreground and background images of [`split_by_mask`].
pub fn split_by_mask_vjp(img: &Image, d_fg: &Image, d_bg: &Image) -> Array2<f64> {
    ((d_fg - d_bg) * img).sum_axis(Axis(2))
}

/// Builds the `(X_f, X_b, t)` triplet for class `k`, which must be present.
pub fn compose_triplet(
    sample: &LabeledImage,
    masks: &MaskSet,
    k: usize,
    catalog: &ClassCatalog,
) -> Result<Triplet> {
    if k >= masks.classes() || k >= catalog.len() {
        bail!(Invalid, "class index {k} out of range for {} classes", catalog.len());
    }
    if !sample.is_present(k) {
        bail!(
            Invalid,
            "sample {}: class {k} ({}) is not present",
            sample.id(),
            catalog.name(k).unwrap_or("?")
        );
    }
    let (foreground, background) = split_by_mask(sample.pixels(), masks.channel(k))?;
    Ok(Triplet {
        foreground,
        background,
        text: catalog.prompt_text(k)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub hidden: usize,
    pub classes: usize,
}

const IN_CHANNELS: usize = 3;
const KERNEL: usize = 3;

struct Layout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
    w3: std::ops::Range<usize>,
    b3: std::ops::Range<usize>,
}

impl GeneratorArch {
    fn layout(&self) -> Layout {
        let h = self.hidden;
        let k = self.classes;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Layout {
            w1: take(h * IN_CHANNELS * KERNEL * KERNEL),
            b1: take(h),
            w2: take(h * h * KERNEL * KERNEL),
            b2: take(h),
            w3: take(k * h),
            b3: take(k),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().b3.end
    }
}

/// Small convolutional encoder-decoder producing `K` sigmoid masks at input
/// resolution:
///
/// ```text
/// conv3x3(3->h) tanh -> avgpool 2x2 -> conv3x3(h->h) tanh -> conv1x1(h->K)
///   -> bilinear upsample to H x W -> sigmoid
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGenerator {
    arch: GeneratorArch,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    dims: (usize, usize),
    input: Vec<f64>,
    act1: Vec<f64>,
    pooled: Vec<f64>,
    act2: Vec<f64>,
    masks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub arch: GeneratorArch,
    pub classes: Vec<String>,
    pub config: RunConfig,
    /// Training phase that produced the parameters, if any.
    pub phase: Option<String>,
}

pub const GENERATOR_MAGIC: &[u8; 4] = b"SEMG";

impl MaskGenerator {
    /// Xavier-uniform weights, zero biases, all drawn from `seed`.
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        if arch.hidden == 0 || arch.classes == 0 {
            bail!(Invalid, "generator needs at least one hidden channel and one class");
        }
        let layout = arch.layout();
        let mut params = vec![0.0; arch.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        };
        let kk = KERNEL * KERNEL;
        fill(layout.w1, IN_CHANNELS * kk, arch.hidden * kk);
        fill(layout.w2, arch.hidden * kk, arch.hidden * kk);
        fill(layout.w3, arch.hidden, arch.classes);
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: GeneratorArch, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            bail!(
                Data,
                "generator expects {} parameters, got {}",
                arch.param_count(),
                params.len()
            );
        }
        if params.iter().any(|p| !p.is_finite()) {
            bail!(Data, "generator parameters contain non-finite values");
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> GeneratorArch {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn digest(&self) -> String {
        archive::digest(&self.params)
    }

    pub fn generate_masks(&self, img: &Image) -> Result<MaskSet> {
        let (masks, _) = self.forward(img)?;
        Ok(masks)
    }

    pub fn forward(&self, img: &Image) -> Result<(MaskSet, ForwardCache)> {
        if img.ndim() != 3 || img.shape()[2] != 3 {
            bail!(Invalid, "expected an H x W x 3 image, got {:?}", img.shape());
        }
        let (h, w) = (img.shape()[0], img.shape()[1]);
        if h < 2 || w < 2 {
            bail!(Invalid, "images must be at least 2x2, got {h}x{w}");
        }
        if img.iter().any(|v| !v.is_finite()) {
            bail!(Invalid, "image contains non-finite values");
        }
        let l = self.arch.layout();
        let hid = self.arch.hidden;
        let k = self.arch.classes;
        let p = &self.params;

        let mut input = vec![0.0; IN_CHANNELS * h * w];
        for ((y, x, c), v) in img.indexed_iter() {
            input[(c * h + y) * w + x] = 2.0 * v - 1.0;
        }
        let mut act1 = conv2d(&input, (IN_CHANNELS, h, w), &p[l.w1], &p[l.b1], hid, KERNEL);
        act1.iter_mut().for_each(|v| *v = v.tanh());
        let pooled = avg_pool2(&act1, (hid, h, w));
        let (h2, w2) = (h / 2, w / 2);
        let mut act2 = conv2d(&pooled, (hid, h2, w2), &p[l.w2], &p[l.b2], hid, KERNEL);
        act2.iter_mut().for_each(|v| *v = v.tanh());
        let logits = conv2d(&act2, (hid, h2, w2), &p[l.w3], &p[l.b3], k, 1);
        let mut masks = bilinear_resize(&logits, (k, h2, w2), (h, w));
        masks.iter_mut().for_each(|v| *v = sigmoid(*v));

        let set = MaskSet(Array3::from_shape_vec((k, h, w), masks.clone()).expect("shape matches"));
        Ok((
            set,
            ForwardCache {
                dims: (h, w),
                input,
                act1,
                pooled,
                act2,
                masks,
            },
        ))
    }

    /// Parameter gradient given `dL/dM` (`K x H x W`).
    pub fn backward(&self, cache: &ForwardCache, dmasks: &Array3<f64>) -> Result<Vec<f64>> {
        let (h, w) = cache.dims;
        let k = self.arch.classes;
        let hid = self.arch.hidden;
        if dmasks.dim() != (k, h, w) {
            bail!(Invalid, "mask gradient of {:?}, expected {:?}", dmasks.dim(), (k, h, w));
        }
        let l = self.arch.layout();
        let p = &self.params;
        let mut grad = vec![0.0; self.params.len()];
        let (h2, w2) = (h / 2, w / 2);

        let dlogits_up: Vec<f64> = dmasks
            .iter()
            .zip(&cache.masks)
            .map(|(g, m)| g * m * (1.0 - m))
            .collect();
        let dlogits = bilinear_resize_backward(&dlogits_up, (k, h2, w2), (h, w));

        let (gw3, rest) = grad[l.w3.start..].split_at_mut(l.w3.len());
        let mut dact2 = conv2d_backward(
            &cache.act2,
            (hid, h2, w2),
            &p[l.w3.clone()],
            k,
            1,
            &dlogits,
            gw3,
            &mut rest[..l.b3.len()],
            true,
        )
        .expect("input gradient requested");
        for (d, a) in dact2.iter_mut().zip(&cache.act2) {
            *d *= 1.0 - a * a;
        }

        let (gw2, rest) = grad[l.w2.start..].split_at_mut(l.w2.len());
        let dpooled = conv2d_backward(
            &cache.pooled,
            (hid, h2, w2),
            &p[l.w2.clone()],
            hid,
            KERNEL,
            &dact2,
            gw2,
            &mut rest[..l.b2.len()],
            true,
        )
        .expect("input gradient requested");
        let mut dact1 = avg_pool2_backward(&dpooled, (hid, h, w));
        for (d, a) in dact1.iter_mut().zip(&cache.act1) {
            *d *= 1.0 - a * a;
        }

        let (gw1, rest) = grad[l.w1.start..].split_at_mut(l.w1.len());
        conv2d_backward(
            &cache.input,
            (IN_CHANNELS, h, w),
            &p[l.w1.clone()],
            hid,
            KERNEL,
            &dact1,
            gw1,
            &mut rest[..l.b1.len()],
            false,
        );
        Ok(grad)
    }

    pub fn save(&self, path: &Path, manifest: &GeneratorManifest) -> Result<()> {
        if manifest.arch != self.arch {
            bail!(Invalid, "manifest architecture does not match the generator");
        }
        archive::write(path, GENERATOR_MAGIC, manifest, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, GeneratorManifest)> {
        let (manifest, params): (GeneratorManifest, Vec<f64>) = archive::read(path, GENERATOR_MAGIC)?;
        if manifest.classes.len() != manifest.arch.classes {
            bail!(Data, "{}: manifest lists {} classes for {} output channels", path.display(), manifest.classes.len(), manifest.arch.classes);
        }
        let gen = Self::from_params(manifest.arch, params)?;
        Ok((gen, manifest))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
