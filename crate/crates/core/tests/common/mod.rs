#![allow(dead_code)]

use std::path::Path;

use ndarray::Array2;
use semples::cam::{cams_to_pseudo_mask, compute_miou, extract_cams};
use semples::config::{default_config, LossFlags, RunConfig};
use semples::data::{load_corpus, read_gray, ClassCatalog, LabeledImage, CLASSES_FILE};
use semples::encoder::load_encoder;
use semples::masking::MaskGenerator;
use semples::synth::{self, MASKS_DIR, TEXTURE_DIR};
use semples::trainer::{run_pipeline, TrainOptions};

pub struct ToyCorpus {
    pub catalog: ClassCatalog,
    pub samples: Vec<LabeledImage>,
    pub truth: Vec<Array2<u8>>,
    pub texture: Vec<Array2<bool>>,
    pub encoder: Box<dyn semples::DualEncoder>,
}

/// Writes a toy corpus to `dir` and reads it back the way the CLI does.
pub fn toy_corpus(dir: &Path, seed: u64) -> ToyCorpus {
    synth::make_toy_corpus(dir, seed).unwrap();
    let catalog = ClassCatalog::from_file(&dir.join(CLASSES_FILE)).unwrap();
    let samples = load_corpus(dir, &catalog).unwrap();
    let truth = samples
        .iter()
        .map(|s| read_gray(&dir.join(MASKS_DIR).join(format!("{}.png", s.id()))).unwrap())
        .collect();
    let texture = samples
        .iter()
        .map(|s| read_gray(&dir.join(TEXTURE_DIR).join(format!("{}.png", s.id()))).unwrap().mapv(|v| v > 127))
        .collect();
    let encoder = load_encoder(&dir.join(synth::ENCODER_FILE)).unwrap();
    ToyCorpus {
        catalog,
        samples,
        truth,
        texture,
        encoder,
    }
}

/// Mean raw activation of the boat channel over water pixels and over boat
/// pixels, across images labelled with boats.
pub fn boat_activation(gen: &MaskGenerator, corpus: &ToyCorpus) -> (f64, f64) {
    let (mut tex, mut nt, mut fg, mut nf) = (0.0, 0usize, 0.0, 0usize);
    for ((s, truth), texture) in corpus.samples.iter().zip(&corpus.truth).zip(&corpus.texture) {
        if !s.is_present(0) {
            continue;
        }
        let masks = gen.generate_masks(s.pixels()).unwrap();
        let m = masks.channel(0);
        for ((y, x), &v) in m.indexed_iter() {
            if texture[[y, x]] {
                tex += v;
                nt += 1;
            }
            if truth[[y, x]] == 1 {
                fg += v;
                nf += 1;
            }
        }
    }
    (tex / nt as f64, fg / nf as f64)
}

pub fn pseudo_mask_miou(gen: &MaskGenerator, corpus: &ToyCorpus, threshold: f64) -> f64 {
    let preds: Vec<_> = corpus
        .samples
        .iter()
        .map(|s| cams_to_pseudo_mask(&extract_cams(gen, s.pixels(), s.labels()).unwrap(), threshold).unwrap())
        .collect();
    let ids: Vec<String> = corpus.samples.iter().map(|s| s.id().to_string()).collect();
    compute_miou(&preds, &corpus.truth, &ids, &corpus.catalog).unwrap().miou
}

pub struct ToyOutcome {
    pub texture_a: f64,
    pub texture_c: f64,
    pub fg_a: f64,
    pub fg_c: f64,
    pub miou_all: f64,
    pub miou_match_only: f64,
}

impl ToyOutcome {
    pub fn texture_reduction(&self) -> f64 {
        1.0 - self.texture_c / self.texture_a
    }

    pub fn fg_retention(&self) -> f64 {
        self.fg_c / self.fg_a
    }
}

pub fn toy_config() -> RunConfig {
    default_config("toy").unwrap()
}

pub fn run_toy_experiment(corpus: &ToyCorpus, config: &RunConfig) -> ToyOutcome {
    let opts = TrainOptions::default();
    let full = run_pipeline(&corpus.samples, &corpus.catalog, corpus.encoder.as_ref(), config, &opts).unwrap();
    let mut ablation = config.clone();
    ablation.enabled_losses = LossFlags::MATCH_ONLY;
    let base = run_pipeline(&corpus.samples, &corpus.catalog, corpus.encoder.as_ref(), &ablation, &opts).unwrap();
    let (texture_a, fg_a) = boat_activation(&full.match_generator, corpus);
    let (texture_c, fg_c) = boat_activation(&full.generator, corpus);
    ToyOutcome {
        texture_a,
        texture_c,
        fg_a,
        fg_c,
        miou_all: pseudo_mask_miou(&full.generator, corpus, semples::cam::DEFAULT_THRESHOLD),
        miou_match_only: pseudo_mask_miou(&base.generator, corpus, semples::cam::DEFAULT_THRESHOLD),
    }
}

/// Central finite differences of a scalar function.
pub fn finite_diff(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let up = f(&work);
            work[i] = orig - step;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semples::objectives::{clamped_cos, loss_match, loss_prompt, loss_refine};

pub const EPS: f64 = 1e-4;

fn unit_ish(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.random_range(0.05..1.0) + rng.random_range(-0.4..0.4));
    let n = v.dot(&v).sqrt();
    v * (rng.random_range(0.9995..1.0005) / n)
}

/// Random `(v_f, v_b, u_f, u_b)` whose pairwise cosines stay at least
/// `margin` away from both clamp kinks.
pub fn random_instance(rng: &mut ChaCha8Rng, d: usize, margin: f64) -> [Array1<f64>; 4] {
    loop {
        let vs = [unit_ish(rng, d), unit_ish(rng, d), unit_ish(rng, d), unit_ish(rng, d)];
        let ok = (0..4).all(|i| {
            (i + 1..4).all(|j| {
                let c = clamped_cos(vs[i].view(), vs[j].view(), EPS).unwrap();
                c > EPS + margin && c < 1.0 - EPS - margin
            })
        });
        if ok {
            return vs;
        }
    }
}

fn view(x: &[f64]) -> ArrayView1<'_, f64> {
    ArrayView1::from(x)
}

/// Worst relative error between analytic and finite-difference gradients
/// of the three losses, over every input, on `n` random instances.
pub fn loss_gradient_suite(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let [v_f, v_b, u_f, u_b] = random_instance(&mut rng, 16, 0.02);
        let lambda_b = rng.random_range(0.1..3.0);
        let lambda_t = rng.random_range(0.01..1.0);
        let (vf, vb, uf, ub) = (v_f.to_vec(), v_b.to_vec(), u_f.to_vec(), u_b.to_vec());
        let mut check = |analytic: &Array1<f64>, numeric: Vec<f64>| {
            worst = worst.max(rel_err(analytic.as_slice().unwrap(), &numeric));
        };

        let m = loss_match(v_f.view(), v_b.view(), u_f.view(), lambda_b, EPS).unwrap();
        let f = |a: &[f64], b: &[f64], c: &[f64]| loss_match(view(a), view(b), view(c), lambda_b, EPS).unwrap().value;
        check(&m.grad_vf, finite_diff(&vf, FD_STEP, |x| f(x, &vb, &uf)));
        check(&m.grad_vb, finite_diff(&vb, FD_STEP, |x| f(&vf, x, &uf)));
        check(&m.grad_uf, finite_diff(&uf, FD_STEP, |x| f(&vf, &vb, x)));

        let p = loss_prompt(u_b.view(), v_b.view(), u_f.view(), lambda_t, EPS).unwrap();
        let f = |a: &[f64], b: &[f64], c: &[f64]| loss_prompt(view(a), view(b), view(c), lambda_t, EPS).unwrap().total;
        check(&p.grad_ub, finite_diff(&ub, FD_STEP, |x| f(x, &vb, &uf)));
        check(&p.grad_vb, finite_diff(&vb, FD_STEP, |x| f(&ub, x, &uf)));
        check(&p.grad_uf, finite_diff(&uf, FD_STEP, |x| f(&ub, &vb, x)));
        let fi = |a: &[f64]| loss_prompt(view(a), v_b.view(), u_f.view(), lambda_t, EPS).unwrap().image_term;
        check(&p.grad_ub_image, finite_diff(&ub, FD_STEP, fi));
        let ft = |a: &[f64]| loss_prompt(view(a), v_b.view(), u_f.view(), lambda_t, EPS).unwrap().text_term;
        check(&p.grad_ub_text, finite_diff(&ub, FD_STEP, ft));

        let r = loss_refine(v_f.view(), u_b.view(), EPS).unwrap();
        let f = |a: &[f64], b: &[f64]| loss_refine(view(a), view(b), EPS).unwrap().value;
        check(&r.grad_vf, finite_diff(&vf, FD_STEP, |x| f(x, &ub)));
        check(&r.grad_ub, finite_diff(&ub, FD_STEP, |x| f(&vf, x)));
    }
    worst
}

/// `(description, expected, actual, tolerance)` for the scalar loss examples.
pub fn loss_value_cases() -> Vec<(&'static str, f64, f64, f64)> {
    use semples::objectives::loss_total;
    let e = |i: usize, d: usize| {
        let mut v = Array1::zeros(d);
        v[i] = 1.0;
        v
    };
    let (x, y, z) = (e(0, 4), e(1, 4), e(2, 4));
    let diag = Array1::from(vec![0.7, 0.0, (1.0f64 - 0.49).sqrt(), 0.0]);
    let neg_log_eps = -(1e-4f64).ln();
    let m = |vf: &Array1<f64>, vb: &Array1<f64>, uf: &Array1<f64>, lb: f64| {
        loss_match(vf.view(), vb.view(), uf.view(), lb, EPS).unwrap().value
    };
    let p = |ub: &Array1<f64>, vb: &Array1<f64>, uf: &Array1<f64>, lt: f64| {
        loss_prompt(ub.view(), vb.view(), uf.view(), lt, EPS).unwrap()
    };
    let r = |vf: &Array1<f64>, ub: &Array1<f64>| loss_refine(vf.view(), ub.view(), EPS).unwrap().value;
    vec![
        ("clamped_cos(a, a) = 1", 1.0, clamped_cos(x.view(), x.view(), EPS).unwrap(), 1e-15),
        ("clamped_cos of orthogonal vectors = eps", 1e-4, clamped_cos(x.view(), y.view(), EPS).unwrap(), 0.0),
        ("clamped_cos passes 0.7 through", 0.7, clamped_cos(x.view(), diag.view(), EPS).unwrap(), 1e-12),
        ("match with v_f = u_f, v_b orthogonal", -2.4 * (1.0f64 - 1e-4).ln(), m(&x, &y, &x, 2.4), 1e-9),
        ("match first term with v_f orthogonal to u_f", neg_log_eps, m(&y, &z, &x, 0.0), 1e-9),
        ("-log(1e-4)", 9.210340371976184, neg_log_eps, 1e-9),
        ("match with lambda_b = 0 is the foreground term", -(0.7f64).ln(), m(&diag, &x, &x, 0.0), 1e-9),
        ("ideal prompt total", -0.02 * (1.0f64 - 1e-4).ln(), p(&x, &x, &y, 0.02).total, 1e-9),
        ("prompt_T with u_b = u_f", neg_log_eps, p(&x, &y, &x, 0.02).text_term, 1e-9),
        ("prompt with lambda_T = 0 is prompt_I", p(&diag, &x, &y, 0.0).image_term, p(&diag, &x, &y, 0.0).total, 0.0),
        ("refine with v_f orthogonal to u_b", -(1.0f64 - 1e-4).ln(), r(&x, &y), 1e-9),
        ("refine with v_f = u_b", neg_log_eps, r(&x, &x), 1e-9),
        ("total 1 + 0.05 * 2", 1.1, loss_total(1.0, 2.0, 0.05), 1e-12),
        ("total with lambda = 0", 1.0, loss_total(1.0, 2.0, 0.0), 0.0),
        ("total 0 + 0.2 * refine", 0.4, loss_total(0.0, 2.0, 0.2), 0.0),
    ]
}

/// mIoU by explicit pixel sets: for every label, the sets of
/// `(sample, y, x)` it covers in prediction and truth.
pub fn brute_force_miou(preds: &[Array2<u8>], truths: &[Array2<u8>], labels: usize) -> (Vec<Option<f64>>, f64) {
    use std::collections::HashSet;
    let mut per_class = Vec::new();
    for c in 0..labels as u8 {
        let set = |maps: &[Array2<u8>]| -> HashSet<(usize, usize, usize)> {
            maps.iter()
                .enumerate()
                .flat_map(|(i, m)| m.indexed_iter().filter(|(_, v)| **v == c).map(move |((y, x), _)| (i, y, x)))
                .collect()
        };
        let (p, t) = (set(preds), set(truths));
        let union = p.union(&t).count();
        let inter = p.intersection(&t).count();
        per_class.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    (per_class, miou)
}

/// `(trials passed, first failure)` comparing `compute_miou` with the oracle on random 8x8 maps.
pub fn miou_oracle_trials(seed: u64, trials: usize) -> (usize, Option<String>) {
    use semples::cam::{compute_miou, PseudoMask};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut failure = None;
    for t in 0..trials {
        let k = rng.random_range(1..6usize);
        let n = rng.random_range(1..4usize);
        let catalog = ClassCatalog::new((0..k).map(|i| format!("c{i}"))).unwrap();
        let maps = |rng: &mut ChaCha8Rng| -> Vec<Array2<u8>> {
            (0..n).map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_range(0..=k as u8))).collect()
        };
        let (preds, truths) = (maps(&mut rng), maps(&mut rng));
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let pm: Vec<PseudoMask> = preds.iter().cloned().map(PseudoMask::new).collect();
        let report = compute_miou(&pm, &truths, &ids, &catalog).unwrap();
        let (per_class, miou) = brute_force_miou(&preds, &truths, k + 1);
        if report.per_class_iou == per_class && report.miou == miou {
            passed += 1;
        } else if failure.is_none() {
            failure = Some(format!("trial {t}: {:?} vs {:?}", report.per_class_iou, per_class));
        }
    }
    (passed, failure)
}

pub fn two_by_two_miou() -> f64 {
    use semples::cam::{compute_miou, PseudoMask};
    let pred = PseudoMask::new(ndarray::arr2(&[[0, 1], [1, 1]]));
    let truth = ndarray::arr2(&[[0u8, 1], [0, 1]]);
    let catalog = ClassCatalog::new(["thing"]).unwrap();
    compute_miou(&[pred], &[truth], &["pair".to_string()], &catalog).unwrap().miou
}

/// Builds a prompt whose embedding points at concept `concept` of the toy
/// encoder and an image where only patch `target` shows that concept.
/// Returns the heatmap argmax patch and the oracle argmax patch.
pub fn constructed_patch_case(dir: &Path, target: usize) -> ((usize, usize), (usize, usize), (usize, usize)) {
    use semples::cam::visualize_prompt_regions;
    use semples::prompts::PromptBank;
    use semples::synth::{toy_catalog, toy_encoder_spec};
    use semples::DualEncoder;
    let spec = toy_encoder_spec(0);
    let enc = semples::ToyEncoder::new(spec.clone()).unwrap();
    let catalog = toy_catalog();
    let mut bank = PromptBank::init(&catalog, 4, &enc, 1).unwrap();
    let (l, d) = (bank.prompt_len(), bank.token_dim());
    // class 0 prompt: water axis
    bank.params_mut()[..l * d].iter_mut().for_each(|v| *v = 0.0);
    bank.params_mut()[2 + 1] = 10.0;
    let (wall, water) = (spec.concepts[3].color, spec.concepts[2].color);
    let (gh, gw) = (3, 4);
    let img = ndarray::Array3::from_shape_fn((16 * gh, 16 * gw, 3), |(y, x, c)| {
        if (y / 16) * gw + x / 16 == target {
            water[c]
        } else {
            wall[c]
        }
    });
    let out = dir.join("heat.png");
    let heat = visualize_prompt_regions(&bank, &enc, &img, 0, &out).unwrap();
    let png = semples::data::read_rgb(&out).unwrap();
    let argmax = |m: &Array2<f64>| {
        let mut best = (0, 0);
        for ((y, x), v) in m.indexed_iter() {
            if *v > m[best] {
                best = (y, x);
            }
        }
        best
    };
    let u = bank.background_embedding(0, &enc).unwrap();
    let patches = enc.encode_patches(&img).unwrap();
    let cos = Array2::from_shape_fn((gh, gw), |(y, x)| u.dot(&patches[y * gw + x]));
    let hm = argmax(&heat);
    ((hm.0 / 16, hm.1 / 16), argmax(&cos), (png.shape()[0], png.shape()[1]))
}
