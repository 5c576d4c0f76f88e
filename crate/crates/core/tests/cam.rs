mod common;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semples::cam::{
    cams_to_pseudo_mask, compute_miou, extract_cams, pseudo_mask_to_one_hot, read_cams, write_cams, PseudoMask,
};
use semples::masking::{GeneratorArch, MaskGenerator, MaskSet};
use semples::ClassCatalog;

#[test]
fn two_by_two_case_is_seven_twelfths() {
    assert!((common::two_by_two_miou() - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn agrees_with_pixel_set_counting() {
    let (passed, failure) = common::miou_oracle_trials(17, 100);
    assert_eq!(passed, 100, "{failure:?}");
}

#[test]
fn perfect_and_disjoint_predictions() {
    let catalog = ClassCatalog::new(["a", "b"]).unwrap();
    let truth = ndarray::arr2(&[[0u8, 1], [2, 2]]);
    let r = compute_miou(&[PseudoMask::new(truth.clone())], std::slice::from_ref(&truth), &["x".into()], &catalog).unwrap();
    assert_eq!(r.miou, 1.0);
    let pred = ndarray::arr2(&[[0u8, 0], [1, 1]]);
    let t2 = ndarray::arr2(&[[0u8, 0], [2, 2]]);
    let r = compute_miou(&[PseudoMask::new(pred)], &[t2], &["x".into()], &catalog).unwrap();
    assert_eq!(r.per_class_iou[1], Some(0.0));
}

#[test]
fn sample_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let catalog = ClassCatalog::new(["a", "b", "c"]).unwrap();
    let n = 12;
    let preds: Vec<Array2<u8>> = (0..n).map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_range(0..4))).collect();
    let truths: Vec<Array2<u8>> = (0..n).map(|_| Array2::from_shape_fn((8, 8), |_| rng.random_range(0..4))).collect();
    let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let pm = |p: &[Array2<u8>]| p.iter().cloned().map(PseudoMask::new).collect::<Vec<_>>();
    let base = compute_miou(&pm(&preds), &truths, &ids, &catalog).unwrap();
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let p: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
        let t: Vec<_> = order.iter().map(|&i| truths[i].clone()).collect();
        let id: Vec<_> = order.iter().map(|&i| ids[i].clone()).collect();
        assert_eq!(compute_miou(&pm(&p), &t, &id, &catalog).unwrap(), base);
    }
}

#[test]
fn rethresholding_one_hot_masks_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let cams = MaskSet::new(Array3::from_shape_fn((3, 6, 5), |_| rng.random_range(0.0..1.0))).unwrap();
        let threshold = rng.random_range(0.05..1.0);
        let mask = cams_to_pseudo_mask(&cams, threshold).unwrap();
        let again = cams_to_pseudo_mask(&pseudo_mask_to_one_hot(&mask, 3).unwrap(), threshold).unwrap();
        assert_eq!(mask, again);
    }
}

#[test]
fn cams_follow_the_labels() {
    let gen = MaskGenerator::new(GeneratorArch { hidden: 4, classes: 5 }, 1).unwrap();
    let img = Array3::from_shape_fn((10, 12, 3), |(y, x, c)| ((y + 2 * x + c) % 9) as f64 / 8.0);
    let cams = extract_cams(&gen, &img, &[0, 0, 0, 1, 0]).unwrap();
    for k in 0..5 {
        let max = cams.channel(k).fold(0.0f64, |m, v| m.max(*v));
        assert_eq!(max, if k == 3 { 1.0 } else { 0.0 });
    }
    assert!(cams.values().iter().all(|v| (0.0..=1.0).contains(v)));
    let all_bg = cams_to_pseudo_mask(&MaskSet::new(Array3::zeros((2, 3, 3))).unwrap(), 0.3).unwrap();
    assert!(all_bg.class_map().iter().all(|v| *v == 0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.cam");
    write_cams(&path, &cams).unwrap();
    let back = read_cams(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"SEMC");
    assert_eq!(bytes.len(), 20 + 5 * 10 * 12 * 4);
    assert!(back.values().iter().zip(cams.values()).all(|(a, b)| (a - b).abs() < 1e-7));
}

#[test]
fn heatmap_peaks_at_the_constructed_patch() {
    let dir = tempfile::tempdir().unwrap();
    for target in [0, 5, 11] {
        let (heat, oracle, dims) = common::constructed_patch_case(dir.path(), target);
        assert_eq!(dims, (48, 64));
        assert_eq!(oracle, (target / 4, target % 4));
        assert_eq!(heat, oracle);
    }
    let sidecar = std::fs::read(dir.path().join("heat.f32")).unwrap();
    assert_eq!(&sidecar[..4], b"SEMH");
    assert_eq!(sidecar.len(), 12 + 48 * 64 * 4);
}

#[test]
fn uniform_image_renders_mid_scale() {
    use semples::prompts::PromptBank;
    use semples::synth::{toy_catalog, toy_encoder_spec};
    let enc = semples::ToyEncoder::new(toy_encoder_spec(0)).unwrap();
    let bank = PromptBank::init(&toy_catalog(), 4, &enc, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let img = Array3::from_elem((32, 32, 3), 0.4);
    let heat = semples::cam::visualize_prompt_regions(&bank, &enc, &img, 1, &dir.path().join("h.png")).unwrap();
    assert!(heat.iter().all(|v| *v == 0.5));
    let bad = Array3::from_elem((30, 32, 3), 0.4);
    assert!(semples::cam::visualize_prompt_regions(&bank, &enc, &bad, 1, &dir.path().join("b.png")).is_err());
}
