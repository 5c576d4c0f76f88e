use ndarray::Array3;
use semples::encoder::{load_encoder, save_encoder, DualEncoder, EncoderCheckpoint};
use semples::synth::toy_encoder_spec;
use semples::ToyEncoder;

fn solid(color: [f64; 3], size: usize) -> Array3<f64> {
    Array3::from_shape_fn((size, size, 3), |(_, _, c)| color[c])
}

#[test]
fn toy_patterns_are_separable() {
    let spec = toy_encoder_spec(0);
    let enc = ToyEncoder::new(spec.clone()).unwrap();
    let embeddings: Vec<_> = spec
        .concepts
        .iter()
        .map(|c| enc.encode_image(&solid(c.color, 16)).unwrap())
        .collect();
    for (i, c) in spec.concepts.iter().enumerate() {
        let token = enc.tokenize(&c.name).unwrap();
        assert_eq!(token.nrows(), 1);
        let cos = embeddings[i].dot(&token.row(0));
        assert!(cos >= 0.9, "{}: cosine to its token {cos}", c.name);
        for j in 0..i {
            let cross = embeddings[i].dot(&embeddings[j]);
            assert!(cross <= 0.1, "{} vs {}: {cross}", c.name, spec.concepts[j].name);
        }
    }
}

#[test]
fn striped_water_stays_water() {
    let spec = toy_encoder_spec(0);
    let enc = ToyEncoder::new(spec).unwrap();
    let stripes = Array3::from_shape_fn((32, 32, 3), |(y, _, c)| {
        if y % 6 < 2 {
            [0.05, 0.2, 0.6][c]
        } else {
            [0.08, 0.25, 0.7][c]
        }
    });
    let v = enc.encode_image(&stripes).unwrap();
    assert!(v.dot(&enc.concept_axis(2)) > 0.99);
}

#[test]
fn checkpoints_reproduce_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("encoder.json");
    save_encoder(&path, &EncoderCheckpoint::Toy(toy_encoder_spec(8))).unwrap();
    let a = load_encoder(&path).unwrap();
    let b = load_encoder(&path).unwrap();
    let img = Array3::from_shape_fn((32, 32, 3), |(y, x, c)| ((y * 7 + x * 3 + c) % 11) as f64 / 11.0);
    assert_eq!(a.encode_image(&img).unwrap(), b.encode_image(&img).unwrap());
    assert_eq!(a.encode_text("a photo of a boat").unwrap(), b.encode_text("a photo of a boat").unwrap());
    assert_eq!(a.param_bytes(), b.param_bytes());
    assert_eq!(a.encode_patches(&img).unwrap().len(), 4);
    assert!(a.encode_patches(&solid([0.5; 3], 20)).unwrap_err().to_string().contains("multiple of 16"));
}

#[test]
fn hashed_words_depend_on_the_seed() {
    let a = ToyEncoder::new(toy_encoder_spec(1)).unwrap();
    let b = ToyEncoder::new(toy_encoder_spec(2)).unwrap();
    assert_ne!(a.tokenize("harbour").unwrap(), b.tokenize("harbour").unwrap());
    assert_eq!(a.tokenize("boat").unwrap(), b.tokenize("boat").unwrap());
}
