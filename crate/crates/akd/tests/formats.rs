use std::fs;

use akd::checkpoint::{load_generator, params_digest, save_generator, Dtype};
use akd::dataset::{load_dataset, load_paired_folder, read_png, save_dataset, write_png, Labels};
use akd_core::data::{generate_synthetic_task, make_splits};
use akd_core::nets::{init_generator, GeneratorArch};
use akd_core::ImageTensor;

fn quantized(img: &ImageTensor) -> Vec<f64> {
    img.values().iter().map(|v| (((v + 1.0) * 127.5).round() / 127.5) - 1.0).collect()
}

#[test]
fn png_round_trip_is_quantized_identity() {
    let dir = tempfile::tempdir().unwrap();
    let img = generate_synthetic_task(3, 1, 8, 8).unwrap()[0].y().unwrap().clone();
    let p = dir.path().join("a.png");
    write_png(&img, &p).unwrap();
    let back = read_png(&p).unwrap();
    assert_eq!(back.shape(), img.shape());
    for (a, b) in back.values().iter().zip(quantized(&img)) {
        assert!((a - b).abs() < 1e-12);
    }
    // a second round trip is exact
    write_png(&back, &p).unwrap();
    assert_eq!(read_png(&p).unwrap(), back);
}

#[test]
fn dataset_round_trip_keeps_ids_order_and_vault() {
    let dir = tempfile::tempdir().unwrap();
    let pool = generate_synthetic_task(5, 14, 8, 8).unwrap();
    let splits = make_splits(&pool, 6, 4, 4, 5).unwrap();
    save_dataset(&splits, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    let ids = |v: &[akd_core::data::PairedSample]| v.iter().map(|s| s.id().to_string()).collect::<Vec<_>>();
    assert_eq!(ids(&back.train), ids(&splits.train));
    assert_eq!(ids(&back.proxy), ids(&splits.proxy));
    assert_eq!(ids(&back.test), ids(&splits.test));
    assert!(back.proxy.iter().all(|s| !s.is_labeled()));
    assert_eq!(back.vault.len(), 4);
    for (a, b) in back.train.iter().zip(&splits.train) {
        assert_eq!(a.x().values().to_vec(), quantized(b.x()));
    }
}

#[test]
fn missing_ground_truth_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let pool = generate_synthetic_task(1, 3, 8, 8).unwrap();
    akd::dataset::save_split(&pool, dir.path()).unwrap();
    let victim = format!("{}_y.png", pool[1].id());
    fs::remove_file(dir.path().join(&victim)).unwrap();
    let err = load_paired_folder(dir.path(), Labels::Required).unwrap_err().to_string();
    assert!(err.contains(pool[1].id()), "{err}");
}

#[test]
fn empty_or_missing_folder_gives_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_paired_folder(dir.path(), Labels::Auto).unwrap().is_empty());
    assert!(load_paired_folder(&dir.path().join("nope"), Labels::Required).unwrap().is_empty());
}

#[test]
fn unlabeled_split_rejects_ground_truths() {
    let dir = tempfile::tempdir().unwrap();
    let pool = generate_synthetic_task(1, 2, 8, 8).unwrap();
    akd::dataset::save_split(&pool, dir.path()).unwrap();
    assert!(load_paired_folder(dir.path(), Labels::Forbidden).is_err());
    assert_eq!(load_paired_folder(dir.path(), Labels::Auto).unwrap().len(), 2);
}

fn arch() -> GeneratorArch {
    GeneratorArch { image_size: 8, depth: 2, base_channels: 2, ..Default::default() }
}

#[test]
fn float64_checkpoint_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let g = init_generator(&arch(), 11).unwrap();
    save_generator(&g, dir.path(), Dtype::Float64).unwrap();
    let back = load_generator(dir.path()).unwrap();
    assert_eq!(back, g);
    assert_eq!(params_digest(&back.params), params_digest(&g.params));
}

#[test]
fn float32_checkpoint_is_exact_for_representable_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = init_generator(&arch(), 12).unwrap();
    g.params.for_each_mut(|_, v| *v = *v as f32 as f64);
    save_generator(&g, dir.path(), Dtype::Float32).unwrap();
    assert_eq!(load_generator(dir.path()).unwrap(), g);
    let bytes = fs::metadata(dir.path().join(format!("{}.bin", g.params.tensors()[0].name))).unwrap().len();
    assert_eq!(bytes as usize, 4 * g.params.tensors()[0].values.len());
}

#[test]
fn checkpoint_with_wrong_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = init_generator(&arch(), 1).unwrap();
    save_generator(&g, dir.path(), Dtype::Float64).unwrap();
    let manifest = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replacen("\"base_channels\": 2", "\"base_channels\": 4", 1);
    fs::write(&manifest, text).unwrap();
    assert!(load_generator(dir.path()).is_err());
}
