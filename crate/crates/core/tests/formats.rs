mod common;

use std::fs;

use advkit::attacks::{craft_adversarial_set, AttackConfig};
use advkit::harness::container::{
    encode_checkpoint, load_adversarial_set, load_checkpoint, load_tensor, save_adversarial_set, save_checkpoint,
    save_tensor,
};
use advkit::harness::datasets::{load_cifar, load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
use advkit::models::{build_model, Architecture, ModelConfig};
use advkit::numerics::{forward, LabeledBatch, Tensor};
use advkit::Error;
use common::{mnist, mnist_dir};

fn idx_pair(n: u32, h: u32, w: u32) -> (Vec<u8>, Vec<u8>) {
    let mut images = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [n, h, w] {
        images.extend(d.to_be_bytes());
    }
    images.extend((0..n * h * w).map(|i| (i * 7 % 256) as u8));
    let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    labels.extend(n.to_be_bytes());
    labels.extend((0..n).map(|i| (i % 10) as u8));
    (images, labels)
}

#[test]
fn bundled_mnist_subset_shapes() {
    let (train, test) = mnist();
    assert_eq!(train.images().shape(), &[2000, 1, 28, 28]);
    assert_eq!(test.images().shape(), &[500, 1, 28, 28]);
    assert!(train.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(train.labels().iter().all(|&y| y < 10));
    assert!(mnist_dir().join("LICENSE-mnist-npm").exists());
}

#[test]
fn idx_fixture_of_ten_images() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = idx_pair(10, 28, 28);
    fs::write(dir.path().join("i"), &images).unwrap();
    fs::write(dir.path().join("l"), &labels).unwrap();
    let batch = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
    assert_eq!(batch.images().shape(), &[10, 1, 28, 28]);
    assert_eq!(batch.labels()[3], 3);
    assert_eq!(batch.images().data()[1], 7.0 / 255.0);
}

#[test]
fn idx_count_mismatch_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (images, _) = idx_pair(4, 2, 2);
    let (_, labels) = idx_pair(3, 2, 2);
    fs::write(dir.path().join("i"), &images).unwrap();
    fs::write(dir.path().join("l"), &labels).unwrap();
    let err = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn cifar_fixture_across_files() {
    let dir = tempfile::tempdir().unwrap();
    let record = |label: u8, fill: u8| {
        let mut r = vec![label];
        r.extend(std::iter::repeat(fill).take(3072));
        r
    };
    let a: Vec<u8> = [record(1, 0), record(9, 255)].concat();
    let b = record(4, 51);
    fs::write(dir.path().join("a.bin"), &a).unwrap();
    fs::write(dir.path().join("b.bin"), &b).unwrap();
    let batch = load_cifar(&[dir.path().join("a.bin"), dir.path().join("b.bin")]).unwrap();
    assert_eq!(batch.images().shape(), &[3, 3, 32, 32]);
    assert_eq!(batch.labels(), &[1, 9, 4]);
    assert!(batch.images().item(2).iter().all(|&v| (v - 0.2).abs() < 1e-15));
    fs::write(dir.path().join("c.bin"), &a[..a.len() - 1]).unwrap();
    assert!(matches!(load_cifar(&[dir.path().join("c.bin")]), Err(Error::Format { .. })));
}

#[test]
fn tensor_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.rft");
    let t = Tensor::from_fn(&[3, 2, 5], |i| (i as f64).sin() * 1e-300 + i as f64 / 7.0);
    save_tensor(&path, &t).unwrap();
    assert!(load_tensor(&path).unwrap().bitwise_eq(&t));
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_tensor(&path), Err(Error::Format { .. })));
}

fn small_model(width: usize) -> advkit::models::Model {
    build_model(
        &ModelConfig::new(Architecture::ResnetSmall, [1, 8, 8], 3)
            .with_width(width)
            .with_seed(4),
    )
    .unwrap()
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = small_model(4);
    save_checkpoint(&model, "h1", &path).unwrap();
    let (back, header) = load_checkpoint(&path, Some("h1")).unwrap();
    assert_eq!(header.config_hash, "h1");
    assert_eq!(back.config(), model.config());
    assert_eq!(back.param_count(), model.param_count());
    assert!(back.params().iter().zip(model.params()).all(|(a, b)| a.bitwise_eq(b)));
    let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 9) as f64 / 9.0);
    assert!(forward(&back, &x).unwrap().bitwise_eq(&forward(&model, &x).unwrap()));
}

#[test]
fn checkpoint_hash_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&small_model(1), "h1", &path).unwrap();
    let err = load_checkpoint(&path, Some("h2")).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }));
    assert!(load_checkpoint(&path, None).is_ok());
}

#[test]
fn truncated_checkpoints_never_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let bytes = encode_checkpoint(&small_model(1), "h").unwrap();
    let step = (bytes.len() / 97).max(1);
    for cut in (0..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
        fs::write(&path, &bytes[..cut]).unwrap();
        match load_checkpoint(&path, None) {
            Err(Error::Format { .. }) => {}
            other => panic!("cut at {cut}: {:?}", other.map(|m| m.1)),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn adversarial_set_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adv.bin");
    let model = small_model(1);
    let x = Tensor::from_fn(&[4, 1, 8, 8], |i| (i % 13) as f64 / 13.0);
    let data = LabeledBatch::new(x, vec![0, 1, 2, 0], 3).unwrap();
    let config = AttackConfig::pgd(0.1, 0.02, 5).with_random_start(true).with_seed(3);
    let set = craft_adversarial_set(&model, &data, &config).unwrap();
    save_adversarial_set(&set, "h", &path).unwrap();
    let back = load_adversarial_set(&path, Some("h")).unwrap();
    assert_eq!(back.config, set.config);
    assert_eq!(back.model_id, set.model_id);
    for (a, b) in back.records.iter().zip(&set.records) {
        assert!(a.x.bitwise_eq(&b.x) && a.x_star.bitwise_eq(&b.x_star) && a.delta.bitwise_eq(&b.delta));
        assert_eq!(a.adv_output, b.adv_output);
        assert_eq!(a.crafting_time.to_bits(), b.crafting_time.to_bits());
    }
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_adversarial_set(&path, None), Err(Error::Format { .. })));
}
