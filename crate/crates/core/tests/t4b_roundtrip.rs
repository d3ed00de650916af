use gsnet_core::rng;
use gsnet_core::tensor::{read_t4b, write_t4b};
use gsnet_core::{Shape4, Tensor};
use rand::RngExt;

fn random_tensor(seed: u64) -> Tensor {
    let mut r = rng::seeded(seed, 5000);
    let shape = Shape4::new(
        r.random_range(1..4),
        r.random_range(1..6),
        r.random_range(1..6),
        r.random_range(1..5),
    )
    .unwrap();
    Tensor::from_fn(shape, |_, _, _, _| {
        let mag = 10f64.powi(r.random_range(-300..300));
        r.random_range(-1.0..1.0) * mag
    })
}

#[test]
fn write_read_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100 {
        let t = random_tensor(seed);
        let path = dir.path().join(format!("t{seed}.t4b"));
        write_t4b(&path, &t).unwrap();
        let back = read_t4b(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        let same = t.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "seed {seed}");
    }
}

#[test]
fn corrupt_files_are_rejected_with_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.t4b");
    write_t4b(&good, &random_tensor(1)).unwrap();
    let bytes = std::fs::read(&good).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let truncated_header = bytes[..10].to_vec();
    let truncated_payload = bytes[..bytes.len() - 3].to_vec();
    for (name, content) in [
        ("magic.t4b", bad_magic),
        ("header.t4b", truncated_header),
        ("payload.t4b", truncated_payload),
    ] {
        let path = dir.path().join(name);
        std::fs::write(&path, content).unwrap();
        let err = read_t4b(&path).unwrap_err().to_string();
        assert!(err.contains(name), "{err}");
    }
}
