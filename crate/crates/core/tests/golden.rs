use std::fs;
use std::path::Path;

use atnj_core::golden;
use atnj_core::image::{decode_ppm, toy_dataset, TOY_DATASET_SIZE};

fn root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn golden_files_match_current_build() {
    for c in golden::verify_all(&root().join("golden")) {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn corrupted_golden_is_named() {
    let dir = tempfile::tempdir().unwrap();
    golden::write_all(dir.path()).unwrap();
    fs::write(dir.path().join(golden::FORWARD_FILE), "00\n").unwrap();
    let failed: Vec<_> = golden::verify_all(dir.path())
        .into_iter()
        .filter(|c| !c.passed)
        .map(|c| c.name)
        .collect();
    assert_eq!(failed, ["golden forward hash"]);
}

#[test]
fn rng_golden_agrees_with_reference_stream() {
    // Independently computed SplitMix64 outputs for seed 42.
    let text = fs::read_to_string(root().join("golden").join(golden::RNG_FILE)).unwrap();
    let values = golden::parse_rng(&text).unwrap();
    assert_eq!(values[0], 0xbdd7_3226_2feb_6e95);
    assert_eq!(values[7], 0xccf6_35ee_9e9e_2fa4);
}

#[test]
fn toy_fixtures_match_generator() {
    let dir = root().join("fixtures").join("toy");
    let generated = toy_dataset();
    for (i, img) in generated.iter().enumerate().take(TOY_DATASET_SIZE) {
        let bytes = fs::read(dir.join(format!("toy_{i}.ppm"))).unwrap();
        assert_eq!(&decode_ppm(&bytes).unwrap(), img, "toy_{i}.ppm");
    }
}
