//! Rewrites `golden/` and the toy PPM fixtures from the current build.
//! Only run this after a deliberate, reviewed numerical change.

use std::fs;
use std::path::Path;

use atnj_core::golden;
use atnj_core::image::{encode_ppm, toy_dataset};

fn main() -> atnj_core::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    golden::write_all(&root.join("golden"))?;
    let toy = root.join("fixtures/toy");
    fs::create_dir_all(&toy)?;
    for (i, img) in toy_dataset().iter().enumerate() {
        fs::write(toy.join(format!("toy_{i}.ppm")), encode_ppm(img))?;
    }
    println!("golden files and fixtures written under {}", root.display());
    Ok(())
}
