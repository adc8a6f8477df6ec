//! Generates a directory of synthetic 16-bit PNG scenes for the train and
//! eval commands.
//!
//! Usage: make_dataset [DIR] [COUNT] [SIZE] [SEED]
//! Defaults: demo-out/dataset 24 96 7

use std::path::PathBuf;

use kernelfit::{write_dataset, Result};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let dir: PathBuf = args
        .next()
        .unwrap_or_else(|| "demo-out/dataset".into())
        .into();
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(24);
    let size: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(96);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);

    std::fs::create_dir_all(&dir).expect("create dataset dir");
    let paths = write_dataset(&dir, count, size, size, 1, seed)?;
    println!(
        "wrote {} grayscale {}x{} scenes to {}",
        paths.len(),
        size,
        size,
        dir.display()
    );
    println!("first file: {}", paths[0].display());
    Ok(())
}
