//! Writes demo inputs: `cargo run --example make_assets -- <dir> [seed]`.
//!
//! Produces `<dir>/masks/<class>/*.png` with sidecars and `<dir>/backgrounds/*.png`.

use std::path::PathBuf;

use partsight_core::fixtures::{write_backgrounds, write_masks};

fn main() -> partsight_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "assets".into()));
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    write_masks(&dir.join("masks"), 8, 2, 96, seed)?;
    write_backgrounds(&dir.join("backgrounds"), 12, 640, 360, seed)?;
    println!("wrote 16 masks and 12 backgrounds under {}", dir.display());
    Ok(())
}
