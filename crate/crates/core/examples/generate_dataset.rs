//! Writes a synthetic evolving-scene dataset to disk and loads it back.
//!
//! `cargo run --release --example generate_dataset -- <out-dir> [preset] [width]`

use std::path::PathBuf;

use evosplat::dataset::{generate, load_dataset};
use evosplat::presets::Preset;
use evosplat::Error;

fn main() -> evosplat::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().ok_or_else(|| Error::invalid("usage: generate_dataset <out-dir> [preset] [width]"))?);
    let name = args.next().unwrap_or_else(|| "evolving".into());
    let preset = Preset::ALL
        .into_iter()
        .find(|p| p.name() == name)
        .ok_or_else(|| Error::invalid(format!("unknown preset {name:?}")))?;
    let width = args.next().and_then(|w| w.parse().ok()).unwrap_or(64);

    let script = preset.script(width, 0);
    generate(&script, &out)?;
    let dataset = load_dataset(&out)?;
    println!(
        "{}: {} frames at {}x{}, sequences start at {:?}, {} scripted events",
        out.display(),
        dataset.len(),
        dataset.intrinsics.width,
        dataset.intrinsics.height,
        dataset.sequences,
        script.events.len()
    );
    let masks: usize = dataset.frames.iter().map(|f| f.masks.len()).sum();
    println!("{masks} segmentation masks in total");
    Ok(())
}
