//! Maps a short sequence, saves the map, reloads it and scores it on the
//! training and held-out views.
//!
//! `cargo run --release --example evaluate_map -- [preset] [width]`

use evosplat::config::MapperConfig;
use evosplat::dataset::from_script;
use evosplat::mapfile::{load_map, save_map};
use evosplat::metrics::{evaluate, split_protocol};
use evosplat::pipeline::run_mapping;
use evosplat::presets::Preset;

fn main() -> evosplat::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "partial-removal".into());
    let preset = Preset::ALL.into_iter().find(|p| p.name() == name).unwrap_or(Preset::PartialRemoval);
    let width = args.next().and_then(|w| w.parse().ok()).unwrap_or(48);

    let dataset = from_script(&preset.script(width, 0))?;
    let split = split_protocol(dataset.len(), &dataset.sequences)?;
    let mut config = MapperConfig::default();
    config.apply_overrides(&["refinement_iterations=300"])?;
    let out = run_mapping(&dataset, &split.train, &config)?;

    let dir = std::env::temp_dir().join("evosplat-evaluate-map");
    std::fs::create_dir_all(&dir).map_err(|e| evosplat::Error::io(&dir, e))?;
    let path = dir.join("map.evgs");
    save_map(&path, &out.map)?;
    let map = load_map(&path)?;
    println!("saved {} Gaussians to {}", map.live_count(), path.display());

    let report = evaluate(&map, &dataset, &split, &config.dsa.render)?;
    print!("{}", report.to_text());
    print!("{}", report.view_table());
    Ok(())
}
