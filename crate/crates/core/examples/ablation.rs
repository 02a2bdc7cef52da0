//! Runs the ablation variants on one preset and prints a comparison table.
//!
//! `cargo run --release --example ablation -- [preset] [width] [variant ...]`

use evosplat::cli::{ablation_table, AblationRow, ABLATIONS};
use evosplat::config::MapperConfig;
use evosplat::dataset::from_script;
use evosplat::metrics::{evaluate, split_protocol};
use evosplat::pipeline::run_mapping;
use evosplat::presets::Preset;

fn main() -> evosplat::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "partial-removal".into());
    let preset = Preset::ALL.into_iter().find(|p| p.name() == name).unwrap_or(Preset::PartialRemoval);
    let width = args.next().and_then(|w| w.parse().ok()).unwrap_or(32);
    let only: Vec<String> = args.collect();

    let dataset = from_script(&preset.script(width, 0))?;
    let split = split_protocol(dataset.len(), &dataset.sequences)?;
    let mut rows = Vec::new();
    for (variant, overrides) in ABLATIONS {
        if !only.is_empty() && !only.iter().any(|o| o == variant) {
            continue;
        }
        let mut config = MapperConfig::default();
        config.apply_overrides(overrides)?;
        let out = run_mapping(&dataset, &split.train, &config)?;
        let report = evaluate(&out.map, &dataset, &split, &config.dsa.render)?;
        eprintln!("{variant}: {} Gaussians", out.map.live_count());
        rows.push(AblationRow { name: variant.to_string(), overrides: overrides.iter().map(|s| s.to_string()).collect(), report });
    }
    print!("{}", ablation_table(&rows));
    Ok(())
}
