//! Maps a scene that changes between visits and reports how well the final
//! map matches the latest state, inside and outside the changed region.
//!
//! `cargo run --release --example change_detection -- [preset] [width] [key=value ...]`
//!
//! Try `dsa=off` or `kf_filtering=full` to see what the adaptation buys.

use evosplat::config::MapperConfig;
use evosplat::dataset::from_script;
use evosplat::metrics::{evaluate, split_protocol};
use evosplat::pipeline::run_mapping;
use evosplat::presets::Preset;

fn main() -> evosplat::Result<()> {
    tracing_subscriber::fmt().with_max_level(tracing::Level::WARN).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset: Preset = args.first().map_or(Ok(Preset::Evolving), |s| s.parse())?;
    let width = args.get(1).and_then(|w| w.parse().ok()).unwrap_or(48);
    let mut config = MapperConfig::default();
    config.apply_overrides(args.get(2..).unwrap_or_default())?;

    let dataset = from_script(&preset.script(width, 0))?;
    let split = split_protocol(dataset.len(), &dataset.sequences)?;
    let start = std::time::Instant::now();
    let out = run_mapping(&dataset, &split.train, &config)?;
    println!(
        "{}: {} keyframes, {} Gaussians, {:.1?}",
        preset.name(),
        out.keyframes.len(),
        out.map.live_count(),
        start.elapsed()
    );
    for r in out.log.iter().filter(|r| r.seeded > 0 || r.removed > 0 || !r.discarded_keyframes.is_empty()) {
        println!(
            "  frame {:>3}: seeded {:>4}, removed {:>4}, discarded keyframes {:?}",
            r.frame, r.seeded, r.removed, r.discarded_keyframes
        );
    }
    let report = evaluate(&out.map, &dataset, &split, &config.dsa.render)?;
    print!("{}", report.to_text());
    Ok(())
}
