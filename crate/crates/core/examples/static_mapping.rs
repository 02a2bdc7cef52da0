//! Maps the static synthetic room and reports training-view quality.
//!
//! `cargo run --release --example static_mapping -- [width]`

use evosplat::config::MapperConfig;
use evosplat::dataset::from_script;
use evosplat::metrics::{evaluate, split_protocol};
use evosplat::pipeline::run_mapping;
use evosplat::presets;

fn main() -> evosplat::Result<()> {
    tracing_subscriber::fmt().with_max_level(tracing::Level::INFO).init();
    let width = std::env::args().nth(1).and_then(|w| w.parse().ok()).unwrap_or(64);
    let dataset = from_script(&presets::static_room(width, 0))?;
    let split = split_protocol(dataset.len(), &dataset.sequences)?;
    let config = MapperConfig::default();

    let start = std::time::Instant::now();
    let out = run_mapping(&dataset, &split.train, &config)?;
    println!(
        "{} keyframes, {} Gaussians, {} optimizer steps in {:.1?}",
        out.keyframes.len(),
        out.map.live_count(),
        out.steps,
        start.elapsed()
    );

    let report = evaluate(&out.map, &dataset, &split, &config.dsa.render)?;
    print!("{}", report.to_text());
    Ok(())
}
