//! Removes a whole object although the current view sees only part of it.
//!
//! Two keyframes observe a box completely. The box is then taken away and
//! the next keyframe sees only one side of where it stood. The removal
//! spreads through the earlier keyframes' segmentation masks to the rest of
//! the box.
//!
//! `cargo run --release --example object_removal -- [width]`

use evosplat::config::MapperConfig;
use evosplat::dataset::from_script;
use evosplat::loss::valid_depth;
use evosplat::metrics::depth_l1_cm;
use evosplat::pipeline::Mapper;
use evosplat::presets::partial_removal;
use evosplat::scene::{changed_region, label_point};
use evosplat::{render, Camera, GaussianId};
use nalgebra::Point3;

const OBJECT: u16 = 5;

fn main() -> evosplat::Result<()> {
    tracing_subscriber::fmt().with_max_level(tracing::Level::WARN).init();
    let width = std::env::args().nth(1).and_then(|w| w.parse().ok()).unwrap_or(64);
    let script = partial_removal(width, 0);
    let dataset = from_script(&script)?;
    let intr = dataset.intrinsics;
    let mut mapper = Mapper::new(MapperConfig::default(), intr)?;
    for id in [1, 2] {
        mapper.process(dataset.frames[id].clone())?;
    }

    let before = script.state_at(2);
    let object: Vec<GaussianId> = mapper
        .map()
        .iter()
        .filter(|(_, g)| label_point(&before, &Point3::from(g.mean), 0.01) == OBJECT)
        .map(|(id, _)| id)
        .collect();
    let current = &dataset.frames[3];
    let cam = Camera::from_pose(intr, &current.pose)?;
    let in_view = object
        .iter()
        .filter(|id| {
            let p = cam.to_camera(&mapper.map().get(**id).expect("live").mean);
            let uv = intr.project(&p);
            p.z > 0.0 && uv.x >= -0.5 && uv.y >= -0.5 && uv.x < intr.width as f64 - 0.5 && uv.y < intr.height as f64 - 0.5
        })
        .count();

    let record = mapper.process(current.clone())?.expect("frame 3 is a keyframe");
    let removed = object.iter().filter(|id| !mapper.map().is_live(**id)).count();
    println!(
        "object Gaussians: {}, in the current view: {:.0}%, removed: {:.1}%",
        object.len(),
        100.0 * in_view as f64 / object.len() as f64,
        100.0 * removed as f64 / object.len() as f64
    );
    for k in &record.keyframes {
        println!("  keyframe {}: selected masks {:?}, stale pixels {}", k.id, k.selected_masks, k.ignored_pixels);
    }

    let out = render(mapper.map(), &cam, &mapper.config().dsa.render.options());
    let truth = script.state_at(3).render(&intr, &current.pose);
    let region = changed_region(&script, &current.pose).and(&truth.depth.map(|d| valid_depth(*d, intr.far)));
    println!(
        "depth L1 where the object stood: {:.2} cm over {} pixels",
        depth_l1_cm(&out.depth, &truth.depth, &region)?,
        region.count()
    );
    Ok(())
}
