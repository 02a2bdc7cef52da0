//! Renders a handful of Gaussians, compares the tiled rasterizer with the
//! per-pixel reference, and checks one analytic gradient by central
//! differences.
//!
//! `cargo run --release --example render_and_gradients`

use evosplat::geometry::logit;
use evosplat::raster::{backward, brute_force_render};
use evosplat::{render, Camera, Gaussian, GaussianMap, Grid, Intrinsics, RenderOptions};
use nalgebra::{Isometry3, Vector3, Vector4};

fn main() -> evosplat::Result<()> {
    let intr = Intrinsics { fx: 60.0, fy: 60.0, cx: 31.5, cy: 23.5, width: 64, height: 48, near: 0.05, far: 10.0 };
    let cam = Camera::from_pose(intr, &Isometry3::identity())?;
    let mut map = GaussianMap::new();
    for (i, (x, z, c)) in [(-0.3, 2.0, [0.9, 0.2, 0.1]), (0.0, 2.5, [0.1, 0.8, 0.2]), (0.35, 1.6, [0.2, 0.3, 0.9])].into_iter().enumerate() {
        map.insert(Gaussian {
            mean: Vector3::new(x, 0.05 * i as f64, z),
            rot: Vector4::new(1.0, 0.1 * i as f64, 0.0, 0.2),
            log_scale: Vector3::new(0.25f64.ln(), 0.12f64.ln(), 0.05f64.ln()),
            opacity_logit: logit(0.8),
            color: Vector3::from(c),
        });
    }
    let opts = RenderOptions::with_background([0.0; 3]);
    let tiled = render(&map, &cam, &opts);
    let oracle = brute_force_render(&map, &cam, [0.0; 3]);
    let max_diff = tiled
        .color
        .data()
        .iter()
        .zip(oracle.color.data())
        .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
        .fold(0.0, f64::max);
    println!("tiled vs reference: max color difference {max_diff:.2e}");

    // loss = sum of red channel plus depth; its gradient images are constant
    let gc = Grid::from_fn(64, 48, |_, _| [1.0, 0.0, 0.0]);
    let gd = Grid::from_fn(64, 48, |_, _| 1.0);
    let grads = backward(&map, &cam, &opts, &tiled, &gc, &gd, None)?;
    let loss = |m: &GaussianMap| {
        let o = render(m, &cam, &opts);
        o.color.data().iter().map(|c| c[0]).sum::<f64>() + o.depth.data().iter().sum::<f64>()
    };
    let (id, _) = map.iter().next().expect("non-empty");
    let h = 1e-6;
    let shifted = |d: f64| {
        let mut m = map.clone();
        m.get_mut(id).expect("live").mean.x += d;
        loss(&m)
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    let analytic = grads.get(id).map_or(0.0, |g| g.to_array()[0]);
    println!("d loss / d mean.x of the first Gaussian: analytic {analytic:.6}, finite difference {fd:.6}");
    Ok(())
}
