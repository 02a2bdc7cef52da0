//! Masked photometric and geometric losses with their image-space gradients,
//! plus the isotropic shape regularizer.

use crate::error::{Error, Result};
use crate::grid::{ColorImage, DepthMap, Grid, Mask};
use crate::map::GaussianMap;
use crate::ssim::ssim;

/// Value and pieces of the color loss
/// `(1−λ)·mean|Î−I| + λ·(1−SSIM(Î, I))`.
#[derive(Clone, Debug)]
pub struct ColorLoss {
    pub total: f64,
    pub l1: f64,
    /// `1 − SSIM`.
    pub ssim_term: f64,
    /// Mean absolute error over channels, for every pixel (masked or not).
    pub per_pixel: Grid<f64>,
    /// `dL/dÎ`, zero outside the mask.
    pub grad: Option<ColorImage>,
    /// Number of pixels included in the L1 term.
    pub pixels: usize,
}

/// Value and pieces of the depth loss `mean |D̂ − D|` over valid pixels.
#[derive(Clone, Debug)]
pub struct DepthLoss {
    pub total: f64,
    /// `|D̂ − D|` where the observation is valid, 0 elsewhere.
    pub per_pixel: Grid<f64>,
    pub grad: Option<DepthMap>,
    pub pixels: usize,
}

fn check_shape<A, B>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what}: shape {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Per-pixel mean absolute color error.
pub fn color_error_map(rendered: &ColorImage, observed: &ColorImage) -> Grid<f64> {
    Grid::from_vec(
        rendered.width(),
        rendered.height(),
        rendered
            .data()
            .iter()
            .zip(observed.data())
            .map(|(a, b)| ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0)
            .collect(),
    )
    .expect("same shape")
}

/// Color loss over pixels where `mask` is set (all pixels when `None`).
pub fn color_loss_eval(
    rendered: &ColorImage,
    observed: &ColorImage,
    mask: Option<&Mask>,
    lambda: f64,
    with_grad: bool,
) -> Result<ColorLoss> {
    check_shape(rendered, observed, "color loss")?;
    if let Some(m) = mask {
        check_shape(rendered, m, "color loss mask")?;
    }
    let included = |i: usize| mask.is_none_or(|m| m.data()[i]);
    let pixels = (0..rendered.len()).filter(|&i| included(i)).count();
    if pixels == 0 {
        return Err(Error::EmptyMask);
    }
    let per_pixel = color_error_map(rendered, observed);
    let l1 = (0..rendered.len())
        .filter(|&i| included(i))
        .map(|i| per_pixel.data()[i])
        .sum::<f64>()
        / pixels as f64;

    let s = if lambda > 0.0 {
        Some(ssim(rendered, observed, mask, with_grad))
    } else {
        None
    };
    let ssim_term = s.as_ref().map_or(0.0, |s| 1.0 - s.value);
    let total = (1.0 - lambda) * l1 + lambda * ssim_term;

    let grad = with_grad.then(|| {
        let k = (1.0 - lambda) / (3.0 * pixels as f64);
        let mut g = Grid::new(rendered.width(), rendered.height(), [0.0; 3]);
        for (i, out) in g.data_mut().iter_mut().enumerate() {
            if !included(i) {
                continue;
            }
            let (a, b) = (rendered.data()[i], observed.data()[i]);
            for ch in 0..3 {
                out[ch] = k * sign(a[ch] - b[ch]);
            }
        }
        if let Some(sg) = s.as_ref().and_then(|s| s.grad.as_ref()) {
            for (out, d) in g.data_mut().iter_mut().zip(sg.data()) {
                for ch in 0..3 {
                    out[ch] -= lambda * d[ch];
                }
            }
        }
        g
    });
    Ok(ColorLoss {
        total,
        l1,
        ssim_term,
        per_pixel,
        grad,
        pixels,
    })
}

/// Color loss scalar and its per-pixel error map.
pub fn color_loss(
    rendered: &ColorImage,
    observed: &ColorImage,
    mask: Option<&Mask>,
    lambda: f64,
) -> Result<(f64, Grid<f64>)> {
    let l = color_loss_eval(rendered, observed, mask, lambda, false)?;
    Ok((l.total, l.per_pixel))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Observed depth usable for supervision.
#[inline]
pub fn valid_depth(d: f64, far: f64) -> bool {
    d > 0.0 && d <= far && d.is_finite()
}

/// Depth loss over pixels in `mask` whose observed depth is valid.
pub fn depth_loss_eval(
    rendered: &DepthMap,
    observed: &DepthMap,
    mask: Option<&Mask>,
    far: f64,
    with_grad: bool,
) -> Result<DepthLoss> {
    check_shape(rendered, observed, "depth loss")?;
    if let Some(m) = mask {
        check_shape(rendered, m, "depth loss mask")?;
    }
    let included = |i: usize| mask.is_none_or(|m| m.data()[i]) && valid_depth(observed.data()[i], far);
    let pixels = (0..rendered.len()).filter(|&i| included(i)).count();
    if pixels == 0 {
        return Err(Error::EmptyMask);
    }
    let per_pixel = Grid::from_vec(
        rendered.width(),
        rendered.height(),
        rendered
            .data()
            .iter()
            .zip(observed.data())
            .map(|(&a, &b)| if valid_depth(b, far) { (a - b).abs() } else { 0.0 })
            .collect(),
    )
    .expect("same shape");
    let total = (0..rendered.len())
        .filter(|&i| included(i))
        .map(|i| per_pixel.data()[i])
        .sum::<f64>()
        / pixels as f64;
    let grad = with_grad.then(|| {
        let k = 1.0 / pixels as f64;
        Grid::from_fn(rendered.width(), rendered.height(), |x, y| {
            let i = y * rendered.width() + x;
            if included(i) {
                k * sign(rendered.data()[i] - observed.data()[i])
            } else {
                0.0
            }
        })
    });
    Ok(DepthLoss {
        total,
        per_pixel,
        grad,
        pixels,
    })
}

/// Depth loss scalar and its per-pixel error map.
pub fn depth_loss(
    rendered: &DepthMap,
    observed: &DepthMap,
    mask: Option<&Mask>,
    far: f64,
) -> Result<(f64, Grid<f64>)> {
    let l = depth_loss_eval(rendered, observed, mask, far, false)?;
    Ok((l.total, l.per_pixel))
}

/// Mean over Gaussians of `‖s − mean(s)·1‖₁` with `s = exp(log_scale)`.
/// Zero for an empty map.
pub fn isotropic_reg(map: &GaussianMap) -> f64 {
    let n = map.live_count();
    if n == 0 {
        return 0.0;
    }
    map.iter()
        .map(|(_, g)| {
            let s = g.scale();
            let m = s.mean();
            s.iter().map(|v| (v - m).abs()).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

/// Gradient of one Gaussian's regularizer term with respect to its
/// log-scales (before the `1/N` averaging).
pub(crate) fn isotropic_reg_grad(log_scale: &nalgebra::Vector3<f64>) -> nalgebra::Vector3<f64> {
    let s = log_scale.map(f64::exp);
    let m = s.mean();
    let signs = s.map(|v| sign(v - m));
    let total: f64 = signs.sum();
    nalgebra::Vector3::from_fn(|i, _| (signs[i] - total / 3.0) * s[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gaussian;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_images_have_zero_loss() {
        let img = Grid::from_fn(20, 20, |x, y| [x as f64 / 20.0, y as f64 / 20.0, 0.5]);
        assert!(color_loss(&img, &img, None, 0.2).unwrap().0.abs() < 1e-12);
        let d = Grid::new(5, 5, 2.0);
        assert_eq!(depth_loss(&d, &d, None, 10.0).unwrap().0, 0.0);
    }

    #[test]
    fn constant_offsets() {
        let a = Grid::new(8, 8, [0.2, 0.3, 0.4]);
        let b = a.map(|c| [c[0] + 0.1, c[1] + 0.1, c[2] + 0.1]);
        let (l, per) = color_loss(&b, &a, None, 0.0).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        assert!(per.data().iter().all(|v| (v - 0.1).abs() < 1e-12));
        let d = Grid::new(8, 8, 2.0);
        let d2 = d.map(|v| v + 0.05);
        assert!((depth_loss(&d2, &d, None, 10.0).unwrap().0 - 0.05).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = Grid::new(4, 4, [0.0; 3]);
        let m = Grid::new(4, 4, false);
        assert!(matches!(color_loss(&a, &a, Some(&m), 0.2), Err(Error::EmptyMask)));
        let d = Grid::new(4, 4, 0.0);
        assert!(matches!(depth_loss(&d, &d, None, 10.0), Err(Error::EmptyMask)));
    }

    #[test]
    fn depth_loss_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, h) = (13, 9);
        let r: Grid<f64> = Grid::from_fn(w, h, |_, _| rng.random_range(0.5..4.0));
        let o = Grid::from_fn(w, h, |_, _| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.5..6.0) });
        let m = Grid::from_fn(w, h, |_, _| rng.random_bool(0.7));
        let far = 5.0;
        let (mut sum, mut k) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let d: f64 = *o.get(x, y);
                if *m.get(x, y) && d > 0.0 && d <= far {
                    sum += (r.get(x, y) - d).abs();
                    k += 1;
                }
            }
        }
        let got = depth_loss(&r, &o, Some(&m), far).unwrap().0;
        assert!((got - sum / k as f64).abs() < 1e-12);
    }

    #[test]
    fn isotropic_regularizer_values() {
        let iso = Gaussian::isotropic(Vector3::zeros(), 0.3, 0.5, Vector3::zeros());
        assert_eq!(isotropic_reg(&GaussianMap::from_gaussians([iso.clone()])), 0.0);
        assert_eq!(isotropic_reg(&GaussianMap::new()), 0.0);
        let mut g = iso;
        g.log_scale = Vector3::new(2f64.ln(), 0.0, 0.0);
        let map = GaussianMap::from_gaussians([g.clone()]);
        assert!((isotropic_reg(&map) - 4.0 / 3.0).abs() < 1e-12);
        let c: f64 = 2.5;
        g.log_scale = g.log_scale.map(|v| v + c.ln());
        assert!((isotropic_reg(&GaussianMap::from_gaussians([g])) - c * 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_gradient_matches_finite_differences() {
        let ls = Vector3::new(0.3, -0.2, 0.1);
        let f = |l: Vector3<f64>| {
            let s = l.map(f64::exp);
            let m = s.mean();
            s.iter().map(|v| (v - m).abs()).sum::<f64>()
        };
        let g = isotropic_reg_grad(&ls);
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = 1e-6;
            let fd = (f(ls + e) - f(ls - e)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }
}
