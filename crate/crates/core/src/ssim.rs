//! Windowed SSIM with an 11×11 Gaussian window (σ = 1.5) and its analytic
//! gradient. Only windows lying fully inside the image and touching no
//! excluded pixel contribute.

use crate::grid::{ColorImage, Grid, Mask};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
const HALF: usize = WINDOW / 2;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn window_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - HALF as f64;
        *t = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

#[derive(Clone, Debug)]
pub struct SsimResult {
    /// Mean SSIM over contributing windows and channels; 1 when none contribute.
    pub value: f64,
    /// Number of contributing window centers.
    pub windows: usize,
    /// `d value / d x` (gradient with respect to the first image).
    pub grad: Option<ColorImage>,
}

/// Valid (no padding) separable correlation; output is `(w−10) × (h−10)`.
fn correlate_valid(src: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = taps.iter().zip(&row[x..x + WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`correlate_valid`]: scatters a center map back to `w × h`.
fn scatter_full(src: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut vert = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            if v != 0.0 {
                for (k, t) in taps.iter().enumerate() {
                    vert[(y + k) * ow + x] += t * v;
                }
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = vert[y * ow + x];
            if v != 0.0 {
                for (k, t) in taps.iter().enumerate() {
                    out[y * w + x + k] += t * v;
                }
            }
        }
    }
    out
}

/// Window centers (in output coordinates) whose window avoids every pixel
/// with `include == false`.
fn valid_centers(include: Option<&Mask>, w: usize, h: usize) -> Vec<bool> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let Some(mask) = include else {
        return vec![true; ow * oh];
    };
    // summed-area table of excluded pixels
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = u32::from(!*mask.get(x, y));
            sat[(y + 1) * (w + 1) + x + 1] = v + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let mut out = vec![false; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let (x1, y1) = (x + WINDOW, y + WINDOW);
            let n = sat[y1 * (w + 1) + x1] + sat[y * (w + 1) + x] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + x];
            out[y * ow + x] = n == 0;
        }
    }
    out
}

/// Masked SSIM between `x` and `y`, optionally with its gradient in `x`.
pub fn ssim(x: &ColorImage, y: &ColorImage, include: Option<&Mask>, with_grad: bool) -> SsimResult {
    let (w, h) = (x.width(), x.height());
    if w < WINDOW || h < WINDOW {
        return SsimResult {
            value: 1.0,
            windows: 0,
            grad: with_grad.then(|| Grid::new(w, h, [0.0; 3])),
        };
    }
    let taps = window_taps();
    let centers = valid_centers(include, w, h);
    let windows = centers.iter().filter(|&&v| v).count();
    if windows == 0 {
        return SsimResult {
            value: 1.0,
            windows: 0,
            grad: with_grad.then(|| Grid::new(w, h, [0.0; 3])),
        };
    }
    let norm = 1.0 / (windows as f64 * 3.0);
    let mut total = 0.0;
    let mut grad = with_grad.then(|| Grid::new(w, h, [0.0; 3]));
    for ch in 0..3 {
        let xs: Vec<f64> = x.data().iter().map(|p| p[ch]).collect();
        let ys: Vec<f64> = y.data().iter().map(|p| p[ch]).collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mu_x = correlate_valid(&xs, w, h, &taps);
        let mu_y = correlate_valid(&ys, w, h, &taps);
        let e_xx = correlate_valid(&xx, w, h, &taps);
        let e_yy = correlate_valid(&yy, w, h, &taps);
        let e_xy = correlate_valid(&xy, w, h, &taps);
        let n = mu_x.len();
        let (mut ga, mut gb, mut gc) = if with_grad {
            (vec![0.0; n], vec![0.0; n], vec![0.0; n])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        for i in 0..n {
            if !centers[i] {
                continue;
            }
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = e_xx[i] - mx * mx;
            let syy = e_yy[i] - my * my;
            let sxy = e_xy[i] - mx * my;
            let l_num = 2.0 * mx * my + C1;
            let l_den = mx * mx + my * my + C1;
            let c_num = 2.0 * sxy + C2;
            let c_den = sxx + syy + C2;
            let s = l_num * c_num / (l_den * c_den);
            total += s;
            if with_grad {
                let d_mx = 2.0 * my * c_num / (l_den * c_den) - s * 2.0 * mx / l_den;
                let d_sxx = -s / c_den;
                let d_sxy = 2.0 * l_num / (l_den * c_den);
                gb[i] = d_sxx * norm;
                gc[i] = d_sxy * norm;
                ga[i] = (d_mx - 2.0 * d_sxx * mx - d_sxy * my) * norm;
            }
        }
        if let Some(g) = grad.as_mut() {
            let sa = scatter_full(&ga, w, h, &taps);
            let sb = scatter_full(&gb, w, h, &taps);
            let sc = scatter_full(&gc, w, h, &taps);
            for (p, out) in g.data_mut().iter_mut().enumerate() {
                out[ch] = sa[p] + 2.0 * xs[p] * sb[p] + ys[p] * sc[p];
            }
        }
    }
    SsimResult {
        value: total * norm,
        windows,
        grad,
    }
}
