//! Iterative map refinement over a window of keyframes.
//!
//! Every step renders one keyframe (round-robin), evaluates the masked joint
//! loss, back-propagates through the rasterizer and applies an adaptive-moment
//! update per parameter group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Gaussian;
use crate::grid::Grid;
use crate::keyframes::Keyframe;
use crate::loss::{color_loss_eval, depth_loss_eval, isotropic_reg, isotropic_reg_grad};
use crate::map::{GaussianMap, IdSet};
use crate::raster::{backward, render, DepthMode, Gradients, RenderOptions};

pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Gradient components below this are rounding noise and do not move the
/// parameters (the adaptive update would otherwise rescale them to full
/// steps).
pub const GRAD_NOISE_FLOOR: f64 = 1e-12;

/// Optimizer hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    /// Base learning rate for means; multiplied by `scene_extent`.
    pub lr_mean: f64,
    pub lr_rot: f64,
    pub lr_log_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub scene_extent: f64,
    /// Steps per call of [`optimize_window`].
    pub iterations: usize,
    /// SSIM weight λ in the color loss.
    pub lambda: f64,
    /// Weight of the isotropic regularizer.
    pub w_iso: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            lr_mean: 1.6e-4,
            lr_rot: 1e-3,
            lr_log_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            scene_extent: 1.0,
            iterations: 60,
            lambda: 0.2,
            w_iso: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must lie in [0, 1]".into()));
        }
        let lrs = [self.lr_mean, self.lr_rot, self.lr_log_scale, self.lr_opacity, self.lr_color];
        if lrs.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.scene_extent > 0.0) {
            return Err(Error::Config("scene_extent must be positive".into()));
        }
        if !(self.w_iso >= 0.0) {
            return Err(Error::Config("w_iso must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("moment decay rates must lie in [0, 1) and epsilon > 0".into()));
        }
        Ok(())
    }

    fn learning_rates(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut lr = [0.0; PARAMS_PER_GAUSSIAN];
        lr[0..3].fill(self.lr_mean * self.scene_extent);
        lr[3..7].fill(self.lr_rot);
        lr[7..10].fill(self.lr_log_scale);
        lr[10] = self.lr_opacity;
        lr[11..14].fill(self.lr_color);
        lr
    }
}

/// Rendering parameters shared by optimization and change detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub depth_mode: DepthMode,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            depth_mode: DepthMode::Normalized,
        }
    }
}

impl RenderSettings {
    pub fn options(&self) -> RenderOptions<'static> {
        RenderOptions::with_background(self.background).depth_mode(self.depth_mode)
    }
}

/// Loss terms of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub color_l1: f64,
    /// `1 − SSIM`.
    pub ssim_term: f64,
    pub depth_l1: f64,
    pub iso_reg: f64,
    /// Keyframe (frame id) the terms were evaluated on.
    pub keyframe: usize,
    /// Mean absolute color error per pixel; only kept by
    /// [`evaluate_keyframe_loss`].
    pub per_pixel_color_err: Option<Grid<f64>>,
    pub per_pixel_depth_err: Option<Grid<f64>>,
}

impl LossBreakdown {
    /// Recombines the weighted terms.
    pub fn recombine(&self, lambda: f64, w_iso: f64) -> f64 {
        (1.0 - lambda) * self.color_l1 + lambda * self.ssim_term + self.depth_l1 + w_iso * self.iso_reg
    }
}

pub(crate) fn params_of(g: &Gaussian) -> [f64; PARAMS_PER_GAUSSIAN] {
    [
        g.mean.x,
        g.mean.y,
        g.mean.z,
        g.rot[0],
        g.rot[1],
        g.rot[2],
        g.rot[3],
        g.log_scale.x,
        g.log_scale.y,
        g.log_scale.z,
        g.opacity_logit,
        g.color.x,
        g.color.y,
        g.color.z,
    ]
}

pub(crate) fn set_params(g: &mut Gaussian, p: &[f64; PARAMS_PER_GAUSSIAN]) {
    g.mean = nalgebra::Vector3::new(p[0], p[1], p[2]);
    g.rot = nalgebra::Vector4::new(p[3], p[4], p[5], p[6]);
    g.log_scale = nalgebra::Vector3::new(p[7], p[8], p[9]);
    g.opacity_logit = p[10];
    g.color = nalgebra::Vector3::new(p[11], p[12], p[13]);
}

struct StepResult {
    breakdown: LossBreakdown,
    grads: Gradients,
}

fn loss_and_grad(
    map: &GaussianMap,
    kf: &Keyframe,
    settings: &OptimSettings,
    render_settings: &RenderSettings,
    with_grad: bool,
    keep_maps: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let cam = &kf.camera;
    let opts = render_settings.options();
    let out = render(map, cam, &opts);
    let include = kf.ignore_mask.not();
    let color = color_loss_eval(&out.color, &kf.frame.color, Some(&include), settings.lambda, with_grad)?;
    let depth = match depth_loss_eval(&out.depth, &kf.frame.depth, Some(&include), cam.intrinsics.far, with_grad) {
        Ok(d) => Some(d),
        Err(Error::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    let iso = isotropic_reg(map);
    let depth_l1 = depth.as_ref().map_or(0.0, |d| d.total);
    let breakdown = LossBreakdown {
        total: color.total + depth_l1 + settings.w_iso * iso,
        color_l1: color.l1,
        ssim_term: color.ssim_term,
        depth_l1,
        iso_reg: iso,
        keyframe: kf.id(),
        per_pixel_color_err: keep_maps.then(|| color.per_pixel.clone()),
        per_pixel_depth_err: keep_maps.then(|| {
            depth
                .as_ref()
                .map_or_else(|| Grid::new(cam.width(), cam.height(), 0.0), |d| d.per_pixel.clone())
        }),
    };
    if !with_grad {
        return Ok((breakdown, None));
    }
    let d_color = color.grad.expect("requested");
    let d_depth = depth
        .and_then(|d| d.grad)
        .unwrap_or_else(|| Grid::new(cam.width(), cam.height(), 0.0));
    let mut grads = backward(map, cam, &opts, &out, &d_color, &d_depth, Some(&include))?;
    if settings.w_iso > 0.0 && map.live_count() > 0 {
        let k = settings.w_iso / map.live_count() as f64;
        for (slot, (_, g)) in map.slots().iter().zip(grads.slots.iter_mut()) {
            if slot.alive {
                g.log_scale += isotropic_reg_grad(&slot.gaussian.log_scale) * k;
            }
        }
    }
    Ok((breakdown, Some(grads)))
}

fn step_on(
    map: &GaussianMap,
    kf: &Keyframe,
    settings: &OptimSettings,
    render_settings: &RenderSettings,
) -> Result<StepResult> {
    let (breakdown, grads) = loss_and_grad(map, kf, settings, render_settings, true, false)?;
    Ok(StepResult {
        breakdown,
        grads: grads.expect("requested"),
    })
}

/// Loss terms (with per-pixel maps) of the map against one keyframe.
pub fn evaluate_keyframe_loss(
    map: &GaussianMap,
    kf: &Keyframe,
    settings: &OptimSettings,
    render_settings: &RenderSettings,
) -> Result<LossBreakdown> {
    Ok(loss_and_grad(map, kf, settings, render_settings, false, true)?.0)
}

/// Gradients of the masked joint loss of `map` against `kf`.
pub fn keyframe_gradients(
    map: &GaussianMap,
    kf: &Keyframe,
    settings: &OptimSettings,
    render_settings: &RenderSettings,
) -> Result<Gradients> {
    Ok(step_on(map, kf, settings, render_settings)?.grads)
}

fn apply_update(map: &mut GaussianMap, grads: &Gradients, settings: &OptimSettings, trainable: Option<&IdSet>) {
    let lr = settings.learning_rates();
    let (b1, b2, eps) = (settings.beta1, settings.beta2, settings.epsilon);
    for (slot, (id, g)) in map.slots_mut().iter_mut().zip(grads.slots.iter()) {
        debug_assert_eq!(slot.id, *id);
        if !slot.alive || trainable.is_some_and(|t| !t.contains(id)) {
            continue;
        }
        let grad = g.to_array().map(|v| if v.abs() < GRAD_NOISE_FLOOR { 0.0 } else { v });
        let mom = &mut slot.moments;
        mom.steps += 1;
        let bc1 = 1.0 - b1.powi(mom.steps as i32);
        let bc2 = 1.0 - b2.powi(mom.steps as i32);
        let mut p = params_of(&slot.gaussian);
        for k in 0..PARAMS_PER_GAUSSIAN {
            mom.m[k] = b1 * mom.m[k] + (1.0 - b1) * grad[k];
            mom.v[k] = b2 * mom.v[k] + (1.0 - b2) * grad[k] * grad[k];
            let m_hat = mom.m[k] / bc1;
            let v_hat = mom.v[k] / bc2;
            p[k] -= lr[k] * m_hat / (v_hat.sqrt() + eps);
        }
        set_params(&mut slot.gaussian, &p);
        slot.gaussian.normalize();
    }
}

/// Runs `settings.iterations` update steps cycling through `keyframes`.
///
/// Keyframes that are discarded or whose ignore-mask covers every pixel are
/// skipped. When `trainable` is given only those Gaussians are updated (all
/// live Gaussians still render). Returns the loss of every step.
pub fn optimize_window(
    map: &mut GaussianMap,
    keyframes: &[&Keyframe],
    settings: &OptimSettings,
    render_settings: &RenderSettings,
    trainable: Option<&IdSet>,
) -> Result<Vec<LossBreakdown>> {
    let usable: Vec<&Keyframe> = keyframes.iter().copied().filter(|kf| kf.is_usable()).collect();
    if usable.is_empty() {
        return Err(Error::invalid("optimization window has no usable keyframe"));
    }
    let mut trajectory = Vec::with_capacity(settings.iterations);
    for it in 0..settings.iterations {
        let kf = usable[it % usable.len()];
        let step = step_on(map, kf, settings, render_settings)?;
        if !step.breakdown.total.is_finite() || !step.grads.max_abs().is_finite() {
            return Err(Error::Numerical {
                step: it,
                message: format!("loss became {} on keyframe {}", step.breakdown.total, kf.id()),
            });
        }
        apply_update(map, &step.grads, settings, trainable);
        trajectory.push(step.breakdown);
    }
    Ok(trajectory)
}
