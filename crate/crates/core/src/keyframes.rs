//! Keyframes: selection, reprojection covisibility and stale-region
//! ignore-masks.

use nalgebra::Isometry3;
use serde::{Deserialize, Serialize};

use crate::dsa::Thresholds;
use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics};
use crate::grid::{ColorImage, DepthMap, Grid, Mask};
use crate::loss::valid_depth;
use crate::map::{GaussianMap, IdSet};
use crate::optim::RenderSettings;
use crate::raster::{render, RenderOutput};

/// A posed RGB-D observation with its segmentation masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub timestamp: f64,
    pub color: ColorImage,
    /// Meters, 0 = invalid.
    pub depth: DepthMap,
    /// Camera-to-world.
    pub pose: Isometry3<f64>,
    /// Overlapping, unlabeled object masks.
    pub masks: Vec<Mask>,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    /// Checks that every image shares the intrinsics' resolution.
    pub fn validate(&self, intr: &Intrinsics) -> Result<()> {
        let (w, h) = (intr.width, intr.height);
        let ok = self.color.width() == w
            && self.color.height() == h
            && self.depth.width() == w
            && self.depth.height() == h
            && self.masks.iter().all(|m| m.width() == w && m.height() == h);
        if !ok {
            return Err(Error::invalid(format!("frame {} does not match {w}x{h}", self.id)));
        }
        Ok(())
    }
}

/// A frame retained as supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub frame: Frame,
    pub camera: Camera,
    /// `true` marks stale pixels excluded from the losses. Only grows.
    pub ignore_mask: Mask,
    pub created_at_step: usize,
    /// Whole-keyframe discard (only used by the full-filtering variant).
    pub discarded: bool,
}

impl Keyframe {
    pub fn new(frame: Frame, intrinsics: Intrinsics, created_at_step: usize) -> Result<Self> {
        frame.validate(&intrinsics)?;
        let camera = Camera::from_pose(intrinsics, &frame.pose)?;
        let ignore_mask = Grid::new(frame.width(), frame.height(), false);
        Ok(Self {
            frame,
            camera,
            ignore_mask,
            created_at_step,
            discarded: false,
        })
    }

    pub fn id(&self) -> usize {
        self.frame.id
    }

    /// Not discarded and at least one pixel still supervised.
    pub fn is_usable(&self) -> bool {
        !self.discarded && self.ignore_mask.count() < self.ignore_mask.len()
    }

    /// Marks `region` stale. Returns the number of newly ignored pixels.
    pub fn ignore(&mut self, region: &Mask) -> usize {
        let before = self.ignore_mask.count();
        self.ignore_mask.or_assign(region);
        self.ignore_mask.count() - before
    }
}

/// Whether the camera moved enough since the last keyframe.
/// `theta_rotation` is in radians.
pub fn keyframe_trigger(
    pose: &Isometry3<f64>,
    last_kf_pose: &Isometry3<f64>,
    theta_translation: f64,
    theta_rotation: f64,
) -> bool {
    let dt = (pose.translation.vector - last_kf_pose.translation.vector).norm();
    let angle = pose.rotation.angle_to(&last_kf_pose.rotation);
    dt > theta_translation || angle > theta_rotation
}

/// Parameters of the reprojection covisibility test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovisibilityParams {
    pub stride: usize,
    /// Depth agreement tolerance in meters.
    pub tolerance: f64,
    /// Minimum fraction of samples that must be covisible.
    pub min_fraction: f64,
}

impl Default for CovisibilityParams {
    fn default() -> Self {
        Self {
            stride: 8,
            tolerance: 0.1,
            min_fraction: 0.05,
        }
    }
}

/// Keyframes observing the frame's surface without occlusion, with the
/// covisible sample fraction, in keyframe order. Discarded keyframes are
/// skipped.
pub fn covisible_keyframes(
    frame: &Frame,
    intrinsics: &Intrinsics,
    keyframes: &[Keyframe],
    params: &CovisibilityParams,
) -> Vec<(usize, f64)> {
    let stride = params.stride.max(1);
    let far = intrinsics.far;
    let mut samples = Vec::new();
    for y in (0..frame.height()).step_by(stride) {
        for x in (0..frame.width()).step_by(stride) {
            let d = *frame.depth.get(x, y);
            if valid_depth(d, far) {
                samples.push(frame.pose * nalgebra::Point3::from(intrinsics.backproject(x as f64, y as f64, d)));
            }
        }
    }
    if samples.is_empty() {
        return Vec::new();
    }
    keyframes
        .iter()
        .filter(|kf| !kf.discarded)
        .filter_map(|kf| {
            let hits = samples.iter().filter(|p| sample_covisible(p, kf, params.tolerance)).count();
            let fraction = hits as f64 / samples.len() as f64;
            (fraction >= params.min_fraction && hits > 0).then_some((kf.id(), fraction))
        })
        .collect()
}

fn sample_covisible(p_world: &nalgebra::Point3<f64>, kf: &Keyframe, tolerance: f64) -> bool {
    let pc = kf.camera.to_camera(&p_world.coords);
    if pc.z <= 0.0 {
        return false;
    }
    let uv = kf.camera.intrinsics.project(&pc);
    let (u, v) = (uv.x.round(), uv.y.round());
    if u < 0.0 || v < 0.0 || u >= kf.camera.width() as f64 || v >= kf.camera.height() as f64 {
        return false;
    }
    let d = *kf.frame.depth.get(u as usize, v as usize);
    valid_depth(d, kf.camera.intrinsics.far) && (pc.z - d).abs() < tolerance
}

/// Optimization window: the current keyframe first, then covisible keyframes
/// by decreasing covisible fraction (ties by id), truncated to `window_size`.
pub fn select_window(current: usize, covisible: &[(usize, f64)], window_size: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, f64)> = covisible.iter().copied().filter(|(id, _)| *id != current).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    std::iter::once(current)
        .chain(ranked.into_iter().map(|(id, _)| id))
        .take(window_size.max(1))
        .collect()
}

/// Closing radius for a given image width (5 px at 640 wide).
pub fn closing_radius(width: usize) -> usize {
    ((5.0 * width as f64 / 640.0).round() as usize).max(1)
}

fn dilate_1d(src: &Mask, r: usize, horizontal: bool, outside: bool) -> Mask {
    let (w, h) = (src.width(), src.height());
    let mut out = Grid::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let (c, n) = if horizontal { (x, w) } else { (y, h) };
            let lo = c as isize - r as isize;
            let hi = c + r;
            let mut hit = outside && (lo < 0 || hi >= n);
            let mut k = lo.max(0) as usize;
            while !hit && k <= hi.min(n - 1) {
                hit = if horizontal { *src.get(k, y) } else { *src.get(x, k) };
                k += 1;
            }
            out.set(x, y, hit);
        }
    }
    out
}

/// Dilation by a (2r+1)² square.
pub fn dilate(m: &Mask, r: usize) -> Mask {
    if r == 0 || m.is_empty() {
        return m.clone();
    }
    dilate_1d(&dilate_1d(m, r, true, false), r, false, false)
}

/// Erosion by a (2r+1)² square; pixels beyond the border count as set.
pub fn erode(m: &Mask, r: usize) -> Mask {
    if r == 0 || m.is_empty() {
        return m.clone();
    }
    let inv = m.not();
    dilate_1d(&dilate_1d(&inv, r, true, false), r, false, false).not()
}

/// Morphological closing by a (2r+1)² square.
pub fn close(m: &Mask, r: usize) -> Mask {
    erode(&dilate(m, r), r)
}

/// Morphological opening by a (2r+1)² square.
pub fn open(m: &Mask, r: usize) -> Mask {
    dilate(&erode(m, r), r)
}

/// Alpha-normalized color of a subset rendering over a black background.
pub(crate) fn unpremultiplied(out: &RenderOutput, x: usize, y: usize, background: [f64; 3]) -> [f64; 3] {
    let a = *out.alpha.get(x, y);
    let c = out.color.get(x, y);
    if a <= 0.0 {
        return *c;
    }
    std::array::from_fn(|k| (c[k] - (1.0 - a) * background[k]) / a)
}

pub(crate) fn mean_abs(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0
}

/// Marks the area newly occupied by `seeded` geometry as stale in `kf`.
///
/// A pixel conflicts when the post-seed map renders in front of the
/// keyframe's observation (`D̂ < D − ε_depth`) where seeded geometry is
/// visible, or when the seeded geometry sits on the observed surface
/// (`|D̂_seed − D| < ε_depth`) with a color that disagrees by more than
/// `ε_color`. The conflict is closed morphologically and added to the
/// ignore-mask. Returns the added region.
pub fn mask_stale_add(
    kf: &mut Keyframe,
    map: &GaussianMap,
    seeded: &IdSet,
    th: &Thresholds,
    rs: &RenderSettings,
) -> Mask {
    let region = stale_add_region(kf, map, seeded, th, rs);
    kf.ignore(&region);
    region
}

/// Conflict region of [`mask_stale_add`] without mutating the keyframe.
pub fn stale_add_region(
    kf: &Keyframe,
    map: &GaussianMap,
    seeded: &IdSet,
    th: &Thresholds,
    rs: &RenderSettings,
) -> Mask {
    let (w, h) = (kf.camera.width(), kf.camera.height());
    if seeded.is_empty() {
        return Grid::new(w, h, false);
    }
    let full = render(map, &kf.camera, &rs.options());
    let sub = render(map, &kf.camera, &rs.options().subset(seeded));
    let far = kf.camera.intrinsics.far;
    let raw = Grid::from_fn(w, h, |x, y| {
        let d = *kf.frame.depth.get(x, y);
        let a_sub = *sub.alpha.get(x, y);
        if !valid_depth(d, far) || a_sub < SEED_PRESENCE_ALPHA {
            return false;
        }
        let occludes = *full.alpha.get(x, y) >= th.eps_opacity && *full.depth.get(x, y) < d - th.eps_depth;
        let recolors = a_sub >= th.eps_opacity
            && (*sub.depth.get(x, y) - d).abs() < th.eps_depth
            && mean_abs(&unpremultiplied(&sub, x, y, rs.background), kf.frame.color.get(x, y)) > th.eps_color;
        occludes || recolors
    });
    if !raw.any() {
        return raw;
    }
    close(&raw, closing_radius(w))
}

/// Seeded geometry must reach this accumulated opacity at a pixel before it
/// can be blamed for a conflict there.
pub const SEED_PRESENCE_ALPHA: f64 = 0.1;

/// Masks of `kf` covered by `remove_region` beyond `mask_cover`, as indices.
pub fn stale_remove_masks(kf: &Keyframe, remove_region: &Mask, mask_cover: f64) -> Vec<usize> {
    kf.frame
        .masks
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let n = m.count();
            n > 0 && m.intersection_count(remove_region) as f64 / n as f64 > mask_cover
        })
        .map(|(i, _)| i)
        .collect()
}

/// Ignores every mask of `kf` covered by `remove_region` beyond
/// `mask_cover`. Returns the ignored mask indices.
pub fn mask_stale_remove(kf: &mut Keyframe, remove_region: &Mask, mask_cover: f64) -> Vec<usize> {
    let chosen = stale_remove_masks(kf, remove_region, mask_cover);
    for &i in &chosen {
        let m = kf.frame.masks[i].clone();
        kf.ignore(&m);
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use nalgebra::{Translation3, UnitQuaternion, Vector3};

    fn intr(w: usize, h: usize) -> Intrinsics {
        Intrinsics {
            fx: w as f64,
            fy: w as f64,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
            near: 0.05,
            far: 10.0,
        }
    }

    fn plane_frame(id: usize, pose: Isometry3<f64>, intr: &Intrinsics, plane_z: f64) -> Frame {
        // depth of the world plane z = plane_z seen from `pose`
        let inv = pose.inverse();
        let depth = Grid::from_fn(intr.width, intr.height, |x, y| {
            let dir_c = intr.backproject(x as f64, y as f64, 1.0);
            let origin = pose.translation.vector;
            let dir_w = pose.rotation * dir_c;
            if dir_w.z.abs() < 1e-12 {
                return 0.0;
            }
            let t = (plane_z - origin.z) / dir_w.z;
            let p = origin + dir_w * t;
            let z = (inv * nalgebra::Point3::from(p)).z;
            if t > 0.0 && z > 0.0 {
                z
            } else {
                0.0
            }
        });
        Frame {
            id,
            timestamp: id as f64,
            color: Grid::new(intr.width, intr.height, [0.5; 3]),
            depth,
            pose,
            masks: Vec::new(),
        }
    }

    #[test]
    fn trigger_thresholds() {
        let a = Isometry3::identity();
        assert!(!keyframe_trigger(&a, &a, 0.3, 20f64.to_radians()));
        let b = Isometry3::from_parts(Translation3::new(0.3 + 1e-6, 0.0, 0.0), UnitQuaternion::identity());
        assert!(keyframe_trigger(&b, &a, 0.3, 20f64.to_radians()));
        let c = Isometry3::from_parts(
            Translation3::identity(),
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 25f64.to_radians()),
        );
        assert!(keyframe_trigger(&c, &a, 0.3, 20f64.to_radians()));
        let d = Isometry3::from_parts(
            Translation3::identity(),
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 15f64.to_radians()),
        );
        assert!(!keyframe_trigger(&d, &a, 0.3, 20f64.to_radians()));
    }

    #[test]
    fn identical_pose_is_covisible_and_facing_away_is_not() {
        let i = intr(64, 48);
        let pose = Isometry3::identity();
        let f = plane_frame(0, pose, &i, 2.0);
        let kf_same = Keyframe::new(f.clone(), i, 0).unwrap();
        let away = look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.0, -1.0, 0.0));
        let mut f_away = plane_frame(1, away, &i, -2.0);
        f_away.id = 1;
        let kf_away = Keyframe::new(f_away, i, 1).unwrap();
        let cov = covisible_keyframes(&f, &i, &[kf_same, kf_away], &CovisibilityParams::default());
        assert_eq!(cov.len(), 1);
        assert_eq!(cov[0].0, 0);
        assert!(cov[0].1 > 0.99);
    }

    #[test]
    fn oblique_view_of_same_surface_is_covisible() {
        let i = intr(64, 48);
        let f = plane_frame(0, Isometry3::identity(), &i, 2.0);
        let eye = Vector3::new(-2.0 * 30f64.to_radians().sin(), 0.0, 2.0 - 2.0 * 30f64.to_radians().cos());
        let pose = look_at(eye, Vector3::new(0.0, 0.0, 2.0), Vector3::new(0.0, -1.0, 0.0));
        let kf = Keyframe::new(plane_frame(1, pose, &i, 2.0), i, 0).unwrap();
        let cov = covisible_keyframes(&f, &i, &[kf], &CovisibilityParams::default());
        assert_eq!(cov.len(), 1);
    }

    #[test]
    fn occluded_samples_are_not_covisible() {
        let i = intr(32, 32);
        let f = plane_frame(0, Isometry3::identity(), &i, 3.0);
        let mut blocked = plane_frame(1, Isometry3::identity(), &i, 3.0);
        blocked.depth = Grid::new(32, 32, 1.0);
        let kf = Keyframe::new(blocked, i, 0).unwrap();
        assert!(covisible_keyframes(&f, &i, &[kf], &CovisibilityParams::default()).is_empty());
    }

    #[test]
    fn window_ranking() {
        let cov = [(1, 0.4), (2, 0.9), (0, 1.0), (3, 0.9)];
        assert_eq!(select_window(0, &cov, 10), vec![0, 2, 3, 1]);
        assert_eq!(select_window(0, &cov, 1), vec![0]);
        assert_eq!(select_window(5, &cov, 3), vec![5, 0, 2]);
    }

    #[test]
    fn closing_fills_small_holes() {
        let mut m = Grid::from_fn(40, 40, |x, y| (10..30).contains(&x) && (10..30).contains(&y));
        for y in 18..21 {
            for x in 18..21 {
                m.set(x, y, false);
            }
        }
        let c = close(&m, 2);
        assert!(c.contains(&m));
        assert!(*c.get(19, 19));
        // closing does not grow a convex region
        assert_eq!(c.count(), 400);
    }

    #[test]
    fn closing_keeps_regions_touching_the_border() {
        let m = Grid::from_fn(20, 20, |x, _| x < 5);
        assert_eq!(close(&m, 3), m);
    }

    #[test]
    fn closing_radius_scales_with_width() {
        assert_eq!(closing_radius(640), 5);
        assert_eq!(closing_radius(128), 1);
        assert_eq!(closing_radius(1280), 10);
    }

    #[test]
    fn stale_remove_rule() {
        let i = intr(20, 20);
        let mut f = plane_frame(0, Isometry3::identity(), &i, 2.0);
        let object = Grid::from_fn(20, 20, |x, y| (5..10).contains(&x) && (5..10).contains(&y));
        let wall = object.not();
        f.masks = vec![object.clone(), wall];
        let mut kf = Keyframe::new(f, i, 0).unwrap();
        let empty = Grid::new(20, 20, false);
        assert!(mask_stale_remove(&mut kf, &empty, 0.5).is_empty());
        assert!(!kf.ignore_mask.any());
        // 80% of the object, plus a sliver of wall
        let region = Grid::from_fn(20, 20, |x, y| (5..10).contains(&x) && (5..9).contains(&y) || (x == 0 && y < 10));
        assert_eq!(mask_stale_remove(&mut kf, &region, 0.5), vec![0]);
        assert_eq!(kf.ignore_mask, object);
    }

    #[test]
    fn ignore_mask_only_grows() {
        let i = intr(8, 8);
        let mut kf = Keyframe::new(plane_frame(0, Isometry3::identity(), &i, 2.0), i, 0).unwrap();
        let a = Grid::from_fn(8, 8, |x, _| x < 2);
        let b = Grid::from_fn(8, 8, |_, y| y < 1);
        assert_eq!(kf.ignore(&a), 16);
        let before = kf.ignore_mask.clone();
        kf.ignore(&b);
        assert!(kf.ignore_mask.contains(&before));
        assert_eq!(kf.ignore(&a), 0);
    }
}
