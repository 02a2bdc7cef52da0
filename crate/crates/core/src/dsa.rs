//! Dynamic scene adaptation: integrate newly observed geometry, then remove
//! geometry the latest observation contradicts, and keep keyframe
//! supervision consistent with both.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{logit, Gaussian, Intrinsics};
use crate::grid::{Grid, Mask};
use crate::keyframes::{
    covisible_keyframes, mask_stale_remove, select_window, stale_add_region, stale_remove_masks, unpremultiplied,
    mean_abs, CovisibilityParams, Frame, Keyframe,
};
use crate::loss::valid_depth;
use crate::map::{GaussianId, GaussianMap, IdSet};
use crate::optim::{optimize_window, OptimSettings, RenderSettings};
use crate::raster::{render, RenderOutput};

/// Change-detection thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eps_opacity: f64,
    /// Meters.
    pub eps_depth: f64,
    /// Per-pixel mean absolute color error.
    pub eps_color: f64,
    pub eps_seed: f64,
    /// Multiplier on the frame's median depth error.
    pub tau: f64,
    pub mask_cover: f64,
    pub weight_ratio_gamma: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            eps_opacity: 0.5,
            eps_depth: 0.10,
            eps_color: 0.15,
            eps_seed: 0.20,
            tau: 10.0,
            mask_cover: 0.5,
            weight_ratio_gamma: 0.6,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.eps_depth, self.eps_color, self.eps_seed, self.tau];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("thresholds must be strictly positive".into()));
        }
        let unit = [self.eps_opacity, self.mask_cover, self.weight_ratio_gamma];
        if unit.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::Config(
                "eps_opacity, mask_cover and weight_ratio_gamma must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Which halves of the adaptation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsaMode {
    /// Seeding only fills unexplored (transparent) pixels.
    Off,
    Add,
    Remove,
    Full,
}

impl DsaMode {
    pub fn adds(self) -> bool {
        matches!(self, DsaMode::Add | DsaMode::Full)
    }

    pub fn removes(self) -> bool {
        matches!(self, DsaMode::Remove | DsaMode::Full)
    }
}

impl std::str::FromStr for DsaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(DsaMode::Off),
            "add" => Ok(DsaMode::Add),
            "remove" => Ok(DsaMode::Remove),
            "full" => Ok(DsaMode::Full),
            _ => Err(Error::Config(format!("unknown dsa mode {s:?} (off|add|remove|full)"))),
        }
    }
}

/// How stale observations are kept out of the supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KfFiltering {
    /// Keyframes stay fully supervised.
    None,
    /// A keyframe with any stale region is dropped entirely.
    Full,
    /// Only the stale masks/regions are ignored.
    Partial,
}

impl std::str::FromStr for KfFiltering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(KfFiltering::None),
            "full" => Ok(KfFiltering::Full),
            "partial" => Ok(KfFiltering::Partial),
            _ => Err(Error::Config(format!("unknown kf filtering {s:?} (none|full|partial)"))),
        }
    }
}

/// Everything one adaptation step needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsaSettings {
    pub thresholds: Thresholds,
    pub mode: DsaMode,
    pub kf_filtering: KfFiltering,
    pub seed_stride: usize,
    pub seed_iterations: usize,
    pub post_remove_iterations: usize,
    /// Re-seed pixels left transparent by a removal.
    pub refill_after_remove: bool,
    pub covisibility: CovisibilityParams,
    pub window_size: usize,
    pub optim: OptimSettings,
    pub render: RenderSettings,
}

impl Default for DsaSettings {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            mode: DsaMode::Full,
            kf_filtering: KfFiltering::Partial,
            seed_stride: 2,
            seed_iterations: 50,
            post_remove_iterations: 100,
            refill_after_remove: true,
            covisibility: CovisibilityParams::default(),
            window_size: 8,
            optim: OptimSettings::default(),
            render: RenderSettings::default(),
        }
    }
}

/// Everything one adaptation step detected and changed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConflictReport {
    pub add_region: Option<Mask>,
    pub seed_region: Option<Mask>,
    /// Conflict pixels behind [`ConflictReport::remove_ids`].
    pub remove_pixels: Option<Mask>,
    pub remove_ids: IdSet,
    pub per_kf_remove_region: BTreeMap<usize, Mask>,
    pub per_kf_remove_ids: BTreeMap<usize, IdSet>,
    /// Mask indices selected for assignment, per keyframe.
    pub per_kf_selected_masks: BTreeMap<usize, Vec<usize>>,
    /// Mask indices marked stale, per keyframe.
    pub per_kf_ignored_masks: BTreeMap<usize, Vec<usize>>,
    /// Newly ignored pixels, per keyframe.
    pub per_kf_ignored_pixels: BTreeMap<usize, usize>,
    pub discarded_keyframes: Vec<usize>,
    pub seeded_ids: IdSet,
    pub refill_ids: IdSet,
    /// Every id tombstoned by this step.
    pub tombstoned: IdSet,
}

/// One line of the conflict log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub step: usize,
    pub frame: usize,
    pub add_area: usize,
    pub seed_area: usize,
    pub remove_area: usize,
    pub seeded: usize,
    pub refilled: usize,
    pub removed: usize,
    pub keyframes: Vec<KeyframeRecord>,
    pub discarded_keyframes: Vec<usize>,
    pub pruned: usize,
    pub live: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub id: usize,
    pub remove_area: usize,
    pub remove_ids: usize,
    pub selected_masks: Vec<usize>,
    pub ignored_masks: Vec<usize>,
    pub ignored_pixels: usize,
}

impl ConflictReport {
    pub fn record(&self, step: usize, frame: usize, pruned: usize, live: usize) -> ConflictRecord {
        let area = |m: &Option<Mask>| m.as_ref().map_or(0, Mask::count);
        let mut ids: Vec<usize> = self
            .per_kf_remove_region
            .keys()
            .chain(self.per_kf_ignored_pixels.keys())
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ConflictRecord {
            step,
            frame,
            add_area: area(&self.add_region),
            seed_area: area(&self.seed_region),
            remove_area: area(&self.remove_pixels),
            seeded: self.seeded_ids.len(),
            refilled: self.refill_ids.len(),
            removed: self.tombstoned.len(),
            keyframes: ids
                .into_iter()
                .map(|id| KeyframeRecord {
                    id,
                    remove_area: self.per_kf_remove_region.get(&id).map_or(0, Mask::count),
                    remove_ids: self.per_kf_remove_ids.get(&id).map_or(0, IdSet::len),
                    selected_masks: self.per_kf_selected_masks.get(&id).cloned().unwrap_or_default(),
                    ignored_masks: self.per_kf_ignored_masks.get(&id).cloned().unwrap_or_default(),
                    ignored_pixels: self.per_kf_ignored_pixels.get(&id).copied().unwrap_or(0),
                })
                .collect(),
            discarded_keyframes: self.discarded_keyframes.clone(),
            pruned,
            live,
        }
    }
}

fn check_frame(render: &RenderOutput, frame: &Frame) -> Result<()> {
    if render.width() != frame.width() || render.height() != frame.height() {
        return Err(Error::invalid("render and frame differ in size"));
    }
    Ok(())
}

/// Pixels where the observation lies in front of a confidently rendered
/// surface.
pub fn detect_add_region(render: &RenderOutput, frame: &Frame, far: f64, th: &Thresholds) -> Result<Mask> {
    check_frame(render, frame)?;
    Ok(Grid::from_fn(frame.width(), frame.height(), |x, y| {
        let d = *frame.depth.get(x, y);
        valid_depth(d, far) && *render.alpha.get(x, y) >= th.eps_opacity && *render.depth.get(x, y) > d + th.eps_depth
    }))
}

/// Median of `|D̂ − D|` over valid pixels, or `None` without any.
pub fn median_depth_error(render: &RenderOutput, frame: &Frame, far: f64) -> Option<f64> {
    let mut errs: Vec<f64> = render
        .depth
        .data()
        .iter()
        .zip(frame.depth.data())
        .filter(|(_, &d)| valid_depth(d, far))
        .map(|(r, d)| (r - d).abs())
        .collect();
    if errs.is_empty() {
        return None;
    }
    let mid = errs.len() / 2;
    let (_, m, _) = errs.select_nth_unstable_by(mid, f64::total_cmp);
    Some(*m)
}

/// Under-reconstructed or conflicting pixels that receive new Gaussians.
///
/// The overshoot clause compares against `max(τ·median, ε_depth)` so a
/// near-perfect depth fit does not turn quantization noise into seeds.
pub fn detect_seed_region(render: &RenderOutput, frame: &Frame, far: f64, th: &Thresholds) -> Result<Mask> {
    check_frame(render, frame)?;
    let median = median_depth_error(render, frame, far).unwrap_or(0.0);
    let overshoot = (th.tau * median).max(th.eps_depth);
    Ok(Grid::from_fn(frame.width(), frame.height(), |x, y| {
        let d = *frame.depth.get(x, y);
        if !valid_depth(d, far) {
            return false;
        }
        *render.alpha.get(x, y) < th.eps_opacity
            || *render.depth.get(x, y) - d > overshoot
            || mean_abs(render.color.get(x, y), frame.color.get(x, y)) > th.eps_seed
    }))
}

/// Valid-depth pixels the map leaves (nearly) transparent.
pub fn detect_unexplored_region(render: &RenderOutput, frame: &Frame, far: f64, th: &Thresholds) -> Result<Mask> {
    check_frame(render, frame)?;
    Ok(Grid::from_fn(frame.width(), frame.height(), |x, y| {
        valid_depth(*frame.depth.get(x, y), far) && *render.alpha.get(x, y) < th.eps_opacity
    }))
}

/// Inserts one Gaussian per region pixel on a `stride` grid, lifted from the
/// frame's depth and color.
pub fn seed_gaussians(map: &mut GaussianMap, frame: &Frame, intr: &Intrinsics, region: &Mask, stride: usize) -> IdSet {
    let stride = stride.max(1);
    let mut ids = IdSet::new();
    for y in (0..frame.height()).step_by(stride) {
        for x in (0..frame.width()).step_by(stride) {
            let d = *frame.depth.get(x, y);
            if !*region.get(x, y) || !valid_depth(d, intr.far) {
                continue;
            }
            let p_cam = intr.backproject(x as f64, y as f64, d);
            let p = frame.pose * nalgebra::Point3::from(p_cam);
            let c = frame.color.get(x, y);
            let mut g = Gaussian::isotropic(p.coords, d / intr.fx, 0.5, nalgebra::Vector3::new(c[0], c[1], c[2]));
            g.opacity_logit = logit(0.5);
            ids.insert(map.insert(g));
        }
    }
    ids
}

/// Pixels where a confident rendered surface sits in front of the
/// observation and disagrees in color.
pub fn remove_conflict_pixels(render: &RenderOutput, frame: &Frame, far: f64, th: &Thresholds) -> Result<Mask> {
    check_frame(render, frame)?;
    Ok(Grid::from_fn(frame.width(), frame.height(), |x, y| {
        let d = *frame.depth.get(x, y);
        valid_depth(d, far)
            && *render.alpha.get(x, y) >= th.eps_opacity
            && mean_abs(render.color.get(x, y), frame.color.get(x, y)) > th.eps_color
            && *render.depth.get(x, y) < d - th.eps_depth
    }))
}

/// Blend weight below which a contributor is not counted as part of the
/// rendered surface.
pub const MIN_SURFACE_WEIGHT: f64 = 1.0 / 255.0;

/// Conflict pixels that survive an opening at the closing radius, so that
/// slivers along depth edges do not trigger removals.
pub fn remove_conflict_region(render: &RenderOutput, frame: &Frame, far: f64, th: &Thresholds) -> Result<Mask> {
    let raw = remove_conflict_pixels(render, frame, far, th)?;
    Ok(crate::keyframes::open(&raw, crate::keyframes::closing_radius(frame.width())))
}

/// Front-to-back contributors up to accumulated opacity `limit`, skipping
/// faint tails.
fn visible_prefix(entries: &[(GaussianId, f64)], limit: f64) -> impl Iterator<Item = GaussianId> + '_ {
    let mut acc = 0.0;
    entries
        .iter()
        .map_while(move |&(id, w)| {
            if acc >= limit {
                return None;
            }
            acc += w;
            Some((id, w))
        })
        .filter(|&(_, w)| w >= MIN_SURFACE_WEIGHT)
        .map(|(id, _)| id)
}

/// Gaussians forming the rendered surface at remove-conflict pixels.
pub fn detect_remove_set(render: &RenderOutput, frame: &Frame, far: f64, th: &Thresholds) -> Result<IdSet> {
    Ok(detect_remove(render, frame, far, th)?.0)
}

fn detect_remove(render: &RenderOutput, frame: &Frame, far: f64, th: &Thresholds) -> Result<(IdSet, Mask)> {
    let contributors = render
        .contributors
        .as_ref()
        .ok_or_else(|| Error::invalid("remove detection needs a render with contributors"))?;
    let pixels = remove_conflict_region(render, frame, far, th)?;
    let mut ids = IdSet::new();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            if *pixels.get(x, y) {
                ids.extend(visible_prefix(contributors.at(x, y), th.eps_opacity));
            }
        }
    }
    Ok((ids, pixels))
}

/// Pixels of `kf` where the to-be-removed Gaussians alone reproduce the
/// keyframe's observation, i.e. where the keyframe saw them.
pub fn keyframe_remove_region(
    map: &GaussianMap,
    remove_ids: &IdSet,
    kf: &Keyframe,
    th: &Thresholds,
    rs: &RenderSettings,
) -> Mask {
    let (w, h) = (kf.camera.width(), kf.camera.height());
    if remove_ids.is_empty() {
        return Grid::new(w, h, false);
    }
    let sub = render(map, &kf.camera, &rs.options().subset(remove_ids));
    let far = kf.camera.intrinsics.far;
    Grid::from_fn(w, h, |x, y| {
        let d = *kf.frame.depth.get(x, y);
        valid_depth(d, far)
            && *sub.alpha.get(x, y) >= th.eps_opacity
            && (*sub.depth.get(x, y) - d).abs() < th.eps_depth
            && mean_abs(&unpremultiplied(&sub, x, y, rs.background), kf.frame.color.get(x, y)) < th.eps_color
    })
}

/// Masks intersecting `region` by more than `mask_cover` of the smaller of
/// the two.
pub fn select_masks(masks: &[Mask], region: &Mask, mask_cover: f64) -> Vec<usize> {
    let r = region.count();
    if r == 0 {
        return Vec::new();
    }
    masks
        .iter()
        .enumerate()
        .filter(|(_, m)| {
            let n = m.count();
            n > 0 && m.intersection_count(region) as f64 / n.min(r) as f64 > mask_cover
        })
        .map(|(i, _)| i)
        .collect()
}

/// Inside and outside blend weight of one Gaussian over a set of views.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaskWeights {
    pub inside: f64,
    pub outside: f64,
}

impl MaskWeights {
    pub fn ratio(&self) -> f64 {
        let t = self.inside + self.outside;
        if t > 0.0 {
            self.inside / t
        } else {
            0.0
        }
    }
}

/// Accumulated blend weight of every Gaussian inside/outside the union of
/// each view's selected masks.
pub fn mask_weights(
    map: &GaussianMap,
    views: &[(&Keyframe, Vec<usize>)],
    rs: &RenderSettings,
) -> BTreeMap<GaussianId, MaskWeights> {
    let per_view: Vec<HashMap<GaussianId, MaskWeights>> = views
        .par_iter()
        .map(|(kf, chosen)| {
            let mut acc: HashMap<GaussianId, MaskWeights> = HashMap::new();
            if chosen.is_empty() {
                return acc;
            }
            let mut union = Grid::new(kf.camera.width(), kf.camera.height(), false);
            for &i in chosen {
                union.or_assign(&kf.frame.masks[i]);
            }
            let out = render(map, &kf.camera, &rs.options().contributors(true));
            let contributors = out.contributors.expect("requested");
            for y in 0..union.height() {
                for x in 0..union.width() {
                    let inside = *union.get(x, y);
                    for &(id, w) in contributors.at(x, y) {
                        let e = acc.entry(id).or_default();
                        if inside {
                            e.inside += w;
                        } else {
                            e.outside += w;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total: BTreeMap<GaussianId, MaskWeights> = BTreeMap::new();
    for view in per_view {
        let mut sorted: Vec<_> = view.into_iter().collect();
        sorted.sort_by_key(|(id, _)| *id);
        for (id, w) in sorted {
            let e = total.entry(id).or_default();
            e.inside += w.inside;
            e.outside += w.outside;
        }
    }
    total
}

/// Gaussians that render predominantly inside the selected masks.
pub fn assign_masks_to_gaussians(
    map: &GaussianMap,
    views: &[(&Keyframe, Vec<usize>)],
    th: &Thresholds,
    rs: &RenderSettings,
) -> IdSet {
    mask_weights(map, views, rs)
        .into_iter()
        .filter(|(_, w)| w.inside > 0.0 && w.ratio() > th.weight_ratio_gamma)
        .map(|(id, _)| id)
        .collect()
}

/// Tombstones live Gaussians with opacity below `min_opacity`, then
/// compacts. Returns the number removed.
pub fn prune_transparent(map: &mut GaussianMap, min_opacity: f64) -> usize {
    let low: Vec<GaussianId> = map
        .iter()
        .filter(|(_, g)| g.opacity() < min_opacity)
        .map(|(id, _)| id)
        .collect();
    for id in &low {
        map.tombstone(*id).expect("live id");
    }
    map.compact();
    low.len()
}

/// Runs one adaptation step for the newly selected keyframe `current`.
///
/// `previous` are the earlier keyframes; their ignore-masks (and discard
/// flags) are updated. On error the map and keyframes are left exactly as
/// they were.
pub fn dsa_step(
    map: &mut GaussianMap,
    current: &Keyframe,
    previous: &mut [Keyframe],
    settings: &DsaSettings,
) -> Result<ConflictReport> {
    let map_before = map.clone();
    let kf_before: Vec<(Mask, bool)> = previous.iter().map(|k| (k.ignore_mask.clone(), k.discarded)).collect();
    let result = dsa_step_inner(map, current, previous, settings);
    if result.is_err() {
        *map = map_before;
        for (kf, (mask, discarded)) in previous.iter_mut().zip(kf_before) {
            kf.ignore_mask = mask;
            kf.discarded = discarded;
        }
    }
    result
}

fn dsa_step_inner(
    map: &mut GaussianMap,
    current: &Keyframe,
    previous: &mut [Keyframe],
    s: &DsaSettings,
) -> Result<ConflictReport> {
    let th = &s.thresholds;
    let rs = &s.render;
    let intr = current.camera.intrinsics;
    let far = intr.far;
    let frame = &current.frame;
    let mut report = ConflictReport::default();

    let covisible: Vec<(usize, f64)> = covisible_keyframes(frame, &intr, previous, &s.covisibility)
        .into_iter()
        .filter(|(id, _)| *id != current.id())
        .collect();
    let index: HashMap<usize, usize> = previous.iter().enumerate().map(|(i, k)| (k.id(), i)).collect();

    // Add: seed what the map lacks, fit it to the current keyframe.
    let before = render(map, &current.camera, &rs.options());
    report.add_region = Some(detect_add_region(&before, frame, far, th)?);
    let seed_region = if s.mode.adds() {
        detect_seed_region(&before, frame, far, th)?
    } else {
        detect_unexplored_region(&before, frame, far, th)?
    };
    let existing = map.live_ids();
    report.seeded_ids = seed_gaussians(map, frame, &intr, &seed_region, s.seed_stride);
    report.seed_region = Some(seed_region);
    if !report.seeded_ids.is_empty() && s.seed_iterations > 0 {
        let opt = OptimSettings {
            iterations: s.seed_iterations,
            ..s.optim.clone()
        };
        optimize_window(map, &[current], &opt, rs, Some(&report.seeded_ids))?;
    }
    if s.mode.adds() && !report.seeded_ids.is_empty() {
        let regions: Vec<(usize, Mask)> = covisible
            .par_iter()
            .map(|(id, _)| (*id, stale_add_region(&previous[index[id]], map, &report.seeded_ids, th, rs)))
            .collect();
        for (id, region) in regions {
            if region.any() {
                apply_stale(&mut previous[index[&id]], &region, s.kf_filtering, &mut report);
            }
        }
    }

    // Remove: contradicted pre-existing geometry, completed through masks.
    if s.mode.removes() && !existing.is_empty() {
        let out = render(map, &current.camera, &rs.options().subset(&existing).contributors(true));
        let (remove_ids, pixels) = detect_remove(&out, frame, far, th)?;
        report.remove_ids = remove_ids;
        report.remove_pixels = Some(pixels);
        if !report.remove_ids.is_empty() {
            remove_and_propagate(map, current, previous, &covisible, &index, &existing, s, &mut report)?;
        }
    }
    Ok(report)
}

fn apply_stale(kf: &mut Keyframe, region: &Mask, filtering: KfFiltering, report: &mut ConflictReport) {
    match filtering {
        KfFiltering::None => {}
        KfFiltering::Partial => {
            let n = kf.ignore(region);
            *report.per_kf_ignored_pixels.entry(kf.id()).or_default() += n;
        }
        KfFiltering::Full => {
            if !kf.discarded {
                kf.discarded = true;
                report.discarded_keyframes.push(kf.id());
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn remove_and_propagate(
    map: &mut GaussianMap,
    current: &Keyframe,
    previous: &mut [Keyframe],
    covisible: &[(usize, f64)],
    index: &HashMap<usize, usize>,
    existing: &IdSet,
    s: &DsaSettings,
    report: &mut ConflictReport,
) -> Result<()> {
    let th = &s.thresholds;
    let rs = &s.render;
    let frozen: &GaussianMap = map;
    let regions: Vec<(usize, Mask)> = covisible
        .par_iter()
        .map(|(id, _)| (*id, keyframe_remove_region(frozen, &report.remove_ids, &previous[index[id]], th, rs)))
        .collect();

    let mut views: Vec<(&Keyframe, Vec<usize>)> = Vec::new();
    for (id, region) in &regions {
        if !region.any() {
            continue;
        }
        let kf = &previous[index[id]];
        let chosen = select_masks(&kf.frame.masks, region, th.mask_cover);
        if !chosen.is_empty() {
            report.per_kf_selected_masks.insert(*id, chosen.clone());
            views.push((kf, chosen));
        }
    }
    let candidates = frozen.live_ids();
    let assigned: IdSet = assign_masks_to_gaussians(frozen, &views, th, rs)
        .into_iter()
        .filter(|id| existing.contains(id) && candidates.contains(id))
        .collect();
    for (kf, chosen) in &views {
        let sub_weights = mask_weights(frozen, &[(kf, chosen.clone())], rs);
        let ids: IdSet = assigned
            .iter()
            .copied()
            .filter(|id| sub_weights.get(id).is_some_and(|w| w.inside > 0.0))
            .collect();
        report.per_kf_remove_ids.insert(kf.id(), ids);
    }
    for (id, region) in regions {
        if region.any() {
            report.per_kf_remove_region.insert(id, region);
        }
    }

    let mut doomed = report.remove_ids.clone();
    doomed.extend(report.per_kf_remove_ids.values().flatten().copied());
    // where each covisible keyframe saw any of the geometry about to go
    let stale: Vec<(usize, Mask)> = covisible
        .par_iter()
        .map(|(id, _)| (*id, keyframe_remove_region(frozen, &doomed, &previous[index[id]], th, rs)))
        .filter(|(_, r)| r.any())
        .collect();
    for id in &doomed {
        map.tombstone(*id)?;
    }
    report.tombstoned = doomed;

    for (id, region) in &stale {
        let (id, region) = (*id, region);
        let kf = &mut previous[index[&id]];
        match s.kf_filtering {
            KfFiltering::None => {}
            KfFiltering::Partial => {
                let before = kf.ignore_mask.count();
                let masks = mask_stale_remove(kf, region, th.mask_cover);
                let n = kf.ignore_mask.count() - before;
                if !masks.is_empty() {
                    report.per_kf_ignored_masks.insert(id, masks);
                    *report.per_kf_ignored_pixels.entry(id).or_default() += n;
                }
            }
            KfFiltering::Full => {
                if !stale_remove_masks(kf, region, th.mask_cover).is_empty() && !kf.discarded {
                    kf.discarded = true;
                    report.discarded_keyframes.push(id);
                }
            }
        }
    }

    if s.refill_after_remove {
        let out = render(map, &current.camera, &rs.options());
        let holes = detect_unexplored_region(&out, &current.frame, current.camera.intrinsics.far, th)?;
        report.refill_ids = seed_gaussians(map, &current.frame, &current.camera.intrinsics, &holes, s.seed_stride);
    }

    if s.post_remove_iterations > 0 {
        let window_ids = select_window(current.id(), covisible, s.window_size);
        let mut window: Vec<&Keyframe> = vec![current];
        window.extend(
            window_ids
                .iter()
                .filter(|id| **id != current.id())
                .map(|id| &previous[index[id]])
                .filter(|k| k.is_usable()),
        );
        let opt = OptimSettings {
            iterations: s.post_remove_iterations,
            ..s.optim.clone()
        };
        optimize_window(map, &window, &opt, rs, None)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sigmoid;
    use nalgebra::{Isometry3, Vector3};

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 32.0,
            fy: 32.0,
            cx: 15.5,
            cy: 15.5,
            width: 32,
            height: 32,
            near: 0.05,
            far: 10.0,
        }
    }

    fn frame_from(map: &GaussianMap, pose: Isometry3<f64>, id: usize) -> Frame {
        let cam = crate::geometry::Camera::from_pose(intr(), &pose).unwrap();
        let out = render(map, &cam, &RenderSettings::default().options());
        let depth = Grid::from_fn(32, 32, |x, y| if *out.alpha.get(x, y) > 0.5 { *out.depth.get(x, y) } else { 0.0 });
        Frame {
            id,
            timestamp: id as f64,
            color: out.color,
            depth,
            pose,
            masks: Vec::new(),
        }
    }

    fn wall(z: f64, color: Vector3<f64>, half: f64) -> Vec<Gaussian> {
        let n = 12;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let t = |k: usize| -half + 2.0 * half * k as f64 / (n - 1) as f64;
                out.push(Gaussian::isotropic(Vector3::new(t(i), t(j), z), half / n as f64 * 1.2, 0.99, color));
            }
        }
        out
    }

    #[test]
    fn thresholds_validate() {
        assert!(Thresholds::default().validate().is_ok());
        let bad = Thresholds {
            mask_cover: 1.0,
            ..Thresholds::default()
        };
        assert!(bad.validate().is_err());
        assert!("full".parse::<DsaMode>().is_ok());
        assert!("bogus".parse::<KfFiltering>().is_err());
    }

    #[test]
    fn agreement_gives_empty_regions() {
        let map = GaussianMap::from_gaussians(wall(2.0, Vector3::new(0.5, 0.5, 0.5), 1.5));
        let f = frame_from(&map, Isometry3::identity(), 0);
        let cam = crate::geometry::Camera::from_pose(intr(), &f.pose).unwrap();
        let out = render(&map, &cam, &RenderSettings::default().options().contributors(true));
        let th = Thresholds::default();
        assert!(!detect_add_region(&out, &f, 10.0, &th).unwrap().any());
        assert!(detect_remove_set(&out, &f, 10.0, &th).unwrap().is_empty());
        assert!(detect_seed_region(&out, &f, 10.0, &th).unwrap().count() < 32 * 32 / 100);
    }

    #[test]
    fn empty_map_seeds_all_valid_pixels() {
        let truth = GaussianMap::from_gaussians(wall(2.0, Vector3::new(0.5, 0.5, 0.5), 1.5));
        let f = frame_from(&truth, Isometry3::identity(), 0);
        let empty = GaussianMap::new();
        let cam = crate::geometry::Camera::from_pose(intr(), &f.pose).unwrap();
        let out = render(&empty, &cam, &RenderSettings::default().options());
        let region = detect_seed_region(&out, &f, 10.0, &Thresholds::default()).unwrap();
        let valid = f.depth.map(|d| *d > 0.0);
        assert_eq!(region, valid);
    }

    #[test]
    fn seeding_backprojects_center_pixel() {
        let i = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 2.0,
            cy: 2.0,
            width: 5,
            height: 5,
            near: 0.1,
            far: 10.0,
        };
        let frame = Frame {
            id: 0,
            timestamp: 0.0,
            color: Grid::new(5, 5, [0.2, 0.4, 0.6]),
            depth: Grid::new(5, 5, 2.0),
            pose: Isometry3::identity(),
            masks: Vec::new(),
        };
        let mut map = GaussianMap::new();
        assert!(seed_gaussians(&mut map, &frame, &i, &Grid::new(5, 5, false), 2).is_empty());
        assert!(map.is_empty());
        let region = Grid::from_fn(5, 5, |x, y| x == 2 && y == 2);
        let ids = seed_gaussians(&mut map, &frame, &i, &region, 2);
        assert_eq!(ids.len(), 1);
        let g = map.get(*ids.iter().next().unwrap()).unwrap();
        assert!((g.mean - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert!((g.scale() - Vector3::repeat(0.02)).norm() < 1e-12);
        assert!((sigmoid(g.opacity_logit) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn added_box_yields_add_region_and_no_removal() {
        let th = Thresholds::default();
        let map = GaussianMap::from_gaussians(wall(3.0, Vector3::new(0.5, 0.5, 0.5), 3.0));
        let silhouette = Grid::from_fn(32, 32, |x, y| (10..20).contains(&x) && (12..22).contains(&y));
        let f = Frame {
            id: 0,
            timestamp: 0.0,
            color: silhouette.map(|&s| if s { [0.9, 0.1, 0.1] } else { [0.5; 3] }),
            depth: silhouette.map(|&s| if s { 2.5 } else { 3.0 }),
            pose: Isometry3::identity(),
            masks: Vec::new(),
        };
        let cam = crate::geometry::Camera::from_pose(intr(), &f.pose).unwrap();
        let out = render(&map, &cam, &RenderSettings::default().options().contributors(true));
        let add = detect_add_region(&out, &f, 10.0, &th).unwrap();
        assert!(add.iou(&silhouette) >= 0.9, "iou {}", add.iou(&silhouette));
        assert!(detect_remove_set(&out, &f, 10.0, &th).unwrap().is_empty());
    }

    #[test]
    fn removed_box_is_detected() {
        let th = Thresholds::default();
        let background = wall(3.0, Vector3::new(0.5, 0.5, 0.5), 2.0);
        let mut map = GaussianMap::from_gaussians(background.clone());
        let object: IdSet = wall(2.5, Vector3::new(0.9, 0.1, 0.1), 0.4).into_iter().map(|g| map.insert(g)).collect();
        let f = frame_from(&GaussianMap::from_gaussians(background), Isometry3::identity(), 0);
        let cam = crate::geometry::Camera::from_pose(intr(), &f.pose).unwrap();
        let out = render(&map, &cam, &RenderSettings::default().options().contributors(true));
        let ids = detect_remove_set(&out, &f, 10.0, &th).unwrap();
        let hit = ids.intersection(&object).count();
        assert!(hit as f64 >= 0.9 * object.len() as f64, "{hit}/{}", object.len());
        assert!(ids.is_subset(&object));
        assert!(matches!(
            detect_remove_set(&render(&map, &cam, &RenderSettings::default().options()), &f, 10.0, &th),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mask_selection_rule() {
        let region = Grid::from_fn(10, 10, |x, y| x < 5 && y < 2);
        let small = Grid::from_fn(10, 10, |x, y| x < 2 && y < 2);
        let big = Grid::new(10, 10, true);
        let far = Grid::from_fn(10, 10, |x, _| x == 9);
        assert_eq!(select_masks(&[small, big, far], &region, 0.5), vec![0, 1]);
        assert!(select_masks(&[Grid::new(10, 10, true)], &Grid::new(10, 10, false), 0.5).is_empty());
    }

    #[test]
    fn assignment_inside_and_unseen() {
        let th = Thresholds::default();
        let rs = RenderSettings::default();
        let mut map = GaussianMap::new();
        let inside = map.insert(Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.9, Vector3::repeat(0.5)));
        let unseen = map.insert(Gaussian::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.05, 0.9, Vector3::repeat(0.5)));
        let mut f = frame_from(&map, Isometry3::identity(), 0);
        f.masks = vec![Grid::from_fn(32, 32, |x, y| (8..24).contains(&x) && (8..24).contains(&y))];
        let kf = Keyframe::new(f, intr(), 0).unwrap();
        let got = assign_masks_to_gaussians(&map, &[(&kf, vec![0])], &th, &rs);
        assert!(got.contains(&inside));
        assert!(!got.contains(&unseen));
        assert!(assign_masks_to_gaussians(&map, &[], &th, &rs).is_empty());
    }

    #[test]
    fn failed_step_leaves_state_untouched() {
        let map0 = GaussianMap::from_gaussians(wall(3.0, Vector3::new(0.5, 0.5, 0.5), 2.0));
        let mut f = frame_from(&map0, Isometry3::identity(), 1);
        // a NaN observation poisons the seed optimization
        for x in 0..32 {
            f.depth.set(x, 0, 1.0);
        }
        f.color.set(0, 0, [f64::NAN; 3]);
        let current = Keyframe::new(f, intr(), 1).unwrap();
        let mut previous = vec![Keyframe::new(frame_from(&map0, Isometry3::identity(), 0), intr(), 0).unwrap()];
        let mut map = map0.clone();
        let err = dsa_step(&mut map, &current, &mut previous, &DsaSettings::default());
        assert!(matches!(err, Err(Error::Numerical { .. })));
        assert!(map.same_content(&map0));
        assert_eq!(map.live_ids(), map0.live_ids());
        assert!(!previous[0].ignore_mask.any());
    }

    #[test]
    fn prune_drops_transparent() {
        let mut map = GaussianMap::new();
        map.insert(Gaussian::isotropic(Vector3::zeros(), 0.1, 0.01, Vector3::zeros()));
        let keep = map.insert(Gaussian::isotropic(Vector3::zeros(), 0.1, 0.5, Vector3::zeros()));
        assert_eq!(prune_transparent(&mut map, 0.05), 1);
        assert_eq!(map.live_ids(), [keep].into());
    }
}
