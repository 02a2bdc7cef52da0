//! Tile-based front-to-back alpha compositing of projected Gaussians, the
//! naive reference renderer, and the analytic backward pass.
//!
//! Every pixel blends the visible Gaussians in ascending camera depth (ties
//! broken by id):
//!
//! ```text
//! w_j   = α_j · Π_{k<j} (1 − α_k)
//! C(p)  = Σ_j c_j w_j + background · Π_j (1 − α_j)
//! D(p)  = Σ_j d_j w_j / Σ_j w_j        (normalized mode, Σ w > 1e-3, else far)
//! α_j   = min(0.99, o_j · exp(−½ Δᵀ Σ⁻¹ Δ))
//! ```
//!
//! Blending stops once the transmittance falls below 1e-4.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    jacobian_point, perspective_jacobian, project_gaussian, rotmat_grad_to_quat,
    unit_quat_to_rotmat, Camera,
};
use crate::grid::{ColorImage, DepthMap, Grid, Mask};
use crate::map::{GaussianId, GaussianMap, IdSet};

pub const TILE_SIZE: usize = 16;
/// Side of the pixel blocks a tile list is bucketed into.
const BLOCK: usize = 4;
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
pub const MAX_ALPHA: f64 = 0.99;
/// Accumulated opacity below which normalized depth falls back to `far`.
pub const DEPTH_ALPHA_FLOOR: f64 = 1e-3;
/// Half-extent of a splat's tile footprint, in standard deviations. At this
/// distance `exp(−σ)` is below 1e-12, so tiling never changes a pixel by more
/// than that per splat.
const TILE_EXTENT_SIGMAS: f64 = 7.5;
/// Pixels beyond the tile extent, in Mahalanobis terms, receive no alpha
/// from a splat. This makes a pixel's result independent of the tiling.
const CUTOFF_POWER: f64 = 0.5 * TILE_EXTENT_SIGMAS * TILE_EXTENT_SIGMAS;

/// How rendered depth is formed from the blend weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    /// `Σ d_j w_j / Σ w_j`, or `far` when `Σ w_j ≤ 1e-3`.
    #[default]
    Normalized,
    /// `Σ d_j w_j`.
    Raw,
}

#[derive(Clone, Debug)]
pub struct RenderOptions<'a> {
    pub background: [f64; 3],
    /// Restrict rendering to these ids.
    pub subset: Option<&'a IdSet>,
    pub keep_contributors: bool,
    pub depth_mode: DepthMode,
}

impl Default for RenderOptions<'_> {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            subset: None,
            keep_contributors: false,
            depth_mode: DepthMode::Normalized,
        }
    }
}

impl<'a> RenderOptions<'a> {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background,
            ..Self::default()
        }
    }

    pub fn subset(mut self, ids: &'a IdSet) -> Self {
        self.subset = Some(ids);
        self
    }

    pub fn contributors(mut self, keep: bool) -> Self {
        self.keep_contributors = keep;
        self
    }

    pub fn depth_mode(mut self, mode: DepthMode) -> Self {
        self.depth_mode = mode;
        self
    }
}

/// Per-pixel `(id, blend weight)` lists in front-to-back order.
#[derive(Clone, Debug, PartialEq)]
pub struct Contributors {
    width: usize,
    offsets: Vec<usize>,
    entries: Vec<(GaussianId, f64)>,
}

impl Contributors {
    pub fn at(&self, x: usize, y: usize) -> &[(GaussianId, f64)] {
        let i = y * self.width + x;
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn total_entries(&self) -> usize {
        self.entries.len()
    }

    fn from_pixels(width: usize, pixels: Vec<Vec<(GaussianId, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(pixels.len() + 1);
        let mut entries = Vec::with_capacity(pixels.iter().map(Vec::len).sum());
        offsets.push(0);
        for p in pixels {
            entries.extend(p);
            offsets.push(entries.len());
        }
        Self {
            width,
            offsets,
            entries,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: DepthMap,
    pub alpha: Grid<f64>,
    pub contributors: Option<Contributors>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

/// Screen-space data for one visible Gaussian.
#[derive(Clone, Debug)]
struct PreparedSplat {
    slot: usize,
    id: GaussianId,
    mean2d: Vector2<f64>,
    /// Inverse screen covariance `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)`.
    bounds: (usize, usize, usize, usize),
}

fn prepare(map: &GaussianMap, cam: &Camera, subset: Option<&IdSet>) -> Vec<PreparedSplat> {
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let mut splats: Vec<PreparedSplat> = map
        .slots()
        .par_iter()
        .enumerate()
        .filter_map(|(slot, s)| {
            if !s.alive || subset.is_some_and(|ids| !ids.contains(&s.id)) {
                return None;
            }
            let g = &s.gaussian;
            let sp = project_gaussian(g, cam);
            if !sp.visible {
                return None;
            }
            let inv = sp.cov2d.try_inverse()?;
            // axis extents of the ellipse ½ dᵀ Σ⁻¹ d = CUTOFF_POWER
            let rx = TILE_EXTENT_SIGMAS * sp.cov2d[(0, 0)].sqrt();
            let ry = TILE_EXTENT_SIGMAS * sp.cov2d[(1, 1)].sqrt();
            let x0 = (sp.mean2d.x - rx).ceil().max(0.0);
            let x1 = (sp.mean2d.x + rx).floor().min(w - 1.0);
            let y0 = (sp.mean2d.y - ry).ceil().max(0.0);
            let y1 = (sp.mean2d.y + ry).floor().min(h - 1.0);
            if x0 > x1 || y0 > y1 {
                return None;
            }
            let c = g.render_color();
            Some(PreparedSplat {
                slot,
                id: s.id,
                mean2d: sp.mean2d,
                conic: [inv[(0, 0)], 0.5 * (inv[(0, 1)] + inv[(1, 0)]), inv[(1, 1)]],
                opacity: g.opacity(),
                color: [c.x, c.y, c.z],
                depth: sp.depth,
                bounds: (x0 as usize, x1 as usize, y0 as usize, y1 as usize),
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
    splats
}

struct TileGrid {
    tiles_x: usize,
    lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn build(splats: &[PreparedSplat], width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (i, s) in splats.iter().enumerate() {
            let (x0, x1, y0, y1) = s.bounds;
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        Self {
            tiles_x,
            lists,
        }
    }

    /// Splits a tile's list into `BLOCK`×`BLOCK` pixel blocks. Entries are
    /// positions in the tile list, in depth order.
    fn blocks(&self, splats: &[PreparedSplat], tile: usize, width: usize, height: usize) -> Vec<Vec<u32>> {
        let (x0, x1, y0, y1) = self.pixel_range(tile, width, height);
        let bx = (x1 - x0).div_ceil(BLOCK);
        let by = (y1 - y0).div_ceil(BLOCK);
        let mut out = vec![Vec::new(); bx * by];
        for (k, &i) in self.lists[tile].iter().enumerate() {
            let (sx0, sx1, sy0, sy1) = splats[i as usize].bounds;
            let cx0 = sx0.max(x0) - x0;
            let cx1 = sx1.min(x1 - 1) - x0;
            let cy0 = sy0.max(y0) - y0;
            let cy1 = sy1.min(y1 - 1) - y0;
            for byi in cy0 / BLOCK..=cy1 / BLOCK {
                for bxi in cx0 / BLOCK..=cx1 / BLOCK {
                    out[byi * bx + bxi].push(k as u32);
                }
            }
        }
        out
    }

    fn block_of(&self, tile: usize, x: usize, y: usize, width: usize, height: usize) -> usize {
        let (x0, x1, y0, _) = self.pixel_range(tile, width, height);
        let bx = (x1 - x0).div_ceil(BLOCK);
        ((y - y0) / BLOCK) * bx + (x - x0) / BLOCK
    }

    fn pixel_range(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(width), y0, (y0 + TILE_SIZE).min(height))
    }
}

#[inline]
fn splat_power(s: &PreparedSplat, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - s.mean2d.x;
    let dy = py - s.mean2d.y;
    let [a, b, c] = s.conic;
    (0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy), dx, dy)
}

struct PixelResult {
    color: [f64; 3],
    depth: f64,
    alpha: f64,
    contributors: Vec<(GaussianId, f64)>,
}

fn shade_pixel(
    splats: &[PreparedSplat],
    list: &[u32],
    block: &[u32],
    px: usize,
    py: usize,
    opts: &RenderOptions,
    far: f64,
) -> PixelResult {
    let (fx, fy) = (px as f64, py as f64);
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut weighted_depth = 0.0;
    let mut contributors = Vec::new();
    for &k in block {
        let s = &splats[list[k as usize] as usize];
        let (power, _, _) = splat_power(s, fx, fy);
        if power > CUTOFF_POWER {
            continue;
        }
        let alpha = (s.opacity * (-power).exp()).min(MAX_ALPHA);
        let w = alpha * t;
        for ch in 0..3 {
            color[ch] += s.color[ch] * w;
        }
        weighted_depth += s.depth * w;
        if opts.keep_contributors {
            contributors.push((s.id, w));
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    for ch in 0..3 {
        color[ch] += opts.background[ch] * t;
    }
    let alpha = 1.0 - t;
    let depth = match opts.depth_mode {
        DepthMode::Normalized if alpha > DEPTH_ALPHA_FLOOR => weighted_depth / alpha,
        DepthMode::Normalized => far,
        DepthMode::Raw => weighted_depth,
    };
    PixelResult {
        color,
        depth,
        alpha,
        contributors,
    }
}

/// Renders color, depth and accumulated opacity of the live Gaussians.
pub fn render(map: &GaussianMap, cam: &Camera, opts: &RenderOptions) -> RenderOutput {
    let (width, height) = (cam.width(), cam.height());
    let far = cam.intrinsics.far;
    let splats = prepare(map, cam, opts.subset);
    let tiles = TileGrid::build(&splats, width, height);

    let tile_results: Vec<Vec<PixelResult>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tiles.pixel_range(tile, width, height);
            let list = &tiles.lists[tile];
            let blocks = tiles.blocks(&splats, tile, width, height);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let block = &blocks[tiles.block_of(tile, x, y, width, height)];
                    out.push(shade_pixel(&splats, list, block, x, y, opts, far));
                }
            }
            out
        })
        .collect();

    let mut color = Grid::new(width, height, [0.0; 3]);
    let mut depth = Grid::new(width, height, far);
    let mut alpha = Grid::new(width, height, 0.0);
    let mut contrib = opts
        .keep_contributors
        .then(|| vec![Vec::new(); width * height]);
    for (tile, results) in tile_results.into_iter().enumerate() {
        let (x0, x1, y0, _) = tiles.pixel_range(tile, width, height);
        let tw = x1 - x0;
        for (k, r) in results.into_iter().enumerate() {
            let (x, y) = (x0 + k % tw, y0 + k / tw);
            color.set(x, y, r.color);
            depth.set(x, y, r.depth);
            alpha.set(x, y, r.alpha);
            if let Some(c) = contrib.as_mut() {
                c[y * width + x] = r.contributors;
            }
        }
    }
    RenderOutput {
        color,
        depth,
        alpha,
        contributors: contrib.map(|c| Contributors::from_pixels(width, c)),
    }
}

/// Reference renderer: a plain per-pixel loop over every visible Gaussian with
/// no tiling and no early termination. Always records contributors.
pub fn brute_force_render(map: &GaussianMap, cam: &Camera, background: [f64; 3]) -> RenderOutput {
    brute_force_render_with(map, cam, &RenderOptions::with_background(background))
}

/// [`brute_force_render`] honoring subset and depth mode.
pub fn brute_force_render_with(map: &GaussianMap, cam: &Camera, opts: &RenderOptions) -> RenderOutput {
    let (width, height) = (cam.width(), cam.height());
    let far = cam.intrinsics.far;
    let mut visible: Vec<(f64, GaussianId, Vector2<f64>, Matrix2<f64>, f64, Vector3<f64>)> = map
        .iter()
        .filter(|(id, _)| opts.subset.is_none_or(|s| s.contains(id)))
        .filter_map(|(id, g)| {
            let sp = project_gaussian(g, cam);
            let inv = sp.cov2d.try_inverse()?;
            sp.visible
                .then(|| (sp.depth, id, sp.mean2d, inv, g.opacity(), g.render_color()))
        })
        .collect();
    visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut color = Grid::new(width, height, [0.0; 3]);
    let mut depth = Grid::new(width, height, far);
    let mut alpha = Grid::new(width, height, 0.0);
    let mut contrib = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let p = Vector2::new(x as f64, y as f64);
            let mut weights = Vec::with_capacity(visible.len());
            let mut t_final = 1.0;
            for (_, _, mean, inv, o, _) in &visible {
                let d = p - mean;
                let sigma = 0.5 * (d.transpose() * inv * d)[(0, 0)];
                let a = (o * (-sigma).exp()).min(MAX_ALPHA);
                weights.push((a * t_final, a));
                t_final *= 1.0 - a;
            }
            let mut c = Vector3::from(opts.background) * t_final;
            let mut nd = 0.0;
            let mut wsum = 0.0;
            let mut list = Vec::new();
            for ((w, _), (d, id, _, _, _, col)) in weights.iter().zip(&visible) {
                c += col * *w;
                nd += d * w;
                wsum += w;
                list.push((*id, *w));
            }
            color.set(x, y, [c.x, c.y, c.z]);
            alpha.set(x, y, wsum);
            depth.set(
                x,
                y,
                match opts.depth_mode {
                    DepthMode::Normalized if wsum > DEPTH_ALPHA_FLOOR => nd / wsum,
                    DepthMode::Normalized => far,
                    DepthMode::Raw => nd,
                },
            );
            contrib.push(list);
        }
    }
    RenderOutput {
        color,
        depth,
        alpha,
        contributors: Some(Contributors::from_pixels(width, contrib)),
    }
}

/// Gradient of a scalar loss with respect to one Gaussian's raw parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vector3<f64>,
    pub rot: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl GaussianGrad {
    pub fn to_array(&self) -> [f64; 14] {
        [
            self.mean.x,
            self.mean.y,
            self.mean.z,
            self.rot[0],
            self.rot[1],
            self.rot[2],
            self.rot[3],
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            self.opacity_logit,
            self.color.x,
            self.color.y,
            self.color.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradients aligned with the map's storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub(crate) slots: Vec<(GaussianId, GaussianGrad)>,
}

impl Gradients {
    pub fn get(&self, id: GaussianId) -> Option<&GaussianGrad> {
        self.slots.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (GaussianId, &GaussianGrad)> {
        self.slots.iter().map(|(id, g)| (*id, g))
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|(_, g)| g.to_array())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Screen-space gradient accumulator for one splat.
#[derive(Clone, Copy, Debug, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    /// `dL/dQ` for the entries `(0,0)`, `(0,1)` (one of the two symmetric
    /// off-diagonal entries), `(1,1)`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

struct Blended {
    splat: u32,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// Back-propagates per-pixel color and depth gradients to every Gaussian.
///
/// The blend is replayed per pixel rather than read from stored contributor
/// lists. Pixels outside `pixel_mask` contribute nothing. The depth order is
/// treated as locally constant.
pub fn backward(
    map: &GaussianMap,
    cam: &Camera,
    opts: &RenderOptions,
    output: &RenderOutput,
    d_color: &ColorImage,
    d_depth: &DepthMap,
    pixel_mask: Option<&Mask>,
) -> Result<Gradients> {
    let (width, height) = (cam.width(), cam.height());
    if output.width() != width
        || output.height() != height
        || !d_color.same_shape(&output.color)
        || !d_depth.same_shape(&output.color)
        || pixel_mask.is_some_and(|m| !m.same_shape(&output.color))
    {
        return Err(Error::invalid("gradient image shape does not match render"));
    }
    let far = cam.intrinsics.far;
    let splats = prepare(map, cam, opts.subset);
    let tiles = TileGrid::build(&splats, width, height);

    let per_tile: Vec<Vec<(u32, SplatGrad)>> = (0..tiles.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &tiles.lists[tile];
            if list.is_empty() {
                return Vec::new();
            }
            let (x0, x1, y0, y1) = tiles.pixel_range(tile, width, height);
            let blocks = tiles.blocks(&splats, tile, width, height);
            let mut local = vec![SplatGrad::default(); list.len()];
            let mut touched = vec![false; list.len()];
            let mut blended: Vec<(usize, Blended)> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    if pixel_mask.is_some_and(|m| !*m.get(x, y)) {
                        continue;
                    }
                    let gc = *d_color.get(x, y);
                    let gd = *d_depth.get(x, y);
                    if gc == [0.0; 3] && gd == 0.0 {
                        continue;
                    }
                    blended.clear();
                    let mut t = 1.0;
                    for &k in &blocks[tiles.block_of(tile, x, y, width, height)] {
                        let (k, i) = (k as usize, list[k as usize]);
                        let s = &splats[i as usize];
                        let (power, dx, dy) = splat_power(s, x as f64, y as f64);
                        if power > CUTOFF_POWER {
                            continue;
                        }
                        let gauss = (-power).exp();
                        let raw = s.opacity * gauss;
                        let alpha = raw.min(MAX_ALPHA);
                        blended.push((
                            k,
                            Blended {
                                splat: i,
                                alpha,
                                gauss,
                                clamped: raw > MAX_ALPHA,
                                transmittance: t,
                                dx,
                                dy,
                            },
                        ));
                        t *= 1.0 - alpha;
                        if t < TRANSMITTANCE_CUTOFF {
                            break;
                        }
                    }
                    let t_final = t;
                    let acc = 1.0 - t_final;
                    let weighted_depth: f64 = blended
                        .iter()
                        .map(|(_, b)| splats[b.splat as usize].depth * b.alpha * b.transmittance)
                        .sum();
                    // depth = N / A in normalized mode
                    let (depth_active, depth_value, inv_acc) = match opts.depth_mode {
                        DepthMode::Normalized if acc > DEPTH_ALPHA_FLOOR => {
                            (true, weighted_depth / acc, 1.0 / acc)
                        }
                        DepthMode::Normalized => (false, far, 0.0),
                        DepthMode::Raw => (true, weighted_depth, 1.0),
                    };
                    let normalized = opts.depth_mode == DepthMode::Normalized;

                    let mut suffix_color = [
                        opts.background[0] * t_final,
                        opts.background[1] * t_final,
                        opts.background[2] * t_final,
                    ];
                    let mut suffix_depth = 0.0;
                    for (k, b) in blended.iter().rev() {
                        let s = &splats[b.splat as usize];
                        let w = b.alpha * b.transmittance;
                        let one_minus = 1.0 - b.alpha;
                        let g = &mut local[*k];
                        touched[*k] = true;

                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            g.color[ch] += gc[ch] * w;
                            d_alpha += gc[ch] * (s.color[ch] * b.transmittance - suffix_color[ch] / one_minus);
                        }
                        if depth_active && gd != 0.0 {
                            let dn = s.depth * b.transmittance - suffix_depth / one_minus;
                            let dd_dalpha = if normalized {
                                let da = t_final / one_minus;
                                (dn - depth_value * da) * inv_acc
                            } else {
                                dn
                            };
                            d_alpha += gd * dd_dalpha;
                            g.depth += gd * w * inv_acc;
                        }
                        for ch in 0..3 {
                            suffix_color[ch] += s.color[ch] * w;
                        }
                        suffix_depth += s.depth * w;

                        if !b.clamped {
                            g.opacity += d_alpha * b.gauss;
                            let d_power = -b.alpha * d_alpha;
                            let [qa, qb, qc] = s.conic;
                            let (qdx, qdy) = (qa * b.dx + qb * b.dy, qb * b.dx + qc * b.dy);
                            g.mean2d[0] -= d_power * qdx;
                            g.mean2d[1] -= d_power * qdy;
                            g.conic[0] += 0.5 * d_power * b.dx * b.dx;
                            g.conic[1] += 0.5 * d_power * b.dx * b.dy;
                            g.conic[2] += 0.5 * d_power * b.dy * b.dy;
                        }
                    }
                }
            }
            list.iter()
                .zip(local)
                .zip(touched)
                .filter_map(|((&i, g), t)| t.then_some((i, g)))
                .collect()
        })
        .collect();

    let mut screen = vec![SplatGrad::default(); splats.len()];
    for tile in &per_tile {
        for (i, g) in tile {
            screen[*i as usize].add(g);
        }
    }

    let slot_grads: Vec<(usize, GaussianGrad)> = splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, g)| (s.slot, gaussian_grad(map, cam, s, g)))
        .collect();

    let mut out: Vec<(GaussianId, GaussianGrad)> = map
        .slots()
        .iter()
        .map(|s| (s.id, GaussianGrad::default()))
        .collect();
    for (slot, g) in slot_grads {
        out[slot].1 = g;
    }
    Ok(Gradients { slots: out })
}

/// Chain rule from screen-space gradients to raw Gaussian parameters.
fn gaussian_grad(map: &GaussianMap, cam: &Camera, s: &PreparedSplat, g: &SplatGrad) -> GaussianGrad {
    let gaussian = &map.slots()[s.slot].gaussian;
    let intr = &cam.intrinsics;
    let w = cam.rotation();
    let t = cam.to_camera(&gaussian.mean);
    let (tj, clamped) = jacobian_point(&t, intr);
    let j = perspective_jacobian(&tj, intr.fx, intr.fy);
    let m = j * w;
    let qn = gaussian.rot / gaussian.rot.norm();
    let r = unit_quat_to_rotmat(&qn);
    let var = gaussian.log_scale.map(|v| (2.0 * v).exp());
    let sigma = r * Matrix3::from_diagonal(&var) * r.transpose();

    // dL/dΣᴵ = −Q (dL/dQ) Q
    let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let gq = Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
    let g_cov2d = -(q * gq * q);

    let g_sigma = m.transpose() * g_cov2d * m;
    let g_m = 2.0 * g_cov2d * m * sigma;
    let g_j = g_m * w.transpose();

    let (fx, fy) = (intr.fx, intr.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    // a clamped J[0][2] = ∓fx·lim/z no longer depends on x
    let mut g_t = Vector3::zeros();
    let (kx, ky) = (if clamped[0] { 1.0 } else { 2.0 }, if clamped[1] { 1.0 } else { 2.0 });
    if !clamped[0] {
        g_t.x += g_j[(0, 2)] * (-fx * iz2);
    }
    if !clamped[1] {
        g_t.y += g_j[(1, 2)] * (-fy * iz2);
    }
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (kx * fx * tj.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (ky * fy * tj.y * iz3);
    let (gu, gv) = (g.mean2d[0], g.mean2d[1]);
    g_t.x += gu * fx * iz;
    g_t.y += gv * fy * iz;
    g_t.z += -gu * fx * t.x * iz2 - gv * fy * t.y * iz2;
    g_t.z += g.depth;

    let g_r = 2.0 * g_sigma * r * Matrix3::from_diagonal(&var);
    let rt_g_r = r.transpose() * g_sigma * r;
    let log_scale = Vector3::from_fn(|i, _| 2.0 * var[i] * rt_g_r[(i, i)]);

    let o = s.opacity;
    let color = Vector3::from_fn(|i, _| {
        let c = gaussian.color[i];
        if (0.0..=1.0).contains(&c) {
            g.color[i]
        } else {
            0.0
        }
    });
    GaussianGrad {
        mean: w.transpose() * g_t,
        rot: rotmat_grad_to_quat(&gaussian.rot, &g_r),
        log_scale,
        opacity_logit: g.opacity * o * (1.0 - o),
        color,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{logit, Gaussian, Intrinsics};
    use approx::assert_relative_eq;
    use nalgebra::Isometry3;

    fn camera(w: usize, h: usize, f: f64) -> Camera {
        let intr = Intrinsics {
            fx: f,
            fy: f,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
            near: 0.05,
            far: 20.0,
        };
        Camera::new(intr, Isometry3::identity()).unwrap()
    }

    #[test]
    fn empty_map_renders_background() {
        let cam = camera(20, 10, 20.0);
        let out = render(&GaussianMap::new(), &cam, &RenderOptions::with_background([0.2, 0.3, 0.4]));
        assert!(out.color.data().iter().all(|c| *c == [0.2, 0.3, 0.4]));
        assert!(out.alpha.data().iter().all(|&a| a == 0.0));
        assert!(out.depth.data().iter().all(|&d| d == 20.0));
    }

    #[test]
    fn single_gaussian_center_pixel() {
        let cam = Camera::new(
            Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 50.0,
                cy: 50.0,
                width: 101,
                height: 101,
                near: 0.05,
                far: 20.0,
            },
            Isometry3::identity(),
        )
        .unwrap();
        let mut g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.02, 0.5, Vector3::new(1.0, 0.5, 0.0));
        g.opacity_logit = logit(0.8);
        let map = GaussianMap::from_gaussians([g]);
        let bg = [0.0, 0.0, 1.0];
        let out = render(&map, &cam, &RenderOptions::with_background(bg));
        assert_relative_eq!(*out.alpha.get(50, 50), 0.8, epsilon = 1e-12);
        let c = out.color.get(50, 50);
        assert_relative_eq!(c[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(c[1], 0.4, epsilon = 1e-12);
        assert_relative_eq!(c[2], 0.2, epsilon = 1e-12);
        let brute = brute_force_render(&map, &cam, bg);
        for (a, b) in out.color.data().iter().zip(brute.color.data()) {
            for ch in 0..3 {
                assert!((a[ch] - b[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_gaussian_compositing_by_hand() {
        // both Gaussians centered on the same pixel with α = 0.5 there
        let cam = camera(21, 21, 50.0);
        let mk = |z: f64, c: Vector3<f64>| Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 0.01 * z, 0.5, c);
        let c1 = Vector3::new(1.0, 0.0, 0.0);
        let c2 = Vector3::new(0.0, 1.0, 0.0);
        let map = GaussianMap::from_gaussians([mk(2.0, c2), mk(1.0, c1)]);
        let bg = [0.0, 0.0, 1.0];
        let out = render(&map, &cam, &RenderOptions::with_background(bg).contributors(true));
        let c = out.color.get(10, 10);
        assert_relative_eq!(c[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(c[1], 0.25, epsilon = 1e-12);
        assert_relative_eq!(c[2], 0.25, epsilon = 1e-12);
        assert_relative_eq!(*out.depth.get(10, 10), 4.0 / 3.0, epsilon = 1e-12);
        let contrib = out.contributors.as_ref().unwrap().at(10, 10);
        assert_eq!(contrib.len(), 2);
        assert_relative_eq!(contrib[0].1, 0.5, epsilon = 1e-12);
        assert_relative_eq!(contrib[1].1, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn raw_depth_mode_is_unnormalized() {
        let cam = camera(21, 21, 50.0);
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.02, 0.5, Vector3::zeros());
        let map = GaussianMap::from_gaussians([g]);
        let out = render(&map, &cam, &RenderOptions::default().depth_mode(DepthMode::Raw));
        assert_relative_eq!(*out.depth.get(10, 10), 1.0, epsilon = 1e-12);
        assert_eq!(*out.depth.get(0, 0) < 1e-6, true);
    }

    #[test]
    fn subset_restricts_rendering() {
        let cam = camera(21, 21, 50.0);
        let mut map = GaussianMap::new();
        let near = map.insert(Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.02, 0.9, Vector3::x()));
        map.insert(Gaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.04, 0.9, Vector3::y()));
        let only: IdSet = [near].into();
        let out = render(&map, &cam, &RenderOptions::default().subset(&only));
        assert_relative_eq!(*out.depth.get(10, 10), 1.0, epsilon = 1e-12);
        assert_eq!(out.color.get(10, 10)[1], 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = camera(16, 16, 20.0);
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.05, 0.5, Vector3::new(0.3, 0.4, 0.5));
        let map = GaussianMap::from_gaussians([g]);
        let opts = RenderOptions::default();
        let out = render(&map, &cam, &opts);
        let grads = backward(
            &map,
            &cam,
            &opts,
            &out,
            &Grid::new(16, 16, [0.0; 3]),
            &Grid::new(16, 16, 0.0),
            None,
        )
        .unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn color_gradient_equals_blend_weight() {
        let cam = camera(21, 21, 50.0);
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.02, 0.7, Vector3::new(0.3, 0.4, 0.5));
        let map = GaussianMap::from_gaussians([g]);
        let opts = RenderOptions::default().contributors(true);
        let out = render(&map, &cam, &opts);
        let mut dc = Grid::new(21, 21, [0.0; 3]);
        dc.set(10, 10, [1.0, 1.0, 1.0]);
        let grads = backward(&map, &cam, &opts, &out, &dc, &Grid::new(21, 21, 0.0), None).unwrap();
        let w = out.contributors.unwrap().at(10, 10)[0].1;
        let gg = grads.iter().next().unwrap().1;
        assert_relative_eq!(gg.color, Vector3::repeat(w), epsilon = 1e-12);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let cam = camera(16, 16, 20.0);
        let map = GaussianMap::new();
        let opts = RenderOptions::default();
        let out = render(&map, &cam, &opts);
        let err = backward(&map, &cam, &opts, &out, &Grid::new(8, 8, [0.0; 3]), &Grid::new(16, 16, 0.0), None);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn masked_pixels_contribute_nothing() {
        let cam = camera(16, 16, 20.0);
        let g = Gaussian::isotropic(Vector3::new(0.0, 0.0, 1.0), 0.1, 0.5, Vector3::new(0.3, 0.4, 0.5));
        let map = GaussianMap::from_gaussians([g]);
        let opts = RenderOptions::default();
        let out = render(&map, &cam, &opts);
        let grads = backward(
            &map,
            &cam,
            &opts,
            &out,
            &Grid::new(16, 16, [1.0; 3]),
            &Grid::new(16, 16, 1.0),
            Some(&Grid::new(16, 16, false)),
        )
        .unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    fn random_scene(seed: u64, n: usize) -> (GaussianMap, Camera, [f64; 3]) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cam = camera(16, 16, 16.0);
        let mut map = GaussianMap::new();
        for _ in 0..n {
            let z = rng.random_range(1.0..3.0);
            let mean = Vector3::new(rng.random_range(-0.4..0.4) * z, rng.random_range(-0.4..0.4) * z, z);
            let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            map.insert(Gaussian {
                mean,
                rot: q,
                log_scale: Vector3::from_fn(|_, _| (rng.random_range(0.05..0.2) * z).ln()),
                opacity_logit: logit(rng.random_range(0.2..0.8)),
                color: Vector3::from_fn(|_, _| rng.random_range(0.1..0.9)),
            });
        }
        (map, cam, [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
    }

    fn assert_matches_finite_differences(map: &GaussianMap, cam: &Camera, bg: [f64; 3], seed: u64) {
        use rand::{Rng, SeedableRng};
        let (w, h) = (cam.width(), cam.height());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        let gc = Grid::from_fn(w, h, |_, _| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let gd = Grid::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
        let opts = RenderOptions::with_background(bg);
        let loss = |m: &GaussianMap| {
            let o = render(m, cam, &opts);
            let mut l = 0.0;
            for (i, c) in o.color.data().iter().enumerate() {
                let g = gc.data()[i];
                l += c[0] * g[0] + c[1] * g[1] + c[2] * g[2] + o.depth.data()[i] * gd.data()[i];
            }
            l
        };
        let out = render(map, cam, &opts);
        let grads = backward(map, cam, &opts, &out, &gc, &gd, None).unwrap();
        let step = 1e-5;
        for (id, g) in grads.iter() {
            let analytic = g.to_array();
            for k in 0..14 {
                let perturb = |delta: f64| {
                    let mut m = map.clone();
                    let gg = m.get_mut(id).unwrap();
                    match k {
                        0..=2 => gg.mean[k] += delta,
                        3..=6 => gg.rot[k - 3] += delta,
                        7..=9 => gg.log_scale[k - 7] += delta,
                        10 => gg.opacity_logit += delta,
                        _ => gg.color[k - 11] += delta,
                    }
                    loss(&m)
                };
                let fd = (perturb(step) - perturb(-step)) / (2.0 * step);
                let a = analytic[k];
                let tol = (1e-3 * a.abs().max(fd.abs())).max(1e-7);
                assert!((a - fd).abs() <= tol, "seed {seed} {id} param {k}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3 {
            let (map, cam, bg) = random_scene(seed, 6);
            assert_matches_finite_differences(&map, &cam, bg, seed);
        }
    }

    #[test]
    fn guard_band_clamp_has_exact_gradients() {
        let cam = camera(16, 16, 16.0);
        let mut map = GaussianMap::new();
        // x/z = 0.85 and y/z = -0.8 lie beyond the 0.65 guard band
        let mut g = Gaussian::isotropic(Vector3::new(0.85, 0.1, 1.0), 0.25, 0.7, Vector3::new(0.2, 0.6, 0.9));
        g.log_scale.y += 0.3;
        g.rot = Vector4::new(0.9, 0.2, -0.3, 0.1);
        map.insert(g);
        map.insert(Gaussian::isotropic(Vector3::new(0.1, -1.2, 1.5), 0.4, 0.6, Vector3::new(0.8, 0.3, 0.2)));
        let (tj, clamped) = crate::geometry::jacobian_point(&cam.to_camera(&Vector3::new(0.85, 0.1, 1.0)), &cam.intrinsics);
        assert!(clamped[0] && !clamped[1]);
        assert!((tj.x - 0.65).abs() < 1e-12);
        assert_matches_finite_differences(&map, &cam, [0.1, 0.2, 0.3], 7);
    }

    #[test]
    fn off_axis_gaussian_near_the_camera_stays_small() {
        let cam = camera(16, 16, 16.0);
        // 5 cm in front of the image plane, 1 m to the side
        let g = Gaussian::isotropic(Vector3::new(1.0, 0.0, 0.06), 0.02, 0.9, Vector3::x());
        let s = project_gaussian(&g, &cam);
        assert!(!s.visible, "footprint {:?}", s.cov2d);
    }
}
