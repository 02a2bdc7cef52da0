//! Deterministic synthetic evolving scenes: textured boxes, scripted
//! add/remove/move events and exact ray-cast RGB-D ground truth.

use std::collections::BTreeSet;

use nalgebra::{Isometry3, Point3, Quaternion, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{look_at, pose_from_parts, Intrinsics};
use crate::grid::{ColorImage, DepthMap, Grid, Mask};

fn default_amp() -> f64 {
    0.15
}

fn default_freq() -> f64 {
    6.0
}

fn yes() -> bool {
    true
}

/// An axis-aligned textured box with a diffuse base color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub color: [f64; 3],
    /// Relative amplitude of the sinusoidal albedo pattern.
    #[serde(default = "default_amp")]
    pub texture_amplitude: f64,
    /// Spatial frequency of the pattern, radians per meter.
    #[serde(default = "default_freq")]
    pub texture_frequency: f64,
}

impl BoxSpec {
    pub fn new(center: [f64; 3], half_extents: [f64; 3], color: [f64; 3]) -> Self {
        Self {
            center,
            half_extents,
            color,
            texture_amplitude: default_amp(),
            texture_frequency: default_freq(),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.half_extents.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::Script(format!("{what} has a degenerate extent")));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Script(format!("{what} color outside [0, 1]")));
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return Err(Error::Script(format!("{what} texture amplitude outside [0, 1)")));
        }
        Ok(())
    }

    fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() <= self.half_extents[k] + margin)
    }

    /// Entry and exit ray parameters, if the ray's line meets the box.
    fn slab(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, usize, usize)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut a0, mut a1) = (0, 0);
        for k in 0..3 {
            let lo = self.center[k] - self.half_extents[k];
            let hi = self.center[k] + self.half_extents[k];
            if d[k].abs() < 1e-15 {
                if o[k] < lo || o[k] > hi {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            if ta > t0 {
                t0 = ta;
                a0 = k;
            }
            if tb < t1 {
                t1 = tb;
                a1 = k;
            }
        }
        (t0 <= t1).then_some((t0, t1, a0, a1))
    }

    fn albedo(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let f = self.texture_frequency;
        let pattern = ((f * p.x).sin() + (f * p.y).sin() + (f * p.z).sin()) / 3.0;
        let k = 1.0 + self.texture_amplitude * pattern;
        Vector3::from(self.color).map(|c| (c * k).clamp(0.0, 1.0))
    }
}

/// A movable object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Non-zero id used in provenance maps.
    pub id: u16,
    #[serde(flatten)]
    pub shape: BoxSpec,
    /// Whether the object exists before any event.
    #[serde(default = "yes")]
    pub present: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventOp {
    Add,
    Remove,
    Move,
}

/// A change applied before rendering frame `frame`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub frame: usize,
    pub op: EventOp,
    pub object: u16,
    /// New center for `move` (and optionally `add`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
}

/// A camera pose, either aimed at a target or given explicitly
/// (camera-to-world translation and `[x, y, z, w]` quaternion).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoseSpec {
    LookAt {
        position: [f64; 3],
        target: [f64; 3],
        #[serde(default = "world_up")]
        up: [f64; 3],
    },
    Explicit {
        t: [f64; 3],
        q: [f64; 4],
    },
}

fn world_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

impl PoseSpec {
    pub fn to_isometry(&self) -> Result<Isometry3<f64>> {
        match self {
            PoseSpec::LookAt { position, target, up } => {
                let (e, t) = (Vector3::from(*position), Vector3::from(*target));
                if (t - e).norm() < 1e-9 {
                    return Err(Error::Script("look-at target coincides with position".into()));
                }
                Ok(look_at(e, t, Vector3::from(*up)))
            }
            PoseSpec::Explicit { t, q } => {
                let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
                if quat.norm() < 1e-12 {
                    return Err(Error::Script("zero quaternion in pose".into()));
                }
                Ok(pose_from_parts(Vector3::from(*t), UnitQuaternion::from_quaternion(quat)))
            }
        }
    }
}

/// Sensor noise switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Gaussian depth noise with σ = 0.01·depth.
    #[serde(default)]
    pub depth: bool,
    /// Gaussian color noise with σ = 0.01.
    #[serde(default)]
    pub color: bool,
}

/// Full description of an evolving synthetic capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub seed: u64,
    pub intrinsics: Intrinsics,
    /// Enclosing room, seen from inside.
    pub room: BoxSpec,
    /// Static furniture and walls.
    #[serde(default)]
    pub structure: Vec<BoxSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub events: Vec<Event>,
    pub trajectory: Vec<PoseSpec>,
    /// First frame index of every capture sequence; `[0]` when absent.
    #[serde(default)]
    pub sequences: Vec<usize>,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Direction towards the light.
    #[serde(default = "default_light")]
    pub light: [f64; 3],
    #[serde(default = "default_ambient")]
    pub ambient: f64,
    /// Pixels of dilation applied to object masks.
    #[serde(default)]
    pub mask_dilation: usize,
}

fn default_light() -> [f64; 3] {
    [0.3, 0.8, -0.5]
}

fn default_ambient() -> f64 {
    0.6
}

impl SceneScript {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics
            .validate()
            .map_err(|e| Error::Script(format!("intrinsics: {e}")))?;
        if self.intrinsics.far * 4000.0 > u16::MAX as f64 {
            return Err(Error::Script("far plane beyond the 16-bit depth range".into()));
        }
        self.room.validate("room")?;
        for (i, b) in self.structure.iter().enumerate() {
            b.validate(&format!("structure box {i}"))?;
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if o.id == 0 || !ids.insert(o.id) {
                return Err(Error::Script(format!("object id {} is zero or duplicated", o.id)));
            }
            o.shape.validate(&format!("object {}", o.id))?;
        }
        for w in self.events.windows(2) {
            if w[1].frame <= w[0].frame {
                return Err(Error::Script("event frame indices must strictly increase".into()));
            }
        }
        for e in &self.events {
            if !ids.contains(&e.object) {
                return Err(Error::Script(format!("event references unknown object {}", e.object)));
            }
            if e.op == EventOp::Move && e.center.is_none() {
                return Err(Error::Script(format!("move of object {} lacks a center", e.object)));
            }
        }
        if self.trajectory.is_empty() {
            return Err(Error::Script("empty trajectory".into()));
        }
        for p in &self.trajectory {
            p.to_isometry()?;
        }
        let seqs = self.sequence_starts();
        if seqs[0] != 0 || seqs.windows(2).any(|w| w[1] <= w[0]) || *seqs.last().unwrap() >= self.trajectory.len() {
            return Err(Error::Script("sequence starts must begin at 0, increase and lie within the trajectory".into()));
        }
        if !(0.0..=1.0).contains(&self.ambient) || Vector3::from(self.light).norm() < 1e-9 {
            return Err(Error::Script("ambient must lie in [0, 1] and light must be non-zero".into()));
        }
        Ok(())
    }

    pub fn sequence_starts(&self) -> Vec<usize> {
        if self.sequences.is_empty() {
            vec![0]
        } else {
            self.sequences.clone()
        }
    }

    pub fn poses(&self) -> Result<Vec<Isometry3<f64>>> {
        self.trajectory.iter().map(PoseSpec::to_isometry).collect()
    }

    /// Ids of objects touched by any event.
    pub fn changed_objects(&self) -> BTreeSet<u16> {
        self.events.iter().map(|e| e.object).collect()
    }

    /// Scene contents after all events with frame index `≤ frame`.
    pub fn state_at(&self, frame: usize) -> SceneState {
        let mut objects: Vec<(ObjectSpec, bool)> = self.objects.iter().map(|o| (o.clone(), o.present)).collect();
        for e in self.events.iter().take_while(|e| e.frame <= frame) {
            let Some((o, present)) = objects.iter_mut().find(|(o, _)| o.id == e.object) else {
                continue;
            };
            match e.op {
                EventOp::Add => {
                    *present = true;
                    if let Some(c) = e.center {
                        o.shape.center = c;
                    }
                }
                EventOp::Remove => *present = false,
                EventOp::Move => o.shape.center = e.center.expect("validated"),
            }
        }
        SceneState {
            room: self.room.clone(),
            structure: self.structure.clone(),
            objects: objects.into_iter().filter(|(_, p)| *p).map(|(o, _)| o).collect(),
            light: Vector3::from(self.light).normalize(),
            ambient: self.ambient,
        }
    }
}

/// What a ray hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    /// Face `0..6` of the room (−x, +x, −y, +y, −z, +z).
    RoomFace(u8),
    Structure(usize),
    Object(u16),
}

/// Scene contents at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub room: BoxSpec,
    pub structure: Vec<BoxSpec>,
    pub objects: Vec<ObjectSpec>,
    pub light: Vector3<f64>,
    pub ambient: f64,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    surface: Surface,
}

impl SceneState {
    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(Hit, &BoxSpec)> {
        let mut best: Option<(Hit, &BoxSpec)> = None;
        if let Some((_, t1, _, a1)) = self.room.slab(o, d) {
            if t1 > 0.0 {
                let mut normal = Vector3::zeros();
                normal[a1] = -d[a1].signum();
                let face = (2 * a1 + usize::from(d[a1] > 0.0)) as u8;
                let hit = Hit {
                    t: t1,
                    normal,
                    surface: Surface::RoomFace(face),
                };
                best = Some((hit, &self.room));
            }
        }
        let solids = self
            .structure
            .iter()
            .enumerate()
            .map(|(i, b)| (Surface::Structure(i), b))
            .chain(self.objects.iter().map(|o| (Surface::Object(o.id), &o.shape)));
        for (surface, b) in solids {
            if let Some((t0, _, a0, _)) = b.slab(o, d) {
                if t0 > 1e-9 && best.as_ref().is_none_or(|(h, _)| t0 < h.t) {
                    let mut n = Vector3::zeros();
                    n[a0] = -d[a0].signum();
                    best = Some((Hit { t: t0, normal: n, surface }, b));
                }
            }
        }
        best
    }

    fn shade(&self, p: &Vector3<f64>, n: &Vector3<f64>, b: &BoxSpec) -> [f64; 3] {
        let lambert = n.dot(&self.light).max(0.0);
        let k = self.ambient + (1.0 - self.ambient) * lambert;
        let c = b.albedo(p) * k;
        [c.x.clamp(0.0, 1.0), c.y.clamp(0.0, 1.0), c.z.clamp(0.0, 1.0)]
    }

    /// Object whose box (grown by `margin`) contains `p`.
    pub fn object_at(&self, p: &Vector3<f64>, margin: f64) -> Option<u16> {
        self.objects.iter().find(|o| o.shape.contains(p, margin)).map(|o| o.id)
    }

    /// Color, depth and surface seen through image point `(u, v)`; depth 0
    /// and no surface beyond the far plane.
    pub fn sample(&self, intr: &Intrinsics, pose: &Isometry3<f64>, u: f64, v: f64) -> ([f64; 3], f64, Option<Surface>) {
        let origin = pose.translation.vector;
        // unit camera-frame z, so the ray parameter is the depth
        let dir = pose.rotation * intr.backproject(u, v, 1.0);
        match self.cast(&origin, &dir) {
            Some((hit, b)) if hit.t <= intr.far => {
                let p = origin + dir * hit.t;
                (self.shade(&p, &hit.normal, b), hit.t, Some(hit.surface))
            }
            _ => ([0.0; 3], 0.0, None),
        }
    }

    /// Noise-free color, depth and surface labels at `pose`.
    pub fn render(&self, intr: &Intrinsics, pose: &Isometry3<f64>) -> RayImage {
        let (w, h) = (intr.width, intr.height);
        let rows: Vec<Vec<([f64; 3], f64, Option<Surface>)>> = (0..h)
            .into_par_iter()
            .map(|y| (0..w).map(|x| self.sample(intr, pose, x as f64, y as f64)).collect())
            .collect();
        let flat: Vec<_> = rows.into_iter().flatten().collect();
        RayImage {
            color: Grid::from_vec(w, h, flat.iter().map(|p| p.0).collect()).expect("sized"),
            depth: Grid::from_vec(w, h, flat.iter().map(|p| p.1).collect()).expect("sized"),
            surface: Grid::from_vec(w, h, flat.iter().map(|p| p.2).collect()).expect("sized"),
        }
    }
}

/// Ray-cast output.
#[derive(Clone, Debug, PartialEq)]
pub struct RayImage {
    pub color: ColorImage,
    pub depth: DepthMap,
    pub surface: Grid<Option<Surface>>,
}

impl RayImage {
    /// Object id per pixel, 0 elsewhere.
    pub fn provenance(&self) -> Grid<u16> {
        self.surface.map(|s| match s {
            Some(Surface::Object(id)) => *id,
            _ => 0,
        })
    }

    /// One mask per visible segment: every object, structure box and room
    /// face. Object masks are dilated by `dilation` pixels.
    pub fn segment_masks(&self, dilation: usize) -> Vec<Mask> {
        let mut segments: Vec<Surface> = Vec::new();
        for s in self.surface.data().iter().flatten() {
            if !segments.contains(s) {
                segments.push(*s);
            }
        }
        segments.sort_by_key(|s| match s {
            Surface::Object(id) => (0, *id as usize),
            Surface::Structure(i) => (1, *i),
            Surface::RoomFace(f) => (2, *f as usize),
        });
        segments
            .into_iter()
            .map(|seg| {
                let m = self.surface.map(|s| *s == Some(seg));
                match seg {
                    Surface::Object(_) if dilation > 0 => crate::keyframes::dilate(&m, dilation),
                    _ => m,
                }
            })
            .collect()
    }
}

/// One generated frame with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct GtFrame {
    pub index: usize,
    pub pose: Isometry3<f64>,
    pub color: ColorImage,
    pub depth: DepthMap,
    pub masks: Vec<Mask>,
    pub provenance: Grid<u16>,
}

/// Renders frame `index` of `script`, noise included.
pub fn render_frame(script: &SceneScript, index: usize) -> Result<GtFrame> {
    let pose = script
        .trajectory
        .get(index)
        .ok_or_else(|| Error::invalid(format!("frame {index} beyond trajectory")))?
        .to_isometry()?;
    let img = script.state_at(index).render(&script.intrinsics, &pose);
    let mut color = img.color.clone();
    let mut depth = img.depth.clone();
    if script.noise.depth || script.noise.color {
        let mut rng = ChaCha8Rng::seed_from_u64(script.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let unit = Normal::new(0.0, 1.0).expect("valid");
        for (c, d) in color.data_mut().iter_mut().zip(depth.data_mut().iter_mut()) {
            if script.noise.depth && *d > 0.0 {
                *d = (*d * (1.0 + 0.01 * unit.sample(&mut rng))).max(0.0);
            }
            if script.noise.color {
                for ch in c.iter_mut() {
                    *ch = (*ch + 0.01 * unit.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(GtFrame {
        index,
        pose,
        color,
        depth,
        masks: img.segment_masks(script.mask_dilation),
        provenance: img.provenance(),
    })
}

/// Pixels covered by any event object in the first or the last scene state,
/// seen from `pose`.
pub fn changed_region(script: &SceneScript, pose: &Isometry3<f64>) -> Mask {
    let changed = script.changed_objects();
    let last = script.trajectory.len().saturating_sub(1);
    let mut region = Grid::new(script.intrinsics.width, script.intrinsics.height, false);
    for state in [script.state_at(0), script.state_at(last)] {
        let prov = state.render(&script.intrinsics, pose).provenance();
        region.or_assign(&prov.map(|id| changed.contains(id)));
    }
    region
}

/// Which point of `state` a world point belongs to, for labeling Gaussians.
pub fn label_point(state: &SceneState, p: &Point3<f64>, margin: f64) -> u16 {
    state.object_at(&p.coords, margin).unwrap_or(0)
}
