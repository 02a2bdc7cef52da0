//! Online mapping loop: keyframe selection, adaptation and windowed
//! optimization, followed by an optional global refinement.

use nalgebra::Point3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::MapperConfig;
use crate::dataset::Dataset;
use crate::dsa::{dsa_step, prune_transparent, ConflictRecord};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics};
use crate::grid::{ColorImage, DepthMap};
use crate::keyframes::{covisible_keyframes, keyframe_trigger, select_window, Frame, Keyframe};
use crate::loss::valid_depth;
use crate::map::GaussianMap;
use crate::optim::{optimize_window, LossBreakdown, OptimSettings};
use crate::raster::render;

/// A rendering of the map taken right after a keyframe was integrated.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Number of keyframes integrated so far.
    pub keyframe_count: usize,
    pub frame: usize,
    pub color: ColorImage,
    pub depth: DepthMap,
}

/// Everything a mapping run produces.
#[derive(Clone, Debug)]
pub struct MappingOutput {
    /// Parameters rounded to single precision.
    pub map: GaussianMap,
    pub keyframes: Vec<Keyframe>,
    /// One record per keyframe, in order.
    pub log: Vec<ConflictRecord>,
    pub checkpoints: Vec<Checkpoint>,
    /// Total optimizer steps taken.
    pub steps: usize,
    /// Loss of the last refinement step, if refinement ran.
    pub final_loss: Option<LossBreakdown>,
}

/// Incremental mapper over a stream of posed frames.
pub struct Mapper {
    config: MapperConfig,
    intrinsics: Intrinsics,
    map: GaussianMap,
    keyframes: Vec<Keyframe>,
    log: Vec<ConflictRecord>,
    checkpoints: Vec<Checkpoint>,
    steps: usize,
    final_loss: Option<LossBreakdown>,
}

/// Radius of the first frame's back-projected points around their centroid,
/// with a 10% margin.
pub fn scene_extent_from_frame(frame: &Frame, intr: &Intrinsics) -> Option<f64> {
    let mut pts = Vec::new();
    for y in (0..frame.height()).step_by(4) {
        for x in (0..frame.width()).step_by(4) {
            let d = *frame.depth.get(x, y);
            if valid_depth(d, intr.far) {
                pts.push(frame.pose * Point3::from(intr.backproject(x as f64, y as f64, d)));
            }
        }
    }
    if pts.is_empty() {
        return None;
    }
    let centroid = pts.iter().fold(nalgebra::Vector3::zeros(), |a, p| a + p.coords) / pts.len() as f64;
    let radius = pts.iter().map(|p| (p.coords - centroid).norm()).fold(0.0, f64::max);
    (radius > 0.0).then_some(1.1 * radius)
}

impl Mapper {
    pub fn new(config: MapperConfig, intrinsics: Intrinsics) -> Result<Self> {
        config.validate()?;
        intrinsics.validate()?;
        Ok(Self {
            config,
            intrinsics,
            map: GaussianMap::new(),
            keyframes: Vec::new(),
            log: Vec::new(),
            checkpoints: Vec::new(),
            steps: 0,
            final_loss: None,
        })
    }

    pub fn map(&self) -> &GaussianMap {
        &self.map
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    fn with_step_offset(&self, context: &str, e: Error) -> Error {
        match e {
            Error::Numerical { step, message } => Error::Numerical {
                step: self.steps + step,
                message: format!("{context}: {message}"),
            },
            other => other,
        }
    }

    /// Feeds the next frame. Returns the conflict record when the frame
    /// became a keyframe.
    pub fn process(&mut self, frame: Frame) -> Result<Option<ConflictRecord>> {
        frame.validate(&self.intrinsics)?;
        if let Some(last) = self.keyframes.last() {
            let rot = self.config.theta_rotation_deg.to_radians();
            if !keyframe_trigger(&frame.pose, &last.frame.pose, self.config.theta_translation, rot) {
                return Ok(None);
            }
        } else if self.config.scene_extent.is_none() {
            let extent = scene_extent_from_frame(&frame, &self.intrinsics).unwrap_or(1.0);
            self.config.dsa.optim.scene_extent = extent;
            tracing::info!(extent, "scene extent from first frame");
        }
        if let Some(e) = self.config.scene_extent {
            self.config.dsa.optim.scene_extent = e;
        }

        let frame_id = frame.id;
        let current = Keyframe::new(frame, self.intrinsics, self.steps)?;
        let s = &self.config.dsa;
        let report = dsa_step(&mut self.map, &current, &mut self.keyframes, s)
            .map_err(|e| self.with_step_offset(&format!("frame {frame_id}"), e))?;
        let adaptation_steps = if report.seeded_ids.is_empty() { 0 } else { s.seed_iterations }
            + if report.tombstoned.is_empty() { 0 } else { s.post_remove_iterations };
        self.steps += adaptation_steps;
        let pruned = prune_transparent(&mut self.map, self.config.prune_opacity);

        let covisible = covisible_keyframes(&current.frame, &self.intrinsics, &self.keyframes, &s.covisibility);
        self.keyframes.push(current);
        let window_ids = select_window(frame_id, &covisible, s.window_size);
        if self.config.mapping_iterations > 0 && !self.map.is_empty() {
            let window: Vec<&Keyframe> = window_ids
                .iter()
                .filter_map(|id| self.keyframes.iter().find(|k| k.id() == *id))
                .collect();
            let opt = OptimSettings {
                iterations: self.config.mapping_iterations,
                ..s.optim.clone()
            };
            optimize_window(&mut self.map, &window, &opt, &s.render, None)
                .map_err(|e| self.with_step_offset(&format!("frame {frame_id}"), e))?;
            self.steps += opt.iterations;
        }

        let record = report.record(self.steps, frame_id, pruned, self.map.live_count());
        tracing::info!(
            frame = frame_id,
            keyframes = self.keyframes.len(),
            live = record.live,
            seeded = record.seeded,
            removed = record.removed,
            "keyframe integrated"
        );
        self.log.push(record.clone());

        let every = self.config.checkpoint_every;
        if every > 0 && self.keyframes.len() % every == 0 {
            let kf = self.keyframes.last().expect("just pushed");
            let out = render(&self.map, &kf.camera, &self.config.dsa.render.options());
            self.checkpoints.push(Checkpoint {
                keyframe_count: self.keyframes.len(),
                frame: frame_id,
                color: out.color,
                depth: out.depth,
            });
        }
        Ok(Some(record))
    }

    /// Global refinement over all usable keyframes, visiting them in a
    /// seeded random order per pass.
    pub fn refine(&mut self, iterations: usize) -> Result<()> {
        let mut order: Vec<usize> = (0..self.keyframes.len()).filter(|&i| self.keyframes[i].is_usable()).collect();
        if order.is_empty() || iterations == 0 || self.map.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut remaining = iterations;
        while remaining > 0 {
            order.shuffle(&mut rng);
            let n = remaining.min(order.len());
            let window: Vec<&Keyframe> = order[..n].iter().map(|&i| &self.keyframes[i]).collect();
            let opt = OptimSettings {
                iterations: n,
                ..self.config.dsa.optim.clone()
            };
            let traj = optimize_window(&mut self.map, &window, &opt, &self.config.dsa.render, None)
                .map_err(|e| self.with_step_offset("refinement", e))?;
            self.steps += n;
            remaining -= n;
            self.final_loss = traj.last().cloned();
        }
        Ok(())
    }

    /// Runs the configured refinement and rounds the map to single precision.
    pub fn finish(mut self) -> Result<MappingOutput> {
        if self.config.final_refinement {
            self.refine(self.config.refinement_iterations)?;
        }
        self.map.compact();
        self.map.round_to_f32();
        Ok(MappingOutput {
            map: self.map,
            keyframes: self.keyframes,
            log: self.log,
            checkpoints: self.checkpoints,
            steps: self.steps,
            final_loss: self.final_loss,
        })
    }
}

/// Maps the given dataset frames in order.
pub fn run_mapping(dataset: &Dataset, frame_ids: &[usize], config: &MapperConfig) -> Result<MappingOutput> {
    if frame_ids.is_empty() {
        return Err(Error::invalid("no frames to map"));
    }
    let mut mapper = Mapper::new(config.clone(), dataset.intrinsics)?;
    for &id in frame_ids {
        let frame = dataset
            .frame(id)
            .ok_or_else(|| Error::invalid(format!("frame {id} not in dataset")))?;
        mapper.process(frame.clone())?;
    }
    mapper.finish()
}

/// Renders the map from a frame's pose.
pub fn render_view(map: &GaussianMap, dataset: &Dataset, frame_id: usize, config: &MapperConfig) -> Result<(ColorImage, DepthMap)> {
    let frame = dataset
        .frame(frame_id)
        .ok_or_else(|| Error::invalid(format!("frame {frame_id} not in dataset (0..{})", dataset.len())))?;
    let cam = Camera::from_pose(dataset.intrinsics, &frame.pose)?;
    let out = render(map, &cam, &config.dsa.render.options());
    Ok((out.color, out.depth))
}

/// Writes the conflict log as JSON lines.
pub fn conflict_log_jsonl(log: &[ConflictRecord]) -> String {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::from_script;
    use crate::presets::partial_removal;

    fn small_config() -> MapperConfig {
        let mut c = MapperConfig::default();
        c.apply_overrides(&["mapping_iterations=10", "refinement_iterations=12", "seed_iterations=5", "post_remove_iterations=5"])
            .unwrap();
        c
    }

    #[test]
    fn mapping_is_deterministic() {
        let ds = from_script(&partial_removal(24, 3)).unwrap();
        let ids: Vec<usize> = (0..ds.len()).collect();
        let a = run_mapping(&ds, &ids, &small_config()).unwrap();
        let b = run_mapping(&ds, &ids, &small_config()).unwrap();
        assert!(a.map.same_content(&b.map));
        assert_eq!(conflict_log_jsonl(&a.log), conflict_log_jsonl(&b.log));
        assert_eq!(a.steps, b.steps);
        assert!(a.map.live_count() > 0);
        assert_eq!(a.log.len(), a.keyframes.len());
    }

    #[test]
    fn first_frame_is_a_keyframe_and_repeats_are_not() {
        let ds = from_script(&partial_removal(24, 0)).unwrap();
        let mut m = Mapper::new(small_config(), ds.intrinsics).unwrap();
        assert!(m.process(ds.frames[0].clone()).unwrap().is_some());
        let mut again = ds.frames[0].clone();
        again.id = 7;
        assert!(m.process(again).unwrap().is_none());
        assert_eq!(m.keyframes().len(), 1);
    }

    #[test]
    fn checkpoints_follow_the_keyframe_count() {
        let ds = from_script(&partial_removal(24, 0)).unwrap();
        let mut c = small_config();
        c.checkpoint_every = 2;
        c.final_refinement = false;
        let out = run_mapping(&ds, &[0, 1, 2, 3], &c).unwrap();
        let counts: Vec<usize> = out.checkpoints.iter().map(|c| c.keyframe_count).collect();
        assert_eq!(counts, (2..=out.keyframes.len()).step_by(2).collect::<Vec<_>>());
        assert!(out.final_loss.is_none());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let ds = from_script(&partial_removal(24, 0)).unwrap();
        assert!(matches!(run_mapping(&ds, &[], &small_config()), Err(Error::InvalidInput(_))));
        assert!(matches!(run_mapping(&ds, &[9], &small_config()), Err(Error::InvalidInput(_))));
        let empty = GaussianMap::new();
        assert!(matches!(render_view(&empty, &ds, 4, &small_config()), Err(Error::InvalidInput(_))));
        let (color, _) = render_view(&empty, &ds, 0, &small_config()).unwrap();
        let bg = small_config().dsa.render.background;
        assert!(color.data().iter().all(|c| c.iter().zip(bg.iter()).all(|(a, b)| (a - b).abs() < 1e-12)));
    }

    #[test]
    fn scene_extent_covers_the_first_view() {
        let ds = from_script(&partial_removal(24, 0)).unwrap();
        let e = scene_extent_from_frame(&ds.frames[0], &ds.intrinsics).unwrap();
        assert!(e > 1.0 && e < 6.0, "{e}");
    }
}
