//! Ready-made synthetic scene scripts.
//!
//! All scenes share one furnished room. Cameras sit near the room center and
//! look outward while turning, so consecutive keyframes overlap.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::scene::{BoxSpec, Event, EventOp, NoiseSpec, ObjectSpec, PoseSpec, SceneScript};

/// Degrees of yaw between consecutive frames of a turning trajectory.
pub const YAW_STEP_DEG: f64 = 12.0;

/// Pinhole camera with a 4:3 image of the given width and about 64° of
/// horizontal field of view.
pub fn intrinsics(width: usize) -> Intrinsics {
    let w = width.max(8);
    let h = w * 3 / 4;
    let f = 0.8 * w as f64;
    Intrinsics {
        fx: f,
        fy: f,
        cx: (w as f64 - 1.0) / 2.0,
        cy: (h as f64 - 1.0) / 2.0,
        width: w,
        height: h,
        near: 0.05,
        far: 12.0,
    }
}

fn room() -> BoxSpec {
    BoxSpec::new([0.0, 1.25, 0.0], [2.5, 1.25, 2.5], [0.72, 0.70, 0.66])
}

fn furniture() -> Vec<BoxSpec> {
    let mut table = BoxSpec::new([1.5, 0.38, -1.5], [0.5, 0.38, 0.4], [0.55, 0.38, 0.22]);
    table.texture_frequency = 9.0;
    let mut shelf = BoxSpec::new([-2.1, 0.9, 0.2], [0.3, 0.9, 0.7], [0.35, 0.45, 0.55]);
    shelf.texture_frequency = 4.0;
    vec![table, shelf]
}

/// Frames turning in place around a small circle: `frames` poses starting at
/// yaw `start_deg`, `YAW_STEP_DEG` apart.
pub fn turning_trajectory(frames: usize, start_deg: f64, height: f64, radius: f64) -> Vec<PoseSpec> {
    (0..frames)
        .map(|i| {
            let yaw = (start_deg + YAW_STEP_DEG * i as f64).to_radians();
            let (s, c) = yaw.sin_cos();
            let position = [radius * s, height, radius * c];
            PoseSpec::LookAt {
                position,
                target: [position[0] + s, height - 0.32, position[2] + c],
                up: [0.0, 1.0, 0.0],
            }
        })
        .collect()
}

fn base(width: usize, seed: u64) -> SceneScript {
    SceneScript {
        seed,
        intrinsics: intrinsics(width),
        room: room(),
        structure: furniture(),
        objects: Vec::new(),
        events: Vec::new(),
        trajectory: Vec::new(),
        sequences: Vec::new(),
        noise: NoiseSpec::default(),
        light: [0.3, 0.8, -0.5],
        ambient: 0.6,
        mask_dilation: 0,
    }
}

/// Two full turns (60 frames) through the unchanging furnished room.
pub fn static_room(width: usize, seed: u64) -> SceneScript {
    let mut s = base(width, seed);
    s.trajectory = turning_trajectory(30, 0.0, 1.3, 0.5);
    s.trajectory.extend(turning_trajectory(30, 6.0, 1.05, 0.35));
    s
}

/// Object that disappears between the two sequences.
pub fn removed_object() -> ObjectSpec {
    ObjectSpec {
        id: 1,
        shape: BoxSpec::new([1.1, 0.4, 1.2], [0.3, 0.4, 0.3], [0.78, 0.22, 0.18]),
        present: true,
    }
}

/// Object that appears between the two sequences.
pub fn added_object() -> ObjectSpec {
    ObjectSpec {
        id: 2,
        shape: BoxSpec::new([-1.1, 0.35, -1.2], [0.35, 0.35, 0.3], [0.18, 0.35, 0.8]),
        present: false,
    }
}

/// Two turns around the room; between them one object is removed and
/// another appears.
pub fn evolving(width: usize, seed: u64) -> SceneScript {
    let mut s = base(width, seed);
    s.objects = vec![removed_object(), added_object()];
    s.trajectory = turning_trajectory(30, 0.0, 1.3, 0.5);
    s.trajectory.extend(turning_trajectory(30, 6.0, 1.2, 0.45));
    s.sequences = vec![0, 30];
    s.events = vec![
        Event {
            frame: 30,
            op: EventOp::Remove,
            object: 1,
            center: None,
        },
        Event {
            frame: 31,
            op: EventOp::Add,
            object: 2,
            center: None,
        },
    ];
    s
}

/// A thin poster on the +z wall, 4 mm proud of it.
pub fn poster() -> ObjectSpec {
    let mut shape = BoxSpec::new([0.0, 1.3, 2.496], [0.55, 0.4, 0.004], [0.9, 0.75, 0.1]);
    shape.texture_amplitude = 0.0;
    ObjectSpec {
        id: 3,
        shape,
        present: true,
    }
}

/// Two turns; between them the poster is taken off the wall. The geometric
/// change is below a centimeter.
pub fn color_change(width: usize, seed: u64) -> SceneScript {
    let mut s = base(width, seed);
    s.objects = vec![poster()];
    s.trajectory = turning_trajectory(30, 0.0, 1.3, 0.5);
    s.trajectory.extend(turning_trajectory(30, 6.0, 1.2, 0.45));
    s.sequences = vec![0, 30];
    s.events = vec![Event {
        frame: 30,
        op: EventOp::Remove,
        object: 3,
        center: None,
    }];
    s
}

/// The camera slides sideways until a box on the floor disappears behind a
/// pillar. Nothing changes in the scene.
pub fn occlusion(width: usize, seed: u64) -> SceneScript {
    let mut s = base(width, seed);
    s.structure.push(BoxSpec::new([0.0, 1.25, 0.9], [0.18, 1.25, 0.18], [0.5, 0.5, 0.48]));
    s.objects = vec![ObjectSpec {
        id: 4,
        shape: BoxSpec::new([0.0, 0.3, 1.9], [0.3, 0.3, 0.3], [0.2, 0.7, 0.3]),
        present: true,
    }];
    s.trajectory = (0..13)
        .map(|i| {
            let x = -1.5 + 0.25 * i as f64;
            PoseSpec::LookAt {
                position: [x, 1.3, -1.2],
                target: [x * 0.4, 0.6, 2.5],
                up: [0.0, 1.0, 0.0],
            }
        })
        .collect();
    s
}

/// Two keyframes see a box whole; it is then removed while the camera turns
/// so that the next keyframe sees only part of where it stood.
pub fn partial_removal(width: usize, seed: u64) -> SceneScript {
    let mut s = base(width, seed);
    s.objects = vec![ObjectSpec {
        id: 5,
        shape: BoxSpec::new([0.0, 0.4, 1.7], [0.35, 0.4, 0.3], [0.75, 0.25, 0.6]),
        present: true,
    }];
    let view = |x: f64, tx: f64| PoseSpec::LookAt {
        position: [x, 1.3, -0.6],
        target: [tx, 0.5, 1.7],
        up: [0.0, 1.0, 0.0],
    };
    s.trajectory = vec![view(-0.45, 0.0), view(0.0, 0.0), view(0.45, 0.0), view(0.5, 1.75)];
    s.events = vec![Event {
        frame: 3,
        op: EventOp::Remove,
        object: 5,
        center: None,
    }];
    s
}

/// Named presets for the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Static,
    Evolving,
    ColorChange,
    Occlusion,
    PartialRemoval,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Static,
        Preset::Evolving,
        Preset::ColorChange,
        Preset::Occlusion,
        Preset::PartialRemoval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Static => "static",
            Preset::Evolving => "evolving",
            Preset::ColorChange => "color-change",
            Preset::Occlusion => "occlusion",
            Preset::PartialRemoval => "partial-removal",
        }
    }

    pub fn script(self, width: usize, seed: u64) -> SceneScript {
        match self {
            Preset::Static => static_room(width, seed),
            Preset::Evolving => evolving(width, seed),
            Preset::ColorChange => color_change(width, seed),
            Preset::Occlusion => occlusion(width, seed),
            Preset::PartialRemoval => partial_removal(width, seed),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::render_frame;

    #[test]
    fn every_preset_validates_and_renders() {
        for p in Preset::ALL {
            let s = p.script(32, 1);
            s.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name()));
            let f = render_frame(&s, 0).unwrap();
            let valid = f.depth.data().iter().filter(|d| **d > 0.0).count();
            assert_eq!(valid, f.depth.len(), "{} sees past the room", p.name());
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn event_objects_are_in_view() {
        let s = evolving(48, 0);
        let seen = |frames: std::ops::Range<usize>, id: u16| {
            frames
                .map(|i| render_frame(&s, i).unwrap().provenance.data().iter().filter(|&&p| p == id).count())
                .sum::<usize>()
        };
        assert!(seen(0..30, 1) > 100);
        assert_eq!(seen(30..60, 1), 0);
        assert_eq!(seen(0..30, 2), 0);
        assert!(seen(31..60, 2) > 100);
    }
}
