//! Synthetic datasets: disk layout versus the in-memory path.

use evosplat::dataset::{from_script, generate, load_dataset, quantize_depth, DEPTH_SCALE};
use evosplat::presets::{self, Preset};
use evosplat::scene::render_frame;
use evosplat::Error;

#[test]
fn generated_dataset_loads_back_equal_to_the_in_memory_one() {
    for preset in [Preset::Evolving, Preset::PartialRemoval] {
        let mut script = preset.script(24, 5);
        script.trajectory.truncate(6);
        script.events.retain(|e| e.frame < 6);
        script.sequences.retain(|&s| s < 6);
        let dir = tempfile::tempdir().unwrap();
        generate(&script, dir.path()).unwrap();
        let disk = load_dataset(dir.path()).unwrap();
        let mem = from_script(&script).unwrap();
        assert_eq!(disk.intrinsics, mem.intrinsics);
        assert_eq!(disk.sequences, mem.sequences);
        assert_eq!(disk.script, mem.script);
        assert_eq!(disk.provenance, mem.provenance);
        assert_eq!(disk.len(), mem.len());
        for (a, b) in disk.frames.iter().zip(&mem.frames) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.color, b.color, "{} frame {}", preset.name(), a.id);
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.masks, b.masks);
            assert!((a.pose.translation.vector - b.pose.translation.vector).norm() < 1e-9);
            assert!(a.pose.rotation.angle_to(&b.pose.rotation) < 1e-9);
        }
    }
}

#[test]
fn stored_values_are_within_quantization_of_ground_truth() {
    let script = presets::occlusion(32, 2);
    let ds = from_script(&script).unwrap();
    for i in [0, 6, 12] {
        let gt = render_frame(&script, i).unwrap();
        let f = ds.frame(i).unwrap();
        for (a, b) in f.color.data().iter().zip(gt.color.data()) {
            for ch in 0..3 {
                assert!((a[ch] - b[ch]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        for (a, b) in f.depth.data().iter().zip(gt.depth.data()) {
            assert!((a - b).abs() <= 0.5 / DEPTH_SCALE + 1e-12);
            assert_eq!(*a, quantize_depth(*b) as f64 / DEPTH_SCALE);
        }
    }
}

#[test]
fn broken_datasets_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));

    let mut script = presets::partial_removal(16, 0);
    script.trajectory.truncate(2);
    script.events.clear();
    generate(&script, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("depth/000001.png")).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}
