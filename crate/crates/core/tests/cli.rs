//! End-to-end runs of the command-line tool.

use std::path::Path;
use std::process::Command;

use evosplat::dataset::{load_color, load_dataset, load_depth};
use evosplat::mapfile::{load_map, save_map};
use evosplat::metrics::{psnr, EvalReport};
use evosplat::GaussianMap;

fn evosplat(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_evosplat"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn generate_map_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let (code, text) = evosplat(&["generate", "--preset", "partial-removal", "--width", "32", "--out", p(&ds)]);
    assert_eq!(code, 0, "{text}");

    let settings = ["--set", "refinement_iterations=150", "--set", "checkpoint_every=2"];
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["map", "--dataset", p(&ds), "--out", p(&out), "--seed", "4"];
        args.extend(settings);
        let (code, text) = evosplat(&args);
        assert_eq!(code, 0, "{text}");
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["map.evgs", "conflicts.jsonl", "config.txt", "summary.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs between identical runs");
    }
    assert!(String::from_utf8(read(&a.join("config.txt"))).unwrap().contains("seed = 4"));
    assert!(a.join("checkpoints").is_dir());
    let log = String::from_utf8(read(&a.join("conflicts.jsonl"))).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("removed").is_some() && v.get("keyframes").is_some());
    }

    // evaluation is reproducible byte for byte and has both sections
    let map = a.join("map.evgs");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        let (code, text) = evosplat(&["eval", "--map", p(&map), "--dataset", p(&ds), "--out", p(e)]);
        assert_eq!(code, 0, "{text}");
    }
    for f in ["report.txt", "report.json", "views.txt"] {
        assert_eq!(read(&e1.join(f)), read(&e2.join(f)));
    }
    let text = String::from_utf8(read(&e1.join("report.txt"))).unwrap();
    assert!(text.contains("input.psnr") && text.contains("novel.psnr"));
    let report: EvalReport = serde_json::from_slice(&read(&e1.join("report.json"))).unwrap();

    // rendering the last training view reproduces the reported quality
    let dataset = load_dataset(&ds).unwrap();
    let view = report.views.iter().find(|v| v.frame == 3).expect("frame 3 is evaluated");
    let r = dir.path().join("r");
    let (code, text) = evosplat(&["render", "--map", p(&map), "--dataset", p(&ds), "--frame", "3", "--out", p(&r)]);
    assert_eq!(code, 0, "{text}");
    let color = load_color(&r.join("color.png"), &dataset.intrinsics).unwrap();
    load_depth(&r.join("depth.png"), &dataset.intrinsics).unwrap();
    let measured = psnr(&color, &dataset.frame(3).unwrap().color, None).unwrap();
    assert!(measured >= view.psnr - 0.1, "{measured} vs reported {}", view.psnr);

    // an explicit pose equal to the frame's pose gives the same image
    let pose = dataset.frame(3).unwrap().pose;
    let (t, q) = (pose.translation.vector, pose.rotation.coords);
    let pose_arg = format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.x, q.y, q.z, q.w);
    let r2 = dir.path().join("r2");
    let (code, text) = evosplat(&["render", "--map", p(&map), "--dataset", p(&ds), "--pose", &pose_arg, "--out", p(&r2)]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(read(&r.join("color.png")), read(&r2.join("color.png")));

    // a saved map loads back to the same content
    let loaded = load_map(&map).unwrap();
    assert!(loaded.live_count() > 0);
}

#[test]
fn render_edge_cases_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    assert_eq!(evosplat(&["generate", "--preset", "partial-removal", "--width", "16", "--out", p(&ds)]).0, 0);
    let empty = dir.path().join("empty.evgs");
    save_map(&empty, &GaussianMap::new()).unwrap();

    let out = dir.path().join("bg");
    let (code, text) = evosplat(&["render", "--map", p(&empty), "--dataset", p(&ds), "--frame", "0", "--set", "background=0.2,0.4,0.6", "--out", p(&out)]);
    assert_eq!(code, 0, "{text}");
    let intr = load_dataset(&ds).unwrap().intrinsics;
    let color = load_color(&out.join("color.png"), &intr).unwrap();
    for c in color.data() {
        assert_eq!(c.map(|v| (v * 255.0).round() as u8), [51, 102, 153]);
    }

    // invalid frame id and unknown config keys are argument errors
    assert_eq!(evosplat(&["render", "--map", p(&empty), "--dataset", p(&ds), "--frame", "99", "--out", p(&out)]).0, 2);
    assert_eq!(evosplat(&["map", "--dataset", p(&ds), "--out", p(&out), "--set", "nonsense=1"]).0, 2);
    assert_eq!(evosplat(&["map", "--dataset", p(&ds), "--out", p(&out), "--set", "eps_depth=-1"]).0, 2);
    assert_eq!(evosplat(&["render", "--dataset", p(&ds), "--out", p(&out)]).0, 2);
    assert_eq!(evosplat(&["generate", "--preset", "nowhere", "--out", p(&out)]).0, 2);

    // unreadable or malformed files are format errors
    let junk = dir.path().join("junk.evgs");
    std::fs::write(&junk, b"not a map").unwrap();
    assert_eq!(evosplat(&["render", "--map", p(&junk), "--dataset", p(&ds), "--frame", "0", "--out", p(&out)]).0, 3);
    assert_eq!(evosplat(&["eval", "--map", p(&dir.path().join("none.evgs")), "--dataset", p(&ds), "--out", p(&out)]).0, 3);
    assert_eq!(evosplat(&["map", "--dataset", p(&dir.path().join("nope")), "--out", p(&out)]).0, 3);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "tau = 10\nwindow_size\n").unwrap();
    assert_eq!(evosplat(&["map", "--dataset", p(&ds), "--config", p(&cfg), "--out", p(&out)]).0, 2);

    // a scene script that does not parse
    let script = dir.path().join("s.json");
    std::fs::write(&script, "{").unwrap();
    assert_eq!(evosplat(&["generate", "--script", p(&script), "--out", p(&out)]).0, 3);
}

#[test]
fn generate_from_a_script_file_matches_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let script = evosplat::presets::occlusion(16, 9);
    let path = dir.path().join("occ.json");
    std::fs::write(&path, serde_json::to_string(&script).unwrap()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(evosplat(&["generate", "--script", p(&path), "--out", p(&a)]).0, 0);
    assert_eq!(evosplat(&["generate", "--preset", "occlusion", "--width", "16", "--seed", "9", "--out", p(&b)]).0, 0);
    for f in ["poses.txt", "intrinsics.txt", "script.json", "color/000004.png", "depth/000007.png"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
}

#[test]
fn ablate_writes_a_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    assert_eq!(evosplat(&["generate", "--preset", "partial-removal", "--width", "16", "--out", p(&ds)]).0, 0);
    let out = dir.path().join("abl");
    let (code, text) = evosplat(&[
        "ablate", "--dataset", p(&ds), "--out", p(&out), "--only", "full", "--only", "no-dsa",
        "--set", "refinement_iterations=20", "--set", "mapping_iterations=10",
    ]);
    assert_eq!(code, 0, "{text}");
    let table = String::from_utf8(read(&out.join("ablation.md"))).unwrap();
    assert!(table.starts_with("| variant |"));
    assert!(table.contains("| full |") && table.contains("| no-dsa |"));
    assert_eq!(table.lines().count(), 4);
    assert!(out.join("no-dsa/map.evgs").is_file() && out.join("full/report.json").is_file());
    assert_eq!(evosplat(&["ablate", "--dataset", p(&ds), "--out", p(&out), "--only", "bogus"]).0, 2);
}
