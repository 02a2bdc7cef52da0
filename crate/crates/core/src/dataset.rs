//! On-disk RGB-D datasets (TUM-style layout with per-frame mask folders)
//! and synthetic dataset generation.
//!
//! ```text
//! intrinsics.txt            fx fy cx cy width height near far
//! poses.txt                 timestamp tx ty tz qx qy qz qw   (camera-to-world)
//! color/%06d.png            8-bit RGB
//! depth/%06d.png            16-bit, meters × 4000, 0 = invalid
//! masks/%06d/%03d.png       8-bit binary, 255 = inside (optional)
//! provenance/%06d.png       16-bit object ids (optional, synthetic only)
//! sequences.txt             first frame index of each sequence (optional)
//! script.json               generating script (optional, synthetic only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::grid::{ColorImage, DepthMap, Grid, Mask};
use crate::keyframes::Frame;
use crate::scene::{render_frame, GtFrame, SceneScript};

/// Stored depth units per meter.
pub const DEPTH_SCALE: f64 = 4000.0;

/// Frames per second used for generated timestamps.
pub const FRAME_RATE: f64 = 30.0;

/// A loaded dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: Intrinsics,
    /// In timestamp order; `Frame::id` is the file index.
    pub frames: Vec<Frame>,
    /// First frame index of every sequence.
    pub sequences: Vec<usize>,
    pub provenance: Option<Vec<Grid<u16>>>,
    pub script: Option<SceneScript>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, id: usize) -> Option<&Frame> {
        self.frames.iter().find(|f| f.id == id)
    }
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

pub(crate) fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub(crate) fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

pub(crate) fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Quantizes a color channel to 8 bits.
pub fn quantize_color(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantizes a depth in meters to stored units (0 for invalid or out of
/// range).
pub fn quantize_depth(d: f64) -> u16 {
    if !(d > 0.0) || !d.is_finite() {
        return 0;
    }
    let q = (d * DEPTH_SCALE).round();
    if q > u16::MAX as f64 {
        0
    } else {
        q as u16
    }
}

pub fn save_color(path: &Path, img: &ColorImage) -> Result<()> {
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        Rgb([quantize_color(c[0]), quantize_color(c[1]), quantize_color(c[2])])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(depth.width() as u32, depth.height() as u32, |x, y| {
        Luma([quantize_depth(*depth.get(x as usize, y as usize))])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = ImageBuffer::<Luma<u8>, _>::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if *mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

fn save_provenance(path: &Path, prov: &Grid<u16>) -> Result<()> {
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(prov.width() as u32, prov.height() as u32, |x, y| {
        Luma([*prov.get(x as usize, y as usize)])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    image::open(path).map_err(|e| image_err(path, e))
}

fn check_size(path: &Path, w: u32, h: u32, intr: &Intrinsics) -> Result<()> {
    if w as usize != intr.width || h as usize != intr.height {
        return Err(Error::format(
            path,
            format!("image is {w}x{h}, intrinsics say {}x{}", intr.width, intr.height),
        ));
    }
    Ok(())
}

pub fn load_color(path: &Path, intr: &Intrinsics) -> Result<ColorImage> {
    let img = open_image(path)?.into_rgb8();
    check_size(path, img.width(), img.height(), intr)?;
    Ok(Grid::from_fn(intr.width, intr.height, |x, y| {
        let p = img.get_pixel(x as u32, y as u32);
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }))
}

pub fn load_depth(path: &Path, intr: &Intrinsics) -> Result<DepthMap> {
    let img = match open_image(path)? {
        image::DynamicImage::ImageLuma16(i) => i,
        _ => return Err(Error::format(path, "depth must be a 16-bit grayscale PNG")),
    };
    check_size(path, img.width(), img.height(), intr)?;
    Ok(Grid::from_fn(intr.width, intr.height, |x, y| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / DEPTH_SCALE
    }))
}

fn load_mask(path: &Path, intr: &Intrinsics) -> Result<Mask> {
    let img = open_image(path)?.into_luma8();
    check_size(path, img.width(), img.height(), intr)?;
    Ok(Grid::from_fn(intr.width, intr.height, |x, y| img.get_pixel(x as u32, y as u32)[0] >= 128))
}

fn load_provenance(path: &Path, intr: &Intrinsics) -> Result<Grid<u16>> {
    let img = match open_image(path)? {
        image::DynamicImage::ImageLuma16(i) => i,
        _ => return Err(Error::format(path, "provenance must be a 16-bit grayscale PNG")),
    };
    check_size(path, img.width(), img.height(), intr)?;
    Ok(Grid::from_fn(intr.width, intr.height, |x, y| img.get_pixel(x as u32, y as u32)[0]))
}

pub fn format_intrinsics(i: &Intrinsics) -> String {
    format!(
        "{} {} {} {} {} {} {} {}\n",
        i.fx, i.fy, i.cx, i.cy, i.width, i.height, i.near, i.far
    )
}

pub fn parse_intrinsics(path: &Path, text: &str) -> Result<Intrinsics> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 8 {
        return Err(Error::format(path, format!("expected 8 fields, found {}", fields.len())));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|_| Error::format(path, format!("field {} is not a number: {:?}", i + 1, fields[i])))
    };
    let int = |i: usize| -> Result<usize> {
        fields[i]
            .parse::<usize>()
            .map_err(|_| Error::format(path, format!("field {} is not an integer: {:?}", i + 1, fields[i])))
    };
    let intr = Intrinsics {
        fx: num(0)?,
        fy: num(1)?,
        cx: num(2)?,
        cy: num(3)?,
        width: int(4)?,
        height: int(5)?,
        near: num(6)?,
        far: num(7)?,
    };
    intr.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(intr)
}

pub fn format_pose_line(timestamp: f64, pose: &Isometry3<f64>) -> String {
    let t = pose.translation.vector;
    let q = pose.rotation.quaternion();
    format!(
        "{} {} {} {} {} {} {} {}\n",
        timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
    )
}

/// Parses a trajectory file into `(timestamp, camera-to-world)` pairs.
pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<(f64, Isometry3<f64>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: not numeric", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::format(path, format!("line {}: expected 8 fields", n + 1)));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 1e-9) || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(path, format!("line {}: invalid pose", n + 1)));
        }
        let pose = Isometry3::from_parts(Translation3::new(v[1], v[2], v[3]), UnitQuaternion::from_quaternion(q));
        out.push((v[0], pose));
    }
    Ok(out)
}

fn write_gt_frame(root: &Path, f: &GtFrame) -> Result<()> {
    let name = frame_name(f.index);
    save_color(&root.join("color").join(&name), &f.color)?;
    save_depth(&root.join("depth").join(&name), &f.depth)?;
    save_provenance(&root.join("provenance").join(&name), &f.provenance)?;
    let mdir = root.join("masks").join(format!("{:06}", f.index));
    create_dir(&mdir)?;
    for (k, m) in f.masks.iter().enumerate() {
        save_mask(&mdir.join(format!("{k:03}.png")), m)?;
    }
    Ok(())
}

/// Renders every frame of `script` into `out` using the on-disk layout.
pub fn generate(script: &SceneScript, out: &Path) -> Result<()> {
    script.validate()?;
    for sub in ["color", "depth", "masks", "provenance"] {
        create_dir(&out.join(sub))?;
    }
    write_text(&out.join("intrinsics.txt"), &format_intrinsics(&script.intrinsics))?;
    let poses = script.poses()?;
    let mut lines = String::new();
    for (i, p) in poses.iter().enumerate() {
        lines.push_str(&format_pose_line(i as f64 / FRAME_RATE, p));
    }
    write_text(&out.join("poses.txt"), &lines)?;
    let seqs: String = script.sequence_starts().iter().map(|s| format!("{s}\n")).collect();
    write_text(&out.join("sequences.txt"), &seqs)?;
    let json = serde_json::to_string_pretty(script).map_err(|e| Error::format(out.join("script.json"), e.to_string()))?;
    write_text(&out.join("script.json"), &(json + "\n"))?;
    (0..poses.len()).into_par_iter().try_for_each(|i| {
        let f = render_frame(script, i)?;
        write_gt_frame(out, &f)
    })
}

/// Builds a dataset in memory, with the same quantization the on-disk
/// layout applies.
pub fn from_script(script: &SceneScript) -> Result<Dataset> {
    script.validate()?;
    let poses = script.poses()?;
    let gt: Vec<GtFrame> = (0..poses.len()).into_par_iter().map(|i| render_frame(script, i)).collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(gt.len());
    let mut provenance = Vec::with_capacity(gt.len());
    for f in gt {
        frames.push(Frame {
            id: f.index,
            timestamp: f.index as f64 / FRAME_RATE,
            color: f.color.map(|c| (*c).map(|v| quantize_color(v) as f64 / 255.0)),
            depth: f.depth.map(|d| quantize_depth(*d) as f64 / DEPTH_SCALE),
            pose: f.pose,
            masks: f.masks,
        });
        provenance.push(f.provenance);
    }
    Ok(Dataset {
        root: PathBuf::new(),
        intrinsics: script.intrinsics,
        frames,
        sequences: script.sequence_starts(),
        provenance: Some(provenance),
        script: Some(script.clone()),
    })
}

fn load_masks(dir: &Path, intr: &Intrinsics) -> Result<Vec<Mask>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    files.iter().map(|p| load_mask(p, intr)).collect()
}

/// Loads a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let ipath = root.join("intrinsics.txt");
    if !ipath.is_file() {
        return Err(Error::format(root, "missing intrinsics.txt"));
    }
    let intrinsics = parse_intrinsics(&ipath, &read_text(&ipath)?)?;
    let ppath = root.join("poses.txt");
    if !ppath.is_file() {
        return Err(Error::format(root, "missing poses.txt"));
    }
    let poses = parse_poses(&ppath, &read_text(&ppath)?)?;
    if poses.is_empty() {
        return Err(Error::format(&ppath, "no poses"));
    }
    let has_masks = root.join("masks").is_dir();
    if !has_masks {
        tracing::warn!(path = %root.display(), "dataset has no masks/ directory; removal cannot propagate through masks");
    }
    let has_prov = root.join("provenance").is_dir();

    let loaded: Vec<(Frame, Option<Grid<u16>>)> = poses
        .par_iter()
        .enumerate()
        .map(|(i, (ts, pose))| {
            let name = frame_name(i);
            let color = load_color(&root.join("color").join(&name), &intrinsics)?;
            let depth = load_depth(&root.join("depth").join(&name), &intrinsics)?;
            let masks = if has_masks {
                load_masks(&root.join("masks").join(format!("{i:06}")), &intrinsics)?
            } else {
                Vec::new()
            };
            let prov = if has_prov {
                let p = root.join("provenance").join(&name);
                if p.is_file() {
                    Some(load_provenance(&p, &intrinsics)?)
                } else {
                    None
                }
            } else {
                None
            };
            let frame = Frame {
                id: i,
                timestamp: *ts,
                color,
                depth,
                pose: *pose,
                masks,
            };
            Ok((frame, prov))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..loaded.len()).collect();
    order.sort_by(|&a, &b| loaded[a].0.timestamp.total_cmp(&loaded[b].0.timestamp).then(a.cmp(&b)));
    let all_prov = loaded.iter().all(|(_, p)| p.is_some());
    let mut frames = Vec::with_capacity(loaded.len());
    let mut provenance = Vec::new();
    let mut slots: Vec<Option<(Frame, Option<Grid<u16>>)>> = loaded.into_iter().map(Some).collect();
    for i in order {
        let (f, p) = slots[i].take().expect("each index once");
        frames.push(f);
        if let Some(p) = p {
            provenance.push(p);
        }
    }

    let spath = root.join("script.json");
    let script = if spath.is_file() {
        let text = read_text(&spath)?;
        Some(serde_json::from_str::<SceneScript>(&text).map_err(|e| Error::format(&spath, e.to_string()))?)
    } else {
        None
    };
    if let Some(s) = &script {
        if s.intrinsics != intrinsics {
            return Err(Error::format(&ipath, "intrinsics differ from script.json"));
        }
    }
    let qpath = root.join("sequences.txt");
    let sequences = if qpath.is_file() {
        read_text(&qpath)?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| Error::format(&qpath, format!("bad index {t:?}"))))
            .collect::<Result<Vec<_>>>()?
    } else if let Some(s) = &script {
        s.sequence_starts()
    } else {
        vec![0]
    };
    if sequences.first() != Some(&0)
        || sequences.windows(2).any(|w| w[1] <= w[0])
        || sequences.last().is_some_and(|&l| l >= frames.len())
    {
        return Err(Error::format(&qpath, "sequence starts must begin at 0, increase and index frames"));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        intrinsics,
        frames,
        sequences,
        provenance: all_prov.then_some(provenance),
        script,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BoxSpec, Event, EventOp, NoiseSpec, ObjectSpec, PoseSpec};

    fn script() -> SceneScript {
        SceneScript {
            seed: 1,
            intrinsics: Intrinsics {
                fx: 30.0,
                fy: 30.0,
                cx: 15.5,
                cy: 11.5,
                width: 32,
                height: 24,
                near: 0.05,
                far: 12.0,
            },
            room: BoxSpec::new([0.0, 1.0, 0.0], [2.0, 1.0, 2.0], [0.6, 0.6, 0.6]),
            structure: vec![],
            objects: vec![ObjectSpec {
                id: 4,
                shape: BoxSpec::new([0.0, 0.25, 1.0], [0.25, 0.25, 0.25], [0.2, 0.3, 0.9]),
                present: true,
            }],
            events: vec![Event {
                frame: 1,
                op: EventOp::Move,
                object: 4,
                center: Some([0.5, 0.25, 1.0]),
            }],
            trajectory: vec![
                PoseSpec::LookAt {
                    position: [0.0, 1.0, -1.0],
                    target: [0.0, 0.3, 1.0],
                    up: [0.0, 1.0, 0.0],
                },
                PoseSpec::LookAt {
                    position: [0.2, 1.0, -1.0],
                    target: [0.0, 0.3, 1.0],
                    up: [0.0, 1.0, 0.0],
                },
            ],
            sequences: vec![0, 1],
            noise: NoiseSpec { depth: true, color: true },
            light: [0.3, 0.8, -0.5],
            ambient: 0.6,
            mask_dilation: 0,
        }
    }

    #[test]
    fn generate_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = script();
        generate(&s, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sequences, vec![0, 1]);
        assert_eq!(ds.script.as_ref(), Some(&s));
        for (i, f) in ds.frames.iter().enumerate() {
            let gt = render_frame(&s, i).unwrap();
            assert_eq!(f.id, i);
            assert!((f.pose.translation.vector - gt.pose.translation.vector).norm() < 1e-12);
            assert!(f.pose.rotation.angle_to(&gt.pose.rotation) < 1e-7);
            for (a, b) in f.depth.data().iter().zip(gt.depth.data()) {
                assert!((a - b).abs() <= 0.5 / DEPTH_SCALE + 1e-12);
            }
            for (a, b) in f.color.data().iter().zip(gt.color.data()) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
            assert_eq!(f.masks, gt.masks);
            assert_eq!(ds.provenance.as_ref().unwrap()[i], gt.provenance);
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&script(), a.path()).unwrap();
        generate(&script(), b.path()).unwrap();
        for sub in ["color/000001.png", "depth/000001.png", "poses.txt", "masks/000000/000.png"] {
            assert_eq!(fs::read(a.path().join(sub)).unwrap(), fs::read(b.path().join(sub)).unwrap());
        }
    }

    #[test]
    fn empty_directory_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        generate(&script(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("depth/000001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("000001.png"), "{err}");
    }

    #[test]
    fn intrinsics_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        generate(&script(), dir.path()).unwrap();
        let mut i = script().intrinsics;
        i.width = 40;
        fs::write(dir.path().join("intrinsics.txt"), format_intrinsics(&i)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_masks_yield_empty_lists() {
        let dir = tempfile::tempdir().unwrap();
        generate(&script(), dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join("masks")).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.frames.iter().all(|f| f.masks.is_empty()));
    }

    #[test]
    fn corrupt_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        generate(&script(), dir.path()).unwrap();
        fs::write(dir.path().join("color/000000.png"), b"not a png").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Image { .. })));
    }
}
