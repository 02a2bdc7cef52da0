//! Image-quality metrics and the evolving-scene evaluation protocol.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::grid::{ColorImage, DepthMap, Grid, Mask};
use crate::loss::valid_depth;
use crate::map::GaussianMap;
use crate::optim::RenderSettings;
use crate::raster::render;
use crate::scene::changed_region;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn shape_check<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid("metric inputs differ in size"))
    }
}

/// `10·log10(1/MSE)` over masked pixels and all channels, capped at 99 dB.
pub fn psnr(a: &ColorImage, b: &ColorImage, mask: Option<&Mask>) -> Result<f64> {
    shape_check(a, b)?;
    if let Some(m) = mask {
        shape_check(a, m)?;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        for k in 0..3 {
            sum += (x[k] - y[k]).powi(2);
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mse = sum / n as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over the windows lying entirely inside `mask`.
pub fn ssim_metric(a: &ColorImage, b: &ColorImage, mask: Option<&Mask>) -> Result<f64> {
    shape_check(a, b)?;
    let r = crate::ssim::ssim(a, b, mask, false);
    if r.windows == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(r.value)
}

/// Mean absolute depth difference over `valid` pixels, in centimeters.
pub fn depth_l1_cm(a: &DepthMap, b: &DepthMap, valid: &Mask) -> Result<f64> {
    shape_check(a, b)?;
    shape_check(a, valid)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((x, y), &v) in a.data().iter().zip(b.data()).zip(valid.data()) {
        if v {
            sum += (x - y).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(100.0 * sum / n as f64)
}

/// Train / held-out partition of frame indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
    /// First index of the last sequence.
    pub last_sequence_start: usize,
}

/// Holds out every 10th frame of the last sequence.
pub fn split_protocol(frame_count: usize, sequences: &[usize]) -> Result<Split> {
    if frame_count == 0 {
        return Err(Error::invalid("dataset has no frames"));
    }
    let start = sequences.last().copied().unwrap_or(0);
    if start >= frame_count {
        return Err(Error::invalid("last sequence starts beyond the frames"));
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for i in 0..frame_count {
        if i >= start && (i - start) % 10 == 0 {
            heldout.push(i);
        } else {
            train.push(i);
        }
    }
    Ok(Split {
        train,
        heldout,
        last_sequence_start: start,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Input,
    Novel,
}

impl ViewKind {
    pub fn label(self) -> &'static str {
        match self {
            ViewKind::Input => "input",
            ViewKind::Novel => "novel",
        }
    }
}

/// Metrics of one evaluated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub frame: usize,
    pub kind: ViewKind,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub depth_l1_cm: Option<f64>,
    pub changed_pixels: usize,
    pub changed_psnr: Option<f64>,
    pub changed_ssim: Option<f64>,
    pub changed_depth_l1_cm: Option<f64>,
}

/// Means over the views of one split; `None` when no view defines a value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub views: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub depth_l1_cm: Option<f64>,
    pub changed_psnr: Option<f64>,
    pub changed_ssim: Option<f64>,
    pub changed_depth_l1_cm: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl SplitSummary {
    fn of(views: &[&ViewMetrics]) -> Self {
        Self {
            views: views.len(),
            psnr: mean(views.iter().map(|v| Some(v.psnr))),
            ssim: mean(views.iter().map(|v| v.ssim)),
            depth_l1_cm: mean(views.iter().map(|v| v.depth_l1_cm)),
            changed_psnr: mean(views.iter().map(|v| v.changed_psnr)),
            changed_ssim: mean(views.iter().map(|v| v.changed_ssim)),
            changed_depth_l1_cm: mean(views.iter().map(|v| v.changed_depth_l1_cm)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub input: SplitSummary,
    pub novel: SplitSummary,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn from_views(views: Vec<ViewMetrics>) -> Self {
        let pick = |k: ViewKind| views.iter().filter(|v| v.kind == k).collect::<Vec<_>>();
        let input = SplitSummary::of(&pick(ViewKind::Input));
        let novel = SplitSummary::of(&pick(ViewKind::Novel));
        Self { views, input, novel }
    }

    /// Means over input and novel views together.
    pub fn overall(&self) -> SplitSummary {
        SplitSummary::of(&self.views.iter().collect::<Vec<_>>())
    }

    pub fn summary(&self, kind: ViewKind) -> &SplitSummary {
        match kind {
            ViewKind::Input => &self.input,
            ViewKind::Novel => &self.novel,
        }
    }

    /// One `split.metric = value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for kind in [ViewKind::Input, ViewKind::Novel] {
            let s = self.summary(kind);
            let l = kind.label();
            let _ = writeln!(out, "{l}.views = {}", s.views);
            let _ = writeln!(out, "{l}.psnr = {}", fmt_opt(s.psnr));
            let _ = writeln!(out, "{l}.ssim = {}", fmt_opt(s.ssim));
            let _ = writeln!(out, "{l}.depth_l1_cm = {}", fmt_opt(s.depth_l1_cm));
            let _ = writeln!(out, "{l}.lpips = unavailable");
            let _ = writeln!(out, "{l}.changed_psnr = {}", fmt_opt(s.changed_psnr));
            let _ = writeln!(out, "{l}.changed_ssim = {}", fmt_opt(s.changed_ssim));
            let _ = writeln!(out, "{l}.changed_depth_l1_cm = {}", fmt_opt(s.changed_depth_l1_cm));
        }
        out
    }

    /// Whitespace-separated per-view table with a header row.
    pub fn view_table(&self) -> String {
        let mut out =
            String::from("frame split psnr ssim depth_l1_cm changed_pixels changed_psnr changed_ssim changed_depth_l1_cm\n");
        for v in &self.views {
            let _ = writeln!(
                out,
                "{} {} {:.6} {} {} {} {} {} {}",
                v.frame,
                v.kind.label(),
                v.psnr,
                fmt_opt(v.ssim),
                fmt_opt(v.depth_l1_cm),
                v.changed_pixels,
                fmt_opt(v.changed_psnr),
                fmt_opt(v.changed_ssim),
                fmt_opt(v.changed_depth_l1_cm)
            );
        }
        out
    }
}

/// Ground truth one view is scored against.
pub struct Reference<'a> {
    pub color: std::borrow::Cow<'a, ColorImage>,
    pub depth: std::borrow::Cow<'a, DepthMap>,
    pub changed: Option<Mask>,
}

fn ok_or_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores a rendering against a reference.
pub fn score_view(
    frame: usize,
    kind: ViewKind,
    color: &ColorImage,
    depth: &DepthMap,
    reference: &Reference,
    far: f64,
) -> Result<ViewMetrics> {
    let valid = reference.depth.map(|d| valid_depth(*d, far));
    let psnr_all = psnr(color, &reference.color, None)?;
    let ssim_all = ok_or_none(ssim_metric(color, &reference.color, None))?;
    let depth_all = ok_or_none(depth_l1_cm(depth, &reference.depth, &valid))?;
    let (mut cp, mut cs, mut cd, mut n) = (None, None, None, 0);
    if let Some(ch) = reference.changed.as_ref().filter(|m| m.any()) {
        n = ch.count();
        cp = ok_or_none(psnr(color, &reference.color, Some(ch)))?;
        cs = ok_or_none(ssim_metric(color, &reference.color, Some(ch)))?;
        cd = ok_or_none(depth_l1_cm(depth, &reference.depth, &valid.and(ch)))?;
    }
    Ok(ViewMetrics {
        frame,
        kind,
        psnr: psnr_all,
        ssim: ssim_all,
        depth_l1_cm: depth_all,
        changed_pixels: n,
        changed_psnr: cp,
        changed_ssim: cs,
        changed_depth_l1_cm: cd,
    })
}

/// Renders every evaluation view of the last sequence and scores it against
/// the latest scene state.
///
/// Input views are the training frames of the last sequence; novel views are
/// the held-out frames. When the dataset carries its generating script the
/// reference is a noise-free rendering of the final scene state and the
/// changed region is available; otherwise the recorded frame is used.
pub fn evaluate(map: &GaussianMap, dataset: &Dataset, split: &Split, rs: &RenderSettings) -> Result<EvalReport> {
    let intr = dataset.intrinsics;
    let mut jobs: Vec<(usize, ViewKind)> = split
        .train
        .iter()
        .filter(|&&i| i >= split.last_sequence_start)
        .map(|&i| (i, ViewKind::Input))
        .chain(split.heldout.iter().map(|&i| (i, ViewKind::Novel)))
        .collect();
    jobs.sort_unstable_by_key(|j| j.0);
    let last_state = dataset
        .script
        .as_ref()
        .map(|s| (s, s.state_at(s.trajectory.len().saturating_sub(1))));
    let views = jobs
        .par_iter()
        .map(|&(i, kind)| {
            let frame = dataset
                .frame(i)
                .ok_or_else(|| Error::invalid(format!("frame {i} not in dataset")))?;
            let cam = Camera::from_pose(intr, &frame.pose)?;
            let out = render(map, &cam, &rs.options());
            let reference = match &last_state {
                Some((script, state)) => {
                    let img = state.render(&intr, &frame.pose);
                    Reference {
                        color: std::borrow::Cow::Owned(img.color),
                        depth: std::borrow::Cow::Owned(img.depth),
                        changed: Some(changed_region(script, &frame.pose)),
                    }
                }
                None => Reference {
                    color: std::borrow::Cow::Borrowed(&frame.color),
                    depth: std::borrow::Cow::Borrowed(&frame.depth),
                    changed: None,
                },
            };
            score_view(i, kind, &out.color, &out.depth, &reference, intr.far)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_views(views))
}
