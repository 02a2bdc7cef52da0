//! Command-line front end: dataset generation, mapping, rendering,
//! evaluation and ablation runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad arguments or config,
//! 3 unreadable or malformed files, 4 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::MapperConfig;
use crate::dataset::{create_dir, generate, load_dataset, parse_poses, read_text, save_color, save_depth, write_text};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::mapfile::{load_map, save_map};
use crate::metrics::{evaluate, split_protocol, EvalReport, ViewKind};
use crate::pipeline::{conflict_log_jsonl, render_view, run_mapping, MappingOutput};
use crate::presets::Preset;
use crate::raster::render;
use crate::scene::SceneScript;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "evosplat", version, about = "Gaussian-splat mapping of evolving scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic RGB-D dataset from a preset or a scene script.
    Generate(GenerateArgs),
    /// Map a dataset's training frames and write the map and logs.
    Map(MapArgs),
    /// Render a map from a dataset frame or an explicit pose.
    Render(RenderArgs),
    /// Score a map against a dataset's evaluation views.
    Eval(EvalArgs),
    /// Map a dataset under each ablation variant and tabulate the results.
    Ablate(AblateArgs),
}

/// Config file plus `--set key=value` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Random seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<MapperConfig> {
        let mut c = match &self.config {
            Some(p) => MapperConfig::load(p)?,
            None => MapperConfig::default(),
        };
        c.apply_overrides(&self.set)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Built-in scene: static, evolving, color-change, occlusion, partial-removal.
    #[arg(long, conflicts_with = "script")]
    pub preset: Option<String>,
    /// Scene script as JSON.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Image width for presets; height is 3/4 of it.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Noise seed; overrides the script's.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Supplies the camera and, with `--frame`, the pose.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, required_unless_present = "pose", conflicts_with = "pose")]
    pub frame: Option<usize>,
    /// Camera-to-world pose as `tx ty tz qx qy qz qw`.
    #[arg(long, allow_hyphen_values = true)]
    pub pose: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run only these variants (by name); all when omitted.
    #[arg(long = "only", value_name = "NAME")]
    pub only: Vec<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Maps a library error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::Image { .. } | Error::Script(_) => EXIT_FORMAT,
        Error::Numerical { .. } => EXIT_NUMERICAL,
        Error::EmptyMask => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to stdout and stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Map(a) => cmd_map(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut script = match (&a.preset, &a.script) {
        (Some(name), None) => name.parse::<Preset>()?.script(a.width, 0),
        (None, Some(path)) => {
            let text = read_text(path)?;
            serde_json::from_str::<SceneScript>(&text).map_err(|e| Error::format(path, e.to_string()))?
        }
        _ => return Err(Error::invalid("pass exactly one of --preset or --script")),
    };
    if let Some(s) = a.seed {
        script.seed = s;
    }
    generate(&script, &a.out)?;
    println!("wrote {} frames to {}", script.trajectory.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct MapSummary {
    frames: usize,
    keyframes: usize,
    gaussians: usize,
    steps: usize,
    final_loss: Option<f64>,
}

/// Writes everything a mapping run produced into `out`.
pub fn write_mapping_output(out: &Path, result: &MappingOutput, config: &MapperConfig, frames: usize) -> Result<()> {
    create_dir(out)?;
    save_map(&out.join("map.evgs"), &result.map)?;
    write_text(&out.join("conflicts.jsonl"), &conflict_log_jsonl(&result.log))?;
    write_text(&out.join("config.txt"), &config.to_text())?;
    let summary = MapSummary {
        frames,
        keyframes: result.keyframes.len(),
        gaussians: result.map.live_count(),
        steps: result.steps,
        final_loss: result.final_loss.as_ref().map(|l| l.total),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join("summary.json"), &(json + "\n"))?;
    if !result.checkpoints.is_empty() {
        let dir = out.join("checkpoints");
        create_dir(&dir)?;
        for c in &result.checkpoints {
            let stem = format!("kf{:04}_frame{:06}", c.keyframe_count, c.frame);
            save_color(&dir.join(format!("{stem}_color.png")), &c.color)?;
            save_depth(&dir.join(format!("{stem}_depth.png")), &c.depth)?;
        }
    }
    Ok(())
}

fn cmd_map(a: &MapArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let dataset = load_dataset(&a.dataset)?;
    let split = split_protocol(dataset.len(), &dataset.sequences)?;
    let result = run_mapping(&dataset, &split.train, &config)?;
    write_mapping_output(&a.out, &result, &config, split.train.len())?;
    println!(
        "mapped {} frames: {} keyframes, {} Gaussians, {} steps -> {}",
        split.train.len(),
        result.keyframes.len(),
        result.map.live_count(),
        result.steps,
        a.out.display()
    );
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let map = load_map(&a.map)?;
    let dataset = load_dataset(&a.dataset)?;
    let (color, depth) = match (a.frame, &a.pose) {
        (Some(id), _) => render_view(&map, &dataset, id, &config)?,
        (None, Some(pose)) => {
            let poses = parse_poses(Path::new("--pose"), &format!("0 {pose}\n"))
                .map_err(|e| Error::invalid(format!("bad --pose: {e}")))?;
            let cam = Camera::from_pose(dataset.intrinsics, &poses[0].1)?;
            let out = render(&map, &cam, &config.dsa.render.options());
            (out.color, out.depth)
        }
        (None, None) => return Err(Error::invalid("pass --frame or --pose")),
    };
    create_dir(&a.out)?;
    save_color(&a.out.join("color.png"), &color)?;
    save_depth(&a.out.join("depth.png"), &depth)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Evaluates `map` with the dataset's split and writes `report.txt`,
/// `views.txt` and `report.json` to `out`.
pub fn write_eval(out: &Path, report: &EvalReport) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("report.txt"), &report.to_text())?;
    write_text(&out.join("views.txt"), &report.view_table())?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_text(&out.join("report.json"), &(json + "\n"))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let map = load_map(&a.map)?;
    let dataset = load_dataset(&a.dataset)?;
    let split = split_protocol(dataset.len(), &dataset.sequences)?;
    let report = evaluate(&map, &dataset, &split, &config.dsa.render)?;
    write_eval(&a.out, &report)?;
    print!("{}", report.to_text());
    Ok(())
}

/// One row of the ablation grid: a name and the overrides it applies on top
/// of the base config.
pub const ABLATIONS: [(&str, &[&str]); 7] = [
    ("full", &[]),
    ("no-dsa", &["dsa=off"]),
    ("add-only", &["dsa=add"]),
    ("remove-only", &["dsa=remove"]),
    ("no-kf-filtering", &["kf_filtering=none"]),
    ("full-kf-filtering", &["kf_filtering=full"]),
    ("no-refinement", &["final_refinement=off"]),
];

/// Result of one ablation variant.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub overrides: Vec<String>,
    pub report: EvalReport,
}

/// Formats ablation rows as a Markdown table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
    let mut s = String::from(
        "| variant | input PSNR | input depth L1 (cm) | novel PSNR | novel depth L1 (cm) | changed PSNR | changed depth L1 (cm) |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let (i, n, all) = (r.report.summary(ViewKind::Input), r.report.summary(ViewKind::Novel), r.report.overall());
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.name,
            f(i.psnr),
            f(i.depth_l1_cm),
            f(n.psnr),
            f(n.depth_l1_cm),
            f(all.changed_psnr),
            f(all.changed_depth_l1_cm)
        );
    }
    s
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = a.config.resolve()?;
    for name in &a.only {
        if !ABLATIONS.iter().any(|(n, _)| n == name) {
            let names: Vec<_> = ABLATIONS.iter().map(|(n, _)| *n).collect();
            return Err(Error::invalid(format!("unknown variant {name:?}; expected one of {}", names.join(", "))));
        }
    }
    let dataset = load_dataset(&a.dataset)?;
    let split = split_protocol(dataset.len(), &dataset.sequences)?;
    create_dir(&a.out)?;
    let mut rows = Vec::new();
    for (name, overrides) in ABLATIONS {
        if !a.only.is_empty() && !a.only.iter().any(|n| n == name) {
            continue;
        }
        let mut config = base.clone();
        config.apply_overrides(overrides)?;
        let result = run_mapping(&dataset, &split.train, &config)?;
        let report = evaluate(&result.map, &dataset, &split, &config.dsa.render)?;
        let dir = a.out.join(name);
        write_mapping_output(&dir, &result, &config, split.train.len())?;
        write_eval(&dir, &report)?;
        println!("{name}: done");
        rows.push(AblationRow {
            name: name.to_string(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
            report,
        });
    }
    let table = ablation_table(&rows);
    write_text(&a.out.join("ablation.md"), &table)?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_text(&a.out.join("ablation.json"), &(json + "\n"))?;
    print!("{table}");
    Ok(())
}
