//! Command-line surface: `generate`, `train`, `evaluate`, `pointcloud`, `ablation`.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 I/O error,
//! 4 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{self, Dataset, FolderDataset, InMemoryDataset, Split};
use crate::depth_geometry::{flying_pixel_score_with, project_to_point_cloud, CameraIntrinsics, FlyingPixelParams};
use crate::io;
use crate::metrics::EdgeMetricConfig;
use crate::par;
use crate::pipeline::{self, AblationRow, Checkpoint, ExperimentConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.cbor";
pub const HISTORY_FILE: &str = "history.csv";
pub const LOSS_CURVE_FILE: &str = "loss_curve.png";

/// Outcome of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

impl CommandResult {
    fn ok(artifacts: Vec<PathBuf>, summary: String) -> Self {
        Self {
            exit_code: 0,
            artifacts,
            summary,
        }
    }

    fn failed(err: &Error) -> Self {
        Self {
            exit_code: err.exit_code(),
            artifacts: Vec::new(),
            summary: format!("error: {err}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sharpdepth", version, about = "Boundary-sharp monocular depth estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic samples (PNG image, PFM depth, edge-mask PNG) and an index.
    Generate(GenerateArgs),
    /// Train a model; writes a checkpoint, metric history CSV and loss curve.
    Train(TrainArgs),
    /// Score a checkpoint against a dataset; writes CSV and JSON reports.
    Evaluate(EvaluateArgs),
    /// Back-project a depth map to a PLY point cloud.
    Pointcloud(PointcloudArgs),
    /// Run the five-row ablation and write a combined table.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Experiment config JSON; its `data` section drives the generator.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of samples (default: `data.count`).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config JSON (default: desk preset).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root with `index.txt`; synthetic in-memory data when omitted.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Required unless `--predict-identity` is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data_root: PathBuf,
    /// Comma-separated Sobel thresholds, e.g. `0.25,0.5,1.0`.
    #[arg(long, default_value = "0.25,0.5,1.0")]
    pub edge_thresholds: String,
    /// Output directory for `metrics.csv` and `metrics.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// `all`, `train` or `val`.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Score ground truth against itself (harness check).
    #[arg(long)]
    pub predict_identity: bool,
    /// Also write a colormapped PNG per predicted depth map.
    #[arg(long)]
    pub depth_png: bool,
    /// Colormap range in meters, `min,max`.
    #[arg(long, default_value = "1,8")]
    pub colormap_range: String,
}

#[derive(Debug, Args)]
pub struct PointcloudArgs {
    /// Depth map (`.pfm` or 16-bit `.png` in millimeters).
    #[arg(long)]
    pub depth: PathBuf,
    /// Optional RGB image for vertex colors.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// JSON object with `fx`, `fy`, `cx`, `cy`.
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub out_ply: PathBuf,
    /// Ground-truth depth; reports the flying-pixel score when given.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Subset of `baseline,bad,bad_su_direct,su_st,full`; table order is kept.
    #[arg(long)]
    pub rows: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from_args<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => CommandResult {
            exit_code: if e.use_stderr() { 2 } else { 0 },
            artifacts: Vec::new(),
            summary: e.render().to_string(),
        },
    }
}

/// Runs a parsed command under the execution mode chosen by the environment.
pub fn run(cli: Cli) -> CommandResult {
    par::with_execution_mode(|| {
        let out = match cli.command {
            Command::Generate(a) => cmd_generate(&a),
            Command::Train(a) => cmd_train(&a),
            Command::Evaluate(a) => cmd_evaluate(&a),
            Command::Pointcloud(a) => cmd_pointcloud(&a),
            Command::Ablation(a) => cmd_ablation(&a),
        };
        out.unwrap_or_else(|e| CommandResult::failed(&e))
    })
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk_preset()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn splits(exp: &ExperimentConfig, data_root: Option<&Path>) -> Result<(InMemoryDataset, InMemoryDataset)> {
    match data_root {
        Some(root) => {
            let train = FolderDataset::open(root, Split::Train)?.load_all()?;
            let val = FolderDataset::open(root, Split::Val)?.load_all()?;
            Ok((train, val))
        }
        None => exp.synthetic_splits(),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<CommandResult> {
    let mut exp = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        exp.data.synthetic.seed = seed;
    }
    let count = a.count.unwrap_or(exp.data.count);
    let scenes = data::generate_scenes(&exp.data.synthetic, count)?;
    create_dir(&a.out_dir)?;
    let artifacts = data::write_synthetic_dataset(&a.out_dir, &scenes)?;
    Ok(CommandResult::ok(
        artifacts,
        format!("generated {count} samples in {}", a.out_dir.display()),
    ))
}

pub fn cmd_train(a: &TrainArgs) -> Result<CommandResult> {
    let mut exp = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        exp.train.seed = seed;
    }
    let (train_set, val_set) = splits(&exp, a.data_root.as_deref())?;
    let val: Option<&dyn Dataset> = (!val_set.is_empty()).then_some(&val_set as &dyn Dataset);
    let out = pipeline::train(&exp.train, &exp.model, &exp.loss, &train_set, val, &exp.edge_metrics)?;
    create_dir(&a.out_dir)?;
    let ckpt = a.out_dir.join(CHECKPOINT_FILE);
    out.checkpoint.save(&ckpt)?;
    let history = a.out_dir.join(HISTORY_FILE);
    write_text(&history, &out.checkpoint.history_csv())?;
    let curve = a.out_dir.join(LOSS_CURVE_FILE);
    io::write_line_plot(&curve, &[&out.checkpoint.step_losses], 640, 360)?;
    let last = out.checkpoint.history.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
    Ok(CommandResult::ok(
        vec![ckpt, history, curve],
        format!(
            "trained {} epochs on {} samples, final train loss {last:.4}",
            out.checkpoint.epoch,
            train_set.len()
        ),
    ))
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("colormap range must be `min,max`, got {s:?}"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo < hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<CommandResult> {
    let edge = EdgeMetricConfig::parse(&a.edge_thresholds)?;
    let split = Split::parse(&a.split)?;
    let (lo, hi) = parse_range(&a.colormap_range)?;
    let ds = FolderDataset::open(&a.data_root, split)?.load_all()?;
    if ds.is_empty() {
        return Err(Error::Config(format!("split {} of {} is empty", split.name(), a.data_root.display())));
    }
    let net = match (&a.checkpoint, a.predict_identity) {
        (_, true) => None,
        (Some(p), false) => Some(Checkpoint::load(p)?.model()?),
        (None, false) => return Err(Error::Config("--checkpoint is required unless --predict-identity is set".into())),
    };
    let eval = match &net {
        Some(net) => pipeline::evaluate(net, &ds, &edge)?,
        None => pipeline::evaluate_identity(&ds, &edge)?,
    };
    create_dir(&a.out)?;
    let csv = a.out.join("metrics.csv");
    write_text(&csv, &eval.to_csv())?;
    let json = a.out.join("metrics.json");
    write_text(&json, &eval.to_json())?;
    let mut artifacts = vec![csv, json];
    if a.depth_png {
        let dir = a.out.join("depth_png");
        create_dir(&dir)?;
        for i in 0..ds.len() {
            let s = ds.get(i)?;
            let depth = match &net {
                Some(net) => net.predict(&s.image.to_tensor())?.remove(0),
                None => s.depth.clone(),
            };
            let p = dir.join(format!("{}.png", s.id));
            io::write_depth_colormap(&p, &depth, lo, hi)?;
            artifacts.push(p);
        }
    }
    let r = &eval.aggregate;
    let f1: Vec<String> = r.edge.iter().map(|e| format!("F1@{}={:.4}", e.threshold, e.f1)).collect();
    Ok(CommandResult::ok(
        artifacts,
        format!(
            "{} samples: rmse {:.4} abs_rel {:.4} log10 {:.4} d1 {:.4} {}",
            ds.len(),
            r.rmse,
            r.abs_rel,
            r.log10,
            r.delta1,
            f1.join(" ")
        ),
    ))
}

/// Reads `{fx, fy, cx, cy}`; a missing or non-numeric key is a config error naming it.
pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let key = |k: &str| {
        v.get(k)
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| Error::Config(format!("{}: missing numeric key \"{k}\"", path.display())))
    };
    CameraIntrinsics::new(key("fx")?, key("fy")?, key("cx")?, key("cy")?)
}

pub fn cmd_pointcloud(a: &PointcloudArgs) -> Result<CommandResult> {
    let intr = read_intrinsics(&a.intrinsics)?;
    let depth = io::read_depth(&a.depth)?;
    let image = a.image.as_deref().map(io::read_rgb).transpose()?;
    let cloud = project_to_point_cloud(&depth, &intr, image.as_ref())?;
    let mut summary = format!("wrote {} vertices to {}", cloud.len(), a.out_ply.display());
    if let Some(gt) = &a.gt {
        let gt = io::read_depth(gt)?;
        let score = flying_pixel_score_with(&depth, &gt, &FlyingPixelParams::default())?;
        summary.push_str(&format!("; flying_pixel_score {score:.6}"));
    }
    io::write_ply(&a.out_ply, &cloud)?;
    Ok(CommandResult::ok(vec![a.out_ply.clone()], summary))
}

pub fn cmd_ablation(a: &AblationArgs) -> Result<CommandResult> {
    let mut exp = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        exp.train.seed = seed;
    }
    let rows = match &a.rows {
        Some(list) => AblationRow::parse_list(list)?,
        None => AblationRow::ALL.to_vec(),
    };
    let (train_set, val_set) = splits(&exp, a.data_root.as_deref())?;
    let entries = pipeline::ablation_suite(&exp, &rows, &train_set, &val_set)?;
    let ckpt_dir = a.out_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut artifacts = Vec::with_capacity(entries.len() + 2);
    for e in &entries {
        let p = ckpt_dir.join(format!("{}.cbor", e.row.name()));
        e.checkpoint.save(&p)?;
        artifacts.push(p);
    }
    let csv = a.out_dir.join("ablation.csv");
    write_text(&csv, &pipeline::ablation_csv(&entries))?;
    let table = pipeline::ablation_table(&entries);
    let txt = a.out_dir.join("ablation.txt");
    write_text(&txt, &table)?;
    artifacts.extend([csv, txt]);
    Ok(CommandResult::ok(artifacts, format!("{} ablation rows\n{table}", entries.len())))
}
