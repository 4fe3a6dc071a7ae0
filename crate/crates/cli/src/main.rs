//! `voxdiff` command line: data generation, training, sampling, rendering
//! and evaluation driven by one JSON config.
//!
//! Exit codes: 0 success, 1 usage error, 2 config or data error. Logs are
//! JSON lines on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use voxdiff::config::RunConfig;
use voxdiff::denoiser::{read_checkpoint, write_checkpoint};
use voxdiff::grid::io::{read_grid, read_ply, sidecar_paths, write_grid, write_mask};
use voxdiff::grid::{condition_split, voxelize, OccupancyGrid, PointCloud};
use voxdiff::mesh::{marching_cubes, write_mesh_ply};
use voxdiff::pipeline;
use voxdiff::render::io::{read_camera, write_camera, write_pfm, write_pgm};
use voxdiff::render::{render_view, DepthMap};
use voxdiff::seed::{rng_from, sub_seed};
use voxdiff::synth::dataset::{camera_ring, occupied_extent, read_dataset, write_dataset};
use voxdiff::Error;

#[derive(Parser)]
#[command(name = "voxdiff", version, about = "Diffusion-based voxel shape completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a procedural dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the tiny denoiser on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to the config's `dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory for `model.ckpt.*` and `loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete a partial point cloud.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem (`<stem>.ckpt.json` + `<stem>.ckpt.bin`).
        #[arg(long)]
        ckpt: PathBuf,
        /// Partial observation as an ASCII PLY cloud.
        #[arg(long)]
        input: PathBuf,
        /// Number of completions; defaults to the config's metric setting.
        #[arg(long)]
        completions: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render silhouettes and depth maps of an occupancy grid.
    RenderViews {
        #[command(flatten)]
        common: Common,
        /// Grid stem (`<stem>.grid.json` + `<stem>.grid.bin`).
        #[arg(long)]
        grid: PathBuf,
        /// Camera JSON; repeat for several views. Without it a camera ring
        /// is drawn from the seed.
        #[arg(long)]
        camera: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against a ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Prediction: PLY cloud or grid stem; repeat for several completions.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Ground truth: PLY cloud or grid stem.
        #[arg(long)]
        gt: PathBuf,
        /// Partial input cloud for UHD.
        #[arg(long)]
        partial: Option<PathBuf>,
        /// Output directory for `report.json`; the report also goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn log(event: &str, fields: Value) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let mut line = json!({ "ts": ts, "event": event });
    if let (Value::Object(dst), Value::Object(src)) = (&mut line, fields) {
        dst.extend(src);
    }
    eprintln!("{line}");
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// A PLY path, or a grid stem given with or without its `.grid.json` suffix.
enum Shape {
    Cloud(PointCloud),
    Grid(OccupancyGrid),
}

fn read_shape(path: &Path) -> CliResult<Shape> {
    let text = path.to_string_lossy();
    if let Some(stem) = text.strip_suffix(".grid.json") {
        return Ok(Shape::Grid(read_grid(stem)?));
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
        require(path, "point cloud")?;
        return Ok(Shape::Cloud(read_ply(path)?));
    }
    require(&sidecar_paths(path).0, "grid header")?;
    Ok(Shape::Grid(read_grid(path)?))
}

fn gen_data(common: &Common, out: &Path) -> CliResult {
    let cfg = load_config(common)?;
    let objects = pipeline::synthesize(&cfg)?;
    write_dataset(out, cfg.seed, &cfg.data, &cfg.grid, cfg.voxel_threshold, cfg.second_view_ratio, &objects)?;
    write_json(&out.join("config.json"), &cfg)?;
    log("gen-data", json!({ "objects": objects.len(), "out": out }));
    Ok(())
}

fn train(common: &Common, dataset: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(common)?;
    let root = dataset
        .map(Path::to_path_buf)
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| Failure::Usage("train needs --dataset or a `dataset` config key".into()))?;
    require(&root.join("manifest.json"), "dataset manifest")?;
    let (manifest, loaded) = read_dataset(&root)?;
    if manifest.grid != cfg.grid {
        return Err(Failure::Data(Error::Config {
            key: "grid".into(),
            reason: "does not match the dataset manifest".into(),
        }));
    }
    let objects: Vec<_> = loaded.into_iter().map(|o| o.training).collect();
    fs::create_dir_all(out)?;
    let mut trainer = pipeline::trainer(&cfg)?;
    let result = trainer.run(&objects, |e| {
        log("epoch", json!({ "epoch": e.epoch, "phase": e.phase, "loss": e.loss }));
    });
    write_checkpoint(out.join("model"), &trainer.checkpoint())?;
    let mut curve = String::from("epoch,phase,loss\n");
    for e in &trainer.curve {
        curve.push_str(&format!("{},{},{:.9e}\n", e.epoch, e.phase, e.loss));
    }
    fs::write(out.join("loss.csv"), curve)?;
    write_json(&out.join("config.json"), &cfg)?;
    result?;
    log("train", json!({ "epochs": trainer.curve.len(), "out": out }));
    Ok(())
}

fn sample(common: &Common, ckpt: &Path, input: &Path, completions: Option<usize>, out: &Path) -> CliResult {
    let cfg = load_config(common)?;
    require(&voxdiff::denoiser::checkpoint_paths(ckpt).0, "checkpoint")?;
    require(input, "input cloud")?;
    let model = read_checkpoint(ckpt)?.model;
    let sched = cfg.schedule()?;
    if model.arch().steps != sched.steps() || model.arch().dims != cfg.grid.dims {
        return Err(Failure::Data(Error::Config {
            key: "T".into(),
            reason: "grid dims or step count differ from the checkpoint".into(),
        }));
    }
    let cloud = read_ply(input)?;
    let grid = voxelize(&cloud, &cfg.grid, cfg.voxel_threshold)?;
    fs::create_dir_all(out)?;
    write_grid(out.join("input"), &grid)?;
    write_mask(out.join("mask"), &condition_split(&grid)?)?;
    let n = completions.unwrap_or(cfg.metrics.completions);
    let seed = sub_seed(cfg.seed, "sample");
    for j in 0..n {
        let done = pipeline::complete(&model, &grid, &sched, cfg.sampler_mode, pipeline::completion_seed(seed, j))?;
        write_grid(out.join(format!("completion_{j}")), &done)?;
        write_mesh_ply(out.join(format!("completion_{j}.mesh.ply")), &marching_cubes(&done, cfg.metrics.iso)?)?;
        log("completion", json!({ "index": j, "occupied": done.occupied_count() }));
    }
    Ok(())
}

fn render_views(common: &Common, grid: &Path, cameras: &[PathBuf], out: &Path) -> CliResult {
    let cfg = load_config(common)?;
    let Shape::Grid(grid) = read_shape(grid)? else {
        return Err(Failure::Usage("--grid must name a grid stem".into()));
    };
    let cams = if cameras.is_empty() {
        let extent = occupied_extent(&grid).max(grid.spec().voxel_size);
        let mut rng = rng_from(sub_seed(cfg.seed, "render"));
        camera_ring(cfg.data.views, 2.5 * extent, cfg.data.image_size, cfg.data.fov_deg, &mut rng)?
    } else {
        cameras
            .iter()
            .map(|p| {
                require(p, "camera")?;
                Ok(read_camera(p)?)
            })
            .collect::<CliResult<Vec<_>>>()?
    };
    fs::create_dir_all(out)?;
    for (k, cam) in cams.iter().enumerate() {
        let view = render_view(&grid, cam, &cfg.render)?;
        let valid: Vec<bool> = view.weight.data.iter().map(|&w| w >= cfg.render.depth_min_weight).collect();
        write_pgm(out.join(format!("view_{k}.pgm")), &view.silhouette)?;
        write_pfm(out.join(format!("view_{k}.pfm")), &DepthMap::new(view.depth, valid)?)?;
        write_camera(out.join(format!("view_{k}.json")), cam)?;
    }
    log("render-views", json!({ "views": cams.len(), "out": out }));
    Ok(())
}

fn eval(common: &Common, preds: &[PathBuf], gt: &Path, partial: Option<&Path>, out: Option<&Path>) -> CliResult {
    let cfg = load_config(common)?;
    let m = &cfg.metrics;
    let seed = sub_seed(cfg.seed, "eval");
    let to_cloud = |shape: Shape, stream: &str| -> CliResult<Option<PointCloud>> {
        match shape {
            Shape::Cloud(pc) => Ok(Some(pc)),
            Shape::Grid(g) => Ok(pipeline::surface_cloud(&g, m.iso, m.surface_points, sub_seed(seed, stream))?),
        }
    };
    let gt_cloud = to_cloud(read_shape(gt)?, "gt-surface")?
        .filter(|pc| !pc.is_empty())
        .ok_or_else(|| Failure::Data(voxdiff::Error::InvalidInput("ground truth has no surface points".into())))?;
    let pred_clouds = preds
        .iter()
        .enumerate()
        .map(|(j, p)| to_cloud(read_shape(p)?, &format!("pred-surface-{j}")))
        .collect::<CliResult<Vec<_>>>()?;
    let partial = match partial {
        Some(p) => {
            require(p, "partial cloud")?;
            Some(read_ply(p)?)
        }
        None => None,
    };
    let id = gt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = pipeline::evaluate_clouds(&id, "", &gt_cloud, partial.as_ref(), &pred_clouds, m, seed)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{text}");
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_json(&out.join("report.json"), &report)?;
    }
    log("eval", json!({ "f1": report.f1 }));
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::GenData { common, out } => gen_data(common, out),
        Command::Train { common, dataset, out } => train(common, dataset.as_deref(), out),
        Command::Sample { common, ckpt, input, completions, out } => sample(common, ckpt, input, *completions, out),
        Command::RenderViews { common, grid, camera, out } => render_views(common, grid, camera, out),
        Command::Eval { common, pred, gt, partial, out } => eval(common, pred, gt, partial.as_deref(), out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            log("error", json!({ "kind": "usage", "message": msg }));
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            log("error", json!({ "kind": "data", "message": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
