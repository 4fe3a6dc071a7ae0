//! Stage-level helpers shared by the command line and the tests.

use crate::config::{MetricSettings, RunConfig};
use crate::denoiser::train::{Trainer, TrainingObject};
use crate::denoiser::Denoiser;
use crate::diffusion::{generate, SamplerMode, VarianceSchedule};
use crate::error::{invalid, Result};
use crate::grid::{condition_split, voxelize, GridSpec, OccupancyGrid, PointCloud};
use crate::mesh::{marching_cubes, sample_surface};
use crate::metrics::{self, MetricReport};
use crate::synth::dataset::{generate_dataset, GeneratedObject};
use crate::seed::{rng_from, sub_seed};

/// The procedural dataset of a run; objects come from the `"data"` stream
/// of the master seed.
pub fn synthesize(cfg: &RunConfig) -> Result<Vec<GeneratedObject>> {
    generate_dataset(&cfg.data, &cfg.grid, cfg.voxel_threshold, cfg.second_view_ratio, sub_seed(cfg.seed, "data"))
}

/// Voxelized union of the clouds of the given views.
pub fn input_grid(obj: &TrainingObject, views: &[usize], spec: &GridSpec, k: usize) -> Result<OccupancyGrid> {
    let mut pts = Vec::new();
    for &v in views {
        let view = obj.views.get(v).ok_or_else(|| invalid(format!("object `{}` has no view {v}", obj.id)))?;
        pts.extend_from_slice(view.cloud.points());
    }
    voxelize(&PointCloud::world(pts)?, spec, k)
}

/// Merged clouds of the given views.
pub fn input_cloud(obj: &TrainingObject, views: &[usize]) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for &v in views {
        let view = obj.views.get(v).ok_or_else(|| invalid(format!("object `{}` has no view {v}", obj.id)))?;
        pts.extend_from_slice(view.cloud.points());
    }
    PointCloud::world(pts)
}

/// One completion of `input`, conditioned on its occupied voxels.
pub fn complete(
    denoiser: &dyn Denoiser,
    input: &OccupancyGrid,
    sched: &VarianceSchedule,
    mode: SamplerMode,
    seed: u64,
) -> Result<OccupancyGrid> {
    let mask = condition_split(input)?;
    generate(denoiser, input, &mask, sched, &mut rng_from(seed), mode)
}

/// Seed of completion `j` under a sampling seed.
pub fn completion_seed(seed: u64, j: usize) -> u64 {
    sub_seed(seed, &format!("completion-{j}"))
}

/// `n` surface points of the `iso` level set, or `None` when it is empty.
pub fn surface_cloud(grid: &OccupancyGrid, iso: f64, n: usize, seed: u64) -> Result<Option<PointCloud>> {
    let mesh = marching_cubes(grid, iso)?;
    if mesh.is_empty() {
        return Ok(None);
    }
    sample_surface(&mesh, n, &mut rng_from(seed)).map(Some)
}

/// Everything needed to score the completions of one object.
pub struct EvalInput<'a> {
    pub id: &'a str,
    pub category: &'a str,
    pub gt: &'a OccupancyGrid,
    pub partial: &'a PointCloud,
    pub completions: &'a [OccupancyGrid],
}

/// Scores one object. The ground-truth cloud is sampled from the
/// ground-truth grid's surface exactly like the predictions.
pub fn evaluate(input: &EvalInput<'_>, m: &MetricSettings, seed: u64) -> Result<MetricReport> {
    if input.completions.is_empty() {
        return Err(invalid("evaluation needs at least one completion"));
    }
    let gt = surface_cloud(input.gt, m.iso, m.surface_points, sub_seed(seed, "gt-surface"))?
        .ok_or_else(|| invalid(format!("object `{}` has an empty ground truth", input.id)))?;
    let preds = input
        .completions
        .iter()
        .enumerate()
        .map(|(j, g)| surface_cloud(g, m.iso, m.surface_points, sub_seed(seed, &format!("pred-surface-{j}"))))
        .collect::<Result<Vec<_>>>()?;
    evaluate_clouds(input.id, input.category, &gt, Some(input.partial), &preds, m, seed)
}

/// Scores predicted clouds against a ground-truth cloud; all clouds are
/// normalized by the ground truth. A `None` prediction (empty surface)
/// counts as zero precision and recall and leaves the distance metrics
/// unset. P, R, F1, EMD and Chamfer are averaged over predictions, MMD is
/// the best F1 among them, and TMD is 0 for a single prediction. Without a
/// partial cloud UHD is measured from the ground truth instead.
pub fn evaluate_clouds(
    id: &str,
    category: &str,
    gt_raw: &PointCloud,
    partial: Option<&PointCloud>,
    preds: &[Option<PointCloud>],
    m: &MetricSettings,
    seed: u64,
) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(invalid("evaluation needs at least one prediction"));
    }
    let mut report = MetricReport {
        id: id.to_string(),
        category: category.to_string(),
        tau: m.tau,
        surface_points: m.surface_points,
        emd_points: m.emd_points,
        seed,
        ..Default::default()
    };
    let (partial, gt) = metrics::normalize_to_gt(partial.unwrap_or(gt_raw), gt_raw)?;
    let mut clouds = Vec::new();
    let (mut p, mut r, mut f, mut e, mut c) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut emd_rng = rng_from(sub_seed(seed, "emd"));
    for pred_raw in preds.iter().flatten() {
        let (pred, _) = metrics::normalize_to_gt(pred_raw, gt_raw)?;
        let pr = metrics::precision_recall_f1(&pred, &gt, m.tau)?;
        p += pr.precision;
        r += pr.recall;
        f += pr.f1;
        e += metrics::emd(&pred, &gt, m.emd_points, &mut emd_rng)?;
        c += metrics::chamfer(&pred, &gt)?;
        clouds.push(pred);
    }
    let k = preds.len() as f64;
    report.precision = Some(p / k);
    report.recall = Some(r / k);
    report.f1 = Some(f / k);
    if clouds.len() == preds.len() {
        report.emd = Some(e / k);
        report.chamfer = Some(c / k);
        if !partial.is_empty() {
            report.uhd = Some(metrics::uhd(&partial, &clouds)?);
        }
        report.mmd = Some(metrics::mmd(std::slice::from_ref(&gt), &clouds, m.tau)?.0);
        report.tmd = Some(if clouds.len() >= 2 { metrics::tmd(&clouds)? } else { 0.0 });
    }
    Ok(report)
}

/// A trainer set up from the run configuration; its seed is the `"train"`
/// stream of the master seed.
pub fn trainer(cfg: &RunConfig) -> Result<Trainer> {
    Trainer::new(cfg.train(), cfg.weights()?, cfg.render, cfg.schedule()?, cfg.grid, sub_seed(cfg.seed, "train"))
}
