//! Two-phase training of [`TinyDenoiser`] on view pairs.
//!
//! Every epoch each object contributes one example: a random input view and
//! a random second view that grows the occupied set by at least `ratio`.
//! Their merged clouds, voxelized, form the pseudo ground truth. Phase 1
//! minimizes the masked BCE; phase 2 minimizes
//! `l1 * BCE + l2 * L_S + l3 * L_D` over all voxels, rendering the
//! prediction into the two views of the pair.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamHyper};
use super::{Arch, Checkpoint, Gradients, TinyDenoiser};
use crate::diffusion::{masked_bce_loss, noise_free_region, normal_field, LossWeights, Phase, VarianceSchedule};
use crate::error::{invalid, Error, Result};
use crate::grid::{condition_split, eligible_second_views, merge_pseudo_gt, select_second_view, voxelize, GridSpec, OccupancyGrid, PointCloud};
use crate::render::{
    depth_loss_grad, render_backward, render_view, silhouette_loss_grad, CameraView, DepthMap, Image, RenderSettings, RenderedDepth,
};
use crate::seed::{rng_from, Rng};

/// One observation of an object.
#[derive(Clone, Debug)]
pub struct ViewSample {
    /// Back-projected sensor points, world frame.
    pub cloud: PointCloud,
    /// `cloud` voxelized with the training threshold.
    pub grid: OccupancyGrid,
    /// Camera with the measured silhouette and sensor depth.
    pub view: CameraView,
    /// Smooth depth with unknown scale and shift, used by the depth loss.
    pub mono_depth: DepthMap,
}

#[derive(Clone, Debug)]
pub struct TrainingObject {
    pub id: String,
    pub views: Vec<ViewSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub second_view_ratio: f64,
    pub voxel_threshold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 300,
            phase2_epochs: 50,
            batch_size: 4,
            lr: 1e-3,
            hidden: vec![8, 8],
            embed_dim: 8,
            second_view_ratio: 0.3,
            voxel_threshold: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        if self.voxel_threshold == 0 {
            return Err(invalid("voxel threshold must be >= 1"));
        }
        if !(self.second_view_ratio >= 0.0) {
            return Err(invalid("second-view ratio must be >= 0"));
        }
        Ok(())
    }
}

/// Mean loss of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub phase: u8,
    pub loss: f64,
}

/// Everything that enters one training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: OccupancyGrid,
    pub pseudo_gt: OccupancyGrid,
    /// Indices of the two views in the object's view list.
    pub pair: (usize, usize),
}

/// Views of `obj` that have at least one eligible second view, with those
/// partners.
pub fn view_pairs(obj: &TrainingObject, ratio: f64) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for i in 0..obj.views.len() {
        let others: Vec<usize> = (0..obj.views.len()).filter(|&j| j != i).collect();
        let grids: Vec<OccupancyGrid> = others.iter().map(|&j| obj.views[j].grid.clone()).collect();
        let ok = eligible_second_views(&obj.views[i].grid, &grids, ratio)?;
        if !ok.is_empty() {
            out.push((i, others));
        }
    }
    Ok(out)
}

/// Draws an input view and a second view for `obj` and builds the example.
pub fn draw_example(obj: &TrainingObject, spec: &GridSpec, cfg: &TrainConfig, rng: &mut Rng) -> Result<Example> {
    let pairs = view_pairs(obj, cfg.second_view_ratio)?;
    if pairs.is_empty() {
        return Err(invalid(format!("object `{}` has no view pair satisfying the second-view rule", obj.id)));
    }
    let (i, others) = &pairs[rng.random_range(0..pairs.len())];
    let grids: Vec<OccupancyGrid> = others.iter().map(|&j| obj.views[j].grid.clone()).collect();
    let pick = select_second_view(&obj.views[*i].grid, &grids, cfg.second_view_ratio, rng)?
        .ok_or_else(|| invalid("second-view selection failed"))?;
    let j = others[pick];
    let merged = merge_pseudo_gt(&obj.views[*i].cloud, &obj.views[j].cloud)?;
    let pseudo_gt = voxelize(&merged, spec, cfg.voxel_threshold)?;
    let input = voxelize(&obj.views[*i].cloud, spec, cfg.voxel_threshold)?;
    Ok(Example { input, pseudo_gt, pair: (*i, j) })
}

/// Loss and output gradient of one example at a given step and noise.
pub struct ExampleLoss {
    pub loss: f64,
    pub grads: Gradients,
}

/// Forward and backward pass for one example.
#[allow(clippy::too_many_arguments)]
pub fn example_loss(
    model: &TinyDenoiser,
    obj: &TrainingObject,
    ex: &Example,
    phase: Phase,
    weights: &LossWeights,
    render: &RenderSettings,
    sched: &VarianceSchedule,
    t: usize,
    noise: &[f64],
) -> Result<ExampleLoss> {
    let mask = condition_split(&ex.input)?;
    let x_t = noise_free_region(&ex.pseudo_gt, &mask, t, noise, sched)?;
    let cache = model.forward(&x_t, &mask, t)?;
    let pred = OccupancyGrid::from_values(*ex.pseudo_gt.spec(), cache.probs.clone())?;
    let (bce, bce_grad) = masked_bce_loss(&pred, &ex.pseudo_gt, &mask, phase)?;
    let lambda1 = if phase == Phase::Masked { 1.0 } else { weights.lambda1 };
    let mut loss = lambda1 * bce;
    let mut d_probs: Vec<f64> = bce_grad.iter().map(|g| lambda1 * g).collect();
    if phase == Phase::Full && (weights.lambda2 > 0.0 || weights.lambda3 > 0.0) {
        let views = [&obj.views[ex.pair.0], &obj.views[ex.pair.1]];
        let rendered: Vec<_> = views
            .iter()
            .map(|v| render_view(&pred, &v.view.camera, render))
            .collect::<Result<_>>()?;
        let sil: Vec<Image> = rendered.iter().map(|r| r.silhouette.clone()).collect();
        let measured_sil: Vec<Image> = views.iter().map(|v| v.view.silhouette.clone()).collect();
        let (ls, gs) = silhouette_loss_grad(&sil, &measured_sil)?;
        let rd: Vec<RenderedDepth<'_>> = rendered.iter().map(|r| RenderedDepth { depth: &r.depth, weight: &r.weight }).collect();
        let mono: Vec<DepthMap> = views.iter().map(|v| v.mono_depth.clone()).collect();
        let (ld, gd) = depth_loss_grad(&rd, &mono, render.depth_min_weight)?;
        loss += weights.lambda2 * ls + weights.lambda3 * ld.loss;
        for (k, v) in views.iter().enumerate() {
            let scale = |img: &Image, s: f64| Image { data: img.data.iter().map(|x| x * s).collect(), ..img.clone() };
            render_backward(
                &pred,
                &v.view.camera,
                render,
                &scale(&gs[k], weights.lambda2),
                &scale(&gd[k], weights.lambda3),
                &mut d_probs,
            )?;
        }
    }
    let grads = model.backward(&cache, &d_probs)?;
    Ok(ExampleLoss { loss, grads })
}

/// Two-phase optimizer loop with divergence recovery.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: TinyDenoiser,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub render: RenderSettings,
    pub sched: VarianceSchedule,
    pub spec: GridSpec,
    pub seed: u64,
    pub curve: Vec<EpochLoss>,
    rng: Rng,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        weights: LossWeights,
        render: RenderSettings,
        sched: VarianceSchedule,
        spec: GridSpec,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let arch = Arch { dims: spec.dims, hidden: cfg.hidden.clone(), kernel: 3, embed_dim: cfg.embed_dim, steps: sched.steps() };
        let model = TinyDenoiser::new(arch, &mut rng)?;
        let adam = Adam::new(model.params(), AdamHyper::with_lr(cfg.lr))?;
        Ok(Self { model, adam, cfg, weights, render, sched, spec, seed, curve: Vec::new(), rng })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), adam: self.adam.clone(), seed: self.seed }
    }

    /// Runs one epoch over `objects` and returns its mean loss.
    pub fn epoch(&mut self, objects: &[TrainingObject], phase: Phase) -> Result<f64> {
        if objects.is_empty() {
            return Err(invalid("training needs at least one object"));
        }
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut acc = Gradients::zeros_like(&self.model);
            for &o in batch {
                let ex = draw_example(&objects[o], &self.spec, &self.cfg, &mut self.rng)?;
                let t = self.rng.random_range(1..=self.sched.steps());
                let noise = normal_field(self.spec.len(), &mut self.rng);
                let el = example_loss(&self.model, &objects[o], &ex, phase, &self.weights, &self.render, &self.sched, t, &noise)?;
                if !el.loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss on object `{}` is {}", objects[o].id, el.loss)));
                }
                total += el.loss;
                acc.add_assign(&el.grads);
            }
            acc.scale(1.0 / batch.len() as f64);
            self.adam.step(self.model.params_mut(), &acc)?;
        }
        Ok(total / objects.len() as f64)
    }

    /// Runs both phases. On a non-finite loss or gradient the model and
    /// optimizer are restored to the end of the last finished epoch and
    /// [`Error::Diverged`] is returned.
    pub fn run(&mut self, objects: &[TrainingObject], mut on_epoch: impl FnMut(&EpochLoss)) -> Result<()> {
        let phases = std::iter::repeat_n((1u8, Phase::Masked), self.cfg.phase1_epochs)
            .chain(std::iter::repeat_n((2u8, Phase::Full), self.cfg.phase2_epochs));
        for (phase_id, phase) in phases {
            let epoch = self.curve.len();
            let snapshot = (self.model.clone(), self.adam.clone());
            match self.epoch(objects, phase) {
                Ok(loss) => {
                    let rec = EpochLoss { epoch, phase: phase_id, loss };
                    on_epoch(&rec);
                    self.curve.push(rec);
                }
                Err(Error::NonFinite(reason)) => {
                    (self.model, self.adam) = snapshot;
                    return Err(Error::Diverged { epoch, reason });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}
