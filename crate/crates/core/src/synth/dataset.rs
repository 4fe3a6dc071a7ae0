//! Multi-view datasets of procedural objects, in memory and on disk.
//!
//! Layout: `<root>/manifest.json` plus one directory per object with
//! `view_<k>.{pfm,pgm,json,ply}`, the surrogate monocular depth
//! `view_<k>.mono.pfm` and the ground truth `gt.grid.{json,bin}`.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{make_scene, mono_depth_surrogate, random_affine, render_observation, surface_voxels, Category, Scene, SensorNoise};
use crate::denoiser::train::{view_pairs, TrainingObject, ViewSample};
use crate::error::{format_err, invalid, Result};
use crate::grid::io::{read_grid, read_ply, write_grid, write_ply};
use crate::grid::{voxelize, GridSpec, OccupancyGrid};
use crate::render::io::{read_camera, read_pfm, read_pgm, write_camera, write_pfm, write_pgm};
use crate::render::{Camera, CameraView};
use crate::seed::{rng_from, sub_seed, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub objects: usize,
    pub categories: Vec<Category>,
    pub views: usize,
    pub image_size: usize,
    pub fov_deg: f64,
    /// Depth noise as a multiple of the voxel size.
    pub noise_sigma_voxels: f64,
    pub dropout: f64,
    pub points_per_view: usize,
    pub mono_blur_radius: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            objects: 8,
            categories: vec![Category::Chair],
            views: 8,
            image_size: 48,
            fov_deg: 40.0,
            noise_sigma_voxels: 0.5,
            dropout: 0.1,
            points_per_view: 2048,
            mono_blur_radius: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 || self.categories.is_empty() || self.image_size == 0 || self.points_per_view == 0 {
            return Err(invalid("data config needs >= 2 views, a category, and positive sizes"));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(invalid(format!("field of view must be in (0, 180), got {}", self.fov_deg)));
        }
        self.noise(1.0).validate()
    }

    pub fn noise(&self, voxel_size: f64) -> SensorNoise {
        SensorNoise { sigma: self.noise_sigma_voxels * voxel_size, dropout: self.dropout }
    }
}

/// One simulated object with everything training and evaluation need.
#[derive(Clone, Debug)]
pub struct GeneratedObject {
    pub id: String,
    pub category: Category,
    pub seed: u64,
    pub scene: Scene,
    pub gt: OccupancyGrid,
    pub training: TrainingObject,
    /// `(a, b)` of each view's monocular-depth surrogate.
    pub mono_affine: Vec<(f64, f64)>,
}

/// Cameras on a jittered ring around the origin, looking at it.
pub fn camera_ring(n: usize, radius: f64, size: usize, fov_deg: f64, rng: &mut Rng) -> Result<Vec<Camera>> {
    let f = 0.5 * size as f64 / (0.5 * fov_deg.to_radians()).tan();
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let step = std::f64::consts::TAU / n as f64;
    (0..n)
        .map(|k| {
            let az = phase + step * (k as f64 + rng.random_range(-0.3..0.3));
            let el = rng.random_range(-45f64..45.0).to_radians();
            let eye = [radius * el.cos() * az.cos(), radius * el.sin(), radius * el.cos() * az.sin()];
            Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], f, f, size, size)
        })
        .collect()
}

const MAX_RING_ATTEMPTS: usize = 16;

/// Simulates one object. The camera ring is redrawn until at least one view
/// has an eligible second view under `ratio`.
pub fn generate_object(
    id: &str,
    category: Category,
    seed: u64,
    cfg: &DataConfig,
    spec: &GridSpec,
    voxel_threshold: usize,
    ratio: f64,
) -> Result<GeneratedObject> {
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let scene = make_scene(category, &mut rng);
    let gt = surface_voxels(&scene, spec)?;
    let extent = occupied_extent(&gt).max(spec.voxel_size);
    let noise = cfg.noise(spec.voxel_size);
    for _ in 0..MAX_RING_ATTEMPTS {
        let cams = camera_ring(cfg.views, 2.5 * extent, cfg.image_size, cfg.fov_deg, &mut rng)?;
        let mut views = Vec::with_capacity(cams.len());
        let mut affine = Vec::with_capacity(cams.len());
        for cam in &cams {
            let obs = render_observation(&scene, cam, noise, &mut rng)?;
            let cloud = obs.cloud.subsample(cfg.points_per_view, &mut rng);
            let (a, b) = random_affine(&mut rng);
            let mono_depth = mono_depth_surrogate(&obs.clean_depth, cfg.mono_blur_radius, a, b)?;
            affine.push((a, b));
            views.push(ViewSample { grid: voxelize(&cloud, spec, voxel_threshold)?, cloud, view: obs.view, mono_depth });
        }
        let training = TrainingObject { id: id.to_string(), views };
        if !view_pairs(&training, ratio)?.is_empty() {
            return Ok(GeneratedObject { id: id.to_string(), category, seed, scene, gt, training, mono_affine: affine });
        }
    }
    Err(invalid(format!("object `{id}`: no camera ring produced an eligible view pair")))
}

/// Longest edge of the box around the occupied voxels.
pub fn occupied_extent(g: &OccupancyGrid) -> f64 {
    let spec = g.spec();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (i, &v) in g.values().iter().enumerate() {
        if v >= 0.5 {
            let c = spec.center(spec.coords(i));
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    (0..3).map(|a| hi[a] - lo[a] + spec.voxel_size).fold(0.0, f64::max)
}

pub fn object_id(k: usize) -> String {
    format!("obj_{k:04}")
}

/// Objects `0..cfg.objects`, categories cycling through `cfg.categories`,
/// each with its own stream derived from `master`.
pub fn generate_dataset(
    cfg: &DataConfig,
    spec: &GridSpec,
    voxel_threshold: usize,
    ratio: f64,
    master: u64,
) -> Result<Vec<GeneratedObject>> {
    (0..cfg.objects)
        .map(|k| {
            let id = object_id(k);
            let cat = cfg.categories[k % cfg.categories.len()];
            generate_object(&id, cat, sub_seed(master, &id), cfg, spec, voxel_threshold, ratio)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub grid: GridSpec,
    pub voxel_threshold: usize,
    pub second_view_ratio: f64,
    pub noise: SensorNoise,
    pub data: DataConfig,
    pub objects: Vec<ManifestObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObject {
    pub id: String,
    pub category: Category,
    pub seed: u64,
    pub views: usize,
    pub mono_affine: Vec<(f64, f64)>,
    pub scene: Scene,
}

pub fn write_dataset(root: impl AsRef<Path>, manifest_seed: u64, cfg: &DataConfig, spec: &GridSpec, voxel_threshold: usize, ratio: f64, objects: &[GeneratedObject]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(objects.len());
    for obj in objects {
        let dir = root.join(&obj.id);
        fs::create_dir_all(&dir)?;
        for (k, v) in obj.training.views.iter().enumerate() {
            write_pfm(dir.join(format!("view_{k}.pfm")), &v.view.depth)?;
            write_pfm(dir.join(format!("view_{k}.mono.pfm")), &v.mono_depth)?;
            write_pgm(dir.join(format!("view_{k}.pgm")), &v.view.silhouette)?;
            write_camera(dir.join(format!("view_{k}.json")), &v.view.camera)?;
            write_ply(dir.join(format!("view_{k}.ply")), &v.cloud)?;
        }
        write_grid(dir.join("gt"), &obj.gt)?;
        entries.push(ManifestObject {
            id: obj.id.clone(),
            category: obj.category,
            seed: obj.seed,
            views: obj.training.views.len(),
            mono_affine: obj.mono_affine.clone(),
            scene: obj.scene.clone(),
        });
    }
    let manifest = Manifest {
        seed: manifest_seed,
        grid: *spec,
        voxel_threshold,
        second_view_ratio: ratio,
        noise: cfg.noise(spec.voxel_size),
        data: cfg.clone(),
        objects: entries,
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// An object read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedObject {
    pub id: String,
    pub category: Category,
    pub gt: OccupancyGrid,
    pub training: TrainingObject,
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(root.as_ref().join("manifest.json"))?)?)
}

/// Reads every object listed in the manifest. View grids are re-voxelized
/// from the stored clouds with the manifest's grid and threshold.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<(Manifest, Vec<LoadedObject>)> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let mut out = Vec::with_capacity(manifest.objects.len());
    for entry in &manifest.objects {
        let dir = root.join(&entry.id);
        let mut views = Vec::with_capacity(entry.views);
        for k in 0..entry.views {
            let camera = read_camera(dir.join(format!("view_{k}.json")))?;
            let silhouette = read_pgm(dir.join(format!("view_{k}.pgm")))?;
            let depth = read_pfm(dir.join(format!("view_{k}.pfm")))?;
            let mono_depth = read_pfm(dir.join(format!("view_{k}.mono.pfm")))?;
            let cloud = read_ply(dir.join(format!("view_{k}.ply")))?;
            let grid = voxelize(&cloud, &manifest.grid, manifest.voxel_threshold)?;
            views.push(ViewSample { cloud, grid, view: CameraView::new(camera, silhouette, depth)?, mono_depth });
        }
        let gt = read_grid(dir.join("gt"))?;
        if *gt.spec() != manifest.grid {
            return Err(format_err("dataset", format!("object `{}` ground truth does not match the manifest grid", entry.id)));
        }
        out.push(LoadedObject {
            id: entry.id.clone(),
            category: entry.category,
            gt,
            training: TrainingObject { id: entry.id.clone(), views },
        });
    }
    Ok((manifest, out))
}
