//! Procedural objects and a simulated depth camera.

pub mod dataset;
mod scene;

pub use scene::{make_scene, Category, Primitive, Scene};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geom::{self, Vec3};
use crate::grid::{GridSpec, OccupancyGrid, PointCloud};
use crate::render::{generate_rays, ray_box, Camera, CameraView, DepthMap, Image};
use crate::seed::Rng;

/// Surface hit tolerance of the sphere tracer.
pub const TRACE_EPS: f64 = 1e-6;
const TRACE_MAX_STEPS: usize = 1024;
/// Tracing is clipped to this cube around the origin.
const SCENE_HALF_EXTENT: f64 = 0.5;

/// Sphere-traces one ray; `None` on a miss or when the tracer does not
/// converge.
pub fn sphere_trace(scene: &Scene, origin: Vec3, dir: Vec3) -> Option<f64> {
    let (t0, t1) = ray_box(origin, dir, [-SCENE_HALF_EXTENT; 3], [SCENE_HALF_EXTENT; 3])?;
    let mut t = t0;
    for _ in 0..TRACE_MAX_STEPS {
        let d = scene.sdf(geom::add(origin, geom::scale(dir, t)));
        if d < TRACE_EPS {
            return Some(t);
        }
        t += d;
        if t > t1 {
            return None;
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorNoise {
    /// Standard deviation of additive depth noise in meters.
    pub sigma: f64,
    /// Probability that a hit pixel loses its depth.
    pub dropout: f64,
}

impl SensorNoise {
    pub const NONE: SensorNoise = SensorNoise { sigma: 0.0, dropout: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(0.0..=1.0).contains(&self.dropout) {
            return Err(invalid(format!("bad sensor noise {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Observation {
    pub view: CameraView,
    /// Noise-free along-ray depth at hit pixels.
    pub clean_depth: DepthMap,
    pub cloud: PointCloud,
    pub noise: SensorNoise,
}

/// Simulated depth sensor. Depth is the distance along the pixel ray.
pub fn render_observation(scene: &Scene, cam: &Camera, noise: SensorNoise, rng: &mut Rng) -> Result<Observation> {
    noise.validate()?;
    let n = cam.pixel_count();
    let normal = Normal::new(0.0, noise.sigma.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let mut sil = vec![0.0; n];
    let mut clean = vec![0.0; n];
    let mut clean_valid = vec![false; n];
    let mut depth = vec![0.0; n];
    let mut valid = vec![false; n];
    for (i, ray) in generate_rays(cam).iter().enumerate() {
        let Some(t) = sphere_trace(scene, ray.origin, ray.direction) else {
            continue;
        };
        sil[i] = 1.0;
        clean[i] = t;
        clean_valid[i] = true;
        // draws happen for every hit so the noise stream does not depend on dropout
        let eps = if noise.sigma > 0.0 { normal.sample(rng) } else { 0.0 };
        let dropped = rng.random::<f64>() < noise.dropout;
        if !dropped {
            depth[i] = t + eps;
            valid[i] = depth[i] > 0.0;
        }
    }
    let silhouette = Image::new(cam.width, cam.height, sil)?;
    let depth = DepthMap::new(Image::new(cam.width, cam.height, depth)?, valid)?;
    let clean_depth = DepthMap::new(Image::new(cam.width, cam.height, clean)?, clean_valid)?;
    let cloud = backproject(&depth, &silhouette, cam)?;
    Ok(Observation { view: CameraView::new(cam.clone(), silhouette, depth)?, clean_depth, cloud, noise })
}

/// World-frame points `origin + D(u, v) * direction(u, v)` for every pixel
/// inside the silhouette with valid depth.
pub fn backproject(depth: &DepthMap, sil: &Image, cam: &Camera) -> Result<PointCloud> {
    if depth.image.len() != cam.pixel_count() || sil.len() != cam.pixel_count() {
        return Err(invalid("backproject: image sizes must match the camera"));
    }
    let mut pts = Vec::new();
    for (i, ray) in generate_rays(cam).iter().enumerate() {
        if sil.data[i] >= 0.5 && depth.valid[i] {
            pts.push(geom::add(ray.origin, geom::scale(ray.direction, depth.image.data[i])));
        }
    }
    PointCloud::world(pts)
}

/// Smooth, affinely distorted stand-in for a monocular depth prediction:
/// `a * blur(D) + b` on valid pixels, where `blur` averages the valid pixels
/// of a `(2r+1)^2` window.
pub fn mono_depth_surrogate(depth: &DepthMap, radius: usize, a: f64, b: f64) -> Result<DepthMap> {
    if a == 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(invalid(format!("affine distortion needs finite a != 0, got ({a}, {b})")));
    }
    let (w, h) = (depth.image.width, depth.image.height);
    let r = radius as isize;
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !depth.valid[i] {
                continue;
            }
            let (mut sum, mut cnt) = (0.0, 0.0);
            for dv in -r..=r {
                for du in -r..=r {
                    let (uu, vv) = (u as isize + du, v as isize + dv);
                    if uu < 0 || vv < 0 || uu >= w as isize || vv >= h as isize {
                        continue;
                    }
                    let j = vv as usize * w + uu as usize;
                    if depth.valid[j] {
                        sum += depth.image.data[j];
                        cnt += 1.0;
                    }
                }
            }
            out[i] = a * sum / cnt + b;
        }
    }
    DepthMap::new(Image::new(w, h, out)?, depth.valid.clone())
}

/// Random scale in `[0.5, 2]` and shift in `[-0.5, 0.5]` for the surrogate.
pub fn random_affine(rng: &mut Rng) -> (f64, f64) {
    (rng.random_range(0.5..=2.0), rng.random_range(-0.5..=0.5))
}

/// Sum of absolute differences between horizontally and vertically adjacent
/// valid pixels.
pub fn total_variation(d: &DepthMap) -> f64 {
    let (w, h) = (d.image.width, d.image.height);
    let mut tv = 0.0;
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !d.valid[i] {
                continue;
            }
            if u + 1 < w && d.valid[i + 1] {
                tv += (d.image.data[i + 1] - d.image.data[i]).abs();
            }
            if v + 1 < h && d.valid[i + w] {
                tv += (d.image.data[i + w] - d.image.data[i]).abs();
            }
        }
    }
    tv
}

/// Removes the `n` points furthest from `viewpoint`; among equal distances
/// the later points go first.
pub fn crop_furthest(pc: &PointCloud, viewpoint: Vec3, n: usize) -> Result<PointCloud> {
    if n > pc.len() {
        return Err(invalid(format!("cannot remove {n} of {} points", pc.len())));
    }
    let mut order: Vec<usize> = (0..pc.len()).collect();
    let d: Vec<f64> = pc.points().iter().map(|p| geom::dist2(*p, viewpoint)).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(j.cmp(&i)));
    let mut drop = vec![false; pc.len()];
    for &i in &order[..n] {
        drop[i] = true;
    }
    let kept = pc.points().iter().zip(&drop).filter(|(_, &x)| !x).map(|(p, _)| *p).collect();
    PointCloud::new(kept, pc.frame())
}

/// Voxels crossed by the scene surface: the sdf changes sign on a 4^3
/// lattice spanning the voxel (corners included).
pub fn surface_voxels(scene: &Scene, spec: &GridSpec) -> Result<OccupancyGrid> {
    let half_diag = 0.5 * spec.voxel_size * 3f64.sqrt();
    let mut values = vec![0.0; spec.len()];
    for (idx, v) in values.iter_mut().enumerate() {
        let c = spec.center(spec.coords(idx));
        if scene.sdf(c).abs() > half_diag {
            continue;
        }
        let (mut neg, mut pos) = (false, false);
        'scan: for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let off = |s: usize| (s as f64 / 3.0 - 0.5) * spec.voxel_size;
                    let s = scene.sdf([c[0] + off(i), c[1] + off(j), c[2] + off(k)]);
                    neg |= s <= 0.0;
                    pos |= s > 0.0;
                    if neg && pos {
                        break 'scan;
                    }
                }
            }
        }
        if neg && pos {
            *v = 1.0;
        }
    }
    OccupancyGrid::from_values(*spec, values)
}
