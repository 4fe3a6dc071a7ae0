//! Differentiable occupancy ray marching and the geometric-prior losses.
//!
//! Each pixel ray is clipped to the voxel-center lattice box and sampled at
//! `M` uniformly spaced distances `t_i`. Occupancies `o_i` come from
//! trilinear interpolation. Two transmittance rules are available:
//!
//! * [`RenderMode::Compositing`]: `T_i = prod_{j<i} (1 - o_j)`, so the
//!   silhouette `S = sum T_i o_i` stays in `[0, 1]`.
//! * [`RenderMode::Exponential`]: `T_i = exp(-sum_{j<i} o_j delta_j)` with the same
//!   weights `o_i`. `S` is not bounded by 1 under this rule.
//!
//! Depth is `D = sum T_i o_i t_i`. Gradients with respect to the grid values
//! are computed in closed form per ray with suffix accumulations.

pub mod camera;
pub mod io;

pub use camera::{generate_rays, Camera, CameraView, DepthMap, Image, Ray};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::geom::{self, Vec3};
use crate::grid::{GridSpec, OccupancyGrid};

/// Transmittance rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    Exponential,
    #[default]
    Compositing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    /// Samples per ray, `M >= 2`.
    pub samples: usize,
    pub mode: RenderMode,
    /// Minimum rendered weight for a pixel to enter the depth loss.
    pub depth_min_weight: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { samples: 64, mode: RenderMode::Compositing, depth_min_weight: 0.5 }
    }
}

/// Trilinear corner indices and weights of `p`, or `None` outside the
/// voxel-center lattice.
pub fn trilinear_weights(spec: &GridSpec, p: Vec3) -> Option<[(usize, f64); 8]> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let g = (p[a] - spec.origin[a]) / spec.voxel_size - 0.5;
        let n = spec.dims[a];
        if !(g >= 0.0 && g <= (n - 1) as f64) {
            return None;
        }
        if n == 1 {
            continue;
        }
        let i0 = (g.floor() as usize).min(n - 2);
        lo[a] = i0;
        hi[a] = i0 + 1;
        frac[a] = g - i0 as f64;
    }
    let mut out = [(0usize, 0.0); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let pick = |a: usize| if c >> a & 1 == 1 { (hi[a], frac[a]) } else { (lo[a], 1.0 - frac[a]) };
        let (ix, wx) = pick(0);
        let (iy, wy) = pick(1);
        let (iz, wz) = pick(2);
        *slot = (spec.index(ix, iy, iz), wx * wy * wz);
    }
    Some(out)
}

/// Trilinear occupancy at `p`; zero outside the voxel-center lattice.
pub fn trilinear(grid: &OccupancyGrid, p: Vec3) -> f64 {
    match trilinear_weights(grid.spec(), p) {
        Some(ws) => ws.iter().map(|&(i, w)| w * grid.values()[i]).sum(),
        None => 0.0,
    }
}

/// Sample distances along a ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_vals: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    /// `m` uniform samples from `near` to `far` inclusive; every delta equals
    /// the sample spacing.
    pub fn uniform(origin: Vec3, direction: Vec3, near: f64, far: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(invalid(format!("need at least 2 samples per ray, got {m}")));
        }
        if !(near < far) {
            return Err(invalid(format!("near ({near}) must be < far ({far})")));
        }
        let step = (far - near) / (m - 1) as f64;
        let t_vals: Vec<f64> = (0..m).map(|i| near + step * i as f64).collect();
        Ok(Self { origin, direction, t_vals, deltas: vec![step; m] })
    }

    pub fn point(&self, i: usize) -> Vec3 {
        geom::add(self.origin, geom::scale(self.direction, self.t_vals[i]))
    }
}

/// Entry/exit distances of a ray through an axis-aligned box.
pub fn ray_box(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    let t0 = t0.max(0.0);
    (t0 < t1).then_some((t0, t1))
}

/// Samples for a ray clipped to the grid's voxel-center box, or `None`
/// when the ray misses it.
pub fn grid_ray_samples(spec: &GridSpec, ray: &Ray, m: usize) -> Result<Option<RaySamples>> {
    let (lo, hi) = spec.center_bounds();
    match ray_box(ray.origin, ray.direction, lo, hi) {
        Some((near, far)) => RaySamples::uniform(ray.origin, ray.direction, near, far, m).map(Some),
        None => Ok(None),
    }
}

/// Transmittance `T_i` for per-sample occupancies.
pub fn transmittance(occ: &[f64], deltas: &[f64], mode: RenderMode) -> Vec<f64> {
    let mut t = Vec::with_capacity(occ.len());
    let mut acc = 1.0;
    let mut optical = 0.0;
    for (o, d) in occ.iter().zip(deltas) {
        t.push(acc);
        match mode {
            RenderMode::Compositing => acc *= 1.0 - o,
            RenderMode::Exponential => {
                optical += o * d;
                acc = (-optical).exp();
            }
        }
    }
    t
}

/// Per-ray silhouette and depth.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayValue {
    pub silhouette: f64,
    pub depth: f64,
}

pub fn composite(occ: &[f64], samples: &RaySamples, mode: RenderMode) -> RayValue {
    let trans = transmittance(occ, &samples.deltas, mode);
    let mut out = RayValue::default();
    for ((o, t), tv) in occ.iter().zip(&trans).zip(&samples.t_vals) {
        out.silhouette += t * o;
        out.depth += t * o * tv;
    }
    if mode == RenderMode::Compositing {
        // same value as the sum, but cannot round above 1
        out.silhouette = 1.0 - occ.iter().fold(1.0, |acc, o| acc * (1.0 - o));
    }
    out
}

/// `dS/do_k` and `dD/do_k` for every sample.
pub fn composite_grad(occ: &[f64], samples: &RaySamples, mode: RenderMode) -> (Vec<f64>, Vec<f64>) {
    let m = occ.len();
    let trans = transmittance(occ, &samples.deltas, mode);
    let tv = &samples.t_vals;
    let mut ds = vec![0.0; m];
    let mut dd = vec![0.0; m];
    match mode {
        RenderMode::Compositing => {
            // a / r: silhouette and depth of the ray segment after k, restarted at T = 1
            let (mut a, mut r) = (0.0, 0.0);
            for k in (0..m).rev() {
                ds[k] = trans[k] * (1.0 - a);
                dd[k] = trans[k] * (tv[k] - r);
                a = occ[k] + (1.0 - occ[k]) * a;
                r = occ[k] * tv[k] + (1.0 - occ[k]) * r;
            }
        }
        RenderMode::Exponential => {
            let (mut sa, mut sr) = (0.0, 0.0);
            for k in (0..m).rev() {
                ds[k] = trans[k] - samples.deltas[k] * sa;
                dd[k] = trans[k] * tv[k] - samples.deltas[k] * sr;
                sa += trans[k] * occ[k];
                sr += trans[k] * occ[k] * tv[k];
            }
        }
    }
    (ds, dd)
}

/// Rendered silhouette, depth and accumulated weight images.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub silhouette: Image,
    pub depth: Image,
    pub weight: Image,
}

fn sample_occupancies(grid: &OccupancyGrid, s: &RaySamples) -> Vec<f64> {
    (0..s.t_vals.len()).map(|i| trilinear(grid, s.point(i))).collect()
}

/// Renders one camera. Rays that miss the grid get zero silhouette and depth.
pub fn render_view(grid: &OccupancyGrid, cam: &Camera, settings: &RenderSettings) -> Result<RenderedView> {
    let n = cam.pixel_count();
    let (mut sil, mut dep) = (vec![0.0; n], vec![0.0; n]);
    for (i, ray) in generate_rays(cam).iter().enumerate() {
        if let Some(s) = grid_ray_samples(grid.spec(), ray, settings.samples)? {
            let occ = sample_occupancies(grid, &s);
            let v = composite(&occ, &s, settings.mode);
            sil[i] = v.silhouette;
            dep[i] = v.depth;
        }
    }
    let silhouette = Image::new(cam.width, cam.height, sil)?;
    Ok(RenderedView {
        weight: silhouette.clone(),
        depth: Image::new(cam.width, cam.height, dep)?,
        silhouette,
    })
}

pub fn render_silhouette(grid: &OccupancyGrid, cam: &Camera, settings: &RenderSettings) -> Result<Image> {
    Ok(render_view(grid, cam, settings)?.silhouette)
}

/// `(depth, weight)` images.
pub fn render_depth(grid: &OccupancyGrid, cam: &Camera, settings: &RenderSettings) -> Result<(Image, Image)> {
    let v = render_view(grid, cam, settings)?;
    Ok((v.depth, v.weight))
}

/// Pulls per-pixel upstream gradients on the silhouette and depth images
/// back onto the grid values, accumulating into `grad`.
pub fn render_backward(
    grid: &OccupancyGrid,
    cam: &Camera,
    settings: &RenderSettings,
    d_silhouette: &Image,
    d_depth: &Image,
    grad: &mut [f64],
) -> Result<()> {
    let spec = grid.spec();
    if grad.len() != spec.len() {
        return Err(mismatch("gradient buffer does not match the grid"));
    }
    if d_silhouette.len() != cam.pixel_count() || d_depth.len() != cam.pixel_count() {
        return Err(mismatch("upstream gradients must match the camera resolution"));
    }
    for (i, ray) in generate_rays(cam).iter().enumerate() {
        let (gs, gd) = (d_silhouette.data[i], d_depth.data[i]);
        if gs == 0.0 && gd == 0.0 {
            continue;
        }
        let Some(s) = grid_ray_samples(spec, ray, settings.samples)? else {
            continue;
        };
        let occ = sample_occupancies(grid, &s);
        let (ds, dd) = composite_grad(&occ, &s, settings.mode);
        for k in 0..occ.len() {
            let g = gs * ds[k] + gd * dd[k];
            if g == 0.0 {
                continue;
            }
            if let Some(ws) = trilinear_weights(spec, s.point(k)) {
                for (idx, w) in ws {
                    grad[idx] += g * w;
                }
            }
        }
    }
    Ok(())
}

/// Mean over views of the per-pixel mean absolute silhouette error.
pub fn silhouette_loss(rendered: &[Image], measured: &[Image]) -> Result<f64> {
    Ok(silhouette_loss_grad(rendered, measured)?.0)
}

/// Silhouette loss and its (sub)gradient with respect to each rendered image.
pub fn silhouette_loss_grad(rendered: &[Image], measured: &[Image]) -> Result<(f64, Vec<Image>)> {
    if rendered.is_empty() || rendered.len() != measured.len() {
        return Err(mismatch(format!(
            "silhouette loss needs matching non-empty view lists, got {} and {}",
            rendered.len(),
            measured.len()
        )));
    }
    let v = rendered.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, m) in rendered.iter().zip(measured) {
        r.check_same_size(m, "silhouette loss")?;
        let n = r.len() as f64;
        let mut g = Vec::with_capacity(r.len());
        let mut sum = 0.0;
        for (a, b) in r.data.iter().zip(&m.data) {
            let d = a - b;
            sum += d.abs();
            g.push(if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / (n * v));
        }
        loss += sum / n;
        grads.push(Image::new(r.width, r.height, g)?);
    }
    Ok((loss / v, grads))
}

/// Least-squares scale and shift mapping rendered depth onto measured depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
    /// Set when the rendered depth is constant on the valid set.
    pub degenerate: bool,
}

struct AlignStats {
    n: f64,
    mean_hat: f64,
    mean_d: f64,
    sxx: f64,
}

fn align_stats(d_hat: &[f64], d: &[f64], valid: &[bool]) -> (AlignStats, DepthAlignment) {
    let mut n = 0.0;
    let (mut sh, mut sd) = (0.0, 0.0);
    for ((h, m), &ok) in d_hat.iter().zip(d).zip(valid) {
        if ok {
            n += 1.0;
            sh += h;
            sd += m;
        }
    }
    let (mean_hat, mean_d) = if n > 0.0 { (sh / n, sd / n) } else { (0.0, 0.0) };
    let (mut sxx, mut sxy, mut s2) = (0.0, 0.0, 0.0);
    for ((h, m), &ok) in d_hat.iter().zip(d).zip(valid) {
        if ok {
            let dx = h - mean_hat;
            sxx += dx * dx;
            sxy += dx * (m - mean_d);
            s2 += h * h;
        }
    }
    let stats = AlignStats { n, mean_hat, mean_d, sxx };
    if n < 2.0 || sxx <= 1e-12 * (1.0 + s2) {
        return (stats, DepthAlignment { scale: 0.0, shift: mean_d, degenerate: true });
    }
    let scale = sxy / sxx;
    (stats, DepthAlignment { scale, shift: mean_d - scale * mean_hat, degenerate: false })
}

/// Closed-form minimizer of `sum_valid (w * d_hat + q - d)^2`.
pub fn depth_align(d_hat: &Image, d: &Image, valid: &[bool]) -> Result<DepthAlignment> {
    d_hat.check_same_size(d, "depth_align")?;
    if valid.len() != d.len() {
        return Err(mismatch("depth_align: validity mask size"));
    }
    Ok(align_stats(&d_hat.data, &d.data, valid).1)
}

/// Scale-invariant depth loss over a list of views.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthLoss {
    pub loss: f64,
    /// Views with no valid pixel; they contribute 0.
    pub empty_views: usize,
    pub alignments: Vec<DepthAlignment>,
}

/// One rendered view's depth and accumulated weight.
#[derive(Clone, Copy, Debug)]
pub struct RenderedDepth<'a> {
    pub depth: &'a Image,
    pub weight: &'a Image,
}

pub fn depth_loss(rendered: &[RenderedDepth<'_>], measured: &[DepthMap], min_weight: f64) -> Result<DepthLoss> {
    Ok(depth_loss_grad(rendered, measured, min_weight)?.0)
}

/// Depth loss and its gradient with respect to each rendered depth image,
/// differentiating through the least-squares alignment.
pub fn depth_loss_grad(
    rendered: &[RenderedDepth<'_>],
    measured: &[DepthMap],
    min_weight: f64,
) -> Result<(DepthLoss, Vec<Image>)> {
    if rendered.is_empty() || rendered.len() != measured.len() {
        return Err(mismatch(format!(
            "depth loss needs matching non-empty view lists, got {} and {}",
            rendered.len(),
            measured.len()
        )));
    }
    let v = rendered.len() as f64;
    let mut total = 0.0;
    let mut empty_views = 0;
    let mut alignments = Vec::with_capacity(rendered.len());
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, m) in rendered.iter().zip(measured) {
        r.depth.check_same_size(&m.image, "depth loss")?;
        r.weight.check_same_size(&m.image, "depth loss")?;
        let valid: Vec<bool> = m
            .valid
            .iter()
            .zip(&r.weight.data)
            .map(|(&ok, &w)| ok && w >= min_weight)
            .collect();
        let (st, al) = align_stats(&r.depth.data, &m.image.data, &valid);
        alignments.push(al);
        let mut g = vec![0.0; r.depth.len()];
        if st.n == 0.0 {
            empty_views += 1;
            grads.push(Image::new(r.depth.width, r.depth.height, g)?);
            continue;
        }
        let c = 1.0 / (st.n * v);
        let mut sum = 0.0;
        let (mut s_sum, mut s_hat) = (0.0, 0.0);
        let signs: Vec<f64> = r
            .depth
            .data
            .iter()
            .zip(&m.image.data)
            .zip(&valid)
            .map(|((&h, &d), &ok)| {
                if !ok {
                    return 0.0;
                }
                let res = al.scale * h + al.shift - d;
                sum += res.abs();
                let s = if res > 0.0 { c } else if res < 0.0 { -c } else { 0.0 };
                s_sum += s;
                s_hat += s * h;
                s
            })
            .collect();
        total += sum / st.n;
        if !al.degenerate {
            let w = al.scale;
            let coupling = s_hat - s_sum * st.mean_hat;
            for (k, ((&h, &d), &ok)) in r.depth.data.iter().zip(&m.image.data).zip(&valid).enumerate() {
                if !ok {
                    continue;
                }
                let dw = ((d - st.mean_d) - 2.0 * w * (h - st.mean_hat)) / st.sxx;
                g[k] = signs[k] * w + coupling * dw - s_sum * w / st.n;
            }
        }
        grads.push(Image::new(r.depth.width, r.depth.height, g)?);
    }
    Ok((DepthLoss { loss: total / v, empty_views, alignments }, grads))
}
