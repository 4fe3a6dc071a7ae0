//! Point clouds, voxel grids and the condition/free split.
//!
//! Voxel `(ix, iy, iz)` lives at linear index `ix + nx * (iy + ny * iz)` and
//! covers the half-open box `origin + [i, i + 1) * voxel_size` on each axis.
//! Every other module (file format, renderer, marching cubes) shares this
//! convention.

pub mod io;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::geom::{self, Vec3};
use crate::seed::Rng;

/// Coordinate frame a point cloud is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    World,
    Camera,
}

/// Ordered list of 3D points in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: Frame) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !geom::is_finite(*p)) {
            return Err(Error::NonFinite(format!("point {i} = {:?}", points[i])));
        }
        Ok(Self { points, frame })
    }

    pub fn world(points: Vec<Vec3>) -> Result<Self> {
        Self::new(points, Frame::World)
    }

    pub fn empty(frame: Frame) -> Self {
        Self { points: Vec::new(), frame }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`, `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                [lo[0].min(p[0]), lo[1].min(p[1]), lo[2].min(p[2])],
                [hi[0].max(p[0]), hi[1].max(p[1]), hi[2].max(p[2])],
            )
        }))
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold([0.0; 3], |acc, p| geom::add(acc, *p));
        Some(geom::scale(sum, 1.0 / self.points.len() as f64))
    }

    /// Applies `f` to every point, keeping the frame label.
    pub fn map(&self, f: impl Fn(Vec3) -> Vec3) -> Result<Self> {
        Self::new(self.points.iter().map(|p| f(*p)).collect(), self.frame)
    }

    /// Seeded uniform subsample without replacement; returns a clone when
    /// the cloud already has at most `n` points.
    pub fn subsample(&self, n: usize, rng: &mut Rng) -> Self {
        if self.points.len() <= n {
            return self.clone();
        }
        let idx = rand::seq::index::sample(rng, self.points.len(), n);
        let mut idx = idx.into_vec();
        idx.sort_unstable();
        Self {
            points: idx.into_iter().map(|i| self.points[i]).collect(),
            frame: self.frame,
        }
    }
}

/// Placement of a dense voxel grid in world space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// World coordinate of the min corner of voxel (0, 0, 0).
    pub origin: Vec3,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: Vec3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(invalid(format!("voxel_size must be > 0, got {voxel_size}")));
        }
        if !geom::is_finite(origin) {
            return Err(Error::NonFinite(format!("grid origin {origin:?}")));
        }
        Ok(Self { dims, voxel_size, origin })
    }

    /// Grid of `dims` voxels whose geometric center is `center`.
    pub fn centered(center: Vec3, dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        let origin = [
            center[0] - 0.5 * dims[0] as f64 * voxel_size,
            center[1] - 0.5 * dims[1] as f64 * voxel_size,
            center[2] - 0.5 * dims[2] as f64 * voxel_size,
        ];
        Self::new(dims, voxel_size, origin)
    }

    /// Grid anchored on the bounding-box center of `pc`.
    pub fn anchored_on(pc: &PointCloud, dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        let (lo, hi) = pc
            .bounds()
            .ok_or_else(|| invalid("cannot anchor a grid on an empty cloud"))?;
        Self::centered(geom::scale(geom::add(lo, hi), 0.5), dims, voxel_size)
    }

    /// 16³ grid spanning the unit cube centered at the origin.
    pub fn desk() -> Self {
        Self::centered([0.0; 3], [16; 3], 1.0 / 16.0).expect("valid constant spec")
    }

    /// 64³ grid of 2.5 cm voxels centered at the origin.
    pub fn full_scale() -> Self {
        Self::centered([0.0; 3], [64; 3], 0.025).expect("valid constant spec")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Cell containing `p` (floor quantization), or `None` outside the grid.
    pub fn cell_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            cell[a] = f as usize;
        }
        Some(cell)
    }

    pub fn center(&self, cell: [usize; 3]) -> Vec3 {
        [
            self.origin[0] + (cell[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (cell[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (cell[2] as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Bounds of the full grid volume.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let hi = [
            self.origin[0] + self.dims[0] as f64 * self.voxel_size,
            self.origin[1] + self.dims[1] as f64 * self.voxel_size,
            self.origin[2] + self.dims[2] as f64 * self.voxel_size,
        ];
        (self.origin, hi)
    }

    /// Bounds of the voxel-center lattice (the trilinear support).
    pub fn center_bounds(&self) -> (Vec3, Vec3) {
        let h = 0.5 * self.voxel_size;
        let (lo, hi) = self.bounds();
        ([lo[0] + h, lo[1] + h, lo[2] + h], [hi[0] - h, hi[1] - h, hi[2] - h])
    }

    pub(crate) fn check_same(&self, other: &GridSpec, what: &str) -> Result<()> {
        if self != other {
            return Err(mismatch(format!("{what}: grid spec {other:?} differs from {self:?}")));
        }
        Ok(())
    }
}

/// Dense scalar field over a [`GridSpec`].
///
/// Occupancy grids hold values in `[0, 1]`. Noised grids (the diffusion
/// state `x_t`) are real-valued; the `noised` flag disables the range check.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    spec: GridSpec,
    values: Vec<f64>,
    noised: bool,
}

impl OccupancyGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self { spec, values: vec![0.0; spec.len()], noised: false }
    }

    pub fn filled(spec: GridSpec, value: f64) -> Result<Self> {
        Self::from_values(spec, vec![value; spec.len()])
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        Self::build(spec, values, false)
    }

    pub fn noised(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        Self::build(spec, values, true)
    }

    fn build(spec: GridSpec, values: Vec<f64>, noised: bool) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(mismatch(format!(
                "grid expects {} values, got {}",
                spec.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid value at index {i}")));
        }
        if !noised {
            if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(invalid(format!(
                    "occupancy value {} at index {i} outside [0, 1]",
                    values[i]
                )));
            }
        }
        Ok(Self { spec, values, noised })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_noised(&self) -> bool {
        self.noised
    }

    pub fn get(&self, cell: [usize; 3]) -> f64 {
        self.values[self.spec.index(cell[0], cell[1], cell[2])]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn occupied_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Thresholds into a binary grid: `v >= threshold` becomes 1.
    pub fn binarize(&self, threshold: f64) -> OccupancyGrid {
        OccupancyGrid {
            spec: self.spec,
            values: self
                .values
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
            noised: false,
        }
    }

    /// Voxelwise maximum of two grids on the same spec.
    pub fn union(&self, other: &OccupancyGrid) -> Result<OccupancyGrid> {
        self.spec.check_same(&other.spec, "union")?;
        Ok(OccupancyGrid {
            spec: self.spec,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a.max(*b)).collect(),
            noised: self.noised || other.noised,
        })
    }

    /// Intersection over union of the occupied (>= 0.5) sets.
    pub fn iou(&self, other: &OccupancyGrid) -> Result<f64> {
        self.spec.check_same(&other.spec, "iou")?;
        let (mut inter, mut uni) = (0usize, 0usize);
        for (a, b) in self.values.iter().zip(&other.values) {
            let (a, b) = (*a >= 0.5, *b >= 0.5);
            inter += (a && b) as usize;
            uni += (a || b) as usize;
        }
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }
}

/// One flag per voxel: `true` marks the conditioned (observed) region.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMask {
    spec: GridSpec,
    bits: Vec<bool>,
}

impl ConditionMask {
    pub fn new(spec: GridSpec, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != spec.len() {
            return Err(mismatch(format!(
                "mask expects {} bits, got {}",
                spec.len(),
                bits.len()
            )));
        }
        Ok(Self { spec, bits })
    }

    pub fn empty(spec: GridSpec) -> Self {
        Self { spec, bits: vec![false; spec.len()] }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn free_count(&self) -> usize {
        self.bits.len() - self.count()
    }
}

/// Marks a voxel occupied when at least `k` points quantize into it.
pub fn voxelize(pc: &PointCloud, spec: &GridSpec, k: usize) -> Result<OccupancyGrid> {
    if k == 0 {
        return Err(invalid("voxelization threshold K must be >= 1"));
    }
    if pc.frame() != Frame::World {
        return Err(invalid("voxelize expects a world-frame point cloud"));
    }
    let mut counts = vec![0usize; spec.len()];
    for p in pc.points() {
        if let Some([ix, iy, iz]) = spec.cell_of(*p) {
            counts[spec.index(ix, iy, iz)] += 1;
        }
    }
    let values = counts.into_iter().map(|c| if c >= k { 1.0 } else { 0.0 }).collect();
    Ok(OccupancyGrid { spec: *spec, values, noised: false })
}

/// Splits a binary input grid: occupied voxels form the condition region.
pub fn condition_split(x0: &OccupancyGrid) -> Result<ConditionMask> {
    if x0.is_noised() || !x0.is_binary() {
        return Err(invalid("condition_split expects a binary occupancy grid"));
    }
    Ok(ConditionMask {
        spec: x0.spec,
        bits: x0.values.iter().map(|&v| v == 1.0).collect(),
    })
}

/// Pseudo ground truth: the first cloud followed by the second.
pub fn merge_pseudo_gt(pc1: &PointCloud, pc2: &PointCloud) -> Result<PointCloud> {
    if pc1.frame() != pc2.frame() {
        return Err(invalid(format!(
            "cannot merge clouds in frames {:?} and {:?}",
            pc1.frame(),
            pc2.frame()
        )));
    }
    let mut points = Vec::with_capacity(pc1.len() + pc2.len());
    points.extend_from_slice(pc1.points());
    points.extend_from_slice(pc2.points());
    Ok(PointCloud { points, frame: pc1.frame() })
}

/// Picks a random candidate whose union with `first` grows the occupied
/// voxel count by at least `ratio`. When `first` is empty, any non-empty
/// candidate qualifies.
pub fn select_second_view(
    first: &OccupancyGrid,
    candidates: &[OccupancyGrid],
    ratio: f64,
    rng: &mut Rng,
) -> Result<Option<usize>> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(invalid(format!("ratio must be a finite fraction >= 0, got {ratio}")));
    }
    let eligible = eligible_second_views(first, candidates, ratio)?;
    if eligible.is_empty() {
        return Ok(None);
    }
    Ok(Some(eligible[rng.random_range(0..eligible.len())]))
}

/// Indices of every candidate satisfying the growth rule, in input order.
pub fn eligible_second_views(
    first: &OccupancyGrid,
    candidates: &[OccupancyGrid],
    ratio: f64,
) -> Result<Vec<usize>> {
    let base = first.occupied_count();
    let mut out = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        first.spec.check_same(&c.spec, "select_second_view")?;
        let ok = if base == 0 {
            c.occupied_count() > 0
        } else {
            let union = first
                .values
                .iter()
                .zip(&c.values)
                .filter(|(a, b)| **a >= 0.5 || **b >= 0.5)
                .count();
            union as f64 >= (1.0 + ratio) * base as f64
        };
        if ok {
            out.push(i);
        }
    }
    Ok(out)
}
