//! Point-cloud completion metrics.
//!
//! Precision, recall and F1 count points closer than `tau` (strictly) to the
//! other cloud. Chamfer is the symmetric mean of squared nearest-neighbor
//! distances. EMD is the optimal one-to-one assignment cost. UHD, MMD and TMD
//! score fidelity to the partial input, quality of the best match and
//! diversity among completions.

use std::fmt::Write as _;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::geom::{self, Vec3};
use crate::grid::PointCloud;
use crate::seed::Rng;

pub const DEFAULT_TAU: f64 = 1e-2;
pub const DEFAULT_EMD_POINTS: usize = 512;

fn non_empty(pc: &PointCloud, what: &str) -> Result<()> {
    if pc.is_empty() {
        return Err(invalid(format!("{what}: empty point cloud")));
    }
    Ok(())
}

/// Squared distance from every point of `from` to its nearest point in `to`.
pub fn nearest_sq_dists(from: &[Vec3], to: &[Vec3]) -> Result<Vec<f64>> {
    if to.is_empty() {
        return Err(invalid("nearest neighbor search in an empty cloud"));
    }
    let tree: ImmutableKdTree<f64, 3> =
        ImmutableKdTree::new_from_slice(to).map_err(|e| invalid(format!("kd-tree: {e:?}")))?;
    Ok(from
        .iter()
        .map(|p| tree.query(p).nearest_one::<SquaredEuclidean<f64>>().execute().distance)
        .collect())
}

/// Translates by the centroid of `gt` and scales by the longest edge of its
/// bounding box, applied to both clouds.
pub fn normalize_to_gt(pred: &PointCloud, gt: &PointCloud) -> Result<(PointCloud, PointCloud)> {
    let (lo, hi) = gt.bounds().ok_or_else(|| invalid("normalization needs a non-empty ground truth"))?;
    let c = gt.centroid().expect("non-empty");
    let edge = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if edge <= 0.0 {
        return Err(invalid("ground truth bounding box is degenerate"));
    }
    let f = |p: Vec3| geom::scale(geom::sub(p, c), 1.0 / edge);
    Ok((pred.map(f)?, gt.map(f)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn precision_recall_f1(pred: &PointCloud, gt: &PointCloud, tau: f64) -> Result<PrecisionRecall> {
    non_empty(pred, "precision")?;
    non_empty(gt, "recall")?;
    let t2 = tau * tau;
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x < t2).count() as f64 / d.len() as f64;
    let precision = frac(nearest_sq_dists(pred.points(), gt.points())?);
    let recall = frac(nearest_sq_dists(gt.points(), pred.points())?);
    Ok(PrecisionRecall { precision, recall, f1: f1_score(precision, recall) })
}

pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    non_empty(a, "chamfer")?;
    non_empty(b, "chamfer")?;
    let mean = |d: Vec<f64>| d.iter().sum::<f64>() / d.len() as f64;
    Ok(mean(nearest_sq_dists(a.points(), b.points())?) + mean(nearest_sq_dists(b.points(), a.points())?))
}

/// Minimum-cost perfect matching on a square cost matrix (row-major),
/// returning `assignment[row] = column`. O(n^3) shortest augmenting paths
/// with potentials.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(mismatch(format!("cost matrix needs {} entries, got {}", n * n, cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(invalid("cost matrix has non-finite entries"));
    }
    // 1-based potentials and matching; column 0 is a virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Exact `min over bijections of sum |a_i - b_phi(i)|`.
pub fn emd_total(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(mismatch(format!("EMD needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| geom::dist(*p, *q))).collect();
    let assign = hungarian(&cost, n)?;
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum())
}

/// Mean matched distance times 100. Clouds larger than `max_exact` are
/// subsampled (both, with `rng`) first.
pub fn emd(a: &PointCloud, b: &PointCloud, max_exact: usize, rng: &mut Rng) -> Result<f64> {
    if a.len() != b.len() {
        return Err(mismatch(format!("EMD needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    non_empty(a, "EMD")?;
    if max_exact == 0 {
        return Err(invalid("max_exact must be >= 1"));
    }
    let (a, b) = (a.subsample(max_exact, rng), b.subsample(max_exact, rng));
    Ok(100.0 * emd_total(a.points(), b.points())? / a.len() as f64)
}

/// Mean over completions of the largest distance from a partial point to the
/// completion.
pub fn uhd(partial: &PointCloud, completions: &[PointCloud]) -> Result<f64> {
    non_empty(partial, "UHD partial")?;
    if completions.is_empty() {
        return Err(invalid("UHD needs at least one completion"));
    }
    let mut total = 0.0;
    for c in completions {
        non_empty(c, "UHD completion")?;
        let worst = nearest_sq_dists(partial.points(), c.points())?.into_iter().fold(0.0, f64::max);
        total += worst.sqrt();
    }
    Ok(total / completions.len() as f64)
}

/// For each ground-truth shape, the best F1 over `generated` (first index on
/// ties); returns the mean and the chosen indices.
pub fn mmd(gt_set: &[PointCloud], generated: &[PointCloud], tau: f64) -> Result<(f64, Vec<usize>)> {
    if gt_set.is_empty() || generated.is_empty() {
        return Err(invalid("MMD needs non-empty ground-truth and generated sets"));
    }
    let mut total = 0.0;
    let mut picks = Vec::with_capacity(gt_set.len());
    for s in gt_set {
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, g) in generated.iter().enumerate() {
            let f = precision_recall_f1(g, s, tau)?.f1;
            if f > best.0 {
                best = (f, j);
            }
        }
        total += best.0;
        picks.push(best.1);
    }
    Ok((total / gt_set.len() as f64, picks))
}

/// `sum_j 1/(k-1) sum_{l != j} CD(c_j, c_l)` for one set of `k >= 2`
/// completions.
pub fn tmd(completions: &[PointCloud]) -> Result<f64> {
    let k = completions.len();
    if k < 2 {
        return Err(invalid(format!("TMD needs at least 2 completions, got {k}")));
    }
    let mut total = 0.0;
    for j in 0..k {
        for l in j + 1..k {
            // chamfer is symmetric, so each unordered pair counts twice
            total += 2.0 * chamfer(&completions[j], &completions[l])?;
        }
    }
    Ok(total / (k - 1) as f64)
}

/// Mean TMD over several partial shapes.
pub fn tmd_mean(sets: &[Vec<PointCloud>]) -> Result<f64> {
    if sets.is_empty() {
        return Err(invalid("TMD needs at least one shape"));
    }
    let mut total = 0.0;
    for s in sets {
        total += tmd(s)?;
    }
    Ok(total / sets.len() as f64)
}

/// All metrics for one object; unavailable metrics are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub category: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub emd: Option<f64>,
    pub chamfer: Option<f64>,
    pub uhd: Option<f64>,
    pub mmd: Option<f64>,
    pub tmd: Option<f64>,
    pub tau: f64,
    pub surface_points: usize,
    pub emd_points: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "id,category,P,R,F1,EMD,CD,UHD,MMD,TMD,tau,seed";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.id,
            self.category,
            f(self.precision),
            f(self.recall),
            f(self.f1),
            f(self.emd),
            f(self.chamfer),
            f(self.uhd),
            f(self.mmd),
            f(self.tmd),
            self.tau,
            self.seed
        )
        .expect("writing to a String");
        s
    }
}

pub fn csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
