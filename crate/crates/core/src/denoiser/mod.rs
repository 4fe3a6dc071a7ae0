//! Denoisers predict clean occupancy probabilities from a noised grid.

mod adam;
mod checkpoint;
mod tiny;
pub mod train;

pub use adam::{Adam, AdamHyper};
pub use checkpoint::{checkpoint_paths, read_checkpoint, write_checkpoint, Checkpoint};
pub use tiny::{Arch, ForwardCache, Gradients, TinyDenoiser};

use crate::error::{invalid, mismatch, Result};
use crate::grid::{ConditionMask, OccupancyGrid};

/// `f(x_t, c0, t)`: an x0 prediction with values in `[0, 1]`.
pub trait Denoiser {
    fn predict(&self, x_t: &OccupancyGrid, mask: &ConditionMask, t: usize) -> Result<OccupancyGrid>;
}

/// Ignores its input and returns the ground truth as `{0.001, 0.999}`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    probs: OccupancyGrid,
}

impl OracleDenoiser {
    pub const LOW: f64 = 0.001;
    pub const HIGH: f64 = 0.999;

    pub fn new(gt: &OccupancyGrid) -> Result<Self> {
        if !gt.is_binary() {
            return Err(invalid("oracle denoiser needs a binary ground truth"));
        }
        let v = gt.values().iter().map(|&x| if x == 1.0 { Self::HIGH } else { Self::LOW }).collect();
        Ok(Self { probs: OccupancyGrid::from_values(*gt.spec(), v)? })
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, x_t: &OccupancyGrid, _mask: &ConditionMask, _t: usize) -> Result<OccupancyGrid> {
        self.probs.spec().check_same(x_t.spec(), "oracle denoiser")?;
        Ok(self.probs.clone())
    }
}

/// Predicts the same probability everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantDenoiser(pub f64);

impl Denoiser for ConstantDenoiser {
    fn predict(&self, x_t: &OccupancyGrid, _mask: &ConditionMask, _t: usize) -> Result<OccupancyGrid> {
        OccupancyGrid::filled(*x_t.spec(), self.0)
    }
}

/// Steps of a `T`-step schedule are mapped onto the 1000-step range the
/// standard embedding frequencies were chosen for.
const REFERENCE_STEPS: f64 = 1000.0;

/// Sinusoidal embedding `[sin(s/w_0), .., sin(s/w_{h-1}), cos(s/w_0), ..]`
/// with `w_k = 10000^(2k/dim)` and `s = t * 1000 / T`.
pub fn time_embedding(t: usize, dim: usize, steps: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return Err(invalid(format!("embedding dimension must be even and positive, got {dim}")));
    }
    if steps == 0 || t > steps {
        return Err(invalid(format!("step {t} outside [0, {steps}]")));
    }
    let s = t as f64 * REFERENCE_STEPS / steps as f64;
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| 10000f64.powf(-((2 * k) as f64) / dim as f64)).collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (s * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (s * w).cos()));
    Ok(out)
}

/// Row-major N-dimensional array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(mismatch(format!("shape {shape:?} needs {} values, got {}", shape.iter().product::<usize>(), data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
