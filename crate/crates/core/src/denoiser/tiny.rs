//! A small stack of same-padded 3D convolutions.
//!
//! Input channels are the noised field, the condition mask and `E` constant
//! time-embedding channels. Hidden layers use ReLU; the output is a single
//! logistic channel.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{time_embedding, DenseTensor, Denoiser};
use crate::error::{invalid, mismatch, Result};
use crate::grid::{ConditionMask, GridSpec, OccupancyGrid};
use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub dims: [usize; 3],
    /// Widths of the hidden layers; `[8, 8]` gives three conv layers.
    pub hidden: Vec<usize>,
    pub kernel: usize,
    pub embed_dim: usize,
    /// Diffusion step count `T` used by the time embedding.
    pub steps: usize,
}

impl Arch {
    pub fn desk(dims: [usize; 3], steps: usize) -> Self {
        Self { dims, hidden: vec![8, 8], kernel: 3, embed_dim: 8, steps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(invalid(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.embed_dim % 2 == 1 {
            return Err(invalid("embedding dimension must be even"));
        }
        if self.steps == 0 || self.dims.contains(&0) || self.hidden.contains(&0) {
            return Err(invalid("architecture sizes must be positive"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        2 + self.embed_dim
    }

    /// `(in, out)` channels per layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.in_channels()];
        widths.extend(&self.hidden);
        widths.push(1);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        let k3 = self.kernel.pow(3);
        self.layer_channels().iter().map(|&(i, o)| o * i * k3 + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyDenoiser {
    arch: Arch,
    /// Kernel then bias for each layer.
    params: Vec<DenseTensor>,
}

/// Activations saved by [`TinyDenoiser::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    arch: Arch,
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl ForwardCache {
    /// Which hidden units were positive; two caches with the same pattern
    /// lie on the same linear piece of every rectifier.
    pub fn active_pattern(&self) -> Vec<bool> {
        self.inputs.iter().skip(1).flatten().map(|&a| a > 0.0).collect()
    }
}

/// Parameter gradients in the same order as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &TinyDenoiser) -> Self {
        Self(model.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

struct Conv<'a> {
    dims: [usize; 3],
    k: usize,
    c_in: usize,
    c_out: usize,
    weight: &'a [f64],
}

impl Conv<'_> {
    fn w_index(&self, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> usize {
        (((co * self.c_in + ci) * self.k + kz) * self.k + ky) * self.k + kx
    }

    /// Visits every (weight index, output row, input row, row length) of the
    /// shift-and-add decomposition.
    fn for_each_row(&self, co: usize, ci: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [nx, ny, nz] = self.dims;
        let r = (self.k / 2) as isize;
        for kz in 0..self.k {
            let dz = kz as isize - r;
            let (z0, z1) = span(nz, dz);
            for ky in 0..self.k {
                let dy = ky as isize - r;
                let (y0, y1) = span(ny, dy);
                for kx in 0..self.k {
                    let dx = kx as isize - r;
                    let (x0, x1) = span(nx, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wi = self.w_index(co, ci, kz, ky, kx);
                    for z in z0..z1 {
                        let zi = (z as isize + dz) as usize;
                        for y in y0..y1 {
                            let yi = (y as isize + dy) as usize;
                            let out_row = (z * ny + y) * nx + x0;
                            let in_row = (zi * ny + yi) * nx + (x0 as isize + dx) as usize;
                            f(wi, out_row, in_row, x1 - x0);
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, input: &[f64], bias: &[f64]) -> Vec<f64> {
        let n: usize = self.dims.iter().product();
        let mut out = vec![0.0; self.c_out * n];
        for (co, (o, &b)) in out.chunks_mut(n).zip(bias).enumerate() {
            o.fill(b);
            for ci in 0..self.c_in {
                let inp = &input[ci * n..(ci + 1) * n];
                self.for_each_row(co, ci, |wi, orow, irow, len| {
                    let w = self.weight[wi];
                    if w == 0.0 {
                        return;
                    }
                    for (a, b) in o[orow..orow + len].iter_mut().zip(&inp[irow..irow + len]) {
                        *a += w * b;
                    }
                });
            }
        }
        out
    }

    /// Returns `(d_weight, d_bias, d_input)`; `d_input` is skipped when
    /// `need_input` is false.
    fn backward(&self, input: &[f64], d_out: &[f64], need_input: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n: usize = self.dims.iter().product();
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.c_out];
        let mut din = if need_input { vec![0.0; self.c_in * n] } else { Vec::new() };
        for co in 0..self.c_out {
            let g = &d_out[co * n..(co + 1) * n];
            db[co] = g.iter().sum();
            for ci in 0..self.c_in {
                let inp = &input[ci * n..(ci + 1) * n];
                let mut di = if need_input { Some(&mut din[ci * n..(ci + 1) * n]) } else { None };
                self.for_each_row(co, ci, |wi, orow, irow, len| {
                    let go = &g[orow..orow + len];
                    let mut acc = 0.0;
                    for (a, b) in go.iter().zip(&inp[irow..irow + len]) {
                        acc += a * b;
                    }
                    dw[wi] += acc;
                    if let Some(di) = di.as_deref_mut() {
                        let w = self.weight[wi];
                        for (d, a) in di[irow..irow + len].iter_mut().zip(go) {
                            *d += w * a;
                        }
                    }
                });
            }
        }
        (dw, db, din)
    }
}

impl TinyDenoiser {
    /// He-normal kernels, zero biases.
    pub fn new(arch: Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let k3 = arch.kernel.pow(3);
        let mut params = Vec::new();
        for (ci, co) in arch.layer_channels() {
            let std = (2.0 / (ci * k3) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
            let w: Vec<f64> = (0..co * ci * k3).map(|_| normal.sample(rng)).collect();
            params.push(DenseTensor::from_data(&[co, ci, arch.kernel, arch.kernel, arch.kernel], w)?);
            params.push(DenseTensor::zeros(&[co]));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel;
        let mut params = Vec::new();
        for (ci, co) in arch.layer_channels() {
            params.push(DenseTensor::zeros(&[co, ci, k, k, k]));
            params.push(DenseTensor::zeros(&[co]));
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Arch, params: Vec<DenseTensor>) -> Result<Self> {
        let model = Self::zeros(arch)?;
        if params.len() != model.params.len()
            || params.iter().zip(&model.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(mismatch("parameter shapes do not match the architecture"));
        }
        Ok(Self { params, ..model })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[DenseTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(DenseTensor::len).sum()
    }

    fn conv(&self, layer: usize) -> Conv<'_> {
        let (c_in, c_out) = self.arch.layer_channels()[layer];
        Conv { dims: self.arch.dims, k: self.arch.kernel, c_in, c_out, weight: &self.params[2 * layer].data }
    }

    fn input_channels(&self, x_t: &OccupancyGrid, mask: &ConditionMask, t: usize) -> Result<Vec<f64>> {
        let spec: &GridSpec = x_t.spec();
        spec.check_same(mask.spec(), "denoiser input")?;
        if spec.dims != self.arch.dims {
            return Err(mismatch(format!("denoiser built for {:?}, got grid {:?}", self.arch.dims, spec.dims)));
        }
        let n = spec.len();
        let emb = time_embedding(t, self.arch.embed_dim, self.arch.steps)?;
        let mut input = Vec::with_capacity(self.arch.in_channels() * n);
        input.extend_from_slice(x_t.values());
        input.extend(mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }));
        for e in emb {
            input.extend(std::iter::repeat_n(e, n));
        }
        Ok(input)
    }

    pub fn forward(&self, x_t: &OccupancyGrid, mask: &ConditionMask, t: usize) -> Result<ForwardCache> {
        let mut act = self.input_channels(x_t, mask, t)?;
        let layers = self.arch.layer_channels().len();
        let mut inputs = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut z = self.conv(l).forward(&act, &self.params[2 * l + 1].data);
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            } else {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            inputs.push(std::mem::replace(&mut act, z));
        }
        Ok(ForwardCache { arch: self.arch.clone(), inputs, probs: act })
    }

    /// Gradients of a loss given `d_probs = dL/dp` at the output.
    pub fn backward(&self, cache: &ForwardCache, d_probs: &[f64]) -> Result<Gradients> {
        let layers = self.arch.layer_channels().len();
        if cache.arch != self.arch || cache.inputs.len() != layers {
            return Err(invalid("forward cache does not belong to this model"));
        }
        if d_probs.len() != cache.probs.len() {
            return Err(mismatch("upstream gradient does not match the output"));
        }
        let mut grads = vec![Vec::new(); self.params.len()];
        let mut d: Vec<f64> = d_probs.iter().zip(&cache.probs).map(|(g, p)| g * p * (1.0 - p)).collect();
        for l in (0..layers).rev() {
            let input = &cache.inputs[l];
            let (dw, db, mut din) = self.conv(l).backward(input, &d, l > 0);
            grads[2 * l] = dw;
            grads[2 * l + 1] = db;
            if l > 0 {
                // the input of layer l is relu(z); its derivative is 1 where positive
                din.iter_mut().zip(input).for_each(|(g, a)| {
                    if *a <= 0.0 {
                        *g = 0.0
                    }
                });
                d = din;
            }
        }
        Ok(Gradients(grads))
    }
}

impl Denoiser for TinyDenoiser {
    fn predict(&self, x_t: &OccupancyGrid, mask: &ConditionMask, t: usize) -> Result<OccupancyGrid> {
        let cache = self.forward(x_t, mask, t)?;
        OccupancyGrid::from_values(*x_t.spec(), cache.probs)
    }
}
