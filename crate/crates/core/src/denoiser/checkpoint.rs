//! `<name>.ckpt.json` holds the architecture, optimizer step and seed;
//! `<name>.ckpt.bin` holds every parameter, then every first moment, then
//! every second moment, as little-endian f32 in layer order (kernel, bias).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamHyper};
use super::{Arch, DenseTensor, TinyDenoiser};
use crate::error::{format_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: Arch,
    param_count: usize,
    adam: AdamHyper,
    step: u64,
    seed: u64,
}

/// A model with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TinyDenoiser,
    pub adam: Adam,
    pub seed: u64,
}

pub fn checkpoint_paths(stem: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let s = stem.as_ref().as_os_str().to_string_lossy().into_owned();
    (PathBuf::from(format!("{s}.ckpt.json")), PathBuf::from(format!("{s}.ckpt.bin")))
}

pub fn write_checkpoint(stem: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let (json, bin) = checkpoint_paths(stem);
    let header = Header {
        arch: ck.model.arch().clone(),
        param_count: ck.model.param_count(),
        adam: ck.adam.hyper,
        step: ck.adam.step,
        seed: ck.seed,
    };
    fs::write(json, serde_json::to_string_pretty(&header)?)?;
    let mut out = Vec::with_capacity(12 * header.param_count);
    let params = ck.model.params().iter().map(|p| &p.data);
    for block in params.chain(&ck.adam.m).chain(&ck.adam.v) {
        for &x in block {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    fs::write(bin, out)?;
    Ok(())
}

pub fn read_checkpoint(stem: impl AsRef<Path>) -> Result<Checkpoint> {
    let (json, bin) = checkpoint_paths(stem);
    let header: Header = serde_json::from_slice(&fs::read(json)?)?;
    let template = TinyDenoiser::zeros(header.arch.clone())?;
    let n = template.param_count();
    if header.param_count != n {
        return Err(format_err("checkpoint", format!("header says {} parameters, architecture has {n}", header.param_count)));
    }
    let raw = fs::read(bin)?;
    if raw.len() != 12 * n {
        return Err(format_err("checkpoint", format!("expected {} bytes, found {}", 12 * n, raw.len())));
    }
    let mut values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |len: usize| -> Vec<f64> { values.by_ref().take(len).collect() };
    let mut params = Vec::new();
    for p in template.params() {
        params.push(DenseTensor::from_data(p.shape(), take(p.len()))?);
    }
    let m = template.params().iter().map(|p| take(p.len())).collect();
    let v = template.params().iter().map(|p| take(p.len())).collect();
    let model = TinyDenoiser::from_params(header.arch, params)?;
    let adam = Adam { hyper: header.adam, step: header.step, m, v };
    Ok(Checkpoint { model, adam, seed: header.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let model = TinyDenoiser::new(Arch::desk([4; 3], 10), &mut rng_from(2)).unwrap();
        let mut adam = Adam::new(model.params(), AdamHyper::with_lr(1e-3)).unwrap();
        adam.step = 17;
        adam.m[0][3] = 0.5;
        adam.v[1][0] = 0.25;
        let ck = Checkpoint { model, adam, seed: 99 };
        write_checkpoint(&stem, &ck).unwrap();
        let back = read_checkpoint(&stem).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.adam.step, 17);
        assert_eq!(back.adam.m[0][3], 0.5);
        assert_eq!(back.adam.v[1][0], 0.25);
        for (a, b) in back.model.params().iter().zip(ck.model.params()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // writing the reloaded checkpoint is byte-stable
        let stem2 = dir.path().join("m2");
        write_checkpoint(&stem2, &back).unwrap();
        assert_eq!(fs::read(dir.path().join("m.ckpt.bin")).unwrap(), fs::read(dir.path().join("m2.ckpt.bin")).unwrap());
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let model = TinyDenoiser::new(Arch::desk([4; 3], 10), &mut rng_from(2)).unwrap();
        let adam = Adam::new(model.params(), AdamHyper::with_lr(1e-3)).unwrap();
        write_checkpoint(&stem, &Checkpoint { model, adam, seed: 1 }).unwrap();
        let bin = dir.path().join("m.ckpt.bin");
        let mut raw = fs::read(&bin).unwrap();
        raw.truncate(raw.len() - 4);
        fs::write(&bin, raw).unwrap();
        assert!(read_checkpoint(&stem).is_err());
    }
}
