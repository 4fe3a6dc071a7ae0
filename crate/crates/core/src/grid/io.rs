//! ASCII PLY point clouds and the `.grid.json` + `.grid.bin` sidecar pair.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConditionMask, Frame, GridSpec, OccupancyGrid, PointCloud};
use crate::error::{format_err, Result};
use crate::geom::Vec3;

/// Writes `vertex` records with `float x, float y, float z` properties.
pub fn write_ply(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(64 + pc.len() * 32);
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", pc.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(out, "property float {axis}")?;
    }
    writeln!(out, "end_header")?;
    for p in pc.points() {
        writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
    }
    fs::write(path, out)?;
    Ok(())
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// Reads the `vertex` element of an ASCII PLY file as a world-frame cloud.
/// Other elements (faces, ...) are skipped.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| format_err("PLY", "unexpected end of file"))
    };

    if next()?.trim() != "ply" {
        return Err(format_err("PLY", "missing `ply` magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let line = next()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(format_err("PLY", format!("unsupported format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| format_err("PLY", format!("bad element count `{count}`")))?,
                properties: Vec::new(),
            }),
            ["property", "list", _, _, name] | ["property", _, name] => elements
                .last_mut()
                .ok_or_else(|| format_err("PLY", "property before element"))?
                .properties
                .push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(format_err("PLY", format!("unexpected header line `{line}`"))),
        }
    }

    let mut points = Vec::new();
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                next()?;
            }
            continue;
        }
        let pos = |n: &str| {
            el.properties
                .iter()
                .position(|p| p == n)
                .ok_or_else(|| format_err("PLY", format!("vertex has no `{n}` property")))
        };
        let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);
        points.reserve(el.count);
        for _ in 0..el.count {
            let line = next()?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format_err("PLY", format!("bad vertex `{line}`: {e}")))?;
            if vals.len() < el.properties.len() {
                return Err(format_err("PLY", format!("short vertex record `{line}`")));
            }
            points.push([vals[ix], vals[iy], vals[iz]] as Vec3);
        }
    }
    PointCloud::new(points, Frame::World)
}

/// JSON header of a grid sidecar pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub dtype: String,
    pub order: String,
    pub noised: bool,
}

impl GridHeader {
    fn for_spec(spec: &GridSpec, dtype: &str, noised: bool) -> Self {
        Self {
            dims: spec.dims,
            voxel_size: spec.voxel_size,
            origin: spec.origin,
            dtype: dtype.to_string(),
            order: "x-fastest".to_string(),
            noised,
        }
    }

    fn spec(&self) -> Result<GridSpec> {
        if self.order != "x-fastest" {
            return Err(format_err("grid", format!("unsupported order `{}`", self.order)));
        }
        GridSpec::new(self.dims, self.voxel_size, self.origin)
    }
}

/// `(stem.grid.json, stem.grid.bin)`.
pub fn sidecar_paths(stem: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let stem = stem.as_ref().as_os_str().to_owned();
    let mut json = stem.clone();
    json.push(".grid.json");
    let mut bin = stem;
    bin.push(".grid.bin");
    (json.into(), bin.into())
}

fn write_header(path: &Path, header: &GridHeader) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_grid(stem: impl AsRef<Path>, grid: &OccupancyGrid) -> Result<()> {
    let (json, bin) = sidecar_paths(stem);
    write_header(&json, &GridHeader::for_spec(grid.spec(), "f32", grid.is_noised()))?;
    let bytes: Vec<u8> = grid
        .values()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(bin, bytes)?;
    Ok(())
}

pub fn write_mask(stem: impl AsRef<Path>, mask: &ConditionMask) -> Result<()> {
    let (json, bin) = sidecar_paths(stem);
    write_header(&json, &GridHeader::for_spec(mask.spec(), "u8", false))?;
    fs::write(bin, mask.bits().iter().map(|&b| b as u8).collect::<Vec<u8>>())?;
    Ok(())
}

fn read_pair(stem: &Path, dtype: &str) -> Result<(GridHeader, GridSpec, Vec<u8>)> {
    let (json, bin) = sidecar_paths(stem);
    let header: GridHeader = serde_json::from_slice(&fs::read(json)?)?;
    if header.dtype != dtype {
        return Err(format_err(
            "grid",
            format!("expected dtype `{dtype}`, found `{}`", header.dtype),
        ));
    }
    let spec = header.spec()?;
    let bytes = fs::read(bin)?;
    let width = if dtype == "f32" { 4 } else { 1 };
    if bytes.len() != spec.len() * width {
        return Err(format_err(
            "grid",
            format!("binary holds {} bytes, expected {}", bytes.len(), spec.len() * width),
        ));
    }
    Ok((header, spec, bytes))
}

pub fn read_grid(stem: impl AsRef<Path>) -> Result<OccupancyGrid> {
    let (header, spec, bytes) = read_pair(stem.as_ref(), "f32")?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if header.noised {
        OccupancyGrid::noised(spec, values)
    } else {
        OccupancyGrid::from_values(spec, values)
    }
}

pub fn read_mask(stem: impl AsRef<Path>) -> Result<ConditionMask> {
    let (_, spec, bytes) = read_pair(stem.as_ref(), "u8")?;
    if bytes.iter().any(|&b| b > 1) {
        return Err(format_err("grid", "mask bytes must be 0 or 1"));
    }
    ConditionMask::new(spec, bytes.into_iter().map(|b| b == 1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let pc = PointCloud::world(vec![[0.1, -2.5, 3.25], [1e-3, 0.0, 7.0]]).unwrap();
        write_ply(&path, &pc).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in pc.points().iter().zip(back.points()) {
            for k in 0..3 {
                assert_eq!(a[k] as f32, b[k] as f32);
            }
        }
    }

    #[test]
    fn ply_reader_skips_faces_and_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float nx\n\
             property float x\nproperty float y\nproperty float z\nelement face 1\n\
             property list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n3 0 1 1\n",
        )
        .unwrap();
        let pc = read_ply(&path).unwrap();
        assert_eq!(pc.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn grid_sidecar_layout() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("g");
        let spec = GridSpec::new([2, 3, 4], 0.5, [1.0, 2.0, 3.0]).unwrap();
        let values: Vec<f64> = (0..24).map(|i| (i % 2) as f64).collect();
        let g = OccupancyGrid::from_values(spec, values).unwrap();
        write_grid(&stem, &g).unwrap();
        let (json, bin) = sidecar_paths(&stem);
        let header: serde_json::Value = serde_json::from_slice(&fs::read(json).unwrap()).unwrap();
        assert_eq!(header["dims"], serde_json::json!([2, 3, 4]));
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["order"], "x-fastest");
        assert_eq!(header["noised"], false);
        let raw = fs::read(bin).unwrap();
        assert_eq!(raw.len(), 24 * 4);
        assert_eq!(&raw[4..8], &1.0f32.to_le_bytes());
        assert_eq!(read_grid(&stem).unwrap(), g);

        let mask = super::super::condition_split(&g).unwrap();
        let mstem = dir.path().join("m");
        write_mask(&mstem, &mask).unwrap();
        assert_eq!(read_mask(&mstem).unwrap(), mask);
        assert!(read_grid(&mstem).is_err());
    }

    #[test]
    fn grid_reader_rejects_truncated_binary() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("g");
        let g = OccupancyGrid::zeros(GridSpec::new([2, 2, 2], 1.0, [0.0; 3]).unwrap());
        write_grid(&stem, &g).unwrap();
        let (_, bin) = sidecar_paths(&stem);
        fs::write(bin, [0u8; 12]).unwrap();
        assert!(read_grid(&stem).is_err());
    }
}
