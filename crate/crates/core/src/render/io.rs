//! Binary PGM silhouettes, little-endian PFM depth maps, camera JSON.

use std::fs;
use std::path::Path;

use super::{Camera, DepthMap, Image};
use crate::error::{format_err, Result};

/// Writes a P5 PGM: 255 where the silhouette is >= 0.5, else 0.
pub fn write_pgm(path: impl AsRef<Path>, sil: &Image) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", sil.width, sil.height).into_bytes();
    out.extend(sil.data.iter().map(|&v| if v >= 0.5 { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

fn header_tokens(bytes: &[u8], count: usize, what: &'static str) -> Result<(Vec<String>, usize)> {
    let mut toks = Vec::new();
    let mut i = 0;
    while toks.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(what, "truncated header"));
        }
        toks.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    Ok((toks, i + 1))
}

fn parse<T: std::str::FromStr>(tok: &str, what: &'static str) -> Result<T> {
    tok.parse().map_err(|_| format_err(what, format!("bad header token `{tok}`")))
}

/// Reads a P5 PGM as a `{0, 1}` silhouette (nonzero = object).
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path)?;
    let (toks, start) = header_tokens(&bytes, 4, "PGM")?;
    if toks[0] != "P5" {
        return Err(format_err("PGM", format!("expected P5, got `{}`", toks[0])));
    }
    let w: usize = parse(&toks[1], "PGM")?;
    let h: usize = parse(&toks[2], "PGM")?;
    let maxval: usize = parse(&toks[3], "PGM")?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err("PGM", "only 8-bit PGM is supported"));
    }
    let payload = bytes.get(start..start + w * h).ok_or_else(|| format_err("PGM", "truncated payload"))?;
    Image::new(w, h, payload.iter().map(|&b| if b > 0 { 1.0 } else { 0.0 }).collect())
}

/// Writes a single-channel little-endian PFM (negative scale). Invalid
/// pixels are stored as -1. PFM stores rows bottom to top.
pub fn write_pfm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.image.width, depth.image.height);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for v in (0..h).rev() {
        for u in 0..w {
            let i = v * w + u;
            let d = if depth.valid[i] { depth.image.data[i] as f32 } else { -1.0 };
            out.extend_from_slice(&d.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a single-channel PFM; negative or non-finite values are invalid.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    let (toks, start) = header_tokens(&bytes, 4, "PFM")?;
    if toks[0] != "Pf" {
        return Err(format_err("PFM", format!("expected single-channel `Pf`, got `{}`", toks[0])));
    }
    let w: usize = parse(&toks[1], "PFM")?;
    let h: usize = parse(&toks[2], "PFM")?;
    let scale: f64 = parse(&toks[3], "PFM")?;
    if scale == 0.0 {
        return Err(format_err("PFM", "scale must be nonzero"));
    }
    let payload = bytes.get(start..start + 4 * w * h).ok_or_else(|| format_err("PFM", "truncated payload"))?;
    let mut data = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let d = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) } as f64;
        let (row, u) = (k / w, k % w);
        let i = (h - 1 - row) * w + u;
        if d.is_finite() && d >= 0.0 {
            data[i] = d;
            valid[i] = true;
        }
    }
    DepthMap::new(Image::new(w, h, data)?, valid)
}

pub fn write_camera(path: impl AsRef<Path>, cam: &Camera) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(cam)?)?;
    Ok(())
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<Camera> {
    let cam: Camera = serde_json::from_slice(&fs::read(path)?)?;
    cam.validate()?;
    Ok(cam)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.pgm");
        let img = Image::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);
        let raw = fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(raw[raw.len() - 6], 255);
    }

    #[test]
    fn pfm_round_trip_with_invalid_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let img = Image::new(2, 3, vec![1.5, 0.0, 2.25, 3.0, 0.0, 4.0]).unwrap();
        let dm = DepthMap::new(img, vec![true, false, true, true, false, true]).unwrap();
        write_pfm(&p, &dm).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), dm);
        let raw = fs::read(&p).unwrap();
        // first stored row is the bottom image row
        let header = b"Pf\n2 3\n-1.0\n".len();
        assert_eq!(f32::from_le_bytes(raw[header..header + 4].try_into().unwrap()), -1.0);
        assert_eq!(f32::from_le_bytes(raw[header + 4..header + 8].try_into().unwrap()), 4.0);
    }

    #[test]
    fn camera_json_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let cam = Camera::look_at([0.0, 0.0, -2.0], [0.0; 3], [0.0, 1.0, 0.0], 10.0, 10.0, 4, 4).unwrap();
        write_camera(&p, &cam).unwrap();
        assert_eq!(read_camera(&p).unwrap(), cam);
        fs::write(&p, r#"{"fx":1,"fy":1,"cx":0,"cy":0,"width":1,"height":1,"cam_to_world":[1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1],"k1":0}"#).unwrap();
        assert!(read_camera(&p).is_err());
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&p).is_err());
        fs::write(&p, b"PF\n1 1\n-1.0\n").unwrap();
        assert!(read_pfm(&p).is_err());
        fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0").unwrap();
        assert!(read_pfm(&p).is_err());
    }
}
