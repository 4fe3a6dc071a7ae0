//! Isosurface extraction and area-weighted surface sampling.

mod tables;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::geom::{self, Vec3};
use crate::grid::{OccupancyGrid, PointCloud};
use crate::seed::Rng;
use tables::{CORNERS, EDGES, EDGE_TABLE, TRIANGLE_TABLE};

/// Triangles below this area are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        self.triangles[i].map(|v| self.vertices[v])
    }

    pub fn area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a)))
    }

    /// Signed volume enclosed by the mesh; positive when faces point outward.
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.triangle(i);
                geom::dot(a, geom::cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Undirected edges with the number of triangles using each.
    pub fn edge_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut m = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edge_counts().len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }
}

/// Marching cubes on the voxel-center lattice of `grid`, padded by one layer
/// of zeros so occupied boundary voxels still close. Occupied (above `iso`)
/// is inside; faces point outward. Vertices on shared edges are shared.
pub fn marching_cubes(grid: &OccupancyGrid, iso: f64) -> Result<TriangleMesh> {
    if !(iso > 0.0 && iso < 1.0) {
        return Err(invalid(format!("iso-level must be in (0, 1), got {iso}")));
    }
    let spec = grid.spec();
    let [nx, ny, nz] = spec.dims;
    let (px, py, pz) = (nx + 2, ny + 2, nz + 2);
    // padded lattice value; padded index p maps to voxel p - 1
    let value = |x: usize, y: usize, z: usize| -> f64 {
        if x == 0 || y == 0 || z == 0 || x > nx || y > ny || z > nz {
            0.0
        } else {
            grid.get([x - 1, y - 1, z - 1])
        }
    };
    let position = |x: usize, y: usize, z: usize| -> Vec3 {
        let h = spec.voxel_size;
        [
            spec.origin[0] + (x as f64 - 0.5) * h,
            spec.origin[1] + (y as f64 - 0.5) * h,
            spec.origin[2] + (z as f64 - 0.5) * h,
        ]
    };
    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for z in 0..pz - 1 {
        for y in 0..py - 1 {
            for x in 0..px - 1 {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    (x + o[0], y + o[1], z + o[2])
                };
                let vals: [f64; 8] = std::array::from_fn(|c| {
                    let (a, b, d) = corner(c);
                    value(a, b, d)
                });
                let mut case = 0usize;
                for (c, &v) in vals.iter().enumerate() {
                    if v < iso {
                        case |= 1 << c;
                    }
                }
                let edges = EDGE_TABLE[case];
                if edges == 0 {
                    continue;
                }
                let mut ids = [usize::MAX; 12];
                for (e, id) in ids.iter_mut().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let [c0, c1] = EDGES[e];
                    let (a, b) = (corner(c0), corner(c1));
                    let key_of = |p: (usize, usize, usize)| (p.2 * py + p.1) * px + p.0;
                    let (ka, kb) = (key_of(a), key_of(b));
                    let key = (ka.min(kb), ka.max(kb));
                    *id = *edge_vertex.entry(key).or_insert_with(|| {
                        let (va, vb) = (vals[c0], vals[c1]);
                        let s = if (vb - va).abs() < 1e-300 { 0.5 } else { (iso - va) / (vb - va) };
                        let pa = position(a.0, a.1, a.2);
                        let pb = position(b.0, b.1, b.2);
                        mesh.vertices.push(geom::add(pa, geom::scale(geom::sub(pb, pa), s)));
                        mesh.vertices.len() - 1
                    });
                }
                for tri in TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [ids[tri[0] as usize], ids[tri[1] as usize], ids[tri[2] as usize]];
                    mesh.triangles.push(t);
                    if mesh.area(mesh.triangles.len() - 1) <= MIN_TRIANGLE_AREA {
                        mesh.triangles.pop();
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// `n` points drawn area-proportionally over the triangles, uniform within
/// each triangle.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, rng: &mut Rng) -> Result<PointCloud> {
    if mesh.is_empty() {
        return Err(invalid("cannot sample an empty mesh"));
    }
    if n == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|i| mesh.area(i)).collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| invalid(format!("triangle areas: {e}")))?;
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let [a, b, c] = mesh.triangle(pick.sample(rng));
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        pts.push(std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k]));
    }
    PointCloud::world(pts)
}

/// ASCII PLY with `vertex` and `face` elements.
pub fn write_mesh_ply(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "ply\nformat ascii 1.0")?;
    writeln!(out, "element vertex {}", mesh.vertices.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    writeln!(out, "element face {}", mesh.triangles.len())?;
    writeln!(out, "property list uchar int vertex_indices\nend_header")?;
    for v in &mesh.vertices {
        writeln!(out, "{} {} {}", v[0] as f32, v[1] as f32, v[2] as f32)?;
    }
    for t in &mesh.triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::render::trilinear;
    use crate::seed::rng_from;

    fn grid_with(n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> OccupancyGrid {
        let spec = GridSpec::new([n; 3], 1.0, [0.0; 3]).unwrap();
        let v = (0..spec.len()).map(|i| {
            let [x, y, z] = spec.coords(i);
            f(x, y, z)
        });
        OccupancyGrid::from_values(spec, v.collect()).unwrap()
    }

    #[test]
    fn tables_have_256_cases() {
        assert_eq!(TRIANGLE_TABLE.len(), 256);
        for (case, row) in TRIANGLE_TABLE.iter().enumerate() {
            let mut mask = 0u16;
            for &e in row.iter().take_while(|&&e| e >= 0) {
                mask |= 1 << e;
            }
            assert_eq!(mask, EDGE_TABLE[case], "case {case}");
        }
    }

    #[test]
    fn empty_grid_gives_empty_mesh() {
        assert!(marching_cubes(&grid_with(4, |_, _, _| 0.0), 0.5).unwrap().is_empty());
    }

    #[test]
    fn single_voxel_is_a_closed_sphere() {
        let g = grid_with(5, |x, y, z| if (x, y, z) == (2, 2, 2) { 1.0 } else { 0.0 });
        let m = marching_cubes(&g, 0.5).unwrap();
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_watertight());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn boundary_voxels_close_through_padding() {
        let g = grid_with(3, |_, _, _| 1.0);
        let m = marching_cubes(&g, 0.5).unwrap();
        assert!(m.is_watertight());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn half_space_gives_a_flat_sheet() {
        let n = 6;
        let g = grid_with(n, |_, _, z| if z < n / 2 { 1.0 } else { 0.0 });
        let m = marching_cubes(&g, 0.5).unwrap();
        // the interior sheet sits halfway between center rows 2 and 3
        let inner: Vec<&Vec3> = m.vertices.iter().filter(|v| (0.5..n as f64 - 0.5).contains(&v[0]) && (0.5..n as f64 - 0.5).contains(&v[1]) && v[2] > 1.0).collect();
        assert!(!inner.is_empty());
        assert!(inner.iter().all(|v| (v[2] - 3.0).abs() < 1e-6));
    }

    #[test]
    fn vertices_lie_on_the_iso_set() {
        let mut rng = rng_from(5);
        let g = grid_with(6, |_, _, _| rng.random::<f64>());
        let m = marching_cubes(&g, 0.5).unwrap();
        for v in &m.vertices {
            let inside = v.iter().all(|&c| (0.5..=5.5).contains(&c));
            if inside {
                assert!((trilinear(&g, *v) - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn samples_stay_inside_one_triangle() {
        let mesh = TriangleMesh { vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], triangles: vec![[0, 1, 2]] };
        let pc = sample_surface(&mesh, 500, &mut rng_from(1)).unwrap();
        for p in pc.points() {
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12 && p[2] == 0.0);
        }
        assert_eq!(pc, sample_surface(&mesh, 500, &mut rng_from(1)).unwrap());
        assert!(sample_surface(&TriangleMesh::default(), 5, &mut rng_from(1)).is_err());
    }

    #[test]
    fn area_weighting_follows_binomial_statistics() {
        // areas 3:1 on two disjoint triangles
        let mesh = TriangleMesh {
            vertices: vec![[0.0; 3], [3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [10.0, 0.0, 0.0], [11.0, 0.0, 0.0], [10.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let n = 4000;
        let pc = sample_surface(&mesh, n, &mut rng_from(2)).unwrap();
        let first = pc.points().iter().filter(|p| p[0] < 5.0).count() as f64;
        let sd = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((first - 3000.0).abs() <= 3.0 * sd, "{first}");
    }
}
