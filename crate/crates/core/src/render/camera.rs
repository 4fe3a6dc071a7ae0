use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::geom::{self, Vec3};

/// Row-major image of reals; pixel `(u, v)` sits at `v * width + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(mismatch(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub(crate) fn check_same_size(&self, other: &Image, what: &str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(mismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Depth image in meters with an explicit validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub image: Image,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(image: Image, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != image.len() {
            return Err(mismatch("depth validity mask does not match the image"));
        }
        Ok(Self { image, valid })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }
}

/// Pinhole intrinsics plus a rigid camera-to-world pose.
///
/// Camera frame: x right, y down, z forward. Pixel centers sit at
/// half-integer coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// 4x4 row-major rigid transform.
    pub cam_to_world: [f64; 16],
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_to_world: [f64; 16],
    ) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, cam_to_world };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid(format!("focal lengths must be > 0, got {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("camera image must be non-empty"));
        }
        let m = &self.cam_to_world;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("camera pose has non-finite entries"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| m[k * 4 + i] * m[k * 4 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if m[12..16] != [0.0, 0.0, 0.0, 1.0] {
            return Err(invalid("camera pose bottom row must be [0, 0, 0, 1]"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = geom::normalize(geom::sub(target, eye));
        let right = geom::cross(forward, up);
        if geom::norm(right) < 1e-9 {
            return Err(invalid("look_at: up vector is parallel to the view direction"));
        }
        let right = geom::normalize(right);
        let down = geom::cross(forward, right);
        let m = [
            right[0], down[0], forward[0], eye[0],
            right[1], down[1], forward[1], eye[1],
            right[2], down[2], forward[2], eye[2],
            0.0, 0.0, 0.0, 1.0,
        ];
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height, m)
    }

    pub fn center(&self) -> Vec3 {
        let m = &self.cam_to_world;
        [m[3], m[7], m[11]]
    }

    pub fn rotate(&self, d: Vec3) -> Vec3 {
        let m = &self.cam_to_world;
        [
            m[0] * d[0] + m[1] * d[1] + m[2] * d[2],
            m[4] * d[0] + m[5] * d[1] + m[6] * d[2],
            m[8] * d[0] + m[9] * d[1] + m[10] * d[2],
        ]
    }

    /// World point to camera coordinates.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let m = &self.cam_to_world;
        let d = geom::sub(p, self.center());
        [
            m[0] * d[0] + m[4] * d[1] + m[8] * d[2],
            m[1] * d[0] + m[5] * d[1] + m[9] * d[2],
            m[2] * d[0] + m[6] * d[1] + m[10] * d[2],
        ]
    }

    /// Unit world-space direction through the center of pixel `(u, v)`.
    pub fn ray_direction(&self, u: usize, v: usize) -> Vec3 {
        let d = [
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ];
        geom::normalize(self.rotate(d))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A ray through one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

/// One ray per pixel in row-major order.
pub fn generate_rays(cam: &Camera) -> Vec<Ray> {
    let origin = cam.center();
    let mut rays = Vec::with_capacity(cam.pixel_count());
    for v in 0..cam.height {
        for u in 0..cam.width {
            rays.push(Ray { origin, direction: cam.ray_direction(u, v) });
        }
    }
    rays
}

/// A camera together with its measured silhouette and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    pub silhouette: Image,
    pub depth: DepthMap,
}

impl CameraView {
    pub fn new(camera: Camera, silhouette: Image, depth: DepthMap) -> Result<Self> {
        let (w, h) = (camera.width, camera.height);
        if (silhouette.width, silhouette.height) != (w, h)
            || (depth.image.width, depth.image.height) != (w, h)
        {
            return Err(mismatch("view images must match the camera resolution"));
        }
        if silhouette.data.iter().any(|&s| s != 0.0 && s != 1.0) {
            return Err(invalid("silhouette values must be 0 or 1"));
        }
        Ok(Self { camera, silhouette, depth })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> [f64; 16] {
        [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]
    }

    #[test]
    fn principal_point_ray_is_forward() {
        let cam = Camera::new(10.0, 10.0, 4.5, 3.5, 9, 7, identity()).unwrap();
        let d = cam.ray_direction(4, 3);
        assert_eq!(d, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn rays_are_unit_and_translation_only_moves_origins() {
        let cam = Camera::look_at([2.0, 1.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 25.0, 12, 10).unwrap();
        let rays = generate_rays(&cam);
        assert_eq!(rays.len(), 120);
        for r in &rays {
            assert!((geom::norm(r.direction) - 1.0).abs() <= 1e-9);
        }
        let mut moved = cam.clone();
        moved.cam_to_world[3] += 1.0;
        moved.cam_to_world[11] -= 2.0;
        for (a, b) in rays.iter().zip(generate_rays(&moved)) {
            assert_eq!(a.direction, b.direction);
            assert_eq!(geom::sub(b.origin, a.origin), [1.0, 0.0, -2.0]);
        }
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, 4, 4, identity()).is_err());
        let mut skew = identity();
        skew[1] = 0.3;
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, 4, 4, skew).is_err());
        let cam = Camera::look_at([0.0, 0.0, -2.0], [0.0; 3], [0.0, 1.0, 0.0], 5.0, 5.0, 4, 4).unwrap();
        let p = cam.to_camera([0.0; 3]);
        assert!((p[2] - 2.0).abs() < 1e-12 && p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
    }
}
