//! Signed-distance scenes built from boxes and vertical cylinders.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error};
use crate::geom::{self, Vec3};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Chair,
    Table,
    Lamp,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Chair, Category::Table, Category::Lamp];

    pub fn name(self) -> &'static str {
        match self {
            Category::Chair => "chair",
            Category::Table => "table",
            Category::Lamp => "lamp",
        }
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "chair" => Ok(Category::Chair),
            "table" => Ok(Category::Table),
            "lamp" => Ok(Category::Lamp),
            _ => Err(invalid(format!("unknown category `{s}` (expected chair, table or lamp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    /// Axis-aligned box.
    Box { center: Vec3, half: Vec3 },
    /// Cylinder with its axis along y.
    Cylinder { center: Vec3, radius: f64, half_height: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Primitive::Box { center, half } => {
                let q: Vec3 = std::array::from_fn(|a| (p[a] - center[a]).abs() - half[a]);
                let outside = geom::norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let dx = (p[0] - center[0]).hypot(p[2] - center[2]) - radius;
                let dy = (p[1] - center[1]).abs() - half_height;
                dx.max(0.0).hypot(dy.max(0.0)) + dx.max(dy).min(0.0)
            }
        }
    }
}

/// Union of primitives, rotated about the vertical axis by `yaw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub category: Category,
    pub yaw: f64,
    pub primitives: Vec<Primitive>,
}

impl Scene {
    /// Signed distance; negative inside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let (s, c) = self.yaw.sin_cos();
        // inverse rotation of the query point
        let q = [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]];
        self.primitives.iter().map(|pr| pr.sdf(q)).fold(f64::INFINITY, f64::min)
    }
}

fn jitter(rng: &mut Rng, base: f64, rel: f64) -> f64 {
    base * (1.0 + rng.random_range(-rel..=rel))
}

/// Random object of the given category, centered on the origin and inside
/// `[-0.4, 0.4]^3` for every yaw.
pub fn make_scene(category: Category, rng: &mut Rng) -> Scene {
    let mut prims = Vec::new();
    match category {
        Category::Chair => {
            let w = jitter(rng, 0.22, 0.15);
            let seat_y = jitter(rng, -0.05, 0.4);
            let seat_t = jitter(rng, 0.035, 0.2);
            let leg = jitter(rng, 0.03, 0.2);
            let back_h = jitter(rng, 0.28, 0.2).min(0.38 - seat_y - seat_t);
            prims.push(Primitive::Box { center: [0.0, seat_y, 0.0], half: [w, seat_t, w] });
            prims.push(Primitive::Box {
                center: [0.0, seat_y + seat_t + back_h / 2.0, -w + seat_t],
                half: [w, back_h / 2.0, seat_t],
            });
            let leg_h = (seat_y - seat_t + 0.38) / 2.0;
            for (sx, sz) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                prims.push(Primitive::Box {
                    center: [sx * (w - leg), seat_y - seat_t - leg_h, sz * (w - leg)],
                    half: [leg, leg_h, leg],
                });
            }
        }
        Category::Table => {
            let wx = jitter(rng, 0.27, 0.12);
            let wz = jitter(rng, 0.2, 0.2);
            let top_y = jitter(rng, 0.12, 0.3);
            let top_t = jitter(rng, 0.035, 0.2);
            let leg = jitter(rng, 0.03, 0.2);
            prims.push(Primitive::Box { center: [0.0, top_y, 0.0], half: [wx, top_t, wz] });
            let leg_h = (top_y - top_t + 0.38) / 2.0;
            for (sx, sz) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                prims.push(Primitive::Box {
                    center: [sx * (wx - leg), top_y - top_t - leg_h, sz * (wz - leg)],
                    half: [leg, leg_h, leg],
                });
            }
        }
        Category::Lamp => {
            let base_r = jitter(rng, 0.14, 0.2);
            let base_h = jitter(rng, 0.03, 0.2);
            let pole_r = jitter(rng, 0.035, 0.2);
            let shade_r = jitter(rng, 0.2, 0.2);
            let shade_h = jitter(rng, 0.09, 0.2);
            let shade_y = 0.38 - shade_h;
            let base_y = -0.38 + base_h;
            prims.push(Primitive::Cylinder { center: [0.0, base_y, 0.0], radius: base_r, half_height: base_h });
            let pole_half = (shade_y - base_y) / 2.0;
            prims.push(Primitive::Cylinder { center: [0.0, base_y + pole_half, 0.0], radius: pole_r, half_height: pole_half });
            prims.push(Primitive::Cylinder { center: [0.0, shade_y, 0.0], radius: shade_r, half_height: shade_h });
        }
    }
    Scene { category, yaw: rng.random_range(0.0..std::f64::consts::TAU), primitives: prims }
}
