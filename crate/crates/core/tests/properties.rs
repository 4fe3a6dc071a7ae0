use proptest::prelude::*;
use rand::seq::SliceRandom;
use voxdiff::diffusion::{q_sample, VarianceSchedule};
use voxdiff::geom::{self, Vec3};
use voxdiff::grid::{GridSpec, OccupancyGrid, PointCloud};
use voxdiff::mesh::{marching_cubes, sample_surface};
use voxdiff::metrics::{chamfer, emd_total, nearest_sq_dists, precision_recall_f1, tmd, uhd};
use voxdiff::render::{
    composite, depth_loss, render_depth, render_silhouette, transmittance, trilinear, Camera, DepthMap, Image,
    RaySamples, RenderMode, RenderSettings, RenderedDepth,
};
use voxdiff::seed::rng_from;

fn pts(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..max)
}

fn shuffled(p: &[Vec3], seed: u64) -> Vec<Vec3> {
    let mut out = p.to_vec();
    out.shuffle(&mut rng_from(seed));
    out
}

fn pc(p: Vec<Vec3>) -> PointCloud {
    PointCloud::world(p).unwrap()
}

fn rotation(axis: Vec3, angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = geom::normalize(axis);
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}

fn apply(r: &[[f64; 3]; 3], t: Vec3, p: Vec3) -> Vec3 {
    let q = [0, 1, 2].map(|i| geom::dot(r[i], p));
    geom::add(q, t)
}

fn point_triangle_dist(p: Vec3, [a, b, c]: [Vec3; 3]) -> f64 {
    let n = geom::normalize(geom::cross(geom::sub(b, a), geom::sub(c, a)));
    let h = geom::dot(geom::sub(p, a), n);
    let q = geom::sub(p, geom::scale(n, h));
    let inside = [(a, b), (b, c), (c, a)]
        .iter()
        .all(|&(u, v)| geom::dot(geom::cross(geom::sub(v, u), geom::sub(q, u)), n) >= -1e-12);
    if inside {
        return h.abs();
    }
    [(a, b), (b, c), (c, a)]
        .iter()
        .map(|&(u, v)| {
            let e = geom::sub(v, u);
            let s = (geom::dot(geom::sub(p, u), e) / geom::dot(e, e)).clamp(0.0, 1.0);
            geom::dist(p, geom::add(u, geom::scale(e, s)))
        })
        .fold(f64::INFINITY, f64::min)
}

fn unit_grid(n: usize, values: Vec<f64>) -> OccupancyGrid {
    OccupancyGrid::from_values(GridSpec::new([n; 3], 1.0, [0.0; 3]).unwrap(), values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_alpha_bar_decreases(steps in 1usize..200, b0 in 1e-5f64..0.1, span in 0.0f64..0.5) {
        let s = VarianceSchedule::linear(steps, b0, b0 + span).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() <= 1e-12);
        }
    }

    #[test]
    fn q_sample_is_affine(
        x in prop::collection::vec(0.0f64..1.0, 8),
        y in prop::collection::vec(0.0f64..1.0, 8),
        z1 in prop::collection::vec(-3.0f64..3.0, 8),
        z2 in prop::collection::vec(-3.0f64..3.0, 8),
        w in -2.0f64..2.0,
        t in 1usize..=50,
    ) {
        let s = VarianceSchedule::linear(50, 2e-3, 0.4).unwrap();
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| w * p + (1.0 - w) * q).collect::<Vec<_>>();
        let lhs = q_sample(&mix(&x, &y), t, &mix(&z1, &z2), &s).unwrap();
        let qa = q_sample(&x, t, &z1, &s).unwrap();
        let qb = q_sample(&y, t, &z2, &s).unwrap();
        for (l, r) in lhs.iter().zip(mix(&qa, &qb)) {
            prop_assert!((l - r).abs() <= 1e-12);
        }
        let mean = q_sample(&x, t, &[0.0; 8], &s).unwrap();
        for (m, x) in mean.iter().zip(&x) {
            prop_assert_eq!(*m, s.alpha_bar(t).sqrt() * x);
        }
    }

    #[test]
    fn transmittance_starts_at_one_and_never_grows(occ in prop::collection::vec(0.0f64..1.0, 2..40), exp in any::<bool>()) {
        let mode = if exp { RenderMode::Exponential } else { RenderMode::Compositing };
        let t = transmittance(&occ, &vec![0.05; occ.len()], mode);
        prop_assert_eq!(t[0], 1.0);
        for w in t.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn compositing_silhouette_is_bounded_and_monotone(
        occ in prop::collection::vec(0.0f64..=1.0, 2..40),
        k in any::<prop::sample::Index>(),
        bump in 0.0f64..1.0,
    ) {
        let s = RaySamples::uniform([0.0; 3], [0.0, 0.0, 1.0], 0.5, 2.0, occ.len()).unwrap();
        let v = composite(&occ, &s, RenderMode::Compositing);
        prop_assert!((0.0..=1.0).contains(&v.silhouette));
        let mut more = occ.clone();
        let i = k.index(occ.len());
        more[i] = (more[i] + bump).min(1.0);
        prop_assert!(composite(&more, &s, RenderMode::Compositing).silhouette >= v.silhouette);
    }

    #[test]
    fn depth_weight_is_the_silhouette(values in prop::collection::vec(0.0f64..1.0, 64), exp in any::<bool>()) {
        let g = unit_grid(4, values);
        let cam = Camera::look_at([1.5, 1.2, -4.0], [1.5; 3], [0.0, 1.0, 0.0], 6.0, 6.0, 6, 5).unwrap();
        let mode = if exp { RenderMode::Exponential } else { RenderMode::Compositing };
        let settings = RenderSettings { mode, ..RenderSettings::default() };
        let (_, weight) = render_depth(&g, &cam, &settings).unwrap();
        prop_assert_eq!(weight, render_silhouette(&g, &cam, &settings).unwrap());
    }

    #[test]
    fn depth_loss_ignores_affine_rendered_depth(
        d_hat in prop::collection::vec(0.5f64..3.0, 12),
        d in prop::collection::vec(0.5f64..3.0, 12),
        a in prop_oneof![-4.0f64..-0.25, 0.25f64..4.0],
        b in -5.0f64..5.0,
    ) {
        let img = |v: Vec<f64>| Image::new(4, 3, v).unwrap();
        let weight = img(vec![1.0; 12]);
        let measured = [DepthMap::new(img(d), vec![true; 12]).unwrap()];
        let base = img(d_hat.clone());
        let moved = img(d_hat.iter().map(|x| a * x + b).collect());
        let l0 = depth_loss(&[RenderedDepth { depth: &base, weight: &weight }], &measured, 0.5).unwrap().loss;
        let l1 = depth_loss(&[RenderedDepth { depth: &moved, weight: &weight }], &measured, 0.5).unwrap().loss;
        prop_assert!((l0 - l1).abs() <= 1e-9 * (1.0 + l0));
    }

    #[test]
    fn metrics_ignore_point_order(a in pts(40), b in pts(40), seed in any::<u64>()) {
        let (pa, pb) = (pc(a.clone()), pc(b.clone()));
        let (sa, sb) = (pc(shuffled(&a, seed)), pc(shuffled(&b, seed ^ 1)));
        prop_assert_eq!(precision_recall_f1(&pa, &pb, 0.2).unwrap(), precision_recall_f1(&sa, &sb, 0.2).unwrap());
        prop_assert!((chamfer(&pa, &pb).unwrap() - chamfer(&sa, &sb).unwrap()).abs() <= 1e-12);
        prop_assert!((uhd(&pa, std::slice::from_ref(&pb)).unwrap() - uhd(&sa, std::slice::from_ref(&sb)).unwrap()).abs() <= 1e-12);
        let n = a.len().min(b.len());
        let e0 = emd_total(&a[..n], &b[..n]).unwrap();
        let e1 = emd_total(&shuffled(&a[..n], seed), &shuffled(&b[..n], seed ^ 2)).unwrap();
        prop_assert!((e0 - e1).abs() <= 1e-9 * (1.0 + e0));
        let t0 = tmd(&[pa.clone(), pb.clone()]).unwrap();
        let t1 = tmd(&[sb, sa]).unwrap();
        prop_assert!((t0 - t1).abs() <= 1e-12);
    }

    #[test]
    fn f1_lies_between_precision_and_recall(a in pts(40), b in pts(40), tau in 0.01f64..1.0) {
        let pr = precision_recall_f1(&pc(a), &pc(b), tau).unwrap();
        if pr.precision + pr.recall > 0.0 {
            prop_assert!(pr.f1 <= pr.precision.max(pr.recall) + 1e-15);
            prop_assert!(pr.f1 >= pr.precision.min(pr.recall) - 1e-15);
        } else {
            prop_assert_eq!(pr.f1, 0.0);
        }
    }

    #[test]
    fn emd_dominates_one_sided_nearest_neighbor(a in pts(30), b in pts(30)) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let nn: f64 = nearest_sq_dists(a, b).unwrap().iter().map(|d| d.sqrt()).sum();
        prop_assert!(emd_total(a, b).unwrap() >= nn - 1e-9);
    }

    #[test]
    fn metrics_are_rigid_invariant(
        a in pts(30),
        b in pts(30),
        axis in prop::array::uniform3(-1.0f64..1.0),
        angle in 0.0f64..6.3,
        shift in prop::array::uniform3(-5.0f64..5.0),
    ) {
        prop_assume!(geom::norm(axis) > 0.1);
        let r = rotation(axis, angle);
        let mv = |p: &[Vec3]| p.iter().map(|&q| apply(&r, shift, q)).collect::<Vec<_>>();
        let (pa, pb) = (pc(a.clone()), pc(b.clone()));
        let (ma, mb) = (pc(mv(&a)), pc(mv(&b)));
        let f0 = precision_recall_f1(&pa, &pb, 0.3).unwrap();
        let f1 = precision_recall_f1(&ma, &mb, 0.3).unwrap();
        prop_assert!((f0.f1 - f1.f1).abs() <= 1e-9);
        prop_assert!((chamfer(&pa, &pb).unwrap() - chamfer(&ma, &mb).unwrap()).abs() <= 1e-9);
        prop_assert!((uhd(&pa, std::slice::from_ref(&pb)).unwrap() - uhd(&ma, std::slice::from_ref(&mb)).unwrap()).abs() <= 1e-9);
        prop_assert!((tmd(&[pa, pb]).unwrap() - tmd(&[ma, mb]).unwrap()).abs() <= 1e-9);
        let n = a.len().min(b.len());
        let e0 = emd_total(&a[..n], &b[..n]).unwrap();
        let e1 = emd_total(&mv(&a[..n]), &mv(&b[..n])).unwrap();
        prop_assert!((e0 - e1).abs() <= 1e-9 * (1.0 + e0));
    }

    #[test]
    fn interior_fields_mesh_watertight_on_the_iso_set(inner in prop::collection::vec(0.0f64..1.0, 64), seed in any::<u64>()) {
        // 4^3 random values inside a zero border of width 1
        let n = 6;
        let mut values = vec![0.0; n * n * n];
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    values[(x + 1) + n * ((y + 1) + n * (z + 1))] = inner[x + 4 * (y + 4 * z)];
                }
            }
        }
        let g = unit_grid(n, values);
        let mesh = marching_cubes(&g, 0.5).unwrap();
        prop_assert!(mesh.is_watertight());
        for v in &mesh.vertices {
            prop_assert!((trilinear(&g, *v) - 0.5).abs() <= 1e-6);
        }
        if !mesh.is_empty() {
            let cloud = sample_surface(&mesh, 50, &mut rng_from(seed)).unwrap();
            for p in cloud.points() {
                let d = (0..mesh.triangles.len())
                    .map(|i| point_triangle_dist(*p, mesh.triangle(i)))
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(d <= 1e-9);
            }
        }
    }
}
