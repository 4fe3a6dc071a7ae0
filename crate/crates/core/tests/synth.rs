use voxdiff::config::RunConfig;
use voxdiff::denoiser::train::view_pairs;
use voxdiff::geom;
use voxdiff::grid::{voxelize, PointCloud};
use voxdiff::pipeline::{input_grid, synthesize};
use voxdiff::render::generate_rays;
use voxdiff::seed::rng_from;
use voxdiff::synth::dataset::{read_dataset, write_dataset};
use voxdiff::synth::{make_scene, render_observation, Category, SensorNoise};

fn noise_free() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.noise_sigma_voxels = 0.0;
    cfg.data.dropout = 0.0;
    cfg
}

#[test]
fn dataset_is_reproducible_and_every_object_has_a_pair() {
    let cfg = RunConfig::default();
    let a = synthesize(&cfg).unwrap();
    let b = synthesize(&cfg).unwrap();
    assert_eq!(a.len(), cfg.data.objects);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.scene, y.scene);
        assert_eq!(x.gt, y.gt);
        assert!(x.training.views.len() >= 8);
        for (v, w) in x.training.views.iter().zip(&y.training.views) {
            assert_eq!(v.view, w.view);
            assert_eq!(v.cloud, w.cloud);
            assert_eq!(v.mono_depth, w.mono_depth);
        }
        assert!(!view_pairs(&x.training, cfg.second_view_ratio).unwrap().is_empty());
    }
}

#[test]
fn noise_free_union_of_views_approaches_the_scene_voxelization() {
    let cfg = noise_free();
    let objects = synthesize(&cfg).unwrap();
    let mut total = 0.0;
    for o in &objects {
        let all: Vec<usize> = (0..o.training.views.len()).collect();
        let union = input_grid(&o.training, &all, &cfg.grid, cfg.voxel_threshold).unwrap();
        let iou = union.iou(&o.gt).unwrap();
        let (mut fp, mut fn_) = (0, 0);
        for (a, b) in union.values().iter().zip(o.gt.values()) {
            if *a == 1.0 && *b == 0.0 { fp += 1; }
            if *a == 0.0 && *b == 1.0 { fn_ += 1; }
        }
        println!("{} union IoU {iou:.3} gt {} fp {fp} fn {fn_}", o.id, o.gt.occupied_count());
        total += iou;
    }
    let mean = total / objects.len() as f64;
    println!("mean union IoU {mean:.3}");
    assert!(mean >= 0.9, "mean union IoU {mean:.3} < 0.9");
}

#[test]
fn backprojected_points_lie_within_three_sigma_of_the_surface() {
    let spec = RunConfig::default().grid;
    let sigma = 0.5 * spec.voxel_size;
    let mut rng = rng_from(21);
    for cat in Category::ALL {
        let scene = make_scene(cat, &mut rng);
        let cam = voxdiff::render::Camera::look_at([1.2, 0.6, -1.5], [0.0; 3], [0.0, 1.0, 0.0], 80.0, 80.0, 48, 48).unwrap();
        let obs = render_observation(&scene, &cam, SensorNoise { sigma, dropout: 0.1 }, &mut rng).unwrap();
        assert!(obs.cloud.len() > 100);
        let near = obs.cloud.points().iter().filter(|&&p| scene.sdf(p).abs() <= 3.0 * sigma + 1e-6).count();
        assert!(near as f64 >= 0.99 * obs.cloud.len() as f64, "{cat:?}: {near} of {}", obs.cloud.len());
    }
}

#[test]
fn noise_free_depth_round_trips_through_backprojection() {
    let mut rng = rng_from(8);
    let scene = make_scene(Category::Chair, &mut rng);
    let cam = voxdiff::render::Camera::look_at([0.0, 0.8, -1.6], [0.0; 3], [0.0, 1.0, 0.0], 36.0, 36.0, 32, 32).unwrap();
    let obs = render_observation(&scene, &cam, SensorNoise::NONE, &mut rng).unwrap();
    let rays = generate_rays(&cam);
    let mut k = 0;
    for (i, ray) in rays.iter().enumerate() {
        if !obs.view.depth.valid[i] {
            continue;
        }
        let p = obs.cloud.points()[k];
        k += 1;
        let d = geom::norm(geom::sub(p, ray.origin));
        assert!((d - obs.view.depth.image.data[i]).abs() <= 1e-6);
    }
    assert_eq!(k, obs.cloud.len());
}

#[test]
fn dataset_round_trips_through_disk() {
    let mut cfg = RunConfig::default();
    cfg.data.objects = 2;
    let objects = synthesize(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), cfg.seed, &cfg.data, &cfg.grid, cfg.voxel_threshold, cfg.second_view_ratio, &objects).unwrap();
    let (manifest, loaded) = read_dataset(dir.path()).unwrap();
    assert_eq!(manifest.seed, cfg.seed);
    assert_eq!(manifest.objects.len(), 2);
    for (o, l) in objects.iter().zip(&loaded) {
        assert_eq!(o.id, l.id);
        assert_eq!(o.gt, l.gt);
        for (v, w) in o.training.views.iter().zip(&l.training.views) {
            assert_eq!(v.view.silhouette, w.view.silhouette);
            assert_eq!(v.view.camera, w.view.camera);
            assert_eq!(v.grid, voxelize(&PointCloud::world(w.cloud.points().to_vec()).unwrap(), &cfg.grid, cfg.voxel_threshold).unwrap());
        }
    }
}
