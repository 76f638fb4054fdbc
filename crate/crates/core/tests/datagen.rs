use std::collections::HashSet;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svbrdf_core::datagen::{
    apply_augment, augment, build_dataset, env_pools, normals_from_height, render_input, synthesize_material,
    AugmentParams, DatasetManifest, DatasetOptions, EnvApprox, MaterialRecipe, RecipeKind, Split, MANIFEST_FILE,
};
use svbrdf_core::exposure::{apply_auto_exposure, ExposureParams};
use svbrdf_core::image::{load_material, HdrImage};
use svbrdf_core::render::{render_flash, DirectionalLight, SceneConfig};
use svbrdf_core::{SvbrdfMaps, Vec3};

fn recipe(kind: RecipeKind, seed: u64) -> MaterialRecipe {
    MaterialRecipe::random(kind, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn synthesis_is_deterministic_and_valid() {
    for (i, kind) in RecipeKind::ALL.into_iter().enumerate() {
        for seed in 0..4 {
            let r = recipe(kind, 10 * i as u64 + seed);
            let a = synthesize_material(&r, 48).unwrap();
            let b = synthesize_material(&r, 48).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
        }
    }
}

#[test]
fn recipes_roundtrip_through_json() {
    let r = recipe(RecipeKind::BlendOfTwo, 3);
    let back: MaterialRecipe = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.parts.len(), 2);
}

#[test]
fn flat_height_gives_vertical_normals() {
    let n = normals_from_height(&[0.3; 20], 5, 4).unwrap();
    for c in n.chunks_exact(3) {
        assert_eq!(c, [0.0, 0.0, 1.0]);
    }
}

#[test]
fn height_ramp_tilts_normals_against_the_slope() {
    // h = 0.1 u rises to the right, so normals lean left
    let w = 8;
    let h: Vec<f64> = (0..w * w).map(|i| 0.1 * (i % w) as f64 / w as f64).collect();
    let n = normals_from_height(&h, w, w).unwrap();
    let want = Vec3::new(-0.1, 0.0, 1.0).normalize();
    for c in n.chunks_exact(3) {
        assert!((Vec3::new(c[0], c[1], c[2]) - want).length() < 1e-12);
    }
}

#[test]
fn metal_flakes_are_binary() {
    let maps = synthesize_material(&recipe(RecipeKind::MetalFlakes, 7), 128).unwrap();
    assert!(maps.metallic().iter().any(|m| *m < 0.1));
    assert!(maps.metallic().iter().any(|m| *m > 0.9));
}

fn material(seed: u64, n: usize) -> SvbrdfMaps {
    synthesize_material(&recipe(RecipeKind::FractalNoise, seed), n).unwrap()
}

#[test]
fn identity_augmentation_is_a_sub_image() {
    let src = material(1, 32);
    let p = AugmentParams::identity((32, 32), 16);
    let out = apply_augment(&src, &p, 16).unwrap();
    for r in 0..16 {
        for c in 0..16 {
            let a = out.point(r * 16 + c);
            let b = src.point((r + 8) * 32 + c + 8);
            assert!((Vec3::from_array(a.base_color) - Vec3::from_array(b.base_color)).length() < 1e-12);
            assert!((a.normal - b.normal).length() < 1e-12);
            assert!((a.roughness - b.roughness).abs() < 1e-12);
            assert!((a.metallic - b.metallic).abs() < 1e-12);
        }
    }
}

/// Rotating the material must agree with deriving normals from the rotated
/// height field. The height is carried through the augmentation in the red
/// channel of the base color.
#[test]
fn quarter_turn_keeps_normals_consistent_with_height() {
    let n = 32;
    let amp = 0.02;
    let field = |i: usize| {
        let (x, y) = ((i % n) as f64 / n as f64, (i / n) as f64 / n as f64);
        0.5 + 0.3 * (2.0 * PI * x).sin() * (PI * y).cos() + 0.1 * (6.0 * x + 2.0 * y).cos()
    };
    let h: Vec<f64> = (0..n * n).map(field).collect();
    let normals = normals_from_height(&h.iter().map(|v| v * amp).collect::<Vec<_>>(), n, n).unwrap();
    let src = SvbrdfMaps::new(
        n,
        n,
        h.iter().flat_map(|v| [*v, 0.5, 0.5]).collect(),
        normals,
        vec![0.5; n * n],
        vec![0.0; n * n],
    )
    .unwrap();
    for rot90 in 1..4 {
        let p = AugmentParams {
            rot90,
            ..AugmentParams::identity((n, n), n)
        };
        let out = apply_augment(&src, &p, n).unwrap();
        let h_rot: Vec<f64> = out.base_color().chunks_exact(3).map(|c| c[0] * amp).collect();
        let expect = normals_from_height(&h_rot, n, n).unwrap();
        for r in 1..n - 1 {
            for c in 1..n - 1 {
                let i = r * n + c;
                let a = out.point(i).normal;
                let b = Vec3::new(expect[3 * i], expect[3 * i + 1], expect[3 * i + 2]);
                assert!((a - b).length() <= 1e-3, "rot90 {rot90} at ({r}, {c}): {a:?} vs {b:?}");
                assert!((a.length() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn seven_valid_crops_per_call() {
    let src = material(2, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let crops = augment(&src, &mut rng, 7, 32).unwrap();
    assert_eq!(crops.len(), 7);
    for (p, m) in &crops {
        assert_eq!(m.resolution(), (32, 32));
        m.validate().unwrap();
        assert!((0.5..=1.0).contains(&p.scale));
        assert!(p.rot90 < 4);
    }
    assert!(augment(&material(2, 16), &mut rng, 1, 32).is_err());
}

#[test]
fn uniform_environment_irradiance_is_pi_times_radiance() {
    let env = HdrImage::new(64, 32, vec![0.5; 3 * 64 * 32]).unwrap();
    let approx = EnvApprox::from_equirect(&env, 4096, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    // integral of cos over the hemisphere is pi; the equirect grid discretizes it
    assert!((approx.horizontal_irradiance() - 0.5 * PI).abs() < 0.02 * PI);
    assert!(approx.lights.iter().all(|l| l.direction.z > 0.0));
    assert_eq!(EnvApprox::analytic_sky(1, 16).lights.len(), 16);
}

fn glossy(n: usize) -> SvbrdfMaps {
    SvbrdfMaps::uniform(n, n, [0.3, 0.3, 0.3], [0.0, 0.0, 1.0], 0.25, 0.0).unwrap()
}

#[test]
fn flash_only_input_is_exposed_flash_render() {
    let cfg = SceneConfig::default();
    let maps = material(5, 32);
    let a = render_input(&maps, None, &cfg).unwrap();
    let b = apply_auto_exposure(&render_flash(&maps, &cfg), &ExposureParams::default()).unwrap();
    assert_eq!(a, b);
    let env = EnvApprox::analytic_sky(2, 16);
    let c = render_input(&maps, Some(&env), &cfg).unwrap();
    assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn bright_side_light_moves_the_highlight() {
    let cfg = SceneConfig::default();
    let maps = glossy(33);
    let center = 16 * 33 + 16;
    let flash = render_input(&maps, None, &cfg).unwrap().to_hdr();
    assert_eq!(flash.argmax_luminance(), center);
    // mirror direction of this light points at the camera from texel x = +0.1 m
    let x = 0.1;
    let to_cam = (Vec3::new(0.0, 0.0, cfg.camera_height_m) - Vec3::new(x, 0.0, 0.0)).normalize();
    let env = EnvApprox {
        lights: vec![DirectionalLight {
            direction: to_cam.reflect_z(),
            color: [200.0; 3],
        }],
    };
    let lit = render_input(&maps, Some(&env), &cfg).unwrap().to_hdr();
    let arg = lit.argmax_luminance();
    assert_ne!(arg, center);
    assert!(arg % 33 > 16, "highlight at column {}", arg % 33);
}

#[test]
fn env_pools_are_disjoint() {
    let (train, test) = env_pools(None, 9).unwrap();
    assert_eq!((train.len(), test.len()), (20, 6));
    assert!(train.iter().all(|e| !test.contains(e)));
}

fn tiny_options(n: usize) -> DatasetOptions {
    DatasetOptions {
        n_materials: n,
        source_resolution: 32,
        resolution: 16,
        env_lights: 4,
        ..DatasetOptions::default()
    }
}

#[test]
fn dataset_counts_split_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = build_dataset(&tiny_options(10), a.path(), 11).unwrap();
    let train_ids = m.material_ids(Split::Train);
    let test_ids = m.material_ids(Split::Test);
    assert_eq!((train_ids.len(), test_ids.len()), (8, 2));
    let train: HashSet<&str> = train_ids.into_iter().collect();
    assert!(test_ids.iter().all(|id| !train.contains(id)));
    assert_eq!(m.split(Split::Train).count(), 8 * 7 * 3);
    assert_eq!(m.split(Split::Test).count(), 2 * 7);
    for r in &m.records {
        assert!(a.path().join(&r.input_path).exists());
        load_material(&a.path().join(&r.maps_dir)).unwrap().validate().unwrap();
        assert!(r.maps_dir.starts_with(r.split.name()));
    }
    let reread = DatasetManifest::read(&a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(reread, m);

    build_dataset(&tiny_options(10), b.path(), 11).unwrap();
    let bytes = |d: &std::path::Path, p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(bytes(a.path(), MANIFEST_FILE), bytes(b.path(), MANIFEST_FILE));
    for r in m.records.iter().step_by(17) {
        assert_eq!(bytes(a.path(), &r.input_path), bytes(b.path(), &r.input_path));
    }
}

#[test]
fn train_and_test_use_their_own_environments() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&tiny_options(5), dir.path(), 12).unwrap();
    let (train_pool, test_pool) = env_pools(None, 12).unwrap();
    for r in &m.records {
        let env = r.render.env.as_ref().unwrap();
        match r.split {
            Split::Train => assert!(train_pool.contains(env)),
            Split::Test => assert!(test_pool.contains(env)),
        }
    }
}
