use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svbrdf_core::image::HdrImage;
use svbrdf_core::render::{
    log_tonemap, render_flash, render_point_light, render_view, render_vjp, render_with, sample_loss_views,
    LossView, PointLight, SceneConfig,
};
use svbrdf_core::shading::ShadingPoint;
use svbrdf_core::{SvbrdfMaps, Vec3};

fn random_maps(rng: &mut impl Rng, w: usize, h: usize) -> SvbrdfMaps {
    let n = w * h;
    let normals = (0..n)
        .flat_map(|_| {
            Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 1.0)
                .normalize()
                .to_array()
        })
        .collect();
    SvbrdfMaps::new(
        w,
        h,
        (0..3 * n).map(|_| rng.random()).collect(),
        normals,
        (0..n).map(|_| rng.random_range(0.1..1.0)).collect(),
        (0..n).map(|_| rng.random()).collect(),
    )
    .unwrap()
}

fn dot(a: &HdrImage, b: &HdrImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn gray(w: usize, h: usize, rough: f64, metal: f64) -> SvbrdfMaps {
    SvbrdfMaps::uniform(w, h, [0.5, 0.4, 0.3], [0.0, 0.0, 1.0], rough, metal).unwrap()
}

#[test]
fn uniform_flash_render_is_radially_symmetric() {
    let maps = gray(16, 16, 0.4, 0.2);
    let img = render_flash(&maps, &SceneConfig::default());
    for row in 0..16 {
        for col in 0..16 {
            let p = img.at(row, col);
            for q in [img.at(15 - row, col), img.at(row, 15 - col), img.at(col, row)] {
                for c in 0..3 {
                    assert!((p[c] - q[c]).abs() <= 1e-5 * p[c].abs().max(1e-3));
                }
            }
        }
    }
}

#[test]
fn flash_render_linear_in_intensity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let maps = random_maps(&mut rng, 8, 8);
    let cfg = SceneConfig::default();
    let mut doubled = cfg.clone();
    doubled.flash_intensity = [2.0; 3];
    let a = render_flash(&maps, &cfg);
    let b = render_flash(&maps, &doubled);
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn black_dielectric_peaks_under_the_flash() {
    let maps = SvbrdfMaps::uniform(17, 17, [0.0; 3], [0.0, 0.0, 1.0], 0.3, 0.0).unwrap();
    let img = render_flash(&maps, &SceneConfig::default());
    assert_eq!(img.argmax_luminance(), 8 * 17 + 8);
    assert!(img.data.iter().all(|v| *v >= 0.0));
}

#[test]
fn collocated_point_light_equals_flash() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let maps = random_maps(&mut rng, 12, 10);
    let cfg = SceneConfig::default();
    let a = render_flash(&maps, &cfg);
    let b = render_point_light(&maps, &cfg.flash_light(), cfg.camera_position(), &cfg);
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() <= 1e-6);
    }
}

#[test]
fn red_light_leaves_other_channels_dark() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let maps = random_maps(&mut rng, 8, 8);
    let light = PointLight {
        position: Vec3::new(0.1, 0.2, 0.4),
        color: [1.0, 0.0, 0.0],
    };
    let img = render_point_light(&maps, &light, Vec3::new(-0.1, 0.0, 0.5), &SceneConfig::default());
    for px in img.data.chunks_exact(3) {
        assert_eq!(px[1], 0.0);
        assert_eq!(px[2], 0.0);
    }
    assert!(img.data.iter().any(|v| *v > 0.0));
}

#[test]
fn light_color_linearity_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps = random_maps(&mut rng, 8, 8);
    let cfg = SceneConfig::default();
    let view = Vec3::new(0.2, 0.1, 0.5);
    let mk = |color| PointLight {
        position: Vec3::new(-0.2, 0.1, 0.5),
        color,
    };
    let a = render_point_light(&maps, &mk([0.3, 0.7, 1.1]), view, &cfg);
    let b = render_point_light(&maps, &mk([1.0, 1.0, 1.0]), view, &cfg);
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        let s = [0.3, 0.7, 1.1][i % 3];
        assert!((x - s * y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn mirror_light_position_maximizes_specular() {
    // white metal: F0 = 1 and no diffuse, so only the specular lobe responds
    let maps = SvbrdfMaps::uniform(17, 17, [1.0; 3], [0.0, 0.0, 1.0], 0.1, 1.0).unwrap();
    let cfg = SceneConfig::default();
    let radius = 2.0 * cfg.patch_size_m;
    let view_dir = Vec3::new(0.5, 0.0, 0.8).normalize();
    let view = view_dir * radius;
    // the center texel sits at the origin, where the mirror configuration is exact
    let response = |theta: f64| {
        let light = PointLight {
            position: Vec3::new(-theta.sin(), 0.0, theta.cos()) * radius,
            color: [1.0; 3],
        };
        render_point_light(&maps, &light, view, &cfg).at(8, 8)[0]
    };
    let mirror_theta = view_dir.x.atan2(view_dir.z);
    let sweep: Vec<f64> = (0..50).map(|i| -1.2 + 2.4 * i as f64 / 49.0).collect();
    let best = sweep
        .iter()
        .copied()
        .max_by(|a, b| response(*a).total_cmp(&response(*b)))
        .unwrap();
    assert!((best - mirror_theta).abs() <= 2.4 / 49.0, "best {best}, mirror {mirror_theta}");
}

#[test]
fn loss_views_deterministic_and_in_upper_hemisphere() {
    let cfg = SceneConfig::default();
    let a = sample_loss_views(&mut ChaCha8Rng::seed_from_u64(9), 10, &cfg).unwrap();
    let b = sample_loss_views(&mut ChaCha8Rng::seed_from_u64(9), 10, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
    for v in &a {
        assert!(v.light.position.z > 0.0 && v.view_pos.z > 0.0);
        assert!(v.light.color.iter().all(|c| (0.5..=1.5).contains(c)));
    }
    assert!(a[..5].iter().all(|v| v.mirror_point.is_none()));
    for v in &a[5..] {
        let at = v.mirror_point.unwrap();
        let l = (v.light.position - at).normalize();
        let o = (v.view_pos - at).normalize();
        let r = Vec3::new(-l.x, -l.y, l.z);
        assert!((r - o).length() <= 1e-6);
    }
}

#[test]
fn log_tonemap_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data: Vec<f64> = (0..3 * 10_000).map(|_| rng.random_range(0.0..100.0)).collect();
    let img = HdrImage::new(10_000, 1, data.clone()).unwrap();
    let out = log_tonemap(&img).unwrap();
    for i in 0..data.len() - 1 {
        let (a, b) = (data[i], data[i + 1]);
        if a < b {
            assert!(out.data[i] < out.data[i + 1]);
        } else if a > b {
            assert!(out.data[i] > out.data[i + 1]);
        }
    }
}

fn random_view(rng: &mut impl Rng, cfg: &SceneConfig) -> LossView {
    let mut views = sample_loss_views(rng, 2, cfg).unwrap();
    views.swap_remove(if rng.random() { 0 } else { 1 })
}

fn params_of(maps: &SvbrdfMaps) -> Vec<[f64; 8]> {
    (0..maps.pixel_count()).map(|i| maps.point(i).to_params()).collect()
}

/// `<upstream, render(params)>` through the plain forward renderer.
fn projected(w: usize, h: usize, cfg: &SceneConfig, view: &LossView, params: &[[f64; 8]], up: &[f64]) -> f64 {
    let img = render_with(w, h, cfg, view, |i| ShadingPoint::from_params(params[i]));
    img.data.iter().zip(up).map(|(a, b)| a * b).sum()
}

#[test]
fn vjp_matches_finite_differences() {
    let (w, h) = (16, 16);
    let cfg = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // highlights at roughness 0.1 are narrower than 1e-4 in n.h, so a wider
    // step measures truncation error rather than the gradient
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let maps = random_maps(&mut rng, w, h);
        let view = random_view(&mut rng, &cfg);
        let up = HdrImage::new(w, h, (0..3 * w * h).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let analytic = render_vjp(&maps, &view, &cfg, &up).unwrap();
        let mut params = params_of(&maps);
        let (mut num2, mut diff2, mut ana2) = (0.0, 0.0, 0.0);
        for i in 0..w * h {
            for k in 0..8 {
                let orig = params[i][k];
                params[i][k] = orig + step;
                let hi = projected(w, h, &cfg, &view, &params, &up.data);
                params[i][k] = orig - step;
                let lo = projected(w, h, &cfg, &view, &params, &up.data);
                params[i][k] = orig;
                let fd = (hi - lo) / (2.0 * step);
                let a = analytic.per_pixel[i][k];
                num2 += fd * fd;
                ana2 += a * a;
                diff2 += (fd - a) * (fd - a);
            }
        }
        let rel = diff2.sqrt() / num2.sqrt().max(ana2.sqrt()).max(1e-12);
        worst = worst.max(rel);
        assert!(rel <= 1e-3, "relative error {rel}");
    }
    eprintln!("worst vjp relative error {worst:e}");
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let maps = random_maps(&mut rng, 8, 8);
    let cfg = SceneConfig::default();
    let g = render_vjp(&maps, &cfg.flash_view(), &cfg, &HdrImage::zeros(8, 8)).unwrap();
    assert!(g.per_pixel.iter().all(|p| p.iter().all(|v| *v == 0.0)));
    assert!(render_vjp(&maps, &cfg.flash_view(), &cfg, &HdrImage::zeros(8, 4)).is_err());
}

#[test]
fn uniform_metallic_gradient_matches_finite_difference() {
    let (w, h) = (16, 16);
    let cfg = SceneConfig::default();
    let view = sample_loss_views(&mut ChaCha8Rng::seed_from_u64(13), 10, &cfg).unwrap()[7];
    let make = |m: f64| SvbrdfMaps::uniform(w, h, [0.6, 0.5, 0.2], [0.0, 0.0, 1.0], 0.3, m).unwrap();
    let ones = HdrImage::new(w, h, vec![1.0; 3 * w * h]).unwrap();
    let g = render_vjp(&make(0.5), &view, &cfg, &ones).unwrap();
    let analytic: f64 = g.metallic().iter().sum();
    let step = 1e-4;
    let fd = (dot(&render_view(&make(0.5 + step), &view, &cfg), &ones)
        - dot(&render_view(&make(0.5 - step), &view, &cfg), &ones))
        / (2.0 * step);
    assert!((analytic - fd).abs() <= 1e-3 * fd.abs(), "{analytic} vs {fd}");
}

#[test]
fn gradient_is_local_to_the_pixel() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let maps = random_maps(&mut rng, 8, 8);
    let cfg = SceneConfig::default();
    let mut up = HdrImage::zeros(8, 8);
    let target = 3 * 8 + 5;
    up.data[3 * target..3 * target + 3].copy_from_slice(&[1.0, 0.5, -0.25]);
    let g = render_vjp(&maps, &cfg.flash_view(), &cfg, &up).unwrap();
    for (i, p) in g.per_pixel.iter().enumerate() {
        if i == target {
            assert!(p.iter().any(|v| *v != 0.0));
        } else {
            assert!(p.iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn renders_are_bit_identical_across_runs() {
    let cfg = SceneConfig::default();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let maps = random_maps(&mut rng, 16, 16);
        let views = sample_loss_views(&mut rng, 10, &cfg).unwrap();
        views.iter().map(|v| render_view(&maps, v, &cfg).data).collect::<Vec<_>>()
    };
    let a = run();
    let b = run();
    assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

