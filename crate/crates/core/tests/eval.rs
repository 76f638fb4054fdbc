use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svbrdf_core::eval::{
    map_errors, percent_worse, AblationEntry, AblationTable, ErrorAccumulator, EvalReport, HeldOutLosses, MapErrors,
    Term, GRID_ROWS,
};
use svbrdf_core::{SvbrdfMaps, Vec3};

fn noisy_maps(rng: &mut impl Rng, n: usize) -> SvbrdfMaps {
    let px = n * n;
    let normals = (0..px)
        .flat_map(|_| {
            Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0)
                .normalize()
                .to_array()
        })
        .collect();
    SvbrdfMaps::new(
        n,
        n,
        (0..3 * px).map(|_| rng.random()).collect(),
        normals,
        (0..px).map(|_| rng.random()).collect(),
        (0..px).map(|_| rng.random()).collect(),
    )
    .unwrap()
}

#[test]
fn perfect_prediction_has_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = noisy_maps(&mut rng, 8);
    assert_eq!(map_errors(&m, &m).unwrap(), MapErrors::default());
}

#[test]
fn constant_offsets_give_their_rmse() {
    let pred = SvbrdfMaps::uniform(4, 4, [0.5; 3], [0.0, 0.0, 1.0], 0.5, 0.0).unwrap();
    let gt = SvbrdfMaps::uniform(4, 4, [0.5; 3], [0.6, 0.0, 0.8], 0.75, 0.0).unwrap();
    let e = map_errors(&pred, &gt).unwrap();
    assert!((e.roughness - 0.25).abs() < 1e-12);
    assert!((e.normal - 0.8f64.acos()).abs() < 1e-12);
    assert_eq!(e.base_color, 0.0);
    assert_eq!(e.metallic, 0.0);
}

#[test]
fn accumulator_pools_texels() {
    let a = SvbrdfMaps::uniform(2, 2, [0.0; 3], [0.0, 0.0, 1.0], 0.0, 0.0).unwrap();
    let b = SvbrdfMaps::uniform(2, 2, [0.0; 3], [0.0, 0.0, 1.0], 1.0, 0.0).unwrap();
    let mut acc = ErrorAccumulator::default();
    acc.add(&a, &a).unwrap();
    acc.add(&a, &b).unwrap();
    // half the texels are off by one
    assert!((acc.finish().unwrap().roughness - 0.5f64.sqrt()).abs() < 1e-12);
    assert!(ErrorAccumulator::default().finish().is_err());
    let small = SvbrdfMaps::uniform(1, 1, [0.0; 3], [0.0, 0.0, 1.0], 0.0, 0.0).unwrap();
    assert!(acc.add(&a, &small).is_err());
}

#[test]
fn downsampling_does_not_increase_noise_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = SvbrdfMaps::uniform(16, 16, [0.5; 3], [0.0, 0.0, 1.0], 0.5, 0.5).unwrap();
    let pred = noisy_maps(&mut rng, 16);
    let native = map_errors(&pred, &gt).unwrap();
    let half = map_errors(&pred.downsample_half().unwrap(), &gt.downsample_half().unwrap()).unwrap();
    assert!(half.base_color <= native.base_color);
    assert!(half.roughness <= native.roughness);
    assert!(half.metallic <= native.metallic);
}

fn errors(v: f64) -> MapErrors {
    MapErrors {
        base_color: v,
        normal: v,
        roughness: v,
        metallic: v,
        diffuse: v,
        specular: v,
    }
}

fn held(v: f64) -> HeldOutLosses {
    HeldOutLosses {
        l_p: v,
        l_r: v,
        l_a: Some(v),
        l_f: Some(v),
    }
}

#[test]
fn ablation_grid_and_held_out_change() {
    let table = AblationTable {
        proposed: errors(0.1),
        proposed_held_out: held(0.2),
        entries: Term::ALL
            .iter()
            .enumerate()
            .map(|(k, &term)| AblationEntry {
                term,
                errors: errors(0.1 + 0.01 * k as f64),
                held_out: held(0.2 * (1.0 + 0.1 * k as f64)),
            })
            .collect(),
    };
    let grid = table.grid().unwrap();
    assert_eq!(grid.len(), GRID_ROWS.len());
    for row in grid {
        assert_eq!(row[0], (0.1, 0.0));
        assert!((row[1].1 + 10.0).abs() < 1e-9);
    }
    assert!((table.held_out_change(Term::Feature).unwrap() + 20.0).abs() < 1e-9);
    let md = table.to_markdown().unwrap();
    assert_eq!(md.lines().count(), 2 + GRID_ROWS.len());
    assert!(md.contains("-L_r") && md.contains("Roughness"));

    let mut partial = table.clone();
    partial.entries.pop();
    assert!(partial.grid().is_err());
    assert!(partial.held_out_change(Term::Adversarial).is_none());
}

#[test]
fn percent_worse_matches_definition() {
    assert_eq!(percent_worse(0.2, 0.2), 0.0);
    assert!((percent_worse(0.2, 0.3) + 50.0).abs() < 1e-12);
    assert!((percent_worse(0.2, 0.1) - 50.0).abs() < 1e-12);
}

#[test]
fn report_json_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let report = EvalReport {
        samples: 3,
        native: errors(0.123456789),
        half: errors(0.1),
        held_out: HeldOutLosses {
            l_a: None,
            ..held(0.3)
        },
        ablation: None,
    };
    report.write_json(&path).unwrap();
    assert_eq!(EvalReport::read_json(&path).unwrap(), report);
    assert!(EvalReport::read_json(&dir.path().join("missing.json")).is_err());
}
