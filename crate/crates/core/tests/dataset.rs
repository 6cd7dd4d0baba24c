use tomorib_core::dataset::{
    build_dataset, load_case, load_split, save_case, save_split, simulate_case, NormStats, SimulationSettings,
};
use tomorib_core::geometry::{make_angle_set, ConeBeamGeometry};
use tomorib_core::phantom::{generate_phantom, PhantomConfig};

fn small() -> ConeBeamGeometry {
    ConeBeamGeometry {
        detector_rows: 32,
        detector_cols: 32,
        detector_pixel_mm: 16.0,
        volume_shape: [32, 16, 32],
        angles: make_angle_set(15.0, 7).unwrap(),
        ..Default::default()
    }
}

#[test]
fn no_ribs_gives_zero_deltas() {
    let g = small();
    let cfg = PhantomConfig { n_ribs: 0, ..PhantomConfig::for_geometry(&g) };
    let c = simulate_case(&generate_phantom(3, &cfg).unwrap(), &g, &SimulationSettings::default()).unwrap();
    assert!(c.proj_delta.values().all(|v| v == 0.0));
    assert!(c.vol_delta.data.iter().all(|&v| v == 0.0));
}

#[test]
fn default_case_satisfies_both_identities() {
    let g = ConeBeamGeometry::default();
    let p = generate_phantom(12, &PhantomConfig::for_geometry(&g)).unwrap();
    let c = simulate_case(&p, &g, &SimulationSettings::default()).unwrap();
    for ((f, r), d) in c.proj_full.values().zip(c.proj_ribfree.values()).zip(c.proj_delta.values()) {
        assert_eq!(f - r, d);
    }
    let range = c.vol_full.range();
    assert!(c.linearity_residual <= 1e-4 * range, "{} vs range {range}", c.linearity_residual);
    let again = c.vol_full.sub(&c.vol_ribfree).unwrap();
    assert_eq!(again, c.vol_delta);

    // Rib artifacts concentrate around the ribs: one-voxel dilation holds most energy.
    let near = p.rib_mask.dilate([1, 1, 1]);
    let energy = |sel: &dyn Fn(usize) -> bool| -> f64 {
        c.vol_delta.data.iter().enumerate().filter(|(i, _)| sel(*i)).map(|(_, &v)| (v as f64).powi(2)).sum()
    };
    let frac = energy(&|i| near.data[i] == 1) / energy(&|_| true);
    assert!(frac >= 0.6, "only {frac} of the delta energy is near the ribs");
}

#[test]
fn same_seed_same_case() {
    let g = small();
    let cfg = PhantomConfig::for_geometry(&g);
    let s = SimulationSettings::default();
    let a = simulate_case(&generate_phantom(5, &cfg).unwrap(), &g, &s).unwrap();
    let b = simulate_case(&generate_phantom(5, &cfg).unwrap(), &g, &s).unwrap();
    assert_eq!(a, b);
}

#[test]
fn split_seeds_and_train_only_stats() {
    let g = small();
    let cfg = PhantomConfig::for_geometry(&g);
    let s = SimulationSettings::default();
    let split = build_dataset(3, 2, 100, &g, &cfg, &s).unwrap();
    let train: Vec<u64> = split.train.iter().map(|c| c.seed).collect();
    let test: Vec<u64> = split.test.iter().map(|c| c.seed).collect();
    assert_eq!(train, vec![100, 101, 102]);
    assert_eq!(test, vec![103, 104]);
    assert_eq!(split.stats, NormStats::from_cases(&split.train).unwrap());
    let smaller = build_dataset(3, 1, 100, &g, &cfg, &s).unwrap();
    assert_eq!(smaller.stats, split.stats);
    for c in &split.train {
        for v in c.proj_full.values().chain(c.proj_ribfree.values()) {
            assert!(v >= split.stats.proj_min && v <= split.stats.proj_max);
            let n = split.stats.norm_proj(v);
            assert!((0.0..=1.0).contains(&n));
        }
    }
    assert!(build_dataset(0, 1, 0, &g, &cfg, &s).is_err());
}

#[test]
fn case_and_split_round_trip_through_disk() {
    let g = small();
    let cfg = PhantomConfig::for_geometry(&g);
    let s = SimulationSettings::default();
    let split = build_dataset(2, 1, 40, &g, &cfg, &s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_split(dir.path(), &split).unwrap();
    assert_eq!(load_split(dir.path()).unwrap(), split);

    let one = dir.path().join("single");
    save_case(&one, &split.test[0], &s).unwrap();
    let first = std::fs::read(one.join("vol_delta.vol")).unwrap();
    save_case(&one, &split.test[0], &s).unwrap();
    assert_eq!(std::fs::read(one.join("vol_delta.vol")).unwrap(), first);
    assert_eq!(load_case(&one, &g).unwrap(), split.test[0]);
    let other = g.with_angles(make_angle_set(30.0, 7).unwrap());
    assert!(load_case(&one, &other).is_err());
}
