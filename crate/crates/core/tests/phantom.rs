use tomorib_core::phantom::{generate_phantom, rib_free_of, MaterialTable, PhantomConfig, Spectrum};

#[test]
fn same_seed_is_bit_identical() {
    let c = PhantomConfig::default();
    assert_eq!(generate_phantom(7, &c).unwrap(), generate_phantom(7, &c).unwrap());
    assert_ne!(generate_phantom(7, &c).unwrap().full, generate_phantom(8, &c).unwrap().full);
}

#[test]
fn ribs_stay_out_of_the_lungs() {
    let c = PhantomConfig::default();
    for seed in 0..5 {
        let p = generate_phantom(seed, &c).unwrap();
        let overlap = p.rib_mask.and(&p.lung_region).unwrap().count();
        let lung = p.lung_region.count();
        assert!(p.rib_mask.count() > 200, "seed {seed}: only {} rib voxels", p.rib_mask.count());
        assert!(
            overlap as f64 <= 0.005 * lung as f64,
            "seed {seed}: {overlap} of {lung} lung voxels are rib"
        );
    }
}

#[test]
fn rib_difference_is_exact_and_confined() {
    let p = generate_phantom(11, &PhantomConfig::default()).unwrap();
    let d = p.full.sub(&p.rib_free).unwrap();
    let step = 0.048f32 - 0.02f32;
    for (i, &v) in d.data.iter().enumerate() {
        if p.rib_mask.data[i] == 1 {
            assert_eq!(v, step);
        } else {
            assert_eq!(v, 0.0);
        }
        assert!(v >= 0.0);
    }
    assert_eq!(rib_free_of(&p), p.rib_free);
}

#[test]
fn masks_nest_and_lungs_hold_lung_tissue() {
    for seed in 0..5 {
        let p = generate_phantom(seed, &PhantomConfig::default()).unwrap();
        assert!(p.lesion_mask.count() > 0);
        assert!(p.lesion_mask.is_subset_of(&p.lung_mask).unwrap());
        for i in 0..p.full.len() {
            if p.lung_mask.data[i] == 1 && p.lesion_mask.data[i] == 0 {
                assert_eq!(p.full.data[i], 0.004);
                assert_eq!(p.rib_free.data[i], 0.004);
            }
            if p.lesion_mask.data[i] == 1 {
                assert_eq!(p.full.data[i], p.rib_free.data[i]);
                assert!(p.full.data[i] > 0.004 && p.full.data[i] < 0.02);
            }
        }
        assert!(p.full.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }
}

#[test]
fn no_ribs_means_identical_volumes() {
    let c = PhantomConfig { n_ribs: 0, ..Default::default() };
    let p = generate_phantom(5, &c).unwrap();
    assert_eq!(p.full, p.rib_free);
    assert_eq!(p.rib_mask.count(), 0);
}

#[test]
fn single_bin_spectrum_matches_monoenergetic_build() {
    let p = generate_phantom(2, &PhantomConfig::default()).unwrap();
    let (full, free) = p.volumes_for(&MaterialTable::default(), &Spectrum::mono(60.0)).unwrap();
    assert_eq!(full, vec![p.full.clone()]);
    assert_eq!(free, vec![p.rib_free.clone()]);
    let (hi, _) = p.volumes_for(&MaterialTable::default(), &Spectrum::mono(80.0)).unwrap();
    assert!(hi[0].data.iter().zip(&p.full.data).all(|(a, b)| a <= b));
}

#[test]
fn other_grids_scale_the_anatomy() {
    let c = PhantomConfig { shape: [48, 24, 48], spacing: [409.6 / 48.0, 12.5, 409.6 / 48.0], ..Default::default() };
    let p = generate_phantom(1, &c).unwrap();
    assert_eq!(p.full.shape, [48, 24, 48]);
    assert!(p.rib_mask.count() > 0 && p.lung_mask.count() > 0);
}
