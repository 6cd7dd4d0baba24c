use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tomorib_core::geometry::{make_angle_set, ConeBeamGeometry};
use tomorib_core::phantom::{generate_phantom, sphere_volume, PhantomConfig};
use tomorib_core::projector::{project_mono, Projection2D, ProjectionSet};
use tomorib_core::recon::{
    backproject, fbp, ramp_filter, transfer_function, BackprojectOptions, FilterKind, RampFilter, RampFilterSpec,
};
use tomorib_core::volume::{Mask3, Volume3};
use tomorib_core::CoreError;

/// Periodic discrete ramp kernel for an FFT length `len`.
fn closed_form_kernel(len: usize, m: usize) -> f64 {
    let m = m % len;
    if m == 0 {
        0.25
    } else if m % 2 == 0 {
        0.0
    } else {
        let s = (std::f64::consts::PI * m as f64 / len as f64).sin();
        -1.0 / (len as f64 * len as f64 * s * s)
    }
}

/// Direct spatial convolution with the closed-form kernel, cropped to the row.
fn convolve_direct(row: &[f32], len: usize) -> Vec<f64> {
    (0..row.len())
        .map(|n| row.iter().enumerate().map(|(m, &x)| x as f64 * closed_form_kernel(len, n + len - m)).sum())
        .collect()
}

#[test]
fn impulse_response_matches_closed_form() {
    for cols in [8usize, 13, 64] {
        let filter = RampFilter::new(&RampFilterSpec::default(), cols).unwrap();
        let len = filter.transfer().len();
        for pos in [0, cols / 2, cols - 1] {
            let mut row = vec![0.0f32; cols];
            row[pos] = 1.0;
            let mut out = vec![0.0; cols];
            filter.filter_row(&row, &mut out);
            for (n, (&got, want)) in out.iter().zip(convolve_direct(&row, len)).enumerate() {
                assert!((got - want).abs() <= 1e-6, "cols {cols} pos {pos} n {n}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn random_rows_match_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let filter = RampFilter::new(&RampFilterSpec { padded_len: Some(256), ..Default::default() }, 40).unwrap();
    let row: Vec<f32> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; 40];
    filter.filter_row(&row, &mut out);
    for (got, want) in out.iter().zip(convolve_direct(&row, 256)) {
        assert!((got - want).abs() <= 1e-6);
    }
}

#[test]
fn transfer_function_is_a_ramp() {
    let h = transfer_function(FilterKind::RamLak, 128);
    assert_eq!(h[0], 0.0);
    let max = h.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(h[64], max);
    for k in 1..=64 {
        assert!((h[k] - k as f64 / 128.0).abs() < 1e-15);
        assert_eq!(h[k], h[128 - k]);
    }
}

#[test]
fn filter_scales_by_sample_spacing() {
    let mut p = Projection2D::zeros(2, 8, 1.0, 0.0);
    p.data[3] = 1.0;
    p.data[12] = -2.0;
    let a = ramp_filter(&p, &RampFilterSpec::default(), 1.0).unwrap();
    let b = ramp_filter(&p, &RampFilterSpec::default(), 4.0).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x / 4.0 - y).abs() <= 1e-7);
    }
    assert!((a.data[3] - 0.25).abs() < 1e-7);
    assert!((a.data[12] + 0.5).abs() < 1e-7);
}

fn small_geometry(views: usize) -> ConeBeamGeometry {
    ConeBeamGeometry {
        detector_rows: 12,
        detector_cols: 16,
        detector_pixel_mm: 30.0,
        fov_mm: [240.0, 200.0, 280.0],
        volume_shape: [8, 5, 9],
        angles: make_angle_set(30.0, views).unwrap(),
        ..Default::default()
    }
}

fn random_set(g: &ConeBeamGeometry, rng: &mut ChaCha8Rng) -> ProjectionSet {
    let mut ps = ProjectionSet::zeros(g);
    for p in &mut ps.projections {
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..3.0));
    }
    ps
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn fbp_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0, hann in any::<bool>()) {
        let g = small_geometry(5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_set(&g, &mut rng), random_set(&g, &mut rng));
        let mix = x.zip_with(&y, |p, q| a * p + b * q).unwrap();
        let spec = RampFilterSpec { kind: if hann { FilterKind::Hann } else { FilterKind::RamLak }, padded_len: None };
        let opts = BackprojectOptions::default();
        let (fx, fy, fm) = (fbp(&x, &spec, &opts).unwrap(), fbp(&y, &spec, &opts).unwrap(), fbp(&mix, &spec, &opts).unwrap());
        let scale = fx.data.iter().chain(&fy.data).fold(0.0f32, |m, v| m.max(v.abs())) * (a.abs() + b.abs()).max(1e-3);
        for ((p, q), m) in fx.data.iter().zip(&fy.data).zip(&fm.data) {
            prop_assert!((m - (a * p + b * q)).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn backprojection_is_additive(seed in 0u64..1000) {
        let g = small_geometry(4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_set(&g, &mut rng), random_set(&g, &mut rng));
        let opts = BackprojectOptions::default();
        let sum = backproject(&x.zip_with(&y, |p, q| p + q).unwrap(), &g, &opts).unwrap();
        let parts = backproject(&x, &g, &opts).unwrap().add(&backproject(&y, &g, &opts).unwrap()).unwrap();
        let scale = sum.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        prop_assert!(sum.max_abs_diff(&parts).unwrap() <= 1e-6 * scale);
    }
}

#[test]
fn zero_in_zero_out() {
    let g = small_geometry(3);
    let v = fbp(&ProjectionSet::zeros(&g), &RampFilterSpec::default(), &BackprojectOptions::default()).unwrap();
    assert!(v.data.iter().all(|&x| x == 0.0));
}

#[test]
fn mismatched_geometry_is_rejected() {
    let g = small_geometry(3);
    let other = small_geometry(5);
    let err = backproject(&ProjectionSet::zeros(&g), &other, &BackprojectOptions::default()).unwrap_err();
    assert!(matches!(err, CoreError::InvalidArgument(_)));
}

#[test]
fn single_pixel_lights_only_its_beam() {
    let g = ConeBeamGeometry { angles: make_angle_set(0.0, 1).unwrap(), ..Default::default() };
    let mut ps = ProjectionSet::zeros(&g);
    let (r0, c0) = (20usize, 41usize);
    ps.projections[0].data[r0 * g.detector_cols + c0] = 1.0;
    let v = backproject(&ps, &g, &BackprojectOptions::default()).unwrap();
    let src = g.source_position(0.0).unwrap();
    let s = v.shape;
    let mut lit = 0;
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let (u, w, _) = g.project_point(src, v.center(i, j, k));
                let inside = (u - c0 as f64).abs() < 1.0 && (w - r0 as f64).abs() < 1.0;
                if v.get(i, j, k) != 0.0 {
                    lit += 1;
                    assert!(inside, "voxel ({i},{j},{k}) projects to ({u}, {w})");
                }
            }
        }
    }
    assert!(lit >= s[1], "a beam crossing the volume should light every depth slice, got {lit}");
}

fn coronal_center_of_mass(v: &Volume3) -> [f64; 2] {
    let hi = v.min_max().1;
    let (mut m, mut cx, mut cz) = (0.0, 0.0, 0.0);
    for i in 0..v.shape[0] {
        for j in 0..v.shape[1] {
            for k in 0..v.shape[2] {
                let val = v.get(i, j, k);
                if val > 0.25 * hi {
                    let c = v.center(i, j, k);
                    m += val as f64;
                    cx += val as f64 * c[0];
                    cz += val as f64 * c[2];
                }
            }
        }
    }
    [cx / m, cz / m]
}

#[test]
fn dense_sphere_reconstructs_in_place() {
    let g = ConeBeamGeometry::default();
    let sp = g.spacing();
    for center in [[0.0, 0.0, 0.0], [48.0, 10.0, -60.0]] {
        let ball = sphere_volume(g.volume_shape, sp, center, 40.0, 0.05, 2);
        let ps = project_mono(&ball, &g).unwrap();
        let rec = fbp(&ps, &RampFilterSpec::default(), &BackprojectOptions::default()).unwrap();
        let com = coronal_center_of_mass(&rec);
        assert!((com[0] - center[0]).abs() <= sp[0], "x {} vs {}", com[0], center[0]);
        assert!((com[1] - center[2]).abs() <= sp[2], "z {} vs {}", com[1], center[2]);
        let hot = rec.get(32 + (center[0] / sp[0]) as usize, 16 + (center[1] / sp[1]) as usize, (32.0 + center[2] / sp[2]) as usize);
        assert!(hot > 0.0);
    }
}

/// Lung-area mean squared error after min-max normalizing each volume.
fn lung_l2(rec: &Volume3, truth: &Volume3, mask: &Mask3) -> f64 {
    let ((rl, _), (tl, _)) = (rec.min_max(), truth.min_max());
    let (rr, tr) = (rec.range(), truth.range());
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..rec.len() {
        if mask.data[i] == 1 {
            let d = ((rec.data[i] - rl) / rr - (truth.data[i] - tl) / tr) as f64;
            s += d * d;
            n += 1;
        }
    }
    s / n as f64
}

#[test]
fn narrower_sweep_degrades_lungs() {
    let base = ConeBeamGeometry::default();
    let p = generate_phantom(21, &PhantomConfig::for_geometry(&base)).unwrap();
    let err = |alpha: f64, n: usize| {
        let g = base.with_angles(make_angle_set(alpha, n).unwrap());
        let rec = fbp(&project_mono(&p.full, &g).unwrap(), &RampFilterSpec::default(), &BackprojectOptions::default())
            .unwrap();
        lung_l2(&rec, &p.full, &p.lung_mask)
    };
    let (e15, e30) = (err(15.0, 29), err(30.0, 59));
    assert!(e15 > e30, "15 deg {e15} vs 30 deg {e30}");
}

#[test]
fn thread_count_does_not_change_reconstruction() {
    let g = small_geometry(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = random_set(&g, &mut rng);
    let run = |t: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap().install(|| {
            fbp(&ps, &RampFilterSpec::default(), &BackprojectOptions::default()).unwrap()
        })
    };
    assert_eq!(run(1), run(4));
}
