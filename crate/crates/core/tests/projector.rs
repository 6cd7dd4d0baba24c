use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tomorib_core::geometry::{make_angle_set, ConeBeamGeometry, Ray};
use tomorib_core::phantom::{generate_phantom, sphere_volume, PhantomConfig, Spectrum};
use tomorib_core::projector::{
    forward_project, line_integral, line_integral_exact, project_all, project_mono, ProjectorOptions,
};
use tomorib_core::volume::{flat_index, Volume3};

fn axial(x: f64, z: f64) -> Ray {
    Ray { origin: [x, 1000.0, z], dir: [0.0, -1.0, 0.0] }
}

/// 100 mm cube of 0.02 /mm, voxel-aligned, inside a 160 mm grid.
fn cube() -> Volume3 {
    let mut v = Volume3::zeros([64, 64, 64], [2.5; 3]);
    for i in 12..52 {
        for j in 12..52 {
            for k in 12..52 {
                v.data[flat_index(v.shape, i, j, k)] = 0.02;
            }
        }
    }
    v
}

#[test]
fn uniform_cube_chord() {
    let v = cube();
    let step = 2.5 / 2.0;
    for (x, z) in [(0.0, 0.0), (13.7, -20.1), (-40.0, 44.9)] {
        let p = line_integral(&v, &axial(x, z), step).unwrap();
        assert!((p - 2.0).abs() <= 0.02, "({x}, {z}): {p}");
        let half = line_integral(&v, &axial(x, z), step / 2.0).unwrap();
        assert!(((half - p) / p).abs() < 0.002);
    }
}

fn sphere_rays(n: usize, seed: u64, radius: f64) -> Vec<(Ray, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let b: f64 = rng.gen_range(0.0..radius / 2.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let tilt: f64 = rng.gen_range(-0.3..0.3);
            let d = [tilt.sin(), -tilt.cos(), 0.0];
            let perp = [tilt.cos(), tilt.sin(), 0.0];
            let off = [b * phase.cos() * perp[0], b * phase.cos() * perp[1], b * phase.sin()];
            let ray = Ray { origin: [off[0] - 1000.0 * d[0], off[1] - 1000.0 * d[1], off[2]], dir: d };
            (ray, 2.0 * (radius * radius - b * b).sqrt())
        })
        .collect()
}

#[test]
fn uniform_sphere_chords() {
    let v = sphere_volume([64; 3], [2.0; 3], [0.0; 3], 50.0, 0.02, 4);
    for (ray, chord) in sphere_rays(100, 3, 50.0) {
        let p = line_integral(&v, &ray, 1.0).unwrap();
        let exact = chord * 0.02;
        assert!(((p - exact) / exact).abs() < 0.01, "{p} vs {exact}");
    }
}

#[test]
fn quadrature_error_at_least_halves_with_step() {
    let v = sphere_volume([64; 3], [2.0; 3], [0.0; 3], 50.0, 0.02, 4);
    let rays = sphere_rays(200, 5, 50.0);
    let err = |h: f64| -> f64 {
        rays.iter().map(|(r, _)| (line_integral(&v, r, h).unwrap() - line_integral_exact(&v, r)).abs()).sum()
    };
    let (e1, e2, e4) = (err(1.0), err(0.5), err(0.25));
    assert!(e1 > 0.0);
    assert!(e2 / e1 <= 0.625 && e4 / e2 <= 0.625, "ratios {} {}", e2 / e1, e4 / e2);
}

fn small_geometry(views: usize) -> ConeBeamGeometry {
    ConeBeamGeometry {
        detector_rows: 10,
        detector_cols: 12,
        detector_pixel_mm: 40.0,
        fov_mm: [240.0, 200.0, 280.0],
        volume_shape: [6, 5, 7],
        angles: make_angle_set(30.0, views).unwrap(),
        ..Default::default()
    }
}

fn random_volume(g: &ConeBeamGeometry, rng: &mut ChaCha8Rng) -> Volume3 {
    let n = g.volume_shape.iter().product();
    Volume3::new(g.volume_shape, g.spacing(), (0..n).map(|_| rng.gen_range(0.0f32..0.05)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn projection_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let g = small_geometry(3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_volume(&g, &mut rng);
        let h = random_volume(&g, &mut rng);
        let mix = f.zip_with(&h, |x, y| a * x + b * y).unwrap();
        let (pf, ph, pm) = (project_mono(&f, &g).unwrap(), project_mono(&h, &g).unwrap(), project_mono(&mix, &g).unwrap());
        for ((x, y), m) in pf.values().zip(ph.values()).zip(pm.values()) {
            let scale = (a * x).abs() + (b * y).abs() + 1e-12;
            prop_assert!((m - (a * x + b * y)).abs() <= 1e-6 * scale.max(1.0) + 2e-6 * scale);
        }
    }
}

#[test]
fn difference_identity_on_phantom() {
    let g = ConeBeamGeometry { angles: make_angle_set(15.0, 5).unwrap(), ..Default::default() };
    let p = generate_phantom(4, &PhantomConfig::for_geometry(&g)).unwrap();
    let full = project_mono(&p.full, &g).unwrap();
    let free = project_mono(&p.rib_free, &g).unwrap();
    let delta = project_mono(&p.full.sub(&p.rib_free).unwrap(), &g).unwrap();
    let diff = full.sub(&free).unwrap();
    let (_, hi) = full.min_max();
    for (d, e) in diff.values().zip(delta.values()) {
        assert!((d - e).abs() <= 1e-6 * hi + 1e-6 * e.abs(), "{d} vs {e}");
    }
}

#[test]
fn phantom_views_are_finite_and_nonnegative() {
    let g = ConeBeamGeometry { angles: make_angle_set(15.0, 29).unwrap(), ..Default::default() };
    let p = generate_phantom(1, &PhantomConfig::for_geometry(&g)).unwrap();
    let ps = project_mono(&p.full, &g).unwrap();
    assert_eq!(ps.n_views(), 29);
    ps.validate().unwrap();
    assert!(ps.values().all(|v| v.is_finite() && v >= 0.0));
    assert!(ps.min_max().1 > 1.0);
    let empty = project_mono(&Volume3::zeros(g.volume_shape, g.spacing()), &g).unwrap();
    assert!(empty.values().all(|v| v == 0.0));
}

#[test]
fn mirrored_phantom_gives_mirrored_views() {
    let g = ConeBeamGeometry { angles: make_angle_set(30.0, 3).unwrap(), ..Default::default() };
    let p = generate_phantom(9, &PhantomConfig::for_geometry(&g)).unwrap();
    let s = p.full.shape;
    let mut sym = p.full.clone();
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let a = p.full.get(i, j, k);
                let b = p.full.get(s[0] - 1 - i, j, k);
                sym.data[flat_index(s, i, j, k)] = 0.5 * (a + b);
            }
        }
    }
    let ps = project_mono(&sym, &g).unwrap();
    let (lo, hi) = (&ps.projections[0], &ps.projections[2]);
    for r in 0..lo.rows {
        for c in 0..lo.cols {
            assert!((lo.get(r, c) - hi.get(r, lo.cols - 1 - c)).abs() < 1e-4);
        }
    }
}

#[test]
fn polyenergetic_reductions() {
    let g = small_geometry(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = random_volume(&g, &mut rng);
    let opts = ProjectorOptions::default();
    let mono = forward_project(std::slice::from_ref(&v), &g, 0.0, &Spectrum::mono(60.0), &opts).unwrap();
    let ray = g.ray_through(0.0, 4.0, 3.0).unwrap();
    assert_eq!(mono.get(3, 4), line_integral(&v, &ray, opts.step_for(&v)).unwrap() as f32);
    let two = Spectrum::new(vec![50.0, 70.0], vec![0.5, 0.5]).unwrap();
    let same = forward_project(&[v.clone(), v.clone()], &g, 0.0, &two, &opts).unwrap();
    for (a, b) in same.data.iter().zip(&mono.data) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
    let zero = Volume3::zeros(g.volume_shape, g.spacing());
    let z = forward_project(&[zero.clone(), zero], &g, 0.0, &two, &opts).unwrap();
    assert!(z.data.iter().all(|&x| x == 0.0));
    assert!(forward_project(&[v], &g, 0.0, &two, &opts).is_err());
}

#[test]
fn thread_count_does_not_change_results() {
    let g = ConeBeamGeometry { angles: make_angle_set(15.0, 4).unwrap(), ..Default::default() };
    let p = generate_phantom(3, &PhantomConfig::for_geometry(&g)).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            project_all(std::slice::from_ref(&p.full), &g, &Spectrum::mono(60.0), &ProjectorOptions::default())
                .unwrap()
        })
    };
    assert_eq!(run(1), run(3));
}
