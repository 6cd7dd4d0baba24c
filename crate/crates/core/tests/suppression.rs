use std::sync::OnceLock;

use tomorib_core::dataset::{build_dataset, DatasetSplit, SimulationSettings};
use tomorib_core::geometry::{make_angle_set, ConeBeamGeometry};
use tomorib_core::phantom::PhantomConfig;
use tomorib_core::projector::ProjectionSet;
use tomorib_core::suppression::{Lambdas, NetConfig, Stage, TrainConfig, TripleNet};
use tomorib_core::volume::Volume3;
use tomorib_core::CoreError;

fn small_geometry() -> ConeBeamGeometry {
    ConeBeamGeometry {
        detector_rows: 32,
        detector_cols: 32,
        detector_pixel_mm: 16.0,
        volume_shape: [32, 16, 32],
        angles: make_angle_set(30.0, 9).unwrap(),
        ..Default::default()
    }
}

fn split() -> &'static DatasetSplit {
    static S: OnceLock<DatasetSplit> = OnceLock::new();
    S.get_or_init(|| {
        let g = small_geometry();
        build_dataset(2, 1, 40, &g, &PhantomConfig::for_geometry(&g), &SimulationSettings::default()).unwrap()
    })
}

fn tiny_net() -> TripleNet {
    let s = split();
    let cfg = NetConfig { blocks: 2, channels: 4, ..Default::default() };
    TripleNet::new(cfg, Lambdas::default(), s.stats, s.settings.clone()).unwrap()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_2d: 2, patch_3d: [16, 16, 16], log_every: 1, ..Default::default() }
}

#[test]
fn untrained_net_predicts_no_ribs() {
    let net = tiny_net();
    let c = &split().test[0];
    assert!(net.m2d_predict_set(&c.proj_full).unwrap().values().all(|v| v == 0.0));
    assert!(net.m3d_predict(&c.vol_full).unwrap().data.iter().all(|&v| v == 0.0));
    assert!(net.aggregate_predict(&c.proj_full, &c.vol_full).unwrap().data.iter().all(|&v| v == 0.0));
    assert_eq!(net.suppress(&c.proj_full, &c.vol_full).unwrap(), c.vol_full);
    assert_eq!(net.suppress_2d_only(&c.proj_full, &c.vol_full).unwrap(), c.vol_full);
    assert_eq!(net.suppress_3d_only(&c.vol_full).unwrap(), c.vol_full);
}

#[test]
fn m2d_ignores_the_view_angle() {
    let mut net = tiny_net();
    net.train_stage(Stage::M2d, &split().train, &quick(3)).unwrap();
    let c = &split().train[0];
    let mut a = c.proj_full.projections[2].clone();
    let mut b = a.clone();
    a.theta_deg = -5.0;
    b.theta_deg = 5.0;
    let pa = net.m2d_predict(&a).unwrap();
    let pb = net.m2d_predict(&b).unwrap();
    assert_eq!(pa.data, pb.data);
    assert!(pa.data.iter().any(|&v| v != 0.0));
}

#[test]
fn true_rib_projections_reconstruct_to_the_rib_volume() {
    let net = tiny_net();
    let c = &split().train[1];
    let r = net.stats.vol_range();
    let [ch0, ch1] = net.f_channels_from(&c.proj_delta, &c.vol_delta).unwrap();
    let tol = 1e-4 * c.vol_full.range() / r;
    let target = c.vol_delta.map(|x| x / r);
    let err0 = ch0.max_abs_diff(&target).unwrap();
    let err1 = ch1.max_abs_diff(&target).unwrap();
    assert!(err0 <= tol, "{err0} > {tol}");
    assert!(err1 <= tol, "{err1} > {tol}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut net = tiny_net();
    let before = net.clone();
    for s in Stage::ALL {
        net.train_stage(s, &split().train, &TrainConfig { lr: 0.0, ..quick(3) }).unwrap();
    }
    for s in Stage::ALL {
        assert_eq!(net.net(s), before.net(s), "{s}");
    }
}

#[test]
fn loss_scales_with_lambda() {
    let cases = &split().train;
    let mut a = tiny_net();
    let mut b = tiny_net();
    b.lambdas = Lambdas { m2d: 40.0, m3d: 100.0, f: 100.0 };
    for s in [Stage::M2d, Stage::M3d] {
        let la = a.train_stage(s, cases, &quick(1)).unwrap();
        let lb = b.train_stage(s, cases, &quick(1)).unwrap();
        assert!((lb.curve[0] - 2.0 * la.curve[0]).abs() <= 1e-6 * lb.curve[0], "{s}: {} vs {}", lb.curve[0], la.curve[0]);
        assert!((lb.initial_loss - 2.0 * la.initial_loss).abs() <= 1e-9 * lb.initial_loss);
    }
}

#[test]
fn fusion_needs_both_branches() {
    let mut net = tiny_net();
    let err = net.train_stage(Stage::F, &split().train, &quick(1)).unwrap_err();
    assert!(matches!(err, CoreError::MissingCheckpoint(_)), "{err}");
    net.train_stage(Stage::M2d, &split().train, &quick(1)).unwrap();
    let err = net.train_stage(Stage::F, &split().train, &quick(1)).unwrap_err();
    assert!(matches!(err, CoreError::MissingCheckpoint(_)), "{err}");
}

#[test]
fn fusion_training_leaves_branch_checkpoints_alone() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = tiny_net();
    let cases = &split().train;
    for s in [Stage::M2d, Stage::M3d] {
        net.train_stage(s, cases, &quick(2)).unwrap();
        net.save_stage(dir.path(), s).unwrap();
    }
    let read = |s: Stage| std::fs::read(TripleNet::checkpoint_path(dir.path(), s)).unwrap();
    let before = [read(Stage::M2d), read(Stage::M3d)];
    let (m2d, m3d) = (net.m2d.clone(), net.m3d.clone());
    net.train_stage(Stage::F, cases, &quick(2)).unwrap();
    for s in [Stage::M2d, Stage::M3d] {
        net.save_stage(dir.path(), s).unwrap();
    }
    assert_eq!([read(Stage::M2d), read(Stage::M3d)], before);
    assert_eq!(net.m2d, m2d);
    assert_eq!(net.m3d, m3d);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut net = tiny_net();
        let reports: Vec<_> = Stage::ALL.iter().map(|&s| net.train_stage(s, &split().train, &quick(3)).unwrap()).collect();
        (net, reports)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    for s in Stage::ALL {
        assert_eq!(a.net(s), b.net(s));
    }
}

#[test]
fn fusion_is_not_symmetric_in_its_channels() {
    let mut net = tiny_net();
    let cases = &split().train;
    for s in Stage::ALL {
        net.train_stage(s, cases, &TrainConfig { lr: 1e-3, ..quick(5) }).unwrap();
    }
    let c = &split().test[0];
    let [a, b] = net.f_channels(&c.proj_full, &c.vol_full).unwrap();
    let fwd = net.f_predict(&[a.clone(), b.clone()]).unwrap();
    let rev = net.f_predict(&[b, a]).unwrap();
    assert!(fwd.max_abs_diff(&rev).unwrap() > 0.0);
}

#[test]
fn output_shape_follows_input() {
    let s = split();
    let net = TripleNet::new(NetConfig { blocks: 1, channels: 2, ..Default::default() }, Lambdas::default(), s.stats, s.settings.clone()).unwrap();
    for shape in [[64, 32, 64], [48, 24, 48]] {
        let v = Volume3::filled(shape, [6.4, 9.4, 6.4], 0.01);
        assert_eq!(net.m3d_predict(&v).unwrap().shape, shape);
    }
    let g = ConeBeamGeometry { volume_shape: [48, 24, 48], angles: make_angle_set(30.0, 3).unwrap(), ..small_geometry() };
    let ps = ProjectionSet::zeros(&g);
    let v = Volume3::zeros(g.volume_shape, g.spacing());
    assert_eq!(net.aggregate_predict(&ps, &v).unwrap().shape, [48, 24, 48]);
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = tiny_net();
    for s in [Stage::M2d, Stage::M3d] {
        net.train_stage(s, &split().train, &quick(2)).unwrap();
        net.save_stage(dir.path(), s).unwrap();
    }
    net.save_manifest(dir.path()).unwrap();
    let back = TripleNet::load(dir.path()).unwrap();
    assert_eq!(back.m2d, net.m2d);
    assert_eq!(back.m3d, net.m3d);
    assert!(back.is_ready(Stage::M2d) && back.is_ready(Stage::M3d) && !back.is_ready(Stage::F));
    assert_eq!(back.stats, net.stats);
    assert_eq!(back.steps, net.steps);
    let c = &split().test[0];
    assert_eq!(back.suppress_3d_only(&c.vol_full).unwrap(), net.suppress_3d_only(&c.vol_full).unwrap());

    let mut other = tiny_net();
    assert!(matches!(other.load_stage(dir.path(), Stage::F), Err(CoreError::MissingCheckpoint(_))));
}

#[test]
fn reset_restores_the_initial_network() {
    let fresh = tiny_net();
    let mut net = tiny_net();
    net.train_stage(Stage::M2d, &split().train, &quick(2)).unwrap();
    assert_ne!(net.m2d, fresh.m2d);
    net.reset_stage(Stage::M2d).unwrap();
    assert_eq!(net.m2d, fresh.m2d);
    assert!(!net.is_ready(Stage::M2d));
    assert_eq!(net.steps, [0; 3]);
}
