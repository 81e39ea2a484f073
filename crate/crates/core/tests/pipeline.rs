use vrnet::data::{generate, read_dataset, write_dataset, DataConfig, PairMode, Role, Split};
use vrnet::eval::{compute_metrics, run_icp, run_model, with_ground_truth, EvalConfig, Thresholds};
use vrnet::exec::Exec;
use vrnet::icp::IcpOptions;
use vrnet::loss::LossWeights;
use vrnet::model::{Model, ModelConfig};
use vrnet::trainer::{train_stage1, train_stage2, RunOptions, TrainConfig};

fn small(mode: PairMode) -> DataConfig {
    DataConfig {
        mode,
        base_n: 64,
        keep_n: 48,
        pv_rs_intermediate: 56,
        ..DataConfig::default()
    }
}

#[test]
fn l4_weight_sweep_runs_to_completion() {
    let pairs = generate(&small(PairMode::PV), 3, Role::Train, 4, Exec::Parallel).unwrap().pairs;
    let mut base = Model::new(ModelConfig::desk(), 3).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.stage1.steps = 5;
    cfg.stage2.steps = 10;
    train_stage1(&pairs, &mut base, &cfg, &RunOptions::default()).unwrap();
    for l4 in [1.0, 10.0, 100.0, 1000.0] {
        let dir = tempfile::tempdir().unwrap();
        let mut m = base.clone();
        cfg.weights = LossWeights { l4, ..LossWeights::default() };
        let run = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let curve = train_stage2(&pairs, &mut m, &cfg, &run).unwrap();
        assert_eq!(curve.steps.len(), 10);
        assert!(curve.steps.iter().all(|s| s.loss.is_finite()), "weight {l4}");
        let csv = std::fs::read_to_string(dir.path().join("stage2_loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 11);
        assert!(m.stage2_complete);
    }
}

#[test]
fn every_mode_and_split_round_trips_through_disk() {
    for mode in [PairMode::CO, PairMode::PV, PairMode::RS, PairMode::PV_RS] {
        for split in [Split::UPC, Split::UC, Split::ND] {
            let cfg = DataConfig { split, ..small(mode) };
            let d = generate(&cfg, 4, Role::Test, 3, Exec::Parallel).unwrap();
            let dir = tempfile::tempdir().unwrap();
            write_dataset(dir.path(), &d).unwrap();
            let back = read_dataset(dir.path()).unwrap();
            assert_eq!(back, d, "{mode} {split:?}");
            if split == Split::UC {
                assert!(d.manifest.shapes.iter().all(|s| !cfg.shapes.contains(s)));
            }
        }
    }
}

#[test]
fn train_and_test_streams_differ() {
    let cfg = small(PairMode::CO);
    let a = generate(&cfg, 5, Role::Train, 2, Exec::Parallel).unwrap();
    let b = generate(&cfg, 5, Role::Test, 2, Exec::Parallel).unwrap();
    assert_ne!(a.pairs[0].gt_transform, b.pairs[0].gt_transform);
}

#[test]
fn icp_and_model_evaluations_are_policy_independent() {
    let pairs = generate(&small(PairMode::PV_RS), 6, Role::Test, 4, Exec::Parallel).unwrap().pairs;
    let m = Model::new(ModelConfig::desk(), 6).unwrap();
    let eval = EvalConfig { iters: 2, ..EvalConfig::default() };
    let check = |s: Vec<vrnet::geom::RigidTransform>, p: Vec<vrnet::geom::RigidTransform>| {
        assert_eq!(s, p);
        let r = compute_metrics(&with_ground_truth(&s, &pairs), &Thresholds::default()).unwrap();
        assert!(r.rmse_rot_deg >= r.mae_rot_deg);
    };
    let icp = |e| run_icp(&pairs, &IcpOptions::default(), e).unwrap();
    check(icp(Exec::Sequential), icp(Exec::Parallel));
    let model = |e| run_model(&m, &pairs, &eval, e).unwrap();
    check(model(Exec::Sequential), model(Exec::Parallel));
}
