//! Training-loop behavior: determinism, no-op learning rate, single-sample
//! overfit.

use rand::Rng;

use rg_core::arch::{
    build_targets, train_loop, AgentObservation, Architecture, DetectionBox, LidarPoint,
    LossWeights, Modality, ModelParams, TrainFrame,
};
use rg_core::dims::DimsConfig;
use rg_core::geometry::{CameraRig, Pose2};
use rg_core::optim::OptimizerConfig;
use rg_core::param::{seeded_rng, ParamGroup};
use rg_core::rgattn::PositionalEncodingKind;
use rg_core::{Real, Tensor};

fn tiny_frame(dims: &DimsConfig, seed: u64) -> TrainFrame {
    let mut rng = seeded_rng(seed);
    let spec = dims.bev_spec().unwrap();
    let rig = |yaw: f64| CameraRig {
        mount_x: 0.4,
        mount_y: 0.0,
        mount_yaw: yaw,
        fov: 1.6,
        w2: dims.w2,
        h2: dims.h2,
        c2: dims.c2,
    };
    let points: Vec<LidarPoint> = (0..60)
        .map(|_| LidarPoint {
            x: rng.random_range(-3.5..3.5),
            y: rng.random_range(-3.5..3.5),
            z: rng.random_range(0.0..2.0),
            intensity: rng.random_range(0.0..1.0),
        })
        .collect();
    let raster = |rng: &mut rand_chacha::ChaCha8Rng| {
        let n = dims.craw * dims.h2 * dims.w2;
        Tensor::new(
            vec![dims.craw, dims.h2, dims.w2],
            (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    };
    let agents = vec![AgentObservation {
        agent_id: 0,
        pose: Pose2::new(0.0, 0.0, 0.0),
        modality: Modality::LidarCamera,
        points,
        camera_rasters: vec![raster(&mut rng), raster(&mut rng)],
        rigs: vec![rig(0.0), rig(std::f64::consts::PI)],
    }];
    let gt = vec![DetectionBox {
        cx: 1.0,
        cy: -1.0,
        w: 1.4,
        l: 2.6,
        yaw: 0.3,
        score: 1.0,
    }];
    TrainFrame {
        agents,
        ego_id: 0,
        targets: build_targets(&gt, &spec),
    }
}

fn collect_values(params: &ModelParams) -> Vec<Real> {
    let mut out = Vec::new();
    params.for_each(&mut |_, p| out.extend_from_slice(p.value.data()));
    out
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dims = DimsConfig::tiny();
    let frame = tiny_frame(&dims, 1);
    let mut params =
        ModelParams::init(Architecture::Ptp, dims, PositionalEncodingKind::Learnable, 9).unwrap();
    let before = collect_values(&params);
    train_loop(
        &[frame],
        &mut params,
        &OptimizerConfig::sgd(0.0),
        3,
        7,
        &LossWeights::default(),
    )
    .unwrap();
    assert_eq!(before, collect_values(&params));
}

#[test]
fn same_seed_gives_bitwise_identical_trajectories() {
    let dims = DimsConfig::tiny();
    let run = || {
        let frames = vec![tiny_frame(&dims, 1), tiny_frame(&dims, 2)];
        let mut params =
            ModelParams::init(Architecture::Ptp, dims, PositionalEncodingKind::Learnable, 9)
                .unwrap();
        let out = train_loop(
            &frames,
            &mut params,
            &OptimizerConfig::adam(0.01),
            4,
            123,
            &LossWeights::default(),
        )
        .unwrap();
        (collect_values(&params), out.epoch_losses)
    };
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(pa, pb);
    assert_eq!(la, lb);
}

#[test]
fn single_sample_overfit_decreases_loss() {
    // The loss on one repeated frame must strictly decrease across the
    // first 10 epochs under Adam at a small learning rate.
    let dims = DimsConfig::tiny();
    let frame = tiny_frame(&dims, 5);
    let mut params =
        ModelParams::init(Architecture::Ptp, dims, PositionalEncodingKind::Learnable, 21).unwrap();
    let out = train_loop(
        &[frame],
        &mut params,
        &OptimizerConfig::adam(0.005),
        10,
        77,
        &LossWeights::default(),
    )
    .unwrap();
    for k in 1..out.epoch_losses.len() {
        assert!(
            out.epoch_losses[k] < out.epoch_losses[k - 1],
            "loss not decreasing at epoch {k}: {:?}",
            out.epoch_losses
        );
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let dims = DimsConfig::tiny();
    let mut params =
        ModelParams::init(Architecture::Ptp, dims, PositionalEncodingKind::None, 1).unwrap();
    assert!(train_loop(
        &[],
        &mut params,
        &OptimizerConfig::adam(0.01),
        1,
        0,
        &LossWeights::default(),
    )
    .is_err());
}
