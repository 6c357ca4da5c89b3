//! Gaussian pose perturbation modeling localization error.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use rg_core::geometry::Pose2;

/// N(0, σ_p²) on x and y, N(0, σ_r²) on yaw.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseNoiseModel {
    pub sigma_p: f64,
    pub sigma_r: f64,
}

impl PoseNoiseModel {
    pub fn new(sigma_p: f64, sigma_r: f64) -> Self {
        assert!(sigma_p >= 0.0 && sigma_r >= 0.0, "sigmas must be non-negative");
        Self { sigma_p, sigma_r }
    }
}

/// Perturbs a pose with seeded Gaussian draws; σ = 0 is the exact
/// identity. The yaw is renormalized to (−π, π].
pub fn apply_pose_noise(pose: &Pose2, model: &PoseNoiseModel, rng: &mut ChaCha8Rng) -> Pose2 {
    let draw = |sigma: f64, rng: &mut ChaCha8Rng| -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("sigma >= 0").sample(rng)
        } else {
            0.0
        }
    };
    let dx = draw(model.sigma_p, rng);
    let dy = draw(model.sigma_p, rng);
    let dyaw = draw(model.sigma_r, rng);
    Pose2::new(pose.x + dx, pose.y + dy, pose.yaw + dyaw)
}
