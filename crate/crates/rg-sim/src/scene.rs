//! Synthetic scenario generation: seeded placement of oriented boxes and
//! agents with camera rigs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use rg_core::arch::{rotated_iou, DetectionBox, Modality};
use rg_core::geometry::{CameraRig, Pose2};

use crate::error::{Result, SimError};
use crate::rng::{stream_rng, Stream};

/// Maximum placement attempts per box before giving up.
const PLACEMENT_ATTEMPTS_PER_BOX: usize = 200;
/// Boxes may overlap pairwise up to this rotated IoU.
const MAX_BOX_OVERLAP: f64 = 0.05;
/// Minimum center distance between a box and any agent (meters).
const AGENT_CLEARANCE: f64 = 3.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneAgent {
    pub id: u32,
    pub pose: Pose2,
    pub modality: Modality,
    pub rigs: Vec<CameraRig>,
}

/// One synthetic frame: ground-truth boxes in world coordinates plus the
/// participating agents. Serialized as JSON scene files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub frame_id: u64,
    pub seed: u64,
    /// World extent: x_min, x_max, y_min, y_max.
    pub bounds: [f64; 4],
    pub gt_boxes: Vec<DetectionBox>,
    pub agents: Vec<SceneAgent>,
}

/// Camera rig template applied to every camera-bearing agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigTemplate {
    pub fov: f64,
    pub w2: usize,
    pub h2: usize,
    pub c2: usize,
    /// Mount yaws; the OPV2V-style default is four cameras at
    /// {0, π/2, π, −π/2}.
    pub yaws: Vec<f64>,
}

impl RigTemplate {
    pub fn four_cameras(fov_deg: f64, w2: usize, h2: usize, c2: usize) -> Self {
        use std::f64::consts::FRAC_PI_2;
        Self {
            fov: fov_deg.to_radians(),
            w2,
            h2,
            c2,
            yaws: vec![0.0, FRAC_PI_2, std::f64::consts::PI, -FRAC_PI_2],
        }
    }

    fn rigs(&self) -> Vec<CameraRig> {
        self.yaws
            .iter()
            .map(|&yaw| CameraRig {
                mount_x: 0.5,
                mount_y: 0.0,
                mount_yaw: yaw,
                fov: self.fov,
                w2: self.w2,
                h2: self.h2,
                c2: self.c2,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frame_id: u64,
    pub seed: u64,
    pub bounds: [f64; 4],
    pub n_boxes: usize,
    /// One modality per agent.
    pub modalities: Vec<Modality>,
    pub rig_template: RigTemplate,
}

/// Deterministically generates a scene: agents on a jittered line near the
/// world center, then non-overlapping boxes clear of every agent.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    if config.modalities.is_empty() {
        return Err(SimError::InvalidConfig("at least one agent required".into()));
    }
    let [x_min, x_max, y_min, y_max] = config.bounds;
    if !(x_max > x_min && y_max > y_min) {
        return Err(SimError::InvalidConfig("degenerate world bounds".into()));
    }

    // Agents: spread along x around the center with seeded jitter.
    let mut agent_rng = stream_rng(config.seed, config.frame_id, 0, Stream::AgentPlacement);
    let n_agents = config.modalities.len();
    let span_x = (x_max - x_min) * 0.5;
    let mut agents = Vec::with_capacity(n_agents);
    for (i, &modality) in config.modalities.iter().enumerate() {
        let frac = if n_agents == 1 {
            0.5
        } else {
            i as f64 / (n_agents - 1) as f64
        };
        let x = x_min + (x_max - x_min) * 0.25 + span_x * frac + agent_rng.random_range(-1.0..1.0);
        let y = agent_rng.random_range(y_min * 0.3..y_max * 0.3);
        let yaw = agent_rng.random_range(-0.3..0.3);
        let rigs = if modality.has_camera() {
            config.rig_template.rigs()
        } else {
            Vec::new()
        };
        agents.push(SceneAgent {
            id: i as u32,
            pose: Pose2::new(x.clamp(x_min + 2.0, x_max - 2.0), y, yaw),
            modality,
            rigs,
        });
    }

    // Boxes: rejection sampling against overlap and agent clearance.
    let mut box_rng = stream_rng(config.seed, config.frame_id, 0, Stream::BoxPlacement);
    let mut boxes: Vec<DetectionBox> = Vec::with_capacity(config.n_boxes);
    let mut attempts = 0usize;
    let budget = PLACEMENT_ATTEMPTS_PER_BOX * config.n_boxes.max(1);
    while boxes.len() < config.n_boxes {
        if attempts >= budget {
            return Err(SimError::PlacementFailed {
                remaining: config.n_boxes - boxes.len(),
                total: config.n_boxes,
                attempts,
            });
        }
        attempts += 1;
        let w: f64 = box_rng.random_range(1.7..2.2);
        let l: f64 = box_rng.random_range(3.8..5.0);
        let margin = (w.hypot(l)) / 2.0 + 0.2;
        let candidate = DetectionBox {
            cx: box_rng.random_range(x_min + margin..x_max - margin),
            cy: box_rng.random_range(y_min + margin..y_max - margin),
            w,
            l,
            yaw: box_rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            score: 1.0,
        };
        let overlaps = boxes
            .iter()
            .any(|b| rotated_iou(b, &candidate) >= MAX_BOX_OVERLAP);
        let too_close = agents.iter().any(|a| {
            (a.pose.x - candidate.cx).hypot(a.pose.y - candidate.cy) < AGENT_CLEARANCE
        });
        if !overlaps && !too_close {
            boxes.push(candidate);
        }
    }

    Ok(Scene {
        frame_id: config.frame_id,
        seed: config.seed,
        bounds: config.bounds,
        gt_boxes: boxes,
        agents,
    })
}

/// Deterministic per-box attributes derived from the scene seed: height
/// and a reflectance-like signature shared by LiDAR and camera rendering.
pub fn box_attributes(scene: &Scene, box_index: usize) -> (f64, f64) {
    let mut rng = stream_rng(scene.seed, scene.frame_id, box_index as u64, Stream::BoxAttributes);
    let height = rng.random_range(1.3..2.1);
    let signature = rng.random_range(0.4..1.0);
    (height, signature)
}
