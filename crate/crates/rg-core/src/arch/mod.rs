//! The three cooperative perception pipelines and their building blocks.
//!
//! * PTP paints each LiDAR-equipped agent's BEV with its own cameras, then
//!   puzzles the painted maps together through pyramid fusion.
//! * CoS-CoCo sketches a skeleton from every LiDAR BEV first, then colors
//!   it with all cameras from all camera-bearing agents.
//! * PRGAF applies radian-glue attention at every pyramid scale per agent
//!   before cross-agent fusion.
//!
//! PTP and PRGAF require LiDAR on every agent; CoS-CoCo accepts any mix
//! with at least one LiDAR-bearing agent.

pub mod ap;
pub mod boxes;
pub mod encoders;
pub mod loss;
pub mod params;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{relative_transform, CameraRig, Pose2, Transform2};
use crate::pyramid::{pyramid_fuse, pyramid_fuse_scales, warp_to_ego, WarpedAgentVar};
use crate::rgattn::{rg_attn_multi, CameraFeed, FusionMode};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub use ap::ap_eval;
pub use boxes::{decode_nms, detect_head, rotated_iou, DetectionBox, HEAD_CHANNELS};
pub use encoders::{camera_encode, lidar_encode, LidarPoint};
pub use loss::{build_targets, detection_loss, FrameTargets, LossWeights};
pub use params::{load_params, save_params, Architecture, ModelParams, ModelVars};
pub use train::{train_loop, TrainFrame, TrainOutput};

/// Sensor complement of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    LidarOnly,
    CameraOnly,
    LidarCamera,
}

impl Modality {
    pub fn has_lidar(self) -> bool {
        matches!(self, Modality::LidarOnly | Modality::LidarCamera)
    }

    pub fn has_camera(self) -> bool {
        matches!(self, Modality::CameraOnly | Modality::LidarCamera)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l" => Ok(Modality::LidarOnly),
            "c" => Ok(Modality::CameraOnly),
            "lc" => Ok(Modality::LidarCamera),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown modality `{other}` (expected l|c|lc)"
            ))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::LidarOnly => "l",
            Modality::CameraOnly => "c",
            Modality::LidarCamera => "lc",
        }
    }
}

/// One agent's sensing for a single frame. Points are present iff the
/// modality has LiDAR; rasters pair with rigs iff it has a camera.
#[derive(Debug, Clone)]
pub struct AgentObservation {
    pub agent_id: u32,
    /// Pose used for coordinate alignment; possibly noise-corrupted.
    pub pose: Pose2,
    pub modality: Modality,
    pub points: Vec<LidarPoint>,
    pub camera_rasters: Vec<Tensor>,
    pub rigs: Vec<CameraRig>,
}

impl AgentObservation {
    pub fn validate(&self) -> Result<()> {
        if !self.modality.has_lidar() && !self.points.is_empty() {
            return Err(CoreError::InvalidArgument(format!(
                "agent {} has LiDAR points but no LiDAR modality",
                self.agent_id
            )));
        }
        if self.modality.has_camera() {
            if self.rigs.is_empty() || self.camera_rasters.len() != self.rigs.len() {
                return Err(CoreError::InvalidArgument(format!(
                    "agent {} needs one raster per rig",
                    self.agent_id
                )));
            }
        } else if !self.camera_rasters.is_empty() || !self.rigs.is_empty() {
            return Err(CoreError::InvalidArgument(format!(
                "agent {} carries camera data without a camera modality",
                self.agent_id
            )));
        }
        Ok(())
    }
}

fn find_ego(agents: &[AgentObservation], ego_id: u32) -> Result<&AgentObservation> {
    agents
        .iter()
        .find(|a| a.agent_id == ego_id)
        .ok_or_else(|| CoreError::InvalidArgument(format!("ego agent {ego_id} not present")))
}

fn sorted_indices(agents: &[AgentObservation]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..agents.len()).collect();
    order.sort_by_key(|&i| agents[i].agent_id);
    order
}

fn require_lidar_everywhere(agents: &[AgentObservation], architecture: &'static str) -> Result<()> {
    for a in agents {
        if !a.modality.has_lidar() {
            return Err(CoreError::UnsupportedModality {
                architecture,
                agent_id: a.agent_id,
            });
        }
    }
    Ok(())
}

fn transform_to_ego(obs: &AgentObservation, ego: &AgentObservation) -> Transform2 {
    if obs.agent_id == ego.agent_id {
        // The ego frame is its own reference; pose noise only enters the
        // transforms other agents compute toward it.
        Transform2::identity()
    } else {
        relative_transform(&obs.pose, &ego.pose)
    }
}

fn encode_cameras(
    tape: &mut Tape,
    obs: &AgentObservation,
    params: &ModelParams,
    vars: &ModelVars,
) -> Result<Vec<VarId>> {
    obs.camera_rasters
        .iter()
        .map(|raster| camera_encode(tape, raster, vars.cam_enc, params.dims.c2))
        .collect()
}

/// Paint-To-Puzzle: intra-agent cross-modal fusion, then one cross-agent
/// pyramid fusion. Rejects camera-only cooperators.
pub fn ptp_forward(
    tape: &mut Tape,
    agents: &[AgentObservation],
    ego_id: u32,
    params: &ModelParams,
    vars: &ModelVars,
    mode: &FusionMode,
) -> Result<VarId> {
    require_lidar_everywhere(agents, "PTP")?;
    let ego = find_ego(agents, ego_id)?;
    let spec = params.dims.bev_spec()?;

    let mut maps = Vec::with_capacity(agents.len());
    for &i in &sorted_indices(agents) {
        let obs = &agents[i];
        obs.validate()?;
        let mut bev = lidar_encode(tape, &obs.points, &spec, vars.lidar_enc, params.dims.c1)?;
        if obs.modality.has_camera() {
            let cams = encode_cameras(tape, obs, params, vars)?;
            let feeds: Vec<CameraFeed> = cams
                .iter()
                .zip(&obs.rigs)
                .enumerate()
                .map(|(k, (&features, rig))| CameraFeed {
                    key: (obs.agent_id, k as u32),
                    features,
                    transform: Transform2::identity(),
                    rig,
                })
                .collect();
            bev = rg_attn_multi(tape, bev, &spec, &feeds, &params.rg[0], &vars.rg[0], mode)?;
        }
        let t = transform_to_ego(obs, ego);
        maps.push(warp_to_ego(tape, obs.agent_id, bev, &spec, &t)?);
    }
    pyramid_fuse(tape, &maps, &params.pyramid, &vars.pyramid)
}

/// Co-Sketching-Co-Coloring: pyramid-fuse all LiDAR BEVs into a skeleton,
/// then glue every camera from every camera-bearing agent onto it.
pub fn cos_coco_forward(
    tape: &mut Tape,
    agents: &[AgentObservation],
    ego_id: u32,
    params: &ModelParams,
    vars: &ModelVars,
    mode: &FusionMode,
) -> Result<VarId> {
    let ego = find_ego(agents, ego_id)?;
    let spec = params.dims.bev_spec()?;

    // Co-Sketching over the LiDAR-bearing set.
    let mut maps = Vec::new();
    for &i in &sorted_indices(agents) {
        let obs = &agents[i];
        obs.validate()?;
        if !obs.modality.has_lidar() {
            continue;
        }
        let bev = lidar_encode(tape, &obs.points, &spec, vars.lidar_enc, params.dims.c1)?;
        let t = transform_to_ego(obs, ego);
        maps.push(warp_to_ego(tape, obs.agent_id, bev, &spec, &t)?);
    }
    if maps.is_empty() {
        return Err(CoreError::NoLidarAgent);
    }
    let skeleton = pyramid_fuse(tape, &maps, &params.pyramid, &vars.pyramid)?;

    // Co-Coloring with every camera, each through its own agent-to-ego
    // transform.
    let mut colored_feeds: Vec<(u32, Transform2, Vec<VarId>)> = Vec::new();
    for &i in &sorted_indices(agents) {
        let obs = &agents[i];
        if !obs.modality.has_camera() {
            continue;
        }
        let cams = encode_cameras(tape, obs, params, vars)?;
        colored_feeds.push((obs.agent_id, transform_to_ego(obs, ego), cams));
    }
    let mut all_feeds: Vec<CameraFeed> = Vec::new();
    for (agent_id, transform, cams) in &colored_feeds {
        let obs = agents
            .iter()
            .find(|a| a.agent_id == *agent_id)
            .expect("agent present");
        for (k, &features) in cams.iter().enumerate() {
            all_feeds.push(CameraFeed {
                key: (*agent_id, k as u32),
                features,
                transform: *transform,
                rig: &obs.rigs[k],
            });
        }
    }
    rg_attn_multi(
        tape,
        skeleton,
        &spec,
        &all_feeds,
        &params.rg[0],
        &vars.rg[0],
        mode,
    )
}

/// Pyramid-RG-Attn Fusion: per agent, cross-modal attention at every
/// pyramid scale, then occupancy-weighted cross-agent fusion per scale.
/// Rejects camera-only cooperators.
pub fn prgaf_forward(
    tape: &mut Tape,
    agents: &[AgentObservation],
    ego_id: u32,
    params: &ModelParams,
    vars: &ModelVars,
    mode: &FusionMode,
) -> Result<VarId> {
    require_lidar_everywhere(agents, "PRGAF")?;
    let ego = find_ego(agents, ego_id)?;
    let n_scales = params.dims.scales;
    let mut specs = Vec::with_capacity(n_scales);
    specs.push(params.dims.bev_spec()?);
    for s in 1..n_scales {
        specs.push(specs[s - 1].halved()?);
    }

    let mut per_scale: Vec<Vec<WarpedAgentVar>> = (0..n_scales).map(|_| Vec::new()).collect();
    for &i in &sorted_indices(agents) {
        let obs = &agents[i];
        obs.validate()?;
        let t = transform_to_ego(obs, ego);

        // BEV pyramid in the agent's own frame.
        let mut bevs = Vec::with_capacity(n_scales);
        bevs.push(lidar_encode(tape, &obs.points, &specs[0], vars.lidar_enc, params.dims.c1)?);
        for s in 1..n_scales {
            let pooled = tape.mean_pool2(bevs[s - 1])?;
            bevs.push(pooled);
        }

        // Camera pyramids by the same pooling factors.
        let mut cam_pyramid: Vec<Vec<VarId>> = Vec::with_capacity(n_scales);
        if obs.modality.has_camera() {
            cam_pyramid.push(encode_cameras(tape, obs, params, vars)?);
            for s in 1..n_scales {
                let pooled = cam_pyramid[s - 1]
                    .clone()
                    .into_iter()
                    .map(|c| tape.mean_pool2(c))
                    .collect::<Result<Vec<_>>>()?;
                cam_pyramid.push(pooled);
            }
        }

        for s in 0..n_scales {
            let fused = if obs.modality.has_camera() {
                let scaled_rigs: Vec<CameraRig> = obs
                    .rigs
                    .iter()
                    .map(|r| CameraRig {
                        w2: r.w2 >> s,
                        h2: r.h2 >> s,
                        ..r.clone()
                    })
                    .collect();
                let feeds: Vec<CameraFeed> = cam_pyramid[s]
                    .iter()
                    .zip(&scaled_rigs)
                    .enumerate()
                    .map(|(k, (&features, rig))| CameraFeed {
                        key: (obs.agent_id, k as u32),
                        features,
                        transform: Transform2::identity(),
                        rig,
                    })
                    .collect();
                rg_attn_multi(tape, bevs[s], &specs[s], &feeds, &params.rg[s], &vars.rg[s], mode)?
            } else {
                bevs[s]
            };
            per_scale[s].push(warp_to_ego(tape, obs.agent_id, fused, &specs[s], &t)?);
        }
    }
    pyramid_fuse_scales(tape, &per_scale, &params.pyramid, &vars.pyramid)
}

/// Dispatches to the architecture recorded in the parameters.
pub fn pipeline_forward(
    tape: &mut Tape,
    agents: &[AgentObservation],
    ego_id: u32,
    params: &ModelParams,
    vars: &ModelVars,
    mode: &FusionMode,
) -> Result<VarId> {
    match params.architecture {
        Architecture::Ptp => ptp_forward(tape, agents, ego_id, params, vars, mode),
        Architecture::CosCoco => cos_coco_forward(tape, agents, ego_id, params, vars, mode),
        Architecture::Prgaf => prgaf_forward(tape, agents, ego_id, params, vars, mode),
    }
}

/// Full evaluation path for one frame: pipeline, detection head, decode
/// and NMS. Runs in inference mode on a throwaway tape.
pub fn run_frame_detections(
    agents: &[AgentObservation],
    ego_id: u32,
    params: &ModelParams,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<DetectionBox>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let fused = pipeline_forward(&mut tape, agents, ego_id, params, &vars, &FusionMode::Eval)?;
    let raw = detect_head(&mut tape, fused, vars.head)?;
    let spec = params.dims.bev_spec()?;
    decode_nms(tape.value(raw), &spec, score_thresh, nms_iou)
}
