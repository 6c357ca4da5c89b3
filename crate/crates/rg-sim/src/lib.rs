//! Deterministic multi-agent V2X simulation: scenario generation,
//! synthetic LiDAR / camera sensing with shared occlusion, pose-noise
//! modeling and the cooperative payload codec.

pub mod error;
pub mod noise;
pub mod payload;
pub mod rng;
pub mod scene;
pub mod sensors;

pub use error::{Result, SimError};
pub use noise::{apply_pose_noise, PoseNoiseModel};
pub use payload::{decode_payload, encode_payload, PayloadHeader, PayloadKind, PayloadStats, V2XMessage};
pub use scene::{generate_scene, RigTemplate, Scene, SceneAgent, SceneConfig};
pub use sensors::{
    build_observation, first_hit, gt_in_ego_frame, render_camera_semantics, sample_lidar,
    SensorConfig, RASTER_CHANNELS,
};
