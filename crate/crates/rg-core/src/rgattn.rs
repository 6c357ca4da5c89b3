//! Radian-glue attention: cross-modal fusion of camera features into a
//! LiDAR-derived BEV map.
//!
//! The kernel samples a camera-aligned polar sector from the BEV
//! (`grid_sector_sample`), builds query tokens from the sub-BEV and key /
//! value tokens from the camera feature map (`pl_process`), runs scaled
//! dot-product attention independently per column (`column_mha`), projects
//! back to BEV channels, inverts the sector sampling
//! (`grid_sector_inverse`) and adds the result residually onto the input
//! map.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{build_sector, BevSpec, CameraRig, GridSectorConfig, Transform2};
use crate::kernels;
use crate::param::{LinearParams, ParamGroup, Parameter};
use crate::tape::{DropoutSpec, Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Positional encoding strategy applied during the PL process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncodingKind {
    None,
    Learnable,
    DepthHeight,
}

/// Token role inside the attention: queries come from the sub-BEV, keys
/// and values from the camera feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Query,
    Key,
    Value,
}

/// Whether dropout masks are applied and from which seed they derive.
#[derive(Debug, Clone, Copy)]
pub enum FusionMode {
    Eval,
    Train { dropout_seed: u64 },
}

impl FusionMode {
    pub fn dropout(&self, rate: f64, salt: u64) -> Option<DropoutSpec> {
        match self {
            FusionMode::Eval => None,
            FusionMode::Train { dropout_seed } if rate > 0.0 => Some(DropoutSpec {
                rate,
                seed: mix_seed(*dropout_seed, salt),
            }),
            FusionMode::Train { .. } => None,
        }
    }
}

/// SplitMix64-style seed mixing so per-camera dropout streams depend only
/// on stable keys, never on list position.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Weights of one radian-glue attention module.
#[derive(Debug, Clone)]
pub struct RgAttnParams {
    pub c1: usize,
    pub c2: usize,
    /// Radial bins of the grid sector (query token count per column).
    pub radial_bins: usize,
    /// Camera feature height (key/value token count per column).
    pub h_cam: usize,
    pub d_model: usize,
    pub heads: usize,
    pub dropout_rate: f64,
    pub encoding: PositionalEncodingKind,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    /// Learnable encodings, shared across columns; present iff
    /// `encoding == Learnable`.
    pub pos_bev: Option<Parameter>,
    pub pos_cam: Option<Parameter>,
    /// Scalar scales of the depth/height ramps; present iff
    /// `encoding == DepthHeight`.
    pub pos_scale_bev: Option<Parameter>,
    pub pos_scale_cam: Option<Parameter>,
}

impl RgAttnParams {
    pub fn init(
        c1: usize,
        c2: usize,
        radial_bins: usize,
        h_cam: usize,
        d_model: usize,
        heads: usize,
        encoding: PositionalEncodingKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_model % heads != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "d_model {d_model} not divisible by heads {heads}"
            )));
        }
        let learnable = encoding == PositionalEncodingKind::Learnable;
        let hybrid = encoding == PositionalEncodingKind::DepthHeight;
        Ok(Self {
            c1,
            c2,
            radial_bins,
            h_cam,
            d_model,
            heads,
            dropout_rate: 0.1,
            encoding,
            wq: LinearParams::init(c1, d_model, rng),
            // A key-projection bias shifts every logit in a row equally and
            // cancels in the softmax; keep it frozen at zero.
            wk: LinearParams::init_no_bias(c2, d_model, rng),
            wv: LinearParams::init(c2, d_model, rng),
            wo: LinearParams::init(d_model, c1, rng),
            pos_bev: learnable.then(|| Parameter::new(Tensor::zeros(&[radial_bins, c1]))),
            pos_cam: learnable.then(|| Parameter::new(Tensor::zeros(&[h_cam, c2]))),
            pos_scale_bev: hybrid.then(|| Parameter::new(Tensor::scalar(1.0))),
            pos_scale_cam: hybrid.then(|| Parameter::new(Tensor::scalar(1.0))),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        if let Some(p) = &self.pos_bev {
            f(&format!("{prefix}.pos_bev"), p);
        }
        if let Some(p) = &self.pos_cam {
            f(&format!("{prefix}.pos_cam"), p);
        }
        if let Some(p) = &self.pos_scale_bev {
            f(&format!("{prefix}.pos_scale_bev"), p);
        }
        if let Some(p) = &self.pos_scale_cam {
            f(&format!("{prefix}.pos_scale_cam"), p);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        if let Some(p) = &mut self.pos_bev {
            f(&format!("{prefix}.pos_bev"), p);
        }
        if let Some(p) = &mut self.pos_cam {
            f(&format!("{prefix}.pos_cam"), p);
        }
        if let Some(p) = &mut self.pos_scale_bev {
            f(&format!("{prefix}.pos_scale_bev"), p);
        }
        if let Some(p) = &mut self.pos_scale_cam {
            f(&format!("{prefix}.pos_scale_cam"), p);
        }
    }

    /// Binds every parameter onto a tape under `prefix`.
    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> RgAttnVars {
        RgAttnVars {
            wq: bind_linear(tape, &format!("{prefix}.wq"), &self.wq),
            wk: bind_linear(tape, &format!("{prefix}.wk"), &self.wk),
            wv: bind_linear(tape, &format!("{prefix}.wv"), &self.wv),
            wo: bind_linear(tape, &format!("{prefix}.wo"), &self.wo),
            pos_bev: self
                .pos_bev
                .as_ref()
                .map(|p| tape.param(&format!("{prefix}.pos_bev"), p)),
            pos_cam: self
                .pos_cam
                .as_ref()
                .map(|p| tape.param(&format!("{prefix}.pos_cam"), p)),
            pos_scale_bev: self
                .pos_scale_bev
                .as_ref()
                .map(|p| tape.param(&format!("{prefix}.pos_scale_bev"), p)),
            pos_scale_cam: self
                .pos_scale_cam
                .as_ref()
                .map(|p| tape.param(&format!("{prefix}.pos_scale_cam"), p)),
        }
    }
}

impl ParamGroup for RgAttnParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.visit("rg", f);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.visit_mut("rg", f);
    }
}

fn bind_linear(tape: &mut Tape, prefix: &str, lp: &LinearParams) -> (VarId, VarId) {
    (
        tape.param(&format!("{prefix}.w"), &lp.weight),
        tape.param(&format!("{prefix}.b"), &lp.bias),
    )
}

/// Tape bindings of [`RgAttnParams`].
#[derive(Debug, Clone, Copy)]
pub struct RgAttnVars {
    pub wq: (VarId, VarId),
    pub wk: (VarId, VarId),
    pub wv: (VarId, VarId),
    pub wo: (VarId, VarId),
    pub pos_bev: Option<VarId>,
    pub pos_cam: Option<VarId>,
    pub pos_scale_bev: Option<VarId>,
    pub pos_scale_cam: Option<VarId>,
}

/// A polar sub-BEV map together with the sector it was sampled with.
#[derive(Debug, Clone)]
pub struct SubBevMap {
    /// C1 × h × w2
    pub data: Tensor,
    pub cfg: GridSectorConfig,
}

/// Grid coordinates of every sector sample point (radial-major).
pub fn sector_coords(spec: &BevSpec, cfg: &GridSectorConfig) -> Arc<Vec<(f64, f64)>> {
    Arc::new(
        cfg.sample_points()
            .into_iter()
            .map(|p| spec.world_to_grid(p))
            .collect(),
    )
}

/// Samples the BEV map over a polar grid sector; out-of-extent points
/// yield zeros.
pub fn grid_sector_sample(bev: &Tensor, spec: &BevSpec, cfg: &GridSectorConfig) -> Result<SubBevMap> {
    cfg.validate()?;
    let coords = sector_coords(spec, cfg);
    let flat = kernels::bilinear_sample_2d(bev, &coords);
    let c = bev.shape()[0];
    Ok(SubBevMap {
        data: flat.reshaped(&[c, cfg.h, cfg.w2])?,
        cfg: cfg.clone(),
    })
}

/// Splats a sub-BEV map back onto the Cartesian grid, normalizing by the
/// accumulated bilinear weight; cells with negligible weight stay zero.
pub fn grid_sector_inverse(sub: &SubBevMap, spec: &BevSpec) -> Result<Tensor> {
    let c = sub.data.shape()[0];
    let coords = sector_coords(spec, &sub.cfg);
    let flat = sub.data.reshaped(&[c, coords.len()])?;
    let mut tape = Tape::new();
    let v = tape.leaf(flat);
    let out = tape.bilinear_splat_norm(v, coords, spec.h1, spec.w1)?;
    Ok(tape.value(out).clone())
}

/// The PL process: positional embedding, reshape into per-column tokens,
/// linear projection to the attention width. Returns [w, h, d_model].
pub fn pl_process(
    tape: &mut Tape,
    feature: VarId,
    role: TokenRole,
    params: &RgAttnParams,
    vars: &RgAttnVars,
) -> Result<VarId> {
    let shape = tape.value(feature).shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "pl_process expects C×H×W, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let expected_c = match role {
        TokenRole::Query => params.c1,
        TokenRole::Key | TokenRole::Value => params.c2,
    };
    if c != expected_c {
        return Err(CoreError::ShapeMismatch {
            context: "pl_process",
            expected: vec![expected_c, h, w],
            got: shape,
        });
    }

    // C×H×W → W×H×C: one token per (column, height) position.
    let mut tokens = tape.permute3(feature, [2, 1, 0])?;

    match params.encoding {
        PositionalEncodingKind::None => {}
        PositionalEncodingKind::Learnable => {
            let pos = match role {
                TokenRole::Query => vars.pos_bev,
                _ => vars.pos_cam,
            }
            .ok_or_else(|| {
                CoreError::InvalidArgument("learnable encoding selected but tensors missing".into())
            })?;
            tokens = tape.add_broadcast_leading(tokens, pos)?;
        }
        PositionalEncodingKind::DepthHeight => {
            let scale = match role {
                TokenRole::Query => vars.pos_scale_bev,
                _ => vars.pos_scale_cam,
            }
            .ok_or_else(|| {
                CoreError::InvalidArgument("depth-height encoding selected but scales missing".into())
            })?;
            // Queries carry the normalized radial depth of their bin,
            // keys/values the normalized row height.
            let ramp: Vec<Real> = (0..h).map(|i| i as Real / h as Real).collect();
            tokens = tape.add_scaled_vec(tokens, scale, ramp)?;
        }
    }

    let proj = match role {
        TokenRole::Query => vars.wq,
        TokenRole::Key => vars.wk,
        TokenRole::Value => vars.wv,
    };
    let flat = tape.reshape(tokens, &[w * h, c])?;
    let projected = tape.linear(flat, proj.0, proj.1)?;
    tape.reshape(projected, &[w, h, params.d_model])
}

/// Column-wise multi-head attention with the module's head count and
/// dropout configuration.
pub fn column_mha(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    params: &RgAttnParams,
    mode: &FusionMode,
    dropout_salt: u64,
) -> Result<VarId> {
    tape.column_mha(
        q,
        k,
        v,
        params.heads,
        mode.dropout(params.dropout_rate, dropout_salt),
    )
}

/// One camera feeding a fusion target.
pub struct CameraFeed<'a> {
    /// Stable identity (agent id, rig index); ordering and dropout streams
    /// key off this, never off list position.
    pub key: (u32, u32),
    /// C2 × H2 × W2 features on the tape.
    pub features: VarId,
    /// Transform from the camera's agent frame into the target BEV frame.
    pub transform: Transform2,
    pub rig: &'a CameraRig,
}

/// Camera-enhanced sub-BEV before inversion: sample → PL → column
/// attention → output projection. Returns [C1, h, w2] plus the sector.
pub fn rg_attn_fused_sub(
    tape: &mut Tape,
    bev: VarId,
    spec: &BevSpec,
    feed: &CameraFeed,
    params: &RgAttnParams,
    vars: &RgAttnVars,
    mode: &FusionMode,
) -> Result<(VarId, GridSectorConfig)> {
    let bev_shape = tape.value(bev).shape().to_vec();
    let cam_shape = tape.value(feed.features).shape().to_vec();
    if bev_shape.len() != 3 || bev_shape[0] != params.c1 {
        return Err(CoreError::ShapeMismatch {
            context: "rg_attn bev",
            expected: vec![params.c1],
            got: bev_shape,
        });
    }
    if cam_shape != [params.c2, params.h_cam, feed.rig.w2] {
        return Err(CoreError::ShapeMismatch {
            context: "rg_attn camera",
            expected: vec![params.c2, params.h_cam, feed.rig.w2],
            got: cam_shape,
        });
    }

    let cfg = build_sector(&feed.transform, feed.rig, spec, params.radial_bins)?;
    let coords = sector_coords(spec, &cfg);

    let sub_flat = tape.bilinear_sample(bev, coords)?;
    let sub = tape.reshape(sub_flat, &[params.c1, cfg.h, cfg.w2])?;

    let q = pl_process(tape, sub, TokenRole::Query, params, vars)?;
    // Camera image columns run opposite to sector bearings; reverse the
    // token columns so column w of q, k and v share one bearing.
    let k_img = pl_process(tape, feed.features, TokenRole::Key, params, vars)?;
    let v_img = pl_process(tape, feed.features, TokenRole::Value, params, vars)?;
    let k = tape.reverse_axis0(k_img);
    let v = tape.reverse_axis0(v_img);

    let salt = (feed.key.0 as u64) << 32 | feed.key.1 as u64;
    let fused = column_mha(tape, q, k, v, params, mode, salt)?;

    let flat = tape.reshape(fused, &[cfg.w2 * cfg.h, params.d_model])?;
    let projected = tape.linear(flat, vars.wo.0, vars.wo.1)?;
    let tokens = tape.reshape(projected, &[cfg.w2, cfg.h, params.c1])?;
    let sub_fused = tape.permute3(tokens, [2, 1, 0])?;
    Ok((sub_fused, cfg))
}

/// The BEV-space delta contributed by one camera (inverse-sampled fused
/// sub-BEV, before the residual addition).
pub fn rg_attn_delta(
    tape: &mut Tape,
    bev: VarId,
    spec: &BevSpec,
    feed: &CameraFeed,
    params: &RgAttnParams,
    vars: &RgAttnVars,
    mode: &FusionMode,
) -> Result<VarId> {
    let (sub_fused, cfg) = rg_attn_fused_sub(tape, bev, spec, feed, params, vars, mode)?;
    let coords = sector_coords(spec, &cfg);
    let flat = tape.reshape(sub_fused, &[params.c1, cfg.h * cfg.w2])?;
    tape.bilinear_splat_norm(flat, coords, spec.h1, spec.w1)
}

/// Full radian-glue attention for a single camera: sector sample, column
/// attention against the camera features, sector inversion, residual add.
pub fn rg_attn_apply(
    tape: &mut Tape,
    bev: VarId,
    spec: &BevSpec,
    feed: &CameraFeed,
    params: &RgAttnParams,
    vars: &RgAttnVars,
    mode: &FusionMode,
) -> Result<VarId> {
    let delta = rg_attn_delta(tape, bev, spec, feed, params, vars, mode)?;
    tape.add(bev, delta)
}

/// Multi-camera aggregation: every camera's delta is computed against the
/// same input BEV, the deltas are summed in sorted key order and added
/// once. An empty camera list returns the input unchanged.
pub fn rg_attn_multi(
    tape: &mut Tape,
    bev: VarId,
    spec: &BevSpec,
    feeds: &[CameraFeed],
    params: &RgAttnParams,
    vars: &RgAttnVars,
    mode: &FusionMode,
) -> Result<VarId> {
    if feeds.is_empty() {
        return Ok(bev);
    }
    let mut order: Vec<usize> = (0..feeds.len()).collect();
    order.sort_by_key(|&i| feeds[i].key);

    let mut total: Option<VarId> = None;
    for &i in &order {
        let delta = rg_attn_delta(tape, bev, spec, &feeds[i], params, vars, mode)?;
        total = Some(match total {
            None => delta,
            Some(acc) => tape.add(acc, delta)?,
        });
    }
    tape.add(bev, total.expect("non-empty feeds"))
}

/// Exact multiply-accumulate count of one `rg_attn_apply`: the q/k/v and
/// output projections plus the two attention matmuls per column and head.
/// Bias additions, positional encodings, sampling and softmax are not
/// counted. Matches the tally of [`crate::opcount`] over the same call.
#[allow(clippy::too_many_arguments)]
pub fn attention_op_count(
    h_bev: u64,
    h_cam: u64,
    w2: u64,
    c1: u64,
    c2: u64,
    d: u64,
    heads: u64,
) -> u64 {
    if heads == 0 {
        return 0;
    }
    let dh = d / heads;
    let q_proj = w2 * h_bev * c1 * d;
    let kv_proj = 2 * w2 * h_cam * c2 * d;
    let attn = w2 * heads * 2 * h_bev * h_cam * dh;
    let out_proj = w2 * h_bev * d * c1;
    q_proj + kv_proj + attn + out_proj
}
