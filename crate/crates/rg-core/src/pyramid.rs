//! Multi-scale, foreground-aware cross-agent BEV fusion.
//!
//! Every agent map is warped into the ego frame with a validity mask, then
//! fused at each pyramid scale: per-cell occupancy scores bias a softmax
//! over agents (with a log-validity term that suppresses out-of-coverage
//! regions), the weighted sum is mixed per scale, and the per-scale results
//! are upsampled, concatenated and mixed back to the input width.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{BevSpec, Transform2};
use crate::kernels;
use crate::param::{LinearParams, ParamGroup, Parameter};
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Additive floor inside the log-validity bias.
pub const VALIDITY_EPSILON: Real = 1e-6;

/// Weights of the pyramid fusion module.
#[derive(Debug, Clone)]
pub struct PyramidParams {
    pub c1: usize,
    pub n_scales: usize,
    /// Per-scale occupancy head, C1 → 1.
    pub occupancy: Vec<LinearParams>,
    /// Per-scale channel mix, C1 → C1.
    pub mix: Vec<LinearParams>,
    /// Final mix across concatenated scales, (n_scales·C1) → C1.
    pub final_mix: LinearParams,
}

impl PyramidParams {
    pub fn init(c1: usize, n_scales: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1,
            n_scales,
            // The occupancy bias shifts every agent's score equally at a
            // cell and cancels in the agent softmax; frozen at zero.
            occupancy: (0..n_scales)
                .map(|_| LinearParams::init_no_bias(c1, 1, rng))
                .collect(),
            mix: (0..n_scales).map(|_| LinearParams::init(c1, c1, rng)).collect(),
            final_mix: LinearParams::init(n_scales * c1, c1, rng),
        }
    }

    /// Identity configuration: per-scale mixes are the identity and the
    /// final mix passes through the full-resolution scale, so a
    /// single-agent fuse reproduces its input exactly.
    pub fn identity_passthrough(c1: usize, n_scales: usize) -> Self {
        let mut final_w = Tensor::zeros(&[n_scales * c1, c1]);
        for i in 0..c1 {
            final_w.set(&[i, i], 1.0);
        }
        Self {
            c1,
            n_scales,
            occupancy: (0..n_scales).map(|_| LinearParams::zeros(c1, 1)).collect(),
            mix: (0..n_scales).map(|_| LinearParams::identity(c1)).collect(),
            final_mix: LinearParams {
                weight: Parameter::new(final_w),
                bias: Parameter::new(Tensor::zeros(&[c1])),
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        for (s, lp) in self.occupancy.iter().enumerate() {
            lp.visit(&format!("{prefix}.occ{s}"), f);
        }
        for (s, lp) in self.mix.iter().enumerate() {
            lp.visit(&format!("{prefix}.mix{s}"), f);
        }
        self.final_mix.visit(&format!("{prefix}.final"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (s, lp) in self.occupancy.iter_mut().enumerate() {
            lp.visit_mut(&format!("{prefix}.occ{s}"), f);
        }
        for (s, lp) in self.mix.iter_mut().enumerate() {
            lp.visit_mut(&format!("{prefix}.mix{s}"), f);
        }
        self.final_mix.visit_mut(&format!("{prefix}.final"), f);
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> PyramidVars {
        let bind_lp = |tape: &mut Tape, p: &LinearParams, name: String| {
            (
                tape.param(&format!("{name}.w"), &p.weight),
                tape.param(&format!("{name}.b"), &p.bias),
            )
        };
        PyramidVars {
            occupancy: self
                .occupancy
                .iter()
                .enumerate()
                .map(|(s, lp)| bind_lp(tape, lp, format!("{prefix}.occ{s}")))
                .collect(),
            mix: self
                .mix
                .iter()
                .enumerate()
                .map(|(s, lp)| bind_lp(tape, lp, format!("{prefix}.mix{s}")))
                .collect(),
            final_mix: bind_lp(tape, &self.final_mix, format!("{prefix}.final")),
        }
    }
}

impl ParamGroup for PyramidParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.visit("pyr", f);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.visit_mut("pyr", f);
    }
}

/// Tape bindings of [`PyramidParams`].
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub occupancy: Vec<(VarId, VarId)>,
    pub mix: Vec<(VarId, VarId)>,
    pub final_mix: (VarId, VarId),
}

/// One agent's BEV map aligned into the ego frame.
pub struct WarpedAgentVar {
    pub agent_id: u32,
    /// C × H × W on the tape.
    pub feature: VarId,
    /// H × W warp coverage in [0, 1]; zero wherever the warp sampled fully
    /// outside the source extent.
    pub validity: Tensor,
}

/// Inverse-warps a source-frame map into the ego frame: each ego cell
/// samples the source at the back-projected cell center with zero padding.
pub fn warp_to_ego(
    tape: &mut Tape,
    agent_id: u32,
    feature: VarId,
    spec: &BevSpec,
    t_source_to_ego: &Transform2,
) -> Result<WarpedAgentVar> {
    let shape = tape.value(feature).shape().to_vec();
    if shape.len() != 3 || shape[1] != spec.h1 || shape[2] != spec.w1 {
        return Err(CoreError::ShapeMismatch {
            context: "warp_to_ego",
            expected: vec![shape[0], spec.h1, spec.w1],
            got: shape,
        });
    }
    let t_inv = t_source_to_ego.inverse();
    let mut coords = Vec::with_capacity(spec.h1 * spec.w1);
    for u in 0..spec.h1 {
        for v in 0..spec.w1 {
            let p_ego = spec.grid_to_world((u as f64, v as f64));
            let p_src = t_inv.apply(p_ego);
            coords.push(spec.world_to_grid(p_src));
        }
    }
    let coords = Arc::new(coords);
    let validity = Tensor::new(
        vec![spec.h1, spec.w1],
        kernels::bilinear_coverage(&coords, spec.h1, spec.w1),
    )?;
    let flat = tape.bilinear_sample(feature, coords)?;
    let warped = tape.reshape(flat, &[shape[0], spec.h1, spec.w1])?;
    Ok(WarpedAgentVar {
        agent_id,
        feature: warped,
        validity,
    })
}

/// 2×2 mean pooling; the pyramid's downsampling operator.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    kernels::mean_pool2(x)
}

/// Per-agent, per-cell fusion weights: softmax over agents of
/// (occupancy score + log(validity + ε)). Returns one flat [H·W] weight
/// vector per agent; weights sum to 1 at every cell.
pub fn occupancy_weights(
    tape: &mut Tape,
    feats: &[VarId],
    validities: &[Tensor],
    head: (VarId, VarId),
) -> Result<Vec<VarId>> {
    if feats.is_empty() || feats.len() != validities.len() {
        return Err(CoreError::InvalidArgument(
            "occupancy_weights needs at least one (feature, validity) pair".into(),
        ));
    }
    let shape = tape.value(feats[0]).shape().to_vec();
    let (c, l) = (shape[0], shape[1] * shape[2]);

    let mut score_rows = Vec::with_capacity(feats.len());
    for &f in feats {
        let flat = tape.reshape(f, &[c, l])?;
        let cols = tape.transpose(flat)?;
        let score = tape.linear(cols, head.0, head.1)?; // [l, 1]
        score_rows.push(tape.reshape(score, &[1, l])?);
    }
    let stacked = tape.concat_rows(&score_rows)?; // [A, l]

    let mut bias = Vec::with_capacity(feats.len() * l);
    for val in validities {
        bias.extend(val.data().iter().map(|&v| (v + VALIDITY_EPSILON).ln()));
    }
    let bias = Tensor::new(vec![feats.len(), l], bias)?;
    let biased = tape.add_fixed(stacked, &bias)?;
    let weights = tape.softmax(biased, 0)?;

    (0..feats.len())
        .map(|a| {
            let row = tape.slice_rows(weights, a, 1)?;
            tape.reshape(row, &[l])
        })
        .collect()
}

fn upsample_coords(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Arc<Vec<(f64, f64)>> {
    let mut coords = Vec::with_capacity(dst_h * dst_w);
    for u in 0..dst_h {
        for v in 0..dst_w {
            let su = ((u as f64 + 0.5) * src_h as f64 / dst_h as f64 - 0.5)
                .clamp(0.0, (src_h - 1) as f64);
            let sv = ((v as f64 + 0.5) * src_w as f64 / dst_w as f64 - 0.5)
                .clamp(0.0, (src_w - 1) as f64);
            coords.push((su, sv));
        }
    }
    Arc::new(coords)
}

/// Fuses per-scale agent maps (PRGAF feeds these directly; `pyramid_fuse`
/// builds them by pooling). `per_scale[s]` holds every agent's map at
/// divisor 2^s; all agents must appear at every scale.
pub fn pyramid_fuse_scales(
    tape: &mut Tape,
    per_scale: &[Vec<WarpedAgentVar>],
    params: &PyramidParams,
    vars: &PyramidVars,
) -> Result<VarId> {
    if per_scale.len() != params.n_scales {
        return Err(CoreError::InvalidArgument(format!(
            "expected {} scales, got {}",
            params.n_scales,
            per_scale.len()
        )));
    }
    if per_scale.iter().any(|maps| maps.is_empty()) {
        return Err(CoreError::InvalidArgument(
            "pyramid fusion needs at least one agent map per scale".into(),
        ));
    }
    let c = params.c1;
    let full_shape = tape.value(per_scale[0][0].feature).shape().to_vec();
    let (h1, w1) = (full_shape[1], full_shape[2]);

    let mut upsampled = Vec::with_capacity(params.n_scales);
    for (s, maps) in per_scale.iter().enumerate() {
        // Deterministic fixed reduction order regardless of caller order.
        let mut order: Vec<usize> = (0..maps.len()).collect();
        order.sort_by_key(|&i| maps[i].agent_id);

        let shape = tape.value(maps[order[0]].feature).shape().to_vec();
        let (hs, ws) = (shape[1], shape[2]);
        let l = hs * ws;

        let feats: Vec<VarId> = order.iter().map(|&i| maps[i].feature).collect();
        let vals: Vec<Tensor> = order.iter().map(|&i| maps[i].validity.clone()).collect();
        let weights = occupancy_weights(tape, &feats, &vals, vars.occupancy[s])?;

        let mut fused: Option<VarId> = None;
        for (f, w) in feats.iter().zip(&weights) {
            let flat = tape.reshape(*f, &[c, l])?;
            let weighted = tape.mul_row_broadcast(flat, *w)?;
            fused = Some(match fused {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        let fused = fused.expect("at least one agent");

        let cols = tape.transpose(fused)?;
        let mixed = tape.linear(cols, vars.mix[s].0, vars.mix[s].1)?;
        let mixed = tape.transpose(mixed)?; // [c, l]

        let up = if hs == h1 && ws == w1 {
            mixed
        } else {
            let grid = tape.reshape(mixed, &[c, hs, ws])?;
            tape.bilinear_sample(grid, upsample_coords(hs, ws, h1, w1))?
        };
        upsampled.push(up); // [c, h1*w1]
    }

    let concat = tape.concat_rows(&upsampled)?; // [n·c, h1*w1]
    let cols = tape.transpose(concat)?;
    let out = tape.linear(cols, vars.final_mix.0, vars.final_mix.1)?;
    let out = tape.transpose(out)?;
    tape.reshape(out, &[c, h1, w1])
}

/// Multi-scale foreground-aware fusion of ego-aligned agent maps. Builds
/// the scale pyramid by 2×2 mean pooling (features and validity alike),
/// fuses each scale and mixes the upsampled results back to C1 channels.
pub fn pyramid_fuse(
    tape: &mut Tape,
    maps: &[WarpedAgentVar],
    params: &PyramidParams,
    vars: &PyramidVars,
) -> Result<VarId> {
    if maps.is_empty() {
        return Err(CoreError::InvalidArgument(
            "pyramid_fuse needs at least one agent map".into(),
        ));
    }
    let mut per_scale: Vec<Vec<WarpedAgentVar>> = Vec::with_capacity(params.n_scales);
    for s in 0..params.n_scales {
        if s == 0 {
            per_scale.push(
                maps.iter()
                    .map(|m| WarpedAgentVar {
                        agent_id: m.agent_id,
                        feature: m.feature,
                        validity: m.validity.clone(),
                    })
                    .collect(),
            );
        } else {
            let prev = &per_scale[s - 1];
            let mut level = Vec::with_capacity(prev.len());
            for m in prev {
                let feature = tape.mean_pool2(m.feature)?;
                let validity = kernels::mean_pool2(&m.validity.reshaped(&[
                    1,
                    m.validity.shape()[0],
                    m.validity.shape()[1],
                ])?)?;
                let vs = validity.shape().to_vec();
                level.push(WarpedAgentVar {
                    agent_id: m.agent_id,
                    feature,
                    validity: validity.reshaped(&[vs[1], vs[2]])?,
                });
            }
            per_scale.push(level);
        }
    }
    pyramid_fuse_scales(tape, &per_scale, params, vars)
}
