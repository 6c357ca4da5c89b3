//! End-to-end training over synthetic frames.

use crate::arch::boxes::detect_head;
use crate::arch::loss::{detection_loss, FrameTargets, LossWeights};
use crate::arch::{pipeline_forward, AgentObservation, ModelParams};
use crate::error::{CoreError, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::param::ParamGroup;
use crate::rgattn::{mix_seed, FusionMode};
use crate::tape::Tape;

/// One training sample: observations, the designated ego and its
/// ego-frame targets.
pub struct TrainFrame {
    pub agents: Vec<AgentObservation>,
    pub ego_id: u32,
    pub targets: FrameTargets,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains the model in place, one optimizer step per frame, deterministic
/// under `seed`. Aborts with the partial loss history if the loss stops
/// being finite.
pub fn train_loop(
    frames: &[TrainFrame],
    params: &mut ModelParams,
    optimizer: &OptimizerConfig,
    epochs: usize,
    seed: u64,
    weights: &LossWeights,
) -> Result<TrainOutput> {
    if frames.is_empty() {
        return Err(CoreError::InvalidArgument("empty training set".into()));
    }
    let mut opt = Optimizer::new(*optimizer)?;
    params.zero_grads();

    let mut history: Vec<f64> = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for (i, frame) in frames.iter().enumerate() {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let mode = FusionMode::Train {
                dropout_seed: mix_seed(seed, (epoch * frames.len() + i) as u64),
            };
            let fused = pipeline_forward(&mut tape, &frame.agents, frame.ego_id, params, &vars, &mode)?;
            let raw = detect_head(&mut tape, fused, vars.head)?;
            let loss = detection_loss(&mut tape, raw, &frame.targets, weights)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(CoreError::Diverged { epoch, history });
            }
            let grads = tape.backward(loss)?;
            tape.accumulate_into(&grads, params);
            opt.step(params)?;
            total += value;
        }
        history.push(total / frames.len() as f64);
    }
    Ok(TrainOutput {
        epoch_losses: history,
    })
}
