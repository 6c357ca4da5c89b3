//! Detection targets and the three-part training loss.

use crate::arch::boxes::{DetectionBox, HEAD_CHANNELS};
use crate::error::{CoreError, Result};
use crate::geometry::BevSpec;
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Per-cell regression/classification targets for one frame.
#[derive(Debug, Clone)]
pub struct FrameTargets {
    /// [H·W] objectness in {0, 1}.
    pub objectness: Tensor,
    /// [4, H·W]: dx, dy, log w, log l.
    pub regression: Tensor,
    /// [2, H·W]: sin yaw, cos yaw.
    pub direction: Tensor,
    /// [H·W] foreground mask weighting the regression terms.
    pub foreground: Tensor,
    pub n_foreground: usize,
}

/// Builds targets from ego-frame ground-truth boxes: a cell is foreground
/// when its center lies inside a box (first box by index on overlap).
pub fn build_targets(gt: &[DetectionBox], spec: &BevSpec) -> FrameTargets {
    let plane = spec.h1 * spec.w1;
    let mut objectness = Tensor::zeros(&[plane]);
    let mut regression = Tensor::zeros(&[4, plane]);
    let mut direction = Tensor::zeros(&[2, plane]);
    let mut n_fg = 0usize;
    for u in 0..spec.h1 {
        for v in 0..spec.w1 {
            let cell = u * spec.w1 + v;
            let center = spec.grid_to_world((u as f64, v as f64));
            if let Some(b) = gt.iter().find(|b| b.contains(center)) {
                objectness.data_mut()[cell] = 1.0;
                let r = regression.data_mut();
                r[cell] = (b.cx - center[0]) as Real;
                r[plane + cell] = (b.cy - center[1]) as Real;
                r[2 * plane + cell] = (b.w.ln()) as Real;
                r[3 * plane + cell] = (b.l.ln()) as Real;
                let d = direction.data_mut();
                d[cell] = b.yaw.sin() as Real;
                d[plane + cell] = b.yaw.cos() as Real;
                n_fg += 1;
            }
        }
    }
    let foreground = objectness.clone();
    FrameTargets {
        objectness,
        regression,
        direction,
        foreground,
        n_foreground: n_fg,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_reg: Real,
    pub lambda_dir: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 1.0,
            lambda_dir: 1.0,
        }
    }
}

/// cls + λ_reg·reg + λ_dir·dir: binary cross-entropy on objectness over
/// all cells, L1 on box regression and orientation restricted to (and
/// weighted by) the foreground mask, normalized by foreground count.
pub fn detection_loss(
    tape: &mut Tape,
    raw: VarId,
    targets: &FrameTargets,
    weights: &LossWeights,
) -> Result<VarId> {
    let shape = tape.value(raw).shape().to_vec();
    if shape.len() != 3 || shape[0] != HEAD_CHANNELS {
        return Err(CoreError::InvalidArgument(format!(
            "detection_loss expects {HEAD_CHANNELS}×H×W raw predictions, got {shape:?}"
        )));
    }
    let plane = shape[1] * shape[2];
    let flat = tape.reshape(raw, &[HEAD_CHANNELS, plane])?;

    let obj = tape.slice_rows(flat, 0, 1)?;
    let obj = tape.reshape(obj, &[plane])?;
    let cls = tape.bce_with_logits_mean(obj, targets.objectness.clone())?;

    let norm = 1.0 / (targets.n_foreground.max(1) as Real);
    let reg_pred = tape.slice_rows(flat, 1, 4)?;
    let reg = tape.masked_l1_sum(
        reg_pred,
        targets.regression.clone(),
        targets.foreground.clone(),
    )?;
    let reg = tape.scale(reg, weights.lambda_reg * norm);

    let dir_pred = tape.slice_rows(flat, 5, 2)?;
    let dir = tape.masked_l1_sum(
        dir_pred,
        targets.direction.clone(),
        targets.foreground.clone(),
    )?;
    let dir = tape.scale(dir, weights.lambda_dir * norm);

    let partial = tape.add(reg, dir)?;
    tape.add(cls, partial)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BevSpec {
        BevSpec::new(-4.0, 4.0, -4.0, 4.0, 1.0).unwrap()
    }

    fn gt() -> Vec<DetectionBox> {
        vec![DetectionBox {
            cx: 0.7,
            cy: -1.2,
            w: 1.6,
            l: 3.5,
            yaw: 0.4,
            score: 1.0,
        }]
    }

    #[test]
    fn targets_mark_cells_inside_boxes() {
        let t = build_targets(&gt(), &spec());
        assert!(t.n_foreground > 0);
        assert_eq!(
            t.objectness.data().iter().filter(|&&v| v == 1.0).count(),
            t.n_foreground
        );
        // The cell containing the box center is foreground.
        let (u, v) = spec().world_to_grid([0.7, -1.2]);
        let cell = (u.round() as usize) * 8 + v.round() as usize;
        assert_eq!(t.objectness.data()[cell], 1.0);
        assert!((t.direction.data()[cell] - 0.4f64.sin() as Real).abs() < 1e-12);
    }

    #[test]
    fn perfect_regression_leaves_only_classification_floor() {
        let s = spec();
        let t = build_targets(&gt(), &s);
        let plane = 64;
        // Predictions equal to targets on all reg/dir channels; objectness
        // logits at +3 on foreground, −3 elsewhere.
        let mut raw = Tensor::zeros(&[HEAD_CHANNELS, 8, 8]);
        for cell in 0..plane {
            let d = raw.data_mut();
            d[cell] = if t.objectness.data()[cell] == 1.0 { 3.0 } else { -3.0 };
            d[plane + cell] = t.regression.data()[cell];
            d[2 * plane + cell] = t.regression.data()[plane + cell];
            d[3 * plane + cell] = t.regression.data()[2 * plane + cell];
            d[4 * plane + cell] = t.regression.data()[3 * plane + cell];
            d[5 * plane + cell] = t.direction.data()[cell];
            d[6 * plane + cell] = t.direction.data()[plane + cell];
        }
        let mut tape = Tape::new();
        let r = tape.leaf(raw);
        let loss = detection_loss(&mut tape, r, &t, &LossWeights::default()).unwrap();
        // The same BCE evaluated directly.
        let want: Real = (0..plane)
            .map(|cell| {
                let z: Real = if t.objectness.data()[cell] == 1.0 { 3.0 } else { -3.0 };
                let tt = t.objectness.data()[cell];
                z.max(0.0) - z * tt + (-z.abs()).exp().ln_1p()
            })
            .sum::<Real>()
            / plane as Real;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_foreground_zeroes_reg_and_dir() {
        let s = spec();
        let t = build_targets(&[], &s);
        assert_eq!(t.n_foreground, 0);
        let mut raw = Tensor::filled(&[HEAD_CHANNELS, 8, 8], 0.7);
        raw.data_mut()[0] = -0.3;
        let mut tape = Tape::new();
        let r = tape.leaf(raw);
        let loss = detection_loss(&mut tape, r, &t, &LossWeights::default()).unwrap();
        // Only the BCE term can contribute.
        let mut tape2 = Tape::new();
        let mut obj = Tensor::filled(&[64], 0.7);
        obj.data_mut()[0] = -0.3;
        let o = tape2.leaf(obj);
        let cls = tape2.bce_with_logits_mean(o, Tensor::zeros(&[64])).unwrap();
        assert!((tape.value(loss).item() - tape2.value(cls).item()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_straight_line_formula() {
        let s = spec();
        let t = build_targets(&gt(), &s);
        let plane = 64;
        let raw = Tensor::new(
            vec![HEAD_CHANNELS, 8, 8],
            (0..HEAD_CHANNELS * plane)
                .map(|i| ((i * 37 % 101) as Real - 50.0) * 0.02)
                .collect(),
        )
        .unwrap();
        let weights = LossWeights {
            lambda_reg: 0.7,
            lambda_dir: 1.3,
        };
        let mut tape = Tape::new();
        let r = tape.leaf(raw.clone());
        let loss = detection_loss(&mut tape, r, &t, &weights).unwrap();

        let sigmoid = |z: Real| 1.0 / (1.0 + (-z).exp());
        let mut cls = 0.0;
        for cell in 0..plane {
            let z = raw.data()[cell];
            let tt = t.objectness.data()[cell];
            let p = sigmoid(z);
            cls += -(tt * p.ln() + (1.0 - tt) * (1.0 - p).ln());
        }
        cls /= plane as Real;
        let mut reg = 0.0;
        let mut dir = 0.0;
        for cell in 0..plane {
            let m = t.foreground.data()[cell];
            for ch in 0..4 {
                reg += m * (raw.data()[(1 + ch) * plane + cell] - t.regression.data()[ch * plane + cell]).abs();
            }
            for ch in 0..2 {
                dir += m * (raw.data()[(5 + ch) * plane + cell] - t.direction.data()[ch * plane + cell]).abs();
            }
        }
        let n = t.n_foreground as Real;
        let want = cls + 0.7 * reg / n + 1.3 * dir / n;
        assert!((tape.value(loss).item() - want).abs() < 1e-9);
    }
}
