//! Average precision over score-ranked, greedily matched detections.

use crate::arch::boxes::{rotated_iou, DetectionBox};
use crate::error::{CoreError, Result};

/// AP at one rotated-IoU threshold: detections across all frames are
/// ranked globally by score, each matches at most one unmatched GT in its
/// frame (highest IoU ≥ threshold wins), and the area under the
/// precision-recall curve is taken with all-point interpolation.
pub fn ap_eval(
    dets_per_frame: &[Vec<DetectionBox>],
    gts_per_frame: &[Vec<DetectionBox>],
    iou_threshold: f64,
) -> Result<f64> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "IoU threshold must lie in (0, 1), got {iou_threshold}"
        )));
    }
    if dets_per_frame.len() != gts_per_frame.len() {
        return Err(CoreError::InvalidArgument(
            "detection and ground-truth frame counts differ".into(),
        ));
    }
    let n_gt: usize = gts_per_frame.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return Err(CoreError::NoGroundTruth);
    }

    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (f, dets) in dets_per_frame.iter().enumerate() {
        for (i, d) in dets.iter().enumerate() {
            if !d.score.is_finite() {
                return Err(CoreError::NonFinite("detection score".into()));
            }
            ranked.push((d.score, f, i));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite scores")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut matched: Vec<Vec<bool>> = gts_per_frame.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &(_, f, i) in &ranked {
        let det = &dets_per_frame[f][i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts_per_frame[f].iter().enumerate() {
            if matched[f][g] {
                continue;
            }
            let iou = rotated_iou(det, gt);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                matched[f][g] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // Precision-recall with the precision envelope from the right.
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recalls.len() {
        ap += (recalls[k] - prev_recall) * envelope[k];
        prev_recall = recalls[k];
    }
    Ok(ap)
}
