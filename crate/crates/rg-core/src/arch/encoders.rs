//! Toy sensor encoders: per-cell LiDAR statistics and a per-pixel camera
//! raster projection. Stand-ins for full point-cloud / image backbones;
//! they only need to produce geometrically meaningful, learnable features.

use crate::error::{CoreError, Result};
use crate::geometry::BevSpec;
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// One LiDAR return in the agent frame.
#[derive(Debug, Clone, Copy)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

/// Channels of the per-cell statistics image fed to the LiDAR projection.
pub const LIDAR_STAT_CHANNELS: usize = 4;

/// Per-cell statistics: log(1+count), mean z, max z, mean intensity.
/// Returns the stats image and the occupancy mask (1 where any point fell).
pub fn lidar_cell_stats(points: &[LidarPoint], spec: &BevSpec) -> (Tensor, Tensor) {
    let (h, w) = (spec.h1, spec.w1);
    let plane = h * w;
    let mut count = vec![0.0f64; plane];
    let mut sum_z = vec![0.0f64; plane];
    let mut max_z = vec![0.0f64; plane];
    let mut sum_i = vec![0.0f64; plane];
    for p in points {
        let ix = ((p.x - spec.x_min) / spec.cell).floor();
        let iy = ((p.y - spec.y_min) / spec.cell).floor();
        if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
            continue;
        }
        let cell = iy as usize * w + ix as usize;
        count[cell] += 1.0;
        sum_z[cell] += p.z;
        max_z[cell] = if count[cell] == 1.0 { p.z } else { max_z[cell].max(p.z) };
        sum_i[cell] += p.intensity;
    }
    let mut stats = Tensor::zeros(&[LIDAR_STAT_CHANNELS, h, w]);
    let mut mask = Tensor::zeros(&[plane]);
    for cell in 0..plane {
        if count[cell] > 0.0 {
            let d = stats.data_mut();
            d[cell] = (1.0 + count[cell]).ln() as Real;
            d[plane + cell] = (sum_z[cell] / count[cell]) as Real;
            d[2 * plane + cell] = max_z[cell] as Real;
            d[3 * plane + cell] = (sum_i[cell] / count[cell]) as Real;
            mask.data_mut()[cell] = 1.0;
        }
    }
    (stats, mask)
}

/// Projects per-cell LiDAR statistics to C1 channels. Cells without any
/// point stay exactly zero (the projection bias is masked out there).
pub fn lidar_encode(
    tape: &mut Tape,
    points: &[LidarPoint],
    spec: &BevSpec,
    proj: (VarId, VarId),
    c1: usize,
) -> Result<VarId> {
    let (stats, mask) = lidar_cell_stats(points, spec);
    let plane = spec.h1 * spec.w1;
    let s = tape.leaf(stats);
    let flat = tape.reshape(s, &[LIDAR_STAT_CHANNELS, plane])?;
    let cols = tape.transpose(flat)?;
    let projected = tape.linear(cols, proj.0, proj.1)?;
    let rows = tape.transpose(projected)?; // [c1, plane]
    let mask_var = tape.leaf(mask);
    let masked = {
        // mul_row_broadcast takes the weight from the tape but the mask is
        // constant; route it through a leaf.
        let m = mask_var;
        tape.mul_row_broadcast(rows, m)?
    };
    tape.reshape(masked, &[c1, spec.h1, spec.w1])
}

/// Per-pixel linear projection of a synthetic semantic raster to C2
/// channels.
pub fn camera_encode(
    tape: &mut Tape,
    raster: &Tensor,
    proj: (VarId, VarId),
    c2: usize,
) -> Result<VarId> {
    let shape = raster.shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(
            "camera_encode expects a Craw×H2×W2 raster".into(),
        ));
    }
    let (craw, h2, w2) = (shape[0], shape[1], shape[2]);
    let r = tape.leaf(raster.clone());
    let flat = tape.reshape(r, &[craw, h2 * w2])?;
    let cols = tape.transpose(flat)?;
    let projected = tape.linear(cols, proj.0, proj.1)?;
    let rows = tape.transpose(projected)?;
    tape.reshape(rows, &[c2, h2, w2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{seeded_rng, LinearParams};
    use rand::Rng;

    fn spec() -> BevSpec {
        BevSpec::new(-4.0, 4.0, -4.0, 4.0, 1.0).unwrap()
    }

    fn bind(tape: &mut Tape, lp: &LinearParams, name: &str) -> (VarId, VarId) {
        (
            tape.param(&format!("{name}.w"), &lp.weight),
            tape.param(&format!("{name}.b"), &lp.bias),
        )
    }

    #[test]
    fn no_points_gives_all_zero_map() {
        let mut tape = Tape::new();
        let lp = LinearParams::init(LIDAR_STAT_CHANNELS, 3, &mut seeded_rng(2));
        let proj = bind(&mut tape, &lp, "enc");
        let out = lidar_encode(&mut tape, &[], &spec(), proj, 3).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_lights_exactly_one_cell() {
        let mut tape = Tape::new();
        let lp = LinearParams::init(LIDAR_STAT_CHANNELS, 3, &mut seeded_rng(2));
        let proj = bind(&mut tape, &lp, "enc");
        let pts = [LidarPoint {
            x: 1.3,
            y: -2.7,
            z: 0.9,
            intensity: 0.5,
        }];
        let out = lidar_encode(&mut tape, &pts, &spec(), proj, 3).unwrap();
        let val = tape.value(out);
        let mut nonzero_cells = std::collections::BTreeSet::new();
        for c in 0..3 {
            for u in 0..8 {
                for v in 0..8 {
                    if val.at(&[c, u, v]) != 0.0 {
                        nonzero_cells.insert((u, v));
                    }
                }
            }
        }
        // x=1.3 → column 5, y=−2.7 → row 1.
        assert_eq!(nonzero_cells.into_iter().collect::<Vec<_>>(), vec![(1, 5)]);
    }

    #[test]
    fn cell_stats_match_brute_force_binning() {
        let mut rng = seeded_rng(13);
        let pts: Vec<LidarPoint> = (0..200)
            .map(|_| LidarPoint {
                x: rng.random_range(-5.0..5.0),
                y: rng.random_range(-5.0..5.0),
                z: rng.random_range(0.0..2.0),
                intensity: rng.random_range(0.0..1.0),
            })
            .collect();
        let spec = spec();
        let (stats, mask) = lidar_cell_stats(&pts, &spec);
        let plane = 64;
        for u in 0..8 {
            for v in 0..8 {
                let hits: Vec<&LidarPoint> = pts
                    .iter()
                    .filter(|p| {
                        let ix = ((p.x + 4.0) / 1.0).floor();
                        let iy = ((p.y + 4.0) / 1.0).floor();
                        ix >= 0.0 && iy >= 0.0 && ix < 8.0 && iy < 8.0
                            && iy as usize == u && ix as usize == v
                    })
                    .collect();
                let cell = u * 8 + v;
                if hits.is_empty() {
                    assert_eq!(mask.data()[cell], 0.0);
                    for ch in 0..LIDAR_STAT_CHANNELS {
                        assert_eq!(stats.data()[ch * plane + cell], 0.0);
                    }
                } else {
                    let n = hits.len() as f64;
                    assert_eq!(mask.data()[cell], 1.0);
                    assert!((stats.data()[cell] as f64 - (1.0 + n).ln()).abs() < 1e-12);
                    let mean_z: f64 = hits.iter().map(|p| p.z).sum::<f64>() / n;
                    let max_z = hits.iter().map(|p| p.z).fold(f64::MIN, f64::max);
                    let mean_i: f64 = hits.iter().map(|p| p.intensity).sum::<f64>() / n;
                    assert!((stats.data()[plane + cell] as f64 - mean_z).abs() < 1e-12);
                    assert!((stats.data()[2 * plane + cell] as f64 - max_z).abs() < 1e-12);
                    assert!((stats.data()[3 * plane + cell] as f64 - mean_i).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn camera_encode_zero_raster_zero_bias() {
        let mut tape = Tape::new();
        let lp = LinearParams::init(4, 2, &mut seeded_rng(6));
        let proj = bind(&mut tape, &lp, "cam");
        let out = camera_encode(&mut tape, &Tensor::zeros(&[4, 3, 5]), proj, 2).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn camera_encode_identity_projection_passes_through() {
        let mut tape = Tape::new();
        let lp = LinearParams::identity(3);
        let proj = bind(&mut tape, &lp, "cam");
        let raster = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as Real).collect()).unwrap();
        let out = camera_encode(&mut tape, &raster, proj, 3).unwrap();
        assert_eq!(tape.value(out).data(), raster.data());
    }

    #[test]
    fn camera_encode_matches_per_pixel_matmul() {
        let mut tape = Tape::new();
        let lp = LinearParams::init(3, 2, &mut seeded_rng(9));
        let proj = bind(&mut tape, &lp, "cam");
        let raster = Tensor::new(vec![3, 2, 2], (0..12).map(|v| (v as Real).cos()).collect()).unwrap();
        let out = camera_encode(&mut tape, &raster, proj, 2).unwrap();
        for px in 0..4 {
            for o in 0..2 {
                let mut want = lp.bias.value.data()[o];
                for c in 0..3 {
                    want += raster.data()[c * 4 + px] * lp.weight.value.data()[c * 2 + o];
                }
                assert!((tape.value(out).data()[o * 4 + px] - want).abs() < 1e-12);
            }
        }
    }
}
