//! SE(2) pose algebra, camera rigs, BEV grids and polar grid sectors.
//!
//! Frame conventions: x forward, y left, yaw counter-clockwise positive and
//! normalized to (−π, π]. All geometry is planar; camera mounts are a 2-D
//! offset plus yaw and the field of view is a horizontal angle in (0, π).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Camera image column 0 corresponds to the +fov/2 (left) boundary of the
/// field of view, so image bearings decrease with the column index. Sector
/// columns are always ordered by increasing bearing; the two orders are
/// reconciled by [`image_col_for_sector_col`].
pub const IMAGE_COL0_AT_POSITIVE_FOV_BOUNDARY: bool = true;

/// Image column carrying the same bearing as sector column `w` of `w2`.
pub fn image_col_for_sector_col(w: usize, w2: usize) -> usize {
    if IMAGE_COL0_AT_POSITIVE_FOV_BOUNDARY {
        w2 - 1 - w
    } else {
        w
    }
}

/// Bearing of an image column center in the camera's local frame.
pub fn image_col_bearing(col: usize, w2: usize, fov: f64) -> f64 {
    if IMAGE_COL0_AT_POSITIVE_FOV_BOUNDARY {
        fov / 2.0 - (col as f64 + 0.5) / w2 as f64 * fov
    } else {
        -fov / 2.0 + (col as f64 + 0.5) / w2 as f64 * fov
    }
}

/// Normalizes an angle to (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    a
}

/// Planar pose: position in meters, yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    /// Rigid transform mapping local coordinates into the world frame.
    pub fn to_world(&self) -> Transform2 {
        Transform2::from_parts(self.yaw, [self.x, self.y])
    }
}

/// 2-D rigid transform: p' = r·p + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform2 {
    pub r: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Transform2 {
    pub fn identity() -> Self {
        Self {
            r: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn from_parts(yaw: f64, t: [f64; 2]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            r: [[c, -s], [s, c]],
            t,
        }
    }

    /// Rotation angle recovered from the matrix.
    pub fn yaw(&self) -> f64 {
        self.r[1][0].atan2(self.r[0][0])
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.r[0][0] * p[0] + self.r[0][1] * p[1] + self.t[0],
            self.r[1][0] * p[0] + self.r[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.r[0][0] * v[0] + self.r[0][1] * v[1],
            self.r[1][0] * v[0] + self.r[1][1] * v[1],
        ]
    }

    /// self ∘ other: applies `other` first.
    pub fn compose(&self, other: &Transform2) -> Transform2 {
        let mut r = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                r[i][j] = self.r[i][0] * other.r[0][j] + self.r[i][1] * other.r[1][j];
            }
        }
        Transform2 {
            r,
            t: self.apply(other.t),
        }
    }

    pub fn inverse(&self) -> Transform2 {
        // Rᵀ for an orthonormal rotation.
        let rt = [[self.r[0][0], self.r[1][0]], [self.r[0][1], self.r[1][1]]];
        let t = [
            -(rt[0][0] * self.t[0] + rt[0][1] * self.t[1]),
            -(rt[1][0] * self.t[0] + rt[1][1] * self.t[1]),
        ];
        Transform2 { r: rt, t }
    }

    /// Checks r is orthonormal with det +1 within 1e-9.
    pub fn validate(&self) -> Result<()> {
        let det = self.r[0][0] * self.r[1][1] - self.r[0][1] * self.r[1][0];
        let dot = self.r[0][0] * self.r[0][1] + self.r[1][0] * self.r[1][1];
        let n0 = self.r[0][0].hypot(self.r[1][0]);
        let n1 = self.r[0][1].hypot(self.r[1][1]);
        if (det - 1.0).abs() > 1e-9 || dot.abs() > 1e-9 || (n0 - 1.0).abs() > 1e-9 || (n1 - 1.0).abs() > 1e-9
        {
            return Err(CoreError::InvalidArgument(
                "rotation matrix is not orthonormal with det +1".into(),
            ));
        }
        Ok(())
    }
}

/// Transform mapping points from frame i into frame j:
/// world(pose_j)⁻¹ ∘ world(pose_i).
pub fn relative_transform(pose_i: &Pose2, pose_j: &Pose2) -> Transform2 {
    pose_j.to_world().inverse().compose(&pose_i.to_world())
}

/// Camera mounted on an agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRig {
    /// Mount pose in the agent's frame.
    pub mount_x: f64,
    pub mount_y: f64,
    pub mount_yaw: f64,
    /// Horizontal field of view in radians, within (0, π).
    pub fov: f64,
    pub w2: usize,
    pub h2: usize,
    pub c2: usize,
}

impl CameraRig {
    pub fn mount(&self) -> Transform2 {
        Transform2::from_parts(self.mount_yaw, [self.mount_x, self.mount_y])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(CoreError::InvalidArgument(format!(
                "fov must be in (0, π), got {}",
                self.fov
            )));
        }
        if self.w2 == 0 || self.h2 == 0 || self.c2 == 0 {
            return Err(CoreError::InvalidArgument(
                "camera extents must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Metric extent and resolution of a BEV grid. Rows (height, index u) run
/// along y, columns (width, index v) along x, both with a cell-center
/// convention.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BevSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
    pub h1: usize,
    pub w1: usize,
}

impl BevSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(CoreError::InvalidArgument("cell size must be positive".into()));
        }
        let w = (x_max - x_min) / cell;
        let h = (y_max - y_min) / cell;
        if w <= 0.0 || h <= 0.0 || (w - w.round()).abs() > 1e-9 || (h - h.round()).abs() > 1e-9 {
            return Err(CoreError::InvalidArgument(format!(
                "extents {}×{} not an integer multiple of cell {cell}",
                x_max - x_min,
                y_max - y_min
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            cell,
            h1: h.round() as usize,
            w1: w.round() as usize,
        })
    }

    /// Same metric extent at half resolution. Extents must be even.
    pub fn halved(&self) -> Result<Self> {
        if self.h1 % 2 != 0 || self.w1 % 2 != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "cannot halve odd grid {}×{}",
                self.h1, self.w1
            )));
        }
        BevSpec::new(self.x_min, self.x_max, self.y_min, self.y_max, self.cell * 2.0)
    }

    /// Continuous (row, col) pixel coordinates of a metric point.
    pub fn world_to_grid(&self, p: [f64; 2]) -> (f64, f64) {
        let v = (p[0] - self.x_min) / self.cell - 0.5;
        let u = (p[1] - self.y_min) / self.cell - 0.5;
        (u, v)
    }

    /// Exact inverse of [`Self::world_to_grid`].
    pub fn grid_to_world(&self, uv: (f64, f64)) -> [f64; 2] {
        [
            self.x_min + (uv.1 + 0.5) * self.cell,
            self.y_min + (uv.0 + 0.5) * self.cell,
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }
}

/// Half the diagonal length of the BEV extent; the maximum projection
/// radius of a grid sector.
pub fn max_radius(spec: &BevSpec) -> f64 {
    (spec.x_max - spec.x_min).hypot(spec.y_max - spec.y_min) / 2.0
}

/// Polar sampling region: origin in target-BEV meters, an angular span
/// discretized into `w2` bins, and a radius discretized into `h` bins.
#[derive(Debug, Clone)]
pub struct GridSectorConfig {
    pub origin: [f64; 2],
    pub theta_start: f64,
    pub theta_span: f64,
    pub w2: usize,
    pub radius: f64,
    pub h: usize,
}

impl GridSectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_span > 0.0) || !(self.radius > 0.0) || self.w2 == 0 || self.h == 0 {
            return Err(CoreError::InvalidArgument(
                "grid sector needs positive span, radius and bin counts".into(),
            ));
        }
        Ok(())
    }

    /// Bearing of sector column `w` (bin center).
    pub fn theta(&self, w: usize) -> f64 {
        self.theta_start + (w as f64 + 0.5) / self.w2 as f64 * self.theta_span
    }

    /// Range of radial bin `r` (bin center).
    pub fn rho(&self, r: usize) -> f64 {
        (r as f64 + 0.5) / self.h as f64 * self.radius
    }

    /// Metric coordinates of every sample point, radial-major (index
    /// r·w2 + w).
    pub fn sample_points(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.h * self.w2);
        for r in 0..self.h {
            let rho = self.rho(r);
            for w in 0..self.w2 {
                let theta = self.theta(w);
                pts.push([
                    self.origin[0] + rho * theta.cos(),
                    self.origin[1] + rho * theta.sin(),
                ]);
            }
        }
        pts
    }
}

/// Camera origin expressed in the target BEV frame: T_ij applied to the
/// mount translation.
pub fn camera_origin_in_target(t_ij: &Transform2, mount: &Transform2) -> [f64; 2] {
    t_ij.apply(mount.t)
}

/// Angular span of a camera's FOV in the target frame. Returns the bearing
/// of the −fov/2 boundary as `theta_start` plus a positive span, so sweeps
/// across the ±π cut need no special casing.
pub fn fov_span_in_target(t_ij: &Transform2, mount: &Transform2, fov: f64) -> Result<(f64, f64)> {
    if !(fov > 0.0 && fov < std::f64::consts::PI) {
        return Err(CoreError::InvalidArgument(format!(
            "fov must be in (0, π), got {fov}"
        )));
    }
    // R_{cam→target} = R_{i→j} · R_{cam→i}; rotate the −fov/2 boundary
    // direction and take its bearing.
    let low = [(-fov / 2.0).cos(), (-fov / 2.0).sin()];
    let dir = t_ij.rotate(mount.rotate(low));
    let theta_start = dir[1].atan2(dir[0]);
    Ok((theta_start, fov))
}

/// Grid sector for a camera observed from a target agent's BEV.
pub fn build_sector(
    t_ij: &Transform2,
    rig: &CameraRig,
    spec: &BevSpec,
    radial_bins: usize,
) -> Result<GridSectorConfig> {
    rig.validate()?;
    let mount = rig.mount();
    let origin = camera_origin_in_target(t_ij, &mount);
    let (theta_start, theta_span) = fov_span_in_target(t_ij, &mount, rig.fov)?;
    let cfg = GridSectorConfig {
        origin,
        theta_start,
        theta_span,
        w2: rig.w2,
        radius: max_radius(spec),
        h: radial_bins,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Fraction of polar sample points that fall inside the BEV extent.
pub fn sector_coverage(cfg: &GridSectorConfig, spec: &BevSpec) -> f64 {
    let pts = cfg.sample_points();
    let inside = pts.iter().filter(|p| spec.contains(**p)).count();
    inside as f64 / pts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn relative_transform_examples() {
        let id = relative_transform(&Pose2::new(1.0, 2.0, 0.3), &Pose2::new(1.0, 2.0, 0.3));
        assert_close(id.t[0], 0.0, 1e-12);
        assert_close(id.t[1], 0.0, 1e-12);
        assert_close(id.yaw(), 0.0, 1e-12);

        let t = relative_transform(&Pose2::new(1.0, 0.0, 0.0), &Pose2::new(0.0, 0.0, 0.0));
        assert_close(t.t[0], 1.0, 1e-12);
        assert_close(t.t[1], 0.0, 1e-12);

        // A point at (1,0) in a frame rotated by +π/2 lands at (0,1).
        let q = relative_transform(&Pose2::new(0.0, 0.0, FRAC_PI_2), &Pose2::new(0.0, 0.0, 0.0));
        let p = q.apply([1.0, 0.0]);
        assert_close(p[0], 0.0, 1e-12);
        assert_close(p[1], 1.0, 1e-12);
    }

    proptest! {
        #[test]
        fn relative_transform_round_trips(
            xa in -50.0f64..50.0, ya in -50.0f64..50.0, ta in -3.1f64..3.1,
            xb in -50.0f64..50.0, yb in -50.0f64..50.0, tb in -3.1f64..3.1,
        ) {
            let a = Pose2::new(xa, ya, ta);
            let b = Pose2::new(xb, yb, tb);
            let fwd = relative_transform(&a, &b);
            let back = relative_transform(&b, &a);
            let id = fwd.compose(&back);
            prop_assert!((id.yaw()).abs() < 1e-9);
            prop_assert!(id.t[0].abs() < 1e-9);
            prop_assert!(id.t[1].abs() < 1e-9);
        }

        #[test]
        fn composition_is_associative(
            y1 in -3.0f64..3.0, y2 in -3.0f64..3.0, y3 in -3.0f64..3.0,
            t in -10.0f64..10.0,
        ) {
            let a = Transform2::from_parts(y1, [t, 1.0]);
            let b = Transform2::from_parts(y2, [-t, 2.0]);
            let c = Transform2::from_parts(y3, [0.5, t]);
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            for i in 0..2 {
                prop_assert!((left.t[i] - right.t[i]).abs() < 1e-9);
                for j in 0..2 {
                    prop_assert!((left.r[i][j] - right.r[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn camera_origin_examples() {
        let mount = Transform2::from_parts(0.0, [2.0, 1.0]);
        let p = camera_origin_in_target(&Transform2::identity(), &mount);
        assert_eq!(p, [2.0, 1.0]);

        let shift = Transform2::from_parts(0.0, [5.0, 0.0]);
        let p = camera_origin_in_target(&shift, &Transform2::identity());
        assert_eq!(p, [5.0, 0.0]);

        let rot = Transform2::from_parts(FRAC_PI_2, [0.0, 0.0]);
        let p = camera_origin_in_target(&rot, &Transform2::from_parts(0.0, [1.0, 0.0]));
        assert_close(p[0], 0.0, 1e-12);
        assert_close(p[1], 1.0, 1e-12);
    }

    #[test]
    fn fov_span_examples() {
        let fov = 100f64.to_radians();
        let (start, span) =
            fov_span_in_target(&Transform2::identity(), &Transform2::identity(), fov).unwrap();
        assert_close(start, -fov / 2.0, 1e-12);
        assert_close(span, fov, 1e-12);

        // A total yaw of π with fov 90° starts at 135° and sweeps across
        // the ±π branch cut.
        let (start, span) = fov_span_in_target(
            &Transform2::from_parts(PI, [3.0, -1.0]),
            &Transform2::identity(),
            FRAC_PI_2,
        )
        .unwrap();
        assert_close(start, 3.0 * PI / 4.0, 1e-12);
        assert_close(span, FRAC_PI_2, 1e-12);

        assert!(fov_span_in_target(&Transform2::identity(), &Transform2::identity(), PI).is_err());
    }

    proptest! {
        #[test]
        fn fov_span_is_rotation_equivariant(psi in -3.0f64..3.0, extra in -3.0f64..3.0) {
            let fov = 1.5f64;
            let base = Transform2::from_parts(psi, [1.0, 2.0]);
            let (s0, _) = fov_span_in_target(&base, &Transform2::identity(), fov).unwrap();
            let rotated = Transform2::from_parts(extra, [0.0, 0.0]).compose(&base);
            let (s1, _) = fov_span_in_target(&rotated, &Transform2::identity(), fov).unwrap();
            let diff = normalize_angle(s1 - s0 - extra);
            prop_assert!(diff.abs() < 1e-9);
        }
    }

    #[test]
    fn max_radius_examples() {
        // √(204.8² + 102.4²) / 2
        let paper = BevSpec::new(-102.4, 102.4, -51.2, 51.2, 0.8).unwrap();
        assert_close(max_radius(&paper), 114.486680447989, 1e-9);

        let square = BevSpec::new(-1.0, 1.0, -1.0, 1.0, 0.5).unwrap();
        assert_close(max_radius(&square), std::f64::consts::SQRT_2, 1e-12);

        assert!(BevSpec::new(0.0, 0.0, -1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn build_sector_single_bin() {
        let spec = BevSpec::new(-8.0, 8.0, -8.0, 8.0, 1.0).unwrap();
        let rig = CameraRig {
            mount_x: 0.0,
            mount_y: 0.0,
            mount_yaw: 0.0,
            fov: 1.0,
            w2: 1,
            h2: 2,
            c2: 1,
        };
        let cfg = build_sector(&Transform2::identity(), &rig, &spec, 1).unwrap();
        let pts = cfg.sample_points();
        assert_eq!(pts.len(), 1);
        // Single bin sits at the mid-angle at half the radius.
        let rho = max_radius(&spec) / 2.0;
        assert_close(pts[0][0], rho, 1e-12);
        assert_close(pts[0][1], 0.0, 1e-12);
    }

    #[test]
    fn sector_points_stay_within_radius_and_match_polar_formula() {
        let cfg = GridSectorConfig {
            origin: [1.5, -2.0],
            theta_start: 2.9,
            theta_span: 1.1,
            w2: 7,
            radius: 9.0,
            h: 5,
        };
        let pts = cfg.sample_points();
        assert_eq!(pts.len(), 35);
        for (i, p) in pts.iter().enumerate() {
            let (r, w) = (i / 7, i % 7);
            let theta = 2.9 + (w as f64 + 0.5) / 7.0 * 1.1;
            let rho = (r as f64 + 0.5) / 5.0 * 9.0;
            assert_close(p[0], 1.5 + rho * theta.cos(), 1e-12);
            assert_close(p[1], -2.0 + rho * theta.sin(), 1e-12);
            let dist = (p[0] - 1.5).hypot(p[1] + 2.0);
            assert!(dist <= 9.0 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn sector_points_invert_to_polar(
            ox in -5.0f64..5.0, oy in -5.0f64..5.0,
            start in -6.0f64..6.0, span in 0.2f64..2.8,
            w2 in 1usize..9, h in 1usize..9,
        ) {
            let cfg = GridSectorConfig {
                origin: [ox, oy],
                theta_start: start,
                theta_span: span,
                w2,
                radius: 7.0,
                h,
            };
            for (i, p) in cfg.sample_points().iter().enumerate() {
                let (r, w) = (i / w2, i % w2);
                let dx = p[0] - ox;
                let dy = p[1] - oy;
                let rho = dx.hypot(dy);
                let theta = dy.atan2(dx);
                prop_assert!((rho - cfg.rho(r)).abs() < 1e-9);
                let want = normalize_angle(cfg.theta(w));
                prop_assert!(normalize_angle(theta - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn world_grid_round_trip() {
        let spec = BevSpec::new(-25.6, 25.6, -12.8, 12.8, 0.4).unwrap();
        assert_eq!(spec.h1, 64);
        assert_eq!(spec.w1, 128);

        // Center of cell (0,0).
        let (u, v) = spec.world_to_grid([-25.6 + 0.2, -12.8 + 0.2]);
        assert_close(u, 0.0, 1e-12);
        assert_close(v, 0.0, 1e-12);

        let (u, v) = spec.world_to_grid([-25.6, -12.8]);
        assert_close(u, -0.5, 1e-12);
        assert_close(v, -0.5, 1e-12);

        let p = [3.17, -4.9];
        let back = spec.grid_to_world(spec.world_to_grid(p));
        assert_close(back[0], p[0], 1e-12);
        assert_close(back[1], p[1], 1e-12);
    }

    #[test]
    fn sector_coverage_cases() {
        let spec = BevSpec::new(-10.0, 10.0, -10.0, 10.0, 1.0).unwrap();
        let inside = GridSectorConfig {
            origin: [0.0, 0.0],
            theta_start: 0.0,
            theta_span: 2.0,
            w2: 8,
            radius: 9.0,
            h: 8,
        };
        assert_eq!(sector_coverage(&inside, &spec), 1.0);

        let outside = GridSectorConfig {
            origin: [100.0, 100.0],
            theta_start: 0.0,
            theta_span: 2.0,
            w2: 8,
            radius: 5.0,
            h: 8,
        };
        assert_eq!(sector_coverage(&outside, &spec), 0.0);

        // Straddling: compare against an independent point-in-rect check.
        let straddle = GridSectorConfig {
            origin: [9.0, 0.0],
            theta_start: -1.2,
            theta_span: 2.4,
            w2: 11,
            radius: 8.0,
            h: 9,
        };
        let got = sector_coverage(&straddle, &spec);
        let mut inside_count = 0usize;
        let pts = straddle.sample_points();
        for p in &pts {
            if p[0] >= -10.0 && p[0] <= 10.0 && p[1] >= -10.0 && p[1] <= 10.0 {
                inside_count += 1;
            }
        }
        assert_close(got, inside_count as f64 / pts.len() as f64, 1e-12);
        assert!(got > 0.0 && got < 1.0);
    }
}
