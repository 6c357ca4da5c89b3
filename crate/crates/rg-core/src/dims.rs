//! Dimension presets for feature maps and attention.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::BevSpec;

/// Feature-map and attention dimensions plus the metric BEV extent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DimsConfig {
    pub c1: usize,
    pub h1: usize,
    pub w1: usize,
    pub c2: usize,
    pub h2: usize,
    pub w2: usize,
    /// Raw raster channels produced by the synthetic camera.
    pub craw: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Radial bins of the grid sector; matches h1 by default.
    pub radial_bins: usize,
    /// Pyramid scale divisors, finest first.
    pub scales: usize,
    pub cell: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimsPreset {
    Desk,
    Paper,
}

impl DimsConfig {
    /// Trainable-in-minutes defaults.
    pub fn desk() -> Self {
        Self {
            c1: 16,
            h1: 64,
            w1: 128,
            c2: 8,
            h2: 36,
            w2: 64,
            craw: 4,
            d_model: 16,
            heads: 8,
            radial_bins: 64,
            scales: 3,
            cell: 0.4,
            x_min: -25.6,
            x_max: 25.6,
            y_min: -12.8,
            y_max: 12.8,
        }
    }

    /// Production-scale feature shapes: BEV [64,128,256] over a
    /// ±102.4 m × ±51.2 m range, cameras [8,144,256].
    pub fn paper() -> Self {
        Self {
            c1: 64,
            h1: 128,
            w1: 256,
            c2: 8,
            h2: 144,
            w2: 256,
            craw: 4,
            d_model: 64,
            heads: 8,
            radial_bins: 128,
            scales: 3,
            cell: 0.8,
            x_min: -102.4,
            x_max: 102.4,
            y_min: -51.2,
            y_max: 51.2,
        }
    }

    /// Very small dims for gradient checks and oracle tests.
    pub fn tiny() -> Self {
        Self {
            c1: 4,
            h1: 8,
            w1: 8,
            c2: 3,
            h2: 4,
            w2: 4,
            craw: 4,
            d_model: 4,
            heads: 2,
            radial_bins: 8,
            scales: 2,
            cell: 1.0,
            x_min: -4.0,
            x_max: 4.0,
            y_min: -4.0,
            y_max: 4.0,
        }
    }

    pub fn preset(preset: DimsPreset) -> Self {
        match preset {
            DimsPreset::Desk => Self::desk(),
            DimsPreset::Paper => Self::paper(),
        }
    }

    pub fn bev_spec(&self) -> Result<BevSpec> {
        BevSpec::new(self.x_min, self.x_max, self.y_min, self.y_max, self.cell)
    }
}
