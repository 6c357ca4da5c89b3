//! Full model parameter sets and their on-disk format.
//!
//! Trained parameters live in a directory holding `manifest.json` (names,
//! shapes, dtype, architecture tag, config hash) and `params.rgtn`, the
//! tensor containers concatenated in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::boxes::HEAD_CHANNELS;
use crate::arch::encoders::LIDAR_STAT_CHANNELS;
use crate::container::{self, Dtype};
use crate::dims::DimsConfig;
use crate::error::{CoreError, Result};
use crate::param::{seeded_rng, LinearParams, ParamGroup, Parameter};
use crate::pyramid::{PyramidParams, PyramidVars};
use crate::rgattn::{PositionalEncodingKind, RgAttnParams, RgAttnVars};
use crate::tape::{Tape, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Ptp,
    CosCoco,
    Prgaf,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Ptp => "ptp",
            Architecture::CosCoco => "coscoco",
            Architecture::Prgaf => "prgaf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ptp" => Ok(Architecture::Ptp),
            "coscoco" => Ok(Architecture::CosCoco),
            "prgaf" => Ok(Architecture::Prgaf),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown architecture `{other}` (expected ptp|coscoco|prgaf)"
            ))),
        }
    }
}

/// Every trainable weight of one architecture.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub dims: DimsConfig,
    pub encoding: PositionalEncodingKind,
    pub lidar_enc: LinearParams,
    pub cam_enc: LinearParams,
    /// One module for PTP / CoS-CoCo; one per pyramid scale for PRGAF.
    pub rg: Vec<RgAttnParams>,
    pub pyramid: PyramidParams,
    pub head: LinearParams,
}

impl ModelParams {
    pub fn init(
        architecture: Architecture,
        dims: DimsConfig,
        encoding: PositionalEncodingKind,
        seed: u64,
    ) -> Result<Self> {
        let divisor = 1usize << (dims.scales - 1);
        if dims.h1 % divisor != 0
            || dims.w1 % divisor != 0
            || dims.h2 % divisor != 0
            || dims.w2 % divisor != 0
            || dims.radial_bins % divisor != 0
        {
            return Err(CoreError::InvalidArgument(format!(
                "extents must divide by 2^{} for {} pyramid scales",
                dims.scales - 1,
                dims.scales
            )));
        }
        let mut rng = seeded_rng(seed);
        let n_rg = match architecture {
            Architecture::Prgaf => dims.scales,
            _ => 1,
        };
        let rg = (0..n_rg)
            .map(|s| {
                RgAttnParams::init(
                    dims.c1,
                    dims.c2,
                    dims.radial_bins >> s,
                    dims.h2 >> s,
                    dims.d_model,
                    dims.heads,
                    encoding,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            architecture,
            dims,
            encoding,
            lidar_enc: LinearParams::init(LIDAR_STAT_CHANNELS, dims.c1, &mut rng),
            cam_enc: LinearParams::init(dims.craw, dims.c2, &mut rng),
            rg,
            pyramid: PyramidParams::init(dims.c1, dims.scales, &mut rng),
            head: LinearParams::init(dims.c1, HEAD_CHANNELS, &mut rng),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            lidar_enc: (
                tape.param("lidar_enc.w", &self.lidar_enc.weight),
                tape.param("lidar_enc.b", &self.lidar_enc.bias),
            ),
            cam_enc: (
                tape.param("cam_enc.w", &self.cam_enc.weight),
                tape.param("cam_enc.b", &self.cam_enc.bias),
            ),
            rg: self
                .rg
                .iter()
                .enumerate()
                .map(|(s, p)| p.bind(tape, &format!("rg{s}")))
                .collect(),
            pyramid: self.pyramid.bind(tape, "pyr"),
            head: (
                tape.param("head.w", &self.head.weight),
                tape.param("head.b", &self.head.bias),
            ),
        }
    }
}

impl ParamGroup for ModelParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.lidar_enc.visit("lidar_enc", f);
        self.cam_enc.visit("cam_enc", f);
        for (s, rg) in self.rg.iter().enumerate() {
            rg.visit(&format!("rg{s}"), f);
        }
        self.pyramid.visit("pyr", f);
        self.head.visit("head", f);
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.lidar_enc.visit_mut("lidar_enc", f);
        self.cam_enc.visit_mut("cam_enc", f);
        for (s, rg) in self.rg.iter_mut().enumerate() {
            rg.visit_mut(&format!("rg{s}"), f);
        }
        self.pyramid.visit_mut("pyr", f);
        self.head.visit_mut("head", f);
    }
}

/// Tape bindings of the full model.
pub struct ModelVars {
    pub lidar_enc: (VarId, VarId),
    pub cam_enc: (VarId, VarId),
    pub rg: Vec<RgAttnVars>,
    pub pyramid: PyramidVars,
    pub head: (VarId, VarId),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub architecture: Architecture,
    pub encoding: PositionalEncodingKind,
    pub dims: DimsConfig,
    pub dtype: String,
    pub config_hash: String,
    pub tensors: Vec<ManifestTensor>,
}

fn native_dtype() -> Dtype {
    if cfg!(feature = "f32") {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

/// Writes `manifest.json` and `params.rgtn` into `dir`.
pub fn save_params(params: &ModelParams, dir: &Path, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dtype = native_dtype();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    params.for_each(&mut |name, p| {
        tensors.push(ManifestTensor {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
        });
        blob.extend_from_slice(&container::encode(&p.value, dtype));
    });
    let manifest = Manifest {
        architecture: params.architecture,
        encoding: params.encoding,
        dims: params.dims,
        dtype: dtype.name().to_string(),
        config_hash: config_hash.to_string(),
        tensors,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(dir.join("params.rgtn"), blob)?;
    Ok(())
}

/// Reads a parameter directory written by [`save_params`].
pub fn load_params(dir: &Path) -> Result<(ModelParams, Manifest)> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let blob = std::fs::read(dir.join("params.rgtn"))?;

    let mut params = ModelParams::init(manifest.architecture, manifest.dims, manifest.encoding, 0)?;
    let mut offset = 0usize;
    let mut cursor = 0usize;
    let mut failure: Option<CoreError> = None;
    params.for_each_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = manifest.tensors.get(cursor) else {
            failure = Some(CoreError::Manifest(format!(
                "missing manifest entry for `{name}`"
            )));
            return;
        };
        if entry.name != name || entry.shape != p.value.shape() {
            failure = Some(CoreError::Manifest(format!(
                "manifest entry {cursor} is `{}` {:?}, expected `{name}` {:?}",
                entry.name,
                entry.shape,
                p.value.shape()
            )));
            return;
        }
        let len = container::container_len(&entry.shape, native_dtype());
        if offset + len > blob.len() {
            failure = Some(CoreError::Manifest("params.rgtn is truncated".into()));
            return;
        }
        match container::decode(&blob[offset..offset + len]) {
            Ok((tensor, _)) => {
                p.value = tensor;
                p.zero_grad();
            }
            Err(e) => failure = Some(e),
        }
        offset += len;
        cursor += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if cursor != manifest.tensors.len() || offset != blob.len() {
        return Err(CoreError::Manifest(
            "parameter blob does not match the manifest".into(),
        ));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_exact() {
        let dims = DimsConfig::tiny();
        let params = ModelParams::init(
            Architecture::Prgaf,
            dims,
            PositionalEncodingKind::Learnable,
            42,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("rgtest-params-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        save_params(&params, &dir, "deadbeef").unwrap();
        let (loaded, manifest) = load_params(&dir).unwrap();
        assert_eq!(manifest.config_hash, "deadbeef");
        assert_eq!(loaded.rg.len(), dims.scales);
        let mut names = Vec::new();
        params.for_each(&mut |n, p| names.push((n.to_string(), p.value.clone())));
        loaded.for_each(&mut |n, p| {
            let (want_name, want_value) = &names[0];
            assert_eq!(n, want_name);
            assert_eq!(p.value.data(), want_value.data());
            names.remove(0);
        });
        assert!(names.is_empty());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rejects_scale_indivisible_dims() {
        let mut dims = DimsConfig::tiny();
        dims.h2 = 5;
        dims.scales = 3;
        assert!(ModelParams::init(
            Architecture::Prgaf,
            dims,
            PositionalEncodingKind::None,
            0
        )
        .is_err());
    }
}
