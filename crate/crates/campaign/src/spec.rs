//! Campaign files and their expansion into experiment definitions.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use simhub_core::format::merge_interface;
use simhub_core::{BackendId, Capacity, Phase, Scalar, SysCfg, SystemId, SystemInterface};

pub const DEFAULT_RETRIES: u8 = 1;
pub const MAX_RETRIES: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub system: SystemId,
    /// Service default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendId>,
    pub parallelism: Capacity,
    #[serde(default = "default_timeout")]
    pub per_run_timeout_s: f64,
    /// Extra attempts for a failed run.
    #[serde(default = "default_retries")]
    pub retries: u8,
    pub axes: Vec<Axis>,
}

fn default_timeout() -> f64 {
    3600.0
}

fn default_retries() -> u8 {
    DEFAULT_RETRIES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub values: Vec<AxisValue>,
}

/// One setting of an axis: overrides plus files to upload.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisValue {
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub build_parameters: IndexMap<String, Scalar>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub run_parameters: IndexMap<String, Scalar>,
    /// File parameter -> local file.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub inputs: IndexMap<String, PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid campaign: {0}")]
    Invalid(String),
    #[error("point {point:?} does not merge: {detail}")]
    MergeValidation { point: Vec<usize>, detail: String },
}

impl CampaignSpec {
    /// Reads a spec; relative input paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|source| SpecError::Read {
            path: path.into(),
            source,
        })?;
        let mut spec: CampaignSpec = serde_json::from_str(&text).map_err(|source| SpecError::Parse {
            path: path.into(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for v in spec.axes.iter_mut().flat_map(|a| a.values.iter_mut()) {
            for p in v.inputs.values_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.axes.is_empty() {
            return Err(SpecError::Invalid("at least one axis is required".into()));
        }
        if self.retries > MAX_RETRIES {
            return Err(SpecError::Invalid(format!("retries must be at most {MAX_RETRIES}")));
        }
        if !(self.per_run_timeout_s > 0.0 && self.per_run_timeout_s.is_finite()) {
            return Err(SpecError::Invalid("per_run_timeout_s must be positive".into()));
        }
        Ok(())
    }

    /// Number of points: the product of the axis lengths.
    pub fn size(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }
}

/// One expanded experiment definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub index: usize,
    /// Value index per axis, in axis order.
    pub coords: Vec<usize>,
    #[serde(with = "simhub_core::format::syscfg_serde")]
    pub syscfg: SysCfg,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub inputs: IndexMap<String, PathBuf>,
}

/// Cartesian product of the axes, first axis varying slowest. Overrides
/// are merged in axis order, so a key set by a later axis wins. With an
/// interface every point is checked to merge before anything is returned.
pub fn expand(spec: &CampaignSpec, iface: Option<&SystemInterface>) -> Result<Vec<Point>, SpecError> {
    spec.validate()?;
    let lens: Vec<usize> = spec.axes.iter().map(|a| a.values.len()).collect();
    let total = spec.size();
    let mut points = Vec::with_capacity(total);
    for index in 0..total {
        let mut coords = vec![0; lens.len()];
        let mut rest = index;
        for (i, len) in lens.iter().enumerate().rev() {
            coords[i] = rest % len;
            rest /= len;
        }
        let mut syscfg = SysCfg::empty(spec.system.clone());
        let mut inputs = IndexMap::new();
        for (axis, &c) in spec.axes.iter().zip(&coords) {
            let v = &axis.values[c];
            for phase in Phase::ALL {
                let src = match phase {
                    Phase::Build => &v.build_parameters,
                    Phase::Run => &v.run_parameters,
                };
                let dst = syscfg.overrides_mut(phase);
                for (k, val) in src {
                    dst.insert(k.clone(), val.clone());
                }
            }
            for (k, p) in &v.inputs {
                inputs.insert(k.clone(), p.clone());
            }
        }
        if let Some(iface) = iface {
            for phase in Phase::ALL {
                merge_interface(iface, &syscfg, phase).map_err(|e| SpecError::MergeValidation {
                    point: coords.clone(),
                    detail: e.to_string(),
                })?;
            }
            for key in inputs.keys() {
                let is_file = Phase::ALL
                    .iter()
                    .flat_map(|p| iface.parameters(*p))
                    .any(|d| &d.key == key && d.is_file);
                if !is_file {
                    return Err(SpecError::MergeValidation {
                        point: coords.clone(),
                        detail: format!("`{key}` is not a file parameter"),
                    });
                }
            }
        }
        points.push(Point {
            index,
            coords,
            syscfg,
            inputs,
        });
    }
    Ok(points)
}
