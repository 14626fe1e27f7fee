//! EvalAPI wire types, shared by the service and its client.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{
    BackendId, BackendKind, Capacity, ExperimentId, ExperimentState, ParameterDef, ResultDecl,
    SystemId, SystemInterface,
};

/// API version prefix of every route.
pub const API_PREFIX: &str = "/v1";

/// Header carrying the original file name of an uploaded input.
pub const FILENAME_HEADER: &str = "x-filename";

/// Entry of `GET /v1/systems`. Identity and schema are absent when the
/// system's repository could not be fetched; `error` says why.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<String>,
    #[serde(default)]
    pub build_parameters: Vec<ParameterDef>,
    #[serde(default)]
    pub run_parameters: Vec<ParameterDef>,
    #[serde(default)]
    pub results: Vec<ResultDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_backend_kind: Option<BackendKind>,
    /// Set for systems that are only reachable through a cascaded backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offered_by: Option<BackendId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SystemSummary {
    pub fn id(&self) -> Option<SystemId> {
        Some(SystemId::new(self.name.clone()?, self.version.clone()?))
    }

    pub fn interface(&self) -> Option<SystemInterface> {
        if self.error.is_some() {
            return None;
        }
        Some(SystemInterface {
            id: self.id()?,
            build_parameters: self.build_parameters.clone(),
            run_parameters: self.run_parameters.clone(),
            results: self.results.clone(),
            required_backend_kind: self.required_backend_kind,
        })
    }

    pub fn from_interface(iface: &SystemInterface) -> Self {
        Self {
            name: Some(iface.id.name.clone()),
            version: Some(iface.id.version.clone()),
            build_parameters: iface.build_parameters.clone(),
            run_parameters: iface.run_parameters.clone(),
            results: iface.results.clone(),
            required_backend_kind: iface.required_backend_kind,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateExperimentRequest {
    pub system_name: String,
    pub system_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub id: ExperimentId,
    pub system: SystemId,
    pub backend: BackendId,
    pub state: ExperimentState,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPage {
    pub items: Vec<ExperimentSummary>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<ExperimentState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub id: ExperimentId,
    pub state: ExperimentState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendView {
    pub id: BackendId,
    pub kind: BackendKind,
    pub capacity: Capacity,
    pub cost_model: String,
    pub default: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

/// Query parameters of `GET /v1/experiments/{id}/state`. With `wait_while`
/// set, the call returns as soon as the state differs from it or after
/// `timeout_ms`, whichever comes first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait_while: Option<ExperimentState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}
