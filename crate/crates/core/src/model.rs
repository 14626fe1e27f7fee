//! Domain types shared across the runtime manager, and the experiment
//! lifecycle state machine.

use std::fmt;
use std::num::NonZeroUsize;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Identity of a system: `(name, version)`, compared by exact string match.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SystemId {
    pub name: String,
    pub version: String,
}

impl SystemId {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} v{}", self.name, self.version)
    }
}

/// A parameter value as it appears in SysDef/SysCfg documents.
///
/// Integers and floats are kept apart so that a value round-trips with the
/// same JSON spelling it was given in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

/// Kind used for override type checking; integers and floats are both numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarKind {
    String,
    Number,
    Boolean,
}

impl fmt::Display for ScalarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalarKind::String => "string",
            ScalarKind::Number => "number",
            ScalarKind::Boolean => "boolean",
        })
    }
}

impl Scalar {
    pub fn kind(&self) -> ScalarKind {
        match self {
            Scalar::Bool(_) => ScalarKind::Boolean,
            Scalar::Int(_) | Scalar::Float(_) => ScalarKind::Number,
            Scalar::Str(_) => ScalarKind::String,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Scalar::Bool(b) => serde_json::Value::Bool(*b),
            Scalar::Int(i) => serde_json::Value::from(*i),
            Scalar::Float(f) => serde_json::Number::from_f64(*f)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Scalar::Str(s) => serde_json::Value::String(s.clone()),
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

impl From<String> for Scalar {
    fn from(s: String) -> Self {
        Scalar::Str(s)
    }
}

impl From<i64> for Scalar {
    fn from(i: i64) -> Self {
        Scalar::Int(i)
    }
}

impl From<f64> for Scalar {
    fn from(f: f64) -> Self {
        Scalar::Float(f)
    }
}

impl From<bool> for Scalar {
    fn from(b: bool) -> Self {
        Scalar::Bool(b)
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

/// The two SysAPI actions, which double as the two parameter phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Build,
    Run,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Build, Phase::Run];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Build => "build",
            Phase::Run => "run",
        }
    }

    /// Field name of this phase's parameter block in SysDef/SysCfg documents.
    pub fn parameters_field(self) -> &'static str {
        match self {
            Phase::Build => "build_parameters",
            Phase::Run => "run_parameters",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "build" => Ok(Phase::Build),
            "run" => Ok(Phase::Run),
            other => Err(format!("unknown action `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterDef {
    pub key: String,
    pub default_value: Scalar,
    #[serde(default)]
    pub is_file: bool,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultDecl {
    pub key: String,
    pub path: String,
    #[serde(rename = "type")]
    pub kind: String,
}

/// Parsed System Definition.
#[derive(Clone, Debug, PartialEq)]
pub struct SysDef {
    pub id: SystemId,
    pub image: String,
    pub build_command: String,
    pub run_command: String,
    pub build_parameters: Vec<ParameterDef>,
    pub run_parameters: Vec<ParameterDef>,
    pub results: Vec<ResultDecl>,
    /// Optional extension: restricts which backend kind may execute the system.
    pub required_backend_kind: Option<BackendKind>,
}

impl SysDef {
    pub fn parameters(&self, phase: Phase) -> &[ParameterDef] {
        match phase {
            Phase::Build => &self.build_parameters,
            Phase::Run => &self.run_parameters,
        }
    }

    pub fn command(&self, action: Phase) -> &str {
        match action {
            Phase::Build => &self.build_command,
            Phase::Run => &self.run_command,
        }
    }

    pub fn parameter(&self, phase: Phase, key: &str) -> Option<&ParameterDef> {
        self.parameters(phase).iter().find(|p| p.key == key)
    }

    /// The user-facing part of the definition: everything needed to
    /// configure an experiment, nothing about how the system is executed.
    pub fn interface(&self) -> SystemInterface {
        SystemInterface {
            id: self.id.clone(),
            build_parameters: self.build_parameters.clone(),
            run_parameters: self.run_parameters.clone(),
            results: self.results.clone(),
            required_backend_kind: self.required_backend_kind,
        }
    }
}

/// Configuration surface of a system as published over the EvalAPI.
///
/// Delegated systems are only known through this view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemInterface {
    #[serde(flatten)]
    pub id: SystemId,
    #[serde(default)]
    pub build_parameters: Vec<ParameterDef>,
    #[serde(default)]
    pub run_parameters: Vec<ParameterDef>,
    #[serde(default)]
    pub results: Vec<ResultDecl>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_backend_kind: Option<BackendKind>,
}

impl SystemInterface {
    pub fn parameters(&self, phase: Phase) -> &[ParameterDef] {
        match phase {
            Phase::Build => &self.build_parameters,
            Phase::Run => &self.run_parameters,
        }
    }
}

/// A user's partial override of SysDef parameters for one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SysCfg {
    pub system: SystemId,
    pub build_overrides: IndexMap<String, Scalar>,
    pub run_overrides: IndexMap<String, Scalar>,
}

impl SysCfg {
    pub fn empty(system: SystemId) -> Self {
        Self {
            system,
            build_overrides: IndexMap::new(),
            run_overrides: IndexMap::new(),
        }
    }

    pub fn overrides(&self, phase: Phase) -> &IndexMap<String, Scalar> {
        match phase {
            Phase::Build => &self.build_overrides,
            Phase::Run => &self.run_overrides,
        }
    }

    pub fn overrides_mut(&mut self, phase: Phase) -> &mut IndexMap<String, Scalar> {
        match phase {
            Phase::Build => &mut self.build_overrides,
            Phase::Run => &mut self.run_overrides,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentState {
    Created,
    Configured,
    Building,
    Built,
    BuildFailed,
    Running,
    Finished,
    RunFailed,
}

impl ExperimentState {
    pub const ALL: [ExperimentState; 8] = [
        ExperimentState::Created,
        ExperimentState::Configured,
        ExperimentState::Building,
        ExperimentState::Built,
        ExperimentState::BuildFailed,
        ExperimentState::Running,
        ExperimentState::Finished,
        ExperimentState::RunFailed,
    ];

    /// An action is executing on the backend.
    pub fn is_active(self) -> bool {
        matches!(self, ExperimentState::Building | ExperimentState::Running)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentState::Created => "Created",
            ExperimentState::Configured => "Configured",
            ExperimentState::Building => "Building",
            ExperimentState::Built => "Built",
            ExperimentState::BuildFailed => "BuildFailed",
            ExperimentState::Running => "Running",
            ExperimentState::Finished => "Finished",
            ExperimentState::RunFailed => "RunFailed",
        }
    }
}

impl fmt::Display for ExperimentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExperimentState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExperimentState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown experiment state `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifecycleEvent {
    Configure,
    StartBuild,
    BuildOk,
    BuildErr,
    StartRun,
    RunOk,
    RunErr,
    Reconfigure,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 8] = [
        LifecycleEvent::Configure,
        LifecycleEvent::StartBuild,
        LifecycleEvent::BuildOk,
        LifecycleEvent::BuildErr,
        LifecycleEvent::StartRun,
        LifecycleEvent::RunOk,
        LifecycleEvent::RunErr,
        LifecycleEvent::Reconfigure,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition: {event:?} in state {current}")]
pub struct IllegalTransition {
    pub current: ExperimentState,
    pub event: LifecycleEvent,
}

/// Successor state of `current` under `event`.
///
/// `Reconfigure` is part of the event vocabulary but has no entry in the
/// table; configuration changes are always expressed as `Configure`.
pub fn transition(
    current: ExperimentState,
    event: LifecycleEvent,
) -> Result<ExperimentState, IllegalTransition> {
    use ExperimentState::*;
    use LifecycleEvent::*;

    let next = match (current, event) {
        (Created | Configured | Built | Finished | BuildFailed | RunFailed, Configure) => {
            Configured
        }
        (Configured, StartBuild) => Building,
        (Building, BuildOk) => Built,
        (Building, BuildErr) => BuildFailed,
        (Built | Finished, StartRun) => Running,
        (Running, RunOk) => Finished,
        (Running, RunErr) => RunFailed,
        _ => return Err(IllegalTransition { current, event }),
    };
    Ok(next)
}

/// Opaque, creation-ordered experiment identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExperimentId(String);

impl ExperimentId {
    const PREFIX: &'static str = "exp-";

    /// Ids are zero padded so that lexical order equals creation order.
    pub fn from_sequence(seq: u64) -> Self {
        ExperimentId(format!("{}{seq:012}", Self::PREFIX))
    }

    pub fn sequence(&self) -> Option<u64> {
        self.0.strip_prefix(Self::PREFIX)?.parse().ok()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<String> for ExperimentId {
    fn from(s: String) -> Self {
        ExperimentId(s)
    }
}

impl From<&str> for ExperimentId {
    fn from(s: &str) -> Self {
        ExperimentId(s.to_string())
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BackendId(String);

impl BackendId {
    pub fn new(id: impl Into<String>) -> Self {
        BackendId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for BackendId {
    fn from(s: &str) -> Self {
        BackendId(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Local,
    Remote,
    Cascaded,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Local => "local",
            BackendKind::Remote => "remote",
            BackendKind::Cascaded => "cascaded",
        })
    }
}

/// Maximum number of concurrently executing actions on a backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capacity {
    Bounded(NonZeroUsize),
    Unbounded,
}

impl Capacity {
    pub fn bounded(n: usize) -> Option<Self> {
        NonZeroUsize::new(n).map(Capacity::Bounded)
    }

    pub fn limit(self) -> Option<usize> {
        match self {
            Capacity::Bounded(n) => Some(n.get()),
            Capacity::Unbounded => None,
        }
    }
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Capacity::Bounded(n) => write!(f, "{n}"),
            Capacity::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl Serialize for Capacity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Capacity::Bounded(n) => s.serialize_u64(n.get() as u64),
            Capacity::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Capacity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Capacity::bounded(n as usize)
                .ok_or_else(|| serde::de::Error::custom("capacity must be positive")),
            Raw::Word(w) if w == "unbounded" => Ok(Capacity::Unbounded),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "capacity must be a positive integer or \"unbounded\", got `{w}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub action: Phase,
    pub exit_status: i32,
    pub duration_s: f64,
    /// Handle to the captured combined stdout/stderr of the action.
    pub log_ref: String,
    pub started_at: DateTime<Utc>,
}

impl ActionOutcome {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub host_path: PathBuf,
    pub size_bytes: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Declared results of a run, keyed exactly by the SysDef `results` keys.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultIndex {
    pub entries: IndexMap<String, ResultEntry>,
}

/// One lifecycle instance of a system bound to a backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: ExperimentId,
    pub system: SystemId,
    pub backend: BackendId,
    pub state: ExperimentState,
    #[serde(with = "crate::format::syscfg_serde")]
    pub config: SysCfg,
    #[serde(default)]
    pub staged_inputs: IndexMap<String, String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default)]
    pub action_log: Vec<ActionOutcome>,
    #[serde(default)]
    pub results: Option<ResultIndex>,
    /// Reason attached to the latest failure, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Experiment {
    pub fn new(id: ExperimentId, system: SystemId, backend: BackendId, now: DateTime<Utc>) -> Self {
        Self {
            id,
            config: SysCfg::empty(system.clone()),
            system,
            backend,
            state: ExperimentState::Created,
            staged_inputs: IndexMap::new(),
            created_at: now,
            updated_at: now,
            action_log: Vec::new(),
            results: None,
            detail: None,
        }
    }

    /// Applies a lifecycle event. Results are dropped whenever the
    /// experiment leaves `Finished`; use [`Experiment::finish`] for `RunOk`.
    pub fn apply(
        &mut self,
        event: LifecycleEvent,
        now: DateTime<Utc>,
    ) -> Result<ExperimentState, IllegalTransition> {
        if event == LifecycleEvent::RunOk {
            return Err(IllegalTransition {
                current: self.state,
                event,
            });
        }
        let next = transition(self.state, event)?;
        self.state = next;
        self.updated_at = now;
        self.results = None;
        if matches!(
            event,
            LifecycleEvent::Configure | LifecycleEvent::StartBuild | LifecycleEvent::StartRun
        ) {
            self.detail = None;
        }
        Ok(next)
    }

    pub fn finish(
        &mut self,
        results: ResultIndex,
        now: DateTime<Utc>,
    ) -> Result<ExperimentState, IllegalTransition> {
        let next = transition(self.state, LifecycleEvent::RunOk)?;
        self.state = next;
        self.updated_at = now;
        self.results = Some(results);
        Ok(next)
    }

    pub fn last_outcome(&self, action: Phase) -> Option<&ActionOutcome> {
        self.action_log.iter().rev().find(|o| o.action == action)
    }
}
