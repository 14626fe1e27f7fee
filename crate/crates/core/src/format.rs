//! Codec for the SysDef and SysCfg JSON documents, and the merge of user
//! overrides onto SysDef defaults.

use indexmap::IndexMap;
use serde_json::{Map, Value};

use crate::model::{
    BackendKind, ParameterDef, Phase, ResultDecl, Scalar, ScalarKind, SysCfg, SysDef, SystemId,
    SystemInterface,
};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error at `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("configuration targets {found}, expected {expected}")]
    SystemMismatch { expected: SystemId, found: SystemId },
    #[error("parameter `{key}` expects a {expected} value, got {found}")]
    TypeMismatch {
        key: String,
        expected: ScalarKind,
        found: ScalarKind,
    },
}

fn schema(field: impl Into<String>, reason: impl Into<String>) -> FormatError {
    FormatError::Schema {
        field: field.into(),
        reason: reason.into(),
    }
}

const SYSDEF_FIELDS: &[&str] = &[
    "name",
    "version",
    "docker_image",
    "build_command",
    "run_command",
    "build_parameters",
    "run_parameters",
    "results",
    "required_backend_kind",
];

/// Effective parameter values for one phase, in SysDef declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveConfig {
    pub phase: Phase,
    pub values: IndexMap<String, Scalar>,
}

/// JSON decoding that rejects duplicate object keys instead of silently
/// keeping the last one.
struct StrictValue<'p>(&'p str);

const DUPLICATE_MARKER: &str = "duplicate key `";

impl<'de> serde::de::DeserializeSeed<'de> for StrictValue<'_> {
    type Value = Value;

    fn deserialize<D: serde::Deserializer<'de>>(self, d: D) -> Result<Value, D::Error> {
        d.deserialize_any(self)
    }
}

impl<'de> serde::de::Visitor<'de> for StrictValue<'_> {
    type Value = Value;

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_u64<E>(self, v: u64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_f64<E>(self, v: f64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_str<E>(self, v: &str) -> Result<Value, E> {
        Ok(Value::String(v.to_owned()))
    }

    fn visit_string<E>(self, v: String) -> Result<Value, E> {
        Ok(Value::String(v))
    }

    fn visit_unit<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_some<D: serde::Deserializer<'de>>(self, d: D) -> Result<Value, D::Error> {
        d.deserialize_any(self)
    }

    fn visit_seq<A: serde::de::SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut out = Vec::new();
        while let Some(v) = seq.next_element_seed(StrictValue(self.0))? {
            out.push(v);
        }
        Ok(Value::Array(out))
    }

    fn visit_map<A: serde::de::MapAccess<'de>>(self, mut map: A) -> Result<Value, A::Error> {
        let mut out = Map::new();
        while let Some(key) = map.next_key::<String>()? {
            let path = if self.0.is_empty() {
                key.clone()
            } else {
                format!("{}.{key}", self.0)
            };
            let value = map.next_value_seed(StrictValue(&path))?;
            if out.insert(key, value).is_some() {
                return Err(serde::de::Error::custom(format!("{DUPLICATE_MARKER}{path}`")));
            }
        }
        Ok(Value::Object(out))
    }
}

fn strict_parse(text: &str) -> Result<Value, FormatError> {
    use serde::de::DeserializeSeed;

    let mut de = serde_json::Deserializer::from_str(text);
    let value = StrictValue("").deserialize(&mut de).and_then(|v| {
        de.end()?;
        Ok(v)
    });
    value.map_err(|e| {
        let msg = e.to_string();
        match msg
            .strip_prefix(DUPLICATE_MARKER)
            .and_then(|rest| rest.split_once('`'))
        {
            Some((field, _)) => schema(field, "duplicate key"),
            None => FormatError::Json(e),
        }
    })
}

fn root_object(text: &str) -> Result<Map<String, Value>, FormatError> {
    match strict_parse(text)? {
        Value::Object(m) => Ok(m),
        _ => Err(schema("$", "document must be a JSON object")),
    }
}

fn required_string(obj: &Map<String, Value>, key: &str, field: &str) -> Result<String, FormatError> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(schema(field, "missing")),
        Some(Value::String(s)) if s.trim().is_empty() => Err(schema(field, "must not be empty")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(field, "must be a string")),
    }
}

fn optional_object<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
) -> Result<Option<&'a Map<String, Value>>, FormatError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Object(m)) => Ok(Some(m)),
        Some(_) => Err(schema(key, "must be an object")),
    }
}

fn scalar(value: &Value, field: &str) -> Result<Scalar, FormatError> {
    match value {
        Value::Bool(b) => Ok(Scalar::Bool(*b)),
        Value::String(s) => Ok(Scalar::Str(s.clone())),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Ok(Scalar::Int(i))
            } else if let Some(f) = n.as_f64() {
                Ok(Scalar::Float(f))
            } else {
                Err(schema(field, "number out of range"))
            }
        }
        _ => Err(schema(field, "must be a string, number or boolean")),
    }
}

/// Rejects absolute paths and any `..` segment.
pub fn is_confined_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.starts_with('\\')
        && path.split(['/', '\\']).all(|seg| seg != "..")
}

fn parse_parameters(
    obj: &Map<String, Value>,
    phase: Phase,
) -> Result<Vec<ParameterDef>, FormatError> {
    let block_name = phase.parameters_field();
    let Some(block) = optional_object(obj, block_name)? else {
        return Ok(Vec::new());
    };
    let mut params = Vec::with_capacity(block.len());
    for (key, raw) in block {
        let field = format!("{block_name}.{key}");
        if key.is_empty() {
            return Err(schema(field, "parameter key must not be empty"));
        }
        let (default_value, is_file) = match raw {
            Value::Object(spec) => {
                let default = spec
                    .get("default_value")
                    .ok_or_else(|| schema(&field, "missing default_value"))?;
                let default = scalar(default, &format!("{field}.default_value"))?;
                let is_file = match spec.get("is_file") {
                    None | Some(Value::Null) => false,
                    Some(Value::Bool(b)) => *b,
                    Some(_) => return Err(schema(format!("{field}.is_file"), "must be a boolean")),
                };
                (default, is_file)
            }
            other => (scalar(other, &field)?, false),
        };
        if is_file && default_value.as_str().is_none() {
            return Err(schema(
                format!("{field}.default_value"),
                "file parameter default must be a path string",
            ));
        }
        params.push(ParameterDef {
            key: key.clone(),
            default_value,
            is_file,
            phase,
        });
    }
    Ok(params)
}

fn parse_results(obj: &Map<String, Value>) -> Result<Vec<ResultDecl>, FormatError> {
    let Some(block) = optional_object(obj, "results")? else {
        return Ok(Vec::new());
    };
    let mut results = Vec::with_capacity(block.len());
    for (key, raw) in block {
        let field = format!("results.{key}");
        let Value::Object(spec) = raw else {
            return Err(schema(field, "must be an object with `path` and `type`"));
        };
        let path = required_string(spec, "path", &format!("{field}.path"))?;
        if !is_confined_path(&path) {
            return Err(schema(
                format!("{field}.path"),
                "path escapes the workspace (absolute or contains `..`)",
            ));
        }
        let kind = match spec.get("type") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(schema(format!("{field}.type"), "must be a string")),
        };
        results.push(ResultDecl {
            key: key.clone(),
            path,
            kind,
        });
    }
    Ok(results)
}

/// Parses a System Definition document.
///
/// Parameters may be given in shorthand (`"key": <scalar>`) or object form
/// (`"key": {"default_value": .., "is_file": ..}`). Unknown top-level
/// fields are logged and ignored.
pub fn parse_sysdef(text: &str) -> Result<SysDef, FormatError> {
    let obj = root_object(text)?;
    for key in obj.keys() {
        if !SYSDEF_FIELDS.contains(&key.as_str()) {
            tracing::warn!(field = %key, "ignoring unknown SysDef field");
        }
    }
    let id = SystemId {
        name: required_string(&obj, "name", "name")?,
        version: required_string(&obj, "version", "version")?,
    };
    let image = required_string(&obj, "docker_image", "docker_image")?;
    let build_command = required_string(&obj, "build_command", "build_command")?;
    let run_command = required_string(&obj, "run_command", "run_command")?;
    let build_parameters = parse_parameters(&obj, Phase::Build)?;
    let run_parameters = parse_parameters(&obj, Phase::Run)?;
    let results = parse_results(&obj)?;
    let required_backend_kind = match obj.get("required_backend_kind") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<BackendKind>(v.clone()).map_err(|_| {
                schema(
                    "required_backend_kind",
                    "must be one of \"local\", \"remote\", \"cascaded\"",
                )
            })?,
        ),
    };
    Ok(SysDef {
        id,
        image,
        build_command,
        run_command,
        build_parameters,
        run_parameters,
        results,
        required_backend_kind,
    })
}

fn parse_overrides(
    obj: &Map<String, Value>,
    phase: Phase,
) -> Result<IndexMap<String, Scalar>, FormatError> {
    let block_name = phase.parameters_field();
    let Some(block) = optional_object(obj, block_name)? else {
        return Ok(IndexMap::new());
    };
    block
        .iter()
        .map(|(k, v)| Ok((k.clone(), scalar(v, &format!("{block_name}.{k}"))?)))
        .collect()
}

fn syscfg_from_object(obj: &Map<String, Value>) -> Result<SysCfg, FormatError> {
    let system = match obj.get("system") {
        None | Some(Value::Null) => return Err(schema("system", "missing")),
        Some(Value::Object(m)) => m,
        Some(_) => return Err(schema("system", "must be an object")),
    };
    Ok(SysCfg {
        system: SystemId {
            name: required_string(system, "name", "system.name")?,
            version: required_string(system, "version", "system.version")?,
        },
        build_overrides: parse_overrides(obj, Phase::Build)?,
        run_overrides: parse_overrides(obj, Phase::Run)?,
    })
}

/// Parses a System Configuration document.
pub fn parse_syscfg(text: &str) -> Result<SysCfg, FormatError> {
    syscfg_from_object(&root_object(text)?)
}

fn overrides_to_json(map: &IndexMap<String, Scalar>) -> Value {
    Value::Object(map.iter().map(|(k, v)| (k.clone(), v.to_json())).collect())
}

pub fn syscfg_to_json(cfg: &SysCfg) -> Value {
    let mut obj = Map::new();
    let mut system = Map::new();
    system.insert("name".into(), Value::String(cfg.system.name.clone()));
    system.insert("version".into(), Value::String(cfg.system.version.clone()));
    obj.insert("system".into(), Value::Object(system));
    for phase in Phase::ALL {
        let overrides = cfg.overrides(phase);
        if !overrides.is_empty() {
            obj.insert(phase.parameters_field().into(), overrides_to_json(overrides));
        }
    }
    Value::Object(obj)
}

/// Renders a SysCfg with stable key order (`system`, `build_parameters`,
/// `run_parameters`); empty parameter blocks are omitted.
pub fn render_syscfg(cfg: &SysCfg) -> String {
    let mut text = serde_json::to_string_pretty(&syscfg_to_json(cfg))
        .expect("SysCfg values are always serializable");
    text.push('\n');
    text
}

/// Canonical rendering of a SysDef: shorthand for plain parameters, object
/// form for file parameters.
pub fn render_sysdef(def: &SysDef) -> String {
    let mut obj = Map::new();
    obj.insert("name".into(), def.id.name.clone().into());
    obj.insert("version".into(), def.id.version.clone().into());
    obj.insert("docker_image".into(), def.image.clone().into());
    obj.insert("build_command".into(), def.build_command.clone().into());
    obj.insert("run_command".into(), def.run_command.clone().into());
    for phase in Phase::ALL {
        let params = def.parameters(phase);
        if params.is_empty() {
            continue;
        }
        let block: Map<String, Value> = params
            .iter()
            .map(|p| {
                let v = if p.is_file {
                    serde_json::json!({ "default_value": p.default_value.to_json(), "is_file": true })
                } else {
                    p.default_value.to_json()
                };
                (p.key.clone(), v)
            })
            .collect();
        obj.insert(phase.parameters_field().into(), Value::Object(block));
    }
    if !def.results.is_empty() {
        let block: Map<String, Value> = def
            .results
            .iter()
            .map(|r| (r.key.clone(), serde_json::json!({ "path": r.path, "type": r.kind })))
            .collect();
        obj.insert("results".into(), Value::Object(block));
    }
    if let Some(kind) = def.required_backend_kind {
        obj.insert("required_backend_kind".into(), serde_json::to_value(kind).unwrap());
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(obj)).unwrap();
    text.push('\n');
    text
}

/// Applies the overrides of `syscfg` for `phase` onto the SysDef defaults.
pub fn merge(sysdef: &SysDef, syscfg: &SysCfg, phase: Phase) -> Result<EffectiveConfig, FormatError> {
    merge_interface(&sysdef.interface(), syscfg, phase)
}

/// [`merge`] against a published system interface.
pub fn merge_interface(
    iface: &SystemInterface,
    syscfg: &SysCfg,
    phase: Phase,
) -> Result<EffectiveConfig, FormatError> {
    if syscfg.system != iface.id {
        return Err(FormatError::SystemMismatch {
            expected: iface.id.clone(),
            found: syscfg.system.clone(),
        });
    }
    let params = iface.parameters(phase);
    let overrides = syscfg.overrides(phase);
    if let Some(unknown) = overrides.keys().find(|k| !params.iter().any(|p| &p.key == *k)) {
        return Err(FormatError::UnknownParameter(unknown.clone()));
    }
    let mut values = IndexMap::with_capacity(params.len());
    for p in params {
        let value = match overrides.get(&p.key) {
            Some(v) => {
                let expected = p.default_value.kind();
                if v.kind() != expected {
                    return Err(FormatError::TypeMismatch {
                        key: p.key.clone(),
                        expected,
                        found: v.kind(),
                    });
                }
                v.clone()
            }
            None => p.default_value.clone(),
        };
        values.insert(p.key.clone(), value);
    }
    Ok(EffectiveConfig { phase, values })
}

/// Serde adapter that stores a [`SysCfg`] in its document form.
pub mod syscfg_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::model::SysCfg;

    pub fn serialize<S: Serializer>(cfg: &SysCfg, s: S) -> Result<S::Ok, S::Error> {
        super::syscfg_to_json(cfg).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SysCfg, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        match value {
            serde_json::Value::Object(obj) => {
                super::syscfg_from_object(&obj).map_err(serde::de::Error::custom)
            }
            _ => Err(serde::de::Error::custom("SysCfg must be an object")),
        }
    }
}
