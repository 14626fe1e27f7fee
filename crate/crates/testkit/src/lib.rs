//! Test support: fixture system repositories and reference oracles that
//! recompute fixture outputs without going through the runtime.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// System Definition of the `system3` fixture.
pub const SYSTEM3_SYSDEF: &str = r#"{
  "name": "System 3",
  "version": "1.2",
  "docker_image": "my_registry.com/image-b:demo",
  "build_command": "python build.py",
  "run_command": "source run.sh",
  "build_parameters": {
    "compile_args": "-O3 -Wall"
  },
  "run_parameters": {
    "run_time_ms": 1000,
    "app": {
      "default_value": "demo_sw/demo_app",
      "is_file": true
    },
    "simulator_args": "--verbose"
  },
  "results": {
    "signal_trace": {
      "path": "vp/output/sim_trace.vcd",
      "type": "vcd"
    }
  }
}"#;

/// System Configuration overriding the `system3` fixture.
pub const SYSTEM3_SYSCFG: &str = r#"{
  "system": {
    "name": "System 3",
    "version": "1.2"
  },
  "build_parameters": {
    "compile_args": "-Os"
  },
  "run_parameters": {
    "run_time_ms": 20,
    "app": "/sysapi/inputs/myApp.elf"
  }
}"#;

/// The command line the runtime manager must produce for a "System 3" run.
pub const SYSTEM3_RUN_COMMAND: &str = "docker run --rm -v <experiment-volume>:/sysapi -w /sysapi/repository my_registry.com/image-b:demo source run.sh /sysapi/inputs/syscfg.json";

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Directory repository of a fixture system (`echo-sim`, `sleep-sim`, `system3`).
pub fn system_repo(name: &str) -> PathBuf {
    let p = fixtures_dir().join("systems").join(name);
    assert!(p.join("sysdef.json").is_file(), "no fixture system {name}");
    fs::canonicalize(p).unwrap()
}

/// Copies a fixture system into `dest` and turns it into a git repository
/// with a single commit on branch `main`. Returns the commit id.
pub fn git_repo_from_fixture(name: &str, dest: &Path) -> String {
    copy_dir(&system_repo(name), dest);
    let git = |args: &[&str]| {
        let out = std::process::Command::new("git")
            .args(args)
            .current_dir(dest)
            .env("GIT_AUTHOR_NAME", "fixture")
            .env("GIT_AUTHOR_EMAIL", "fixture@example.com")
            .env("GIT_COMMITTER_NAME", "fixture")
            .env("GIT_COMMITTER_EMAIL", "fixture@example.com")
            .output()
            .expect("git runs");
        assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).trim().to_string()
    };
    git(&["init", "--quiet", "--initial-branch", "main"]);
    git(&["add", "--all"]);
    git(&["commit", "--quiet", "-m", "fixture"]);
    git(&["rev-parse", "HEAD"])
}

fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let target = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), &target).unwrap();
        }
    }
}

/// Encodes a JSON scalar the way Python's `json.dumps` does with default
/// settings. Floats are supported in the range where Python prints them in
/// positional notation.
pub fn python_json(value: &Value) -> String {
    match value {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.to_string()
            } else if let Some(u) = n.as_u64() {
                u.to_string()
            } else {
                let f = n.as_f64().unwrap();
                let s = format!("{f}");
                if s.contains(['.', 'e', 'i', 'N']) {
                    s
                } else {
                    format!("{s}.0")
                }
            }
        }
        Value::String(s) => {
            let mut out = String::from("\"");
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    '\t' => out.push_str("\\t"),
                    '\u{8}' => out.push_str("\\b"),
                    '\u{c}' => out.push_str("\\f"),
                    c if (c as u32) < 0x20 || (c as u32) > 0x7e && (c as u32) != 0x7f => {
                        let mut buf = [0u16; 2];
                        for unit in c.encode_utf16(&mut buf) {
                            out.push_str(&format!("\\u{unit:04x}"));
                        }
                    }
                    c => out.push(c),
                }
            }
            out.push('"');
            out
        }
        other => panic!("not a scalar: {other}"),
    }
}

/// Expected `vp/output/sim_trace.vcd` of the echo-sim fixture.
///
/// * `sysdef` - the fixture's SysDef document
/// * `run_overrides` - run-phase overrides from the SysCfg the system received
/// * `uploads` - content of staged files, keyed by parameter
/// * `repo` - checkout used to resolve repository-relative file parameters
pub fn echo_sim_trace(
    sysdef: &Value,
    run_overrides: &Map<String, Value>,
    uploads: &BTreeMap<String, Vec<u8>>,
    repo: &Path,
) -> String {
    let declared = sysdef["run_parameters"].as_object().cloned().unwrap_or_default();
    let mut lines = vec![
        "$comment echo-sim trace $end".to_string(),
        format!(
            "$version {} {} $end",
            sysdef["name"].as_str().unwrap(),
            sysdef["version"].as_str().unwrap()
        ),
    ];
    let keys: BTreeMap<&String, &Value> = declared.iter().collect();
    for (key, spec) in keys {
        let (default, is_file) = match spec {
            Value::Object(o) => (
                o["default_value"].clone(),
                o.get("is_file").and_then(Value::as_bool).unwrap_or(false),
            ),
            v => (v.clone(), false),
        };
        let value = run_overrides.get(key).cloned().unwrap_or(default);
        lines.push(format!("$param {key} {} $end", python_json(&value)));
        if is_file {
            let bytes = match uploads.get(key) {
                Some(b) => Some(b.clone()),
                None => fs::read(repo.join(value.as_str().unwrap())).ok(),
            };
            let digest = bytes
                .map(|b| hex::encode(Sha256::digest(b)))
                .unwrap_or_else(|| "missing".into());
            lines.push(format!("$input {key} {digest} $end"));
        }
    }
    lines.push("$enddefinitions $end".into());
    lines.join("\n") + "\n"
}

pub fn echo_sim_sysdef() -> Value {
    serde_json::from_slice(&fs::read(system_repo("echo-sim").join("sysdef.json")).unwrap()).unwrap()
}
