use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use serde_json::{Map, Value};
use simhub_core::executor::{
    collect_results, invocation, prepare_workspace, ExecError, Executor, ExperimentWorkspace,
    HostRuntime, TIMEOUT_EXIT_STATUS,
};
use simhub_core::fsutil::tree_digest;
use simhub_core::storage::SystemStorage;
use simhub_core::{parse_syscfg, Phase, Scalar, SysCfg, SysDef, SystemId};
use simhub_testkit as kit;
use tempfile::TempDir;

struct Staged {
    _dir: TempDir,
    ws: ExperimentWorkspace,
    sysdef: SysDef,
    syscfg: SysCfg,
}

fn stage(system: &str, syscfg: Option<SysCfg>, inputs: &[(&str, &str, &[u8])]) -> Staged {
    let dir = tempfile::tempdir().unwrap();
    let storage = SystemStorage::in_memory();
    let record = storage
        .register_system(kit::system_repo(system).to_str().unwrap(), None)
        .unwrap();
    let id = record.cached.unwrap().id;
    let root = dir.path().join("ws");
    let source = storage.checkout(&id, &root.join("repository")).unwrap();
    let mut files = IndexMap::new();
    let upload_dir = dir.path().join("uploads");
    fs::create_dir_all(&upload_dir).unwrap();
    for (key, name, bytes) in inputs {
        let p = upload_dir.join(key);
        fs::create_dir_all(&p).unwrap();
        let p = p.join(name);
        fs::write(&p, bytes).unwrap();
        files.insert(key.to_string(), p);
    }
    let cfg = syscfg.unwrap_or_else(|| SysCfg::empty(id));
    let (ws, syscfg) = prepare_workspace(&root, &source, &cfg, &files).unwrap();
    Staged {
        _dir: dir,
        ws,
        sysdef: source.sysdef,
        syscfg,
    }
}

fn executor(shell: &str) -> Executor {
    Executor::new(Arc::new(HostRuntime::new(shell)))
}

const T: Duration = Duration::from_secs(30);

fn echo_id() -> SystemId {
    SystemId::new("echo-sim", "1.0")
}

fn run_overrides(cfg: &SysCfg) -> Map<String, Value> {
    cfg.run_overrides
        .iter()
        .map(|(k, v)| (k.clone(), v.to_json()))
        .collect()
}

#[test]
fn system3_run_invocation_matches_golden_command() {
    let s = stage(
        "system3",
        Some(parse_syscfg(kit::SYSTEM3_SYSCFG).unwrap()),
        &[("app", "myApp.elf", b"\x7fELF")],
    );
    let line = invocation(&s.ws, &s.sysdef, Phase::Run).command_line();
    let vol = s.ws.root.display().to_string();
    assert_eq!(line.replacen(&vol, "<experiment-volume>", 1), kit::SYSTEM3_RUN_COMMAND);

    let written = fs::read_to_string(s.ws.syscfg()).unwrap();
    assert_eq!(written.trim_end(), kit::SYSTEM3_SYSCFG);
}

#[test]
fn empty_config_stages_system_block_only() {
    let s = stage("echo-sim", None, &[]);
    let v: Value = serde_json::from_str(&fs::read_to_string(s.ws.syscfg()).unwrap()).unwrap();
    assert_eq!(v, serde_json::json!({"system": {"name": "echo-sim", "version": "1.0"}}));
    for d in [s.ws.repository(), s.ws.inputs(), s.ws.outputs()] {
        assert!(d.is_dir());
    }
}

#[test]
fn staging_a_scalar_parameter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let storage = SystemStorage::in_memory();
    storage
        .register_system(kit::system_repo("echo-sim").to_str().unwrap(), None)
        .unwrap();
    let source = storage
        .checkout(&echo_id(), &dir.path().join("co"))
        .unwrap();
    let f = dir.path().join("x.bin");
    fs::write(&f, b"x").unwrap();
    let files: IndexMap<String, PathBuf> = [("run_time_ms".to_string(), f)].into_iter().collect();
    let err = prepare_workspace(&dir.path().join("ws"), &source, &SysCfg::empty(echo_id()), &files)
        .unwrap_err();
    assert!(matches!(err, ExecError::NotAFileParameter(k) if k == "run_time_ms"));
}

#[tokio::test]
async fn system3_runs_and_yields_128_byte_trace() {
    let s = stage(
        "system3",
        Some(parse_syscfg(kit::SYSTEM3_SYSCFG).unwrap()),
        &[("app", "myApp.elf", b"\x7fELF")],
    );
    let out = executor("bash")
        .execute_action(&s.ws, &s.sysdef, Phase::Run, T)
        .await
        .unwrap();
    assert_eq!(out.exit_status, 0, "{}", fs::read_to_string(&out.log_ref).unwrap());
    let idx = collect_results(&s.ws, &s.sysdef);
    let e = &idx.entries["signal_trace"];
    assert!(e.present);
    assert_eq!(e.size_bytes, 128);
    assert_eq!(e.kind, "vcd");
}

#[tokio::test]
async fn echo_sim_trace_matches_oracle_and_is_deterministic() {
    let mut cfg = SysCfg::empty(echo_id());
    cfg.run_overrides.insert("seed".into(), Scalar::Int(42));
    cfg.run_overrides.insert("label".into(), Scalar::Str("sweep \"a\" é".into()));
    cfg.run_overrides.insert("gain".into(), Scalar::Float(0.25));
    let app = b"firmware-bytes".to_vec();

    let mut traces = Vec::new();
    for _ in 0..2 {
        let s = stage("echo-sim", Some(cfg.clone()), &[("app", "fw.elf", &app)]);
        let ex = executor("sh");
        let b = ex.execute_action(&s.ws, &s.sysdef, Phase::Build, T).await.unwrap();
        assert_eq!(b.exit_status, 0);
        let r = ex.execute_action(&s.ws, &s.sysdef, Phase::Run, T).await.unwrap();
        assert_eq!(r.exit_status, 0, "{}", fs::read_to_string(&r.log_ref).unwrap());
        let idx = collect_results(&s.ws, &s.sysdef);
        let trace = fs::read_to_string(&idx.entries["signal_trace"].host_path).unwrap();

        let uploads = BTreeMap::from([("app".to_string(), app.clone())]);
        let expected = kit::echo_sim_trace(
            &kit::echo_sim_sysdef(),
            &run_overrides(&s.syscfg),
            &uploads,
            &s.ws.repository(),
        );
        assert_eq!(trace, expected);
        traces.push(trace);
    }
    assert_eq!(traces[0], traces[1]);
}

#[tokio::test]
async fn unstaged_file_parameter_resolves_against_repository() {
    let s = stage("echo-sim", None, &[]);
    let ex = executor("sh");
    ex.execute_action(&s.ws, &s.sysdef, Phase::Build, T).await.unwrap();
    ex.execute_action(&s.ws, &s.sysdef, Phase::Run, T).await.unwrap();
    let trace = fs::read_to_string(s.ws.repository().join("vp/output/sim_trace.vcd")).unwrap();
    let expected = kit::echo_sim_trace(
        &kit::echo_sim_sysdef(),
        &Map::new(),
        &BTreeMap::new(),
        &kit::system_repo("echo-sim"),
    );
    assert_eq!(trace, expected);
    assert!(!trace.contains("missing"));
}

#[tokio::test]
async fn nonzero_exit_is_an_outcome_not_an_error() {
    let mut cfg = SysCfg::empty(echo_id());
    cfg.run_overrides.insert("exit_code".into(), Scalar::Int(3));
    let s = stage("echo-sim", Some(cfg), &[]);
    let ex = executor("sh");
    ex.execute_action(&s.ws, &s.sysdef, Phase::Build, T).await.unwrap();
    let out = ex.execute_action(&s.ws, &s.sysdef, Phase::Run, T).await.unwrap();
    assert_eq!(out.exit_status, 3);
    assert!(!out.succeeded());
    // partial results remain collectable
    assert!(collect_results(&s.ws, &s.sysdef).entries["signal_trace"].present);
}

#[tokio::test]
async fn missing_results_are_absent_entries() {
    let s = stage("echo-sim", None, &[]);
    let out = executor("sh")
        .execute_action(&s.ws, &s.sysdef, Phase::Run, T)
        .await
        .unwrap();
    assert_eq!(out.exit_status, 5);
    let idx = collect_results(&s.ws, &s.sysdef);
    assert_eq!(idx.entries.keys().collect::<Vec<_>>(), ["signal_trace", "build_info"]);
    assert!(idx.entries.values().all(|e| !e.present && e.error.is_none()));
}

#[tokio::test]
async fn logs_are_kept_per_action_in_meta() {
    let s = stage("echo-sim", None, &[]);
    let ex = executor("sh");
    let a = ex.execute_action(&s.ws, &s.sysdef, Phase::Build, T).await.unwrap();
    let b = ex.execute_action(&s.ws, &s.sysdef, Phase::Build, T).await.unwrap();
    assert_ne!(a.log_ref, b.log_ref);
    for o in [&a, &b] {
        let p = Path::new(&o.log_ref);
        assert!(p.starts_with(s.ws.meta()));
        assert!(fs::read_to_string(p).unwrap().contains("build ok: opt_level=O2"));
    }
    assert!(fs::read_dir(s.ws.outputs()).unwrap().next().is_none());
}

#[tokio::test]
async fn actions_leave_no_trace_outside_the_workspace() {
    let sentinel = tempfile::tempdir().unwrap();
    fs::write(sentinel.path().join("a.txt"), "sentinel").unwrap();
    fs::create_dir(sentinel.path().join("sub")).unwrap();
    fs::write(sentinel.path().join("sub/b.bin"), [0u8, 1, 2]).unwrap();
    let fixture = kit::system_repo("echo-sim");
    let before = (tree_digest(sentinel.path()).unwrap(), tree_digest(&fixture).unwrap());

    let s = stage("echo-sim", None, &[("app", "fw.elf", b"fw")]);
    let ex = executor("sh");
    ex.execute_action(&s.ws, &s.sysdef, Phase::Build, T).await.unwrap();
    ex.execute_action(&s.ws, &s.sysdef, Phase::Run, T).await.unwrap();

    let after = (tree_digest(sentinel.path()).unwrap(), tree_digest(&fixture).unwrap());
    assert_eq!(before, after);
}

fn alive(pid: i32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            let state = stat.rsplit(')').next().unwrap().split_whitespace().next();
            state != Some("Z")
        }
        Err(_) => false,
    }
}

fn spawner_system(dir: &Path) -> PathBuf {
    let repo = dir.join("spawner");
    fs::create_dir_all(&repo).unwrap();
    fs::write(
        repo.join("sysdef.json"),
        r#"{"name": "spawner", "version": "1", "docker_image": "busybox",
            "build_command": "true",
            "run_command": "sleep 30 & echo $! > pid.txt; sleep 60; true",
            "run_parameters": {"n": 1}}"#,
    )
    .unwrap();
    repo
}

#[tokio::test]
async fn no_process_outlives_its_action() {
    let dir = tempfile::tempdir().unwrap();
    let repo = spawner_system(dir.path());
    let storage = SystemStorage::in_memory();
    storage.register_system(repo.to_str().unwrap(), None).unwrap();
    let id = SystemId::new("spawner", "1");
    let root = dir.path().join("ws");
    let source = storage.checkout(&id, &root.join("repository")).unwrap();
    let (ws, _) = prepare_workspace(&root, &source, &SysCfg::empty(id), &IndexMap::new()).unwrap();
    let ws = ws.with_label("exp-spawner");

    let runtime = Arc::new(HostRuntime::new("sh"));
    let ex = Executor::new(runtime.clone());
    let sysdef = source.sysdef;
    let task = {
        let (ex, ws, sysdef) = (ex.clone(), ws.clone(), sysdef.clone());
        tokio::spawn(async move {
            ex.execute_action(&ws, &sysdef, Phase::Run, Duration::from_millis(400))
                .await
        })
    };
    tokio::time::sleep(Duration::from_millis(150)).await;
    use simhub_core::executor::ContainerRuntime;
    assert_eq!(runtime.running_with_label("exp-spawner").await.unwrap().len(), 1);

    let err = task.await.unwrap().unwrap_err();
    let ExecError::ActionTimeout { outcome } = err else {
        panic!("expected timeout, got {err}")
    };
    assert_eq!(outcome.exit_status, TIMEOUT_EXIT_STATUS);
    assert!(outcome.duration_s >= 0.4 && outcome.duration_s < 5.0);
    assert!(runtime.running_with_label("exp-spawner").await.unwrap().is_empty());

    let pid: i32 = fs::read_to_string(ws.repository().join("pid.txt"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    let mut gone = false;
    for _ in 0..50 {
        if !alive(pid) {
            gone = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(gone, "background process {pid} survived the action");
}

#[tokio::test]
async fn unprepared_workspace_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let sysdef = simhub_core::parse_sysdef(kit::SYSTEM3_SYSDEF).unwrap();
    let err = executor("sh")
        .execute_action(&ExperimentWorkspace::new(dir.path()), &sysdef, Phase::Run, T)
        .await
        .unwrap_err();
    assert!(matches!(err, ExecError::Staging(_)));
}

#[tokio::test]
async fn concurrent_workspaces_do_not_interfere() {
    let ex = executor("sh");
    let mut handles = Vec::new();
    for seed in 0..6i64 {
        let ex = ex.clone();
        handles.push(tokio::spawn(async move {
            let mut cfg = SysCfg::empty(echo_id());
            cfg.run_overrides.insert("seed".into(), Scalar::Int(seed));
            let payload = format!("input-{seed}").into_bytes();
            let s = stage("echo-sim", Some(cfg), &[("app", "in.bin", &payload)]);
            ex.execute_action(&s.ws, &s.sysdef, Phase::Build, T).await.unwrap();
            ex.execute_action(&s.ws, &s.sysdef, Phase::Run, T).await.unwrap();
            let got = fs::read_to_string(s.ws.repository().join("vp/output/sim_trace.vcd")).unwrap();
            let want = kit::echo_sim_trace(
                &kit::echo_sim_sysdef(),
                &run_overrides(&s.syscfg),
                &BTreeMap::from([("app".to_string(), payload)]),
                &s.ws.repository(),
            );
            assert_eq!(got, want);
        }));
    }
    for h in handles {
        h.await.unwrap();
    }
}
