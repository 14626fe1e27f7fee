mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::*;
use serde_json::{json, Map, Value};
use simhub_core::api::{CreateExperimentRequest, ExperimentFilter};
use simhub_core::client::ClientError;
use simhub_core::{ExperimentState, Phase, Scalar, SysCfg, SystemId};
use simhub_testkit as kit;

fn echo() -> SystemId {
    SystemId::new("echo-sim", "1.0")
}

fn create(system: &SystemId) -> CreateExperimentRequest {
    CreateExperimentRequest {
        system_name: system.name.clone(),
        system_version: system.version.clone(),
        backend: None,
    }
}

fn api_code(e: ClientError) -> (u16, String) {
    match e {
        ClientError::Api { status, body } => (status, body.error),
        other => panic!("expected an API error, got {other}"),
    }
}

#[tokio::test]
async fn echo_sim_lifecycle_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (server, c) = start(config(dir.path(), &["echo-sim"])).await;

    let systems = c.list_systems().await.unwrap();
    assert_eq!(systems.len(), 1);
    assert_eq!(systems[0].id(), Some(echo()));
    assert_eq!(systems[0].image.as_deref(), Some("python:3.10-slim"));

    let exp = c.create_experiment(&create(&echo())).await.unwrap();
    assert_eq!(exp.state, ExperimentState::Created);
    assert_eq!(exp.backend.as_str(), "local");

    let mut cfg = SysCfg::empty(echo());
    cfg.build_overrides.insert("opt_level".into(), Scalar::from("O3"));
    cfg.run_overrides.insert("seed".into(), Scalar::Int(42));
    cfg.run_overrides.insert("label".into(), Scalar::from("é \"q\""));
    cfg.run_overrides.insert("gain".into(), Scalar::Float(0.25));
    cfg.run_overrides.insert("app".into(), Scalar::from("/sysapi/inputs/myApp.elf"));
    let configured = c.configure(&exp.id, &cfg).await.unwrap();
    assert_eq!(configured.state, ExperimentState::Configured);
    assert_eq!(c.experiment(&exp.id).await.unwrap().config, cfg);

    let app = b"\x7fELF firmware".to_vec();
    let staged = c.upload_input(&exp.id, "app", "myApp.elf", app.clone()).await.unwrap();
    assert_eq!(staged.staged_inputs["app"], "myApp.elf");

    let view = c.build(&exp.id).await.unwrap();
    assert_eq!(view.state, ExperimentState::Building);
    assert_eq!(settle(&c, &exp.id, ExperimentState::Building).await.state, ExperimentState::Built);
    c.run(&exp.id).await.unwrap();
    let done = settle(&c, &exp.id, ExperimentState::Running).await;
    assert_eq!(done.state, ExperimentState::Finished, "{:?}", done.detail);

    let results = c.results(&exp.id).await.unwrap();
    let keys: Vec<_> = results.entries.keys().cloned().collect();
    assert_eq!(keys, ["signal_trace", "build_info"]);
    let trace = c.result_payload(&exp.id, "signal_trace").await.unwrap();

    let overrides: Map<String, Value> = cfg
        .run_overrides
        .iter()
        .map(|(k, v)| (k.clone(), v.to_json()))
        .collect();
    let uploads: BTreeMap<String, Vec<u8>> = [("app".to_string(), app)].into_iter().collect();
    let expected = kit::echo_sim_trace(&kit::echo_sim_sysdef(), &overrides, &uploads, Path::new("/nonexistent"));
    assert_eq!(String::from_utf8(trace).unwrap(), expected);

    let build_log = String::from_utf8(c.log(&exp.id, Phase::Build).await.unwrap()).unwrap();
    assert!(build_log.contains("O3"), "{build_log}");
    assert!(!c.log(&exp.id, Phase::Run).await.unwrap().is_empty());

    let got = c.experiment(&exp.id).await.unwrap();
    let actions: Vec<_> = got.action_log.iter().map(|o| (o.action, o.exit_status)).collect();
    assert_eq!(actions, [(Phase::Build, 0), (Phase::Run, 0)]);
    assert!(server.shutdown().await);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, c) = start(config(dir.path(), &["echo-sim"])).await;

    let e = c.create_experiment(&create(&SystemId::new("nope", "1"))).await.unwrap_err();
    assert_eq!(api_code(e), (404, "UnknownSystem".into()));
    let mut req = create(&echo());
    req.backend = Some("cloud".into());
    assert_eq!(api_code(c.create_experiment(&req).await.unwrap_err()).0, 409);

    let exp = c.create_experiment(&create(&echo())).await.unwrap();
    let e = c.experiment(&"exp-999".into()).await.unwrap_err();
    assert_eq!(api_code(e), (404, "UnknownExperiment".into()));

    // wrong system identity, unknown key, wrong type
    let e = c.configure(&exp.id, &SysCfg::empty(SystemId::new("echo-sim", "2.0"))).await.unwrap_err();
    assert_eq!(api_code(e), (422, "SystemMismatch".into()));
    let mut cfg = SysCfg::empty(echo());
    cfg.run_overrides.insert("bogus".into(), Scalar::Int(1));
    assert_eq!(api_code(c.configure(&exp.id, &cfg).await.unwrap_err()), (422, "UnknownParameter".into()));
    let mut cfg = SysCfg::empty(echo());
    cfg.run_overrides.insert("seed".into(), Scalar::from("seven"));
    assert_eq!(api_code(c.configure(&exp.id, &cfg).await.unwrap_err()), (422, "TypeMismatch".into()));
    assert_eq!(c.experiment(&exp.id).await.unwrap().state, ExperimentState::Created);

    let e = c.upload_input(&exp.id, "seed", "x.bin", vec![1]).await.unwrap_err();
    assert_eq!(api_code(e), (400, "NotAFileParameter".into()));
    let e = c.upload_input(&exp.id, "app", "syscfg.json", vec![1]).await.unwrap_err();
    assert_eq!(api_code(e).0, 400);

    assert_eq!(api_code(c.build(&exp.id).await.unwrap_err()), (409, "IllegalTransition".into()));
    assert_eq!(api_code(c.results(&exp.id).await.unwrap_err()), (409, "NotFinished".into()));
    assert_eq!(api_code(c.log(&exp.id, Phase::Build).await.unwrap_err()), (404, "NoLog".into()));

    let http = reqwest::Client::new();
    let url = format!("{}/v1/experiments/{}/config", c.base_url(), exp.id);
    let r = http.put(&url).body("{not json").send().await.unwrap();
    assert_eq!(r.status().as_u16(), 400);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["error"], "InvalidSysCfg");
    let r = http
        .post(format!("{}/v1/experiments", c.base_url()))
        .header("content-type", "application/json")
        .body(r#"{"system_name": 3}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);
    let r = http.get(format!("{}/v1/nothing", c.base_url())).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 404);
}

#[tokio::test]
async fn failing_run_keeps_log_and_reason() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, c) = start(config(dir.path(), &["echo-sim"])).await;
    let exp = c.create_experiment(&create(&echo())).await.unwrap();
    let mut cfg = SysCfg::empty(echo());
    cfg.run_overrides.insert("exit_code".into(), Scalar::Int(3));
    c.configure(&exp.id, &cfg).await.unwrap();
    c.build(&exp.id).await.unwrap();
    settle(&c, &exp.id, ExperimentState::Building).await;
    c.run(&exp.id).await.unwrap();
    let v = settle(&c, &exp.id, ExperimentState::Running).await;
    assert_eq!(v.state, ExperimentState::RunFailed);
    assert!(v.detail.unwrap().contains("status 3"));
    assert!(!c.log(&exp.id, Phase::Run).await.unwrap().is_empty());

    // reconfigure and retry from the failed state
    cfg.run_overrides.insert("exit_code".into(), Scalar::Int(0));
    c.configure(&exp.id, &cfg).await.unwrap();
    c.build(&exp.id).await.unwrap();
    settle(&c, &exp.id, ExperimentState::Building).await;
    c.run(&exp.id).await.unwrap();
    assert_eq!(settle(&c, &exp.id, ExperimentState::Running).await.state, ExperimentState::Finished);
    // a finished experiment can run again
    c.run(&exp.id).await.unwrap();
    assert_eq!(settle(&c, &exp.id, ExperimentState::Running).await.state, ExperimentState::Finished);
}

#[tokio::test]
async fn failing_build_reports_build_failed() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, c) = start(config(dir.path(), &["echo-sim"])).await;
    let exp = c.create_experiment(&create(&echo())).await.unwrap();
    let mut cfg = SysCfg::empty(echo());
    cfg.build_overrides.insert("fail_build".into(), Scalar::Bool(true));
    c.configure(&exp.id, &cfg).await.unwrap();
    c.build(&exp.id).await.unwrap();
    let v = settle(&c, &exp.id, ExperimentState::Building).await;
    assert_eq!(v.state, ExperimentState::BuildFailed);
    assert_eq!(v.detail.as_deref(), Some("build exited with status 2"));
    let log = String::from_utf8(c.log(&exp.id, Phase::Build).await.unwrap()).unwrap();
    assert!(log.contains("fail_build"), "{log}");
    assert_eq!(api_code(c.run(&exp.id).await.unwrap_err()).0, 409);
}

#[tokio::test]
async fn listing_filters_and_pages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &["echo-sim", "sleep-sim"]);
    cfg.backends = backends(json!([
        {"id": "local", "kind": "local", "capacity": 2},
        {"id": "cloud-sim", "kind": "remote"}
    ]));
    cfg.default_backend = Some("local".into());
    let (_server, c) = start(cfg).await;

    let views = c.list_backends().await.unwrap();
    let ids: Vec<_> = views.iter().map(|b| (b.id.as_str().to_string(), b.default)).collect();
    assert_eq!(ids, [("local".to_string(), true), ("cloud-sim".to_string(), false)]);

    let sleep = SystemId::new("sleep-sim", "1.0");
    let echo_id = echo();
    let mut ids = Vec::new();
    for i in 0..5 {
        let mut req = create(if i % 2 == 0 { &echo_id } else { &sleep });
        if i == 4 {
            req.backend = Some("cloud-sim".into());
        }
        ids.push(c.create_experiment(&req).await.unwrap().id);
    }
    c.configure(&ids[1], &SysCfg::empty(sleep.clone())).await.unwrap();

    let all = c.list_experiments(&ExperimentFilter::default()).await.unwrap();
    assert_eq!(all.total, 5);
    assert_eq!(all.items.iter().map(|e| e.id.clone()).collect::<Vec<_>>(), ids);

    let f = |f: ExperimentFilter| {
        let c = &c;
        async move { c.list_experiments(&f).await.unwrap() }
    };
    let page = f(ExperimentFilter { system_name: Some("echo-sim".into()), ..Default::default() }).await;
    assert_eq!(page.total, 3);
    let page = f(ExperimentFilter { state: Some(ExperimentState::Configured), ..Default::default() }).await;
    assert_eq!(page.items.len(), 1);
    assert_eq!(page.items[0].id, ids[1]);
    let page = f(ExperimentFilter { backend: Some("cloud-sim".into()), ..Default::default() }).await;
    assert_eq!(page.items[0].id, ids[4]);
    let page = f(ExperimentFilter { offset: Some(1), limit: Some(2), ..Default::default() }).await;
    assert_eq!((page.total, page.items.len()), (5, 2));
    assert_eq!(page.items[0].id, ids[1]);
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &["echo-sim"]);
    cfg.token = Some("s3cret".into());
    let (server, c) = start(cfg).await;
    assert_eq!(c.list_systems().await.unwrap().len(), 1);

    let anon = simhub_core::client::EvalApiClient::new(&server.url(), None).unwrap();
    assert_eq!(api_code(anon.list_systems().await.unwrap_err()), (401, "Unauthorized".into()));
    let wrong = simhub_core::client::EvalApiClient::new(&server.url(), Some("nope".into())).unwrap();
    assert_eq!(api_code(wrong.list_backends().await.unwrap_err()).0, 401);
}

#[tokio::test]
async fn empty_service_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, c) = start(config(dir.path(), &[])).await;
    assert!(c.list_systems().await.unwrap().is_empty());
    assert_eq!(c.list_experiments(&ExperimentFilter::default()).await.unwrap().total, 0);
}
