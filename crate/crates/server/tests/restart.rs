mod common;

use std::sync::Arc;

use common::*;
use simhub_core::api::CreateExperimentRequest;
use simhub_core::{ExperimentState, Phase, Scalar, SysCfg, SystemId};
use simhub_server::stub::{ScriptedBackend, Step};

fn req() -> CreateExperimentRequest {
    CreateExperimentRequest {
        system_name: "echo-sim".into(),
        system_version: "1.0".into(),
        backend: None,
    }
}

#[tokio::test]
async fn observed_states_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let echo = SystemId::new("echo-sim", "1.0");
    let mut cfg = SysCfg::empty(echo.clone());
    cfg.run_overrides.insert("seed".into(), Scalar::Int(5));

    let (server, c) = start(config(dir.path(), &["echo-sim"])).await;
    let created = c.create_experiment(&req()).await.unwrap().id;
    let configured = c.create_experiment(&req()).await.unwrap().id;
    c.configure(&configured, &cfg).await.unwrap();
    let finished = c.create_experiment(&req()).await.unwrap().id;
    c.configure(&finished, &cfg).await.unwrap();
    c.build(&finished).await.unwrap();
    settle(&c, &finished, ExperimentState::Building).await;
    c.run(&finished).await.unwrap();
    assert_eq!(settle(&c, &finished, ExperimentState::Running).await.state, ExperimentState::Finished);
    let trace = c.result_payload(&finished, "signal_trace").await.unwrap();
    let before: Vec<_> = c.list_experiments(&Default::default()).await.unwrap().items;
    assert!(server.shutdown().await);

    let (_server, c) = start(config(dir.path(), &["echo-sim"])).await;
    let after: Vec<_> = c.list_experiments(&Default::default()).await.unwrap().items;
    assert_eq!(before, after);
    assert_eq!(c.experiment(&configured).await.unwrap().config, cfg);
    assert_eq!(c.experiment(&created).await.unwrap().state, ExperimentState::Created);
    assert_eq!(c.result_payload(&finished, "signal_trace").await.unwrap(), trace);
    let next = c.create_experiment(&req()).await.unwrap().id;
    assert_eq!(next.sequence(), Some(4));
}

#[tokio::test]
async fn interrupted_actions_are_failed_on_restart() {
    let dir = tempfile::tempdir().unwrap();
    let stub = Arc::new(ScriptedBackend::new("stub"));
    let mut cfg = config(dir.path(), &["echo-sim"]);
    cfg.default_backend = Some("stub".into());
    cfg.shutdown_grace_s = Some(0.0);
    let (server, c) = start_with(cfg.clone(), vec![stub.clone()]).await;

    let echo = SysCfg::empty(SystemId::new("echo-sim", "1.0"));
    let building = c.create_experiment(&req()).await.unwrap().id;
    c.configure(&building, &echo).await.unwrap();
    stub.plan(&building, Phase::Build, Step::Hold);
    c.build(&building).await.unwrap();

    let running = c.create_experiment(&req()).await.unwrap().id;
    c.configure(&running, &echo).await.unwrap();
    c.build(&running).await.unwrap();
    settle(&c, &running, ExperimentState::Building).await;
    stub.plan(&running, Phase::Run, Step::Hold);
    c.run(&running).await.unwrap();
    assert_eq!(c.experiment(&running).await.unwrap().state, ExperimentState::Running);
    assert!(!server.shutdown().await, "held actions cannot drain");

    let (_server, c) = start_with(cfg, vec![Arc::new(ScriptedBackend::new("stub"))]).await;
    let b = c.experiment(&building).await.unwrap();
    assert_eq!((b.state, b.detail.as_deref()), (ExperimentState::BuildFailed, Some("interrupted")));
    let r = c.experiment(&running).await.unwrap();
    assert_eq!((r.state, r.detail.as_deref()), (ExperimentState::RunFailed, Some("interrupted")));
    // the build that completed before the crash is still on record
    assert_eq!(r.action_log.len(), 1);
    assert_eq!(r.action_log[0].action, Phase::Build);
}
