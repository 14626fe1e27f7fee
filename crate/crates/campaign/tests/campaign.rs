use std::time::Duration;

use serde_json::json;
use simhub_campaign::{run_campaign, CampaignError, CampaignSpec, RunOutcome};
use simhub_core::client::EvalApiClient;
use simhub_core::storage::RecordLink;
use simhub_core::{Phase, Scalar};
use simhub_server::{Server, ServiceConfig};
use simhub_testkit as kit;
use tempfile::TempDir;

async fn service(backends: serde_json::Value) -> (TempDir, Server, EvalApiClient) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServiceConfig::new(dir.path());
    cfg.listen = "127.0.0.1:0".parse().unwrap();
    cfg.systems = ["echo-sim", "sleep-sim"]
        .iter()
        .map(|s| RecordLink {
            repo_url: kit::system_repo(s).to_string_lossy().into_owned(),
            revision: None,
        })
        .collect();
    cfg.backends = serde_json::from_value(backends).unwrap();
    let server = simhub_server::serve(cfg).await.unwrap();
    let client = EvalApiClient::new(&server.url(), None).unwrap();
    (dir, server, client)
}

fn local() -> serde_json::Value {
    json!([{"id": "local", "kind": "local", "capacity": "unbounded"}])
}

/// `n` sleep-sim points of `ms` milliseconds each.
fn sleeps(n: usize, ms: i64, parallelism: serde_json::Value) -> CampaignSpec {
    let values: Vec<_> = (0..n)
        .map(|i| json!({"run_parameters": {"run_time_ms": ms * 1000, "layer": i}}))
        .collect();
    serde_json::from_value(json!({
        "system": {"name": "sleep-sim", "version": "1.0"},
        "backend": "local",
        "parallelism": parallelism,
        "axes": [{"name": "layer", "values": values}]
    }))
    .unwrap()
}

#[tokio::test]
async fn waves_respect_parallelism_and_work_conservation() {
    let (_d, _s, c) = service(local()).await;
    let d = 0.3;
    let report = run_campaign(&c, &sleeps(6, 300, json!(3))).await.unwrap();
    assert_eq!(report.runs.len(), 6);
    assert_eq!(report.failures, 0);
    assert!(report.max_active <= 3, "{}", report.max_active);
    let indices: Vec<_> = report.runs.iter().map(|r| r.index).collect();
    assert_eq!(indices, (0..6).collect::<Vec<_>>());
    let lower = 2.0 * d;
    assert!(report.makespan_s >= lower, "{}", report.makespan_s);
    assert!(report.makespan_s <= lower * 1.25, "{}", report.makespan_s);
    let longest = report.runs.iter().map(|r| r.duration_s).fold(0.0, f64::max);
    assert!(report.makespan_s >= longest);
    assert!(report.makespan_s <= report.total_cpu_time_s);
    assert!(report.summary_table().contains("Compute Environment"));
}

#[tokio::test]
async fn makespan_does_not_grow_with_parallelism() {
    let (_d, _s, c) = service(local()).await;
    let mut medians = Vec::new();
    for p in [1, 2, 4] {
        let mut m = Vec::new();
        for _ in 0..3 {
            m.push(run_campaign(&c, &sleeps(4, 100, json!(p))).await.unwrap().makespan_s);
        }
        m.sort_by(f64::total_cmp);
        medians.push(m[1]);
    }
    assert!(medians[0] >= medians[1] && medians[1] >= medians[2], "{medians:?}");
}

#[tokio::test]
async fn later_axis_wins_and_payloads_follow_the_points() {
    let (_d, _s, c) = service(local()).await;
    let spec: CampaignSpec = serde_json::from_value(json!({
        "system": {"name": "echo-sim", "version": "1.0"},
        "parallelism": "unbounded",
        "axes": [
            {"name": "seed", "values": [{"run_parameters": {"seed": 1, "label": "from-seed"}},
                                        {"run_parameters": {"seed": 2}}]},
            {"name": "label", "values": [{"run_parameters": {"label": "x"}},
                                         {"run_parameters": {"label": "y"}},
                                         {"build_parameters": {"opt_level": "O0"}}]}
        ]
    }))
    .unwrap();
    let report = run_campaign(&c, &spec).await.unwrap();
    assert_eq!(report.runs.len(), 6);
    assert_eq!(report.failures, 0);
    for run in &report.runs {
        let id = run.experiment.as_ref().unwrap();
        let exp = c.experiment(id).await.unwrap();
        let seed = [1, 2][run.coords[0]];
        let label = match (run.coords[0], run.coords[1]) {
            (_, 0) => Some("x"),
            (_, 1) => Some("y"),
            (0, _) => Some("from-seed"),
            _ => None,
        };
        assert_eq!(exp.config.run_overrides["seed"], Scalar::Int(seed));
        assert_eq!(exp.config.run_overrides.get("label"), label.map(Scalar::from).as_ref());
        let trace = String::from_utf8(c.result_payload(id, "signal_trace").await.unwrap()).unwrap();
        assert!(trace.contains(&format!("$param seed {seed} $end")), "{trace}");
    }
}

#[tokio::test]
async fn failures_are_retried_and_recorded() {
    let (_d, _s, c) = service(local()).await;
    let spec: CampaignSpec = serde_json::from_value(json!({
        "system": {"name": "echo-sim", "version": "1.0"},
        "parallelism": 2,
        "retries": 2,
        "axes": [{"name": "exit", "values": [{"run_parameters": {"exit_code": 0}},
                                             {"run_parameters": {"exit_code": 4}},
                                             {"build_parameters": {"fail_build": true}}]}]
    }))
    .unwrap();
    let report = run_campaign(&c, &spec).await.unwrap();
    assert_eq!(report.runs.len(), 3);
    assert_eq!(report.failures, 2);
    assert_eq!(report.runs[0].outcome, RunOutcome::Finished);
    assert_eq!(report.runs[0].attempts.len(), 1);
    assert_eq!(report.runs[1].outcome, RunOutcome::RunFailed);
    assert_eq!(report.runs[1].attempts.len(), 3);
    assert_eq!(report.runs[2].outcome, RunOutcome::BuildFailed);
    let failed = c.experiment(report.runs[1].experiment.as_ref().unwrap()).await.unwrap();
    assert_eq!(failed.last_outcome(Phase::Run).unwrap().exit_status, 4);
}

#[tokio::test]
async fn invalid_points_are_rejected_before_any_run() {
    let (_d, _s, c) = service(local()).await;
    let spec: CampaignSpec = serde_json::from_value(json!({
        "system": {"name": "echo-sim", "version": "1.0"},
        "parallelism": 1,
        "axes": [{"name": "a", "values": [{"run_parameters": {"seed": 1}}, {"run_parameters": {"sede": 1}}]}]
    }))
    .unwrap();
    let err = run_campaign(&c, &spec).await.unwrap_err();
    assert!(matches!(err, CampaignError::Spec(_)), "{err}");
    assert_eq!(c.list_experiments(&Default::default()).await.unwrap().total, 0);
}

#[tokio::test]
async fn empty_axis_yields_an_empty_report() {
    let (_d, _s, c) = service(local()).await;
    let mut spec = sleeps(1, 10, json!(1));
    spec.axes[0].values.clear();
    let report = run_campaign(&c, &spec).await.unwrap();
    assert!(report.runs.is_empty());
    assert_eq!(report.makespan_s, 0.0);
}

#[tokio::test]
async fn unreachable_service_aborts() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = EvalApiClient::new(&format!("http://127.0.0.1:{port}"), None).unwrap();
    let err = run_campaign(&c, &sleeps(2, 10, json!(1))).await.unwrap_err();
    assert!(matches!(err, CampaignError::Unreachable(_)), "{err}");
}

#[tokio::test]
async fn service_going_away_mid_campaign_aborts() {
    let (_d, server, c) = service(local()).await;
    let spec = sleeps(4, 2000, json!(1));
    let run = tokio::spawn(async move { run_campaign(&c, &spec).await });
    tokio::time::sleep(Duration::from_millis(500)).await;
    let stopper = tokio::spawn(server.shutdown());
    let err = tokio::time::timeout(Duration::from_secs(30), run).await.unwrap().unwrap().unwrap_err();
    assert!(matches!(err, CampaignError::Unreachable(_)), "{err}");
    stopper.await.unwrap();
}

#[tokio::test]
async fn timed_out_runs_are_reported() {
    let (_d, _s, c) = service(local()).await;
    let mut spec = sleeps(1, 3000, json!(1));
    spec.per_run_timeout_s = 0.5;
    spec.retries = 0;
    let report = run_campaign(&c, &spec).await.unwrap();
    assert_eq!(report.runs[0].outcome, RunOutcome::TimedOut);
}
