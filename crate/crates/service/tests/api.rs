use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ipdm_core::domain::ConditionScale;
use ipdm_core::ingest::{self, ColumnMapping, NetworkStore};
use ipdm_core::Error;
use ipdm_service::api::{router, AppState};
use ipdm_service::jobs::{JobKind, JobManager, JobRecord, JobState};

const MAPPING: &str = "condition=cond\ninspector=insp\nyear=yr\nstructure=struct\nelement=elem\ncategory=cat\n";

const CSV: &str = "\
struct,cat,elem,yr,insp,cond
130,beams,1,2001,A,90
130,beams,1,2004,B,86
130,beams,1,2008,A,81
130,beams,1,2011,C,79
130,decks,1,2003,B,88
130,decks,2,2005,A,70
212,beams,7,2010,C,95
";

fn sample_store(dir: &Path) -> NetworkStore {
    let csv = dir.join("db.csv");
    std::fs::write(&csv, CSV).unwrap();
    let m = ColumnMapping::parse(MAPPING).unwrap();
    ingest::read_csv(&csv, &m, ConditionScale::default()).unwrap().0
}

fn empty_store() -> NetworkStore {
    NetworkStore { scale: ConditionScale::default(), attribute_names: Vec::new(), bridges: Default::default() }
}

fn app(store: NetworkStore, jobs_dir: &Path, k: usize) -> (Router, Arc<JobManager>) {
    let jobs = JobManager::open(jobs_dir, k).unwrap();
    let state = Arc::new(AppState { store, params_dir: None, jobs: jobs.clone() });
    (router(state), jobs)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body.map(|b| b.to_string())).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn poll(app: &Router, id: &str) -> JobRecord {
    let deadline = Instant::now() + Duration::from_secs(300);
    loop {
        let (s, v) = call(app, "GET", &format!("/api/jobs/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let r: JobRecord = serde_json::from_value(v).unwrap();
        if r.state.is_finished() {
            return r;
        }
        assert!(Instant::now() < deadline, "job {id} did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn empty_store_lists_no_bridges() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(empty_store(), tmp.path(), 1);
    let (s, v) = call(&app, "GET", "/api/bridges", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));
    let (s, v) = call(&app, "GET", "/api/version", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["api"], "1");
}

#[tokio::test]
async fn hierarchy_navigation() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(sample_store(tmp.path()), &tmp.path().join("jobs"), 1);
    let (_, v) = call(&app, "GET", "/api/bridges", None).await;
    assert_eq!(v, json!(["130", "212"]));
    let (_, v) = call(&app, "GET", "/api/bridges/130/categories", None).await;
    assert_eq!(v, json!(["beams", "decks"]));
    let (s, v) = call(&app, "GET", "/api/bridges/130/categories/decks/elements", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([{ "id": "1", "n_inspections": 1 }, { "id": "2", "n_inspections": 1 }]));

    let (s, v) = call(&app, "GET", "/api/elements/130%2Fbeams%2F1/series", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["id"], "130/beams/1");
    let years: Vec<f64> = v["inspections"].as_array().unwrap().iter().map(|i| i["year"].as_f64().unwrap()).collect();
    assert_eq!(years.len(), 4);
    assert!(years.windows(2).all(|w| w[0] < w[1]));

    // Short key when the element id is unique within the bridge.
    let (s, v) = call(&app, "GET", "/api/elements/212%2F7/series", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["id"], "212/beams/7");
    // Ambiguous short key.
    let (s, _) = call(&app, "GET", "/api/elements/130%2F1/series", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_ids_name_their_level() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(sample_store(tmp.path()), &tmp.path().join("jobs"), 1);
    let (s, v) = call(&app, "GET", "/api/elements/130%2Fbeams%2F99/series", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["level"], "element");
    let (s, v) = call(&app, "GET", "/api/bridges/999/categories", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["level"], "bridge");
    let (s, v) = call(&app, "GET", "/api/bridges/130/categories/roofs/elements", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["level"], "category");
    let (s, v) = call(&app, "GET", "/api/jobs/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["level"], "job");
}

#[tokio::test]
async fn schema_violations_are_400() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(sample_store(tmp.path()), &tmp.path().join("jobs"), 1);
    let (s, _) = call_raw(&app, "POST", "/api/jobs", Some("{not json".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/api/jobs", Some(json!({ "kind": "dance", "config": {} }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/api/jobs", Some(json!({ "kind": "train", "config": { "epochs": 3 } }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/api/analyses/deterioration", Some(json!({ "horizon": 5 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) =
        call(&app, "POST", "/api/analyses/deterioration", Some(json!({ "element": "130/beams/1", "horizon": -1 })))
            .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn single_observation_forecast_band_widens() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(sample_store(tmp.path()), &tmp.path().join("jobs"), 1);
    let (s, v) =
        call(&app, "POST", "/api/analyses/deterioration", Some(json!({ "element": "130/decks/2", "horizon": 10 })))
            .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["params_source"], "default");
    let states = v["states"].as_array().unwrap();
    let fc: Vec<&Value> = states.iter().filter(|s| s["kind"] == "forecast").collect();
    assert_eq!(fc.len(), 10);
    let widths: Vec<f64> =
        fc.iter().map(|s| s["condition_high"].as_f64().unwrap() - s["condition_low"].as_f64().unwrap()).collect();
    assert!(widths.windows(2).all(|w| w[1] > w[0]), "{widths:?}");
    for s in states {
        let (lo, m, hi) = (
            s["condition_low"].as_f64().unwrap(),
            s["condition_mean"].as_f64().unwrap(),
            s["condition_high"].as_f64().unwrap(),
        );
        assert!(25.0 <= lo && lo <= m && m <= hi && hi <= 100.0);
    }
}

#[tokio::test]
async fn job_lifecycle() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(empty_store(), &tmp.path().join("jobs"), 1);
    let cfg = json!({ "config": { "time_span": 20, "n_series": 30, "n_inspectors": 4, "seed": 9 } });
    let t0 = Instant::now();
    let (s, v) = call(&app, "POST", "/api/jobs", Some(json!({ "kind": "generate", "config": cfg }))).await;
    assert!(t0.elapsed() < Duration::from_millis(100));
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = v["id"].as_str().unwrap().to_string();
    let r = poll(&app, &id).await;
    assert_eq!(r.state, JobState::Done, "{:?}", r.error);
    let loc = r.result.clone().unwrap();
    assert!(loc.join("observed.csv").is_file());

    let (s, v) = call(&app, "GET", &format!("/api/jobs/{id}/result"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["files"].as_array().unwrap().iter().any(|f| f == "observed.csv"));
    let (s, body) = call_raw(&app, "GET", &format!("/api/jobs/{id}/result/observed.csv"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, std::fs::read(loc.join("observed.csv")).unwrap());
    let (s, _) = call_raw(&app, "GET", &format!("/api/jobs/{id}/result/missing.csv"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, _) = call(&app, "DELETE", &format!("/api/jobs/{id}"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, v) = call(&app, "GET", "/api/jobs", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn failing_job_reports_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, _) = app(empty_store(), &tmp.path().join("jobs"), 1);
    let missing = tmp.path().join("nowhere");
    let (s, v) = call(&app, "POST", "/api/jobs", Some(json!({ "kind": "train", "config": { "data": missing } }))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let r = poll(&app, v["id"].as_str().unwrap()).await;
    assert_eq!(r.state, JobState::Failed);
    assert!(r.error.unwrap().contains("neither"));
    assert!(r.result.is_none());
    let (s, _) = call(&app, "GET", &format!("/api/jobs/{}/result", r.id), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrency_limit_queues_second_job() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, jobs) = app(empty_store(), &tmp.path().join("jobs"), 1);
    let gate = Arc::new(std::sync::Barrier::new(2));
    let g = gate.clone();
    let first = jobs
        .submit_work(
            JobKind::Train,
            json!({}),
            Box::new(move |_, _| {
                g.wait();
                Ok(Vec::new())
            }),
        )
        .unwrap();
    let second = jobs.submit_work(JobKind::Train, json!({}), Box::new(|_, _| Ok(Vec::new()))).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while jobs.get(&first.id).unwrap().state != JobState::Running {
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert_eq!(jobs.get(&second.id).unwrap().state, JobState::Queued);
    let g = gate.clone();
    tokio::task::spawn_blocking(move || g.wait()).await.unwrap();
    assert_eq!(jobs.wait(&first.id).await.unwrap().state, JobState::Done);
    assert_eq!(jobs.wait(&second.id).await.unwrap().state, JobState::Done);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cancelling_running_generate_deletes_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, jobs) = app(empty_store(), &tmp.path().join("jobs"), 1);
    let cfg = json!({ "config": { "time_span": 60, "n_series": 2000000, "n_inspectors": 30 } });
    let (s, v) = call(&app, "POST", "/api/jobs", Some(json!({ "kind": "generate", "config": cfg }))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id = v["id"].as_str().unwrap().to_string();
    let deadline = Instant::now() + Duration::from_secs(30);
    while jobs.get(&id).unwrap().state != JobState::Running {
        assert!(Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let (s, _) = call(&app, "DELETE", &format!("/api/jobs/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let r = poll(&app, &id).await;
    assert_eq!(r.state, JobState::Cancelled);
    assert!(r.result.is_none());
    let left: Vec<_> =
        std::fs::read_dir(tmp.path().join("jobs").join(&id)).unwrap().flatten().map(|e| e.file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("job.json")]);
}

#[tokio::test]
async fn queued_job_cancels_immediately() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, jobs) = app(empty_store(), &tmp.path().join("jobs"), 1);
    let gate = Arc::new(std::sync::Barrier::new(2));
    let g = gate.clone();
    let first = jobs
        .submit_work(
            JobKind::Generate,
            json!({}),
            Box::new(move |_, _| {
                g.wait();
                Ok(Vec::new())
            }),
        )
        .unwrap();
    let second = jobs.submit_work(JobKind::Generate, json!({}), Box::new(|_, _| panic!("must not run"))).unwrap();
    let r = jobs.cancel(&second.id).unwrap();
    assert_eq!(r.state, JobState::Cancelled);
    let g = gate.clone();
    tokio::task::spawn_blocking(move || g.wait()).await.unwrap();
    assert_eq!(jobs.wait(&first.id).await.unwrap().state, JobState::Done);
    assert_eq!(jobs.wait(&second.id).await.unwrap().state, JobState::Cancelled);
}

#[tokio::test]
async fn worker_panic_fails_job_and_service_stays_up() {
    let tmp = tempfile::tempdir().unwrap();
    let (app, jobs) = app(empty_store(), &tmp.path().join("jobs"), 1);
    let r = jobs.submit_work(JobKind::Verify, json!({}), Box::new(|_, _| panic!("boom"))).unwrap();
    let r = jobs.wait(&r.id).await.unwrap();
    assert_eq!(r.state, JobState::Failed);
    assert!(r.error.as_deref().unwrap().contains("boom"));
    assert!(r.log_tail.iter().any(|l| l.contains("boom")));
    let (s, _) = call(&app, "GET", "/api/bridges", None).await;
    assert_eq!(s, StatusCode::OK);
    let ok = jobs.submit_work(JobKind::Verify, json!({}), Box::new(|_, _| Ok(Vec::new()))).unwrap();
    assert_eq!(jobs.wait(&ok.id).await.unwrap().state, JobState::Done);
}

#[tokio::test]
async fn restart_marks_interrupted_jobs_failed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("jobs");
    let done_id;
    {
        let jobs = JobManager::open(&dir, 1).unwrap();
        let r = jobs
            .submit_work(
                JobKind::Generate,
                json!({}),
                Box::new(|out, _| {
                    std::fs::create_dir_all(out).unwrap();
                    std::fs::write(out.join("a.txt"), b"x").unwrap();
                    Ok(vec!["a.txt".into()])
                }),
            )
            .unwrap();
        done_id = r.id.clone();
        assert_eq!(jobs.wait(&r.id).await.unwrap().state, JobState::Done);
    }
    // A record left behind by a process that died mid-run.
    let stale = JobRecord {
        id: "stale".into(),
        kind: JobKind::Train,
        state: JobState::Running,
        progress: 0.4,
        config: json!({}),
        result: None,
        files: Vec::new(),
        error: None,
        log_tail: vec!["running".into()],
    };
    std::fs::create_dir_all(dir.join("stale/result.partial")).unwrap();
    std::fs::write(dir.join("stale/job.json"), serde_json::to_vec(&stale).unwrap()).unwrap();

    let jobs = JobManager::open(&dir, 1).unwrap();
    let r = jobs.get("stale").unwrap();
    assert_eq!(r.state, JobState::Failed);
    assert!(!dir.join("stale/result.partial").exists());
    let d = jobs.get(&done_id).unwrap();
    assert_eq!(d.state, JobState::Done);
    assert_eq!(std::fs::read(d.result.unwrap().join("a.txt")).unwrap(), b"x");
}

#[test]
fn error_status_mapping() {
    use axum::response::IntoResponse;
    let r = ipdm_service::api::ApiError::from(Error::NotFound { level: "element", id: "x".into() }).into_response();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = ipdm_service::api::ApiError::from(Error::InvalidInput("x".into())).into_response();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = ipdm_service::api::ApiError::from(Error::Degenerate("x".into())).into_response();
    assert_eq!(r.status(), StatusCode::INTERNAL_SERVER_ERROR);
}
