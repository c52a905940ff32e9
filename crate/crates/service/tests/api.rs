use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use acu_core::config::PipelineConfig;
use acu_core::pipeline::{run_pipeline, run_report};
use acu_core::store::Store;
use acu_core::triage;
use acu_service::{serve, ErrorBody, ServeError, ServerHandle, ServiceConfig};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

fn fixture_config(dir: &Path) -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/e2e/config.json");
    let mut config = PipelineConfig::load(&path).unwrap();
    config.paths.store_dir = dir.join("store");
    config
}

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

async fn start(store_dir: PathBuf) -> ServerHandle {
    serve(ServiceConfig {
        store_dir,
        bind: any_port(),
        auth_token_env_var: None,
    })
    .await
    .unwrap()
}

/// A served store holding one completed fixture run.
async fn seeded() -> (tempfile::TempDir, Store, String, ServerHandle) {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    let run_id = run_pipeline(&config, None).await.unwrap().run_id;
    let store = Store::open(&config.paths.store_dir).unwrap();
    let server = start(config.paths.store_dir.clone()).await;
    (dir, store, run_id, server)
}

async fn get(server: &ServerHandle, path: &str) -> (StatusCode, Value) {
    let resp = Client::new()
        .get(format!("{}{path}", server.url()))
        .send()
        .await
        .unwrap();
    let status = resp.status();
    assert_eq!(resp.headers()["content-type"], "application/json", "{path}");
    (status, resp.json().await.unwrap())
}

async fn post(server: &ServerHandle, path: &str, body: Value) -> (StatusCode, Value) {
    let resp = Client::new()
        .post(format!("{}{path}", server.url()))
        .json(&body)
        .send()
        .await
        .unwrap();
    let status = resp.status();
    (status, resp.json().await.unwrap())
}

fn code(body: &Value) -> &str {
    body["code"].as_str().unwrap_or_default()
}

#[tokio::test]
async fn empty_store_lists_no_runs() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path().to_path_buf()).await;
    let (status, body) = get(&server, "/runs").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!([]));
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn unknown_run_is_a_json_404() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path().to_path_buf()).await;
    for path in ["/runs/deadbeef/errors", "/runs/deadbeef/report", "/runs/deadbeef"] {
        let (status, body) = get(&server, path).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        let err: ErrorBody = serde_json::from_value(body).unwrap();
        assert_eq!(err.code, "UnknownRun");
        assert!(!err.message.is_empty());
    }
}

#[tokio::test]
async fn reads_match_direct_module_calls() {
    let (_dir, store, run_id, server) = seeded().await;

    let (_, runs) = get(&server, "/runs").await;
    assert_eq!(runs, serde_json::to_value(store.list_runs().unwrap()).unwrap());

    let (_, report) = get(&server, &format!("/runs/{run_id}/report")).await;
    assert_eq!(
        report,
        serde_json::to_value(run_report(&store, &run_id).unwrap()).unwrap()
    );
    assert_eq!(
        report["overall"]["matrix"],
        json!({"tp": 5, "fp": 1, "tn": 2, "fn": 2, "unparsed": 0})
    );

    let labels = store.run_labels(&run_id).unwrap();
    let (_, errors) = get(&server, &format!("/runs/{run_id}/errors")).await;
    assert_eq!(
        errors,
        serde_json::to_value(triage::list_errors(&store, &run_id, &labels).unwrap()).unwrap()
    );
    assert_eq!(errors.as_array().unwrap().len(), 3);

    let (_, profile) = get(&server, &format!("/advertisers/adv-01/profile?run={run_id}")).await;
    assert_eq!(
        profile,
        serde_json::to_value(store.find_profile("adv-01", Some(&run_id)).unwrap()).unwrap()
    );

    let (_, categories) = get(&server, "/triage/categories").await;
    assert_eq!(
        categories,
        serde_json::to_value(triage::categories(&store).unwrap()).unwrap()
    );

    let (_, page) = get(&server, "/runs?limit=1&offset=1").await;
    assert_eq!(page, json!([]));

    let (status, body) = get(&server, "/advertisers/adv-99/profile").await;
    assert_eq!((status, code(&body)), (StatusCode::NOT_FOUND, "UnknownAdvertiser"));
}

#[tokio::test]
async fn holdout_advertisers_cannot_be_binned() {
    let (_dir, store, run_id, server) = seeded().await;
    let (status, body) = post(
        &server,
        "/triage/assignments",
        json!({"run_id": run_id, "advertiser_id": "adv-05", "category_id": "missed-brand-context", "note": "x"}),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(code(&body), "HoldoutViolation");

    let (status, body) = post(
        &server,
        "/triage/assignments",
        json!({"run_id": run_id, "advertiser_id": "adv-04", "category_id": "missed-brand-context", "note": "kids transport"}),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body, json!({"assignment_id": 1}));
    let (_, current) = get(&server, &format!("/runs/{run_id}/assignments")).await;
    assert_eq!(
        current,
        serde_json::to_value(triage::current_assignments(&store, &run_id).unwrap()).unwrap()
    );
    assert_eq!(current["adv-04"]["reviewer_note"], "kids transport");
    let (_, hist) = get(&server, &format!("/runs/{run_id}/histogram")).await;
    assert_eq!(hist, json!({"missed-brand-context": 1}));
    let (_, audit) = get(&server, "/triage/audit").await;
    assert_eq!(audit, json!([]));

    let (status, body) = post(
        &server,
        "/triage/assignments",
        json!({"run_id": "nope", "advertiser_id": "adv-04", "category_id": "missed-brand-context"}),
    )
    .await;
    assert_eq!((status, code(&body)), (StatusCode::NOT_FOUND, "UnknownRun"));
    let (status, body) = post(
        &server,
        "/triage/assignments",
        json!({"run_id": run_id, "advertiser_id": "adv-04", "category_id": "nope"}),
    )
    .await;
    assert_eq!((status, code(&body)), (StatusCode::NOT_FOUND, "UnknownCategory"));
}

#[tokio::test]
async fn hint_exposure_flows_into_labels() {
    let (_dir, _store, run_id, server) = seeded().await;
    let (status, hidden) = get(
        &server,
        &format!("/advertisers/adv-04/verdict?run={run_id}&hints=hidden"),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(hidden["decision"], "VIOLATING");
    assert_eq!(hidden["hints_shown"], false);
    assert!(hidden.get("advertiser_summary").is_none());

    let (status, label) = post(
        &server,
        "/labels",
        json!({"advertiser_id": "adv-04", "label": "NON_VIOLATING", "reviewer": "r1"}),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(label["hints_were_shown"], false);

    let (_, shown) = get(&server, "/advertisers/adv-08/verdict?hints=shown").await;
    assert_eq!(shown["run_id"], run_id.as_str());
    assert!(shown["advertiser_summary"]
        .as_str()
        .unwrap()
        .starts_with("Mock summary"));
    let (_, label) = post(
        &server,
        "/labels",
        json!({"advertiser_id": "adv-08", "label": "VIOLATING", "reviewer": "r1"}),
    )
    .await;
    assert_eq!(label["hints_were_shown"], true);

    let (_, label) = post(
        &server,
        "/labels",
        json!({"advertiser_id": "adv-02", "label": "NON_VIOLATING", "reviewer": "r2", "hints_were_shown": true}),
    )
    .await;
    assert_eq!(label["hints_were_shown"], true);

    let (_, all) = get(&server, "/labels").await;
    let flags: Vec<(&str, bool)> = all
        .as_array()
        .unwrap()
        .iter()
        .map(|l| {
            (
                l["advertiser_id"].as_str().unwrap(),
                l["hints_were_shown"].as_bool().unwrap(),
            )
        })
        .collect();
    assert_eq!(flags, [("adv-04", false), ("adv-08", true), ("adv-02", true)]);

    let (status, body) = post(
        &server,
        "/labels",
        json!({"advertiser_id": "adv-10", "label": "NON_VIOLATING"}),
    )
    .await;
    assert_eq!((status, code(&body)), (StatusCode::BAD_REQUEST, "InvalidRequest"));
    let (status, body) = get(&server, "/advertisers/adv-11/verdict").await;
    assert_eq!((status, code(&body)), (StatusCode::NOT_FOUND, "NoVerdict"));
}

#[tokio::test]
async fn categories_and_revisions() {
    let (_dir, _store, _run_id, server) = seeded().await;
    let (status, cat) = post(
        &server,
        "/triage/categories",
        json!({"title": "Landing page mismatch", "description": "d"}),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(cat["category_id"], "landing-page-mismatch");
    let (status, body) = post(&server, "/triage/categories", json!({"title": "Landing page mismatch"})).await;
    assert_eq!((status, code(&body)), (StatusCode::CONFLICT, "DuplicateCategory"));

    let rev = |from: u32| json!({"template_id": "nfs_advertiser", "from_revision": from, "addressed_category_ids": ["landing-page-mismatch"], "change_note": "n"});
    let (status, body) = post(&server, "/triage/revisions", rev(1)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["position"], 1);
    assert_eq!(body["entry"]["to_revision"], 2);
    let (status, body) = post(&server, "/triage/revisions", rev(1)).await;
    assert_eq!((status, code(&body)), (StatusCode::CONFLICT, "RevisionGap"));
    let mut skip = rev(2);
    skip["to_revision"] = json!(4);
    let (status, body) = post(&server, "/triage/revisions", skip).await;
    assert_eq!((status, code(&body)), (StatusCode::CONFLICT, "RevisionGap"));
    let (status, _) = post(&server, "/triage/revisions", rev(2)).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, ledger) = get(&server, "/triage/revisions").await;
    assert_eq!(ledger.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn requests_must_be_json() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(dir.path().to_path_buf()).await;
    let client = Client::new();
    let resp = client
        .post(format!("{}/labels", server.url()))
        .header("content-type", "text/plain")
        .body("{}")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(code(&body), "UnsupportedMediaType");

    let resp = client
        .post(format!("{}/labels", server.url()))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    assert_eq!(code(&resp.json::<Value>().await.unwrap()), "InvalidJson");

    let (status, body) = post(&server, "/labels", json!({"advertiser_id": "a", "label": "MAYBE"})).await;
    assert_eq!((status, code(&body)), (StatusCode::BAD_REQUEST, "InvalidJson"));

    let (status, body) = get(&server, "/nowhere").await;
    assert_eq!((status, code(&body)), (StatusCode::NOT_FOUND, "NotFound"));
    let resp = client.delete(format!("{}/runs", server.url())).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(code(&resp.json::<Value>().await.unwrap()), "MethodNotAllowed");
    let (status, body) = get(&server, "/runs?limit=abc").await;
    assert_eq!((status, code(&body)), (StatusCode::BAD_REQUEST, "InvalidRequest"));
}

#[tokio::test]
async fn bearer_token_is_enforced_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var("ACU_SERVICE_TEST_TOKEN", "t0ken");
    let server = serve(ServiceConfig {
        store_dir: dir.path().to_path_buf(),
        bind: any_port(),
        auth_token_env_var: Some("ACU_SERVICE_TEST_TOKEN".into()),
    })
    .await
    .unwrap();
    let (status, body) = get(&server, "/runs").await;
    assert_eq!((status, code(&body)), (StatusCode::UNAUTHORIZED, "Unauthorized"));
    let resp = Client::new()
        .get(format!("{}/runs", server.url()))
        .bearer_auth("t0ken")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let (status, _) = get(&server, "/health").await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn startup_errors() {
    let dir = tempfile::tempdir().unwrap();
    let first = start(dir.path().to_path_buf()).await;
    let err = serve(ServiceConfig {
        store_dir: dir.path().to_path_buf(),
        bind: first.local_addr(),
        auth_token_env_var: None,
    })
    .await
    .err()
    .unwrap();
    assert!(matches!(err, ServeError::PortInUse(_)), "{err}");

    let err = serve(ServiceConfig {
        store_dir: dir.path().join("missing"),
        bind: any_port(),
        auth_token_env_var: None,
    })
    .await
    .err()
    .unwrap();
    assert!(matches!(err, ServeError::StoreUnavailable(_)), "{err}");

    let addr = first.local_addr();
    first.shutdown().await.unwrap();
    assert!(Client::new().get(format!("http://{addr}/health")).send().await.is_err());
}
