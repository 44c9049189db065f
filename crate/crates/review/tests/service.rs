use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use workbench_core::dedup::digest_bytes;
use workbench_core::triage::{build_round, ConfirmationRule, LossEntry, LossReport, TriageConfig};
use workbench_core::{ClassId, DatasetManifest, SampleRecord, Workspace};
use workbench_review::{QueueItem, ReviewService};

/// 1000 unverified samples; round 1 flags the 300 lowest and 300 highest losses.
fn fixture(dir: &Path) -> Workspace {
    let ws = Workspace::new(dir.join("manifest.jsonl"));
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let mut m = DatasetManifest::new(DatasetManifest::roman_classes(), 10_000).unwrap();
    let mut report = LossReport::default();
    for i in 0..1000usize {
        let id = format!("s{i:04}");
        let rel = format!("images/{id}.png");
        let bytes = format!("png-{i}").into_bytes();
        std::fs::write(dir.join(&rel), &bytes).unwrap();
        let label = ClassId::from(i % 10);
        m.insert(SampleRecord::new(&id, rel, digest_bytes(&bytes), label)).unwrap();
        // confidence in the true label falls with i
        let p = 0.999 - 0.998 * i as f64 / 1000.0;
        let mut probs = vec![(1.0 - p) / 9.0; 10];
        probs[i % 10] = p;
        report.entries.push(LossEntry::from_probabilities(id, label, probs));
    }
    let config = TriageConfig {
        k: 300,
        l: 300,
        require_human_confirmation_of_head: true,
    };
    let (m, queue) = build_round(&m, &report, &config, 1, None).unwrap();
    ws.save_manifest(&m).unwrap();
    ws.save_queue(&queue).unwrap();
    ws
}

fn open(ws: &Workspace) -> axum::Router {
    ReviewService::open(ws.manifest_path(), ConfirmationRule::AnyCorrection)
        .unwrap()
        .router()
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &axum::Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post_verdict(app: &axum::Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/verdict")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn queue(app: &axum::Router, uri: &str) -> Vec<QueueItem> {
    let (s, v) = get_json(app, uri).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn queue_lists_every_flagged_sample_with_filters() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(&fixture(dir.path()));
    let all = queue(&app, "/api/queue?round=1").await;
    assert_eq!(all.len(), 600);
    let head = queue(&app, "/api/queue?round=1&kind=confident_head").await;
    let tail = queue(&app, "/api/queue?round=1&kind=suspect_tail").await;
    assert_eq!((head.len(), tail.len()), (300, 300));
    assert!(head.windows(2).all(|w| w[0].loss <= w[1].loss));
    assert!(tail.windows(2).all(|w| w[0].loss >= w[1].loss));
    let item = &head[0];
    assert_eq!(item.image_url, format!("/api/sample/{}/image", item.sample_id));
    assert_eq!(item.round, 1);

    let (s, v) = get_json(&app, "/api/queue?round=7").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_round");
    let (s, _) = get_json(&app, "/api/queue?round=1&kind=middle").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = get_json(&app, "/api/queue?round=x").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = get_json(&app, "/api/rounds").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["round"], 1);
    assert_eq!(v[0]["total"], 600);
}

#[tokio::test]
async fn certify_bumps_version_and_leaves_the_queue() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(&fixture(dir.path()));
    let item = queue(&app, "/api/queue?round=1&kind=confident_head").await.remove(0);
    let (s, v) = post_verdict(
        &app,
        json!({"sample_id": item.sample_id, "action": "certify", "expected_version": item.version}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["version"], item.version + 1);
    assert_eq!(v["status"], "certified");
    assert_eq!(v["split"], "train");
    let rest = queue(&app, "/api/queue?round=1").await;
    assert_eq!(rest.len(), 599);
    assert!(rest.iter().all(|i| i.sample_id != item.sample_id));
}

#[tokio::test]
async fn malformed_verdicts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(&fixture(dir.path()));
    let tail = queue(&app, "/api/queue?round=1&kind=suspect_tail").await;
    let item = &tail[0];

    let (s, v) = post_verdict(
        &app,
        json!({"sample_id": item.sample_id, "action": "relabel", "expected_version": item.version}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid_verdict");
    assert_eq!(v["sample_id"], item.sample_id);

    let (s, _) = post_verdict(&app, json!({"sample_id": item.sample_id, "action": "bless", "expected_version": 0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, v) = post_verdict(&app, json!({"sample_id": "nope", "action": "certify", "expected_version": 0})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_sample");

    // s0500 sits in the middle of the ranking and was never flagged
    let (s, v) = post_verdict(&app, json!({"sample_id": "s0500", "action": "certify", "expected_version": 0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "not_flagged");

    let req = Request::post("/api/verdict").body(Body::from("{not json")).unwrap();
    let (s, _) = call(&app, req).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, v) = post_verdict(
        &app,
        json!({"sample_id": item.sample_id, "action": "reject", "expected_version": item.version + 5}),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "version_conflict");
    assert_eq!(queue(&app, "/api/queue?round=1").await.len(), 600);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_verdicts_on_one_sample_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(&fixture(dir.path()));
    let item = queue(&app, "/api/queue?round=1&kind=suspect_tail").await.remove(0);
    let a = json!({"sample_id": item.sample_id, "action": "reject", "expected_version": item.version});
    let b = json!({"sample_id": item.sample_id, "action": "relabel", "new_label": 3, "expected_version": item.version});
    let (ra, rb) = tokio::join!(
        tokio::spawn({
            let app = app.clone();
            async move { post_verdict(&app, a).await }
        }),
        tokio::spawn({
            let app = app.clone();
            async move { post_verdict(&app, b).await }
        }),
    );
    let mut statuses = vec![ra.unwrap().0, rb.unwrap().0];
    statuses.sort();
    assert_eq!(statuses, vec![StatusCode::OK, StatusCode::CONFLICT]);
    assert_eq!(
        Workspace::new(dir.path().join("manifest.jsonl")).load_verdicts().unwrap().len(),
        1
    );
}

#[tokio::test]
async fn verdicts_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixture(dir.path());
    let app = open(&ws);
    let items = queue(&app, "/api/queue?round=1&kind=suspect_tail").await;
    for item in &items[..5] {
        let (s, _) = post_verdict(
            &app,
            json!({"sample_id": item.sample_id, "action": "reject", "expected_version": item.version, "reviewer": "ana"}),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
    }
    drop(app);
    let app = open(&ws);
    assert_eq!(queue(&app, "/api/queue?round=1").await.len(), 595);
    let log = ws.load_verdicts().unwrap();
    assert_eq!(log.len(), 5);
    assert!(log.iter().all(|v| v.reviewer == "ana" && v.round == 1));
    let m = ws.load_manifest().unwrap();
    assert_eq!(m.get(&items[0].sample_id).unwrap().version, items[0].version + 1);
}

#[tokio::test]
async fn stats_report_pipeline_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(&fixture(dir.path()));
    let (s, v) = get_json(&app, "/api/stats?round=1").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["reviewed"], 0);
    assert_eq!(v["report"]["pipeline_accuracy"], 0.0);

    // 300 head certified, 252 tail rejected, 48 tail wrongly certified: 552 / 600
    let head = queue(&app, "/api/queue?round=1&kind=confident_head").await;
    let tail = queue(&app, "/api/queue?round=1&kind=suspect_tail").await;
    for item in &head {
        post_verdict(&app, json!({"sample_id": item.sample_id, "action": "certify", "expected_version": item.version})).await;
    }
    for (i, item) in tail.iter().enumerate() {
        let action = if i < 252 { "reject" } else { "certify" };
        let (s, _) = post_verdict(&app, json!({"sample_id": item.sample_id, "action": action, "expected_version": item.version})).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, v) = get_json(&app, "/api/stats?round=1").await;
    assert_eq!(v["reviewed"], 600);
    assert!((v["report"]["pipeline_accuracy"].as_f64().unwrap() - 0.92).abs() < 1e-12);
    // 348 certified of 748 non-excluded records
    assert!((v["report"]["ratio_validated"].as_f64().unwrap() - 348.0 / 748.0).abs() < 1e-12);
    assert!(queue(&app, "/api/queue?round=1").await.is_empty());
}

#[tokio::test]
async fn images_are_served_by_id_only() {
    let dir = tempfile::tempdir().unwrap();
    let app = open(&fixture(dir.path()));
    let (s, body) = call(&app, Request::get("/api/sample/s0007/image").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"png-7");
    let (s, _) = call(&app, Request::get("/api/sample/..%2Fmanifest.jsonl/image").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Request::get("/api/nothing").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
