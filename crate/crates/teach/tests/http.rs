use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use pnp_core::attention::{AttentionConfig, AttentionVariant};
use pnp_core::geometry::CameraModel;
use pnp_core::numerics::HourglassConfig;
use pnp_core::scene::{decode_observation, oracle, Task};
use pnp_core::transport::{TransportConfig, TransportVariant};
use pnp_teach::http::{router, ErrorBody, Observation, Proposal};
use pnp_teach::session::{ExecReport, Phase, Status, TeachConfig, Teacher, TestRow};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

fn net(out: usize) -> HourglassConfig {
    HourglassConfig {
        in_channels: 4,
        out_channels: out,
        base_channels: 4,
        stages: 2,
        blocks: 0,
    }
}

fn teacher(dir: &Path) -> Arc<Teacher> {
    let cam = CameraModel::square(0.2, 64);
    let mut c = TeachConfig::new(dir);
    c.attention = AttentionConfig {
        variant: AttentionVariant::InputCropped,
        crop: 17,
        network: net(1),
        camera: cam,
    };
    c.transport = TransportConfig {
        variant: TransportVariant::QueryRotated,
        crop: 17,
        network: net(3),
        camera: cam,
    };
    c.steps_per_demo = 200;
    Arc::new(Teacher::open(c).unwrap())
}

async fn call(t: &Arc<Teacher>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req
            .header("content-type", "application/json")
            .body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(Arc::clone(t)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

async fn ok<T: DeserializeOwned>(t: &Arc<Teacher>, method: &str, uri: &str, body: Option<Value>) -> T {
    let (status, bytes) = call(t, method, uri, body).await;
    assert!(
        status.is_success(),
        "{method} {uri}: {status} {}",
        String::from_utf8_lossy(&bytes)
    );
    serde_json::from_slice(&bytes).unwrap()
}

async fn err(t: &Arc<Teacher>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let (status, bytes) = call(t, method, uri, body).await;
    let e: ErrorBody = serde_json::from_slice(&bytes)
        .unwrap_or_else(|_| panic!("{uri}: not an error body: {}", String::from_utf8_lossy(&bytes)));
    assert!(!e.message.is_empty());
    (status, e.code)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_cycle_over_http() {
    let tmp = tempfile::tempdir().unwrap();
    let t = teacher(tmp.path());
    let s: Status = ok(
        &t,
        "POST",
        "/sessions",
        Some(json!({"task": "insertion:cuboid", "seed": 3})),
    )
    .await;
    let id = s.session_id;
    let base = format!("/sessions/{id}");

    let obs: Observation = ok(&t, "GET", &format!("{base}/observation"), None).await;
    assert_eq!((obs.width, obs.height), (64, 64));
    let raster = decode_observation(&B64.decode(&obs.obs1).unwrap()).unwrap();
    assert_eq!(raster, t.observation(&id).unwrap());
    let png = B64.decode(&obs.rgb_png).unwrap();
    let mut reader = png::Decoder::new(std::io::Cursor::new(png)).read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(
        (info.width, info.height, info.color_type),
        (64, 64, png::ColorType::Rgb)
    );
    for (px, rgbd) in buf.chunks_exact(3).zip(raster.values().chunks_exact(4)) {
        for c in 0..3 {
            assert_eq!(px[c], (rgbd[c] * 255.0).round() as u8);
        }
    }

    let pick: Proposal = ok(&t, "POST", &format!("{base}/propose"), Some(json!({"phase": "pick"}))).await;
    let p = pick.pose;
    let s: Status = ok(
        &t,
        "POST",
        &format!("{base}/correct"),
        Some(json!({"x": p.x, "y": p.y, "theta": p.theta, "source": "proposal_accepted"})),
    )
    .await;
    assert_eq!(s.phase, Phase::AwaitPlace);
    let place: Proposal = ok(
        &t,
        "POST",
        &format!("{base}/propose"),
        Some(json!({"phase": "await_place"})),
    )
    .await;
    let q = place.pose;
    let [_, y0, _, y1] = t.config().camera().bounds();
    let nudge = if q.y > (y0 + y1) / 2.0 { -0.002 } else { 0.002 };
    let _: Status = ok(
        &t,
        "POST",
        &format!("{base}/correct"),
        Some(json!({"x": q.x, "y": q.y + nudge, "theta": q.theta, "source": "user_adjusted"})),
    )
    .await;
    let (code, bytes) = call(&t, "POST", &format!("{base}/record"), None).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let s: Status = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(s.dataset_size, 1);

    // Status keeps answering while the session trains.
    let mut seen_training = false;
    let final_status = loop {
        let s: Status = ok(&t, "GET", &format!("{base}/status"), None).await;
        let v: Value = ok(&t, "GET", &format!("{base}/status"), None).await;
        for key in ["phase", "step", "losses", "dataset_size"] {
            assert!(v.get(key).is_some(), "status lacks {key}");
        }
        if s.phase == Phase::Training {
            seen_training = true;
            let _: Observation = ok(&t, "GET", &format!("{base}/observation"), None).await;
        } else {
            break s;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert!(seen_training);
    assert_eq!(final_status.phase, Phase::Idle);
    assert_eq!((final_status.step.attention, final_status.step.transport), (200, 200));

    let scene = t.scene(&id).unwrap();
    let (op, oq) = oracle(&scene, 0).unwrap()[0];
    let ex: ExecReport = ok(
        &t,
        "POST",
        &format!("{base}/execute"),
        Some(json!({"pick": op, "place": oq})),
    )
    .await;
    assert!(ex.success);
    let _: ExecReport = ok(&t, "POST", &format!("{base}/execute"), None).await;
    let rows: Vec<TestRow> = ok(&t, "GET", &format!("{base}/test?scenes=2&seed=5"), None).await;
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].scenes, 2);
    let again: Vec<TestRow> = ok(&t, "GET", &format!("{base}/test?scenes=2&seed=5"), None).await;
    assert_eq!(again, rows);

    let ids: Vec<String> = ok(&t, "GET", "/sessions", None).await;
    assert_eq!(ids, [id]);
}

#[tokio::test]
async fn errors_carry_codes_and_statuses() {
    let tmp = tempfile::tempdir().unwrap();
    let t = teacher(tmp.path());
    assert_eq!(
        err(&t, "GET", "/sessions/none/status", None).await,
        (StatusCode::NOT_FOUND, "not_found".into())
    );
    assert_eq!(
        err(&t, "POST", "/sessions", Some(json!({"task": "stacking"}))).await,
        (StatusCode::BAD_REQUEST, "bad_request".into())
    );
    let s: Status = ok(&t, "POST", "/sessions", Some(json!({"task": "insertion:cube"}))).await;
    let base = format!("/sessions/{}", s.session_id);
    assert_eq!(
        err(&t, "POST", &format!("{base}/propose"), Some(json!({"phase": "place"}))).await,
        (StatusCode::CONFLICT, "phase_mismatch".into())
    );
    assert_eq!(
        err(
            &t,
            "POST",
            &format!("{base}/propose"),
            Some(json!({"phase": "sideways"}))
        )
        .await,
        (StatusCode::BAD_REQUEST, "bad_request".into())
    );
    assert_eq!(
        err(&t, "POST", &format!("{base}/record"), None).await,
        (StatusCode::CONFLICT, "phase_mismatch".into())
    );
    let _: Proposal = ok(&t, "POST", &format!("{base}/propose"), Some(json!({"phase": "pick"}))).await;
    assert_eq!(
        err(
            &t,
            "POST",
            &format!("{base}/correct"),
            Some(json!({"x": 5.0, "y": 0.0, "theta": 0.0, "source": "user_adjusted"}))
        )
        .await,
        (StatusCode::UNPROCESSABLE_ENTITY, "out_of_bounds".into())
    );
    assert_eq!(
        err(
            &t,
            "POST",
            &format!("{base}/execute"),
            Some(json!({"pick": {"x": 0.0, "y": 0.0, "theta": 0.0}}))
        )
        .await,
        (StatusCode::BAD_REQUEST, "bad_request".into())
    );
    assert_eq!(
        err(&t, "GET", &format!("{base}/test?scenes=0"), None).await,
        (StatusCode::BAD_REQUEST, "bad_request".into())
    );
    assert_eq!(
        err(&t, "GET", &format!("{base}/test?scenes=many"), None).await,
        (StatusCode::BAD_REQUEST, "bad_request".into())
    );
    let task: Task = "insertion:cube".parse().unwrap();
    assert_eq!(t.status(&s.session_id).unwrap().task, task);
}
