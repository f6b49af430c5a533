use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use facemark_core::config::ModelConfig;
use facemark_core::data::default_identities;
use facemark_core::geometry::LandmarkTopology;
use facemark_core::image::ImageTensor;
use facemark_core::registry::{ModelRegistry, TargetInfo};
use facemark_service::{cors, router, AppState, SynthResponse, TargetEntry};
use http_body_util::BodyExt;
use tower::ServiceExt;

fn registry() -> ModelRegistry {
    let ids = default_identities(&LandmarkTopology::toy12()).unwrap();
    let infos = ids
        .iter()
        .map(|s| TargetInfo {
            id: s.target_id.clone(),
            display_name: s.display_name.clone(),
            canonical: s.canonical.clone(),
        })
        .collect();
    ModelRegistry::new(ModelConfig::desk(), infos, 3).unwrap()
}

fn app() -> Router {
    router(AppState::loaded(registry()), cors(None).unwrap())
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (
        status,
        res.into_body().collect().await.unwrap().to_bytes().to_vec(),
    )
}

fn post(body: &serde_json::Value) -> Request<Body> {
    Request::post("/synthesize")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn neutral() -> Vec<[f64; 2]> {
    default_identities(&LandmarkTopology::toy12()).unwrap()[0]
        .canonical
        .points()
        .to_vec()
}

#[tokio::test]
async fn valid_request_returns_decodable_png() {
    let app = app();
    let body = serde_json::json!({"target_id": "ada", "landmarks": neutral()});
    let (status, bytes) = call(&app, post(&body)).await;
    assert_eq!(status, StatusCode::OK);
    let res: SynthResponse = serde_json::from_slice(&bytes).unwrap();
    let png = base64::engine::general_purpose::STANDARD
        .decode(&res.image)
        .unwrap();
    let img = ImageTensor::decode_png(&png).unwrap();
    assert_eq!((img.height(), img.width()), (64, 64));
    assert_eq!(res.converted_landmarks.len(), 12);
    assert!(res.warnings.is_empty());
}

#[tokio::test]
async fn bypass_echoes_the_input_landmarks() {
    let app = app();
    let body =
        serde_json::json!({"target_id": "chen", "landmarks": neutral(), "bypass_converter": true});
    let (status, bytes) = call(&app, post(&body)).await;
    assert_eq!(status, StatusCode::OK);
    let res: SynthResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(res.converted_landmarks, neutral());
}

#[tokio::test]
async fn wrong_point_count_is_a_bad_request() {
    let app = app();
    let mut lms = neutral();
    lms.pop();
    let (status, bytes) = call(
        &app,
        post(&serde_json::json!({"target_id": "ada", "landmarks": lms})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.contains("expected 12"), "{text}");
}

#[tokio::test]
async fn malformed_bodies_are_bad_requests() {
    let app = app();
    let raw = Request::post("/synthesize")
        .header("content-type", "application/json")
        .body(Body::from("{\"target_id\": \"ada\", "))
        .unwrap();
    assert_eq!(call(&app, raw).await.0, StatusCode::BAD_REQUEST);
    let wrong_type = serde_json::json!({"target_id": "ada", "landmarks": "nope"});
    assert_eq!(
        call(&app, post(&wrong_type)).await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn unknown_target_is_not_found() {
    let app = app();
    let (status, bytes) = call(
        &app,
        post(&serde_json::json!({"target_id": "zed", "landmarks": neutral()})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(String::from_utf8(bytes).unwrap().contains("boris"));
    assert_eq!(
        call(&app, get("/canonical/zed")).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn out_of_range_points_are_clamped_with_a_warning() {
    let app = app();
    let mut lms = neutral();
    lms[0] = [-0.2, 1.3];
    let (status, bytes) = call(
        &app,
        post(&serde_json::json!({"target_id": "ada", "landmarks": lms})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let res: SynthResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(res.warnings.len(), 1);
}

#[tokio::test]
async fn unloaded_service_is_unavailable() {
    let app = router(AppState::default(), cors(None).unwrap());
    let body = serde_json::json!({"target_id": "ada", "landmarks": neutral()});
    assert_eq!(
        call(&app, post(&body)).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    assert_eq!(
        call(&app, get("/targets")).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    assert_eq!(
        call(&app, get("/canonical/ada")).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
}

#[tokio::test]
async fn targets_are_listed_in_stable_order() {
    let app = app();
    let (status, a) = call(&app, get("/targets")).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, get("/targets")).await;
    assert_eq!(a, b);
    let list: Vec<TargetEntry> = serde_json::from_slice(&a).unwrap();
    let ids: Vec<&str> = list.iter().map(|t| t.target_id.as_str()).collect();
    assert_eq!(ids, ["ada", "boris", "chen", "dara", "emil"]);
    assert_eq!(list[0].display_name, "Ada");
}

#[tokio::test]
async fn canonical_landmarks_are_normalized() {
    let app = app();
    let (status, bytes) = call(&app, get("/canonical/dara")).await;
    assert_eq!(status, StatusCode::OK);
    let pts: Vec<[f64; 2]> = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(pts, neutral());
    assert!(pts.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[tokio::test]
async fn cors_headers_are_sent() {
    let app = app();
    let req = Request::get("/targets")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let res = app.oneshot(req).await.unwrap();
    assert!(res.headers().contains_key("access-control-allow-origin"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_serial_ones() {
    use rand::{Rng, SeedableRng};
    let app = app();
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let ids = ["ada", "boris", "chen", "dara", "emil"];
    let bodies: Vec<serde_json::Value> = (0..10)
        .map(|i| {
            let lms: Vec<[f64; 2]> = neutral()
                .iter()
                .map(|p| {
                    [
                        p[0] + rng.random_range(-0.02..0.02),
                        p[1] + rng.random_range(-0.02..0.02),
                    ]
                })
                .collect();
            serde_json::json!({"target_id": ids[i % 5], "landmarks": lms})
        })
        .collect();
    let mut serial = Vec::new();
    for b in &bodies {
        serial.push(call(&app, post(b)).await);
    }
    let handles: Vec<_> = bodies
        .iter()
        .rev()
        .map(|b| {
            let app = app.clone();
            let req = post(b);
            tokio::spawn(async move { call(&app, req).await })
        })
        .collect();
    let mut concurrent = Vec::new();
    for h in handles {
        concurrent.push(h.await.unwrap());
    }
    concurrent.reverse();
    assert_eq!(serial, concurrent);
}

#[tokio::test]
async fn synthesis_p95_latency_is_under_half_a_second() {
    let app = app();
    let body = serde_json::json!({"target_id": "emil", "landmarks": neutral()});
    let mut times = Vec::new();
    for _ in 0..40 {
        let t = Instant::now();
        let (status, _) = call(&app, post(&body)).await;
        assert_eq!(status, StatusCode::OK);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let p95 = times[(times.len() * 95).div_ceil(100) - 1];
    println!("p95 /synthesize latency: {:.1} ms", p95 * 1e3);
    assert!(p95 < 0.5, "p95 {p95}s");
}
