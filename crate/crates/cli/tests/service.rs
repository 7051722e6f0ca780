use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use countgd::data::{CountingSample, DatasetSpec, Shape};
use countgd::encoders::{EncoderConfig, Vocabulary};
use countgd::inference::PromptMode;
use countgd::model::{CountingModel, ModelConfig};
use countgd::training::{train, AugmentConfig, LossConfig, Schedule, TrainConfig};
use countgd_cli::service::{router, AppState, Loaded, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    model: CountingModel,
    samples: Vec<CountingSample>,
    dir: tempfile::TempDir,
}

/// A model fitted to a handful of single-class scenes with exemplar-only
/// prompts, and those scenes saved as PNG files.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let samples = DatasetSpec::default().generate(1, 20).unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                stride: 8,
                channels: [64, 64, 64],
                d_model: 32,
            },
            image_side: 96,
            k: 50,
            ..ModelConfig::default()
        };
        let mut model = CountingModel::new(cfg, Vocabulary::new(Shape::ALL.iter().map(|s| s.name()))).unwrap();
        let tc = TrainConfig {
            epochs: 100,
            max_steps: Some(400),
            batch_size: 4,
            schedule: Schedule {
                lr: 1e-3,
                decay_every: 64,
                decay_factor: 0.1,
            },
            grad_clip: Some(1.0),
            augment: AugmentConfig::flip_only(),
            mode: PromptMode::Exemplars,
            loss: LossConfig {
                lambda_loc: 5.0,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        train(&mut model, &samples, &[], &tc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for s in &samples {
            s.image.save_png(&dir.path().join(format!("{}.png", s.id))).unwrap();
        }
        Fixture { model, samples, dir }
    })
}

fn app_with_model() -> axum::Router {
    let f = fixture();
    let state = AppState::new(ServiceConfig {
        image_root: Some(f.dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    state.swap(Loaded {
        model: f.model.clone(),
        checkpoint: None,
        metadata: json!({ "purpose": "test" }),
    });
    router(state)
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    call_raw(app, req).await
}

async fn call_raw(app: axum::Router, req: Request<Body>) -> (StatusCode, Value, String) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8_lossy(&bytes).to_string();
    (status, serde_json::from_str(&text).unwrap_or(Value::Null), text)
}

fn boxes_of(s: &CountingSample) -> Value {
    json!(s.primary().exemplars.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect::<Vec<_>>())
}

#[tokio::test]
async fn health_is_ok_even_without_a_model() {
    let app = router(AppState::new(ServiceConfig::default()));
    let (status, _, text) = call(app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(text, "ok");
}

#[tokio::test]
async fn model_endpoints_answer_503_without_a_model() {
    let app = router(AppState::new(ServiceConfig::default()));
    let (status, body, _) = call(app.clone(), "GET", "/model", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "no model loaded");
    let (status, _, _) = call(app, "POST", "/predict", Some(json!({ "image": "x.png", "text": "circle" }))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn model_echoes_its_configuration() {
    let (status, body, _) = call(app_with_model(), "GET", "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["config"]["k"], 50);
    assert_eq!(body["config"]["image_side"], 96);
    assert!(body["vocabulary"].as_array().unwrap().iter().any(|w| w == "circle"));
    assert_eq!(body["metadata"]["purpose"], "test");
    assert_eq!(body["defaults"]["sigma"], 0.23);
}

#[tokio::test]
async fn exemplar_only_prompt_counts_against_ground_truth() {
    let f = fixture();
    let s = &f.samples[3];
    let req = json!({ "image": format!("{}.png", s.id), "boxes": boxes_of(s) });
    let (status, body, text) = call(app_with_model(), "POST", "/predict", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{text}");
    let count = body["count"].as_u64().unwrap() as i64;
    assert!((count - s.count() as i64).abs() <= 1, "count {count} vs {}", s.count());
    let detections = body["detections"].as_array().unwrap();
    assert_eq!(detections.len() as i64, count);
    // every detection sits on a true object
    for d in detections {
        let (x, y) = (d["x"].as_f64().unwrap(), d["y"].as_f64().unwrap());
        let near = s.primary().points.iter().any(|p| (p.0 - x).hypot(p.1 - y) <= 6.0);
        assert!(near, "detection at ({x:.1}, {y:.1}) is not on an object");
        assert!(d["confidence"].as_f64().unwrap() > 0.23);
    }
    // one summary per exemplar token, one score per query
    assert_eq!(body["tokens"].as_array().unwrap().len(), 3);
    assert_eq!(body["tokens"][0]["kind"], "exemplar");
    assert_eq!(body["queries"].as_array().unwrap().len(), 50);
}

#[tokio::test]
async fn inline_image_matches_path_and_repeats_exactly() {
    let f = fixture();
    let s = &f.samples[0];
    let bytes = std::fs::read(f.dir.path().join(format!("{}.png", s.id))).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
    let by_path = json!({ "image": format!("{}.png", s.id), "boxes": boxes_of(s), "text": "circle" });
    let inline = json!({ "image_base64": b64, "boxes": boxes_of(s), "text": "circle" });
    let (_, a, _) = call(app_with_model(), "POST", "/predict", Some(by_path.clone())).await;
    let (_, b, _) = call(app_with_model(), "POST", "/predict", Some(inline)).await;
    let (_, c, _) = call(app_with_model(), "POST", "/predict", Some(by_path)).await;
    assert!(a["count"].is_u64());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[tokio::test]
async fn higher_sigma_never_counts_more() {
    let f = fixture();
    let s = &f.samples[5];
    let mut counts = Vec::new();
    for sigma in [0.1, 0.3, 0.5, 0.9] {
        let req = json!({ "image": format!("{}.png", s.id), "boxes": boxes_of(s), "sigma": sigma });
        let (status, body, _) = call(app_with_model(), "POST", "/predict", Some(req)).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["sigma"], sigma);
        counts.push(body["count"].as_u64().unwrap());
    }
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
}

#[tokio::test]
async fn malformed_requests_name_the_field() {
    let f = fixture();
    let image = format!("{}.png", f.samples[0].id);
    let cases = [
        (json!({ "text": "circle" }), "image"),
        (json!({ "image": image, "image_base64": "AAAA", "text": "circle" }), "image"),
        (json!({ "image": "missing.png", "text": "circle" }), "image"),
        (json!({ "image": "../etc/passwd", "text": "circle" }), "image"),
        (json!({ "image_base64": "not base64!", "text": "circle" }), "image_base64"),
        (json!({ "image": image }), "text"),
        (json!({ "image": image, "text": "  " }), "text"),
        (json!({ "image": image, "text": "circle", "sigma": 1.5 }), "sigma"),
        (json!({ "image": image, "boxes": [[10, 10, 5, 20]] }), "boxes[0]"),
        (json!({ "image": image, "boxes": [[1, 1, 5, 5], [0, 0, 500, 20]] }), "boxes[1]"),
        (json!({ "image": image, "boxes": [[1, 2, 3]] }), "boxes[0]"),
        (json!({ "image": image, "text": "circle", "colour": "red" }), "colour"),
        (json!({ "image": image, "text": "hexagon" }), "text"),
        (json!({ "image": image, "text": "circle", "keyword_span": [1, 1] }), "keyword_span"),
        (json!({ "image": image, "text": "circle", "keyword_span": [0, 5] }), "keyword_span"),
        (json!({ "image": image, "text": "circle", "sigma": "high" }), "sigma"),
        (json!({ "image": image, "boxes": [[1, 1, 5, 5]], "masks": ["rle:1,1:0,1", "rle:1,1:0,1"] }), "masks"),
        (json!({ "image": image, "boxes": [[1, 1, 5, 5]], "masks": ["rle:broken"] }), "masks[0]"),
    ];
    for (req, field) in cases {
        let (status, body, text) = call(app_with_model(), "POST", "/predict", Some(req.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{req} -> {text}");
        assert_eq!(body["field"], field, "{req} -> {text}");
        assert!(!body["error"].as_str().unwrap().is_empty());
    }
    // not JSON at all
    let req = Request::builder()
        .method("POST")
        .uri("/predict")
        .body(Body::from("{not json"))
        .unwrap();
    let (status, body, _) = call_raw(app_with_model(), req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "body");
}

#[tokio::test]
async fn swapping_the_model_affects_later_requests_only() {
    let state = AppState::new(ServiceConfig::default());
    let app = router(Arc::clone(&state));
    let (status, _, _) = call(app.clone(), "GET", "/model", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let mut model = fixture().model.clone();
    model.set_image_side(64).unwrap();
    state.swap(Loaded {
        model,
        checkpoint: None,
        metadata: Value::Null,
    });
    let (status, body, _) = call(app, "GET", "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["config"]["image_side"], 64);
}
