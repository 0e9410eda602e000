use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clickseg::model::Model;
use clickseg::ModelConfig;
use clickseg_service::{router, AppState, OverlayView, SessionView};
use http_body_util::BodyExt;
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app_with(max_sessions: usize) -> Router {
    let model = Model::<f64>::new(ModelConfig::default(), 3).unwrap();
    router(AppState::new(model, max_sessions))
}

fn app() -> Router {
    app_with(8)
}

fn png_rgb(h: u32, w: u32) -> String {
    let img = RgbImage::from_fn(w, h, |x, y| {
        let inside = (x as i32 - w as i32 / 2).pow(2) + (y as i32 - h as i32 / 2).pow(2) < (h.min(w) as i32 / 4).pow(2);
        if inside {
            Rgb([220, 60, 40])
        } else {
            Rgb([30, (x * 3) as u8, 90])
        }
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    B64.encode(buf.into_inner())
}

fn png_gray(h: u32, w: u32, f: impl Fn(u32, u32) -> bool) -> String {
    let img = GrayImage::from_fn(w, h, |x, y| Luma([if f(x, y) { 255 } else { 0 }]));
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    B64.encode(buf.into_inner())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, v)
}

async fn create(app: &Router, body: Value) -> SessionView {
    let (s, v) = call(app, "POST", "/session", Some(body)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn click(app: &Router, id: &str, row: i64, col: i64, polarity: &str) -> (StatusCode, Value) {
    call(app, "POST", &format!("/session/{id}/click"), Some(json!({"row": row, "col": col, "polarity": polarity}))).await
}

fn gray_pixels(b64: &str) -> GrayImage {
    image::load_from_memory(&B64.decode(b64).unwrap()).unwrap().to_luma8()
}

#[tokio::test]
async fn create_session_from_png() {
    let app = app();
    let v = create(&app, json!({"image_png": png_rgb(64, 64)})).await;
    assert!(!v.session_id.is_empty());
    assert_eq!((v.height, v.width, v.click_count, v.history_depth), (64, 64, 0, 1));
    assert!(v.iou.is_none());
    assert!(gray_pixels(&v.mask_png).pixels().all(|p| p.0[0] == 0));
    let (s, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((s, body), (StatusCode::OK, Value::String("ok".into())));
}

#[tokio::test]
async fn corrupt_image_is_bad_request() {
    let app = app();
    let (s, v) = call(&app, "POST", "/session", Some(json!({"image_png": B64.encode(b"not a png at all")}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("image_png"));
    let (s, _) = call(&app, "POST", "/session", Some(json!({"image_png": "%%%"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn mismatched_masks_are_rejected() {
    let app = app();
    for field in ["initial_mask_png", "gt_mask_png"] {
        let (s, v) = call(&app, "POST", "/session", Some(json!({"image_png": png_rgb(64, 64), field: png_gray(32, 64, |_, _| true)}))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{field}");
        assert!(v["error"].as_str().unwrap().contains(field));
    }
}

#[tokio::test]
async fn oversized_image_is_rejected() {
    let app = app();
    let (s, _) = call(&app, "POST", "/session", Some(json!({"image_png": png_rgb(4, 2100)}))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn initial_mask_and_gt_are_used() {
    let app = app();
    let half = png_gray(64, 64, |x, _| x < 32);
    let v = create(&app, json!({"image_png": png_rgb(64, 64), "initial_mask_png": half, "gt_mask_png": half})).await;
    assert_eq!(v.iou, Some(1.0));
    let m = gray_pixels(&v.mask_png);
    assert_eq!(m.get_pixel(10, 5).0[0], 255);
    assert_eq!(m.get_pixel(40, 5).0[0], 0);
}

#[tokio::test]
async fn out_of_bounds_click_is_unprocessable() {
    let app = app();
    let v = create(&app, json!({"image_png": png_rgb(64, 48)})).await;
    for (r, c) in [(-1, 0), (0, -1), (64, 0), (0, 48)] {
        let (s, _) = click(&app, &v.session_id, r, c, "positive").await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "({r}, {c})");
    }
    let (s, _) = click(&app, &v.session_id, 63, 47, "negative").await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&app, "POST", &format!("/session/{}/click", v.session_id), Some(json!({"row": 1, "col": 1, "polarity": "maybe"}))).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn click_undo_redo_is_byte_identical() {
    let app = app();
    let v = create(&app, json!({"image_png": png_rgb(64, 64)})).await;
    let id = v.session_id.clone();
    let (s, first) = click(&app, &id, 32, 32, "positive").await;
    assert_eq!(s, StatusCode::OK);
    let first: SessionView = serde_json::from_value(first).unwrap();
    assert_eq!((first.click_count, first.history_depth), (1, 2));
    assert_eq!(first.clicks[0].row, 32);

    let (s, undone) = call(&app, "POST", &format!("/session/{id}/undo"), None).await;
    assert_eq!(s, StatusCode::OK);
    let undone: SessionView = serde_json::from_value(undone).unwrap();
    assert_eq!(undone, v);

    let (_, again) = click(&app, &id, 32, 32, "positive").await;
    let again: SessionView = serde_json::from_value(again).unwrap();
    assert_eq!(again, first);
}

#[tokio::test]
async fn get_echoes_click_log() {
    let app = app();
    let id = create(&app, json!({"image_png": png_rgb(40, 64)})).await.session_id;
    click(&app, &id, 5, 60, "positive").await;
    click(&app, &id, 30, 2, "negative").await;
    let (s, v) = call(&app, "GET", &format!("/session/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["click_count"], 2);
    assert_eq!(v["clicks"], json!([{"row": 5, "col": 60, "polarity": "positive"}, {"row": 30, "col": 2, "polarity": "negative"}]));
    let mask = gray_pixels(v["mask_png"].as_str().unwrap());
    assert_eq!((mask.height(), mask.width()), (40, 64));
}

#[tokio::test]
async fn reset_and_undo_at_start() {
    let app = app();
    let id = create(&app, json!({"image_png": png_rgb(64, 64)})).await.session_id;
    let (s, _) = call(&app, "POST", &format!("/session/{id}/undo"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    for (r, c) in [(10, 10), (20, 40), (50, 50)] {
        click(&app, &id, r, c, "positive").await;
    }
    let (s, v) = call(&app, "POST", &format!("/session/{id}/reset"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((v["click_count"].as_u64(), v["history_depth"].as_u64()), (Some(0), Some(1)));
    let (s, _) = call(&app, "POST", &format!("/session/{id}/undo"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn overlays_without_clicks_are_uniform() {
    let app = app();
    let id = create(&app, json!({"image_png": png_rgb(64, 64)})).await.session_id;
    for stage in 0..4 {
        let (s, v) = call(&app, "GET", &format!("/session/{id}/overlays?stage={stage}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let o: OverlayView = serde_json::from_value(v).unwrap();
        let sim = gray_pixels(&o.similarity_png);
        let first = sim.get_pixel(0, 0).0[0];
        assert!(sim.pixels().all(|p| p.0[0] == first), "stage {stage}");
        assert_eq!((sim.width(), sim.height()), (64, 64));
        let att = gray_pixels(&o.aggregated_attention_png);
        assert_eq!(att.pixels().map(|p| p.0[0]).max(), Some(255));
    }
}

#[tokio::test]
async fn clicked_cell_is_fully_similar() {
    let app = app();
    let id = create(&app, json!({"image_png": png_rgb(64, 64)})).await.session_id;
    click(&app, &id, 33, 30, "positive").await;
    for stage in 0..4 {
        let (_, v) = call(&app, "GET", &format!("/session/{id}/overlays?stage={stage}"), None).await;
        let o: OverlayView = serde_json::from_value(v).unwrap();
        let sim = gray_pixels(&o.similarity_png);
        assert_eq!(sim.get_pixel(30, 33).0[0], 255, "stage {stage}");
    }
}

#[tokio::test]
async fn unknown_session_and_bad_stage() {
    let app = app();
    for (m, uri) in [
        ("GET", "/session/nope"),
        ("POST", "/session/nope/undo"),
        ("POST", "/session/nope/reset"),
        ("GET", "/session/nope/overlays?stage=0"),
    ] {
        let (s, v) = call(&app, m, uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert!(v["error"].is_string());
    }
    let (s, _) = click(&app, "nope", 0, 0, "positive").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let id = create(&app, json!({"image_png": png_rgb(64, 64)})).await.session_id;
    let (s, _) = call(&app, "GET", &format!("/session/{id}/overlays?stage=4"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn least_recently_used_session_is_evicted() {
    let app = app_with(2);
    let a = create(&app, json!({"image_png": png_rgb(16, 16)})).await.session_id;
    let b = create(&app, json!({"image_png": png_rgb(16, 16)})).await.session_id;
    // touch a so b becomes the oldest
    assert_eq!(call(&app, "GET", &format!("/session/{a}"), None).await.0, StatusCode::OK);
    let c = create(&app, json!({"image_png": png_rgb(16, 16)})).await.session_id;
    assert_eq!(call(&app, "GET", &format!("/session/{a}"), None).await.0, StatusCode::OK);
    assert_eq!(call(&app, "GET", &format!("/session/{b}"), None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", &format!("/session/{c}"), None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn replaying_a_click_log_reproduces_masks() {
    let app = app();
    let body = json!({"image_png": png_rgb(48, 64), "initial_mask_png": png_gray(48, 64, |x, y| x > 20 && y > 10)});
    let a = create(&app, body.clone()).await;
    let b = create(&app, body).await;
    let log = [(24, 32, "positive"), (5, 5, "negative"), (30, 40, "positive")];
    for (r, c, p) in log {
        let (_, va) = click(&app, &a.session_id, r, c, p).await;
        let (_, vb) = click(&app, &b.session_id, r, c, p).await;
        assert_eq!(va["mask_png"], vb["mask_png"]);
        assert_eq!(va["prob_png"], vb["prob_png"]);
    }
    let (_, reset) = call(&app, "POST", &format!("/session/{}/reset", a.session_id), None).await;
    assert_eq!(reset["mask_png"].as_str().unwrap(), a.mask_png);
}
