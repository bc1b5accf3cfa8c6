#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, Response};
use http_body_util::BodyExt;
use lesionscreen_core::classifier::{train, LabeledImage};
use lesionscreen_core::segmentation::stub::{all_foreground, FixedBlackoutBackend};
use lesionscreen_core::synthetic::texture_image;
use lesionscreen_core::*;
use lesionscreen_service::compressor::CompressorPolicy;
use lesionscreen_service::server::{router, AppState};
use tower::ServiceExt;

pub const BOUNDARY: &str = "lesionscreen-test-boundary";

/// A small trained model: random backbone, one epoch on 12 textures.
pub fn tiny_model() -> Model {
    let labeled = |offset: u64| -> Vec<LabeledImage> {
        (0..12)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Monkeypox } else { Label::Others };
                LabeledImage { image: texture_image(label, offset + i, 48).unwrap(), label }
            })
            .collect()
    };
    let model = build_model(
        &HeadSpec::default(),
        BackboneSource::Random { spec: BackboneSpec::default(), seed: 3 },
        3,
    )
    .unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, seed: 1, ..TrainConfig::default() };
    train(model, &labeled(0), &labeled(100), &cfg, &|img: &ScreeningImage| img.clone()).unwrap().model
}

pub fn stub_stages() -> Stages {
    Stages::new(
        Some(Arc::new(all_foreground(BackendKind::SalientObject))),
        Some(Arc::new(FixedBlackoutBackend { kind: BackendKind::SkinRegion, blackout: 0.1 })),
    )
    .unwrap()
}

pub fn state_with(model: Arc<Model>, policy: CompressorPolicy) -> AppState {
    let screener = Screener::new(model, stub_stages(), PipelineConfig::default()).unwrap();
    AppState::new(screener, policy)
}

pub fn png(w: u32, h: u32, seed: u32) -> Vec<u8> {
    ScreeningImage::from_fn(w, h, "t", |x, y| {
        let v = (x * 7 + y * 13 + seed * 31) % 256;
        [v as u8, (200 - v / 2) as u8, 90]
    })
    .unwrap()
    .encode_png()
    .unwrap()
}

pub fn multipart(field: &str, filename: &str, content_type: &str, bytes: &[u8]) -> Vec<u8> {
    let mut body = format!(
        "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"{filename}\"\r\nContent-Type: {content_type}\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn screen_request(body: Vec<u8>) -> Request<Body> {
    Request::post("/v1/screen")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

pub async fn call(app: &axum::Router, req: Request<Body>) -> (u16, serde_json::Value) {
    let resp: Response<Body> = app.clone().oneshot(req).await.unwrap();
    let status = resp.status().as_u16();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    (status, json)
}

pub fn app(state: AppState) -> axum::Router {
    router(Arc::new(state), None)
}
