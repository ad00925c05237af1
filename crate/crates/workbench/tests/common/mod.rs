//! Scripted annotation of synthetic scenes through the HTTP API.
#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fissura::synthetic::Scene;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Physical window of the fixture: 224 px tiles at scale 2.
pub const WINDOW: u32 = 112;

pub fn request(
    rt: &tokio::runtime::Runtime,
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    rt.block_on(async {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(v) => req
                .header("content-type", "application/json")
                .body(Body::from(v.to_string()))
                .unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (
            status,
            serde_json::from_slice(&bytes).unwrap_or(Value::Null),
        )
    })
}

fn post_path(
    rt: &tokio::runtime::Runtime,
    app: &Router,
    id: &str,
    label: &str,
    path: &[[f64; 2]],
    per_segment: usize,
) -> usize {
    let body = json!({
        "imageId": id,
        "label": label,
        "scaleFactor": 2.0,
        "polyline": path,
        "cropsPerSegment": per_segment,
    });
    let (status, v) = request(rt, app, "POST", "/api/annotations", Some(body));
    assert_eq!(status, StatusCode::OK, "{v}");
    v["cropsWritten"].as_u64().unwrap() as usize
}

/// Annotates a scene the way a careful but imprecise inspector would: each
/// crack is traced twice with every vertex off by up to 20 px, and background
/// is swept along grid rows far from any crack. Returns the crack and
/// background crop counts.
pub fn annotate_scene(
    rt: &tokio::runtime::Runtime,
    app: &Router,
    id: &str,
    scene: &Scene,
    seed: u64,
) -> (usize, usize) {
    let (w, h) = (scene.image.width(), scene.image.height());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cracks = 0;
    for crack in &scene.cracks {
        for _ in 0..2 {
            let path: Vec<[f64; 2]> = crack
                .points
                .iter()
                .map(|&(x, y)| {
                    [
                        (x + rng.random_range(-20.0..20.0)).clamp(0.0, w as f64),
                        (y + rng.random_range(-20.0..20.0)).clamp(0.0, h as f64),
                    ]
                })
                .collect();
            cracks += post_path(rt, app, id, "Crack", &path, 5);
        }
    }
    let half = (WINDOW / 2) as f64;
    let mut background = 0;
    for y in (0..=h - WINDOW).step_by(82) {
        let cy = y as f64 + half;
        let centers: Vec<f64> = (0..=w - WINDOW)
            .step_by(82)
            .map(|x| x as f64 + half)
            .collect();
        let mut run: Vec<f64> = Vec::new();
        for c in centers.iter().map(Some).chain([None]) {
            match c {
                Some(&cx) if scene.crack_distance(cx, cy) > 100.0 => run.push(cx),
                _ => {
                    background += match run.len() {
                        0 => 0,
                        1 => post_path(
                            rt,
                            app,
                            id,
                            "Background",
                            &[[run[0] - 1.0, cy], [run[0] + 1.0, cy]],
                            1,
                        ),
                        n => post_path(
                            rt,
                            app,
                            id,
                            "Background",
                            &[[run[0], cy], [run[n - 1], cy]],
                            n,
                        ),
                    };
                    run.clear();
                }
            }
        }
    }
    (cracks, background)
}
