#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rwprop_cli::formats::{FieldFile, GrayImage, LabelEntry, LabelsFile};
use rwprop_cli::service::{router, PropagateRequest, PropagateResponse};
use tower::ServiceExt;

pub fn rwprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwprop"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("run rwprop")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// 32x32 canvas with one scribble either side of a B = 10 wall on column 16.
pub fn wall_fixture() -> (LabelsFile, Vec<f32>) {
    let (w, h) = (32i64, 32i64);
    let mut entries = Vec::new();
    for y in 10..22 {
        entries.push(LabelEntry { x: 6, y, class: 0 });
        entries.push(LabelEntry { x: 25, y, class: 1 });
    }
    let labels = LabelsFile {
        width: w,
        height: h,
        num_classes: 2,
        entries,
    };
    let boundary = (0..w * h).map(|i| if i % w == 16 { 10.0 } else { 0.0 }).collect();
    (labels, boundary)
}

pub async fn send(method: &str, uri: &str, content_type: Option<&str>, body: impl Into<Body>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = router().oneshot(req.body(body.into()).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn post_propagate(req: &PropagateRequest) -> (StatusCode, Vec<u8>) {
    send("POST", "/api/propagate", Some("application/json"), serde_json::to_vec(req).unwrap()).await
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap()
}

/// Runs the wall fixture through `rwprop propagate` and `/api/propagate` and
/// compares every numerical output. The service reports `f64`; the files
/// hold `f32`, so service values are narrowed before a bitwise comparison.
pub fn cli_service_parity(dir: &Path) -> Result<(), String> {
    let (labels, boundary) = wall_fixture();
    let (w, h) = (labels.width as u32, labels.height as u32);
    let labels_path = dir.join("labels.json");
    let boundary_path = dir.join("boundary.rwf");
    labels.write(&labels_path).map_err(|e| e.to_string())?;
    FieldFile::new(w, h, 1, boundary.clone())
        .unwrap()
        .write(&boundary_path)
        .map_err(|e| e.to_string())?;
    let (p, map, ent, wts) = (dir.join("p.rwf"), dir.join("map.pgm"), dir.join("ent.rwf"), dir.join("w.rwf"));
    let out = rwprop(&[
        "propagate",
        "--labels",
        path_str(&labels_path),
        "--boundary",
        path_str(&boundary_path),
        "--out-p",
        path_str(&p),
        "--out-map",
        path_str(&map),
        "--out-entropy",
        path_str(&ent),
        "--out-weights",
        path_str(&wts),
        "--alpha",
        "1.5",
    ]);
    if !out.status.success() {
        return Err(format!("cli failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let stderr = String::from_utf8_lossy(&out.stderr);

    let req = PropagateRequest {
        width: labels.width,
        height: labels.height,
        num_classes: labels.num_classes,
        entries: labels.entries.clone(),
        boundary: Some(boundary.iter().map(|&v| f64::from(v)).collect()),
        alpha: Some(1.5),
    };
    let (status, body) = runtime().block_on(post_propagate(&req));
    if status != StatusCode::OK {
        return Err(format!("service returned {status}"));
    }
    let resp: PropagateResponse = serde_json::from_slice(&body).map_err(|e| e.to_string())?;

    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let narrow = |v: &[f64]| v.iter().map(|&x| (x as f32).to_bits()).collect::<Vec<_>>();
    let read = |p: &Path| FieldFile::read(p).map_err(|e| e.to_string());
    for (name, file, values) in [("p", &p, &resp.p), ("entropy", &ent, &resp.entropy), ("weights", &wts, &resp.weights)] {
        if bits(&read(file)?.data) != narrow(values) {
            return Err(format!("{name} differs"));
        }
    }
    let img = GrayImage::read(&map).map_err(|e| e.to_string())?;
    if img.pixels.iter().map(|&c| c as usize).collect::<Vec<_>>() != resp.map {
        return Err("map differs".into());
    }
    if !stderr.contains(&format!("unreached: {}", resp.unreached.len())) {
        return Err(format!("unreached count differs: {stderr}"));
    }
    // The wall separates the two scribbles.
    let left = resp.map[16 * 32 + 3];
    let right = resp.map[16 * 32 + 28];
    if (left, right) != (0, 1) {
        return Err(format!("expected split at the wall, got {left} / {right}"));
    }
    Ok(())
}
