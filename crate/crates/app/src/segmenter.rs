//! Client for an external promptable segmenter, and an in-repo stub.
//!
//! Wire format: `POST <url>` with
//! `{"image": <base64 PNG>, "points": [[u, v, 1], ...], "box": [u1, v1, u2, v2]}`
//! (`points` and `box` omitted when absent), answered by
//! `{"mask_rle": {"size": [h, w], "counts": [...]}, "score": s}`.

use crate::error::AppError;
use axum::{http::StatusCode, routing::post, Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use shapefit_core::render::{Mask, Rle};
use shapefit_core::scene::Prompt;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegmenterError {
    #[error("segmenter unreachable: {0}")]
    Unreachable(String),
    #[error("bad segmenter response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 3]>>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

impl SegmentRequest {
    /// Point prompts are all foreground (label 1).
    pub fn new(png: &[u8], prompt: &Prompt) -> Self {
        let image = base64::engine::general_purpose::STANDARD.encode(png);
        match prompt {
            Prompt::Points { points } => Self {
                image,
                points: Some(points.iter().map(|p| [p[0], p[1], 1.0]).collect()),
                bbox: None,
            },
            Prompt::Box { bbox } => Self { image, points: None, bbox: Some(*bbox) },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask_rle: Rle,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SegmenterClient {
    url: String,
    http: reqwest::Client,
    pub retries: u32,
    pub backoff: Duration,
}

impl SegmenterClient {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            http: reqwest::Client::builder().timeout(Duration::from_secs(60)).build().expect("http client"),
            retries: 2,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Sends the prompt, retrying transport failures and 5xx answers with
    /// doubling backoff. The mask must match the image size.
    pub async fn segment(&self, png: &[u8], width: u32, height: u32, prompt: &Prompt) -> Result<(Mask, f64), SegmenterError> {
        let body = SegmentRequest::new(png, prompt).to_bytes();
        let mut wait = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                tokio::time::sleep(wait).await;
                wait *= 2;
            }
            let sent = self
                .http
                .post(&self.url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone())
                .send()
                .await;
            let resp = match sent {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() {
                last = format!("status {status}");
                continue;
            }
            if !status.is_success() {
                return Err(SegmenterError::BadResponse(format!("status {status}")));
            }
            let bytes = resp.bytes().await.map_err(|e| SegmenterError::BadResponse(e.to_string()))?;
            return parse_response(&bytes, width, height);
        }
        Err(SegmenterError::Unreachable(last))
    }
}

pub fn parse_response(bytes: &[u8], width: u32, height: u32) -> Result<(Mask, f64), SegmenterError> {
    let r: SegmentResponse = serde_json::from_slice(bytes).map_err(|e| SegmenterError::BadResponse(e.to_string()))?;
    if r.mask_rle.size != [height, width] {
        return Err(SegmenterError::BadResponse(format!(
            "mask is {}x{}, image is {width}x{height}",
            r.mask_rle.size[1], r.mask_rle.size[0]
        )));
    }
    let mask = r.mask_rle.decode().map_err(|e| SegmenterError::BadResponse(e.to_string()))?;
    Ok((mask, r.score))
}

/// Width and height from a PNG header.
pub fn png_size(png: &[u8]) -> Option<(u32, u32)> {
    const SIG: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    if png.len() < 24 || png[..8] != SIG || &png[12..16] != b"IHDR" {
        return None;
    }
    let be = |b: &[u8]| u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
    Some((be(&png[16..20]), be(&png[20..24])))
}

/// Disk of `radius` pixels around the prompt (point mean or box center).
pub fn stub_mask(req: &SegmentRequest, radius: u32) -> Result<Mask, String> {
    let png = base64::engine::general_purpose::STANDARD.decode(&req.image).map_err(|e| e.to_string())?;
    let (w, h) = png_size(&png).ok_or("image is not a PNG")?;
    let (cx, cy) = match (&req.points, &req.bbox) {
        (Some(p), _) if !p.is_empty() => (p.iter().map(|q| q[0]).sum::<f64>() / p.len() as f64, p.iter().map(|q| q[1]).sum::<f64>() / p.len() as f64),
        (_, Some(b)) => ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0),
        _ => return Err("empty prompt".into()),
    };
    let r2 = (radius as f64).powi(2);
    Ok(Mask::from_fn(w, h, |u, v| (u as f64 - cx).powi(2) + (v as f64 - cy).powi(2) <= r2))
}

pub fn stub_router(radius: u32) -> Router {
    Router::new().route(
        "/segment",
        post(move |Json(req): Json<SegmentRequest>| async move {
            match stub_mask(&req, radius) {
                Ok(m) => Ok(Json(SegmentResponse { mask_rle: m.to_rle(), score: 1.0 })),
                Err(e) => Err((StatusCode::UNPROCESSABLE_ENTITY, e)),
            }
        }),
    )
}

pub fn serve_stub_blocking(port: u16, radius: u32) -> Result<(), AppError> {
    let rt = tokio::runtime::Runtime::new().map_err(AppError::internal)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await.map_err(|e| AppError::data(format!("port {port}: {e}")))?;
        eprintln!("stub segmenter on http://{}/segment", listener.local_addr().map_err(AppError::internal)?);
        axum::serve(listener, stub_router(radius)).await.map_err(AppError::internal)
    })
}
