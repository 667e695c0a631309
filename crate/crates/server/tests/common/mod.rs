#![allow(dead_code)]

pub mod script;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dissect_server::demo::{write_demo, DEMO_PATCH};
use dissect_server::{api, Session, SessionConfig, SessionPaths};
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub struct Demo {
    pub dir: TempDir,
    pub paths: SessionPaths,
}

impl Demo {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_demo(dir.path()).unwrap();
        Self { dir, paths }
    }

    pub fn session(&self, config: SessionConfig) -> Arc<Session> {
        Arc::new(Session::open(&self.paths, config).unwrap())
    }

    pub fn app(&self) -> Router {
        self.app_with(demo_config())
    }

    pub fn app_with(&self, config: SessionConfig) -> Router {
        api::router(self.session(config))
    }
}

pub fn demo_config() -> SessionConfig {
    SessionConfig {
        patch_size: DEMO_PATCH,
        ..SessionConfig::default()
    }
}

pub async fn raw(app: &Router, method: Method, uri: &str, body: Option<&Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<&Value>) -> (StatusCode, Value) {
    let (status, bytes) = raw(app, method, uri, body).await;
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("{uri}: non-JSON body"));
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(&body)).await
}

/// Run-length mask JSON for an axis-aligned rectangle.
pub fn rect_mask(size: usize, x: usize, y: usize, w: usize, h: usize) -> Value {
    let rle = dissect_core::BinaryMask::rect(size, size, x, y, w, h).to_rle();
    serde_json::to_value(rle).unwrap()
}

pub fn channels(matches: &Value) -> Vec<u64> {
    matches
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["neuron"]["channel"].as_u64().unwrap())
        .collect()
}
