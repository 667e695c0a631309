//! Scripted session: browse, select, query, label, report. The JSON
//! transcript is compared against `tests/golden/session.json`.

use std::collections::BTreeSet;
use std::path::PathBuf;

use axum::http::{Method, StatusCode};
use axum::Router;
use serde_json::{json, Value};

use super::{call, rect_mask, Demo};

const TIMESTAMP_KEYS: [&str; 2] = ["created_at", "at"];

struct Transcript {
    app: Router,
    steps: Vec<Value>,
}

impl Transcript {
    async fn send(&mut self, method: Method, path: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, response) = call(&self.app, method.clone(), path, body.as_ref()).await;
        self.steps.push(json!({
            "request": { "method": method.as_str(), "path": path, "body": body },
            "status": status.as_u16(),
            "response": response,
        }));
        (status, response)
    }

    async fn get(&mut self, path: &str) -> Value {
        let (status, body) = self.send(Method::GET, path, None).await;
        assert!(status.is_success(), "{path}: {body}");
        body
    }

    async fn post(&mut self, path: &str, body: Value) -> Value {
        let (status, body) = self.send(Method::POST, path, Some(body)).await;
        assert!(status.is_success(), "{path}: {body}");
        body
    }
}

pub fn canonicalize(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, child) in map.iter_mut() {
                if TIMESTAMP_KEYS.contains(&k.as_str()) && child.is_string() {
                    *child = json!("<timestamp>");
                } else {
                    canonicalize(child);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(canonicalize),
        _ => {}
    }
}

fn neuron_set(matches: &Value) -> BTreeSet<(u64, u64)> {
    matches
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            (
                m["neuron"]["layer"].as_u64().unwrap(),
                m["neuron"]["channel"].as_u64().unwrap(),
            )
        })
        .collect()
}

fn refs(set: impl IntoIterator<Item = (u64, u64)>) -> Value {
    set.into_iter()
        .map(|(layer, channel)| json!({ "layer": layer, "channel": channel }))
        .collect()
}

fn mean_of(report: &Value, concept: &str) -> f64 {
    report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["concept"] == concept)
        .and_then(|e| e["mean"].as_f64())
        .unwrap_or_else(|| panic!("{concept} missing from {report}"))
}

pub async fn run_session() -> Vec<Value> {
    let demo = Demo::new();
    let mut t = Transcript {
        app: demo.app(),
        steps: Vec::new(),
    };

    t.get("/images").await;
    let tiles = t.get("/images/case-1/patches").await;
    let lesions: Vec<&str> = tiles["patches"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["lesion"] == true)
        .map(|p| p["patch_id"].as_str().unwrap())
        .collect();
    assert_eq!(lesions, ["case-1:0:0", "case-1:32:32"]);

    // square in the top-left tile, disc in the bottom-right one
    let square_region = json!({ "mask": rect_mask(32, 8, 8, 12, 12) });
    let disc_region = json!({ "mask": rect_mask(32, 9, 9, 15, 15) });
    t.post("/patches/case-1:0:0/select", json!(null)).await;
    let on_square = t.post("/patches/case-1:0:0/query", square_region.clone()).await;
    t.post("/patches/case-1:32:32/select", json!(null)).await;
    let on_disc = t.post("/patches/case-1:32:32/query", disc_region.clone()).await;
    t.get("/neurons/3/0?patch_id=case-1:0:0&k=3").await;

    let (status, _) = t.send(Method::GET, "/patches/case-1:0:0/report/activation", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let square_set = neuron_set(&on_square["matches"]);
    let disc_set = neuron_set(&on_disc["matches"]);
    let square_only = refs(square_set.difference(&disc_set).copied());
    let disc_only = refs(disc_set.difference(&square_set).copied());
    t.post("/concepts", json!({ "name": "square" })).await;
    t.post("/concepts", json!({ "name": "circle" })).await;
    t.post(
        "/labels",
        json!({ "neurons": square_only, "concept": "square", "patch_id": "case-1:0:0", "iou": on_square["best_aligned"]["iou"] }),
    )
    .await;
    t.post(
        "/labels",
        json!({ "neurons": disc_only, "concept": "circle", "patch_id": "case-1:32:32", "iou": on_disc["best_aligned"]["iou"] }),
    )
    .await;
    t.get("/concepts").await;

    let value = t.get("/patches/case-1:0:0/report/activation").await;
    let area = t.post("/patches/case-1:0:0/report/region", square_region).await;
    assert!(mean_of(&value, "square") > mean_of(&value, "circle"), "{value}");
    assert!(mean_of(&area, "square") > mean_of(&area, "circle"), "{area}");
    t.get("/patches/case-1:32:32/report/activation").await;
    t.get("/embedding").await;

    let mut steps = t.steps;
    steps.iter_mut().for_each(canonicalize);
    steps
}

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/session.json")
}

/// Compares a transcript with the golden file, writing it first when it is
/// missing or `UPDATE_GOLDEN` is set.
pub fn check_golden(transcript: &[Value]) -> Result<(), String> {
    let transcript = Value::Array(transcript.to_vec());
    let path = golden_path();
    if std::env::var_os("UPDATE_GOLDEN").is_some() || !path.exists() {
        std::fs::write(&path, serde_json::to_string_pretty(&transcript).unwrap() + "\n").map_err(|e| e.to_string())?;
    }
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let golden: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let (got, want) = (
        transcript.as_array().unwrap(),
        golden.as_array().ok_or("golden is not an array")?,
    );
    if got.len() != want.len() {
        return Err(format!("{} steps, golden has {}", got.len(), want.len()));
    }
    match got.iter().zip(want).position(|(a, b)| a != b) {
        Some(i) => Err(format!(
            "step {i} ({}) differs from {}",
            got[i]["request"]["path"],
            path.display()
        )),
        None => Ok(()),
    }
}
