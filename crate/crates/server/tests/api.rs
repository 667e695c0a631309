mod common;

use axum::http::{Method, StatusCode};
use common::*;
use dissect_core::corpus::GrayImage;
use dissect_core::synthetic::shape_model;
use dissect_server::SessionConfig;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[tokio::test]
async fn lists_images_with_dimensions() {
    let demo = Demo::new();
    let (status, body) = get(&demo.app(), "/images").await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["image_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["case-1", "case-2", "case-3"]);
    assert!(body["images"]
        .as_array()
        .unwrap()
        .iter()
        .all(|i| i["width"] == 64 && i["height"] == 64));
}

#[tokio::test]
async fn image_bytes_are_served_unchanged() {
    let demo = Demo::new();
    let app = demo.app();
    for id in ["case-1", "case-2", "case-3"] {
        let on_disk = std::fs::read(demo.paths.corpus.join(format!("{id}.png"))).unwrap();
        let (status, served) = raw(&app, Method::GET, &format!("/images/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(Sha256::digest(&served), Sha256::digest(&on_disk), "{id}");
    }
}

#[tokio::test]
async fn patch_scores_match_direct_inference() {
    let demo = Demo::new();
    let (status, body) = get(&demo.app(), "/images/case-1/patches").await;
    assert_eq!(status, StatusCode::OK);
    let patches = body["patches"].as_array().unwrap();
    assert_eq!(patches.len(), 4);

    let model = shape_model(32);
    let img = GrayImage::load(demo.paths.corpus.join("case-1.png")).unwrap();
    for p in patches {
        let (x, y) = (p["x"].as_u64().unwrap() as usize, p["y"].as_u64().unwrap() as usize);
        let crop = GrayImage::from_fn(32, 32, |cx, cy| img.get(x + cx, y + cy));
        let want = model.infer_patch(&crop.to_tensor()).unwrap().class_scores[1];
        assert_eq!(p["score"].as_f64().unwrap() as f32, want);
        assert_eq!(p["lesion"].as_bool().unwrap(), want >= 0.5);
        assert_eq!(p["patch_id"], format!("case-1:{x}:{y}"));
    }
}

#[tokio::test]
async fn lesion_threshold_is_configurable() {
    let demo = Demo::new();
    let strict = SessionConfig {
        lesion_threshold: 0.99,
        ..demo_config()
    };
    let (_, body) = get(&demo.app_with(strict), "/images/case-1/patches").await;
    let flags: Vec<bool> = body["patches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["lesion"].as_bool().unwrap())
        .collect();
    assert_eq!(flags, [false, false, false, true]);
    let (_, body) = get(&demo.app(), "/images/case-1/patches").await;
    let flags: Vec<bool> = body["patches"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["lesion"].as_bool().unwrap())
        .collect();
    assert_eq!(flags, [true, false, false, true]);
}

#[tokio::test]
async fn unknown_resources_are_not_found() {
    let demo = Demo::new();
    let app = demo.app();
    let region = json!({ "mask": rect_mask(32, 0, 0, 8, 8) });
    let cases = [
        (Method::GET, "/images/nope", None),
        (Method::GET, "/images/nope/patches", None),
        (Method::POST, "/patches/nope:0:0/select", None),
        (Method::POST, "/patches/case-1:64:0/select", None),
        (Method::POST, "/patches/case-1/select", None),
        (Method::POST, "/patches/nope:0:0/query", Some(&region)),
        (Method::GET, "/neurons/3/99", None),
        (Method::GET, "/neurons/1/0", None),
        (Method::GET, "/neurons/x/0", None),
        (Method::GET, "/no/such/route", None),
    ];
    for (method, uri, body) in cases {
        let (status, err) = call(&app, method, uri, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(err["code"], "not_found", "{uri}");
        assert!(err["message"].is_string());
    }
}

#[tokio::test]
async fn malformed_masks_are_validation_errors() {
    let demo = Demo::new();
    let app = demo.app();
    let bad_masks = [
        json!({ "width": 32, "height": 32, "counts": [5] }),
        json!({ "width": 32, "height": 32, "counts": [1000, 20, 5] }),
        json!({ "width": 0, "height": 0, "counts": [] }),
        json!({ "width": 16, "height": 16, "counts": [256] }),
        json!({ "width": 32, "counts": [1024] }),
        json!("not a mask"),
    ];
    for mask in bad_masks {
        for uri in ["/patches/case-1:0:0/query", "/patches/case-1:0:0/report/region"] {
            let (status, err) = post(&app, uri, json!({ "mask": mask })).await;
            assert_eq!(status, StatusCode::BAD_REQUEST, "{uri} {mask}");
            assert_eq!(err["code"], "validation_error");
        }
    }
    let (status, err) = raw(&app, Method::POST, "/patches/case-1:0:0/query", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(
        serde_json::from_slice::<Value>(&err).unwrap()["code"],
        "validation_error"
    );
}

#[tokio::test]
async fn query_threshold_must_be_a_fraction() {
    let demo = Demo::new();
    let app = demo.app();
    for t in [json!(-0.1), json!(1.5), json!("high")] {
        let body = json!({ "mask": rect_mask(32, 8, 8, 12, 12), "iou_threshold": t });
        let (status, err) = post(&app, "/patches/case-1:0:0/query", body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{t}");
        assert_eq!(err["code"], "validation_error");
    }
    let (_, err) = get(&app, "/neurons/3/0?k=0").await;
    assert_eq!(err["code"], "validation_error");
    let (_, err) = get(&app, "/neurons/3/0?k=many").await;
    assert_eq!(err["code"], "validation_error");
}

#[tokio::test]
async fn query_returns_sorted_matches_above_threshold() {
    let demo = Demo::new();
    let app = demo.app();
    let mask = rect_mask(32, 8, 8, 12, 12);
    let (status, all) = post(
        &app,
        "/patches/case-1:0:0/query",
        json!({ "mask": mask, "iou_threshold": 0.0 }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let matches = all["matches"].as_array().unwrap();
    assert_eq!(matches.len(), 8);
    for pair in matches.windows(2) {
        let (a, b) = (pair[0]["iou"].as_f64().unwrap(), pair[1]["iou"].as_f64().unwrap());
        assert!(a > b || (a == b && pair[0]["neuron"]["channel"].as_u64() < pair[1]["neuron"]["channel"].as_u64()));
    }
    assert_eq!(all["best_aligned"]["neuron"], matches[0]["neuron"]);
    assert_eq!(all["best_aligned"]["iou"], matches[0]["iou"]);

    let (_, default) = post(&app, "/patches/case-1:0:0/query", json!({ "mask": mask })).await;
    assert_eq!(default["iou_threshold"], 0.2);
    let kept: Vec<&Value> = matches.iter().filter(|m| m["iou"].as_f64().unwrap() >= 0.2).collect();
    assert_eq!(default["matches"].as_array().unwrap().iter().collect::<Vec<_>>(), kept);
    assert!(channels(&default["matches"]).contains(&0));
}

#[tokio::test]
async fn reports_need_labels_first() {
    let demo = Demo::new();
    let app = demo.app();
    let (status, err) = get(&app, "/patches/case-1:0:0/report/activation").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "report_unavailable");
    let (status, err) = post(
        &app,
        "/patches/case-1:0:0/report/region",
        json!({ "mask": rect_mask(32, 0, 0, 4, 4) }),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "report_unavailable");

    // a concept with no neurons is still not enough
    post(&app, "/concepts", json!({ "name": "square" })).await;
    let (_, err) = get(&app, "/patches/case-1:0:0/report/activation").await;
    assert_eq!(err["code"], "report_unavailable");
}

#[tokio::test]
async fn concept_and_label_errors() {
    let demo = Demo::new();
    let app = demo.app();
    let (status, created) = post(&app, "/concepts", json!({ "name": "square" })).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["id"], "square");
    assert_eq!(created["neurons"], json!([]));

    let (status, err) = post(&app, "/concepts", json!({ "name": "square" })).await;
    assert_eq!((status, err["code"].as_str()), (StatusCode::CONFLICT, Some("conflict")));
    let (status, err) = post(&app, "/concepts", json!({ "name": "" })).await;
    assert_eq!(
        (status, err["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("validation_error"))
    );
    let (status, err) = post(&app, "/concepts", json!({})).await;
    assert_eq!(
        (status, err["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("validation_error"))
    );

    let n0 = json!({ "layer": 3, "channel": 0 });
    let cases = [
        (
            json!({ "neurons": [n0], "concept": "circle" }),
            StatusCode::NOT_FOUND,
            "not_found",
        ),
        (
            json!({ "neurons": [], "concept": "square" }),
            StatusCode::BAD_REQUEST,
            "validation_error",
        ),
        (
            json!({ "neurons": [{ "layer": 3, "channel": 8 }], "concept": "square" }),
            StatusCode::BAD_REQUEST,
            "validation_error",
        ),
        (
            json!({ "neurons": [n0], "concept": "square", "patch_id": "nope:0:0" }),
            StatusCode::NOT_FOUND,
            "not_found",
        ),
    ];
    for (body, want_status, want_code) in cases {
        let (status, err) = post(&app, "/labels", body.clone()).await;
        assert_eq!((status, err["code"].as_str()), (want_status, Some(want_code)), "{body}");
    }
    let (_, concepts) = get(&app, "/concepts").await;
    assert_eq!(concepts["concepts"][0]["neurons"], json!([]));
}

#[tokio::test]
async fn labels_move_between_concepts_and_persist() {
    let demo = Demo::new();
    let app = demo.app();
    for name in ["square", "circle"] {
        post(&app, "/concepts", json!({ "name": name })).await;
    }
    let n = |c: u64| json!({ "layer": 3, "channel": c });
    post(&app, "/labels", json!({ "neurons": [n(0), n(2)], "concept": "square" })).await;
    let (status, circle) = post(
        &app,
        "/labels",
        json!({ "neurons": [n(2), n(1)], "concept": "circle", "patch_id": "case-1:32:32", "iou": 0.5 }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(circle["neurons"], json!([n(1), n(2)]));

    let (_, before) = get(&app, "/concepts").await;
    assert_eq!(before["concepts"][0]["neurons"], json!([n(0)]));
    let (_, embedding) = get(&app, "/embedding").await;
    let colors: Vec<&str> = embedding["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["color"].as_str().unwrap())
        .collect();
    assert_eq!(
        &colors[..4],
        [
            before["concepts"][0]["color"].as_str().unwrap(),
            circle["color"].as_str().unwrap(),
            circle["color"].as_str().unwrap(),
            "#7f7f7f"
        ]
    );

    // a fresh session replays the same log
    let reopened = demo.app();
    let (_, after) = get(&reopened, "/concepts").await;
    assert_eq!(before, after);
    let (_, neuron) = get(&reopened, "/neurons/3/1").await;
    assert_eq!(neuron["label"], "circle");
}

#[tokio::test]
async fn reads_do_not_touch_the_label_log() {
    let demo = Demo::new();
    let app = demo.app();
    let empty = std::fs::read_to_string(&demo.paths.labels).unwrap();
    let mask = json!({ "mask": rect_mask(32, 8, 8, 12, 12) });
    get(&app, "/images").await;
    get(&app, "/images/case-1/patches").await;
    post(&app, "/patches/case-1:0:0/select", json!(null)).await;
    post(&app, "/patches/case-1:0:0/query", mask.clone()).await;
    post(&app, "/patches/case-1:0:0/report/region", mask.clone()).await;
    get(&app, "/neurons/3/0?patch_id=case-1:0:0").await;
    get(&app, "/embedding").await;
    get(&app, "/concepts").await;
    assert_eq!(std::fs::read_to_string(&demo.paths.labels).unwrap(), empty);

    post(&app, "/concepts", json!({ "name": "square" })).await;
    let log = std::fs::read_to_string(&demo.paths.labels).unwrap();
    get(&app, "/patches/case-1:0:0/report/activation").await;
    post(&app, "/patches/case-1:0:0/query", mask).await;
    assert_eq!(std::fs::read_to_string(&demo.paths.labels).unwrap(), log);
}

async fn read_script(app: &axum::Router) -> Vec<Value> {
    let square = json!({ "mask": rect_mask(32, 8, 8, 12, 12) });
    let disc = json!({ "mask": rect_mask(32, 9, 9, 15, 15) });
    let mut out = Vec::new();
    for id in ["case-1", "case-2", "case-3"] {
        out.push(get(app, &format!("/images/{id}/patches")).await.1);
    }
    for p in ["case-1:0:0", "case-1:32:32", "case-2:0:32", "case-3:32:0"] {
        out.push(post(app, &format!("/patches/{p}/select"), json!(null)).await.1);
        out.push(post(app, &format!("/patches/{p}/query"), square.clone()).await.1);
        out.push(post(app, &format!("/patches/{p}/query"), disc.clone()).await.1);
        out.push(get(app, &format!("/neurons/3/1?patch_id={p}&k=3")).await.1);
    }
    out.push(get(app, "/embedding").await.1);
    out
}

#[tokio::test]
async fn cache_does_not_change_results() {
    let demo = Demo::new();
    let cached = demo.app();
    let uncached = demo.app_with(SessionConfig {
        cache_capacity: 0,
        ..demo_config()
    });
    let tiny = demo.app_with(SessionConfig {
        cache_capacity: 1,
        ..demo_config()
    });
    let first = read_script(&cached).await;
    assert_eq!(first, read_script(&cached).await, "repeat calls");
    assert_eq!(first, read_script(&uncached).await, "cache off");
    assert_eq!(first, read_script(&tiny).await, "eviction");
}

#[tokio::test]
async fn neuron_detail_lists_top_images() {
    let demo = Demo::new();
    let (status, body) = get(&demo.app(), "/neurons/3/0?k=2&patch_id=case-1:0:0").await;
    assert_eq!(status, StatusCode::OK);
    let tops = body["top_images"].as_array().unwrap();
    let ids: Vec<&str> = tops.iter().map(|t| t["image_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 2);
    assert!(ids.iter().all(|id| id.starts_with("square")));
    assert!(tops.iter().all(|t| t["mask"]["width"] == 32));
    assert_eq!(body["patch_mask"]["height"], 32);
    assert_eq!(body["label"], Value::Null);
}

#[tokio::test]
async fn wrong_method_is_a_json_error() {
    let demo = Demo::new();
    let (status, body) = call(&demo.app(), Method::DELETE, "/concepts", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(body["code"], "validation_error");
}

#[tokio::test]
async fn wide_image_splits_into_two_full_size_patches() {
    use dissect_core::corpus::ReferenceCorpus;
    use dissect_core::index::{build_index, save_index, IndexConfig};
    use dissect_core::model::save_weights;
    use dissect_core::synthetic::{background, render, Shape};
    use dissect_server::{api, Session, SessionPaths};

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let paths = SessionPaths {
        model: root.join("m.nscw"),
        index: root.join("i.nsci"),
        corpus: root.join("images"),
        reference: root.join("reference"),
        labels: root.join("labels.jsonl"),
    };
    std::fs::create_dir_all(&paths.corpus).unwrap();
    std::fs::create_dir_all(&paths.reference).unwrap();
    let model = shape_model(512);
    save_weights(&model, &paths.model).unwrap();
    for i in 0..3 {
        std::fs::write(
            paths.reference.join(format!("r{i}.png")),
            background(i, 512, 512).encode_png8(),
        )
        .unwrap();
    }
    let index = build_index(
        &model,
        &ReferenceCorpus::open(&paths.reference).unwrap(),
        IndexConfig::default(),
    )
    .unwrap();
    save_index(&index, &paths.index).unwrap();
    let wide = render(
        1024,
        512,
        &[Shape::Square {
            x: 700,
            y: 100,
            side: 120,
        }],
    );
    std::fs::write(paths.corpus.join("wide.png"), wide.encode_png8()).unwrap();

    let app = api::router(std::sync::Arc::new(
        Session::open(&paths, SessionConfig::default()).unwrap(),
    ));
    let (status, body) = get(&app, "/images/wide/patches").await;
    assert_eq!(status, StatusCode::OK);
    let patches = body["patches"].as_array().unwrap();
    let origins: Vec<(u64, u64)> = patches
        .iter()
        .map(|p| (p["x"].as_u64().unwrap(), p["y"].as_u64().unwrap()))
        .collect();
    assert_eq!(origins, [(0, 0), (512, 0)]);
    for p in patches {
        let x = p["x"].as_u64().unwrap() as usize;
        let crop = GrayImage::from_fn(512, 512, |cx, cy| wide.get(x + cx, cy));
        let want = model.infer_patch(&crop.to_tensor()).unwrap().class_scores[1];
        assert_eq!(p["score"].as_f64().unwrap() as f32, want);
    }
    assert_eq!(
        patches
            .iter()
            .map(|p| p["lesion"].as_bool().unwrap())
            .collect::<Vec<_>>(),
        [false, true]
    );
}
