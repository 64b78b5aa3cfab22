use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine as _;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tower::ServiceExt;

use causalseg::model::{Encoder, ModelConfig, ModelSnapshot, SegModel};
use causalseg::seed;
use causalseg::styletext::{hex, AttributeCodebook};
use causalseg::synthgen::{corrupt_for_intervention, generate_dataset, CorruptionKind, DatasetConfig};
use causalseg_service::{png16, router, AppState, LoadedModel, MaskRle, ReasonerBackend, SampleStore, ServiceConfig};

fn snapshot() -> ModelSnapshot {
    let mc = ModelConfig::micro();
    let mut enc = Encoder::new(&mc, &mut seed::rng(3, &[1]));
    enc.freeze();
    ModelSnapshot {
        model: SegModel::new(mc.clone(), enc, 4).unwrap(),
        grl: None,
        codebook: AttributeCodebook::new(7, mc.style_dim),
        method: "lad".into(),
        seeds: BTreeMap::from([("train".to_string(), 0)]),
    }
}

fn store() -> SampleStore {
    let dc = DatasetConfig {
        image_size: 16,
        num_classes: 3,
        samples_per_domain: 4,
        test_samples_per_domain: 6,
        ..DatasetConfig::default()
    };
    SampleStore::from_dataset(&generate_dataset(&dc).unwrap())
}

fn state_with(cfg: ServiceConfig) -> Arc<AppState> {
    Arc::new(AppState::new(
        Some(LoadedModel::new(snapshot(), ReasonerBackend::Rule)),
        Some(store()),
        cfg,
    ))
}

fn state() -> Arc<AppState> {
    state_with(ServiceConfig::default())
}

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, Option<String>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    raw(st, req).await
}

async fn raw(st: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Value, Option<String>) {
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let hash = resp
        .headers()
        .get(causalseg_service::SNAPSHOT_HEADER)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v, hash)
}

fn rle(v: &Value) -> MaskRle {
    serde_json::from_value(v.clone()).unwrap()
}

async fn open_with_sample(st: &Arc<AppState>, sample_id: &str) -> String {
    let (s, v, _) = call(st, "POST", "/v1/session", None).await;
    assert_eq!(s, StatusCode::OK);
    let id = v["session_id"].as_str().unwrap().to_string();
    let (s, _, _) = call(st, "POST", "/v1/segment", Some(json!({"sample_id": sample_id, "session_id": id}))).await;
    assert_eq!(s, StatusCode::OK);
    id
}

#[tokio::test]
async fn segment_known_sample() {
    let st = state();
    let req = json!({"sample_id": "ct_source:2"});
    let (s, a, hash) = call(&st, "POST", "/v1/segment", Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let expected_hash = st.model.as_ref().unwrap().snapshot_hash.clone();
    assert_eq!(hash.as_deref(), Some(expected_hash.as_str()));
    assert_eq!(a["snapshot_hash"], json!(expected_hash));
    let mask = rle(&a["mask_rle"]);
    assert_eq!(mask.shape, [16, 16]);
    assert_eq!(mask.decode().unwrap().len(), 256);
    let d = a["dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&d));
    let px: Vec<usize> = serde_json::from_value(a["logits_summary"]["class_pixels"].clone()).unwrap();
    assert_eq!(px.iter().sum::<usize>(), 256);
    assert_eq!(px[1], mask.count(1));

    let (_, b, _) = call(&st, "POST", "/v1/segment", Some(req)).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn segment_errors() {
    let st = state();
    for (body, status, code) in [
        (json!({"sample_id": "ct_source:999"}), StatusCode::NOT_FOUND, "unknown_sample"),
        (json!({"sample_id": "nowhere:0"}), StatusCode::NOT_FOUND, "unknown_domain"),
        (json!({"sample_id": "source"}), StatusCode::BAD_REQUEST, "malformed_sample_id"),
        (json!({}), StatusCode::BAD_REQUEST, "malformed_request"),
        (json!({"sample_id": "ct_source:0", "image_png": "AAAA"}), StatusCode::BAD_REQUEST, "malformed_request"),
        (json!({"image_png": "%%%"}), StatusCode::BAD_REQUEST, "malformed_image"),
        (json!({"sample_id": "ct_source:0", "bogus": 1}), StatusCode::BAD_REQUEST, "malformed_request"),
        (json!({"sample_id": "ct_source:0", "session_id": "nope"}), StatusCode::NOT_FOUND, "unknown_session"),
    ] {
        let (s, v, _) = call(&st, "POST", "/v1/segment", Some(body.clone())).await;
        assert_eq!(s, status, "{body}");
        assert_eq!(v["error"]["code"], json!(code), "{body}");
    }

    let bad = Request::builder()
        .method("POST")
        .uri("/v1/segment")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let (s, v, _) = raw(&st, bad).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], json!("malformed_request"));

    let png = png16::encode(&vec![0.5; 32 * 32], 32, 32);
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    let (s, v, _) = call(&st, "POST", "/v1/segment", Some(json!({"image_png": b64}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["code"], json!("wrong_image_size"));
}

#[tokio::test]
async fn oversize_body_is_413() {
    let st = state_with(ServiceConfig {
        max_body_bytes: 256,
        ..ServiceConfig::default()
    });
    let (s, v, _) = call(&st, "POST", "/v1/segment", Some(json!({"image_png": "A".repeat(1024)}))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(v["error"]["code"], json!("payload_too_large"));
}

#[tokio::test]
async fn uploaded_image_segments() {
    let st = state();
    let (_, sample, _) = call(&st, "GET", "/v1/sample?domain=ct_source&index=1", None).await;
    let (s, up, _) = call(
        &st,
        "POST",
        "/v1/segment",
        Some(json!({"image_png": sample["image_png"]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert!(up.get("dice").is_none(), "uploads carry no ground truth");
    assert_eq!(rle(&up["mask_rle"]).shape, [16, 16]);
}

#[tokio::test]
async fn no_model_is_503() {
    let st = Arc::new(AppState::new(None, Some(store()), ServiceConfig::default()));
    for (m, uri, body) in [
        ("POST", "/v1/segment", Some(json!({"sample_id": "ct_source:0"}))),
        ("GET", "/v1/model/info", None),
        ("POST", "/v1/session", None),
        ("POST", "/v1/intervene", Some(json!({"session_id": "x", "command_text": "identity"}))),
    ] {
        let (s, v, hash) = call(&st, m, uri, body).await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
        assert_eq!(v["error"]["code"], json!("unavailable"));
        assert!(hash.is_none());
    }
    // Samples only need the dataset.
    let (s, _, _) = call(&st, "GET", "/v1/sample?domain=ct_source&index=0", None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn identity_intervention_matches_segment() {
    let st = state();
    let id = open_with_sample(&st, "t2_noisy:3").await;
    let (_, seg, _) = call(&st, "POST", "/v1/segment", Some(json!({"sample_id": "t2_noisy:3"}))).await;
    let (s, iv, _) = call(
        &st,
        "POST",
        "/v1/intervene",
        Some(json!({"session_id": id, "command_text": "identity"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(iv["mask_rle"], seg["mask_rle"]);
    assert_eq!(iv["dice_before"], iv["dice_after"]);
    assert_eq!(iv["dice_before"], seg["dice"]);
    assert_eq!(iv["film_summary"]["identity"], json!(true));
    assert_eq!(iv["parsed_command"]["verb"], json!("identity"));
    assert_eq!(iv["history_len"], json!(1));
}

#[tokio::test]
async fn intervention_errors_and_history() {
    let st = state();
    let (s, v, _) = call(&st, "POST", "/v1/intervene", Some(json!({"session_id": "nope", "command_text": "identity"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], json!("unknown_session"));

    let (_, sess, _) = call(&st, "POST", "/v1/session", None).await;
    let id = sess["session_id"].as_str().unwrap().to_string();
    let (s, v, _) = call(&st, "POST", "/v1/intervene", Some(json!({"session_id": id, "command_text": "identity"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], json!("no_current_sample"));

    call(&st, "POST", "/v1/segment", Some(json!({"sample_id": "ct_source:0", "session_id": id}))).await;
    let (s, v, _) = call(&st, "POST", "/v1/intervene", Some(json!({"session_id": id, "command_text": "shrink class="}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], json!("parse_error"));
    assert_eq!(v["error"]["position"], json!(13));
    let hint = v["error"]["hint"].as_str().unwrap();
    for verb in ["shrink", "expand", "suppress_noise", "restore_region", "sharpen_boundary", "identity"] {
        assert!(hint.contains(verb));
    }

    for (i, cmd) in ["expand class=1 amount=0.4", "denoise", "sharpen amount=1"].iter().enumerate() {
        let (s, v, _) = call(&st, "POST", "/v1/intervene", Some(json!({"session_id": id, "command_text": cmd}))).await;
        assert_eq!(s, StatusCode::OK, "{cmd}");
        assert_eq!(v["history_len"], json!(i + 1));
        assert_eq!(v["film_summary"]["backend"], json!("rule"));
    }
    let (s, info, _) = call(&st, "GET", &format!("/v1/session/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let cmds: Vec<&str> = info["history"].as_array().unwrap().iter().map(|h| h["command"].as_str().unwrap()).collect();
    assert_eq!(cmds, ["expand class=1 amount=0.4", "suppress_noise amount=0.5", "sharpen_boundary amount=1"]);
    assert_eq!(info["current_sample"], json!("ct_source:0"));
}

#[tokio::test]
async fn requests_never_mutate_the_model() {
    let st = state();
    let before = st.model.as_ref().unwrap().snapshot.content_hash();
    let id = open_with_sample(&st, "inverted_bias:0:bright_streak:0.9").await;
    for cmd in ["shrink class=2 amount=1", "expand class=1", "restore_region amount=0.8"] {
        call(&st, "POST", "/v1/intervene", Some(json!({"session_id": id, "command_text": cmd}))).await;
    }
    let m = st.model.as_ref().unwrap();
    assert_eq!(m.snapshot.content_hash(), before);
    assert_eq!(m.snapshot_hash, before);
    let (_, a, _) = call(&st, "POST", "/v1/segment", Some(json!({"sample_id": "ct_source:1"}))).await;
    let (_, b, _) = call(&state(), "POST", "/v1/segment", Some(json!({"sample_id": "ct_source:1"}))).await;
    assert_eq!(a, b);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_interventions_match_serial() {
    let cmds = [
        "shrink class=2 amount=0.9",
        "expand class=1 amount=0.6",
        "suppress_noise amount=1",
        "sharpen_boundary",
        "restore_region class=1",
        "identity",
    ];
    let serial = state();
    let mut expected = Vec::new();
    for c in cmds {
        let id = open_with_sample(&serial, "t2_noisy:1").await;
        let (_, v, _) = call(&serial, "POST", "/v1/intervene", Some(json!({"session_id": id, "command_text": c}))).await;
        expected.push(v["mask_rle"].clone());
    }

    let st = state();
    let mut ids = Vec::new();
    for _ in cmds {
        ids.push(open_with_sample(&st, "t2_noisy:1").await);
    }
    let handles: Vec<_> = cmds
        .iter()
        .zip(ids)
        .map(|(c, id)| {
            let st = st.clone();
            let body = json!({"session_id": id, "command_text": c});
            tokio::spawn(async move { call(&st, "POST", "/v1/intervene", Some(body)).await })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(expected) {
        let (s, v, _) = h.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["mask_rle"], want);
    }
}

#[tokio::test]
async fn session_table_is_bounded() {
    let st = state_with(ServiceConfig {
        session_cap: 2,
        ..ServiceConfig::default()
    });
    let mut ids = Vec::new();
    for _ in 0..3 {
        let (_, v, _) = call(&st, "POST", "/v1/session", None).await;
        ids.push(v["session_id"].as_str().unwrap().to_string());
    }
    assert_eq!(st.session_count(), 2);
    let (s, _, _) = call(&st, "GET", &format!("/v1/session/{}", ids[0]), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&st, "GET", &format!("/v1/session/{}", ids[2]), None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn sample_endpoint() {
    let st = state();
    let uri = "/v1/sample?domain=t2_noisy&index=4";
    let (s, a, _) = call(&st, "GET", uri, None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b, _) = call(&st, "GET", uri, None).await;
    assert_eq!(a, b);
    assert_eq!(a["sample_id"], json!("t2_noisy:4"));

    let original = &st.samples.as_ref().unwrap().domains["t2_noisy"][4];
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(a["image_png"].as_str().unwrap())
        .unwrap();
    let (w, h, levels) = png16::decode(&bytes).unwrap();
    assert_eq!((w, h), (16, 16));
    for (q, v) in levels.iter().zip(&original.image) {
        let exact = f64::from(*v) * 65535.0;
        assert!((f64::from(*q) - exact).abs() <= 0.5 + 1e-6);
    }
    assert_eq!(rle(&a["ground_truth_rle"]).decode().unwrap(), original.mask);
    assert_eq!(a["descriptor"]["domain"], json!("t2_noisy"));
    assert!(a["descriptor"]["corruption"].is_null());

    let (s, c, _) = call(&st, "GET", "/v1/sample?domain=ct_source&index=0&corruption=heavy_noise&severity=0.8", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(c["descriptor"]["corruption"]["kind"], json!("heavy_noise"));
    assert_eq!(c["descriptor"]["corruption"]["severity"], json!(0.8));
    let src = &st.samples.as_ref().unwrap().domains["ct_source"][0];
    let (want, _) = corrupt_for_intervention(src, CorruptionKind::HeavyNoise, 0.8).unwrap();
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(c["image_png"].as_str().unwrap())
        .unwrap();
    let (_, _, levels) = png16::decode(&bytes).unwrap();
    assert!(levels.iter().zip(&want.image).all(|(q, v)| *q == png16::quantize(*v)));

    // The corrupted id resolves in /segment too.
    let (s, _, _) = call(&st, "POST", "/v1/segment", Some(json!({"sample_id": c["sample_id"]}))).await;
    assert_eq!(s, StatusCode::OK);

    let (s, v, _) = call(&st, "GET", "/v1/sample?domain=mars&index=0", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], json!("unknown_domain"));
    let (s, _, _) = call(&st, "GET", "/v1/sample?domain=ct_source&corruption=melting", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(&st, "GET", "/v1/sample", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // Unindexed draws stay inside the domain.
    let (s, r, _) = call(&st, "GET", "/v1/sample?domain=ct_source", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(r["index"].as_u64().unwrap() < 6);
}

#[tokio::test]
async fn model_info() {
    let st = state();
    let (s, a, _) = call(&st, "GET", "/v1/model/info", None).await;
    assert_eq!(s, StatusCode::OK);
    let file_hash = hex(&Sha256::digest(snapshot().to_bytes()));
    assert_eq!(a["snapshot_hash"], json!(file_hash));
    assert_eq!(a["verbs"].as_array().unwrap().len(), 6);
    assert_eq!(a["reasoner_backend"], json!("rule"));
    assert_eq!(a["config"]["image_size"], json!(16));
    assert!(a["trainable_params"].as_u64().unwrap() < a["total_params"].as_u64().unwrap());
    let help = a["grammar_help"].as_str().unwrap();
    for alias in ["reduce", "enlarge", "denoise", "restore", "sharpen", "noop"] {
        assert!(help.contains(alias));
    }
    let (_, b, _) = call(&st, "GET", "/v1/model/info", None).await;
    assert_eq!(a, b);
}
