use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use trendgen::{router, AppState, ServiceConfig, Store};
use trendgen_core::catalog::{catalog_to_jsonl, Catalog, Division, ProductRecord};
use trendgen_core::compat::{co_occurrence, MulticolorRule, PairingKey};
use trendgen_core::evaluator::{synth_expert_outfits, synth_world, EvaluatorConfig, SynthConfig, SynthWorld};

fn world() -> SynthWorld {
    let frozen = EvaluatorConfig::frozen();
    let cfg = SynthConfig { n: 100, seed: 3, ..frozen.catalog };
    synth_world(&cfg, &frozen.oracle).unwrap()
}

fn app_with(store: Store, token: Option<&str>) -> (Router, Arc<AppState>) {
    let config = ServiceConfig {
        token: token.map(str::to_string),
        ..ServiceConfig::default()
    };
    let state = AppState::new(store, config).unwrap();
    (router(state.clone()), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

/// Service with the synthetic catalog ingested, expert outfits recorded and
/// every pairing trained briefly.
async fn trained(store: Store) -> (Router, Arc<AppState>, SynthWorld) {
    let w = world();
    let (app, state) = app_with(store, None);
    let (s, body) = call(&app, "POST", "/v1/catalog", Some(catalog_to_jsonl(&w.catalog))).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let experts = synth_expert_outfits(&w, &EvaluatorConfig::frozen().experts, 3).unwrap();
    state.store().await.add_outfits(experts).unwrap();
    let (s, body) = call(&app, "POST", "/v1/train", Some(r#"{"pairing":"all","epochs":2}"#.into())).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    (app, state, w)
}

fn first_in(catalog: &Catalog, d: Division) -> String {
    catalog.in_division(d).next().unwrap().product_id.clone()
}

fn records(catalog: &Catalog, n: usize) -> Vec<ProductRecord> {
    catalog.iter().take(n).map(|p| p.to_record()).collect()
}

fn jsonl(records: &[ProductRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
}

#[tokio::test]
async fn healthz_and_empty_state() {
    let (app, _) = app_with(Store::in_memory(), None);
    let (s, body) = call(&app, "GET", "/v1/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert!(body["registry_version"].is_null());

    let (s, body) = call(&app, "GET", "/v1/appearance", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["entries"], 0);
}

#[tokio::test]
async fn recommend_before_training_is_a_conflict() {
    let (app, _) = app_with(Store::in_memory(), None);
    let (s, body) = call(&app, "GET", "/v1/recommend/tops-0000", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "registry_empty");
    assert!(body["message"].is_string());
    assert!(body.get("detail").is_some());
}

#[tokio::test]
async fn ingest_is_all_or_nothing() {
    let w = world();
    let (app, state) = app_with(Store::in_memory(), None);
    let good = records(&w.catalog, 10);

    let mut bad = good.clone();
    bad[4].image_embedding.pop();
    let (s, body) = call(&app, "POST", "/v1/catalog", Some(jsonl(&bad))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid_records");
    assert_eq!(body["detail"]["accepted"], 0);
    let rejected = body["detail"]["rejected"].as_array().unwrap();
    assert_eq!(rejected.len(), 1);
    assert_eq!(rejected[0]["line"], 5);
    assert_eq!(rejected[0]["product_id"], json!(bad[4].product_id));
    assert!(state.store().await.catalog().is_empty());

    let (s, body) = call(&app, "POST", "/v1/catalog", Some("{not json}\n".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["detail"]["rejected"][0]["line"], 1);

    let (s, body) = call(&app, "POST", "/v1/catalog", Some(jsonl(&good))).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["accepted"], 10);
    assert_eq!(body["catalog_size"], 10);

    let again = records(&w.catalog, 12);
    let (s, body) = call(&app, "POST", "/v1/catalog", Some(jsonl(&again))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "duplicate_product");
    assert_eq!(body["detail"]["duplicates"].as_array().unwrap().len(), 10);
    assert_eq!(state.store().await.catalog().len(), 10);
}

#[tokio::test]
async fn training_without_approved_outfits_is_unprocessable() {
    let w = world();
    let (app, _) = app_with(Store::in_memory(), None);
    call(&app, "POST", "/v1/catalog", Some(catalog_to_jsonl(&w.catalog))).await;
    for pairing in ["all", "tops:bottoms"] {
        let body = json!({ "pairing": pairing }).to_string();
        let (s, body) = call(&app, "POST", "/v1/train", Some(body)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(body["code"], "no_training_data");
    }
    let (s, body) = call(&app, "POST", "/v1/train", Some(r#"{"pairing":"tops:tops"}"#.into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid_pairing");
}

#[tokio::test]
async fn recommend_contract() {
    let (app, _, w) = trained(Store::in_memory()).await;
    let top = first_in(&w.catalog, Division::Tops);

    let (s, body) = call(&app, "GET", &format!("/v1/recommend/{top}"), None).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let outfits = body["outfits"].as_array().unwrap();
    assert_eq!(outfits.len(), 3);
    assert_eq!(body["lambda"], 1.0);
    for o in outfits {
        assert_eq!(o["anchor"]["product_id"], json!(top));
        assert_eq!(o["items"].as_array().unwrap().len(), 3);
        assert_eq!(o["duplicate"], false);
        assert_eq!(o["verdict"], "pending");
        assert!(o["outfit_id"].as_str().unwrap().starts_with("outfit-"));
        for item in o["items"].as_array().unwrap() {
            assert!(item["appearance_count"].as_u64().unwrap() >= 1);
            assert!(item["title"].is_string());
        }
    }

    let (s, body) = call(&app, "GET", "/v1/recommend/no-such-product", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "unknown_product");

    for q in ["lambda=-1", "lambda=abc", "count=0", "count=x"] {
        let (s, _) = call(&app, "GET", &format!("/v1/recommend/{top}?{q}"), None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{q}");
    }

    let (s, body) = call(&app, "GET", "/v1/outfits?verdict=pending", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["count"], 3);
    let (s, _) = call(&app, "GET", "/v1/outfits?verdict=maybe", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn table_consistency_after_recommend() {
    let (app, _, w) = trained(Store::in_memory()).await;
    let top = first_in(&w.catalog, Division::Tops);

    let (s, body) = call(&app, "GET", &format!("/v1/recommend/{top}?count=1&lambda=0"), None).await;
    assert_eq!(s, StatusCode::OK);
    let outfit = &body["outfits"][0];
    assert_eq!(body["outfits"].as_array().unwrap().len(), 1);

    let (_, table) = call(&app, "GET", "/v1/appearance", None).await;
    assert_eq!(table["entries"], 3);
    for item in outfit["items"].as_array().unwrap() {
        let id = item["product_id"].as_str().unwrap();
        assert_eq!(table["counts"][id], 1);
        assert_eq!(item["appearance_count"], 1);
    }

    let (s, body) = call(&app, "POST", "/v1/appearance/reset", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["entries_dropped"], 3);
    let (_, table) = call(&app, "GET", "/v1/appearance", None).await;
    assert_eq!(table["entries"], 0);
}

#[tokio::test]
async fn incomplete_registry_is_a_conflict() {
    let w = world();
    let (app, state) = app_with(Store::in_memory(), None);
    call(&app, "POST", "/v1/catalog", Some(catalog_to_jsonl(&w.catalog))).await;
    let experts = synth_expert_outfits(&w, &EvaluatorConfig::frozen().experts, 3).unwrap();
    state.store().await.add_outfits(experts).unwrap();
    let (s, _) = call(&app, "POST", "/v1/train", Some(r#"{"pairing":"tops:bottoms","epochs":1}"#.into())).await;
    assert_eq!(s, StatusCode::OK);

    let top = first_in(&w.catalog, Division::Tops);
    let (s, body) = call(&app, "GET", &format!("/v1/recommend/{top}"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "model_missing");
    assert_eq!(body["detail"]["pairings"], json!(["tops:footwear", "tops:accessories"]));
}

#[tokio::test]
async fn review_contract() {
    let (app, state, w) = trained(Store::in_memory()).await;
    let top = first_in(&w.catalog, Division::Tops);
    let (_, body) = call(&app, "GET", &format!("/v1/recommend/{top}"), None).await;
    let ids: Vec<String> = body["outfits"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["outfit_id"].as_str().unwrap().to_string())
        .collect();

    let review = |id: &str, verdict: &str, reason: Option<&str>| {
        json!({ "outfit_id": id, "verdict": verdict, "reason": reason, "reviewer": "stylist" }).to_string()
    };

    let (s, body) = call(&app, "POST", "/v1/review", Some(review("outfit-999999", "approved", None))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "unknown_outfit");

    let (s, body) = call(&app, "POST", "/v1/review", Some(review(&ids[1], "rejected", None))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "reason_required");

    let (s, body) = call(&app, "POST", "/v1/review", Some(review(&ids[0], "approved", None))).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["verdict"], "approved");
    assert_eq!(body["reviewer"], "stylist");

    let (s, body) = call(&app, "POST", "/v1/review", Some(review(&ids[0], "rejected", Some("variety")))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["code"], "already_reviewed");

    let (s, body) = call(&app, "POST", "/v1/review", Some(review(&ids[1], "rejected", Some("variety")))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["reason"], "variety");

    let (s, _) = call(&app, "POST", "/v1/review", Some("{\"outfit_id\":1}".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // the approved outfit feeds the next triplet construction, the rejected one does not
    let store = state.store().await;
    let approved = store.approved_outfits();
    assert!(approved.iter().any(|o| o.outfit_id == ids[0]));
    assert!(!approved.iter().any(|o| o.outfit_id == ids[1]));
    let ours = store.outfit(&ids[0]).unwrap().clone();
    drop(store);
    let pairing = PairingKey::new(Division::Tops, Division::Bottoms).unwrap();
    let (co, _) = co_occurrence(&w.catalog, &[ours.clone()], pairing, &[&MulticolorRule]).unwrap();
    assert_eq!(co[&top].len(), 1);
    assert!(co[&top].contains(&ours.item_ids[1]));

    let (_, pending) = call(&app, "GET", "/v1/outfits?verdict=pending", None).await;
    assert_eq!(pending["count"], 1);
    let (_, approved) = call(&app, "GET", "/v1/outfits?verdict=approved", None).await;
    assert!(approved["outfits"].as_array().unwrap().iter().any(|o| o["outfit_id"] == json!(ids[0])));

    let (_, m) = call(&app, "GET", "/v1/metrics", None).await;
    assert_eq!(m["outfits"]["generated"], 3);
    assert_eq!(m["approval_rate"], 0.5);
    assert_eq!(m["rejections"]["variety"], 1);
    assert!(m["distinct_item_ratio"].as_f64().unwrap() > 0.0);
}

#[tokio::test]
async fn concurrent_recommends_serialize() {
    let (app, state, w) = trained(Store::in_memory()).await;
    let anchors: Vec<String> = w
        .catalog
        .in_division(Division::Tops)
        .take(8)
        .map(|p| p.product_id.clone())
        .collect();
    let handles: Vec<_> = anchors
        .iter()
        .map(|a| {
            let app = app.clone();
            let uri = format!("/v1/recommend/{a}?count=2");
            tokio::spawn(async move { call(&app, "GET", &uri, None).await })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap().0, StatusCode::OK);
    }
    let store = state.store().await;
    assert_eq!(store.outfits().iter().filter(|o| o.outfit_id.starts_with("outfit-")).count(), 16);
    let total: u64 = store.table().iter().map(|(_, n)| n).sum();
    assert_eq!(total, 16 * 3);
    let mut ids: Vec<&str> = store.outfits().iter().map(|o| o.outfit_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), store.outfits().len());
}

#[tokio::test]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _, w) = trained(Store::open(dir.path()).unwrap()).await;
    let top = first_in(&w.catalog, Division::Tops);
    let (_, first) = call(&app, "GET", &format!("/v1/recommend/{top}"), None).await;
    let (_, table_before) = call(&app, "GET", "/v1/appearance", None).await;
    drop(app);

    let (app, _) = app_with(Store::open(dir.path()).unwrap(), None);
    let (_, health) = call(&app, "GET", "/v1/healthz", None).await;
    assert_eq!(health["products"], 100);
    let (_, table_after) = call(&app, "GET", "/v1/appearance", None).await;
    assert_eq!(table_before, table_after);
    let (_, pending) = call(&app, "GET", "/v1/outfits?verdict=pending", None).await;
    assert_eq!(pending["count"], 3);
    let (s, second) = call(&app, "GET", &format!("/v1/recommend/{top}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(second["outfits"][0]["outfit_id"], "outfit-000003");
    assert_ne!(first["outfits"][0]["items"], second["outfits"][0]["items"]);

    let audit = std::fs::read_to_string(dir.path().join("audit.log")).unwrap();
    assert!(audit.contains("ingest accepted=100"));
}

#[tokio::test]
async fn truncated_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _, w) = trained(Store::open(dir.path()).unwrap()).await;
    let top = first_in(&w.catalog, Division::Tops);
    call(&app, "GET", &format!("/v1/recommend/{top}"), None).await;
    drop(app);

    let table = dir.path().join("appearance.tsv");
    let bytes = std::fs::read(&table).unwrap();
    std::fs::write(&table, &bytes[..bytes.len() - 3]).unwrap();
    let snapshot: Vec<(std::path::PathBuf, Vec<u8>)> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.clone(), std::fs::read(&p).unwrap()))
        .collect();
    assert!(Store::open(dir.path()).is_err());
    for (p, b) in snapshot {
        assert_eq!(std::fs::read(&p).unwrap(), b, "{} was modified", p.display());
    }

    std::fs::write(&table, &bytes).unwrap();
    let model = dir.path().join("models").join("tops-bottoms.tgcm");
    let m = std::fs::read(&model).unwrap();
    std::fs::write(&model, &m[..m.len() / 2]).unwrap();
    let store = Store::open(dir.path()).unwrap();
    assert!(AppState::new(store, ServiceConfig::default()).is_err());
}

#[tokio::test]
async fn token_guards_everything_but_health() {
    let (app, _) = app_with(Store::in_memory(), Some("s3cret"));
    let (s, _) = call(&app, "GET", "/v1/healthz", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, body) = call(&app, "GET", "/v1/appearance", None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(body["code"], "unauthorized");
    let req = Request::builder()
        .uri("/v1/appearance")
        .header("authorization", "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
}
