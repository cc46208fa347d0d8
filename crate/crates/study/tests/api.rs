use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use dlmap_core::compare::{read_choices, simulate_2afc, ChoiceMatrix, Side};
use dlmap_core::{synth, ImageGrid};
use dlmap_study::{router, Assignment, StudyService};
use serde_json::{json, Value};
use tower::ServiceExt;

const MODELS: [&str; 4] = ["alpha", "bravo", "charlie", "delta"];

/// Flat grey stimuli whose brightness encodes the producing model's quality.
fn write_stimuli(dir: &Path, images: usize, models: &[&str], prefix: &str) -> Vec<Value> {
    let mut out = Vec::new();
    for i in 0..images {
        for (m, model) in models.iter().enumerate() {
            let level = 0.2 + 0.15 * m as f64 + 0.02 * i as f64;
            let path = dir.join(format!("{prefix}{i}-{model}.png"));
            ImageGrid::full(3, 12 + i, 16, level).save_png(&path).unwrap();
            out.push(json!({ "image_id": format!("{prefix}{i}"), "model": model, "path": path }));
        }
    }
    out
}

struct Harness {
    app: Router,
    _dir: tempfile::TempDir,
    study: String,
    stimulus_models: Vec<String>,
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json_call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn harness(images: usize, models: &[&str], training_images: usize, assignment: Value) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let stimuli = write_stimuli(dir.path(), images, models, "img");
    let training = write_stimuli(dir.path(), training_images, &models[..2], "practice");
    let stimulus_models = stimuli.iter().chain(&training).map(|s| s["model"].as_str().unwrap().to_string()).collect();
    let service = StudyService::open(dir.path().join("data")).unwrap();
    let app = router(Arc::new(service));
    let spec = json!({
        "name": "toy", "seed": 42, "stimuli": stimuli, "training": training,
        "assignment": assignment, "metadata": { "luminance_cd_m2": 120.0, "viewing_distance_cm": 60.0 }
    });
    let (status, info) = json_call(&app, Method::POST, "/studies", Some(spec)).await;
    assert_eq!(status, StatusCode::CREATED, "{info}");
    Harness {
        app,
        _dir: dir,
        study: info["study_id"].as_str().unwrap().to_string(),
        stimulus_models,
    }
}

impl Harness {
    async fn session(&self, observer: &str, seed: Option<u64>) -> String {
        let mut body = json!({ "study_id": self.study, "observer_id": observer });
        if let Some(s) = seed {
            body["seed"] = json!(s);
        }
        let (status, v) = json_call(&self.app, Method::POST, "/sessions", Some(body)).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    async fn next(&self, session: &str) -> Value {
        let (status, v) = json_call(&self.app, Method::GET, &format!("/sessions/{session}/next"), None).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        v
    }

    async fn choose(&self, session: &str, trial: u64, side: &str) -> (StatusCode, Value) {
        let body = json!({ "trial_index": trial, "side": side });
        json_call(&self.app, Method::POST, &format!("/sessions/{session}/choices"), Some(body)).await
    }

    fn model_of(&self, url: &str) -> &str {
        let k: usize = url.rsplit('/').next().unwrap().trim_end_matches(".png").parse().unwrap();
        &self.stimulus_models[k]
    }

    async fn image(&self, url: &str) -> ImageGrid {
        let (status, bytes) = call(&self.app, Method::GET, url, None).await;
        assert_eq!(status, StatusCode::OK);
        ImageGrid::from_png_bytes(&bytes).unwrap()
    }

    /// Answer every trial with `side`, returning the shown URL pairs.
    async fn run(&self, session: &str, side: &str) -> Vec<(String, String)> {
        let mut shown = Vec::new();
        loop {
            let v = self.next(session).await;
            if v["done"].as_bool().unwrap() {
                return shown;
            }
            let t = &v["trial"];
            shown.push((t["left_url"].as_str().unwrap().to_string(), t["right_url"].as_str().unwrap().to_string()));
            let (status, _) = self.choose(session, t["trial_index"].as_u64().unwrap(), side).await;
            assert_eq!(status, StatusCode::OK);
        }
    }
}

#[tokio::test]
async fn health_reports_ok() {
    let h = harness(1, &MODELS[..2], 0, json!({ "kind": "all" })).await;
    let (status, v) = json_call(&h.app, Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
}

#[tokio::test]
async fn schedule_covers_every_pair_with_practice_first() {
    // 3 scored pairs (one image, three models) and 2 practice pairs
    let h = harness(1, &MODELS[..3], 2, json!({ "kind": "all" })).await;
    let s = h.session("obs-a", None).await;
    let (_, view) = json_call(&h.app, Method::GET, &format!("/sessions/{s}"), None).await;
    assert_eq!(view["total"], 5);
    assert_eq!(view["training_trials"], 2);
    assert_eq!(view["status"], "training");
    let mut training = Vec::new();
    loop {
        let v = h.next(&s).await;
        if v["done"].as_bool().unwrap() {
            break;
        }
        training.push(v["trial"]["training"].as_bool().unwrap());
        let (_, ack) = h.choose(&s, v["trial"]["trial_index"].as_u64().unwrap(), "left").await;
        assert_eq!(ack["excluded"], training.last().copied().unwrap());
    }
    assert_eq!(training, vec![true, true, false, false, false]);
    let log = read_choices(h._dir.path().join("data").join(&h.study).join("choices.csv")).unwrap();
    assert_eq!(log.iter().filter(|r| r.excluded).count(), 2);
    let mut pairs: Vec<_> = log.iter().filter(|r| !r.excluded).map(|r| r.pair_id.clone()).collect();
    pairs.sort();
    pairs.dedup();
    assert_eq!(pairs.len(), 3);
}

#[tokio::test]
async fn four_models_two_images_give_twelve_pairs() {
    let h = harness(2, &MODELS, 0, json!({ "kind": "all" })).await;
    let (_, info) = json_call(&h.app, Method::GET, &format!("/studies/{}", h.study), None).await;
    assert_eq!(info["pairs"], 12);
    assert_eq!(info["models"], json!(MODELS));
    assert_eq!(info["metadata"]["viewing_distance_cm"], 60.0);
    let s = h.session("obs", None).await;
    assert_eq!(h.run(&s, "right").await.len(), 12);
}

#[tokio::test]
async fn same_observer_and_seed_give_the_same_schedule() {
    let h = harness(2, &MODELS, 1, json!({ "kind": "all" })).await;
    let a = h.session("obs-1", None).await;
    let b = h.session("obs-1", None).await;
    let c = h.session("obs-1", Some(7)).await;
    let (ra, rb, rc) = (h.run(&a, "left").await, h.run(&b, "left").await, h.run(&c, "left").await);
    assert_eq!(ra, rb);
    assert_ne!(ra, rc);
}

#[tokio::test]
async fn pending_trial_is_stable_until_answered() {
    let h = harness(1, &MODELS, 0, json!({ "kind": "all" })).await;
    let s = h.session("obs", None).await;
    let first = h.next(&s).await;
    assert_eq!(first["trial"]["trial_index"], 0);
    assert_eq!(h.next(&s).await, first);
    let (status, ack) = h.choose(&s, 0, "left").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["cursor"], 1);
    assert_eq!(h.next(&s).await["trial"]["trial_index"], 1);
}

#[tokio::test]
async fn stale_and_malformed_choices_are_rejected() {
    let h = harness(1, &MODELS[..3], 0, json!({ "kind": "all" })).await;
    let s = h.session("obs", None).await;
    assert_eq!(h.choose(&s, 0, "left").await.0, StatusCode::OK);
    let (status, v) = h.choose(&s, 0, "left").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");
    assert_eq!(h.choose(&s, 2, "left").await.0, StatusCode::CONFLICT);
    let (status, v) = h.choose(&s, 1, "up").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "contract");
    // nothing was logged by the rejected calls
    let log = read_choices(h._dir.path().join("data").join(&h.study).join("choices.csv")).unwrap();
    assert_eq!(log.len(), 1);
    h.run(&s, "left").await;
    assert_eq!(h.next(&s).await, json!({ "done": true }));
    assert_eq!(h.choose(&s, 3, "left").await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn pause_and_resume_keep_the_pending_trial() {
    let h = harness(1, &MODELS, 0, json!({ "kind": "all" })).await;
    let s = h.session("obs", None).await;
    h.choose(&s, 0, "left").await;
    let pending = h.next(&s).await;
    let (status, v) = json_call(&h.app, Method::POST, &format!("/sessions/{s}/pause"), None).await;
    assert_eq!((status, v["status"].as_str()), (StatusCode::OK, Some("paused")));
    assert_eq!(call(&h.app, Method::GET, &format!("/sessions/{s}/next"), None).await.0, StatusCode::CONFLICT);
    assert_eq!(h.choose(&s, 1, "left").await.0, StatusCode::CONFLICT);
    // a paused session contributes what it completed
    let (_, m) = json_call(&h.app, Method::GET, &format!("/studies/{}/export", h.study), None).await;
    assert_eq!(m["trials"], 1);
    let (status, v) = json_call(&h.app, Method::POST, &format!("/sessions/{s}/resume"), None).await;
    assert_eq!((status, v["status"].as_str()), (StatusCode::OK, Some("active")));
    assert_eq!(h.next(&s).await, pending);
    h.run(&s, "left").await;
    assert_eq!(call(&h.app, Method::POST, &format!("/sessions/{s}/resume"), None).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn export_counts_single_choice_and_refuses_empty_logs() {
    let h = harness(1, &MODELS[..2], 1, json!({ "kind": "all" })).await;
    let (status, v) = json_call(&h.app, Method::GET, &format!("/studies/{}/export", h.study), None).await;
    assert_eq!((status, v["error"].as_str()), (StatusCode::CONFLICT, Some("empty_export")));
    let s = h.session("obs", None).await;
    // practice answers alone still leave nothing to export
    let practice = h.next(&s).await;
    assert_eq!(practice["trial"]["training"], true);
    h.choose(&s, 0, "left").await;
    assert_eq!(call(&h.app, Method::GET, &format!("/studies/{}/export", h.study), None).await.0, StatusCode::CONFLICT);
    let t = h.next(&s).await;
    let left = h.model_of(t["trial"]["left_url"].as_str().unwrap()).to_string();
    let (status, ack) = h.choose(&s, 1, "left").await;
    assert_eq!((status, ack["status"].as_str()), (StatusCode::OK, Some("done")));
    let (_, m) = json_call(&h.app, Method::GET, &format!("/studies/{}/export", h.study), None).await;
    let (w, l) = if left == "alpha" { (0, 1) } else { (1, 0) };
    assert_eq!(m["counts"][w][l], 1);
    assert_eq!(m["counts"][l][w], 0);
    let (status, csv) = call(&h.app, Method::GET, &format!("/studies/{}/export?format=csv", h.study), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(csv).unwrap().starts_with("model,alpha,bravo"));
}

#[tokio::test]
async fn trials_are_blinded_and_shown_at_stored_resolution() {
    let h = harness(2, &MODELS, 1, json!({ "kind": "all" })).await;
    let s = h.session("obs", None).await;
    for _ in 0..3 {
        let (_, raw) = call(&h.app, Method::GET, &format!("/sessions/{s}/next"), None).await;
        let text = String::from_utf8(raw).unwrap();
        assert!(MODELS.iter().all(|m| !text.contains(m)), "{text}");
        let v: Value = serde_json::from_str(&text).unwrap();
        let t = &v["trial"];
        for side in ["left", "right"] {
            let img = h.image(t[format!("{side}_url")].as_str().unwrap()).await;
            assert_eq!(json!([img.width(), img.height()]), t[format!("{side}_size")]);
        }
        h.choose(&s, t["trial_index"].as_u64().unwrap(), "right").await;
    }
    let bad = format!("/studies/{}/images/999.png", h.study);
    assert_eq!(call(&h.app, Method::GET, &bad, None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let h = harness(1, &MODELS[..2], 0, json!({ "kind": "all" })).await;
    let body = json!({ "study_id": "study-404", "observer_id": "x" });
    assert_eq!(json_call(&h.app, Method::POST, "/sessions", Some(body)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&h.app, Method::GET, "/sessions/nope/next", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&h.app, Method::GET, "/studies/nope/export", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn invalid_studies_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(StudyService::open(dir.path()).unwrap()));
    let lonely = write_stimuli(dir.path(), 1, &MODELS[..1], "x");
    let (status, v) = json_call(&app, Method::POST, "/studies", Some(json!({ "name": "n", "stimuli": lonely }))).await;
    assert_eq!((status, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid")));
    let missing = json!([{ "image_id": "a", "model": "m", "path": "/no/such.png" }, { "image_id": "a", "model": "n", "path": "/no/such.png" }]);
    assert_eq!(json_call(&app, Method::POST, "/studies", Some(json!({ "name": "n", "stimuli": missing }))).await.0, StatusCode::BAD_REQUEST);
    let two = write_stimuli(dir.path(), 1, &MODELS[..2], "y");
    let split = json!({ "name": "n", "stimuli": two, "assignment": { "kind": "split", "groups": 2 } });
    assert_eq!(json_call(&app, Method::POST, "/studies", Some(split)).await.0, StatusCode::BAD_REQUEST);
}

/// Observers simulated through the API, each choice drawn by the harness
/// observer model from the served images, must export exactly the tally of
/// those same draws.
#[tokio::test]
async fn api_export_equals_direct_observer_tally() {
    let h = harness(2, &MODELS, 1, json!({ "kind": "all" })).await;
    let quality = |x: &ImageGrid| Ok(4.0 * x.mean());
    let models: Vec<String> = MODELS.iter().map(|m| m.to_string()).collect();
    let mut tally = ChoiceMatrix::zeros(models.clone()).unwrap();
    let mut r = synth::rng(2024);
    for o in 0..6 {
        let s = h.session(&format!("sim-{o}"), None).await;
        loop {
            let v = h.next(&s).await;
            if v["done"].as_bool().unwrap() {
                break;
            }
            let t = &v["trial"];
            let (lu, ru) = (t["left_url"].as_str().unwrap(), t["right_url"].as_str().unwrap());
            let (left, right) = (h.image(lu).await, h.image(ru).await);
            let left_wins = simulate_2afc((&left, &right), &quality, 0.3, &mut r).unwrap();
            if !t["training"].as_bool().unwrap() {
                let (w, l) = if left_wins { (lu, ru) } else { (ru, lu) };
                tally.record(h.model_of(w), h.model_of(l)).unwrap();
            }
            let side = if left_wins { "left" } else { "right" };
            assert_eq!(h.choose(&s, t["trial_index"].as_u64().unwrap(), side).await.0, StatusCode::OK);
        }
    }
    let (_, m) = json_call(&h.app, Method::GET, &format!("/studies/{}/export", h.study), None).await;
    assert_eq!(m["models"], json!(models));
    assert_eq!(m["counts"], json!(tally.counts()));
    assert_eq!(m["trials"], 6 * 12);
    // export is a pure function of the log
    let (_, raw) = call(&h.app, Method::GET, &format!("/studies/{}/log", h.study), None).await;
    let log = dlmap_core::compare::read_choices_from(raw.as_slice()).unwrap();
    assert_eq!(ChoiceMatrix::from_records(&log, Some(&models)).unwrap(), tally);
}

#[tokio::test]
async fn sides_are_balanced_per_observer_and_per_pair() {
    let h = harness(3, &MODELS, 0, json!({ "kind": "all" })).await;
    for o in 0..5 {
        let s = h.session(&format!("obs-{o}"), None).await;
        h.run(&s, "left").await;
    }
    let log = read_choices(h._dir.path().join("data").join(&h.study).join("choices.csv")).unwrap();
    let mut per_pair: BTreeMap<&str, i64> = BTreeMap::new();
    let mut per_observer: BTreeMap<&str, i64> = BTreeMap::new();
    for r in &log {
        // +1 when the alphabetically first model is on the left
        let d = if r.left_model < r.right_model { 1 } else { -1 };
        *per_pair.entry(&r.pair_id).or_default() += d;
        *per_observer.entry(&r.observer_id).or_default() += d;
        assert_eq!(r.chosen_side, Side::Left);
    }
    assert_eq!(per_pair.len(), 18);
    assert!(per_pair.values().all(|d| d.abs() <= 1), "{per_pair:?}");
    assert!(per_observer.values().all(|d| d.abs() <= 1), "{per_observer:?}");
}

#[tokio::test]
async fn split_assignment_deals_disjoint_blocks() {
    let h = harness(2, &MODELS, 0, json!({ "kind": "split", "groups": 3 })).await;
    let mut seen = Vec::new();
    for o in 0..3 {
        let s = h.session(&format!("obs-{o}"), None).await;
        seen.extend(h.run(&s, "left").await);
    }
    assert_eq!(seen.len(), 12);
    let mut keys: Vec<(String, String)> = seen.into_iter().map(|(a, b)| if a < b { (a, b) } else { (b, a) }).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 12);
}

#[test]
fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let stimuli = write_stimuli(dir.path(), 1, &MODELS, "img");
    let spec = serde_json::from_value(json!({ "name": "r", "seed": 3, "stimuli": stimuli })).unwrap();
    let data = dir.path().join("data");
    let (study, session, exported) = {
        let service = StudyService::open(&data).unwrap();
        let study = service.create_study(spec).unwrap().study_id;
        let session = service
            .create_session(serde_json::from_value(json!({ "study_id": study, "observer_id": "o" })).unwrap())
            .unwrap()
            .session_id;
        for k in 0..4 {
            let req = serde_json::from_value(json!({ "trial_index": k, "side": "right" })).unwrap();
            service.record_choice(&session, req).unwrap();
        }
        (study.clone(), session, service.export_choice_matrix(&study).unwrap())
    };
    let service = StudyService::open(&data).unwrap();
    let view = service.session_view(&session).unwrap();
    assert_eq!((view.cursor, view.total), (4, 6));
    assert_eq!(service.export_choice_matrix(&study).unwrap(), exported);
    let pending = service.next_pair(&session).unwrap().trial.unwrap();
    assert_eq!(pending.trial_index, 4);
    // fresh ids never collide with restored ones
    let other = service
        .create_session(serde_json::from_value(json!({ "study_id": study, "observer_id": "p" })).unwrap())
        .unwrap();
    assert_ne!(other.session_id, session);
    assert_eq!(service.list_studies().len(), 1);
    assert_eq!(Assignment::default(), Assignment::All);
}

#[test]
fn concurrent_sessions_append_whole_rows() {
    let dir = tempfile::tempdir().unwrap();
    let stimuli = write_stimuli(dir.path(), 2, &MODELS, "img");
    let service = StudyService::open(dir.path().join("data")).unwrap();
    let study = service
        .create_study(serde_json::from_value(json!({ "name": "c", "stimuli": stimuli })).unwrap())
        .unwrap()
        .study_id;
    std::thread::scope(|scope| {
        for o in 0..4 {
            let (service, study) = (&service, &study);
            scope.spawn(move || {
                let s = service
                    .create_session(serde_json::from_value(json!({ "study_id": study, "observer_id": format!("t{o}") })).unwrap())
                    .unwrap()
                    .session_id;
                while let Some(t) = service.next_pair(&s).unwrap().trial {
                    let req = serde_json::from_value(json!({ "trial_index": t.trial_index, "side": "left" })).unwrap();
                    service.record_choice(&s, req).unwrap();
                }
            });
        }
    });
    let log = service.trial_log(&study).unwrap();
    assert_eq!(log.len(), 4 * 12);
    assert_eq!(service.export_choice_matrix(&study).unwrap().total_trials(), 48);
}
