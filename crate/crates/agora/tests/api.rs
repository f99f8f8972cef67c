mod common;

use std::time::Duration;

use agora::api::{router, ApiConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(ApiConfig {
        scenario_dir: Some(common::scenario_dir()),
        tick: Duration::from_millis(5),
    })
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(&body.to_string())).await
}

async fn create(app: &Router, body: Value) -> String {
    let (status, value) = post(app, "/runs", body).await;
    assert_eq!(status, StatusCode::CREATED, "{value}");
    value["run_id"].as_str().unwrap().to_string()
}

/// Polls the state until the run parks or finishes.
async fn settle(app: &Router, id: &str) -> Value {
    for _ in 0..400 {
        let (status, state) = call(app, "GET", &format!("/runs/{id}/state"), None).await;
        assert_eq!(status, StatusCode::OK);
        if state["status"] == "parked" || state["status"] == "terminal" {
            return state;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    panic!("run {id} never settled");
}

fn prompt_kinds(state: &Value) -> Vec<(String, String)> {
    state["prompts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            (
                p["agent_id"].as_str().unwrap().to_string(),
                p["kind"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

#[tokio::test]
async fn scripted_run_is_created_and_listed() {
    let app = app();
    let id = create(&app, json!({ "scenario": "medical_cooperative" })).await;
    assert_eq!(id, "run-1");
    let state = settle(&app, &id).await;
    assert_eq!(state["status"], "terminal");
    assert_eq!(state["outcome"]["outcome"], "provisioned");
    assert_eq!(state["contracts"].as_array().unwrap().len(), 3);

    let (status, list) = call(&app, "GET", "/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(list["runs"][0]["run_id"], "run-1");
    assert_eq!(list["runs"][0]["outcome"], "provisioned");
}

#[tokio::test]
async fn inline_scenario_and_seed_are_accepted() {
    let app = app();
    let text = std::fs::read_to_string(common::scenario_dir().join("legal_tenancy.json")).unwrap();
    let scenario: Value = serde_json::from_str(&text).unwrap();
    let id = create(&app, json!({ "scenario": scenario, "seed": 11 })).await;
    let state = settle(&app, &id).await;
    assert_eq!(state["outcome"]["outcome"], "provisioned");
}

#[tokio::test]
async fn unknown_run_is_not_found() {
    let app = app();
    for (method, uri) in [("GET", "/runs/run-9/state"), ("GET", "/runs/run-9/events")] {
        let (status, body) = call(&app, method, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["error"], "not_found");
    }
    let (status, _) = post(
        &app,
        "/runs/run-9/expert-feedback",
        json!({ "expert_id": "dr-heart", "verdict": "approve" }),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_requests_are_bad_requests() {
    let app = app();
    let bodies = [
        "{",
        "[]",
        r#"{"mode":"interactive"}"#,
        r#"{"scenario":"medical_cooperative","colour":"red"}"#,
        r#"{"scenario":"../secrets"}"#,
        r#"{"scenario":"does_not_exist"}"#,
        r#"{"scenario":{"sede":1}}"#,
        r#"{"scenario":"medical_cooperative","mode":"batch"}"#,
        r#"{"scenario":42}"#,
    ];
    for body in bodies {
        let (status, value) = call(&app, "POST", "/runs", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(value["error"], "bad_request", "{body}");
    }

    let id = create(
        &app,
        json!({ "scenario": "medical_cooperative", "mode": "interactive" }),
    )
    .await;
    settle(&app, &id).await;
    let uri = format!("/runs/{id}/expert-feedback");
    for body in [
        json!({ "expert_id": "dr-heart", "verdict": "maybe" }),
        json!({ "expert_id": "dr-heart" }),
        json!({ "expert_id": "dr-heart", "verdict": "approve", "extra": 1 }),
    ] {
        let (status, _) = post(&app, &uri, body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    }
    let (status, _) = call(&app, "POST", &uri, Some("not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn interactive_run_is_driven_by_commands() {
    let app = app();
    let id = create(
        &app,
        json!({ "scenario": "medical_cooperative", "mode": "interactive" }),
    )
    .await;
    let state = settle(&app, &id).await;
    assert_eq!(state["status"], "parked");
    let mut prompts = prompt_kinds(&state);
    prompts.sort();
    assert_eq!(
        prompts,
        [
            ("dr-general".to_string(), "feedback".to_string()),
            ("dr-heart".to_string(), "feedback".to_string())
        ]
    );

    let feedback = format!("/runs/{id}/expert-feedback");
    let (status, body) = post(
        &app,
        &feedback,
        json!({ "expert_id": "dr-heart", "verdict": "approve" }),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["accepted"], true);

    // A second answer from the same expert is a conflict and logs nothing.
    let before = settle(&app, &id).await["events"].clone();
    let (status, body) = post(
        &app,
        &feedback,
        json!({ "expert_id": "dr-heart", "verdict": "approve" }),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "conflict");
    assert_eq!(body["reason"], "NotAwaitingFeedback");
    assert_eq!(settle(&app, &id).await["events"], before);

    let (status, _) = post(
        &app,
        &feedback,
        json!({ "expert_id": "dr-general", "verdict": "approve" }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let state = settle(&app, &id).await;
    assert_eq!(state["phase"], "planning");
    assert_eq!(
        prompt_kinds(&state),
        [("planner-1".to_string(), "critique".to_string())]
    );

    let (status, _) = post(
        &app,
        &format!("/runs/{id}/workflow-critique"),
        json!({ "expert_id": "planner-1", "edits": [] }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let state = settle(&app, &id).await;
    assert_eq!(state["outcome"]["outcome"], "provisioned");

    let events = state["events"].clone();
    let (status, body) = post(
        &app,
        &format!("/runs/{id}/consumer-input"),
        json!({ "abandon": true }),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["reason"], "AbandonAfterContract");
    assert_eq!(settle(&app, &id).await["events"], events);
}

#[tokio::test]
async fn verdict_payload_form_is_accepted() {
    let app = app();
    let id = create(
        &app,
        json!({ "scenario": "medical_cooperative", "mode": "interactive" }),
    )
    .await;
    settle(&app, &id).await;
    let feedback = format!("/runs/{id}/expert-feedback");
    let (status, _) = post(
        &app,
        &feedback,
        json!({ "expert_id": "dr-heart", "verdict": "need_more_data", "payload": ["blood_pressure"], "comment": "need a reading" }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = post(
        &app,
        &feedback,
        json!({ "expert_id": "dr-general", "verdict": { "need_more_data": ["age"] } }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (_, events) = call(&app, "GET", &format!("/runs/{id}/events"), None).await;
    let lines = events["events"].as_array().unwrap();
    let rounds = lines
        .iter()
        .filter(|e| e["line"]["event"] == "identification_round")
        .count();
    assert!(rounds >= 1);
    let fb: Vec<&Value> = lines
        .iter()
        .filter(|e| e["line"]["event"] == "command")
        .collect();
    assert_eq!(fb.len(), 2);
    assert_eq!(
        fb[0]["line"]["detail"]["command"]["verdict"],
        json!({ "need_more_data": ["blood_pressure"] })
    );
}

#[tokio::test]
async fn events_are_paged_by_index() {
    let app = app();
    let id = create(&app, json!({ "scenario": "referral" })).await;
    settle(&app, &id).await;
    let (status, all) = call(&app, "GET", &format!("/runs/{id}/events"), None).await;
    assert_eq!(status, StatusCode::OK);
    let total = all["next"].as_u64().unwrap();
    assert!(total > 42);
    assert_eq!(all["events"].as_array().unwrap().len() as u64, total);
    assert_eq!(all["events"][0]["index"], 1);
    assert_eq!(all["events"][0]["line"]["event"], "run");

    let (_, page) = call(&app, "GET", &format!("/runs/{id}/events?since=42"), None).await;
    let events = page["events"].as_array().unwrap();
    assert_eq!(page["since"], 42);
    assert_eq!(events.len() as u64, total - 42);
    assert_eq!(events[0]["index"], 43);
    assert_eq!(events[0]["line"], all["events"][42]["line"]);

    let (_, tail) = call(
        &app,
        "GET",
        &format!("/runs/{id}/events?since={total}&wait_ms=20"),
        None,
    )
    .await;
    assert!(tail["events"].as_array().unwrap().is_empty());
    assert_eq!(tail["next"], total);
}

#[tokio::test]
async fn idle_run_times_out_to_abandoned() {
    let app = app();
    let text =
        std::fs::read_to_string(common::scenario_dir().join("medical_cooperative.json")).unwrap();
    let mut scenario: Value = serde_json::from_str(&text).unwrap();
    scenario["limits"]["interactive_timeout_ticks"] = json!(4);
    let id = create(&app, json!({ "scenario": scenario, "mode": "interactive" })).await;
    let mut state = settle(&app, &id).await;
    for _ in 0..200 {
        if state["status"] == "terminal" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
        state = settle(&app, &id).await;
    }
    assert_eq!(state["outcome"]["outcome"], "abandoned");
}
