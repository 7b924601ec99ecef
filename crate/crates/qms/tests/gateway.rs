mod common;

use std::time::Duration;

use axum::http::StatusCode;
use axum::Router;
use common::{echo_router, platform_with, register, Api};
use qms::server::{bind, serve};
use rand::RngCore;

async fn spawn(router: Router) -> String {
    let (listener, addr) = bind("127.0.0.1", 0).await.unwrap();
    serve(listener, router);
    format!("http://{addr}")
}

async fn closed_port() -> String {
    let (listener, addr) = bind("127.0.0.1", 0).await.unwrap();
    drop(listener);
    format!("http://{addr}")
}

#[tokio::test]
async fn relays_bodies_and_maps_upstream_failures() {
    let echo = spawn(echo_router()).await;
    let slow = spawn(Router::new().fallback(|| async {
        tokio::time::sleep(Duration::from_secs(3)).await;
        "late"
    }))
    .await;
    let down = closed_port().await;
    let (_dir, platform) = platform_with(|cfg| {
        cfg.gateway.extra_routes =
            vec![format!("SERVICE_STUB={echo}"), format!("SERVICE_SLOW={slow}"), format!("SERVICE_DOWN={down}")];
        cfg.gateway.timeout_secs = Some(0.5);
    })
    .await;
    let anon = Api::new(platform.gateway_url());
    let (user, api) = register(&anon, "relay").await;

    let mut payload = vec![0u8; 1 << 20];
    rand::thread_rng().fill_bytes(&mut payload);
    let resp = reqwest::Client::new()
        .put(format!("{}/api/stub/some/path?q=1", platform.gateway_url()))
        .bearer_auth(api.token.as_ref().unwrap())
        .header("x-user-id", "forged")
        .body(payload.clone())
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.headers()["x-echo-method"], "PUT");
    assert_eq!(resp.headers()["x-echo-path"], "/stub/some/path");
    assert_eq!(resp.headers()["x-echo-user"], user.as_str());
    let relayed = resp.bytes().await.unwrap();
    assert_eq!(relayed.len(), payload.len());
    assert!(relayed[..] == payload[..], "relayed body differs");

    let (status, body) = api.get("/api/slow/anything").await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(body["error"], "upstream-timeout");
    let (status, body) = api.get("/api/down/anything").await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error"], "upstream-unreachable");

    let (status, _) = api.get("/api/rms/models").await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn rejects_unknown_internal_and_unauthenticated() {
    let (_dir, platform) = platform_with(|_| {}).await;
    let anon = Api::new(platform.gateway_url());
    let (_, api) = register(&anon, "guard").await;

    let (status, _) = api.get("/api/nowhere/x").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = api.get("/api/rms/internal/users").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = api.get("/not-api").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = anon.get("/api/rms/models").await;
    assert_eq!(status, StatusCode::UNAUTHORIZED, "{body}");
    let (status, _) = anon.with_token("deadbeef").get("/api/rms/models").await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = anon.get("/api/auth/verify").await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn restart_keeps_routes_and_sessions() {
    let echo = spawn(echo_router()).await;
    let (_dir, mut platform) = platform_with(|cfg| cfg.gateway.extra_routes = vec![format!("SERVICE_STUB={echo}")]).await;
    let anon = Api::new(platform.gateway_url());
    let (_, api) = register(&anon, "restart").await;
    let before = std::fs::read_to_string(&platform.gateway_env).unwrap();

    platform.restart_gateway().await.unwrap();
    assert_eq!(std::fs::read_to_string(&platform.gateway_env).unwrap(), before);
    let (status, _) = api.get("/api/rms/models").await;
    assert_eq!(status, StatusCode::OK);
    let resp = api.raw(reqwest::Method::POST, "/api/stub/echo", Some(&serde_json::json!({"x": 1}))).await;
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.text().await.unwrap(), r#"{"x":1}"#);
}

#[tokio::test]
async fn oversized_bodies_are_refused() {
    let echo = spawn(echo_router()).await;
    let (_dir, platform) = platform_with(|cfg| {
        cfg.gateway.extra_routes = vec![format!("SERVICE_STUB={echo}"), "GATEWAY_MAX_BODY_BYTES=1024".into()]
    })
    .await;
    let anon = Api::new(platform.gateway_url());
    let (_, api) = register(&anon, "big").await;
    let resp = reqwest::Client::new()
        .post(format!("{}/api/stub/x", platform.gateway_url()))
        .bearer_auth(api.token.as_ref().unwrap())
        .body(vec![b'a'; 4096])
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 413);
}
