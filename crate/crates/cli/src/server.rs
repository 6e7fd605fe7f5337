//! HTTP front end: every request is handed to [`Api::handle`] unchanged.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use metalforge::api::{Api, ApiRequest, Method};
use metalforge::TenantId;
use serde_json::{json, Value};

use crate::client::TENANT_HEADER;

pub fn router(api: Arc<Api>) -> Router {
    Router::new().fallback(handle).with_state(api)
}

pub async fn serve(api: Arc<Api>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(api))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn reject(status: StatusCode, message: String) -> Response {
    (status, Json(json!({ "code": "bad_request", "message": message }))).into_response()
}

async fn handle(
    State(api): State<Arc<Api>>,
    method: axum::http::Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let method = match method {
        axum::http::Method::GET => Method::Get,
        axum::http::Method::PUT => Method::Put,
        axum::http::Method::DELETE => Method::Delete,
        other => return reject(StatusCode::METHOD_NOT_ALLOWED, format!("method {other} not supported")),
    };
    let tenant = match headers.get(TENANT_HEADER).map(|v| v.to_str().map(TenantId::new)) {
        None => None,
        Some(Ok(Ok(t))) => Some(t),
        Some(_) => return reject(StatusCode::BAD_REQUEST, format!("bad {TENANT_HEADER} header")),
    };
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_string);
    let body: Value = if body.is_empty() {
        Value::Null
    } else {
        match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => return reject(StatusCode::BAD_REQUEST, format!("body: {e}")),
        }
    };
    let req = ApiRequest {
        method,
        path: uri.path().to_string(),
        tenant,
        token,
        body,
    };
    let resp = match tokio::task::spawn_blocking(move || api.handle(&req)).await {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(resp.body)).into_response()
}
