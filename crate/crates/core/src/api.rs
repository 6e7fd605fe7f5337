//! Transport-neutral JSON API. The HTTP server and the in-process CLI both
//! feed requests through [`Api::handle`], so they cannot drift apart.
//!
//! | method | path | body |
//! |---|---|---|
//! | PUT | `/v1/provision` | `{tenant, node?, image, idempotency_key?}` |
//! | DELETE | `/v1/provision/<node>` | `{keep_image, idempotency_key?}` |
//! | PUT | `/v1/snapshot/<node>` | `{name}` |
//! | PUT | `/v1/recover/<node>` | `{new_node?}` |
//! | GET | `/v1/images`, `/v1/nodes`, `/v1/provisions`, `/v1/traffic/<node>` | |
//! | PUT | `/v1/images` | `{name, data}` (base64) |
//! | GET | `/v1/images/<id>/data` | |
//! | PUT | `/v1/images/<id>/share`, `/v1/images/<id>/rename` | `{tenant}`, `{name}` |
//! | DELETE | `/v1/images/<id>` | |
//! | PUT | `/v1/nodes` (operator) | `{mac}` |
//! | PUT | `/v1/nodes/<id>/fail`, `/v1/nodes/<id>/repair` (operator) | |
//! | GET | `/v1/sweep` (operator) | |
//!
//! Errors are `{code, message, failing_step?}`.

use std::collections::HashMap;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::orchestrator::{is_reserved_name, ErrorBody, OrchestratorError, ProvisionRequest, CLONE_PREFIX};
use crate::system::System;
use crate::types::{ImageId, MacAddress, NodeId, TenantId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Principal {
    Tenant(TenantId),
    Operator,
}

/// Maps request credentials to a principal.
pub trait Authenticator: Send + Sync {
    fn authenticate(&self, tenant: Option<&TenantId>, token: Option<&str>) -> Option<Principal>;
}

/// Static per-tenant token table plus an optional operator token.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StaticTokens {
    #[serde(default)]
    pub tenants: HashMap<TenantId, String>,
    #[serde(default)]
    pub operator: Option<String>,
}

impl Authenticator for StaticTokens {
    fn authenticate(&self, tenant: Option<&TenantId>, token: Option<&str>) -> Option<Principal> {
        let token = token?;
        if self.operator.as_deref() == Some(token) && tenant.is_none() {
            return Some(Principal::Operator);
        }
        let tenant = tenant?;
        (self.tenants.get(tenant).map(String::as_str) == Some(token)).then(|| Principal::Tenant(tenant.clone()))
    }
}

/// Accepts any claimed tenant; no tenant means operator. For local,
/// single-user use only.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrustAll;

impl Authenticator for TrustAll {
    fn authenticate(&self, tenant: Option<&TenantId>, _token: Option<&str>) -> Option<Principal> {
        Some(match tenant {
            Some(t) => Principal::Tenant(t.clone()),
            None => Principal::Operator,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Put,
    Delete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiRequest {
    pub method: Method,
    pub path: String,
    pub tenant: Option<TenantId>,
    pub token: Option<String>,
    pub body: Value,
}

impl ApiRequest {
    pub fn new(method: Method, path: impl Into<String>) -> Self {
        Self {
            method,
            path: path.into(),
            tenant: None,
            token: None,
            body: Value::Null,
        }
    }

    pub fn tenant(mut self, tenant: &TenantId) -> Self {
        self.tenant = Some(tenant.clone());
        self
    }

    pub fn token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn body(mut self, body: Value) -> Self {
        self.body = body;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    pub fn is_ok(&self) -> bool {
        self.status < 300
    }

    pub fn error(&self) -> Option<ErrorBody> {
        if self.is_ok() {
            None
        } else {
            serde_json::from_value(self.body.clone()).ok()
        }
    }
}

#[derive(Debug)]
struct ApiError {
    status: u16,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                failing_step: None,
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "bad_request", message)
    }
}

pub fn status_for(code: &str) -> u16 {
    match code {
        "not_found" => 404,
        "access_denied" => 403,
        "unauthenticated" => 401,
        "bad_request" | "invalid_name" => 400,
        "pool_exhausted" | "node_busy" | "node_not_failed" | "duplicate_name" | "image_busy" | "invalid_state" => 409,
        _ => 500,
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let body = e.body();
        Self {
            status: status_for(&body.code),
            body,
        }
    }
}

impl From<crate::image_store::StoreError> for ApiError {
    fn from(e: crate::image_store::StoreError) -> Self {
        OrchestratorError::from(e).into()
    }
}

impl From<crate::isolation::IsolationError> for ApiError {
    fn from(e: crate::isolation::IsolationError) -> Self {
        OrchestratorError::from(e).into()
    }
}

type Handled = Result<Value, ApiError>;

#[derive(Deserialize)]
struct DeprovisionBody {
    #[serde(default)]
    keep_image: bool,
    #[serde(default)]
    idempotency_key: Option<String>,
}

#[derive(Deserialize)]
struct NameBody {
    name: String,
}

#[derive(Deserialize)]
struct RecoverBody {
    #[serde(default)]
    new_node: Option<NodeId>,
}

#[derive(Deserialize)]
struct UploadBody {
    name: String,
    data: String,
}

#[derive(Deserialize)]
struct ShareBody {
    tenant: TenantId,
}

#[derive(Deserialize)]
struct RegisterBody {
    mac: MacAddress,
}

fn parse<T: DeserializeOwned>(body: &Value) -> Result<T, ApiError> {
    let body = if body.is_null() { json!({}) } else { body.clone() };
    serde_json::from_value(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("api value serializes")
}

pub struct Api {
    system: Arc<System>,
    auth: Arc<dyn Authenticator>,
}

impl Api {
    pub fn new(system: Arc<System>, auth: Arc<dyn Authenticator>) -> Self {
        Self { system, auth }
    }

    pub fn system(&self) -> &Arc<System> {
        &self.system
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        match self.route(req) {
            Ok(body) => ApiResponse { status: 200, body },
            Err(e) => ApiResponse {
                status: e.status,
                body: to_json(&e.body),
            },
        }
    }

    fn route(&self, req: &ApiRequest) -> Handled {
        let principal = self
            .auth
            .authenticate(req.tenant.as_ref(), req.token.as_deref())
            .ok_or_else(|| ApiError::new(401, "unauthenticated", "bad or missing credentials"))?;
        let path = req.path.split('?').next().unwrap_or("");
        let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
        let Some(rest) = segs.strip_prefix(&["v1"]) else {
            return Err(ApiError::new(404, "not_found", format!("no route {path}")));
        };
        match principal {
            Principal::Operator => self.operator(req, rest),
            Principal::Tenant(t) => self.tenant(req, rest, &t),
        }
    }

    fn operator(&self, req: &ApiRequest, segs: &[&str]) -> Handled {
        let sys = &self.system;
        match (&req.method, segs) {
            (Method::Put, ["nodes"]) => {
                let b: RegisterBody = parse(&req.body)?;
                let id = sys.isolation.register_node(b.mac)?;
                Ok(json!({ "node": id }))
            }
            (Method::Get, ["nodes"]) => Ok(json!({ "nodes": to_json(&sys.isolation.list()) })),
            (Method::Put, ["nodes", node, "fail"]) => {
                sys.orchestrator.mark_failed(&NodeId::from(*node))?;
                Ok(json!({ "node": node, "health": "failed" }))
            }
            (Method::Put, ["nodes", node, "repair"]) => {
                sys.isolation.repair(&NodeId::from(*node))?;
                Ok(json!({ "node": node, "health": "ok" }))
            }
            (Method::Get, ["provisions"]) => Ok(json!({ "provisions": to_json(&sys.orchestrator.all_records()) })),
            (Method::Get, ["images"]) => Ok(json!({ "images": to_json(&sys.store.all_images()) })),
            (Method::Get, ["sweep"]) => Ok(to_json(&sys.orchestrator.sweep())),
            _ => Err(ApiError::new(
                404,
                "not_found",
                format!("no operator route {}", req.path),
            )),
        }
    }

    fn tenant(&self, req: &ApiRequest, segs: &[&str], tenant: &TenantId) -> Handled {
        let sys = &self.system;
        let orch = &sys.orchestrator;
        match (&req.method, segs) {
            (Method::Put, ["provision"]) => {
                let pr: ProvisionRequest = parse(&req.body)?;
                if &pr.tenant != tenant {
                    return Err(ApiError::new(403, "access_denied", "tenant mismatch"));
                }
                Ok(to_json(&orch.provision(&pr)?))
            }
            (Method::Delete, ["provision", node]) => {
                let b: DeprovisionBody = parse(&req.body)?;
                orch.deprovision_keyed(tenant, &NodeId::from(*node), b.keep_image, b.idempotency_key.as_deref())?;
                Ok(json!({ "node": node, "state": "removed" }))
            }
            (Method::Put, ["snapshot", node]) => {
                let b: NameBody = parse(&req.body)?;
                let id = orch.snapshot(tenant, &NodeId::from(*node), &b.name)?;
                Ok(json!({ "image": id, "name": b.name }))
            }
            (Method::Put, ["recover", node]) => {
                let b: RecoverBody = parse(&req.body)?;
                Ok(to_json(&orch.recover(
                    tenant,
                    &NodeId::from(*node),
                    b.new_node.as_ref(),
                )?))
            }
            (Method::Get, ["images"]) => Ok(json!({ "images": to_json(&sys.store.list_images(tenant)) })),
            (Method::Get, ["nodes"]) => Ok(json!({
                "nodes": to_json(&orch.list_nodes(tenant)),
                "free": to_json(&orch.free_nodes()),
            })),
            (Method::Get, ["provisions"]) => Ok(json!({ "provisions": to_json(&orch.list_provisions(tenant)) })),
            (Method::Get, ["traffic", node]) => Ok(to_json(&orch.get_traffic(tenant, &NodeId::from(*node))?)),
            (Method::Put, ["images"]) => {
                let b: UploadBody = parse(&req.body)?;
                if is_reserved_name(&b.name) {
                    return Err(ApiError::new(400, "invalid_name", format!("{:?} is reserved", b.name)));
                }
                let data = B64
                    .decode(b.data.as_bytes())
                    .map_err(|e| ApiError::bad_request(format!("data: {e}")))?;
                let id = sys.store.import_image(tenant, &b.name, &mut data.as_slice())?;
                Ok(to_json(&sys.store.get_for(tenant, &id)?))
            }
            (Method::Get, ["images", id, "data"]) => {
                let bytes = sys.store.export_bytes(tenant, &ImageId::from(*id))?;
                Ok(json!({ "image": id, "data": B64.encode(bytes) }))
            }
            (Method::Put, ["images", id, "share"]) => {
                let b: ShareBody = parse(&req.body)?;
                sys.store.share_image(tenant, &ImageId::from(*id), &b.tenant)?;
                Ok(to_json(&sys.store.get_for(tenant, &ImageId::from(*id))?))
            }
            (Method::Put, ["images", id, "rename"]) => {
                let b: NameBody = parse(&req.body)?;
                let id = ImageId::from(*id);
                let current = sys.store.get_for(tenant, &id)?;
                if is_reserved_name(&b.name) || current.name.starts_with(CLONE_PREFIX) {
                    return Err(ApiError::new(
                        400,
                        "invalid_name",
                        "orchestrator-managed names cannot change",
                    ));
                }
                sys.store.rename_image(tenant, &id, &b.name)?;
                Ok(to_json(&sys.store.get_for(tenant, &id)?))
            }
            (Method::Delete, ["images", id]) => {
                sys.store.delete_image(tenant, &ImageId::from(*id))?;
                Ok(json!({ "image": id, "state": "deleted" }))
            }
            _ => Err(ApiError::new(
                404,
                "not_found",
                format!("no route {} {}", method_str(&req.method), req.path),
            )),
        }
    }
}

fn method_str(m: &Method) -> &'static str {
    match m {
        Method::Get => "GET",
        Method::Put => "PUT",
        Method::Delete => "DELETE",
    }
}
