//! Sends API requests either to an in-process [`Api`] over a local data
//! directory or to a remote server over HTTP.

use std::path::Path;
use std::sync::Arc;

use metalforge::api::{Api, ApiRequest, ApiResponse, Method, TrustAll};
use metalforge::{System, SystemConfig};
use serde_json::Value;

pub const TENANT_HEADER: &str = "x-metalforge-tenant";

#[derive(Debug)]
pub enum ClientError {
    Open(String),
    Transport(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Open(m) => write!(f, "cannot open local store: {m}"),
            ClientError::Transport(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for ClientError {}

pub enum Client {
    Local(Api),
    Remote { agent: ureq::Agent, base: String },
}

impl Client {
    /// Local mode trusts the claimed tenant; anyone who can read the data
    /// directory can read everything in it anyway.
    pub fn local(root: &Path) -> Result<Self, ClientError> {
        let sys = System::open(SystemConfig::at(root)).map_err(|e| ClientError::Open(e.to_string()))?;
        Ok(Client::Local(Api::new(Arc::new(sys), Arc::new(TrustAll))))
    }

    pub fn remote(addr: &str) -> Self {
        let base = if addr.contains("://") {
            addr.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", addr.trim_end_matches('/'))
        };
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client::Remote { agent, base }
    }

    pub fn call(&self, req: &ApiRequest) -> Result<ApiResponse, ClientError> {
        match self {
            Client::Local(api) => Ok(api.handle(req)),
            Client::Remote { agent, base } => remote_call(agent, base, req),
        }
    }
}

fn remote_call(agent: &ureq::Agent, base: &str, req: &ApiRequest) -> Result<ApiResponse, ClientError> {
    let url = format!("{base}{}", req.path);
    let transport = |e: ureq::Error| ClientError::Transport(format!("{url}: {e}"));
    let body = if req.body.is_null() {
        Value::Object(Default::default())
    } else {
        req.body.clone()
    };
    let mut resp = match req.method {
        Method::Get => with_headers(agent.get(&url), req).call(),
        Method::Put => with_headers(agent.put(&url), req).send_json(&body),
        Method::Delete => with_headers(agent.delete(&url), req).force_send_body().send_json(&body),
    }
    .map_err(transport)?;
    let status = resp.status().as_u16();
    let body: Value = resp.body_mut().read_json().map_err(transport)?;
    Ok(ApiResponse { status, body })
}

fn with_headers<B>(mut b: ureq::RequestBuilder<B>, req: &ApiRequest) -> ureq::RequestBuilder<B> {
    if let Some(t) = &req.tenant {
        b = b.header(TENANT_HEADER, t.as_str());
    }
    if let Some(tok) = &req.token {
        b = b.header("authorization", format!("Bearer {tok}"));
    }
    b
}
