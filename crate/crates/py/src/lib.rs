//! Python bindings. Every call goes through the same JSON API the HTTP
//! server and CLI use; results come back as plain dicts and lists.

use std::collections::BTreeMap;
use std::sync::Arc;

use metalforge::api::{Api, ApiRequest, Method, TrustAll};
use metalforge::bench::{self, BenchSpec, Scenario};
use metalforge::{System as CoreSystem, SystemConfig, TenantId};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyBytes, PyDict, PyList, PyString};
use serde_json::{json, Value};

create_exception!(metalforge_py, MetalforgeError, PyException);

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (_, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(m) => {
            let dict = PyDict::new(py);
            for (k, x) in m {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn tenant(s: &str) -> PyResult<TenantId> {
    TenantId::new(s).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn method(s: &str) -> PyResult<Method> {
    match s.to_ascii_uppercase().as_str() {
        "GET" => Ok(Method::Get),
        "PUT" => Ok(Method::Put),
        "DELETE" => Ok(Method::Delete),
        other => Err(PyValueError::new_err(format!("unsupported method {other}"))),
    }
}

/// A metalforge installation: persistent when given a root directory,
/// otherwise in memory. Tenant names are trusted as given.
#[pyclass(module = "metalforge_py")]
struct System {
    api: Api,
}

impl System {
    fn call(&self, py: Python<'_>, req: ApiRequest) -> PyResult<Py<PyAny>> {
        let resp = py.detach(|| self.api.handle(&req));
        if resp.is_ok() {
            return Ok(to_py(py, &resp.body)?.unbind());
        }
        let code = resp.body["code"].as_str().unwrap_or("error").to_string();
        let msg = resp.body["message"].as_str().unwrap_or("").to_string();
        Err(MetalforgeError::new_err((code, msg)))
    }

    fn as_tenant(&self, py: Python<'_>, t: &str, m: Method, path: &str, body: Value) -> PyResult<Py<PyAny>> {
        self.call(py, ApiRequest::new(m, path).tenant(&tenant(t)?).body(body))
    }

    fn as_operator(&self, py: Python<'_>, m: Method, path: &str, body: Value) -> PyResult<Py<PyAny>> {
        self.call(py, ApiRequest::new(m, path).body(body))
    }
}

#[pymethods]
impl System {
    #[new]
    #[pyo3(signature = (root=None))]
    fn new(root: Option<std::path::PathBuf>) -> PyResult<Self> {
        let config = root.map(SystemConfig::at).unwrap_or_else(SystemConfig::in_memory);
        let sys = CoreSystem::open(config).map_err(|e| MetalforgeError::new_err(("open", e.to_string())))?;
        Ok(Self {
            api: Api::new(Arc::new(sys), Arc::new(TrustAll)),
        })
    }

    /// Raw API call. `tenant=None` acts as the operator.
    #[pyo3(signature = (method, path, tenant=None, body=None))]
    fn request(
        &self,
        py: Python<'_>,
        method: &str,
        path: &str,
        tenant: Option<&str>,
        body: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Py<PyAny>> {
        let mut req = ApiRequest::new(self::method(method)?, path);
        if let Some(t) = tenant {
            req = req.tenant(&self::tenant(t)?);
        }
        if let Some(b) = body {
            req = req.body(from_py(b)?);
        }
        self.call(py, req)
    }

    fn register_node(&self, py: Python<'_>, mac: &str) -> PyResult<Py<PyAny>> {
        self.as_operator(py, Method::Put, "/v1/nodes", json!({ "mac": mac }))
    }

    fn fail_node(&self, py: Python<'_>, node: &str) -> PyResult<Py<PyAny>> {
        self.as_operator(py, Method::Put, &format!("/v1/nodes/{node}/fail"), Value::Null)
    }

    fn repair_node(&self, py: Python<'_>, node: &str) -> PyResult<Py<PyAny>> {
        self.as_operator(py, Method::Put, &format!("/v1/nodes/{node}/repair"), Value::Null)
    }

    fn sweep(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        self.as_operator(py, Method::Get, "/v1/sweep", Value::Null)
    }

    fn upload_image(&self, py: Python<'_>, tenant: &str, name: &str, data: &[u8]) -> PyResult<Py<PyAny>> {
        use base64::Engine as _;
        let data = base64::engine::general_purpose::STANDARD.encode(data);
        self.as_tenant(
            py,
            tenant,
            Method::Put,
            "/v1/images",
            json!({ "name": name, "data": data }),
        )
    }

    fn download_image<'py>(&self, py: Python<'py>, tenant: &str, image: &str) -> PyResult<Bound<'py, PyBytes>> {
        use base64::Engine as _;
        let r = self.as_tenant(
            py,
            tenant,
            Method::Get,
            &format!("/v1/images/{image}/data"),
            Value::Null,
        )?;
        let text: String = r.bind(py).get_item("data")?.extract()?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn list_images(&self, py: Python<'_>, tenant: &str) -> PyResult<Py<PyAny>> {
        let r = self.as_tenant(py, tenant, Method::Get, "/v1/images", Value::Null)?;
        Ok(r.bind(py).get_item("images")?.unbind())
    }

    fn share_image(&self, py: Python<'_>, tenant: &str, image: &str, with_tenant: &str) -> PyResult<Py<PyAny>> {
        let path = format!("/v1/images/{image}/share");
        self.as_tenant(py, tenant, Method::Put, &path, json!({ "tenant": with_tenant }))
    }

    fn rename_image(&self, py: Python<'_>, tenant: &str, image: &str, name: &str) -> PyResult<Py<PyAny>> {
        let path = format!("/v1/images/{image}/rename");
        self.as_tenant(py, tenant, Method::Put, &path, json!({ "name": name }))
    }

    fn delete_image(&self, py: Python<'_>, tenant: &str, image: &str) -> PyResult<Py<PyAny>> {
        self.as_tenant(py, tenant, Method::Delete, &format!("/v1/images/{image}"), Value::Null)
    }

    fn list_nodes(&self, py: Python<'_>, tenant: &str) -> PyResult<Py<PyAny>> {
        self.as_tenant(py, tenant, Method::Get, "/v1/nodes", Value::Null)
    }

    fn list_provisions(&self, py: Python<'_>, tenant: &str) -> PyResult<Py<PyAny>> {
        let r = self.as_tenant(py, tenant, Method::Get, "/v1/provisions", Value::Null)?;
        Ok(r.bind(py).get_item("provisions")?.unbind())
    }

    #[pyo3(signature = (tenant, image, node=None, idempotency_key=None))]
    fn provision(
        &self,
        py: Python<'_>,
        tenant: &str,
        image: &str,
        node: Option<&str>,
        idempotency_key: Option<&str>,
    ) -> PyResult<Py<PyAny>> {
        let body = json!({ "tenant": tenant, "image": image, "node": node, "idempotency_key": idempotency_key });
        self.as_tenant(py, tenant, Method::Put, "/v1/provision", body)
    }

    #[pyo3(signature = (tenant, node, keep_image=false))]
    fn deprovision(&self, py: Python<'_>, tenant: &str, node: &str, keep_image: bool) -> PyResult<Py<PyAny>> {
        let path = format!("/v1/provision/{node}");
        self.as_tenant(py, tenant, Method::Delete, &path, json!({ "keep_image": keep_image }))
    }

    fn snapshot(&self, py: Python<'_>, tenant: &str, node: &str, name: &str) -> PyResult<Py<PyAny>> {
        self.as_tenant(
            py,
            tenant,
            Method::Put,
            &format!("/v1/snapshot/{node}"),
            json!({ "name": name }),
        )
    }

    #[pyo3(signature = (tenant, node, new_node=None))]
    fn recover(&self, py: Python<'_>, tenant: &str, node: &str, new_node: Option<&str>) -> PyResult<Py<PyAny>> {
        let path = format!("/v1/recover/{node}");
        self.as_tenant(py, tenant, Method::Put, &path, json!({ "new_node": new_node }))
    }

    fn traffic(&self, py: Python<'_>, tenant: &str, node: &str) -> PyResult<Py<PyAny>> {
        self.as_tenant(py, tenant, Method::Get, &format!("/v1/traffic/{node}"), Value::Null)
    }
}

/// Runs a benchmark scenario on a fresh simulated lab. Returns
/// `(csv, summary)`.
#[pyfunction]
#[pyo3(signature = (scenario, params=None, seed=0))]
fn run_bench(
    py: Python<'_>,
    scenario: &str,
    params: Option<BTreeMap<String, String>>,
    seed: u64,
) -> PyResult<(String, String)> {
    let scenario: Scenario = scenario
        .parse()
        .map_err(|e: bench::BenchError| PyValueError::new_err(e.to_string()))?;
    let spec = params
        .unwrap_or_default()
        .into_iter()
        .fold(BenchSpec::new(scenario).seed(seed), |s, (k, v)| s.param(&k, v));
    let report = py
        .detach(|| bench::run(&spec))
        .map_err(|e| MetalforgeError::new_err(("bench", e.to_string())))?;
    Ok((report.csv, report.summary))
}

#[pymodule]
fn metalforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<System>()?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add("MetalforgeError", m.py().get_type::<MetalforgeError>())?;
    Ok(())
}
