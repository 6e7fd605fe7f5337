use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Parser, Subcommand};
use metalforge::api::{Api, ApiRequest, Method, StaticTokens, TrustAll};
use metalforge::bench::{self, BenchSpec, Scenario};
use metalforge::{System, SystemConfig, TenantId};
use serde_json::{json, Value};

use crate::client::{Client, ClientError};

pub const EXIT_API: u8 = 1;
pub const EXIT_TRANSPORT: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "metalforge", version, about = "Diskless bare-metal provisioning")]
pub struct Cli {
    /// Server address. Without it, commands run against the local data directory.
    #[arg(long, global = true, env = "METALFORGE_API")]
    pub api: Option<String>,
    /// Local data directory.
    #[arg(long, global = true, env = "METALFORGE_ROOT", default_value = ".metalforge")]
    pub root: PathBuf,
    #[arg(long, global = true, env = "METALFORGE_TENANT")]
    pub tenant: Option<String>,
    #[arg(long, global = true, env = "METALFORGE_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Print raw JSON responses.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    Image(ImageCmd),
    #[command(subcommand)]
    Node(NodeCmd),
    /// Provision a node from an image (id or name).
    Provision {
        #[arg(long)]
        image: String,
        #[arg(long)]
        node: Option<String>,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    Deprovision {
        node: String,
        /// Retain the node's disk as an image.
        #[arg(long)]
        keep_image: bool,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    Snapshot {
        node: String,
        #[arg(long)]
        name: String,
    },
    /// Move a failed node's disk to a healthy node.
    Recover {
        node: String,
        #[arg(long)]
        to: Option<String>,
    },
    Traffic {
        node: String,
    },
    /// List provisions.
    Provisions,
    /// Check global invariants (operator).
    Sweep,
    /// Run a benchmark scenario on a fresh simulated lab and emit CSV.
    Bench {
        scenario: String,
        /// key=value, repeatable.
        #[arg(long = "param", value_parser = parse_kv)]
        params: Vec<(String, String)>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the API over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// JSON file `{tenants: {name: token}, operator: token}`.
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ImageCmd {
    Upload {
        file: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    List,
    Share {
        image: String,
        #[arg(long)]
        with: String,
    },
    Rename {
        image: String,
        name: String,
    },
    Download {
        image: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    Delete {
        image: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum NodeCmd {
    List,
    /// Add a machine to the pool (operator).
    Register {
        mac: String,
    },
    /// Mark a machine dead (operator).
    Fail {
        node: String,
    },
    Repair {
        node: String,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

enum Failure {
    Api(Value),
    Transport(String),
    Local(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Transport(e.to_string())
    }
}

struct Session<'a> {
    client: Client,
    tenant: Option<TenantId>,
    token: Option<String>,
    out: &'a mut dyn Write,
}

impl Session<'_> {
    fn call(&mut self, method: Method, path: &str, body: Value) -> Result<Value, Failure> {
        let mut req = ApiRequest::new(method, path).token(self.token.clone()).body(body);
        req.tenant = self.tenant.clone();
        let resp = self.client.call(&req)?;
        if resp.is_ok() {
            Ok(resp.body)
        } else {
            Err(Failure::Api(resp.body))
        }
    }

    /// Accepts an image id or a name visible to the tenant.
    fn resolve_image(&mut self, image: &str) -> Result<String, Failure> {
        let list = self.call(Method::Get, "/v1/images", Value::Null)?;
        let found = list["images"]
            .as_array()
            .into_iter()
            .flatten()
            .find(|i| i["id"] == image)
            .or_else(|| {
                list["images"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .find(|i| i["name"] == image)
            });
        Ok(found.and_then(|i| i["id"].as_str()).unwrap_or(image).to_string())
    }
}

/// Runs one command, writing its output to `out`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let json_out = cli.json;
    let result = dispatch(cli, out);
    match result {
        Ok(()) => 0,
        Err(Failure::Api(body)) => {
            if json_out {
                let _ = writeln!(err, "{body}");
            } else {
                let code = body["code"].as_str().unwrap_or("error");
                let msg = body["message"].as_str().unwrap_or("");
                let _ = match body["failing_step"].as_str() {
                    Some(step) => writeln!(err, "error: {code}: {msg} (failed at {step})"),
                    None => writeln!(err, "error: {code}: {msg}"),
                };
            }
            EXIT_API
        }
        Err(Failure::Transport(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_TRANSPORT
        }
        Err(Failure::Local(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_API
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let tenant = cli
        .tenant
        .as_deref()
        .map(TenantId::new)
        .transpose()
        .map_err(|e| Failure::Local(format!("--tenant: {e}")))?;
    match cli.command {
        Command::Bench {
            scenario,
            params,
            seed,
            out: path,
        } => return bench_cmd(&scenario, params, seed, path, cli.json, out),
        Command::Serve { listen, tokens } => return serve_cmd(&cli.root, &listen, tokens),
        _ => {}
    }
    let client = match &cli.api {
        Some(addr) => Client::remote(addr),
        None => Client::local(&cli.root)?,
    };
    let mut s = Session {
        client,
        tenant,
        token: cli.token.clone(),
        out,
    };
    let json = cli.json;
    let body = match cli.command {
        Command::Image(cmd) => return image_cmd(&mut s, cmd, json),
        Command::Node(cmd) => return node_cmd(&mut s, cmd, json),
        Command::Provision {
            image,
            node,
            idempotency_key,
        } => {
            let image = s.resolve_image(&image)?;
            let tenant = s.tenant.clone().map(|t| t.to_string());
            let body = json!({ "tenant": tenant, "node": node, "image": image, "idempotency_key": idempotency_key });
            let rec = s.call(Method::Put, "/v1/provision", body)?;
            if !json {
                writeln!(
                    s.out,
                    "{} state={} target={}",
                    text(&rec["node"]),
                    text(&rec["state"]),
                    text(&rec["target"])
                )
                .ok();
            }
            rec
        }
        Command::Deprovision {
            node,
            keep_image,
            idempotency_key,
        } => {
            let body = json!({ "keep_image": keep_image, "idempotency_key": idempotency_key });
            let r = s.call(Method::Delete, &format!("/v1/provision/{node}"), body)?;
            if !json {
                writeln!(s.out, "{node} removed").ok();
            }
            r
        }
        Command::Snapshot { node, name } => {
            let r = s.call(Method::Put, &format!("/v1/snapshot/{node}"), json!({ "name": name }))?;
            if !json {
                writeln!(s.out, "{} {}", text(&r["image"]), text(&r["name"])).ok();
            }
            r
        }
        Command::Recover { node, to } => {
            let rec = s.call(Method::Put, &format!("/v1/recover/{node}"), json!({ "new_node": to }))?;
            if !json {
                writeln!(
                    s.out,
                    "{} state={} target={}",
                    text(&rec["node"]),
                    text(&rec["state"]),
                    text(&rec["target"])
                )
                .ok();
            }
            rec
        }
        Command::Traffic { node } => {
            let c = s.call(Method::Get, &format!("/v1/traffic/{node}"), Value::Null)?;
            if !json {
                writeln!(
                    s.out,
                    "bytes_read={} bytes_written={} read_ops={} write_ops={}",
                    c["bytes_read"], c["bytes_written"], c["read_ops"], c["write_ops"]
                )
                .ok();
            }
            c
        }
        Command::Provisions => {
            let r = s.call(Method::Get, "/v1/provisions", Value::Null)?;
            if !json {
                for p in r["provisions"].as_array().into_iter().flatten() {
                    writeln!(
                        s.out,
                        "{}\t{}\t{}\t{}",
                        text(&p["node"]),
                        text(&p["state"]),
                        text(&p["clone_name"]),
                        text(&p["target"])
                    )
                    .ok();
                }
            }
            r
        }
        Command::Sweep => {
            let r = s.call(Method::Get, "/v1/sweep", Value::Null)?;
            if !json {
                let v = r["violations"].as_array().map(Vec::len).unwrap_or(0);
                writeln!(s.out, "{v} violations").ok();
                for x in r["violations"].as_array().into_iter().flatten() {
                    writeln!(s.out, "  {x}").ok();
                }
            }
            r
        }
        Command::Bench { .. } | Command::Serve { .. } => unreachable!(),
    };
    if json {
        writeln!(s.out, "{body}").ok();
    }
    Ok(())
}

fn text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn image_cmd(s: &mut Session, cmd: ImageCmd, json: bool) -> Result<(), Failure> {
    let body = match cmd {
        ImageCmd::Upload { file, name } => {
            let data = std::fs::read(&file).map_err(|e| Failure::Local(format!("{}: {e}", file.display())))?;
            let name = name.unwrap_or_else(|| {
                file.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            let rec = s.call(
                Method::Put,
                "/v1/images",
                json!({ "name": name, "data": B64.encode(data) }),
            )?;
            if !json {
                writeln!(
                    s.out,
                    "{} {} {} bytes",
                    text(&rec["id"]),
                    text(&rec["name"]),
                    rec["virtual_size"]
                )
                .ok();
            }
            rec
        }
        ImageCmd::List => {
            let r = s.call(Method::Get, "/v1/images", Value::Null)?;
            if !json {
                for i in r["images"].as_array().into_iter().flatten() {
                    writeln!(
                        s.out,
                        "{}\t{}\t{}\t{}\t{}",
                        text(&i["id"]),
                        text(&i["name"]),
                        text(&i["kind"]),
                        i["virtual_size"],
                        text(&i["tenant"])
                    )
                    .ok();
                }
            }
            r
        }
        ImageCmd::Share { image, with } => {
            let id = s.resolve_image(&image)?;
            let r = s.call(
                Method::Put,
                &format!("/v1/images/{id}/share"),
                json!({ "tenant": with }),
            )?;
            if !json {
                writeln!(s.out, "{id} shared with {with}").ok();
            }
            r
        }
        ImageCmd::Rename { image, name } => {
            let id = s.resolve_image(&image)?;
            let r = s.call(Method::Put, &format!("/v1/images/{id}/rename"), json!({ "name": name }))?;
            if !json {
                writeln!(s.out, "{id} {name}").ok();
            }
            r
        }
        ImageCmd::Download { image, out } => {
            let id = s.resolve_image(&image)?;
            let r = s.call(Method::Get, &format!("/v1/images/{id}/data"), Value::Null)?;
            let data = B64
                .decode(r["data"].as_str().unwrap_or_default())
                .map_err(|e| Failure::Local(format!("bad image data: {e}")))?;
            std::fs::write(&out, &data).map_err(|e| Failure::Local(format!("{}: {e}", out.display())))?;
            let r = json!({ "image": id, "bytes": data.len(), "path": out });
            if !json {
                writeln!(s.out, "{id} {} bytes -> {}", data.len(), out.display()).ok();
            }
            r
        }
        ImageCmd::Delete { image } => {
            let id = s.resolve_image(&image)?;
            let r = s.call(Method::Delete, &format!("/v1/images/{id}"), Value::Null)?;
            if !json {
                writeln!(s.out, "{id} deleted").ok();
            }
            r
        }
    };
    if json {
        writeln!(s.out, "{body}").ok();
    }
    Ok(())
}

fn node_cmd(s: &mut Session, cmd: NodeCmd, json: bool) -> Result<(), Failure> {
    let body = match cmd {
        NodeCmd::List => {
            let r = s.call(Method::Get, "/v1/nodes", Value::Null)?;
            if !json {
                for n in r["nodes"].as_array().into_iter().flatten() {
                    writeln!(
                        s.out,
                        "{}\t{}\t{}\t{}\t{}",
                        text(&n["id"]),
                        text(&n["mac"]),
                        text(&n["pool_state"]),
                        text(&n["health"]),
                        text(&n["owner"])
                    )
                    .ok();
                }
                for id in r["free"].as_array().into_iter().flatten() {
                    writeln!(s.out, "{}\t-\tfree\tok\t-", text(id)).ok();
                }
            }
            r
        }
        NodeCmd::Register { mac } => {
            let r = s.call(Method::Put, "/v1/nodes", json!({ "mac": mac }))?;
            if !json {
                writeln!(s.out, "{}", text(&r["node"])).ok();
            }
            r
        }
        NodeCmd::Fail { node } => {
            let r = s.call(Method::Put, &format!("/v1/nodes/{node}/fail"), Value::Null)?;
            if !json {
                writeln!(s.out, "{node} failed").ok();
            }
            r
        }
        NodeCmd::Repair { node } => {
            let r = s.call(Method::Put, &format!("/v1/nodes/{node}/repair"), Value::Null)?;
            if !json {
                writeln!(s.out, "{node} repaired").ok();
            }
            r
        }
    };
    if json {
        writeln!(s.out, "{body}").ok();
    }
    Ok(())
}

fn bench_cmd(
    scenario: &str,
    params: Vec<(String, String)>,
    seed: u64,
    path: Option<PathBuf>,
    json: bool,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let scenario: Scenario = scenario
        .parse()
        .map_err(|e: bench::BenchError| Failure::Local(e.to_string()))?;
    let spec = params
        .into_iter()
        .fold(BenchSpec::new(scenario).seed(seed), |spec, (k, v)| spec.param(&k, v));
    let report = bench::run(&spec).map_err(|e| Failure::Local(e.to_string()))?;
    if let Some(p) = &path {
        std::fs::write(p, &report.csv).map_err(|e| Failure::Local(format!("{}: {e}", p.display())))?;
    }
    if json {
        writeln!(out, "{}", json!({ "csv": report.csv, "summary": report.summary })).ok();
    } else {
        if path.is_none() {
            write!(out, "{}", report.csv).ok();
        }
        // keep stdout pure CSV unless it went to a file
        if path.is_some() {
            writeln!(out, "{}", report.summary).ok();
        } else {
            eprintln!("{}", report.summary);
        }
    }
    Ok(())
}

fn serve_cmd(root: &std::path::Path, listen: &str, tokens: Option<PathBuf>) -> Result<(), Failure> {
    let sys = System::open(SystemConfig::at(root)).map_err(|e| Failure::Local(e.to_string()))?;
    let auth: Arc<dyn metalforge::api::Authenticator> = match tokens {
        Some(p) => {
            let raw = std::fs::read_to_string(&p).map_err(|e| Failure::Local(format!("{}: {e}", p.display())))?;
            let t: StaticTokens =
                serde_json::from_str(&raw).map_err(|e| Failure::Local(format!("{}: {e}", p.display())))?;
            Arc::new(t)
        }
        None => {
            eprintln!("warning: no --tokens file, every request is trusted");
            Arc::new(TrustAll)
        }
    };
    let api = Arc::new(Api::new(Arc::new(sys), auth));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Local(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        crate::server::serve(api, listener).await
    })
    .map_err(|e| Failure::Transport(e.to_string()))
}
