//! Backends in another process, reached over TCP with one JSON object per line.
//!
//! Request: `{"request_id": n, "op": "...", "payload": {...}}`.
//! Response: `{"request_id": n, "result": ...}` or `{"request_id": n, "error": BackendError}`.
//! Images travel as `{"id": ..., "png": <base64>}`.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Backend, BackendError, BackendResult, BackendSuite, Decomposer, Expert, Grounder, Image,
    ImageEmbedder, TextEncoder, VisionLanguageModel,
};
use crate::experts::ExpertOutput;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Request {
    request_id: u64,
    op: String,
    payload: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Response {
    request_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<BackendError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandleInfo {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub capacity: Option<usize>,
}

/// What a server exposes, returned by the `describe` op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Description {
    pub protocol: u32,
    pub decomposer: HandleInfo,
    pub grounder: HandleInfo,
    pub vlm: HandleInfo,
    pub encoder: HandleInfo,
    pub encoder_dim: usize,
    pub experts: Vec<HandleInfo>,
    #[serde(default)]
    pub image_embedder: Option<HandleInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireImage {
    id: String,
    png: String,
}

fn to_wire(image: &Image) -> BackendResult<Value> {
    let png = image
        .to_png_bytes()
        .map_err(|e| BackendError::rejected("remote", e.to_string()))?;
    Ok(json!(WireImage {
        id: image.id().to_owned(),
        png: STANDARD.encode(png),
    }))
}

fn from_wire(v: &Value) -> Result<Image, String> {
    let w: WireImage = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
    let bytes = STANDARD.decode(w.png).map_err(|e| e.to_string())?;
    Image::from_png_bytes(w.id, &bytes).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct WireMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Connection-per-request client with a timeout and one retry on transport failure.
#[derive(Debug)]
pub struct RemoteClient {
    addr: SocketAddr,
    timeout: Duration,
    next_id: AtomicU64,
}

impl RemoteClient {
    pub fn new(endpoint: &str, timeout: Duration) -> BackendResult<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| BackendError::unavailable(endpoint, e.to_string()))?
            .next()
            .ok_or_else(|| BackendError::unavailable(endpoint, "address did not resolve"))?;
        Ok(Self {
            addr,
            timeout,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn once(&self, backend: &str, req: &Request) -> BackendResult<Value> {
        let io = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => BackendError::Timeout {
                backend: backend.to_owned(),
            },
            _ => BackendError::unavailable(backend, e.to_string()),
        };
        let stream = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(io)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(io)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(io)?;
        let mut line = serde_json::to_string(req).expect("request serializes");
        line.push('\n');
        (&stream).write_all(line.as_bytes()).map_err(io)?;
        let mut reply = String::new();
        BufReader::new(&stream).read_line(&mut reply).map_err(io)?;
        let protocol = |reason: String| BackendError::Protocol {
            backend: backend.to_owned(),
            reason,
        };
        if reply.is_empty() {
            return Err(protocol("connection closed without a response".into()));
        }
        let resp: Response = serde_json::from_str(&reply).map_err(|e| protocol(e.to_string()))?;
        if resp.request_id != req.request_id {
            return Err(protocol(format!("response id {} for request {}", resp.request_id, req.request_id)));
        }
        match (resp.result, resp.error) {
            (_, Some(e)) => Err(e),
            (Some(v), None) => Ok(v),
            (None, None) => Err(protocol("response has neither result nor error".into())),
        }
    }

    pub fn call<T: DeserializeOwned>(&self, backend: &str, op: &str, payload: Value) -> BackendResult<T> {
        let req = Request {
            request_id: self.next_id.fetch_add(1, Ordering::Relaxed),
            op: op.to_owned(),
            payload,
        };
        let v = match self.once(backend, &req) {
            Err(BackendError::Unavailable { .. } | BackendError::Timeout { .. }) => self.once(backend, &req)?,
            other => other?,
        };
        serde_json::from_value(v).map_err(|e| BackendError::Protocol {
            backend: backend.to_owned(),
            reason: e.to_string(),
        })
    }

    pub fn describe(&self) -> BackendResult<Description> {
        let d: Description = self.call("remote", "describe", json!({}))?;
        if d.protocol != PROTOCOL_VERSION {
            return Err(BackendError::Protocol {
                backend: "remote".into(),
                reason: format!("server speaks protocol {}, client {}", d.protocol, PROTOCOL_VERSION),
            });
        }
        Ok(d)
    }
}

/// A single remote handle.
#[derive(Debug, Clone)]
pub struct Remote {
    client: Arc<RemoteClient>,
    info: HandleInfo,
    dim: usize,
    expert_index: usize,
}

impl Backend for Remote {
    fn name(&self) -> &str {
        &self.info.name
    }
    fn version(&self) -> &str {
        &self.info.version
    }
    fn capacity(&self) -> Option<usize> {
        self.info.capacity
    }
}

impl Decomposer for Remote {
    fn decompose(&self, text: &str) -> BackendResult<Vec<String>> {
        self.client.call(self.name(), "decompose", json!({ "text": text }))
    }
}

impl Grounder for Remote {
    fn ground(&self, image: &Image, query: &str) -> BackendResult<Array2<f64>> {
        let m: WireMap = self
            .client
            .call(self.name(), "ground", json!({ "image": to_wire(image)?, "query": query }))?;
        Array2::from_shape_vec((m.rows, m.cols), m.values).map_err(|e| BackendError::Protocol {
            backend: self.name().to_owned(),
            reason: e.to_string(),
        })
    }
}

impl VisionLanguageModel for Remote {
    fn answer(&self, image: &Image, question: &str) -> BackendResult<String> {
        self.client
            .call(self.name(), "answer", json!({ "image": to_wire(image)?, "question": question }))
    }
}

impl TextEncoder for Remote {
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed(&self, text: &str) -> BackendResult<Vec<f64>> {
        self.client.call(self.name(), "embed", json!({ "text": text }))
    }
}

impl Expert for Remote {
    fn run(&self, image: &Image) -> BackendResult<ExpertOutput> {
        self.client
            .call(self.name(), "expert", json!({ "index": self.expert_index, "image": to_wire(image)? }))
    }
}

impl ImageEmbedder for Remote {
    fn embed_image(&self, image: &Image) -> BackendResult<Vec<f64>> {
        self.client.call(self.name(), "embed_image", json!({ "image": to_wire(image)? }))
    }
}

/// Build a suite whose handles all forward to the server at `endpoint`.
pub fn remote_suite(endpoint: &str, timeout: Duration) -> BackendResult<BackendSuite> {
    let client = Arc::new(RemoteClient::new(endpoint, timeout)?);
    let d = client.describe()?;
    let handle = |info: &HandleInfo, expert_index: usize| {
        Arc::new(Remote {
            client: Arc::clone(&client),
            info: info.clone(),
            dim: d.encoder_dim,
            expert_index,
        })
    };
    Ok(BackendSuite {
        decomposer: handle(&d.decomposer, 0),
        grounder: handle(&d.grounder, 0),
        vlm: handle(&d.vlm, 0),
        encoder: handle(&d.encoder, 0),
        experts: d
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| handle(e, i) as Arc<dyn Expert>)
            .collect(),
        image_embedder: d.image_embedder.as_ref().map(|e| handle(e, 0) as Arc<dyn ImageEmbedder>),
    })
}

fn info(b: &dyn Backend) -> HandleInfo {
    HandleInfo {
        name: b.name().to_owned(),
        version: b.version().to_owned(),
        capacity: b.capacity(),
    }
}

pub fn describe_suite(suite: &BackendSuite) -> Description {
    Description {
        protocol: PROTOCOL_VERSION,
        decomposer: info(suite.decomposer.as_ref()),
        grounder: info(suite.grounder.as_ref()),
        vlm: info(suite.vlm.as_ref()),
        encoder: info(suite.encoder.as_ref()),
        encoder_dim: suite.encoder.dim(),
        experts: suite.experts.iter().map(|e| info(e.as_ref())).collect(),
        image_embedder: suite.image_embedder.as_ref().map(|e| info(e.as_ref())),
    }
}

fn field<'a>(p: &'a Value, key: &str) -> BackendResult<&'a Value> {
    p.get(key).ok_or_else(|| BackendError::Protocol {
        backend: "server".into(),
        reason: format!("missing field `{key}`"),
    })
}

fn text_field(p: &Value, key: &str) -> BackendResult<String> {
    field(p, key)?.as_str().map(str::to_owned).ok_or_else(|| BackendError::Protocol {
        backend: "server".into(),
        reason: format!("field `{key}` must be a string"),
    })
}

fn image_field(p: &Value) -> BackendResult<Image> {
    from_wire(field(p, "image")?).map_err(|reason| BackendError::Protocol {
        backend: "server".into(),
        reason,
    })
}

fn dispatch(suite: &BackendSuite, op: &str, p: &Value) -> BackendResult<Value> {
    let v = match op {
        "describe" => json!(describe_suite(suite)),
        "decompose" => json!(suite.decomposer.decompose(&text_field(p, "text")?)?),
        "ground" => {
            let m = suite.grounder.ground(&image_field(p)?, &text_field(p, "query")?)?;
            let (rows, cols) = m.dim();
            json!(WireMap {
                rows,
                cols,
                values: m.iter().copied().collect(),
            })
        }
        "answer" => json!(suite.vlm.answer(&image_field(p)?, &text_field(p, "question")?)?),
        "embed" => json!(suite.encoder.embed(&text_field(p, "text")?)?),
        "expert" => {
            let i = field(p, "index")?.as_u64().unwrap_or(u64::MAX) as usize;
            let e = suite
                .experts
                .get(i)
                .ok_or_else(|| BackendError::rejected("server", format!("no expert {i}")))?;
            json!(e.run(&image_field(p)?)?)
        }
        "embed_image" => match &suite.image_embedder {
            Some(e) => json!(e.embed_image(&image_field(p)?)?),
            None => return Err(BackendError::unavailable("server", "no image embedder")),
        },
        other => return Err(BackendError::rejected("server", format!("unknown op `{other}`"))),
    };
    Ok(v)
}

fn handle_connection(suite: &BackendSuite, stream: TcpStream) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(req) => match dispatch(suite, &req.op, &req.payload) {
                Ok(v) => Response {
                    request_id: req.request_id,
                    result: Some(v),
                    error: None,
                },
                Err(e) => Response {
                    request_id: req.request_id,
                    result: None,
                    error: Some(e),
                },
            },
            Err(e) => Response {
                request_id: 0,
                result: None,
                error: Some(BackendError::Protocol {
                    backend: "server".into(),
                    reason: e.to_string(),
                }),
            },
        };
        let mut out = serde_json::to_string(&resp).expect("response serializes");
        out.push('\n');
        writer.write_all(out.as_bytes())?;
    }
}

/// A running server; dropping it does not stop it, call [`Server::shutdown`].
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serve `suite` on `listener`, one thread per connection.
pub fn serve(listener: TcpListener, suite: BackendSuite) -> std::io::Result<Server> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let suite = suite.clone();
            std::thread::spawn(move || {
                let _ = handle_connection(&suite, conn);
            });
        }
    });
    Ok(Server {
        addr,
        stop,
        thread: Some(thread),
    })
}
