//! Client for an external embedding service.
//!
//! Messages are newline-delimited JSON. A request is
//! `{"id", "method", "params"}`; a response carries the same `id` and either
//! `result` or `error`. Tensors travel as
//! `{"shape": [...], "dtype": "f32", "data": <base64 of little-endian f32>}`.
//!
//! Methods: `info`, `embed_text {text}`, `embed_image {image}`,
//! `image_vjp {image, upstream}` and `features {image}`. Feature gradients use
//! `image_vjp` with `"target": "features"` and one upstream tensor per layer.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use crate::embedding::{check_image, Capabilities, EmbeddingProvider, FeatureExtractor};
use crate::error::{usage, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

fn protocol(msg: impl std::fmt::Display) -> Error {
    Error::Bridge(format!("protocol error: {msg}"))
}

/// Wire form of a tensor; values are rounded to f32.
pub fn encode_tensor(t: &Tensor) -> Value {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    json!({"shape": t.shape(), "dtype": "f32", "data": STANDARD.encode(bytes)})
}

pub fn decode_tensor(v: &Value) -> Result<Tensor> {
    let shape: Vec<usize> = v
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol("tensor without shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| protocol("bad tensor dimension")))
        .collect::<Result<_>>()?;
    if v.get("dtype").and_then(Value::as_str) != Some("f32") {
        return Err(protocol("tensor dtype must be f32"));
    }
    let data = v
        .get("data")
        .and_then(Value::as_str)
        .ok_or_else(|| protocol("tensor without data"))?;
    let bytes = STANDARD.decode(data).map_err(|e| protocol(format!("bad base64: {e}")))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(protocol(format!("tensor of shape {shape:?} carries {} bytes", bytes.len())));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(shape, values))
}

/// Where the service runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp:<host>:<port>`
    Tcp(String),
    /// `stdio:<command line>`, spawned as a child process.
    Stdio(Vec<String>),
}

impl Endpoint {
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(addr) = spec.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err(usage("tcp endpoint needs host:port"));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = spec.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err(usage("stdio endpoint needs a command"));
            }
            Ok(Endpoint::Stdio(argv))
        } else {
            Err(usage(format!("unknown bridge endpoint `{spec}`; use tcp:<host:port> or stdio:<command>")))
        }
    }
}

/// One connection to the service.
pub struct BridgeClient {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    pending: HashMap<u64, Value>,
    next_id: u64,
    timeout: Duration,
    child: Option<Child>,
}

impl BridgeClient {
    pub fn from_streams(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static, timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        Self {
            writer: Box::new(writer),
            lines: rx,
            pending: HashMap::new(),
            next_id: 1,
            timeout,
            child: None,
        }
    }

    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let addrs: Vec<_> = std::net::ToSocketAddrs::to_socket_addrs(addr.as_str())
                    .map_err(|e| Error::Bridge(format!("cannot resolve {addr}: {e}")))?
                    .collect();
                let first = addrs.first().ok_or_else(|| Error::Bridge(format!("cannot resolve {addr}")))?;
                let stream = TcpStream::connect_timeout(first, timeout)
                    .map_err(|e| Error::Bridge(format!("cannot reach {addr}: {e}")))?;
                let reader = stream.try_clone().map_err(|e| Error::Bridge(e.to_string()))?;
                Ok(Self::from_streams(reader, stream, timeout))
            }
            Endpoint::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(|e| Error::Bridge(format!("cannot start `{}`: {e}", argv.join(" "))))?;
                let stdin = child.stdin.take().expect("piped");
                let stdout = child.stdout.take().expect("piped");
                let mut client = Self::from_streams(stdout, stdin, timeout);
                client.child = Some(child);
                Ok(client)
            }
        }
    }

    fn send(&mut self, method: &str, params: Value) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&json!({"id": id, "method": method, "params": params}))?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Bridge(format!("write failed: {e}")))?;
        Ok(id)
    }

    fn receive(&mut self, id: u64, deadline: Instant) -> Result<Value> {
        loop {
            if let Some(resp) = self.pending.remove(&id) {
                return unpack(resp);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(left) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => return Err(Error::Bridge(format!("read failed: {e}"))),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::Bridge(format!("no response within {:?}", self.timeout)))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(protocol("connection closed before the response")),
            };
            if !line.ends_with('\n') {
                return Err(protocol("truncated response"));
            }
            let resp: Value = serde_json::from_str(&line).map_err(|e| protocol(format!("bad JSON: {e}")))?;
            let rid = resp
                .get("id")
                .and_then(Value::as_u64)
                .ok_or_else(|| protocol("response without id"))?;
            self.pending.insert(rid, resp);
        }
    }

    pub fn call(&mut self, method: &str, params: Value) -> Result<Value> {
        let id = self.send(method, params)?;
        self.receive(id, Instant::now() + self.timeout)
    }

    /// Sends every request before reading; responses may arrive in any order.
    pub fn call_many(&mut self, calls: Vec<(&str, Value)>) -> Result<Vec<Value>> {
        let ids = calls
            .into_iter()
            .map(|(m, p)| self.send(m, p))
            .collect::<Result<Vec<_>>>()?;
        let deadline = Instant::now() + self.timeout;
        ids.into_iter().map(|id| self.receive(id, deadline)).collect()
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn unpack(resp: Value) -> Result<Value> {
    if let Some(err) = resp.get("error") {
        let msg = err.as_str().map(String::from).unwrap_or_else(|| err.to_string());
        return Err(Error::Bridge(format!("service error: {msg}")));
    }
    resp.get("result").cloned().ok_or_else(|| protocol("response without result"))
}

/// What the service reports about itself.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeInfo {
    pub dim: usize,
    pub image_size: usize,
    pub feature_layers: usize,
    pub variant: String,
}

/// Embeddings and perceptual features served over the bridge.
pub struct BridgeProvider {
    client: RefCell<BridgeClient>,
    info: BridgeInfo,
    name: String,
}

impl BridgeProvider {
    pub fn new(mut client: BridgeClient, label: &str) -> Result<Self> {
        let r = client.call("info", json!({}))?;
        let field = |k: &str| {
            r.get(k)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| protocol(format!("info without {k}")))
        };
        let info = BridgeInfo {
            dim: field("dim")?,
            image_size: field("image_size")?,
            feature_layers: field("feature_layers")?,
            variant: r.get("variant").and_then(Value::as_str).unwrap_or("unknown").to_string(),
        };
        Ok(Self {
            name: format!("bridge:{label} ({})", info.variant),
            client: RefCell::new(client),
            info,
        })
    }

    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        let ep = Endpoint::parse(endpoint)?;
        Self::new(BridgeClient::connect(&ep, timeout)?, endpoint)
    }

    pub fn info(&self) -> &BridgeInfo {
        &self.info
    }

    fn tensor_result(&self, method: &str, params: Value, key: &str) -> Result<Tensor> {
        let r = self.client.borrow_mut().call(method, params)?;
        decode_tensor(r.get(key).ok_or_else(|| protocol(format!("{method} result without {key}")))?)
    }

    fn embedding(&self, method: &str, params: Value) -> Result<Tensor> {
        let e = self.tensor_result(method, params, "embedding")?;
        if e.len() != self.info.dim {
            return Err(protocol(format!("embedding has {} entries, expected {}", e.len(), self.info.dim)));
        }
        Ok(e.reshaped(vec![self.info.dim]))
    }
}

impl EmbeddingProvider for BridgeProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.info.dim
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            text: true,
            image: true,
            image_vjp: true,
        }
    }

    fn embed_text(&self, text: &str) -> Result<Tensor> {
        self.embedding("embed_text", json!({"text": text}))
    }

    fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        self.embedding("embed_image", json!({"image": encode_tensor(image)}))
    }

    fn image_vjp(&self, image: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        check_image(image)?;
        let g = self.tensor_result(
            "image_vjp",
            json!({"image": encode_tensor(image), "upstream": encode_tensor(upstream)}),
            "grad",
        )?;
        if g.shape() != image.shape() {
            return Err(protocol("gradient shape differs from the image"));
        }
        Ok(g)
    }
}

impl FeatureExtractor for BridgeProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn layer_count(&self) -> usize {
        self.info.feature_layers
    }

    fn extract(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        check_image(image)?;
        let r = self
            .client
            .borrow_mut()
            .call("features", json!({"image": encode_tensor(image)}))?;
        let layers = r
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| protocol("features result without features"))?;
        layers.iter().map(decode_tensor).collect()
    }

    fn features_vjp(&self, image: &Tensor, upstream: &[Tensor]) -> Result<Tensor> {
        check_image(image)?;
        let ups: Vec<Value> = upstream.iter().map(encode_tensor).collect();
        let g = self.tensor_result(
            "image_vjp",
            json!({"image": encode_tensor(image), "target": "features", "upstream": ups}),
            "grad",
        )?;
        if g.shape() != image.shape() {
            return Err(protocol("gradient shape differs from the image"));
        }
        Ok(g)
    }
}
