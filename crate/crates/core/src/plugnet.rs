//! Smart-plug relay control over the local TCP protocol.
//!
//! Every message is a 4-byte big-endian length followed by the payload
//! obfuscated with an XOR autokey cipher (initial key `0xAB`, key advances to
//! the previous ciphertext byte). Payloads are JSON. Replies use the same
//! framing. Commands to one [`PlugClient`] are serialized; distinct endpoints
//! can be driven from different threads.
//!
//! [`mock::MockPlug`] speaks the same protocol over loopback.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_PORT: u16 = 9999;
pub const INITIAL_KEY: u8 = 0xAB;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(3);
/// Replies longer than this are treated as protocol violations.
pub const MAX_FRAME: usize = 1 << 20;

pub const CMD_ON: &str = r#"{"system":{"set_relay_state":{"state":1}}}"#;
pub const CMD_OFF: &str = r#"{"system":{"set_relay_state":{"state":0}}}"#;
pub const CMD_SYSINFO: &str = r#"{"system":{"get_sysinfo":{}}}"#;

#[derive(Debug, Error)]
pub enum PlugError {
    #[error("transport error: {0}")]
    Transport(#[from] io::Error),
    #[error("device reported error {code}: {message}")]
    Device { code: i64, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
}

pub fn autokey_encrypt(plaintext: &[u8]) -> Vec<u8> {
    let mut key = INITIAL_KEY;
    plaintext
        .iter()
        .map(|&p| {
            key ^= p;
            key
        })
        .collect()
}

pub fn autokey_decrypt(ciphertext: &[u8]) -> Vec<u8> {
    let mut key = INITIAL_KEY;
    ciphertext
        .iter()
        .map(|&c| {
            let p = c ^ key;
            key = c;
            p
        })
        .collect()
}

/// Length-prefixed, encrypted frame for `payload`.
pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let body = autokey_encrypt(payload);
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

fn read_exact_or_protocol(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), PlugError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => PlugError::Protocol(format!("connection closed inside {what}")),
        _ => PlugError::Transport(e),
    })
}

/// Reads one frame and returns the decrypted payload.
pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, PlugError> {
    let mut header = [0u8; 4];
    read_exact_or_protocol(r, &mut header, "frame header")?;
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(PlugError::Protocol(format!("frame length {len} exceeds {MAX_FRAME}")));
    }
    let mut body = vec![0u8; len];
    read_exact_or_protocol(r, &mut body, "frame body")?;
    Ok(autokey_decrypt(&body))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlugEndpoint {
    pub host: String,
    pub port: u16,
    #[serde(default)]
    pub identity: Option<String>,
}

impl PlugEndpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Result<Self, PlugError> {
        let host = host.into();
        if port == 0 {
            return Err(PlugError::InvalidEndpoint("port must be in 1..=65535".into()));
        }
        if host.is_empty() {
            return Err(PlugError::InvalidEndpoint("empty host".into()));
        }
        Ok(Self { host, port, identity: None })
    }

    pub fn with_identity(mut self, identity: impl Into<String>) -> Self {
        self.identity = Some(identity.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelayState {
    On,
    Off,
}

impl RelayState {
    pub fn from_bool(on: bool) -> Self {
        if on {
            Self::On
        } else {
            Self::Off
        }
    }

    pub fn is_on(self) -> bool {
        self == Self::On
    }
}

impl std::str::FromStr for RelayState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            other => Err(format!("expected \"on\" or \"off\", got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayCommand {
    pub state: RelayState,
}

impl RelayCommand {
    pub fn payload(&self) -> &'static str {
        match self.state {
            RelayState::On => CMD_ON,
            RelayState::Off => CMD_OFF,
        }
    }
}

/// Request/response exchange over a fresh connection.
fn exchange(endpoint: &PlugEndpoint, payload: &str, timeout: Duration) -> Result<Value, PlugError> {
    let addrs = (endpoint.host.as_str(), endpoint.port).to_socket_addrs()?;
    let mut last = io::Error::new(io::ErrorKind::NotFound, format!("{} did not resolve", endpoint.host));
    let mut stream = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) => last = e,
        }
    }
    let mut stream = stream.ok_or(PlugError::Transport(last))?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    stream.write_all(&encode_frame(payload.as_bytes()))?;
    let reply = read_frame(&mut stream)?;
    serde_json::from_slice(&reply).map_err(|e| PlugError::Protocol(format!("reply is not JSON: {e}")))
}

/// The `system.<method>` object of a reply, after checking its error code.
fn system_section<'a>(reply: &'a Value, method: &str) -> Result<&'a Value, PlugError> {
    let section = reply
        .get("system")
        .and_then(|s| s.get(method))
        .ok_or_else(|| PlugError::Protocol(format!("reply lacks system.{method}")))?;
    let code = section
        .get("err_code")
        .and_then(Value::as_i64)
        .ok_or_else(|| PlugError::Protocol(format!("system.{method} lacks err_code")))?;
    if code != 0 {
        let message = section.get("err_msg").and_then(Value::as_str).unwrap_or("").to_string();
        return Err(PlugError::Device { code, message });
    }
    Ok(section)
}

/// Client for one plug. Holds a lock so only one request is in flight.
#[derive(Debug)]
pub struct PlugClient {
    endpoint: PlugEndpoint,
    timeout: Duration,
    lock: Mutex<()>,
}

impl PlugClient {
    pub fn new(endpoint: PlugEndpoint, timeout: Duration) -> Self {
        Self { endpoint, timeout, lock: Mutex::new(()) }
    }

    pub fn endpoint(&self) -> &PlugEndpoint {
        &self.endpoint
    }

    /// Sends raw JSON and returns the parsed reply.
    pub fn send(&self, payload: &str) -> Result<Value, PlugError> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        exchange(&self.endpoint, payload, self.timeout)
    }

    pub fn set_relay(&self, cmd: RelayCommand) -> Result<Value, PlugError> {
        let reply = self.send(cmd.payload())?;
        system_section(&reply, "set_relay_state")?;
        Ok(reply)
    }

    pub fn query_state(&self) -> Result<RelayState, PlugError> {
        let reply = self.send(CMD_SYSINFO)?;
        let info = system_section(&reply, "get_sysinfo")?;
        match info.get("relay_state").and_then(Value::as_i64) {
            Some(0) => Ok(RelayState::Off),
            Some(1) => Ok(RelayState::On),
            other => Err(PlugError::Protocol(format!("unexpected relay_state {other:?}"))),
        }
    }
}

/// One-shot relay switch; returns the device's acknowledgment.
pub fn set_relay(endpoint: &PlugEndpoint, cmd: RelayCommand, timeout: Duration) -> Result<Value, PlugError> {
    PlugClient::new(endpoint.clone(), timeout).set_relay(cmd)
}

pub fn query_state(endpoint: &PlugEndpoint, timeout: Duration) -> Result<RelayState, PlugError> {
    PlugClient::new(endpoint.clone(), timeout).query_state()
}

pub mod mock {
    //! Loopback plug emulator for hardware-free testing.

    use std::io::Write;
    use std::net::{SocketAddr, TcpListener, TcpStream};
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use std::thread::JoinHandle;

    use serde_json::{json, Value};

    use super::{encode_frame, read_frame};

    /// Misbehaviour injected into replies.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
    pub enum MockFault {
        #[default]
        None,
        /// Reply with a frame that is not JSON.
        Garbage,
        /// Announce a longer frame than is sent, then hang up.
        TruncatedFrame,
        /// Reply with the given nonzero error code.
        DeviceError(i64),
    }

    #[derive(Debug, Default)]
    struct Shared {
        relay_on: Mutex<bool>,
        fault: Mutex<MockFault>,
        requests: AtomicUsize,
        shutdown: AtomicBool,
    }

    /// Plug emulator bound to `127.0.0.1`. Stops when dropped.
    #[derive(Debug)]
    pub struct MockPlug {
        addr: SocketAddr,
        shared: Arc<Shared>,
        handle: Option<JoinHandle<()>>,
    }

    impl MockPlug {
        /// Binds an ephemeral loopback port.
        pub fn spawn() -> std::io::Result<Self> {
            Self::bind("127.0.0.1:0")
        }

        pub fn bind(addr: &str) -> std::io::Result<Self> {
            let listener = TcpListener::bind(addr)?;
            let addr = listener.local_addr()?;
            let shared = Arc::new(Shared::default());
            let worker = Arc::clone(&shared);
            let handle = std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if worker.shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    if let Ok(stream) = conn {
                        serve_connection(stream, &worker);
                    }
                }
            });
            Ok(Self { addr, shared, handle: Some(handle) })
        }

        pub fn addr(&self) -> SocketAddr {
            self.addr
        }

        pub fn port(&self) -> u16 {
            self.addr.port()
        }

        pub fn relay_on(&self) -> bool {
            *self.shared.relay_on.lock().unwrap()
        }

        pub fn set_fault(&self, fault: MockFault) {
            *self.shared.fault.lock().unwrap() = fault;
        }

        pub fn request_count(&self) -> usize {
            self.shared.requests.load(Ordering::SeqCst)
        }

        /// Blocks serving requests until the process exits.
        pub fn join(mut self) {
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }

    impl Drop for MockPlug {
        fn drop(&mut self) {
            if let Some(h) = self.handle.take() {
                self.shared.shutdown.store(true, Ordering::SeqCst);
                // Unblock accept().
                let _ = TcpStream::connect(self.addr);
                let _ = h.join();
            }
        }
    }

    fn reply_for(request: &Value, shared: &Shared) -> Value {
        let system = request.get("system");
        if let Some(set) = system.and_then(|s| s.get("set_relay_state")) {
            return match set.get("state").and_then(Value::as_i64) {
                Some(s @ (0 | 1)) => {
                    *shared.relay_on.lock().unwrap() = s == 1;
                    json!({"system": {"set_relay_state": {"err_code": 0}}})
                }
                _ => json!({"system": {"set_relay_state": {"err_code": -3, "err_msg": "invalid argument"}}}),
            };
        }
        if system.and_then(|s| s.get("get_sysinfo")).is_some() {
            let on = *shared.relay_on.lock().unwrap();
            return json!({"system": {"get_sysinfo": {
                "alias": "luv-mock",
                "model": "MOCK(US)",
                "relay_state": i32::from(on),
                "err_code": 0
            }}});
        }
        json!({"err_code": -1, "err_msg": "module not support"})
    }

    fn serve_connection(mut stream: TcpStream, shared: &Shared) {
        while let Ok(payload) = read_frame(&mut stream) {
            shared.requests.fetch_add(1, Ordering::SeqCst);
            let fault = *shared.fault.lock().unwrap();
            let out = match fault {
                MockFault::Garbage => encode_frame(b"\x00not json\xff"),
                MockFault::TruncatedFrame => {
                    let mut f = encode_frame(br#"{"system":{}}"#);
                    f[..4].copy_from_slice(&1000u32.to_be_bytes());
                    let _ = stream.write_all(&f);
                    return;
                }
                MockFault::DeviceError(code) => {
                    let method = serde_json::from_slice::<Value>(&payload)
                        .ok()
                        .and_then(|v| v.get("system").and_then(|s| s.as_object()).and_then(|o| o.keys().next().cloned()))
                        .unwrap_or_else(|| "set_relay_state".into());
                    let body = json!({"system": {method: {"err_code": code, "err_msg": "injected"}}});
                    encode_frame(body.to_string().as_bytes())
                }
                MockFault::None => {
                    let reply = match serde_json::from_slice::<Value>(&payload) {
                        Ok(req) => reply_for(&req, shared),
                        Err(_) => json!({"err_code": -1, "err_msg": "json decode error"}),
                    };
                    encode_frame(reply.to_string().as_bytes())
                }
            };
            if stream.write_all(&out).is_err() {
                return;
            }
        }
    }
}
