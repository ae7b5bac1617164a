use std::io;
use std::net::TcpStream;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use agentstepper_core::protocol::{decode, encode, Envelope, Message, ProtocolError};
use thiserror::Error;
use tungstenite::{Error as WsError, Message as Frame, WebSocket};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {address}: {source}")]
    Connect { address: String, source: io::Error },
    #[error("websocket handshake with {address} failed: {message}")]
    Handshake { address: String, message: String },
    #[error("connection: {0}")]
    Transport(#[from] WsError),
    #[error("bad frame from server: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("server ended the session: {0}")]
    Fatal(String),
    #[error("unexpected {0} from server")]
    Unexpected(&'static str),
    #[error("usage: {0}")]
    Usage(String),
    #[error("connection closed by server")]
    Closed,
}

static SESSIONS: AtomicU64 = AtomicU64::new(0);

fn session_id() -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.subsec_nanos()).unwrap_or_default();
    format!("{}-{}-{nanos:x}", std::process::id(), SESSIONS.fetch_add(1, Ordering::Relaxed))
}

/// One WebSocket connection speaking the envelope format, with no
/// protocol rules of its own. Tests use it to send arbitrary sequences.
pub struct RawConnection {
    socket: WebSocket<TcpStream>,
    session: String,
    seq: u64,
}

impl RawConnection {
    /// `server` is `host:port`.
    pub fn connect(server: &str) -> Result<RawConnection, ClientError> {
        let stream = TcpStream::connect(server)
            .map_err(|source| ClientError::Connect { address: server.to_string(), source })?;
        let _ = stream.set_nodelay(true);
        let (socket, _) = tungstenite::client(format!("ws://{server}/"), stream)
            .map_err(|e| ClientError::Handshake { address: server.to_string(), message: e.to_string() })?;
        Ok(RawConnection { socket, session: session_id(), seq: 0 })
    }

    pub fn session(&self) -> &str {
        &self.session
    }

    pub fn send(&mut self, run_id: &str, message: Message) -> Result<(), ClientError> {
        let envelope = Envelope::new(&self.session, run_id, self.seq, message);
        self.seq += 1;
        self.write(Frame::text(encode(&envelope)))
    }

    fn write(&mut self, frame: Frame) -> Result<(), ClientError> {
        let mut result = self.socket.send(frame);
        // the frame stays buffered; a signal only interrupted the flush
        while matches!(&result, Err(WsError::Io(e)) if e.kind() == io::ErrorKind::Interrupted) {
            result = self.socket.flush();
        }
        Ok(result?)
    }

    /// Next envelope; `None` when `timeout` passes first. Without a timeout
    /// this blocks until a frame arrives.
    pub fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Envelope>, ClientError> {
        self.socket
            .get_mut()
            .set_read_timeout(timeout.map(|t| t.max(Duration::from_millis(1))))
            .map_err(WsError::Io)?;
        loop {
            match self.socket.read() {
                Ok(Frame::Text(text)) => return Ok(Some(decode(text.as_bytes())?)),
                Ok(Frame::Binary(bytes)) => return Ok(Some(decode(&bytes)?)),
                Ok(Frame::Close(_)) => return Err(ClientError::Closed),
                Ok(_) => continue,
                Err(WsError::Io(e))
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted
                    ) =>
                {
                    return Ok(None)
                }
                Err(WsError::ConnectionClosed | WsError::AlreadyClosed) => return Err(ClientError::Closed),
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Sends a raw text frame.
    pub fn send_text(&mut self, text: &str) -> Result<(), ClientError> {
        self.write(Frame::text(text.to_string()))
    }

    pub fn close(&mut self) {
        let _ = self.socket.close(None);
        let _ = self.socket.flush();
        // read until the close handshake completes or the peer goes away
        let _ = self.socket.get_mut().set_read_timeout(Some(Duration::from_millis(200)));
        while self.socket.read().is_ok() {}
    }
}
