//! One listener for both protocols: a request carrying `Upgrade: websocket`
//! becomes a debug-protocol session, anything else is plain HTTP.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use agentstepper_core::protocol::{encode, Envelope};
use crossbeam_channel::{Receiver, TryRecvError};
use log::{debug, warn};
use serde_json::json;
use tungstenite::{Error as WsError, Message as Frame, WebSocket};

use crate::hub::{DiffError, Hub, Outgoing};

const MAX_HEAD: usize = 16 * 1024;
const POLL: Duration = Duration::from_millis(2);

pub fn serve_connection(hub: Arc<Hub>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let head = match peek_head(&stream) {
        Ok(head) => head,
        Err(e) => {
            debug!("dropping connection: {e}");
            return;
        }
    };
    if is_upgrade(&head) {
        match tungstenite::accept(stream) {
            Ok(socket) => websocket_session(hub, socket),
            Err(e) => debug!("websocket handshake failed: {e}"),
        }
    } else if let Err(e) = serve_http(&hub, stream, &head) {
        debug!("http: {e}");
    }
}

fn peek_head(stream: &TcpStream) -> io::Result<String> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let deadline = Instant::now() + Duration::from_secs(5);
    let mut buf = vec![0u8; MAX_HEAD];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "closed before request"));
        }
        if let Some(end) = find(&buf[..n], b"\r\n\r\n") {
            stream.set_read_timeout(None)?;
            return Ok(String::from_utf8_lossy(&buf[..end + 4]).into_owned());
        }
        if n == MAX_HEAD || Instant::now() > deadline {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "request head too large or incomplete"));
        }
        std::thread::sleep(Duration::from_millis(1));
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn header<'a>(head: &'a str, name: &str) -> Option<&'a str> {
    head.lines().skip(1).find_map(|line| {
        let (key, value) = line.split_once(':')?;
        key.trim().eq_ignore_ascii_case(name).then(|| value.trim())
    })
}

fn is_upgrade(head: &str) -> bool {
    header(head, "upgrade").is_some_and(|v| v.eq_ignore_ascii_case("websocket"))
}

fn websocket_session(hub: Arc<Hub>, mut socket: WebSocket<TcpStream>) {
    if let Err(e) = socket.get_mut().set_read_timeout(Some(POLL)) {
        warn!("cannot configure socket: {e}");
        return;
    }
    let (mut conn, inbox) = hub.connect();
    let mut session = String::new();
    let mut seq = 0u64;
    loop {
        let closing = match flush_outbox(&mut socket, &inbox, &session, &mut seq) {
            Ok(closing) => closing,
            Err(e) => {
                debug!("connection {}: write failed: {e}", conn.id);
                break;
            }
        };
        if closing || hub.is_shutting_down() {
            // messages queued just before shutdown still go out
            let _ = flush_outbox(&mut socket, &inbox, &session, &mut seq);
            let _ = socket.close(None);
            let _ = socket.flush();
            break;
        }
        match socket.read() {
            Ok(Frame::Text(text)) => {
                remember_session(&mut session, text.as_bytes());
                hub.handle_frame(&mut conn, text.as_bytes());
            }
            Ok(Frame::Binary(bytes)) => {
                remember_session(&mut session, &bytes);
                hub.handle_frame(&mut conn, &bytes);
            }
            Ok(Frame::Close(_)) => {
                let _ = socket.flush();
                break;
            }
            Ok(_) => {}
            Err(WsError::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted
                ) => {}
            Err(e) => {
                debug!("connection {}: {e}", conn.id);
                break;
            }
        }
    }
    hub.disconnect(conn);
}

/// Server envelopes echo the client's session id.
fn remember_session(session: &mut String, frame: &[u8]) {
    if session.is_empty() {
        if let Ok(value) = serde_json::from_slice::<serde_json::Value>(frame) {
            if let Some(id) = value.get("session").and_then(|s| s.as_str()) {
                *session = id.to_string();
            }
        }
    }
}

fn flush_outbox(
    socket: &mut WebSocket<TcpStream>,
    inbox: &Receiver<Outgoing>,
    session: &str,
    seq: &mut u64,
) -> Result<bool, WsError> {
    let mut wrote = false;
    let mut closing = false;
    loop {
        match inbox.try_recv() {
            Ok(Outgoing::Send { run_id, message }) => {
                let envelope = Envelope::new(session, run_id, *seq, message);
                *seq += 1;
                // an interrupted write has still queued the frame
                match socket.write(Frame::text(encode(&envelope))) {
                    Err(WsError::Io(e)) if e.kind() == io::ErrorKind::Interrupted => {}
                    other => other?,
                }
                wrote = true;
            }
            Ok(Outgoing::Close) => {
                closing = true;
                break;
            }
            Err(TryRecvError::Empty | TryRecvError::Disconnected) => break,
        }
    }
    if wrote {
        loop {
            match socket.flush() {
                Err(WsError::Io(e)) if e.kind() == io::ErrorKind::Interrupted => continue,
                other => break other?,
            }
        }
    }
    Ok(closing)
}

// ---- HTTP ----

const INDEX_PAGE: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>agentstepper</title></head>\n<body><h1>agentstepper</h1>\n<p>Debug server is running. Agents and the web UI connect over WebSocket on this port.</p>\n<p>Runs: <a href=\"/api/runs\">/api/runs</a></p>\n</body></html>\n";

struct Response {
    status: &'static str,
    content_type: &'static str,
    body: Vec<u8>,
}

impl Response {
    fn json(value: serde_json::Value) -> Response {
        Response { status: "200 OK", content_type: "application/json", body: value.to_string().into_bytes() }
    }

    fn error(status: &'static str, message: &str) -> Response {
        let body = json!({ "error": message }).to_string().into_bytes();
        Response { status, content_type: "application/json", body }
    }
}

fn serve_http(hub: &Hub, mut stream: TcpStream, head: &str) -> io::Result<()> {
    let mut consumed = vec![0u8; head.len()];
    stream.read_exact(&mut consumed)?;
    let mut parts = head.lines().next().unwrap_or_default().split_whitespace();
    let method = parts.next().unwrap_or_default();
    let target = parts.next().unwrap_or("/");
    let path = target.split(['?', '#']).next().unwrap_or("/");
    let response = if method != "GET" && method != "HEAD" {
        Response::error("405 Method Not Allowed", "only GET is supported")
    } else {
        route(hub, path)
    };
    let mut out = format!(
        "HTTP/1.1 {}\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        response.status,
        response.content_type,
        response.body.len()
    )
    .into_bytes();
    if method != "HEAD" {
        out.extend_from_slice(&response.body);
    }
    stream.write_all(&out)?;
    stream.flush()
}

fn route(hub: &Hub, path: &str) -> Response {
    let segments: Vec<&str> = path.trim_matches('/').split('/').filter(|s| !s.is_empty()).collect();
    match segments.as_slice() {
        ["api", "runs"] => Response::json(serde_json::to_value(hub.run_list()).unwrap_or_default()),
        ["api", "runs", run_id, "trajectory"] => match hub.export(run_id) {
            Some(document) => Response { status: "200 OK", content_type: "application/x-ndjson", body: document },
            None => Response::error("404 Not Found", "no such run"),
        },
        ["api", "runs", run_id, "commits", commit_id, "diff"] => match hub.diff(run_id, commit_id) {
            Ok(diff) => Response::json(json!({
                "commit_id": diff.commit_id,
                "text": diff.text,
                "files": diff.stats.files.iter().map(|f| json!({
                    "path": f.path, "insertions": f.insertions, "deletions": f.deletions,
                })).collect::<Vec<_>>(),
            })),
            Err(e @ (DiffError::RunNotFound(_) | DiffError::NotInRun(_))) => {
                Response::error("404 Not Found", &e.to_string())
            }
            Err(e) => Response::error("409 Conflict", &e.to_string()),
        },
        ["api", ..] => Response::error("404 Not Found", "unknown endpoint"),
        _ => static_file(hub.config().static_dir.as_deref(), &segments),
    }
}

fn static_file(root: Option<&Path>, segments: &[&str]) -> Response {
    let Some(root) = root else {
        return if segments.is_empty() {
            Response {
                status: "200 OK",
                content_type: "text/html; charset=utf-8",
                body: INDEX_PAGE.as_bytes().to_vec(),
            }
        } else {
            Response::error("404 Not Found", "not found")
        };
    };
    let relative: PathBuf = segments.iter().collect();
    if relative.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Response::error("404 Not Found", "not found");
    }
    let mut path = root.join(relative);
    if path.is_dir() {
        path = path.join("index.html");
    }
    match std::fs::read(&path) {
        Ok(body) => Response { status: "200 OK", content_type: content_type(&path), body },
        Err(_) => Response::error("404 Not Found", "not found"),
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or_default() {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        _ => "application/octet-stream",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_upgrade_header_case_insensitively() {
        let head = "GET / HTTP/1.1\r\nHost: x\r\nupgrade: WebSocket\r\nConnection: Upgrade\r\n\r\n";
        assert!(is_upgrade(head));
        assert!(!is_upgrade("GET / HTTP/1.1\r\nHost: x\r\n\r\n"));
    }

    #[test]
    fn static_paths_cannot_escape_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("index.html"), "ui").unwrap();
        assert_eq!(static_file(Some(dir.path()), &[]).body, b"ui");
        assert_eq!(static_file(Some(dir.path()), &["..", "etc", "passwd"]).status, "404 Not Found");
        assert_eq!(static_file(None, &[]).status, "200 OK");
    }
}
