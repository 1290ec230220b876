//! Single-threaded scripted HTTP server for exercising the remote judge
//! client without a network.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use sectow::judge::JudgeEndpoint;

/// One parsed wire request item.
#[derive(Debug, Clone)]
pub struct Item {
    pub id: String,
    pub query: String,
}

pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Option<Duration>,
}

impl Reply {
    pub fn ok(body: impl Into<String>) -> Reply {
        Reply {
            status: 200,
            body: body.into(),
            delay: None,
        }
    }

    pub fn status(status: u16) -> Reply {
        Reply {
            status,
            body: "{}".into(),
            delay: None,
        }
    }

    pub fn slow(delay_ms: u64, body: impl Into<String>) -> Reply {
        Reply {
            status: 200,
            body: body.into(),
            delay: Some(Duration::from_millis(delay_ms)),
        }
    }
}

/// Renders a response body answering every item, in the order produced
/// by `order`, with `unsafe` decided per item.
pub fn answer(
    items: &[Item],
    order: impl Fn(usize) -> usize,
    verdict: impl Fn(&Item) -> bool,
) -> String {
    let parts: Vec<String> = (0..items.len())
        .map(|i| {
            let item = &items[order(i)];
            format!(
                "{{\"id\":{},\"unsafe\":{}}}",
                serde_json::to_string(&item.id).unwrap(),
                verdict(item)
            )
        })
        .collect();
    format!("{{\"items\":[{}]}}", parts.join(","))
}

pub type Handler = Box<dyn Fn(&[Item]) -> Reply + Send>;

pub struct MockServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Serves exactly one scripted reply per accepted connection, then
    /// exits. Writes to sockets the client already abandoned are ignored.
    pub fn start(handlers: Vec<Handler>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/judge", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let hits_in_thread = Arc::clone(&hits);
        let handle = thread::spawn(move || {
            for handler in handlers {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let items = match read_request(&mut stream) {
                    Some(items) => items,
                    None => return,
                };
                hits_in_thread.fetch_add(1, Ordering::SeqCst);
                let reply = handler(&items);
                if let Some(delay) = reply.delay {
                    thread::sleep(delay);
                }
                let _ = write_response(&mut stream, reply.status, &reply.body);
            }
        });
        MockServer {
            url,
            hits,
            handle: Some(handle),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn read_request(stream: &mut TcpStream) -> Option<Vec<Item>> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_lowercase();
    let content_length: usize = headers
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse().ok())?;
    while buf.len() < header_end + content_length {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let body: serde_json::Value =
        serde_json::from_slice(&buf[header_end..header_end + content_length]).ok()?;
    let items = body["items"]
        .as_array()?
        .iter()
        .map(|it| Item {
            id: it["id"].as_str().unwrap_or_default().to_string(),
            query: it["query"].as_str().unwrap_or_default().to_string(),
        })
        .collect();
    Some(items)
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = if status == 200 { "OK" } else { "Error" };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

pub fn endpoint(url: &str, timeout_ms: u64, max_retries: u32) -> JudgeEndpoint {
    JudgeEndpoint {
        url: url.to_string(),
        timeout_ms,
        max_retries,
    }
}

pub fn text_pairs(n: usize) -> Vec<(String, String)> {
    (0..n)
        .map(|i| (format!("query {i}"), format!("response {i}")))
        .collect()
}
