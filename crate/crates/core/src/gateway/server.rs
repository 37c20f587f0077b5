//! Websocket transport for [`Hub`].
//!
//! One task owns the hub and the tick clock. Each connection gets a reader
//! task that forwards text into the hub's queue and a writer task fed by its
//! own queue; neither touches the world.

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::pin::Pin;
use std::task::{Context, Poll};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, ReadBuf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::time::MissedTickBehavior;
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;

use super::{ConnId, GatewayError, Hub, Input, Output, Role};

enum Event {
    Open {
        conn: ConnId,
        role: Role,
        out: mpsc::UnboundedSender<Message>,
    },
    Input(Input),
}

/// Role from a request path such as `/?role=driver`; observer by default.
pub fn role_from_query(path_and_query: &str) -> Result<Role, String> {
    let Some((_, query)) = path_and_query.split_once('?') else {
        return Ok(Role::Observer);
    };
    for pair in query.split('&') {
        if let Some(v) = pair.strip_prefix("role=") {
            return v.parse();
        }
    }
    Ok(Role::Observer)
}

#[derive(Clone, Debug, Default)]
pub struct ServeSummary {
    pub ticks: u64,
    /// Directories of saved episodes, in stop order.
    pub episodes: Vec<PathBuf>,
}

/// Serve `hub` on `listener` until `shutdown` resolves. Ticks run at the
/// world's fps unless `tick` overrides the period. Stopped recordings are
/// saved under `record_dir/<session_id>` when a directory is given.
pub async fn serve(
    mut hub: Hub,
    listener: TcpListener,
    record_dir: Option<PathBuf>,
    tick: Option<Duration>,
    shutdown: impl Future<Output = ()>,
) -> Result<ServeSummary, GatewayError> {
    let period = tick.unwrap_or_else(|| Duration::from_secs_f64(hub.world().config.dt()));
    let mut ticker = tokio::time::interval_at(tokio::time::Instant::now() + period, period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let (tx, mut rx) = mpsc::unbounded_channel::<Event>();
    let mut writers: BTreeMap<ConnId, mpsc::UnboundedSender<Message>> = BTreeMap::new();
    let mut summary = ServeSummary::default();
    let mut next_id: ConnId = 1;
    tokio::pin!(shutdown);
    loop {
        let outputs = tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => {
                if let Ok((stream, _)) = accepted {
                    tokio::spawn(connection(stream, next_id, tx.clone()));
                    next_id += 1;
                }
                continue;
            }
            Some(ev) = rx.recv() => match ev {
                Event::Open { conn, role, out } => {
                    writers.insert(conn, out);
                    hub.handle(Input::Connect { conn, role })
                }
                Event::Input(input) => {
                    if let Input::Disconnect { conn } = input {
                        writers.remove(&conn);
                    }
                    hub.handle(input)
                }
            },
            _ = ticker.tick() => {
                summary.ticks += 1;
                hub.handle(Input::Tick)
            }
        };
        route(outputs, &mut writers, &record_dir, &mut summary)?;
    }
    // Finalize a live recording as if its driver had left.
    if let Some(d) = hub.driver() {
        let outputs = hub.handle(Input::Disconnect { conn: d });
        route(outputs, &mut writers, &record_dir, &mut summary)?;
    }
    Ok(summary)
}

fn route(
    outputs: Vec<Output>,
    writers: &mut BTreeMap<ConnId, mpsc::UnboundedSender<Message>>,
    record_dir: &Option<PathBuf>,
    summary: &mut ServeSummary,
) -> Result<(), GatewayError> {
    for o in outputs {
        match o {
            Output::Send { conn, msg } => {
                if let Some(w) = writers.get(&conn) {
                    let _ = w.send(Message::Text(msg.to_json()));
                }
            }
            Output::Close { conn } => {
                writers.remove(&conn);
            }
            Output::Episode(ep) => {
                if let Some(root) = record_dir {
                    let dir = root.join(&ep.meta.session_id);
                    ep.save(&dir).map_err(|e| std::io::Error::other(e.to_string()))?;
                    summary.episodes.push(dir);
                }
            }
        }
    }
    Ok(())
}

/// Cap on the HTTP upgrade request head.
pub const MAX_REQUEST_HEAD: usize = 16 * 1024;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// Read the request head ourselves so a handshake split into tiny TCP
/// segments is accepted; tungstenite refuses those on its own.
async fn read_head(stream: &mut TcpStream) -> Option<Vec<u8>> {
    let mut head = Vec::with_capacity(512);
    let mut tmp = [0u8; 1024];
    while !head.windows(4).any(|w| w == b"\r\n\r\n") {
        if head.len() > MAX_REQUEST_HEAD {
            return None;
        }
        let n = stream.read(&mut tmp).await.ok()?;
        if n == 0 {
            return None;
        }
        head.extend_from_slice(&tmp[..n]);
    }
    Some(head)
}

/// A stream that first replays bytes already read.
struct Prefixed {
    prefix: Vec<u8>,
    at: usize,
    inner: TcpStream,
}

impl AsyncRead for Prefixed {
    fn poll_read(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &mut ReadBuf<'_>) -> Poll<std::io::Result<()>> {
        if self.at < self.prefix.len() {
            let n = buf.remaining().min(self.prefix.len() - self.at);
            let at = self.at;
            buf.put_slice(&self.prefix[at..at + n]);
            self.at += n;
            return Poll::Ready(Ok(()));
        }
        Pin::new(&mut self.inner).poll_read(cx, buf)
    }
}

impl AsyncWrite for Prefixed {
    fn poll_write(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &[u8]) -> Poll<std::io::Result<usize>> {
        Pin::new(&mut self.inner).poll_write(cx, buf)
    }
    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<std::io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }
    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<std::io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}

async fn connection(mut stream: TcpStream, conn: ConnId, tx: mpsc::UnboundedSender<Event>) {
    let Ok(Some(prefix)) = tokio::time::timeout(HANDSHAKE_TIMEOUT, read_head(&mut stream)).await else {
        return;
    };
    let stream = Prefixed { prefix, at: 0, inner: stream };
    let mut role = Role::Observer;
    let callback = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        let pq = req.uri().path_and_query().map(|p| p.as_str()).unwrap_or("/");
        match role_from_query(pq) {
            Ok(r) => {
                role = r;
                Ok(resp)
            }
            Err(e) => {
                let mut r = ErrorResponse::new(Some(e));
                *r.status_mut() = StatusCode::BAD_REQUEST;
                Err(r)
            }
        }
    };
    let Ok(ws) = tokio_tungstenite::accept_hdr_async(stream, callback).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    if tx.send(Event::Open { conn, role, out: out_tx }).is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            if sink.send(m).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(Ok(msg)) = source.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Binary(_) => "binary frames are not part of the protocol".into(),
            Message::Close(_) => break,
            _ => continue,
        };
        if tx.send(Event::Input(Input::Text { conn, text })).is_err() {
            break;
        }
    }
    let _ = tx.send(Event::Input(Input::Disconnect { conn }));
    let _ = writer.await;
}
