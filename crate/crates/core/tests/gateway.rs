use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use gaplab::datapipe::{record_from, Episode};
use gaplab::gateway::server::{role_from_query, serve};
use gaplab::gateway::*;
use gaplab::sim::{Action, Lighting, World, WorldConfig, WorldState};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::tungstenite::protocol::frame::coding::{Data, OpCode};
use tokio_tungstenite::tungstenite::protocol::frame::Frame;

fn config() -> WorldConfig {
    WorldConfig {
        frame_width: 16,
        frame_height: 12,
        ..Default::default()
    }
}

/// A scripted client of the sans-io hub.
struct Client {
    conn: ConnId,
    seq: u64,
    inbox: Vec<WireMessage>,
}

impl Client {
    fn new(conn: ConnId) -> Self {
        Self {
            conn,
            seq: 0,
            inbox: Vec::new(),
        }
    }

    fn take(&mut self, outputs: &[Output]) {
        for o in outputs {
            if let Output::Send { conn, msg } = o {
                if *conn == self.conn {
                    self.inbox.push(msg.clone());
                }
            }
        }
    }

    fn last_frame_seq(&self) -> u64 {
        self.inbox
            .iter()
            .rev()
            .find(|m| matches!(m, WireMessage::Frame { .. }))
            .map(WireMessage::seq)
            .unwrap()
    }

    fn errors(&self) -> Vec<String> {
        self.inbox
            .iter()
            .filter_map(|m| match m {
                WireMessage::Error { message, .. } => Some(message.clone()),
                _ => None,
            })
            .collect()
    }

    fn next(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn action(&mut self, action: Action) -> String {
        WireMessage::Action {
            seq: self.next(),
            frame_seq: self.last_frame_seq(),
            action,
        }
        .to_json()
    }

    fn session(&mut self, command: SessionCommand) -> String {
        WireMessage::Session {
            seq: self.next(),
            command,
        }
        .to_json()
    }
}

fn run(hub: &mut Hub, input: Input, clients: &mut [&mut Client]) -> Vec<Output> {
    let out = hub.handle(input);
    for c in clients.iter_mut() {
        c.take(&out);
    }
    out
}

fn episodes(out: &[Output]) -> Vec<Episode> {
    out.iter()
        .filter_map(|o| match o {
            Output::Episode(e) => Some(e.clone()),
            _ => None,
        })
        .collect()
}

fn driver_hub() -> (Hub, Client) {
    let mut hub = Hub::new(config()).unwrap();
    let mut d = Client::new(1);
    run(&mut hub, Input::Connect { conn: 1, role: Role::Driver }, &mut [&mut d]);
    (hub, d)
}

fn text(conn: ConnId, s: String) -> Input {
    Input::Text { conn, text: s }
}

#[test]
fn connect_greets_with_hello_frame_and_state() {
    let (_, d) = driver_hub();
    assert!(matches!(&d.inbox[0], WireMessage::Hello { role: Role::Driver, fps: 30, width: 16, height: 12, .. }));
    assert!(matches!(&d.inbox[1], WireMessage::Frame { tick: 0, .. }));
    assert!(matches!(&d.inbox[2], WireMessage::State { recording: false, .. }));
    let seqs: Vec<u64> = d.inbox.iter().map(WireMessage::seq).collect();
    assert_eq!(seqs, vec![1, 2, 3]);
}

#[test]
fn forward_for_n_ticks_records_n_forward_labels() {
    let (mut hub, mut d) = driver_hub();
    let m = d.session(SessionCommand::StartRecord { session_id: Some("s1".into()) });
    run(&mut hub, text(1, m), &mut [&mut d]);
    for _ in 0..25 {
        let m = d.action(Action::Forward);
        run(&mut hub, text(1, m), &mut [&mut d]);
        run(&mut hub, Input::Tick, &mut [&mut d]);
    }
    let m = d.session(SessionCommand::StopRecord);
    let out = run(&mut hub, text(1, m), &mut [&mut d]);
    let eps = episodes(&out);
    assert_eq!(eps.len(), 1);
    assert_eq!(eps[0].meta.session_id, "s1");
    assert_eq!(eps[0].len(), 25);
    assert!(eps[0].records.iter().all(|r| r.action == Action::Forward));
    assert!(d.errors().is_empty(), "{:?}", d.errors());
    // Server seqs strictly increase.
    assert!(d.inbox.windows(2).all(|w| w[1].seq() == w[0].seq() + 1));
}

#[test]
fn silent_tick_logs_the_no_op() {
    let (mut hub, mut d) = driver_hub();
    let m = d.session(SessionCommand::StartRecord { session_id: None });
    run(&mut hub, text(1, m), &mut [&mut d]);
    let m = d.action(Action::LeftPivot);
    run(&mut hub, text(1, m), &mut [&mut d]);
    run(&mut hub, Input::Tick, &mut [&mut d]);
    run(&mut hub, Input::Tick, &mut [&mut d]);
    let m = d.session(SessionCommand::StopRecord);
    let ep = episodes(&run(&mut hub, text(1, m), &mut [&mut d])).remove(0);
    let actions: Vec<Action> = ep.records.iter().map(|r| r.action).collect();
    assert_eq!(actions, vec![Action::LeftPivot, Action::None]);
    assert_eq!(ep.meta.session_id, "session-001");
}

#[test]
fn disconnect_mid_recording_finalizes_a_valid_episode() {
    let (mut hub, mut d) = driver_hub();
    let m = d.session(SessionCommand::StartRecord { session_id: None });
    run(&mut hub, text(1, m), &mut [&mut d]);
    for _ in 0..10 {
        run(&mut hub, Input::Tick, &mut [&mut d]);
    }
    let out = run(&mut hub, Input::Disconnect { conn: 1 }, &mut []);
    let eps = episodes(&out);
    assert_eq!(eps.len(), 1);
    assert_eq!(eps[0].len(), 10);
    eps[0].validate().unwrap();
    assert!(!hub.is_recording());
    assert_eq!(hub.driver(), None);
}

#[test]
fn second_driver_is_rejected() {
    let (mut hub, mut d) = driver_hub();
    let mut e = Client::new(2);
    let out = run(&mut hub, Input::Connect { conn: 2, role: Role::Driver }, &mut [&mut d, &mut e]);
    assert_eq!(e.errors().len(), 1);
    assert!(out.contains(&Output::Close { conn: 2 }));
    assert_eq!(hub.driver(), Some(1));
}

#[test]
fn malformed_message_gets_an_error_and_the_connection_stays() {
    let (mut hub, mut d) = driver_hub();
    let out = run(&mut hub, text(1, "{\"type\":\"action\",\"seq\":1".into()), &mut [&mut d]);
    assert!(!out.iter().any(|o| matches!(o, Output::Close { .. })));
    run(&mut hub, text(1, r#"{"type":"warp","seq":4}"#.into()), &mut [&mut d]);
    let errs: Vec<&WireMessage> = d.inbox.iter().filter(|m| matches!(m, WireMessage::Error { .. })).collect();
    assert_eq!(errs.len(), 2);
    assert!(matches!(errs[1], WireMessage::Error { in_reply_to: Some(4), .. }));
    // Still a working driver.
    let m = d.session(SessionCommand::StartRecord { session_id: None });
    run(&mut hub, text(1, m), &mut [&mut d]);
    assert!(hub.is_recording());
}

#[test]
fn client_seq_must_increase_and_actions_must_answer_recent_frames() {
    let (mut hub, mut d) = driver_hub();
    let m = d.session(SessionCommand::StartRecord { session_id: None });
    run(&mut hub, text(1, m.clone()), &mut [&mut d]);
    run(&mut hub, text(1, m), &mut [&mut d]);
    assert_eq!(d.errors().len(), 1, "replayed seq accepted");
    let stale = WireMessage::Action {
        seq: d.next(),
        frame_seq: 1,
        action: Action::Forward,
    };
    run(&mut hub, text(1, stale.to_json()), &mut [&mut d]);
    assert_eq!(d.errors().len(), 2, "action answering a hello accepted");
    run(&mut hub, Input::Tick, &mut [&mut d]);
    let m = d.session(SessionCommand::StopRecord);
    let ep = episodes(&run(&mut hub, text(1, m), &mut [&mut d])).remove(0);
    assert_eq!(ep.records[0].action, Action::None);
}

#[test]
fn start_while_recording_is_an_error() {
    let (mut hub, mut d) = driver_hub();
    for _ in 0..2 {
        let m = d.session(SessionCommand::StartRecord { session_id: None });
        run(&mut hub, text(1, m), &mut [&mut d]);
    }
    assert_eq!(d.errors(), vec!["already recording".to_string()]);
    let m = d.session(SessionCommand::StopRecord);
    run(&mut hub, text(1, m), &mut [&mut d]);
    let m = d.session(SessionCommand::StopRecord);
    run(&mut hub, text(1, m), &mut [&mut d]);
    assert_eq!(d.errors().len(), 2);
}

#[test]
fn lighting_toggle_is_stamped_from_the_next_tick() {
    let (mut hub, mut d) = driver_hub();
    let m = d.session(SessionCommand::StartRecord { session_id: None });
    run(&mut hub, text(1, m), &mut [&mut d]);
    for t in 0..12 {
        if t == 5 {
            let m = d.session(SessionCommand::SetLighting { lighting: Lighting::Low });
            run(&mut hub, text(1, m), &mut [&mut d]);
        }
        let m = d.action(Action::Forward);
        run(&mut hub, text(1, m), &mut [&mut d]);
        run(&mut hub, Input::Tick, &mut [&mut d]);
    }
    let m = d.session(SessionCommand::StopRecord);
    let ep = episodes(&run(&mut hub, text(1, m), &mut [&mut d])).remove(0);
    for r in &ep.records {
        let want = if r.tick < 5 { Lighting::High } else { Lighting::Low };
        assert_eq!(r.lighting, want, "tick {}", r.tick);
    }
    // The frame logged at the switch tick is already the low-light view.
    let low = World::new(WorldConfig {
        lighting: Lighting::Low,
        ..config()
    })
    .unwrap();
    let mut s = low.start_state();
    for r in &ep.records[..5] {
        s = low.step(&s, r.action, low.config.dt());
    }
    assert_eq!(ep.records[5].frame, low.render(&s));
    assert_ne!(ep.records[5].frame, World::new(config()).unwrap().render(&s));
    assert!(d.errors().is_empty());
}

#[test]
fn reset_restores_the_selected_start() {
    let (mut hub, mut d) = driver_hub();
    for _ in 0..20 {
        let m = d.action(Action::Forward);
        run(&mut hub, text(1, m), &mut [&mut d]);
        run(&mut hub, Input::Tick, &mut [&mut d]);
    }
    let world = World::new(config()).unwrap();
    assert_ne!(hub.state().pose, world.state_at(0).pose);
    let m = d.session(SessionCommand::Reset { position: Some(2) });
    run(&mut hub, text(1, m), &mut [&mut d]);
    assert_eq!(hub.state().pose, world.state_at(2).pose);
    assert_eq!(hub.state().tick, 20);
    let m = d.session(SessionCommand::Reset { position: Some(7) });
    run(&mut hub, text(1, m), &mut [&mut d]);
    assert_eq!(d.errors().len(), 1);
}

#[test]
fn observers_watch_but_never_steer() {
    let (mut hub, mut d) = driver_hub();
    let mut o = Client::new(9);
    run(&mut hub, Input::Connect { conn: 9, role: Role::Observer }, &mut [&mut d, &mut o]);
    let before: WorldState = hub.state().clone();
    let m = o.session(SessionCommand::StartRecord { session_id: None });
    run(&mut hub, text(9, m), &mut [&mut d, &mut o]);
    let m = o.action(Action::Forward);
    run(&mut hub, text(9, m), &mut [&mut d, &mut o]);
    let m = o.session(SessionCommand::SetLighting { lighting: Lighting::Low });
    run(&mut hub, text(9, m), &mut [&mut d, &mut o]);
    assert_eq!(o.errors().len(), 3);
    assert_eq!(hub.state(), &before);
    assert!(!hub.is_recording());
    assert_eq!(hub.world().config.lighting, Lighting::High);
    run(&mut hub, Input::Tick, &mut [&mut d, &mut o]);
    assert_eq!(hub.state().pose, before.pose, "observer action leaked into the tick");
    let frames = o.inbox.iter().filter(|m| matches!(m, WireMessage::Frame { .. })).count();
    assert_eq!(frames, 2);
}

#[test]
fn recorded_session_replays_bit_identically() {
    let (mut hub, mut d) = driver_hub();
    let m = d.session(SessionCommand::StartRecord { session_id: Some("r".into()) });
    run(&mut hub, text(1, m), &mut [&mut d]);
    let script = [Action::Forward, Action::Forward, Action::LeftPivot, Action::None, Action::Backward, Action::RightPivot];
    for k in 0..60 {
        if k % 7 != 3 {
            let m = d.action(script[k % script.len()]);
            run(&mut hub, text(1, m), &mut [&mut d]);
        }
        run(&mut hub, Input::Tick, &mut [&mut d]);
    }
    let m = d.session(SessionCommand::StopRecord);
    let ep = episodes(&run(&mut hub, text(1, m), &mut [&mut d])).remove(0);
    let log: Vec<Action> = ep.records.iter().map(|r| r.action).collect();
    let world = World::new(config()).unwrap();
    let mut i = 0;
    let mut replay = |_: &World, _: &WorldState| {
        i += 1;
        log[i - 1]
    };
    let again = record_from(&world, world.start_state(), &mut replay, log.len(), "r", "human", 0);
    assert_eq!(again.records, ep.records);
    // Frames on the wire decode to the rendered frames.
    let WireMessage::Frame { png, width, .. } = &d.inbox[1] else { panic!() };
    assert_eq!(*width, 16);
    assert_eq!(decode_frame(png).unwrap(), ep.records[0].frame);
}

#[test]
fn wire_messages_round_trip_through_json() {
    let msgs = vec![
        WireMessage::Action {
            seq: 7,
            frame_seq: 6,
            action: Action::RightPivot,
        },
        WireMessage::Session {
            seq: 8,
            command: SessionCommand::SetTrack {
                track: gaplab::sim::TrackShape::Oval,
            },
        },
        WireMessage::Session {
            seq: 9,
            command: SessionCommand::Reset { position: None },
        },
        WireMessage::Error {
            seq: 1,
            message: "x".into(),
            in_reply_to: None,
        },
    ];
    for m in msgs {
        assert_eq!(WireMessage::parse(&m.to_json()).unwrap(), m);
    }
    assert_eq!(
        WireMessage::Action {
            seq: 3,
            frame_seq: 2,
            action: Action::Forward
        }
        .to_json(),
        r#"{"type":"action","seq":3,"frame_seq":2,"action":"forward"}"#
    );
    assert_eq!(
        WireMessage::Session {
            seq: 1,
            command: SessionCommand::StartRecord { session_id: None }
        }
        .to_json(),
        r#"{"type":"session","seq":1,"command":"start_record","session_id":null}"#
    );
    assert_eq!(role_from_query("/?role=driver"), Ok(Role::Driver));
    assert_eq!(role_from_query("/"), Ok(Role::Observer));
    assert!(role_from_query("/?role=pilot").is_err());
}

async fn start(period: Duration) -> (std::net::SocketAddr, tokio::sync::oneshot::Sender<()>, tokio::task::JoinHandle<server::ServeSummary>, tempfile::TempDir) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (stop, rx) = tokio::sync::oneshot::channel::<()>();
    let hub = Hub::new(config()).unwrap();
    let task = tokio::spawn(async move {
        serve(hub, listener, Some(root), Some(period), async {
            let _ = rx.await;
        })
        .await
        .unwrap()
    });
    (addr, stop, task, dir)
}

async fn recv(ws: &mut (impl StreamExt<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin)) -> WireMessage {
    loop {
        match tokio::time::timeout(Duration::from_secs(10), ws.next()).await.unwrap() {
            Some(Ok(Message::Text(t))) => return WireMessage::parse(&t).unwrap(),
            Some(Ok(_)) => continue,
            other => panic!("{other:?}"),
        }
    }
}

#[tokio::test]
async fn websocket_driver_records_and_disconnect_saves() {
    let (addr, stop, task, dir) = start(Duration::from_millis(15)).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/?role=driver")).await.unwrap();
    assert!(matches!(recv(&mut ws).await, WireMessage::Hello { role: Role::Driver, .. }));
    let start = WireMessage::Session {
        seq: 1,
        command: SessionCommand::StartRecord { session_id: Some("live".into()) },
    };
    ws.send(Message::Text(start.to_json())).await.unwrap();
    let mut seq = 1;
    let mut frames = 0;
    while frames < 12 {
        if let WireMessage::Frame { seq: fs, .. } = recv(&mut ws).await {
            frames += 1;
            seq += 1;
            let a = WireMessage::Action {
                seq,
                frame_seq: fs,
                action: Action::Forward,
            };
            ws.send(Message::Text(a.to_json())).await.unwrap();
        }
    }
    // A second driver is turned away.
    let (mut second, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/?role=driver")).await.unwrap();
    assert!(matches!(recv(&mut second).await, WireMessage::Error { .. }));
    drop(ws);
    tokio::time::sleep(Duration::from_millis(100)).await;
    stop.send(()).unwrap();
    let summary = task.await.unwrap();
    assert_eq!(summary.episodes, vec![dir.path().join("live")]);
    let ep = Episode::load(&dir.path().join("live")).unwrap();
    assert!(ep.len() >= 10);
    assert!(ep.records.iter().filter(|r| r.action == Action::Forward).count() >= 5);
}

/// Hand-built masked client text frame.
fn client_frame(payload: &[u8], mask: [u8; 4]) -> Vec<u8> {
    let mut f = vec![0x81];
    if payload.len() < 126 {
        f.push(0x80 | payload.len() as u8);
    } else {
        f.push(0x80 | 126);
        f.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    }
    f.extend_from_slice(&mask);
    f.extend(payload.iter().enumerate().map(|(i, b)| b ^ mask[i % 4]));
    f
}

/// Unmasked server frames from `buf`; returns the text payloads.
fn server_texts(buf: &[u8]) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 2 <= buf.len() {
        let op = buf[i] & 0x0f;
        let mut len = (buf[i + 1] & 0x7f) as usize;
        let mut h = 2;
        if len == 126 {
            len = u16::from_be_bytes([buf[i + 2], buf[i + 3]]) as usize;
            h = 4;
        } else if len == 127 {
            len = u64::from_be_bytes(buf[i + 2..i + 10].try_into().unwrap()) as usize;
            h = 10;
        }
        if i + h + len > buf.len() {
            break;
        }
        if op == 1 {
            out.push(String::from_utf8(buf[i + h..i + h + len].to_vec()).unwrap());
        }
        i += h + len;
    }
    out
}

async fn write_split(s: &mut TcpStream, bytes: &[u8], chunk: usize) {
    for c in bytes.chunks(chunk) {
        s.write_all(c).await.unwrap();
        s.flush().await.unwrap();
        tokio::time::sleep(Duration::from_millis(1)).await;
    }
}

/// Read until `done` accepts the buffer or five seconds pass.
async fn read_until(s: &mut TcpStream, buf: &mut Vec<u8>, done: impl Fn(&[u8]) -> bool) {
    let mut tmp = [0u8; 4096];
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while !done(buf) {
        match tokio::time::timeout_at(deadline, s.read(&mut tmp)).await {
            Ok(Ok(0)) | Err(_) => break,
            Ok(Ok(n)) => buf.extend_from_slice(&tmp[..n]),
            Ok(Err(e)) => panic!("{e}"),
        }
    }
}

fn head_len(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

async fn raw_session(addr: std::net::SocketAddr, chunk: usize) -> Vec<String> {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.set_nodelay(true).unwrap();
    let handshake = "GET /?role=observer HTTP/1.1\r\nHost: localhost\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n\
                     Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n";
    write_split(&mut s, handshake.as_bytes(), chunk).await;
    // Clients wait for the 101 before sending frames.
    let mut buf = Vec::new();
    read_until(&mut s, &mut buf, |b| head_len(b).is_some()).await;
    let h = head_len(&buf).expect("no handshake response");
    let head = String::from_utf8_lossy(&buf[..h]).to_string();
    assert!(head.starts_with("HTTP/1.1 101"), "{head}");
    assert!(head.contains("s3pPLMBiTxaQ9kYGzzhZRbK+xOo="));
    let mut bytes = client_frame(br#"{"type":"hello","seq":1,"protocol":"gaplab-wire/1","role":"observer","fps":30,"width":16,"height":12}"#, [1, 2, 3, 4]);
    bytes.extend(client_frame(b"{not json", [9, 8, 7, 6]));
    bytes.extend(client_frame(br#"{"type":"action","seq":5,"frame_seq":2,"action":"forward"}"#, [0xaa, 0x55, 0, 0xff]));
    write_split(&mut s, &bytes, chunk).await;
    read_until(&mut s, &mut buf, |b| server_texts(&b[h..]).len() >= 5).await;
    server_texts(&buf[h..])
}

#[tokio::test]
async fn byte_split_streams_parse_identically() {
    // No tick fires within the hour, so the exchange is deterministic.
    let (addr, stop, task, _dir) = start(Duration::from_secs(3600)).await;
    let whole = raw_session(addr, usize::MAX).await;
    for chunk in [64, 7, 3, 2, 1] {
        assert_eq!(raw_session(addr, chunk).await, whole, "chunk {chunk}");
    }
    let msgs: Vec<WireMessage> = whole.iter().map(|t| WireMessage::parse(t).unwrap()).collect();
    assert!(matches!(msgs[0], WireMessage::Hello { role: Role::Observer, .. }));
    assert!(matches!(msgs[1], WireMessage::Frame { .. }));
    assert!(matches!(msgs[2], WireMessage::State { .. }));
    assert!(matches!(&msgs[3], WireMessage::Error { message, .. } if message.starts_with("malformed")));
    assert!(matches!(&msgs[4], WireMessage::Error { in_reply_to: Some(5), .. }));
    stop.send(()).unwrap();
    task.await.unwrap();
}

#[test]
fn documented_action_frame_bytes() {
    let doc = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../protocol.md")).unwrap();
    let json = WireMessage::Action {
        seq: 1,
        frame_seq: 2,
        action: Action::Forward,
    }
    .to_json();
    let hex: String = client_frame(json.as_bytes(), [0x37, 0xfa, 0x21, 0x3d])
        .chunks(16)
        .map(|c| c.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    assert!(doc.contains(&hex), "{hex}");
    assert!(doc.contains(&json));

    // server frames as tungstenite writes them: unmasked, shortest length form
    for kind in ["error", "frame"] {
        let line = doc.lines().find(|l| l.starts_with(&format!("{{\"type\":\"{kind}\""))).unwrap();
        let mut bytes = Vec::new();
        Frame::message(line.as_bytes().to_vec(), OpCode::Data(Data::Text), true).format(&mut bytes).unwrap();
        let head: Vec<_> = bytes[..16].iter().map(|b| format!("{b:02x}")).collect();
        assert!(doc.contains(&head.join(" ")), "{kind}: {}", head.join(" "));
    }
}
