//! Serve the teleop gateway and drive it for a second with a scripted
//! websocket client; the recording lands in a temp directory.

use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use gaplab::gateway::server::serve;
use gaplab::gateway::{Hub, SessionCommand, WireMessage};
use gaplab::sim::{Action, WorldConfig};
use tokio_tungstenite::tungstenite::Message;

#[tokio::main(flavor = "current_thread")]
async fn main() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let dir = std::env::temp_dir().join("gaplab-teleop");
    let hub = Hub::new(WorldConfig::default()).unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(hub, listener, Some(dir), None, async {
        let _ = stopped.await;
    }));

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/?role=driver")).await.unwrap();
    let start = WireMessage::Session {
        seq: 1,
        command: SessionCommand::StartRecord { session_id: None },
    };
    ws.send(Message::Text(start.to_json())).await.unwrap();
    let mut seq = 1;
    let deadline = tokio::time::Instant::now() + Duration::from_secs(1);
    while let Ok(Some(Ok(Message::Text(t)))) = tokio::time::timeout_at(deadline, ws.next()).await {
        if let Ok(WireMessage::Frame { seq: frame_seq, .. }) = WireMessage::parse(&t) {
            seq += 1;
            let a = WireMessage::Action {
                seq,
                frame_seq,
                action: Action::Forward,
            };
            ws.send(Message::Text(a.to_json())).await.unwrap();
        }
    }
    ws.close(None).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    stop.send(()).unwrap();
    let summary = server.await.unwrap().unwrap();
    println!("{} ticks, saved {:?}", summary.ticks, summary.episodes);
}
