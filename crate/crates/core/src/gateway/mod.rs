//! Teleoperation gateway.
//!
//! [`Hub`] is the whole session logic with no I/O: connection events, text
//! messages and clock ticks go in, addressed messages and finished episodes
//! come out. [`server`] binds it to websockets.

pub mod server;

use std::collections::BTreeMap;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datapipe::{Episode, FrameRecord};
use crate::frame::Frame;
use crate::sim::{Action, Lighting, Pose, SimError, TrackShape, World, WorldConfig, WorldState};

pub const PROTOCOL: &str = "gaplab-wire/1";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("frame encoding: {0}")]
    Encode(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Driver,
    Observer,
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "driver" => Ok(Role::Driver),
            "observer" => Ok(Role::Observer),
            _ => Err(format!("unknown role `{s}` (expected driver or observer)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum SessionCommand {
    StartRecord {
        #[serde(default)]
        session_id: Option<String>,
    },
    StopRecord,
    Reset {
        #[serde(default)]
        position: Option<usize>,
    },
    SetLighting {
        lighting: Lighting,
    },
    SetTrack {
        track: TrackShape,
    },
}

/// One JSON text message. `seq` counts messages per direction per
/// connection, starting at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WireMessage {
    Hello {
        seq: u64,
        protocol: String,
        role: Role,
        fps: u32,
        width: usize,
        height: usize,
    },
    Frame {
        seq: u64,
        tick: u64,
        width: usize,
        height: usize,
        /// Base64 PNG.
        png: String,
        pose: Pose,
    },
    Action {
        seq: u64,
        /// Seq of the frame this action answers.
        frame_seq: u64,
        action: Action,
    },
    Session {
        seq: u64,
        #[serde(flatten)]
        command: SessionCommand,
    },
    State {
        seq: u64,
        tick: u64,
        recording: bool,
        sim_time: f64,
        lap_progress: f64,
        lap_complete: bool,
        collided: bool,
        lighting: Lighting,
        track: TrackShape,
    },
    Error {
        seq: u64,
        message: String,
        /// Seq of the offending client message, when it could be read.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_reply_to: Option<u64>,
    },
}

impl WireMessage {
    pub fn seq(&self) -> u64 {
        match self {
            WireMessage::Hello { seq, .. }
            | WireMessage::Frame { seq, .. }
            | WireMessage::Action { seq, .. }
            | WireMessage::Session { seq, .. }
            | WireMessage::State { seq, .. }
            | WireMessage::Error { seq, .. } => *seq,
        }
    }

    fn set_seq(&mut self, n: u64) {
        match self {
            WireMessage::Hello { seq, .. }
            | WireMessage::Frame { seq, .. }
            | WireMessage::Action { seq, .. }
            | WireMessage::Session { seq, .. }
            | WireMessage::State { seq, .. }
            | WireMessage::Error { seq, .. } => *seq = n,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

pub fn encode_frame(frame: &Frame) -> Result<String, GatewayError> {
    let png = frame.to_png().map_err(|e| GatewayError::Encode(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(png))
}

pub fn decode_frame(png_b64: &str) -> Result<Frame, GatewayError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(png_b64)
        .map_err(|e| GatewayError::Encode(e.to_string()))?;
    Frame::from_png(&bytes).map_err(|e| GatewayError::Encode(e.to_string()))
}

pub type ConnId = u64;

#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Connect { conn: ConnId, role: Role },
    Disconnect { conn: ConnId },
    Text { conn: ConnId, text: String },
    Tick,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Output {
    Send { conn: ConnId, msg: WireMessage },
    /// Drop the connection after delivering what was sent to it.
    Close { conn: ConnId },
    /// A stopped recording, already validated.
    Episode(Episode),
}

struct Conn {
    role: Role,
    sent: u64,
    received: u64,
    /// Seqs of the last two frames sent, newest first.
    frames: [Option<u64>; 2],
}

/// Session state machine around one world.
pub struct Hub {
    world: World,
    state: WorldState,
    frame: Frame,
    conns: BTreeMap<ConnId, Conn>,
    driver: Option<ConnId>,
    pending: Option<Action>,
    recording: Option<Episode>,
    sessions: u64,
    /// Wall-clock origin stamped on records; fixed so sessions replay.
    pub epoch_ms: u64,
}

impl Hub {
    pub fn new(config: WorldConfig) -> Result<Self, GatewayError> {
        let world = World::new(config)?;
        let state = world.start_state();
        let frame = world.render(&state);
        Ok(Self {
            world,
            state,
            frame,
            conns: BTreeMap::new(),
            driver: None,
            pending: None,
            recording: None,
            sessions: 0,
            epoch_ms: 0,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    pub fn driver(&self) -> Option<ConnId> {
        self.driver
    }

    pub fn handle(&mut self, input: Input) -> Vec<Output> {
        let mut out = Vec::new();
        match input {
            Input::Connect { conn, role } => self.connect(conn, role, &mut out),
            Input::Disconnect { conn } => {
                self.conns.remove(&conn);
                if self.driver == Some(conn) {
                    self.driver = None;
                    self.pending = None;
                    self.stop_recording(&mut out);
                }
            }
            Input::Text { conn, text } => self.text(conn, &text, &mut out),
            Input::Tick => self.tick(&mut out),
        }
        out
    }

    fn send(&mut self, conn: ConnId, mut msg: WireMessage, out: &mut Vec<Output>) {
        let Some(c) = self.conns.get_mut(&conn) else { return };
        c.sent += 1;
        msg.set_seq(c.sent);
        if matches!(msg, WireMessage::Frame { .. }) {
            c.frames = [Some(c.sent), c.frames[0]];
        }
        out.push(Output::Send { conn, msg });
    }

    fn error(&mut self, conn: ConnId, message: impl Into<String>, in_reply_to: Option<u64>, out: &mut Vec<Output>) {
        let msg = WireMessage::Error {
            seq: 0,
            message: message.into(),
            in_reply_to,
        };
        self.send(conn, msg, out);
    }

    fn connect(&mut self, conn: ConnId, role: Role, out: &mut Vec<Output>) {
        self.conns.insert(
            conn,
            Conn {
                role,
                sent: 0,
                received: 0,
                frames: [None, None],
            },
        );
        if role == Role::Driver && self.driver.is_some() {
            self.error(conn, "a driver is already connected", None, out);
            self.conns.remove(&conn);
            out.push(Output::Close { conn });
            return;
        }
        if role == Role::Driver {
            self.driver = Some(conn);
        }
        let c = &self.world.config;
        let hello = WireMessage::Hello {
            seq: 0,
            protocol: PROTOCOL.into(),
            role,
            fps: c.fps,
            width: c.frame_width,
            height: c.frame_height,
        };
        self.send(conn, hello, out);
        match (self.frame_message(), self.state_message()) {
            (Ok(f), s) => {
                self.send(conn, f, out);
                self.send(conn, s, out);
            }
            (Err(e), _) => self.error(conn, e.to_string(), None, out),
        }
    }

    fn text(&mut self, conn: ConnId, text: &str, out: &mut Vec<Output>) {
        let Some(c) = self.conns.get(&conn) else { return };
        let (role, received, frames) = (c.role, c.received, c.frames);
        let msg = match WireMessage::parse(text) {
            Ok(m) => m,
            Err(e) => {
                let seq = serde_json::from_str::<serde_json::Value>(text)
                    .ok()
                    .and_then(|v| v.get("seq").and_then(|s| s.as_u64()));
                return self.error(conn, format!("malformed message: {e}"), seq, out);
            }
        };
        let seq = msg.seq();
        if seq <= received {
            return self.error(conn, format!("seq {seq} does not follow {received}"), Some(seq), out);
        }
        self.conns.get_mut(&conn).unwrap().received = seq;
        match msg {
            WireMessage::Action { frame_seq, action, .. } => {
                if role != Role::Driver {
                    return self.error(conn, "observers cannot act", Some(seq), out);
                }
                if !frames.contains(&Some(frame_seq)) {
                    return self.error(
                        conn,
                        format!("action answers frame {frame_seq}, not one of the last two frames"),
                        Some(seq),
                        out,
                    );
                }
                self.pending = Some(action);
            }
            WireMessage::Session { command, .. } => {
                if role != Role::Driver {
                    return self.error(conn, "observers cannot control the session", Some(seq), out);
                }
                if let Err(e) = self.session(command, out) {
                    self.error(conn, e, Some(seq), out);
                } else {
                    self.broadcast_state(out);
                }
            }
            WireMessage::Hello { .. } => {}
            _ => self.error(conn, "clients may send hello, action and session messages", Some(seq), out),
        }
    }

    fn session(&mut self, command: SessionCommand, out: &mut Vec<Output>) -> Result<(), String> {
        match command {
            SessionCommand::StartRecord { session_id } => {
                if self.recording.is_some() {
                    return Err("already recording".into());
                }
                self.sessions += 1;
                let id = session_id.unwrap_or_else(|| format!("session-{:03}", self.sessions));
                self.recording = Some(Episode::new(id, "human", &self.world.config));
            }
            SessionCommand::StopRecord => {
                if self.recording.is_none() {
                    return Err("not recording".into());
                }
                self.stop_recording(out);
            }
            SessionCommand::Reset { position } => {
                let p = position.unwrap_or(self.world.config.start_index);
                if p > 3 {
                    return Err(format!("start position {p} outside 0..=3"));
                }
                let tick = self.state.tick;
                self.state = self.world.state_at(p);
                // Keep the clock running so recordings stay gap-free.
                self.state.tick = tick;
                self.state.time = tick as f64 * self.world.config.dt();
                self.pending = None;
                self.refresh_frame(out);
            }
            SessionCommand::SetLighting { lighting } => {
                let config = WorldConfig {
                    lighting,
                    ..self.world.config.clone()
                };
                self.world = World::new(config).map_err(|e| e.to_string())?;
                self.refresh_frame(out);
            }
            SessionCommand::SetTrack { track } => {
                if self.recording.is_some() {
                    return Err("cannot change the track while recording".into());
                }
                let config = WorldConfig {
                    track,
                    ..self.world.config.clone()
                };
                self.world = World::new(config).map_err(|e| e.to_string())?;
                let tick = self.state.tick;
                self.state = self.world.start_state();
                self.state.tick = tick;
                self.state.time = tick as f64 * self.world.config.dt();
                self.refresh_frame(out);
            }
        }
        Ok(())
    }

    fn stop_recording(&mut self, out: &mut Vec<Output>) {
        if let Some(ep) = self.recording.take() {
            if ep.validate().is_ok() {
                out.push(Output::Episode(ep));
            }
        }
    }

    fn refresh_frame(&mut self, out: &mut Vec<Output>) {
        self.frame = self.world.render(&self.state);
        self.broadcast_frame(out);
    }

    /// Apply the pending action (or the no-op), log it against the frame it
    /// was chosen from, advance, and publish the new frame.
    fn tick(&mut self, out: &mut Vec<Output>) {
        let action = self.pending.take().unwrap_or(Action::None);
        let fps = self.world.config.fps as u64;
        if let Some(ep) = &mut self.recording {
            ep.records.push(FrameRecord {
                tick: self.state.tick,
                action,
                lighting: self.world.config.lighting,
                unix_ms: self.epoch_ms + self.state.tick * 1000 / fps,
                frame: self.frame.clone(),
            });
        }
        self.state = self.world.step(&self.state, action, self.world.config.dt());
        self.refresh_frame(out);
        self.broadcast_state(out);
    }

    fn frame_message(&self) -> Result<WireMessage, GatewayError> {
        Ok(WireMessage::Frame {
            seq: 0,
            tick: self.state.tick,
            width: self.frame.width,
            height: self.frame.height,
            png: encode_frame(&self.frame)?,
            pose: self.state.pose.clone(),
        })
    }

    fn state_message(&self) -> WireMessage {
        WireMessage::State {
            seq: 0,
            tick: self.state.tick,
            recording: self.recording.is_some(),
            sim_time: self.state.time,
            lap_progress: self.state.progress(),
            lap_complete: self.state.lap.lap_complete(),
            collided: self.state.collided,
            lighting: self.world.config.lighting,
            track: self.world.config.track,
        }
    }

    fn broadcast_frame(&mut self, out: &mut Vec<Output>) {
        let ids: Vec<ConnId> = self.conns.keys().copied().collect();
        match self.frame_message() {
            Ok(m) => ids.into_iter().for_each(|c| self.send(c, m.clone(), out)),
            Err(e) => ids.into_iter().for_each(|c| self.error(c, e.to_string(), None, out)),
        }
    }

    fn broadcast_state(&mut self, out: &mut Vec<Output>) {
        let m = self.state_message();
        let ids: Vec<ConnId> = self.conns.keys().copied().collect();
        for c in ids {
            self.send(c, m.clone(), out);
        }
    }
}
