//! WebSocket endpoint for the flight console: one session at a time drives
//! a simulated-observables closed loop.
//!
//! Client to server: `setpoint`, `mode`, `reset` and `pause` messages.
//! Server to client: `telemetry` at 20 Hz, and `error` for rejected input.

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::control::{ControllerKind, FlyConfig, PiController, SimSession, FLY_HEADER};
use crate::error::{Error, Result};
use crate::evolve::LinearController;
use crate::homography::CameraModel;
use crate::io::CsvTable;

use super::ControllerChoice;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub bind: String,
    /// Pace the loop at wall-clock rate.
    pub realtime: bool,
    pub telemetry_hz: f64,
    /// Seconds of telemetry kept for late readers.
    pub history_s: f64,
    /// End a session after this much simulated time; 0 runs until the
    /// client leaves.
    pub max_session_s: f64,
    /// Stop serving after this many sessions; 0 serves forever.
    pub max_sessions: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8765".into(),
            realtime: true,
            telemetry_hz: 20.0,
            history_s: 60.0,
            max_session_s: 0.0,
            max_sessions: 0,
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.telemetry_hz > 0.0) || !(self.history_s >= 0.0) || !(self.max_session_s >= 0.0) {
            return Err(Error::Config("serve rates and durations must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Setpoint { nu: [f64; 3], omega_z: f64 },
    Mode { controller: ControllerChoice, frisbee: bool },
    Reset,
    Pause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "telemetry")]
pub struct TelemetryMessage {
    pub t: f64,
    pub p: [f64; 3],
    pub q: [f64; 4],
    pub nu_hat: [f64; 3],
    pub nu_gt: [f64; 3],
    pub omega_z_hat: f64,
    pub setpoint: [f64; 3],
    pub cmd: [f64; 4],
    /// Per-layer firing fractions; empty while no spiking network is in the
    /// loop.
    pub activity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "error")]
pub struct ErrorMessage {
    pub message: String,
}

/// Protocol state, independent of the socket.
#[derive(Debug, Clone)]
pub struct ServeSession {
    pub session: SimSession,
    pub evolved: Option<LinearController>,
    pub paused: bool,
    pub history: VecDeque<TelemetryMessage>,
    pub log: CsvTable,
    capacity: usize,
    period: f64,
    next_emit: f64,
}

impl ServeSession {
    pub fn new(cfg: &ServeConfig, fly: &FlyConfig, evolved: Option<LinearController>, seed: u64) -> Result<Self> {
        // the console starts on the PI loop unless an evolved controller is loaded
        let kind = match &evolved {
            Some(c) => ControllerKind::Evolved(c.clone()),
            None => ControllerKind::Pi(PiController::default()),
        };
        let session = SimSession::new(fly.clone(), kind, CameraModel::default(), seed)?;
        Ok(Self {
            session,
            evolved,
            paused: false,
            history: VecDeque::new(),
            log: CsvTable::new(&FLY_HEADER),
            capacity: (cfg.history_s * cfg.telemetry_hz).ceil() as usize,
            period: 1.0 / cfg.telemetry_hz,
            next_emit: 0.0,
        })
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Result<()> {
        match msg {
            ClientMessage::Setpoint { nu, omega_z } => {
                if nu.iter().chain([&omega_z]).any(|v| !v.is_finite()) {
                    return Err(Error::Config("setpoint must be finite".into()));
                }
                self.session.setpoint = nu;
                self.session.omega_sp = omega_z;
            }
            ClientMessage::Mode { controller, frisbee } => {
                let kind = match controller {
                    ControllerChoice::Evolved => ControllerKind::Evolved(
                        self.evolved
                            .clone()
                            .ok_or_else(|| Error::MissingAsset("no evolved controller loaded".into()))?,
                    ),
                    ControllerChoice::Pi => ControllerKind::Pi(PiController::default()),
                };
                self.session.set_controller(kind);
                self.session.config.frisbee = frisbee;
            }
            ClientMessage::Reset => {
                let (sp, w) = (self.session.setpoint, self.session.omega_sp);
                self.session.reset()?;
                self.session.setpoint = sp;
                self.session.omega_sp = w;
                self.next_emit = 0.0;
            }
            ClientMessage::Pause => self.paused = !self.paused,
        }
        Ok(())
    }

    pub fn sim_time(&self) -> f64 {
        self.session.sim.t
    }

    /// Advance one control tick unless paused; returns telemetry when due.
    pub fn advance(&mut self) -> Result<Option<TelemetryMessage>> {
        if self.paused {
            return Ok(None);
        }
        let k = self.session.tick()?;
        self.session.record(&mut self.log, &k);
        if k.t + 1e-9 < self.next_emit {
            return Ok(None);
        }
        self.next_emit = (self.next_emit + self.period).max(k.t);
        let s = &k.state;
        let m = TelemetryMessage {
            t: k.t,
            p: [s.p[0], s.p[1], s.p[2]],
            q: [s.q.w, s.q.i, s.q.j, s.q.k],
            nu_hat: [k.used[0], k.used[1], k.used[2]],
            nu_gt: k.obs.nu_body,
            omega_z_hat: k.used[3],
            setpoint: k.setpoint,
            cmd: k.cmd.as_array(),
            activity: Vec::new(),
        };
        if self.capacity > 0 {
            if self.history.len() == self.capacity {
                self.history.pop_front();
            }
            self.history.push_back(m.clone());
        }
        Ok(Some(m))
    }
}

fn ws_err(e: tungstenite::Error) -> Error {
    Error::Serve(e.to_string())
}

fn send(ws: &mut WebSocket<TcpStream>, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))?;
    ws.send(Message::text(text)).map_err(ws_err)
}

/// Drive one connected client until it leaves or the session time runs out.
pub fn run_session(ws: &mut WebSocket<TcpStream>, state: &mut ServeSession, cfg: &ServeConfig) -> Result<()> {
    ws.get_ref()
        .set_read_timeout(Some(Duration::from_millis(1)))
        .map_err(|e| Error::Serve(e.to_string()))?;
    let period = state.session.config.quad.control_period();
    let started = Instant::now();
    let mut ticks: u64 = 0;
    loop {
        loop {
            match ws.read() {
                Ok(Message::Text(t)) => {
                    let parsed: std::result::Result<ClientMessage, _> = serde_json::from_str(t.as_str());
                    let outcome = parsed.map_err(|e| Error::Format(e.to_string())).and_then(|m| state.handle(m));
                    if let Err(e) = outcome {
                        send(ws, &ErrorMessage { message: e.to_string() })?;
                    }
                }
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => break,
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(ws_err(e)),
            }
        }
        if cfg.max_session_s > 0.0 && state.sim_time() >= cfg.max_session_s {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        if let Some(m) = state.advance()? {
            match send(ws, &m) {
                Ok(()) => {}
                Err(_) if !ws.can_write() => return Ok(()),
                Err(e) => return Err(e),
            }
        }
        ticks += 1;
        if cfg.realtime {
            let due = started + Duration::from_secs_f64(ticks as f64 * period);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
}

/// Accept sessions on `listener`; each one's full-rate telemetry is written
/// to `out/serve_session_<n>.csv`. Returns the number of sessions served.
pub fn serve(
    listener: TcpListener,
    cfg: &ServeConfig,
    fly: &FlyConfig,
    evolved: Option<LinearController>,
    seed: u64,
    out: &Path,
) -> Result<usize> {
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream.map_err(|e| Error::Serve(e.to_string()))?;
        let mut ws = match tungstenite::accept(stream) {
            Ok(ws) => ws,
            Err(e) => {
                log::warn!("handshake failed: {e}");
                continue;
            }
        };
        let mut state = ServeSession::new(cfg, fly, evolved.clone(), seed)?;
        log::info!("session {served} connected");
        let result = run_session(&mut ws, &mut state, cfg);
        state.log.write(&out.join(format!("serve_session_{served}.csv")))?;
        served += 1;
        if let Err(e) = result {
            log::warn!("session ended with error: {e}");
        }
        if cfg.max_sessions > 0 && served >= cfg.max_sessions {
            break;
        }
    }
    Ok(served)
}

/// Bind the configured address and serve.
pub fn serve_forever(cfg: &ServeConfig, fly: &FlyConfig, evolved: Option<LinearController>, seed: u64, out: &Path) -> Result<usize> {
    let listener = TcpListener::bind(&cfg.bind).map_err(|e| Error::Serve(format!("bind {}: {e}", cfg.bind)))?;
    log::info!("serving on ws://{}", listener.local_addr().map_err(|e| Error::Serve(e.to_string()))?);
    serve(listener, cfg, fly, evolved, seed, out)
}
