use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use neuroflight::cli::serve::{serve, ServeConfig};
use neuroflight::control::FlyConfig;
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

struct Server {
    addr: String,
    handle: JoinHandle<neuroflight::Result<usize>>,
    dir: tempfile::TempDir,
}

fn start(cfg: ServeConfig) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let out: PathBuf = dir.path().to_path_buf();
    let fly = FlyConfig { noise: false, ..FlyConfig::default() };
    let handle = std::thread::spawn(move || serve(listener, &cfg, &fly, None, 1, &out));
    Server { addr, handle, dir }
}

fn connect(addr: &str) -> WebSocket<TcpStream> {
    let stream = TcpStream::connect(addr).unwrap();
    let (ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).unwrap();
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(20))).unwrap();
    ws
}

/// Next JSON text message, or None on timeout or close.
fn next(ws: &mut WebSocket<TcpStream>, within: Duration) -> Option<Value> {
    let deadline = Instant::now() + within;
    while Instant::now() < deadline {
        match ws.read() {
            Ok(Message::Text(t)) => return Some(serde_json::from_str(t.as_str()).unwrap()),
            Ok(Message::Close(_)) => return None,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(_) => return None,
        }
    }
    None
}

fn next_of(ws: &mut WebSocket<TcpStream>, kind: &str, within: Duration) -> Option<Value> {
    let deadline = Instant::now() + within;
    while let Some(v) = next(ws, deadline.saturating_duration_since(Instant::now())) {
        if v["type"] == kind {
            return Some(v);
        }
    }
    None
}

fn send(ws: &mut WebSocket<TcpStream>, v: &Value) {
    ws.send(Message::text(v.to_string())).unwrap();
}

fn floats(v: &Value, key: &str) -> Vec<f64> {
    v[key].as_array().unwrap_or_else(|| panic!("{key} missing")).iter().map(|x| x.as_f64().unwrap()).collect()
}

fn realtime(max_s: f64) -> ServeConfig {
    ServeConfig { realtime: true, max_session_s: max_s, max_sessions: 1, ..ServeConfig::default() }
}

/// Close the client, wait for the server and return the log's row count.
fn finish(server: Server, mut ws: WebSocket<TcpStream>) -> usize {
    let _ = ws.close(None);
    while next(&mut ws, Duration::from_millis(100)).is_some() {}
    assert_eq!(server.handle.join().unwrap().unwrap(), 1);
    let csv = server.dir.path().join("serve_session_0.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("mode,t,px"), "{}", &text[..40.min(text.len())]);
    text.lines().count() - 1
}

#[test]
fn telemetry_carries_the_console_fields() {
    let server = start(realtime(10.0));
    let mut ws = connect(&server.addr);
    let m = next_of(&mut ws, "telemetry", Duration::from_secs(2)).expect("telemetry");
    assert!(m["t"].as_f64().unwrap() >= 0.0);
    for (key, n) in [("p", 3), ("q", 4), ("nu_hat", 3), ("nu_gt", 3), ("setpoint", 3), ("cmd", 4)] {
        assert_eq!(floats(&m, key).len(), n, "{key}");
    }
    let q = floats(&m, "q");
    assert!((q.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
    assert!(m["omega_z_hat"].is_number());
    assert!(m["activity"].as_array().unwrap().is_empty());
    assert!((floats(&m, "p")[2] - 1.5).abs() < 0.1);
    finish(server, ws);
}

#[test]
fn setpoint_is_acknowledged_within_one_frame() {
    let server = start(realtime(10.0));
    let mut ws = connect(&server.addr);
    next_of(&mut ws, "telemetry", Duration::from_secs(2)).expect("telemetry");
    // drain whatever is already queued so the count below starts at the send
    while next(&mut ws, Duration::from_millis(5)).is_some() {}
    send(&mut ws, &json!({"type": "setpoint", "nu": [0.2, 0.0, -0.1], "omega_z": 0.1}));
    let sent = Instant::now();
    let mut frames = 0;
    loop {
        let m = next_of(&mut ws, "telemetry", Duration::from_secs(1)).expect("telemetry");
        frames += 1;
        if floats(&m, "setpoint") == [0.2, 0.0, -0.1] {
            break;
        }
        assert!(frames < 2, "setpoint not echoed by the next frame");
    }
    // 20 Hz telemetry: the next frame is at most 50 ms away
    assert!(sent.elapsed() < Duration::from_millis(150), "{:?}", sent.elapsed());
    finish(server, ws);
}

#[test]
fn bad_messages_get_an_error_reply_and_the_session_continues() {
    let server = start(realtime(10.0));
    let mut ws = connect(&server.addr);
    next_of(&mut ws, "telemetry", Duration::from_secs(2)).expect("telemetry");
    for bad in [
        "{".to_string(),
        json!({"type": "warp"}).to_string(),
        json!({"type": "setpoint", "nu": [0.1, 0.0], "omega_z": 0.0}).to_string(),
        json!({"type": "setpoint", "nu": [0.1, 0.0, 0.0], "omega_z": 0.0, "extra": 1}).to_string(),
        json!({"type": "mode", "controller": "evolved", "frisbee": false}).to_string(),
    ] {
        ws.send(Message::text(bad.clone())).unwrap();
        let e = next_of(&mut ws, "error", Duration::from_secs(1)).unwrap_or_else(|| panic!("no error for {bad}"));
        assert!(!e["message"].as_str().unwrap().is_empty());
    }
    send(&mut ws, &json!({"type": "mode", "controller": "pi", "frisbee": true}));
    let t0 = next_of(&mut ws, "telemetry", Duration::from_secs(1)).expect("still running")["t"].as_f64().unwrap();
    let t1 = next_of(&mut ws, "telemetry", Duration::from_secs(1)).expect("still running")["t"].as_f64().unwrap();
    assert!(t1 > t0);
    finish(server, ws);
}

#[test]
fn pause_toggles_and_reset_rewinds() {
    let server = start(realtime(10.0));
    let mut ws = connect(&server.addr);
    for _ in 0..10 {
        next_of(&mut ws, "telemetry", Duration::from_secs(1)).expect("telemetry");
    }
    send(&mut ws, &json!({"type": "pause"}));
    // one frame may already be in flight
    std::thread::sleep(Duration::from_millis(100));
    while next(&mut ws, Duration::from_millis(5)).is_some() {}
    assert!(next_of(&mut ws, "telemetry", Duration::from_millis(300)).is_none(), "telemetry while paused");
    send(&mut ws, &json!({"type": "pause"}));
    let before = next_of(&mut ws, "telemetry", Duration::from_secs(1)).expect("resumed")["t"].as_f64().unwrap();
    assert!(before > 0.4);
    send(&mut ws, &json!({"type": "reset"}));
    let mut after = f64::INFINITY;
    for _ in 0..3 {
        after = after.min(next_of(&mut ws, "telemetry", Duration::from_secs(1)).expect("telemetry")["t"].as_f64().unwrap());
    }
    assert!(after < 0.2, "t after reset {after}");
    finish(server, ws);
}

#[test]
fn session_ends_at_the_time_limit_with_a_full_rate_log() {
    let cfg = ServeConfig { realtime: false, max_session_s: 1.0, max_sessions: 1, ..ServeConfig::default() };
    let server = start(cfg);
    let mut ws = connect(&server.addr);
    let mut times = Vec::new();
    while let Some(m) = next(&mut ws, Duration::from_secs(5)) {
        if m["type"] == "telemetry" {
            times.push(m["t"].as_f64().unwrap());
        }
    }
    assert!((19..=22).contains(&times.len()), "{} frames in 1 s", times.len());
    assert!(times.windows(2).all(|w| w[1] > w[0]));
    // the log keeps every 50 Hz tick, not just the telemetry frames
    assert!((50..=51).contains(&finish(server, ws)));
}
