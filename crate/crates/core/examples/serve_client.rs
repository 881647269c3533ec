//! Start the console endpoint on a free port and drive it from a WebSocket
//! client: a few telemetry frames at hover, then a forward setpoint.
//!
//! cargo run --release --example serve_client

use std::net::{TcpListener, TcpStream};

use neuroflight::cli::serve::{serve, ServeConfig, TelemetryMessage};
use neuroflight::control::FlyConfig;
use tungstenite::Message;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let out = std::env::temp_dir().join("neuroflight_serve_example");
    std::fs::create_dir_all(&out)?;
    let cfg = ServeConfig {
        max_session_s: 6.0,
        max_sessions: 1,
        ..ServeConfig::default()
    };
    let log_dir = out.clone();
    let server = std::thread::spawn(move || serve(listener, &cfg, &FlyConfig::default(), None, 1, &log_dir));

    let stream = TcpStream::connect(addr)?;
    let (mut ws, _) = tungstenite::client(format!("ws://{addr}/"), stream)?;
    let mut frames = 0;
    loop {
        let msg = match ws.read() {
            Ok(Message::Text(t)) => t,
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        frames += 1;
        if frames == 40 {
            let sp = r#"{"type":"setpoint","nu":[0.3,0.0,0.0],"omega_z":0.0}"#;
            ws.send(Message::text(sp))?;
        }
        if frames % 10 == 0 {
            match serde_json::from_str::<TelemetryMessage>(msg.as_str()) {
                Ok(m) => println!(
                    "t {:5.2}  z {:.2}  nu_hat {:+.3?}  setpoint {:?}",
                    m.t, m.p[2], m.nu_hat, m.setpoint
                ),
                Err(_) => println!("{msg}"),
            }
        }
    }
    let sessions = server.join().expect("server thread")?;
    println!("{sessions} session, log in {}", out.join("serve_session_0.csv").display());
    Ok(())
}
