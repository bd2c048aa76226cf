use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iotarch"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--config"])
        .arg(scenario("two-region"))
        .args(["--ticks", "60", "--seed", "5", "--mode", "decentralized", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!((summary["ticks"].clone(), summary["seed"].clone(), summary["mode"].clone()), (json!(60), json!(5), json!("decentralized")));
    assert_eq!(summary["violations"], json!([]));
    let lines = std::fs::read_to_string(dir.path().join("run.jsonl")).unwrap().lines().count();
    assert_eq!(summary["logLines"], json!(lines));
    assert!(dir.path().join("cloud-store.jsonl").exists());
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(scenario("smart-home")).unwrap().replace("service = \"temp-stats\", at = 100", "service = \"ghost\", at = 100");
    std::fs::write(&path, text).unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
}

#[test]
fn validate_rules() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.rules");
    std::fs::write(&good, "# comfort\nWHEN room.temp > 23 THEN SET(ac, power, on)\n").unwrap();
    let out = bin().arg("validate-rules").arg(&good).arg("--config").arg(scenario("smart-home")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));

    let bad = dir.path().join("bad.rules");
    std::fs::write(&bad, "WHEN room.temp > 1 THEN ESCALATE(\"x\")\nWHEN room.temp >> 23 THEN SET(ac, power, on)\n").unwrap();
    let out = bin().arg("validate-rules").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.rules:2:17: SyntaxError"));

    let unresolved = dir.path().join("unresolved.rules");
    std::fs::write(&unresolved, "WHEN room.temp > 23 THEN SET(heater, power, on)\n").unwrap();
    let out = bin().arg("validate-rules").arg(&unresolved).arg("--config").arg(scenario("smart-home")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UnresolvedReference"));
}

#[test]
fn replay_prints_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().args(["run", "--config"]).arg(scenario("smart-home")).args(["--ticks", "30", "--out"]).arg(dir.path()).output().unwrap().status;
    assert!(status.success());
    let log = dir.path().join("run.jsonl");
    let out = bin().arg("replay").arg(&log).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let snap: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(snap["tick"], 30);
    assert_eq!(snap["devices"].as_array().unwrap().len(), 2);

    let text = std::fs::read_to_string(&log).unwrap();
    std::fs::write(&log, &text[..text.len() - 5]).unwrap();
    let out = bin().arg("replay").arg(&log).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt log"));
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(name: &str) -> Server {
    let mut child = bin()
        .args(["serve", "--config"])
        .arg(scenario(name))
        .args(["--port", "0", "--tick-ms", "20"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect("listening line").to_string();
    Server { child, addr }
}

fn http(addr: &str, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, serde_json::from_str(body).unwrap_or(Value::Null))
}

fn wait_for(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    false
}

/// Reads one unmasked server text frame.
fn ws_frame(s: &mut TcpStream) -> String {
    let mut head = [0u8; 2];
    s.read_exact(&mut head).unwrap();
    let len = match head[1] & 0x7F {
        126 => {
            let mut b = [0u8; 2];
            s.read_exact(&mut b).unwrap();
            u16::from_be_bytes(b) as usize
        }
        127 => {
            let mut b = [0u8; 8];
            s.read_exact(&mut b).unwrap();
            u64::from_be_bytes(b) as usize
        }
        n => n as usize,
    };
    let mut payload = vec![0u8; len];
    s.read_exact(&mut payload).unwrap();
    String::from_utf8(payload).unwrap()
}

#[test]
fn serve_api() {
    let srv = start("smart-home");
    let a = srv.addr.as_str();

    assert!(wait_for(Duration::from_secs(5), || http(a, "GET", "/devices", "").1.as_array().is_some_and(|d| d.len() == 2)));
    assert_eq!(http(a, "GET", "/devices/99", "").0, 404);

    let (code, user) = http(a, "POST", "/users", r#"{"name":"kim","email":"kim@x.io","preferences":{"channel":"inbox","units":"imperial"}}"#);
    assert_eq!(code, 201, "{user}");
    let uid = user["id"].as_u64().unwrap();
    let (code, err) = http(a, "POST", "/users", r#"{"name":"kim2","email":"kim@x.io"}"#);
    assert_eq!((code, err["code"].as_str()), (409, Some("DuplicateEmail")));
    assert_eq!(http(a, "POST", "/subscriptions", &format!(r#"{{"userId":{uid},"pattern":"notify/#"}}"#)).0, 201);
    assert_eq!(http(a, "POST", "/users", "not json").1["code"], "BadRequest");

    let (code, err) = http(a, "POST", "/rules", "WHEN room.temp >> 23 THEN SET(ac, power, on)");
    assert_eq!(code, 400);
    assert_eq!(err["code"], "SyntaxError");
    assert_eq!(err["position"], json!({ "line": 1, "col": 17 }));
    let (code, rule) = http(a, "POST", "/rules", "WHEN room.temp > 50 THEN NOTIFY(alerts, \"boiling\")");
    assert_eq!((code, rule["id"].as_str()), (201, Some("rule-004")));
    assert_eq!(http(a, "GET", "/rules", "").1.as_array().unwrap().len(), 4);

    // stream acks before issuing the command
    let mut ws = TcpStream::connect(a).unwrap();
    write!(ws, "GET /events?prefix=acks/ HTTP/1.1\r\nHost: {a}\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n").unwrap();
    let mut head = Vec::new();
    while !head.ends_with(b"\r\n\r\n") {
        let mut b = [0u8; 1];
        ws.read_exact(&mut b).unwrap();
        head.push(b[0]);
    }
    assert!(String::from_utf8_lossy(&head).starts_with("HTTP/1.1 101"));

    let (code, cmd) = http(a, "POST", "/devices/2/commands", &format!(r#"{{"userId":{uid},"resourceId":1,"value":true}}"#));
    assert_eq!(code, 201, "{cmd}");
    assert_eq!(cmd["outcome"]["state"], "pending");
    let id = cmd["id"].as_str().unwrap().to_string();

    ws.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    loop {
        let env: Value = serde_json::from_str(&ws_frame(&mut ws)).unwrap();
        assert!(env["topic"].as_str().unwrap().starts_with("acks/"));
        if env["body"]["commandId"] == id.as_str() {
            break;
        }
    }
    let acked = wait_for(Duration::from_secs(10), || {
        let snap = http(a, "GET", "/dashboard/snapshot", "").1;
        snap["commands"].as_array().unwrap().iter().any(|c| c["id"] == id.as_str() && c["outcome"]["state"] == "acked")
    });
    assert!(acked);

    assert!(wait_for(Duration::from_secs(10), || !http(a, "GET", "/notifications?userId=1", "").1.as_array().unwrap().is_empty()));
    let (_, points) = http(a, "GET", &format!("/telemetry?deviceId=1&property=temp&userId={uid}"), "");
    let p = &points.as_array().unwrap()[0];
    assert_eq!(p["unit"], "F");
    assert!(p["value"].as_f64().unwrap() > 70.0);

    let (_, loops) = http(a, "GET", "/loops", "");
    assert_eq!(loops[0]["id"], "edge-home");
    assert_eq!(http(a, "GET", "/loops/edge-home", "").0, 200);
    assert_eq!(http(a, "GET", "/loops/nope", "").0, 404);
    assert_eq!(http(a, "GET", "/plans?region=home", "").0, 200);
}
