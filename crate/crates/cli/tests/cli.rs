use std::fs;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

fn swarmlink() -> Command {
    Command::new(env!("CARGO_BIN_EXE_swarmlink"))
}

fn run(args: &[&str]) -> Output {
    swarmlink().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let o = run(&["run", "takeoff_single", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["uavs"][0]["mission_state"], "hold");
    let d = summary["uavs"][0]["pose"]["position"][2].as_f64().unwrap();
    assert!((d + 10.0).abs() <= 0.5, "{d}");
    let lines = fs::read_to_string(&trace).unwrap();
    assert!(lines.lines().count() as u64 == summary["stats"]["records"].as_u64().unwrap());

    let o = run(&["verify", trace.to_str().unwrap(), "--check", "fsm_safety"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn run_accepts_scenario_files_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("one.toml");
    fs::write(&file, "[sim]\nseed = 5\nduration_s = 3\n\n[[uavs]]\nid = 1\nstart_pos = [0, 0, 0]\n").unwrap();
    let a = run(&["run", file.to_str().unwrap()]);
    assert!(a.status.success(), "{}", stderr(&a));
    let s: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(s["seed"], 5);
    assert_eq!(s["end_us"], 3_000_000);
    let b = run(&["run", file.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(serde_json::from_slice::<Value>(&b.stdout).unwrap()["seed"], 9);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "[sim]\nseed = 1\nduration_s = 5\n\n[[uavs]]\nid = 1\nstart_pos = [0, 0, 0]\n\n[[uavs]]\nid = 1\nstart_pos = [0, 5, 0]\n",
    )
    .unwrap();
    let o = run(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "[sim]\nseed = 1\nduration_s = 5\nspeed = 3\n").unwrap();
    let o = run(&["run", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));

    assert_eq!(run(&["run", "no_such_scenario"]).status.code(), Some(2));
    assert_eq!(run(&["verify", "/nonexistent/trace.jsonl", "--check", "fsm_safety"]).status.code(), Some(1));

    let trace = dir.path().join("t.jsonl");
    assert!(run(&["run", "takeoff_single", "--trace", trace.to_str().unwrap()]).status.success());
    assert_eq!(run(&["verify", trace.to_str().unwrap(), "--check", "no_such_check"]).status.code(), Some(2));
    // a single hovering uav has no formation, and never loses a leader
    let o = run(&["verify", trace.to_str().unwrap(), "--check", "coordinator_takeover"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(serde_json::from_slice::<Value>(&o.stdout).unwrap()["passed"], false);

    let garbage = dir.path().join("garbage.jsonl");
    fs::write(&garbage, "not json\n").unwrap();
    assert_eq!(run(&["verify", garbage.to_str().unwrap(), "--check", "fsm_safety"]).status.code(), Some(2));
}

#[test]
fn lists_bundled_scenarios() {
    let o = run(&["scenarios"]);
    let names = String::from_utf8(o.stdout).unwrap();
    assert!(names.lines().any(|l| l == "wedge_transit"));
    assert_eq!(names.lines().count(), 7);
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http_get(port: u16, path: &str) -> Option<(u16, Value)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut raw = String::new();
    s.read_to_string(&mut raw).ok()?;
    let status = raw.split_whitespace().nth(1)?.parse().ok()?;
    let body = raw.split("\r\n\r\n").nth(1)?;
    Some((status, serde_json::from_str(body).ok()?))
}

fn wait_for_swarm(port: u16, members: usize) -> Value {
    let end = Instant::now() + Duration::from_secs(20);
    loop {
        if let Some((200, v)) = http_get(port, "/api/swarm") {
            if v["members"].as_array().is_some_and(|m| m.len() == members) {
                return v;
            }
        }
        assert!(Instant::now() < end, "no swarm on port {port}");
        thread::sleep(Duration::from_millis(100));
    }
}

#[test]
fn gcs_serves_a_live_sim_on_gcs_bind() {
    let port = free_port();
    let child = swarmlink()
        .args(["gcs", "--scenario", "wedge_transit", "--speed", "10"])
        .env("GCS_BIND", format!("127.0.0.1:{port}"))
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let _guard = Killed(child);
    let v = wait_for_swarm(port, 5);
    assert_eq!(v["stale"], false);
    let (status, audit) = http_get(port, "/api/audit?since=0").unwrap();
    assert_eq!(status, 200);
    assert!(audit.as_array().is_some());
}

#[test]
fn gcs_bind_flag_and_onboard_coordinator() {
    let port = free_port();
    let child = swarmlink()
        .args(["gcs", "--scenario", "wedge_transit", "--speed", "10", "--coordinator", "onboard", "--bind"])
        .arg(format!("127.0.0.1:{port}"))
        .env("GCS_BIND", "not an address")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let _guard = Killed(child);
    wait_for_swarm(port, 5);

    let o = swarmlink().args(["gcs"]).env("GCS_BIND", "not an address").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("GCS_BIND"));
}
