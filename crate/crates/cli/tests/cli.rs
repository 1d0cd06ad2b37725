use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use dropal::artifacts;
use dropal::data::write_jsonl;
use dropal::synthetic::{gaussian_blobs, BlobSpec};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dropal"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small dataset and a config; returns (dataset, config).
fn setup(dir: &Path, extra: Value) -> (PathBuf, PathBuf) {
    let ds = gaussian_blobs(BlobSpec { n: 200, dim: 4, classes: 3, separation: 3.0, noise: 1.0, seed: 21 });
    let data = dir.join("blobs.jsonl");
    write_jsonl(&ds, &data).unwrap();
    let mut cfg = json!({ "q": 10, "passes": 3, "max_epochs": 3, "hidden": [8], "global_seed": 5 });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let config = dir.join("config.json");
    std::fs::write(&config, cfg.to_string()).unwrap();
    (data, config)
}

#[test]
fn run_repeat_three_writes_per_seed_and_mean_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), json!({}));
    let out = dir.path().join("out");
    let o = run(&["run", "--config", s(&config), "--dataset", s(&data), "--out", s(&out), "--repeat", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curves: Vec<_> = [5, 6, 7]
        .iter()
        .map(|seed| artifacts::read_curve(&out.join(format!("seed-{seed}/curve.csv"))).unwrap())
        .collect();
    let mean = artifacts::read_mean_curve(&out.join("mean_curve.csv")).unwrap();
    assert_eq!(mean.len(), curves[0].len());
    for (i, m) in mean.iter().enumerate() {
        let xs: Vec<f64> = curves.iter().map(|c| c[i].test_accuracy).collect();
        let mu = xs.iter().sum::<f64>() / 3.0;
        let sd = (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / 3.0).sqrt();
        assert!((m.mean_test_accuracy - mu).abs() <= 1e-12);
        assert!((m.sd_test_accuracy - sd).abs() <= 1e-12);
        assert_eq!(m.runs, 3);
    }
}

#[test]
fn single_run_has_zero_sd_and_reruns_from_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), json!({ "heuristic": "recs", "recs_threshold": 0.3 }));
    let out = dir.path().join("out");
    let o = run(&["run", "--config", s(&config), "--dataset", s(&data), "--out", s(&out), "--seeds", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mean = artifacts::read_mean_curve(&out.join("mean_curve.csv")).unwrap();
    assert!(mean.iter().all(|r| r.sd_test_accuracy == 0.0));

    let echoed = out.join("seed-9/config.json");
    let again = dir.path().join("again");
    let o = run(&["run", "--config", s(&echoed), "--out", s(&again)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read(out.join("seed-9/curve.csv")).unwrap();
    let b = std::fs::read(again.join("seed-9/curve.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.jsonl");
    let o = run(&["run", "--dataset", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.jsonl"));

    let (data, _) = setup(dir.path(), json!({}));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"passes": 3, "typo_field": 1}"#).unwrap();
    let o = run(&["run", "--config", s(&bad), "--dataset", s(&data)]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["run", "--dataset", s(&data), "--seeds", "1,1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

fn write_curve(path: &Path, accs: &[f64]) {
    let rows: Vec<artifacts::CurveRow> = accs
        .iter()
        .enumerate()
        .map(|(i, &a)| artifacts::CurveRow {
            round: i,
            labeled_count: 10 + 5 * i,
            test_accuracy: a,
            dev_loss: 1.0,
            forward_passes: 0,
            wall_time_ms: 0,
        })
        .collect();
    artifacts::write_curve(path, &rows).unwrap();
}

fn table(o: &Output) -> Vec<Vec<String>> {
    String::from_utf8(o.stdout.clone())
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn compare_deficiency_table() {
    let dir = tempfile::tempdir().unwrap();
    let (r, c, short, flat) =
        (dir.path().join("r.csv"), dir.path().join("c.csv"), dir.path().join("short.csv"), dir.path().join("flat.csv"));
    write_curve(&r, &[0.2, 0.4, 0.6]);
    write_curve(&c, &[0.3, 0.5, 0.6]);
    write_curve(&short, &[0.2, 0.4]);
    write_curve(&flat, &[0.5, 0.5, 0.5]);

    let o = run(&["compare", s(&r), s(&r), s(&c)]);
    assert!(o.status.success());
    let t = table(&o);
    assert_eq!(t[0][2].parse::<f64>().unwrap(), 1.0);
    // (0.3 + 0.1 + 0) / (0.4 + 0.2 + 0)
    assert!((t[1][2].parse::<f64>().unwrap() - 2.0 / 3.0).abs() < 1e-9);

    assert_eq!(run(&["compare", s(&r), s(&short)]).status.code(), Some(3));

    let o = run(&["compare", s(&flat), s(&c)]);
    assert!(o.status.success());
    assert_eq!(table(&o)[0][3], "degenerate_reference");
}

#[test]
fn cost_sweep() {
    let o = run(&["cost", "--data-size", "10000", "--passes", "1", "--q", "100"]);
    assert!(o.status.success());
    let t = table(&o);
    assert_eq!(t[0][1].parse::<f64>().unwrap(), 2_010_000.0);
    assert_eq!(t[0][6], "at break-even");

    let o = run(&["cost", "--data-size", "10000", "--passes", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let grid = "10,20,30,40,50,60,70,80,90,100,125,150,200,300,400,500";
    let o = run(&["cost", "--data-size", "10000", "--passes", "1", "--q", grid]);
    let exact: Vec<f64> = table(&o).iter().map(|r| r[3].parse().unwrap()).collect();
    let argmin = exact.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert!(argmin > 0 && argmin < exact.len() - 1);
    assert!(exact[..=argmin].windows(2).all(|w| w[1] <= w[0]));
    assert!(exact[argmin..].windows(2).all(|w| w[1] >= w[0]));
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http(port: u16, method: &str, path: &str, body: Option<Value>) -> Option<(u16, String)> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
        payload.len()
    );
    s.write_all(req.as_bytes()).ok()?;
    let mut raw = String::new();
    s.read_to_string(&mut raw).ok()?;
    let (head, body) = raw.split_once("\r\n\r\n")?;
    Some((head.split_whitespace().nth(1)?.parse().ok()?, body.to_string()))
}

fn wait_ready(port: u16, child: &mut Child) {
    for _ in 0..500 {
        if http(port, "GET", "/api/state", None).is_some() {
            return;
        }
        if let Some(status) = child.try_wait().unwrap() {
            panic!("server exited early with {status}");
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    panic!("server did not come up");
}

fn task_ids(port: u16) -> Vec<String> {
    let (status, body) = http(port, "GET", "/api/tasks", None).unwrap();
    assert_eq!(status, 200);
    let v: Value = serde_json::from_str(&body).unwrap();
    v.as_array().unwrap().iter().map(|t| t["example_id"].as_str().unwrap().to_string()).collect()
}

fn serve(config: &Path, data: &Path, out: &Path, port: u16) -> Child {
    bin()
        .args(["serve", "--config", s(config), "--dataset", s(data), "--out", s(out), "--bind", &format!("127.0.0.1:{port}")])
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

#[test]
fn serve_refuses_the_simulated_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), json!({}));
    let o = run(&["serve", "--config", s(&config), "--dataset", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("human"));
}

#[test]
fn serve_bind_failure_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), json!({ "oracle": "human" }));
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let o = run(&["serve", "--config", s(&config), "--dataset", s(&data), "--out", s(&dir.path().join("o")), "--bind", &addr]);
    assert_eq!(o.status.code(), Some(4));
}

#[cfg(unix)]
#[test]
fn sigterm_mid_round_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = setup(dir.path(), json!({ "oracle": "human", "q": 5, "target_labeled": 20 }));
    let out = dir.path().join("serve");
    let port = free_port();
    let mut child = serve(&config, &data, &out, port);
    wait_ready(port, &mut child);
    let ids = task_ids(port);
    assert_eq!(ids.len(), 5);
    for id in &ids[..2] {
        let (st, _) = http(port, "POST", "/api/labels", Some(json!({ "example_id": id, "class_index": 0 }))).unwrap();
        assert_eq!(st, 200);
    }
    let killed = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    assert!(child.wait().unwrap().success());

    let port = free_port();
    let mut child = serve(&config, &data, &out, port);
    wait_ready(port, &mut child);
    assert_eq!(task_ids(port), ids[2..].to_vec());

    // Finish the run; the directory then looks like a simulated run's.
    for _ in 0..50 {
        let (_, body) = http(port, "GET", "/api/state", None).unwrap();
        let st: Value = serde_json::from_str(&body).unwrap();
        match st["status"].as_str().unwrap() {
            "complete" => break,
            "awaiting_labels" => {
                for id in task_ids(port) {
                    http(port, "POST", "/api/labels", Some(json!({ "example_id": id, "class_index": 1 }))).unwrap();
                }
            }
            _ => std::thread::sleep(Duration::from_millis(50)),
        }
    }
    let rows = artifacts::read_curve(&out.join("curve.csv")).unwrap();
    assert_eq!(rows.last().unwrap().labeled_count, 20);
    assert_eq!(artifacts::read_queries(&out.join("queries.jsonl")).unwrap().len(), rows.len() - 1);
    artifacts::read_config(&out.join("config.json")).unwrap();
    Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(child.wait().unwrap().success());
}
