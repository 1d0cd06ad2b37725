use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;

use dropal::engine::{OracleMode, QSpec, ScriptedOracle};
use dropal::synthetic::{gaussian_blobs, BlobSpec};
use dropal::{AlConfig, Dataset, Engine};
use dropal_service::{start_worker, ServiceError, ServiceOptions, Worker};
use serde_json::{json, Value};

fn dataset() -> Dataset {
    gaussian_blobs(BlobSpec { n: 200, dim: 4, classes: 3, separation: 3.0, noise: 1.0, seed: 11 })
}

fn config() -> AlConfig {
    AlConfig {
        oracle: OracleMode::Human,
        q: QSpec::Count(5),
        passes: 3,
        max_epochs: 3,
        hidden: vec![8],
        target_labeled: Some(25),
        class_names: Some(vec!["red".into(), "green".into(), "blue".into()]),
        global_seed: 4,
        ..AlConfig::default()
    }
}

struct Server {
    addr: SocketAddr,
    worker: Option<Worker>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    fn start(dir: &Path) -> Server {
        let opts = ServiceOptions { state_path: dir.join("state.json"), out_dir: Some(dir.join("run")) };
        let worker = start_worker(dataset(), config(), opts).unwrap();
        let handle = worker.handle.clone();
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                dropal_service::serve(listener, handle, async move {
                    let _ = stopped.await;
                })
                .await
                .unwrap();
            });
        });
        Server { addr: addr_rx.recv().unwrap(), worker: Some(worker), stop: Some(stop), thread: Some(thread) }
    }

    fn request(&self, method: &str, path: &str, body: Option<&Value>) -> (u16, String) {
        let mut s = TcpStream::connect(self.addr).unwrap();
        let payload = body.map(|b| b.to_string()).unwrap_or_default();
        let mut req = format!("{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n");
        if body.is_some() {
            req.push_str(&format!("Content-Type: application/json\r\nContent-Length: {}\r\n", payload.len()));
        }
        req.push_str("\r\n");
        req.push_str(&payload);
        s.write_all(req.as_bytes()).unwrap();
        let mut raw = String::new();
        s.read_to_string(&mut raw).unwrap();
        let (head, body) = raw.split_once("\r\n\r\n").unwrap();
        assert!(!head.to_ascii_lowercase().contains("transfer-encoding: chunked"));
        let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
        (status, body.to_string())
    }

    fn get_json(&self, path: &str) -> (u16, Value) {
        let (s, b) = self.request("GET", path, None);
        (s, serde_json::from_str(&b).unwrap())
    }

    fn post_label(&self, id: &str, class: usize, key: Option<&str>) -> (u16, Value) {
        let mut body = json!({ "example_id": id, "class_index": class });
        if let Some(k) = key {
            body["idempotency_key"] = json!(k);
        }
        let (s, b) = self.request("POST", "/api/labels", Some(&body));
        (s, serde_json::from_str(&b).unwrap_or(Value::Null))
    }

    fn task_ids(&self) -> Vec<String> {
        let (status, tasks) = self.get_json("/api/tasks");
        assert_eq!(status, 200);
        tasks.as_array().unwrap().iter().map(|t| t["example_id"].as_str().unwrap().to_string()).collect()
    }

    /// Waits until the worker has finished training after a round.
    fn wait_until_idle(&self) -> Value {
        for _ in 0..600 {
            let (_, st) = self.get_json("/api/state");
            if st["status"] != "training" {
                return st;
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
        panic!("worker stayed in training");
    }

    fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join().unwrap();
        }
        if let Some(w) = self.worker.take() {
            w.stop();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn gold(id: &str) -> usize {
    dataset().get(id).unwrap().label.unwrap()
}

#[test]
fn fresh_state_and_task_list() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(dir.path());
    let (status, st) = srv.get_json("/api/state");
    assert_eq!(status, 200);
    assert_eq!(st["status"], "awaiting_labels");
    assert_eq!(st["pending"], 5);
    assert_eq!(st["round"], 1);
    assert_eq!(st["labeled_count"], 10);
    assert_eq!(st["curve"].as_array().unwrap().len(), 1);
    assert_eq!(srv.request("GET", "/api/state", None), srv.request("GET", "/api/state", None));

    let (_, tasks) = srv.get_json("/api/tasks");
    let tasks = tasks.as_array().unwrap();
    assert_eq!(tasks.len(), 5);
    let scores: Vec<f64> = tasks.iter().map(|t| t["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(tasks[0]["class_names"], json!(["red", "green", "blue"]));
    assert!(tasks[0]["display_text"].as_str().unwrap().contains("4 dims"));

    let ids = srv.task_ids();
    for id in &ids[..2] {
        let (s, ack) = srv.post_label(id, gold(id), None);
        assert_eq!((s, ack["duplicate"].clone()), (200, json!(false)));
    }
    assert_eq!(srv.task_ids(), ids[2..].to_vec());
    assert_eq!(srv.get_json("/api/state").1["pending"], 3);
}

#[test]
fn error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(dir.path());
    let ids = srv.task_ids();
    assert_eq!(srv.post_label("no-such-example", 0, None).0, 404);
    assert_eq!(srv.post_label(&ids[0], 3, None).0, 422);
    let seed_id = dataset().examples().iter().map(|e| e.id.clone()).find(|id| !ids.contains(id)).unwrap();
    assert_eq!(srv.post_label(&seed_id, 0, None).0, 409);
    let (s, _) = srv.request("POST", "/api/labels", Some(&json!({ "example_id": ids[0] })));
    assert_eq!(s, 422);
    let (s, _) = srv.request("POST", "/api/labels", Some(&json!({ "example_id": ids[0], "class_index": -1 })));
    assert_eq!(s, 422);
    assert_eq!(srv.post_label(&ids[0], 1, None).0, 200);
    assert_eq!(srv.post_label(&ids[0], 2, None).0, 409);
    assert_eq!(srv.get_json("/api/state").1["pending"], 4);
}

#[test]
fn idempotent_resubmission() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(dir.path());
    let ids = srv.task_ids();
    let (s1, a1) = srv.post_label(&ids[0], 0, Some("k-1"));
    let before = srv.request("GET", "/api/state", None);
    let (s2, a2) = srv.post_label(&ids[0], 0, Some("k-1"));
    assert_eq!((s1, s2), (200, 200));
    assert_eq!(a1["duplicate"], false);
    assert_eq!(a2["duplicate"], true);
    assert_eq!(a1["remaining"], a2["remaining"]);
    assert_eq!(srv.request("GET", "/api/state", None), before);
    // A replayed key returns the original ack even if the body changed.
    let (s3, a3) = srv.post_label(&ids[0], 2, Some("k-1"));
    assert_eq!((s3, a3["class_index"].clone()), (200, json!(0)));
}

#[test]
fn concurrent_submissions_label_once() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(dir.path());
    let id = srv.task_ids()[0].clone();
    let results: Vec<(u16, Value)> = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..8).map(|i| sc.spawn({
            let (srv, id) = (&srv, &id);
            move || srv.post_label(id, i % 3, Some(&format!("key-{}", i % 2)))
        })).collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let fresh: Vec<_> = results.iter().filter(|(s, a)| *s == 200 && a["duplicate"] == false).collect();
    assert_eq!(fresh.len(), 1);
    assert!(results.iter().all(|(s, _)| *s == 200 || *s == 409));
    assert_eq!(srv.get_json("/api/state").1["pending"], 4);
}

#[test]
fn full_rounds_match_a_scripted_run() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(dir.path());
    let mut given = std::collections::HashMap::new();
    for round in 1..=3 {
        let ids = srv.task_ids();
        assert_eq!(ids.len(), 5);
        for (k, id) in ids.iter().enumerate() {
            // Deliberately not always gold, so the comparison exercises the labels the service received.
            let y = (gold(id) + usize::from(k == 0)) % 3;
            given.insert(id.clone(), y);
            assert_eq!(srv.post_label(id, y, Some(&format!("r{round}-{k}"))).0, 200);
        }
        let st = srv.wait_until_idle();
        assert_eq!(st["labeled_count"], 10 + 5 * round);
        assert_eq!(st["curve"].as_array().unwrap().len(), round as usize + 1);
    }
    let st = srv.wait_until_idle();
    assert_eq!(st["status"], "complete");
    assert_eq!(st["pending"], 0);
    assert_eq!(srv.get_json("/api/tasks").0, 409);
    assert_eq!(srv.post_label("blob000", 0, None).0, 409);

    let mut reference = Engine::new(dataset(), config()).unwrap();
    reference.run(&mut ScriptedOracle { labels: given }).unwrap();
    let expected = dropal::artifacts::curve_csv(&reference.records().iter().map(Into::into).collect::<Vec<_>>());
    let (s, csv) = srv.request("GET", "/api/curve.csv", None);
    assert_eq!(s, 200);
    assert_eq!(csv, expected);
    let on_disk = std::fs::read_to_string(dir.path().join("run/curve.csv")).unwrap();
    assert_eq!(on_disk, expected);
    for f in ["config.json", "queries.jsonl"] {
        assert!(dir.path().join("run").join(f).exists());
    }
}

#[test]
fn restart_resumes_the_pending_set() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Server::start(dir.path());
    let ids = srv.task_ids();
    srv.post_label(&ids[0], gold(&ids[0]), Some("a"));
    srv.post_label(&ids[1], gold(&ids[1]), Some("b"));
    let state_before = srv.request("GET", "/api/state", None);
    srv.stop();

    let srv = Server::start(dir.path());
    assert_eq!(srv.task_ids(), ids[2..].to_vec());
    assert_eq!(srv.request("GET", "/api/state", None), state_before);
    let (s, ack) = srv.post_label(&ids[0], gold(&ids[0]), Some("a"));
    assert_eq!((s, ack["duplicate"].clone()), (200, json!(true)));
}

#[test]
fn simulated_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AlConfig { oracle: OracleMode::Simulated, ..config() };
    let opts = ServiceOptions { state_path: dir.path().join("s.json"), out_dir: None };
    assert!(matches!(start_worker(dataset(), cfg, opts), Err(ServiceError::NotHumanMode)));
}
