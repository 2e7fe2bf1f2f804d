#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use latentcrs::eval::synth::{generate, SynthConfig};
use latentcrs::pipeline::{train_all, Bundle, PipelineConfig};
use latentcrs_service::{router, AppState, MemoryStore, ServiceConfig};

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: ServiceConfig,
    pub bundle: Bundle,
}

/// A small trained bundle saved once per test binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = generate(&SynthConfig {
            users: 40,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = PipelineConfig::planted().with_seed(3);
        cfg.encoder.epochs = 3;
        cfg.train.stage1_epochs = 2;
        cfg.train.stage2_epochs = 2;
        cfg.train.stage3_rounds = 2;
        let embedder = cfg.embed.build().unwrap();
        let sys = train_all(&corpus.dataset, &cfg, &embedder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let checkpoint = dir.path().join("model.lcrs");
        sys.bundle.save(&checkpoint).unwrap();
        let config = ServiceConfig {
            checkpoint,
            port: 0,
            embed: cfg.embed.clone(),
            ..ServiceConfig::default()
        };
        Fixture {
            dir,
            config,
            bundle: sys.bundle,
        }
    })
}

pub struct Server {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<(), String>>>,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    /// Stops the server and returns its exit status.
    pub fn stop(mut self) -> Result<(), String> {
        let _ = self.stop.take().unwrap().send(());
        self.thread.take().unwrap().join().unwrap()
    }
}

/// Runs the full service (background load included) on an ephemeral port.
pub fn start(config: ServiceConfig) -> Server {
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            latentcrs_service::serve(listener, config, async {
                let _ = stop_rx.await;
            })
            .await
            .map_err(|e| e.to_string())
        })
    });
    let server = Server {
        addr: addr_rx.recv().unwrap(),
        stop: Some(stop_tx),
        thread: Some(thread),
    };
    wait_ready(&server);
    server
}

/// Serves a router whose model never becomes ready.
pub fn start_unready() -> Server {
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            let app = router(AppState::new(Arc::new(MemoryStore::new())));
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                })
                .await
                .map_err(|e| e.to_string())
        })
    });
    Server {
        addr: addr_rx.recv().unwrap(),
        stop: Some(stop_tx),
        thread: Some(thread),
    }
}

fn wait_ready(server: &Server) {
    for _ in 0..500 {
        if let Ok((200, _)) = get(&server.url("/healthz")) {
            return;
        }
        std::thread::sleep(std::time::Duration::from_millis(10));
    }
    panic!("service never became ready");
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .new_agent()
}

pub fn get(url: &str) -> Result<(u16, String), ureq::Error> {
    let mut resp = agent().get(url).call()?;
    let status = resp.status().as_u16();
    Ok((status, resp.body_mut().read_to_string()?))
}

pub fn post(url: &str, body: &serde_json::Value) -> (u16, String) {
    let mut resp = agent().post(url).send_json(body).unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_to_string().unwrap())
}

pub fn post_raw(url: &str, body: &str) -> (u16, String) {
    let mut resp = agent()
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.body_mut().read_to_string().unwrap())
}

pub fn schema(name: &str) -> jsonschema::JSONSchema {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    // schemas live for the whole test binary
    let value: &'static serde_json::Value = Box::leak(Box::new(value));
    jsonschema::JSONSchema::compile(value).unwrap()
}

pub fn assert_valid(schema: &jsonschema::JSONSchema, body: &str) {
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    let msgs: Vec<String> = match schema.validate(&v) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| e.to_string()).collect(),
    };
    panic!("schema violation {msgs:?} in {body}");
}
