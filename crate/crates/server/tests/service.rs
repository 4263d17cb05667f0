use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use candle_core::DType;
use image::{ImageFormat, Rgb, RgbImage};
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use thforge_core::inference::Prediction;
use thforge_core::model::checkpoint::CheckpointMeta;
use thforge_core::{ModelConfig, ModelState, Predictor, TaskHead};
use thforge_server::{
    binarize_levels, serve, AppState, DetectResponse, InferenceBackend, ServiceConfig, LABEL_HEADER, SCORE_HEADER,
};
use tokio::sync::oneshot;

fn desk_predictor(cfg: ModelConfig) -> Arc<Predictor> {
    let state = ModelState::new(&cfg, 3, DType::F32, (0.0, 0.0)).unwrap();
    Arc::new(Predictor::new(state, CheckpointMeta::new(&cfg)).unwrap())
}

fn shared_predictor() -> Arc<Predictor> {
    static P: OnceLock<Arc<Predictor>> = OnceLock::new();
    P.get_or_init(|| desk_predictor(ModelConfig::desk())).clone()
}

fn png(w: u32, h: u32) -> Vec<u8> {
    let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]));
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
    out
}

struct Running {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<()>,
}

impl Running {
    fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    async fn shutdown(mut self) {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.await.unwrap();
    }
}

async fn start(backend: Arc<dyn InferenceBackend>, cfg: ServiceConfig) -> Running {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let state = AppState::new(backend, &cfg, 0.80, 0.10);
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        serve(listener, state, async {
            let _ = rx.await;
        })
        .await
        .unwrap();
    });
    Running {
        addr,
        stop: Some(tx),
        handle,
    }
}

fn upload(bytes: Vec<u8>) -> Form {
    Form::new().part("file", Part::bytes(bytes).file_name("card.png"))
}

async fn post(client: &reqwest::Client, url: String, bytes: Vec<u8>) -> reqwest::Response {
    client.post(url).multipart(upload(bytes)).send().await.unwrap()
}

fn decode_gray(bytes: &[u8]) -> image::GrayImage {
    image::load_from_memory(bytes).unwrap().to_luma8()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn healthz_reports_loaded_model() {
    let srv = start(shared_predictor(), ServiceConfig::default()).await;
    let body: serde_json::Value = reqwest::get(srv.url("/healthz")).await.unwrap().json().await.unwrap();
    assert_eq!(body, serde_json::json!({"status": "ok", "model_loaded": true}));
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoints_agree_and_share_one_forward() {
    // Private instance so concurrent tests cannot bump the forward counter.
    let p = desk_predictor(ModelConfig::desk());
    let srv = start(p.clone(), ServiceConfig::default()).await;
    let client = reqwest::Client::new();
    let img = png(800, 600);

    let det: DetectResponse = post(&client, srv.url("/detect"), img.clone()).await.json().await.unwrap();
    let again: DetectResponse = post(&client, srv.url("/detect"), img.clone()).await.json().await.unwrap();
    assert_eq!(det, again, "evaluation mode must be deterministic");
    assert!((0.0..=1.0).contains(&det.score));
    assert_eq!(det.threshold, 0.80);
    assert_eq!(det.label, if det.score >= 0.80 { "attack" } else { "bona_fide" });

    let before = p.forward_count();
    let resp = post(&client, srv.url("/detect_and_localize"), img.clone()).await;
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(p.forward_count() - before, 1, "combined endpoint must run exactly one forward pass");
    assert_eq!(resp.headers()["content-type"], "image/png");
    let score: f64 = resp.headers()[SCORE_HEADER].to_str().unwrap().parse().unwrap();
    let label = resp.headers()[LABEL_HEADER].to_str().unwrap().to_string();
    assert!((score - det.score).abs() <= 1e-6);
    assert_eq!(label, det.label);
    let combined = decode_gray(&resp.bytes().await.unwrap());
    assert_eq!(combined.dimensions(), (800, 600));

    let binary = decode_gray(&post(&client, srv.url("/localize"), img.clone()).await.bytes().await.unwrap());
    let soft = decode_gray(&post(&client, srv.url("/localize?soft=true"), img).await.bytes().await.unwrap());
    assert_eq!(binary.dimensions(), (800, 600));
    assert_eq!(soft.dimensions(), (800, 600));
    assert!(binary.pixels().all(|p| p[0] == 0 || p[0] == 255));
    for (b, s) in binary.pixels().zip(soft.pixels()) {
        assert_eq!(b[0] == 255, s[0] as f64 >= 0.10 * 255.0);
    }
    assert_eq!(binary, combined);
    assert_eq!(binarize_levels(soft.as_raw(), 0.10), binary.into_raw());
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rejects_bad_uploads() {
    let cfg = ServiceConfig {
        max_upload_bytes: 4096,
        ..ServiceConfig::default()
    };
    let srv = start(shared_predictor(), cfg).await;
    let client = reqwest::Client::new();
    for path in ["/detect", "/localize", "/detect_and_localize"] {
        let big = post(&client, srv.url(path), vec![0u8; 64 << 10]).await;
        assert_eq!(big.status(), StatusCode::PAYLOAD_TOO_LARGE, "{path}");
        let empty = post(&client, srv.url(path), Vec::new()).await;
        assert_eq!(empty.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE, "{path}");
        let junk = post(&client, srv.url(path), b"definitely not an image".to_vec()).await;
        assert_eq!(junk.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE, "{path}");
        let wrong_field = client
            .post(srv.url(path))
            .multipart(Form::new().part("image", Part::bytes(png(32, 32))))
            .send()
            .await
            .unwrap();
        assert_eq!(wrong_field.status(), StatusCode::BAD_REQUEST, "{path}");
    }
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn missing_head_is_not_implemented() {
    let seg_only = desk_predictor(ModelConfig {
        multitask: false,
        single_task: TaskHead::Segmentation,
        ..ModelConfig::desk()
    });
    let srv = start(seg_only, ServiceConfig::default()).await;
    let client = reqwest::Client::new();
    assert_eq!(post(&client, srv.url("/detect"), png(64, 64)).await.status(), StatusCode::NOT_IMPLEMENTED);
    assert_eq!(post(&client, srv.url("/localize"), png(64, 64)).await.status(), StatusCode::OK);
    srv.shutdown().await;
}

/// Blocks every inference until released.
struct Gate {
    started: AtomicUsize,
    release: std::sync::Mutex<bool>,
    cv: std::sync::Condvar,
}

impl Gate {
    fn new() -> Arc<Self> {
        Arc::new(Self {
            started: AtomicUsize::new(0),
            release: std::sync::Mutex::new(false),
            cv: std::sync::Condvar::new(),
        })
    }

    fn open(&self) {
        *self.release.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl InferenceBackend for Gate {
    fn infer(&self, _image: &RgbImage) -> thforge_core::Result<Prediction> {
        self.started.fetch_add(1, Ordering::SeqCst);
        let mut open = self.release.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
        Ok(Prediction {
            score: Some(0.9),
            mask: Some(vec![1.0; 16 * 16]),
        })
    }

    fn input_size(&self) -> usize {
        16
    }

    fn has_detection(&self) -> bool {
        true
    }

    fn has_segmentation(&self) -> bool {
        true
    }
}

async fn wait_started(gate: &Gate, n: usize) {
    let t = Instant::now();
    while gate.started.load(Ordering::SeqCst) < n {
        assert!(t.elapsed() < Duration::from_secs(10), "inference never started");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn full_queue_is_rejected_quickly() {
    let gate = Gate::new();
    let cfg = ServiceConfig {
        max_concurrent_inferences: 2,
        ..ServiceConfig::default()
    };
    let srv = start(gate.clone(), cfg).await;
    let client = reqwest::Client::new();
    let busy: Vec<_> = (0..2)
        .map(|_| tokio::spawn(post_owned(client.clone(), srv.url("/detect"))))
        .collect();
    wait_started(&gate, 2).await;

    let t = Instant::now();
    let rejected = post(&client, srv.url("/detect"), png(32, 32)).await;
    let elapsed = t.elapsed();
    assert_eq!(rejected.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert!(elapsed < Duration::from_millis(100), "503 took {elapsed:?}");

    gate.open();
    for b in busy {
        assert_eq!(b.await.unwrap(), StatusCode::OK);
    }
    srv.shutdown().await;
}

async fn post_owned(client: reqwest::Client, url: String) -> StatusCode {
    client.post(url).multipart(upload(png(32, 32))).send().await.unwrap().status()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn shutdown_drains_in_flight_requests() {
    let gate = Gate::new();
    let srv = start(gate.clone(), ServiceConfig::default()).await;
    let client = reqwest::Client::new();
    let pending = tokio::spawn(post_owned(client.clone(), srv.url("/detect_and_localize")));
    wait_started(&gate, 1).await;

    let Running { stop, handle, .. } = srv;
    stop.unwrap().send(()).unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert!(!handle.is_finished(), "server exited with a request in flight");
    gate.open();
    assert_eq!(pending.await.unwrap(), StatusCode::OK);
    tokio::time::timeout(Duration::from_secs(10), handle).await.unwrap().unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn desk_model_throughput() {
    let srv = start(shared_predictor(), ServiceConfig::default()).await;
    let client = reqwest::Client::new();
    let img = png(256, 160);
    post(&client, srv.url("/detect"), img.clone()).await;

    let n = 20;
    let t = Instant::now();
    for _ in 0..n {
        let r = post(&client, srv.url("/detect_and_localize"), img.clone()).await;
        assert_eq!(r.status(), StatusCode::OK);
        r.bytes().await.unwrap();
    }
    let rate = n as f64 / t.elapsed().as_secs_f64();
    assert!(rate >= 5.0, "{rate:.1} req/s");
    srv.shutdown().await;
}
