use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use climprobe::aggregation::{aggregate_group, GroupReport};
use climprobe::attribution::{explain, BaselineSpec, Method, PixelTarget};
use climprobe::data::{
    generate_synthetic, make_samples, moving_average_12, write_series, DatasetIndex, MaskSpec,
    Rect, SplitPolicy, SynthConfig,
};
use climprobe::emulator::{build_model, ArchConfig, BlockConfig};
use climprobe::trainer::{fit_norm_stats, save_checkpoint, Checkpoint, SampleSet};

use probe_service::{router, AppState, ServiceConfig, ServiceManifest, MANIFEST_HEADER};

const GRID: (usize, usize) = (10, 14);
const LAND: Rect = Rect {
    row0: 0,
    col0: 0,
    row1: 3,
    col1: 4,
};

fn arch() -> ArchConfig {
    let mut a = ArchConfig::desk();
    a.input_months = 4;
    a.grid = GRID;
    a.stem.out_channels = 6;
    a.head.mid_channels = 4;
    a.blocks = vec![
        BlockConfig::Dense {
            growth: 3,
            layers: 2,
        },
        BlockConfig::Down {
            compress: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        BlockConfig::Up {
            compress: 5,
            target: (5, 7),
        },
    ];
    a
}

/// Smoothed series, a dataset index and untrained checkpoints for leads 1 and 3.
fn fixture(dir: &Path) -> ServiceConfig {
    let raw = generate_synthetic(&SynthConfig {
        grid: GRID,
        months: 80,
        seed: 4,
        mask: MaskSpec::Land { rects: vec![LAND] },
        ..SynthConfig::default()
    })
    .unwrap();
    let series = moving_average_12(&raw).unwrap();
    write_series(&series, dir.join("smooth.fsr")).unwrap();
    let index = DatasetIndex::build(
        &series,
        "smooth.fsr",
        4,
        &[1, 3],
        20,
        8,
        SplitPolicy::Contiguous,
    )
    .unwrap();
    index.save(dir.join("index.json")).unwrap();
    let mask = series.mask_or_ocean();
    let mut cfg = ServiceConfig::new(dir.join("index.json"));
    for lead in [1, 3] {
        let mut model = build_model::<f32>(&arch(), lead as u64).unwrap();
        let split = index.lead(lead).unwrap();
        model.set_norm_stats(Some(
            fit_norm_stats(&SampleSet::new(&series, &split.train, &mask)).unwrap(),
        ));
        let path = dir.join(format!("lead{lead}.ckpt"));
        save_checkpoint(&Checkpoint::new(model, lead as u64, lead), &path).unwrap();
        cfg.ckpts.push((lead, path));
    }
    cfg.budget = Duration::from_secs(30);
    cfg
}

struct Reply {
    status: StatusCode,
    hash: Option<String>,
    body: Value,
    bytes: Vec<u8>,
}

async fn call(app: &Router, req: Request<Body>) -> Reply {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let hash = res
        .headers()
        .get(MANIFEST_HEADER)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    let body = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    Reply {
        status,
        hash,
        body,
        bytes,
    }
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn post_raw(uri: &str, body: &str) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn floats(v: &Value) -> Vec<f32> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap() as f32)
        .collect()
}

#[tokio::test]
async fn meta_reports_grid_mask_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let app = router(AppState::load(&cfg).unwrap(), None);
    let r = call(&app, get("/api/meta")).await;
    assert_eq!(r.status, StatusCode::OK);
    let want = ServiceManifest::of(&cfg).unwrap().hash();
    assert_eq!(r.hash.as_deref(), Some(want.as_str()));
    assert_eq!(r.body["manifest_hash"], want);
    assert_eq!(r.body["height"], 10);
    assert_eq!(r.body["width"], 14);
    assert_eq!(r.body["months"], 4);
    assert_eq!(r.body["leads"], json!([1, 3]));
    let runs: Vec<u64> = r.body["mask_rle"]["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(runs.iter().sum::<u64>(), 140);
    assert_eq!(r.body["mask_rle"]["first_ocean"], false);
    assert_eq!(runs[0], 4);
    assert_eq!(r.body["ocean_cells"], 140 - 12);
    assert_eq!(r.body["samples_per_lead"]["1"], 80 - 11 - 4);
    assert_eq!(r.body["sample_count"], 80 - 11 - 4 - 2);
}

#[tokio::test]
async fn loading_state_answers_503_with_hash() {
    let app = router(
        AppState::loading("abc123".into(), Duration::from_secs(1)),
        None,
    );
    for req in [
        get("/api/meta"),
        get("/api/field?sample=0&kind=input"),
        post(
            "/api/attribution",
            json!({"sample": 0, "row": 1, "col": 1, "method": "deeplift", "lead": 1}),
        ),
    ] {
        let r = call(&app, req).await;
        assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
        assert_eq!(r.hash.as_deref(), Some("abc123"));
        assert_eq!(r.body["manifest_hash"], "abc123");
    }
    let page = call(&app, get("/")).await;
    assert_eq!(page.status, StatusCode::OK);
    assert_eq!(page.hash.as_deref(), Some("abc123"));
}

#[tokio::test]
async fn attribution_frame_matches_core_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let state = AppState::load(&cfg).unwrap();
    let app = router(state.clone(), None);
    let req =
        json!({"sample": 7, "row": 6, "col": 9, "method": "deeplift", "lead": 3, "month": -1});
    let r = call(&app, post("/api/attribution", req.clone())).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);

    let s = state.session().unwrap();
    let w = make_samples(&s.series, 3, 4).unwrap()[7];
    let x = w.input::<f64>(&s.series).unwrap();
    let h = explain(
        s.model(3).unwrap(),
        &x,
        PixelTarget::new(6, 9).with_lead(3),
        Method::DeepLift,
        &BaselineSpec::zero(),
    )
    .unwrap();
    let plane = 140;
    let want: Vec<f32> = h.values.data()[3 * plane..]
        .iter()
        .map(|&v| v as f32)
        .collect();
    let frames = r.body["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0]["month"], -1);
    let got = floats(&frames[0]["values"]);
    assert!(got
        .iter()
        .zip(&want)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(r.body["series"]["total"].as_array().unwrap().len(), 4);
    assert_eq!(r.body["output"].as_f64().unwrap(), h.output);

    // Cache hit returns the same bytes; all months come back when none is named.
    let again = call(&app, post("/api/attribution", req)).await;
    assert_eq!(again.bytes, r.bytes);
    assert_eq!(s.cache_len(), 1);
    let all = call(
        &app,
        post(
            "/api/attribution",
            json!({"sample": 7, "row": 6, "col": 9, "method": "deeplift", "lead": 3}),
        ),
    )
    .await;
    assert_eq!(all.body["frames"].as_array().unwrap().len(), 4);
    assert_eq!(all.body["frames"][3]["values"], frames[0]["values"]);
    assert_eq!(s.cache_len(), 1);
}

#[tokio::test]
async fn concurrent_and_restarted_services_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let a = router(AppState::load(&cfg).unwrap(), None);
    let b = router(AppState::load(&cfg).unwrap(), None);
    let body = json!({"sample": 2, "row": 4, "col": 5, "method": "ig:8", "lead": 1, "month": -2});
    let (r1, r2) = tokio::join!(
        call(&a, post("/api/attribution", body.clone())),
        call(&a, post("/api/attribution", body.clone()))
    );
    let r3 = call(&b, post("/api/attribution", body)).await;
    assert_eq!(r1.status, StatusCode::OK);
    assert_eq!(r1.bytes, r2.bytes);
    assert_eq!(r1.bytes, r3.bytes);
    let f1 = call(&a, get("/api/field?sample=2&kind=error&lead=1")).await;
    let f2 = call(&b, get("/api/field?sample=2&kind=error&lead=1")).await;
    assert_eq!(f1.bytes, f2.bytes);
}

#[tokio::test]
async fn fields_are_frames_of_the_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let state = AppState::load(&cfg).unwrap();
    let app = router(state.clone(), None);
    let s = state.session().unwrap();
    let w = make_samples(&s.series, 1, 4).unwrap()[5];

    let r = call(&app, get("/api/field?sample=5&kind=input&month=-4")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(
        floats(&r.body["values"]),
        s.series.frame(w.first_input_month())
    );
    let r = call(&app, get("/api/field?sample=5&kind=target")).await;
    assert_eq!(floats(&r.body["values"]), s.series.frame(w.target_month()));

    let out = floats(
        &call(&app, get("/api/field?sample=5&kind=output"))
            .await
            .body["values"],
    );
    let err = floats(&call(&app, get("/api/field?sample=5&kind=error")).await.body["values"]);
    let target = s.series.frame(w.target_month());
    for (i, ocean) in s.mask.cells().iter().enumerate() {
        if *ocean {
            let want = (out[i] as f64 - target[i] as f64) as f32;
            assert!((err[i] - want).abs() <= 1e-6 * (1.0 + want.abs()));
        } else {
            assert_eq!((out[i], err[i]), (0.0, 0.0));
        }
    }
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let app = router(AppState::load(&cfg).unwrap(), None);
    let cases = [
        (
            post_raw("/api/attribution", "{not json"),
            StatusCode::BAD_REQUEST,
        ),
        (
            post("/api/attribution", json!({"sample": 0, "row": 1})),
            StatusCode::BAD_REQUEST,
        ),
        (
            post(
                "/api/attribution",
                json!({"sample": 0, "row": 1, "col": 1, "method": "lrp", "lead": 1}),
            ),
            StatusCode::BAD_REQUEST,
        ),
        (
            post(
                "/api/attribution",
                json!({"sample": 9999, "row": 1, "col": 1, "method": "deeplift", "lead": 1}),
            ),
            StatusCode::NOT_FOUND,
        ),
        (
            post(
                "/api/attribution",
                json!({"sample": 0, "row": 1, "col": 1, "method": "deeplift", "lead": 6}),
            ),
            StatusCode::NOT_FOUND,
        ),
        (
            post(
                "/api/attribution",
                json!({"sample": 0, "row": 10, "col": 1, "method": "deeplift", "lead": 1}),
            ),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            post(
                "/api/attribution",
                json!({"sample": 0, "row": 1, "col": 1, "method": "deeplift", "lead": 1, "month": -5}),
            ),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            get("/api/field?sample=0&kind=wind"),
            StatusCode::BAD_REQUEST,
        ),
        (
            get("/api/field?sample=abc&kind=input"),
            StatusCode::BAD_REQUEST,
        ),
        (
            get("/api/aggregate?row=1&col=1&method=deeplift&lead=1"),
            StatusCode::NOT_FOUND,
        ),
        (
            post(
                "/api/ablation",
                json!({"sample": 0, "rect": [2, 2, 12, 4], "lead": 1}),
            ),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (get("/api/nothing"), StatusCode::NOT_FOUND),
    ];
    for (req, want) in cases {
        let uri = req.uri().to_string();
        let r = call(&app, req).await;
        assert_eq!(r.status, want, "{uri}: {}", r.body);
        assert!(r.body["message"].is_string(), "{uri}");
        assert!(r.hash.is_some());
    }
    let r = call(
        &app,
        get("/api/aggregate?row=1&col=1&method=deeplift&lead=1"),
    )
    .await;
    assert!(r.body["hint"].as_str().unwrap().contains("aggregate"));
}

#[tokio::test]
async fn ablation_of_untouched_land_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let app = router(AppState::load(&cfg).unwrap(), None);
    // Land cells hold 0 in raw units, so a raw 0 fill changes nothing.
    let r = call(
        &app,
        post(
            "/api/ablation",
            json!({"sample": 3, "rect": [0, 0, 3, 4], "months": "all", "lead": 1, "fill": 0.0, "standardized": false}),
        ),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    assert!(floats(&r.body["diff"]).iter().all(|&v| v == 0.0));
    assert_eq!(r.body["stats"]["nonzero_pixels"], 0);

    let r = call(
        &app,
        post(
            "/api/ablation",
            json!({"sample": 3, "rect": [4, 6, 6, 9], "months": [-1], "lead": 1}),
        ),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body["stats"]["months"], json!([-1]));
    assert_eq!(r.body["stats"]["max_abs_outside"], 0.0);
    assert!(r.body["stats"]["max_abs_inside"].as_f64().unwrap() > 0.0);
}

#[tokio::test]
async fn aggregate_serves_exported_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path());
    let reports = dir.path().join("reports");
    let state = AppState::load(&cfg).unwrap();
    let s = state.session().unwrap();
    let windows = make_samples(&s.series, 1, 4).unwrap();
    let set = SampleSet::new(&s.series, &windows[..6], &s.mask);
    let rep = aggregate_group(
        s.model(1).unwrap(),
        &set,
        PixelTarget::new(5, 8),
        Method::DeepLift,
        &BaselineSpec::zero(),
        1,
    )
    .unwrap();
    rep.export(reports.join(rep.dir_name())).unwrap();
    cfg.reports = Some(reports.clone());
    let app = router(AppState::load(&cfg).unwrap(), None);
    let r = call(
        &app,
        get("/api/aggregate?row=5&col=8&method=deeplift&lead=1"),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    let back = GroupReport::load(reports.join(rep.dir_name())).unwrap();
    let total: Vec<f64> = r.body["series"]["total"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(total, back.series.total);
    assert_eq!(r.body["n"], 6);
    let m = r.body["month"].as_i64().unwrap();
    assert_eq!(m, r.body["top_month"].as_i64().unwrap());
    let i = (4 + m) as usize;
    let want: Vec<f32> = back.mean_pos.data()[i * 140..(i + 1) * 140]
        .iter()
        .map(|&v| v as f32)
        .collect();
    assert_eq!(floats(&r.body["positive"]), want);
    let r = call(
        &app,
        get("/api/aggregate?row=5&col=8&method=deeplift&lead=1&month=-4"),
    )
    .await;
    assert_eq!(r.body["month"], -4);
}

#[tokio::test]
async fn static_ui_directory_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<p>explorer</p>").unwrap();
    let app = router(AppState::load(&cfg).unwrap(), Some(ui));
    let r = call(&app, get("/")).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.bytes, b"<p>explorer</p>");
    assert!(r.hash.is_some());
    assert_eq!(call(&app, get("/api/meta")).await.status, StatusCode::OK);
}
