use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use climprobe::ablation::{ablation_diff, AblationSpec, AblationStats};
use climprobe::aggregation::{report_dir_name, Contributions, GroupReport};
use climprobe::attribution::{
    explain, BaselineChoice, BaselineDescriptor, Heatmap, Method, PixelTarget,
};
use climprobe::data::{Rect, SampleWindow};
use climprobe::emulator::apply_mask;
use climprobe::{CoreError, Tensor};

use crate::session::{AttributionKey, Session};
use crate::AppState;

/// Largest number of heatmap values returned when no month is requested.
pub const FRAME_LIMIT: usize = 1 << 20;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub hint: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            hint: None,
        }
    }

    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, m)
    }

    fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, m)
    }

    fn with_hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidArgument(_) | CoreError::Shape(_) => {
                Self::unprocessable(e.to_string())
            }
            CoreError::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
                Self::not_found(e.to_string())
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

fn status_kind(s: StatusCode) -> &'static str {
    match s.as_u16() {
        400 => "bad_request",
        404 => "not_found",
        422 => "unprocessable",
        503 => "loading",
        504 => "time_budget_exceeded",
        _ => "internal",
    }
}

/// JSON body with the manifest hash merged in.
pub(crate) fn respond<T: Serialize>(hash: &str, result: Result<T, ApiError>) -> Response {
    let (status, mut body) = match result {
        Ok(v) => (
            StatusCode::OK,
            serde_json::to_value(v)
                .unwrap_or_else(|e| serde_json::json!({ "error": e.to_string() })),
        ),
        Err(e) => {
            let mut b = serde_json::json!({
                "error": status_kind(e.status),
                "message": e.message,
            });
            if let Some(h) = e.hint {
                b["hint"] = Value::String(h);
            }
            (e.status, b)
        }
    };
    if let Value::Object(m) = &mut body {
        m.insert("manifest_hash".into(), Value::String(hash.to_string()));
    }
    (status, Json(body)).into_response()
}

async fn blocking<T: Send + 'static>(
    budget: Duration,
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::time::timeout(budget, tokio::task::spawn_blocking(f)).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            e.to_string(),
        )),
        Err(_) => Err(ApiError::new(
            StatusCode::GATEWAY_TIMEOUT,
            format!("request exceeded the {} ms time budget", budget.as_millis()),
        )),
    }
}

fn frame_f32(t: &[f64]) -> Vec<f32> {
    t.iter().map(|&v| v as f32).collect()
}

fn tensor_f32(t: &Tensor<f64>) -> Vec<f32> {
    frame_f32(t.data())
}

/// Month offset `−months..=−1` to a frame index.
fn month_index(month: i64, months: usize) -> Result<usize, ApiError> {
    let m = months as i64;
    if (-m..0).contains(&month) {
        Ok((m + month) as usize)
    } else {
        Err(ApiError::unprocessable(format!(
            "month {month} outside -{months}..=-1"
        )))
    }
}

/// Most contributing month as an offset; ties go to the most recent month.
pub fn top_month(series: &Contributions) -> i64 {
    let mut best = 0;
    for (i, v) in series.total.iter().enumerate() {
        if *v >= series.total[best] {
            best = i;
        }
    }
    best as i64 - series.months() as i64
}

struct Resolved {
    lead: usize,
    window: SampleWindow,
}

fn resolve(s: &Session, lead: Option<usize>, sample: usize) -> Result<Resolved, ApiError> {
    let lead = lead.unwrap_or_else(|| s.leads()[0]);
    if s.model(lead).is_none() {
        return Err(ApiError::not_found(format!(
            "no checkpoint for lead {lead} (have {:?})",
            s.leads()
        )));
    }
    let all = s.samples(lead).unwrap_or(&[]);
    let window = *all.get(sample).ok_or_else(|| {
        ApiError::not_found(format!(
            "sample {sample} not in 0..{} for lead {lead}",
            all.len()
        ))
    })?;
    Ok(Resolved { lead, window })
}

fn check_pixel(s: &Session, row: usize, col: usize) -> Result<(), ApiError> {
    let (h, w) = s.series.grid();
    if row >= h || col >= w {
        return Err(ApiError::unprocessable(format!(
            "pixel ({row}, {col}) outside {h}×{w} grid"
        )));
    }
    Ok(())
}

fn parse_method(s: &str) -> Result<Method, ApiError> {
    Method::parse(s).map_err(|e| ApiError::bad_request(e.to_string()))
}

#[derive(Serialize)]
pub struct MaskRle {
    /// Row-major runs alternating ocean/land, starting with `first_ocean`.
    pub first_ocean: bool,
    pub runs: Vec<usize>,
}

fn mask_rle(cells: &[bool]) -> MaskRle {
    let mut runs = Vec::new();
    let mut cur = cells.first().copied().unwrap_or(true);
    let mut n = 0;
    for &c in cells {
        if c == cur {
            n += 1;
        } else {
            runs.push(n);
            cur = c;
            n = 1;
        }
    }
    runs.push(n);
    MaskRle {
        first_ocean: cells.first().copied().unwrap_or(true),
        runs,
    }
}

#[derive(Serialize)]
struct Meta {
    height: usize,
    width: usize,
    months: usize,
    mask_rle: MaskRle,
    ocean_cells: usize,
    leads: Vec<usize>,
    methods: Vec<&'static str>,
    baselines: Vec<&'static str>,
    sample_count: usize,
    samples_per_lead: BTreeMap<usize, usize>,
    reports: bool,
}

pub(crate) async fn meta(State(app): State<AppState>) -> Response {
    let r = app.session().map(|s| {
        let (height, width) = s.series.grid();
        let samples_per_lead: BTreeMap<usize, usize> = s
            .leads()
            .into_iter()
            .map(|l| (l, s.samples(l).map_or(0, <[_]>::len)))
            .collect();
        Meta {
            height,
            width,
            months: s.months(),
            mask_rle: mask_rle(s.mask.cells()),
            ocean_cells: s.mask.ocean_count(),
            leads: s.leads(),
            methods: Method::all().iter().map(Method::tag).collect(),
            baselines: vec![
                "zero",
                "raw-zero",
                "const:<v>",
                "raw-const:<v>",
                "windows:<k>",
            ],
            sample_count: samples_per_lead.values().copied().min().unwrap_or(0),
            samples_per_lead,
            reports: s.reports.is_some(),
        }
    });
    respond(app.hash(), r)
}

#[derive(Deserialize)]
pub(crate) struct FieldQuery {
    sample: usize,
    kind: String,
    month: Option<i64>,
    lead: Option<usize>,
}

#[derive(Serialize)]
struct FieldBody {
    kind: String,
    sample: usize,
    lead: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    month: Option<i64>,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

pub(crate) async fn field(
    State(app): State<AppState>,
    q: Result<Query<FieldQuery>, QueryRejection>,
) -> Response {
    let r = async {
        let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
        let s = app.session()?;
        let res = resolve(&s, q.lead, q.sample)?;
        let (lead, w) = (res.lead, res.window);
        let (height, width) = s.series.grid();
        let months = s.months();
        let (month, values) = match q.kind.as_str() {
            "input" => {
                let m = q.month.unwrap_or(-1);
                let i = month_index(m, months)?;
                let f = s.series.frame(w.first_input_month() + i);
                (Some(m), f.to_vec())
            }
            "target" => (None, s.series.frame(w.target_month()).to_vec()),
            "output" | "error" => {
                let kind = q.kind.clone();
                let session = Arc::clone(&s);
                let v = blocking(app.budget(), move || {
                    let model = session.model(lead).expect("resolved lead");
                    let x = w.input::<f64>(&session.series)?;
                    let y = model.forward(&x)?;
                    let out = apply_mask(&y, &session.mask)?;
                    let t = if kind == "error" {
                        apply_mask(&out.sub(&w.target::<f64>(&session.series)?)?, &session.mask)?
                    } else {
                        out
                    };
                    Ok(tensor_f32(&t))
                })
                .await?;
                (None, v)
            }
            other => {
                return Err(ApiError::bad_request(format!(
                    "unknown field kind `{other}` (input, target, output, error)"
                )))
            }
        };
        Ok(FieldBody {
            kind: q.kind,
            sample: q.sample,
            lead,
            month,
            height,
            width,
            values,
        })
    }
    .await;
    respond(app.hash(), r)
}

#[derive(Deserialize)]
pub(crate) struct AttributionRequest {
    sample: usize,
    row: usize,
    col: usize,
    method: String,
    lead: usize,
    month: Option<i64>,
    baseline: Option<String>,
}

#[derive(Serialize)]
pub struct SeriesBody {
    pub month_index: Vec<i64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub total: Vec<f64>,
}

impl From<&Contributions> for SeriesBody {
    fn from(c: &Contributions) -> Self {
        SeriesBody {
            month_index: c.month_indices(),
            positive: c.positive.clone(),
            negative: c.negative.clone(),
            total: c.total.clone(),
        }
    }
}

#[derive(Serialize)]
pub struct FrameBody {
    pub month: i64,
    pub values: Vec<f32>,
}

#[derive(Serialize)]
struct AttributionBody {
    sample: usize,
    lead: usize,
    row: usize,
    col: usize,
    method: String,
    baseline: Option<BaselineDescriptor>,
    output: f64,
    baseline_output: Option<f64>,
    sum: f64,
    series: SeriesBody,
    top_month: i64,
    height: usize,
    width: usize,
    frames: Vec<FrameBody>,
    /// All months were requested but exceed the size limit; only `top_month` is returned.
    truncated: bool,
}

pub(crate) async fn attribution(
    State(app): State<AppState>,
    body: Result<Json<AttributionRequest>, JsonRejection>,
) -> Response {
    let r = async {
        let Json(q) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
        let s = app.session()?;
        let res = resolve(&s, Some(q.lead), q.sample)?;
        let method = parse_method(&q.method)?;
        let choice = match &q.baseline {
            Some(b) => {
                BaselineChoice::parse(b).map_err(|e| ApiError::bad_request(e.to_string()))?
            }
            None => BaselineChoice::Zero,
        };
        check_pixel(&s, q.row, q.col)?;
        let months = s.months();
        let month = q.month.map(|m| month_index(m, months)).transpose()?;
        let key = AttributionKey {
            sample: q.sample,
            row: q.row,
            col: q.col,
            method,
            lead: res.lead,
            baseline: choice.to_string(),
        };
        let heat: Arc<Heatmap<f64>> = match s.cached(&key) {
            Some(h) => h,
            None => {
                let session = Arc::clone(&s);
                let (lead, w, sample) = (res.lead, res.window, q.sample);
                let target = PixelTarget::new(q.row, q.col).with_lead(lead);
                let h = blocking(app.budget(), move || {
                    let model = session.model(lead).expect("resolved lead");
                    let baseline = choice.resolve(&session.series, session.baseline_pool(lead))?;
                    let x = w.input::<f64>(&session.series)?;
                    Ok(explain(model, &x, target, method, &baseline)?.with_sample(sample))
                })
                .await?;
                let h = Arc::new(h);
                s.store(key, Arc::clone(&h));
                h
            }
        };
        let series = Contributions::of(&heat.values);
        let top = top_month(&series);
        let (height, width) = s.series.grid();
        let plane = height * width;
        let frame = |i: usize| FrameBody {
            month: i as i64 - months as i64,
            values: frame_f32(&heat.values.data()[i * plane..(i + 1) * plane]),
        };
        let (frames, truncated) = match month {
            Some(i) => (vec![frame(i)], false),
            None if heat.values.len() <= FRAME_LIMIT => ((0..months).map(frame).collect(), false),
            None => (vec![frame(month_index(top, months)?)], true),
        };
        Ok(AttributionBody {
            sample: q.sample,
            lead: res.lead,
            row: q.row,
            col: q.col,
            method: method.to_string(),
            baseline: heat.baseline.clone(),
            output: heat.output,
            baseline_output: heat.baseline_output,
            sum: heat.sum(),
            series: SeriesBody::from(&series),
            top_month: top,
            height,
            width,
            frames,
            truncated,
        })
    }
    .await;
    respond(app.hash(), r)
}

#[derive(Deserialize)]
pub(crate) struct AggregateQuery {
    row: usize,
    col: usize,
    method: String,
    lead: usize,
    month: Option<i64>,
}

#[derive(Serialize)]
struct AggregateBody {
    row: usize,
    col: usize,
    method: String,
    lead: usize,
    n: usize,
    series: SeriesBody,
    top_month: i64,
    month: i64,
    height: usize,
    width: usize,
    /// Mean positive part at `month`.
    positive: Vec<f32>,
    /// Mean magnitude of the negative part at `month`.
    negative: Vec<f32>,
}

pub(crate) async fn aggregate(
    State(app): State<AppState>,
    q: Result<Query<AggregateQuery>, QueryRejection>,
) -> Response {
    let hint = "run `climprobe aggregate` offline and restart the service with --reports";
    let r = async {
        let Query(q) = q.map_err(|e| ApiError::bad_request(e.body_text()))?;
        let s = app.session()?;
        let method = parse_method(&q.method)?;
        check_pixel(&s, q.row, q.col)?;
        let root = s.reports.clone().ok_or_else(|| {
            ApiError::not_found("no reports directory configured").with_hint(hint)
        })?;
        let dir = root.join(report_dir_name(
            PixelTarget::new(q.row, q.col),
            method,
            q.lead,
        ));
        if !dir.join("meta.json").is_file() {
            return Err(ApiError::not_found(format!(
                "no report for ({}, {}) {} lead {}",
                q.row,
                q.col,
                method.tag(),
                q.lead
            ))
            .with_hint(hint));
        }
        let rep = blocking(app.budget(), move || Ok(GroupReport::load(&dir)?)).await?;
        let top = top_month(&rep.series);
        let months = rep.series.months();
        let month = q.month.unwrap_or(top);
        let i = month_index(month, months)?;
        let [_, height, width] = <[usize; 3]>::try_from(rep.mean_pos.shape())
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "bad report shape"))?;
        let plane = height * width;
        let at = |t: &Tensor<f64>| frame_f32(&t.data()[i * plane..(i + 1) * plane]);
        Ok(AggregateBody {
            row: q.row,
            col: q.col,
            method: rep.method.to_string(),
            lead: rep.lead,
            n: rep.n,
            series: SeriesBody::from(&rep.series),
            top_month: top,
            month,
            height,
            width,
            positive: at(&rep.mean_pos),
            negative: at(&rep.mean_neg),
        })
    }
    .await;
    respond(app.hash(), r)
}

#[derive(Deserialize)]
#[serde(untagged)]
pub(crate) enum MonthSelection {
    Named(String),
    Offsets(Vec<i64>),
}

#[derive(Deserialize)]
pub(crate) struct AblationRequest {
    sample: usize,
    /// `[row0, col0, row1, col1]`, half-open.
    rect: [usize; 4],
    months: Option<MonthSelection>,
    lead: usize,
    #[serde(default)]
    fill: f64,
    #[serde(default = "yes")]
    standardized: bool,
}

fn yes() -> bool {
    true
}

#[derive(Serialize)]
struct AblationBody {
    sample: usize,
    lead: usize,
    height: usize,
    width: usize,
    stats: AblationStats,
    /// Un-masked `forward(x) − forward(ablated)`.
    diff: Vec<f32>,
    masked_diff: Vec<f32>,
}

pub(crate) async fn ablation(
    State(app): State<AppState>,
    body: Result<Json<AblationRequest>, JsonRejection>,
) -> Response {
    let r = async {
        let Json(q) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
        let s = app.session()?;
        let res = resolve(&s, Some(q.lead), q.sample)?;
        let months = s.months();
        let (height, width) = s.series.grid();
        let [r0, c0, r1, c1] = q.rect;
        let rect = Rect::new(r0, c0, r1, c1);
        if !rect.fits(height, width) {
            return Err(ApiError::unprocessable(format!(
                "rectangle {:?} is empty or outside {height}×{width} grid",
                q.rect
            )));
        }
        let mut spec = AblationSpec::new(rect).with_fill(q.fill, q.standardized);
        match q.months {
            None => {}
            Some(MonthSelection::Named(n)) if n == "all" => {}
            Some(MonthSelection::Named(n)) => {
                return Err(ApiError::bad_request(format!(
                    "months must be \"all\" or a list of offsets, got `{n}`"
                )))
            }
            Some(MonthSelection::Offsets(v)) => {
                let idx = v
                    .iter()
                    .map(|&m| month_index(m, months))
                    .collect::<Result<Vec<_>, _>>()?;
                if idx.is_empty() {
                    return Err(ApiError::unprocessable("empty month list"));
                }
                spec = spec.with_months(idx);
            }
        }
        let session = Arc::clone(&s);
        let (lead, w) = (res.lead, res.window);
        let out = blocking(app.budget(), move || {
            let model = session.model(lead).expect("resolved lead");
            let x = w.input::<f64>(&session.series)?;
            Ok(ablation_diff(model, &x, &spec, Some(&session.mask))?)
        })
        .await?;
        Ok(AblationBody {
            sample: q.sample,
            lead,
            height,
            width,
            stats: out.stats.clone(),
            diff: tensor_f32(&out.diff),
            masked_diff: out.masked_diff.as_ref().map(tensor_f32).unwrap_or_default(),
        })
    }
    .await;
    respond(app.hash(), r)
}

pub(crate) async fn not_found(State(app): State<AppState>) -> Response {
    respond::<()>(app.hash(), Err(ApiError::not_found("no such endpoint")))
}
