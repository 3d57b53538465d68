//! HTTP JSON API and the server-sent event stream.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::Stream;
use radfleet_analytics::{ReportTable, YearMonth};
use radfleet_core::wire::{Command, Imei};
use serde::{Deserialize, Serialize};

use crate::events::PositionSnapshot;
use crate::fleet::{FleetServer, MissionInput};
use crate::ServerError;

type App = Arc<FleetServer>;

impl IntoResponse for ServerError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServerError::UnknownDevice(_) | ServerError::NotFound(_) => StatusCode::NOT_FOUND,
            ServerError::BadRequest(_) | ServerError::Analytics(_) => StatusCode::BAD_REQUEST,
            ServerError::DuplicateDevice(_) => StatusCode::CONFLICT,
            ServerError::NoRoute(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(server: Arc<FleetServer>) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/vehicles", get(vehicles))
        .route("/api/vehicles/{id}/track", get(track))
        .route("/api/nearest", get(nearest))
        .route("/api/reports/daily", get(daily))
        .route("/api/reports/monthly", get(monthly))
        .route("/api/reports/compare", get(compare))
        .route("/api/reports/fuel-by-speed", get(fuel_by_speed))
        .route("/api/reports/maintenance", get(maintenance))
        .route("/api/reports/mission", get(mission))
        .route("/api/reports/trips", get(trips))
        .route("/api/missions", get(missions).post(add_mission))
        .route("/api/commands", get(commands).post(send_command))
        .route("/api/alerts", get(alerts))
        .route("/api/zones", get(zones))
        .route("/api/stats", get(stats))
        .route("/api/stream", get(stream))
        .with_state(server)
}

#[derive(Debug, Deserialize)]
struct Format {
    #[serde(default)]
    format: Option<String>,
}

/// JSON rows, or the CSV export of the same table with `?format=csv`.
fn table_or_json<T: Serialize>(format: &Format, rows: &T, table: impl FnOnce() -> ReportTable) -> Response {
    if format.format.as_deref() == Some("csv") {
        ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], table().to_csv()).into_response()
    } else {
        Json(rows).into_response()
    }
}

fn month(s: &str) -> Result<YearMonth, ServerError> {
    s.parse().map_err(|e: radfleet_analytics::AnalyticsError| ServerError::BadRequest(e.to_string()))
}

async fn meta(State(app): State<App>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "utc_offset_minutes": app.config().utc_offset_minutes,
        "stale_after_s": app.config().stale_after_s,
        "now_ms": app.now_ms(),
    }))
}

async fn vehicles(State(app): State<App>) -> Response {
    Json(app.latest_positions()).into_response()
}

#[derive(Debug, Deserialize)]
struct Window {
    #[serde(default)]
    from: Option<String>,
    #[serde(default)]
    to: Option<String>,
}

impl Window {
    fn bounds(&self, app: &FleetServer) -> Result<(u64, u64), ServerError> {
        let from = self.from.as_deref().map(|s| app.parse_time(s)).transpose()?.unwrap_or(0);
        let to = self.to.as_deref().map(|s| app.parse_time(s)).transpose()?.unwrap_or(u64::MAX);
        Ok((from, to))
    }
}

async fn track(State(app): State<App>, Path(id): Path<String>, Query(w): Query<Window>) -> Result<Response, ServerError> {
    let (from, to) = w.bounds(&app)?;
    let device = app.resolve(&id)?;
    let imei = device.imei();
    let rows: Vec<PositionSnapshot> = app
        .query_track(&id, from, to)?
        .iter()
        .map(|r| PositionSnapshot::new(imei, &device.label, r))
        .collect();
    Ok(Json(rows).into_response())
}

#[derive(Debug, Deserialize)]
struct NearestQuery {
    lat: f64,
    lon: f64,
    #[serde(default = "ten")]
    limit: usize,
    #[serde(default)]
    format: Option<String>,
}

fn ten() -> usize {
    10
}

async fn nearest(State(app): State<App>, Query(q): Query<NearestQuery>) -> Result<Response, ServerError> {
    let result = app.nearest(q.lat, q.lon, q.limit)?;
    Ok(table_or_json(&Format { format: q.format }, &result, || ReportTable::nearest(&result)))
}

#[derive(Debug, Deserialize)]
struct DailyQuery {
    vehicle: String,
    month: String,
    #[serde(flatten)]
    format: Format,
}

async fn daily(State(app): State<App>, Query(q): Query<DailyQuery>) -> Result<Response, ServerError> {
    let rows = app.report_daily(&q.vehicle, month(&q.month)?)?;
    Ok(table_or_json(&q.format, &rows, || ReportTable::daily(&rows)))
}

#[derive(Debug, Deserialize)]
struct MonthlyQuery {
    vehicle: String,
    from: String,
    to: String,
    #[serde(flatten)]
    format: Format,
}

async fn monthly(State(app): State<App>, Query(q): Query<MonthlyQuery>) -> Result<Response, ServerError> {
    let rows = app.report_monthly(&q.vehicle, month(&q.from)?, month(&q.to)?)?;
    Ok(table_or_json(&q.format, &rows, || ReportTable::monthly(&rows)))
}

#[derive(Debug, Deserialize)]
struct CompareQuery {
    vehicle: String,
    #[serde(rename = "monthA")]
    month_a: String,
    #[serde(rename = "monthB")]
    month_b: String,
    #[serde(flatten)]
    format: Format,
}

async fn compare(State(app): State<App>, Query(q): Query<CompareQuery>) -> Result<Response, ServerError> {
    let rows = app.report_compare(&q.vehicle, month(&q.month_a)?, month(&q.month_b)?)?;
    Ok(table_or_json(&q.format, &rows, || ReportTable::compare(&rows)))
}

#[derive(Debug, Deserialize)]
struct VehicleWindow {
    vehicle: String,
    #[serde(flatten)]
    window: Window,
    #[serde(flatten)]
    format: Format,
}

async fn fuel_by_speed(State(app): State<App>, Query(q): Query<VehicleWindow>) -> Result<Response, ServerError> {
    let (from, to) = q.window.bounds(&app)?;
    let rows = app.report_fuel_by_speed(&q.vehicle, from, to)?;
    Ok(table_or_json(&q.format, &rows, || ReportTable::fuel_by_speed(&rows)))
}

async fn trips(State(app): State<App>, Query(q): Query<VehicleWindow>) -> Result<Response, ServerError> {
    let (from, to) = q.window.bounds(&app)?;
    let seg = app.report_trips(&q.vehicle, from, to)?;
    Ok(table_or_json(&q.format, &seg, || ReportTable::trips(&seg.trips)))
}

#[derive(Debug, Deserialize)]
struct VehicleQuery {
    vehicle: String,
    #[serde(flatten)]
    format: Format,
}

async fn maintenance(State(app): State<App>, Query(q): Query<VehicleQuery>) -> Result<Response, ServerError> {
    let rows = app.report_maintenance(&q.vehicle)?;
    Ok(table_or_json(&q.format, &rows, || ReportTable::maintenance(&rows)))
}

#[derive(Debug, Deserialize)]
struct MissionQuery {
    id: String,
    #[serde(flatten)]
    format: Format,
}

async fn mission(State(app): State<App>, Query(q): Query<MissionQuery>) -> Result<Response, ServerError> {
    let report = app.report_mission(&q.id)?;
    Ok(table_or_json(&q.format, &report, || ReportTable::mission(&report)))
}

async fn missions(State(app): State<App>) -> Response {
    Json(app.missions()).into_response()
}

async fn add_mission(State(app): State<App>, Json(input): Json<MissionInput>) -> Result<Response, ServerError> {
    let m = app.add_mission(input)?;
    Ok((StatusCode::CREATED, Json(m)).into_response())
}

#[derive(Debug, Deserialize)]
struct CommandBody {
    vehicle: String,
    /// Command text in the SMS grammar, e.g. "OUT 0 1" or "SETPARAM speed_limit=80".
    command: String,
}

async fn send_command(State(app): State<App>, Json(body): Json<CommandBody>) -> Result<Response, ServerError> {
    let command: Command = body.command.parse().map_err(|e: radfleet_core::wire::CommandError| ServerError::BadRequest(e.to_string()))?;
    let record = app.send_command(&body.vehicle, &command)?;
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

async fn commands(State(app): State<App>) -> Response {
    Json(app.commands()).into_response()
}

#[derive(Debug, Deserialize)]
struct AlertQuery {
    #[serde(default)]
    since: u64,
}

async fn alerts(State(app): State<App>, Query(q): Query<AlertQuery>) -> Response {
    Json(app.alerts_since(q.since)).into_response()
}

async fn zones(State(app): State<App>) -> Response {
    Json(app.config().zones.clone()).into_response()
}

async fn stats(State(app): State<App>) -> Response {
    Json(serde_json::json!({
        "ingest": app.stats(),
        "records": app.record_count(),
        "subscribers": app.subscriber_count(),
    }))
    .into_response()
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    #[serde(default)]
    vehicle: Option<String>,
}

async fn stream(
    State(app): State<App>,
    Query(q): Query<StreamQuery>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ServerError> {
    let filter: Option<Imei> = match q.vehicle {
        Some(v) => Some(app.resolve(&v)?.imei()),
        None => None,
    };
    let sub = app.subscribe(filter);
    let events = futures::stream::unfold(sub, |mut sub| async move {
        let event = sub.next().await?;
        let data = serde_json::to_string(&event).expect("events serialize");
        Some((Ok(Event::default().data(data)), sub))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}
