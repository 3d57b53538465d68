use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use radfleet_analytics::YearMonth;
use radfleet_core::geo::{destination_point, GeoPoint};
use radfleet_core::tracker::Transport;
use radfleet_core::wire::{flags, Imei};
use radfleet_server::{Channel, CommandStatus};
use radfleet_sim::{run_scenario, Outage, RouteScript, Scenario, SimError, VehicleSpec, Waypoint};

fn scenario_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_file(name)).unwrap()
}

const START: u64 = 1_730_790_000_000;

fn loop_vehicle(label: &str, imei: u64, minutes: f64) -> VehicleSpec {
    let origin = GeoPoint::new(35.70, 51.40).unwrap();
    let mut route = RouteScript::parked(origin, START);
    // Out and back at 50 km/h, sized to take about `minutes`.
    let half_m = 50.0 / 3.6 * minutes * 60.0 / 2.0;
    route.waypoints.push(Waypoint::new(destination_point(origin, 60.0, half_m * 0.9), 50.0));
    route.waypoints.push(Waypoint::new(origin, 50.0));
    VehicleSpec {
        label: label.into(),
        imei: Imei::new(imei).unwrap(),
        class: None,
        transport: Transport::Tcp,
        speed_limit_kmh: 90.0,
        route,
    }
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(key, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn daily_month_matches_scripted_distances() {
    let scenario = load("daily-month.toml");
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let run = run_scenario(&scenario, dir.path()).unwrap();
    let elapsed = started.elapsed();
    println!("{}elapsed {elapsed:?}", run.report.summary());
    run.report.check().unwrap();
    let rows = run.server.report_daily("car-1", YearMonth::new(2024, 11).unwrap()).unwrap();
    assert_eq!(rows.len(), 30);
    for (day, want) in [(1, 577.0), (17, 1071.0), (30, 414.0)] {
        let got = rows[day - 1].km;
        assert!((got - want).abs() <= want * 0.01, "day {day}: {got} km vs {want}");
    }
    let max = rows.iter().max_by(|a, b| a.km.total_cmp(&b.km)).unwrap();
    assert_eq!(max.day, 17);

    // Fuel follows distance: positive sample correlation of daily km and litres.
    let n = rows.len() as f64;
    let (mk, ml) = (rows.iter().map(|r| r.km).sum::<f64>() / n, rows.iter().map(|r| r.liters).sum::<f64>() / n);
    let cov: f64 = rows.iter().map(|r| (r.km - mk) * (r.liters - ml)).sum();
    let vk: f64 = rows.iter().map(|r| (r.km - mk).powi(2)).sum();
    let vl: f64 = rows.iter().map(|r| (r.liters - ml).powi(2)).sum();
    assert!(cov / (vk * vl).sqrt() > 0.9);
    assert!(elapsed.as_secs_f64() < 60.0, "{elapsed:?}");
}

#[test]
fn ten_minutes_without_outage_delivers_everything() {
    let mut s = Scenario::new("short", START, 600_000);
    s.vehicles.push(loop_vehicle("car", 356_307_042_441_013, 8.0));
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&s, dir.path()).unwrap();
    run.report.check().unwrap();
    let v = &run.report.vehicles[0];
    assert!(v.produced > 10);
    assert_eq!(v.stored, v.produced);
    assert_eq!(v.buffered, 0);
    assert_eq!(run.report.duplicates, 0);
}

#[test]
fn three_day_outage_is_delivered_after_restore() {
    let s = load("outage-3d.toml");
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&s, dir.path()).unwrap();
    println!("{}", run.report.summary());
    run.report.check().unwrap();
    let v = &run.report.vehicles[0];
    assert!(v.max_buffer_bytes > 0);
    assert!(v.max_buffer_bytes < 16 * 1024 * 1024);
    assert_eq!(v.stored, v.produced);
    assert_eq!(v.evicted, 0);

    let imei: Imei = v.imei.parse().unwrap();
    let stored = run.server.stored(imei);
    assert!(stored.windows(2).all(|w| w[0].record.seq < w[1].record.seq));
    let mut seqs: Vec<u32> = stored.iter().map(|p| p.record.seq).collect();
    seqs.dedup();
    assert_eq!(seqs.len(), stored.len());

    // Records made during the outage arrive after it, flagged as replays, on their own dates.
    let outage = &s.network.outages[0];
    let during: Vec<_> = stored
        .iter()
        .filter(|p| (outage.from_ms..outage.to_ms).contains(&p.record.timestamp_ms))
        .collect();
    assert!(during.len() > 100);
    assert!(during.iter().all(|p| p.received_at_ms >= outage.to_ms));
    assert!(during.iter().all(|p| p.record.flags & flags::BUFFERED_REPLAY != 0));
    assert!(stored
        .iter()
        .filter(|p| p.record.timestamp_ms < outage.from_ms - 600_000)
        .all(|p| p.record.flags & flags::BUFFERED_REPLAY == 0 && p.received_at_ms < outage.from_ms));
}

#[test]
fn fifty_vehicles_store_exactly_what_they_produce() {
    let s = load("fleet-50.toml");
    assert_eq!(s.vehicles.len(), 50);
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&s, dir.path()).unwrap();
    println!("{}", run.report.summary());
    run.report.check().unwrap();
    let produced: u64 = run.report.vehicles.iter().map(|v| v.produced).sum();
    assert!(produced > 50 * 30);
    assert_eq!(run.server.record_count() as u64, produced);
    assert_eq!(run.report.stored(), produced);
}

#[test]
fn lossy_udp_still_delivers_everything() {
    let mut s = Scenario::new("lossy", START, 1_800_000);
    s.seed = 21;
    s.network.drop_probability = 0.2;
    for k in 0..4 {
        let mut v = loop_vehicle(&format!("u{k}"), 356_307_042_442_000 + k, 25.0);
        v.transport = Transport::Udp;
        s.vehicles.push(v);
    }
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&s, dir.path()).unwrap();
    run.report.check().unwrap();
    assert!(run.report.duplicates > 0, "lost acks should cause resends");
    assert_eq!(run.report.stored(), run.report.produced());
}

#[test]
fn per_vehicle_outage_only_affects_that_vehicle() {
    let mut s = Scenario::new("partial", START, 3_600_000);
    s.vehicles.push(loop_vehicle("a", 356_307_042_443_001, 50.0));
    s.vehicles.push(loop_vehicle("b", 356_307_042_443_002, 50.0));
    s.network.outages.push(Outage {
        from_ms: START + 600_000,
        to_ms: START + 1_800_000,
        vehicles: vec![1],
    });
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&s, dir.path()).unwrap();
    run.report.check().unwrap();
    let replays = |label: &str| {
        let imei = run.server.resolve(label).unwrap().imei();
        run.server
            .stored(imei)
            .iter()
            .filter(|p| p.record.flags & flags::BUFFERED_REPLAY != 0)
            .count()
    };
    assert_eq!(replays("a"), 0);
    assert!(replays("b") > 10);
}

#[test]
fn dispatch_commands_reach_acked_over_both_channels() {
    let s = load("dispatch.toml");
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&s, dir.path()).unwrap();
    println!("{}", run.report.summary());
    run.report.check().unwrap();
    let commands = run.server.commands();
    assert_eq!(commands.len(), 3);
    assert!(commands.iter().all(|c| c.status == CommandStatus::Acked), "{commands:?}");
    assert_eq!(commands[0].channel, Some(Channel::Gprs));
    // The second command is issued during the taxi's outage.
    assert_eq!(commands[1].channel, Some(Channel::Sms));
    assert_eq!(commands[2].channel, Some(Channel::Gprs));
    let first = &commands[0];
    assert!(first.updated_ms - first.created_ms <= 2_000, "GPRS round trip {first:?}");

    let v = &run.report.vehicles[0];
    assert_eq!(v.commands_acked, 3);
    assert_eq!(v.sms_alerts, 1);
    assert!(v.alerts >= 1);
    assert!(v.max_alert_latency_s.unwrap() < 5.0);

    // The immobilizer output follows the commands and lands in the stored records.
    let imei: Imei = v.imei.parse().unwrap();
    let stored = run.server.stored(imei);
    let out_at = |t: u64| {
        stored
            .iter()
            .filter(|p| p.record.timestamp_ms <= t)
            .last()
            .map(|p| p.record.digital_out & 1)
    };
    assert_eq!(out_at(s.start_ms + 7_100_000), Some(0));
    assert_eq!(out_at(s.start_ms + 8_640_000), Some(1));
    assert!(commands.iter().all(|c| c.reply.as_deref().is_some_and(|r| !r.starts_with("ERR"))), "{commands:?}");
}

#[test]
fn reruns_are_byte_identical() {
    let s = load("dispatch.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_scenario(&s, a.path()).unwrap();
    let rb = run_scenario(&s, b.path()).unwrap();
    assert_eq!(ra.report, rb.report);
    assert_eq!(ra.report.to_csv(), rb.report.to_csv());
    assert_eq!(ra.report.summary(), rb.report.summary());
    let month = YearMonth::new(2024, 11).unwrap();
    assert_eq!(
        ra.server.report_daily("taxi", month).unwrap(),
        rb.server.report_daily("taxi", month).unwrap()
    );
    drop((ra, rb));
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.keys().any(|k| k.ends_with(".log")));
    assert_eq!(sa, sb);

    let mut other = s.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    let rc = run_scenario(&other, c.path()).unwrap();
    drop(rc);
    assert_ne!(snapshot(c.path()), sa);
}

#[test]
fn report_csv_has_one_row_per_vehicle() {
    let s = load("fleet-50.toml");
    let mut short = s.clone();
    short.duration_ms = 300_000;
    short.vehicles.truncate(3);
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&short, dir.path()).unwrap();
    let csv = run.report.to_csv();
    let lines: Vec<&str> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("vehicle,imei,produced,stored"));
    assert!(lines[1].starts_with("van-01,356307042450000,"));
}

#[test]
fn scenario_files_are_validated() {
    let base = std::fs::read_to_string(scenario_file("dispatch.toml")).unwrap();
    for (from, to) in [
        ("from_h = 1.5\nto_h = 2", "from_h = 2\nto_h = 1.5"),
        ("vehicle = \"taxi\"\ncommand = \"GETGPS\"", "vehicle = \"bus\"\ncommand = \"GETGPS\""),
        ("command = \"GETGPS\"", "command = \"REBOOT\""),
        ("speed_kmh = 95", "speed_kmh = -95"),
        ("label = \"taxi\"", "label = \"taxi\"\ncolour = \"red\""),
        ("imei = \"356307042441039\"", "imei = \"12x\""),
    ] {
        assert!(base.contains(from), "{from}");
        let text = base.replace(from, to);
        assert!(matches!(Scenario::parse(&text), Err(SimError::BadScenario(_))), "{to}");
    }
    assert!(Scenario::parse(&base).is_ok());
}

#[test]
fn replicated_vehicles_get_distinct_identities() {
    let s = load("fleet-50.toml");
    let labels: std::collections::HashSet<_> = s.vehicles.iter().map(|v| v.label.clone()).collect();
    let imeis: std::collections::HashSet<_> = s.vehicles.iter().map(|v| v.imei).collect();
    assert_eq!(labels.len(), 50);
    assert_eq!(imeis.len(), 50);
    assert_eq!(s.vehicles[0].label, "van-01");
    assert_eq!(s.vehicles[25].transport, Transport::Udp);
}
