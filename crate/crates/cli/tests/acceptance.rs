//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radfleet_analytics::nearest::{nearest_vehicles, VehiclePosition};
use radfleet_core::geo::{destination_point, zone_transitions, GeoPoint, GeofenceZone, Transition, ZoneShape};
use radfleet_core::nmea::{fuse_lines, serialize_gga, serialize_rmc, Fix};
use radfleet_core::tracker::{PowerMode, RecordBuffer, SensorFrame, Tracker, TrackerConfig, TrackerState};
use radfleet_core::wire::{
    crc16, decode_frame, encode_frame, encode_login, Ack, Downlink, EventCode, Frame, FrameError, Imei, RecordValues,
    StreamDecoder, TelemetryRecord, TextMessage, Uplink,
};
use radfleet_server::{FleetServer, OpenMode, ServerConfig, SystemClock};
use radfleet_sim::{run_scenario, Scenario};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const MIB: usize = 1 << 20;
const R_M: f64 = 6_371_000.0;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scenario_path(name: &str) -> PathBuf {
    workspace().join("scenarios").join(name)
}

fn radfleet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radfleet"))
        .args(args)
        .env_remove("RADFLEET_CONFIG")
        .output()
        .expect("radfleet runs")
}

fn ok_stdout(o: &Output, what: &str) -> Result<String, String> {
    if !o.status.success() {
        return Err(format!("{what} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// Fleet-month reconstruction

fn month_reconstruction() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = tmp.path().join("store");
    let scenario = scenario_path("daily-month.toml");
    let started = Instant::now();
    let o = radfleet(&["--data-dir", s(&store), "simulate", "--scenario", s(&scenario), "--seed", "7"]);
    let elapsed = started.elapsed().as_secs_f64();
    let summary = ok_stdout(&o, "simulate")?;
    ensure!(summary.contains("PASS"), "scenario oracles failed:\n{summary}");
    let csv = ok_stdout(
        &radfleet(&["--data-dir", s(&store), "report", "daily", "--vehicle", "car-1", "--month", "2024-11", "--csv"]),
        "report daily",
    )?;
    let mut km = BTreeMap::new();
    for line in csv.split("\r\n").skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let day: u32 = cols[0].parse().map_err(|_| format!("bad row {line}"))?;
        let v: f64 = cols[2].parse().map_err(|_| format!("bad row {line}"))?;
        km.insert(day, v);
    }
    ensure!(km.len() == 30, "{} day rows", km.len());
    for (day, target) in [(1, 577.0), (17, 1071.0), (30, 414.0)] {
        let got = km[&day];
        ensure!((got - target).abs() <= 0.01 * target, "day {day}: {got:.2} km, expected {target} km within 1%");
    }
    ensure!(elapsed < 60.0, "simulation took {elapsed:.1} s");
    Ok(format!("day 1 {:.1} km, day 17 {:.1} km, day 30 {:.1} km, simulated in {elapsed:.1} s", km[&1], km[&17], km[&30]))
}

// Store-and-forward across a three-day outage

fn store_and_forward() -> Check {
    let scenario = Scenario::load(&scenario_path("outage-3d.toml")).map_err(|e| e.to_string())?;
    let outage = scenario.network.outages.first().ok_or("scenario has no outage")?.clone();
    ensure!(outage.to_ms - outage.from_ms >= 72 * 3_600_000, "outage shorter than three days");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = run_scenario(&scenario, tmp.path()).map_err(|e| e.to_string())?;
    let report = &run.report;
    ensure!(report.passed(), "oracle violations: {:?}", report.violations);
    let mut replayed = 0;
    for v in &report.vehicles {
        ensure!(v.produced > 0, "{} produced nothing", v.vehicle);
        let imei: Imei = v.imei.parse().map_err(|e| format!("{e:?}"))?;
        let stored = run.server.stored(imei);
        let seqs: Vec<u32> = stored.iter().map(|p| p.record.seq).collect();
        let expected: Vec<u32> = (1..=v.produced as u32).collect();
        ensure!(seqs.windows(2).all(|w| w[0] < w[1]), "{}: stored out of seq order", v.vehicle);
        ensure!(seqs == expected, "{}: stored {} of {} produced", v.vehicle, seqs.len(), v.produced);
        let during: Vec<_> = stored
            .iter()
            .filter(|p| (outage.from_ms..outage.to_ms).contains(&p.record.timestamp_ms))
            .collect();
        ensure!(!during.is_empty(), "{}: nothing recorded during the outage", v.vehicle);
        ensure!(during.iter().all(|p| p.received_at_ms >= outage.to_ms), "{}: delivery during outage", v.vehicle);
        replayed += during.iter().filter(|p| p.record.is_replay()).count();
        ensure!(v.max_buffer_bytes < 16 * MIB as u64, "{}: buffer peak {} bytes", v.vehicle, v.max_buffer_bytes);
    }
    ensure!(replayed > 0, "no record carried the replay flag");
    ensure!(run.server.stats().duplicates == report.duplicates, "duplicate accounting differs");
    Ok(format!(
        "{} produced, {} stored, {replayed} replayed, buffer peak {} bytes",
        report.produced(),
        report.stored(),
        report.max_buffer_bytes()
    ))
}

// Flash sizing

fn buffer_arithmetic() -> Check {
    let records_needed: usize = 120 * 86_400 / 60;
    ensure!(records_needed == 172_800, "{records_needed}");
    let bytes = records_needed * 64;
    ensure!(bytes <= 16 * MIB, "{bytes} > {}", 16 * MIB);
    let default = TrackerConfig::new(Imei::new(356_307_042_441_013).map_err(|e| e.to_string())?);
    ensure!(default.buffer_capacity_bytes == 16 * MIB, "default buffer {} bytes", default.buffer_capacity_bytes);
    ensure!(default.time_trigger_moving_s == 60, "default cadence {} s", default.time_trigger_moving_s);
    let mut buf = RecordBuffer::new(default.buffer_capacity_bytes);
    ensure!(buf.capacity_records() >= records_needed, "capacity {} records", buf.capacity_records());
    for seq in 1..=records_needed as u32 {
        let r = TelemetryRecord::from_values(&RecordValues {
            timestamp_ms: 1_700_000_000_000 + u64::from(seq) * 60_000,
            seq,
            ..RecordValues::default()
        })
        .map_err(|e| e.to_string())?;
        buf.push(&r);
    }
    ensure!(buf.len() == records_needed && buf.evicted() == 0, "len {} evicted {}", buf.len(), buf.evicted());
    ensure!(buf.occupancy_bytes() == bytes, "occupancy {}", buf.occupancy_bytes());
    Ok(format!("172800 x 64 B = {bytes} B <= {} B, buffered without eviction", 16 * MIB))
}

// Codecs

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

/// Bit-at-a-time CRC-16/CCITT-FALSE.
fn crc_oracle(bytes: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in bytes {
        for i in (0..8).rev() {
            let bit = (b >> i) & 1 == 1;
            let top = crc & 0x8000 != 0;
            crc <<= 1;
            if bit != top {
                crc ^= 0x1021;
            }
        }
    }
    crc
}

fn arb_fix() -> impl Strategy<Value = Fix> {
    (
        946_684_800u64..4_102_444_799,
        -90.0f64..=90.0,
        -180.0f64..=180.0,
        0.0f64..400.0,
        0.0f64..360.0,
        -400.0f64..8000.0,
        4u8..=24,
        0.5f64..20.0,
    )
        .prop_map(|(secs, lat, lon, speed, heading, alt, sats, hdop)| Fix {
            timestamp_ms: secs * 1000,
            lat,
            lon,
            speed_kmh: speed,
            heading_deg: heading,
            altitude_m: alt,
            satellites: sats,
            hdop,
            valid: true,
        })
}

fn arb_record() -> impl Strategy<Value = TelemetryRecord> {
    (
        (any::<u64>(), 0u8..8, -900_000_000i32..=900_000_000, -1_800_000_000i32..=1_800_000_000, any::<i16>(), 0u16..3600),
        (any::<u16>(), any::<u8>(), any::<u8>(), 0u8..=16, any::<u8>(), any::<u8>(), any::<[u16; 2]>()),
        (any::<[u16; 2]>(), any::<u32>(), any::<u16>(), any::<[i16; 3]>(), any::<u16>(), any::<u32>()),
    )
        .prop_map(|(a, b, c)| TelemetryRecord {
            timestamp_ms: a.0,
            flags: a.1,
            lat_e7: a.2,
            lon_e7: a.3,
            altitude_m: a.4,
            heading_dd: a.5,
            speed_dkmh: b.0,
            satellites: b.1,
            hdop_d: b.2,
            event: EventCode::try_from(b.3).expect("valid code").into(),
            digital_in: b.4,
            digital_out: b.5,
            analog1_mv: b.6[0],
            analog2_mv: b.6[1],
            fuel_level_dpct: c.0[0],
            fuel_rate_dlh: c.0[1],
            odometer_m: c.1,
            battery_mv: c.2,
            accel_mg: c.3,
            geofence_id: c.4,
            seq: c.5,
        })
}

fn sample_record(seq: u32) -> TelemetryRecord {
    TelemetryRecord::from_values(&RecordValues {
        timestamp_ms: 1_730_800_000_000 + u64::from(seq) * 60_000,
        fix_valid: true,
        lat: 35.6892 + f64::from(seq) * 1e-3,
        lon: 51.389,
        speed_kmh: 57.3,
        heading_deg: 123.4,
        satellites: 9,
        hdop: 0.9,
        event: Some(EventCode::Periodic),
        odometer_m: 123_456.0,
        seq,
        ..RecordValues::default()
    })
    .expect("sample record fits")
}

fn codec_suite() -> Check {
    ensure!(crc_oracle(b"123456789") == 0x29B1, "oracle check value");
    ensure!(crc16(b"123456789") == 0x29B1, "crc16(\"123456789\") = {:#06x}", crc16(b"123456789"));
    runner(2_000)
        .run(&proptest::collection::vec(any::<u8>(), 0..300), |bytes| {
            prop_assert_eq!(crc16(&bytes), crc_oracle(&bytes));
            Ok(())
        })
        .map_err(|e| format!("crc: {e}"))?;

    runner(10_000)
        .run(&arb_fix(), |fix| {
            let lines = [serialize_rmc(&fix).unwrap(), serialize_gga(&fix).unwrap()];
            let back = fuse_lines(&lines).map_err(|e| TestCaseError::fail(format!("{e:?}")))?;
            prop_assert!((back.lat - fix.lat).abs() <= 1e-5 && (back.lon - fix.lon).abs() <= 1e-5);
            prop_assert!((back.speed_kmh - fix.speed_kmh).abs() <= 0.2);
            prop_assert!((back.altitude_m - fix.altitude_m).abs() <= 0.1);
            prop_assert_eq!(back.timestamp_ms, fix.timestamp_ms);
            prop_assert_eq!(back.satellites, fix.satellites);
            prop_assert!(back.valid);
            Ok(())
        })
        .map_err(|e| format!("nmea round trip: {e}"))?;

    runner(10_000)
        .run(&arb_record(), |r| {
            let bytes = r.encode();
            prop_assert_eq!(bytes.len(), 64);
            prop_assert_eq!(TelemetryRecord::decode(&bytes).unwrap(), r);
            Ok(())
        })
        .map_err(|e| format!("record round trip: {e}"))?;

    // Every single-bit flip of a three-record frame.
    let imei = Imei::new(356_938_035_643_809).unwrap();
    let frame = encode_frame(imei, &[sample_record(1), sample_record(2), sample_record(3)]).unwrap();
    let (mut bad_crc, mut other) = (0, 0);
    for bit in 0..frame.len() * 8 {
        let mut corrupt = frame.clone();
        corrupt[bit / 8] ^= 1 << (bit % 8);
        match decode_frame(&corrupt) {
            Ok(_) => return Err(format!("bit {bit} flipped and the frame was accepted")),
            Err(FrameError::BadCrc { .. }) => bad_crc += 1,
            // Magic bytes are outside the CRC; a raised count waits for bytes that never come.
            Err(FrameError::BadMagic) if bit / 8 < 2 => other += 1,
            Err(FrameError::NeedMoreBytes(_) | FrameError::TooManyRecords(_)) if (11..13).contains(&(bit / 8)) => {
                other += 1
            }
            Err(e) => return Err(format!("bit {bit}: unexpected {e:?}")),
        }
    }
    let flips = frame.len() * 8;
    ensure!(bad_crc + other == flips, "{} flips unaccounted", flips - bad_crc - other);

    let message = prop_oneof![
        proptest::collection::vec(arb_record(), 0..4).prop_map(move |records| Uplink::Frame(Frame { imei, records })),
        (any::<u32>(), "[ -~]{0,40}").prop_map(|(id, text)| Uplink::CommandReply(TextMessage { id, text })),
    ];
    runner(1_000)
        .run(
            &(proptest::collection::vec(message, 1..6), proptest::collection::vec(1usize..80, 1..40)),
            |(messages, cuts)| {
                let stream: Vec<u8> = messages.iter().flat_map(|m| m.encode().unwrap()).collect();
                let mut decoder = StreamDecoder::uplink();
                let mut out = Vec::new();
                let (mut pos, mut cut) = (0, cuts.iter().cycle());
                while pos < stream.len() {
                    let end = (pos + cut.next().unwrap()).min(stream.len());
                    decoder.push(&stream[pos..end]);
                    pos = end;
                    while let Some(m) = decoder.next_message() {
                        out.push(m.map_err(|e| TestCaseError::fail(format!("{e:?}")))?);
                    }
                }
                prop_assert_eq!(out, messages);
                prop_assert_eq!(decoder.buffered(), 0);
                Ok(())
            },
        )
        .map_err(|e| format!("tcp chunking: {e}"))?;
    Ok(format!(
        "10000 nmea + 10000 record round trips, {flips} bit flips rejected ({bad_crc} BadCrc, {other} outside CRC reach), \
         1000 chunkings, crc 0x29B1"
    ))
}

// Geofences

fn unit(p: GeoPoint) -> [f64; 3] {
    let (la, lo) = (p.lat().to_radians(), p.lon().to_radians());
    [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
}

/// Central angle from the cross and dot products of unit vectors.
fn vector_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (u, v) = (unit(a), unit(b));
    let c = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let sin = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
    let cos = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    R_M * sin.atan2(cos)
}

/// Plane coordinates in metres around `anchor` (equirectangular).
fn plane(anchor: GeoPoint, p: GeoPoint) -> (f64, f64) {
    let m_per_deg = R_M * std::f64::consts::PI / 180.0;
    ((p.lon() - anchor.lon()) * anchor.lat().to_radians().cos() * m_per_deg, (p.lat() - anchor.lat()) * m_per_deg)
}

fn winding_number(poly: &[(f64, f64)], p: (f64, f64)) -> i32 {
    let left = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1);
    let mut wn = 0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        if a.1 <= p.1 {
            if b.1 > p.1 && left(a, b) > 0.0 {
                wn += 1;
            }
        } else if b.1 <= p.1 && left(a, b) < 0.0 {
            wn -= 1;
        }
    }
    wn
}

fn edge_distance(poly: &[(f64, f64)], p: (f64, f64)) -> f64 {
    (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            ((a.0 + t * dx - p.0).powi(2) + (a.1 + t * dy - p.1).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Brute-force membership, or `None` within a hair of the boundary where the oracle and the
/// library may round differently.
fn oracle_contains(zone: &GeofenceZone, p: GeoPoint) -> Option<bool> {
    match zone.shape() {
        ZoneShape::Rectangle { sw, ne } => {
            Some(p.lat() >= sw.lat() && p.lat() <= ne.lat() && p.lon() >= sw.lon() && p.lon() <= ne.lon())
        }
        ZoneShape::Circle { center, radius_m } => {
            let d = vector_distance(*center, p);
            ((d - radius_m).abs() > 1e-6).then_some(d < *radius_m)
        }
        ZoneShape::Triangle(t) => {
            let vs = t.vertices();
            let anchor = GeoPoint::new(
                vs.iter().map(|v| v.lat()).sum::<f64>() / 3.0,
                vs.iter().map(|v| v.lon()).sum::<f64>() / 3.0,
            )
            .ok()?;
            let poly: Vec<(f64, f64)> = vs.iter().map(|v| plane(anchor, *v)).collect();
            let q = plane(anchor, p);
            (edge_distance(&poly, q) > 1e-4).then(|| winding_number(&poly, q) != 0)
        }
    }
}

fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).expect("valid point")
}

fn random_zone(rng: &mut ChaCha8Rng, id: u16, kind: usize, base: GeoPoint) -> GeofenceZone {
    loop {
        let z = match kind {
            0 => {
                let (a, b) = (destination_point(base, 225.0, rng.random_range(500.0..20_000.0)), destination_point(base, 45.0, rng.random_range(500.0..20_000.0)));
                GeofenceZone::rectangle(id, a, b)
            }
            1 => GeofenceZone::circle(id, base, rng.random_range(50.0..20_000.0)),
            _ => {
                let v: Vec<GeoPoint> = (0..3)
                    .map(|_| destination_point(base, rng.random_range(0.0..360.0), rng.random_range(1_000.0..30_000.0)))
                    .collect();
                GeofenceZone::triangle(id, v[0], v[1], v[2])
            }
        };
        if let Ok(z) = z {
            return z;
        }
    }
}

fn geofence_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e0f);
    let mut checked = [0usize; 3];
    for (kind, count) in checked.iter_mut().enumerate() {
        let mut skipped = 0;
        while *count < 10_000 {
            let base = pt(rng.random_range(-70.0..70.0), rng.random_range(-170.0..170.0));
            let zone = random_zone(&mut rng, 1, kind, base);
            for _ in 0..1_000 {
                let p = destination_point(base, rng.random_range(0.0..360.0), rng.random_range(0.0..35_000.0));
                match oracle_contains(&zone, p) {
                    Some(inside) => {
                        ensure!(zone.contains(p) == inside, "zone {zone} point {p}: library {}", zone.contains(p));
                        *count += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        ensure!(skipped < 10, "{skipped} boundary points skipped");
    }

    let (mut steps, mut events) = (0usize, 0usize);
    for walk in 0..40 {
        let c = pt(rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0));
        let zones: Vec<GeofenceZone> = (0..6u16)
            .map(|i| {
                let at = destination_point(c, rng.random_range(0.0..360.0), rng.random_range(0.0..2_000.0));
                random_zone(&mut rng, i + 1, usize::from(i % 3), at)
            })
            .collect();
        let mut prev: Option<GeoPoint> = None;
        let mut cur = c;
        for _ in 0..500 {
            let got: Vec<(u16, Transition)> = zone_transitions(prev, cur, &zones)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|e| (e.zone_id, e.transition))
                .collect();
            if let Some(p) = prev {
                let mut expected = Vec::new();
                let mut decidable = true;
                for z in &zones {
                    match (oracle_contains(z, p), oracle_contains(z, cur)) {
                        (Some(false), Some(true)) => expected.push((z.id(), Transition::Enter)),
                        (Some(true), Some(false)) => expected.push((z.id(), Transition::Exit)),
                        (Some(_), Some(_)) => {}
                        _ => decidable = false,
                    }
                }
                if decidable {
                    ensure!(got == expected, "walk {walk}: {got:?} vs {expected:?}");
                    steps += 1;
                    events += got.len();
                }
            } else {
                ensure!(got.is_empty(), "events without a previous position");
            }
            prev = Some(cur);
            let next = destination_point(cur, rng.random_range(0.0..360.0), rng.random_range(0.0..2_500.0));
            cur = if vector_distance(c, next) > 25_000.0 { c } else { next };
        }
    }
    ensure!(events > 100, "only {events} crossings");
    Ok(format!(
        "{}/{}/{} rectangle/circle/triangle points agree, {steps} walk steps with {events} transitions",
        checked[0], checked[1], checked[2]
    ))
}

// Nearest vehicle

fn nearest_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let now = 2_000_000_000_000u64;
    for n in 1..=1000usize {
        let target = pt(rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0));
        let fleet: Vec<VehiclePosition> = (0..n)
            .map(|i| VehiclePosition {
                vehicle: format!("v{i:04}"),
                lat: (target.lat() + rng.random_range(-3.0..3.0f64)).clamp(-90.0, 90.0),
                lon: target.lon() + rng.random_range(-3.0..3.0),
                timestamp_ms: now - rng.random_range(0..1_200_000),
            })
            .collect();
        let limit = rng.random_range(1..=n + 2);
        let got = nearest_vehicles(target, &fleet, limit, now, 900.0);

        let dist: BTreeMap<&str, f64> =
            fleet.iter().map(|v| (v.vehicle.as_str(), vector_distance(target, pt(v.lat, v.lon)))).collect();
        let mut fresh: Vec<&VehiclePosition> = fleet.iter().filter(|v| now - v.timestamp_ms <= 900_000).collect();
        let mut stale: Vec<&VehiclePosition> = fleet.iter().filter(|v| now - v.timestamp_ms > 900_000).collect();
        let by_distance = |a: &&VehiclePosition, b: &&VehiclePosition| {
            dist[a.vehicle.as_str()].total_cmp(&dist[b.vehicle.as_str()]).then(a.vehicle.cmp(&b.vehicle))
        };
        fresh.sort_by(by_distance);
        stale.sort_by(by_distance);
        fresh.truncate(limit);

        ensure!(got.ranked.len() == fresh.len(), "fleet {n}: {} ranked, expected {}", got.ranked.len(), fresh.len());
        ensure!(got.stale.len() == stale.len(), "fleet {n}: stale count");
        for (list, want) in [(&got.ranked, &fresh), (&got.stale, &stale)] {
            for (r, w) in list.iter().zip(want.iter()) {
                let (dr, dw) = (dist[r.vehicle.as_str()], dist[w.vehicle.as_str()]);
                // Different vehicles at the same spot only within rounding.
                ensure!(r.vehicle == w.vehicle || (dr - dw).abs() < 1e-6, "fleet {n}: {} before {}", r.vehicle, w.vehicle);
                ensure!((r.distance_m - dr).abs() <= 1e-6 * dr.max(1.0), "fleet {n}: {} at {} m vs {dr}", r.vehicle, r.distance_m);
            }
        }
    }
    Ok("fleets of 1..=1000 vehicles ranked like the brute-force sort".into())
}

// Battery endurance

fn power_endurance() -> Check {
    let expected_s = (1800.0 / 3.0 * 3600.0) as u64;
    let cfg = TrackerConfig::new(Imei::new(356_307_042_441_013).map_err(|e| e.to_string())?);
    let mut state = TrackerState::new(&cfg);
    state.power_mode = PowerMode::DeepSleep;
    let mut tracker = Tracker::with_state(cfg, state);
    let t0 = 1_700_000_000_000u64;
    let mut died = None;
    for tick in 0..expected_s + 10 {
        let out = tracker
            .step(&SensorFrame {
                external_power_v: 0.0,
                ..SensorFrame::quiet(t0 + tick * 1000)
            })
            .map_err(|e| e.to_string())?;
        ensure!(out.records.is_empty() && out.outbound.is_empty(), "activity in deep sleep at tick {tick}");
        ensure!(tracker.state().power_mode == PowerMode::DeepSleep, "left deep sleep at tick {tick}");
        if tracker.state().is_dead() {
            died = Some(tick);
            break;
        }
    }
    let died = died.ok_or("battery never ran out")?;
    ensure!(died.abs_diff(expected_s) <= 1, "dead after {died} s, expected {expected_s} s");
    Ok(format!("battery empty after {:.3} h", died as f64 / 3600.0))
}

// Crash safety

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(config: &Path) -> Result<(Server, String), String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_radfleet"))
        .args(["serve", "--config", s(config)])
        .env_remove("RADFLEET_CONFIG")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let out = child.stdout.take().ok_or("no stdout")?;
    let server = Server(child);
    let mut lines = BufReader::new(out).lines();
    let tcp = lines.next().ok_or("server exited")?.map_err(|e| e.to_string())?;
    // Drain the rest so the child never blocks on a full pipe.
    std::thread::spawn(move || lines.for_each(drop));
    let addr = tcp.strip_prefix("tcp ").ok_or_else(|| format!("unexpected line {tcp}"))?.to_string();
    Ok((server, addr))
}

#[derive(Default)]
struct Ledger {
    produced: BTreeMap<u32, TelemetryRecord>,
    acked: BTreeSet<u32>,
    next_seq: u32,
}

fn read_ack(sock: &mut TcpStream, decoder: &mut StreamDecoder<Downlink>) -> std::io::Result<Ack> {
    let mut buf = [0u8; 256];
    loop {
        match decoder.next_message() {
            Some(Ok(Downlink::Ack(ack))) => return Ok(ack),
            Some(Ok(Downlink::Command(_))) => continue,
            Some(Err(e)) => return Err(std::io::Error::other(format!("{e:?}"))),
            None => {}
        }
        let n = sock.read(&mut buf)?;
        if n == 0 {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        decoder.push(&buf[..n]);
    }
}

/// Streams frames until the connection breaks or `stop` is set. Unacked records are resent
/// first; new ones are only made while `fresh` is true.
fn client(addr: &str, imei: Imei, ledger: &Mutex<Ledger>, stop: &AtomicBool, fresh: bool, seed: u64) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sock = TcpStream::connect(addr)?;
    sock.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut decoder = StreamDecoder::downlink();
    sock.write_all(&encode_login(imei))?;
    if read_ack(&mut sock, &mut decoder)? != Ack::LOGIN_ACCEPT {
        return Err(std::io::Error::other("login rejected"));
    }
    while !stop.load(Ordering::Relaxed) {
        let batch: Vec<TelemetryRecord> = {
            let mut l = ledger.lock().unwrap();
            let pending: Vec<TelemetryRecord> =
                l.produced.iter().filter(|(s, _)| !l.acked.contains(s)).take(8).map(|(_, r)| *r).collect();
            if !pending.is_empty() {
                pending
            } else if fresh {
                let n = rng.random_range(1..=5);
                (0..n)
                    .map(|_| {
                        l.next_seq += 1;
                        let r = sample_record(l.next_seq);
                        l.produced.insert(r.seq, r);
                        r
                    })
                    .collect()
            } else {
                return Ok(());
            }
        };
        sock.write_all(&encode_frame(imei, &batch).expect("small frame"))?;
        let ack = read_ack(&mut sock, &mut decoder)?;
        if usize::from(ack.accepted_count) == batch.len() {
            ledger.lock().unwrap().acked.extend(batch.iter().map(|r| r.seq));
        }
    }
    Ok(())
}

fn stored_seqs(config: &ServerConfig, imei: Imei) -> Result<BTreeMap<u32, TelemetryRecord>, String> {
    let server = FleetServer::open(config.clone(), Arc::new(SystemClock), OpenMode::ReadOnly).map_err(|e| e.to_string())?;
    Ok(server.stored(imei).into_iter().map(|p| (p.record.seq, p.record)).collect())
}

fn crash_safety() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let imei = Imei::new(356_307_042_441_013).map_err(|e| e.to_string())?;
    let cfg_path = tmp.path().join("server.toml");
    std::fs::write(
        &cfg_path,
        format!(
            concat!(
                "data_dir = {:?}\nfsync = true\ntcp_listen = \"127.0.0.1:0\"\nudp_listen = \"127.0.0.1:0\"\n",
                "http_listen = \"127.0.0.1:0\"\n[[devices]]\nimei = \"{}\"\nlabel = \"car-1\"\n"
            ),
            s(&tmp.path().join("data")),
            imei
        ),
    )
    .map_err(|e| e.to_string())?;
    let config = ServerConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    let ledger = Arc::new(Mutex::new(Ledger::default()));
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut kills = 0;

    let check_acked = |stage: &str| -> Result<(), String> {
        let stored = stored_seqs(&config, imei)?;
        let l = ledger.lock().unwrap();
        if let Some(lost) = l.acked.iter().find(|s| !stored.contains_key(s)) {
            return Err(format!("{stage}: acked seq {lost} missing from the store"));
        }
        if let Some((seq, _)) = stored.iter().find(|(s, r)| l.produced.get(s) != Some(r)) {
            return Err(format!("{stage}: stored seq {seq} differs from what was sent"));
        }
        Ok(())
    };

    for round in 0..20u64 {
        let (mut server, addr) = start_server(&cfg_path)?;
        check_acked(&format!("restart {round}"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let worker = {
            let (ledger, stop, addr) = (ledger.clone(), stop.clone(), addr.clone());
            std::thread::spawn(move || client(&addr, imei, &ledger, &stop, true, round))
        };
        std::thread::sleep(Duration::from_millis(rng.random_range(20..400)));
        server.0.kill().map_err(|e| e.to_string())?;
        server.0.wait().map_err(|e| e.to_string())?;
        kills += 1;
        stop.store(true, Ordering::Relaxed);
        let _ = worker.join();
        check_acked(&format!("kill {round}"))?;
    }

    let (server, addr) = start_server(&cfg_path)?;
    check_acked("final restart")?;
    let stop = AtomicBool::new(false);
    for _ in 0..5 {
        if client(&addr, imei, &ledger, &stop, false, 0).is_ok() {
            break;
        }
    }
    drop(server);
    let stored = stored_seqs(&config, imei)?;
    let l = ledger.lock().unwrap();
    ensure!(l.acked.len() == l.produced.len(), "{} of {} acked after resending", l.acked.len(), l.produced.len());
    ensure!(stored == l.produced, "stored {} records, produced {}", stored.len(), l.produced.len());
    ensure!(l.produced.len() > 100, "only {} records sent", l.produced.len());
    Ok(format!("{kills} kill -9 points, {} records, every acked one stored", l.produced.len()))
}

// Determinism

fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (file, seed, vehicle, month) in [("dispatch.toml", "5", "taxi", "2024-11"), ("outage-3d.toml", "11", "van-1", "2024-11")] {
        let mut runs = Vec::new();
        for k in 0..2 {
            let store = tmp.path().join(format!("{file}-{k}"));
            let csv = tmp.path().join(format!("{file}-{k}.csv"));
            let summary = ok_stdout(
                &radfleet(&["--data-dir", s(&store), "simulate", "--scenario", s(&scenario_path(file)), "--seed", seed, "--out", s(&csv)]),
                "simulate",
            )?;
            let mut reports = Vec::new();
            for args in [
                vec!["report", "daily", "--vehicle", vehicle, "--month", month],
                vec!["report", "monthly", "--vehicle", vehicle, "--from", "2024-10", "--to", "2024-12"],
                vec!["report", "trips", "--vehicle", vehicle, "--from", "2024-11-01", "--to", "2024-12-01"],
                vec!["report", "fuel-by-speed", "--vehicle", vehicle, "--from", "2024-11-01", "--to", "2024-12-01"],
                vec!["report", "maintenance", "--vehicle", vehicle],
            ] {
                let mut full = vec!["--data-dir", s(&store)];
                full.extend(args);
                full.push("--csv");
                reports.push(ok_stdout(&radfleet(&full), "report")?);
            }
            let csv_bytes = std::fs::read(&csv).map_err(|e| e.to_string())?;
            runs.push((tree(&store)?, csv_bytes, reports, summary));
        }
        let (a, b) = (&runs[0], &runs[1]);
        ensure!(!a.0.is_empty(), "{file}: empty store");
        ensure!(a.0.keys().eq(b.0.keys()), "{file}: store file lists differ");
        for (path, bytes) in &a.0 {
            ensure!(&b.0[path] == bytes, "{file}: {} differs between runs", path.display());
        }
        ensure!(a.1 == b.1, "{file}: --out CSV differs");
        ensure!(a.2 == b.2, "{file}: report CSVs differ");
        ensure!(a.3 == b.3, "{file}: summaries differ");
        compared += a.0.len();
    }
    Ok(format!("2 scenarios run twice: {compared} store files, CSVs and reports byte-identical"))
}

fn main() {
    // Cargo passes libtest flags; this target has no filters.
    let criteria: [(&str, fn() -> Check); 9] = [
        ("month reconstruction", month_reconstruction),
        ("store-and-forward", store_and_forward),
        ("buffer arithmetic", buffer_arithmetic),
        ("codec suite", codec_suite),
        ("geofence suite", geofence_suite),
        ("nearest vehicle", nearest_suite),
        ("power model", power_endurance),
        ("crash safety", crash_safety),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
