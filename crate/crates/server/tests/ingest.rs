use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use radfleet_core::wire::{
    encode_frame, encode_login, flags, Ack, Command, Downlink, EventCode, Imei, StreamDecoder, TelemetryRecord,
    TextMessage, Uplink, DIN_IGNITION,
};
use radfleet_server::{
    handle_datagram, Channel, CommandStatus, Connection, DeviceSeed, FleetServer, ManualClock, MissionInput, OpenMode,
    ServerConfig, ServerError, StreamEvent, Transport,
};
use tempfile::TempDir;

const IMEI_A: &str = "356938035643809";
const IMEI_B: &str = "490154203237518";
const IMEI_OFF: &str = "351756051523999";
const IMEI_UNKNOWN: &str = "012345678901237";
const T0: u64 = 1_725_200_000_000;

fn imei(s: &str) -> Imei {
    s.parse().unwrap()
}

fn seed(imei: &str, label: &str, enabled: bool) -> DeviceSeed {
    DeviceSeed {
        imei: imei.into(),
        label: label.into(),
        class: Some("truck".into()),
        tank_capacity_l: None,
        speed_limit_kmh: None,
        enabled,
    }
}

fn config(dir: &TempDir) -> ServerConfig {
    ServerConfig {
        data_dir: dir.path().to_path_buf(),
        fsync: false,
        devices: vec![seed(IMEI_A, "truck-1", true), seed(IMEI_B, "truck-2", true), seed(IMEI_OFF, "old", false)],
        ..ServerConfig::default()
    }
}

fn open(dir: &TempDir) -> (Arc<FleetServer>, Arc<ManualClock>) {
    open_with(config(dir))
}

fn open_with(cfg: ServerConfig) -> (Arc<FleetServer>, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new(T0 + 3_600_000));
    (FleetServer::open(cfg, clock.clone(), OpenMode::ReadWrite).unwrap(), clock)
}

fn rec(seq: u32, ts: u64, lat: f64, lon: f64, speed_kmh: f64) -> TelemetryRecord {
    TelemetryRecord {
        timestamp_ms: ts,
        flags: flags::FIX_VALID,
        lat_e7: (lat * 1e7).round() as i32,
        lon_e7: (lon * 1e7).round() as i32,
        speed_dkmh: (speed_kmh * 10.0).round() as u16,
        digital_in: DIN_IGNITION,
        seq,
        ..Default::default()
    }
}

fn acks(bytes: &[u8]) -> Vec<Downlink> {
    let mut d = StreamDecoder::downlink();
    d.push(bytes);
    std::iter::from_fn(|| d.next_message()).map(Result::unwrap).collect()
}

fn login(server: &Arc<FleetServer>, imei_s: &str) -> (Connection, Vec<Downlink>) {
    let mut conn = Connection::new(server.clone(), Transport::Tcp);
    let out = conn.on_bytes(&encode_login(imei(imei_s)));
    (conn, acks(&out))
}

#[test]
fn login_requires_registered_enabled_device() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);

    let (conn, out) = login(&server, IMEI_A);
    assert_eq!(out, vec![Downlink::Ack(Ack::LOGIN_ACCEPT)]);
    assert!(!conn.is_closed());
    assert!(server.is_online(imei(IMEI_A)));

    for who in [IMEI_UNKNOWN, IMEI_OFF] {
        let (conn, out) = login(&server, who);
        assert_eq!(out, vec![Downlink::Ack(Ack::LOGIN_REJECT)]);
        assert!(conn.is_closed());
        assert!(!server.is_online(imei(who)));
    }
    assert_eq!(server.stats().rejected_logins, 2);

    drop(conn);
    assert!(!server.is_online(imei(IMEI_A)));
}

#[test]
fn frames_before_login_or_for_another_imei_are_refused() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let frame = encode_frame(imei(IMEI_A), &[rec(1, T0, 35.7, 51.4, 0.0)]).unwrap();

    let mut conn = Connection::new(server.clone(), Transport::Tcp);
    assert!(conn.on_bytes(&frame).is_empty());
    assert!(conn.is_closed());

    let (mut conn, _) = login(&server, IMEI_B);
    assert!(conn.on_bytes(&frame).is_empty());
    assert!(conn.is_closed());
    assert_eq!(server.record_count(), 0);
}

#[test]
fn duplicates_are_acked_but_stored_once() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let (mut conn, _) = login(&server, IMEI_A);
    let records: Vec<_> = (1..=5).map(|i| rec(i, T0 + u64::from(i) * 1000, 35.7, 51.4, 40.0)).collect();
    let frame = encode_frame(imei(IMEI_A), &records).unwrap();

    let first = conn.on_bytes(&frame);
    // Retransmission after a lost ack, split across reads.
    let mut second = conn.on_bytes(&frame[..20]);
    second.extend(conn.on_bytes(&frame[20..]));
    assert_eq!(acks(&first), vec![Downlink::Ack(Ack { accepted_count: 5 })]);
    assert_eq!(acks(&second), acks(&first));
    assert_eq!(server.record_count(), 5);
    let s = server.stats();
    assert_eq!((s.fresh, s.duplicates, s.tamper), (5, 5, 0));
}

#[test]
fn conflicting_resend_raises_tamper_alert() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let a = rec(7, T0, 35.7, 51.4, 40.0);
    let mut b = a;
    b.lat_e7 += 1000;
    server.ingest(imei(IMEI_A), &[a], Transport::Tcp).unwrap();
    server.ingest(imei(IMEI_A), &[b], Transport::Tcp).unwrap();
    assert_eq!(server.record_count(), 1);
    assert_eq!(server.query_track("truck-1", 0, u64::MAX).unwrap(), vec![a]);
    let alerts = server.alerts_since(0);
    assert_eq!(alerts.len(), 1);
    assert_eq!(alerts[0].kind, "Tamper");
}

#[test]
fn disabled_or_unknown_device_data_is_not_stored() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    for who in [IMEI_OFF, IMEI_UNKNOWN] {
        let err = server.ingest(imei(who), &[rec(1, T0, 1.0, 1.0, 0.0)], Transport::Udp).unwrap_err();
        assert!(matches!(err, ServerError::UnknownDevice(_)));
        let dg = encode_frame(imei(who), &[rec(1, T0, 1.0, 1.0, 0.0)]).unwrap();
        assert_eq!(handle_datagram(&server, &dg), None);
    }
    assert_eq!(server.record_count(), 0);
}

#[test]
fn udp_datagrams_are_acked_without_login() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let dg = encode_frame(imei(IMEI_B), &[rec(1, T0, 35.0, 51.0, 10.0), rec(2, T0 + 1000, 35.0, 51.0, 10.0)]).unwrap();
    let reply = handle_datagram(&server, &dg).unwrap();
    assert_eq!(acks(&reply), vec![Downlink::Ack(Ack { accepted_count: 2 })]);
    assert_eq!(server.stored(imei(IMEI_B))[0].transport, Transport::Udp);
    assert_eq!(handle_datagram(&server, b"garbage"), None);
}

#[test]
fn late_replay_does_not_move_latest_position_back() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let a = imei(IMEI_A);
    server.ingest(a, &[rec(10, T0 + 10_000, 36.0, 52.0, 30.0)], Transport::Tcp).unwrap();
    let mut old = rec(3, T0 + 3_000, 35.0, 51.0, 30.0);
    old.flags |= flags::BUFFERED_REPLAY;
    server.ingest(a, &[old], Transport::Tcp).unwrap();
    let mut invalid = rec(11, T0 + 11_000, 0.0, 0.0, 0.0);
    invalid.flags = 0;
    server.ingest(a, &[invalid], Transport::Tcp).unwrap();
    assert_eq!(server.latest_record(a).unwrap().seq, 10);

    let view = server.latest_positions();
    let truck = view.iter().find(|v| v.label == "truck-1").unwrap();
    assert_eq!(truck.last.as_ref().unwrap().lat, 36.0);
    assert_eq!(truck.age_s, Some(3590.0));
    assert!(!view.iter().any(|v| v.label == "old"));
}

fn arb_batches() -> impl Strategy<Value = Vec<Vec<u32>>> {
    // Seq reuse across batches models retransmission.
    prop::collection::vec(prop::collection::vec(0u32..60, 1..12), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// Any interleaving of retransmissions stores each seq once, keeps the cache on the
    /// newest valid fix and answers track queries like a brute-force filter.
    #[test]
    fn store_cache_and_query_match_model(batches in arb_batches(), from in 0u64..5000, len in 0u64..5000) {
        let dir = TempDir::new().unwrap();
        let (server, _) = open(&dir);
        let a = imei(IMEI_A);
        // The device derives record content from seq, so a resend is byte-identical.
        let make = |seq: u32| {
            let mut r = rec(seq, T0 + (u64::from(seq) * 7919 % 5000) * 1000, 35.0 + f64::from(seq) * 1e-3, 51.0, 20.0);
            if seq % 5 == 0 { r.flags = 0; }
            r
        };
        let mut model: BTreeMap<u32, TelemetryRecord> = BTreeMap::new();
        for batch in &batches {
            let records: Vec<_> = batch.iter().map(|&s| make(s)).collect();
            let ack = server.ingest(a, &records, Transport::Tcp).unwrap();
            prop_assert_eq!(usize::from(ack.accepted_count), records.len());
            for r in records { model.entry(r.seq).or_insert(r); }
        }
        prop_assert_eq!(server.record_count(), model.len());
        prop_assert_eq!(server.stats().tamper, 0);

        let expect_latest = model.values().filter(|r| r.fix_valid()).max_by_key(|r| (r.timestamp_ms, r.seq)).copied();
        prop_assert_eq!(server.latest_record(a), expect_latest);

        let (lo, hi) = (T0 + from * 1000, T0 + (from + len) * 1000);
        let mut brute: Vec<_> = model.values().filter(|r| r.timestamp_ms >= lo && r.timestamp_ms < hi).copied().collect();
        brute.sort_by_key(|r| (r.timestamp_ms, r.seq));
        prop_assert_eq!(server.query_track("truck-1", lo, hi).unwrap(), brute);

        // Reopening rebuilds the same state from disk.
        drop(server);
        let (server, _) = open(&dir);
        prop_assert_eq!(server.record_count(), model.len());
        prop_assert_eq!(server.latest_record(a), expect_latest);
    }
}

#[test]
fn torn_log_and_lost_index_recover_on_open() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let records: Vec<_> = (1..=10).map(|i| rec(i, T0 + u64::from(i) * 1000, 35.0, 51.0, 10.0)).collect();
    server.ingest(imei(IMEI_A), &records, Transport::Tcp).unwrap();
    drop(server);

    let log = dir.path().join(format!("records/{IMEI_A}.log"));
    let idx = dir.path().join(format!("records/{IMEI_A}.idx"));
    let mut bytes = std::fs::read(&log).unwrap();
    bytes.extend_from_slice(&records[0].encode()[..30]);
    std::fs::write(&log, bytes).unwrap();
    std::fs::remove_file(&idx).unwrap();

    let (server, _) = open(&dir);
    assert_eq!(server.record_count(), 10);
    assert_eq!(std::fs::metadata(&log).unwrap().len(), 640);
    assert_eq!(std::fs::metadata(&idx).unwrap().len(), 240);
    server.ingest(imei(IMEI_A), &records, Transport::Tcp).unwrap();
    assert_eq!(server.record_count(), 10);
}

#[test]
fn read_only_open_leaves_files_untouched() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    server.ingest(imei(IMEI_A), &[rec(1, T0, 35.0, 51.0, 10.0)], Transport::Tcp).unwrap();
    drop(server);
    let log = dir.path().join(format!("records/{IMEI_A}.log"));
    let mut bytes = std::fs::read(&log).unwrap();
    bytes.extend_from_slice(&[0xAB; 10]);
    std::fs::write(&log, &bytes).unwrap();

    let clock = Arc::new(ManualClock::new(T0));
    let ro = FleetServer::open(config(&dir), clock, OpenMode::ReadOnly).unwrap();
    assert_eq!(ro.record_count(), 1);
    assert_eq!(std::fs::read(&log).unwrap(), bytes);
    assert!(ro.send_command("truck-1", &Command::GetGps).is_err());
}

#[test]
fn command_over_live_session_is_acked() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let (mut conn, _) = login(&server, IMEI_A);
    let mut sub = server.subscribe(None);

    let c = server.send_command("truck-1", &Command::Out { line: 0, on: true }).unwrap();
    assert_eq!((c.status, c.channel), (CommandStatus::Delivered, Some(Channel::Gprs)));
    let wire = acks(&conn.poll_commands());
    assert_eq!(wire, vec![Downlink::Command(TextMessage { id: c.id, text: "OUT 0 1".into() })]);

    let reply = Uplink::CommandReply(TextMessage { id: c.id, text: "OUT0=1".into() }).encode().unwrap();
    conn.on_bytes(&reply);
    let done = server.command(c.id).unwrap();
    assert_eq!(done.status, CommandStatus::Acked);
    assert_eq!(done.reply.as_deref(), Some("OUT0=1"));

    let statuses: Vec<_> = std::iter::from_fn(|| sub.try_next())
        .filter_map(|e| match e {
            StreamEvent::Command(c) => Some(c.status),
            _ => None,
        })
        .collect();
    assert_eq!(statuses, vec![CommandStatus::Queued, CommandStatus::Delivered, CommandStatus::Acked]);

    // The audit log replays to the same state.
    drop(conn);
    drop(server);
    let (server, _) = open(&dir);
    assert_eq!(server.command(c.id).unwrap().status, CommandStatus::Acked);
    let audit = std::fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 3);
}

#[test]
fn offline_commands_fall_back_to_sms() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let c = server.send_command("truck-2", &Command::GetGps).unwrap();
    assert_eq!((c.status, c.channel), (CommandStatus::Delivered, Some(Channel::Sms)));
    let outbox = server.take_sms_outbox();
    assert_eq!(outbox.len(), 1);
    assert_eq!((outbox[0].imei, outbox[0].text.as_str()), (imei(IMEI_B), "GETGPS"));
    assert!(server.take_sms_outbox().is_empty());

    server.on_sms(imei(IMEI_B), "GPS 35.7,51.4");
    assert_eq!(server.command(c.id).unwrap().status, CommandStatus::Acked);
}

#[test]
fn offline_without_sms_has_no_route() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open_with(ServerConfig {
        sms_simulation: false,
        ..config(&dir)
    });
    let err = server.send_command("truck-2", &Command::GetGps).unwrap_err();
    assert!(matches!(err, ServerError::NoRoute(_)));
    assert!(server.commands().is_empty());
    assert!(matches!(server.send_command("nobody", &Command::GetGps), Err(ServerError::UnknownDevice(_))));
}

#[tokio::test]
async fn session_command_channel_wakes_async_reader() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let (mut conn, _) = login(&server, IMEI_A);
    server.send_command(IMEI_A, &Command::GetGps).unwrap();
    let bytes = tokio::time::timeout(std::time::Duration::from_secs(2), conn.next_command()).await.unwrap();
    assert!(matches!(acks(&bytes)[..], [Downlink::Command(_)]));
}

#[test]
fn subscribers_get_filtered_events_and_slow_ones_are_dropped() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open_with(ServerConfig {
        subscriber_backlog: 3,
        ..config(&dir)
    });
    let mut all = server.subscribe(None);
    let mut only_b = server.subscribe(Some(imei(IMEI_B)));

    let mut panic = rec(1, T0, 35.0, 51.0, 0.0);
    panic.event = EventCode::Panic.into();
    server.ingest(imei(IMEI_A), &[panic], Transport::Tcp).unwrap();
    server.ingest(imei(IMEI_B), &[rec(1, T0, 35.0, 51.0, 0.0)], Transport::Tcp).unwrap();

    let got: Vec<_> = std::iter::from_fn(|| all.try_next()).collect();
    assert!(matches!(got[..], [StreamEvent::Position(_), StreamEvent::Alert(_), StreamEvent::Position(_)]));
    let got: Vec<_> = std::iter::from_fn(|| only_b.try_next()).collect();
    assert!(matches!(&got[..], [StreamEvent::Position(p)] if p.imei == IMEI_B));

    // `only_b` stops reading; four more events overflow its backlog of three.
    let mut seen_by_all = 0;
    for i in 2..=5 {
        server.ingest(imei(IMEI_B), &[rec(i, T0 + u64::from(i), 35.0, 51.0, 0.0)], Transport::Tcp).unwrap();
        seen_by_all += std::iter::from_fn(|| all.try_next()).count();
    }
    assert_eq!(seen_by_all, 4);
    assert_eq!(server.subscriber_count(), 1);
    let got: Vec<_> = std::iter::from_fn(|| only_b.try_next()).collect();
    assert_eq!(got.len(), 4);
    assert!(matches!(got.last(), Some(StreamEvent::Disconnected { .. })));
    assert!(only_b.try_next().is_none());
    // The reader that kept up still receives everything.
    server.ingest(imei(IMEI_B), &[rec(6, T0 + 6, 35.0, 51.0, 0.0)], Transport::Tcp).unwrap();
    assert_eq!(std::iter::from_fn(|| all.try_next()).count(), 1);
}

#[test]
fn alert_history_survives_restart() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let mut r = rec(1, T0, 35.0, 51.0, 120.0);
    r.event = EventCode::Overspeed.into();
    server.ingest(imei(IMEI_A), &[r, rec(2, T0 + 1000, 35.0, 51.0, 80.0)], Transport::Tcp).unwrap();
    let before = server.alerts_since(0);
    assert_eq!(before.len(), 1);
    assert_eq!(before[0].kind, EventCode::Overspeed.name());
    drop(server);
    let (server, _) = open(&dir);
    assert_eq!(server.alerts_since(0), before);
    assert!(server.alerts_since(1).is_empty());
}

#[test]
fn device_image_replay_dedups_against_live_data() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let records: Vec<_> = (1..=600).map(|i| rec(i, T0 + u64::from(i) * 1000, 35.0, 51.0, 10.0)).collect();
    server.ingest(imei(IMEI_A), &records[..100], Transport::Tcp).unwrap();
    let image: Vec<u8> = records.iter().flat_map(|r| r.encode()).collect();
    let summary = server.ingest_image("truck-1", &image).unwrap();
    assert_eq!((summary.records, summary.fresh, summary.duplicates), (600, 500, 100));
    assert_eq!(server.stored(imei(IMEI_A))[599].transport, Transport::Usb);
    assert!(server.ingest_image("truck-1", &image[..100]).is_err());
}

#[test]
fn registry_changes_persist() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let e = server.set_enabled("truck-2", false).unwrap();
    assert!(!e.enabled);
    assert!(!server.login(imei(IMEI_B)));
    let dup = server.add_device(radfleet_server::DeviceEntry {
        imei: "353456789012348".into(),
        label: "truck-1".into(),
        enabled: true,
        class: None,
        tank_capacity_l: None,
        speed_limit_kmh: None,
        created_at_ms: 0,
    });
    assert!(matches!(dup, Err(ServerError::DuplicateDevice(_))));
    drop(server);
    // The config seed does not re-enable a device that already exists.
    let (server, _) = open(&dir);
    assert!(!server.resolve(IMEI_B).unwrap().enabled);
}

#[test]
fn missions_persist_and_reject_overlap() {
    let dir = TempDir::new().unwrap();
    let (server, _) = open(&dir);
    let input = |start: u64, end: u64| MissionInput {
        id: None,
        vehicle: "truck-1".into(),
        driver: "Sara".into(),
        purpose: "delivery".into(),
        start_ms: start,
        end_ms: end,
    };
    let m = server.add_mission(input(T0, T0 + 3_600_000)).unwrap();
    assert_eq!(m.id, "M0001");
    assert!(server.add_mission(input(T0 + 1_800_000, T0 + 7_200_000)).is_err());
    server.add_mission(input(T0 + 3_600_000, T0 + 7_200_000)).unwrap();
    drop(server);
    let (server, _) = open(&dir);
    assert_eq!(server.missions().len(), 2);
}
