//! Binary tracker protocol and SMS text grammar.
//!
//! Every multi-byte integer is big-endian. One 64-byte record codec is shared by the tracker's
//! flash buffer, the transport frames and the server's on-disk logs.
//!
//! Uplink (tracker to server):
//!
//! ```text
//! data frame      "R1" | version u8 | imei u64 | count u16 | count x 64-byte record | crc16
//! command reply   "K1" | command id u32 | len u8 | ASCII text | crc16
//! ```
//!
//! Downlink (server to tracker):
//!
//! ```text
//! ack             "A1" | accepted u16
//! command         "C1" | command id u32 | len u8 | ASCII text | crc16
//! ```
//!
//! CRCs are CRC-16/CCITT-FALSE over everything between the magic and the CRC itself. A data
//! frame with zero records is a login.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat};
use crc::{Crc, CRC_16_IBM_3740};
use thiserror::Error;

pub const RECORD_LEN: usize = 64;
pub const FRAME_MAGIC: [u8; 2] = *b"R1";
pub const ACK_MAGIC: [u8; 2] = *b"A1";
pub const COMMAND_MAGIC: [u8; 2] = *b"C1";
pub const REPLY_MAGIC: [u8; 2] = *b"K1";
pub const PROTOCOL_VERSION: u8 = 0x01;
/// Sender-side batching cap.
pub const MAX_RECORDS_PER_FRAME: usize = 255;
/// magic + version + imei + count
pub const FRAME_HEADER_LEN: usize = 13;
pub const FRAME_OVERHEAD: usize = FRAME_HEADER_LEN + 2;
pub const ACK_LEN: usize = 4;
pub const SMS_MAX_LEN: usize = 160;

pub const DEFAULT_TCP_PORT: u16 = 5027;
pub const DEFAULT_UDP_PORT: u16 = 5028;
pub const RETRANSMIT_TIMEOUT_MS: u64 = 5_000;
pub const MAX_SEND_ATTEMPTS: u32 = 5;

const CCITT_FALSE: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final XOR.
pub fn crc16(bytes: &[u8]) -> u16 {
    CCITT_FALSE.checksum(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("record is {0} bytes, expected 64")]
    WrongLength(usize),
    #[error("reserved bytes are not zero")]
    NonZeroReserved,
    #[error("invalid {0} field")]
    BadField(&'static str),
    #[error("{0} out of range")]
    OutOfRange(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("crc mismatch: computed {computed:04X}, frame says {declared:04X}")]
    BadCrc { computed: u16, declared: u16 },
    #[error("need {0} more bytes")]
    NeedMoreBytes(usize),
    #[error("{0} records exceed the per-frame cap")]
    TooManyRecords(usize),
    #[error("invalid IMEI")]
    BadImei,
    #[error("text payload is not ASCII or exceeds 160 bytes")]
    BadText,
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// 15-digit device identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Imei(u64);

impl Imei {
    pub const MAX: u64 = 999_999_999_999_999;

    pub fn new(value: u64) -> Result<Self, FrameError> {
        if value > Self::MAX {
            return Err(FrameError::BadImei);
        }
        Ok(Imei(value))
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Imei {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:015}", self.0)
    }
}

impl FromStr for Imei {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() || s.len() > 15 || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(FrameError::BadImei);
        }
        Imei::new(s.parse().map_err(|_| FrameError::BadImei)?)
    }
}

/// Why a record was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum EventCode {
    Periodic = 0,
    DistanceTrig = 1,
    AngleTrig = 2,
    IgnitionOn = 3,
    IgnitionOff = 4,
    Overspeed = 5,
    Panic = 6,
    Towing = 7,
    GeofenceEnter = 8,
    GeofenceExit = 9,
    HarshAccel = 10,
    HarshBrake = 11,
    HarshCorner = 12,
    JammingDetected = 13,
    IoChange = 14,
    UnauthorizedDriver = 15,
    PowerCutoff = 16,
}

impl EventCode {
    pub const ALL: [EventCode; 17] = [
        EventCode::Periodic,
        EventCode::DistanceTrig,
        EventCode::AngleTrig,
        EventCode::IgnitionOn,
        EventCode::IgnitionOff,
        EventCode::Overspeed,
        EventCode::Panic,
        EventCode::Towing,
        EventCode::GeofenceEnter,
        EventCode::GeofenceExit,
        EventCode::HarshAccel,
        EventCode::HarshBrake,
        EventCode::HarshCorner,
        EventCode::JammingDetected,
        EventCode::IoChange,
        EventCode::UnauthorizedDriver,
        EventCode::PowerCutoff,
    ];

    /// Alert-class events set the record's priority flag.
    pub fn is_alert(self) -> bool {
        matches!(
            self,
            EventCode::Panic
                | EventCode::Overspeed
                | EventCode::Towing
                | EventCode::JammingDetected
                | EventCode::GeofenceEnter
                | EventCode::GeofenceExit
                | EventCode::UnauthorizedDriver
        )
    }

    pub fn is_eco(self) -> bool {
        matches!(
            self,
            EventCode::HarshAccel | EventCode::HarshBrake | EventCode::HarshCorner
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            EventCode::Periodic => "Periodic",
            EventCode::DistanceTrig => "DistanceTrig",
            EventCode::AngleTrig => "AngleTrig",
            EventCode::IgnitionOn => "IgnitionOn",
            EventCode::IgnitionOff => "IgnitionOff",
            EventCode::Overspeed => "Overspeed",
            EventCode::Panic => "Panic",
            EventCode::Towing => "Towing",
            EventCode::GeofenceEnter => "GeofenceEnter",
            EventCode::GeofenceExit => "GeofenceExit",
            EventCode::HarshAccel => "HarshAccel",
            EventCode::HarshBrake => "HarshBrake",
            EventCode::HarshCorner => "HarshCorner",
            EventCode::JammingDetected => "JammingDetected",
            EventCode::IoChange => "IoChange",
            EventCode::UnauthorizedDriver => "UnauthorizedDriver",
            EventCode::PowerCutoff => "PowerCutoff",
        }
    }
}

impl TryFrom<u8> for EventCode {
    type Error = RecordError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        EventCode::ALL
            .get(usize::from(v))
            .copied()
            .ok_or(RecordError::BadField("event_code"))
    }
}

impl fmt::Display for EventCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventCode {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventCode::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or(RecordError::BadField("event_code"))
    }
}

pub mod flags {
    pub const PRIORITY: u8 = 0x01;
    /// Sent after sitting in the buffer through a failed or unavailable transmission.
    pub const BUFFERED_REPLAY: u8 = 0x02;
    /// The position came from a valid GNSS fix.
    pub const FIX_VALID: u8 = 0x04;
}

/// `digital_in` bit carrying the dedicated ignition input; bits 0..=3 are the four general inputs.
pub const DIN_IGNITION: u8 = 0x80;

/// One telemetry record in its fixed-point wire representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TelemetryRecord {
    pub timestamp_ms: u64,
    pub flags: u8,
    /// degrees x 1e7
    pub lat_e7: i32,
    /// degrees x 1e7
    pub lon_e7: i32,
    pub altitude_m: i16,
    /// 0..=3599
    pub heading_dd: u16,
    /// km/h x 10
    pub speed_dkmh: u16,
    pub satellites: u8,
    /// HDOP x 10
    pub hdop_d: u8,
    pub event: EventCodeByte,
    pub digital_in: u8,
    pub digital_out: u8,
    pub analog1_mv: u16,
    pub analog2_mv: u16,
    /// percent x 10
    pub fuel_level_dpct: u16,
    /// L/h x 10
    pub fuel_rate_dlh: u16,
    pub odometer_m: u32,
    pub battery_mv: u16,
    pub accel_mg: [i16; 3],
    /// 0 = none
    pub geofence_id: u16,
    pub seq: u32,
}

/// Event code stored as a validated byte so `TelemetryRecord` stays `Default`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventCodeByte(EventCode);

impl Default for EventCodeByte {
    fn default() -> Self {
        EventCodeByte(EventCode::Periodic)
    }
}

impl From<EventCode> for EventCodeByte {
    fn from(e: EventCode) -> Self {
        EventCodeByte(e)
    }
}

impl EventCodeByte {
    pub fn get(self) -> EventCode {
        self.0
    }
}

/// Engineering-unit values a record is built from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RecordValues {
    pub timestamp_ms: u64,
    pub priority: bool,
    pub fix_valid: bool,
    pub lat: f64,
    pub lon: f64,
    pub altitude_m: f64,
    pub heading_deg: f64,
    pub speed_kmh: f64,
    pub satellites: u8,
    pub hdop: f64,
    pub event: Option<EventCode>,
    pub digital_in: u8,
    pub digital_out: u8,
    pub analog_mv: [u16; 2],
    pub fuel_level_pct: f64,
    pub fuel_rate_lh: f64,
    pub odometer_m: f64,
    pub battery_mv: u16,
    pub accel_mg: [i16; 3],
    pub geofence_id: u16,
    pub seq: u32,
}

fn fixed<T: TryFrom<i64>>(value: f64, scale: f64, field: &'static str) -> Result<T, RecordError> {
    let scaled = (value * scale).round();
    if !scaled.is_finite() {
        return Err(RecordError::OutOfRange(field));
    }
    T::try_from(scaled as i64).map_err(|_| RecordError::OutOfRange(field))
}

impl TelemetryRecord {
    /// Build a record from engineering units, rejecting anything that does not fit the layout.
    pub fn from_values(v: &RecordValues) -> Result<Self, RecordError> {
        if !(-90.0..=90.0).contains(&v.lat) {
            return Err(RecordError::OutOfRange("lat"));
        }
        if !(-180.0..=180.0).contains(&v.lon) {
            return Err(RecordError::OutOfRange("lon"));
        }
        if !(0.0..360.0).contains(&v.heading_deg) {
            return Err(RecordError::OutOfRange("heading"));
        }
        let event = v.event.unwrap_or(EventCode::Periodic);
        let mut flags = 0;
        if v.priority || event.is_alert() {
            flags |= flags::PRIORITY;
        }
        if v.fix_valid {
            flags |= flags::FIX_VALID;
        }
        Ok(TelemetryRecord {
            timestamp_ms: v.timestamp_ms,
            flags,
            lat_e7: fixed(v.lat, 1e7, "lat")?,
            lon_e7: fixed(v.lon, 1e7, "lon")?,
            altitude_m: fixed(v.altitude_m, 1.0, "altitude")?,
            heading_dd: fixed::<u16>(v.heading_deg, 10.0, "heading")? % 3600,
            speed_dkmh: fixed(v.speed_kmh, 10.0, "speed")?,
            satellites: v.satellites,
            hdop_d: fixed(v.hdop.min(25.5), 10.0, "hdop")?,
            event: event.into(),
            digital_in: v.digital_in,
            digital_out: v.digital_out,
            analog1_mv: v.analog_mv[0],
            analog2_mv: v.analog_mv[1],
            fuel_level_dpct: fixed(v.fuel_level_pct, 10.0, "fuel_level")?,
            fuel_rate_dlh: fixed(v.fuel_rate_lh, 10.0, "fuel_rate")?,
            odometer_m: fixed(v.odometer_m, 1.0, "odometer")?,
            battery_mv: v.battery_mv,
            accel_mg: v.accel_mg,
            geofence_id: v.geofence_id,
            seq: v.seq,
        })
    }

    pub fn event_code(&self) -> EventCode {
        self.event.get()
    }

    pub fn lat(&self) -> f64 {
        f64::from(self.lat_e7) / 1e7
    }

    pub fn lon(&self) -> f64 {
        f64::from(self.lon_e7) / 1e7
    }

    pub fn speed_kmh(&self) -> f64 {
        f64::from(self.speed_dkmh) / 10.0
    }

    pub fn heading_deg(&self) -> f64 {
        f64::from(self.heading_dd) / 10.0
    }

    pub fn hdop(&self) -> f64 {
        f64::from(self.hdop_d) / 10.0
    }

    pub fn fuel_level_pct(&self) -> f64 {
        f64::from(self.fuel_level_dpct) / 10.0
    }

    pub fn fuel_rate_lh(&self) -> f64 {
        f64::from(self.fuel_rate_dlh) / 10.0
    }

    pub fn is_priority(&self) -> bool {
        self.flags & flags::PRIORITY != 0
    }

    pub fn is_replay(&self) -> bool {
        self.flags & flags::BUFFERED_REPLAY != 0
    }

    pub fn fix_valid(&self) -> bool {
        self.flags & flags::FIX_VALID != 0
    }

    pub fn ignition(&self) -> bool {
        self.digital_in & DIN_IGNITION != 0
    }

    pub fn encode(&self) -> [u8; RECORD_LEN] {
        let mut out = [0u8; RECORD_LEN];
        let mut w = Writer::new(&mut out);
        w.put(&self.timestamp_ms.to_be_bytes());
        w.put(&[self.flags]);
        w.put(&self.lat_e7.to_be_bytes());
        w.put(&self.lon_e7.to_be_bytes());
        w.put(&self.altitude_m.to_be_bytes());
        w.put(&self.heading_dd.to_be_bytes());
        w.put(&self.speed_dkmh.to_be_bytes());
        w.put(&[self.satellites, self.hdop_d, self.event.get() as u8]);
        w.put(&[self.digital_in, self.digital_out]);
        w.put(&self.analog1_mv.to_be_bytes());
        w.put(&self.analog2_mv.to_be_bytes());
        w.put(&self.fuel_level_dpct.to_be_bytes());
        w.put(&self.fuel_rate_dlh.to_be_bytes());
        w.put(&self.odometer_m.to_be_bytes());
        w.put(&self.battery_mv.to_be_bytes());
        for a in self.accel_mg {
            w.put(&a.to_be_bytes());
        }
        w.put(&self.geofence_id.to_be_bytes());
        w.put(&self.seq.to_be_bytes());
        debug_assert_eq!(w.pos, RECORD_LEN - 10);
        out
    }

    /// Decode, tolerating non-zero reserved bytes (logged at warn level).
    pub fn decode(bytes: &[u8]) -> Result<Self, RecordError> {
        match Self::decode_strict(bytes) {
            Err(RecordError::NonZeroReserved) => {
                log::warn!("record carries non-zero reserved bytes; ignoring them");
                Self::decode_fields(bytes)
            }
            other => other,
        }
    }

    /// Decode, rejecting non-zero reserved bytes.
    pub fn decode_strict(bytes: &[u8]) -> Result<Self, RecordError> {
        let record = Self::decode_fields(bytes)?;
        if bytes[54..].iter().any(|&b| b != 0) {
            return Err(RecordError::NonZeroReserved);
        }
        Ok(record)
    }

    fn decode_fields(bytes: &[u8]) -> Result<Self, RecordError> {
        if bytes.len() != RECORD_LEN {
            return Err(RecordError::WrongLength(bytes.len()));
        }
        let mut r = Reader::new(bytes);
        let record = TelemetryRecord {
            timestamp_ms: u64::from_be_bytes(r.take()),
            flags: r.u8(),
            lat_e7: i32::from_be_bytes(r.take()),
            lon_e7: i32::from_be_bytes(r.take()),
            altitude_m: i16::from_be_bytes(r.take()),
            heading_dd: u16::from_be_bytes(r.take()),
            speed_dkmh: u16::from_be_bytes(r.take()),
            satellites: r.u8(),
            hdop_d: r.u8(),
            event: EventCode::try_from(r.u8())?.into(),
            digital_in: r.u8(),
            digital_out: r.u8(),
            analog1_mv: u16::from_be_bytes(r.take()),
            analog2_mv: u16::from_be_bytes(r.take()),
            fuel_level_dpct: u16::from_be_bytes(r.take()),
            fuel_rate_dlh: u16::from_be_bytes(r.take()),
            odometer_m: u32::from_be_bytes(r.take()),
            battery_mv: u16::from_be_bytes(r.take()),
            accel_mg: [
                i16::from_be_bytes(r.take()),
                i16::from_be_bytes(r.take()),
                i16::from_be_bytes(r.take()),
            ],
            geofence_id: u16::from_be_bytes(r.take()),
            seq: u32::from_be_bytes(r.take()),
        };
        if !(-900_000_000..=900_000_000).contains(&record.lat_e7) {
            return Err(RecordError::BadField("lat"));
        }
        if !(-1_800_000_000..=1_800_000_000).contains(&record.lon_e7) {
            return Err(RecordError::BadField("lon"));
        }
        if record.heading_dd > 3599 {
            return Err(RecordError::BadField("heading"));
        }
        Ok(record)
    }
}

struct Writer<'a> {
    buf: &'a mut [u8],
    pos: usize,
}

impl<'a> Writer<'a> {
    fn new(buf: &'a mut [u8]) -> Self {
        Writer { buf, pos: 0 }
    }

    fn put(&mut self, bytes: &[u8]) {
        self.buf[self.pos..self.pos + bytes.len()].copy_from_slice(bytes);
        self.pos += bytes.len();
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
}

/// A decoded data frame. Zero records means login.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub imei: Imei,
    pub records: Vec<TelemetryRecord>,
}

impl Frame {
    pub fn is_login(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn encode_frame(imei: Imei, records: &[TelemetryRecord]) -> Result<Vec<u8>, FrameError> {
    if records.len() > MAX_RECORDS_PER_FRAME {
        return Err(FrameError::TooManyRecords(records.len()));
    }
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + records.len() * RECORD_LEN);
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(PROTOCOL_VERSION);
    out.extend_from_slice(&imei.value().to_be_bytes());
    out.extend_from_slice(&(records.len() as u16).to_be_bytes());
    for r in records {
        out.extend_from_slice(&r.encode());
    }
    let crc = crc16(&out[2..]);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Login frame: a data frame with no records.
pub fn encode_login(imei: Imei) -> Vec<u8> {
    encode_frame(imei, &[]).expect("empty frame is within the cap")
}

fn check_magic(bytes: &[u8], magic: [u8; 2]) -> Result<(), FrameError> {
    let n = bytes.len().min(2);
    if bytes[..n] != magic[..n] {
        return Err(FrameError::BadMagic);
    }
    if n < 2 {
        return Err(FrameError::NeedMoreBytes(2 - n));
    }
    Ok(())
}

/// Decode one data frame from the front of `bytes`, returning it with the number of bytes
/// consumed. The CRC is verified before any record is interpreted, and nothing past the
/// declared length is read.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    check_magic(bytes, FRAME_MAGIC)?;
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(FrameError::NeedMoreBytes(FRAME_HEADER_LEN - bytes.len()));
    }
    let count = usize::from(u16::from_be_bytes([bytes[11], bytes[12]]));
    if count > MAX_RECORDS_PER_FRAME {
        return Err(FrameError::TooManyRecords(count));
    }
    let total = FRAME_OVERHEAD + count * RECORD_LEN;
    if bytes.len() < total {
        return Err(FrameError::NeedMoreBytes(total - bytes.len()));
    }
    let computed = crc16(&bytes[2..total - 2]);
    let declared = u16::from_be_bytes([bytes[total - 2], bytes[total - 1]]);
    if computed != declared {
        return Err(FrameError::BadCrc { computed, declared });
    }
    // The version byte is CRC-protected, so it is only trusted once the CRC checks out.
    if bytes[2] != PROTOCOL_VERSION {
        return Err(FrameError::BadVersion(bytes[2]));
    }
    let imei = Imei::new(u64::from_be_bytes(bytes[3..11].try_into().expect("8 bytes")))?;
    let records = bytes[FRAME_HEADER_LEN..total - 2]
        .chunks_exact(RECORD_LEN)
        .map(TelemetryRecord::decode)
        .collect::<Result<_, _>>()?;
    Ok((Frame { imei, records }, total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub accepted_count: u16,
}

impl Ack {
    pub const LOGIN_ACCEPT: Ack = Ack { accepted_count: 1 };
    pub const LOGIN_REJECT: Ack = Ack { accepted_count: 0 };

    pub fn encode(&self) -> [u8; ACK_LEN] {
        let c = self.accepted_count.to_be_bytes();
        [ACK_MAGIC[0], ACK_MAGIC[1], c[0], c[1]]
    }

    pub fn decode(bytes: &[u8]) -> Result<(Ack, usize), FrameError> {
        check_magic(bytes, ACK_MAGIC)?;
        if bytes.len() < ACK_LEN {
            return Err(FrameError::NeedMoreBytes(ACK_LEN - bytes.len()));
        }
        Ok((
            Ack {
                accepted_count: u16::from_be_bytes([bytes[2], bytes[3]]),
            },
            ACK_LEN,
        ))
    }
}

/// Text message carried over an established session, either a command (downlink) or a
/// command reply (uplink). `id` pairs replies with commands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextMessage {
    pub id: u32,
    pub text: String,
}

impl TextMessage {
    fn encode(&self, magic: [u8; 2]) -> Result<Vec<u8>, FrameError> {
        if !self.text.is_ascii() || self.text.len() > SMS_MAX_LEN {
            return Err(FrameError::BadText);
        }
        let mut out = Vec::with_capacity(9 + self.text.len());
        out.extend_from_slice(&magic);
        out.extend_from_slice(&self.id.to_be_bytes());
        out.push(self.text.len() as u8);
        out.extend_from_slice(self.text.as_bytes());
        let crc = crc16(&out[2..]);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(out)
    }

    fn decode(bytes: &[u8], magic: [u8; 2]) -> Result<(TextMessage, usize), FrameError> {
        check_magic(bytes, magic)?;
        if bytes.len() < 7 {
            return Err(FrameError::NeedMoreBytes(7 - bytes.len()));
        }
        let len = usize::from(bytes[6]);
        if len > SMS_MAX_LEN {
            return Err(FrameError::BadText);
        }
        let total = 7 + len + 2;
        if bytes.len() < total {
            return Err(FrameError::NeedMoreBytes(total - bytes.len()));
        }
        let computed = crc16(&bytes[2..total - 2]);
        let declared = u16::from_be_bytes([bytes[total - 2], bytes[total - 1]]);
        if computed != declared {
            return Err(FrameError::BadCrc { computed, declared });
        }
        let text = &bytes[7..7 + len];
        if !text.is_ascii() {
            return Err(FrameError::BadText);
        }
        let id = u32::from_be_bytes(bytes[2..6].try_into().expect("4 bytes"));
        let text = String::from_utf8(text.to_vec()).map_err(|_| FrameError::BadText)?;
        Ok((TextMessage { id, text }, total))
    }
}

/// Tracker-to-server message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Uplink {
    Frame(Frame),
    CommandReply(TextMessage),
}

impl Uplink {
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        match self {
            Uplink::Frame(f) => encode_frame(f.imei, &f.records),
            Uplink::CommandReply(m) => m.encode(REPLY_MAGIC),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<(Uplink, usize), FrameError> {
        match bytes.first() {
            None => Err(FrameError::NeedMoreBytes(2)),
            Some(&b'R') => decode_frame(bytes).map(|(f, n)| (Uplink::Frame(f), n)),
            Some(&b'K') => {
                TextMessage::decode(bytes, REPLY_MAGIC).map(|(m, n)| (Uplink::CommandReply(m), n))
            }
            Some(_) => Err(FrameError::BadMagic),
        }
    }
}

/// Server-to-tracker message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Downlink {
    Ack(Ack),
    Command(TextMessage),
}

impl Downlink {
    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        match self {
            Downlink::Ack(a) => Ok(a.encode().to_vec()),
            Downlink::Command(m) => m.encode(COMMAND_MAGIC),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<(Downlink, usize), FrameError> {
        match bytes.first() {
            None => Err(FrameError::NeedMoreBytes(2)),
            Some(&b'A') => Ack::decode(bytes).map(|(a, n)| (Downlink::Ack(a), n)),
            Some(&b'C') => {
                TextMessage::decode(bytes, COMMAND_MAGIC).map(|(m, n)| (Downlink::Command(m), n))
            }
            Some(_) => Err(FrameError::BadMagic),
        }
    }
}

/// Reassembles messages from an arbitrarily chunked byte stream (TCP).
#[derive(Debug)]
pub struct StreamDecoder<T> {
    buf: Vec<u8>,
    decode: fn(&[u8]) -> Result<(T, usize), FrameError>,
}

impl StreamDecoder<Uplink> {
    pub fn uplink() -> Self {
        StreamDecoder {
            buf: Vec::new(),
            decode: Uplink::decode,
        }
    }
}

impl StreamDecoder<Downlink> {
    pub fn downlink() -> Self {
        StreamDecoder {
            buf: Vec::new(),
            decode: Downlink::decode,
        }
    }
}

impl<T> StreamDecoder<T> {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete message, `None` when more bytes are needed. A corrupt message is
    /// reported once and skipped; after bad magic the decoder resynchronizes on the next
    /// plausible magic byte.
    pub fn next_message(&mut self) -> Option<Result<T, FrameError>> {
        if self.buf.is_empty() {
            return None;
        }
        match (self.decode)(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Some(Ok(msg))
            }
            Err(FrameError::NeedMoreBytes(_)) => None,
            Err(FrameError::BadMagic) => {
                let skip = self.buf[1..]
                    .iter()
                    .position(|b| b"RKAC".contains(b))
                    .map_or(self.buf.len(), |p| p + 1);
                self.buf.drain(..skip);
                Some(Err(FrameError::BadMagic))
            }
            Err(e) => {
                // Drop the first byte so the next scan starts past the corrupt header.
                self.buf.drain(..1);
                let skip = self
                    .buf
                    .iter()
                    .position(|b| b"RKAC".contains(b))
                    .unwrap_or(self.buf.len());
                self.buf.drain(..skip);
                Some(Err(e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    #[error("unknown command verb '{0}'")]
    UnknownVerb(String),
    #[error("malformed command: {0}")]
    BadSyntax(String),
    #[error("message is {0} characters, SMS limit is 160")]
    TooLong(usize),
    #[error("message contains non-ASCII characters")]
    NonAscii,
}

/// Remote command grammar shared by SMS and session delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    GetGps,
    SetParam { key: String, value: String },
    /// Drive open-collector output `line` (0..=3). Output 0 is the immobilizer.
    Out { line: u8, on: bool },
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::GetGps => f.write_str("GETGPS"),
            Command::SetParam { key, value } => write!(f, "SETPARAM {key}={value}"),
            Command::Out { line, on } => write!(f, "OUT {line} {}", u8::from(*on)),
        }
    }
}

fn check_text(text: &str) -> Result<(), CommandError> {
    if !text.is_ascii() {
        return Err(CommandError::NonAscii);
    }
    if text.len() > SMS_MAX_LEN {
        return Err(CommandError::TooLong(text.len()));
    }
    Ok(())
}

impl FromStr for Command {
    type Err = CommandError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        check_text(text)?;
        let mut words = text.split_whitespace();
        let verb = words.next().unwrap_or_default();
        let args: Vec<&str> = words.collect();
        let syntax = |what: &str| CommandError::BadSyntax(format!("{what}: '{text}'"));
        match verb {
            "GETGPS" if args.is_empty() => Ok(Command::GetGps),
            "GETGPS" => Err(syntax("GETGPS takes no arguments")),
            "SETPARAM" => {
                let [arg] = args[..] else {
                    return Err(syntax("expected SETPARAM <key>=<value>"));
                };
                let (key, value) = arg
                    .split_once('=')
                    .ok_or_else(|| syntax("expected <key>=<value>"))?;
                let key_ok = !key.is_empty()
                    && key.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
                if !key_ok || value.is_empty() {
                    return Err(syntax("bad key or empty value"));
                }
                Ok(Command::SetParam {
                    key: key.to_string(),
                    value: value.to_string(),
                })
            }
            "OUT" => match args[..] {
                [line @ ("0" | "1" | "2" | "3"), state @ ("0" | "1")] => Ok(Command::Out {
                    line: line.parse().expect("matched digit"),
                    on: state == "1",
                }),
                _ => Err(syntax("expected OUT <0-3> <0|1>")),
            },
            other => Err(CommandError::UnknownVerb(other.to_string())),
        }
    }
}

/// A command received by SMS, with the sender it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmsCommand {
    pub sender: String,
    pub command: Command,
}

pub fn parse_sms_command(text: &str, sender: &str) -> Result<SmsCommand, CommandError> {
    Ok(SmsCommand {
        sender: sender.to_string(),
        command: text.parse()?,
    })
}

/// One simulated SMS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmsMessage {
    /// Counterpart phone number: recipient for outgoing messages, sender for incoming ones.
    pub number: String,
    pub body: String,
}

impl SmsMessage {
    pub fn new(number: impl Into<String>, body: impl Into<String>) -> Result<Self, CommandError> {
        let body = body.into();
        check_text(&body)?;
        Ok(SmsMessage {
            number: number.into(),
            body,
        })
    }
}

/// `POS,<imei>,<iso8601>,<lat>,<lon>,<speed>,<heading>,<event>` position text.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionReport {
    pub imei: Imei,
    pub timestamp_ms: u64,
    pub lat: f64,
    pub lon: f64,
    pub speed_kmh: f64,
    pub heading_deg: u16,
    pub event: EventCode,
}

pub fn iso8601(timestamp_ms: u64) -> String {
    DateTime::from_timestamp_millis(timestamp_ms as i64)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl fmt::Display for PositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "POS,{},{},{:.6},{:.6},{:.1},{},{}",
            self.imei,
            iso8601(self.timestamp_ms),
            self.lat,
            self.lon,
            self.speed_kmh,
            self.heading_deg,
            self.event
        )
    }
}

impl FromStr for PositionReport {
    type Err = CommandError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        check_text(s)?;
        let bad = || CommandError::BadSyntax(format!("position report: '{s}'"));
        let parts: Vec<&str> = s.split(',').collect();
        let ["POS", imei, ts, lat, lon, speed, heading, event] = parts[..] else {
            return Err(bad());
        };
        let timestamp = DateTime::parse_from_rfc3339(ts).map_err(|_| bad())?;
        Ok(PositionReport {
            imei: imei.parse().map_err(|_| bad())?,
            timestamp_ms: u64::try_from(timestamp.timestamp_millis()).map_err(|_| bad())?,
            lat: lat.parse().map_err(|_| bad())?,
            lon: lon.parse().map_err(|_| bad())?,
            speed_kmh: speed.parse().map_err(|_| bad())?,
            heading_deg: heading.parse().map_err(|_| bad())?,
            event: event.parse().map_err(|_| bad())?,
        })
    }
}
