//! NMEA 0183 sentence codec.
//!
//! Parses the six sentence types a combined GPS/GLONASS receiver emits (RMC, GGA, GLL, GSA,
//! GSV, VTG), fuses one epoch's sentences into a [`Fix`], and serializes fixes back into RMC
//! and GGA lines for the simulator's receiver output.
//!
//! Some receiver datasheets list a "GGL" sentence. No such sentence exists in NMEA 0183; it is
//! read as GLL (geographic position, latitude/longitude).

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, NaiveTime, Timelike};
use thiserror::Error;

use crate::geo::GeoPoint;

/// Knots to kilometres per hour.
pub const KNOTS_TO_KMH: f64 = 1.852;

/// Minimum number of satellites for a fix to count as valid.
pub const MIN_SATELLITES_FOR_FIX: u8 = 4;

/// HDOP reported when no GGA sentence was available for the epoch.
pub const DEFAULT_HDOP: f64 = 99.9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NmeaError {
    #[error("line is not framed as $<address>,<fields>*<HH>")]
    BadFraming,
    #[error("checksum mismatch: computed {computed:02X}, line says {declared:02X}")]
    BadChecksum { computed: u8, declared: u8 },
    #[error("unsupported sentence '{0}'")]
    UnsupportedType(String),
    #[error("malformed {sentence} field {index}")]
    MalformedField { sentence: SentenceType, index: usize },
    #[error("no RMC sentence in epoch")]
    NoRmc,
    #[error("{0} out of range")]
    OutOfRange(&'static str),
}

/// Talker identifier: which constellation produced the sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Talker {
    /// GPS
    Gp,
    /// GLONASS
    Gl,
    /// Combined GNSS solution
    Gn,
}

impl Talker {
    pub fn as_str(self) -> &'static str {
        match self {
            Talker::Gp => "GP",
            Talker::Gl => "GL",
            Talker::Gn => "GN",
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        match code {
            "GP" => Some(Talker::Gp),
            "GL" => Some(Talker::Gl),
            "GN" => Some(Talker::Gn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SentenceType {
    Rmc,
    Gga,
    Gll,
    Gsa,
    Gsv,
    Vtg,
}

impl SentenceType {
    pub fn as_str(self) -> &'static str {
        match self {
            SentenceType::Rmc => "RMC",
            SentenceType::Gga => "GGA",
            SentenceType::Gll => "GLL",
            SentenceType::Gsa => "GSA",
            SentenceType::Gsv => "GSV",
            SentenceType::Vtg => "VTG",
        }
    }

    fn from_code(code: &str) -> Option<Self> {
        match code {
            "RMC" => Some(SentenceType::Rmc),
            "GGA" => Some(SentenceType::Gga),
            "GLL" => Some(SentenceType::Gll),
            "GSA" => Some(SentenceType::Gsa),
            "GSV" => Some(SentenceType::Gsv),
            "VTG" => Some(SentenceType::Vtg),
            _ => None,
        }
    }

    /// Fewest data fields a well-formed sentence of this type carries. Newer NMEA revisions
    /// append mode/system fields, so longer sentences are accepted.
    fn min_fields(self) -> usize {
        match self {
            SentenceType::Rmc => 11,
            SentenceType::Gga => 14,
            SentenceType::Gll => 6,
            SentenceType::Gsa => 17,
            SentenceType::Gsv => 3,
            SentenceType::Vtg => 8,
        }
    }
}

impl fmt::Display for SentenceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A checksum-verified, tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NmeaSentence {
    pub talker: Talker,
    pub kind: SentenceType,
    /// Data fields after the address field, in order. Empty fields are kept as empty strings.
    pub fields: Vec<String>,
    pub checksum: u8,
}

impl NmeaSentence {
    fn field(&self, index: usize) -> &str {
        self.fields.get(index).map(String::as_str).unwrap_or("")
    }

    fn malformed(&self, index: usize) -> NmeaError {
        NmeaError::MalformedField {
            sentence: self.kind,
            index,
        }
    }

    fn parse_field<T: FromStr>(&self, index: usize) -> Result<Option<T>, NmeaError> {
        let raw = self.field(index);
        if raw.is_empty() {
            return Ok(None);
        }
        raw.parse().map(Some).map_err(|_| self.malformed(index))
    }

    /// Satellites in view, from a GSV sentence.
    pub fn satellites_in_view(&self) -> Option<u8> {
        if self.kind != SentenceType::Gsv {
            return None;
        }
        self.parse_field(2).ok().flatten()
    }

    /// Number of satellite PRNs used in the solution, from a GSA sentence.
    pub fn satellites_used(&self) -> Option<u8> {
        if self.kind != SentenceType::Gsa {
            return None;
        }
        Some(self.fields[2..14].iter().filter(|f| !f.is_empty()).count() as u8)
    }
}

/// One positioning epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fix {
    /// UTC milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub lat: f64,
    pub lon: f64,
    /// km/h
    pub speed_kmh: f64,
    /// Degrees clockwise from true north, in [0, 360).
    pub heading_deg: f64,
    /// Metres above mean sea level.
    pub altitude_m: f64,
    pub satellites: u8,
    pub hdop: f64,
    pub valid: bool,
}

impl Fix {
    /// The fix position; coordinates are clamped into range first.
    pub fn position(&self) -> GeoPoint {
        GeoPoint::new(self.lat.clamp(-90.0, 90.0), self.lon.clamp(-180.0, 180.0))
            .expect("clamped coordinates are valid")
    }

    fn check_range(&self) -> Result<(), NmeaError> {
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat)) {
            return Err(NmeaError::OutOfRange("latitude"));
        }
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(NmeaError::OutOfRange("longitude"));
        }
        if !(self.speed_kmh.is_finite() && self.speed_kmh >= 0.0) {
            return Err(NmeaError::OutOfRange("speed"));
        }
        if !(self.heading_deg.is_finite() && (0.0..360.0).contains(&self.heading_deg)) {
            return Err(NmeaError::OutOfRange("heading"));
        }
        if !(self.hdop.is_finite() && self.hdop >= 0.0) {
            return Err(NmeaError::OutOfRange("hdop"));
        }
        if !self.altitude_m.is_finite() {
            return Err(NmeaError::OutOfRange("altitude"));
        }
        Ok(())
    }
}

/// XOR of every byte of `body` (the text strictly between `$` and `*`).
pub fn compute_checksum(body: &[u8]) -> u8 {
    body.iter().fold(0, |acc, b| acc ^ b)
}

fn hex_digit(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'A'..=b'F' => Some(b - b'A' + 10),
        b'a'..=b'f' => Some(b - b'a' + 10),
        _ => None,
    }
}

/// Parse one sentence. Accepts arbitrary bytes; trailing CR/LF are ignored.
pub fn parse_sentence(line: impl AsRef<[u8]>) -> Result<NmeaSentence, NmeaError> {
    let mut line = line.as_ref();
    while let [rest @ .., b'\r' | b'\n'] = line {
        line = rest;
    }
    let Some((&b'$', rest)) = line.split_first() else {
        return Err(NmeaError::BadFraming);
    };
    let star = rest
        .iter()
        .rposition(|&b| b == b'*')
        .ok_or(NmeaError::BadFraming)?;
    let (body, trailer) = (&rest[..star], &rest[star + 1..]);
    let declared = match trailer {
        [hi, lo] => match (hex_digit(*hi), hex_digit(*lo)) {
            (Some(hi), Some(lo)) => hi << 4 | lo,
            _ => return Err(NmeaError::BadFraming),
        },
        _ => return Err(NmeaError::BadFraming),
    };
    if body.iter().any(|&b| !(0x20..0x7f).contains(&b) || b == b'$' || b == b'*') {
        return Err(NmeaError::BadFraming);
    }
    let computed = compute_checksum(body);
    if computed != declared {
        return Err(NmeaError::BadChecksum { computed, declared });
    }

    // Printable ASCII was checked above.
    let body = std::str::from_utf8(body).map_err(|_| NmeaError::BadFraming)?;
    let mut tokens = body.split(',');
    let address = tokens.next().unwrap_or_default();
    let (talker, kind) = match (address.get(..2), address.get(2..)) {
        (Some(t), Some(k)) if address.len() == 5 => (Talker::from_code(t), SentenceType::from_code(k)),
        _ => (None, None),
    };
    let (Some(talker), Some(kind)) = (talker, kind) else {
        return Err(NmeaError::UnsupportedType(address.to_string()));
    };
    let fields: Vec<String> = tokens.map(str::to_string).collect();
    if fields.len() < kind.min_fields() {
        return Err(NmeaError::MalformedField {
            sentence: kind,
            index: fields.len(),
        });
    }
    Ok(NmeaSentence {
        talker,
        kind,
        fields,
        checksum: declared,
    })
}

/// `ddmm.mmmm` / `dddmm.mmmm` plus hemisphere into signed decimal degrees.
fn parse_coordinate(
    sentence: &NmeaSentence,
    index: usize,
    degree_digits: usize,
    limit: f64,
) -> Result<Option<f64>, NmeaError> {
    let raw = sentence.field(index);
    let hemi = sentence.field(index + 1);
    if raw.is_empty() && hemi.is_empty() {
        return Ok(None);
    }
    let bad = || sentence.malformed(index);
    if raw.len() < degree_digits + 2 || !raw.is_char_boundary(degree_digits) {
        return Err(bad());
    }
    let degrees: u32 = raw[..degree_digits].parse().map_err(|_| bad())?;
    let minutes: f64 = raw[degree_digits..].parse().map_err(|_| bad())?;
    if !(0.0..60.0).contains(&minutes) {
        return Err(bad());
    }
    let value = f64::from(degrees) + minutes / 60.0;
    if value > limit {
        return Err(bad());
    }
    match hemi {
        "N" | "E" => Ok(Some(value)),
        "S" | "W" => Ok(Some(-value)),
        _ => Err(sentence.malformed(index + 1)),
    }
}

fn parse_time(sentence: &NmeaSentence, index: usize) -> Result<Option<NaiveTime>, NmeaError> {
    let raw = sentence.field(index);
    if raw.is_empty() {
        return Ok(None);
    }
    let bad = || sentence.malformed(index);
    if raw.len() < 6 || !raw.is_char_boundary(6) {
        return Err(bad());
    }
    let hh: u32 = raw[0..2].parse().map_err(|_| bad())?;
    let mm: u32 = raw[2..4].parse().map_err(|_| bad())?;
    let ss: u32 = raw[4..6].parse().map_err(|_| bad())?;
    let millis = match &raw[6..] {
        "" => 0,
        frac => {
            let frac: f64 = format!("0{frac}").parse().map_err(|_| bad())?;
            ((frac * 1000.0).round() as u32).min(999)
        }
    };
    NaiveTime::from_hms_milli_opt(hh, mm, ss, millis)
        .map(Some)
        .ok_or_else(bad)
}

fn parse_date(sentence: &NmeaSentence, index: usize) -> Result<Option<NaiveDate>, NmeaError> {
    let raw = sentence.field(index);
    if raw.is_empty() {
        return Ok(None);
    }
    let bad = || sentence.malformed(index);
    if raw.len() != 6 || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let dd: u32 = raw[0..2].parse().map_err(|_| bad())?;
    let mm: u32 = raw[2..4].parse().map_err(|_| bad())?;
    let yy: i32 = raw[4..6].parse().map_err(|_| bad())?;
    // Two-digit years always land in 20xx; the hardware postdates 2000.
    NaiveDate::from_ymd_opt(2000 + yy, mm, dd)
        .map(Some)
        .ok_or_else(bad)
}

fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Fuse one epoch's sentences into a fix. Position, speed, heading and time come from RMC;
/// satellites, HDOP and altitude from GGA when one with the same time of day is present.
pub fn fuse_fix(sentences: &[NmeaSentence]) -> Result<Fix, NmeaError> {
    let rmc = sentences
        .iter()
        .find(|s| s.kind == SentenceType::Rmc)
        .ok_or(NmeaError::NoRmc)?;

    let time = parse_time(rmc, 0)?;
    let active = match rmc.field(1) {
        "A" => true,
        "V" => false,
        _ => return Err(rmc.malformed(1)),
    };
    let lat = parse_coordinate(rmc, 2, 2, 90.0)?;
    let lon = parse_coordinate(rmc, 4, 3, 180.0)?;
    let speed_knots: f64 = rmc.parse_field(6)?.unwrap_or(0.0);
    if !(speed_knots.is_finite() && speed_knots >= 0.0) {
        return Err(rmc.malformed(6));
    }
    let course: f64 = rmc.parse_field(7)?.unwrap_or(0.0);
    if !course.is_finite() {
        return Err(rmc.malformed(7));
    }
    let date = parse_date(rmc, 8)?;

    if active && (lat.is_none() || lon.is_none()) {
        return Err(rmc.malformed(2));
    }

    let timestamp_ms = match (date, time) {
        (Some(d), Some(t)) => {
            let ms = d.and_time(t).and_utc().timestamp_millis();
            u64::try_from(ms).map_err(|_| rmc.malformed(8))?
        }
        _ if active => return Err(rmc.malformed(if date.is_none() { 8 } else { 0 })),
        _ => 0,
    };

    let mut fix = Fix {
        timestamp_ms,
        lat: lat.unwrap_or(0.0),
        lon: lon.unwrap_or(0.0),
        speed_kmh: speed_knots * KNOTS_TO_KMH,
        heading_deg: normalize_heading(course),
        altitude_m: 0.0,
        satellites: 0,
        hdop: DEFAULT_HDOP,
        valid: false,
    };

    let gga = sentences.iter().find(|s| {
        s.kind == SentenceType::Gga && matches!(parse_time(s, 0), Ok(t) if t.is_none() || t == time)
    });
    if let Some(gga) = gga {
        fix.satellites = gga.parse_field(6)?.unwrap_or(0);
        fix.hdop = gga.parse_field(7)?.unwrap_or(DEFAULT_HDOP);
        fix.altitude_m = gga.parse_field(8)?.unwrap_or(0.0);
        if !(fix.hdop.is_finite() && fix.hdop >= 0.0) {
            return Err(gga.malformed(7));
        }
        if !fix.altitude_m.is_finite() {
            return Err(gga.malformed(8));
        }
    }
    fix.valid = active && fix.satellites >= MIN_SATELLITES_FOR_FIX;
    Ok(fix)
}

/// Parse a batch of lines, silently skipping the ones that fail, and fuse them.
pub fn fuse_lines<S: AsRef<str>>(lines: &[S]) -> Result<Fix, NmeaError> {
    let sentences: Vec<NmeaSentence> = lines
        .iter()
        .filter_map(|l| parse_sentence(l.as_ref()).ok())
        .collect();
    fuse_fix(&sentences)
}

fn frame(body: &str) -> String {
    format!("${body}*{:02X}\r\n", compute_checksum(body.as_bytes()))
}

/// Degrees into `ddmm.mmmmm` with hemisphere. Rounded in integer units so minutes never read 60.
fn format_coordinate(value: f64, degree_digits: usize, pos: char, neg: char) -> String {
    const SCALE: f64 = 100_000.0;
    let units = (value.abs() * 60.0 * SCALE).round() as u64;
    let per_degree = 60 * SCALE as u64;
    let degrees = units / per_degree;
    let minutes = (units % per_degree) as f64 / SCALE;
    let hemi = if value < 0.0 && units > 0 { neg } else { pos };
    format!("{degrees:0degree_digits$}{minutes:08.5},{hemi}")
}

fn fix_datetime(fix: &Fix) -> Result<chrono::NaiveDateTime, NmeaError> {
    let ms = i64::try_from(fix.timestamp_ms).map_err(|_| NmeaError::OutOfRange("timestamp"))?;
    let dt = DateTime::from_timestamp_millis(ms)
        .ok_or(NmeaError::OutOfRange("timestamp"))?
        .naive_utc();
    if !(2000..=2099).contains(&dt.year()) {
        return Err(NmeaError::OutOfRange("timestamp"));
    }
    Ok(dt)
}

fn format_time(dt: &chrono::NaiveDateTime) -> String {
    format!(
        "{:02}{:02}{:02}.{:03}",
        dt.hour(),
        dt.minute(),
        dt.second(),
        dt.and_utc().timestamp_subsec_millis()
    )
}

/// Serialize a fix as a `$GNRMC` line, including the trailing CR LF.
pub fn serialize_rmc(fix: &Fix) -> Result<String, NmeaError> {
    fix.check_range()?;
    let dt = fix_datetime(fix)?;
    let mut heading = (fix.heading_deg * 10.0).round() / 10.0;
    if heading >= 360.0 {
        heading = 0.0;
    }
    let body = format!(
        "GNRMC,{},{},{},{},{:.2},{:.1},{:02}{:02}{:02},,,{}",
        format_time(&dt),
        if fix.valid { 'A' } else { 'V' },
        format_coordinate(fix.lat, 2, 'N', 'S'),
        format_coordinate(fix.lon, 3, 'E', 'W'),
        fix.speed_kmh / KNOTS_TO_KMH,
        heading,
        dt.day(),
        dt.month(),
        dt.year() % 100,
        if fix.valid { 'A' } else { 'N' },
    );
    Ok(frame(&body))
}

/// Serialize a fix as a `$GNGGA` line, including the trailing CR LF.
pub fn serialize_gga(fix: &Fix) -> Result<String, NmeaError> {
    fix.check_range()?;
    let dt = fix_datetime(fix)?;
    let body = format!(
        "GNGGA,{},{},{},{},{:02},{:.1},{:.1},M,0.0,M,,",
        format_time(&dt),
        format_coordinate(fix.lat, 2, 'N', 'S'),
        format_coordinate(fix.lon, 3, 'E', 'W'),
        u8::from(fix.valid),
        fix.satellites,
        fix.hdop,
        fix.altitude_m,
    );
    Ok(frame(&body))
}

/// The RMC and GGA lines a receiver emits for one epoch.
pub fn serialize_epoch(fix: &Fix) -> Result<Vec<String>, NmeaError> {
    Ok(vec![serialize_rmc(fix)?, serialize_gga(fix)?])
}
