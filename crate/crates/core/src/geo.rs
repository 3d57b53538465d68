//! Spherical geodesy and geofence zones.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Zone list cap carried by a tracker.
pub const MAX_ZONES: usize = 150;

/// Triangles wider than this are rejected; the containment test is planar.
pub const MAX_TRIANGLE_EXTENT_M: f64 = 100_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    BadLatitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    BadLongitude(f64),
    #[error("bearing is undefined between identical points")]
    DegeneratePair,
    #[error("zone id must be in 1..=65535")]
    BadZoneId,
    #[error("rectangle corners are not south-west / north-east ordered")]
    InvertedRectangle,
    #[error("circle radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("triangle vertices are collinear")]
    CollinearTriangle,
    #[error("triangle spans more than 100 km")]
    TriangleTooLarge,
    #[error("{0} zones exceed the limit of 150")]
    TooManyZones(usize),
    #[error("bad zone record '{0}'")]
    BadZoneRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
            return Err(GeoError::BadLatitude(lat));
        }
        if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
            return Err(GeoError::BadLongitude(lon));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat, self.lon)
    }
}

/// Great-circle distance in metres.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Forward azimuth from `a` towards `b`, degrees clockwise from north in [0, 360).
pub fn initial_bearing(a: GeoPoint, b: GeoPoint) -> Result<f64, GeoError> {
    if a == b {
        return Err(GeoError::DegeneratePair);
    }
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    let deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    Ok(if deg >= 360.0 { 0.0 } else { deg })
}

/// Point at `distance_m` along the great circle leaving `start` on `bearing_deg`.
pub fn destination_point(start: GeoPoint, bearing_deg: f64, distance_m: f64) -> GeoPoint {
    let delta = distance_m / EARTH_RADIUS_M;
    let theta = bearing_deg.to_radians();
    let phi1 = start.lat.to_radians();
    let lambda1 = start.lon.to_radians();
    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let y = theta.sin() * delta.sin() * phi1.cos();
    let x = delta.cos() - phi1.sin() * sin_phi2;
    let lambda2 = lambda1 + y.atan2(x);
    let lon = (lambda2.to_degrees() + 540.0).rem_euclid(360.0) - 180.0;
    GeoPoint {
        lat: phi2.to_degrees().clamp(-90.0, 90.0),
        lon: lon.clamp(-180.0, 180.0),
    }
}

/// Point at fraction `t` in [0, 1] along the great circle from `a` to `b`.
pub fn interpolate(a: GeoPoint, b: GeoPoint, t: f64) -> GeoPoint {
    let d = haversine_distance(a, b);
    if d == 0.0 || t <= 0.0 {
        return a;
    }
    if t >= 1.0 {
        return b;
    }
    let bearing = initial_bearing(a, b).unwrap_or(0.0);
    destination_point(a, bearing, d * t)
}

/// Sum of consecutive great-circle distances, in metres.
pub fn path_length(points: &[GeoPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| haversine_distance(w[0], w[1]))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ZoneShape {
    Rectangle { sw: GeoPoint, ne: GeoPoint },
    Circle { center: GeoPoint, radius_m: f64 },
    Triangle(Triangle),
}

/// Triangle with a local equirectangular projection anchored at its centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangle {
    vertices: [GeoPoint; 3],
    anchor: GeoPoint,
    projected: [(f64, f64); 3],
}

impl Triangle {
    fn new(vertices: [GeoPoint; 3]) -> Result<Self, GeoError> {
        let anchor = GeoPoint {
            lat: vertices.iter().map(|v| v.lat).sum::<f64>() / 3.0,
            lon: vertices.iter().map(|v| v.lon).sum::<f64>() / 3.0,
        };
        let projected = vertices.map(|v| project(anchor, v));
        for i in 0..3 {
            let (a, b) = (projected[i], projected[(i + 1) % 3]);
            let planar = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            let spherical = haversine_distance(vertices[i], vertices[(i + 1) % 3]);
            if planar > MAX_TRIANGLE_EXTENT_M || spherical > MAX_TRIANGLE_EXTENT_M {
                return Err(GeoError::TriangleTooLarge);
            }
        }
        let [a, b, c] = projected;
        let twice_area = cross(a, b, c).abs();
        // Below a square centimetre there is no meaningful interior.
        if twice_area < 2e-4 {
            return Err(GeoError::CollinearTriangle);
        }
        Ok(Triangle {
            vertices,
            anchor,
            projected,
        })
    }

    pub fn vertices(&self) -> [GeoPoint; 3] {
        self.vertices
    }

    /// Projection origin (vertex centroid in degree space).
    pub fn anchor(&self) -> GeoPoint {
        self.anchor
    }

    fn contains(&self, p: GeoPoint) -> bool {
        let q = project(self.anchor, p);
        let [a, b, c] = self.projected;
        let d1 = cross(a, b, q);
        let d2 = cross(b, c, q);
        let d3 = cross(c, a, q);
        let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
        let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
        !(has_neg && has_pos)
    }
}

/// Local equirectangular projection in metres (x east, y north) around `anchor`.
pub fn project(anchor: GeoPoint, p: GeoPoint) -> (f64, f64) {
    let k = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let x = (p.lon - anchor.lon) * anchor.lat.to_radians().cos() * k;
    let y = (p.lat - anchor.lat) * k;
    (x, y)
}

fn cross(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeofenceZone {
    id: u16,
    shape: ZoneShape,
}

impl GeofenceZone {
    pub fn rectangle(id: u16, sw: GeoPoint, ne: GeoPoint) -> Result<Self, GeoError> {
        // Antimeridian-crossing rectangles cannot be expressed with sw.lon <= ne.lon.
        if sw.lat > ne.lat || sw.lon > ne.lon {
            return Err(GeoError::InvertedRectangle);
        }
        Self::with_shape(id, ZoneShape::Rectangle { sw, ne })
    }

    pub fn circle(id: u16, center: GeoPoint, radius_m: f64) -> Result<Self, GeoError> {
        if !(radius_m.is_finite() && radius_m > 0.0) {
            return Err(GeoError::BadRadius(radius_m));
        }
        Self::with_shape(id, ZoneShape::Circle { center, radius_m })
    }

    pub fn triangle(id: u16, a: GeoPoint, b: GeoPoint, c: GeoPoint) -> Result<Self, GeoError> {
        Self::with_shape(id, ZoneShape::Triangle(Triangle::new([a, b, c])?))
    }

    fn with_shape(id: u16, shape: ZoneShape) -> Result<Self, GeoError> {
        if id == 0 {
            return Err(GeoError::BadZoneId);
        }
        Ok(GeofenceZone { id, shape })
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn shape(&self) -> &ZoneShape {
        &self.shape
    }

    /// Boundary points count as inside.
    pub fn contains(&self, p: GeoPoint) -> bool {
        zone_contains(self, p)
    }
}

pub fn zone_contains(zone: &GeofenceZone, p: GeoPoint) -> bool {
    match &zone.shape {
        ZoneShape::Rectangle { sw, ne } => {
            (sw.lat..=ne.lat).contains(&p.lat) && (sw.lon..=ne.lon).contains(&p.lon)
        }
        ZoneShape::Circle { center, radius_m } => haversine_distance(*center, p) <= *radius_m,
        ZoneShape::Triangle(t) => t.contains(p),
    }
}

/// Zone records use the form `<id>,<shape>,<coordinates...>` with shape one of
/// `rect,<sw_lat>,<sw_lon>,<ne_lat>,<ne_lon>`, `circle,<lat>,<lon>,<radius_m>` or
/// `tri,<lat1>,<lon1>,<lat2>,<lon2>,<lat3>,<lon3>`.
impl FromStr for GeofenceZone {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoError::BadZoneRecord(s.to_string());
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() < 2 {
            return Err(bad());
        }
        let id: u16 = parts[0].parse().map_err(|_| bad())?;
        let nums: Vec<f64> = parts[2..]
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let pt = |i: usize| GeoPoint::new(nums[i], nums[i + 1]);
        match (parts[1], nums.len()) {
            ("rect", 4) => GeofenceZone::rectangle(id, pt(0)?, pt(2)?),
            ("circle", 3) => GeofenceZone::circle(id, pt(0)?, nums[2]),
            ("tri", 6) => GeofenceZone::triangle(id, pt(0)?, pt(2)?, pt(4)?),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for GeofenceZone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.shape {
            ZoneShape::Rectangle { sw, ne } => {
                write!(f, "{},rect,{},{},{},{}", self.id, sw.lat, sw.lon, ne.lat, ne.lon)
            }
            ZoneShape::Circle { center, radius_m } => {
                write!(f, "{},circle,{},{},{}", self.id, center.lat, center.lon, radius_m)
            }
            ZoneShape::Triangle(t) => {
                let [a, b, c] = t.vertices;
                write!(
                    f,
                    "{},tri,{},{},{},{},{},{}",
                    self.id, a.lat, a.lon, b.lat, b.lon, c.lat, c.lon
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    Enter,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ZoneEvent {
    pub zone_id: u16,
    pub transition: Transition,
}

/// Enter/exit events between two consecutive positions, in zone-list order. With no previous
/// position the current membership is the baseline and nothing is emitted.
pub fn zone_transitions(
    prev: Option<GeoPoint>,
    cur: GeoPoint,
    zones: &[GeofenceZone],
) -> Result<Vec<ZoneEvent>, GeoError> {
    if zones.len() > MAX_ZONES {
        return Err(GeoError::TooManyZones(zones.len()));
    }
    let Some(prev) = prev else {
        return Ok(Vec::new());
    };
    Ok(zones
        .iter()
        .filter_map(|z| match (z.contains(prev), z.contains(cur)) {
            (false, true) => Some(ZoneEvent {
                zone_id: z.id,
                transition: Transition::Enter,
            }),
            (true, false) => Some(ZoneEvent {
                zone_id: z.id,
                transition: Transition::Exit,
            }),
            _ => None,
        })
        .collect())
}
