//! Region ingestion.
//!
//! District boundaries arrive as GeoJSON in WGS84 degrees and are projected to
//! a local equirectangular frame in meters, centred on a reference origin. All
//! distances used by the optimizers are plain Euclidean distances in that
//! frame. Districts carry a single population density, and [`rasterize`]
//! turns them into a [`DemandGrid`] of populated cells which serves as the
//! quadrature for the coverage integral.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::Value;
use thiserror::Error;

/// Mean Earth radius used by the projection, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Planar coordinates beyond this magnitude are rejected as corrupt input.
pub const PLANAR_SANITY_BOUND_M: f64 = 1.0e7;

/// Generators must fall inside the region bounding box grown by this margin.
pub const GENERATOR_MARGIN_M: f64 = 10_000.0;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("invalid coordinate (lat {lat}, lon {lon})")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("no density given for district `{0}`")]
    MissingDensity(String),
    #[error("district `{district}` has negative density {density}")]
    NegativeDensity { district: String, density: f64 },
    #[error("invalid polygon in district `{district}`: {reason}")]
    InvalidPolygon { district: String, reason: String },
    #[error("negative visitor count in {context}")]
    NegativeVisitors { context: String },
    #[error("generator `{0}` lies outside the study region")]
    GeneratorOutsideRegion(String),
    #[error("cell size must be positive and finite, got {0}")]
    InvalidCellSize(f64),
    #[error("no cell centroid falls inside any district; reduce the cell size")]
    EmptyGrid,
}

fn parse_err(context: impl Into<String>, message: impl ToString) -> GeoError {
    GeoError::Parse {
        context: context.into(),
        message: message.to_string(),
    }
}

/// WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon) {
            Ok(GeoPoint { lat, lon })
        } else {
            Err(GeoError::InvalidCoordinate { lat, lon })
        }
    }
}

/// Meters east (`x`) and north (`y`) of the region origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        PlanarPoint { x, y }
    }

    #[inline]
    pub fn distance_sq(self, other: PlanarPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    #[inline]
    pub fn distance(self, other: PlanarPoint) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn is_sane(self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.x.abs() < PLANAR_SANITY_BOUND_M
            && self.y.abs() < PLANAR_SANITY_BOUND_M
    }
}

/// Local equirectangular projection around `origin`.
pub fn project(p: GeoPoint, origin: GeoPoint) -> PlanarPoint {
    let rad = std::f64::consts::PI / 180.0;
    let y = EARTH_RADIUS_M * (p.lat - origin.lat) * rad;
    let x = EARTH_RADIUS_M * (p.lon - origin.lon) * (origin.lat * rad).cos() * rad;
    PlanarPoint { x, y }
}

/// Inverse of [`project`].
pub fn unproject(p: PlanarPoint, origin: GeoPoint) -> GeoPoint {
    let rad = std::f64::consts::PI / 180.0;
    let lat = origin.lat + p.y / (EARTH_RADIUS_M * rad);
    let lon = origin.lon + p.x / (EARTH_RADIUS_M * (origin.lat * rad).cos() * rad);
    GeoPoint { lat, lon }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: PlanarPoint,
    pub max: PlanarPoint,
}

impl BBox {
    pub fn empty() -> Self {
        BBox {
            min: PlanarPoint::new(f64::INFINITY, f64::INFINITY),
            max: PlanarPoint::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a PlanarPoint>) -> Self {
        let mut b = BBox::empty();
        for p in points {
            b.include(*p);
        }
        b
    }

    pub fn include(&mut self, p: PlanarPoint) {
        self.min.x = self.min.x.min(p.x);
        self.min.y = self.min.y.min(p.y);
        self.max.x = self.max.x.max(p.x);
        self.max.y = self.max.y.max(p.y);
    }

    pub fn union(&self, other: &BBox) -> BBox {
        let mut b = *self;
        b.include(other.min);
        b.include(other.max);
        b
    }

    pub fn expanded(&self, margin: f64) -> BBox {
        BBox {
            min: PlanarPoint::new(self.min.x - margin, self.min.y - margin),
            max: PlanarPoint::new(self.max.x + margin, self.max.y + margin),
        }
    }

    pub fn contains(&self, p: PlanarPoint) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }
}

/// Signed shoelace area of an open ring (counter-clockwise positive).
pub fn ring_signed_area(ring: &[PlanarPoint]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    // Shift by the first vertex so large offsets do not eat precision.
    let o = ring[0];
    let mut twice = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        twice += (a.x - o.x) * (b.y - o.y) - (b.x - o.x) * (a.y - o.y);
    }
    twice / 2.0
}

fn orientation(a: PlanarPoint, b: PlanarPoint, c: PlanarPoint) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn segments_cross(a: PlanarPoint, b: PlanarPoint, c: PlanarPoint, d: PlanarPoint) -> bool {
    let d1 = orientation(c, d, a);
    let d2 = orientation(c, d, b);
    let d3 = orientation(a, b, c);
    let d4 = orientation(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// True if two non-adjacent edges of the ring properly cross.
pub fn ring_self_intersects(ring: &[PlanarPoint]) -> bool {
    let n = ring.len();
    if n < 4 {
        return false;
    }
    let edge_box = |i: usize| BBox::of_points([ring[i], ring[(i + 1) % n]].iter());
    let boxes: Vec<BBox> = (0..n).map(edge_box).collect();
    for i in 0..n {
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (bi, bj) = (&boxes[i], &boxes[j]);
            if bi.max.x < bj.min.x || bj.max.x < bi.min.x || bi.max.y < bj.min.y || bj.max.y < bi.min.y {
                continue;
            }
            if segments_cross(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

fn closest_on_segment(p: PlanarPoint, a: PlanarPoint, b: PlanarPoint) -> PlanarPoint {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len_sq = dx * dx + dy * dy;
    if len_sq == 0.0 {
        return a;
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len_sq).clamp(0.0, 1.0);
    PlanarPoint::new(a.x + t * dx, a.y + t * dy)
}

/// A polygon with open rings (the closing vertex is not repeated).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<PlanarPoint>,
    pub holes: Vec<Vec<PlanarPoint>>,
}

impl Polygon {
    pub fn new(exterior: Vec<PlanarPoint>, holes: Vec<Vec<PlanarPoint>>) -> Self {
        Polygon { exterior, holes }
    }

    pub fn rings(&self) -> impl Iterator<Item = &[PlanarPoint]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    /// Exterior area minus hole areas, square meters.
    pub fn area_m2(&self) -> f64 {
        ring_signed_area(&self.exterior).abs() - self.holes.iter().map(|h| ring_signed_area(h).abs()).sum::<f64>()
    }
}

/// Even-odd crossing parity of `p` against one ring.
fn ring_crossings(ring: &[PlanarPoint], p: PlanarPoint) -> bool {
    let mut inside = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone)]
pub struct District {
    pub id: String,
    pub polygons: Vec<Polygon>,
    /// Persons per square kilometer.
    pub density: f64,
    area_km2: f64,
    bbox: BBox,
}

impl District {
    /// Validates the rings and computes the area.
    pub fn new(id: impl Into<String>, polygons: Vec<Polygon>, density: f64) -> Result<Self, GeoError> {
        let id = id.into();
        if !(density.is_finite() && density >= 0.0) {
            return Err(GeoError::NegativeDensity { district: id, density });
        }
        let invalid = |reason: String| GeoError::InvalidPolygon {
            district: id.clone(),
            reason,
        };
        if polygons.is_empty() {
            return Err(invalid("no polygons".into()));
        }
        let mut bbox = BBox::empty();
        let mut area_m2 = 0.0;
        for (pi, poly) in polygons.iter().enumerate() {
            for (ri, ring) in poly.rings().enumerate() {
                if ring.len() < 3 {
                    return Err(invalid(format!("polygon {pi} ring {ri} has {} vertices", ring.len())));
                }
                if let Some(bad) = ring.iter().find(|p| !p.is_sane()) {
                    return Err(invalid(format!(
                        "polygon {pi} ring {ri} has vertex {bad:?} out of range"
                    )));
                }
                if ring_signed_area(ring) == 0.0 {
                    return Err(invalid(format!("polygon {pi} ring {ri} has zero area")));
                }
            }
            if ring_self_intersects(&poly.exterior) {
                return Err(invalid(format!("polygon {pi} exterior ring self-intersects")));
            }
            bbox = bbox.union(&BBox::of_points(&poly.exterior));
            area_m2 += poly.area_m2();
        }
        if area_m2.is_nan() || area_m2 <= 0.0 {
            return Err(invalid(format!("non-positive area {area_m2} m²")));
        }
        Ok(District {
            id,
            polygons,
            density,
            area_km2: area_m2 / 1.0e6,
            bbox,
        })
    }

    pub fn area_km2(&self) -> f64 {
        self.area_km2
    }

    /// Implied resident count, density times area.
    pub fn population(&self) -> f64 {
        self.density * self.area_km2
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    /// Even-odd rule over every ring of every polygon.
    pub fn contains(&self, p: PlanarPoint) -> bool {
        if !self.bbox.contains(p) {
            return false;
        }
        let mut inside = false;
        for poly in &self.polygons {
            for ring in poly.rings() {
                if ring_crossings(ring, p) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Closest point on any ring, and its distance.
    pub fn nearest_boundary_point(&self, p: PlanarPoint) -> (PlanarPoint, f64) {
        let mut best = (p, f64::INFINITY);
        for poly in &self.polygons {
            for ring in poly.rings() {
                let n = ring.len();
                for i in 0..n {
                    let q = closest_on_segment(p, ring[i], ring[(i + 1) % n]);
                    let d = q.distance(p);
                    if d < best.1 {
                        best = (q, d);
                    }
                }
            }
        }
        best
    }
}

/// Projected districts plus the origin of the planar frame.
#[derive(Debug, Clone)]
pub struct Region {
    pub origin: GeoPoint,
    pub districts: Vec<District>,
}

impl Region {
    pub fn new(origin: GeoPoint, districts: Vec<District>) -> Self {
        Region { origin, districts }
    }

    pub fn bbox(&self) -> BBox {
        self.districts.iter().fold(BBox::empty(), |b, d| b.union(d.bbox()))
    }

    pub fn contains(&self, p: PlanarPoint) -> bool {
        self.districts.iter().any(|d| d.contains(p))
    }

    pub fn nearest_boundary_point(&self, p: PlanarPoint) -> (PlanarPoint, f64) {
        self.districts
            .iter()
            .map(|d| d.nearest_boundary_point(p))
            .fold((p, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
    }

    /// Inside some district, or within `tolerance` meters of one.
    pub fn admits(&self, p: PlanarPoint, tolerance: f64) -> bool {
        p.is_sane() && (self.contains(p) || self.nearest_boundary_point(p).1 <= tolerance)
    }

    /// Returns `p` if inside, otherwise the nearest boundary point.
    pub fn clamp_inside(&self, p: PlanarPoint) -> PlanarPoint {
        if self.contains(p) {
            p
        } else {
            self.nearest_boundary_point(p).0
        }
    }

    /// Rejects generators whose projected position is far outside the region.
    pub fn check_generators(&self, generators: &[GeneratorPoint]) -> Result<(), GeoError> {
        let bbox = self.bbox().expanded(GENERATOR_MARGIN_M);
        match generators.iter().find(|g| !bbox.contains(g.position)) {
            Some(g) => Err(GeoError::GeneratorOutsideRegion(g.name.clone())),
            None => Ok(()),
        }
    }

    pub fn total_population(&self) -> f64 {
        self.districts.iter().map(District::population).sum()
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String, GeoError> {
    let mut s = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|source| GeoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(s)
}

type RawRing = Vec<GeoPoint>;
type RawPolygon = Vec<RawRing>;

/// Parsed boundary features, still in degrees, grouped by district id in file order.
#[derive(Debug, Clone, Default)]
pub struct RawBoundaries {
    pub districts: Vec<(String, Vec<RawPolygon>)>,
}

impl RawBoundaries {
    /// Centre of the lon/lat bounding box of every vertex.
    pub fn center(&self) -> Option<GeoPoint> {
        let (mut lat0, mut lat1, mut lon0, mut lon1) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        let mut any = false;
        for (_, polys) in &self.districts {
            for p in polys.iter().flatten().flatten() {
                any = true;
                lat0 = lat0.min(p.lat);
                lat1 = lat1.max(p.lat);
                lon0 = lon0.min(p.lon);
                lon1 = lon1.max(p.lon);
            }
        }
        any.then(|| GeoPoint {
            lat: (lat0 + lat1) / 2.0,
            lon: (lon0 + lon1) / 2.0,
        })
    }
}

fn parse_position(v: &Value, context: &str) -> Result<GeoPoint, GeoError> {
    let arr = v
        .as_array()
        .ok_or_else(|| parse_err(context, "position is not an array"))?;
    if arr.len() < 2 {
        return Err(parse_err(context, "position needs two numbers"));
    }
    let lon = arr[0]
        .as_f64()
        .ok_or_else(|| parse_err(context, "longitude is not a number"))?;
    let lat = arr[1]
        .as_f64()
        .ok_or_else(|| parse_err(context, "latitude is not a number"))?;
    GeoPoint::new(lat, lon)
}

fn parse_ring(v: &Value, context: &str) -> Result<RawRing, GeoError> {
    let arr = v.as_array().ok_or_else(|| parse_err(context, "ring is not an array"))?;
    let mut ring = arr
        .iter()
        .map(|p| parse_position(p, context))
        .collect::<Result<Vec<_>, _>>()?;
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    Ok(ring)
}

fn parse_polygon(v: &Value, context: &str) -> Result<RawPolygon, GeoError> {
    let arr = v
        .as_array()
        .ok_or_else(|| parse_err(context, "polygon is not an array of rings"))?;
    if arr.is_empty() {
        return Err(parse_err(context, "polygon has no rings"));
    }
    arr.iter().map(|r| parse_ring(r, context)).collect()
}

/// Parses a FeatureCollection of Polygon/MultiPolygon features keyed by `district_id`.
pub fn parse_boundaries(text: &str, context: &str) -> Result<RawBoundaries, GeoError> {
    let root: Value = serde_json::from_str(text).map_err(|e| parse_err(context, e))?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(parse_err(context, "expected a GeoJSON FeatureCollection"));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(context, "missing `features` array"))?;
    let mut out = RawBoundaries::default();
    for (i, f) in features.iter().enumerate() {
        let ctx = format!("{context} feature {i}");
        let id = match f.get("properties").and_then(|p| p.get("district_id")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(parse_err(&ctx, "missing string property `district_id`")),
        };
        let geom = f.get("geometry").ok_or_else(|| parse_err(&ctx, "missing geometry"))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| parse_err(&ctx, "missing coordinates"))?;
        let polys = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(coords, &ctx)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| parse_err(&ctx, "MultiPolygon coordinates are not an array"))?
                .iter()
                .map(|p| parse_polygon(p, &ctx))
                .collect::<Result<_, _>>()?,
            other => return Err(parse_err(&ctx, format!("unsupported geometry type {other:?}"))),
        };
        match out.districts.iter_mut().find(|(d, _)| *d == id) {
            Some((_, existing)) => existing.extend(polys),
            None => out.districts.push((id, polys)),
        }
    }
    Ok(out)
}

/// Parses `district_id,density_per_km2` rows.
pub fn parse_densities<R: Read>(reader: R, context: &str) -> Result<BTreeMap<String, f64>, GeoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(context, e))?.clone();
    let expected = ["district_id", "density_per_km2"];
    if headers.len() != 2 || headers.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(parse_err(context, format!("header must be `{}`", expected.join(","))));
    }
    let mut map = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = format!("{context} row {}", i + 2);
        let rec = rec.map_err(|e| parse_err(&row, e))?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let density: f64 = rec
            .get(1)
            .unwrap_or_default()
            .parse()
            .map_err(|e| parse_err(&row, format!("density: {e}")))?;
        if !(density.is_finite() && density >= 0.0) {
            return Err(GeoError::NegativeDensity { district: id, density });
        }
        map.insert(id, density);
    }
    Ok(map)
}

/// Projects raw boundaries and pairs each district with its density.
pub fn build_region(
    raw: &RawBoundaries,
    densities: &BTreeMap<String, f64>,
    origin: GeoPoint,
) -> Result<Region, GeoError> {
    let mut districts = Vec::with_capacity(raw.districts.len());
    for (id, polys) in &raw.districts {
        let density = *densities.get(id).ok_or_else(|| GeoError::MissingDensity(id.clone()))?;
        let polygons = polys
            .iter()
            .map(|rings| {
                let mut planar = rings
                    .iter()
                    .map(|ring| ring.iter().map(|&p| project(p, origin)).collect::<Vec<_>>());
                let exterior = planar.next().unwrap_or_default();
                Polygon::new(exterior, planar.collect())
            })
            .collect();
        districts.push(District::new(id.clone(), polygons, density)?);
    }
    Ok(Region::new(origin, districts))
}

/// Loads district boundaries and densities. The planar origin is `origin`
/// when given, otherwise the centre of the boundaries' lon/lat bounding box.
pub fn load_region(
    boundaries_file: &Path,
    densities_file: &Path,
    origin: Option<GeoPoint>,
) -> Result<Region, GeoError> {
    let text = read_file(boundaries_file)?;
    let raw = parse_boundaries(&text, &boundaries_file.display().to_string())?;
    let dens_text = read_file(densities_file)?;
    let densities = parse_densities(dens_text.as_bytes(), &densities_file.display().to_string())?;
    let origin = match origin.or_else(|| raw.center()) {
        Some(o) => o,
        None => return Err(parse_err(boundaries_file.display().to_string(), "no features")),
    };
    build_region(&raw, &densities, origin)
}

/// A point source of demand, e.g. a mall or a campus.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPoint {
    pub name: String,
    /// Daily visitors.
    pub visitors: f64,
    pub location: GeoPoint,
    pub position: PlanarPoint,
}

impl GeneratorPoint {
    /// Generator already in the planar frame; `location` is left at (0, 0).
    pub fn planar(name: impl Into<String>, visitors: f64, position: PlanarPoint) -> Self {
        GeneratorPoint {
            name: name.into(),
            visitors,
            location: GeoPoint { lat: 0.0, lon: 0.0 },
            position,
        }
    }
}

pub const GENERATOR_HEADER: [&str; 4] = ["name", "daily_visitors", "latitude", "longitude"];

/// Parses `name,daily_visitors,latitude,longitude` rows and projects them.
pub fn parse_generators<R: Read>(reader: R, origin: GeoPoint, context: &str) -> Result<Vec<GeneratorPoint>, GeoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(context, e))?.clone();
    if headers.len() != 4
        || headers
            .iter()
            .zip(GENERATOR_HEADER)
            .any(|(h, e)| !h.eq_ignore_ascii_case(e))
    {
        return Err(parse_err(
            context,
            format!("header must be `{}`", GENERATOR_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = format!("{context} row {}", i + 2);
        let rec = rec.map_err(|e| parse_err(&row, e))?;
        let field = |k: usize, what: &str| -> Result<f64, GeoError> {
            rec.get(k)
                .unwrap_or_default()
                .parse::<f64>()
                .map_err(|e| parse_err(&row, format!("{what}: {e}")))
        };
        let visitors = field(1, "daily_visitors")?;
        if visitors < 0.0 {
            return Err(GeoError::NegativeVisitors { context: row });
        }
        if !visitors.is_finite() {
            return Err(parse_err(&row, "daily_visitors is not finite"));
        }
        let location = GeoPoint::new(field(2, "latitude")?, field(3, "longitude")?)?;
        out.push(GeneratorPoint {
            name: rec.get(0).unwrap_or_default().to_string(),
            visitors,
            location,
            position: project(location, origin),
        });
    }
    Ok(out)
}

pub fn load_generators(file: &Path, origin: GeoPoint) -> Result<Vec<GeneratorPoint>, GeoError> {
    let text = read_file(file)?;
    parse_generators(text.as_bytes(), origin, &file.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub centroid: PlanarPoint,
    pub population: f64,
}

/// Populated raster cells; empty cells are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandGrid {
    pub cell_size: f64,
    pub cells: Vec<GridCell>,
    pub total_population: f64,
}

impl DemandGrid {
    pub fn from_cells(cell_size: f64, cells: Vec<GridCell>) -> Self {
        let total_population = cells.iter().map(|c| c.population).sum();
        DemandGrid {
            cell_size,
            cells,
            total_population,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Rasterizes districts on an axis-aligned grid anchored at the lower-left
/// corner of their joint bounding box. A cell takes the density of the first
/// district containing its centroid.
pub fn rasterize(districts: &[District], cell_size: f64) -> Result<DemandGrid, GeoError> {
    if !(cell_size.is_finite() && cell_size > 0.0) {
        return Err(GeoError::InvalidCellSize(cell_size));
    }
    let bbox = districts.iter().fold(BBox::empty(), |b, d| b.union(d.bbox()));
    if districts.is_empty() {
        return Err(GeoError::EmptyGrid);
    }
    let count = |extent: f64| ((extent / cell_size) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let (nx, ny) = (count(bbox.width()), count(bbox.height()));
    let cell_km2 = cell_size * cell_size / 1.0e6;
    let cells: Vec<GridCell> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let y = bbox.min.y + (j as f64 + 0.5) * cell_size;
            (0..nx)
                .filter_map(|i| {
                    let centroid = PlanarPoint::new(bbox.min.x + (i as f64 + 0.5) * cell_size, y);
                    let d = districts.iter().find(|d| d.contains(centroid))?;
                    let population = d.density * cell_km2;
                    (population > 0.0).then_some(GridCell { centroid, population })
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if cells.is_empty() {
        return Err(GeoError::EmptyGrid);
    }
    Ok(DemandGrid::from_cells(cell_size, cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, side: f64) -> Polygon {
        Polygon::new(
            vec![
                PlanarPoint::new(x0, y0),
                PlanarPoint::new(x0 + side, y0),
                PlanarPoint::new(x0 + side, y0 + side),
                PlanarPoint::new(x0, y0 + side),
            ],
            vec![],
        )
    }

    #[test]
    fn origin_projects_to_zero() {
        let o = GeoPoint::new(3.0, 101.5).unwrap();
        assert_eq!(project(o, o), PlanarPoint::new(0.0, 0.0));
    }

    #[test]
    fn hundredth_degree_north() {
        let o = GeoPoint::new(3.0, 101.5).unwrap();
        let p = project(GeoPoint::new(3.01, 101.5).unwrap(), o);
        assert!(p.x.abs() < 1e-9);
        assert!((p.y - 1111.95).abs() < 0.01, "{}", p.y);
    }

    #[test]
    fn batu_caves_offset() {
        // Independent check: haversine distance against the projected norm,
        // plus the ratio of the component spans.
        let o = GeoPoint::new(3.0, 101.5).unwrap();
        let p = GeoPoint::new(3.2379, 101.6841).unwrap();
        let q = project(p, o);
        // Frozen from an independent evaluation of the projection formulas.
        assert!((q.x - 20_442.931).abs() < 0.01, "{}", q.x);
        assert!((q.y - 26_453.273).abs() < 0.01, "{}", q.y);
        let (la1, la2) = (o.lat.to_radians(), p.lat.to_radians());
        let dla = la2 - la1;
        let dlo = (p.lon - o.lon).to_radians();
        let a = (dla / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlo / 2.0).sin().powi(2);
        let hav = 2.0 * EARTH_RADIUS_M * a.sqrt().asin();
        let planar = (q.x * q.x + q.y * q.y).sqrt();
        assert!((hav - planar).abs() / hav < 2e-3, "{hav} vs {planar}");
    }

    #[test]
    fn invalid_geo_point() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn ring_with_two_vertices_rejected() {
        let poly = Polygon::new(vec![PlanarPoint::new(0.0, 0.0), PlanarPoint::new(1.0, 0.0)], vec![]);
        assert!(matches!(
            District::new("a", vec![poly], 1.0),
            Err(GeoError::InvalidPolygon { .. })
        ));
    }

    #[test]
    fn collinear_ring_rejected() {
        let poly = Polygon::new(
            vec![
                PlanarPoint::new(0.0, 0.0),
                PlanarPoint::new(1.0, 0.0),
                PlanarPoint::new(2.0, 0.0),
            ],
            vec![],
        );
        assert!(matches!(
            District::new("a", vec![poly], 1.0),
            Err(GeoError::InvalidPolygon { .. })
        ));
    }

    #[test]
    fn bowtie_rejected() {
        let poly = Polygon::new(
            vec![
                PlanarPoint::new(0.0, 0.0),
                PlanarPoint::new(10.0, 10.0),
                PlanarPoint::new(10.0, 0.0),
                PlanarPoint::new(0.0, 20.0),
            ],
            vec![],
        );
        let err = District::new("bow", vec![poly], 1.0).unwrap_err();
        assert!(err.to_string().contains("self-intersects"));
    }

    #[test]
    fn hole_subtracts_area_and_membership() {
        let mut poly = square(0.0, 0.0, 3000.0);
        poly.holes.push(square(1000.0, 1000.0, 1000.0).exterior);
        let d = District::new("holey", vec![poly], 100.0).unwrap();
        assert!((d.area_km2() - 8.0).abs() < 1e-12);
        assert!(!d.contains(PlanarPoint::new(1500.0, 1500.0)));
        assert!(d.contains(PlanarPoint::new(500.0, 500.0)));
        let grid = rasterize(&[d], 1000.0).unwrap();
        assert_eq!(grid.len(), 8);
        assert!((grid.total_population - 800.0).abs() < 1e-9);
    }

    #[test]
    fn unit_square_tiles_exactly() {
        let d = District::new("sq", vec![square(-500.0, -500.0, 1000.0)], 1000.0).unwrap();
        assert!((d.area_km2() - 1.0).abs() < 1e-12);
        let grid = rasterize(&[d], 500.0).unwrap();
        assert_eq!(grid.len(), 4);
        for c in &grid.cells {
            assert!((c.population - 250.0).abs() < 1e-9);
        }
        assert!((grid.total_population - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn coarse_grid_is_empty() {
        let d = District::new("sq", vec![square(-500.0, -500.0, 1000.0)], 1000.0).unwrap();
        assert!(matches!(rasterize(&[d], 2000.0), Err(GeoError::EmptyGrid)));
    }

    #[test]
    fn l_shape_three_cells() {
        let poly = Polygon::new(
            vec![
                PlanarPoint::new(0.0, 0.0),
                PlanarPoint::new(2000.0, 0.0),
                PlanarPoint::new(2000.0, 1000.0),
                PlanarPoint::new(1000.0, 1000.0),
                PlanarPoint::new(1000.0, 2000.0),
                PlanarPoint::new(0.0, 2000.0),
            ],
            vec![],
        );
        let d = District::new("L", vec![poly], 100.0).unwrap();
        assert!((d.area_km2() - 3.0).abs() < 1e-12);
        let grid = rasterize(&[d], 1000.0).unwrap();
        assert_eq!(grid.len(), 3);
        assert!((grid.total_population - 300.0).abs() < 1e-9);
    }

    #[test]
    fn zero_density_district_contributes_no_cells() {
        let a = District::new("a", vec![square(0.0, 0.0, 1000.0)], 0.0).unwrap();
        let b = District::new("b", vec![square(1000.0, 0.0, 1000.0)], 400.0).unwrap();
        let grid = rasterize(&[a, b], 500.0).unwrap();
        assert_eq!(grid.len(), 4);
        assert!(grid.cells.iter().all(|c| c.centroid.x > 1000.0));
    }

    #[test]
    fn invalid_cell_size() {
        let d = District::new("sq", vec![square(0.0, 0.0, 1000.0)], 1.0).unwrap();
        assert!(matches!(
            rasterize(std::slice::from_ref(&d), 0.0),
            Err(GeoError::InvalidCellSize(_))
        ));
        assert!(matches!(rasterize(&[d], f64::NAN), Err(GeoError::InvalidCellSize(_))));
    }

    #[test]
    fn clamp_moves_outside_points_onto_boundary() {
        let region = Region::new(
            GeoPoint::new(0.0, 0.0).unwrap(),
            vec![District::new("sq", vec![square(0.0, 0.0, 1000.0)], 1.0).unwrap()],
        );
        let p = region.clamp_inside(PlanarPoint::new(1500.0, 500.0));
        assert_eq!(p, PlanarPoint::new(1000.0, 500.0));
        assert!(region.admits(p, 50.0));
        assert!(!region.admits(PlanarPoint::new(1100.0, 500.0), 50.0));
        let inside = PlanarPoint::new(10.0, 20.0);
        assert_eq!(region.clamp_inside(inside), inside);
    }

    #[test]
    fn densities_header_enforced() {
        let err = parse_densities("id,rho\na,1\n".as_bytes(), "d.csv").unwrap_err();
        assert!(matches!(err, GeoError::Parse { .. }));
        let ok = parse_densities("district_id,density_per_km2\na, 12.5\n".as_bytes(), "d.csv").unwrap();
        assert_eq!(ok["a"], 12.5);
        let neg = parse_densities("district_id,density_per_km2\na,-1\n".as_bytes(), "d.csv").unwrap_err();
        assert!(matches!(neg, GeoError::NegativeDensity { .. }));
    }

    #[test]
    fn generator_rows() {
        let o = GeoPoint::new(3.0, 101.5).unwrap();
        let text = "name,daily_visitors,latitude,longitude\nSunway Pyramid, 50000, 3.0731, 101.6071\nCyberjaya, 100000, 2.9223, 101.6509\n";
        let gens = parse_generators(text.as_bytes(), o, "g.csv").unwrap();
        assert_eq!(gens[0].visitors, 50_000.0);
        assert_eq!(gens[1].visitors, 100_000.0);
        assert_eq!(gens[1].name, "Cyberjaya");
        assert_eq!(gens[0].position, project(GeoPoint::new(3.0731, 101.6071).unwrap(), o));
    }

    #[test]
    fn negative_visitors_rejected() {
        let o = GeoPoint::new(3.0, 101.5).unwrap();
        let text = "name,daily_visitors,latitude,longitude\nBad,-5,3.0,101.5\n";
        assert!(matches!(
            parse_generators(text.as_bytes(), o, "g.csv"),
            Err(GeoError::NegativeVisitors { .. })
        ));
        let text = "name,daily_visitors,latitude,longitude\nBad,lots,3.0,101.5\n";
        let err = parse_generators(text.as_bytes(), o, "g.csv").unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn boundaries_missing_district_id() {
        let text = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}}]}"#;
        assert!(matches!(parse_boundaries(text, "b"), Err(GeoError::Parse { .. })));
        assert!(matches!(parse_boundaries("{", "b"), Err(GeoError::Parse { .. })));
    }
}
