//! Point and raster ingestion, the population-density offset, covariate
//! rasters, and release archives.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};

/// Floor applied to population density (persons / m²) before taking logs.
pub const PD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPattern {
    pub points: Vec<Point>,
    pub domain: Rect,
    #[serde(default)]
    pub label: String,
}

impl PointPattern {
    pub fn new(points: Vec<Point>, domain: Rect, label: impl Into<String>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !domain.contains(p)) {
            return Err(Error::PointOutOfDomain { index: i });
        }
        Ok(Self { points, domain, label: label.into() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.points {
            h.update(p.x.to_le_bytes());
            h.update(p.y.to_le_bytes());
        }
        for v in [self.domain.xmin, self.domain.ymin, self.domain.xmax, self.domain.ymax] {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("x,y\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.x, p.y));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointFormat {
    Csv,
    Geojson,
}

impl PointFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("geojson") | Some("json") => PointFormat::Geojson,
            _ => PointFormat::Csv,
        }
    }
}

/// Read a point file. CSV needs an `x,y` header; other columns are ignored.
/// Rows outside `domain` are reported together.
pub fn load_points(path: &Path, format: PointFormat, domain: Rect) -> Result<PointPattern> {
    let points = match format {
        PointFormat::Csv => parse_points_csv(fs::File::open(path)?)?,
        PointFormat::Geojson => parse_points_geojson(&fs::read_to_string(path)?)?,
    };
    let outside: Vec<usize> =
        points.iter().enumerate().filter(|(_, p)| !domain.contains(p)).map(|(i, _)| i).collect();
    if !outside.is_empty() {
        return Err(Error::Config(format!(
            "{} point(s) outside the domain, rows {:?}",
            outside.len(),
            outside
        )));
    }
    let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    PointPattern::new(points, domain, label)
}

pub fn parse_points_csv<R: Read>(reader: R) -> Result<Vec<Point>> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    };
    let cols: Vec<String> =
        header.split(',').map(|c| c.trim().trim_matches('"').to_ascii_lowercase()).collect();
    let xi = cols.iter().position(|c| c == "x");
    let yi = cols.iter().position(|c| c == "y");
    let (xi, yi) = match (xi, yi) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Parse { line: 1, message: format!("header must name x and y, got `{header}`") }),
    };
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64> {
            let raw = fields.get(i).ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected at least {} columns", i + 1),
            })?;
            let v: f64 = raw.trim().trim_matches('"').parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line: line_no, message: "non-finite coordinate".into() });
            }
            Ok(v)
        };
        out.push(Point::new(parse(xi)?, parse(yi)?));
    }
    Ok(out)
}

/// Weighted locations from CSV with header `x,y,weight`.
pub fn parse_weighted_csv<R: Read>(reader: R) -> Result<Vec<WeightedPoint>> {
    #[derive(Deserialize)]
    struct Row {
        x: f64,
        y: f64,
        weight: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize::<Row>().enumerate() {
        let line = k + 2;
        let r = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if !(r.x.is_finite() && r.y.is_finite() && r.weight >= 0.0 && r.weight.is_finite()) {
            return Err(Error::Parse { line, message: "coordinates must be finite and weight ≥ 0".into() });
        }
        out.push(WeightedPoint { point: Point::new(r.x, r.y), weight: r.weight });
    }
    Ok(out)
}

pub fn parse_points_geojson(text: &str) -> Result<Vec<Point>> {
    let doc: serde_json::Value = serde_json::from_str(text)?;
    let features = match doc.get("features").and_then(|f| f.as_array()) {
        Some(f) => f.clone(),
        None if doc.get("type").and_then(|t| t.as_str()) == Some("Feature") => vec![doc.clone()],
        None => return Err(Error::Parse { line: 1, message: "no features array".into() }),
    };
    let mut out = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let geom = f.get("geometry").unwrap_or(f);
        let bad = |m: &str| Error::Parse { line: i + 1, message: format!("feature {i}: {m}") };
        if geom.get("type").and_then(|t| t.as_str()) != Some("Point") {
            return Err(bad("geometry is not a Point"));
        }
        let c = geom.get("coordinates").and_then(|c| c.as_array()).ok_or_else(|| bad("missing coordinates"))?;
        let x = c.first().and_then(|v| v.as_f64()).ok_or_else(|| bad("bad x"))?;
        let y = c.get(1).and_then(|v| v.as_f64()).ok_or_else(|| bad("bad y"))?;
        out.push(Point::new(x, y));
    }
    Ok(out)
}

/// Regular raster geometry. Values sit at cell centres; row 0 is the southern row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub xll: f64,
    pub yll: f64,
    pub cell: f64,
    pub ncols: usize,
    pub nrows: usize,
}

impl RasterSpec {
    /// Smallest raster with the given cell size covering `r`.
    pub fn covering(r: Rect, cell: f64) -> Self {
        let ncols = ((r.width() / cell) - 1e-9).ceil().max(1.0) as usize;
        let nrows = ((r.height() / cell) - 1e-9).ceil().max(1.0) as usize;
        Self { xll: r.xmin, yll: r.ymin, cell, ncols, nrows }
    }

    /// Raster whose cell centres fall on the knots `r.min + k·cell`, so a
    /// structured mesh with the same spacing samples it exactly at its vertices.
    pub fn knot_aligned(r: Rect, cell: f64) -> Self {
        let ncols = ((r.width() / cell) + 1e-9).floor() as usize + 1;
        let nrows = ((r.height() / cell) + 1e-9).floor() as usize + 1;
        Self { xll: r.xmin - 0.5 * cell, yll: r.ymin - 0.5 * cell, cell, ncols, nrows }
    }

    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, col: usize, row: usize) -> Point {
        Point::new(
            self.xll + (col as f64 + 0.5) * self.cell,
            self.yll + (row as f64 + 0.5) * self.cell,
        )
    }

    pub fn extent(&self) -> Rect {
        Rect::new(
            self.xll,
            self.yll,
            self.xll + self.ncols as f64 * self.cell,
            self.yll + self.nrows as f64 * self.cell,
        )
    }

    pub fn cell_area(&self) -> f64 {
        self.cell * self.cell
    }
}

/// Mean/sd used to standardise a covariate, kept for back-transforming β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub spec: RasterSpec,
    pub values: Vec<f64>,
    #[serde(default)]
    pub standardization: Option<Standardization>,
}

impl ScalarField {
    pub fn new(spec: RasterSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Config(format!(
                "raster has {} values, expected {}",
                values.len(),
                spec.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("raster contains non-finite values".into()));
        }
        Ok(Self { spec, values, standardization: None })
    }

    pub fn from_fn(spec: RasterSpec, f: impl Fn(Point) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.len());
        for row in 0..spec.nrows {
            for col in 0..spec.ncols {
                values.push(f(spec.center(col, row)));
            }
        }
        Self::new(spec, values)
    }

    pub fn constant(spec: RasterSpec, v: f64) -> Result<Self> {
        Self::new(spec, vec![v; spec.len()])
    }

    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.spec.ncols + col]
    }

    /// Bilinear interpolation between cell centres, linear extrapolation
    /// within the outer half cell.
    pub fn value(&self, p: &Point) -> f64 {
        let s = &self.spec;
        let axis = |coord: f64, origin: f64, n: usize| -> (usize, usize, f64) {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let u = (coord - origin) / s.cell - 0.5;
            let i0 = (u.floor().max(0.0) as usize).min(n - 2);
            (i0, i0 + 1, u - i0 as f64)
        };
        let (c0, c1, tx) = axis(p.x, s.xll, s.ncols);
        let (r0, r1, ty) = axis(p.y, s.yll, s.nrows);
        let v00 = self.at(c0, r0);
        let v10 = self.at(c1, r0);
        let v01 = self.at(c0, r1);
        let v11 = self.at(c1, r1);
        let a = v00 + tx * (v10 - v00);
        let b = v01 + tx * (v11 - v01);
        a + ty * (b - a)
    }

    /// Raster integral: Σ value × cell area.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_area()
    }

    pub fn mean_sd(&self) -> (f64, f64) {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Standardise to raster mean 0 and sd 1, recording the transform.
    pub fn standardized(&self) -> Result<Self> {
        let (mean, sd) = self.mean_sd();
        if !(sd > 0.0) {
            return Err(Error::Config("cannot standardise a constant raster".into()));
        }
        let mut values: Vec<f64> = self.values.iter().map(|v| (v - mean) / sd).collect();
        // one more centring pass removes the rounding left by the first
        let m2 = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= m2);
        Ok(Self { spec: self.spec, values, standardization: Some(Standardization { mean, sd }) })
    }

    /// `log(max(v, PD_FLOOR))` cellwise, for turning a density into an offset.
    pub fn log_floored(&self) -> Self {
        Self {
            spec: self.spec,
            values: self.values.iter().map(|v| v.max(PD_FLOOR).ln()).collect(),
            standardization: None,
        }
    }

    /// ESRI ASCII grid text. The header uses cell-corner registration.
    pub fn to_ascii_grid(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\nNODATA_value -9999\n",
            s.ncols, s.nrows, s.xll, s.yll, s.cell
        );
        for row in (0..s.nrows).rev() {
            let line: Vec<String> = (0..s.ncols).map(|c| format!("{}", self.at(c, row))).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_ascii_grid(text: &str) -> Result<Self> {
        let mut header = std::collections::HashMap::new();
        let mut data: Vec<f64> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let Some(first) = it.next() else { continue };
            if first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                let v: f64 = it.next().and_then(|v| v.parse().ok()).ok_or(Error::Parse {
                    line: ln + 1,
                    message: format!("bad header line `{line}`"),
                })?;
                header.insert(first.to_ascii_lowercase(), v);
            } else {
                for tok in std::iter::once(first).chain(it) {
                    data.push(tok.parse().map_err(|_| Error::Parse {
                        line: ln + 1,
                        message: format!("`{tok}` is not a number"),
                    })?);
                }
            }
        }
        let get = |k: &str| {
            header.get(k).copied().ok_or(Error::Parse { line: 1, message: format!("missing `{k}`") })
        };
        let ncols = get("ncols")? as usize;
        let nrows = get("nrows")? as usize;
        let cell = get("cellsize")?;
        let (xll, yll) = match (header.get("xllcorner"), header.get("xllcenter")) {
            (Some(&x), _) => (x, get("yllcorner")?),
            (None, Some(&x)) => (x - cell / 2.0, get("yllcenter")? - cell / 2.0),
            _ => return Err(Error::Parse { line: 1, message: "missing xllcorner".into() }),
        };
        let spec = RasterSpec { xll, yll, cell, ncols, nrows };
        if data.len() != spec.len() {
            return Err(Error::Parse {
                line: 7,
                message: format!("expected {} values, found {}", spec.len(), data.len()),
            });
        }
        let mut values = vec![0.0; spec.len()];
        for (k, v) in data.into_iter().enumerate() {
            let (file_row, col) = (k / ncols, k % ncols);
            values[(nrows - 1 - file_row) * ncols + col] = v;
        }
        Self::new(spec, values)
    }
}

/// A weighted location, e.g. a household with its head count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedPoint {
    pub point: Point,
    pub weight: f64,
}

/// Isotropic Gaussian KDE of a population, rescaled so that the raster
/// integral equals `total_population` (persons / m²).
pub fn population_kde(
    population: &[WeightedPoint],
    bandwidth: f64,
    spec: RasterSpec,
    total_population: f64,
) -> Result<ScalarField> {
    if !(bandwidth > 0.0) {
        return Err(Error::Parameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if population.is_empty() || population.iter().all(|p| p.weight <= 0.0) {
        return Err(Error::Config("population KDE needs at least one weighted point".into()));
    }
    if !(total_population > 0.0) {
        return Err(Error::Config("total population must be positive".into()));
    }
    let inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let cutoff2 = (8.0 * bandwidth).powi(2);
    let mut values = vec![0.0; spec.len()];
    for row in 0..spec.nrows {
        for col in 0..spec.ncols {
            let c = spec.center(col, row);
            let mut acc = 0.0;
            for wp in population {
                let d2 = (c.x - wp.point.x).powi(2) + (c.y - wp.point.y).powi(2);
                if d2 < cutoff2 {
                    acc += wp.weight * (-d2 * inv2h2).exp();
                }
            }
            values[row * spec.ncols + col] = acc;
        }
    }
    let mass = values.iter().sum::<f64>() * spec.cell_area();
    if !(mass > 0.0) {
        return Err(Error::Numeric("population kernel mass vanished on the raster".into()));
    }
    let scale = total_population / mass;
    values.iter_mut().for_each(|v| *v *= scale);
    ScalarField::new(spec, values)
}

/// Standardised Euclidean distance to `anchor`.
pub fn distance_covariate(anchor: Point, spec: RasterSpec) -> Result<ScalarField> {
    ScalarField::from_fn(spec, |c| c.dist(&anchor))?.standardized()
}

/// Everything an intruder is assumed to know about a release, plus the
/// scores it was released under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseManifest {
    pub schema: u32,
    pub mechanism: String,
    pub parameters: serde_json::Value,
    pub mesh_hash: String,
    pub seeds: serde_json::Value,
    pub chain_hashes: Vec<String>,
    pub risk: Option<serde_json::Value>,
    pub utility: Option<serde_json::Value>,
    pub points_hash: String,
    #[serde(default)]
    pub manifest_hash: String,
}

impl ReleaseManifest {
    /// SHA-256 over the manifest with its own hash field blanked.
    pub fn compute_hash(&self) -> String {
        let mut m = self.clone();
        m.manifest_hash = String::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&m).expect("manifest serialises")))
    }
}

const ARCHIVE_POINTS: &str = "points.csv";
const ARCHIVE_MANIFEST: &str = "manifest.json";

/// Write a release archive (tar with `points.csv` and `manifest.json`).
/// Refuses unless both a risk and a utility report are attached.
pub fn save_release(manifest: &ReleaseManifest, pattern: &PointPattern, path: &Path) -> Result<PathBuf> {
    if manifest.risk.is_none() {
        return Err(Error::Config("release has no risk report; score it first".into()));
    }
    if manifest.utility.is_none() {
        return Err(Error::Config("release has no utility report; score it first".into()));
    }
    let mut m = manifest.clone();
    m.schema = 1;
    m.points_hash = pattern.hash();
    m.parameters = with_domain(m.parameters, pattern);
    m.manifest_hash = m.compute_hash();
    let manifest_bytes = serde_json::to_vec_pretty(&m)?;
    let points_bytes = pattern.to_csv_string().into_bytes();

    let file = fs::File::create(path)?;
    let mut builder = tar::Builder::new(file);
    builder.mode(tar::HeaderMode::Deterministic);
    for (name, bytes) in [(ARCHIVE_MANIFEST, &manifest_bytes), (ARCHIVE_POINTS, &points_bytes)] {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        builder.append_data(&mut header, name, bytes.as_slice())?;
    }
    builder.into_inner()?.sync_all()?;
    Ok(path.to_path_buf())
}

fn with_domain(mut params: serde_json::Value, pattern: &PointPattern) -> serde_json::Value {
    if let serde_json::Value::Object(ref mut map) = params {
        map.insert("domain".into(), serde_json::to_value(pattern.domain).expect("rect serialises"));
        map.insert("label".into(), serde_json::Value::String(pattern.label.clone()));
    }
    params
}

pub fn load_release(path: &Path) -> Result<(ReleaseManifest, PointPattern)> {
    let mut archive = tar::Archive::new(fs::File::open(path)?);
    let mut manifest: Option<ReleaseManifest> = None;
    let mut points_text: Option<String> = None;
    for entry in archive.entries()? {
        let mut entry = entry?;
        let name = entry.path()?.to_string_lossy().into_owned();
        let mut buf = String::new();
        entry.read_to_string(&mut buf)?;
        match name.as_str() {
            ARCHIVE_MANIFEST => manifest = Some(serde_json::from_str(&buf)?),
            ARCHIVE_POINTS => points_text = Some(buf),
            _ => {}
        }
    }
    let manifest = manifest.ok_or_else(|| Error::Config("archive lacks manifest.json".into()))?;
    let text = points_text.ok_or_else(|| Error::Config("archive lacks points.csv".into()))?;
    let points = parse_points_csv(text.as_bytes())?;
    let domain: Rect = manifest
        .parameters
        .get("domain")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::Config("manifest lacks the domain".into()))?;
    let label = manifest.parameters.get("label").and_then(|l| l.as_str()).unwrap_or_default().to_string();
    let pattern = PointPattern::new(points, domain, label)?;
    if pattern.hash() != manifest.points_hash {
        return Err(Error::Config("points do not match the manifest hash".into()));
    }
    Ok((manifest, pattern))
}
