//! Ingestion of daily temperature records in the EPA AirData layout, and a
//! local planar projection for longitude/latitude sites.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use crate::distributed::EARTH_RADIUS_KM;
use crate::error::{Error, Result};

const COLUMNS: [&str; 7] = [
    "State.Code",
    "County.Code",
    "Site.Num",
    "Longitude",
    "Latitude",
    "Date.Local",
    "X1st.Max.Value",
];

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Convert readings from Fahrenheit to Celsius.
    pub fahrenheit: bool,
    /// Readings outside `[lower, upper]` (after conversion) are dropped.
    pub lower: f64,
    pub upper: f64,
    /// Inclusive `Date.Local` range, compared as strings (ISO dates sort correctly).
    pub date_range: Option<(String, String)>,
    /// Keep only sites inside `[lon_min, lon_max] × [lat_min, lat_max]`.
    pub bbox: Option<[f64; 4]>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            fahrenheit: true,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            date_range: None,
            bbox: None,
        }
    }
}

/// One monitoring site and its daily readings.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    /// `state-county-site`.
    pub id: String,
    /// `[longitude, latitude]`.
    pub lonlat: [f64; 2],
    pub readings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub sites: Vec<Site>,
    /// All dates with at least one kept reading, sorted.
    pub dates: Vec<String>,
    pub outliers: usize,
    pub duplicates: usize,
    /// One message per skipped malformed row.
    pub warnings: Vec<String>,
    /// `1 − readings / (sites × dates)`.
    pub missing_fraction: f64,
}

impl IngestReport {
    /// Sites with a reading on `date`, with that reading.
    pub fn day(&self, date: &str) -> Vec<(&Site, f64)> {
        self.sites
            .iter()
            .filter_map(|s| s.readings.get(date).map(|v| (s, *v)))
            .collect()
    }
}

pub fn fahrenheit_to_celsius(f: f64) -> f64 {
    (f - 32.0) * 5.0 / 9.0
}

pub fn ingest_file(path: &Path, options: &IngestOptions) -> Result<IngestReport> {
    ingest_csv(std::fs::File::open(path)?, options)
}

/// Groups rows by site, converts units, drops outliers and keeps the first
/// reading for a repeated `(site, date)`.
pub fn ingest_csv<R: Read>(r: R, options: &IngestOptions) -> Result<IngestReport> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rd.headers()?.clone();
    let idx: Vec<usize> = COLUMNS
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::invalid(format!("missing column {c}")))
        })
        .collect::<Result<_>>()?;

    let mut sites: Vec<Site> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut dates = BTreeSet::new();
    let (mut outliers, mut duplicates, mut rows) = (0, 0, 0);
    let mut warnings = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        rows += 1;
        let row = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("row {row}: {e}"));
                continue;
            }
        };
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let num = |k: usize| get(k).parse::<f64>().ok().filter(|v| v.is_finite());
        let (Some(lon), Some(lat), Some(raw)) = (num(3), num(4), num(6)) else {
            warnings.push(format!("row {row}: unparsable longitude, latitude or value"));
            continue;
        };
        if lat.abs() > 90.0 || lon.abs() > 180.0 {
            warnings.push(format!("row {row}: coordinates out of range"));
            continue;
        }
        let date = get(5).to_string();
        if date.is_empty() {
            warnings.push(format!("row {row}: missing date"));
            continue;
        }
        if let Some((lo, hi)) = &options.date_range {
            if date.as_str() < lo.as_str() || date.as_str() > hi.as_str() {
                continue;
            }
        }
        if let Some([x0, x1, y0, y1]) = options.bbox {
            if lon < x0 || lon > x1 || lat < y0 || lat > y1 {
                continue;
            }
        }
        let value = if options.fahrenheit { fahrenheit_to_celsius(raw) } else { raw };
        if value < options.lower || value > options.upper {
            outliers += 1;
            continue;
        }
        let id = format!("{}-{}-{}", get(0), get(1), get(2));
        let k = *by_id.entry(id.clone()).or_insert_with(|| {
            sites.push(Site {
                id,
                lonlat: [lon, lat],
                readings: BTreeMap::new(),
            });
            sites.len() - 1
        });
        let site = &mut sites[k];
        if site.readings.contains_key(&date) {
            duplicates += 1;
            continue;
        }
        dates.insert(date.clone());
        site.readings.insert(date, value);
    }
    if rows == 0 {
        return Err(Error::invalid("input contains no data rows"));
    }
    let total: usize = sites.iter().map(|s| s.readings.len()).sum();
    let cells = sites.len() * dates.len();
    let missing_fraction = if cells == 0 { 0.0 } else { 1.0 - total as f64 / cells as f64 };
    Ok(IngestReport {
        sites,
        dates: dates.into_iter().collect(),
        outliers,
        duplicates,
        warnings,
        missing_fraction,
    })
}

/// Equirectangular projection about a reference point, in km.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    pub lon0: f64,
    pub lat0: f64,
}

impl LocalProjection {
    /// Centered on the mean longitude and latitude of `points`.
    pub fn centered(points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot center a projection on no points"));
        }
        let n = points.len() as f64;
        Ok(LocalProjection {
            lon0: points.iter().map(|p| p[0]).sum::<f64>() / n,
            lat0: points.iter().map(|p| p[1]).sum::<f64>() / n,
        })
    }

    pub fn forward(&self, lonlat: [f64; 2]) -> [f64; 2] {
        let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        [
            k * (lonlat[0] - self.lon0) * self.lat0.to_radians().cos(),
            k * (lonlat[1] - self.lat0),
        ]
    }

    pub fn inverse(&self, xy: [f64; 2]) -> [f64; 2] {
        let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        [
            self.lon0 + xy[0] / (k * self.lat0.to_radians().cos()),
            self.lat0 + xy[1] / k,
        ]
    }
}
