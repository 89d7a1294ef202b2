//! CSV readers and writers for observations, locations, grids, partitions
//! and metrics tables.

use std::io::{Read, Write};

use crate::distortion::{DistortionParams, SensorSummary};
use crate::distributed::ClusterPartition;
use crate::error::{Error, Result};
use crate::gp::Location;

use super::{Method, MetricsRow};

fn parse_f64(field: Option<&str>, what: &str, row: usize) -> Result<f64> {
    let s = field.ok_or_else(|| Error::invalid(format!("row {row}: missing {what}")))?;
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("row {row}: {what} `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::invalid(format!("row {row}: {what} is not finite")));
    }
    Ok(v)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

/// All readings of one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorData {
    pub id: String,
    pub location: Location,
    pub values: Vec<f64>,
}

impl SensorData {
    pub fn summary(&self) -> Result<SensorSummary> {
        SensorSummary::from_observations(self.location, &self.values)
    }
}

/// Reads `sensor_id,x1,x2,value` rows grouped by sensor in order of first
/// appearance. A sensor reported at two different locations is an error.
pub fn read_observations<R: Read>(r: R) -> Result<Vec<SensorData>> {
    let mut out: Vec<SensorData> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (i, rec) in reader(r).records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let id = rec
            .get(0)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::invalid(format!("row {row}: missing sensor_id")))?
            .to_string();
        let loc = [parse_f64(rec.get(1), "x1", row)?, parse_f64(rec.get(2), "x2", row)?];
        let value = parse_f64(rec.get(3), "value", row)?;
        match index.get(&id) {
            Some(&k) => {
                let s: &mut SensorData = &mut out[k];
                if s.location != loc {
                    return Err(Error::invalid(format!("row {row}: sensor {id} moved location")));
                }
                s.values.push(value);
            }
            None => {
                index.insert(id.clone(), out.len());
                out.push(SensorData {
                    id,
                    location: loc,
                    values: vec![value],
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no observations"));
    }
    Ok(out)
}

pub fn write_observations<W: Write>(w: W, sensors: &[SensorData]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["sensor_id", "x1", "x2", "value"])?;
    for s in sensors {
        for v in &s.values {
            wr.write_record([s.id.clone(), s.location[0].to_string(), s.location[1].to_string(), v.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Reads `sensor_id,x1,x2` (or `sensor_id,longitude,latitude`) rows.
pub fn read_locations<R: Read>(r: R) -> Result<Vec<(String, [f64; 2])>> {
    let mut out = Vec::new();
    for (i, rec) in reader(r).records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::invalid(format!("row {row}: missing sensor_id")));
        }
        out.push((id, [parse_f64(rec.get(1), "coordinate 1", row)?, parse_f64(rec.get(2), "coordinate 2", row)?]));
    }
    if out.is_empty() {
        return Err(Error::invalid("no locations"));
    }
    Ok(out)
}

/// Reconstructed grid with optional truth and predictive variance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridTable {
    pub locations: Vec<Location>,
    pub truth: Option<Vec<f64>>,
    pub estimate: Vec<f64>,
    pub variance: Option<Vec<f64>>,
}

pub fn write_grid<W: Write>(w: W, g: &GridTable) -> Result<()> {
    let n = g.locations.len();
    if g.estimate.len() != n
        || g.truth.as_ref().is_some_and(|t| t.len() != n)
        || g.variance.as_ref().is_some_and(|v| v.len() != n)
    {
        return Err(Error::invalid("grid columns differ in length"));
    }
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["x1", "x2"];
    if g.truth.is_some() {
        header.push("truth");
    }
    header.push("estimate");
    if g.variance.is_some() {
        header.push("predictive_var");
    }
    wr.write_record(&header)?;
    for i in 0..n {
        let mut rec = vec![g.locations[i][0].to_string(), g.locations[i][1].to_string()];
        if let Some(t) = &g.truth {
            rec.push(t[i].to_string());
        }
        rec.push(g.estimate[i].to_string());
        if let Some(v) = &g.variance {
            rec.push(v[i].to_string());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_grid<R: Read>(r: R) -> Result<GridTable> {
    let mut rd = reader(r);
    let headers = rd.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (x1, x2, est) = match (col("x1"), col("x2"), col("estimate")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::invalid("grid CSV needs x1, x2 and estimate columns")),
    };
    let (truth, var) = (col("truth"), col("predictive_var"));
    let mut g = GridTable {
        truth: truth.map(|_| Vec::new()),
        variance: var.map(|_| Vec::new()),
        ..GridTable::default()
    };
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        g.locations.push([parse_f64(rec.get(x1), "x1", row)?, parse_f64(rec.get(x2), "x2", row)?]);
        g.estimate.push(parse_f64(rec.get(est), "estimate", row)?);
        if let (Some(c), Some(v)) = (truth, g.truth.as_mut()) {
            v.push(parse_f64(rec.get(c), "truth", row)?);
        }
        if let (Some(c), Some(v)) = (var, g.variance.as_mut()) {
            v.push(parse_f64(rec.get(c), "predictive_var", row)?);
        }
    }
    if g.locations.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    Ok(g)
}

/// Writes `sensor_id,cluster_id` rows.
pub fn write_partition<W: Write>(w: W, ids: &[String], p: &ClusterPartition) -> Result<()> {
    if ids.len() != p.num_sensors() {
        return Err(Error::invalid("id/partition length mismatch"));
    }
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["sensor_id", "cluster_id"])?;
    for (id, c) in ids.iter().zip(p.assignment()) {
        wr.write_record([id.as_str(), &c.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_partition<R: Read>(r: R) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (i, rec) in reader(r).records().enumerate() {
        let rec = rec?;
        let c: usize = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .filter(|&c| c >= 1)
            .ok_or_else(|| Error::invalid(format!("row {}: invalid cluster_id", i + 2)))?;
        out.push((rec.get(0).unwrap_or("").to_string(), c));
    }
    Ok(out)
}

/// Writes `sensor_id,gain,offset,distorting` rows.
pub fn write_distortions<W: Write>(w: W, ids: &[String], psi: &DistortionParams) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["sensor_id", "gain", "offset", "distorting"])?;
    for (id, d) in ids.iter().zip(&psi.sensors) {
        wr.write_record([
            id.clone(),
            d.gain().to_string(),
            d.offset().to_string(),
            u8::from(!d.is_default()).to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the `distorting` column (0/1) of a distortions CSV, keyed by sensor.
pub fn read_flags<R: Read>(r: R) -> Result<Vec<(String, bool)>> {
    let mut rd = reader(r);
    let headers = rd.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "distorting")
        .ok_or_else(|| Error::invalid("flags CSV needs a distorting column"))?;
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let flag = match rec.get(col) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            _ => return Err(Error::invalid(format!("row {}: distorting must be 0 or 1", i + 2))),
        };
        out.push((rec.get(0).unwrap_or("").to_string(), flag));
    }
    Ok(out)
}

const METRICS_HEADER: [&str; 13] = [
    "label",
    "method",
    "replicate",
    "sensors",
    "observations",
    "snr_db",
    "proportion",
    "relative_mse",
    "fpr",
    "fnr",
    "fpr_undefined",
    "fnr_undefined",
    "status",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_metrics<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(METRICS_HEADER)?;
    for r in rows {
        wr.write_record([
            r.label.clone(),
            r.method.name().to_string(),
            r.replicate.to_string(),
            r.sensors.to_string(),
            r.observations.to_string(),
            r.snr_db.to_string(),
            r.proportion.to_string(),
            r.relative_mse.to_string(),
            opt(r.fpr),
            opt(r.fnr),
            u8::from(r.fpr_undefined).to_string(),
            u8::from(r.fnr_undefined).to_string(),
            r.status.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rd = reader(r);
    if rd.headers()?.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::invalid("unexpected metrics header"));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let get = |k: usize| rec.get(k).unwrap_or("");
        let bad = |what: &str| Error::invalid(format!("row {row}: invalid {what}"));
        let optf = |k: usize| -> Result<Option<f64>> {
            let s = get(k);
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(METRICS_HEADER[k]))
            }
        };
        out.push(MetricsRow {
            label: get(0).to_string(),
            method: get(1).parse::<Method>()?,
            replicate: get(2).parse().map_err(|_| bad("replicate"))?,
            sensors: get(3).parse().map_err(|_| bad("sensors"))?,
            observations: get(4).parse().map_err(|_| bad("observations"))?,
            snr_db: get(5).parse().map_err(|_| bad("snr_db"))?,
            proportion: get(6).parse().map_err(|_| bad("proportion"))?,
            relative_mse: get(7).parse().map_err(|_| bad("relative_mse"))?,
            fpr: optf(8)?,
            fnr: optf(9)?,
            fpr_undefined: get(10) == "1",
            fnr_undefined: get(11) == "1",
            status: get(12).to_string(),
        });
    }
    Ok(out)
}
