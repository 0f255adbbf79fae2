//! On-disk dataset schemas and the cross-referenced in-memory store.
//!
//! A dataset directory holds six files:
//!
//! * `graph.txt` — `num_nodes=<N>` header plus one `i j` edge per line,
//! * `segments.csv` — static attributes and POI counts per segment,
//! * `speeds.csv` — hourly traffic rows; absent rows are missing buckets,
//! * `weather.csv` — one row per hour over the whole span,
//! * `accidents.csv` — one row per accident event,
//! * `holidays.txt` — one `YYYY-MM-DD` per line.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_adjacency, parse_edge_list, write_edge_list, RoadGraph, SegmentAttrs, SparseAdjacency};
use crate::model::EXTERNAL_FEATURES;

/// Weather-event codes: 0 clear, 1 rain, 2 snow, 3 fog, 4 storm.
pub const NUM_EVENT_CODES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccidentRecord {
    pub segment_id: usize,
    pub epoch_minute: i64,
    pub severity: u32,
    pub incident_type: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SegmentRow {
    segment_id: usize,
    road_type: u32,
    lanes: u32,
    length_m: f64,
    speed_limit: f64,
    poi_school: u32,
    poi_shop: u32,
    poi_hospital: u32,
    poi_transit: u32,
    poi_other: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpeedRow {
    segment_id: usize,
    epoch_hour: i64,
    avg_speed: f64,
    veh_count: f64,
    occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherRow {
    pub epoch_hour: i64,
    pub temp_c: f64,
    pub precip_mm: f64,
    pub visibility_km: f64,
    pub wind_kmh: f64,
    pub event_code: u32,
}

/// One observed traffic bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedBucket {
    pub avg_speed: f64,
    pub veh_count: f64,
    pub occupancy: f64,
}

/// Hourly traffic grid with gaps, segment-major.
#[derive(Debug, Clone)]
pub struct SpeedTable {
    pub start_hour: i64,
    pub num_hours: usize,
    pub num_segments: usize,
    pub buckets: Vec<Option<SpeedBucket>>,
}

impl SpeedTable {
    pub fn get(&self, segment: usize, hour: i64) -> Option<&SpeedBucket> {
        let t = usize::try_from(hour - self.start_hour).ok()?;
        if t >= self.num_hours {
            return None;
        }
        self.buckets[segment * self.num_hours + t].as_ref()
    }

    pub fn missing_fraction(&self) -> f64 {
        let missing = self.buckets.iter().filter(|b| b.is_none()).count();
        missing as f64 / self.buckets.len().max(1) as f64
    }
}

/// Gap-free traffic grid; `imputed[idx]` marks buckets that were filled.
#[derive(Debug, Clone)]
pub struct FilledSpeedTable {
    pub start_hour: i64,
    pub num_hours: usize,
    pub num_segments: usize,
    pub buckets: Vec<SpeedBucket>,
    pub imputed: Vec<bool>,
}

impl FilledSpeedTable {
    pub fn get(&self, segment: usize, hour: i64) -> &SpeedBucket {
        let t = usize::try_from(hour - self.start_hour).expect("hour in span");
        assert!(t < self.num_hours, "hour outside span");
        &self.buckets[segment * self.num_hours + t]
    }
}

/// Hourly weather covering the whole span contiguously.
#[derive(Debug, Clone)]
pub struct WeatherTable {
    pub start_hour: i64,
    pub rows: Vec<WeatherRow>,
}

impl WeatherTable {
    pub fn num_hours(&self) -> usize {
        self.rows.len()
    }

    pub fn end_hour(&self) -> i64 {
        self.start_hour + self.rows.len() as i64
    }

    pub fn get(&self, hour: i64) -> Option<&WeatherRow> {
        let t = usize::try_from(hour - self.start_hour).ok()?;
        self.rows.get(t)
    }
}

/// Fully cross-referenced dataset.
#[derive(Debug, Clone)]
pub struct IngestedStore {
    pub graph: RoadGraph,
    pub adjacency: SparseAdjacency,
    pub speeds: SpeedTable,
    pub weather: WeatherTable,
    pub accidents: Vec<AccidentRecord>,
    pub holidays: BTreeSet<NaiveDate>,
}

impl IngestedStore {
    pub fn start_hour(&self) -> i64 {
        self.weather.start_hour
    }

    pub fn end_hour(&self) -> i64 {
        self.weather.end_hour()
    }
}

// ---- calendar and external features ------------------------------------------

/// Derived calendar fields for an epoch hour: hour-of-day, day-of-week
/// (Monday = 0), is-weekend, is-holiday.
pub fn calendar_features(epoch_hour: i64, holidays: &BTreeSet<NaiveDate>) -> [f64; 4] {
    let ts = DateTime::<Utc>::from_timestamp(epoch_hour * 3600, 0).expect("valid epoch hour");
    let date = ts.date_naive();
    let dow = date.weekday().num_days_from_monday();
    let is_weekend = u32::from(dow >= 5);
    let is_holiday = u32::from(holidays.contains(&date));
    [
        f64::from(ts.hour()),
        f64::from(dow),
        f64::from(is_weekend),
        f64::from(is_holiday),
    ]
}

/// Raw (un-normalized) external feature vector for an hour: weather readings,
/// one-hot event code, calendar fields.
pub fn external_features(row: &WeatherRow, holidays: &BTreeSet<NaiveDate>) -> Vec<f64> {
    let mut out = Vec::with_capacity(EXTERNAL_FEATURES);
    out.push(row.temp_c);
    out.push(row.precip_mm);
    out.push(row.visibility_km);
    out.push(row.wind_kmh);
    for code in 0..NUM_EVENT_CODES {
        out.push(f64::from(u32::from(row.event_code as usize == code)));
    }
    out.extend(calendar_features(row.epoch_hour, holidays));
    debug_assert_eq!(out.len(), EXTERNAL_FEATURES);
    out
}

// ---- ingestion ----------------------------------------------------------------

fn open(dir: &Path, name: &str) -> Result<BufReader<File>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    Ok(BufReader::new(File::open(path)?))
}

fn csv_rows<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Vec<T>> {
    let reader = open(dir, name)?;
    let mut csv = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in csv.deserialize::<T>() {
        match row {
            Ok(v) => out.push(v),
            Err(e) => {
                let line = e
                    .position()
                    .map_or(0, |p| usize::try_from(p.line()).unwrap_or(0));
                return Err(Error::Ingestion {
                    file: name.to_string(),
                    line,
                    msg: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Read and cross-validate all six dataset files.
pub fn ingest(dir: &Path) -> Result<IngestedStore> {
    let (num_nodes, edges) = parse_edge_list(open(dir, "graph.txt")?, "graph.txt")?;

    let seg_rows: Vec<SegmentRow> = csv_rows(dir, "segments.csv")?;
    if seg_rows.len() != num_nodes {
        return Err(Error::Ingestion {
            file: "segments.csv".into(),
            line: 0,
            msg: format!("{} rows for {num_nodes} nodes", seg_rows.len()),
        });
    }
    let mut static_attrs = vec![None; num_nodes];
    for (i, row) in seg_rows.iter().enumerate() {
        if row.segment_id >= num_nodes {
            return Err(Error::Ingestion {
                file: "segments.csv".into(),
                line: i + 2,
                msg: format!("unknown segment_id {}", row.segment_id),
            });
        }
        static_attrs[row.segment_id] = Some(SegmentAttrs {
            road_type: row.road_type,
            lanes: row.lanes,
            length_m: row.length_m,
            speed_limit_kmh: row.speed_limit,
            poi_counts: [
                row.poi_school,
                row.poi_shop,
                row.poi_hospital,
                row.poi_transit,
                row.poi_other,
            ],
        });
    }
    let static_attrs: Vec<SegmentAttrs> = static_attrs
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            a.ok_or_else(|| Error::Ingestion {
                file: "segments.csv".into(),
                line: 0,
                msg: format!("no attribute row for segment {i}"),
            })
        })
        .collect::<Result<_>>()?;
    let graph = RoadGraph {
        num_nodes,
        edges,
        static_attrs,
    };
    let adjacency = build_adjacency(&graph)?;

    let weather_rows: Vec<WeatherRow> = csv_rows(dir, "weather.csv")?;
    if weather_rows.is_empty() {
        return Err(Error::Ingestion {
            file: "weather.csv".into(),
            line: 0,
            msg: "no weather rows".into(),
        });
    }
    let start_hour = weather_rows[0].epoch_hour;
    for (i, row) in weather_rows.iter().enumerate() {
        if row.epoch_hour != start_hour + i as i64 {
            return Err(Error::Ingestion {
                file: "weather.csv".into(),
                line: i + 2,
                msg: format!("non-contiguous epoch_hour {}", row.epoch_hour),
            });
        }
        if row.event_code as usize >= NUM_EVENT_CODES {
            return Err(Error::Ingestion {
                file: "weather.csv".into(),
                line: i + 2,
                msg: format!("unknown event_code {}", row.event_code),
            });
        }
    }
    let weather = WeatherTable {
        start_hour,
        rows: weather_rows,
    };
    let num_hours = weather.num_hours();

    let speed_rows: Vec<SpeedRow> = csv_rows(dir, "speeds.csv")?;
    let mut buckets = vec![None; num_nodes * num_hours];
    for (i, row) in speed_rows.iter().enumerate() {
        if row.segment_id >= num_nodes {
            return Err(Error::Ingestion {
                file: "speeds.csv".into(),
                line: i + 2,
                msg: format!("unknown segment_id {}", row.segment_id),
            });
        }
        let t = row.epoch_hour - start_hour;
        if t < 0 || t >= num_hours as i64 {
            return Err(Error::Ingestion {
                file: "speeds.csv".into(),
                line: i + 2,
                msg: format!("epoch_hour {} outside the weather span", row.epoch_hour),
            });
        }
        if !(0.0..=1.0).contains(&row.occupancy) {
            return Err(Error::Ingestion {
                file: "speeds.csv".into(),
                line: i + 2,
                msg: format!("occupancy {} outside [0, 1]", row.occupancy),
            });
        }
        buckets[row.segment_id * num_hours + t as usize] = Some(SpeedBucket {
            avg_speed: row.avg_speed,
            veh_count: row.veh_count,
            occupancy: row.occupancy,
        });
    }
    let speeds = SpeedTable {
        start_hour,
        num_hours,
        num_segments: num_nodes,
        buckets,
    };

    let accidents: Vec<AccidentRecord> = csv_rows(dir, "accidents.csv")?;
    for (i, a) in accidents.iter().enumerate() {
        if a.segment_id >= num_nodes {
            return Err(Error::Ingestion {
                file: "accidents.csv".into(),
                line: i + 2,
                msg: format!("unknown segment_id {}", a.segment_id),
            });
        }
        let minute_lo = start_hour * 60;
        let minute_hi = (start_hour + num_hours as i64) * 60;
        if a.epoch_minute < minute_lo || a.epoch_minute >= minute_hi {
            return Err(Error::Ingestion {
                file: "accidents.csv".into(),
                line: i + 2,
                msg: format!("epoch_minute {} outside the dataset span", a.epoch_minute),
            });
        }
    }

    let mut holidays = BTreeSet::new();
    {
        use std::io::BufRead;
        for (i, line) in open(dir, "holidays.txt")?.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let date = NaiveDate::parse_from_str(t, "%Y-%m-%d").map_err(|e| Error::Ingestion {
                file: "holidays.txt".into(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            holidays.insert(date);
        }
    }

    Ok(IngestedStore {
        graph,
        adjacency,
        speeds,
        weather,
        accidents,
        holidays,
    })
}

// ---- canonical writers --------------------------------------------------------

/// Write a complete dataset bundle in canonical order; used by the synthetic
/// generator and by round-trip checks.
pub fn write_bundle(
    dir: &Path,
    graph: &RoadGraph,
    speeds: &SpeedTable,
    weather: &WeatherTable,
    accidents: &[AccidentRecord],
    holidays: &BTreeSet<NaiveDate>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let f = BufWriter::new(File::create(dir.join("graph.txt"))?);
    write_edge_list(f, graph.num_nodes, &graph.edges)?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("segments.csv"))?));
    for (id, a) in graph.static_attrs.iter().enumerate() {
        w.serialize(SegmentRow {
            segment_id: id,
            road_type: a.road_type,
            lanes: a.lanes,
            length_m: a.length_m,
            speed_limit: a.speed_limit_kmh,
            poi_school: a.poi_counts[0],
            poi_shop: a.poi_counts[1],
            poi_hospital: a.poi_counts[2],
            poi_transit: a.poi_counts[3],
            poi_other: a.poi_counts[4],
        })
        .map_err(csv_write_err)?;
    }
    w.flush()?;

    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(dir.join("speeds.csv"))?));
    w.write_record(["segment_id", "epoch_hour", "avg_speed", "veh_count", "occupancy"])
        .map_err(csv_write_err)?;
    for segment in 0..speeds.num_segments {
        for t in 0..speeds.num_hours {
            if let Some(b) = &speeds.buckets[segment * speeds.num_hours + t] {
                w.serialize(SpeedRow {
                    segment_id: segment,
                    epoch_hour: speeds.start_hour + t as i64,
                    avg_speed: b.avg_speed,
                    veh_count: b.veh_count,
                    occupancy: b.occupancy,
                })
                .map_err(csv_write_err)?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("weather.csv"))?));
    for row in &weather.rows {
        w.serialize(row).map_err(csv_write_err)?;
    }
    w.flush()?;

    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(dir.join("accidents.csv"))?));
    w.write_record(["segment_id", "epoch_minute", "severity", "incident_type"])
        .map_err(csv_write_err)?;
    for a in accidents {
        w.serialize(a).map_err(csv_write_err)?;
    }
    w.flush()?;

    let mut f = BufWriter::new(File::create(dir.join("holidays.txt"))?);
    for d in holidays {
        writeln!(f, "{}", d.format("%Y-%m-%d"))?;
    }
    f.flush()?;

    Ok(())
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn external_feature_width_matches_model_contract() {
        // 4 weather + one-hot event + 4 calendar
        assert_eq!(4 + NUM_EVENT_CODES + 4, EXTERNAL_FEATURES);
    }

    #[test]
    fn calendar_features_are_deterministic_derivations() {
        let mut holidays = BTreeSet::new();
        // 2018-08-01 was a Wednesday
        let hour = NaiveDate::from_ymd_opt(2018, 8, 1)
            .unwrap()
            .and_hms_opt(14, 0, 0)
            .unwrap()
            .and_utc()
            .timestamp()
            / 3600;
        let f = calendar_features(hour, &holidays);
        assert_eq!(f, [14.0, 2.0, 0.0, 0.0]);

        holidays.insert(NaiveDate::from_ymd_opt(2018, 8, 1).unwrap());
        let f = calendar_features(hour, &holidays);
        assert_eq!(f[3], 1.0);

        // 2018-08-04 was a Saturday
        let sat = hour + 3 * 24;
        let f = calendar_features(sat, &holidays);
        assert_eq!(f[1], 5.0);
        assert_eq!(f[2], 1.0);
    }
}
