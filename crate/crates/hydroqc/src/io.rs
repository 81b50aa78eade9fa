// SPDX-License-Identifier: MIT OR Apache-2.0

//! Delimited-text interchange: site tables, single-agency series and
//! raw/corrected paired archives.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use hydroqc_core::series::is_missing;
use hydroqc_core::units::{convert_units, Conversion, CFS_PER_CMS, FT_PER_M};
use hydroqc_core::{HourlySeries, PairedSeries, Partition, SiteMeta, Timestamp, MISSING};

/// Row- or line-tagged parse failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: u64,
    pub msg: String,
}

fn perr(line: u64, msg: impl Into<String>) -> ParseError {
    ParseError { line, msg: msg.into() }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, ParseError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| perr(1, format!("missing column `{name}`")))
}

fn number(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64, ParseError> {
    let cell = rec.get(idx).unwrap_or("");
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| perr(line, format!("`{name}`: cannot parse `{cell}` as a number")))
}

/// Empty cell is missing; anything else must parse.
fn optional(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64, ParseError> {
    match rec.get(idx).unwrap_or("") {
        "" => Ok(MISSING),
        _ => number(rec, idx, name, line),
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    if !s.ends_with('Z') {
        return None;
    }
    let dt: DateTime<Utc> = DateTime::parse_from_rfc3339(s).ok()?.with_timezone(&Utc);
    let secs = dt.timestamp();
    (secs % 3600 == 0).then(|| Timestamp::floor_seconds(secs))
}

pub fn parse_site_table<R: Read>(r: R) -> Result<Vec<SiteMeta>, ParseError> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let cols: Vec<usize> = ["site_id", "lat", "lon", "drainage_area_km2", "elevation_m", "partition"]
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_, _>>()?;
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = line_of(&rec);
        let id = rec.get(cols[0]).unwrap_or("").to_string();
        let part = rec.get(cols[5]).unwrap_or("");
        let meta = SiteMeta {
            site_id: id.clone(),
            latitude: number(&rec, cols[1], "lat", line)?,
            longitude: number(&rec, cols[2], "lon", line)?,
            drainage_area_km2: number(&rec, cols[3], "drainage_area_km2", line)?,
            elevation_m: number(&rec, cols[4], "elevation_m", line)?,
            partition: Partition::parse(part).ok_or_else(|| perr(line, format!("unknown partition `{part}`")))?,
        };
        meta.validate().map_err(|e| perr(line, e.to_string()))?;
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(perr(line, format!("duplicate site_id `{id}` (first on line {first})")));
        }
        out.push(meta);
    }
    Ok(out)
}

/// Hour index of a timestamp cell, rejecting off-hour times.
fn hour_of(ts: &str, line: u64) -> Result<i64, ParseError> {
    match DateTime::parse_from_rfc3339(ts) {
        Ok(dt) if ts.ends_with('Z') && dt.timestamp() % 3600 != 0 => Err(perr(
            line,
            format!("timestamp `{ts}` is not on the hour; aggregate sub-hourly data first"),
        )),
        _ => parse_timestamp(ts)
            .map(|t| t.0)
            .ok_or_else(|| perr(line, format!("bad timestamp `{ts}` (ISO-8601 UTC with Z)"))),
    }
}

/// Rows keyed by hour; duplicate and decreasing hours are rejected.
struct HourRows<T> {
    first: i64,
    rows: Vec<(i64, T)>,
}

fn collect_hours<T>(rows: Vec<(i64, u64, T)>) -> Result<HourRows<T>, ParseError> {
    let mut out: Vec<(i64, T)> = Vec::with_capacity(rows.len());
    let mut lines: Vec<u64> = Vec::with_capacity(rows.len());
    for (h, line, v) in rows {
        if let Some(&(prev, _)) = out.last() {
            if h == prev {
                return Err(perr(
                    line,
                    format!("duplicate hour (also on line {})", lines[lines.len() - 1]),
                ));
            }
            if h < prev {
                return Err(perr(line, "timestamps are not increasing"));
            }
        }
        out.push((h, v));
        lines.push(line);
    }
    let first = out.first().map(|r| r.0).unwrap_or(0);
    Ok(HourRows { first, rows: out })
}

/// Parses `timestamp_utc,discharge_cfs,stage_ft[,qualifier]`. Hours absent
/// from the file become missing timesteps.
pub fn parse_timeseries<R: Read>(r: R, site_id: &str) -> Result<HourlySeries, ParseError> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let (ct, cq, ch) = (
        column(&headers, "timestamp_utc")?,
        column(&headers, "discharge_cfs")?,
        column(&headers, "stage_ft")?,
    );
    let cqual = headers.iter().position(|h| h == "qualifier");
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = line_of(&rec);
        let hour = hour_of(rec.get(ct).unwrap_or(""), line)?;
        let q = optional(&rec, cq, "discharge_cfs", line)?;
        let h = optional(&rec, ch, "stage_ft", line)?;
        let qual = cqual.map(|c| rec.get(c).unwrap_or("").to_string());
        rows.push((hour, line, (q, h, qual)));
    }
    let hr = collect_hours(rows)?;
    if hr.rows.len() >= 3 {
        let mut steps: Vec<i64> = hr.rows.windows(2).map(|w| w[1].0 - w[0].0).collect();
        steps.sort_unstable();
        if steps[(steps.len() - 1) / 2] > 1 {
            return Err(perr(1, "cadence is coarser than hourly"));
        }
    }
    let n = hr.rows.last().map(|r| (r.0 - hr.first + 1) as usize).unwrap_or(0);
    let (mut q, mut h) = (vec![MISSING; n], vec![MISSING; n]);
    let mut quals = cqual.map(|_| vec![String::new(); n]);
    for (hour, (vq, vh, qual)) in hr.rows {
        let k = (hour - hr.first) as usize;
        q[k] = vq;
        h[k] = vh;
        if let (Some(qs), Some(s)) = (quals.as_mut(), qual) {
            qs[k] = s;
        }
    }
    let mut s = HourlySeries::new(site_id, Timestamp(hr.first), q, h).map_err(|e| perr(1, e.to_string()))?;
    s.qualifiers = quals;
    Ok(s)
}

fn si(v: f64, kind: Conversion, line: u64) -> Result<f64, ParseError> {
    if is_missing(v) {
        Ok(MISSING)
    } else {
        convert_units(v, kind).map_err(|e| perr(line, e.to_string()))
    }
}

/// Parses the five-column SI archive
/// `timestamp_utc,stage_raw_m,stage_corr_m,discharge_raw_m3s,discharge_corr_m3s`
/// and converts to feet and cubic feet per second.
pub fn parse_paired<R: Read>(r: R, site_id: &str) -> Result<PairedSeries, ParseError> {
    let mut rdr = reader(r);
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let names = [
        "timestamp_utc",
        "stage_raw_m",
        "stage_corr_m",
        "discharge_raw_m3s",
        "discharge_corr_m3s",
    ];
    let cols: Vec<usize> = names.iter().map(|c| column(&headers, c)).collect::<Result<_, _>>()?;
    let mut channels: [Vec<(i64, u64, f64)>; 4] = Default::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = line_of(&rec);
        let hour = hour_of(rec.get(cols[0]).unwrap_or(""), line)?;
        for c in 0..4 {
            let v = optional(&rec, cols[c + 1], names[c + 1], line)?;
            if !is_missing(v) {
                channels[c].push((hour, line, v));
            }
        }
    }
    paired_from_channels(site_id, channels)
}

/// Aligns four SI channels, each a list of `(hour, line, value)`, on the
/// union of their hours.
pub fn paired_from_channels(site_id: &str, channels: [Vec<(i64, u64, f64)>; 4]) -> Result<PairedSeries, ParseError> {
    let mut maps: Vec<BTreeMap<i64, f64>> = Vec::with_capacity(4);
    let mut spans = Vec::with_capacity(4);
    for ch in channels {
        let hr = collect_hours(ch)?;
        let kind = if maps.len() < 2 {
            Conversion::StageMToFt
        } else {
            Conversion::DischargeM3sToFt3s
        };
        let mut m = BTreeMap::new();
        for (h, v) in hr.rows {
            m.insert(h, si(v, kind, 0)?);
        }
        let span = match (m.keys().next(), m.keys().next_back()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(perr(1, "a paired channel has no values")),
        };
        spans.push(span);
        maps.push(m);
    }
    let lo = spans.iter().map(|s| s.0).max().unwrap_or(0);
    let hi = spans.iter().map(|s| s.1).min().unwrap_or(-1);
    if lo > hi {
        return Err(perr(1, "paired channels do not overlap in time"));
    }
    let first = spans.iter().map(|s| s.0).min().unwrap_or(0);
    let last = spans.iter().map(|s| s.1).max().unwrap_or(0);
    let n = (last - first + 1) as usize;
    let chan = |m: &BTreeMap<i64, f64>| -> Vec<f64> {
        (0..n)
            .map(|k| *m.get(&(first + k as i64)).unwrap_or(&MISSING))
            .collect()
    };
    Ok(PairedSeries {
        site_id: site_id.to_string(),
        start: Timestamp(first),
        stage_raw: chan(&maps[0]),
        stage_corrected: chan(&maps[1]),
        discharge_raw: chan(&maps[2]),
        discharge_corrected: chan(&maps[3]),
    })
}

fn cell(v: f64, decimals: usize) -> String {
    if is_missing(v) {
        String::new()
    } else {
        format!("{v:.decimals$}")
    }
}

pub fn write_site_table<W: Write>(w: W, sites: &[SiteMeta]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["site_id", "lat", "lon", "drainage_area_km2", "elevation_m", "partition"])?;
    for s in sites {
        wr.write_record([
            s.site_id.clone(),
            s.latitude.to_string(),
            s.longitude.to_string(),
            s.drainage_area_km2.to_string(),
            s.elevation_m.to_string(),
            s.partition.name().to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Discharge at 3 decimals, stage at 4; missing hours are written as rows
/// with empty cells.
pub fn write_timeseries<W: Write>(w: W, s: &HourlySeries) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let with_q = s.qualifiers.is_some();
    if with_q {
        wr.write_record(["timestamp_utc", "discharge_cfs", "stage_ft", "qualifier"])?;
    } else {
        wr.write_record(["timestamp_utc", "discharge_cfs", "stage_ft"])?;
    }
    for k in 0..s.len() {
        let mut row = vec![s.timestamp(k).to_string(), cell(s.discharge[k], 3), cell(s.stage[k], 4)];
        if let Some(q) = &s.qualifiers {
            row.push(q[k].clone());
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes a paired archive back in SI units with 6 decimals.
pub fn write_paired<W: Write>(w: W, p: &PairedSeries) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "timestamp_utc",
        "stage_raw_m",
        "stage_corr_m",
        "discharge_raw_m3s",
        "discharge_corr_m3s",
    ])?;
    for k in 0..p.len() {
        wr.write_record([
            p.start.plus_hours(k as i64).to_string(),
            cell(p.stage_raw[k] / FT_PER_M, 6),
            cell(p.stage_corrected[k] / FT_PER_M, 6),
            cell(p.discharge_raw[k] / CFS_PER_CMS, 6),
            cell(p.discharge_corrected[k] / CFS_PER_CMS, 6),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "site_id,lat,lon,drainage_area_km2,elevation_m,partition\n";

    #[test]
    fn site_row() {
        let t = format!("{HEAD}01646500, 38.95, -77.13, 29940, 10, train\n");
        let s = parse_site_table(t.as_bytes()).unwrap();
        assert_eq!(s[0].site_id, "01646500");
        assert_eq!(s[0].latitude, 38.95);
        assert_eq!(s[0].longitude, -77.13);
        assert_eq!(s[0].drainage_area_km2, 29940.0);
        assert_eq!(s[0].elevation_m, 10.0);
        assert_eq!(s[0].partition, Partition::Train);
    }

    #[test]
    fn duplicate_site_cites_second_row() {
        let mut t = HEAD.to_string();
        for i in 1..=7 {
            let id = if i == 3 || i == 7 {
                "dup".to_string()
            } else {
                format!("s{i}")
            };
            t.push_str(&format!("{id},40,-100,10,5,test\n"));
        }
        let e = parse_site_table(t.as_bytes()).unwrap_err();
        assert_eq!(e.line, 8, "{e}");
        assert!(e.msg.contains("line 4"), "{e}");
    }

    #[test]
    fn latitude_range() {
        let t = format!("{HEAD}a,95,-77,10,1,train\n");
        assert!(parse_site_table(t.as_bytes()).unwrap_err().msg.contains("latitude"));
    }

    const TS: &str = "timestamp_utc,discharge_cfs,stage_ft\n";

    #[test]
    fn three_rows() {
        let t = format!("{TS}2020-01-01T00:00:00Z,1,2\n2020-01-01T01:00:00Z,1.5,2.1\n2020-01-01T02:00:00Z,2,2.2\n");
        let s = parse_timeseries(t.as_bytes(), "a").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.valid_count(), 3);
    }

    #[test]
    fn hour_gap_materializes() {
        let t = format!("{TS}2020-01-01T00:00:00Z,1,2\n2020-01-01T01:00:00Z,1,2\n2020-01-01T03:00:00Z,1,2\n");
        let s = parse_timeseries(t.as_bytes(), "a").unwrap();
        assert_eq!(s.len(), 4);
        assert!(is_missing(s.discharge[2]) && is_missing(s.stage[2]));
    }

    #[test]
    fn duplicate_hour_cites_both_lines() {
        let t = format!("{TS}2020-01-01T04:00:00Z,1,2\n2020-01-01T05:00:00Z,1,2\n2020-01-01T05:00:00Z,1,2\n");
        let e = parse_timeseries(t.as_bytes(), "a").unwrap_err();
        assert_eq!(e.line, 4);
        assert!(e.msg.contains("line 3"), "{e}");
    }

    #[test]
    fn blank_cells_are_missing_not_zero() {
        let t = format!("{TS}2020-01-01T00:00:00Z,,0\n");
        let s = parse_timeseries(t.as_bytes(), "a").unwrap();
        assert!(is_missing(s.discharge[0]));
        assert_eq!(s.stage[0], 0.0);
    }

    const PH: &str = "timestamp_utc,stage_raw_m,stage_corr_m,discharge_raw_m3s,discharge_corr_m3s\n";

    #[test]
    fn paired_si_conversion() {
        let t = format!("{PH}2020-01-01T00:00:00Z,1.0,1.0,2.0,2.0\n");
        let p = parse_paired(t.as_bytes(), "a").unwrap();
        assert_eq!(p.stage_raw[0], 3.28084);
        assert!((p.discharge_corrected[0] - 70.6294).abs() < 1e-9);
    }

    #[test]
    fn paired_union_axis() {
        let ch = |a: i64, b: i64| (a..=b).map(|h| (h, 0, 1.0)).collect::<Vec<_>>();
        let p = paired_from_channels("a", [ch(0, 99), ch(50, 149), ch(0, 99), ch(50, 149)]).unwrap();
        assert_eq!(p.len(), 150);
        assert!(is_missing(p.stage_raw[120]) && !is_missing(p.stage_corrected[120]));
        assert!(is_missing(p.stage_corrected[10]) && !is_missing(p.stage_raw[10]));
        assert!(paired_from_channels("a", [ch(0, 9), ch(20, 29), ch(0, 9), ch(0, 9)]).is_err());
    }
}
