// SPDX-License-Identifier: MIT OR Apache-2.0

//! Site metadata, hourly series and label masks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::Timestamp;

/// Missing-value sentinel. Discharge `0.0` is a valid reading, so missing is
/// never encoded as zero.
pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
    External,
}

impl Partition {
    pub fn parse(s: &str) -> Option<Partition> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Partition::Train),
            "validation" | "val" => Some(Partition::Validation),
            "test" => Some(Partition::Test),
            "external" => Some(Partition::External),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
            Partition::External => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteMeta {
    pub site_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub drainage_area_km2: f64,
    pub elevation_m: f64,
    pub partition: Partition,
}

impl SiteMeta {
    pub fn validate(&self) -> Result<()> {
        if self.site_id.trim().is_empty() {
            return Err(Error::invalid("empty site_id"));
        }
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::invalid(alloc::format!(
                "latitude {} outside [-90, 90]",
                self.latitude
            )));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::invalid(alloc::format!(
                "longitude {} outside [-180, 180]",
                self.longitude
            )));
        }
        if !(self.drainage_area_km2 > 0.0 && self.drainage_area_km2.is_finite()) {
            return Err(Error::invalid(alloc::format!(
                "drainage area {} must be positive",
                self.drainage_area_km2
            )));
        }
        if !self.elevation_m.is_finite() {
            return Err(Error::invalid("elevation must be finite"));
        }
        Ok(())
    }
}

bitflags! {
    /// Per-timestep quality-control flags.
    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
    #[serde(transparent)]
    pub struct QcFlags: u8 {
        const OUTLIER = 1;
        const IMPLAUSIBLE = 1 << 1;
        const FILLED_LINEAR = 1 << 2;
        const FILLED_RECESSION = 1 << 3;
        const EXCLUDED = 1 << 4;
    }
}

impl QcFlags {
    pub const FILLED: QcFlags = QcFlags::FILLED_LINEAR.union(QcFlags::FILLED_RECESSION);

    pub fn names(self) -> Vec<&'static str> {
        self.iter_names().map(|(n, _)| n).collect()
    }
}

/// Aligned hourly discharge (ft³/s) and stage (ft) for one site. Timestep `k`
/// is `start + k` hours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourlySeries {
    pub site_id: String,
    pub start: Timestamp,
    #[serde(with = "missing_vec")]
    pub discharge: Vec<f64>,
    #[serde(with = "missing_vec")]
    pub stage: Vec<f64>,
    pub flags: Vec<QcFlags>,
    /// Agency qualifier codes carried through untouched; empty string = none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualifiers: Option<Vec<String>>,
}

impl HourlySeries {
    pub fn new(site_id: impl Into<String>, start: Timestamp, discharge: Vec<f64>, stage: Vec<f64>) -> Result<Self> {
        if discharge.len() != stage.len() {
            return Err(Error::invalid(alloc::format!(
                "discharge has {} steps but stage has {}",
                discharge.len(),
                stage.len()
            )));
        }
        let n = discharge.len();
        Ok(HourlySeries {
            site_id: site_id.into(),
            start,
            discharge,
            stage,
            flags: vec![QcFlags::empty(); n],
            qualifiers: None,
        })
    }

    pub fn len(&self) -> usize {
        self.discharge.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discharge.is_empty()
    }

    pub fn timestamp(&self, k: usize) -> Timestamp {
        self.start.plus_hours(k as i64)
    }

    /// Both channels present and the timestep not excluded.
    pub fn is_valid(&self, k: usize) -> bool {
        !is_missing(self.discharge[k]) && !is_missing(self.stage[k]) && !self.flags[k].contains(QcFlags::EXCLUDED)
    }

    pub fn valid_count(&self) -> usize {
        (0..self.len()).filter(|&k| self.is_valid(k)).count()
    }
}

/// Four aligned channels from a raw/corrected archive pair, already in
/// imperial units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries {
    pub site_id: String,
    pub start: Timestamp,
    #[serde(with = "missing_vec")]
    pub stage_raw: Vec<f64>,
    #[serde(with = "missing_vec")]
    pub stage_corrected: Vec<f64>,
    #[serde(with = "missing_vec")]
    pub discharge_raw: Vec<f64>,
    #[serde(with = "missing_vec")]
    pub discharge_corrected: Vec<f64>,
}

impl PairedSeries {
    pub fn len(&self) -> usize {
        self.stage_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stage_raw.is_empty()
    }

    /// All four channels present at `k`.
    pub fn complete(&self, k: usize) -> bool {
        !is_missing(self.stage_raw[k])
            && !is_missing(self.stage_corrected[k])
            && !is_missing(self.discharge_raw[k])
            && !is_missing(self.discharge_corrected[k])
    }

    pub fn corrected(&self) -> HourlySeries {
        let mut s = HourlySeries::new(
            self.site_id.clone(),
            self.start,
            self.discharge_corrected.clone(),
            self.stage_corrected.clone(),
        )
        .expect("paired channels share one axis");
        s.qualifiers = None;
        s
    }

    pub fn raw(&self) -> HourlySeries {
        HourlySeries::new(
            self.site_id.clone(),
            self.start,
            self.discharge_raw.clone(),
            self.stage_raw.clone(),
        )
        .expect("paired channels share one axis")
    }
}

/// Per-timestep ground-truth anomaly flags with optional type labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyMask {
    pub flags: Vec<bool>,
    /// Type identifiers; `Some` only where `flags` is true. For overlapping
    /// compound anomalies this is the last type applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_labels: Option<Vec<Option<u8>>>,
}

impl AnomalyMask {
    pub fn clean(len: usize) -> Self {
        AnomalyMask {
            flags: vec![false; len],
            type_labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.flags.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.flags.len() as f64
        }
    }

    /// Checks the label/flag consistency invariant.
    pub fn is_consistent(&self) -> bool {
        match &self.type_labels {
            None => true,
            Some(labels) => {
                labels.len() == self.flags.len() && labels.iter().zip(&self.flags).all(|(l, &f)| l.is_none() || f)
            }
        }
    }
}

/// Arithmetic-mean aggregation of sub-hourly readings to hourly values.
///
/// Readings are `(unix_seconds, value)` sorted ascending. Hour `h` averages
/// readings with timestamps in `[h, h+1)`; hours without readings are missing.
pub fn aggregate_to_hourly(readings: &[(i64, f64)]) -> Result<(Timestamp, Vec<f64>)> {
    if let Some(i) = readings.windows(2).position(|w| w[1].0 < w[0].0) {
        return Err(Error::Unsorted { index: i + 1 });
    }
    let Some(first) = readings.first() else {
        return Ok((Timestamp(0), Vec::new()));
    };
    let start = Timestamp::floor_seconds(first.0);
    let end = Timestamp::floor_seconds(readings[readings.len() - 1].0);
    let n = (end.0 - start.0 + 1) as usize;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for &(secs, v) in readings {
        if !v.is_finite() {
            continue;
        }
        let k = (Timestamp::floor_seconds(secs).0 - start.0) as usize;
        sums[k] += v;
        counts[k] += 1;
    }
    let values = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { MISSING } else { s / c as f64 })
        .collect();
    Ok((start, values))
}

/// Serializes NaN-as-missing vectors as JSON arrays with `null` holes.
pub mod missing_vec {
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(super::MISSING)).collect())
    }
}

/// Optional [`missing_vec`].
pub mod missing_opt_vec {
    use alloc::vec::Vec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(
                &v.iter()
                    .map(|x| if x.is_nan() { None } else { Some(*x) })
                    .collect::<Vec<_>>(),
            ),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        let v: Option<Vec<Option<f64>>> = Option::deserialize(d)?;
        Ok(v.map(|v| v.into_iter().map(|x| x.unwrap_or(super::MISSING)).collect()))
    }
}

/// Fixed-size monthly arrays with `null` for missing months.
pub mod missing_array {
    use alloc::vec::Vec;
    use serde::de::Error;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; 12], s: S) -> Result<S::Ok, S::Error> {
        super::missing_vec::serialize(v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 12], D::Error> {
        let v: Vec<f64> = super::missing_vec::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| D::Error::invalid_length(v.len(), &"12 monthly values"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: i64 = 3600;

    #[test]
    fn four_quarter_hour_readings_average() {
        let r = [(0, 2.0), (900, 4.0), (1800, 6.0), (2700, 8.0)];
        let (start, v) = aggregate_to_hourly(&r).unwrap();
        assert_eq!(start, Timestamp(0));
        assert_eq!(v, vec![5.0]);
    }

    #[test]
    fn single_reading_is_identity() {
        let (_, v) = aggregate_to_hourly(&[(10 * H + 300, 7.25)]).unwrap();
        assert_eq!(v, vec![7.25]);
    }

    #[test]
    fn twenty_minute_readings() {
        let (_, v) = aggregate_to_hourly(&[(0, 1.0), (1200, 1.5), (2400, 2.0)]).unwrap();
        assert_eq!(v, vec![1.5]);
    }

    #[test]
    fn empty_hours_are_missing() {
        let (_, v) = aggregate_to_hourly(&[(0, 1.0), (2 * H + 5, 3.0)]).unwrap();
        assert_eq!(v.len(), 3);
        assert!(is_missing(v[1]));
        assert_eq!(v[2], 3.0);
    }

    #[test]
    fn unsorted_rejected_with_index() {
        let err = aggregate_to_hourly(&[(0, 1.0), (900, 1.0), (600, 1.0)]).unwrap_err();
        assert_eq!(err, Error::Unsorted { index: 2 });
    }

    #[test]
    fn site_meta_ranges() {
        let mut m = SiteMeta {
            site_id: "01646500".into(),
            latitude: 38.95,
            longitude: -77.13,
            drainage_area_km2: 29940.0,
            elevation_m: 10.0,
            partition: Partition::Train,
        };
        assert!(m.validate().is_ok());
        m.latitude = 95.0;
        assert!(m.validate().is_err());
        m.latitude = 0.0;
        m.drainage_area_km2 = 0.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn mask_consistency() {
        let m = AnomalyMask {
            flags: vec![true, false],
            type_labels: Some(vec![Some(1), Some(2)]),
        };
        assert!(!m.is_consistent());
        let m = AnomalyMask {
            flags: vec![true, false],
            type_labels: Some(vec![Some(1), None]),
        };
        assert!(m.is_consistent());
        assert_eq!(m.coverage(), 0.5);
    }
}
