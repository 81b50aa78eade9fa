// SPDX-License-Identifier: MIT OR Apache-2.0

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};

pub const SECONDS_PER_HOUR: i64 = 3600;

/// An hour-aligned UTC instant, stored as whole hours since the Unix epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Fall,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Fall];

    /// Meteorological seasons: DJF, MAM, JJA, SON.
    pub fn from_month(month: u32) -> Season {
        match month {
            12 | 1 | 2 => Season::Winter,
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            _ => Season::Fall,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Fall => "fall",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Timestamp {
    /// Floors a Unix time in seconds to its hour.
    pub fn floor_seconds(secs: i64) -> Timestamp {
        Timestamp(secs.div_euclid(SECONDS_PER_HOUR))
    }

    pub fn from_ymdh(year: i32, month: u32, day: u32, hour: u32) -> Option<Timestamp> {
        let date = chrono::NaiveDate::from_ymd_opt(year, month, day)?;
        let dt = date.and_hms_opt(hour, 0, 0)?;
        Some(Timestamp::floor_seconds(dt.and_utc().timestamp()))
    }

    pub fn seconds(self) -> i64 {
        self.0 * SECONDS_PER_HOUR
    }

    pub fn plus_hours(self, h: i64) -> Timestamp {
        Timestamp(self.0 + h)
    }

    fn datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp(self.seconds(), 0).unwrap_or_default()
    }

    /// Calendar month, 1..=12.
    pub fn month(self) -> u32 {
        self.datetime().month()
    }

    /// Zero-based month index, 0..12.
    pub fn month_index(self) -> usize {
        (self.month() - 1) as usize
    }

    pub fn season(self) -> Season {
        Season::from_month(self.month())
    }

    pub fn year(self) -> i32 {
        self.datetime().year()
    }

    pub fn hour_of_day(self) -> u32 {
        self.datetime().hour()
    }

    pub fn day_of_year(self) -> u32 {
        self.datetime().ordinal()
    }
}

impl core::fmt::Display for Timestamp {
    /// ISO-8601 with a trailing `Z`, e.g. `2015-01-01T00:00:00Z`.
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let dt = self.datetime();
        write!(
            f,
            "{:04}-{:02}-{:02}T{:02}:00:00Z",
            dt.year(),
            dt.month(),
            dt.day(),
            dt.hour()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn month_and_season() {
        let t = Timestamp::from_ymdh(2020, 2, 29, 23).unwrap();
        assert_eq!(t.month(), 2);
        assert_eq!(t.season(), Season::Winter);
        assert_eq!(t.plus_hours(1).month(), 3);
        assert_eq!(t.plus_hours(1).season(), Season::Spring);
        assert_eq!(t.to_string(), "2020-02-29T23:00:00Z");
    }

    #[test]
    fn floors_negative_seconds() {
        assert_eq!(Timestamp::floor_seconds(-1), Timestamp(-1));
        assert_eq!(Timestamp::floor_seconds(3599), Timestamp(0));
    }
}
