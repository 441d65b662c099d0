//! Second-precision UTC instants, serialized as ISO-8601 strings.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Integer seconds since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp())
    }

    pub fn from_secs(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub fn secs(self) -> i64 {
        self.0
    }

    pub fn plus_days(self, days: i64) -> Self {
        Timestamp(self.0 + days * SECONDS_PER_DAY)
    }

    pub fn minus_days(self, days: i64) -> Self {
        Timestamp(self.0 - days * SECONDS_PER_DAY)
    }

    /// `true` when `self` lies at most `days` whole days before `as_of`
    /// (closed at the far end) and not after it.
    pub fn within_days_before(self, as_of: Timestamp, days: i64) -> bool {
        self.0 <= as_of.0 && as_of.0 - self.0 <= days * SECONDS_PER_DAY
    }

    pub fn to_iso8601(self) -> String {
        match DateTime::<Utc>::from_timestamp(self.0, 0) {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Secs, true),
            None => format!("@{}", self.0),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error(
    "invalid timestamp {input:?}: expected RFC 3339 (2024-02-07T00:00:00Z) or a date (2024-02-07)"
)]
pub struct TimestampParseError {
    pub input: String,
}

impl FromStr for Timestamp {
    type Err = TimestampParseError;

    /// Accepts RFC 3339 instants and bare `YYYY-MM-DD` dates (midnight UTC).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || TimestampParseError {
            input: s.to_string(),
        };
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Ok(Timestamp(dt.with_timezone(&Utc).timestamp()));
        }
        let date = NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| err())?;
        let midnight = date.and_hms_opt(0, 0, 0).ok_or_else(err)?;
        Ok(Timestamp(midnight.and_utc().timestamp()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso8601())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_iso8601())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}
