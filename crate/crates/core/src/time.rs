//! Timestamps are plain UTC epoch seconds. Parsing accepts integer epoch
//! seconds, RFC 3339 strings, and the space-separated `YYYY-MM-DD HH:MM:SS`
//! form (interpreted as UTC).

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{de, Deserialize, Deserializer, Serializer};

use crate::error::{Error, Result};

pub type Timestamp = i64;

pub const MINUTE: i64 = 60;
pub const HOUR: i64 = 60 * MINUTE;
pub const DAY: i64 = 24 * HOUR;
pub const WEEK: i64 = 7 * DAY;

pub fn parse_timestamp(text: &str) -> Result<Timestamp> {
    let text = text.trim();
    if let Ok(secs) = text.parse::<i64>() {
        return Ok(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(text, fmt) {
            return Ok(naive.and_utc().timestamp());
        }
    }
    Err(Error::InvalidInput(format!("unparseable timestamp `{text}`")))
}

/// `2020-08-20 09:35:52`, the rendering used by the labeled activity table.
pub fn format_timestamp(ts: Timestamp) -> String {
    match DateTime::<Utc>::from_timestamp(ts, 0) {
        Some(dt) => dt.format("%Y-%m-%d %H:%M:%S").to_string(),
        None => ts.to_string(),
    }
}

pub fn format_rfc3339(ts: Timestamp) -> String {
    match DateTime::<Utc>::from_timestamp(ts, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => ts.to_string(),
    }
}

/// Parses durations such as `4h`, `1w`, `90m` or `3600` (bare seconds).
pub fn parse_duration(text: &str) -> Result<i64> {
    let text = text.trim();
    if let Ok(secs) = text.parse::<i64>() {
        return Ok(secs);
    }
    humantime::parse_duration(text)
        .map(|d| d.as_secs() as i64)
        .map_err(|e| Error::InvalidInput(format!("bad duration `{text}`: {e}")))
}

/// Serde adapter: accepts either an integer or a timestamp string.
pub(crate) fn deserialize_timestamp<'de, D>(deserializer: D) -> std::result::Result<Timestamp, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Text(String),
    }
    match Raw::deserialize(deserializer)? {
        Raw::Int(v) => Ok(v),
        Raw::Text(s) => parse_timestamp(&s).map_err(de::Error::custom),
    }
}

pub(crate) fn serialize_timestamp<S: Serializer>(ts: &Timestamp, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_rfc3339(*ts))
}

/// Serde adapter for durations written as `"4h"` or integer seconds.
pub(crate) mod duration_serde {
    use super::*;

    pub fn deserialize<'de, D>(deserializer: D) -> std::result::Result<i64, D::Error>
    where
        D: Deserializer<'de>,
    {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Int(v) => Ok(v),
            Raw::Text(s) => parse_duration(&s).map_err(de::Error::custom),
        }
    }

    pub fn serialize<S: Serializer>(secs: &i64, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i64(*secs)
    }
}
