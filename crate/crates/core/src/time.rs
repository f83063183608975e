//! Millisecond UTC timestamps.

use chrono::{DateTime, TimeZone, Utc};

pub type Timestamp = DateTime<Utc>;

pub fn to_millis(ts: &Timestamp) -> i64 {
    ts.timestamp_millis()
}

pub fn from_millis(ms: i64) -> Timestamp {
    Utc.timestamp_millis_opt(ms)
        .single()
        .expect("stored millisecond timestamps are in range")
}

/// Drop sub-millisecond precision so values round-trip through storage.
pub fn truncate_millis(ts: Timestamp) -> Timestamp {
    from_millis(to_millis(&ts))
}

/// Current time at storage resolution.
pub fn now() -> Timestamp {
    truncate_millis(Utc::now())
}

/// Exact minutes from `earlier` to `later` (negative when reversed).
pub fn minutes_between(earlier: &Timestamp, later: &Timestamp) -> f64 {
    (to_millis(later) - to_millis(earlier)) as f64 / 60_000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    #[test]
    fn minutes_are_exact() {
        let t0 = from_millis(1_700_000_000_000);
        assert_eq!(minutes_between(&t0, &(t0 + Duration::seconds(90))), 1.5);
        assert_eq!(minutes_between(&t0, &(t0 + Duration::milliseconds(1))), 1.0 / 60_000.0);
    }

    #[test]
    fn truncation_round_trips() {
        let t = Utc::now();
        let tr = truncate_millis(t);
        assert_eq!(from_millis(to_millis(&tr)), tr);
    }
}
