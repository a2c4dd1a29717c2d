use serde::{Deserialize, Serialize};

use crate::cluster::LabeledActivity;
use crate::embed::token::{ActivityToken, TokenGranularity};
use crate::error::{Error, Result};
use crate::time::Timestamp;

/// Events in `[start, end)`, chronologically ordered. Indices start at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSlice {
    pub index: usize,
    pub start: Timestamp,
    pub end: Timestamp,
    pub events: Vec<LabeledActivity>,
}

impl TimeSlice {
    /// Empty slices are kept in the sequence but cannot be trained or aligned.
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Partitions time-sorted activity into contiguous slices whose boundaries
/// are multiples of `slice_len` seconds since the epoch.
pub fn slice_events(labeled: &[LabeledActivity], slice_len: i64) -> Result<Vec<TimeSlice>> {
    if slice_len <= 0 {
        return Err(Error::InvalidInput(format!("slice length must be positive, got {slice_len}")));
    }
    if let Some(i) = labeled.windows(2).position(|w| w[1].sent_time < w[0].sent_time) {
        return Err(Error::InvalidInput(format!(
            "labeled activity is not sorted by sent_time (row {} precedes row {})",
            i + 1,
            i + 2
        )));
    }
    let (Some(first), Some(last)) = (labeled.first(), labeled.last()) else {
        return Ok(Vec::new());
    };
    let origin = first.sent_time.div_euclid(slice_len) * slice_len;
    let count = ((last.sent_time - origin).div_euclid(slice_len) + 1) as usize;
    let mut slices: Vec<TimeSlice> = (0..count)
        .map(|i| TimeSlice {
            index: i + 1,
            start: origin + i as i64 * slice_len,
            end: origin + (i as i64 + 1) * slice_len,
            events: Vec::new(),
        })
        .collect();
    for e in labeled {
        let i = (e.sent_time - origin).div_euclid(slice_len) as usize;
        slices[i].events.push(e.clone());
    }
    Ok(slices)
}

/// Ordered event-index pairs `(i, j)`, `i != j`, with `|t_i - t_j| <= window`.
/// `times` must be sorted.
pub fn event_pairs(times: &[Timestamp], window: i64) -> Vec<(usize, usize)> {
    let n = times.len();
    let mut out = Vec::new();
    let mut lo = 0;
    for i in 0..n {
        while times[i] - times[lo] > window {
            lo += 1;
        }
        let mut j = lo;
        while j < n && times[j] - times[i] <= window {
            if j != i {
                out.push((i, j));
            }
            j += 1;
        }
    }
    out
}

/// `(center, context)` token pairs inside the time window, across subsystems.
pub fn context_pairs(slice: &TimeSlice, window: i64, granularity: TokenGranularity) -> Vec<(ActivityToken, ActivityToken)> {
    let times: Vec<Timestamp> = slice.events.iter().map(|e| e.sent_time).collect();
    let tokens: Vec<ActivityToken> = slice.events.iter().map(|e| ActivityToken::from_activity(e, granularity)).collect();
    event_pairs(&times, window)
        .into_iter()
        .map(|(i, j)| (tokens[i].clone(), tokens[j].clone()))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;
    use crate::time::{DAY, HOUR, WEEK};
    use rand::Rng as _;

    pub fn activity(t: Timestamp, label: usize, sender: &str, subsystem: &str) -> LabeledActivity {
        LabeledActivity {
            record_id: format!("{sender}-{t}"),
            sender_id: sender.into(),
            subsystem: subsystem.into(),
            sent_time: t,
            scores: vec![0.0],
            label,
        }
    }

    #[test]
    fn weekly_partition() {
        let evs = vec![activity(0, 0, "a", "x"), activity(3 * DAY, 0, "a", "x"), activity(10 * DAY, 0, "a", "x")];
        let s = slice_events(&evs, WEEK).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].start, s[0].end, s[0].events.len()), (0, WEEK, 2));
        assert_eq!((s[1].index, s[1].events.len()), (2, 1));

        let one = slice_events(&evs[..1], WEEK).unwrap();
        assert_eq!(one.len(), 1);

        let gap = slice_events(&[activity(0, 0, "a", "x"), activity(20 * DAY, 0, "a", "x")], WEEK).unwrap();
        assert_eq!(gap.len(), 3);
        assert!(gap[1].is_empty());
        assert!(!gap[0].is_empty() && !gap[2].is_empty());
    }

    #[test]
    fn slicing_errors() {
        let evs = vec![activity(10, 0, "a", "x"), activity(5, 0, "a", "x")];
        assert!(slice_events(&evs, WEEK).is_err());
        assert!(slice_events(&evs, 0).is_err());
        assert!(slice_events(&[], WEEK).unwrap().is_empty());
    }

    #[test]
    fn window_pairs_examples() {
        let slice = TimeSlice {
            index: 1,
            start: 0,
            end: WEEK,
            events: vec![activity(0, 0, "a", "x"), activity(3 * HOUR, 1, "b", "y")],
        };
        let pairs = context_pairs(&slice, 4 * HOUR, TokenGranularity::default());
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0.sender_id, "a");
        assert_eq!(pairs[1].0.sender_id, "b");

        let far = TimeSlice { events: vec![activity(0, 0, "a", "x"), activity(5 * HOUR, 1, "b", "y")], ..slice };
        assert!(context_pairs(&far, 4 * HOUR, TokenGranularity::default()).is_empty());
    }

    #[test]
    fn window_pairs_match_double_loop() {
        let mut r = rng::seeded(17);
        for _ in 0..50 {
            let mut times: Vec<i64> = (0..20).map(|_| r.random_range(0..50_000)).collect();
            times.sort();
            let window = r.random_range(0..20_000);
            let mut brute = Vec::new();
            for i in 0..20 {
                for j in 0..20 {
                    if i != j && (times[i] - times[j]).abs() <= window {
                        brute.push((i, j));
                    }
                }
            }
            let mut fast = event_pairs(&times, window);
            fast.sort();
            brute.sort();
            assert_eq!(fast, brute);
        }
    }
}
