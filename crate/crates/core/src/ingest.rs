//! Raw event records, reply counting and the inclusion filters.
//!
//! Records arrive as JSONL. Identifier, timestamp and body fields are
//! required; boolean flags default to `false` when omitted.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::readability;
use crate::time::{self, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub record_id: String,
    pub sender_id: String,
    pub subsystem: String,
    #[serde(
        deserialize_with = "time::deserialize_timestamp",
        serialize_with = "time::serialize_timestamp"
    )]
    pub sent_time: Timestamp,
    #[serde(
        deserialize_with = "time::deserialize_timestamp",
        serialize_with = "time::serialize_timestamp"
    )]
    pub received_time: Timestamp,
    pub thread_id: String,
    #[serde(default)]
    pub in_reply_to: Option<String>,
    pub body_text: String,
    #[serde(default)]
    pub is_bot: bool,
    #[serde(default)]
    pub persuasive: bool,
    #[serde(default)]
    pub is_patch: bool,
    #[serde(default)]
    pub is_bug_fix: bool,
    #[serde(default)]
    pub is_new_feature: bool,
    #[serde(default)]
    pub is_revision: bool,
    #[serde(default)]
    pub is_first_in_thread: bool,
    #[serde(default)]
    pub accepted_patch: bool,
    #[serde(default)]
    pub accepted_commit: bool,
}

impl RawRecord {
    pub fn validate(&self) -> Result<()> {
        if self.received_time < self.sent_time {
            return Err(Error::Invariant(format!(
                "record `{}`: received_time {} precedes sent_time {}",
                self.record_id, self.received_time, self.sent_time
            )));
        }
        if self.is_first_in_thread && self.in_reply_to.is_some() {
            return Err(Error::Invariant(format!(
                "record `{}` is first in thread but replies to another record",
                self.record_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<RawRecord>,
    pub errors: Vec<LineError>,
}

/// Parses a JSONL stream. Malformed lines are collected, not fatal; blank
/// lines are skipped.
pub fn parse_events<R: BufRead>(input: R) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    let mut seen = HashSet::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(LineError { line: line_no, message: e.to_string() });
                continue;
            }
        };
        if let Err(e) = record.validate() {
            out.errors.push(LineError { line: line_no, message: e.to_string() });
            continue;
        }
        if !seen.insert(record.record_id.clone()) {
            out.errors.push(LineError {
                line: line_no,
                message: format!("duplicate record_id `{}`", record.record_id),
            });
            continue;
        }
        out.records.push(record);
    }
    Ok(out)
}

pub fn write_events<W: Write>(mut out: W, records: &[RawRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyMode {
    /// Only records whose `in_reply_to` names the record.
    #[default]
    Direct,
    /// Every transitive descendant in the reply tree.
    Subtree,
}

#[derive(Debug, Clone, Default)]
pub struct ReplyCounts {
    pub counts: HashMap<String, usize>,
    /// `(record_id, missing parent id)` for replies to unknown records.
    pub orphans: Vec<(String, String)>,
}

impl ReplyCounts {
    pub fn get(&self, record_id: &str) -> usize {
        self.counts.get(record_id).copied().unwrap_or(0)
    }
}

pub fn count_replies(records: &[RawRecord], mode: ReplyMode) -> ReplyCounts {
    let mut counts: HashMap<String, usize> =
        records.iter().map(|r| (r.record_id.clone(), 0)).collect();
    let mut orphans = Vec::new();
    let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
    for r in records {
        if let Some(parent) = &r.in_reply_to {
            if counts.contains_key(parent) {
                children.entry(parent.as_str()).or_default().push(&r.record_id);
            } else {
                orphans.push((r.record_id.clone(), parent.clone()));
            }
        }
    }
    for r in records {
        let n = match mode {
            ReplyMode::Direct => children.get(r.record_id.as_str()).map_or(0, Vec::len),
            ReplyMode::Subtree => {
                let mut visited = HashSet::new();
                let mut stack = vec![r.record_id.as_str()];
                while let Some(id) = stack.pop() {
                    for &child in children.get(id).into_iter().flatten() {
                        // Guards against reply cycles in corrupt data.
                        if child != r.record_id && visited.insert(child) {
                            stack.push(child);
                        }
                    }
                }
                visited.len()
            }
        };
        counts.insert(r.record_id.clone(), n);
    }
    ReplyCounts { counts, orphans }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub min_words: usize,
    /// Admit patch emails below `min_words` if they hold a complete sentence.
    pub sentence_fallback: bool,
    pub require_reply: bool,
    pub require_human: bool,
    /// Applies to patch emails only.
    pub require_persuasive: bool,
    pub reply_mode: ReplyMode,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_words: 50,
            sentence_fallback: true,
            require_reply: true,
            require_human: true,
            require_persuasive: true,
            reply_mode: ReplyMode::Direct,
        }
    }
}

impl FilterPolicy {
    pub fn permissive() -> Self {
        Self {
            min_words: 0,
            sentence_fallback: false,
            require_reply: false,
            require_human: false,
            require_persuasive: false,
            reply_mode: ReplyMode::Direct,
        }
    }

    pub fn admits(&self, record: &RawRecord, replies: &ReplyCounts) -> bool {
        if self.require_human && record.is_bot {
            return false;
        }
        if !record.is_patch {
            return true;
        }
        let long_enough = readability::text_stats(&record.body_text).words >= self.min_words
            || (self.sentence_fallback && readability::complete_sentences(&record.body_text) >= 1);
        long_enough
            && (!self.require_reply || replies.get(&record.record_id) >= 1)
            && (!self.require_persuasive || record.persuasive)
    }
}

/// Filters against reply counts computed once over the full corpus, which
/// makes the filter order-preserving and idempotent.
pub fn filter_events(records: &[RawRecord], policy: &FilterPolicy, replies: &ReplyCounts) -> Vec<RawRecord> {
    records
        .iter()
        .filter(|r| policy.admits(r, replies))
        .cloned()
        .collect()
}

/// Counts replies over `records` under the policy's reply mode, then filters.
pub fn filter_corpus(records: &[RawRecord], policy: &FilterPolicy) -> (Vec<RawRecord>, ReplyCounts) {
    let replies = count_replies(records, policy.reply_mode);
    (filter_events(records, policy, &replies), replies)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub fn record(id: &str, reply_to: Option<&str>) -> RawRecord {
        RawRecord {
            record_id: id.into(),
            sender_id: "alice".into(),
            subsystem: "usb".into(),
            sent_time: 1_000,
            received_time: 1_010,
            thread_id: "t".into(),
            in_reply_to: reply_to.map(Into::into),
            body_text: "Looks good to me.".into(),
            is_bot: false,
            persuasive: false,
            is_patch: false,
            is_bug_fix: false,
            is_new_feature: false,
            is_revision: false,
            is_first_in_thread: reply_to.is_none(),
            accepted_patch: false,
            accepted_commit: false,
        }
    }

    fn words(n: usize) -> String {
        vec!["word"; n].join(" ")
    }

    #[test]
    fn parse_valid_lines() {
        let input = r#"{"record_id":"a","sender_id":"s","subsystem":"usb","sent_time":"2020-08-20 09:35:52","received_time":1597916160,"thread_id":"t","body_text":"x"}
{"record_id":"b","sender_id":"s","subsystem":"usb","sent_time":10,"received_time":10,"thread_id":"t","body_text":"x","in_reply_to":"a"}

{"record_id":"c","sender_id":"s","subsystem":"usb","sent_time":"2020-08-20T09:35:52Z","received_time":"2020-08-20T09:36:52Z","thread_id":"t","body_text":"x","is_patch":true}
"#;
        let out = parse_events(input.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.errors.is_empty());
        assert_eq!(out.records[0].sent_time, 1_597_916_152);
        assert!(out.records[2].is_patch);
        assert_eq!(out.records[1].in_reply_to.as_deref(), Some("a"));
    }

    #[test]
    fn parse_reports_missing_field_with_line() {
        let input = r#"{"record_id":"a","sender_id":"s","subsystem":"u","sent_time":1,"received_time":1,"thread_id":"t","body_text":"x"}
{"record_id":"b","sender_id":"s","subsystem":"u","received_time":1,"thread_id":"t","body_text":"x"}
{"record_id":"c","sender_id":"s","subsystem":"u","sent_time":1,"received_time":1,"thread_id":"t","body_text":"x"}"#;
        let out = parse_events(input.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].line, 2);
        assert!(out.errors[0].message.contains("sent_time"));
    }

    #[test]
    fn parse_rejects_invariant_violations() {
        let input = r#"{"record_id":"a","sender_id":"s","subsystem":"u","sent_time":100,"received_time":50,"thread_id":"t","body_text":"x"}
{"record_id":"b","sender_id":"s","subsystem":"u","sent_time":"not a time","received_time":50,"thread_id":"t","body_text":"x"}
{"record_id":"c","sender_id":"s","subsystem":"u","sent_time":1,"received_time":2,"thread_id":"t","body_text":"x","is_first_in_thread":true,"in_reply_to":"a"}
{"record_id":"d","sender_id":"s","subsystem":"u","sent_time":1,"received_time":2,"thread_id":"t","body_text":"x"}
{"record_id":"d","sender_id":"s","subsystem":"u","sent_time":1,"received_time":2,"thread_id":"t","body_text":"x"}"#;
        let out = parse_events(input.as_bytes()).unwrap();
        assert_eq!(out.records.len(), 1);
        let lines: Vec<usize> = out.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![1, 2, 3, 5]);
        assert!(out.errors[0].message.contains("invariant"));
    }

    #[test]
    fn parse_empty_input() {
        let out = parse_events("".as_bytes()).unwrap();
        assert!(out.records.is_empty() && out.errors.is_empty());
    }

    #[test]
    fn write_then_parse_round_trips() {
        let recs = vec![record("a", None), record("b", Some("a"))];
        let mut buf = Vec::new();
        write_events(&mut buf, &recs).unwrap();
        let back = parse_events(buf.as_slice()).unwrap();
        assert_eq!(back.records, recs);
    }

    #[test]
    fn reply_counts() {
        let recs = vec![record("A", None), record("B", Some("A"))];
        let c = count_replies(&recs, ReplyMode::Direct);
        assert_eq!((c.get("A"), c.get("B")), (1, 0));

        let chain = vec![record("A", None), record("B", Some("A")), record("C", Some("B"))];
        let c = count_replies(&chain, ReplyMode::Direct);
        assert_eq!((c.get("A"), c.get("B"), c.get("C")), (1, 1, 0));
        let c = count_replies(&chain, ReplyMode::Subtree);
        assert_eq!((c.get("A"), c.get("B"), c.get("C")), (2, 1, 0));

        let none: Vec<_> = (0..4).map(|i| record(&i.to_string(), None)).collect();
        let c = count_replies(&none, ReplyMode::Direct);
        assert!(c.counts.values().all(|&n| n == 0));
        assert_eq!(c.counts.len(), 4);
    }

    #[test]
    fn orphan_replies_reported() {
        let recs = vec![record("A", None), record("B", Some("ghost"))];
        let c = count_replies(&recs, ReplyMode::Direct);
        assert_eq!(c.orphans, vec![("B".to_string(), "ghost".to_string())]);
        assert_eq!(c.get("A"), 0);
    }

    fn patch(id: &str, body: String, persuasive: bool) -> RawRecord {
        RawRecord { is_patch: true, persuasive, body_text: body, ..record(id, None) }
    }

    #[test]
    fn filter_examples() {
        let policy = FilterPolicy::default();
        let kept = patch("p", words(60), true);
        let bot = RawRecord { is_bot: true, ..patch("q", words(60), true) };
        let lonely = patch("r", words(60), true);
        let recs = vec![
            kept.clone(),
            record("reply-p", Some("p")),
            bot.clone(),
            record("reply-q", Some("q")),
            lonely.clone(),
        ];
        let (out, _) = filter_corpus(&recs, &policy);
        let ids: Vec<&str> = out.iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, vec!["p", "reply-p", "reply-q"]);
    }

    #[test]
    fn short_patch_needs_a_complete_sentence() {
        let policy = FilterPolicy::default();
        let recs = vec![
            patch("short", "Fix the race in probe.".into(), true),
            patch("fragment", "fix race".into(), true),
            patch("unpersuasive", words(80), false),
            record("r1", Some("short")),
            record("r2", Some("fragment")),
            record("r3", Some("unpersuasive")),
        ];
        let (out, _) = filter_corpus(&recs, &policy);
        let ids: Vec<&str> = out.iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, vec!["short", "r1", "r2", "r3"]);

        let strict = FilterPolicy { sentence_fallback: false, ..policy };
        let (out, _) = filter_corpus(&recs, &strict);
        assert!(out.iter().all(|r| r.record_id != "short"));
    }

    #[test]
    fn non_patch_records_only_face_bot_filter() {
        let policy = FilterPolicy::default();
        let recs = vec![
            RawRecord { body_text: String::new(), ..record("a", None) },
            RawRecord { is_bot: true, ..record("b", None) },
        ];
        let (out, _) = filter_corpus(&recs, &policy);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].record_id, "a");
    }

    fn arb_record() -> impl Strategy<Value = (bool, bool, bool, usize, u8)> {
        (any::<bool>(), any::<bool>(), any::<bool>(), 0usize..80, 0u8..4)
    }

    proptest! {
        #[test]
        fn filter_is_subset_idempotent_and_ordered(specs in prop::collection::vec(arb_record(), 0..30)) {
            let recs: Vec<RawRecord> = specs
                .iter()
                .enumerate()
                .map(|(i, &(bot, is_patch, persuasive, n, parent))| {
                    let reply_to = (i > 0 && parent > 0).then(|| format!("r{}", i - 1));
                    RawRecord {
                        is_bot: bot,
                        is_patch,
                        persuasive,
                        body_text: words(n),
                        ..record(&format!("r{i}"), reply_to.as_deref())
                    }
                })
                .collect();
            let policy = FilterPolicy::default();
            let replies = count_replies(&recs, policy.reply_mode);
            let once = filter_events(&recs, &policy, &replies);
            let twice = filter_events(&once, &policy, &replies);
            prop_assert_eq!(&once, &twice);
            // Order-preserving subset.
            let mut it = recs.iter();
            for kept in &once {
                prop_assert!(it.any(|r| r == kept));
            }
            let all = filter_events(&recs, &FilterPolicy::permissive(), &replies);
            prop_assert_eq!(all, recs);
        }
    }
}
