//! Per-event characteristic vectors over the contribution, exposition and
//! administration aspects of a developer action.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RawRecord;
use crate::readability;
use crate::time::{self, Timestamp};

/// Column names in vector order.
pub const CHARACTERISTIC_NAMES: [&str; 14] = [
    "sender_experience",
    "sender_engagement",
    "persuasive",
    "patch_email",
    "bug_fix",
    "new_feature",
    "patch_churn",
    "fkre_score",
    "fkgl_score",
    "verbosity",
    "response_latency",
    "first_patch_thread",
    "accepted_patch",
    "accepted_commit",
];

pub const FKRE_COLUMN: usize = 7;
pub const FKGL_COLUMN: usize = 8;

/// Marker written to CSV for an undefined readability score.
pub const UNDEFINED: &str = "NA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicVector {
    pub sender_experience: f64,
    pub sender_engagement: f64,
    pub persuasive: f64,
    pub patch_email: f64,
    pub bug_fix: f64,
    pub new_feature: f64,
    pub patch_churn: f64,
    /// `None` when the body has no words.
    pub fkre_score: Option<f64>,
    pub fkgl_score: Option<f64>,
    pub verbosity: f64,
    pub response_latency: f64,
    pub first_patch_thread: f64,
    pub accepted_patch: f64,
    pub accepted_commit: f64,
}

impl CharacteristicVector {
    /// Values in column order, `None` for undefined readability scores.
    pub fn values(&self) -> [Option<f64>; 14] {
        [
            Some(self.sender_experience),
            Some(self.sender_engagement),
            Some(self.persuasive),
            Some(self.patch_email),
            Some(self.bug_fix),
            Some(self.new_feature),
            Some(self.patch_churn),
            self.fkre_score,
            self.fkgl_score,
            Some(self.verbosity),
            Some(self.response_latency),
            Some(self.first_patch_thread),
            Some(self.accepted_patch),
            Some(self.accepted_commit),
        ]
    }

    fn from_values(v: &[Option<f64>]) -> Option<Self> {
        let req = |i: usize| v[i];
        Some(Self {
            sender_experience: req(0)?,
            sender_engagement: req(1)?,
            persuasive: req(2)?,
            patch_email: req(3)?,
            bug_fix: req(4)?,
            new_feature: req(5)?,
            patch_churn: req(6)?,
            fkre_score: v[7],
            fkgl_score: v[8],
            verbosity: req(9)?,
            response_latency: req(10)?,
            first_patch_thread: req(11)?,
            accepted_patch: req(12)?,
            accepted_commit: req(13)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenderStats {
    pub sender_id: String,
    pub accepted_count: u64,
    pub submitted_count: u64,
    pub new_thread_count: u64,
    pub bot_spam_count: u64,
    pub sent_count: u64,
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub fn sender_experience(accepted: u64, submitted: u64) -> Result<f64> {
    if accepted > submitted {
        return Err(Error::Invariant(format!(
            "accepted patches ({accepted}) exceed submitted patches ({submitted})"
        )));
    }
    if submitted == 0 {
        return Ok(0.0);
    }
    Ok(accepted as f64 / submitted as f64)
}

pub fn sender_engagement(new_threads: u64, bot_spam: u64, sent: u64) -> f64 {
    if sent == 0 {
        return 0.0;
    }
    let net = new_threads.saturating_sub(bot_spam) as f64;
    (net / sent as f64).clamp(0.0, 1.0)
}

/// Per-sender counts over a whole (unfiltered) corpus.
///
/// Submitted/accepted count the sender's patch emails; new threads count
/// records that open a thread; bot spam counts records attributed to the
/// sender that carry the bot flag.
pub fn compute_sender_stats(records: &[RawRecord]) -> HashMap<String, SenderStats> {
    let mut stats: HashMap<String, SenderStats> = HashMap::new();
    for r in records {
        let s = stats.entry(r.sender_id.clone()).or_insert_with(|| SenderStats {
            sender_id: r.sender_id.clone(),
            ..Default::default()
        });
        s.sent_count += 1;
        if r.is_patch {
            s.submitted_count += 1;
            if r.accepted_patch {
                s.accepted_count += 1;
            }
        }
        if r.is_first_in_thread {
            s.new_thread_count += 1;
        }
        if r.is_bot {
            s.bot_spam_count += 1;
        }
    }
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizedEvent {
    pub record_id: String,
    pub sender_id: String,
    pub subsystem: String,
    pub sent_time: Timestamp,
    pub vector: CharacteristicVector,
}

pub fn characterize_record(record: &RawRecord, stats: &SenderStats) -> Result<CharacteristicVector> {
    let text = readability::text_stats(&record.body_text);
    Ok(CharacteristicVector {
        sender_experience: sender_experience(stats.accepted_count, stats.submitted_count)?,
        sender_engagement: sender_engagement(
            stats.new_thread_count,
            stats.bot_spam_count,
            stats.sent_count,
        ),
        persuasive: flag(record.persuasive),
        patch_email: flag(record.is_patch),
        bug_fix: flag(record.is_bug_fix),
        new_feature: flag(record.is_new_feature),
        patch_churn: flag(record.is_revision),
        fkre_score: readability::fkre(text.words, text.sentences, text.syllables),
        fkgl_score: readability::fkgl(text.words, text.sentences, text.syllables),
        verbosity: readability::verbosity(text.words, text.sentences),
        response_latency: (record.received_time - record.sent_time).max(0) as f64,
        first_patch_thread: flag(record.is_first_in_thread),
        accepted_patch: flag(record.accepted_patch),
        accepted_commit: flag(record.accepted_commit),
    })
}

pub fn characterize(
    records: &[RawRecord],
    sender_stats: &HashMap<String, SenderStats>,
) -> Result<Vec<CharacterizedEvent>> {
    records
        .iter()
        .map(|r| {
            let stats = sender_stats
                .get(&r.sender_id)
                .ok_or_else(|| Error::MissingSender(r.sender_id.clone()))?;
            Ok(CharacterizedEvent {
                record_id: r.record_id.clone(),
                sender_id: r.sender_id.clone(),
                subsystem: r.subsystem.clone(),
                sent_time: r.sent_time,
                vector: characterize_record(r, stats)?,
            })
        })
        .collect()
}

const META_COLUMNS: [&str; 4] = ["record_id", "sender_id", "subsystem", "sent_time"];

pub fn write_csv<W: Write>(out: W, events: &[CharacterizedEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(META_COLUMNS.iter().chain(CHARACTERISTIC_NAMES.iter()))?;
    for e in events {
        let mut row = vec![
            e.record_id.clone(),
            e.sender_id.clone(),
            e.subsystem.clone(),
            time::format_timestamp(e.sent_time),
        ];
        row.extend(e.vector.values().iter().map(|v| match v {
            Some(x) => x.to_string(),
            None => UNDEFINED.to_string(),
        }));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R, source: &str) -> Result<Vec<CharacterizedEvent>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let expected: Vec<&str> = META_COLUMNS.iter().chain(CHARACTERISTIC_NAMES.iter()).copied().collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::schema(source, format!("expected header {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let bad = |msg: String| Error::schema(source, format!("line {line}: {msg}"));
        let sent_time = time::parse_timestamp(&row[3]).map_err(|e| bad(e.to_string()))?;
        let mut values = Vec::with_capacity(14);
        for (j, name) in CHARACTERISTIC_NAMES.iter().enumerate() {
            let cell = &row[4 + j];
            if cell == UNDEFINED {
                values.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| bad(format!("bad value `{cell}` in {name}")))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value in {name}")));
                }
                values.push(Some(v));
            }
        }
        let vector = CharacteristicVector::from_values(&values)
            .ok_or_else(|| bad("undefined marker outside readability columns".into()))?;
        out.push(CharacterizedEvent {
            record_id: row[0].to_string(),
            sender_id: row[1].to_string(),
            subsystem: row[2].to_string(),
            sent_time,
            vector,
        });
    }
    Ok(out)
}
