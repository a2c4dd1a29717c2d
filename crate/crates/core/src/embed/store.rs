//! On-disk embedding sets: one CSV per slice plus `manifest.json`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cluster::{label_id, parse_label_id};
use crate::embed::sgns::{SgnsConfig, SliceEmbeddings};
use crate::embed::slice::TimeSlice;
use crate::embed::token::ActivityToken;
use crate::error::{Error, Result};
use crate::json17;
use crate::time::{self, Timestamp};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub index: usize,
    #[serde(serialize_with = "time::serialize_timestamp", deserialize_with = "time::deserialize_timestamp")]
    pub start: Timestamp,
    #[serde(serialize_with = "time::serialize_timestamp", deserialize_with = "time::deserialize_timestamp")]
    pub end: Timestamp,
    /// `None` for empty slices, which have no vectors.
    pub file: Option<String>,
    pub empty: bool,
    pub vocab_size: usize,
    pub seed: Option<u64>,
    pub epoch_losses: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub dim: usize,
    pub config: SgnsConfig,
    pub slices: Vec<SliceEntry>,
}

impl EmbeddingManifest {
    pub fn empty_slices(&self) -> Vec<usize> {
        self.slices.iter().filter(|s| s.empty).map(|s| s.index).collect()
    }
}

pub fn slice_file_name(index: usize) -> String {
    format!("slice_{index:04}.csv")
}

/// Builds the manifest for trained slices, flagging the empty ones from `slices`.
pub fn manifest_for(slices: &[TimeSlice], trained: &[SliceEmbeddings], config: &SgnsConfig) -> EmbeddingManifest {
    let entries = slices
        .iter()
        .map(|s| match trained.iter().find(|e| e.index == s.index) {
            Some(e) => entry_for(e),
            None => SliceEntry {
                index: s.index,
                start: s.start,
                end: s.end,
                file: None,
                empty: true,
                vocab_size: 0,
                seed: None,
                epoch_losses: vec![],
            },
        })
        .collect();
    EmbeddingManifest { dim: config.dim, config: config.clone(), slices: entries }
}

pub fn entry_for(e: &SliceEmbeddings) -> SliceEntry {
    SliceEntry {
        index: e.index,
        start: e.start,
        end: e.end,
        file: Some(slice_file_name(e.index)),
        empty: false,
        vocab_size: e.tokens.len(),
        seed: Some(e.seed),
        epoch_losses: e.epoch_losses.iter().map(|&l| l.is_finite().then_some(l)).collect(),
    }
}

fn write_slice_csv(path: &Path, e: &SliceEmbeddings) -> Result<()> {
    let d = e.dim();
    let mut w = csv::Writer::from_path(path).map_err(|err| Error::schema(path, err.to_string()))?;
    let mut header: Vec<String> = ["label", "sender_id", "subsystem", "count"].iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|k| format!("y_{k}")));
    header.extend((0..d).map(|k| format!("c_{k}")));
    w.write_record(&header)?;
    for (i, t) in e.tokens.iter().enumerate() {
        let mut row = vec![label_id(t.label), t.sender_id.clone(), t.subsystem.clone(), e.counts[i].to_string()];
        // `{}` prints the shortest string that parses back to the same f64.
        row.extend(e.activity.row(i).iter().map(|v| v.to_string()));
        row.extend(e.context.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|err| Error::io(path, err))?;
    Ok(())
}

fn read_slice_csv(path: &Path, entry: &SliceEntry, dim: usize, config: &SgnsConfig) -> Result<SliceEmbeddings> {
    let mut rdr = csv::Reader::from_path(path).map_err(|err| Error::schema(path, err.to_string()))?;
    let width = 4 + 2 * dim;
    if rdr.headers()?.len() != width {
        return Err(Error::schema(path, format!("expected {width} columns for dim {dim}")));
    }
    let mut tokens = Vec::new();
    let mut counts = Vec::new();
    let mut y = Vec::new();
    let mut c = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|err| Error::schema(path, err.to_string()))?;
        let bad = |msg: String| Error::schema(path, format!("line {}: {msg}", i + 2));
        let label = parse_label_id(&row[0]).ok_or_else(|| bad(format!("bad label `{}`", &row[0])))?;
        tokens.push(ActivityToken::new(label, &row[1], &row[2]));
        counts.push(row[3].parse::<usize>().map_err(|_| bad(format!("bad count `{}`", &row[3])))?);
        for k in 0..2 * dim {
            let v = row[4 + k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("bad value `{}`", &row[4 + k])))?;
            if k < dim {
                y.push(v);
            } else {
                c.push(v);
            }
        }
    }
    if tokens.len() != entry.vocab_size {
        return Err(Error::schema(path, format!("{} rows but manifest lists {}", tokens.len(), entry.vocab_size)));
    }
    let n = tokens.len();
    Ok(SliceEmbeddings {
        index: entry.index,
        start: entry.start,
        end: entry.end,
        tokens,
        counts,
        activity: DMatrix::from_row_slice(n, dim, &y),
        context: DMatrix::from_row_slice(n, dim, &c),
        config: config.clone(),
        seed: entry.seed.unwrap_or(config.seed),
        epoch_losses: entry.epoch_losses.iter().map(|l| l.unwrap_or(f64::NAN)).collect(),
    })
}

pub fn write_embeddings(dir: &Path, manifest: &EmbeddingManifest, slices: &[SliceEmbeddings]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for e in slices {
        write_slice_csv(&dir.join(slice_file_name(e.index)), e)?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json17::to_string(manifest)?).map_err(|e| Error::io(&path, e))
}

/// Loads every non-empty slice listed in the manifest, in manifest order.
pub fn read_embeddings(dir: &Path) -> Result<(EmbeddingManifest, Vec<SliceEmbeddings>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EmbeddingManifest = serde_json::from_str(&text).map_err(|e| Error::schema(&path, e.to_string()))?;
    let mut out = Vec::new();
    for entry in manifest.slices.iter().filter(|s| !s.empty) {
        let file = entry.file.as_deref().ok_or_else(|| Error::schema(&path, format!("slice {} has no file", entry.index)))?;
        out.push(read_slice_csv(&dir.join(file), entry, manifest.dim, &manifest.config)?);
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::sgns::{tests::community_slice, train_slice};
    use crate::time::{HOUR, WEEK};

    #[test]
    fn round_trip_is_exact() {
        let config = SgnsConfig { dim: 6, window: 2 * HOUR, epochs: 2, subsample: 0.0, ..SgnsConfig::default() };
        let full = community_slice(20);
        let gap = TimeSlice { index: 2, start: full.end, end: full.end + WEEK, events: vec![] };
        let e = train_slice(&full, &config).unwrap();
        let manifest = manifest_for(&[full, gap], std::slice::from_ref(&e), &config);
        assert_eq!(manifest.empty_slices(), vec![2]);
        let dir = tempfile::tempdir().unwrap();
        write_embeddings(dir.path(), &manifest, std::slice::from_ref(&e)).unwrap();
        let (m2, back) = read_embeddings(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(back, vec![e]);
    }

    #[test]
    fn wrong_width_is_schema_error() {
        let config = SgnsConfig { dim: 3, window: 2 * HOUR, epochs: 1, ..SgnsConfig::default() };
        let e = train_slice(&community_slice(5), &config).unwrap();
        let mut manifest = manifest_for(&[community_slice(5)], std::slice::from_ref(&e), &config);
        let dir = tempfile::tempdir().unwrap();
        write_embeddings(dir.path(), &manifest, &[e]).unwrap();
        manifest.dim = 4;
        fs::write(dir.path().join(MANIFEST_FILE), json17::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(read_embeddings(dir.path()), Err(Error::Schema { .. })));
    }
}
