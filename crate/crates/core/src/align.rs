//! Chained orthogonal Procrustes alignment of per-slice embeddings.
//!
//! Vectors are rows, so a rotation acts on the right: `Y ↦ Y·R`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embed::sgns::SliceEmbeddings;
use crate::embed::store::{self, EmbeddingManifest};
use crate::embed::token::ActivityToken;
use crate::error::{Error, Result};
use crate::json17;
use crate::linalg::{from_rows, to_rows};

pub const ROTATIONS_FILE: &str = "rotations.json";

/// Orthogonal `R` minimizing `||A·R − B||_F`, from the SVD `AᵀB = UΣVᵀ`.
/// Reflections are allowed.
pub fn procrustes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!("procrustes shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidInput("procrustes needs a non-empty matrix".into()));
    }
    let m = a.transpose() * b;
    let svd = m
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("SVD did not converge in procrustes".into()))?;
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Numerical("SVD returned no singular vectors".into()));
    };
    Ok(u * v_t)
}

/// Minimum number of shared tokens to fit a rotation between two slices.
pub fn min_shared_tokens(dim: usize) -> usize {
    (dim / 10).max(3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentChain {
    pub slice_indices: Vec<usize>,
    /// `rotations[t]` maps slice `t` onto slice `t + 1`.
    pub rotations: Vec<DMatrix<f64>>,
    /// `cumulative[t]` maps slice `t` into the last slice's space; the last entry is the identity.
    pub cumulative: Vec<DMatrix<f64>>,
    pub shared_counts: Vec<usize>,
}

fn shared_rows(earlier: &SliceEmbeddings, later: &SliceEmbeddings) -> (Vec<usize>, Vec<usize>) {
    let index: HashMap<&ActivityToken, usize> = later.tokens.iter().enumerate().map(|(i, t)| (t, i)).collect();
    earlier.tokens.iter().enumerate().filter_map(|(i, t)| index.get(t).map(|&j| (i, j))).unzip()
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// Fits every adjacent pair on its shared tokens and maps all slices into
/// the last slice's coordinates. Activity and context vectors rotate together.
pub fn align_chain(embeddings: &[SliceEmbeddings]) -> Result<(AlignmentChain, Vec<SliceEmbeddings>)> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidInput(format!("alignment needs at least 2 slices, got {}", embeddings.len())));
    }
    if let Some(e) = embeddings.iter().find(|e| e.tokens.is_empty()) {
        return Err(Error::InvalidInput(format!("slice {} is empty; drop flagged empty slices before aligning", e.index)));
    }
    let dim = embeddings[0].dim();
    if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::InvalidInput(format!("slice {} has dimension {}, expected {dim}", e.index, e.dim())));
    }
    let required = min_shared_tokens(dim);
    let mut rotations = Vec::with_capacity(embeddings.len() - 1);
    let mut shared_counts = Vec::with_capacity(embeddings.len() - 1);
    for pair in embeddings.windows(2) {
        let (ia, ib) = shared_rows(&pair[0], &pair[1]);
        if ia.len() < required {
            return Err(Error::InsufficientOverlap { earlier: pair[0].index, later: pair[1].index, shared: ia.len(), required });
        }
        let a = select_rows(&pair[0].activity, &ia);
        let b = select_rows(&pair[1].activity, &ib);
        rotations.push(procrustes(&a, &b)?);
        shared_counts.push(ia.len());
    }
    let t = embeddings.len();
    let mut cumulative = vec![DMatrix::identity(dim, dim); t];
    for i in (0..t - 1).rev() {
        cumulative[i] = &rotations[i] * &cumulative[i + 1];
    }
    let aligned = embeddings
        .iter()
        .zip(&cumulative)
        .map(|(e, q)| SliceEmbeddings { activity: &e.activity * q, context: &e.context * q, ..e.clone() })
        .collect();
    let chain = AlignmentChain { slice_indices: embeddings.iter().map(|e| e.index).collect(), rotations, cumulative, shared_counts };
    Ok((chain, aligned))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationsManifest {
    pub slice_indices: Vec<usize>,
    pub shared_counts: Vec<usize>,
    pub rotations: Vec<Vec<Vec<f64>>>,
    pub cumulative: Vec<Vec<Vec<f64>>>,
}

impl AlignmentChain {
    pub fn to_manifest(&self) -> RotationsManifest {
        RotationsManifest {
            slice_indices: self.slice_indices.clone(),
            shared_counts: self.shared_counts.clone(),
            rotations: self.rotations.iter().map(to_rows).collect(),
            cumulative: self.cumulative.iter().map(to_rows).collect(),
        }
    }

    pub fn from_manifest(m: &RotationsManifest) -> Result<Self> {
        let d = m.cumulative.first().map_or(0, |c| c.len());
        Ok(Self {
            slice_indices: m.slice_indices.clone(),
            shared_counts: m.shared_counts.clone(),
            rotations: m.rotations.iter().map(|r| from_rows(r, d)).collect::<Result<_>>()?,
            cumulative: m.cumulative.iter().map(|r| from_rows(r, d)).collect::<Result<_>>()?,
        })
    }
}

/// Writes the aligned embedding set (same layout as the embed stage) and `rotations.json`.
pub fn write_alignment(dir: &Path, manifest: &EmbeddingManifest, aligned: &[SliceEmbeddings], chain: &AlignmentChain) -> Result<()> {
    store::write_embeddings(dir, manifest, aligned)?;
    let path = dir.join(ROTATIONS_FILE);
    fs::write(&path, json17::to_string(&chain.to_manifest())?).map_err(|e| Error::io(&path, e))
}

pub fn read_rotations(dir: &Path) -> Result<AlignmentChain> {
    let path = dir.join(ROTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: RotationsManifest = serde_json::from_str(&text).map_err(|e| Error::schema(&path, e.to_string()))?;
    AlignmentChain::from_manifest(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::sgns::SgnsConfig;
    use crate::linalg::{orthogonality_error, random_orthogonal};
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, r: &mut rng::Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(r))
    }

    fn slice(index: usize, tokens: &[&str], activity: DMatrix<f64>) -> SliceEmbeddings {
        let n = tokens.len();
        let d = activity.ncols();
        SliceEmbeddings {
            index,
            start: 0,
            end: 1,
            tokens: tokens.iter().map(|s| ActivityToken::new(0, *s, "x")).collect(),
            counts: vec![1; n],
            context: activity.clone() * 0.5,
            activity,
            config: SgnsConfig { dim: d, ..SgnsConfig::default() },
            seed: 0,
            epoch_losses: vec![],
        }
    }

    #[test]
    fn identity_and_scalar_cases() {
        let mut r = rng::seeded(3);
        let a = gaussian(30, 5, &mut r);
        let id = procrustes(&a, &a).unwrap();
        assert!((id - DMatrix::<f64>::identity(5, 5)).norm() < 1e-10);

        let a = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let b = DMatrix::from_column_slice(2, 1, &[-1.0, -2.0]);
        let rr = procrustes(&a, &b).unwrap();
        let brute = [1.0, -1.0]
            .into_iter()
            .min_by(|&x, &y| ((&a * x - &b).norm()).total_cmp(&(&a * y - &b).norm()))
            .unwrap();
        assert_eq!(rr[(0, 0)], brute);
        assert!(procrustes(&DMatrix::zeros(0, 3), &DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn recovers_planted_rotation() {
        let mut r = rng::seeded(5);
        let a = gaussian(200, 120, &mut r);
        let q0 = random_orthogonal(120, &mut r);
        let rr = procrustes(&a, &(&a * &q0)).unwrap();
        assert!((&rr - &q0).norm() <= 1e-6);
        assert!(orthogonality_error(&rr) <= 1e-8);
    }

    #[test]
    fn residual_is_optimal_over_random_rotations() {
        let mut r = rng::seeded(8);
        let a = gaussian(20, 4, &mut r);
        let b = &a * random_orthogonal(4, &mut r) + gaussian(20, 4, &mut r) * 0.3;
        let best = (&a * procrustes(&a, &b).unwrap() - &b).norm();
        for _ in 0..1000 {
            let q = random_orthogonal(4, &mut r);
            assert!(best <= (&a * q - &b).norm() + 1e-12);
        }
    }

    #[test]
    fn chain_recovers_common_frame() {
        let mut r = rng::seeded(11);
        let names: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
        let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let base = gaussian(12, 6, &mut r);
        let slices: Vec<SliceEmbeddings> =
            (1..=3).map(|i| slice(i, &names, &base * random_orthogonal(6, &mut r))).collect();
        let (chain, aligned) = align_chain(&slices).unwrap();
        assert_eq!(chain.shared_counts, vec![12, 12]);
        for e in &aligned {
            assert!((&e.activity - &aligned[2].activity).norm() < 1e-6);
            // Context vectors go through the same rotation.
            assert!((&e.context - &aligned[2].context).norm() < 1e-6);
        }
        assert_eq!(aligned[2], slices[2]);
        assert!(chain.cumulative.iter().all(|q| orthogonality_error(q) < 1e-8));

        // Intra-slice geometry is untouched.
        let before = &slices[0].activity * slices[0].activity.transpose();
        let after = &aligned[0].activity * aligned[0].activity.transpose();
        assert!((before - after).norm() < 1e-10);
    }

    #[test]
    fn identical_slices_give_identity() {
        let mut r = rng::seeded(2);
        let m = gaussian(5, 3, &mut r);
        let slices: Vec<_> = (1..=3).map(|i| slice(i, &["a", "b", "c", "d", "e"], m.clone())).collect();
        let (chain, aligned) = align_chain(&slices).unwrap();
        for q in &chain.rotations {
            assert!((q - DMatrix::<f64>::identity(3, 3)).norm() < 1e-10);
        }
        for (a, s) in aligned.iter().zip(&slices) {
            assert!((&a.activity - &s.activity).norm() < 1e-10);
        }
    }

    #[test]
    fn disjoint_vocabulary_names_the_pair() {
        let mut r = rng::seeded(4);
        let slices = vec![
            slice(1, &["a", "b", "c"], gaussian(3, 2, &mut r)),
            slice(2, &["a", "b", "c"], gaussian(3, 2, &mut r)),
            slice(3, &["x", "y", "z"], gaussian(3, 2, &mut r)),
        ];
        match align_chain(&slices) {
            Err(Error::InsufficientOverlap { earlier: 2, later: 3, shared: 0, required: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(align_chain(&slices[..1]).is_err());
    }

    #[test]
    fn rotations_round_trip() {
        let mut r = rng::seeded(9);
        let names = ["a", "b", "c", "d"];
        let slices: Vec<_> = (1..=2).map(|i| slice(i, &names, gaussian(4, 3, &mut r))).collect();
        let (chain, aligned) = align_chain(&slices).unwrap();
        let manifest = store::manifest_for(&[], &[], &slices[0].config);
        let dir = tempfile::tempdir().unwrap();
        write_alignment(dir.path(), &manifest, &aligned, &chain).unwrap();
        assert_eq!(read_rotations(dir.path()).unwrap(), chain);
    }
}
