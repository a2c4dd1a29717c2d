//! Per-token trajectories through aligned slices, proximity to a reference
//! group, operation classes and 2-D projections.

pub mod export;
pub mod project;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::sgns::SliceEmbeddings;
use crate::embed::token::ActivityToken;
use crate::error::{Error, Result};
use crate::linalg::distance;

pub use export::{export_rows, export_trajectories, project_trajectories, trajectory_points, ExportRow, Projection};
pub use project::{input_affinities, project_pca, project_tsne, TsneOptions, TsneResult};

pub const DEFAULT_NEIGHBORS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub slice: usize,
    /// `None` when the token does not occur in the slice.
    pub vector: Option<Vec<f64>>,
    pub count: usize,
}

impl TrajectoryPoint {
    pub fn present(&self) -> bool {
        self.vector.is_some()
    }
}

/// A value between two consecutive present slices; `gap` is `to - from`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStep {
    pub from: usize,
    pub to: usize,
    pub gap: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub token: ActivityToken,
    pub points: Vec<TrajectoryPoint>,
    pub drift: Vec<SeriesStep>,
    pub neighbor_overlap: Vec<SeriesStep>,
}

impl Trajectory {
    pub fn present_points(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.points.iter().filter_map(|p| p.vector.as_deref().map(|v| (p.slice, v)))
    }

    pub fn counts(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.count).collect()
    }
}

fn row(e: &SliceEmbeddings, i: usize) -> Vec<f64> {
    e.activity.row(i).iter().copied().collect()
}

fn nearest_tokens(e: &SliceEmbeddings, i: usize, k: usize) -> HashSet<&ActivityToken> {
    let me = row(e, i);
    let mut d: Vec<(f64, usize)> = (0..e.tokens.len()).filter(|&j| j != i).map(|j| (distance(&me, &row(e, j)), j)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.iter().take(k).map(|&(_, j)| &e.tokens[j]).collect()
}

fn jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

fn steps<F: FnMut(usize, usize) -> Result<f64>>(present: &[usize], aligned: &[SliceEmbeddings], mut f: F) -> Result<Vec<SeriesStep>> {
    present
        .windows(2)
        .map(|w| {
            let (from, to) = (aligned[w[0]].index, aligned[w[1]].index);
            Ok(SeriesStep { from, to, gap: to - from, value: f(w[0], w[1])? })
        })
        .collect()
}

/// Positions (into `aligned`) of the slices containing `token`.
fn present_positions(token: &ActivityToken, aligned: &[SliceEmbeddings]) -> Vec<usize> {
    aligned.iter().enumerate().filter(|(_, e)| e.position(token).is_some()).map(|(i, _)| i).collect()
}

/// Trajectory with drift `||y_t − y_s||₂` and k-NN Jaccard overlap between
/// consecutive present slices `s < t`. Absent slices are kept as flagged points.
pub fn extract_trajectory(token: &ActivityToken, aligned: &[SliceEmbeddings], neighbors: usize) -> Result<Trajectory> {
    let present = present_positions(token, aligned);
    if present.len() < 2 {
        return Err(Error::InvalidInput(format!("token {token} occurs in {} slice(s); a trajectory needs 2", present.len())));
    }
    let points = aligned
        .iter()
        .map(|e| {
            let pos = e.position(token);
            TrajectoryPoint { slice: e.index, vector: pos.map(|i| row(e, i)), count: pos.map_or(0, |i| e.counts[i]) }
        })
        .collect();
    let vec_at = |s: usize| row(&aligned[s], aligned[s].position(token).unwrap());
    let drift = steps(&present, aligned, |a, b| Ok(distance(&vec_at(a), &vec_at(b))))?;
    let neighbor_overlap = steps(&present, aligned, |a, b| {
        let na = nearest_tokens(&aligned[a], aligned[a].position(token).unwrap(), neighbors);
        let nb = nearest_tokens(&aligned[b], aligned[b].position(token).unwrap(), neighbors);
        Ok(jaccard(&na, &nb))
    })?;
    Ok(Trajectory { token: token.clone(), points, drift, neighbor_overlap })
}

/// A reference token pattern; `null` label or subsystem matches any value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePattern {
    #[serde(default, deserialize_with = "deserialize_label", serialize_with = "serialize_label")]
    pub label: Option<usize>,
    pub sender_id: String,
    #[serde(default)]
    pub subsystem: Option<String>,
}

fn deserialize_label<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(usize),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(n)) => Ok(Some(n)),
        Some(Raw::Text(s)) => crate::cluster::parse_label_id(&s)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("bad label `{s}`"))),
    }
}

fn serialize_label<S: serde::Serializer>(label: &Option<usize>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match label {
        Some(l) => s.serialize_str(&crate::cluster::label_id(*l)),
        None => s.serialize_none(),
    }
}

impl ReferencePattern {
    pub fn exact(token: &ActivityToken) -> Self {
        Self { label: Some(token.label), sender_id: token.sender_id.clone(), subsystem: Some(token.subsystem.clone()) }
    }

    pub fn sender(sender_id: impl Into<String>) -> Self {
        Self { label: None, sender_id: sender_id.into(), subsystem: None }
    }

    pub fn matches(&self, t: &ActivityToken) -> bool {
        self.label.is_none_or(|l| l == t.label)
            && self.sender_id == t.sender_id
            && self.subsystem.as_ref().is_none_or(|s| *s == t.subsystem)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub name: String,
    pub tokens: Vec<ReferencePattern>,
}

impl ReferenceSet {
    /// Accepts either `{"name": .., "tokens": [..]}` or a bare list of patterns.
    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Full(ReferenceSet),
            List(Vec<ReferencePattern>),
        }
        let set = match serde_json::from_str::<Raw>(text).map_err(|e| Error::schema(source, e.to_string()))? {
            Raw::Full(s) => s,
            Raw::List(tokens) => ReferenceSet { name: "reference".into(), tokens },
        };
        if set.tokens.is_empty() {
            return Err(Error::schema(source, "reference set is empty"));
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn matches(&self, t: &ActivityToken) -> bool {
        self.tokens.iter().any(|p| p.matches(t))
    }

    /// Concrete reference tokens of a slice, excluding `exclude`.
    fn members<'a>(&self, e: &'a SliceEmbeddings, exclude: &ActivityToken) -> Vec<&'a ActivityToken> {
        e.tokens.iter().filter(|t| *t != exclude && self.matches(t)).collect()
    }
}

fn token_vector(e: &SliceEmbeddings, t: &ActivityToken) -> Vec<f64> {
    e.vector(t).expect("token present")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// `||dist_t − dist_s||₂` over distances to the shared reference tokens.
    #[default]
    DistanceProfile,
    /// Change in cosine to the centroid of the reference tokens.
    CentroidCosine,
}

/// Context shift between consecutive present slices of `token`.
pub fn context_shift(token: &ActivityToken, reference: &ReferenceSet, aligned: &[SliceEmbeddings], mode: ShiftMode) -> Result<Vec<SeriesStep>> {
    let present = present_positions(token, aligned);
    steps(&present, aligned, |a, b| {
        let (ea, eb) = (&aligned[a], &aligned[b]);
        let shared: Vec<&ActivityToken> =
            reference.members(ea, token).into_iter().filter(|t| eb.position(t).is_some()).collect();
        if shared.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no reference token of `{}` occurs in both slices {} and {}",
                reference.name, ea.index, eb.index
            )));
        }
        let (ya, yb) = (token_vector(ea, token), token_vector(eb, token));
        Ok(match mode {
            ShiftMode::DistanceProfile => shared
                .iter()
                .map(|r| distance(&yb, &token_vector(eb, r)) - distance(&ya, &token_vector(ea, r)))
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt(),
            ShiftMode::CentroidCosine => {
                let centroid = |e: &SliceEmbeddings| {
                    let mut c = vec![0.0; e.dim()];
                    for r in &shared {
                        for (ci, v) in c.iter_mut().zip(token_vector(e, r)) {
                            *ci += v / shared.len() as f64;
                        }
                    }
                    c
                };
                (crate::linalg::cosine(&yb, &centroid(eb)) - crate::linalg::cosine(&ya, &centroid(ea))).abs()
            }
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximityAggregate {
    #[default]
    Mean,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityTrend {
    pub slices: Vec<usize>,
    pub distances: Vec<f64>,
    /// Spearman correlation of distance against slice index; `None` with
    /// fewer than 3 slices.
    pub rho: Option<f64>,
    pub reference_tokens: usize,
}

/// Distance from `token` to the reference tokens present in every slice
/// where `token` occurs, per slice, and its rank trend.
pub fn proximity_trend(
    token: &ActivityToken,
    reference: &ReferenceSet,
    aligned: &[SliceEmbeddings],
    aggregate: ProximityAggregate,
) -> Result<ProximityTrend> {
    let present = present_positions(token, aligned);
    let Some(&first) = present.first() else {
        return Err(Error::InvalidInput(format!("token {token} occurs in no slice")));
    };
    let shared: Vec<&ActivityToken> = reference
        .members(&aligned[first], token)
        .into_iter()
        .filter(|t| present.iter().all(|&p| aligned[p].position(t).is_some()))
        .collect();
    if shared.is_empty() {
        let idx: Vec<String> = present.iter().map(|&p| aligned[p].index.to_string()).collect();
        return Err(Error::InvalidInput(format!(
            "no reference token of `{}` occurs in all of slices {}",
            reference.name,
            idx.join(", ")
        )));
    }
    let mut slices = Vec::new();
    let mut distances = Vec::new();
    for &p in &present {
        let e = &aligned[p];
        let y = token_vector(e, token);
        let ds = shared.iter().map(|r| distance(&y, &token_vector(e, r)));
        distances.push(match aggregate {
            ProximityAggregate::Mean => ds.sum::<f64>() / shared.len() as f64,
            ProximityAggregate::Min => ds.fold(f64::INFINITY, f64::min),
        });
        slices.push(e.index);
    }
    let rho = if slices.len() >= 3 {
        let x: Vec<f64> = slices.iter().map(|&s| s as f64).collect();
        spearman(&x, &distances)
    } else {
        None
    };
    Ok(ProximityTrend { slices, distances, rho, reference_tokens: shared.len() })
}

/// Ranks starting at 1; ties get the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ as the Pearson correlation of average ranks. A constant
/// series has no rank association and gives 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Some(0.0);
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Variance over mean of per-slice event counts (population variance).
pub fn burstiness(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    var / mean
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationClass {
    Opportunistic,
    Awry,
    HitOrMiss,
    /// The proximity trend is undefined.
    Unclassified,
}

impl OperationClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            OperationClass::Opportunistic => "opportunistic",
            OperationClass::Awry => "awry",
            OperationClass::HitOrMiss => "hit_or_miss",
            OperationClass::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyThresholds {
    pub burstiness: f64,
    pub approach_rho: f64,
    pub recede_rho: f64,
}

impl Default for ClassifyThresholds {
    fn default() -> Self {
        Self { burstiness: 1.5, approach_rho: -0.5, recede_rho: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperationEvidence {
    pub rho: Option<f64>,
    pub burstiness: f64,
    pub thresholds: ClassifyThresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub class: OperationClass,
    pub evidence: OperationEvidence,
}

/// Pure function of the evidence.
pub fn classify_evidence(evidence: &OperationEvidence) -> OperationClass {
    let t = &evidence.thresholds;
    match evidence.rho {
        None => OperationClass::Unclassified,
        Some(rho) if evidence.burstiness > t.burstiness && rho <= t.approach_rho => OperationClass::Opportunistic,
        Some(rho) if rho >= t.recede_rho => OperationClass::Awry,
        Some(_) => OperationClass::HitOrMiss,
    }
}

/// Classifies from the proximity trend and the per-slice event counts
/// (zeros for absent slices) of the trajectory.
pub fn classify_operation(trajectory: &Trajectory, trend: &ProximityTrend, thresholds: ClassifyThresholds) -> Classification {
    let evidence = OperationEvidence { rho: trend.rho, burstiness: burstiness(&trajectory.counts()), thresholds };
    Classification { class: classify_evidence(&evidence), evidence }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub neighbors: usize,
    pub shift_mode: ShiftMode,
    pub aggregate: ProximityAggregate,
    pub thresholds: ClassifyThresholds,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            shift_mode: ShiftMode::default(),
            aggregate: ProximityAggregate::default(),
            thresholds: ClassifyThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAnalysis {
    pub trajectory: Trajectory,
    pub context_shift: Vec<SeriesStep>,
    pub proximity: ProximityTrend,
    pub classification: Classification,
}

pub fn analyze_token(token: &ActivityToken, reference: &ReferenceSet, aligned: &[SliceEmbeddings], opts: &AnalysisOptions) -> Result<TokenAnalysis> {
    let trajectory = extract_trajectory(token, aligned, opts.neighbors)?;
    let context_shift = context_shift(token, reference, aligned, opts.shift_mode)?;
    let proximity = proximity_trend(token, reference, aligned, opts.aggregate)?;
    let classification = classify_operation(&trajectory, &proximity, opts.thresholds);
    Ok(TokenAnalysis { trajectory, context_shift, proximity, classification })
}

/// Non-reference tokens present in at least `min_slices` slices, in
/// first-appearance order.
pub fn candidate_tokens(aligned: &[SliceEmbeddings], reference: &ReferenceSet, min_slices: usize) -> Vec<ActivityToken> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in aligned {
        for t in &e.tokens {
            if seen.insert(t.clone()) && !reference.matches(t) && present_positions(t, aligned).len() >= min_slices.max(2) {
                out.push(t.clone());
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::embed::sgns::SgnsConfig;
    use crate::linalg::random_orthogonal;
    use crate::rng;
    use nalgebra::DMatrix;
    use rand::Rng as _;

    pub fn slice_from(index: usize, rows: &[(ActivityToken, Vec<f64>, usize)]) -> SliceEmbeddings {
        let d = rows[0].1.len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.1.clone()).collect();
        let m = DMatrix::from_row_slice(rows.len(), d, &flat);
        SliceEmbeddings {
            index,
            start: 0,
            end: 1,
            tokens: rows.iter().map(|r| r.0.clone()).collect(),
            counts: rows.iter().map(|r| r.2).collect(),
            context: m.clone(),
            activity: m,
            config: SgnsConfig { dim: d, ..SgnsConfig::default() },
            seed: 0,
            epoch_losses: vec![],
        }
    }

    fn tok(s: &str) -> ActivityToken {
        ActivityToken::new(0, s, "x")
    }

    fn maint() -> ReferenceSet {
        ReferenceSet { name: "maintainers".into(), tokens: vec![ReferencePattern::sender("m1"), ReferencePattern::sender("m2")] }
    }

    #[test]
    fn drift_and_gaps() {
        let a = tok("a");
        let s1 = slice_from(1, &[(a.clone(), vec![0.0, 0.0], 1), (tok("m1"), vec![5.0, 0.0], 1)]);
        let s2 = slice_from(2, &[(a.clone(), vec![3.0, 4.0], 1), (tok("m1"), vec![5.0, 0.0], 1)]);
        let s3 = slice_from(3, &[(tok("m1"), vec![5.0, 0.0], 1)]);
        let s4 = slice_from(4, &[(a.clone(), vec![3.0, 5.0], 1), (tok("m1"), vec![5.0, 0.0], 1)]);
        let t = extract_trajectory(&a, &[s1.clone(), s2, s3, s4], 1).unwrap();
        let pairs: Vec<(usize, usize, usize)> = t.drift.iter().map(|s| (s.from, s.to, s.gap)).collect();
        assert_eq!(pairs, vec![(1, 2, 1), (2, 4, 2)]);
        assert_eq!(t.drift[0].value, 5.0);
        assert_eq!(t.drift[1].value, 1.0);
        assert!(!t.points[2].present());
        assert_eq!(t.neighbor_overlap.len(), 2);
        assert!(t.neighbor_overlap.iter().all(|s| (0.0..=1.0).contains(&s.value)));
        assert!(extract_trajectory(&a, &[s1], 1).is_err());
    }

    #[test]
    fn random_drift_matches_direct_norms() {
        let mut r = rng::seeded(1);
        let a = tok("a");
        let vecs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let slices: Vec<_> = vecs.iter().enumerate().map(|(i, v)| slice_from(i + 1, &[(a.clone(), v.clone(), 1)])).collect();
        let t = extract_trajectory(&a, &slices, 3).unwrap();
        for (i, s) in t.drift.iter().enumerate() {
            let direct: f64 = vecs[i].iter().zip(&vecs[i + 1]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            assert!((s.value - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn static_embeddings_have_zero_series() {
        let a = tok("a");
        let rows = vec![(a.clone(), vec![1.0, 2.0], 2), (tok("m1"), vec![0.0, 1.0], 1)];
        let slices: Vec<_> = (1..=4).map(|i| slice_from(i, &rows)).collect();
        let t = extract_trajectory(&a, &slices, 1).unwrap();
        assert!(t.drift.iter().all(|s| s.value == 0.0));
        let cs = context_shift(&a, &maint(), &slices, ShiftMode::DistanceProfile).unwrap();
        assert!(cs.iter().all(|s| s.value == 0.0));
        let p = proximity_trend(&a, &maint(), &slices, ProximityAggregate::Mean).unwrap();
        assert_eq!(p.rho, Some(0.0));
        let c = classify_operation(&t, &p, ClassifyThresholds::default());
        assert_eq!(c.class, OperationClass::HitOrMiss);
    }

    #[test]
    fn collinear_shift_is_distance_change() {
        let a = tok("a");
        let s1 = slice_from(1, &[(a.clone(), vec![0.0, 0.0], 1), (tok("m1"), vec![10.0, 0.0], 1)]);
        let s2 = slice_from(2, &[(a.clone(), vec![2.5, 0.0], 1), (tok("m1"), vec![10.0, 0.0], 1)]);
        let cs = context_shift(&a, &maint(), &[s1, s2], ShiftMode::DistanceProfile).unwrap();
        assert_eq!(cs[0].value, 2.5);
    }

    #[test]
    fn growing_displacement_gives_nondecreasing_shift() {
        let a = tok("a");
        let mut pos = 0.0;
        let slices: Vec<_> = (1..=6)
            .map(|i| {
                pos += i as f64;
                slice_from(i, &[(a.clone(), vec![pos, 0.0], 1), (tok("m1"), vec![-50.0, 3.0], 1), (tok("m2"), vec![-40.0, -7.0], 1)])
            })
            .collect();
        let cs = context_shift(&a, &maint(), &slices, ShiftMode::DistanceProfile).unwrap();
        assert!(cs.windows(2).all(|w| w[1].value >= w[0].value), "{cs:?}");
    }

    #[test]
    fn missing_reference_names_slices() {
        let a = tok("a");
        let s1 = slice_from(1, &[(a.clone(), vec![0.0], 1), (tok("m1"), vec![1.0], 1)]);
        let s2 = slice_from(2, &[(a.clone(), vec![0.0], 1)]);
        let err = context_shift(&a, &maint(), &[s1, s2], ShiftMode::DistanceProfile).unwrap_err().to_string();
        assert!(err.contains("slices 1 and 2"), "{err}");
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]), Some(0.0));
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);

        // Brute-force oracle: 1 − 6Σd²/(n(n²−1)) holds when there are no ties.
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let y: Vec<f64> = (0..10).map(|_| r.random::<f64>()).collect();
            let x: Vec<f64> = (1..=10).map(|i| i as f64).collect();
            let rank = |v: &[f64], i: usize| 1.0 + v.iter().filter(|&&w| w < v[i]).count() as f64;
            let d2: f64 = (0..10).map(|i| (rank(&x, i) - rank(&y, i)).powi(2)).sum();
            let oracle = 1.0 - 6.0 * d2 / (10.0 * 99.0);
            assert!((spearman(&x, &y).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_rules_and_evidence_round_trip() {
        let t = ClassifyThresholds::default();
        let ev = |rho, b| OperationEvidence { rho, burstiness: b, thresholds: t };
        assert_eq!(classify_evidence(&ev(Some(-0.9), 3.0)), OperationClass::Opportunistic);
        assert_eq!(classify_evidence(&ev(Some(-0.9), 1.0)), OperationClass::HitOrMiss);
        assert_eq!(classify_evidence(&ev(Some(0.7), 3.0)), OperationClass::Awry);
        assert_eq!(classify_evidence(&ev(Some(0.0), 0.0)), OperationClass::HitOrMiss);
        assert_eq!(classify_evidence(&ev(None, 9.0)), OperationClass::Unclassified);
        let c = Classification { class: classify_evidence(&ev(Some(-0.6), 2.0)), evidence: ev(Some(-0.6), 2.0) };
        let back: Classification = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(classify_evidence(&back.evidence), back.class);
        assert_eq!(burstiness(&[1, 1, 1]), 0.0);
        assert!((burstiness(&[0, 0, 9]) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn approaching_and_receding_tokens() {
        let a = tok("a");
        let mk = |dist: &dyn Fn(usize) -> f64, counts: &dyn Fn(usize) -> usize| -> Vec<SliceEmbeddings> {
            (1..=8)
                .map(|i| slice_from(i, &[(a.clone(), vec![dist(i), 0.0], counts(i)), (tok("m1"), vec![0.0, 0.0], 3)]))
                .collect()
        };
        let bursty = |i: usize| if i % 4 == 0 { 30 } else { 1 };
        let near = mk(&|i| 10.0 - i as f64, &bursty);
        let an = analyze_token(&a, &maint(), &near, &AnalysisOptions::default()).unwrap();
        assert_eq!(an.classification.class, OperationClass::Opportunistic);
        let far = mk(&|i| i as f64, &|_| 2);
        let an = analyze_token(&a, &maint(), &far, &AnalysisOptions::default()).unwrap();
        assert_eq!(an.classification.class, OperationClass::Awry);
    }

    #[test]
    fn series_are_invariant_to_global_rotation() {
        let mut r = rng::seeded(21);
        let names = ["a", "m1", "m2", "b"];
        let slices: Vec<_> = (1..=5)
            .map(|i| {
                let rows: Vec<_> = names.iter().map(|n| (tok(n), (0..6).map(|_| r.random_range(-1.0..1.0)).collect(), 1)).collect();
                slice_from(i, &rows)
            })
            .collect();
        let q = random_orthogonal(6, &mut r);
        let rotated: Vec<_> = slices.iter().map(|s| SliceEmbeddings { activity: &s.activity * &q, ..s.clone() }).collect();
        let opts = AnalysisOptions { neighbors: 2, ..AnalysisOptions::default() };
        let x = analyze_token(&tok("a"), &maint(), &slices, &opts).unwrap();
        let y = analyze_token(&tok("a"), &maint(), &rotated, &opts).unwrap();
        let close = |p: &[SeriesStep], q: &[SeriesStep]| p.iter().zip(q).all(|(u, v)| (u.value - v.value).abs() <= 1e-10 * u.value.abs().max(1.0));
        assert!(close(&x.trajectory.drift, &y.trajectory.drift));
        assert!(close(&x.context_shift, &y.context_shift));
        assert_eq!(x.proximity.rho, y.proximity.rho);
    }

    #[test]
    fn reference_json_forms() {
        let full = r#"{"name": "maintainers", "tokens": [{"label": "Y_2", "sender_id": "m", "subsystem": "net"}, {"label": null, "sender_id": "n"}]}"#;
        let s = ReferenceSet::from_json(full, "r").unwrap();
        assert!(s.matches(&ActivityToken::new(2, "m", "net")));
        assert!(!s.matches(&ActivityToken::new(1, "m", "net")));
        assert!(s.matches(&ActivityToken::new(4, "n", "usb")));
        let list = ReferenceSet::from_json(r#"[{"label": 0, "sender_id": "m", "subsystem": "x"}]"#, "r").unwrap();
        assert_eq!(list.tokens[0], ReferencePattern::exact(&ActivityToken::new(0, "m", "x")));
        assert!(ReferenceSet::from_json("[]", "r").is_err());
    }
}
