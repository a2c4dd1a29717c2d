//! Exploratory factor analysis: principal-axis extraction, varimax rotation
//! and regression-method factor scores over standardized characteristics.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::characteristics::{CharacterizedEvent, CHARACTERISTIC_NAMES};
use crate::error::{Error, Result};
use crate::linalg::{self, from_rows, sorted_symmetric_eigen, to_rows};
use crate::time::{self, Timestamp};

pub const MAX_PAF_ITERATIONS: usize = 200;
pub const PAF_TOLERANCE: f64 = 1e-6;
pub const VARIMAX_TOLERANCE: f64 = 1e-8;
const MAX_VARIMAX_SWEEPS: usize = 1000;
const RIDGE: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e12;

/// Column names used when five factors are extracted.
pub const DEFAULT_FACTOR_NAMES: [&str; 5] = [
    "Code Contribution",
    "Knowledge Sharing",
    "Patch Posting",
    "Progress Control",
    "Acknowledgment",
];

pub fn default_factor_names(m: usize) -> Vec<String> {
    if m == DEFAULT_FACTOR_NAMES.len() {
        DEFAULT_FACTOR_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=m).map(|i| format!("Factor {i}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Standardized {
    /// n × (retained columns) z-scores.
    pub z: DMatrix<f64>,
    /// Per input column; dropped columns keep their mean and a zero std.
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub retained: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Column-wise z-scores with the sample standard deviation.
pub fn standardize(x: &DMatrix<f64>) -> Result<Standardized> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::InvalidInput(format!("standardize needs at least 2 rows, got {n}")));
    }
    let mut means = Vec::with_capacity(p);
    let mut std_devs = Vec::with_capacity(p);
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..p {
        let col = x.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        means.push(mean);
        if sd <= 1e-12 * mean.abs().max(1.0) {
            std_devs.push(0.0);
            dropped.push(j);
        } else {
            std_devs.push(sd);
            retained.push(j);
        }
    }
    let z = DMatrix::from_fn(n, retained.len(), |r, c| {
        let j = retained[c];
        (x[(r, j)] - means[j]) / std_devs[j]
    });
    Ok(Standardized { z, means, std_devs, retained, dropped })
}

pub fn correlation_matrix(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows().max(2);
    let r = z.transpose() * z / (n - 1) as f64;
    (&r + r.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorCount {
    /// Number of correlation eigenvalues strictly greater than one.
    Kaiser,
    Fixed(usize),
}

pub fn choose_num_factors(r: &DMatrix<f64>, count: FactorCount) -> Result<usize> {
    match count {
        FactorCount::Fixed(m) => Ok(m),
        FactorCount::Kaiser => {
            let (values, _) = sorted_symmetric_eigen(r);
            let m = values.iter().filter(|&&v| v > 1.0 + 1e-12).count();
            if m == 0 {
                return Err(Error::InvalidInput(
                    "Kaiser rule retained no factors (no eigenvalue > 1); pass an explicit factor count".into(),
                ));
            }
            Ok(m)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub loadings: DMatrix<f64>,
    pub uniquenesses: DVector<f64>,
    pub iterations: usize,
}

fn initial_communalities(r: &DMatrix<f64>) -> DVector<f64> {
    let p = r.nrows();
    if let Some(chol) = r.clone().cholesky() {
        let inv = chol.inverse();
        let smc = DVector::from_fn(p, |j, _| (1.0 - 1.0 / inv[(j, j)]).clamp(0.0, 1.0));
        // A near-singular R gives SMCs of ~1 that stall at the Heywood bound.
        if smc.iter().all(|v| v.is_finite() && *v < 1.0 - 1e-9) {
            return smc;
        }
    }
    DVector::from_fn(p, |j, _| {
        (0..p).filter(|&k| k != j).map(|k| r[(j, k)].abs()).fold(0.0, f64::max)
    })
}

fn top_loadings(reduced: &DMatrix<f64>, m: usize) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_symmetric_eigen(reduced);
    let p = reduced.nrows();
    let mut l = DMatrix::zeros(p, m);
    for i in 0..m {
        let lambda = values[i];
        if lambda < -1e-10 {
            return Err(Error::Numerical(format!(
                "eigenvalue {i} of the reduced correlation matrix is negative ({lambda:e}); correlation matrix is degenerate for {m} factors"
            )));
        }
        let s = lambda.max(0.0).sqrt();
        for j in 0..p {
            l[(j, i)] = vectors[(j, i)] * s;
        }
    }
    Ok(l)
}

/// Principal-axis factoring.
pub fn extract_factors(r: &DMatrix<f64>, m: usize) -> Result<Extraction> {
    let p = r.nrows();
    if m < 1 || m >= p {
        return Err(Error::InvalidInput(format!(
            "factor count must satisfy 1 <= m < p, got m = {m}, p = {p}"
        )));
    }
    let mut h = initial_communalities(r);
    let mut delta = f64::INFINITY;
    let mut loadings = DMatrix::zeros(p, m);
    let mut iterations = 0;
    while iterations < MAX_PAF_ITERATIONS {
        iterations += 1;
        let mut reduced = r.clone();
        for j in 0..p {
            reduced[(j, j)] = h[j];
        }
        loadings = top_loadings(&reduced, m)?;
        let next = DVector::from_fn(p, |j, _| loadings.row(j).norm_squared().clamp(0.0, 1.0));
        delta = (&next - &h).amax();
        h = next;
        if delta < PAF_TOLERANCE {
            break;
        }
    }
    if delta >= PAF_TOLERANCE {
        return Err(Error::NotConverged {
            iterations,
            last_delta: delta,
            last_loadings: to_rows(&loadings),
        });
    }
    Ok(finish_extraction(loadings, iterations))
}

/// Applies the Heywood guard and derives uniquenesses.
fn finish_extraction(mut loadings: DMatrix<f64>, iterations: usize) -> Extraction {
    let (p, m) = loadings.shape();
    // Heywood guard: rows whose communality exceeds one are scaled back.
    for j in 0..p {
        let c = loadings.row(j).norm_squared();
        if c > 1.0 {
            let s = c.sqrt();
            for i in 0..m {
                loadings[(j, i)] /= s;
            }
        }
    }
    let uniquenesses = DVector::from_fn(p, |j, _| (1.0 - loadings.row(j).norm_squared()).clamp(0.0, 1.0));
    Extraction { loadings, uniquenesses, iterations }
}

/// Raw varimax criterion: sum over columns of the variance of squared entries.
pub fn varimax_criterion(a: &DMatrix<f64>) -> f64 {
    let p = a.nrows() as f64;
    (0..a.ncols())
        .map(|k| {
            let sq: Vec<f64> = a.column(k).iter().map(|v| v * v).collect();
            let mean = sq.iter().sum::<f64>() / p;
            sq.iter().map(|s| s * s).sum::<f64>() / p - mean * mean
        })
        .sum()
}

fn row_normalized(l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = l.clone();
    for j in 0..a.nrows() {
        let h = l.row(j).norm();
        if h > 1e-12 {
            for k in 0..a.ncols() {
                a[(j, k)] /= h;
            }
        }
    }
    a
}

/// Criterion on row-normalized (Kaiser-normalized) loadings.
pub fn normalized_varimax_criterion(l: &DMatrix<f64>) -> f64 {
    varimax_criterion(&row_normalized(l))
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, cos: f64, sin: f64) {
    for r in 0..m.nrows() {
        let x = m[(r, i)];
        let y = m[(r, j)];
        m[(r, i)] = x * cos + y * sin;
        m[(r, j)] = -x * sin + y * cos;
    }
}

/// Kaiser-normalized varimax by pairwise planar rotations. Returns the
/// rotated loadings and the orthogonal rotation with `rotated = loadings · rotation`.
pub fn varimax_rotate(loadings: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p, m) = loadings.shape();
    let mut rotation = DMatrix::identity(m, m);
    if m < 2 {
        return (loadings.clone(), rotation);
    }
    let mut a = row_normalized(loadings);
    let pf = p as f64;
    let mut criterion = varimax_criterion(&a);
    for _ in 0..MAX_VARIMAX_SWEEPS {
        for i in 0..m - 1 {
            for j in i + 1..m {
                let (mut su, mut sv, mut suv2, mut suv) = (0.0, 0.0, 0.0, 0.0);
                for r in 0..p {
                    let x = a[(r, i)];
                    let y = a[(r, j)];
                    let u = x * x - y * y;
                    let v = 2.0 * x * y;
                    su += u;
                    sv += v;
                    suv2 += u * u - v * v;
                    suv += 2.0 * u * v;
                }
                let num = suv - 2.0 * su * sv / pf;
                let den = suv2 - (su * su - sv * sv) / pf;
                let phi = num.atan2(den) / 4.0;
                if phi.abs() < 1e-15 {
                    continue;
                }
                let (sin, cos) = phi.sin_cos();
                rotate_columns(&mut a, i, j, cos, sin);
                rotate_columns(&mut rotation, i, j, cos, sin);
            }
        }
        let next = varimax_criterion(&a);
        let gain = next - criterion;
        criterion = next;
        if gain < VARIMAX_TOLERANCE {
            break;
        }
    }
    (loadings * &rotation, rotation)
}

/// Regression-method weights `R⁻¹·L`, with a small ridge on ill-conditioned R.
pub fn scoring_weights(r: &DMatrix<f64>, loadings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = r.nrows();
    let sv = r.singular_values();
    let max = sv.max();
    let min = sv.min();
    let mut rr = r.clone();
    if min <= 0.0 || max / min > MAX_CONDITION {
        rr += DMatrix::<f64>::identity(p, p) * RIDGE;
    }
    let lu = rr.lu();
    let w = lu
        .solve(loadings)
        .ok_or_else(|| Error::Numerical("correlation matrix is singular even after ridge".into()))?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("correlation matrix is singular even after ridge".into()));
    }
    Ok(w)
}

pub fn factor_scores(z: &DMatrix<f64>, r: &DMatrix<f64>, rotated_loadings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.ncols() != r.nrows() || r.nrows() != rotated_loadings.nrows() {
        return Err(Error::InvalidInput("inconsistent shapes for factor scoring".into()));
    }
    Ok(z * scoring_weights(r, rotated_loadings)?)
}

/// Tucker congruence coefficient between two loading columns.
pub fn tucker_congruence(a: &[f64], b: &[f64]) -> f64 {
    let den = (linalg::dot(a, a) * linalg::dot(b, b)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        linalg::dot(a, b) / den
    }
}

/// Greedy matching of estimated to reference columns by largest
/// |congruence|. Returns, per reference column, `(estimated column, |congruence|)`.
pub fn match_factors(estimated: &DMatrix<f64>, reference: &DMatrix<f64>) -> Vec<(usize, f64)> {
    let m = reference.ncols();
    let e = estimated.ncols();
    let col = |mat: &DMatrix<f64>, k: usize| mat.column(k).iter().copied().collect::<Vec<_>>();
    let mut candidates = Vec::new();
    for t in 0..m {
        for s in 0..e {
            let c = tucker_congruence(&col(estimated, s), &col(reference, t)).abs();
            candidates.push((c, t, s));
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut result = vec![(usize::MAX, 0.0); m];
    let mut used_t = vec![false; m];
    let mut used_s = vec![false; e];
    for (c, t, s) in candidates {
        if !used_t[t] && !used_s[s] {
            used_t[t] = true;
            used_s[s] = true;
            result[t] = (s, c);
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    /// Retained observed variables.
    pub p: usize,
    pub m: usize,
    pub input_columns: Vec<String>,
    pub retained: Vec<usize>,
    pub dropped_columns: Vec<String>,
    pub factor_names: Vec<String>,
    /// p × m, row-major.
    pub loadings: Vec<Vec<f64>>,
    pub uniquenesses: Vec<f64>,
    /// m × m, row-major.
    pub rotation: Vec<Vec<f64>>,
    /// Per input column.
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    /// p × m, row-major.
    pub scoring_weights: Vec<Vec<f64>>,
    /// Column means used for imputing undefined values, per input column.
    pub impute_values: Vec<f64>,
    pub correlation_eigenvalues: Vec<f64>,
    pub iterations: usize,
    /// False when the loadings are the last iterate of a capped run.
    #[serde(default = "yes")]
    pub converged: bool,
}

fn yes() -> bool {
    true
}

impl FactorModel {
    pub fn loadings_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.loadings, self.m).expect("model loadings are rectangular")
    }

    pub fn rotation_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.rotation, self.m).expect("model rotation is square")
    }

    pub fn weights_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.scoring_weights, self.m).expect("model weights are rectangular")
    }

    pub fn communalities(&self) -> Vec<f64> {
        self.loadings.iter().map(|r| r.iter().map(|v| v * v).sum()).collect()
    }

    /// Scores raw (unstandardized, possibly undefined) rows with the fitted model.
    pub fn score(&self, rows: &[Vec<Option<f64>>]) -> Result<DMatrix<f64>> {
        let w = self.weights_matrix();
        let mut z = DMatrix::zeros(rows.len(), self.p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != self.input_columns.len() {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} columns, model expects {}",
                    row.len(),
                    self.input_columns.len()
                )));
            }
            for (c, &j) in self.retained.iter().enumerate() {
                let v = row[j].unwrap_or(self.impute_values[j]);
                z[(i, c)] = (v - self.means[j]) / self.std_devs[j];
            }
        }
        Ok(z * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorScores {
    /// n × m, aligned with input rows.
    pub rows: DMatrix<f64>,
    pub factor_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FactorOptions {
    pub count: FactorCount,
    /// Overrides the default names; must match the factor count.
    pub factor_names: Option<Vec<String>>,
    /// Keep the last iterate when principal-axis factoring does not converge.
    pub accept_unconverged: bool,
}

impl Default for FactorOptions {
    fn default() -> Self {
        Self { count: FactorCount::Fixed(5), factor_names: None, accept_unconverged: false }
    }
}

/// Replaces undefined cells with their column mean (zero when a column is
/// entirely undefined).
pub fn impute_column_means(rows: &[Vec<Option<f64>>], p: usize) -> (DMatrix<f64>, Vec<f64>) {
    let fill: Vec<f64> = (0..p)
        .map(|j| {
            let (sum, n) = rows
                .iter()
                .filter_map(|r| r[j])
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect();
    let x = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j].unwrap_or(fill[j]));
    (x, fill)
}

/// Puts factors in descending order of explained variance and makes each
/// loading column sum non-negative.
fn canonicalize(loadings: &mut DMatrix<f64>, rotation: &mut DMatrix<f64>) {
    let m = loadings.ncols();
    let mut order: Vec<usize> = (0..m).collect();
    let ss: Vec<f64> = (0..m).map(|k| loadings.column(k).norm_squared()).collect();
    order.sort_by(|&a, &b| ss[b].partial_cmp(&ss[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let l = DMatrix::from_fn(loadings.nrows(), m, |r, c| loadings[(r, order[c])]);
    let q = DMatrix::from_fn(rotation.nrows(), m, |r, c| rotation[(r, order[c])]);
    *loadings = l;
    *rotation = q;
    for k in 0..m {
        if loadings.column(k).sum() < 0.0 {
            loadings.column_mut(k).neg_mut();
            rotation.column_mut(k).neg_mut();
        }
    }
}

/// Full fit: impute, standardize, correlate, extract, rotate, score.
pub fn fit(
    rows: &[Vec<Option<f64>>],
    input_columns: &[String],
    options: &FactorOptions,
) -> Result<(FactorModel, FactorScores)> {
    let p_in = input_columns.len();
    if rows.iter().any(|r| r.len() != p_in) {
        return Err(Error::InvalidInput("ragged characteristic rows".into()));
    }
    let (x, impute_values) = impute_column_means(rows, p_in);
    let st = standardize(&x)?;
    let r = correlation_matrix(&st.z);
    let m = choose_num_factors(&r, options.count)?;
    let (extraction, converged) = match extract_factors(&r, m) {
        Ok(e) => (e, true),
        Err(Error::NotConverged { iterations, last_delta, last_loadings }) if options.accept_unconverged => {
            log::warn!("principal-axis factoring stopped after {iterations} iterations (last change {last_delta:e}); using the last iterate");
            (finish_extraction(from_rows(&last_loadings, m)?, iterations), false)
        }
        Err(e) => return Err(e),
    };
    let (mut rotated, mut rotation) = varimax_rotate(&extraction.loadings);
    canonicalize(&mut rotated, &mut rotation);
    let weights = scoring_weights(&r, &rotated)?;
    let scores = &st.z * &weights;

    let factor_names = match &options.factor_names {
        Some(names) if names.len() == m => names.clone(),
        Some(names) => {
            return Err(Error::InvalidInput(format!(
                "{} factor names given for {m} factors",
                names.len()
            )))
        }
        None => default_factor_names(m),
    };
    let uniquenesses = (0..rotated.nrows())
        .map(|j| (1.0 - rotated.row(j).norm_squared()).clamp(0.0, 1.0))
        .collect();
    let (eigenvalues, _) = sorted_symmetric_eigen(&r);
    let model = FactorModel {
        p: st.retained.len(),
        m,
        input_columns: input_columns.to_vec(),
        retained: st.retained.clone(),
        dropped_columns: st.dropped.iter().map(|&j| input_columns[j].clone()).collect(),
        factor_names: factor_names.clone(),
        loadings: to_rows(&rotated),
        uniquenesses,
        rotation: to_rows(&rotation),
        means: st.means,
        std_devs: st.std_devs,
        scoring_weights: to_rows(&weights),
        impute_values,
        correlation_eigenvalues: eigenvalues.iter().copied().collect(),
        iterations: extraction.iterations,
        converged,
    };
    Ok((model, FactorScores { rows: scores, factor_names }))
}

pub fn fit_characterized(events: &[CharacterizedEvent], options: &FactorOptions) -> Result<(FactorModel, FactorScores)> {
    let rows: Vec<Vec<Option<f64>>> = events.iter().map(|e| e.vector.values().to_vec()).collect();
    let names: Vec<String> = CHARACTERISTIC_NAMES.iter().map(|s| s.to_string()).collect();
    fit(&rows, &names, options)
}

/// One scored event: metadata carried through from characterization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEvent {
    pub record_id: String,
    pub sender_id: String,
    pub subsystem: String,
    pub sent_time: Timestamp,
    pub scores: Vec<f64>,
}

pub fn scored_events(events: &[CharacterizedEvent], scores: &FactorScores) -> Vec<ScoredEvent> {
    events
        .iter()
        .enumerate()
        .map(|(i, e)| ScoredEvent {
            record_id: e.record_id.clone(),
            sender_id: e.sender_id.clone(),
            subsystem: e.subsystem.clone(),
            sent_time: e.sent_time,
            scores: scores.rows.row(i).iter().copied().collect(),
        })
        .collect()
}

const SCORE_META: [&str; 4] = ["record_id", "sender_id", "subsystem", "sent_time"];

pub fn write_scores_csv<W: Write>(out: W, factor_names: &[String], events: &[ScoredEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = SCORE_META.iter().copied().chain(factor_names.iter().map(String::as_str)).collect();
    w.write_record(&header)?;
    for e in events {
        let mut row = vec![
            e.record_id.clone(),
            e.sender_id.clone(),
            e.subsystem.clone(),
            time::format_timestamp(e.sent_time),
        ];
        row.extend(e.scores.iter().map(|v| format!("{v:.8}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads scores; returns factor names from the header and rows.
pub fn read_scores_csv<R: Read>(input: R, source: &str) -> Result<(Vec<String>, Vec<ScoredEvent>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.len() <= SCORE_META.len() || header.iter().take(4).collect::<Vec<_>>() != SCORE_META {
        return Err(Error::schema(
            source,
            format!("expected header {} followed by factor columns", SCORE_META.join(",")),
        ));
    }
    let names: Vec<String> = header.iter().skip(4).map(String::from).collect();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::schema(source, e.to_string()))?;
        let line = i + 2;
        let bad = |msg: String| Error::schema(source, format!("line {line}: {msg}"));
        if row.len() != header.len() {
            return Err(bad(format!("expected {} fields, found {}", header.len(), row.len())));
        }
        let sent_time = time::parse_timestamp(&row[3]).map_err(|e| bad(e.to_string()))?;
        let scores = row
            .iter()
            .skip(4)
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad score `{c}`"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(ScoredEvent {
            record_id: row[0].to_string(),
            sender_id: row[1].to_string(),
            subsystem: row[2].to_string(),
            sent_time,
            scores,
        });
    }
    Ok((names, out))
}
