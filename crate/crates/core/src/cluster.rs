//! Activity clustering over factor-score rows and the labeled, timestamped
//! activity table.

use std::io::{Read, Write};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::ScoredEvent;
use crate::linalg::squared_distance;
use crate::rng;
use crate::time::{self, Timestamp};

pub const DEFAULT_RESTARTS: usize = 50;
const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub seed: u64,
    pub restarts: usize,
    /// Restart that produced the kept solution.
    pub best_restart: usize,
    pub inertia: f64,
    pub cluster_names: Vec<String>,
    pub factor_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Clustering {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Rounding can leave `chosen` on a zero-weight point.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    (sums, counts)
}

struct Run {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    inertia: f64,
}

fn lloyd(points: &[Vec<f64>], k: usize, mut rng: rng::Rng) -> Run {
    let dim = points[0].len();
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut previous = f64::INFINITY;
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut next = Vec::with_capacity(points.len());
        let mut dists = Vec::with_capacity(points.len());
        for p in points {
            let (c, d) = nearest(p, &centroids);
            next.push(c);
            dists.push(d);
        }
        let inertia: f64 = dists.iter().sum();
        debug_assert!(
            inertia <= previous * (1.0 + 1e-12) + 1e-12,
            "inertia increased: {previous} -> {inertia}"
        );
        previous = inertia;
        if next == assignments {
            break;
        }
        assignments = next;
        let (mut new_centroids, mut counts) = means(points, &assignments, k, dim);
        // Empty clusters take the point farthest from its centroid.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                counts[c] = 1;
                assignments[i] = c;
                dists[i] = 0.0;
                let (recomputed, _) = means(points, &assignments, k, dim);
                new_centroids = recomputed;
            }
        }
        centroids = new_centroids;
    }
    let (assignments, inertia) = {
        let mut a = Vec::with_capacity(points.len());
        let mut total = 0.0;
        for p in points {
            let (c, d) = nearest(p, &centroids);
            a.push(c);
            total += d;
        }
        (a, total)
    };
    Run { centroids, assignments, inertia }
}

/// Lloyd's algorithm from k-means++ seeds, best of `restarts` by inertia
/// (ties go to the earlier restart). Restart `i` draws from stream `i` of `seed`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<Clustering> {
    let n = points.len();
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidInput(format!("need at least k = {k} points, got {n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidInput("points have inconsistent dimensions".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("points contain non-finite values".into()));
    }
    let restarts = restarts.max(1);
    let runs: Vec<Run> = (0..restarts)
        .into_par_iter()
        .map(|i| lloyd(points, k, rng::stream(seed, i as u64)))
        .collect();
    let (best_restart, best) = runs
        .into_iter()
        .enumerate()
        .reduce(|a, b| if b.1.inertia < a.1.inertia { b } else { a })
        .expect("at least one restart");
    Ok(Clustering {
        model: ClusterModel {
            k,
            centroids: best.centroids,
            seed,
            restarts,
            best_restart,
            inertia: best.inertia,
            cluster_names: Vec::new(),
            factor_names: Vec::new(),
        },
        assignments: best.assignments,
    })
}

/// `(k, inertia)` for each k in the range.
pub fn inertia_elbow(points: &[Vec<f64>], ks: std::ops::RangeInclusive<usize>, seed: u64, restarts: usize) -> Result<Vec<(usize, f64)>> {
    ks.map(|k| kmeans(points, k, seed, restarts).map(|c| (k, c.model.inertia))).collect()
}

pub fn label_id(cluster: usize) -> String {
    format!("Y_{cluster}")
}

pub fn parse_label_id(text: &str) -> Option<usize> {
    let t = text.trim();
    t.strip_prefix("Y_").or_else(|| t.strip_prefix('Y')).unwrap_or(t).parse().ok()
}

/// Names each cluster `Y_i (<dominant factor>)` by the argmax coordinate of
/// its centroid (ties to the lower factor index).
pub fn name_clusters(centroids: &[Vec<f64>], factor_names: &[String]) -> Vec<String> {
    centroids
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut best = 0;
            for (j, &v) in c.iter().enumerate() {
                if v > c[best] {
                    best = j;
                }
            }
            match factor_names.get(best) {
                Some(name) => format!("{} ({name})", label_id(i)),
                None => label_id(i),
            }
        })
        .collect()
}

/// The display part of a cluster name, e.g. `Code Contribution` from
/// `Y_0 (Code Contribution)`.
pub fn cluster_display_name(name: &str) -> &str {
    match (name.find('('), name.rfind(')')) {
        (Some(a), Some(b)) if b > a => &name[a + 1..b],
        _ => name,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledActivity {
    pub record_id: String,
    pub sender_id: String,
    pub subsystem: String,
    pub sent_time: Timestamp,
    pub scores: Vec<f64>,
    pub label: usize,
}

/// Joins events with their cluster labels and sorts by `sent_time`
/// (stable, so equal timestamps keep input order).
pub fn label_events(events: &[ScoredEvent], assignments: &[usize]) -> Result<Vec<LabeledActivity>> {
    if events.len() != assignments.len() {
        return Err(Error::InvalidInput(format!(
            "{} events but {} assignments",
            events.len(),
            assignments.len()
        )));
    }
    let mut out: Vec<LabeledActivity> = events
        .iter()
        .zip(assignments)
        .map(|(e, &label)| LabeledActivity {
            record_id: e.record_id.clone(),
            sender_id: e.sender_id.clone(),
            subsystem: e.subsystem.clone(),
            sent_time: e.sent_time,
            scores: e.scores.clone(),
            label,
        })
        .collect();
    out.sort_by_key(|a| a.sent_time);
    Ok(out)
}

fn score_cell(v: f64) -> String {
    format!("{v:.8}")
}

/// Writes the labeled factor-score table: `sender_id, sent_time, <one
/// column per factor>, label`.
pub fn write_labeled_table<W: Write>(out: W, factor_names: &[String], rows: &[LabeledActivity]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sender_id".to_string(), "sent_time".to_string()];
    header.extend(factor_names.iter().cloned());
    header.push("label".into());
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.sender_id.clone(), time::format_timestamp(r.sent_time)];
        row.extend(r.scores.iter().map(|&v| score_cell(v)));
        row.push(label_id(r.label));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Full activity rows (with record and subsystem) consumed by the embedding stage.
pub fn write_activity_csv<W: Write>(out: W, factor_names: &[String], rows: &[LabeledActivity]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["record_id", "sender_id", "subsystem", "sent_time"].iter().map(|s| s.to_string()).collect();
    header.extend(factor_names.iter().cloned());
    header.push("label".into());
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.record_id.clone(), r.sender_id.clone(), r.subsystem.clone(), time::format_timestamp(r.sent_time)];
        row.extend(r.scores.iter().map(|&v| score_cell(v)));
        row.push(label_id(r.label));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads either the labeled table or the activity CSV. `record_id` and
/// `subsystem` are optional (empty when absent); every column other than
/// the known metadata is a factor column.
pub fn read_labeled_csv<R: Read>(input: R, source: &str) -> Result<(Vec<String>, Vec<LabeledActivity>)> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let (Some(sender_col), Some(time_col), Some(label_col)) = (find("sender_id"), find("sent_time"), find("label")) else {
        return Err(Error::schema(source, "labeled activity needs sender_id, sent_time and label columns"));
    };
    let record_col = find("record_id");
    let subsystem_col = find("subsystem");
    let meta = [Some(sender_col), Some(time_col), Some(label_col), record_col, subsystem_col];
    let factor_cols: Vec<usize> = (0..header.len()).filter(|i| !meta.contains(&Some(*i))).collect();
    let factor_names = factor_cols.iter().map(|&i| header[i].to_string()).collect();
    let mut rows = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::schema(source, e.to_string()))?;
        let line = i + 2;
        let bad = |msg: String| Error::schema(source, format!("line {line}: {msg}"));
        let sent_time = time::parse_timestamp(&row[time_col]).map_err(|e| bad(e.to_string()))?;
        let label = parse_label_id(&row[label_col]).ok_or_else(|| bad(format!("bad label `{}`", &row[label_col])))?;
        let scores = factor_cols
            .iter()
            .map(|&c| row[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad score `{}`", &row[c]))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(LabeledActivity {
            record_id: record_col.map(|c| row[c].to_string()).unwrap_or_else(|| format!("row{}", i + 1)),
            sender_id: row[sender_col].to_string(),
            subsystem: subsystem_col.map(|c| row[c].to_string()).unwrap_or_default(),
            sent_time,
            scores,
            label,
        });
    }
    Ok((factor_names, rows))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::factor::DEFAULT_FACTOR_NAMES;
    use proptest::prelude::*;

    /// Exhaustive optimum over all partitions of the points into exactly k
    /// non-empty groups, enumerated as restricted growth strings.
    pub fn brute_force_inertia(points: &[Vec<f64>], k: usize) -> f64 {
        fn cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
            let dim = points[0].len();
            let mut total = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let mut mean = vec![0.0; dim];
                for p in &members {
                    for d in 0..dim {
                        mean[d] += p[d] / members.len() as f64;
                    }
                }
                for p in &members {
                    for d in 0..dim {
                        total += (p[d] - mean[d]).powi(2);
                    }
                }
            }
            total
        }
        fn rec(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, max_used: usize, best: &mut f64) {
            let n = points.len();
            if labels.len() == n {
                if max_used + 1 == k {
                    *best = best.min(cost(points, labels, k));
                }
                return;
            }
            let remaining = n - labels.len();
            let limit = (max_used + 2).min(k);
            for l in 0..limit {
                let new_max = if labels.is_empty() { 0 } else { max_used.max(l) };
                if k - 1 - new_max > remaining - 1 {
                    continue;
                }
                labels.push(l);
                rec(points, k, labels, new_max, best);
                labels.pop();
            }
        }
        let mut best = f64::INFINITY;
        let mut labels = vec![0];
        rec(points, k, &mut labels, 0, &mut best);
        best
    }

    fn random_points(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| (0..dim).map(|_| r.random_range(-10.0..10.0)).collect()).collect()
    }

    #[test]
    fn brute_force_oracle_sanity() {
        let pts = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        assert!((brute_force_inertia(&pts, 2) - 1.0).abs() < 1e-12);
        assert_eq!(brute_force_inertia(&pts, 4), 0.0);
    }

    #[test]
    fn each_point_its_own_cluster() {
        let pts = random_points(1, 5, 3);
        let c = kmeans(&pts, 5, 1, 10).unwrap();
        assert_eq!(c.model.inertia, 0.0);
        let mut a = c.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = random_points(2, 20, 2);
        let c = kmeans(&pts, 1, 3, 5).unwrap();
        let mean: Vec<f64> = (0..2).map(|d| pts.iter().map(|p| p[d]).sum::<f64>() / 20.0).collect();
        for d in 0..2 {
            assert!((c.model.centroids[0][d] - mean[d]).abs() < 1e-12);
        }
        let tot: f64 = pts.iter().map(|p| squared_distance(p, &mean)).sum();
        assert!((c.model.inertia - tot).abs() < 1e-9);
    }

    #[test]
    fn twelve_points_match_exhaustive_optimum() {
        let pts = random_points(3, 12, 2);
        let c = kmeans(&pts, 3, 42, DEFAULT_RESTARTS).unwrap();
        let opt = brute_force_inertia(&pts, 3);
        assert!((c.model.inertia - opt).abs() <= 1e-6 * opt.max(1.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(kmeans(&random_points(1, 2, 2), 3, 0, 1).is_err());
        assert!(kmeans(&random_points(1, 2, 2), 0, 0, 1).is_err());
        assert!(kmeans(&[vec![f64::NAN], vec![1.0]], 1, 0, 1).is_err());
    }

    #[test]
    fn duplicates_and_empty_cluster_reseeding() {
        let mut pts = vec![vec![0.0, 0.0]; 6];
        pts.push(vec![5.0, 5.0]);
        let c = kmeans(&pts, 3, 9, 5).unwrap();
        assert!(c.model.inertia.is_finite());
        assert!(c.assignments.iter().all(|&a| a < 3));
    }

    #[test]
    fn deterministic_and_assignment_optimal() {
        let pts = random_points(4, 60, 5);
        let a = kmeans(&pts, 4, 7, 20).unwrap();
        let b = kmeans(&pts, 4, 7, 20).unwrap();
        assert_eq!(a.model.centroids, b.model.centroids);
        assert_eq!(a.assignments, b.assignments);
        for (p, &l) in pts.iter().zip(&a.assignments) {
            assert_eq!(nearest(p, &a.model.centroids).0, l);
        }
    }

    #[test]
    fn naming_by_dominant_factor() {
        let names: Vec<String> = DEFAULT_FACTOR_NAMES.iter().map(|s| s.to_string()).collect();
        let centroids = vec![
            vec![0.84, 0.01, 0.01, 0.20, 0.26],
            vec![0.3, 0.5, 0.5, 0.1, 0.0],
        ];
        let n = name_clusters(&centroids, &names);
        assert_eq!(n[0], "Y_0 (Code Contribution)");
        assert_eq!(n[1], "Y_1 (Knowledge Sharing)");
        assert_eq!(cluster_display_name(&n[0]), "Code Contribution");
        assert_eq!(name_clusters(&[vec![1.0]], &["Solo".to_string()]), vec!["Y_0 (Solo)"]);
    }

    fn scored(id: &str, t: i64, scores: Vec<f64>) -> ScoredEvent {
        ScoredEvent { record_id: id.into(), sender_id: "0".into(), subsystem: "usb".into(), sent_time: t, scores }
    }

    #[test]
    fn labeled_table_row_matches_published_layout() {
        let names: Vec<String> = DEFAULT_FACTOR_NAMES.iter().map(|s| s.to_string()).collect();
        let t = time::parse_timestamp("2020-08-20 09:35:52").unwrap();
        let ev = scored("r", t, vec![0.83758650, 0.00918697, 0.00502759, 0.19685837, 0.25811192]);
        let rows = label_events(&[ev], &[0]).unwrap();
        let mut buf = Vec::new();
        write_labeled_table(&mut buf, &names, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sender_id,sent_time,Code Contribution,Knowledge Sharing,Patch Posting,Progress Control,Acknowledgment,label"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0,2020-08-20 09:35:52,0.83758650,0.00918697,0.00502759,0.19685837,0.25811192,Y_0"
        );
        let (fnames, back) = read_labeled_csv(text.as_bytes(), "labeled.csv").unwrap();
        assert_eq!(fnames, names);
        assert_eq!(back[0].label, 0);
        assert_eq!(back[0].subsystem, "");
    }

    #[test]
    fn label_events_sorting_and_errors() {
        let evs = vec![scored("a", 5, vec![0.0]), scored("b", 1, vec![0.0]), scored("c", 5, vec![0.0])];
        let rows = label_events(&evs, &[0, 1, 2]).unwrap();
        let ids: Vec<&str> = rows.iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "a", "c"]);
        assert!(label_events(&evs, &[0]).is_err());
        assert!(label_events(&[], &[]).unwrap().is_empty());
    }

    #[test]
    fn activity_csv_round_trip() {
        let names = vec!["F1".to_string()];
        let rows = label_events(&[scored("a", 100, vec![0.5])], &[2]).unwrap();
        let mut buf = Vec::new();
        write_activity_csv(&mut buf, &names, &rows).unwrap();
        let (n, back) = read_labeled_csv(buf.as_slice(), "activity.csv").unwrap();
        assert_eq!(n, names);
        assert_eq!(back, rows);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn permuting_rows_permutes_assignments(seed in 0u64..1000) {
            let pts = random_points(seed, 15, 2);
            let base = kmeans(&pts, 3, 5, 20).unwrap();
            let mut perm: Vec<usize> = (0..15).collect();
            perm.reverse();
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
            let other = kmeans(&permuted, 3, 5, 20).unwrap();
            // Equal inertia optimum: the permuted run groups the same points.
            if (base.model.inertia - other.model.inertia).abs() < 1e-9 {
                for a in 0..15 {
                    for b in 0..15 {
                        let same_base = base.assignments[perm[a]] == base.assignments[perm[b]];
                        let same_other = other.assignments[a] == other.assignments[b];
                        prop_assert_eq!(same_base, same_other);
                    }
                }
            }
        }
    }
}
