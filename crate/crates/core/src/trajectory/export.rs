use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::project::{project_pca, project_tsne, TsneOptions};
use crate::trajectory::TokenAnalysis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Projection {
    None,
    Pca,
    Tsne(TsneOptions),
}

/// Present trajectory points of every analysis stacked in export order.
pub fn trajectory_points(analyses: &[TokenAnalysis]) -> DMatrix<f64> {
    let rows: Vec<&[f64]> = analyses.iter().flat_map(|a| a.trajectory.present_points().map(|(_, v)| v)).collect();
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
}

/// Projects the union of all trajectory points. With t-SNE, a perplexity
/// that is too large for the point count is lowered to `(n − 1) / 3`.
pub fn project_trajectories(analyses: &[TokenAnalysis], projection: &Projection) -> Result<Option<DMatrix<f64>>> {
    let points = trajectory_points(analyses);
    match projection {
        Projection::None => Ok(None),
        _ if points.nrows() == 0 => Ok(Some(DMatrix::zeros(0, 2))),
        Projection::Pca => project_pca(&points).map(Some),
        Projection::Tsne(opts) => {
            let n = points.nrows();
            let mut opts = opts.clone();
            if opts.perplexity >= n as f64 {
                let lowered = ((n as f64 - 1.0) / 3.0).max(1.0);
                log::warn!("perplexity {} too large for {n} points, using {lowered}", opts.perplexity);
                opts.perplexity = lowered;
            }
            project_tsne(&points, &opts).map(|r| Some(r.coords))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub label: String,
    pub initialism: String,
    pub token: String,
    pub slice: usize,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub drift: Option<f64>,
    pub context_shift: Option<f64>,
    pub class: String,
}

/// One row per present trajectory point, labeled `(INITIALISM, slice)`.
/// `coords` rows follow [`trajectory_points`] order. Drift and context
/// shift are the steps arriving at the row's slice.
pub fn export_rows(analyses: &[TokenAnalysis], coords: Option<&DMatrix<f64>>, label_names: &[String]) -> Result<Vec<ExportRow>> {
    let total: usize = analyses.iter().map(|a| a.trajectory.present_points().count()).sum();
    if let Some(c) = coords {
        if c.nrows() != total {
            return Err(Error::InvalidInput(format!("{} projected points for {total} trajectory points", c.nrows())));
        }
    }
    let mut rows = Vec::with_capacity(total);
    let mut k = 0;
    for a in analyses {
        let initialism = a.trajectory.token.initialism(label_names);
        for (slice, _) in a.trajectory.present_points() {
            let arriving = |series: &[crate::trajectory::SeriesStep]| series.iter().find(|s| s.to == slice).map(|s| s.value);
            rows.push(ExportRow {
                label: format!("({initialism}, {slice})"),
                initialism: initialism.clone(),
                token: a.trajectory.token.to_string(),
                slice,
                x: coords.map(|c| c[(k, 0)]),
                y: coords.map(|c| c[(k, 1)]),
                drift: arriving(&a.trajectory.drift),
                context_shift: arriving(&a.context_shift),
                class: a.classification.class.as_str().to_string(),
            });
            k += 1;
        }
    }
    Ok(rows)
}

pub fn export_trajectories<W: Write>(out: W, analyses: &[TokenAnalysis], coords: Option<&DMatrix<f64>>, label_names: &[String]) -> Result<()> {
    let rows = export_rows(analyses, coords, label_names)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["label", "initialism", "token", "slice", "x", "y", "drift", "context_shift", "class"])?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::token::ActivityToken;
    use crate::trajectory::tests::slice_from;
    use crate::trajectory::{analyze_token, AnalysisOptions, ReferencePattern, ReferenceSet};

    #[test]
    fn fourteen_slices_fourteen_rows() {
        let t = ActivityToken::new(0, "George Acosta", "USB, driver core");
        let m = ActivityToken::new(1, "Greg Kroah-Hartman", "USB");
        let slices: Vec<_> = (25..=38)
            .map(|i| slice_from(i, &[(t.clone(), vec![i as f64, 1.0, 0.0], 1 + i % 3), (m.clone(), vec![0.0, 0.0, 1.0], 4)]))
            .collect();
        let refs = ReferenceSet { name: "maintainers".into(), tokens: vec![ReferencePattern::sender("Greg Kroah-Hartman")] };
        let a = analyze_token(&t, &refs, &slices, &AnalysisOptions { neighbors: 1, ..Default::default() }).unwrap();
        let analyses = vec![a];
        let coords = project_trajectories(&analyses, &Projection::Pca).unwrap();
        let names = vec!["Y_0 (Code Contribution)".to_string()];
        let rows = export_rows(&analyses, coords.as_ref(), &names).unwrap();
        assert_eq!(rows.len(), 14);
        assert_eq!(rows.last().unwrap().label, "(CCGAU, 38)");
        assert_eq!(rows[0].drift, None);
        assert_eq!(rows[1].drift, Some(1.0));

        let mut buf = Vec::new();
        export_trajectories(&mut buf, &analyses, coords.as_ref(), &names).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 15);
    }

    #[test]
    fn empty_set_is_header_only() {
        let mut buf = Vec::new();
        export_trajectories(&mut buf, &[], None, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "label,initialism,token,slice,x,y,drift,context_shift,class\n");
        assert_eq!(project_trajectories(&[], &Projection::Pca).unwrap().unwrap().nrows(), 0);
    }
}
