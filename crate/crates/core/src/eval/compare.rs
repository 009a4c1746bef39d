use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EvaluationReport, ALL_ROI};
use crate::data::Hemisphere;
use crate::error::{Error, Result};

/// Baselines smaller than this in magnitude leave the percentage undefined.
pub const PCT_GUARD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub roi: String,
    pub n_voxels: usize,
    pub base: f64,
    pub cand: f64,
    pub delta: f64,
    /// `None` when the baseline is within [`PCT_GUARD`] of zero.
    pub pct_improvement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub subject: String,
    pub hemisphere: Hemisphere,
    pub fold: usize,
    pub baseline_run: String,
    pub candidate_run: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    /// Percent improvement on the `all` row.
    pub fn aggregate(&self) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.roi == ALL_ROI)
            .and_then(|r| r.pct_improvement)
    }
}

pub fn compare_runs(base: &EvaluationReport, cand: &EvaluationReport) -> Result<ComparisonReport> {
    if base.subject != cand.subject || base.hemisphere != cand.hemisphere {
        return Err(Error::Data(format!(
            "cannot compare {}/{} with {}/{}",
            base.subject, base.hemisphere, cand.subject, cand.hemisphere
        )));
    }
    let base_rois: Vec<&str> = base.rows.iter().map(|r| r.roi.as_str()).collect();
    let cand_rois: Vec<&str> = cand.rows.iter().map(|r| r.roi.as_str()).collect();
    if base_rois != cand_rois {
        return Err(Error::Data(format!(
            "ROI sets differ: {base_rois:?} vs {cand_rois:?}"
        )));
    }
    let rows = base
        .rows
        .iter()
        .zip(&cand.rows)
        .map(|(b, c)| {
            let delta = c.median_r - b.median_r;
            ComparisonRow {
                roi: b.roi.clone(),
                n_voxels: c.n_voxels,
                base: b.median_r,
                cand: c.median_r,
                delta,
                pct_improvement: (b.median_r.abs() >= PCT_GUARD)
                    .then(|| delta / b.median_r.abs() * 100.0),
            }
        })
        .collect();
    Ok(ComparisonReport {
        subject: base.subject.clone(),
        hemisphere: base.hemisphere,
        fold: cand.fold,
        baseline_run: base.run_id.clone(),
        candidate_run: cand.run_id.clone(),
        rows,
    })
}

pub const COMPARISON_HEADER: &str =
    "subject,hemisphere,roi,median_r,n_voxels,fold,run_id,baseline_run_id,baseline_median_r,delta,pct_improvement";

/// Comparison CSV: the candidate's report columns plus the baseline value,
/// delta and percent improvement (`undefined` when guarded).
pub fn comparisons_csv(reports: &[ComparisonReport]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for c in reports {
        for r in &c.rows {
            let pct = r
                .pct_improvement
                .map_or_else(|| "undefined".to_string(), |p| p.to_string());
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.subject,
                c.hemisphere,
                r.roi,
                r.cand,
                r.n_voxels,
                c.fold,
                c.candidate_run,
                c.baseline_run,
                r.base,
                r.delta,
                pct
            )
            .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RoiAtlas;

    fn report(r: &[f64], id: &str) -> EvaluationReport {
        let atlas = RoiAtlas::even_split(r.len());
        EvaluationReport::new("s1", Hemisphere::Lh, 0, id, "", r, &atlas).unwrap()
    }

    #[test]
    fn self_comparison_is_zero() {
        let a = report(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], "a");
        let c = compare_runs(&a, &a).unwrap();
        assert!(c.rows.iter().all(|r| r.delta == 0.0));
        assert_eq!(c.aggregate(), Some(0.0));
    }

    #[test]
    fn fifteen_percent() {
        let a = report(&[0.2; 7], "a");
        let b = report(&[0.23; 7], "b");
        let c = compare_runs(&a, &b).unwrap();
        assert!((c.aggregate().unwrap() - 15.0).abs() < 1e-9);
    }

    #[test]
    fn zero_baseline_flagged() {
        let a = report(&[0.0; 7], "a");
        let b = report(&[0.1; 7], "b");
        let c = compare_runs(&a, &b).unwrap();
        assert!(c.rows.iter().all(|r| r.pct_improvement.is_none()));
        assert!((c.rows[0].delta - 0.1).abs() < 1e-12);
        assert!(comparisons_csv(&[c]).contains("undefined"));
    }

    #[test]
    fn mismatched_rois() {
        let a = report(&[0.1; 7], "a");
        let mut b = a.clone();
        b.rows.pop();
        assert!(compare_runs(&a, &b).is_err());
        let mut b = a.clone();
        b.hemisphere = Hemisphere::Rh;
        assert!(compare_runs(&a, &b).is_err());
    }
}
