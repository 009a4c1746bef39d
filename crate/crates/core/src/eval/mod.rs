//! Per-ROI median reporting, run comparison and the ablation harness.

mod ablation;
mod compare;
mod svg;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Hemisphere, Stream};
use crate::error::{Error, Result};

pub use ablation::{noisy_tokens, run_ablation, AblationConfig, AblationResult, Arm, ArmRun, SummaryRow};
pub use compare::{compare_runs, comparisons_csv, ComparisonReport, ComparisonRow, PCT_GUARD};
pub use svg::report_svg;

/// Label of the row covering every voxel of a hemisphere.
pub const ALL_ROI: &str = "all";

/// Median with the even-count convention of averaging the central pair.
/// NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRow {
    pub roi: String,
    pub median_r: f64,
    pub n_voxels: usize,
}

/// Stream rows in report order followed by the `all` row.
pub fn median_r_per_roi(r: &[f64], atlas: &[Stream]) -> Result<Vec<RoiRow>> {
    if r.len() != atlas.len() {
        return Err(Error::Data(format!(
            "atlas labels {} voxels but R has {}",
            atlas.len(),
            r.len()
        )));
    }
    let mut rows: Vec<RoiRow> = Stream::ALL
        .iter()
        .map(|&s| {
            let vals: Vec<f64> = r
                .iter()
                .zip(atlas)
                .filter(|(_, &l)| l == s)
                .map(|(&x, _)| x)
                .collect();
            RoiRow {
                roi: s.name().to_string(),
                median_r: median(&vals),
                n_voxels: vals.len(),
            }
        })
        .collect();
    rows.push(RoiRow {
        roi: ALL_ROI.into(),
        median_r: median(r),
        n_voxels: r.len(),
    });
    Ok(rows)
}

/// Median-R table for one subject, hemisphere and fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub subject: String,
    pub hemisphere: Hemisphere,
    pub fold: usize,
    pub run_id: String,
    pub config_fingerprint: String,
    pub rows: Vec<RoiRow>,
}

impl EvaluationReport {
    pub fn new(
        subject: &str,
        hemisphere: Hemisphere,
        fold: usize,
        run_id: &str,
        config_fingerprint: &str,
        r: &[f64],
        atlas: &[Stream],
    ) -> Result<Self> {
        Ok(Self {
            subject: subject.into(),
            hemisphere,
            fold,
            run_id: run_id.into(),
            config_fingerprint: config_fingerprint.into(),
            rows: median_r_per_roi(r, atlas)?,
        })
    }

    pub fn all_vertices(&self) -> f64 {
        self.row(ALL_ROI).map_or(f64::NAN, |r| r.median_r)
    }

    pub fn row(&self, roi: &str) -> Option<&RoiRow> {
        self.rows.iter().find(|r| r.roi == roi)
    }
}

pub const REPORT_HEADER: &str = "subject,hemisphere,roi,median_r,n_voxels,fold,run_id";

fn check_field(s: &str) -> Result<()> {
    if s.contains([',', '\n', '\r']) {
        return Err(Error::Data(format!("CSV field `{s}` contains a separator")));
    }
    Ok(())
}

/// Report CSV; `f64` values use the shortest round-tripping form.
pub fn reports_csv(reports: &[EvaluationReport]) -> Result<String> {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        check_field(&r.subject)?;
        check_field(&r.run_id)?;
        for row in &r.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.subject, r.hemisphere, row.roi, row.median_r, row.n_voxels, r.fold, r.run_id
            )
            .unwrap();
        }
    }
    Ok(s)
}

fn parse_num<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: cannot parse `{field}`")))
}

/// Parses [`reports_csv`] output, grouping consecutive rows that share
/// subject, hemisphere, fold and run id. The fingerprint is not part of the
/// CSV and comes back empty.
pub fn parse_reports_csv(text: &str) -> Result<Vec<EvaluationReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == REPORT_HEADER => {}
        _ => return Err(Error::Data("missing report CSV header".into())),
    }
    let mut out: Vec<EvaluationReport> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Data(format!(
                "line {}: expected 7 fields, found {}",
                i + 1,
                f.len()
            )));
        }
        let hemisphere: Hemisphere = f[1].parse()?;
        let fold: usize = parse_num(f[5], i + 1)?;
        let row = RoiRow {
            roi: f[2].into(),
            median_r: parse_num(f[3], i + 1)?,
            n_voxels: parse_num(f[4], i + 1)?,
        };
        match out.last_mut() {
            Some(r)
                if r.subject == f[0]
                    && r.hemisphere == hemisphere
                    && r.fold == fold
                    && r.run_id == f[6] =>
            {
                r.rows.push(row)
            }
            _ => out.push(EvaluationReport {
                subject: f[0].into(),
                hemisphere,
                fold,
                run_id: f[6].into(),
                config_fingerprint: String::new(),
                rows: vec![row],
            }),
        }
    }
    Ok(out)
}

/// One report per hemisphere from R over all voxels (lh first).
pub fn hemisphere_reports(
    dataset: &Dataset,
    r: &[f64],
    fold: usize,
    run_id: &str,
    config_fingerprint: &str,
) -> Result<Vec<EvaluationReport>> {
    if r.len() != dataset.voxel_count() {
        return Err(Error::Data(format!(
            "dataset has {} voxels but R has {}",
            dataset.voxel_count(),
            r.len()
        )));
    }
    let (lh, rh) = r.split_at(dataset.voxel_count_lh);
    Hemisphere::BOTH
        .iter()
        .zip([lh, rh])
        .map(|(&h, part)| {
            EvaluationReport::new(
                &dataset.subject_id,
                h,
                fold,
                run_id,
                config_fingerprint,
                part,
                dataset.atlas.hemisphere(h),
            )
        })
        .collect()
}

/// Short content hash of any serializable configuration.
pub fn fingerprint<S: Serialize + ?Sized>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("configs serialize");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
