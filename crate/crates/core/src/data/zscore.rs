use crate::error::{Error, Result};

/// Responses recorded in one scan session.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    /// Stimulus index shown on each trial.
    pub trials: Vec<usize>,
    /// `[trials × voxels]`
    pub responses: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Averaged {
    /// `[stimuli × voxels]`
    pub values: Vec<f32>,
    pub repeat_counts: Vec<u32>,
    /// Degenerate (constant) session/voxel pairs that were zeroed.
    pub warnings: Vec<String>,
}

const VAR_EPS: f64 = 1e-12;

/// Z-scores every voxel within each session across that session's trials,
/// then averages each stimulus over all of its repeats.
pub fn zscore_and_average(sessions: &[Session], stimuli: usize, voxels: usize) -> Result<Averaged> {
    if sessions.is_empty() || stimuli == 0 || voxels == 0 {
        return Err(Error::Usage("zscore_and_average needs at least one session".into()));
    }
    let mut sums = vec![0.0f64; stimuli * voxels];
    let mut counts = vec![0u32; stimuli];
    let mut warnings = Vec::new();
    for (si, s) in sessions.iter().enumerate() {
        let t = s.trials.len();
        if t == 0 || s.responses.len() != t * voxels {
            return Err(Error::Shape(format!(
                "session {si}: {} responses for {t} trials × {voxels} voxels",
                s.responses.len()
            )));
        }
        if let Some(&bad) = s.trials.iter().find(|&&i| i >= stimuli) {
            return Err(Error::Data(format!("session {si}: stimulus {bad} out of range")));
        }
        for v in 0..voxels {
            let col = |r: usize| s.responses[r * voxels + v] as f64;
            let mean = (0..t).map(col).sum::<f64>() / t as f64;
            let var = (0..t).map(|r| (col(r) - mean).powi(2)).sum::<f64>() / t as f64;
            let degenerate = var < VAR_EPS;
            if degenerate {
                warnings.push(format!("session {si} voxel {v}: constant response, zeroed"));
            }
            let sd = var.sqrt();
            for (r, &stim) in s.trials.iter().enumerate() {
                let z = if degenerate { 0.0 } else { (col(r) - mean) / sd };
                sums[stim * voxels + v] += z;
            }
        }
        for &stim in &s.trials {
            counts[stim] += 1;
        }
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("stimulus {i} was never shown")));
    }
    let values = sums
        .chunks(voxels)
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |&s| (s / c as f64) as f32))
        .collect();
    Ok(Averaged {
        values,
        repeat_counts: counts,
        warnings,
    })
}
