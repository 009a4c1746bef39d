use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compare_runs, fingerprint, hemisphere_reports, median, ComparisonReport, EvaluationReport};
use crate::data::{corrupt_caption, Dataset, Hemisphere};
use crate::encoder::{tokenize_pad, Modality, ModelConfig};
use crate::error::{Error, Result};
use crate::train::{train, voxel_correlations, EpochRecord, FoldSplit, TrainConfig, TrainingData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Multimodal with the selected clean captions.
    Multimodal,
    /// Image-only at the same number of epochs.
    ImageOnly,
    /// Image-only with extended training.
    ImageOnlyExtended,
    /// Multimodal with token-level caption corruption.
    NoisyText,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Multimodal, Arm::ImageOnly, Arm::ImageOnlyExtended, Arm::NoisyText];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Multimodal => "multimodal",
            Arm::ImageOnly => "image_only",
            Arm::ImageOnlyExtended => "image_only_extended",
            Arm::NoisyText => "noisy_text",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation arm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Architecture of the multimodal arms; image-only arms reuse it with
    /// the text span removed.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Token replacement probability for the noisy-text arm.
    pub caption_noise: f64,
    /// Epoch multiplier for the extended image-only arm.
    pub extended_factor: usize,
    /// Folds to run; all `train.folds` when `None`.
    pub folds: Option<Vec<usize>>,
    pub arms: Vec<Arm>,
}

impl AblationConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            caption_noise: 0.5,
            extended_factor: 2,
            folds: None,
            arms: Arm::ALL.to_vec(),
        }
    }

    fn arm_configs(&self, arm: Arm) -> (ModelConfig, TrainConfig) {
        let mut model = self.model.clone();
        let mut train = self.train.clone();
        match arm {
            Arm::Multimodal | Arm::NoisyText => model.mode = Modality::Multimodal,
            Arm::ImageOnly => model.mode = Modality::ImageOnly,
            Arm::ImageOnlyExtended => {
                model.mode = Modality::ImageOnly;
                train.epochs *= self.extended_factor;
            }
        }
        (model, train)
    }
}

/// One arm trained and tested on one fold.
#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: Arm,
    pub fold: usize,
    pub run_id: String,
    /// Test-fold R for every voxel, lh then rh.
    pub r: Vec<f64>,
    pub reports: Vec<EvaluationReport>,
    pub trace: Vec<EpochRecord>,
}

/// `all`-row medians of every arm on one fold and scope (`lh`, `rh`, or
/// `both` for the pooled voxels) and the arm with the highest one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub fold: usize,
    pub scope: String,
    pub medians: Vec<(Arm, f64)>,
    pub winner: Arm,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub runs: Vec<ArmRun>,
    /// Every non-reference arm against the multimodal arm, per fold and
    /// hemisphere.
    pub comparisons: Vec<(Arm, ComparisonReport)>,
    pub summary: Vec<SummaryRow>,
}

impl AblationResult {
    pub fn run(&self, arm: Arm, fold: usize) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.arm == arm && r.fold == fold)
    }

    pub fn reports(&self, arm: Arm) -> Vec<EvaluationReport> {
        self.runs
            .iter()
            .filter(|r| r.arm == arm)
            .flat_map(|r| r.reports.iter().cloned())
            .collect()
    }

    pub fn comparisons(&self, arm: Arm) -> Vec<ComparisonReport> {
        self.comparisons
            .iter()
            .filter(|(a, _)| *a == arm)
            .map(|(_, c)| c.clone())
            .collect()
    }

    /// Median R over all voxels of both hemispheres.
    pub fn pooled_median(&self, arm: Arm, fold: usize) -> Option<f64> {
        self.run(arm, fold).map(|r| median(&r.r))
    }

    pub fn summary_csv(&self) -> String {
        let arms: Vec<Arm> = self
            .summary
            .first()
            .map(|s| s.medians.iter().map(|(a, _)| *a).collect())
            .unwrap_or_default();
        let mut s = String::from("fold,scope");
        for a in &arms {
            write!(s, ",{a}").unwrap();
        }
        s.push_str(",winner\n");
        for row in &self.summary {
            write!(s, "{},{}", row.fold, row.scope).unwrap();
            for (_, m) in &row.medians {
                write!(s, ",{m}").unwrap();
            }
            writeln!(s, ",{}", row.winner).unwrap();
        }
        s
    }
}

/// Captions with each token replaced at `rate`, drawn from one seeded
/// stream in stimulus order.
pub fn noisy_tokens(dataset: &Dataset, rate: f64, length: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff_ee00);
    dataset
        .captions
        .iter()
        .map(|c| {
            let noisy = corrupt_caption(c.selected_caption(), rate, &dataset.vocab, &mut rng);
            tokenize_pad(&noisy, &dataset.vocab, length)
        })
        .collect()
}

fn winner(medians: &[(Arm, f64)]) -> Arm {
    medians
        .iter()
        .filter(|(_, m)| !m.is_nan())
        .fold(None::<(Arm, f64)>, |best, &(a, m)| match best {
            Some((_, bm)) if m <= bm => best,
            _ => Some((a, m)),
        })
        .map_or(Arm::Multimodal, |(a, _)| a)
}

/// Trains every configured arm on every configured fold with a shared seed
/// and shared splits, then tabulates reports, comparisons and winners.
pub fn run_ablation(
    dataset: &Dataset,
    cfg: &AblationConfig,
    log: &mut dyn FnMut(&str),
) -> Result<AblationResult> {
    if !(0.0..=1.0).contains(&cfg.caption_noise) {
        return Err(Error::Config(format!(
            "caption_noise must lie in [0, 1], got {}",
            cfg.caption_noise
        )));
    }
    if cfg.extended_factor == 0 {
        return Err(Error::Config("extended_factor must be >= 1".into()));
    }
    if cfg.arms.is_empty() {
        return Err(Error::Config("no ablation arms selected".into()));
    }
    cfg.train.validate()?;
    let folds: Vec<usize> = cfg
        .folds
        .clone()
        .unwrap_or_else(|| (0..cfg.train.folds).collect());
    let length = cfg.model.text_length;
    let clean = TrainingData::from_dataset(dataset, length);
    let noisy = TrainingData::with_tokens(
        dataset,
        noisy_tokens(dataset, cfg.caption_noise, length, cfg.train.seed),
    );
    clean.check_compatible(&cfg.model, dataset.vocab.len())?;

    let mut runs = Vec::new();
    for &fold in &folds {
        let split = FoldSplit::new(dataset.len(), fold, &cfg.train)?;
        for &arm in &cfg.arms {
            let (model, train_cfg) = cfg.arm_configs(arm);
            let data = if arm == Arm::NoisyText { &noisy } else { &clean };
            let run_id = format!("{arm}-fold{fold}-seed{}", cfg.train.seed);
            log(&format!("training {run_id} ({} epochs)", train_cfg.epochs));
            let outcome = train(&model, data, &split, &train_cfg)?;
            let r = voxel_correlations(&model, &outcome.params, data, &split.test)?;
            let fp = fingerprint(&(&model, &train_cfg, arm, cfg.caption_noise));
            let reports = hemisphere_reports(dataset, &r, fold, &run_id, &fp)?;
            log(&format!("{run_id}: all-voxel median R {:.4}", median(&r)));
            runs.push(ArmRun {
                arm,
                fold,
                run_id,
                r,
                reports,
                trace: outcome.trace,
            });
        }
    }

    let mut comparisons = Vec::new();
    let mut summary = Vec::new();
    for &fold in &folds {
        let by_arm: Vec<&ArmRun> = runs.iter().filter(|r| r.fold == fold).collect();
        if let Some(base) = by_arm.iter().find(|r| r.arm == Arm::Multimodal) {
            for cand in by_arm.iter().filter(|r| r.arm != Arm::Multimodal) {
                for (b, c) in base.reports.iter().zip(&cand.reports) {
                    comparisons.push((cand.arm, compare_runs(b, c)?));
                }
            }
        }
        for (hi, h) in Hemisphere::BOTH.iter().enumerate() {
            let medians: Vec<(Arm, f64)> = by_arm
                .iter()
                .map(|r| (r.arm, r.reports[hi].all_vertices()))
                .collect();
            summary.push(SummaryRow {
                fold,
                scope: h.name().into(),
                winner: winner(&medians),
                medians,
            });
        }
        let medians: Vec<(Arm, f64)> = by_arm.iter().map(|r| (r.arm, median(&r.r))).collect();
        summary.push(SummaryRow {
            fold,
            scope: "both".into(),
            winner: winner(&medians),
            medians,
        });
    }
    Ok(AblationResult {
        runs,
        comparisons,
        summary,
    })
}
