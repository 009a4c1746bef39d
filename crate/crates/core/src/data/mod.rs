//! Dataset model, container format and preprocessing.

mod caption;
mod container;
mod kfold;
mod synth;
mod zscore;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use caption::{corrupt_caption, select_caption};
pub use container::{load_dataset, save_dataset, DATASET_VERSION};
pub use kfold::kfold_split;
pub use synth::{generate_synthetic, noise_ceiling, SynthSpec};
pub use zscore::{zscore_and_average, Averaged, Session};

use crate::encoder::{tokenize_pad, Vocab};
use crate::error::{Error, Result};

/// Anatomical stream ROIs, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Early,
    Midventral,
    Midlateral,
    Midparietal,
    Ventral,
    Lateral,
    Parietal,
}

impl Stream {
    pub const ALL: [Stream; 7] = [
        Stream::Early,
        Stream::Midventral,
        Stream::Midlateral,
        Stream::Midparietal,
        Stream::Ventral,
        Stream::Lateral,
        Stream::Parietal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Early => "early",
            Stream::Midventral => "midventral",
            Stream::Midlateral => "midlateral",
            Stream::Midparietal => "midparietal",
            Stream::Ventral => "ventral",
            Stream::Lateral => "lateral",
            Stream::Parietal => "parietal",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stream::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown stream ROI `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Lh,
    Rh,
}

impl Hemisphere {
    pub const BOTH: [Hemisphere; 2] = [Hemisphere::Lh, Hemisphere::Rh];

    pub fn name(self) -> &'static str {
        match self {
            Hemisphere::Lh => "lh",
            Hemisphere::Rh => "rh",
        }
    }
}

impl fmt::Display for Hemisphere {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Hemisphere {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lh" => Ok(Hemisphere::Lh),
            "rh" => Ok(Hemisphere::Rh),
            _ => Err(Error::Data(format!("unknown hemisphere `{s}`"))),
        }
    }
}

/// Stream label of every voxel, per hemisphere.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiAtlas {
    pub lh: Vec<Stream>,
    pub rh: Vec<Stream>,
    /// Optional finer labels (e.g. `V1v`, `FFA-1`), parallel to the stream
    /// vectors when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional_lh: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional_rh: Option<Vec<String>>,
}

impl RoiAtlas {
    /// Assigns `count` voxels to the seven streams in equal contiguous runs.
    pub fn even_split(count: usize) -> Vec<Stream> {
        (0..count).map(|i| Stream::ALL[i * 7 / count]).collect()
    }

    pub fn hemisphere(&self, h: Hemisphere) -> &[Stream] {
        match h {
            Hemisphere::Lh => &self.lh,
            Hemisphere::Rh => &self.rh,
        }
    }
}

/// Candidate captions for one stimulus and the index chosen by
/// [`select_caption`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub candidates: Vec<String>,
    pub selected: usize,
    /// Reference text used to score candidates.
    #[serde(default)]
    pub image_tags: String,
}

impl CaptionSet {
    pub fn selected_caption(&self) -> &str {
        &self.candidates[self.selected]
    }
}

/// Hidden generative state of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub k_img: usize,
    pub k_txt: usize,
    pub noise_sigma: f64,
    pub text_dependence_fraction: f64,
    /// `[n × k_img]`
    pub latents_img: Vec<f32>,
    /// `[n × k_txt]`
    pub latents_txt: Vec<f32>,
    /// `[k_img × voxels]`, voxels ordered lh then rh.
    pub mixing_img: Vec<f32>,
    /// `[k_txt × voxels]`
    pub mixing_txt: Vec<f32>,
    /// Noiseless response `[n × voxels]`.
    pub signal: Vec<f32>,
}

/// NSD-shaped collection of stimuli and their averaged voxel responses.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub subject_id: String,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    /// `[n × C·H·W]`
    pub images: Vec<f32>,
    pub voxel_count_lh: usize,
    pub voxel_count_rh: usize,
    /// `[n × voxel_count_lh]`
    pub voxels_lh: Vec<f32>,
    /// `[n × voxel_count_rh]`
    pub voxels_rh: Vec<f32>,
    pub stimulus_ids: Vec<String>,
    pub repeat_counts: Vec<u32>,
    pub captions: Vec<CaptionSet>,
    pub atlas: RoiAtlas,
    pub vocab: Vocab,
    pub ground_truth: Option<GroundTruth>,
}

/// Borrowed view of one stimulus.
#[derive(Clone, Copy, Debug)]
pub struct StimulusSample<'a> {
    pub subject_id: &'a str,
    pub stimulus_id: &'a str,
    pub image: &'a [f32],
    pub captions: &'a [String],
    pub selected_caption: &'a str,
    pub voxels_lh: &'a [f32],
    pub voxels_rh: &'a [f32],
    pub repeat_count: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stimulus_ids.is_empty()
    }

    pub fn voxel_count(&self) -> usize {
        self.voxel_count_lh + self.voxel_count_rh
    }

    pub fn image_numel(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_numel();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn sample(&self, i: usize) -> StimulusSample<'_> {
        let (vl, vr) = (self.voxel_count_lh, self.voxel_count_rh);
        StimulusSample {
            subject_id: &self.subject_id,
            stimulus_id: &self.stimulus_ids[i],
            image: self.image(i),
            captions: &self.captions[i].candidates,
            selected_caption: self.captions[i].selected_caption(),
            voxels_lh: &self.voxels_lh[i * vl..(i + 1) * vl],
            voxels_rh: &self.voxels_rh[i * vr..(i + 1) * vr],
            repeat_count: self.repeat_counts[i],
        }
    }

    /// Targets for stimulus `i`: left hemisphere voxels then right.
    pub fn targets(&self, i: usize) -> Vec<f32> {
        let s = self.sample(i);
        let mut t = Vec::with_capacity(self.voxel_count());
        t.extend_from_slice(s.voxels_lh);
        t.extend_from_slice(s.voxels_rh);
        t
    }

    /// Padded token ids of every selected caption.
    pub fn token_ids(&self, length: usize) -> Vec<Vec<usize>> {
        self.captions
            .iter()
            .map(|c| tokenize_pad(c.selected_caption(), &self.vocab, length))
            .collect()
    }

    /// Checks internal consistency of array lengths and labels.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let checks = [
            ("images", self.images.len(), n * self.image_numel()),
            ("voxels_lh", self.voxels_lh.len(), n * self.voxel_count_lh),
            ("voxels_rh", self.voxels_rh.len(), n * self.voxel_count_rh),
            ("repeat_counts", self.repeat_counts.len(), n),
            ("captions", self.captions.len(), n),
            ("atlas lh", self.atlas.lh.len(), self.voxel_count_lh),
            ("atlas rh", self.atlas.rh.len(), self.voxel_count_rh),
        ];
        for (what, actual, manifest) in checks {
            if actual != manifest {
                return Err(Error::ManifestDisagreement {
                    what: what.into(),
                    manifest,
                    actual,
                });
            }
        }
        if let Some(i) = self.repeat_counts.iter().position(|&r| r == 0) {
            return Err(Error::Data(format!("stimulus {i} has zero repeats")));
        }
        for (i, c) in self.captions.iter().enumerate() {
            if c.candidates.is_empty() || c.selected >= c.candidates.len() {
                return Err(Error::Data(format!("stimulus {i} has no valid selected caption")));
            }
        }
        Ok(())
    }
}
