//! Synthetic stand-in for an fMRI natural-scenes dataset with known
//! generative structure.
//!
//! Every stimulus has continuous image latents, rendered into the picture
//! as a weighted sum of smooth orthonormal basis images, and discrete
//! caption latents, rendered into text through a template vocabulary. The
//! caption latents are independent of the image, so text carries
//! information the picture does not. Each voxel mixes both latent groups
//! linearly; `text_dependence_fraction` sets the share of signal variance
//! that comes from the caption side.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    select_caption, zscore_and_average, CaptionSet, Dataset, GroundTruth, RoiAtlas, Session,
};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::objective::pearson_columns;

const WORD_BANK: [[&str; 8]; 6] = [
    ["red", "blue", "green", "yellow", "white", "black", "orange", "brown"],
    ["dog", "bus", "cat", "car", "horse", "boat", "train", "bird"],
    ["street", "beach", "kitchen", "field", "park", "room", "river", "forest"],
    ["umbrella", "ball", "laptop", "banana", "kite", "clock", "bench", "cake"],
    ["small", "large", "tiny", "huge", "old", "new", "wet", "bright"],
    ["running", "sitting", "standing", "eating", "sleeping", "playing", "waiting", "flying"],
];
const CONNECTIVES: [&str; 4] = ["near", "with", "in", "on"];
const FILLER: [&str; 24] = [
    "the", "sky", "tree", "water", "road", "person", "table", "wave", "desk", "monitor",
    "grass", "wall", "window", "shirt", "hat", "plate", "cup", "door", "light", "snow",
    "rock", "sign", "fence", "chair",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub subject_id: String,
    pub n_samples: usize,
    pub voxels_lh: usize,
    pub voxels_rh: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub vocab_size: usize,
    /// Continuous image latent dimensions.
    pub k_img: usize,
    /// Discrete caption latent dimensions.
    pub k_txt: usize,
    /// Number of levels per caption latent.
    pub text_levels: usize,
    pub noise_sigma: f64,
    pub text_dependence_fraction: f64,
    pub caption_candidates: usize,
    /// Presentations per stimulus; each repeat is its own session.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subject_id: "subj01".into(),
            n_samples: 512,
            voxels_lh: 50,
            voxels_rh: 50,
            image_channels: 3,
            image_height: 32,
            image_width: 32,
            vocab_size: 64,
            k_img: 4,
            k_txt: 4,
            text_levels: 6,
            noise_sigma: 0.75,
            text_dependence_fraction: 0.5,
            caption_candidates: 5,
            repeats: 1,
            seed: 0,
        }
    }
}

fn level_word(factor: usize, level: usize) -> String {
    WORD_BANK
        .get(factor)
        .and_then(|b| b.get(level))
        .map(|w| (*w).to_owned())
        .unwrap_or_else(|| format!("f{factor}l{level}"))
}

impl SynthSpec {
    /// Parses `key = value` text. Negative integers are reported per field
    /// before type conversion.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        let mut bad = Vec::new();
        for (k, v) in &table {
            if let Some(i) = v.as_integer() {
                if i < 0 {
                    bad.push(format!("`{k}` must be non-negative, got {i}"));
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        let spec: SynthSpec = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let positive = [
            ("n_samples", self.n_samples),
            ("voxels_lh", self.voxels_lh),
            ("voxels_rh", self.voxels_rh),
            ("image_channels", self.image_channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("k_img", self.k_img),
            ("k_txt", self.k_txt),
            ("caption_candidates", self.caption_candidates),
            ("repeats", self.repeats),
        ];
        for (name, v) in positive {
            if v == 0 {
                bad.push(format!("`{name}` must be positive"));
            }
        }
        if self.n_samples < 2 {
            bad.push("`n_samples` must be at least 2".into());
        }
        if self.text_levels < 2 {
            bad.push("`text_levels` must be at least 2".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bad.push(format!("`noise_sigma` must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.text_dependence_fraction) {
            bad.push(format!(
                "`text_dependence_fraction` must lie in [0, 1], got {}",
                self.text_dependence_fraction
            ));
        }
        let needed = self.content_words().len() + 2;
        if self.vocab_size < needed {
            bad.push(format!(
                "`vocab_size` {} is too small for {needed} template words",
                self.vocab_size
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn content_words(&self) -> Vec<String> {
        let mut w = vec!["a".to_owned()];
        w.extend(CONNECTIVES.iter().map(|s| (*s).to_owned()));
        for f in 0..self.k_txt {
            for l in 0..self.text_levels {
                w.push(level_word(f, l));
            }
        }
        w
    }

    fn vocab(&self) -> Vocab {
        let mut words = self.content_words();
        let mut i = 0;
        while words.len() + 2 < self.vocab_size {
            let w = FILLER
                .get(i)
                .map(|s| (*s).to_owned())
                .unwrap_or_else(|| format!("w{i}"));
            words.push(w);
            i += 1;
        }
        Vocab::new(words)
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels_lh + self.voxels_rh
    }
}

fn caption_for(levels: &[usize]) -> String {
    let mut words = vec!["a".to_owned()];
    for (f, &l) in levels.iter().enumerate() {
        if f > 0 {
            words.push(CONNECTIVES[(f - 1) % CONNECTIVES.len()].to_owned());
        }
        words.push(level_word(f, l));
    }
    words.join(" ")
}

/// Smooth random images, orthonormalised (Gram–Schmidt) and scaled to unit
/// RMS.
fn basis_images(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (c, h, w) = (spec.image_channels, spec.image_height, spec.image_width);
    let n = c * h * w;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(spec.k_img);
    for _ in 0..spec.k_img {
        let mut img = vec![0.0; n];
        for ch in 0..c {
            for _ in 0..3 {
                let (fx, fy) = loop {
                    let f = (rng.gen_range(0..3), rng.gen_range(0..3));
                    if f != (0, 0) {
                        break f;
                    }
                };
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp: f64 = StandardNormal.sample(rng);
                for y in 0..h {
                    for x in 0..w {
                        let arg = 2.0 * PI * (fx as f64 * x as f64 / w as f64 + fy as f64 * y as f64 / h as f64);
                        img[(ch * h + y) * w + x] += amp * (arg + phase).cos();
                    }
                }
            }
        }
        for prev in &out {
            let dot: f64 = img.iter().zip(prev).map(|(a, b)| a * b).sum();
            let pp: f64 = prev.iter().map(|b| b * b).sum();
            img.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot / pp * b);
        }
        let rms = (img.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        img.iter_mut().for_each(|v| *v /= rms.max(1e-12));
        out.push(img);
    }
    out
}

/// `[k × voxels]` Gaussian weights with every voxel column scaled to unit
/// norm, so unit-variance latents give unit-variance projections.
fn mixing(k: usize, voxels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k * voxels).map(|_| StandardNormal.sample(rng)).collect();
    for v in 0..voxels {
        let norm = (0..k).map(|j| w[j * voxels + v].powi(2)).sum::<f64>().sqrt();
        for j in 0..k {
            w[j * voxels + v] /= norm.max(1e-12);
        }
    }
    w
}

/// Builds a dataset and keeps its generative state; a pure function of
/// `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_samples;
    let v = spec.voxel_count();
    let (ki, kt, levels) = (spec.k_img, spec.k_txt, spec.text_levels);
    let bases = basis_images(spec, &mut rng);
    let mix_img = mixing(ki, v, &mut rng);
    let mix_txt = mixing(kt, v, &mut rng);

    let level_sd = (((levels * levels - 1) as f64) / 12.0).sqrt();
    let level_mid = (levels - 1) as f64 / 2.0;
    let vocab = spec.vocab();
    let img_numel = spec.image_channels * spec.image_height * spec.image_width;

    let mut images = Vec::with_capacity(n * img_numel);
    let mut latents_img = Vec::with_capacity(n * ki);
    let mut latents_txt = Vec::with_capacity(n * kt);
    let mut signal = Vec::with_capacity(n * v);
    let mut captions = Vec::with_capacity(n);
    let (wi, wt) = (
        (1.0 - spec.text_dependence_fraction).sqrt(),
        spec.text_dependence_fraction.sqrt(),
    );
    for _ in 0..n {
        let zi: Vec<f64> = (0..ki).map(|_| StandardNormal.sample(&mut rng)).collect();
        let lv: Vec<usize> = (0..kt).map(|_| rng.gen_range(0..levels)).collect();
        let zt: Vec<f64> = lv.iter().map(|&l| (l as f64 - level_mid) / level_sd).collect();

        let mut img = vec![0.0f64; img_numel];
        for (z, b) in zi.iter().zip(&bases) {
            img.iter_mut().zip(b).for_each(|(p, &bv)| *p += z * bv);
        }
        images.extend(img.iter().map(|&p| p as f32));
        for vox in 0..v {
            let si: f64 = (0..ki).map(|j| zi[j] * mix_img[j * v + vox]).sum();
            let st: f64 = (0..kt).map(|j| zt[j] * mix_txt[j * v + vox]).sum();
            signal.push(wi * si + wt * st);
        }
        latents_img.extend(zi.iter().map(|&x| x as f32));
        latents_txt.extend(zt.iter().map(|&x| x as f32));

        let truth = caption_for(&lv);
        let tags = lv
            .iter()
            .enumerate()
            .map(|(f, &l)| level_word(f, l))
            .collect::<Vec<_>>()
            .join(" ");
        let mut candidates = vec![truth];
        while candidates.len() < spec.caption_candidates {
            let mut alt = lv.clone();
            while alt == lv {
                for a in alt.iter_mut() {
                    if rng.gen_bool(0.5) {
                        *a = rng.gen_range(0..levels);
                    }
                }
            }
            candidates.push(caption_for(&alt));
        }
        candidates.shuffle(&mut rng);
        let selected = select_caption(&candidates, &tags)?;
        captions.push(CaptionSet {
            candidates,
            selected,
            image_tags: tags,
        });
    }

    let trial_sigma = spec.noise_sigma * (spec.repeats as f64).sqrt();
    let noise = Normal::new(0.0, trial_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let sessions: Vec<Session> = (0..spec.repeats)
        .map(|_| Session {
            trials: (0..n).collect(),
            responses: signal
                .iter()
                .map(|&s| {
                    let e = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (s + e) as f32
                })
                .collect(),
        })
        .collect();
    let averaged = zscore_and_average(&sessions, n, v)?;

    let mut voxels_lh = Vec::with_capacity(n * spec.voxels_lh);
    let mut voxels_rh = Vec::with_capacity(n * spec.voxels_rh);
    for row in averaged.values.chunks(v) {
        voxels_lh.extend_from_slice(&row[..spec.voxels_lh]);
        voxels_rh.extend_from_slice(&row[spec.voxels_lh..]);
    }

    Ok(Dataset {
        subject_id: spec.subject_id.clone(),
        image_shape: [spec.image_channels, spec.image_height, spec.image_width],
        images,
        voxel_count_lh: spec.voxels_lh,
        voxel_count_rh: spec.voxels_rh,
        voxels_lh,
        voxels_rh,
        stimulus_ids: (0..n).map(|i| format!("{}-{i:05}", spec.subject_id)).collect(),
        repeat_counts: averaged.repeat_counts,
        captions,
        atlas: RoiAtlas {
            lh: RoiAtlas::even_split(spec.voxels_lh),
            rh: RoiAtlas::even_split(spec.voxels_rh),
            functional_lh: None,
            functional_rh: None,
        },
        vocab,
        ground_truth: Some(GroundTruth {
            k_img: ki,
            k_txt: kt,
            noise_sigma: spec.noise_sigma,
            text_dependence_fraction: spec.text_dependence_fraction,
            latents_img,
            latents_txt,
            mixing_img: mix_img.iter().map(|&x| x as f32).collect(),
            mixing_txt: mix_txt.iter().map(|&x| x as f32).collect(),
            signal: signal.iter().map(|&x| x as f32).collect(),
        }),
    })
}

/// Correlation between the noiseless signal and the observed response of
/// every voxel (lh then rh) over `indices`, or over all stimuli.
pub fn noise_ceiling(dataset: &Dataset, indices: Option<&[usize]>) -> Result<Vec<f64>> {
    let gt = dataset.ground_truth.as_ref().ok_or_else(|| {
        Error::Unsupported("noise ceiling needs a synthetic dataset with ground truth".into())
    })?;
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..dataset.len()).collect();
            &all
        }
    };
    let v = dataset.voxel_count();
    let mut sig = Vec::with_capacity(idx.len() * v);
    let mut obs = Vec::with_capacity(idx.len() * v);
    for &i in idx {
        sig.extend_from_slice(&gt.signal[i * v..(i + 1) * v]);
        obs.extend(dataset.targets(i));
    }
    pearson_columns(&sig, &obs, idx.len(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_samples: 40,
            voxels_lh: 7,
            voxels_rh: 7,
            image_height: 16,
            image_width: 16,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn pure_function_of_spec() {
        assert_eq!(generate_synthetic(&small(3)).unwrap(), generate_synthetic(&small(3)).unwrap());
        assert_ne!(
            generate_synthetic(&small(3)).unwrap().images,
            generate_synthetic(&small(4)).unwrap().images
        );
    }

    #[test]
    fn selected_caption_matches_tags() {
        let d = generate_synthetic(&small(1)).unwrap();
        for c in &d.captions {
            let words: Vec<_> = crate::encoder::tokenize(c.selected_caption());
            for t in crate::encoder::tokenize(&c.image_tags) {
                assert!(words.contains(&t));
            }
            assert_eq!(c.candidates.len(), 5);
        }
        assert_eq!(d.vocab.len(), 64);
    }

    #[test]
    fn zero_noise_ceiling_is_one() {
        let mut s = small(2);
        s.noise_sigma = 0.0;
        let d = generate_synthetic(&s).unwrap();
        for r in noise_ceiling(&d, None).unwrap() {
            assert!((r - 1.0).abs() < 1e-5, "{r}");
        }
    }

    #[test]
    fn spec_validation_names_fields() {
        let err = SynthSpec::from_toml_str("voxels_lh = -5\nn_samples = -1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("voxels_lh") && msg.contains("n_samples"), "{msg}");
        let err = SynthSpec::from_toml_str("text_dependence_fraction = 1.5").unwrap_err();
        assert!(err.to_string().contains("text_dependence_fraction"));
        assert!(SynthSpec::from_toml_str("bogus = 1").is_err());
        assert_eq!(SynthSpec::from_toml_str("").unwrap(), SynthSpec::default());
    }

    #[test]
    fn real_data_has_no_ceiling() {
        let mut d = generate_synthetic(&small(0)).unwrap();
        d.ground_truth = None;
        assert!(matches!(noise_ceiling(&d, None), Err(Error::Unsupported(_))));
    }
}
