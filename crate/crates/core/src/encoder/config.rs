use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which token spans the network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    /// Image patches followed by caption tokens.
    #[default]
    Multimodal,
    /// Image patches only; the text span is absent from the sequence.
    ImageOnly,
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(Modality::Multimodal),
            "image-only" => Ok(Modality::ImageOnly),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected multimodal or image-only)"
            ))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Multimodal => "multimodal",
            Modality::ImageOnly => "image-only",
        })
    }
}

/// Architecture hyperparameters. Every parameter shape is a function of
/// this struct alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_size: usize,
    pub patch_size: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub text_length: usize,
    pub vocab_size: usize,
    pub voxel_count: usize,
    pub reduction_channels: usize,
    pub reduction_kernel: usize,
    pub mode: Modality,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// ViT-B/32 backbone on 224×224 RGB input with 256 caption tokens.
    pub fn vit_b32() -> Self {
        Self {
            hidden_size: 768,
            depth: 12,
            heads: 12,
            mlp_size: 3072,
            patch_size: 32,
            image_channels: 3,
            image_height: 224,
            image_width: 224,
            text_length: 256,
            // BERT-base WordPiece vocabulary
            vocab_size: 30522,
            voxel_count: 19004,
            reduction_channels: 64,
            reduction_kernel: 3,
            mode: Modality::Multimodal,
        }
    }

    /// CPU-sized network used by tests and the default pipeline.
    pub fn desk() -> Self {
        Self {
            hidden_size: 64,
            depth: 2,
            heads: 4,
            mlp_size: 256,
            patch_size: 8,
            image_channels: 3,
            image_height: 32,
            image_width: 32,
            text_length: 16,
            vocab_size: 64,
            voxel_count: 100,
            reduction_channels: 8,
            reduction_kernel: 3,
            mode: Modality::Multimodal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("heads", self.heads),
            ("mlp_size", self.mlp_size),
            ("patch_size", self.patch_size),
            ("image_channels", self.image_channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("text_length", self.text_length),
            ("vocab_size", self.vocab_size),
            ("voxel_count", self.voxel_count),
            ("reduction_channels", self.reduction_channels),
            ("reduction_kernel", self.reduction_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by patch size P={}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.hidden_size % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by heads {}",
                self.hidden_size, self.heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must hold at least the PAD and UNK tokens".into(),
            ));
        }
        if self.reduction_kernel > self.seq_len() {
            return Err(Error::Config(format!(
                "reduction_kernel {} exceeds sequence length {}",
                self.reduction_kernel,
                self.seq_len()
            )));
        }
        Ok(())
    }

    /// `N = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    pub fn image_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn text_len(&self) -> usize {
        self.text_length + 1
    }

    pub fn seq_len(&self) -> usize {
        match self.mode {
            Modality::Multimodal => self.image_len() + self.text_len(),
            Modality::ImageOnly => self.image_len(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }

    pub fn reduced_len(&self) -> usize {
        self.seq_len() - self.reduction_kernel + 1
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduction_channels * self.reduced_len()
    }

    pub fn image_numel(&self) -> usize {
        self.image_channels * self.image_height * self.image_width
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_size;
        let m = self.mlp_size;
        let image = self.patch_dim() * h + h + self.image_len() * h + h;
        let text = match self.mode {
            Modality::Multimodal => self.vocab_size * h + h + self.text_len() * h + h,
            Modality::ImageOnly => 0,
        };
        let block = 4 * h * h + 2 * h * m + 9 * h + m;
        let pool = h * h;
        let conv = self.reduction_channels * h * self.reduction_kernel + self.reduction_channels;
        let head = self.reduced_dim() * self.voxel_count + self.voxel_count;
        image + text + self.depth * block + pool + conv + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::vit_b32().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::vit_b32().num_patches(), 49);
        assert_eq!(ModelConfig::vit_b32().patch_dim(), 3072);
    }

    #[test]
    fn sequence_lengths_by_mode() {
        let mut c = ModelConfig::desk();
        assert_eq!(c.seq_len(), 17 + 17);
        c.mode = Modality::ImageOnly;
        assert_eq!(c.seq_len(), 17);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = ModelConfig::desk();
        c.image_height = 30;
        assert!(c.validate().unwrap_err().to_string().contains("P=8"));
        let mut c = ModelConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("image-only".parse::<Modality>().unwrap(), Modality::ImageOnly);
        assert!("text-only".parse::<Modality>().is_err());
    }
}
