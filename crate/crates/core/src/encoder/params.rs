use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const INIT_STD: f64 = 0.02;

/// Whether decoupled weight decay applies to a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Apply,
    Exempt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Real> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub mlp_in_weight: Tensor<T>,
    pub mlp_in_bias: Tensor<T>,
    pub mlp_out_weight: Tensor<T>,
    pub mlp_out_bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextParams<T: Real> {
    /// `[vocab × H]`; row 0 (PAD) starts at zero.
    pub word_embedding: Tensor<T>,
    pub text_cls: Tensor<T>,
    /// `[(L+1) × H]`
    pub text_positions: Tensor<T>,
    pub text_type: Tensor<T>,
}

/// All learnable weights of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    /// `[P²·C × H]`
    pub patch_projection: Tensor<T>,
    pub image_cls: Tensor<T>,
    /// `[(N+1) × H]`
    pub image_positions: Tensor<T>,
    pub image_type: Tensor<T>,
    /// Absent in image-only mode.
    pub text: Option<TextParams<T>>,
    pub blocks: Vec<BlockParams<T>>,
    /// `[H × H]`
    pub pool_weight: Tensor<T>,
    /// `[channels × H × kernel]`
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
    /// `[reduced_dim × voxels]`
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let v = (0..n)
            .map(|_| T::of(self.normal.sample(&mut self.rng)))
            .collect();
        Tensor::new(shape.to_vec(), v).expect("init shape")
    }
}

impl<T: Real> ModelParams<T> {
    /// Draws weights and position embeddings from `N(0, 0.02²)`; biases,
    /// type embeddings and layer-norm shifts start at zero, layer-norm
    /// scales at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("finite std"),
        };
        let h = config.hidden_size;
        let m = config.mlp_size;
        let patch_projection = init.normal(&[config.patch_dim(), h]);
        let image_cls = init.normal(&[h]);
        let image_positions = init.normal(&[config.image_len(), h]);
        let image_type = Tensor::zeros([h]);
        let text = match config.mode {
            super::Modality::Multimodal => {
                let mut word_embedding = init.normal::<T>(&[config.vocab_size, h]);
                word_embedding.values_mut()[..h]
                    .iter_mut()
                    .for_each(|v| *v = T::zero());
                Some(TextParams {
                    word_embedding,
                    text_cls: init.normal(&[h]),
                    text_positions: init.normal(&[config.text_len(), h]),
                    text_type: Tensor::zeros([h]),
                })
            }
            super::Modality::ImageOnly => None,
        };
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::full([h], T::one()),
                ln1_beta: Tensor::zeros([h]),
                qkv_weight: init.normal(&[h, 3 * h]),
                qkv_bias: Tensor::zeros([3 * h]),
                out_weight: init.normal(&[h, h]),
                out_bias: Tensor::zeros([h]),
                ln2_gamma: Tensor::full([h], T::one()),
                ln2_beta: Tensor::zeros([h]),
                mlp_in_weight: init.normal(&[h, m]),
                mlp_in_bias: Tensor::zeros([m]),
                mlp_out_weight: init.normal(&[m, h]),
                mlp_out_bias: Tensor::zeros([h]),
            })
            .collect();
        let pool_weight = init.normal(&[h, h]);
        let conv_weight = init.normal(&[config.reduction_channels, h, config.reduction_kernel]);
        let conv_bias = Tensor::zeros([config.reduction_channels]);
        let head_weight = init.normal(&[config.reduced_dim(), config.voxel_count]);
        let head_bias = Tensor::zeros([config.voxel_count]);
        Ok(Self {
            patch_projection,
            image_cls,
            image_positions,
            image_type,
            text,
            blocks,
            pool_weight,
            conv_weight,
            conv_bias,
            head_weight,
            head_bias,
        })
    }

    /// Every parameter in declaration order, with its name and decay rule.
    pub fn entries(&self) -> Vec<(String, Decay, &Tensor<T>)> {
        use Decay::*;
        let mut out: Vec<(String, Decay, &Tensor<T>)> = vec![
            ("patch_projection".into(), Apply, &self.patch_projection),
            ("image_cls".into(), Exempt, &self.image_cls),
            ("image_positions".into(), Exempt, &self.image_positions),
            ("image_type".into(), Exempt, &self.image_type),
        ];
        if let Some(t) = &self.text {
            out.push(("word_embedding".into(), Apply, &t.word_embedding));
            out.push(("text_cls".into(), Exempt, &t.text_cls));
            out.push(("text_positions".into(), Exempt, &t.text_positions));
            out.push(("text_type".into(), Exempt, &t.text_type));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("ln1_gamma"), Exempt, &b.ln1_gamma));
            out.push((p("ln1_beta"), Exempt, &b.ln1_beta));
            out.push((p("qkv_weight"), Apply, &b.qkv_weight));
            out.push((p("qkv_bias"), Exempt, &b.qkv_bias));
            out.push((p("out_weight"), Apply, &b.out_weight));
            out.push((p("out_bias"), Exempt, &b.out_bias));
            out.push((p("ln2_gamma"), Exempt, &b.ln2_gamma));
            out.push((p("ln2_beta"), Exempt, &b.ln2_beta));
            out.push((p("mlp_in_weight"), Apply, &b.mlp_in_weight));
            out.push((p("mlp_in_bias"), Exempt, &b.mlp_in_bias));
            out.push((p("mlp_out_weight"), Apply, &b.mlp_out_weight));
            out.push((p("mlp_out_bias"), Exempt, &b.mlp_out_bias));
        }
        out.push(("pool_weight".into(), Apply, &self.pool_weight));
        out.push(("conv_weight".into(), Apply, &self.conv_weight));
        out.push(("conv_bias".into(), Exempt, &self.conv_bias));
        out.push(("head_weight".into(), Apply, &self.head_weight));
        out.push(("head_bias".into(), Exempt, &self.head_bias));
        out
    }

    /// Mutable view in the same order as [`entries`](Self::entries).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.patch_projection,
            &mut self.image_cls,
            &mut self.image_positions,
            &mut self.image_type,
        ];
        if let Some(t) = &mut self.text {
            out.push(&mut t.word_embedding);
            out.push(&mut t.text_cls);
            out.push(&mut t.text_positions);
            out.push(&mut t.text_type);
        }
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gamma);
            out.push(&mut b.ln1_beta);
            out.push(&mut b.qkv_weight);
            out.push(&mut b.qkv_bias);
            out.push(&mut b.out_weight);
            out.push(&mut b.out_bias);
            out.push(&mut b.ln2_gamma);
            out.push(&mut b.ln2_beta);
            out.push(&mut b.mlp_in_weight);
            out.push(&mut b.mlp_in_bias);
            out.push(&mut b.mlp_out_weight);
            out.push(&mut b.mlp_out_bias);
        }
        out.push(&mut self.pool_weight);
        out.push(&mut self.conv_weight);
        out.push(&mut self.conv_bias);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn count(&self) -> usize {
        self.entries().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Replaces every value from a flat buffer laid out in entry order.
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::ManifestDisagreement {
                what: "parameter values".into(),
                manifest: self.count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.entries()
            .into_iter()
            .flat_map(|(_, _, t)| t.values().iter().copied())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            patch_projection: self.patch_projection.cast(),
            image_cls: self.image_cls.cast(),
            image_positions: self.image_positions.cast(),
            image_type: self.image_type.cast(),
            text: self.text.as_ref().map(|t| TextParams {
                word_embedding: t.word_embedding.cast(),
                text_cls: t.text_cls.cast(),
                text_positions: t.text_positions.cast(),
                text_type: t.text_type.cast(),
            }),
            blocks: Vec::new(),
            pool_weight: self.pool_weight.cast(),
            conv_weight: self.conv_weight.cast(),
            conv_bias: self.conv_bias.cast(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        };
        out.blocks = self
            .blocks
            .iter()
            .map(|b| BlockParams {
                ln1_gamma: b.ln1_gamma.cast(),
                ln1_beta: b.ln1_beta.cast(),
                qkv_weight: b.qkv_weight.cast(),
                qkv_bias: b.qkv_bias.cast(),
                out_weight: b.out_weight.cast(),
                out_bias: b.out_bias.cast(),
                ln2_gamma: b.ln2_gamma.cast(),
                ln2_beta: b.ln2_beta.cast(),
                mlp_in_weight: b.mlp_in_weight.cast(),
                mlp_in_bias: b.mlp_in_bias.cast(),
                mlp_out_weight: b.mlp_out_weight.cast(),
                mlp_out_bias: b.mlp_out_bias.cast(),
            })
            .collect();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Modality;

    #[test]
    fn count_matches_closed_form() {
        for mode in [Modality::Multimodal, Modality::ImageOnly] {
            let mut c = ModelConfig::desk();
            c.mode = mode;
            let p = ModelParams::<f32>::init(&c, 1).unwrap();
            assert_eq!(p.count(), c.param_count());
            assert_eq!(p.to_flat().len(), c.param_count());
        }
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::desk();
        let a = ModelParams::<f32>::init(&c, 3).unwrap();
        let b = ModelParams::<f32>::init(&c, 3).unwrap();
        let d = ModelParams::<f32>::init(&c, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn init_zeroes_type_embeddings_and_biases() {
        let p = ModelParams::<f32>::init(&ModelConfig::desk(), 0).unwrap();
        assert!(p.image_type.values().iter().all(|&v| v == 0.0));
        assert!(p.head_bias.values().iter().all(|&v| v == 0.0));
        assert!(p.blocks[0].ln1_gamma.values().iter().all(|&v| v == 1.0));
        assert!(p.image_positions.values().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn flat_round_trip() {
        let c = ModelConfig::desk();
        let a = ModelParams::<f32>::init(&c, 3).unwrap();
        let mut b = ModelParams::<f32>::init(&c, 9).unwrap();
        b.load_flat(&a.to_flat()).unwrap();
        assert_eq!(a, b);
        assert!(b.load_flat(&[0.0; 3]).is_err());
    }
}
