//! Parameter checkpoints: a `key=value` text manifest plus one flat
//! little-endian f32 array holding every parameter in declaration order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Modality, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::io::{read_f32_le, write_f32_le};

pub const MANIFEST_FILE: &str = "checkpoint.txt";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "mmvenc-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub seed: u64,
    pub epoch: usize,
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = &ckpt.config;
    let mut m = String::new();
    let mut kv = |k: &str, v: String| {
        m.push_str(k);
        m.push('=');
        m.push_str(&v);
        m.push('\n');
    };
    kv("format", FORMAT.into());
    kv("version", VERSION.to_string());
    kv("hidden_size", c.hidden_size.to_string());
    kv("depth", c.depth.to_string());
    kv("heads", c.heads.to_string());
    kv("mlp_size", c.mlp_size.to_string());
    kv("patch_size", c.patch_size.to_string());
    kv("image_channels", c.image_channels.to_string());
    kv("image_height", c.image_height.to_string());
    kv("image_width", c.image_width.to_string());
    kv("text_length", c.text_length.to_string());
    kv("vocab_size", c.vocab_size.to_string());
    kv("voxel_count", c.voxel_count.to_string());
    kv("reduction_channels", c.reduction_channels.to_string());
    kv("reduction_kernel", c.reduction_kernel.to_string());
    kv("mode", c.mode.to_string());
    kv("seed", ckpt.seed.to_string());
    kv("epoch", ckpt.epoch.to_string());
    for (name, _, t) in ckpt.params.entries() {
        kv(&format!("param.{name}"), shape_str(t.shape()));
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, m).map_err(|e| Error::io(&mpath, e))?;
    write_f32_le(&dir.join(PARAMS_FILE), &ckpt.params.to_flat())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let parse_err = |msg: String| Error::Parse {
        path: mpath.clone(),
        msg,
    };
    let mut kv = BTreeMap::new();
    let mut param_lines = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected key=value, got `{line}`")))?;
        if let Some(name) = k.strip_prefix("param.") {
            param_lines.push((name.to_owned(), v.to_owned()));
        } else {
            kv.insert(k.to_owned(), v.to_owned());
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| parse_err(format!("missing key `{k}`")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| parse_err(format!("`{k}` is not an unsigned integer")))
    };
    if get("format")? != FORMAT {
        return Err(parse_err("not a checkpoint manifest".into()));
    }
    let version: u32 = num("version")? as u32;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let config = ModelConfig {
        hidden_size: num("hidden_size")?,
        depth: num("depth")?,
        heads: num("heads")?,
        mlp_size: num("mlp_size")?,
        patch_size: num("patch_size")?,
        image_channels: num("image_channels")?,
        image_height: num("image_height")?,
        image_width: num("image_width")?,
        text_length: num("text_length")?,
        vocab_size: num("vocab_size")?,
        voxel_count: num("voxel_count")?,
        reduction_channels: num("reduction_channels")?,
        reduction_kernel: num("reduction_kernel")?,
        mode: get("mode")?.parse::<Modality>()?,
    };
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| parse_err("`seed` is not an unsigned integer".into()))?;
    let epoch = num("epoch")?;
    let mut params = ModelParams::<f32>::init(&config, seed)?;
    let entries = params.entries();
    if entries.len() != param_lines.len() {
        return Err(Error::ManifestDisagreement {
            what: "parameter list".into(),
            manifest: param_lines.len(),
            actual: entries.len(),
        });
    }
    for ((name, _, t), (mname, mshape)) in entries.iter().zip(&param_lines) {
        if name != mname || shape_str(t.shape()) != *mshape {
            return Err(parse_err(format!(
                "parameter `{mname}` [{mshape}] does not match expected `{name}` [{}]",
                shape_str(t.shape())
            )));
        }
    }
    let flat = read_f32_le(&dir.join(PARAMS_FILE), params.count())?;
    params.load_flat(&flat)?;
    Ok(Checkpoint {
        config,
        params,
        seed,
        epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = ModelConfig::desk();
        config.mode = Modality::ImageOnly;
        let ckpt = Checkpoint {
            params: ModelParams::init(&config, 11).unwrap(),
            config,
            seed: 11,
            epoch: 3,
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        let a: Vec<u32> = ckpt.params.to_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.params.to_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_params_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig::desk();
        let ckpt = Checkpoint {
            params: ModelParams::init(&config, 1).unwrap(),
            config,
            seed: 1,
            epoch: 0,
        };
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Truncated { .. })));
    }
}
