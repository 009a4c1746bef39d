//! On-disk dataset directory:
//!
//! ```text
//! manifest.json      version, dims, ids, atlas, vocabulary
//! captions.json      candidate captions and selection per stimulus
//! images.bin         [n × C·H·W] f32 LE
//! voxels_lh.bin      [n × voxel_count_lh] f32 LE
//! voxels_rh.bin      [n × voxel_count_rh] f32 LE
//! groundtruth.bin    synthetic datasets only
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionSet, Dataset, GroundTruth, RoiAtlas};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::io::write_f32_le;

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "mmvenc-dataset";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    subject_id: String,
    n_samples: usize,
    image_shape: [usize; 3],
    voxel_count_lh: usize,
    voxel_count_rh: usize,
    stimulus_ids: Vec<String>,
    repeat_counts: Vec<u32>,
    vocab: Vocab,
    atlas: RoiAtlas,
    #[serde(default)]
    ground_truth: Option<GroundTruthMeta>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthMeta {
    k_img: usize,
    k_txt: usize,
    noise_sigma: f64,
    text_dependence_fraction: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.into(),
        msg: e.to_string(),
    })?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    d.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: DATASET_VERSION,
        subject_id: d.subject_id.clone(),
        n_samples: d.len(),
        image_shape: d.image_shape,
        voxel_count_lh: d.voxel_count_lh,
        voxel_count_rh: d.voxel_count_rh,
        stimulus_ids: d.stimulus_ids.clone(),
        repeat_counts: d.repeat_counts.clone(),
        vocab: d.vocab.clone(),
        atlas: d.atlas.clone(),
        ground_truth: d.ground_truth.as_ref().map(|g| GroundTruthMeta {
            k_img: g.k_img,
            k_txt: g.k_txt,
            noise_sigma: g.noise_sigma,
            text_dependence_fraction: g.text_dependence_fraction,
        }),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("captions.json"), &d.captions)?;
    write_f32_le(&dir.join("images.bin"), &d.images)?;
    write_f32_le(&dir.join("voxels_lh.bin"), &d.voxels_lh)?;
    write_f32_le(&dir.join("voxels_rh.bin"), &d.voxels_rh)?;
    let gt_path = dir.join("groundtruth.bin");
    match &d.ground_truth {
        Some(g) => {
            let flat: Vec<f32> = [
                &g.latents_img,
                &g.latents_txt,
                &g.mixing_img,
                &g.mixing_txt,
                &g.signal,
            ]
            .into_iter()
            .flatten()
            .copied()
            .collect();
            write_f32_le(&gt_path, &flat)?;
        }
        None if gt_path.exists() => fs::remove_file(&gt_path).map_err(|e| Error::io(&gt_path, e))?,
        None => {}
    }
    Ok(())
}

/// Reads a `[rows × width]` array. A file holding whole rows of a different
/// width disagrees with the manifest; anything shorter is truncated.
fn read_matrix(path: &Path, rows: usize, width: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let expected = rows * width * 4;
    if bytes.len() != expected {
        let floats = bytes.len() / 4;
        if bytes.len() % 4 == 0 && rows > 0 && floats % rows == 0 && floats > 0 {
            return Err(Error::ManifestDisagreement {
                what: format!("{file} row width"),
                manifest: width,
                actual: floats / rows,
            });
        }
        return Err(Error::Truncated {
            file,
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let parse_err = |e: serde_json::Error| Error::Parse {
        path: mpath.clone(),
        msg: e.to_string(),
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(parse_err)?;
    if m.format != FORMAT {
        return Err(Error::Parse {
            path: mpath,
            msg: format!("unexpected format `{}`", m.format),
        });
    }
    let n = m.n_samples;
    if m.stimulus_ids.len() != n {
        return Err(Error::ManifestDisagreement {
            what: "stimulus_ids".into(),
            manifest: n,
            actual: m.stimulus_ids.len(),
        });
    }
    let cpath = dir.join("captions.json");
    let ctext = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
    let captions: Vec<CaptionSet> = serde_json::from_str(&ctext).map_err(|e| Error::Parse {
        path: cpath,
        msg: e.to_string(),
    })?;
    let image_numel: usize = m.image_shape.iter().product();
    let images = read_matrix(&dir.join("images.bin"), n, image_numel)?;
    let voxels_lh = read_matrix(&dir.join("voxels_lh.bin"), n, m.voxel_count_lh)?;
    let voxels_rh = read_matrix(&dir.join("voxels_rh.bin"), n, m.voxel_count_rh)?;
    let ground_truth = match &m.ground_truth {
        Some(g) => {
            let v = m.voxel_count_lh + m.voxel_count_rh;
            let sizes = [n * g.k_img, n * g.k_txt, g.k_img * v, g.k_txt * v, n * v];
            let flat = read_matrix(&dir.join("groundtruth.bin"), 1, sizes.iter().sum())?;
            let mut parts = Vec::with_capacity(5);
            let mut off = 0;
            for s in sizes {
                parts.push(flat[off..off + s].to_vec());
                off += s;
            }
            let mut it = parts.into_iter();
            Some(GroundTruth {
                k_img: g.k_img,
                k_txt: g.k_txt,
                noise_sigma: g.noise_sigma,
                text_dependence_fraction: g.text_dependence_fraction,
                latents_img: it.next().unwrap(),
                latents_txt: it.next().unwrap(),
                mixing_img: it.next().unwrap(),
                mixing_txt: it.next().unwrap(),
                signal: it.next().unwrap(),
            })
        }
        None => None,
    };
    let d = Dataset {
        subject_id: m.subject_id,
        image_shape: m.image_shape,
        images,
        voxel_count_lh: m.voxel_count_lh,
        voxel_count_rh: m.voxel_count_rh,
        voxels_lh,
        voxels_rh,
        stimulus_ids: m.stimulus_ids,
        repeat_counts: m.repeat_counts,
        captions,
        atlas: m.atlas,
        vocab: m.vocab,
        ground_truth,
    };
    d.validate()?;
    Ok(d)
}
