use std::fs;

use mmvenc::data::{generate_synthetic, load_dataset, noise_ceiling, save_dataset, Dataset, SynthSpec};
use mmvenc::eval::median;
use mmvenc::objective::pearson_columns;
use mmvenc::Error;

fn spec(n: usize) -> SynthSpec {
    SynthSpec {
        n_samples: n,
        voxels_lh: 12,
        voxels_rh: 10,
        image_height: 8,
        image_width: 8,
        ..SynthSpec::default()
    }
}

fn saved(d: &Dataset) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), d).unwrap();
    dir
}

#[test]
fn container_round_trips_bit_exactly() {
    let d = generate_synthetic(&spec(30)).unwrap();
    let dir = saved(&d);
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, d);
    let again = tempfile::tempdir().unwrap();
    save_dataset(again.path(), &back).unwrap();
    for f in ["manifest.json", "captions.json", "images.bin", "voxels_lh.bin", "voxels_rh.bin", "groundtruth.bin"] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn truncated_array_is_reported() {
    let d = generate_synthetic(&spec(10)).unwrap();
    let dir = saved(&d);
    let p = dir.path().join("voxels_lh.bin");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Truncated { .. })));
}

#[test]
fn oversized_array_disagrees_with_manifest() {
    let d = generate_synthetic(&spec(10)).unwrap();
    let dir = saved(&d);
    let p = dir.path().join("images.bin");
    let mut bytes = fs::read(&p).unwrap();
    // one extra value per stimulus row
    bytes.extend_from_slice(&[0; 10 * 4]);
    fs::write(&p, bytes).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(Error::ManifestDisagreement { .. })
    ));
}

#[test]
fn unknown_version_is_rejected() {
    let d = generate_synthetic(&spec(10)).unwrap();
    let dir = saved(&d);
    let p = dir.path().join("manifest.json");
    let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 99");
    fs::write(&p, text).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(Error::Version { found: 99, .. })
    ));
}

#[test]
fn missing_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dataset(&dir.path().join("absent")),
        Err(Error::Io { .. })
    ));
}

/// Median over voxels of the absolute correlation between a voxel and its
/// caption-driven component `latents_txt · mixing_txt`.
fn text_correlation(d: &Dataset) -> f64 {
    let gt = d.ground_truth.as_ref().unwrap();
    let (n, v, kt) = (d.len(), d.voxel_count(), gt.k_txt);
    let r: Vec<f64> = (0..v)
        .map(|vox| {
            let text: Vec<f64> = (0..n)
                .map(|i| {
                    (0..kt)
                        .map(|k| gt.latents_txt[i * kt + k] as f64 * gt.mixing_txt[k * v + vox] as f64)
                        .sum()
                })
                .collect();
            let col: Vec<f64> = (0..n).map(|i| d.targets(i)[vox] as f64).collect();
            pearson_columns(&text, &col, n, 1).unwrap()[0].abs()
        })
        .collect();
    median(&r)
}

#[test]
fn zero_text_dependence_leaves_voxels_independent_of_captions() {
    let mut s = spec(1000);
    s.text_dependence_fraction = 0.0;
    let independent = text_correlation(&generate_synthetic(&s).unwrap());
    assert!(independent < 0.1, "{independent}");
    s.text_dependence_fraction = 0.5;
    let dependent = text_correlation(&generate_synthetic(&s).unwrap());
    assert!(dependent > 0.4, "{dependent}");
}

#[test]
fn unit_noise_ceiling_is_attenuated_by_root_two() {
    let mut s = spec(600);
    s.noise_sigma = 1.0;
    let c = median(&noise_ceiling(&generate_synthetic(&s).unwrap(), None).unwrap());
    assert!((c - 0.5f64.sqrt()).abs() < 0.05, "{c}");
}

#[test]
fn overwhelming_noise_drives_ceiling_to_zero() {
    let mut s = spec(600);
    s.noise_sigma = 1e4;
    let c = median(&noise_ceiling(&generate_synthetic(&s).unwrap(), None).unwrap());
    assert!(c.abs() < 0.1, "{c}");
}

/// Solves `A x = b` for a small dense system by Gaussian elimination with
/// partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

#[test]
fn noiseless_voxels_are_linear_in_the_latents() {
    let mut s = spec(200);
    s.noise_sigma = 0.0;
    let d = generate_synthetic(&s).unwrap();
    let gt = d.ground_truth.as_ref().unwrap();
    let (n, v) = (d.len(), d.voxel_count());
    let design: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = vec![1.0];
            row.extend(gt.latents_img[i * gt.k_img..(i + 1) * gt.k_img].iter().map(|&x| x as f64));
            row.extend(gt.latents_txt[i * gt.k_txt..(i + 1) * gt.k_txt].iter().map(|&x| x as f64));
            row
        })
        .collect();
    let p = design[0].len();
    let mut xtx = vec![vec![0.0; p]; p];
    for row in &design {
        for a in 0..p {
            for b in 0..p {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    let mut fitted = vec![0.0; n * v];
    let mut observed = vec![0.0; n * v];
    for vox in 0..v {
        let y: Vec<f64> = (0..n).map(|i| d.targets(i)[vox] as f64).collect();
        let xty: Vec<f64> = (0..p)
            .map(|a| design.iter().zip(&y).map(|(r, yi)| r[a] * yi).sum())
            .collect();
        let beta = solve(xtx.clone(), xty);
        for i in 0..n {
            fitted[i * v + vox] = design[i].iter().zip(&beta).map(|(x, b)| x * b).sum();
            observed[i * v + vox] = y[i];
        }
    }
    let r = pearson_columns(&observed, &fitted, n, v).unwrap();
    assert!(r.iter().all(|&x| x > 1.0 - 1e-5), "{r:?}");
}
