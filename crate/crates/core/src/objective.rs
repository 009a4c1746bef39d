//! Pearson correlation as both the training objective and the metric.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Added under the square root of the variance product. A constant column
/// therefore scores `R = 0` instead of NaN.
pub const PEARSON_EPS: f64 = 1e-8;

struct ColumnStats {
    g_mean: f64,
    p_mean: f64,
    cov: f64,
    g_ss: f64,
    p_ss: f64,
}

fn column_stats<T: Real>(g: &[T], p: &[T], t: usize, v: usize, col: usize) -> ColumnStats {
    let (mut gm, mut pm) = (0.0, 0.0);
    for r in 0..t {
        gm += g[r * v + col].to64();
        pm += p[r * v + col].to64();
    }
    gm /= t as f64;
    pm /= t as f64;
    // a constant column's float mean can miss its value by an ulp
    let constant = |x: &[T]| (1..t).all(|r| x[r * v + col] == x[col]);
    if constant(g) {
        gm = g[col].to64();
    }
    if constant(p) {
        pm = p[col].to64();
    }
    let (mut cov, mut gss, mut pss) = (0.0, 0.0, 0.0);
    for r in 0..t {
        let dg = g[r * v + col].to64() - gm;
        let dp = p[r * v + col].to64() - pm;
        cov += dg * dp;
        gss += dg * dg;
        pss += dp * dp;
    }
    ColumnStats {
        g_mean: gm,
        p_mean: pm,
        cov,
        g_ss: gss,
        p_ss: pss,
    }
}

/// Per-column correlation of two row-major `t × v` buffers.
pub fn pearson_columns<T: Real>(g: &[T], p: &[T], t: usize, v: usize) -> Result<Vec<f64>> {
    if t < 2 {
        return Err(Error::Usage(format!(
            "correlation needs at least 2 stimuli, got {t}"
        )));
    }
    if g.len() != t * v || p.len() != t * v {
        return Err(Error::shape("pearson", [g.len()], [p.len()]));
    }
    Ok((0..v)
        .map(|c| {
            let s = column_stats(g, p, t, v, c);
            s.cov / (s.g_ss * s.p_ss + PEARSON_EPS).sqrt()
        })
        .collect())
}

/// `∂R_v/∂P_{t,v}` for every entry, laid out like `p`.
pub(crate) fn pearson_columns_grad<T: Real>(g: &[T], p: &[T], t: usize, v: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * v];
    for c in 0..v {
        let s = column_stats(g, p, t, v, c);
        let d = (s.g_ss * s.p_ss + PEARSON_EPS).sqrt();
        let k = s.cov * s.g_ss / (d * d * d);
        for r in 0..t {
            let dg = g[r * v + c].to64() - s.g_mean;
            let dp = p[r * v + c].to64() - s.p_mean;
            out[r * v + c] = dg / d - k * dp;
        }
    }
    out
}

/// Pearson R of every voxel column between ground truth `g` and
/// predictions `p`, both `[stimuli × voxels]`.
pub fn pearson_per_voxel<T: Real>(g: &Tensor<T>, p: &Tensor<T>) -> Result<Vec<f64>> {
    if g.rank() != 2 || g.shape() != p.shape() {
        return Err(Error::shape("pearson_per_voxel", g.shape(), p.shape()));
    }
    pearson_columns(g.values(), p.values(), g.shape()[0], g.shape()[1])
}

/// `1 − mean_v R_v`; zero at perfect correlation, two at perfect
/// anticorrelation.
pub fn loss<T: Real>(g: &Tensor<T>, p: &Tensor<T>) -> Result<f64> {
    let r = pearson_per_voxel(g, p)?;
    Ok(1.0 - r.iter().sum::<f64>() / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([v.len(), 1], v).unwrap()
    }

    #[test]
    fn identical_and_reversed_columns() {
        let g = col(&[1., 2., 3.]);
        assert!((pearson_per_voxel(&g, &g).unwrap()[0] - 1.0).abs() < 1e-6);
        let r = pearson_per_voxel(&g, &col(&[3., 2., 1.])).unwrap()[0];
        assert!((r + 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_point_eight() {
        // deviations (-1.5,-.5,.5,1.5) and (-1.5,.5,-.5,1.5): cov 4, ss 5 and 5
        let r = pearson_per_voxel(&col(&[1., 2., 3., 4.]), &col(&[1., 3., 2., 4.])).unwrap()[0];
        assert!((r - 0.8).abs() < 1e-9, "{r}");
    }

    #[test]
    fn constant_column_scores_zero() {
        let r = pearson_per_voxel(&col(&[1., 2., 3.]), &col(&[4., 4., 4.])).unwrap()[0];
        assert_eq!(r, 0.0);
    }

    #[test]
    fn single_stimulus_is_a_usage_error() {
        assert!(matches!(
            pearson_per_voxel(&col(&[1.]), &col(&[1.])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn loss_bounds() {
        let g = Tensor::<f64>::from_f64([3, 2], &[1., 5., 2., 3., 3., 1.]).unwrap();
        assert!(loss(&g, &g).unwrap().abs() < 1e-9);
        let neg = Tensor::from_f64([3, 2], &[-1., -5., -2., -3., -3., -1.]).unwrap();
        assert!((loss(&g, &neg).unwrap() - 2.0).abs() < 1e-9);
    }
}
