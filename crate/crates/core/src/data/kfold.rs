use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffles `0..n` with `seed` and cuts it into `k` folds whose sizes differ
/// by at most one (the first `n mod k` folds get the extra element). Each
/// fold is returned sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::Usage(format!(
            "k-fold split needs n >= k >= 2, got n={n}, k={k}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_into_five() {
        let f = kfold_split(10, 5, 0).unwrap();
        assert!(f.iter().all(|x| x.len() == 2));
        let mut all: Vec<_> = f.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn nsd_training_set_sizes() {
        let f = kfold_split(9841, 5, 7).unwrap();
        let sizes: Vec<_> = f.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![1969, 1968, 1968, 1968, 1968]);
    }

    #[test]
    fn seeded() {
        assert_eq!(kfold_split(30, 4, 1).unwrap(), kfold_split(30, 4, 1).unwrap());
        assert_ne!(kfold_split(30, 4, 1).unwrap(), kfold_split(30, 4, 2).unwrap());
    }

    #[test]
    fn too_few_items() {
        assert!(matches!(kfold_split(3, 5, 0), Err(Error::Usage(_))));
    }
}
