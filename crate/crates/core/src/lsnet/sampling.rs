use rand::Rng;

use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Keeps `floor(n / ratio)` distinct points chosen by a partial Fisher-Yates
/// shuffle; `ratio = 1` keeps every point in order.
pub fn downsample_indices<R: Rng + ?Sized>(n: usize, ratio: usize, rng: &mut R) -> Result<Vec<u32>> {
    if ratio < 1 {
        return Err(Error::InvalidArgument("downsample ratio must be at least 1".into()));
    }
    let keep = n / ratio;
    if keep == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} leaves no points out of {n}"
        )));
    }
    let mut idx: Vec<u32> = (0..n as u32).collect();
    if ratio == 1 {
        return Ok(idx);
    }
    for i in 0..keep {
        let j = rng.gen_range(i as u64..n as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(keep);
    Ok(idx)
}

/// Subsamples features and positions together.
pub fn random_downsample<T: Real, R: Rng + ?Sized>(
    tape: &Tape<T>,
    features: &Var<T>,
    positions: &[[f64; 3]],
    ratio: usize,
    rng: &mut R,
) -> Result<(Var<T>, Vec<[f64; 3]>, Vec<u32>)> {
    if features.shape().first() != Some(&positions.len()) {
        return Err(Error::Shape(format!(
            "features {:?} vs {} positions",
            features.shape(),
            positions.len()
        )));
    }
    let keep = downsample_indices(positions.len(), ratio, rng)?;
    let f = tape.gather(features, &keep, &[keep.len()])?;
    let p = keep.iter().map(|&i| positions[i as usize]).collect();
    Ok((f, p, keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(downsample_indices(5, 1, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(downsample_indices(16384, 4, &mut rng).unwrap().len(), 4096);
        assert!(downsample_indices(3, 4, &mut rng).is_err());
        assert!(downsample_indices(3, 0, &mut rng).is_err());
        let mut kept = downsample_indices(100, 3, &mut rng).unwrap();
        kept.sort_unstable();
        kept.dedup();
        assert_eq!(kept.len(), 33);
    }

    #[test]
    fn matches_full_shuffle_prefix() {
        for seed in 0..20u64 {
            let n = 50 + seed as usize * 7;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut got = downsample_indices(n, 4, &mut rng).unwrap();
            // Complete forward Fisher-Yates; later swaps never touch the prefix.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<u32> = (0..n as u32).collect();
            for i in 0..n - 1 {
                let j = rng.gen_range(i as u64..n as u64) as usize;
                all.swap(i, j);
            }
            let mut want = all[..n / 4].to_vec();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }
}
