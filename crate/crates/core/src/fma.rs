//! Decoder-side feature max aggregation.
//!
//! Low-resolution features are copied to every high-resolution point from its
//! nearest low-resolution point, then each high-resolution point pools the
//! copied features of its own neighbors before fusing with the skip features.
//! Pooling over neighbors recovers low-resolution features that no
//! high-resolution point picked as its nearest source.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Activation, Bound, MlpParams, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::neighbors::{knn, NeighborTable, Projection, SpatialIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
    /// Skip the neighbor gather; fuse the upsampled features directly.
    None,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Mean => "mean",
            PoolMode::None => "none",
        })
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max" => Ok(PoolMode::Max),
            "mean" => Ok(PoolMode::Mean),
            "none" => Ok(PoolMode::None),
            other => Err(Error::Config(format!("unknown fma_pool {other:?}"))),
        }
    }
}

/// Connects a high-resolution level to the next lower one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelLink {
    /// Nearest low-resolution point of every high-resolution point.
    pub up_map: Vec<u32>,
    /// Full 3D neighbor table over the high-resolution positions.
    pub high_table: NeighborTable,
}

pub fn build_level_link(
    high: &[[f64; 3]],
    low: &[[f64; 3]],
    k: usize,
) -> Result<LevelLink> {
    if high.is_empty() || low.is_empty() {
        return Err(Error::Empty("level link needs two nonempty clouds"));
    }
    let low_index = SpatialIndex::build(low, Projection::Full3D)?;
    let up_map = knn(&low_index, high, 1)?.indices;
    let high_index = SpatialIndex::build(high, Projection::Full3D)?;
    let high_table = knn(&high_index, high, k)?;
    Ok(LevelLink { up_map, high_table })
}

/// `out[j] = low[up_map[j]]`.
pub fn upsample_nearest<T: Real>(tape: &Tape<T>, low: &Var<T>, up_map: &[u32]) -> Result<Var<T>> {
    tape.gather(low, up_map, &[up_map.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FmaParams {
    /// `d_low + d_skip -> d_skip`.
    pub fuse: MlpParams,
}

impl FmaParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore<impl Real>,
        name: &str,
        d_low: usize,
        d_skip: usize,
        rng: &mut R,
    ) -> Self {
        FmaParams {
            fuse: store.add_mlp(&format!("{name}.fuse"), d_low + d_skip, d_skip, Activation::LeakyRelu, rng),
        }
    }
}

/// Upsample, gather over high-resolution neighbors, pool, fuse with the skip
/// features and add them back.
pub fn fma_forward<T: Real>(
    tape: &Tape<T>,
    decoded_low: &Var<T>,
    encoded_high: &Var<T>,
    link: &LevelLink,
    params: &FmaParams,
    pool: PoolMode,
    p: &Bound<T>,
) -> Result<Var<T>> {
    let n_high = link.up_map.len();
    if encoded_high.shape().len() != 2 || encoded_high.shape()[0] != n_high {
        return Err(Error::Shape(format!(
            "skip features {:?} do not match {n_high} high-resolution points",
            encoded_high.shape()
        )));
    }
    if link.high_table.rows() != n_high {
        return Err(Error::Shape(format!(
            "high-resolution table has {} rows for {n_high} points",
            link.high_table.rows()
        )));
    }
    let up = upsample_nearest(tape, decoded_low, &link.up_map)?;
    let pooled = match pool {
        PoolMode::None => up,
        PoolMode::Max | PoolMode::Mean => {
            let gathered = tape.gather(&up, &link.high_table.indices, &[n_high, link.high_table.k])?;
            if pool == PoolMode::Max {
                tape.reduce_max_neighbor(&gathered)?
            } else {
                tape.reduce_mean_neighbor(&gathered)?
            }
        }
    };
    let cat = tape.concat(&pooled, encoded_high)?;
    let fused = params.fuse.forward(tape, p, &cat)?;
    tape.add(&fused, encoded_high)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..2.0)])
            .collect()
    }

    #[test]
    fn identity_link_and_single_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let high = cloud(&mut rng, 40);
        let link = build_level_link(&high, &high, 4).unwrap();
        assert_eq!(link.up_map, (0..40).collect::<Vec<u32>>());
        let one = build_level_link(&high, &high[..1], 4).unwrap();
        assert!(one.up_map.iter().all(|&i| i == 0));

        let tape = Tape::<f64>::inference();
        let low = Var::constant(Tensor::from_f64(vec![1, 2], &[3.0, -1.0]).unwrap());
        let up = upsample_nearest(&tape, &low, &one.up_map).unwrap();
        assert_eq!(up.shape(), &[40, 2]);
        assert!(up.data().chunks(2).all(|r| r == [3.0, -1.0]));
    }

    #[test]
    fn up_map_matches_exhaustive_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let high = cloud(&mut rng, 300);
        let low: Vec<[f64; 3]> = high.iter().step_by(4).copied().collect();
        let link = build_level_link(&high, &low, 3).unwrap();
        for (j, q) in high.iter().enumerate() {
            let best = (0..low.len())
                .min_by(|&a, &b| {
                    let da: f64 = (0..3).map(|c| (q[c] - low[a][c]).powi(2)).sum();
                    let db: f64 = (0..3).map(|c| (q[c] - low[b][c]).powi(2)).sum();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .unwrap();
            assert_eq!(link.up_map[j] as usize, best);
        }
    }

    #[test]
    fn pool_modes_collapse_for_self_only_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let high = cloud(&mut rng, 12);
        let low: Vec<[f64; 3]> = high[..4].to_vec();
        let link = build_level_link(&high, &low, 1).unwrap();
        let tape = Tape::<f64>::inference();
        let dec = Var::constant(Tensor::from_f64(vec![4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let up = upsample_nearest(&tape, &dec, &link.up_map).unwrap();
        let g = tape.gather(&up, &link.high_table.indices, &[12, 1]).unwrap();
        assert_eq!(tape.reduce_max_neighbor(&g).unwrap().data(), up.data());
        assert_eq!(tape.reduce_mean_neighbor(&g).unwrap().data(), up.data());
    }

    #[test]
    fn pool_mode_parsing() {
        assert_eq!("max".parse::<PoolMode>().unwrap(), PoolMode::Max);
        assert_eq!("none".parse::<PoolMode>().unwrap(), PoolMode::None);
        assert!("avg".parse::<PoolMode>().is_err());
    }

    #[test]
    fn zero_fusion_weights_pass_skip_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let high = cloud(&mut rng, 30);
        let low: Vec<[f64; 3]> = high.iter().step_by(3).copied().collect();
        let link = build_level_link(&high, &low, 5).unwrap();
        let mut store = ParamStore::<f64>::new();
        let params = FmaParams::init(&mut store, "fma", 4, 3, &mut rng);
        store.get_mut(params.fuse.weight).data.iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let dec = Var::constant(Tensor::new(vec![10, 4], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let enc = Var::constant(Tensor::new(vec![30, 3], (0..90).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        for pool in [PoolMode::Max, PoolMode::Mean, PoolMode::None] {
            let out = fma_forward(&tape, &dec, &enc, &link, &params, pool, &p).unwrap();
            assert_eq!(out.data(), enc.data());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let high = cloud(&mut rng, 8);
        let link = build_level_link(&high, &high[..2], 3).unwrap();
        let mut store = ParamStore::<f64>::new();
        let params = FmaParams::init(&mut store, "fma", 1, 1, &mut rng);
        let tape = Tape::inference();
        let p = Bound::new(&tape, &store);
        let dec = Var::constant(Tensor::zeros(vec![2, 1]));
        let enc = Var::constant(Tensor::zeros(vec![7, 1]));
        assert!(fma_forward(&tape, &dec, &enc, &link, &params, PoolMode::Max, &p).is_err());
    }
}
