use rand::Rng;

use crate::autodiff::{Activation, Bound, MlpParams, ParamStore, Real, Tape, Tensor, Var};
use crate::cloud_io::PointCloud;
use crate::error::{Error, Result};
use crate::fma::{fma_forward, FmaParams, LevelLink};
use crate::neighbors::{knn, Projection, SpatialIndex};
use crate::pae::{build_branch_tables, pae_forward, PaeConfig, PaeParams};

use super::config::NetworkConfig;
use super::sampling::random_downsample;

/// Network input: per-point features and the positions used for neighbor
/// search and position encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub features: Tensor<f64>,
    pub positions: Vec<[f64; 3]>,
}

impl NetInput {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Rows `order[0], order[1], ...` of the input.
    pub fn permuted(&self, order: &[usize]) -> NetInput {
        let c = self.features.channels();
        let mut data = Vec::with_capacity(order.len() * c);
        for &i in order {
            data.extend_from_slice(&self.features.data[i * c..(i + 1) * c]);
        }
        NetInput {
            features: Tensor {
                shape: vec![order.len(), c],
                data,
            },
            positions: order.iter().map(|&i| self.positions[i]).collect(),
        }
    }
}

/// Centers a block horizontally on its mean and vertically on its lowest
/// point; the centered xyz are the first three feature channels, followed by
/// the colors.
pub fn prepare_inputs(block: &PointCloud, cfg: &NetworkConfig) -> Result<NetInput> {
    if block.is_empty() {
        return Err(Error::Empty("block has no points"));
    }
    if block.channels != cfg.color_channels {
        return Err(Error::Shape(format!(
            "block has {} color channels, network expects {}",
            block.channels, cfg.color_channels
        )));
    }
    let pos = block.positions_f64();
    let n = pos.len() as f64;
    let cx = pos.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pos.iter().map(|p| p[1]).sum::<f64>() / n;
    let z0 = pos.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    let positions: Vec<[f64; 3]> = pos.iter().map(|p| [p[0] - cx, p[1] - cy, p[2] - z0]).collect();
    let c = cfg.input_channels();
    let mut data = Vec::with_capacity(positions.len() * c);
    for (i, p) in positions.iter().enumerate() {
        data.extend_from_slice(p);
        data.extend(block.color(i).iter().map(|&v| v as f64));
    }
    Ok(NetInput {
        features: Tensor::new(vec![positions.len(), c], data)?,
        positions,
    })
}

/// Parameter handles of every layer; independent of the scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub stem: MlpParams,
    pub encoders: Vec<(PaeConfig, PaeParams)>,
    pub mid: MlpParams,
    /// `decoders[i]` restores level `i` from level `i + 1`.
    pub decoders: Vec<FmaParams>,
    pub head1: MlpParams,
    pub head2: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsNet<T> {
    pub cfg: NetworkConfig,
    pub layout: Layout,
    pub store: ParamStore<T>,
}

impl<T: Real> LsNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let stem = store.add_mlp("stem", cfg.input_channels(), cfg.stem_width, Activation::LeakyRelu, rng);
        let mut encoders = Vec::with_capacity(cfg.levels.len());
        let mut d_in = cfg.stem_width;
        for (i, level) in cfg.levels.iter().enumerate() {
            let pc = PaeConfig {
                d_in,
                d_out: level.d_out,
                branches: cfg.branches.clone(),
                k: level.k,
                split: cfg.split_for(level.k),
            };
            let pp = PaeParams::init(&mut store, &format!("enc{i}"), &pc, rng)?;
            d_in = level.d_out;
            encoders.push((pc, pp));
        }
        let mid = store.add_mlp("mid", d_in, d_in, Activation::LeakyRelu, rng);
        let mut decoders = vec![None; cfg.levels.len()];
        let mut d_low = d_in;
        for i in (0..cfg.levels.len()).rev() {
            let d_skip = cfg.levels[i].d_out;
            decoders[i] = Some(FmaParams::init(&mut store, &format!("dec{i}"), d_low, d_skip, rng));
            d_low = d_skip;
        }
        let head1 = store.add_mlp("head1", d_low, cfg.head_width, Activation::LeakyRelu, rng);
        let head2 = store.add_mlp("head2", cfg.head_width, cfg.num_classes, Activation::None, rng);
        Ok(LsNet {
            layout: Layout {
                stem,
                encoders,
                mid,
                decoders: decoders.into_iter().map(|d| d.expect("every level")).collect(),
                head1,
                head2,
            },
            cfg,
            store,
        })
    }

    pub fn cast<U: Real>(&self) -> LsNet<U> {
        LsNet {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            store: self.store.cast(),
        }
    }

    /// `N x num_classes` logits. `rng` drives the per-level random
    /// downsampling.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        input: &NetInput,
        rng: &mut R,
    ) -> Result<Var<T>> {
        let n = input.len();
        if input.features.shape != [n, self.cfg.input_channels()] {
            return Err(Error::Shape(format!(
                "input features {:?}, expected [{n}, {}]",
                input.features.shape,
                self.cfg.input_channels()
            )));
        }
        let x = Var::constant(input.features.cast());
        let mut x = self.layout.stem.forward(tape, p, &x)?;
        let mut positions = input.positions.clone();
        let mut skips = Vec::with_capacity(self.cfg.levels.len());
        let mut links: Vec<LevelLink> = Vec::with_capacity(self.cfg.levels.len());
        for (pc, pp) in &self.layout.encoders {
            let level = self.cfg.levels[skips.len()].clone();
            let tables = build_branch_tables(&positions, &pc.branches, pc.k)?;
            let enc = pae_forward(tape, &x, &positions, &tables, pc, pp, p)?;
            let (down, low_pos, _) = random_downsample(tape, &enc, &positions, level.ratio, rng)?;
            // The decoder pools over a full 3D table of the high level; reuse
            // the branch table when it is the same one.
            let high_table = match tables.get(&Projection::Full3D) {
                Some(t) => t.clone(),
                None => knn(&SpatialIndex::build(&positions, Projection::Full3D)?, &positions, level.k)?,
            };
            let up_map = knn(&SpatialIndex::build(&low_pos, Projection::Full3D)?, &positions, 1)?.indices;
            links.push(LevelLink { up_map, high_table });
            skips.push(enc);
            x = down;
            positions = low_pos;
        }
        let mut d = self.layout.mid.forward(tape, p, &x)?;
        for i in (0..skips.len()).rev() {
            d = fma_forward(
                tape,
                &d,
                &skips[i],
                &links[i],
                &self.layout.decoders[i],
                self.cfg.fma_pool,
                p,
            )?;
        }
        let h = self.layout.head1.forward(tape, p, &d)?;
        self.layout.head2.forward(tape, p, &h)
    }
}

/// Row-wise argmax, ties resolved to the smallest class id.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<u32> {
    let c = logits.channels();
    logits
        .data
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fma::PoolMode;
    use crate::lsnet::config::LevelConfig;
    use crate::neighbors::default_split;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(levels: &[(usize, usize, usize)]) -> NetworkConfig {
        NetworkConfig {
            num_classes: 3,
            levels: levels
                .iter()
                .map(|&(d_out, k, ratio)| LevelConfig { d_out, k, ratio })
                .collect(),
            stem_width: 4,
            head_width: 8,
            color_channels: 1,
            ..NetworkConfig::default()
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> NetInput {
        let cloud = PointCloud::new(
            (0..n)
                .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..2.0)])
                .collect(),
        )
        .with_colors((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), 1);
        prepare_inputs(&cloud, &small_cfg(&[(4, 4, 1)])).unwrap()
    }

    #[test]
    fn logits_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for levels in [vec![(4, 4, 1)], vec![(4, 8, 4), (8, 4, 2)], vec![(4, 9, 2), (6, 4, 2), (8, 4, 2)]] {
            let net = LsNet::<f64>::new(small_cfg(&levels), &mut rng).unwrap();
            let input = random_input(&mut rng, 96);
            let tape = Tape::inference();
            let p = Bound::new(&tape, &net.store);
            let y = net.forward(&tape, &p, &input, &mut rng).unwrap();
            assert_eq!(y.shape(), &[96, 3]);
        }
    }

    #[test]
    fn rejects_bad_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = LsNet::<f64>::new(small_cfg(&[(4, 4, 1)]), &mut rng).unwrap();
        let mut input = random_input(&mut rng, 10);
        input.features = Tensor::zeros(vec![10, 3]);
        let tape = Tape::inference();
        let p = Bound::new(&tape, &net.store);
        assert!(net.forward(&tape, &p, &input, &mut rng).is_err());
    }

    #[test]
    fn single_level_is_stem_pae_fma_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = small_cfg(&[(4, 6, 1)]);
        cfg.fma_pool = PoolMode::None;
        let net = LsNet::<f64>::new(cfg, &mut rng).unwrap();
        let input = random_input(&mut rng, 40);
        let tape = Tape::inference();
        let p = Bound::new(&tape, &net.store);
        let got = net.forward(&tape, &p, &input, &mut rng).unwrap();

        let l = &net.layout;
        let (pc, pp) = &l.encoders[0];
        assert_eq!(pc.split, default_split(6));
        let x = Var::constant(input.features.clone());
        let s = l.stem.forward(&tape, &p, &x).unwrap();
        let tables = build_branch_tables(&input.positions, &pc.branches, 6).unwrap();
        let enc = pae_forward(&tape, &s, &input.positions, &tables, pc, pp, &p).unwrap();
        let mid = l.mid.forward(&tape, &p, &enc).unwrap();
        let cat = tape.concat(&mid, &enc).unwrap();
        let fused = l.decoders[0].fuse.forward(&tape, &p, &cat).unwrap();
        let dec = tape.add(&fused, &enc).unwrap();
        let h = l.head1.forward(&tape, &p, &dec).unwrap();
        let want = l.head2.forward(&tape, &p, &h).unwrap();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = small_cfg(&[(4, 5, 1), (6, 4, 1)]);
        cfg.branches = vec![Projection::XY, Projection::Full3D];
        let net = LsNet::<f64>::new(cfg, &mut rng).unwrap();
        let input = random_input(&mut rng, 60);
        let mut order: Vec<usize> = (0..60).collect();
        order.shuffle(&mut rng);
        let tape = Tape::inference();
        let p = Bound::new(&tape, &net.store);
        let a = net.forward(&tape, &p, &input, &mut rng).unwrap();
        let b = net.forward(&tape, &p, &input.permuted(&order), &mut rng).unwrap();
        for (row, &src) in order.iter().enumerate() {
            for c in 0..3 {
                let (x, y) = (a.data()[src * 3 + c], b.data()[row * 3 + c]);
                assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn prepared_features_are_centered() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 5.0], [3.0, 4.0, 6.0]]).with_colors(vec![0.5, 0.25], 1);
        let input = prepare_inputs(&cloud, &small_cfg(&[(4, 4, 1)])).unwrap();
        assert_eq!(input.features.data, vec![-1.0, -1.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.25]);
        assert!(prepare_inputs(&PointCloud::new(vec![[0.0; 3]]), &small_cfg(&[(4, 4, 1)])).is_err());
    }

    #[test]
    fn argmax_ties_pick_first() {
        let t = Tensor::<f64>::from_f64(vec![2, 3], &[1.0, 3.0, 3.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
