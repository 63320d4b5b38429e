//! Relative point position encoding, attention pooling, and the two-round
//! local split attention pooling block.
//!
//! Round one attends over the `s1` nearest neighbors of every point; round two
//! attends over every `s2`-th neighbor of the same sorted table, starting from
//! the features produced by round one. Both rounds recompute the position
//! encoding for their own neighbor subset and carry independent weights.

use rand::Rng;

use crate::autodiff::{Activation, Bound, MlpParams, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::neighbors::{split_first, split_stride, NeighborTable, SplitSpec};
use crate::work::WorkCounter;

/// Width of the raw encoding: center (3), neighbor (3), difference (3), distance (1).
pub const RPPE_RAW_DIM: usize = 10;

/// Raw per-(point, neighbor) geometry, `[N, k', 10]`.
pub fn rppe_raw<T: Real>(positions: &[[f64; 3]], table: &NeighborTable) -> Result<Tensor<T>> {
    let n = table.rows();
    if n != positions.len() {
        return Err(Error::Shape(format!(
            "neighbor table has {n} rows for {} points",
            positions.len()
        )));
    }
    let k = table.k;
    let mut data = Vec::with_capacity(n * k * RPPE_RAW_DIM);
    for i in 0..n {
        let p = positions[i];
        for &j in table.row(i) {
            let q = *positions.get(j as usize).ok_or(Error::IndexOutOfRange {
                index: j as usize,
                len: positions.len(),
            })?;
            let diff = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
            for v in p.iter().chain(&q).chain(&diff).chain(std::iter::once(&dist)) {
                data.push(T::of(*v));
            }
        }
    }
    Tensor::new(vec![n, k, RPPE_RAW_DIM], data)
}

/// Encodes neighbor geometry through a shared MLP: `[N, k', d_pe]`.
pub fn rppe<T: Real>(
    tape: &Tape<T>,
    positions: &[[f64; 3]],
    table: &NeighborTable,
    mlp: &MlpParams,
    p: &Bound<T>,
) -> Result<Var<T>> {
    let raw = Var::constant(rppe_raw(positions, table)?);
    mlp.forward(tape, p, &raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    /// Produces per-slot, per-channel attention logits.
    pub score: MlpParams,
    pub value: MlpParams,
    pub out: MlpParams,
    /// Projection for the residual when input and output widths differ.
    pub shortcut: Option<MlpParams>,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore<impl Real>,
        name: &str,
        d_feat: usize,
        d_con: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        AttentionParams {
            score: store.add_mlp(&format!("{name}.score"), d_con, d_con, Activation::None, rng),
            value: store.add_mlp(&format!("{name}.value"), d_con, d_con, Activation::LeakyRelu, rng),
            out: store.add_mlp(&format!("{name}.out"), d_con, d_out, Activation::LeakyRelu, rng),
            shortcut: (d_feat != d_out).then(|| {
                store.add_mlp(&format!("{name}.shortcut"), d_feat, d_out, Activation::None, rng)
            }),
        }
    }

    /// Closed-form work for pooling `n` points over `m` slots each.
    pub fn work(&self, n: usize, m: usize) -> WorkCounter {
        let (n, m) = (n as u64, m as u64);
        let per_slot = (self.score.d_in * self.score.d_out + self.value.d_in * self.value.d_out) as u64;
        let per_point = (self.out.d_in * self.out.d_out) as u64
            + self.shortcut.map_or(0, |s| (s.d_in * s.d_out) as u64);
        WorkCounter {
            neighbor_slots: n * m,
            mlp_macs: n * m * per_slot + n * per_point,
            gathers: 0,
        }
    }
}

/// Softmax-weighted pooling of neighbor slots with a residual connection.
///
/// `features` is `[N, d]`, `con` is `[N, m, d_con]`; returns `[N, d_out]`.
pub fn attention_pool<T: Real>(
    tape: &Tape<T>,
    features: &Var<T>,
    con: &Var<T>,
    params: &AttentionParams,
    p: &Bound<T>,
) -> Result<Var<T>> {
    let (n, m) = match con.shape() {
        [n, m, _] if *m >= 1 => (*n, *m),
        s => return Err(Error::Shape(format!("attention input must be [N, m>=1, d], got {s:?}"))),
    };
    if features.shape().len() != 2 || features.shape()[0] != n {
        return Err(Error::Shape(format!(
            "attention: features {:?} vs neighbors {:?}",
            features.shape(),
            con.shape()
        )));
    }
    tape.count_slots((n * m) as u64);
    let pooled = {
        let scores = params.score.forward(tape, p, con)?;
        let weights = tape.softmax_neighbor_axis(&scores)?;
        drop(scores);
        let values = params.value.forward(tape, p, con)?;
        let weighted = tape.mul(&weights, &values)?;
        drop((weights, values));
        tape.reduce_sum_neighbor(&weighted)?
    };
    let out = params.out.forward(tape, p, &pooled)?;
    let shortcut = match &params.shortcut {
        Some(s) => s.forward(tape, p, features)?,
        None => features.clone(),
    };
    tape.add(&out, &shortcut)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LsapRoundParams {
    pub rppe: MlpParams,
    pub attn: AttentionParams,
}

impl LsapRoundParams {
    /// Encoding width equals the gathered feature width; `d_con = 2 * d_feat`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore<impl Real>,
        name: &str,
        d_feat: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        LsapRoundParams {
            rppe: store.add_mlp(
                &format!("{name}.rppe"),
                RPPE_RAW_DIM,
                d_feat,
                Activation::LeakyRelu,
                rng,
            ),
            attn: AttentionParams::init(store, &format!("{name}.attn"), d_feat, 2 * d_feat, d_out, rng),
        }
    }

    pub fn d_feat(&self) -> usize {
        self.attn.shortcut.map_or(self.attn.out.d_out, |s| s.d_in)
    }

    pub fn d_out(&self) -> usize {
        self.attn.out.d_out
    }

    pub fn work(&self, n: usize, m: usize) -> WorkCounter {
        let rppe = WorkCounter {
            mlp_macs: (n * m * self.rppe.d_in * self.rppe.d_out) as u64,
            gathers: (n * m) as u64,
            ..Default::default()
        };
        rppe + self.attn.work(n, m)
    }
}

/// One gather-encode-concat-pool round over a fixed neighbor table.
pub fn attention_round<T: Real>(
    tape: &Tape<T>,
    features: &Var<T>,
    positions: &[[f64; 3]],
    table: &NeighborTable,
    params: &LsapRoundParams,
    p: &Bound<T>,
) -> Result<Var<T>> {
    let n = positions.len();
    if features.shape() != [n, params.d_feat()] {
        return Err(Error::Shape(format!(
            "round expects features [{n}, {}], got {:?}",
            params.d_feat(),
            features.shape()
        )));
    }
    let neighbors = tape.gather(features, &table.indices, &[n, table.k])?;
    let encoding = rppe(tape, positions, table, &params.rppe, p)?;
    let con = tape.concat(&neighbors, &encoding)?;
    drop((neighbors, encoding));
    attention_pool(tape, features, &con, &params.attn, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LsapParams {
    pub round1: LsapRoundParams,
    pub round2: LsapRoundParams,
    pub split: SplitSpec,
}

impl LsapParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore<impl Real>,
        name: &str,
        d_in: usize,
        d_out: usize,
        split: SplitSpec,
        rng: &mut R,
    ) -> Self {
        LsapParams {
            round1: LsapRoundParams::init(store, &format!("{name}.r1"), d_in, d_out, rng),
            round2: LsapRoundParams::init(store, &format!("{name}.r2"), d_out, d_out, rng),
            split,
        }
    }

    pub fn d_in(&self) -> usize {
        self.round1.d_feat()
    }

    pub fn d_out(&self) -> usize {
        self.round2.d_out()
    }

    /// Closed-form work of one block over `n` points with `k`-neighbor tables.
    pub fn work(&self, n: usize, k: usize, split: SplitSpec) -> WorkCounter {
        let (m1, m2) = split.round_slots(k);
        self.round1.work(n, m1) + self.round2.work(n, m2)
    }
}

/// Two-round local split attention pooling over a sorted `k`-neighbor table.
pub fn lsap_block<T: Real>(
    tape: &Tape<T>,
    features: &Var<T>,
    positions: &[[f64; 3]],
    table: &NeighborTable,
    split: SplitSpec,
    params: &LsapParams,
    p: &Bound<T>,
) -> Result<Var<T>> {
    split.check(table.k)?;
    let first = split_first(table, split.s1)?;
    let att1 = attention_round(tape, features, positions, &first, &params.round1, p)?;
    drop(first);
    let second = split_stride(table, split.s2)?;
    attention_round(tape, &att1, positions, &second, &params.round2, p)
}
