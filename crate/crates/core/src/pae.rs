//! Parallel aggregation enhancement: the encoder block that runs local split
//! attention pooling on several neighbor tables (3D and axis-projected 2D) in
//! parallel, fuses the branches and adds the expanded input back.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Activation, Bound, MlpParams, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::lsap::{lsap_block, LsapParams};
use crate::neighbors::{knn, NeighborTable, Projection, SpatialIndex, SplitSpec};
use crate::work::WorkCounter;

/// One neighbor table per configured projection.
pub type BranchTables = BTreeMap<Projection, NeighborTable>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaeConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub branches: Vec<Projection>,
    pub k: usize,
    pub split: SplitSpec,
}

impl PaeConfig {
    pub fn validate(&self) -> Result<()> {
        let nb = self.branches.len();
        if nb == 0 || nb > 4 {
            return Err(Error::Config(format!("PAE needs 1 to 4 branches, got {nb}")));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if self.branches[..i].contains(b) {
                return Err(Error::Config(format!("duplicate branch {b}")));
            }
        }
        if self.d_out == 0 || self.d_out % nb != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {nb} branches",
                self.d_out
            )));
        }
        self.split.check(self.k)
    }

    pub fn branch_width(&self) -> usize {
        self.d_out / self.branches.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaeParams {
    pub expand: MlpParams,
    /// Parallel to `PaeConfig::branches`.
    pub branches: Vec<LsapParams>,
    pub fuse: MlpParams,
}

impl PaeParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore<impl Real>,
        name: &str,
        cfg: &PaeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let width = cfg.branch_width();
        let expand = store.add_mlp(&format!("{name}.expand"), cfg.d_in, cfg.d_out, Activation::LeakyRelu, rng);
        let branches = cfg
            .branches
            .iter()
            .map(|b| LsapParams::init(store, &format!("{name}.{b}"), cfg.d_out, width, cfg.split, rng))
            .collect();
        let fuse = store.add_mlp(
            &format!("{name}.fuse"),
            width * cfg.branches.len(),
            cfg.d_out,
            Activation::LeakyRelu,
            rng,
        );
        Ok(PaeParams {
            expand,
            branches,
            fuse,
        })
    }

    /// Closed-form work of one forward pass over `n` points.
    pub fn work(&self, cfg: &PaeConfig, n: usize) -> WorkCounter {
        let mac = |m: &MlpParams| (n * m.d_in * m.d_out) as u64;
        let mut w = WorkCounter {
            mlp_macs: mac(&self.expand) + mac(&self.fuse),
            ..Default::default()
        };
        for b in &self.branches {
            w += b.work(n, cfg.k, cfg.split);
        }
        w
    }
}

/// Builds one exact `k`-NN table per projection over `positions`.
pub fn build_branch_tables(
    positions: &[[f64; 3]],
    branches: &[Projection],
    k: usize,
) -> Result<BranchTables> {
    let mut tables = BranchTables::new();
    for &b in branches {
        if tables.contains_key(&b) {
            continue;
        }
        let index = SpatialIndex::build(positions, b)?;
        tables.insert(b, knn(&index, positions, k)?);
    }
    Ok(tables)
}

/// Runs each branch at `d_out / branches` channels, fuses the concatenation back
/// to `d_out` and adds the expanded input.
pub fn pae_forward<T: Real>(
    tape: &Tape<T>,
    features: &Var<T>,
    positions: &[[f64; 3]],
    tables: &BranchTables,
    cfg: &PaeConfig,
    params: &PaeParams,
    p: &Bound<T>,
) -> Result<Var<T>> {
    cfg.validate()?;
    if params.branches.len() != cfg.branches.len() {
        return Err(Error::Config(format!(
            "{} branch parameter sets for {} branches",
            params.branches.len(),
            cfg.branches.len()
        )));
    }
    let expanded = params.expand.forward(tape, p, features)?;
    let mut merged: Option<Var<T>> = None;
    for (proj, lsap) in cfg.branches.iter().zip(&params.branches) {
        let table = tables
            .get(proj)
            .ok_or_else(|| Error::Config(format!("no neighbor table for branch {proj}")))?;
        if table.rows() != positions.len() || table.k != cfg.k {
            return Err(Error::Shape(format!(
                "branch {proj} table is {} x {}, expected {} x {}",
                table.rows(),
                table.k,
                positions.len(),
                cfg.k
            )));
        }
        let out = lsap_block(tape, &expanded, positions, table, cfg.split, lsap, p)?;
        merged = Some(match merged {
            None => out,
            Some(prev) => tape.concat(&prev, &out)?,
        });
    }
    let fused = params.fuse.forward(tape, p, &merged.expect("at least one branch"))?;
    tape.add(&fused, &expanded)
}
