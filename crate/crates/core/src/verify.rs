//! Finite-difference gradient checks over random instances of every
//! differentiable primitive and composed block.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_many, Activation, Bound, ParamStore, Tape, Tensor, Var, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::fma::{build_level_link, fma_forward, FmaParams, PoolMode};
use crate::lsap::{lsap_block, LsapParams};
use crate::lsnet::weighted_cross_entropy;
use crate::neighbors::{default_split, knn, Projection, SpatialIndex};
use crate::pae::{build_branch_tables, pae_forward, PaeConfig, PaeParams};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    All,
    Primitives,
    Lsap,
    Pae,
    Fma,
    Loss,
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckModule::All => "all",
            CheckModule::Primitives => "primitives",
            CheckModule::Lsap => "lsap",
            CheckModule::Pae => "pae",
            CheckModule::Fma => "fma",
            CheckModule::Loss => "loss",
        })
    }
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckModule::All),
            "primitives" => Ok(CheckModule::Primitives),
            "lsap" => Ok(CheckModule::Lsap),
            "pae" => Ok(CheckModule::Pae),
            "fma" => Ok(CheckModule::Fma),
            "loss" => Ok(CheckModule::Loss),
            other => Err(Error::InvalidArgument(format!("unknown gradcheck module {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < GRADCHECK_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0)])
        .collect()
}

/// Checks `f(inputs ++ params)` where the trailing inputs are the store's
/// tensors, so parameters are perturbed alongside the data.
fn check_with_params<F>(store: &ParamStore<f64>, data: Vec<Tensor<f64>>, f: F) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>], &Bound<f64>) -> Result<Var<f64>>,
{
    let nd = data.len();
    let mut inputs = data;
    inputs.extend(store.tensors().iter().cloned());
    grad_check_many(
        |tape, vars| f(tape, &vars[..nd], &Bound::from_vars(vars[nd..].to_vec())),
        &inputs,
        DEFAULT_EPS,
    )
}

struct Acc {
    results: Vec<CheckResult>,
}

impl Acc {
    fn record(&mut self, name: &str, err: f64) {
        match self.results.iter_mut().find(|r| r.name == name) {
            Some(r) => {
                r.instances += 1;
                r.max_error = r.max_error.max(err);
            }
            None => self.results.push(CheckResult {
                name: name.to_string(),
                instances: 1,
                max_error: err,
            }),
        }
    }
}

fn primitives(acc: &mut Acc, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, m, d) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let x = random(rng, &[n, m, d]);
    let c_nmd = random(rng, &[n, m, d]);
    for (name, act) in [("linear_leaky", Activation::LeakyRelu), ("linear", Activation::None)] {
        let (w, b, c) = (random(rng, &[d, 3]), random(rng, &[3]), random(rng, &[n, m, 3]));
        let err = grad_check_many(
            |t, v| t.dot(&t.linear(&v[0], &v[1], &v[2], act)?, &c),
            &[x.clone(), w, b],
            DEFAULT_EPS,
        )?;
        acc.record(name, err);
    }
    let err = grad_check_many(|t, v| t.dot(&t.softmax_neighbor_axis(&v[0])?, &c_nmd), &[x.clone()], DEFAULT_EPS)?;
    acc.record("softmax_neighbor_axis", err);

    let c_nd = random(rng, &[n, d]);
    let reductions: [(&str, usize); 3] = [("reduce_sum", 0), ("reduce_max", 1), ("reduce_mean", 2)];
    for (name, which) in reductions {
        let err = grad_check_many(
            |t, v| {
                let r = match which {
                    0 => t.reduce_sum_neighbor(&v[0])?,
                    1 => t.reduce_max_neighbor(&v[0])?,
                    _ => t.reduce_mean_neighbor(&v[0])?,
                };
                t.dot(&r, &c_nd)
            },
            &[x.clone()],
            DEFAULT_EPS,
        )?;
        acc.record(name, err);
    }

    let src = random(rng, &[n, d]);
    let idx: Vec<u32> = (0..n * m).map(|_| rng.gen_range(0..n as u32)).collect();
    let err = grad_check_many(|t, v| t.dot(&t.gather(&v[0], &idx, &[n, m])?, &c_nmd), &[src], DEFAULT_EPS)?;
    acc.record("gather", err);

    let y = random(rng, &[n, m, 2]);
    let c_cat = random(rng, &[n, m, d + 2]);
    let err = grad_check_many(|t, v| t.dot(&t.concat(&v[0], &v[1])?, &c_cat), &[x.clone(), y], DEFAULT_EPS)?;
    acc.record("concat", err);

    let y = random(rng, &[n, m, d]);
    let err = grad_check_many(|t, v| t.dot(&t.add(&v[0], &v[1])?, &c_nmd), &[x.clone(), y.clone()], DEFAULT_EPS)?;
    acc.record("add", err);
    let err = grad_check_many(|t, v| t.dot(&t.mul(&v[0], &v[1])?, &c_nmd), &[x, y], DEFAULT_EPS)?;
    acc.record("mul", err);
    Ok(())
}

fn lsap(acc: &mut Acc, rng: &mut ChaCha8Rng) -> Result<()> {
    let n = rng.gen_range(6..11);
    let k = rng.gen_range(4..8);
    let (d_in, d_out) = (rng.gen_range(2..5), rng.gen_range(2..5));
    let pos = cloud(rng, n);
    let table = knn(&SpatialIndex::build(&pos, Projection::Full3D)?, &pos, k)?;
    let split = default_split(k);
    let mut store = ParamStore::new();
    let params = LsapParams::init(&mut store, "lsap", d_in, d_out, split, rng);
    let c = random(rng, &[n, d_out]);
    let err = check_with_params(&store, vec![random(rng, &[n, d_in])], |t, v, p| {
        t.dot(&lsap_block(t, &v[0], &pos, &table, split, &params, p)?, &c)
    })?;
    acc.record("lsap_block", err);
    Ok(())
}

fn pae(acc: &mut Acc, rng: &mut ChaCha8Rng) -> Result<()> {
    let n = rng.gen_range(6..10);
    let k = rng.gen_range(4..7);
    let cfg = PaeConfig {
        d_in: rng.gen_range(2..4),
        d_out: 2 * rng.gen_range(1..3),
        branches: vec![Projection::XY, Projection::Full3D],
        k,
        split: default_split(k),
    };
    let pos = cloud(rng, n);
    let tables = build_branch_tables(&pos, &cfg.branches, k)?;
    let mut store = ParamStore::new();
    let params = PaeParams::init(&mut store, "pae", &cfg, rng)?;
    let c = random(rng, &[n, cfg.d_out]);
    let err = check_with_params(&store, vec![random(rng, &[n, cfg.d_in])], |t, v, p| {
        t.dot(&pae_forward(t, &v[0], &pos, &tables, &cfg, &params, p)?, &c)
    })?;
    acc.record("pae_forward", err);
    Ok(())
}

fn fma(acc: &mut Acc, rng: &mut ChaCha8Rng) -> Result<()> {
    let n_high = rng.gen_range(6..12);
    let n_low = rng.gen_range(2..n_high);
    let high = cloud(rng, n_high);
    let low = high[..n_low].to_vec();
    let link = build_level_link(&high, &low, rng.gen_range(2..5))?;
    let (d_low, d_skip) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let mut store = ParamStore::new();
    let params = FmaParams::init(&mut store, "fma", d_low, d_skip, rng);
    let c = random(rng, &[n_high, d_skip]);
    let data = vec![random(rng, &[n_low, d_low]), random(rng, &[n_high, d_skip])];
    for (name, pool) in [("fma_max", PoolMode::Max), ("fma_mean", PoolMode::Mean), ("fma_none", PoolMode::None)] {
        let err = check_with_params(&store, data.clone(), |t, v, p| {
            t.dot(&fma_forward(t, &v[0], &v[1], &link, &params, pool, p)?, &c)
        })?;
        acc.record(name, err);
    }
    Ok(())
}

fn loss(acc: &mut Acc, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, c) = (rng.gen_range(1..10), rng.gen_range(2..6));
    let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
    let w: Vec<f64> = (0..c).map(|_| rng.gen_range(0.2..3.0)).collect();
    let logits = random(rng, &[n, c]).data.iter().map(|v| 4.0 * v).collect();
    let err = grad_check_many(
        |t, v| weighted_cross_entropy(t, &v[0], &labels, &w),
        &[Tensor { shape: vec![n, c], data: logits }],
        DEFAULT_EPS,
    )?;
    acc.record("weighted_cross_entropy", err);
    Ok(())
}

/// Runs `instances` seeded random checks per primitive or block of `module`.
pub fn run_gradcheck(module: CheckModule, instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    if instances == 0 {
        return Err(Error::InvalidArgument("at least one instance is required".into()));
    }
    type Check = fn(&mut Acc, &mut ChaCha8Rng) -> Result<()>;
    let all: [(CheckModule, Check); 5] = [
        (CheckModule::Primitives, primitives),
        (CheckModule::Lsap, lsap),
        (CheckModule::Pae, pae),
        (CheckModule::Fma, fma),
        (CheckModule::Loss, loss),
    ];
    let mut acc = Acc { results: Vec::new() };
    for (i, (m, check)) in all.iter().enumerate() {
        if module != CheckModule::All && module != *m {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for _ in 0..instances {
            check(&mut acc, &mut rng)?;
        }
    }
    Ok(acc.results)
}

/// One `name instances max_error PASS|FAIL` line per check.
pub fn render_results(results: &[CheckResult]) -> String {
    results
        .iter()
        .map(|r| {
            format!(
                "{} instances={} max_rel_error={:.3e} {}\n",
                r.name,
                r.instances,
                r.max_error,
                if r.passed() { "PASS" } else { "FAIL" }
            )
        })
        .collect()
}
