//! Work accounting and wall-clock timing of split versus full attention
//! pooling.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::lsap::{lsap_block, LsapParams, RPPE_RAW_DIM};
use crate::neighbors::{default_split, knn, Projection, SpatialIndex, SplitSpec};
use crate::work::WorkCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Two rounds over all `k` neighbors.
    Full,
    Lsap,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Full => "full",
            BenchMode::Lsap => "lsap",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BenchMode::Full),
            "lsap" => Ok(BenchMode::Lsap),
            other => Err(Error::InvalidArgument(format!("unknown bench mode {other:?}"))),
        }
    }
}

impl BenchMode {
    /// Split used by the mode; `Full` ignores `spec`.
    pub fn split(self, k: usize, spec: SplitSpec) -> SplitSpec {
        match self {
            BenchMode::Full => SplitSpec::degenerate(k),
            BenchMode::Lsap => spec,
        }
    }
}

/// Work of one `d -> d` pooling block over `n` points, from layer widths
/// alone. Each round of `m` slots encodes geometry (`10 -> d`), scores and
/// values the `2d`-wide concatenation per slot, then maps `2d -> d` per point.
pub fn count_work(mode: BenchMode, k: usize, spec: SplitSpec, n: usize, d: usize) -> Result<WorkCounter> {
    let split = mode.split(k, spec);
    split.check(k)?;
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("n and d must be positive".into()));
    }
    let (n, d) = (n as u64, d as u64);
    let per_slot = RPPE_RAW_DIM as u64 * d + 2 * (2 * d) * (2 * d);
    let per_point = 2 * d * d;
    let mut w = WorkCounter::default();
    for m in [split.s1, k.div_ceil(split.s2)] {
        let m = m as u64;
        w += WorkCounter {
            neighbor_slots: n * m,
            mlp_macs: n * m * per_slot + n * per_point,
            gathers: n * m,
        };
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub reps: usize,
    pub threads: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    /// Neighbor-table build time, excluded from the forward timings.
    pub index_build_ms: f64,
    /// Work of one forward pass, as instrumented.
    pub work: WorkCounter,
    pub note: String,
}

impl BenchReport {
    /// `key=value` lines with stable field names.
    pub fn render(&self) -> String {
        format!(
            "mode={}\nk={}\nn={}\nd={}\nreps={}\nthreads={}\nmedian_ms={:.3}\nmin_ms={:.3}\nneighbor_slots={}\nmlp_macs={}\ngathers={}\nindex_build_ms={:.3}\nnote={}\n",
            self.mode,
            self.k,
            self.n,
            self.d,
            self.reps,
            self.threads,
            self.median_ms,
            self.min_ms,
            self.work.neighbor_slots,
            self.work.mlp_macs,
            self.work.gathers,
            self.index_build_ms,
            self.note
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times single-threaded f32 forward passes of one pooling block on a seeded
/// random cloud in a unit-density box. One untimed warm-up pass precedes the
/// `reps` timed passes.
pub fn bench(mode: BenchMode, k: usize, n: usize, d: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    bench_with_split(mode, k, default_split(k), n, d, reps, seed)
}

pub fn bench_with_split(
    mode: BenchMode,
    k: usize,
    spec: SplitSpec,
    n: usize,
    d: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if reps < 5 {
        return Err(Error::InvalidArgument("bench needs at least 5 reps".into()));
    }
    let expected = count_work(mode, k, spec, n, d)?;
    let split = mode.split(k, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (n as f64).cbrt();
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(0.0..side)])
        .collect();
    let t0 = Instant::now();
    let table = knn(&SpatialIndex::build(&positions, Projection::Full3D)?, &positions, k)?;
    let index_build_ms = t0.elapsed().as_secs_f64() * 1e3;
    let mut store = ParamStore::<f32>::new();
    let params = LsapParams::init(&mut store, "bench", d, d, split, &mut rng);
    let features = Var::constant(Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?);

    let mut times = Vec::with_capacity(reps);
    let mut work = None;
    for rep in 0..=reps {
        let tape = Tape::<f32>::inference();
        let p = Bound::new(&tape, &store);
        let t = Instant::now();
        let out = lsap_block(&tape, &features, &positions, &table, split, &params, &p)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        drop(out);
        let w = tape.work();
        if w != expected || work.is_some_and(|prev| prev != w) {
            return Err(Error::InvalidArgument(format!(
                "instrumented work {w:?} differs from closed form {expected:?}"
            )));
        }
        work = Some(w);
        if rep > 0 {
            times.push(ms);
        }
    }
    Ok(BenchReport {
        mode,
        k,
        n,
        d,
        reps,
        threads: 1,
        median_ms: median(&times),
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        index_build_ms,
        work: expected,
        note: format!("cpu f32 single-thread; s1={} s2={}", split.s1, split.s2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_slot_counts() {
        let w = count_work(BenchMode::Lsap, 36, default_split(36), 1, 8).unwrap();
        assert_eq!(w.neighbor_slots, 18);
        let f = count_work(BenchMode::Full, 36, default_split(36), 1, 8).unwrap();
        assert_eq!(f.neighbor_slots, 72);
        let w = count_work(BenchMode::Lsap, 25, default_split(25), 10, 8).unwrap();
        assert_eq!(w.neighbor_slots, 130);
        let deg = count_work(BenchMode::Lsap, 16, SplitSpec::degenerate(16), 7, 4).unwrap();
        assert_eq!(deg, count_work(BenchMode::Full, 16, default_split(16), 7, 4).unwrap());
    }

    #[test]
    fn instrumented_counts_match_closed_form() {
        for k in [9, 16, 25, 36] {
            for spec in [default_split(k), SplitSpec::degenerate(k)] {
                let r = bench_with_split(BenchMode::Lsap, k, spec, 60, 4, 5, k as u64).unwrap();
                assert_eq!(r.work, count_work(BenchMode::Lsap, k, spec, 60, 4).unwrap());
                let mut s = ParamStore::<f32>::new();
                let params = LsapParams::init(&mut s, "x", 4, 4, spec, &mut ChaCha8Rng::seed_from_u64(0));
                assert_eq!(r.work, params.work(60, k, spec));
            }
        }
    }

    #[test]
    fn split_strictly_reduces_slots() {
        for k in 2..40 {
            let spec = default_split(k);
            let l = count_work(BenchMode::Lsap, k, spec, 1, 1).unwrap();
            let f = count_work(BenchMode::Full, k, spec, 1, 1).unwrap();
            if spec.s1 < k || spec.s2 > 1 {
                assert!(l.neighbor_slots < f.neighbor_slots, "k={k}");
            }
        }
    }

    #[test]
    fn report_fields_and_reps() {
        assert!(bench(BenchMode::Full, 9, 50, 4, 4, 0).is_err());
        let r = bench(BenchMode::Full, 9, 50, 4, 5, 0).unwrap();
        let text = r.render();
        for key in ["mode=full", "k=9", "n=50", "d=4", "reps=5", "threads=1", "median_ms=", "min_ms=", "neighbor_slots=900", "mlp_macs="] {
            assert!(text.contains(key), "{key} missing from\n{text}");
        }
        assert!(r.min_ms <= r.median_ms);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
