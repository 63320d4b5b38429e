//! Exact k-nearest-neighbor search under full or axis-projected metrics,
//! and the two split operators applied to sorted neighbor tables.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which coordinates take part in the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Full3D,
    /// Drops z.
    XY,
    /// Drops y.
    XZ,
    /// Drops x.
    YZ,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Full3D,
        Projection::XY,
        Projection::XZ,
        Projection::YZ,
    ];

    #[inline]
    pub fn apply(self, p: [f64; 3]) -> [f64; 3] {
        match self {
            Projection::Full3D => p,
            Projection::XY => [p[0], p[1], 0.0],
            Projection::XZ => [p[0], 0.0, p[2]],
            Projection::YZ => [0.0, p[1], p[2]],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Projection::Full3D => "3d",
            Projection::XY => "xy",
            Projection::XZ => "xz",
            Projection::YZ => "yz",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "3d" | "xyz" | "full3d" => Ok(Projection::Full3D),
            "xy" => Ok(Projection::XY),
            "xz" => Ok(Projection::XZ),
            "yz" => Ok(Projection::YZ),
            other => Err(Error::Config(format!("unknown projection {other:?}"))),
        }
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

const LEAF_SIZE: usize = 12;
const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    start: u32,
    end: u32,
    axis: u8,
    split: f64,
    left: u32,
    right: u32,
}

/// A kd-tree over projected positions.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    projection: Projection,
    points: Vec<[f64; 3]>,
    order: Vec<u32>,
    nodes: Vec<Node>,
}

/// Max-heap entry ordered by (distance, index).
#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl SpatialIndex {
    pub fn build(positions: &[[f64; 3]], projection: Projection) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Empty("spatial index needs at least one point"));
        }
        if positions.len() >= u32::MAX as usize {
            return Err(Error::InvalidArgument("too many points for index".into()));
        }
        let points: Vec<[f64; 3]> = positions.iter().map(|&p| projection.apply(p)).collect();
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite(i));
        }
        let mut index = SpatialIndex {
            projection,
            order: (0..points.len() as u32).collect(),
            points,
            nodes: Vec::new(),
        };
        index.build_node(0, index.points.len());
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            start: start as u32,
            end: end as u32,
            axis: 0,
            split: 0.0,
            left: NO_CHILD,
            right: NO_CHILD,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            let p = self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if hi[axis] - lo[axis] == 0.0 {
            // All points coincide; keep as an oversized leaf.
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis].total_cmp(&points[b as usize][axis])
        });
        let split = self.points[self.order[mid] as usize][axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        let node = &mut self.nodes[id as usize];
        node.axis = axis as u8;
        node.split = split;
        node.left = left;
        node.right = right;
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn projection(&self) -> Projection {
        self.projection
    }

    /// Indices of the `k` nearest stored points (fewer if `k > len`), sorted by
    /// ascending projected distance, ties by ascending index.
    pub fn nearest(&self, query: [f64; 3], k: usize) -> Vec<usize> {
        let q = self.projection.apply(query);
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, &q, k, &mut heap);
        let mut found = heap.into_vec();
        found.sort_unstable();
        found.into_iter().map(|c| c.index as usize).collect()
    }

    fn search(&self, node: u32, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        let n = &self.nodes[node as usize];
        if n.left == NO_CHILD {
            for &i in &self.order[n.start as usize..n.end as usize] {
                let c = Candidate {
                    d2: dist2(q, &self.points[i as usize]),
                    index: i,
                };
                if heap.len() < k {
                    heap.push(c);
                } else if c < *heap.peek().unwrap() {
                    heap.pop();
                    heap.push(c);
                }
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, k, heap);
        // `<=` keeps equal-distance candidates with smaller indices reachable.
        if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
            self.search(far, q, k, heap);
        }
    }
}

/// Per-query sorted neighbor indices, `rows x k` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    pub indices: Vec<u32>,
    pub k: usize,
    pub projection: Projection,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Keeps the listed rank columns, in the given order.
    fn select_columns(&self, cols: &[usize]) -> NeighborTable {
        let mut indices = Vec::with_capacity(self.rows() * cols.len());
        for r in 0..self.rows() {
            let row = self.row(r);
            indices.extend(cols.iter().map(|&c| row[c]));
        }
        NeighborTable {
            indices,
            k: cols.len(),
            projection: self.projection,
        }
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.iter().copied().max()
    }
}

/// Queries `k` neighbors for every row of `queries`.
///
/// When `k` exceeds the indexed point count, each row is padded by repeating
/// its last valid neighbor.
pub fn knn(index: &SpatialIndex, queries: &[[f64; 3]], k: usize) -> Result<NeighborTable> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    for q in queries {
        let row = index.nearest(*q, k);
        let last = *row.last().expect("index is never empty");
        indices.extend(row.iter().map(|&i| i as u32));
        indices.extend(std::iter::repeat(last as u32).take(k - row.len()));
    }
    Ok(NeighborTable {
        indices,
        k,
        projection: index.projection(),
    })
}

/// Split counts for the two attention rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    /// Number of nearest ranks kept by the first round.
    pub s1: usize,
    /// Rank stride of the second round.
    pub s2: usize,
}

impl SplitSpec {
    pub fn new(s1: usize, s2: usize, k: usize) -> Result<Self> {
        let spec = SplitSpec { s1, s2 };
        spec.check(k)?;
        Ok(spec)
    }

    /// `(k, 1)`: both rounds see every neighbor.
    pub fn degenerate(k: usize) -> Self {
        SplitSpec { s1: k, s2: 1 }
    }

    pub fn check(&self, k: usize) -> Result<()> {
        if self.s1 < 1 || self.s1 > k {
            return Err(Error::InvalidArgument(format!(
                "s1 = {} outside [1, {k}]",
                self.s1
            )));
        }
        if self.s2 < 1 || self.s2 > k {
            return Err(Error::InvalidArgument(format!(
                "s2 = {} outside [1, {k}]",
                self.s2
            )));
        }
        Ok(())
    }

    /// Neighbor slots per point in round one and round two.
    pub fn round_slots(&self, k: usize) -> (usize, usize) {
        (self.s1, k.div_ceil(self.s2))
    }
}

/// `s1 = max(1, floor(k/4))`, `s2 = min(4, k)`.
pub fn default_split(k: usize) -> SplitSpec {
    let k = k.max(1);
    SplitSpec {
        s1: (k / 4).max(1),
        s2: 4.min(k),
    }
}

/// Keeps ranks `[0, s1)`.
pub fn split_first(table: &NeighborTable, s1: usize) -> Result<NeighborTable> {
    if s1 < 1 || s1 > table.k {
        return Err(Error::InvalidArgument(format!(
            "s1 = {s1} outside [1, {}]",
            table.k
        )));
    }
    let cols: Vec<usize> = (0..s1).collect();
    Ok(table.select_columns(&cols))
}

/// Keeps ranks `0, s2, 2*s2, ...` below `k`.
pub fn split_stride(table: &NeighborTable, s2: usize) -> Result<NeighborTable> {
    if s2 < 1 || s2 > table.k {
        return Err(Error::InvalidArgument(format!(
            "s2 = {s2} outside [1, {}]",
            table.k
        )));
    }
    let cols: Vec<usize> = (0..table.k).step_by(s2).collect();
    Ok(table.select_columns(&cols))
}
