//! Canonical point-cloud files, grid sampling and fixed-size block extraction.
//!
//! The canonical file comes in two variants that carry the same content:
//!
//! * ascii: a header line `N C L` (point count, color channels, label flag)
//!   followed by `N` whitespace-separated rows `x y z [c1..cC] [label]`.
//! * binary: the magic bytes `LSPC`, the same header as three little-endian
//!   `u32`, then `N` records of `3 + C` little-endian `f32` and, when `L = 1`,
//!   one little-endian `u32` label.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::neighbors::{Projection, SpatialIndex};

pub const MAGIC: &[u8; 4] = b"LSPC";

/// Points per input block in full-size runs.
pub const DEFAULT_BLOCK_SIZE: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ascii,
    Binary,
}

impl Format {
    /// Sniffs the format from the first bytes of a file.
    pub fn detect(path: impl AsRef<Path>) -> Result<Format> {
        let mut head = [0u8; 4];
        let mut f = fs::File::open(path)?;
        let n = f.read(&mut head)?;
        if n == 4 && &head == MAGIC {
            Ok(Format::Binary)
        } else {
            Ok(Format::Ascii)
        }
    }
}

/// A point cloud with optional per-point colors and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    /// Row-major `N x channels` color values.
    pub colors: Vec<f32>,
    pub channels: usize,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>) -> Self {
        PointCloud {
            positions,
            colors: Vec::new(),
            channels: 0,
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_colors(mut self, colors: Vec<f32>, channels: usize) -> Self {
        self.colors = colors;
        self.channels = channels;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn color(&self, i: usize) -> &[f32] {
        &self.colors[i * self.channels..(i + 1) * self.channels]
    }

    /// Checks the structural invariants, and label range when `num_classes` is given.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let n = self.len();
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        if self.colors.len() != n * self.channels {
            return Err(Error::Shape(format!(
                "colors hold {} values, expected {} x {}",
                self.colors.len(),
                n,
                self.channels
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "labels hold {} rows, expected {}",
                    labels.len(),
                    n
                )));
            }
            if let Some(c) = num_classes {
                if let Some((point, &label)) =
                    labels.iter().enumerate().find(|(_, &l)| l as usize >= c)
                {
                    return Err(Error::LabelOutOfRange {
                        point,
                        label,
                        num_classes: c,
                    });
                }
            }
        }
        Ok(())
    }

    /// Returns the sub-cloud made of `indices` (repetitions allowed).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let c = self.channels;
        let mut colors = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            colors.extend_from_slice(self.color(i));
        }
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors,
            channels: c,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn positions_f64(&self) -> Vec<[f64; 3]> {
        self.positions
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }
}

/// A fixed-size neighborhood extracted from a larger cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBlock {
    pub cloud: PointCloud,
    /// Source index of every block point; padding shows up as repetition.
    pub origin_indices: Vec<usize>,
    pub block_size: usize,
}

pub fn load_cloud(
    path: impl AsRef<Path>,
    format: Format,
    num_classes: Option<usize>,
) -> Result<PointCloud> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let cloud = match format {
        Format::Ascii => read_ascii(reader)?,
        Format::Binary => read_binary(reader)?,
    };
    cloud.validate(num_classes)?;
    Ok(cloud)
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: Format) -> Result<()> {
    cloud.validate(None)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    match format {
        Format::Ascii => write_ascii(cloud, &mut w)?,
        Format::Binary => write_binary(cloud, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn parse_header(tokens: &[&str]) -> Result<(usize, usize, bool)> {
    if tokens.len() != 3 {
        return Err(Error::MalformedHeader(format!(
            "expected `N C L`, found {} fields",
            tokens.len()
        )));
    }
    let mut vals = [0u32; 3];
    for (v, t) in vals.iter_mut().zip(tokens) {
        *v = t
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("not an unsigned integer: {t:?}")))?;
    }
    header_values(vals[0], vals[1], vals[2])
}

fn header_values(n: u32, c: u32, l: u32) -> Result<(usize, usize, bool)> {
    let has_labels = match l {
        0 => false,
        1 => true,
        other => {
            return Err(Error::MalformedHeader(format!(
                "label flag must be 0 or 1, found {other}"
            )))
        }
    };
    Ok((n as usize, c as usize, has_labels))
}

pub fn read_ascii<R: BufRead>(reader: R) -> Result<PointCloud> {
    let mut lines = reader.lines();
    let header = loop {
        match lines.next() {
            None => return Err(Error::MalformedHeader("empty file".into())),
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let tokens: Vec<&str> = header.split_whitespace().collect();
    let (n, c, has_labels) = parse_header(&tokens)?;
    let fields = 3 + c + usize::from(has_labels);

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n * c);
    let mut labels = has_labels.then(|| Vec::with_capacity(n));
    let mut row = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if row >= n {
            return Err(Error::RowCount {
                declared: n,
                found: row + 1,
            });
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != fields {
            return Err(Error::FieldCount {
                row,
                expected: fields,
                found: toks.len(),
            });
        }
        let float = |s: &str| -> Result<f32> {
            s.parse::<f32>().map_err(|_| Error::Parse {
                row,
                msg: format!("not a number: {s:?}"),
            })
        };
        let p = [float(toks[0])?, float(toks[1])?, float(toks[2])?];
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(row));
        }
        positions.push(p);
        for t in &toks[3..3 + c] {
            colors.push(float(t)?);
        }
        if let Some(labels) = labels.as_mut() {
            let t = toks[3 + c];
            labels.push(t.parse::<u32>().map_err(|_| Error::Parse {
                row,
                msg: format!("not a class id: {t:?}"),
            })?);
        }
        row += 1;
    }
    if row != n {
        return Err(Error::RowCount {
            declared: n,
            found: row,
        });
    }
    Ok(PointCloud {
        positions,
        colors,
        channels: c,
        labels,
    })
}

pub fn write_ascii<W: Write>(cloud: &PointCloud, w: &mut W) -> Result<()> {
    let has_labels = cloud.labels.is_some();
    writeln!(
        w,
        "{} {} {}",
        cloud.len(),
        cloud.channels,
        u8::from(has_labels)
    )?;
    // `{}` on f32 prints the shortest decimal that parses back to the same value.
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        for c in cloud.color(i) {
            write!(w, " {c}")?;
        }
        if let Some(labels) = &cloud.labels {
            write!(w, " {}", labels[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut reader: R) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::MalformedHeader(format!(
            "binary file too short ({} bytes)",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::MalformedHeader("missing LSPC magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let (n, c, has_labels) = header_values(u32_at(4), u32_at(8), u32_at(12))?;
    let record = 4 * (3 + c + usize::from(has_labels));
    let body = bytes.len() - 16;
    if record == 0 || body % record != 0 || body / record != n {
        return Err(Error::RowCount {
            declared: n,
            found: if record == 0 { 0 } else { body / record },
        });
    }
    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n * c);
    let mut labels = has_labels.then(|| Vec::with_capacity(n));
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    for row in 0..n {
        let base = 16 + row * record;
        let p = [f32_at(base), f32_at(base + 4), f32_at(base + 8)];
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(row));
        }
        positions.push(p);
        for j in 0..c {
            colors.push(f32_at(base + 12 + 4 * j));
        }
        if let Some(labels) = labels.as_mut() {
            labels.push(u32_at(base + 12 + 4 * c));
        }
    }
    Ok(PointCloud {
        positions,
        colors,
        channels: c,
        labels,
    })
}

pub fn write_binary<W: Write>(cloud: &PointCloud, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    w.write_all(&(cloud.channels as u32).to_le_bytes())?;
    w.write_all(&u32::from(cloud.labels.is_some()).to_le_bytes())?;
    for i in 0..cloud.len() {
        for v in cloud.positions[i] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in cloud.color(i) {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(labels) = &cloud.labels {
            w.write_all(&labels[i].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Voxel-grid downsampling anchored at the cloud's minimum corner.
///
/// Each occupied cell yields one point: the centroid of its members, their
/// mean color and their majority label (ties go to the smallest class id).
/// Output points are ordered by cell coordinate.
pub fn grid_sample(cloud: &PointCloud, cell: f64) -> Result<PointCloud> {
    if !(cell > 0.0) || !cell.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "grid cell must be positive, got {cell}"
        )));
    }
    cloud.validate(None)?;
    if cloud.is_empty() {
        return Ok(cloud.clone());
    }
    let mut min = [f64::INFINITY; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            min[a] = min[a].min(p[a] as f64);
        }
    }
    let keys: Vec<[i64; 3]> = cloud
        .positions
        .iter()
        .map(|p| {
            let mut k = [0i64; 3];
            for a in 0..3 {
                k[a] = ((p[a] as f64 - min[a]) / cell).floor() as i64;
            }
            k
        })
        .collect();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by_key(|&i| (keys[i], i));

    let c = cloud.channels;
    let mut out = PointCloud {
        positions: Vec::new(),
        colors: Vec::new(),
        channels: c,
        labels: cloud.labels.as_ref().map(|_| Vec::new()),
    };
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && keys[order[end]] == keys[order[start]] {
            end += 1;
        }
        let members = &order[start..end];
        let count = members.len() as f64;
        let mut centroid = [0f64; 3];
        let mut color = vec![0f64; c];
        for &i in members {
            for a in 0..3 {
                centroid[a] += cloud.positions[i][a] as f64;
            }
            for (acc, v) in color.iter_mut().zip(cloud.color(i)) {
                *acc += *v as f64;
            }
        }
        out.positions.push([
            (centroid[0] / count) as f32,
            (centroid[1] / count) as f32,
            (centroid[2] / count) as f32,
        ]);
        out.colors
            .extend(color.iter().map(|v| (v / count) as f32));
        if let (Some(src), Some(dst)) = (&cloud.labels, out.labels.as_mut()) {
            dst.push(majority_label(members.iter().map(|&i| src[i])));
        }
        start = end;
    }
    Ok(out)
}

fn majority_label(labels: impl Iterator<Item = u32>) -> u32 {
    let mut sorted: Vec<u32> = labels.collect();
    sorted.sort_unstable();
    let mut best = (0usize, u32::MAX);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        // Strictly greater keeps the smallest id on ties, since ids ascend.
        if j - i > best.0 {
            best = (j - i, sorted[i]);
        }
        i = j;
    }
    best.1
}

/// Extracts the `n` points nearest to `cloud[center_index]`.
///
/// When the cloud holds fewer than `n` points, every point is taken and the
/// remainder is filled by sampling uniformly with replacement.
pub fn sample_block<R: Rng + ?Sized>(
    cloud: &PointCloud,
    center_index: usize,
    n: usize,
    rng: &mut R,
) -> Result<PointBlock> {
    if center_index >= cloud.len() {
        return Err(Error::IndexOutOfRange {
            index: center_index,
            len: cloud.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("block size must be at least 1".into()));
    }
    let positions = cloud.positions_f64();
    let index = SpatialIndex::build(&positions, Projection::Full3D)?;
    let take = n.min(cloud.len());
    let mut origin = index.nearest(positions[center_index], take);
    while origin.len() < n {
        origin.push(rng.gen_range(0..cloud.len() as u64) as usize);
    }
    Ok(PointBlock {
        cloud: cloud.select(&origin),
        origin_indices: origin,
        block_size: n,
    })
}
