//! Seeded synthetic street scenes: a ground plane with box buildings, trees
//! (a crown sphere on a short stem) and thin poles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud_io::PointCloud;
use crate::error::{Error, Result};

pub const GROUND: u32 = 0;
pub const BUILDING: u32 = 1;
pub const TREE: u32 = 2;
pub const POLE: u32 = 3;
pub const CLASS_NAMES: [&str; 4] = ["ground", "building", "tree", "pole"];
pub const DEFAULT_PROPORTIONS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
pub const DEFAULT_EXTENT: f64 = 16.0;

const GROUND_NOISE: f64 = 0.02;
const BUILDINGS: usize = 2;
const TREES: usize = 3;
const POLES: usize = 3;
const STEM_FRACTION: f64 = 0.1;
const STEM_RADIUS: f64 = 0.12;
const POLE_RADIUS: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildingBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub seed: u64,
    pub buildings: Vec<BuildingBox>,
}

pub fn synth_scene(seed: u64, n_points: usize, extent: f64) -> Result<SyntheticScene> {
    synth_scene_with(seed, n_points, extent, DEFAULT_PROPORTIONS)
}

/// Exact per-class counts `floor(n * p_c)`, the remainder going to ground.
pub fn class_counts(n: usize, proportions: [f64; 4]) -> [usize; 4] {
    let mut counts = proportions.map(|p| (n as f64 * p).floor() as usize);
    counts[GROUND as usize] += n - counts.iter().sum::<usize>();
    counts
}

pub fn synth_scene_with(seed: u64, n_points: usize, extent: f64, proportions: [f64; 4]) -> Result<SyntheticScene> {
    if n_points < 100 {
        return Err(Error::InvalidArgument("a scene needs at least 100 points".into()));
    }
    if !(extent >= 8.0) || !extent.is_finite() {
        return Err(Error::InvalidArgument(format!("extent {extent} is below 8 m")));
    }
    let total: f64 = proportions.iter().sum();
    if proportions.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("proportions must be nonnegative and sum to 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Objects sit in distinct cells of a 4 x 4 layout so they never overlap.
    let cell = extent / 4.0;
    let mut cells: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
    cells.shuffle(&mut rng);
    let mut slots = cells.into_iter();
    let mut center = |rng: &mut ChaCha8Rng| {
        let (i, j) = slots.next().expect("16 cells");
        let jitter = 0.15 * cell;
        [
            (i as f64 + 0.5) * cell + rng.gen_range(-jitter..jitter),
            (j as f64 + 0.5) * cell + rng.gen_range(-jitter..jitter),
        ]
    };
    let buildings: Vec<BuildingBox> = (0..BUILDINGS)
        .map(|_| {
            let c = center(&mut rng);
            let hx = rng.gen_range(0.25..0.32) * cell;
            let hy = rng.gen_range(0.25..0.32) * cell;
            BuildingBox {
                min: [c[0] - hx, c[1] - hy],
                max: [c[0] + hx, c[1] + hy],
                height: rng.gen_range(4.0..7.0),
            }
        })
        .collect();
    let trees: Vec<([f64; 2], f64, f64)> = (0..TREES)
        .map(|_| {
            let c = center(&mut rng);
            (c, rng.gen_range(1.8..2.6), rng.gen_range(0.25..0.3) * cell)
        })
        .collect();
    let poles: Vec<([f64; 2], f64)> = (0..POLES).map(|_| (center(&mut rng), rng.gen_range(5.0..7.0))).collect();

    let counts = class_counts(n_points, proportions);
    let mut positions = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    let mut push = |p: [f64; 3], label: u32| {
        positions.push([p[0] as f32, p[1] as f32, p[2] as f32]);
        labels.push(label);
    };

    let mut placed = 0;
    while placed < counts[GROUND as usize] {
        let (x, y) = (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent));
        let inside = buildings
            .iter()
            .any(|b| x >= b.min[0] && x <= b.max[0] && y >= b.min[1] && y <= b.max[1]);
        if !inside {
            push([x, y, rng.gen_range(-GROUND_NOISE..GROUND_NOISE)], GROUND);
            placed += 1;
        }
    }
    for i in 0..counts[BUILDING as usize] {
        let b = &buildings[i % BUILDINGS];
        push(box_surface_point(b, &mut rng), BUILDING);
    }
    let stems = (counts[TREE as usize] as f64 * STEM_FRACTION).round() as usize;
    for i in 0..counts[TREE as usize] {
        let (c, stem_h, r) = trees[i % TREES];
        let p = if i < stems {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            [c[0] + STEM_RADIUS * a.cos(), c[1] + STEM_RADIUS * a.sin(), rng.gen_range(0.0..stem_h)]
        } else {
            let u = sphere_direction(&mut rng);
            [c[0] + r * u[0], c[1] + r * u[1], stem_h + r + r * u[2]]
        };
        push(p, TREE);
    }
    for i in 0..counts[POLE as usize] {
        let (c, h) = poles[i % POLES];
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        push([c[0] + POLE_RADIUS * a.cos(), c[1] + POLE_RADIUS * a.sin(), rng.gen_range(0.0..h)], POLE);
    }
    Ok(SyntheticScene {
        cloud: PointCloud::new(positions).with_labels(labels),
        seed,
        buildings,
    })
}

fn sphere_direction<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    [r * a.cos(), r * a.sin(), z]
}

/// Area-weighted sample on the four walls and the roof.
fn box_surface_point<R: Rng + ?Sized>(b: &BuildingBox, rng: &mut R) -> [f64; 3] {
    let (wx, wy, h) = (b.max[0] - b.min[0], b.max[1] - b.min[1], b.height);
    let areas = [wx * h, wx * h, wy * h, wy * h, wx * wy];
    let mut pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
    let mut face = 4;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let x = rng.gen_range(b.min[0]..b.max[0]);
    let y = rng.gen_range(b.min[1]..b.max[1]);
    let z = rng.gen_range(0.0..h);
    match face {
        0 => [x, b.min[1], z],
        1 => [x, b.max[1], z],
        2 => [b.min[0], y, z],
        3 => [b.max[0], y, z],
        _ => [x, y, h],
    }
}
