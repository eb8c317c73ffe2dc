//! Gaussian kernel density on a regular grid and iso-contour extraction.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Bounds, Point};
use crate::model::DenoiserModel;
use crate::sampling::{positions_at_time, sample_trajectories_normalized, SamplerKind};
use crate::scalar::Scalar;

/// Grid resolution and extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<F> {
    pub nx: usize,
    pub ny: usize,
    pub bounds: Bounds<F>,
}

impl<F: Scalar> Default for GridSpec<F> {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            bounds: Bounds::symmetric(F::of(1.6)),
        }
    }
}

impl<F: Scalar> GridSpec<F> {
    pub fn cell_width(&self) -> F {
        self.bounds.width() / F::of(self.nx as f64)
    }

    pub fn cell_height(&self) -> F {
        self.bounds.height() / F::of(self.ny as f64)
    }

    /// Smallest bandwidth used: half a cell width.
    pub fn min_bandwidth(&self) -> F {
        self.cell_width() * F::of(0.5)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point<F> {
        let half = F::of(0.5);
        [
            self.bounds.min[0] + (F::of(i as f64) + half) * self.cell_width(),
            self.bounds.min[1] + (F::of(j as f64) + half) * self.cell_height(),
        ]
    }
}

/// Density values at cell centers, row-major with `x` varying fastest
/// (`values[j * nx + i]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity<F> {
    pub nx: usize,
    pub ny: usize,
    pub bounds: Bounds<F>,
    pub values: Vec<F>,
}

impl<F: Scalar> GridDensity<F> {
    pub fn spec(&self) -> GridSpec<F> {
        GridSpec {
            nx: self.nx,
            ny: self.ny,
            bounds: self.bounds,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> F {
        self.values[j * self.nx + i]
    }

    pub fn cell_area(&self) -> F {
        let s = self.spec();
        s.cell_width() * s.cell_height()
    }

    /// Riemann sum of the density over the grid.
    pub fn mass(&self) -> F {
        self.values.iter().copied().sum::<F>() * self.cell_area()
    }

    /// Index `(i, j)` of the largest value.
    pub fn argmax(&self) -> (usize, usize) {
        let (idx, _) =
            self.values.iter().enumerate().fold(
                (0, F::neg_infinity()),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            );
        (idx % self.nx, idx / self.nx)
    }
}

fn std_dev<F: Scalar>(values: impl Iterator<Item = F> + Clone, n: usize) -> F {
    let nf = F::of(n as f64);
    let mean = values.clone().sum::<F>() / nf;
    let ss: F = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / F::of((n - 1) as f64)).sqrt()
}

/// Silverman's rule in two dimensions: `mean(σ_x, σ_y) · n^(−1/6)`.
pub fn silverman_bandwidth<F: Scalar>(points: &[Point<F>]) -> Result<F> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Usage(format!("bandwidth needs at least 2 points, got {n}")));
    }
    let sx = std_dev(points.iter().map(|p| p[0]), n);
    let sy = std_dev(points.iter().map(|p| p[1]), n);
    Ok((sx + sy) * F::of(0.5) * F::of(n as f64).powf(F::of(-1.0 / 6.0)))
}

/// Gaussian KDE evaluated at cell centers.
pub fn kde<F: Scalar>(points: &[Point<F>], grid: &GridSpec<F>, h: F) -> Result<GridDensity<F>> {
    if points.is_empty() {
        return Err(Error::Usage("kde needs at least one point".into()));
    }
    if !(h > F::zero() && h.is_finite()) {
        return Err(Error::Usage(format!("bandwidth must be positive, got {h}")));
    }
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::Config("grid needs at least one cell per axis".into()));
    }
    let xs: Vec<F> = (0..grid.nx).map(|i| grid.cell_center(i, 0)[0]).collect();
    let ys: Vec<F> = (0..grid.ny).map(|j| grid.cell_center(0, j)[1]).collect();
    let inv = F::one() / (F::of(2.0) * h * h);
    let mut values = vec![F::zero(); grid.nx * grid.ny];
    let mut ex = vec![F::zero(); grid.nx];
    let mut ey = vec![F::zero(); grid.ny];
    // The kernel factorizes over the axes.
    for p in points {
        for (e, &x) in ex.iter_mut().zip(&xs) {
            *e = (-(x - p[0]) * (x - p[0]) * inv).exp();
        }
        for (e, &y) in ey.iter_mut().zip(&ys) {
            *e = (-(y - p[1]) * (y - p[1]) * inv).exp();
        }
        for (row, &wy) in values.chunks_exact_mut(grid.nx).zip(&ey) {
            crate::scalar::axpy(wy, &ex, row);
        }
    }
    let norm = F::one() / (F::of(points.len() as f64) * F::TAU() * h * h);
    values.iter_mut().for_each(|v| *v *= norm);
    Ok(GridDensity {
        nx: grid.nx,
        ny: grid.ny,
        bounds: grid.bounds,
        values,
    })
}

/// Values below this fraction of the grid maximum count as background when
/// choosing contour levels.
pub const LEVEL_FLOOR: f64 = 0.01;

/// Levels at the quantiles `i/(count+1)` of the grid values that exceed
/// [`LEVEL_FLOOR`] times the maximum.
pub fn contour_levels<F: Scalar>(grid: &GridDensity<F>, count: usize) -> Vec<F> {
    let max = grid.values.iter().copied().fold(F::zero(), F::max);
    if max <= F::zero() || count == 0 {
        return Vec::new();
    }
    let floor = max * F::of(LEVEL_FLOOR);
    let mut vals: Vec<F> = grid
        .values
        .iter()
        .copied()
        .filter(|&v| v > F::zero() && v >= floor)
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite density"));
    let last = vals.len() - 1;
    (1..=count)
        .map(|i| {
            let q = i as f64 / (count + 1) as f64;
            let pos = q * last as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(last);
            let w = F::of(pos - lo as f64);
            vals[lo] + w * (vals[hi] - vals[lo])
        })
        .collect()
}

/// A polyline at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain<F> {
    pub points: Vec<Point<F>>,
    /// Closed chains do not repeat their first vertex.
    pub closed: bool,
}

impl<F: Scalar> Chain<F> {
    /// Signed shoelace area (closed chains).
    pub fn signed_area(&self) -> F {
        let n = self.points.len();
        let mut acc = F::zero();
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            acc += a[0] * b[1] - b[0] * a[1];
        }
        acc * F::of(0.5)
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Point<F>) -> bool {
        let n = self.points.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[j]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
                if p[0] < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelContours<F> {
    pub level: F,
    pub chains: Vec<Chain<F>>,
}

/// Wire form: `{"levels": [{"level": v, "chains": [{"points": [[x, y], ...], "closed": b}]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSet<F> {
    pub levels: Vec<LevelContours<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum EdgeKey {
    /// Between nodes `(i, j)` and `(i + 1, j)`.
    H(usize, usize),
    /// Between nodes `(i, j)` and `(i, j + 1)`.
    V(usize, usize),
}

/// Edge pairs crossed in a square, by corner case.
///
/// Corners: bit 0 = (i, j), bit 1 = (i+1, j), bit 2 = (i+1, j+1), bit 3 = (i, j+1).
/// Sides: 0 = bottom, 1 = right, 2 = top, 3 = left.
fn square_segments(case: u8, center_high: bool) -> &'static [(u8, u8)] {
    match case {
        0 | 15 => &[],
        1 | 14 => &[(3, 0)],
        2 | 13 => &[(0, 1)],
        3 | 12 => &[(3, 1)],
        4 | 11 => &[(1, 2)],
        6 | 9 => &[(0, 2)],
        7 | 8 => &[(3, 2)],
        5 if center_high => &[(0, 1), (3, 2)],
        5 => &[(3, 0), (1, 2)],
        10 if center_high => &[(3, 0), (1, 2)],
        10 => &[(0, 1), (3, 2)],
        _ => unreachable!("4-bit case"),
    }
}

fn side_key(side: u8, i: usize, j: usize) -> EdgeKey {
    match side {
        0 => EdgeKey::H(i, j),
        1 => EdgeKey::V(i + 1, j),
        2 => EdgeKey::H(i, j + 1),
        _ => EdgeKey::V(i, j),
    }
}

/// Extracts iso-lines with linear edge interpolation. Saddles are resolved by
/// the average of the four corners.
pub fn marching_squares<F: Scalar>(grid: &GridDensity<F>, levels: &[F]) -> ContourSet<F> {
    let spec = grid.spec();
    let levels = levels
        .iter()
        .map(|&level| LevelContours {
            level,
            chains: contour_level(grid, &spec, level),
        })
        .collect();
    ContourSet { levels }
}

fn contour_level<F: Scalar>(grid: &GridDensity<F>, spec: &GridSpec<F>, level: F) -> Vec<Chain<F>> {
    if grid.nx < 2 || grid.ny < 2 {
        return Vec::new();
    }
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for j in 0..grid.ny - 1 {
        for i in 0..grid.nx - 1 {
            let c = [
                grid.at(i, j),
                grid.at(i + 1, j),
                grid.at(i + 1, j + 1),
                grid.at(i, j + 1),
            ];
            let case = c
                .iter()
                .enumerate()
                .fold(0u8, |acc, (b, &v)| if v > level { acc | (1 << b) } else { acc });
            if case == 0 || case == 15 {
                continue;
            }
            let center_high = (c[0] + c[1] + c[2] + c[3]) * F::of(0.25) > level;
            for &(a, b) in square_segments(case, center_high) {
                segments.push((side_key(a, i, j), side_key(b, i, j)));
            }
        }
    }

    let vertex = |key: EdgeKey| -> Point<F> {
        let (a, b) = match key {
            EdgeKey::H(i, j) => ((i, j), (i + 1, j)),
            EdgeKey::V(i, j) => ((i, j), (i, j + 1)),
        };
        let (va, vb) = (grid.at(a.0, a.1), grid.at(b.0, b.1));
        let (pa, pb) = (spec.cell_center(a.0, a.1), spec.cell_center(b.0, b.1));
        let w = if vb != va { (level - va) / (vb - va) } else { F::of(0.5) };
        [pa[0] + w * (pb[0] - pa[0]), pa[1] + w * (pb[1] - pa[1])]
    };

    let mut incident: HashMap<EdgeKey, Vec<usize>> = HashMap::new();
    for (s, (a, b)) in segments.iter().enumerate() {
        incident.entry(*a).or_default().push(s);
        incident.entry(*b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let next_from =
        |key: EdgeKey, used: &[bool]| -> Option<usize> { incident.get(&key)?.iter().copied().find(|&s| !used[s]) };

    let mut chains = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let mut keys = std::collections::VecDeque::from([a, b]);
        // Extend forward from the tail, then backward from the head.
        while let Some(s) = next_from(*keys.back().unwrap(), &used) {
            used[s] = true;
            let (p, q) = segments[s];
            keys.push_back(if p == *keys.back().unwrap() { q } else { p });
        }
        while let Some(s) = next_from(*keys.front().unwrap(), &used) {
            used[s] = true;
            let (p, q) = segments[s];
            keys.push_front(if p == *keys.front().unwrap() { q } else { p });
        }
        let closed = keys.len() > 2 && keys.front() == keys.back();
        if closed {
            keys.pop_back();
        }
        chains.push(Chain {
            points: keys.into_iter().map(vertex).collect(),
            closed,
        });
    }
    chains
}

/// Density of the samples at UI time `t`, in model space.
///
/// Bandwidth follows Silverman's rule, floored at half a cell.
pub fn density_at_time<F: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<F>,
    kind: SamplerKind,
    steps: usize,
    t: F,
    n: usize,
    rng: &mut R,
    grid: &GridSpec<F>,
) -> Result<GridDensity<F>> {
    if !(t >= F::zero() && t <= F::one()) {
        return Err(Error::Usage(format!("t must lie in [0, 1], got {t}")));
    }
    let trajectories = sample_trajectories_normalized(model, kind, n, steps, rng)?;
    let (points, _) = positions_at_time(&trajectories, t)?;
    density_of_points(&points, grid)
}

/// KDE with Silverman's bandwidth, floored at half a cell.
pub fn density_of_points<F: Scalar>(points: &[Point<F>], grid: &GridSpec<F>) -> Result<GridDensity<F>> {
    let h = if points.len() >= 2 {
        silverman_bandwidth(points)?.max(grid.min_bandwidth())
    } else {
        grid.min_bandwidth()
    };
    kde(points, grid, h)
}
