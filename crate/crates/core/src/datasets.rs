//! Builtin point clouds and hand-drawn stroke ingestion.
//!
//! Every dataset lives in the normalized `[-1, 1]²` model space; `bounds`
//! records the box of the original coordinates that maps onto it.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Bounds, Point};
use crate::sampling::normal2;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Smiley,
    ThreeDots,
    Custom,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Smiley => "smiley",
            DatasetKind::ThreeDots => "three_dots",
            DatasetKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smiley" => Ok(DatasetKind::Smiley),
            "three_dots" => Ok(DatasetKind::ThreeDots),
            "custom" => Ok(DatasetKind::Custom),
            other => Err(Error::Usage(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub points: Vec<Point<F>>,
    pub bounds: Bounds<F>,
    pub kind: DatasetKind,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Builtin generator by kind. `Custom` has no generator.
    pub fn builtin(kind: DatasetKind, n: usize, seed: u64) -> Result<Self> {
        match kind {
            DatasetKind::Smiley => gen_smiley(n, seed),
            DatasetKind::ThreeDots => gen_three_dots(n, seed),
            DatasetKind::Custom => Err(Error::Usage("custom datasets are built from strokes".into())),
        }
    }
}

/// Component centers of the three-dots mixture: radius 0.7 at 90°, 210°, 330°.
pub fn three_dots_centers() -> [Point<f64>; 3] {
    [90.0f64, 210.0, 330.0].map(|deg| {
        let a = deg.to_radians();
        [0.7 * a.cos(), 0.7 * a.sin()]
    })
}

pub const THREE_DOTS_SIGMA: f64 = 0.1;

/// Equal mixture of three isotropic Gaussians (σ = 0.1); point `i` belongs to
/// component `i mod 3`.
pub fn gen_three_dots<F: Scalar>(n: usize, seed: u64) -> Result<Dataset<F>> {
    if n < 3 {
        return Err(Error::Usage(format!("three_dots needs n >= 3, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = three_dots_centers();
    let points = (0..n)
        .map(|i| {
            let c = centers[i % 3];
            let z: Point<f64> = normal2(&mut rng);
            [
                F::of(c[0] + THREE_DOTS_SIGMA * z[0]),
                F::of(c[1] + THREE_DOTS_SIGMA * z[1]),
            ]
        })
        .collect();
    Ok(Dataset {
        points,
        bounds: Bounds::unit(),
        kind: DatasetKind::ThreeDots,
    })
}

/// Geometry of the smiley face.
pub mod smiley {
    pub const EYE_CENTERS: [[f64; 2]; 2] = [[-0.35, 0.35], [0.35, 0.35]];
    pub const EYE_SIGMA: f64 = 0.06;
    pub const MOUTH_RADIUS: f64 = 0.6;
    pub const MOUTH_DEGREES: (f64, f64) = (200.0, 340.0);
    pub const FACE_RADIUS: f64 = 0.95;
    pub const CURVE_JITTER: f64 = 0.03;
    /// Mass of (left eye, right eye, mouth, outline).
    pub const WEIGHTS: [f64; 4] = [0.15, 0.15, 0.40, 0.30];
}

/// Splits `n` into counts proportional to `weights` (largest remainder).
/// When `n` allows it every component gets at least one point, taken from
/// the largest count.
pub fn stratified_counts(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    if n >= weights.len() {
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let donor = (0..counts.len())
                .max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))
                .unwrap();
            counts[donor] -= 1;
            counts[empty] += 1;
        }
    }
    counts
}

/// Smiley face: two Gaussian eyes, a mouth arc and the face outline. Curve
/// components are uniform in arc length with radial jitter.
///
/// Points are emitted component by component (eyes, mouth, outline) with
/// counts fixed by [`stratified_counts`].
pub fn gen_smiley<F: Scalar>(n: usize, seed: u64) -> Result<Dataset<F>> {
    use smiley::*;
    if n < 4 {
        return Err(Error::Usage(format!("smiley needs n >= 4, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = stratified_counts(n, &WEIGHTS);
    let mut points: Vec<Point<f64>> = Vec::with_capacity(n);
    for (eye, &count) in EYE_CENTERS.iter().zip(&counts[..2]) {
        for _ in 0..count {
            let z: Point<f64> = normal2(&mut rng);
            points.push([eye[0] + EYE_SIGMA * z[0], eye[1] + EYE_SIGMA * z[1]]);
        }
    }
    let (lo, hi) = (MOUTH_DEGREES.0.to_radians(), MOUTH_DEGREES.1.to_radians());
    let arc = |rng: &mut ChaCha8Rng, radius: f64, a0: f64, a1: f64| {
        let a = rng.random_range(a0..a1);
        let z: Point<f64> = normal2(rng);
        let r = radius + CURVE_JITTER * z[0];
        [r * a.cos(), r * a.sin()]
    };
    for _ in 0..counts[2] {
        points.push(arc(&mut rng, MOUTH_RADIUS, lo, hi));
    }
    for _ in 0..counts[3] {
        points.push(arc(&mut rng, FACE_RADIUS, 0.0, 2.0 * PI));
    }
    Ok(Dataset {
        points: points.into_iter().map(|p| [F::of(p[0]), F::of(p[1])]).collect(),
        bounds: Bounds::unit(),
        kind: DatasetKind::Smiley,
    })
}

pub const NORMALIZATION_MARGIN: f64 = 0.1;

/// Square box around `points` enlarged by the normalization margin.
///
/// Falls back to half-width `fallback` when all points coincide.
pub fn fitting_square<F: Scalar>(points: &[Point<F>], fallback: F) -> Option<Bounds<F>> {
    let first = points.first()?;
    let (mut min, mut max) = (*first, *first);
    for p in points {
        for c in 0..2 {
            min[c] = min[c].min(p[c]);
            max[c] = max[c].max(p[c]);
        }
    }
    let half = F::of(0.5);
    let center = [(min[0] + max[0]) * half, (min[1] + max[1]) * half];
    let side = (max[0] - min[0]).max(max[1] - min[1]);
    let mut r = side * half * F::of(1.0 + NORMALIZATION_MARGIN);
    if r <= F::zero() {
        r = fallback;
    }
    Some(Bounds::new(
        [center[0] - r, center[1] - r],
        [center[0] + r, center[1] + r],
    ))
}

/// Maps points into `[-1, 1]²` through their fitting square, preserving the
/// aspect ratio. Returns the mapped points and the square used.
pub fn normalize_points<F: Scalar>(points: &[Point<F>]) -> Option<(Vec<Point<F>>, Bounds<F>)> {
    let bounds = fitting_square(points, F::one())?;
    Some((points.iter().map(|&p| bounds.to_normalized(p)).collect(), bounds))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
}

/// Freehand strokes in canvas pixel coordinates.
///
/// Wire form: `{"strokes": [[[x, y], ...], ...], "canvas": {"width": w, "height": h}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeSet {
    pub strokes: Vec<Vec<[f64; 2]>>,
    pub canvas: Canvas,
}

impl StrokeSet {
    pub fn validate(&self) -> Result<()> {
        let Canvas { width, height } = self.canvas;
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(Error::Usage("canvas must have positive finite size".into()));
        }
        if self.strokes.is_empty() {
            return Err(Error::Usage("stroke set is empty".into()));
        }
        for (i, stroke) in self.strokes.iter().enumerate() {
            if stroke.is_empty() {
                return Err(Error::Usage(format!("stroke {i} has no vertices")));
            }
            for v in stroke {
                let inside = v[0].is_finite()
                    && v[1].is_finite()
                    && (0.0..=width).contains(&v[0])
                    && (0.0..=height).contains(&v[1]);
                if !inside {
                    return Err(Error::Usage(format!(
                        "stroke {i} has vertex ({}, {}) outside the {width}x{height} canvas",
                        v[0], v[1]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pieces of a stroke set that points are sampled from.
enum Piece {
    Segment([f64; 2], [f64; 2]),
    Atom([f64; 2]),
}

/// Samples `n` points uniformly by arc length along the strokes, with
/// isotropic Gaussian jitter (in normalized units).
///
/// Single-vertex strokes are atoms weighted like one average segment.
pub fn strokes_to_dataset<F: Scalar>(
    strokes: &StrokeSet,
    n: usize,
    jitter_sigma: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    strokes.validate()?;
    if n == 0 {
        return Err(Error::Usage("need at least one point".into()));
    }
    if !(jitter_sigma >= 0.0 && jitter_sigma.is_finite()) {
        return Err(Error::Usage(format!(
            "jitter must be finite and >= 0, got {jitter_sigma}"
        )));
    }
    let vertices: Vec<Point<f64>> = strokes.strokes.iter().flatten().copied().collect();
    let fallback = 0.05 * strokes.canvas.width.max(strokes.canvas.height);
    let bounds = fitting_square(&vertices, fallback).expect("validated nonempty");

    let mut pieces = Vec::new();
    let mut lengths = Vec::new();
    for stroke in &strokes.strokes {
        let mapped: Vec<Point<f64>> = stroke.iter().map(|&v| bounds.to_normalized(v)).collect();
        if mapped.len() == 1 {
            pieces.push(Piece::Atom(mapped[0]));
            lengths.push(None);
        } else {
            for w in mapped.windows(2) {
                let len = crate::geometry::dist2(w[0], w[1]).sqrt();
                pieces.push(Piece::Segment(w[0], w[1]));
                lengths.push(Some(len));
            }
        }
    }
    let seg_lengths: Vec<f64> = lengths.iter().flatten().copied().collect();
    let total_seg: f64 = seg_lengths.iter().sum();
    let atom_weight = if total_seg > 0.0 {
        total_seg / seg_lengths.len() as f64
    } else {
        1.0
    };
    let cumulative: Vec<f64> = lengths
        .iter()
        .scan(0.0, |acc, l| {
            *acc += l.unwrap_or(atom_weight);
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().expect("at least one piece");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let u = rng.random_range(0.0..total);
            let idx = cumulative.partition_point(|&c| c <= u).min(pieces.len() - 1);
            let base = match pieces[idx] {
                Piece::Atom(p) => p,
                Piece::Segment(a, b) => {
                    let start = if idx == 0 { 0.0 } else { cumulative[idx - 1] };
                    let span = cumulative[idx] - start;
                    let f = if span > 0.0 {
                        ((u - start) / span).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
                }
            };
            let z: Point<f64> = normal2(&mut rng);
            [
                F::of(base[0] + jitter_sigma * z[0]),
                F::of(base[1] + jitter_sigma * z[1]),
            ]
        })
        .collect();
    Ok(Dataset {
        points,
        bounds: bounds.cast(),
        kind: DatasetKind::Custom,
    })
}
