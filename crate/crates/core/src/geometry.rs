//! Points and axis-aligned boxes in the plane.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// A point (or vector) in the plane.
pub type Point<F> = [F; 2];

/// Axis-aligned box `[min, max]`.
///
/// Datasets record the box that maps their original coordinates onto the
/// normalized `[-1, 1]²` square the models operate in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds<F> {
    pub min: Point<F>,
    pub max: Point<F>,
}

impl<F: Scalar> Bounds<F> {
    pub fn new(min: Point<F>, max: Point<F>) -> Self {
        Self { min, max }
    }

    /// The `[-1, 1]²` box; normalization through it is the identity.
    pub fn unit() -> Self {
        Self::new([-F::one(), -F::one()], [F::one(), F::one()])
    }

    /// Square box `[-r, r]²`.
    pub fn symmetric(r: F) -> Self {
        Self::new([-r, -r], [r, r])
    }

    pub fn width(&self) -> F {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> F {
        self.max[1] - self.min[1]
    }

    pub fn center(&self) -> Point<F> {
        let half = F::of(0.5);
        [(self.min[0] + self.max[0]) * half, (self.min[1] + self.max[1]) * half]
    }

    pub fn contains(&self, p: Point<F>) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    /// Maps a point in this box onto `[-1, 1]²` (per axis).
    pub fn to_normalized(&self, p: Point<F>) -> Point<F> {
        let c = self.center();
        let two = F::of(2.0);
        [(p[0] - c[0]) * two / self.width(), (p[1] - c[1]) * two / self.height()]
    }

    /// Inverse of [`Bounds::to_normalized`].
    pub fn from_normalized(&self, p: Point<F>) -> Point<F> {
        let c = self.center();
        let half = F::of(0.5);
        [c[0] + p[0] * self.width() * half, c[1] + p[1] * self.height() * half]
    }

    pub fn cast<G: Scalar>(&self) -> Bounds<G> {
        let c = |v: F| G::of(v.to_f64_lossy());
        Bounds::new([c(self.min[0]), c(self.min[1])], [c(self.max[0]), c(self.max[1])])
    }
}

#[inline]
pub(crate) fn dist2<F: Scalar>(a: Point<F>, b: Point<F>) -> F {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}
