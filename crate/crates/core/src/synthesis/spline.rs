//! Shape-preserving quadratic spline (Schumaker-type).
//!
//! Each data interval carries one extra knot, so every piece is a quadratic
//! with linear derivative. Node slopes are Fritsch-Butland harmonic means of
//! the neighboring secants. When the secant lies between the end slopes the
//! knot is placed so the derivative passes through the secant value there,
//! which keeps convex data convex. Otherwise the knot sits at the midpoint
//! and the slope limits keep the piece monotone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Piece {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    s0: f64,
    s1: f64,
    /// Distance from `x0` to the inner knot.
    alpha: f64,
    /// Derivative at the inner knot.
    s_knot: f64,
}

impl Piece {
    fn eval(&self, x: f64) -> f64 {
        if x <= self.x0 {
            return self.y0;
        }
        if x >= self.x1 {
            return self.y1;
        }
        let t = x - self.x0;
        let beta = (self.x1 - self.x0) - self.alpha;
        let v = if t <= self.alpha && self.alpha > 0.0 {
            self.y0 + self.s0 * t + (self.s_knot - self.s0) * t * t / (2.0 * self.alpha)
        } else {
            let u = t - self.alpha;
            let at_knot = self.y0 + self.alpha * (self.s0 + self.s_knot) / 2.0;
            let curve = if beta > 0.0 {
                (self.s1 - self.s_knot) * u * u / (2.0 * beta)
            } else {
                0.0
            };
            at_knot + self.s_knot * u + curve
        };
        v.clamp(self.y0.min(self.y1), self.y0.max(self.y1))
    }
}

/// Monotone quadratic interpolant through strictly increasing abscissae.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapePreservingQuadratic {
    pieces: Vec<Piece>,
}

fn same_sign(a: f64, b: f64) -> bool {
    (a > 0.0 && b > 0.0) || (a < 0.0 && b < 0.0)
}

fn limit_end_slope(s: f64, secant: f64) -> f64 {
    if !same_sign(s, secant) {
        0.0
    } else if s.abs() > 2.0 * secant.abs() {
        2.0 * secant
    } else {
        s
    }
}

impl ShapePreservingQuadratic {
    /// Fails unless `xs` is strictly increasing and `ys` is monotone.
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::domain("spline needs at least two nodes of matching length"));
        }
        if xs.iter().chain(ys).any(|v| !v.is_finite()) {
            return Err(Error::domain("spline nodes must be finite"));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("spline abscissae must be strictly increasing"));
        }
        let secants: Vec<f64> = xs
            .windows(2)
            .zip(ys.windows(2))
            .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
            .collect();
        let rising = secants.iter().any(|&d| d > 0.0);
        let falling = secants.iter().any(|&d| d < 0.0);
        if rising && falling {
            let n = secants
                .windows(2)
                .position(|w| (w[0] > 0.0 && w[1] < 0.0) || (w[0] < 0.0 && w[1] > 0.0))
                .map_or(0, |i| i + 1);
            return Err(Error::NonMonotone { n });
        }

        let nodes = xs.len();
        let mut slopes = vec![0.0; nodes];
        for i in 1..nodes - 1 {
            let (a, b) = (secants[i - 1], secants[i]);
            if same_sign(a, b) {
                slopes[i] = 2.0 * a * b / (a + b);
            }
        }
        if nodes == 2 {
            slopes[0] = secants[0];
            slopes[1] = secants[0];
        } else {
            slopes[0] = limit_end_slope(2.0 * secants[0] - slopes[1], secants[0]);
            let last = nodes - 1;
            slopes[last] = limit_end_slope(2.0 * secants[last - 1] - slopes[last - 1], secants[last - 1]);
        }

        let pieces = (0..nodes - 1)
            .map(|i| {
                let h = xs[i + 1] - xs[i];
                let (s0, s1, d) = (slopes[i], slopes[i + 1], secants[i]);
                let between = (s0 <= d && d <= s1) || (s1 <= d && d <= s0);
                let (alpha, s_knot) = if s0 == s1 {
                    (h / 2.0, d)
                } else if between {
                    (h * (s1 - d) / (s1 - s0), d)
                } else {
                    (h / 2.0, 2.0 * d - (s0 + s1) / 2.0)
                };
                Piece {
                    x0: xs[i],
                    x1: xs[i + 1],
                    y0: ys[i],
                    y1: ys[i + 1],
                    s0,
                    s1,
                    alpha: alpha.clamp(0.0, h),
                    s_knot,
                }
            })
            .collect();
        Ok(Self { pieces })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.pieces[0].x0, self.pieces[self.pieces.len() - 1].x1)
    }

    /// Value at `x`, held constant outside the node range.
    pub fn eval(&self, x: f64) -> f64 {
        let idx = self.pieces.partition_point(|p| p.x1 < x).min(self.pieces.len() - 1);
        self.pieces[idx].eval(x)
    }
}
