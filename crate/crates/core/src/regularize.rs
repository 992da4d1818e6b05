//! Regularization of cloud weights and the Price-of-Anarchy bound machinery.
//!
//! A cloud advertises `f(w_x)` for its current weight `w_x`; the social cost
//! is `Σ_x w_x f(w_x)`. The built-in family is `f(w) = exp(-1 / (w + a))`,
//! which maps `[0, ∞)` into `[exp(-1/a), 1)` and tends to 1 as `a` grows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegError {
    #[error("regularization shift must be positive and finite, got {0}")]
    InvalidShift(f64),
    #[error("weight must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error("invalid bound parameters: lambda={lambda}, epsilon={epsilon} (need 0 <= epsilon < 1 and lambda >= 1 - epsilon)")]
    InvalidBound { lambda: f64, epsilon: f64 },
    #[error("invalid weight bracket [{w_min}, {w_max}]")]
    InvalidBracket { w_min: f64, w_max: f64 },
    #[error("degenerate bracket: correction factor {factor} is not positive")]
    DegenerateBracket { factor: f64 },
}

/// A monotone regularization `f` with `inf f < f(w) < 1` on `w >= 0`.
pub trait Regularizer: Send + Sync {
    /// Evaluates `f(w)`. Callers guarantee `w >= 0`.
    fn value(&self, w: f64) -> f64;

    /// The infimum `α = f(0)`.
    fn infimum(&self) -> f64;
}

/// `f(w) = exp(-1 / (w + a))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegFn {
    pub a: f64,
}

impl Default for RegFn {
    fn default() -> Self {
        Self { a: 9.0 }
    }
}

impl RegFn {
    pub fn new(a: f64) -> Result<Self, RegError> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(RegError::InvalidShift(a));
        }
        Ok(Self { a })
    }

    /// Checked evaluation; rejects negative weights.
    pub fn eval(&self, w: f64) -> Result<f64, RegError> {
        if w < 0.0 || w.is_nan() {
            return Err(RegError::NegativeWeight(w));
        }
        Ok(self.value(w))
    }

    pub fn alpha(&self) -> f64 {
        (-1.0 / self.a).exp()
    }
}

impl Regularizer for RegFn {
    #[inline]
    fn value(&self, w: f64) -> f64 {
        (-1.0 / (w + self.a)).exp()
    }

    fn infimum(&self) -> f64 {
        self.alpha()
    }
}

/// Parameters `(λ, ε)` of the generic PoA bound together with the weight
/// bracket they were derived for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoaBound {
    pub lambda: f64,
    pub epsilon: f64,
    pub w_min: f64,
    pub w_max: f64,
}

impl PoaBound {
    pub fn new(lambda: f64, epsilon: f64, w_min: f64, w_max: f64) -> Result<Self, RegError> {
        if !(0.0..1.0).contains(&epsilon) || !(lambda >= 1.0 - epsilon) || !lambda.is_finite() {
            return Err(RegError::InvalidBound { lambda, epsilon });
        }
        check_bracket(w_min, w_max)?;
        Ok(Self {
            lambda,
            epsilon,
            w_min,
            w_max,
        })
    }

    /// `λ / (1 - ε)`, always `>= 1` for valid parameters.
    pub fn value(&self) -> f64 {
        self.lambda / (1.0 - self.epsilon)
    }
}

pub fn poa_bound(bound: &PoaBound) -> f64 {
    bound.value()
}

fn check_bracket(w_min: f64, w_max: f64) -> Result<(), RegError> {
    if !(w_min > 0.0 && w_min <= w_max && w_max.is_finite()) {
        return Err(RegError::InvalidBracket { w_min, w_max });
    }
    Ok(())
}

/// The largest `λ` for which `f(w) = exp(-1/(w+a))` meets the smoothness
/// condition on the bracket `[w_min, w_max]` at the given `ε`:
///
/// `λ = f(w_max + w_min) / f(w_min) · (1 - ε · w_max f(w_max) / (w_min f(w_max + w_min)))`
///
/// The condition is tight at `w* = w_min`, `w = w_max`.
pub fn theorem2_lambda(reg: &RegFn, epsilon: f64, w_min: f64, w_max: f64) -> Result<f64, RegError> {
    check_bracket(w_min, w_max)?;
    if !(epsilon >= 0.0) {
        return Err(RegError::InvalidBound {
            lambda: f64::NAN,
            epsilon,
        });
    }
    let f_sum = reg.value(w_max + w_min);
    let f_min = reg.value(w_min);
    let f_max = reg.value(w_max);
    let factor = 1.0 - epsilon * (w_max * f_max) / (w_min * f_sum);
    if !(factor > 0.0) {
        return Err(RegError::DegenerateBracket { factor });
    }
    Ok(f_sum / f_min * factor)
}

/// Sampling grid for [`check_lemma1_condition`].
///
/// `w` takes the value 0 plus `points` log-spaced values in
/// `[w_floor, w_max]`; `w*` takes `points` log-spaced values in
/// `[w_star_min, w_star_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaGrid {
    pub w_floor: f64,
    pub w_max: f64,
    pub w_star_min: f64,
    pub w_star_max: f64,
    pub points: usize,
}

impl LemmaGrid {
    pub const DEFAULT_POINTS: usize = 400;

    /// Covers `w ∈ [0, w_max]` and `w* ∈ (0, w_max]`, with the positive
    /// ranges starting six decades below `w_max`.
    pub fn full(w_max: f64) -> Self {
        Self {
            w_floor: w_max * 1e-6,
            w_max,
            w_star_min: w_max * 1e-6,
            w_star_max: w_max,
            points: Self::DEFAULT_POINTS,
        }
    }

    /// Restricts `w*` to the observed bracket `[w_min, w_max]`.
    pub fn bracket(w_min: f64, w_max: f64) -> Self {
        Self {
            w_floor: w_min.min(w_max * 1e-6),
            w_max,
            w_star_min: w_min,
            w_star_max: w_max,
            points: Self::DEFAULT_POINTS,
        }
    }

    fn w_values(&self) -> Vec<f64> {
        let mut v = vec![0.0];
        v.extend(logspace(self.w_floor, self.w_max, self.points));
        v
    }

    fn w_star_values(&self) -> Vec<f64> {
        logspace(self.w_star_min, self.w_star_max, self.points)
    }
}

fn logspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 || lo == hi {
        return vec![hi];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..points)
        .map(|k| {
            if k + 1 == points {
                hi
            } else {
                (llo + (lhi - llo) * k as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub w: f64,
    pub w_star: f64,
    pub lhs: f64,
    pub rhs: f64,
}

impl GridPoint {
    /// `rhs - lhs`; negative when the inequality is violated.
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaCheck {
    pub passed: bool,
    /// Point with the smallest slack (the worst violation when `passed` is false).
    pub tightest: GridPoint,
    pub evaluated: usize,
}

/// Relative slack tolerated at points where both sides coincide analytically.
const LEMMA_REL_TOL: f64 = 1e-12;

/// Checks `w* f(w + w*) <= λ w* f(w*) + ε w f(w)` on every grid point.
pub fn check_lemma1_condition<R: Regularizer>(
    reg: &R,
    lambda: f64,
    epsilon: f64,
    grid: &LemmaGrid,
) -> Result<LemmaCheck, RegError> {
    if !(0.0..1.0).contains(&epsilon) || !(lambda >= 1.0 - epsilon) {
        return Err(RegError::InvalidBound { lambda, epsilon });
    }
    if !(grid.w_star_min > 0.0 && grid.w_star_min <= grid.w_star_max && grid.w_floor > 0.0) {
        return Err(RegError::InvalidBracket {
            w_min: grid.w_star_min,
            w_max: grid.w_star_max,
        });
    }
    let ws = grid.w_values();
    let stars = grid.w_star_values();
    let mut passed = true;
    let mut tightest: Option<GridPoint> = None;
    for &w in &ws {
        let fw = reg.value(w);
        for &ws_ in &stars {
            let lhs = ws_ * reg.value(w + ws_);
            let rhs = lambda * ws_ * reg.value(ws_) + epsilon * w * fw;
            let p = GridPoint {
                w,
                w_star: ws_,
                lhs,
                rhs,
            };
            if p.slack() < -LEMMA_REL_TOL * lhs.abs().max(rhs.abs()) {
                passed = false;
            }
            if tightest.map_or(true, |t| p.slack() < t.slack()) {
                tightest = Some(p);
            }
        }
    }
    Ok(LemmaCheck {
        passed,
        tightest: tightest.expect("grid is non-empty"),
        evaluated: ws.len() * stars.len(),
    })
}

/// Smallest `λ` meeting the condition at every grid point for the given `ε`:
/// the maximum of `(w* f(w + w*) - ε w f(w)) / (w* f(w*))`.
pub fn required_lambda<R: Regularizer>(reg: &R, epsilon: f64, grid: &LemmaGrid) -> f64 {
    let stars = grid.w_star_values();
    let mut best = f64::NEG_INFINITY;
    for w in grid.w_values() {
        let ew = epsilon * w * reg.value(w);
        for &ws_ in &stars {
            let need = (ws_ * reg.value(w + ws_) - ew) / (ws_ * reg.value(ws_));
            best = best.max(need);
        }
    }
    best
}
