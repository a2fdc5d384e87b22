//! Bounded scalar fields on the half-space, supplied as callables with a
//! declared sup bound, and their odd reflection through the boundary plane.

use std::fmt;
use std::sync::Arc;

type FieldFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Bounded measurable function on the open half-space. `bound` is the
/// declared sup norm used by operator estimates; `radial_breakpoints` are
/// x1-locations of jumps, where quadratures split their panels.
#[derive(Clone)]
pub struct HalfSpaceFn {
    f: Arc<FieldFn>,
    bound: f64,
    radial_breakpoints: Arc<[f64]>,
}

impl HalfSpaceFn {
    pub fn new(bound: f64, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::with_breakpoints(bound, Vec::new(), f)
    }

    pub fn with_breakpoints(
        bound: f64,
        mut breakpoints: Vec<f64>,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        assert!(bound >= 0.0 && bound.is_finite(), "declared bound must be finite");
        breakpoints.sort_by(f64::total_cmp);
        HalfSpaceFn {
            f: Arc::new(f),
            bound,
            radial_breakpoints: breakpoints.into(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(c.abs(), move |_, _| c)
    }

    #[inline]
    pub fn eval(&self, x1: f64, transverse: &[f64]) -> f64 {
        (self.f)(x1, transverse)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn radial_breakpoints(&self) -> &[f64] {
        &self.radial_breakpoints
    }
}

impl fmt::Debug for HalfSpaceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HalfSpaceFn")
            .field("bound", &self.bound)
            .field("radial_breakpoints", &self.radial_breakpoints)
            .finish_non_exhaustive()
    }
}

/// Odd reflection: matches f on {x1 > 0}, equals -f(-x1, x') on {x1 < 0},
/// and vanishes on the plane {x1 = 0}.
pub fn extend_odd(f: &HalfSpaceFn) -> impl Fn(f64, &[f64]) -> f64 + Send + Sync + '_ {
    move |x1: f64, xp: &[f64]| {
        if x1 > 0.0 {
            f.eval(x1, xp)
        } else if x1 < 0.0 {
            -f.eval(-x1, xp)
        } else {
            0.0
        }
    }
}
