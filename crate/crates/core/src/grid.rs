//! Tensor grids on the truncated half-space and multilinear interpolation.
//!
//! Axis 0 covers [0, x1_max]; transverse axes cover symmetric intervals.
//! Interpolation clamps queries to the grid hull and reports when it did, so
//! callers can surface a truncation warning instead of extrapolating blindly.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GridError {
    #[error("grid too small: axis {axis} needs at least {needed} nodes, got {got}")]
    TooFewNodes {
        axis: usize,
        needed: usize,
        got: usize,
    },
    #[error("grid extent must be positive and finite on axis {0}")]
    BadExtent(usize),
    #[error("transverse spec length {got} does not match {expected} transverse axes")]
    TransverseMismatch { got: usize, expected: usize },
    #[error("value buffer length {got} does not match grid size {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

/// Uniform tensor grid specification: axis 0 covers [0, x1_max] with
/// x1_nodes nodes, transverse axis k covers [-w_k, w_k] with the paired
/// node count.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub x1_max: f64,
    pub x1_nodes: usize,
    pub transverse_half_width: Vec<f64>,
    pub transverse_nodes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SpaceGrid {
    axes: Vec<Vec<f64>>,
    strides: Vec<usize>,
    len: usize,
}

impl SpaceGrid {
    pub fn regular(spec: &GridSpec) -> Result<SpaceGrid, GridError> {
        if spec.transverse_half_width.len() != spec.transverse_nodes.len() {
            return Err(GridError::TransverseMismatch {
                got: spec.transverse_half_width.len(),
                expected: spec.transverse_nodes.len(),
            });
        }
        let mut axes = Vec::with_capacity(1 + spec.transverse_nodes.len());
        axes.push(uniform_axis(0, 0.0, spec.x1_max, spec.x1_nodes)?);
        for (k, (&w, &n)) in spec
            .transverse_half_width
            .iter()
            .zip(&spec.transverse_nodes)
            .enumerate()
        {
            axes.push(uniform_axis(k + 1, -w, w, n)?);
        }
        Ok(Self::from_axes(axes))
    }

    fn from_axes(axes: Vec<Vec<f64>>) -> SpaceGrid {
        let mut strides = vec![1usize; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].len();
        }
        let len = axes.iter().map(Vec::len).product();
        SpaceGrid { axes, strides, len }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    pub fn stride(&self, k: usize) -> usize {
        self.strides[k]
    }

    /// Coordinates of the flat-indexed node, written into out.
    pub fn node_coords(&self, flat: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut rest = flat;
        for k in 0..self.dim() {
            let i = rest / self.strides[k];
            rest %= self.strides[k];
            out[k] = self.axes[k][i];
        }
    }

    /// True when the flat-indexed node lies on the x1 = 0 face.
    pub fn on_boundary(&self, flat: usize) -> bool {
        flat / self.strides[0] == 0
    }

    /// Multilinear interpolation of a scalar field given by node values.
    /// Queries outside the hull are clamped to the nearest face; the second
    /// return reports whether clamping occurred.
    pub fn interpolate(&self, values: &[f64], x1: f64, transverse: &[f64]) -> (f64, bool) {
        self.interpolate_strided(values, 1, 0, x1, transverse)
    }

    /// As `interpolate`, over a strided component layout (node*stride+offset),
    /// so vector fields stored interleaved can be read per component.
    pub fn interpolate_strided(
        &self,
        values: &[f64],
        stride: usize,
        offset: usize,
        x1: f64,
        transverse: &[f64],
    ) -> (f64, bool) {
        debug_assert_eq!(values.len(), self.len * stride);
        debug_assert_eq!(transverse.len(), self.dim() - 1);
        let d = self.dim();
        let mut lo = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        let mut clamped = false;
        for k in 0..d {
            let x = if k == 0 { x1 } else { transverse[k - 1] };
            let (i, f, c) = locate(&self.axes[k], x);
            lo[k] = i;
            frac[k] = f;
            clamped |= c;
        }
        let mut acc = 0.0;
        for corner in 0..1usize << d {
            let mut w = 1.0;
            let mut flat = 0usize;
            for k in 0..d {
                let hi = (corner >> k) & 1 == 1;
                w *= if hi { frac[k] } else { 1.0 - frac[k] };
                flat += (lo[k] + hi as usize) * self.strides[k];
            }
            if w != 0.0 {
                acc += w * values[flat * stride + offset];
            }
        }
        (acc, clamped)
    }
}

const MAX_DIM: usize = 8;

fn uniform_axis(axis: usize, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, GridError> {
    if n < 3 {
        return Err(GridError::TooFewNodes {
            axis,
            needed: 3,
            got: n,
        });
    }
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return Err(GridError::BadExtent(axis));
    }
    Ok((0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect())
}

/// Cell index, local fraction, and clamp flag for a query on one axis.
fn locate(axis: &[f64], x: f64) -> (usize, f64, bool) {
    let n = axis.len();
    if x <= axis[0] {
        return (0, 0.0, x < axis[0]);
    }
    if x >= axis[n - 1] {
        return (n - 2, 1.0, x > axis[n - 1]);
    }
    let mut lo = 0usize;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if axis[mid] <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ((lo), (x - axis[lo]) / (axis[lo + 1] - axis[lo]), false)
}
