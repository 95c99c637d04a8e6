//! Chebyshev polynomial filters: coefficient containers, frequency-response
//! evaluation, basis precomputation via the three-term recurrence, filter
//! initialization strategies, and the smoothing (total squared variation)
//! loss over a sampled spectrum.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::graph::{NormalizedOperator, OperatorKind};
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Chebyshev polynomial of the first kind, T_k(t).
pub fn chebyshev(k: usize, t: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => t,
        _ => {
            let mut prev = 1.0;
            let mut cur = t;
            for _ in 2..=k {
                let next = 2.0 * t * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Learnable polynomial filter coefficients for one expert. The frequency
/// response at eigenvalue lambda in [0, 2] is sum_k theta_k T_k(lambda - 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCoeffs {
    theta: Vec<f64>,
}

impl FilterCoeffs {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.len() < 2 {
            return Err(Error::invalid("filter order must be at least 1"));
        }
        Ok(FilterCoeffs { theta })
    }

    pub fn order(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn response(&self, lambda: f64) -> Result<f64> {
        if !(0.0..=2.0).contains(&lambda) {
            return Err(Error::invalid(format!(
                "eigenvalue {lambda} outside the spectrum [0, 2]"
            )));
        }
        let t = lambda - 1.0;
        Ok(self
            .theta
            .iter()
            .enumerate()
            .map(|(k, &c)| c * chebyshev(k, t))
            .sum())
    }
}

/// Coefficient initialization families. The power-based families break the
/// symmetry between experts; uniform leaves all coefficients at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// [alpha^0, alpha^1, ..., alpha^K]
    Decreasing,
    /// [alpha^K, ..., alpha^1, alpha^0]
    Increasing,
    /// [1, 1, ..., 1]
    Uniform,
}

impl InitStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decreasing" => Ok(InitStrategy::Decreasing),
            "increasing" => Ok(InitStrategy::Increasing),
            "uniform" => Ok(InitStrategy::Uniform),
            _ => Err(Error::invalid(format!(
                "unknown init strategy '{s}' (expected decreasing|increasing|uniform)"
            ))),
        }
    }
}

pub fn init_coeffs(strategy: InitStrategy, alpha: f64, order: usize) -> Result<FilterCoeffs> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    if order < 1 {
        return Err(Error::invalid("filter order must be at least 1"));
    }
    let theta = match strategy {
        InitStrategy::Decreasing => (0..=order).map(|k| alpha.powi(k as i32)).collect(),
        InitStrategy::Increasing => (0..=order)
            .map(|k| alpha.powi((order - k) as i32))
            .collect(),
        InitStrategy::Uniform => vec![1.0; order + 1],
    };
    FilterCoeffs::new(theta)
}

/// Ascending sample points spanning the spectrum [0, 2], used by the
/// smoothing loss and for exporting response curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingGrid {
    points: Vec<f64>,
}

impl SmoothingGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("grid needs at least 2 points"));
        }
        if points.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("grid points must be ascending"));
        }
        if points[0] != 0.0 || *points.last().unwrap() != 2.0 {
            return Err(Error::invalid("grid must span [0, 2] inclusive"));
        }
        Ok(SmoothingGrid { points })
    }

    /// `segments + 1` uniform points on [0, 2].
    pub fn uniform(segments: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::invalid("need at least one segment"));
        }
        let pts = (0..=segments)
            .map(|i| 2.0 * i as f64 / segments as f64)
            .collect();
        SmoothingGrid::new(pts)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

impl Default for SmoothingGrid {
    /// 51 uniform points on [0, 2].
    fn default() -> Self {
        SmoothingGrid::uniform(50).expect("static grid")
    }
}

/// Sum of squared response differences between consecutive grid points.
/// Zero exactly when the response is constant across the grid.
pub fn smoothing_loss(f: &FilterCoeffs, grid: &SmoothingGrid) -> f64 {
    let mut prev = None;
    let mut acc = 0.0;
    for &x in grid.points() {
        let r = f.response(x).expect("grid points lie in [0, 2]");
        if let Some(p) = prev {
            let d: f64 = r - p;
            acc += d * d;
        }
        prev = Some(r);
    }
    acc
}

/// (S+1) x (K+1) matrix of T_k(x_i - 1) over the grid: multiplying it by a
/// coefficient column yields the response samples.
pub fn grid_basis_matrix(grid: &SmoothingGrid, order: usize) -> Matrix {
    let pts = grid.points();
    let mut out = Matrix::zeros(pts.len(), order + 1);
    for (i, &x) in pts.iter().enumerate() {
        for k in 0..=order {
            out.set(i, k, chebyshev(k, x - 1.0));
        }
    }
    out
}

/// S x (S+1) first-difference matrix: row i maps samples to
/// `samples[i+1] - samples[i]`.
pub fn difference_matrix(num_points: usize) -> Matrix {
    let mut out = Matrix::zeros(num_points - 1, num_points);
    for i in 0..num_points - 1 {
        out.set(i, i, -1.0);
        out.set(i, i + 1, 1.0);
    }
    out
}

/// Precomputed Chebyshev propagations of an input block: `blocks[k]` holds
/// T_k(op) * h, built with the three-term recurrence (k sparse products).
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    blocks: Vec<Matrix>,
}

impl SpectralBasis {
    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn order(&self) -> usize {
        self.blocks.len() - 1
    }
}

pub fn precompute_basis(
    op: &NormalizedOperator,
    h: &Matrix,
    order: usize,
) -> Result<SpectralBasis> {
    if op.kind() != OperatorKind::ShiftedLaplacian {
        return Err(Error::invalid(
            "basis precomputation expects the shifted Laplacian operator",
        ));
    }
    if order < 1 {
        return Err(Error::invalid("filter order must be at least 1"));
    }
    let mut blocks = Vec::with_capacity(order + 1);
    blocks.push(h.clone());
    blocks.push(op.apply(h)?);
    for k in 2..=order {
        let next = op.apply(&blocks[k - 1])?.scale(2.0).sub(&blocks[k - 2])?;
        blocks.push(next);
    }
    Ok(SpectralBasis { blocks })
}

/// Sum_k theta_k `blocks[k]`: the assembled filter output.
pub fn assemble(coeffs: &FilterCoeffs, basis: &SpectralBasis) -> Result<Matrix> {
    if coeffs.order() != basis.order() {
        return Err(Error::shape(format!(
            "coefficient order {} does not match basis order {}",
            coeffs.order(),
            basis.order()
        )));
    }
    let mut out = basis.blocks[0].scale(coeffs.theta[0]);
    for (k, block) in basis.blocks.iter().enumerate().skip(1) {
        out.add_assign(&block.scale(coeffs.theta[k]));
    }
    Ok(out)
}

/// Emit response curves as CSV rows `lambda,expert_0,...,expert_{m-1}` over
/// the grid.
pub fn export_filters(
    filters: &[FilterCoeffs],
    grid: &SmoothingGrid,
    out: &mut dyn Write,
) -> Result<()> {
    write!(out, "lambda")?;
    for i in 0..filters.len() {
        write!(out, ",expert_{i}")?;
    }
    writeln!(out)?;
    for &x in grid.points() {
        write!(out, "{x}")?;
        for f in filters {
            write!(out, ",{}", f.response(x)?)?;
        }
        writeln!(out)?;
    }
    Ok(())
}
