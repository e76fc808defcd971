//! Alignment of neuron matrices with different widths.
//!
//! The wider matrix `H1` (`n x a`) is mapped into the column space of the
//! narrower `H2` (`n x b`) with the linear map `P` (`b x a`) that minimizes
//! `||H1 P^T - H2||_F`. Each row of `P` is an independent least-squares
//! problem, so the whole map is `P = (H1^+ H2)^T`.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{solve_least_squares, LinalgError, Matrix};
use crate::metrics::NeuronMatrix;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("projection source has width {a} but target has {b}; the wider matrix must be projected")]
    Orientation { a: usize, b: usize },
    #[error("sample counts differ: {0} vs {1}")]
    SampleMismatch(usize, usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AlignError>;

#[derive(Debug, Clone, Serialize)]
pub struct Projection {
    /// `b x a` map from the source width to the target width.
    #[serde(skip)]
    pub p: Matrix,
    /// `||H1 P^T - H2||_F` at the optimum.
    pub residual: f64,
    pub source_dims: (usize, usize),
    pub sample_count: usize,
}

impl Projection {
    pub fn apply(&self, h1: &Matrix) -> Result<Matrix> {
        Ok(h1.matmul_transposed(&self.p)?)
    }
}

/// Minimum-norm least-squares projection of `h1` onto `h2`.
pub fn fit_projection(h1: impl AsRef<Matrix>, h2: impl AsRef<Matrix>) -> Result<Projection> {
    let (h1, h2) = (h1.as_ref(), h2.as_ref());
    let (n, a) = h1.shape();
    let b = h2.cols();
    if h2.rows() != n {
        return Err(AlignError::SampleMismatch(n, h2.rows()));
    }
    if a < b {
        return Err(AlignError::Orientation { a, b });
    }
    let w = solve_least_squares(h1, h2)?; // a x b
    let p = w.transpose();
    let residual = h1.matmul(&w)?.sub(h2)?.frobenius_norm();
    Ok(Projection {
        p,
        residual,
        source_dims: (a, b),
        sample_count: n,
    })
}

/// Which input of [`hetero_align`] was projected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Projected {
    Victim,
    Comparison,
}

#[derive(Debug, Clone)]
pub struct Aligned {
    /// Victim side, projected if it was the wider one.
    pub victim: NeuronMatrix,
    /// Comparison side, projected if it was strictly wider.
    pub other: NeuronMatrix,
    pub projection: Projection,
    pub projected: Projected,
    /// Set when there are fewer than twice as many samples as projected
    /// columns; such fits are close to interpolation and flatten distances.
    pub warning: Option<String>,
}

/// Brings a victim matrix and a comparison matrix to a common width.
///
/// The wider side is projected onto the narrower; on equal widths the
/// victim side is projected.
pub fn hetero_align(victim: &NeuronMatrix, other: &NeuronMatrix) -> Result<Aligned> {
    if victim.samples() != other.samples() {
        return Err(AlignError::SampleMismatch(victim.samples(), other.samples()));
    }
    let n = victim.samples();
    let (proj, projected, aligned_victim, aligned_other) = if victim.width() >= other.width() {
        let proj = fit_projection(victim, other)?;
        let mapped = proj.apply(&victim.values)?;
        (proj, Projected::Victim, victim.with_values(mapped), other.clone())
    } else {
        let proj = fit_projection(other, victim)?;
        let mapped = proj.apply(&other.values)?;
        (proj, Projected::Comparison, victim.clone(), other.with_values(mapped))
    };
    let a = proj.source_dims.0;
    let warning = (n < 2 * a).then(|| {
        format!(
            "only {n} samples for a {a}-column projection ({} vs {}); aligned distances may be uninformative",
            victim.model_id, other.model_id
        )
    });
    Ok(Aligned {
        victim: aligned_victim,
        other: aligned_other,
        projection: proj,
        projected,
        warning,
    })
}
