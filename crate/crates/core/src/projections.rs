//! Oblique projections in the discrete `H` inner product.
//!
//! `P` projects onto `span(range)` along the `M`-orthogonal complement of
//! `span(complement)`: `P y = range G^{-1} complement^T M y` with the cross
//! Gram `G = complement^T M range`.

use nalgebra::{ColPivQR, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::Banded;

/// Largest accepted condition number of the cross Gram matrix.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct ObliqueProjector {
    pub range_basis: DMatrix<f64>,
    pub complement_basis: DMatrix<f64>,
    /// `M * complement`, the functionals defining the kernel.
    weighted_complement: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    gram_qr: ColPivQR<f64, Dyn, Dyn>,
    pub condition: f64,
}

pub fn make_projector(
    range: &DMatrix<f64>,
    complement: &DMatrix<f64>,
    mass: &Banded,
) -> Result<ObliqueProjector> {
    if range.ncols() != complement.ncols()
        || range.nrows() != complement.nrows()
        || range.nrows() != mass.dim()
    {
        return Err(Error::invalid(
            "projections",
            format!(
                "basis shapes {}x{} and {}x{} do not match mass dimension {}",
                range.nrows(),
                range.ncols(),
                complement.nrows(),
                complement.ncols(),
                mass.dim()
            ),
        ));
    }
    let weighted_complement = mass.mul_mat(complement);
    let gram = weighted_complement.transpose() * range;
    let condition = if gram.ncols() == 0 {
        1.0
    } else {
        let sv = gram.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        }
    };
    if !(condition <= MAX_GRAM_CONDITION) {
        return Err(Error::numerical(
            "projections",
            format!(
                "cross Gram condition number {condition:e} exceeds {MAX_GRAM_CONDITION:e}: no direct sum"
            ),
        ));
    }
    let gram_qr = gram.clone().col_piv_qr();
    Ok(ObliqueProjector {
        range_basis: range.clone(),
        complement_basis: complement.clone(),
        weighted_complement,
        gram,
        gram_qr,
        condition,
    })
}

impl ObliqueProjector {
    pub fn rank(&self) -> usize {
        self.range_basis.ncols()
    }

    /// Coordinates of `P y` in the range basis.
    pub fn coefficients(&self, y: &DVector<f64>) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(0);
        }
        let rhs = self.weighted_complement.transpose() * y;
        self.gram_qr.solve(&rhs).expect("gram invertibility is checked at construction")
    }

    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        if self.rank() == 0 {
            return DVector::zeros(y.len());
        }
        &self.range_basis * self.coefficients(y)
    }
}

/// `y = theta + phi` with `theta = P y` and `phi` in the kernel of `P`.
pub fn theta_phi_split(p_e: &ObliqueProjector, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let theta = p_e.apply(y);
    let phi = y - &theta;
    (theta, phi)
}

/// Largest relative violation of `(P u, v)_H = (u, Q v)_H` over the test pairs,
/// where `Q` is the projector with range and complement swapped.
pub fn adjoint_check(
    p: &ObliqueProjector,
    q: &ObliqueProjector,
    mass: &Banded,
    pairs: &[(DVector<f64>, DVector<f64>)],
) -> f64 {
    pairs
        .iter()
        .map(|(u, v)| {
            let lhs = mass.bilinear(&p.apply(u), v);
            let rhs = mass.bilinear(u, &q.apply(v));
            let scale = (mass.quad_form(u) * mass.quad_form(v)).sqrt().max(f64::MIN_POSITIVE);
            (lhs - rhs).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// Swapped-pair projector: onto `span(complement)` along `range^perp`.
pub fn dual_projector(p: &ObliqueProjector, mass: &Banded) -> Result<ObliqueProjector> {
    make_projector(&p.complement_basis, &p.range_basis, mass)
}
