//! Everything spatial that does not depend on the random sample.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::linalg::{Banded, BandedLu};
use crate::mesh_fem::{NormEvaluator, RectGrid};
use crate::projections::{dual_projector, make_projector, ObliqueProjector};
use crate::spectral_actuators::{alpha_1, build_actuators, build_eigenbasis, ActuatorSet, EigenBasis};

#[derive(Debug, Clone)]
pub struct SpatialSetup {
    pub grid: RectGrid,
    pub mass: Banded,
    pub mass_lu: BandedLu,
    pub laplacian: Banded,
    pub norms: NormEvaluator,
    pub actuators: ActuatorSet,
    pub eigenbasis: EigenBasis,
    /// Onto `E_N` along `O_N^perp`.
    pub p_e: ObliqueProjector,
    /// Onto `O_N` along `E_N^perp`.
    pub p_o: ObliqueProjector,
    /// `M C`: maps actuator coefficients to load vectors.
    pub control_matrix: DMatrix<f64>,
    pub alpha_1: f64,
}

impl SpatialSetup {
    pub fn new(grid: RectGrid, n_actuators: usize, r: f64) -> Result<Self> {
        let mass = grid.assemble_mass();
        let laplacian = grid.assemble_laplacian();
        let mass_lu = mass.lu()?;
        let norms = NormEvaluator::new(mass.clone(), laplacian.clone())?;
        let actuators = build_actuators(&grid, n_actuators, r)?;
        let eigenbasis = build_eigenbasis(&grid, &mass, &laplacian, n_actuators)?;
        let p_e = make_projector(&eigenbasis.functions, &actuators.indicators, &mass)?;
        let p_o = dual_projector(&p_e, &mass)?;
        let control_matrix = mass.mul_mat(&actuators.indicators);
        let alpha_1 = alpha_1(&grid);
        Ok(SpatialSetup {
            grid,
            mass,
            mass_lu,
            laplacian,
            norms,
            actuators,
            eigenbasis,
            p_e,
            p_o,
            control_matrix,
            alpha_1,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.grid.n_dofs()
    }

    pub fn n_controls(&self) -> usize {
        self.actuators.n_sigma()
    }
}
