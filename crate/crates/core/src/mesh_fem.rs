//! Tensor-product Q1 discretization of a rectangle `D = (0, L_1) x ... x (0, L_d)`
//! with homogeneous Dirichlet conditions.
//!
//! Degrees of freedom sit on interior nodes, ordered lexicographically with
//! the first coordinate running fastest. Coefficient fields are evaluated on
//! the full node lattice (boundary included) because the diffusion enters
//! through per-cell vertex averages.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Banded, BandedLu};
use crate::random_fields::FieldRealization;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct RectGrid {
    dim: usize,
    lengths: Vec<f64>,
    n_cells: Vec<usize>,
    spacing: Vec<f64>,
    nodes: Vec<Point>,
}

pub fn build_grid(dim: usize, lengths: &[f64], n_cells: &[usize]) -> Result<RectGrid> {
    RectGrid::new(dim, lengths, n_cells)
}

impl RectGrid {
    pub fn new(dim: usize, lengths: &[f64], n_cells: &[usize]) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::invalid("mesh_fem", format!("dimension must be 1 or 2, got {dim}")));
        }
        if lengths.len() != dim || n_cells.len() != dim {
            return Err(Error::invalid(
                "mesh_fem",
                format!(
                    "expected {dim} lengths and cell counts, got {} and {}",
                    lengths.len(),
                    n_cells.len()
                ),
            ));
        }
        if let Some(l) = lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::invalid("mesh_fem", format!("domain length {l} must be positive")));
        }
        if let Some(n) = n_cells.iter().find(|n| **n < 4) {
            return Err(Error::invalid("mesh_fem", format!("n_cells = {n} < 4")));
        }
        let spacing: Vec<f64> = lengths.iter().zip(n_cells).map(|(l, n)| l / *n as f64).collect();
        let interior: Vec<usize> = n_cells.iter().map(|n| n - 1).collect();
        let count: usize = interior.iter().product();
        let nodes = (0..count)
            .map(|k| {
                let mut p = [0.0; 2];
                let mut rest = k;
                for d in 0..dim {
                    let i = rest % interior[d];
                    rest /= interior[d];
                    p[d] = (i + 1) as f64 * spacing[d];
                }
                p
            })
            .collect();
        Ok(RectGrid { dim, lengths: lengths.to_vec(), n_cells: n_cells.to_vec(), spacing, nodes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn n_cells(&self) -> &[usize] {
        &self.n_cells
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Interior node coordinates in degree-of-freedom order.
    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn n_dofs(&self) -> usize {
        self.nodes.len()
    }

    pub fn bandwidth(&self) -> usize {
        if self.dim == 1 {
            1
        } else {
            self.n_cells[0]
        }
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Number of nodes of the closed lattice, boundary included.
    pub fn n_lattice(&self) -> usize {
        self.n_cells.iter().map(|n| n + 1).product()
    }

    pub fn lattice_point(&self, k: usize) -> Point {
        let mut p = [0.0; 2];
        let mut rest = k;
        for d in 0..self.dim {
            let per = self.n_cells[d] + 1;
            p[d] = (rest % per) as f64 * self.spacing[d];
            rest /= per;
        }
        p
    }

    pub fn lattice_points(&self) -> Vec<Point> {
        (0..self.n_lattice()).map(|k| self.lattice_point(k)).collect()
    }

    fn lattice_index(&self, idx: [usize; 2]) -> usize {
        if self.dim == 1 {
            idx[0]
        } else {
            idx[0] + (self.n_cells[0] + 1) * idx[1]
        }
    }

    fn dof_index(&self, idx: [usize; 2]) -> Option<usize> {
        let mut k = 0;
        let mut stride = 1;
        for d in 0..self.dim {
            if idx[d] == 0 || idx[d] >= self.n_cells[d] {
                return None;
            }
            k += (idx[d] - 1) * stride;
            stride *= self.n_cells[d] - 1;
        }
        Some(k)
    }

    fn n_cells_total(&self) -> usize {
        self.n_cells.iter().product()
    }

    fn cell_origin(&self, c: usize) -> [usize; 2] {
        let mut o = [0; 2];
        let mut rest = c;
        for d in 0..self.dim {
            o[d] = rest % self.n_cells[d];
            rest /= self.n_cells[d];
        }
        o
    }

    fn cell_center(&self, origin: [usize; 2]) -> Point {
        let mut p = [0.0; 2];
        for d in 0..self.dim {
            p[d] = (origin[d] as f64 + 0.5) * self.spacing[d];
        }
        p
    }

    fn n_local(&self) -> usize {
        1 << self.dim
    }

    fn local_vertex(&self, origin: [usize; 2], local: usize) -> [usize; 2] {
        let mut v = origin;
        for d in 0..self.dim {
            v[d] += (local >> d) & 1;
        }
        v
    }

    /// Samples `f` at the interior nodes.
    pub fn eval_interior(&self, f: impl Fn(&Point) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.n_dofs(), self.nodes.iter().map(f))
    }
}

// 1-D P1 element matrices on a cell of width h.
fn mass_1d(h: f64, a: usize, b: usize) -> f64 {
    if a == b {
        h / 3.0
    } else {
        h / 6.0
    }
}

fn stiff_1d(h: f64, a: usize, b: usize) -> f64 {
    if a == b {
        1.0 / h
    } else {
        -1.0 / h
    }
}

/// `int_0^h phi_b * phi_a'` for the two P1 shape functions.
fn grad_test_1d(a: usize, _b: usize) -> f64 {
    if a == 0 {
        -0.5
    } else {
        0.5
    }
}

fn bit(local: usize, d: usize) -> usize {
    (local >> d) & 1
}

impl RectGrid {
    fn element_mass(&self, i: usize, j: usize) -> f64 {
        (0..self.dim).map(|d| mass_1d(self.spacing[d], bit(i, d), bit(j, d))).product()
    }

    fn element_stiffness(&self, i: usize, j: usize) -> f64 {
        (0..self.dim)
            .map(|n| {
                (0..self.dim)
                    .map(|d| {
                        let (a, b) = (bit(i, d), bit(j, d));
                        if d == n {
                            stiff_1d(self.spacing[d], a, b)
                        } else {
                            mass_1d(self.spacing[d], a, b)
                        }
                    })
                    .product::<f64>()
            })
            .sum()
    }

    /// `-int_e phi_j b . grad(phi_i)` for a constant vector `b` on the cell.
    fn element_convection(&self, b: &[f64; 2], i: usize, j: usize) -> f64 {
        -(0..self.dim)
            .map(|n| {
                b[n] * (0..self.dim)
                    .map(|d| {
                        let (a, c) = (bit(i, d), bit(j, d));
                        if d == n {
                            grad_test_1d(a, c)
                        } else {
                            mass_1d(self.spacing[d], a, c)
                        }
                    })
                    .product::<f64>()
            })
            .sum::<f64>()
    }

    /// Assembles `sum_cells weight(cell) * element(i, j)` on interior dofs.
    fn assemble_cells(
        &self,
        mut weight: impl FnMut(usize, [usize; 2]) -> f64,
        element: impl Fn(usize, usize) -> f64,
    ) -> Banded {
        let n_local = self.n_local();
        let mut local = vec![0.0; n_local * n_local];
        for i in 0..n_local {
            for j in 0..n_local {
                local[i * n_local + j] = element(i, j);
            }
        }
        let mut out = Banded::zeros(self.n_dofs(), self.bandwidth());
        for c in 0..self.n_cells_total() {
            let origin = self.cell_origin(c);
            let w = weight(c, origin);
            if w == 0.0 {
                continue;
            }
            let dofs: Vec<Option<usize>> =
                (0..n_local).map(|l| self.dof_index(self.local_vertex(origin, l))).collect();
            for (i, di) in dofs.iter().enumerate() {
                let Some(di) = di else { continue };
                for (j, dj) in dofs.iter().enumerate() {
                    let Some(dj) = dj else { continue };
                    out.add(*di, *dj, w * local[i * n_local + j]);
                }
            }
        }
        out
    }

    pub fn assemble_mass(&self) -> Banded {
        self.assemble_cells(|_, _| 1.0, |i, j| self.element_mass(i, j))
    }

    /// Unit-diffusion stiffness, the discrete `-Delta`.
    pub fn assemble_laplacian(&self) -> Banded {
        self.assemble_cells(|_, _| 1.0, |i, j| self.element_stiffness(i, j))
    }

    /// Per-cell vertex averages of a lattice field.
    pub fn cell_averages(&self, lattice_values: &[f64]) -> Vec<f64> {
        assert_eq!(lattice_values.len(), self.n_lattice());
        let n_local = self.n_local();
        (0..self.n_cells_total())
            .map(|c| {
                let origin = self.cell_origin(c);
                (0..n_local)
                    .map(|l| lattice_values[self.lattice_index(self.local_vertex(origin, l))])
                    .sum::<f64>()
                    / n_local as f64
            })
            .collect()
    }

    /// Diffusion stiffness with the cell-averaged coefficient.
    pub fn assemble_diffusion(&self, nu: &FieldRealization) -> Banded {
        let cell_nu = self.cell_averages(&nu.nu_values);
        self.assemble_cells(|c, _| cell_nu[c], |i, j| self.element_stiffness(i, j))
    }

    /// Reaction operator `(a y, phi)` with `a` frozen at cell centers.
    pub fn assemble_reaction(&self, reaction: &Reaction, t: f64) -> Banded {
        self.assemble_cells(
            |_, origin| reaction.eval(t, &self.cell_center(origin)),
            |i, j| self.element_mass(i, j),
        )
    }

    /// Convection operator `-(y b, grad phi)` with `b` frozen at cell centers.
    pub fn assemble_convection(&self, convection: &Convection, t: f64) -> Banded {
        let mut out = Banded::zeros(self.n_dofs(), self.bandwidth());
        if convection.is_zero() {
            return out;
        }
        let n_local = self.n_local();
        for c in 0..self.n_cells_total() {
            let origin = self.cell_origin(c);
            let b = convection.eval(t, &self.cell_center(origin));
            let dofs: Vec<Option<usize>> =
                (0..n_local).map(|l| self.dof_index(self.local_vertex(origin, l))).collect();
            for (i, di) in dofs.iter().enumerate() {
                let Some(di) = di else { continue };
                for (j, dj) in dofs.iter().enumerate() {
                    let Some(dj) = dj else { continue };
                    out.add(*di, *dj, self.element_convection(&b, i, j));
                }
            }
        }
        out
    }
}

/// Reaction coefficient `a(t, x)`, spatially uniform named forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reaction {
    Constant {
        value: f64,
    },
    /// `mean + amplitude * sin(omega t)`
    Oscillating {
        mean: f64,
        amplitude: f64,
        omega: f64,
    },
}

impl Default for Reaction {
    fn default() -> Self {
        Reaction::Constant { value: 0.0 }
    }
}

impl Reaction {
    pub fn eval(&self, t: f64, _x: &Point) -> f64 {
        match *self {
            Reaction::Constant { value } => value,
            Reaction::Oscillating { mean, amplitude, omega } => mean + amplitude * (omega * t).sin(),
        }
    }

    /// `sup_{t,x} |a(t, x)|`
    pub fn sup_norm(&self) -> f64 {
        match *self {
            Reaction::Constant { value } => value.abs(),
            Reaction::Oscillating { mean, amplitude, .. } => mean.abs() + amplitude.abs(),
        }
    }

    /// `ess inf_{t,x} a(t, x)`
    pub fn ess_inf(&self) -> f64 {
        match *self {
            Reaction::Constant { value } => value,
            Reaction::Oscillating { mean, amplitude, .. } => mean - amplitude.abs(),
        }
    }

    pub fn is_autonomous(&self) -> bool {
        match *self {
            Reaction::Constant { .. } => true,
            Reaction::Oscillating { amplitude, omega, .. } => amplitude == 0.0 || omega == 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sup_norm() == 0.0
    }
}

/// Convection field `b(t, x)`, spatially uniform named forms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Convection {
    #[default]
    Zero,
    Constant {
        b: Vec<f64>,
    },
    /// `b * cos(omega t)`
    Oscillating {
        b: Vec<f64>,
        omega: f64,
    },
}

impl Convection {
    pub fn eval(&self, t: f64, _x: &Point) -> [f64; 2] {
        let (v, s) = match self {
            Convection::Zero => return [0.0; 2],
            Convection::Constant { b } => (b, 1.0),
            Convection::Oscillating { b, omega } => (b, (omega * t).cos()),
        };
        let mut out = [0.0; 2];
        for (o, c) in out.iter_mut().zip(v) {
            *o = s * c;
        }
        out
    }

    /// `sup_{t,x} |b(t, x)|_2`
    pub fn sup_norm(&self) -> f64 {
        match self {
            Convection::Zero => 0.0,
            Convection::Constant { b } | Convection::Oscillating { b, .. } => {
                b.iter().map(|c| c * c).sum::<f64>().sqrt()
            }
        }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Convection::Zero => None,
            Convection::Constant { b } | Convection::Oscillating { b, .. } => Some(b.len()),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sup_norm() == 0.0
    }

    pub fn is_autonomous(&self) -> bool {
        !matches!(self, Convection::Oscillating { omega, .. } if *omega != 0.0) || self.is_zero()
    }
}

/// `N(a, b) = sup |a| + sup |b|`, with the reaction measured in `L^inf`.
pub fn coefficient_size(reaction: &Reaction, convection: &Convection) -> f64 {
    reaction.sup_norm() + convection.sup_norm()
}

/// Operators of the weak form at one time level for one realization.
#[derive(Debug, Clone)]
pub struct DiscreteOperators {
    pub mass: Banded,
    pub laplacian: Banded,
    pub diffusion: Banded,
    pub reaction: Banded,
    pub convection: Banded,
    pub time: f64,
}

pub fn assemble(
    grid: &RectGrid,
    nu: &FieldRealization,
    reaction: &Reaction,
    convection: &Convection,
    t: f64,
) -> DiscreteOperators {
    DiscreteOperators {
        mass: grid.assemble_mass(),
        laplacian: grid.assemble_laplacian(),
        diffusion: grid.assemble_diffusion(nu),
        reaction: grid.assemble_reaction(reaction, t),
        convection: grid.assemble_convection(convection, t),
        time: t,
    }
}

impl DiscreteOperators {
    /// `A_nu + R + B`, the spatial part of the state operator.
    pub fn state_operator(&self) -> Banded {
        let mut a = self.diffusion.clone();
        a.add_scaled(1.0, &self.reaction);
        a.add_scaled(1.0, &self.convection);
        a
    }
}

/// Discrete `H`, `V` and `V'` norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub h: f64,
    pub v: f64,
    pub dual: f64,
}

/// Norm evaluator holding a factorization of the `V` Gram matrix.
#[derive(Debug, Clone)]
pub struct NormEvaluator {
    mass: Banded,
    laplacian: Banded,
    laplacian_lu: BandedLu,
}

impl NormEvaluator {
    pub fn new(mass: Banded, laplacian: Banded) -> Result<Self> {
        let laplacian_lu = laplacian.lu()?;
        Ok(NormEvaluator { mass, laplacian, laplacian_lu })
    }

    pub fn h2(&self, y: &DVector<f64>) -> f64 {
        self.mass.quad_form(y)
    }

    pub fn v2(&self, y: &DVector<f64>) -> f64 {
        self.laplacian.quad_form(y)
    }

    /// Squared `V'` norm of a load vector (a functional on nodal values).
    pub fn dual2_functional(&self, f: &DVector<f64>) -> f64 {
        f.dot(&self.laplacian_lu.solve(f)).max(0.0)
    }

    /// Squared `V'` norm of a nodal function, through its load vector `M g`.
    pub fn dual2_function(&self, g: &DVector<f64>) -> f64 {
        self.dual2_functional(&self.mass.mul_vec(g))
    }

    /// `(|y|_H, |y|_V, |y|_V')` where the dual norm treats `y` as a load vector.
    pub fn norms(&self, y: &DVector<f64>) -> Norms {
        Norms { h: self.h2(y).sqrt(), v: self.v2(y).sqrt(), dual: self.dual2_functional(y).sqrt() }
    }
}

pub fn norms(ops: &DiscreteOperators, y: &DVector<f64>) -> Result<Norms> {
    let eval = NormEvaluator::new(ops.mass.clone(), ops.laplacian.clone())?;
    Ok(eval.norms(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random_fields::FieldRealization;
    use std::f64::consts::PI;

    fn unit_field(grid: &RectGrid) -> FieldRealization {
        FieldRealization::constant(grid, 1.0)
    }

    #[test]
    fn grid_1d_has_expected_nodes() {
        let g = build_grid(1, &[1.0], &[4]).unwrap();
        let xs: Vec<f64> = g.nodes().iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn grid_2d_counts() {
        assert_eq!(build_grid(2, &[1.0, 2.0], &[4, 4]).unwrap().n_dofs(), 9);
        assert_eq!(build_grid(2, &[1.0, 1.0], &[64, 64]).unwrap().n_dofs(), 63 * 63);
    }

    #[test]
    fn grid_rejects_coarse_meshes() {
        assert!(build_grid(1, &[1.0], &[3]).is_err());
        assert!(build_grid(2, &[1.0, 1.0], &[8, 2]).is_err());
        assert!(build_grid(3, &[1.0; 3], &[8; 3]).is_err());
    }

    #[test]
    fn lexicographic_ordering_first_coordinate_fastest() {
        let g = build_grid(2, &[1.0, 2.0], &[4, 4]).unwrap();
        assert_eq!(g.nodes()[0], [0.25, 0.5]);
        assert_eq!(g.nodes()[1], [0.5, 0.5]);
        assert_eq!(g.nodes()[3], [0.25, 1.0]);
    }

    #[test]
    fn operators_are_symmetric_and_unit_diffusion_matches_laplacian() {
        for g in [build_grid(1, &[1.0], &[16]).unwrap(), build_grid(2, &[1.0, 0.5], &[8, 6]).unwrap()] {
            let ops = assemble(&g, &unit_field(&g), &Reaction::default(), &Convection::Zero, 0.0);
            assert_eq!(ops.mass.asymmetry(), 0.0);
            assert_eq!(ops.laplacian.asymmetry(), 0.0);
            assert_eq!(ops.diffusion.asymmetry(), 0.0);
            let mut diff = ops.diffusion.clone();
            diff.add_scaled(-1.0, &ops.laplacian);
            assert!(diff.max_abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coefficients_give_zero_operators() {
        let g = build_grid(2, &[1.0, 1.0], &[6, 6]).unwrap();
        let ops = assemble(&g, &unit_field(&g), &Reaction::Constant { value: 0.0 }, &Convection::Zero, 0.3);
        assert_eq!(ops.reaction.max_abs(), 0.0);
        assert_eq!(ops.convection.max_abs(), 0.0);
    }

    #[test]
    fn constant_reaction_is_scaled_mass() {
        let g = build_grid(1, &[1.0], &[10]).unwrap();
        let r = g.assemble_reaction(&Reaction::Constant { value: -3.0 }, 0.0);
        let mut m = g.assemble_mass();
        m.add_scaled(1.0 / 3.0, &r);
        assert!(m.max_abs() < 1e-14);
    }

    #[test]
    fn convection_is_skew_for_constant_field() {
        // -(y b, grad y) vanishes on H^1_0 for divergence-free b.
        let g = build_grid(2, &[1.0, 1.0], &[8, 8]).unwrap();
        let b = g.assemble_convection(&Convection::Constant { b: vec![0.7, -0.2] }, 0.0);
        let mut sym = b.clone();
        sym.add_scaled(1.0, &b.transpose());
        assert!(sym.max_abs() < 1e-14);
    }

    #[test]
    fn first_eigenvalue_converges_at_second_order() {
        let mut errs = vec![];
        for n in [16, 32, 64] {
            let g = build_grid(1, &[1.0], &[n]).unwrap();
            let a = g.assemble_laplacian().to_dense();
            let m = g.assemble_mass().to_dense();
            let (vals, _) = crate::linalg::generalized_symmetric_eigen(&a, &m).unwrap();
            errs.push((vals[0] - PI * PI).abs());
        }
        let rate = (errs[0] / errs[2]).log2() / 2.0;
        assert!(rate > 1.8, "observed rate {rate}");
    }

    #[test]
    fn first_mode_rayleigh_quotient_is_pi() {
        let g = build_grid(1, &[1.0], &[128]).unwrap();
        let ops = assemble(&g, &unit_field(&g), &Reaction::default(), &Convection::Zero, 0.0);
        let y = g.eval_interior(|p| (PI * p[0]).sin());
        let n = norms(&ops, &y).unwrap();
        assert!((n.v / n.h - PI).abs() < 1e-3);
        let zero = norms(&ops, &DVector::zeros(g.n_dofs())).unwrap();
        assert_eq!((zero.h, zero.v, zero.dual), (0.0, 0.0, 0.0));
    }
}
