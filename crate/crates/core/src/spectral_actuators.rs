//! Box actuators, the tensor sine eigenbasis and the constrained spectral gap.
//!
//! With `N` actuators per dimension the supports are the boxes centred at
//! `(2i - 1) L_n / (2N)` with half-width `r L_n / (2N)`. Multi-indices are
//! enumerated with the first dimension fastest, as for grid nodes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{fit_line, generalized_symmetric_eigen, Banded, BandedLu};
use crate::mesh_fem::RectGrid;
use crate::random_fields::rng_from_seed;

/// Relative slack when testing whether a node lies inside an open support.
const SUPPORT_EPS: f64 = 1e-12;

fn multi_indices(dim: usize, n: usize) -> Vec<[usize; 2]> {
    let total = n.pow(dim as u32);
    (0..total)
        .map(|k| {
            let mut idx = [1; 2];
            let mut rest = k;
            for slot in idx.iter_mut().take(dim) {
                *slot = rest % n + 1;
                rest /= n;
            }
            idx
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ActuatorSet {
    pub n: usize,
    pub r: f64,
    /// Per actuator, the open interval in each dimension.
    pub supports: Vec<Vec<(f64, f64)>>,
    /// Nodal values of the indicators, one column per actuator.
    pub indicators: DMatrix<f64>,
}

impl ActuatorSet {
    pub fn n_sigma(&self) -> usize {
        self.indicators.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.n_sigma() == 0
    }

    /// Nodal function `sum_i u_i 1_{O_i}`.
    pub fn synthesize(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.indicators * u
    }
}

/// Checks that `N` actuators with ratio `r` are resolved by the grid.
pub fn actuator_resolution_errors(grid: &RectGrid, n: usize, r: f64) -> Vec<String> {
    let mut errs = vec![];
    if !(r > 0.0 && r < 1.0) {
        errs.push(format!("ratio r = {r} must lie in (0, 1)"));
        return errs;
    }
    if n == 0 {
        return errs;
    }
    for d in 0..grid.dim() {
        let width = r * grid.lengths()[d] / n as f64;
        if width < 2.0 * grid.spacing()[d] * (1.0 - SUPPORT_EPS) {
            errs.push(format!(
                "support width {width:.4e} in dimension {} is narrower than two cells ({:.4e})",
                d + 1,
                2.0 * grid.spacing()[d]
            ));
        }
    }
    errs
}

pub fn build_actuators(grid: &RectGrid, n: usize, r: f64) -> Result<ActuatorSet> {
    let errs = actuator_resolution_errors(grid, n, r);
    if !errs.is_empty() {
        return Err(Error::invalid("spectral_actuators", errs.join("; ")));
    }
    let dim = grid.dim();
    let supports: Vec<Vec<(f64, f64)>> = if n == 0 {
        vec![]
    } else {
        multi_indices(dim, n)
            .into_iter()
            .map(|idx| {
                (0..dim)
                    .map(|d| {
                        let l = grid.lengths()[d];
                        let c = (2 * idx[d] - 1) as f64 * l / (2 * n) as f64;
                        let hw = r * l / (2 * n) as f64;
                        (c - hw, c + hw)
                    })
                    .collect()
            })
            .collect()
    };
    let mut indicators = DMatrix::zeros(grid.n_dofs(), supports.len());
    for (i, sup) in supports.iter().enumerate() {
        for (k, p) in grid.nodes().iter().enumerate() {
            let inside = sup.iter().enumerate().all(|(d, (lo, hi))| {
                let tol = SUPPORT_EPS * grid.lengths()[d];
                p[d] > lo + tol && p[d] < hi - tol
            });
            if inside {
                indicators[(k, i)] = 1.0;
            }
        }
    }
    Ok(ActuatorSet { n, r, supports, indicators })
}

#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub n: usize,
    pub indices: Vec<[usize; 2]>,
    /// M-orthonormal nodal vectors, one column per mode.
    pub functions: DMatrix<f64>,
    /// `alpha_i = sum_n (i_n pi / L_n)^2`.
    pub eigenvalues: Vec<f64>,
    /// Rayleigh quotients of the discrete modes.
    pub discrete_eigenvalues: Vec<f64>,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.functions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// First Dirichlet eigenvalue `pi^2 sum_n 1 / L_n^2` of the domain.
pub fn alpha_1(grid: &RectGrid) -> f64 {
    grid.lengths().iter().map(|l| (PI / l).powi(2)).sum()
}

/// Sampled tensor sines. On uniform grids these are exact generalized
/// eigenvectors of the discrete Laplacian, so normalization is all that is needed.
pub fn build_eigenbasis(grid: &RectGrid, mass: &Banded, laplacian: &Banded, n: usize) -> Result<EigenBasis> {
    if let Some(d) = (0..grid.dim()).find(|d| 2 * n > grid.n_cells()[*d]) {
        return Err(Error::invalid(
            "spectral_actuators",
            format!(
                "{n} modes exceed the resolvable n_cells/2 = {} in dimension {}",
                grid.n_cells()[d] / 2,
                d + 1
            ),
        ));
    }
    let dim = grid.dim();
    let indices = if n == 0 { vec![] } else { multi_indices(dim, n) };
    let mut functions = DMatrix::zeros(grid.n_dofs(), indices.len());
    let mut eigenvalues = vec![];
    let mut discrete = vec![];
    for (c, idx) in indices.iter().enumerate() {
        let v = grid.eval_interior(|p| {
            (0..dim).map(|d| (idx[d] as f64 * PI * p[d] / grid.lengths()[d]).sin()).product()
        });
        let norm = mass.quad_form(&v).sqrt();
        let v = v / norm;
        discrete.push(laplacian.quad_form(&v));
        eigenvalues.push((0..dim).map(|d| (idx[d] as f64 * PI / grid.lengths()[d]).powi(2)).sum());
        functions.set_column(c, &v);
    }
    Ok(EigenBasis { n, indices, functions, eigenvalues, discrete_eigenvalues: discrete })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralGap {
    pub beta_n: f64,
    pub iterations: usize,
}

/// Tuning for the block inverse iteration behind [`compute_beta`].
#[derive(Debug, Clone, Copy)]
pub struct BetaSolver {
    pub block: usize,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for BetaSolver {
    fn default() -> Self {
        BetaSolver { block: 8, rel_tol: 1e-12, max_iter: 1000, seed: 0x5eed }
    }
}

/// Applies `x = A^{-1} b` restricted to `W^T x = 0` via the Schur complement
/// `S = W^T A^{-1} W`.
struct ConstrainedSolve<'a> {
    lu: &'a BandedLu,
    w: DMatrix<f64>,
    z: DMatrix<f64>,
    schur: Option<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>>,
}

impl<'a> ConstrainedSolve<'a> {
    fn new(lu: &'a BandedLu, w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() == 0 {
            return Ok(ConstrainedSolve { lu, z: w.clone(), w, schur: None });
        }
        let z = lu.solve_mat(&w);
        let s = w.transpose() * &z;
        let schur = nalgebra::linalg::Cholesky::new(s).ok_or_else(|| {
            Error::numerical("spectral_actuators", "constraint Schur complement is not definite")
        })?;
        Ok(ConstrainedSolve { lu, w, z, schur: Some(schur) })
    }

    fn apply(&self, b: &DVector<f64>) -> DVector<f64> {
        let x0 = self.lu.solve(b);
        match &self.schur {
            None => x0,
            Some(s) => {
                let mu = s.solve(&(self.w.transpose() * &x0));
                x0 - &self.z * mu
            }
        }
    }
}

/// Smallest Rayleigh quotient `y^T A_0 y / y^T M y` over `{y : (y, 1_{O_i})_H = 0}`.
pub fn compute_beta(mass: &Banded, laplacian: &Banded, act: &ActuatorSet) -> Result<SpectralGap> {
    compute_beta_with(mass, laplacian, act, &BetaSolver::default())
}

pub fn compute_beta_with(
    mass: &Banded,
    laplacian: &Banded,
    act: &ActuatorSet,
    solver: &BetaSolver,
) -> Result<SpectralGap> {
    let n = mass.dim();
    let m = act.n_sigma();
    if m >= n {
        return Err(Error::invalid("spectral_actuators", "constraint count reaches the number of unknowns"));
    }
    let lu = laplacian.lu()?;
    let w = mass.mul_mat(&act.indicators);
    let cs = ConstrainedSolve::new(&lu, w)?;
    let p = solver.block.min(n - m).max(1);
    let mut rng = rng_from_seed(solver.seed);
    let mut x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() - 0.5);
    let mut prev = f64::INFINITY;
    for it in 1..=solver.max_iter {
        let mx = mass.mul_mat(&x);
        let mut y = DMatrix::zeros(n, p);
        for c in 0..p {
            y.set_column(c, &cs.apply(&mx.column(c).into_owned()));
        }
        let ay = laplacian.mul_mat(&y);
        let my = mass.mul_mat(&y);
        let ap = y.transpose() * ay;
        let mp = y.transpose() * my;
        let (vals, vecs) =
            generalized_symmetric_eigen(&((&ap + ap.transpose()) * 0.5), &((&mp + mp.transpose()) * 0.5))
                .ok_or_else(|| Error::numerical("spectral_actuators", "Ritz block lost rank"))?;
        x = y * vecs;
        let lam = vals[0];
        if (lam - prev).abs() <= solver.rel_tol * lam.abs() {
            return Ok(SpectralGap { beta_n: lam, iterations: it });
        }
        prev = lam;
    }
    Err(Error::numerical(
        "spectral_actuators",
        format!("inverse iteration did not converge in {} iterations", solver.max_iter),
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaRow {
    pub n: usize,
    pub beta_n: f64,
}

/// `beta_N` for `N = 1..=n_max` together with the log-log slope and the
/// largest `c_beta` with `beta_N >= c_beta N^2` on the table.
#[derive(Debug, Clone, Serialize)]
pub struct BetaTable {
    pub rows: Vec<BetaRow>,
    pub slope: f64,
    pub c_beta_fit: f64,
}

impl BetaTable {
    pub fn beta(&self, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n).map(|r| r.beta_n)
    }
}

pub fn beta_table(
    grid: &RectGrid,
    mass: &Banded,
    laplacian: &Banded,
    n_max: usize,
    r: f64,
) -> Result<BetaTable> {
    let mut rows = vec![];
    for n in 1..=n_max {
        let act = build_actuators(grid, n, r)?;
        rows.push(BetaRow { n, beta_n: compute_beta(mass, laplacian, &act)?.beta_n });
    }
    Ok(table_from_rows(rows))
}

pub fn table_from_rows(rows: Vec<BetaRow>) -> BetaTable {
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.beta_n.ln()).collect();
    let slope = if rows.len() >= 2 { fit_line(&xs, &ys).slope } else { f64::NAN };
    let c_beta_fit = rows.iter().map(|r| r.beta_n / (r.n * r.n) as f64).fold(f64::INFINITY, f64::min);
    BetaTable { rows, slope, c_beta_fit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::build_grid;

    fn ops(grid: &RectGrid) -> (Banded, Banded) {
        (grid.assemble_mass(), grid.assemble_laplacian())
    }

    #[test]
    fn single_actuator_support() {
        let g = build_grid(1, &[1.0], &[16]).unwrap();
        let a = build_actuators(&g, 1, 0.5).unwrap();
        assert_eq!(a.supports, vec![vec![(0.25, 0.75)]]);
        // open support: nodes 0.3125..0.6875
        assert_eq!(a.indicators.column(0).sum(), 7.0);
    }

    #[test]
    fn four_squares_in_2d() {
        let g = build_grid(2, &[1.0, 1.0], &[16, 16]).unwrap();
        let a = build_actuators(&g, 2, 0.5).unwrap();
        let centers: Vec<(f64, f64)> =
            a.supports.iter().map(|s| ((s[0].0 + s[0].1) / 2.0, (s[1].0 + s[1].1) / 2.0)).collect();
        assert_eq!(centers, vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);
        for s in &a.supports {
            assert!((s[0].1 - s[0].0 - 0.25).abs() < 1e-15 && (s[1].1 - s[1].0 - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn supports_disjoint_with_expected_gaps() {
        let g = build_grid(1, &[1.0], &[64]).unwrap();
        let a = build_actuators(&g, 3, 0.9).unwrap();
        for k in 0..2 {
            let gap = a.supports[k + 1][0].0 - a.supports[k][0].1;
            assert!((gap - 0.1 / 3.0).abs() < 1e-14);
        }
        let overlap = a.indicators.transpose() * &a.indicators;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(overlap[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn under_resolved_supports_are_rejected() {
        let g = build_grid(1, &[1.0], &[8]).unwrap();
        assert!(build_actuators(&g, 3, 0.5).is_err());
        assert!(build_actuators(&g, 1, 1.0).is_err());
    }

    #[test]
    fn eigenbasis_values_and_orthonormality() {
        let g = build_grid(2, &[1.0, 1.0], &[16, 16]).unwrap();
        let (m, a) = ops(&g);
        let e = build_eigenbasis(&g, &m, &a, 2).unwrap();
        assert!((e.eigenvalues[0] - 2.0 * PI * PI).abs() < 1e-12);
        let gram = e.functions.transpose() * m.mul_mat(&e.functions);
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-10);
        let g1 = build_grid(1, &[1.0], &[16]).unwrap();
        let (m1, a1) = ops(&g1);
        assert!((build_eigenbasis(&g1, &m1, &a1, 1).unwrap().eigenvalues[0] - PI * PI).abs() < 1e-12);
        assert!(build_eigenbasis(&g1, &m1, &a1, 9).is_err());
    }

    #[test]
    fn sampled_sines_are_discrete_eigenvectors() {
        let g = build_grid(2, &[1.0, 0.7], &[12, 10]).unwrap();
        let (m, a) = ops(&g);
        let e = build_eigenbasis(&g, &m, &a, 3).unwrap();
        for c in 0..e.len() {
            let v = e.functions.column(c).into_owned();
            let r = a.mul_vec(&v) - m.mul_vec(&v) * e.discrete_eigenvalues[c];
            assert!(r.amax() < 1e-10 * e.discrete_eigenvalues[c]);
        }
    }

    #[test]
    fn empty_actuator_set_gives_first_eigenvalue() {
        let g = build_grid(1, &[1.0], &[64]).unwrap();
        let (m, a) = ops(&g);
        let act = build_actuators(&g, 0, 0.5).unwrap();
        let b = compute_beta(&m, &a, &act).unwrap().beta_n;
        let e = build_eigenbasis(&g, &m, &a, 1).unwrap();
        assert!((b - e.discrete_eigenvalues[0]).abs() < 1e-10 * b);
        assert!((b - alpha_1(&g)).abs() < 3e-3 * b);
    }

    #[test]
    fn doubling_lengths_quarters_beta() {
        let g1 = build_grid(1, &[1.0], &[64]).unwrap();
        let g2 = build_grid(1, &[2.0], &[64]).unwrap();
        let b = |g: &RectGrid| {
            let (m, a) = ops(g);
            compute_beta(&m, &a, &build_actuators(g, 2, 0.5).unwrap()).unwrap().beta_n
        };
        assert!((b(&g1) / b(&g2) - 4.0).abs() < 0.02 * 4.0);
    }

    #[test]
    fn beta_above_alpha_and_monotone() {
        let g = build_grid(1, &[1.0], &[128]).unwrap();
        let (m, a) = ops(&g);
        let t = beta_table(&g, &m, &a, 8, 0.5).unwrap();
        assert!(t.rows[0].beta_n >= alpha_1(&g) * 0.999);
        for w in t.rows.windows(2) {
            assert!(w[1].beta_n >= w[0].beta_n, "{:?}", t.rows);
        }
        // min-max: N constraints cannot push beta_N past the (N+1)-th eigenvalue
        let (vals, _) = generalized_symmetric_eigen(&a.to_dense(), &m.to_dense()).unwrap();
        for row in &t.rows {
            assert!(row.beta_n <= vals[row.n] * (1.0 + 1e-9));
        }
        let tail = table_from_rows(t.rows[3..].to_vec());
        assert!(tail.slope >= 1.8, "slope {}", tail.slope);
    }
}
