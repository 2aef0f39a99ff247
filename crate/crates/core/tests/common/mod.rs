//! Small instances shared by the integration suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhc_core::dynamics::{ControlMode, ControlSignal, Model, TimeScheme};
use rhc_core::mesh_fem::{build_grid, Convection, Reaction};
use rhc_core::ocp::{Ell, OcpConfig};
use rhc_core::random_fields::{build_ensemble, FieldModel, FieldSpec, Nu0Spec, PsiSpec};
use rhc_core::setup::SpatialSetup;

pub fn uniform_field() -> FieldSpec {
    FieldSpec::UniformAffine {
        nu0: Nu0Spec::Constant { value: 1.0 },
        psi: PsiSpec::DecayingSine { scale: 0.3, decay: 2.0, count: 4 },
        kappa: 1.0,
    }
}

pub struct Instance {
    pub n_cells: usize,
    pub n_actuators: usize,
    pub samples: usize,
    pub dt: f64,
    pub reaction: f64,
    pub field: FieldSpec,
    pub seed: u64,
    pub cached_steps: usize,
}

impl Default for Instance {
    fn default() -> Self {
        Instance {
            n_cells: 9,
            n_actuators: 2,
            samples: 2,
            dt: 0.01,
            reaction: -3.0,
            field: uniform_field(),
            seed: 11,
            cached_steps: 1,
        }
    }
}

impl Instance {
    pub fn build(&self) -> Model {
        let grid = build_grid(1, &[1.0], &[self.n_cells]).unwrap();
        let field = FieldModel::new(&self.field, &grid).unwrap();
        let ens = build_ensemble(&field, self.samples, self.seed).unwrap();
        let setup = SpatialSetup::new(grid, self.n_actuators, 0.5).unwrap();
        Model::new(
            setup,
            ens.realizations,
            Reaction::Constant { value: self.reaction },
            Convection::Zero,
            self.dt,
            TimeScheme::ImplicitEuler,
            self.cached_steps,
        )
        .unwrap()
    }
}

/// 8 interior nodes, 2 samples, 2 actuators.
pub fn tiny_model() -> Model {
    Instance::default().build()
}

pub fn ocp_cfg(horizon: f64, ell: Ell, mode: ControlMode, beta: f64) -> OcpConfig {
    OcpConfig {
        horizon,
        ell,
        beta_penalty: beta,
        control_mode: mode,
        cg_tol: 1e-13,
        cg_max_iter: 5000,
        cost_gap_tol: 1e-13,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Distinct random initial states, one per sample.
pub fn random_states(model: &Model, seed: u64) -> Vec<DVector<f64>> {
    let mut r = rng(seed);
    (0..model.n_samples()).map(|_| random_vector(model.n_dofs(), &mut r)).collect()
}

pub fn random_control(template: &ControlSignal, seed: u64) -> ControlSignal {
    let mut r = rng(seed);
    template.like(random_vector(template.data.len(), &mut r))
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Residuals `(idempotence, reconstruction, adjoint)` of both projectors of a
/// setup over `count` random vectors, relative to the H norm of the input.
pub fn projector_residuals(
    dim: usize,
    n_cells: usize,
    n: usize,
    r: f64,
    count: usize,
    seed: u64,
) -> [f64; 3] {
    use rhc_core::projections::{adjoint_check, dual_projector, theta_phi_split};
    let cells = vec![n_cells; dim];
    let grid = build_grid(dim, &vec![1.0; dim], &cells).unwrap();
    let setup = SpatialSetup::new(grid, n, r).unwrap();
    let mass = &setup.mass;
    let hn = |y: &DVector<f64>| mass.quad_form(y).sqrt();
    let mut r_ = rng(seed);
    let mut out = [0.0_f64; 3];
    for p in [&setup.p_e, &setup.p_o] {
        let q = dual_projector(p, mass).unwrap();
        let mut pairs = vec![];
        for _ in 0..count {
            let y = random_vector(setup.n_dofs(), &mut r_);
            let py = p.apply(&y);
            out[0] = out[0].max(hn(&(p.apply(&py) - &py)) / hn(&y));
            let (theta, phi) = theta_phi_split(p, &y);
            let rec = hn(&(&theta + &phi - &y)).max(hn(&p.apply(&phi)));
            out[1] = out[1].max(rec / hn(&y));
            pairs.push((y, random_vector(setup.n_dofs(), &mut r_)));
        }
        out[2] = out[2].max(adjoint_check(p, &q, mass, &pairs));
    }
    out
}

/// Smallest `y^T A y / y^T M y` over `{y : W^T y = 0}` by a dense null-space basis.
pub fn dense_constrained_min(mass: &DMatrix<f64>, lap: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let n = mass.nrows();
    let proj = DMatrix::identity(n, n) - w * (w.transpose() * w).try_inverse().unwrap() * w.transpose();
    let eig = nalgebra::SymmetricEigen::new((&proj + proj.transpose()) * 0.5);
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    let z = DMatrix::from_columns(&cols);
    let mz = z.transpose() * mass * &z;
    let az = z.transpose() * lap * &z;
    let l = mz.cholesky().unwrap();
    let linv = l.l().try_inverse().unwrap();
    let reduced = &linv * az * linv.transpose();
    nalgebra::SymmetricEigen::new((&reduced + reduced.transpose()) * 0.5).eigenvalues.min()
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_config(name: &str) -> rhc_core::config::ExperimentConfig {
    rhc_core::config::ExperimentConfig::load(&config_path(name)).unwrap()
}

pub fn experiment(name: &str) -> rhc_core::experiment::Experiment {
    rhc_core::experiment::Experiment::new(load_config(name)).unwrap()
}

/// Constant unit diffusion on `[0, 1]` with `n_cells` cells.
pub fn heat_model(n_cells: usize, n_act: usize, dt: f64, scheme: TimeScheme) -> Model {
    use rhc_core::random_fields::FieldRealization;
    let grid = build_grid(1, &[1.0], &[n_cells]).unwrap();
    let nu = FieldRealization::constant(&grid, 1.0);
    let setup = SpatialSetup::new(grid, n_act, 0.5).unwrap();
    Model::new(setup, vec![nu], Reaction::Constant { value: 0.0 }, Convection::Zero, dt, scheme, 1).unwrap()
}

/// Stacked states `y_s^k`, k = 1..K, driven by `u` from `y0`, via forward rollout only.
pub fn stacked_states(
    p: &rhc_core::ocp::OcpProblem<'_>,
    u: &ControlSignal,
    y0: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let traj = p.trajectory(u, y0).unwrap();
    traj.states.unwrap().into_iter().flat_map(|st| st.into_iter().skip(1)).collect()
}

/// Reduced Hessian, linear term and constant of `J` assembled column by column.
pub fn dense_quadratic(
    p: &rhc_core::ocp::OcpProblem<'_>,
    y0: &[DVector<f64>],
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let m = p.model;
    let s = m.n_samples() as f64;
    let dt = m.dt;
    let weight = match p.cfg.ell {
        Ell::H => m.setup.mass.to_dense(),
        Ell::V => m.setup.laplacian.to_dense(),
    };
    let zero = p.zero_control();
    let n = zero.data.len();
    let zeros = vec![DVector::zeros(m.n_dofs()); m.n_samples()];
    let free = stacked_states(p, &zero, y0);
    let cols: Vec<Vec<DVector<f64>>> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            stacked_states(p, &zero.like(e), &zeros)
        })
        .collect();
    let w = dt / s;
    let pen = match p.cfg.control_mode {
        ControlMode::Deterministic => p.cfg.beta_penalty * dt,
        ControlMode::Stochastic => p.cfg.beta_penalty * dt / s,
    };
    let mut h = DMatrix::from_diagonal_element(n, n, pen);
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let wi: Vec<DVector<f64>> = cols[i].iter().map(|y| &weight * y).collect();
        for j in 0..n {
            h[(i, j)] += w * wi.iter().zip(&cols[j]).map(|(a, b)| a.dot(b)).sum::<f64>();
        }
        g[i] = w * wi.iter().zip(&free).map(|(a, b)| a.dot(b)).sum::<f64>();
    }
    let c = 0.5 * w * free.iter().map(|y| y.dot(&(&weight * y))).sum::<f64>();
    (h, g, c)
}
