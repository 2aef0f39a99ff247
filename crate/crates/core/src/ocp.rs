//! The finite-horizon problem over the frozen ensemble
//!
//! `J(u) = 1/2 sum_{k=1..K} dt E[l(y_k)] + beta/2 sum_{k=0..K-1} dt |u_k|_U^2`
//!
//! for the implicit Euler dynamics, solved by conjugate gradients on the
//! reduced quadratic. Gradients are exact adjoints of the discrete stepper.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, ControlMode, ControlSignal, ControlSource, Model, SimOptions, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_mean, pairwise_sum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ell {
    /// `l(y) = |y|_H^2`
    H,
    /// `l(y) = |y|_V^2`
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon: f64,
    pub ell: Ell,
    pub beta_penalty: f64,
    pub control_mode: ControlMode,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_max_iter")]
    pub cg_max_iter: usize,
    /// Bound on `(J(u) - J*) / J(u)` certified before CG stops.
    #[serde(default = "default_cost_gap_tol")]
    pub cost_gap_tol: f64,
}

fn default_cg_tol() -> f64 {
    1e-10
}

fn default_cg_max_iter() -> usize {
    2000
}

fn default_cost_gap_tol() -> f64 {
    1e-6
}

impl OcpConfig {
    pub fn check(&self) -> Vec<String> {
        let mut errs = vec![];
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errs.push(format!("horizon: must be positive, got {}", self.horizon));
        }
        if !(self.beta_penalty > 0.0 && self.beta_penalty.is_finite()) {
            errs.push(format!("beta_penalty: must be positive, got {}", self.beta_penalty));
        }
        if !(self.cg_tol > 0.0 && self.cg_tol < 1.0) {
            errs.push(format!("cg_tol: must lie in (0, 1), got {}", self.cg_tol));
        }
        if self.cg_max_iter == 0 {
            errs.push("cg_max_iter: must be at least 1".into());
        }
        if !(self.cost_gap_tol > 0.0 && self.cost_gap_tol < 1.0) {
            errs.push(format!("cost_gap_tol: must lie in (0, 1), got {}", self.cost_gap_tol));
        }
        errs
    }
}

/// `OP_T` started at global step `start_step` with `n_steps` control intervals.
#[derive(Debug, Clone, Copy)]
pub struct OcpProblem<'a> {
    pub model: &'a Model,
    pub start_step: usize,
    pub n_steps: usize,
    pub cfg: OcpConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostParts {
    pub state: f64,
    pub control: f64,
}

impl CostParts {
    pub fn total(&self) -> f64 {
        self.state + self.control
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub u_star: ControlSignal,
    pub trajectory: Trajectory,
    pub value: f64,
    pub parts: CostParts,
    pub uncontrolled_value: f64,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Relative residual after each CG iteration.
    pub history: Vec<f64>,
}

impl<'a> OcpProblem<'a> {
    pub fn new(model: &'a Model, start_step: usize, cfg: OcpConfig) -> Result<Self> {
        let errs = cfg.check();
        if !errs.is_empty() {
            return Err(Error::invalid("ocp", errs.join("; ")));
        }
        let n_steps = steps_for(cfg.horizon, model.dt)?;
        Ok(OcpProblem { model, start_step, n_steps, cfg })
    }

    pub fn zero_control(&self) -> ControlSignal {
        ControlSignal::zeros(
            self.cfg.control_mode,
            self.model.n_samples(),
            self.n_steps,
            self.model.n_controls(),
        )
    }

    fn ell(&self, y: &DVector<f64>) -> f64 {
        match self.cfg.ell {
            Ell::H => self.model.setup.norms.h2(y),
            Ell::V => self.model.setup.norms.v2(y),
        }
    }

    fn ell_gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        match self.cfg.ell {
            Ell::H => self.model.setup.mass.mul_vec(y),
            Ell::V => self.model.setup.laplacian.mul_vec(y),
        }
    }

    fn check_shapes(&self, u: &ControlSignal, y0: &[DVector<f64>]) -> Result<()> {
        let m = self.model;
        if y0.len() != m.n_samples() || y0.iter().any(|y| y.len() != m.n_dofs()) {
            return Err(Error::invalid("ocp", "initial ensemble does not match the model"));
        }
        if u.mode != self.cfg.control_mode || u.n_steps != self.n_steps || u.n_controls != m.n_controls() {
            return Err(Error::invalid("ocp", "control signal does not match the problem"));
        }
        Ok(())
    }

    fn rollout(&self, u: &ControlSignal, y0: &[DVector<f64>]) -> Result<Vec<Vec<DVector<f64>>>> {
        (0..self.model.n_samples())
            .into_par_iter()
            .map(|s| {
                let mut states = Vec::with_capacity(self.n_steps + 1);
                states.push(y0[s].clone());
                for j in 0..self.n_steps {
                    let load = self.model.control_load(&u.at(s, j).into_owned());
                    let next = self.model.step(s, self.start_step + j, &states[j], Some(&load))?;
                    states.push(next);
                }
                Ok(states)
            })
            .collect()
    }

    fn parts_from_states(&self, u: &ControlSignal, states: &[Vec<DVector<f64>>]) -> CostParts {
        let dt = self.model.dt;
        let per_step: Vec<f64> = (1..=self.n_steps)
            .map(|k| dt * pairwise_mean(&states.iter().map(|st| self.ell(&st[k])).collect::<Vec<_>>()))
            .collect();
        let control: Vec<f64> = (0..self.n_steps).map(|k| dt * u.norm2_at(k)).collect();
        CostParts {
            state: 0.5 * pairwise_sum(&per_step),
            control: 0.5 * self.cfg.beta_penalty * pairwise_sum(&control),
        }
    }

    pub fn cost_parts(&self, u: &ControlSignal, y0: &[DVector<f64>]) -> Result<CostParts> {
        self.check_shapes(u, y0)?;
        Ok(self.parts_from_states(u, &self.rollout(u, y0)?))
    }

    pub fn cost(&self, u: &ControlSignal, y0: &[DVector<f64>]) -> Result<f64> {
        Ok(self.cost_parts(u, y0)?.total())
    }

    pub fn gradient(&self, u: &ControlSignal, y0: &[DVector<f64>]) -> Result<ControlSignal> {
        self.check_shapes(u, y0)?;
        let states = self.rollout(u, y0)?;
        let model = self.model;
        let s_count = model.n_samples();
        let dt = model.dt;
        let weight = dt / s_count as f64;
        let w = &model.setup.control_matrix;
        // per-sample adjoint contributions dt * (M C)^T lambda_{k+1}
        let per_sample: Vec<Vec<DVector<f64>>> = (0..s_count)
            .into_par_iter()
            .map(|s| {
                let mut out = vec![DVector::zeros(model.n_controls()); self.n_steps];
                let mut carry = DVector::zeros(model.n_dofs());
                for j in (0..self.n_steps).rev() {
                    let g = self.ell_gradient(&states[s][j + 1]) * weight + &carry;
                    let (lam, back) = model.step_adjoint(s, self.start_step + j, &g)?;
                    out[j] = w.tr_mul(&lam) * dt;
                    carry = back;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let beta = self.cfg.beta_penalty;
        let mut grad = self.zero_control();
        match self.cfg.control_mode {
            ControlMode::Stochastic => {
                for (s, rows) in per_sample.iter().enumerate() {
                    for (j, row) in rows.iter().enumerate() {
                        let g = row + u.at(s, j) * (beta * dt / s_count as f64);
                        grad.set(s, j, &g);
                    }
                }
            }
            ControlMode::Deterministic => {
                for j in 0..self.n_steps {
                    let cols: Vec<DVector<f64>> = per_sample.iter().map(|rows| rows[j].clone()).collect();
                    let summed = crate::linalg::pairwise_mean_vectors(&cols) * s_count as f64;
                    grad.set(0, j, &(summed + u.at(0, j) * (beta * dt)));
                }
            }
        }
        Ok(grad)
    }

    /// Smallest eigenvalue bound of the reduced Hessian, from the control penalty.
    pub fn hessian_floor(&self) -> f64 {
        let base = self.cfg.beta_penalty * self.model.dt;
        match self.cfg.control_mode {
            ControlMode::Deterministic => base,
            ControlMode::Stochastic => base / self.model.n_samples() as f64,
        }
    }

    /// Action of the reduced Hessian: the gradient with zero initial data.
    pub fn hessian_apply(&self, p: &ControlSignal) -> Result<ControlSignal> {
        let zeros = vec![DVector::zeros(self.model.n_dofs()); self.model.n_samples()];
        self.gradient(p, &zeros)
    }

    /// State trajectory driven by `u`, through the same path as plant simulation.
    pub fn trajectory(&self, u: &ControlSignal, y0: &[DVector<f64>]) -> Result<Trajectory> {
        simulate(
            self.model,
            y0,
            self.start_step,
            self.n_steps,
            ControlSource::Open(u),
            SimOptions { store_states: true, source: None },
        )
    }

    pub fn parts_from_trajectory(&self, u: &ControlSignal, traj: &Trajectory) -> CostParts {
        let dt = self.model.dt;
        let series = match self.cfg.ell {
            Ell::H => &traj.mean_h2,
            Ell::V => &traj.mean_v2,
        };
        let state: Vec<f64> = series.iter().skip(1).map(|v| dt * v).collect();
        let control: Vec<f64> = (0..self.n_steps).map(|k| dt * u.norm2_at(k)).collect();
        CostParts {
            state: 0.5 * pairwise_sum(&state),
            control: 0.5 * self.cfg.beta_penalty * pairwise_sum(&control),
        }
    }
}

pub fn steps_for(length: f64, dt: f64) -> Result<usize> {
    let n = (length / dt).round();
    if n < 1.0 || ((n * dt - length).abs() > 1e-9 * length.max(dt)) {
        return Err(Error::invalid(
            "ocp",
            format!("length {length} is not a positive multiple of dt = {dt}"),
        ));
    }
    Ok(n as usize)
}

/// Conjugate gradients on `H u = -grad(0)`, optionally warm started.
pub fn solve_ocp(
    problem: &OcpProblem<'_>,
    y0: &[DVector<f64>],
    warm: Option<&ControlSignal>,
) -> Result<OcpSolution> {
    let zero = problem.zero_control();
    problem.check_shapes(&zero, y0)?;
    let mut x = warm.cloned().unwrap_or_else(|| zero.clone());
    let mut r = problem.gradient(&x, y0)?.data * -1.0;
    let g0 = if warm.is_some() { problem.gradient(&zero, y0)?.data.norm() } else { r.norm() };
    let target = problem.cfg.cg_tol * g0;
    // H >= floor * I, so J(u) - J* <= |r|^2 / (2 floor); J only decreases
    // along CG iterates, so the last evaluated cost caps the current one
    let floor = problem.hessian_floor();
    let mut cost_cap = problem.cost(&x, y0)?;
    let mut done = |x: &ControlSignal, rr: f64| -> Result<bool> {
        let gap = rr / (2.0 * floor);
        if rr.sqrt() > target || gap > problem.cfg.cost_gap_tol * cost_cap {
            return Ok(false);
        }
        cost_cap = problem.cost(x, y0)?;
        Ok(gap <= problem.cfg.cost_gap_tol * cost_cap)
    };
    let mut history = vec![];
    let mut iterations = 0;
    let mut converged = done(&x, r.norm_squared())?;
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    while !converged && iterations < problem.cfg.cg_max_iter {
        let hp = problem.hessian_apply(&zero.like(p.clone()))?.data;
        let php = p.dot(&hp);
        if !(php > 0.0) {
            return Err(Error::numerical(
                "ocp",
                format!("reduced Hessian not positive along search direction ({php:e})"),
            ));
        }
        let alpha = rr / php;
        x.data.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &hp, 1.0);
        let rr_new = r.dot(&r);
        iterations += 1;
        history.push(rr_new.sqrt() / g0.max(f64::MIN_POSITIVE));
        converged = done(&x, rr_new)?;
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    if !converged {
        log::warn!("ocp: CG stopped after {iterations} iterations at relative residual {:e}", rr.sqrt() / g0);
    }
    let trajectory = problem.trajectory(&x, y0)?;
    let parts = problem.parts_from_trajectory(&x, &trajectory);
    let uncontrolled_value = problem.cost(&zero, y0)?;
    let grad_norm = problem.gradient(&x, y0)?.data.norm();
    Ok(OcpSolution {
        u_star: x,
        trajectory,
        value: parts.total(),
        parts,
        uncontrolled_value,
        grad_norm,
        initial_grad_norm: g0,
        iterations,
        converged,
        history,
    })
}

/// `solve_ocp` that turns non-convergence into an error.
pub fn solve_ocp_strict(
    problem: &OcpProblem<'_>,
    y0: &[DVector<f64>],
    warm: Option<&ControlSignal>,
) -> Result<OcpSolution> {
    let sol = solve_ocp(problem, y0, warm)?;
    if !sol.converged {
        return Err(Error::numerical(
            "ocp",
            format!(
                "CG did not reach relative tolerance {:e} in {} iterations (last {:e})",
                problem.cfg.cg_tol,
                sol.iterations,
                sol.history.last().copied().unwrap_or(f64::NAN)
            ),
        ));
    }
    Ok(sol)
}
