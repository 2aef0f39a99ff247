//! Receding horizon loops over the frozen ensemble.
//!
//! Each cycle solves the finite-horizon problem from the current state,
//! applies the first `delta` of the optimal control and shifts the window.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, ControlMode, ControlSignal, ControlSource, Model, SimOptions, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{fit_line, pairwise_mean, pairwise_sum};
use crate::ocp::{solve_ocp, steps_for, Ell, OcpConfig, OcpProblem, OcpSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhcMode {
    /// Per-sample controls from the ensemble state.
    Stochastic,
    /// One deterministic control from the root-mean-square state.
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhcConfig {
    pub delta: f64,
    pub n_cycles: usize,
    pub mode: RhcMode,
    pub ocp: OcpConfig,
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

fn default_true() -> bool {
    true
}

impl RhcConfig {
    pub fn check(&self, dt: f64) -> Vec<String> {
        let mut errs: Vec<String> = self.ocp.check().into_iter().map(|e| format!("ocp.{e}")).collect();
        if !(self.delta > 0.0) {
            errs.push(format!("delta: must be positive, got {}", self.delta));
        } else {
            if steps_for(self.delta, dt).is_err() {
                errs.push(format!("delta: {} is not an integer multiple of dt = {dt}", self.delta));
            }
            if self.ocp.horizon < self.delta * (1.0 - 1e-12) {
                errs.push(format!(
                    "ocp.horizon: {} is shorter than delta = {}",
                    self.ocp.horizon, self.delta
                ));
            }
        }
        if self.n_cycles == 0 {
            errs.push("n_cycles: must be at least 1".into());
        }
        match self.mode {
            RhcMode::Stochastic if self.ocp.control_mode != ControlMode::Stochastic => {
                errs.push("ocp.control_mode: the stochastic loop needs stochastic controls".into())
            }
            RhcMode::Lognormal => {
                if self.ocp.control_mode != ControlMode::Deterministic {
                    errs.push("ocp.control_mode: the log-normal loop needs deterministic controls".into());
                }
                if self.ocp.ell != Ell::V {
                    errs.push("ocp.ell: the log-normal loop is stated for the V-norm cost".into());
                }
            }
            _ => {}
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub t: f64,
    pub value: f64,
    pub mean_h2: f64,
    pub mean_v2: f64,
    /// `sum dt |u|_U^2` over the applied segment.
    pub control_energy: f64,
    pub cg_iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct RhcTrace {
    pub times: Vec<f64>,
    pub mean_h2: Vec<f64>,
    pub mean_v2: Vec<f64>,
    /// `[sample][k]`.
    pub h2: Vec<Vec<f64>>,
    pub controls: ControlSignal,
    pub final_states: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub zeta: f64,
    pub ce: f64,
    pub r2: f64,
    /// Largest `|v - ce e^{-zeta t}| / v` on the fitted window.
    pub max_rel_residual: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone)]
pub struct RhcResult {
    pub trace: RhcTrace,
    pub cycles: Vec<CycleRecord>,
    pub v_t0: f64,
    pub j_inf: f64,
    pub alpha_hat: f64,
    pub decay: DecayFit,
    /// Set when an inner problem failed to converge; the trace stops there.
    pub aborted: Option<String>,
}

/// Exponential fit of `v(t) = ce e^{-zeta t}` over the latter half of the series.
pub fn decay_fit(times: &[f64], values: &[f64]) -> Result<DecayFit> {
    if times.len() != values.len() || times.len() < 10 {
        return Err(Error::invalid(
            "rhc",
            format!("decay fit needs at least 10 points, got {}", times.len()),
        ));
    }
    let start = times.len() / 2;
    let (ts, vs): (Vec<f64>, Vec<f64>) =
        times[start..].iter().zip(&values[start..]).filter(|(_, v)| **v > 0.0).map(|(t, v)| (*t, *v)).unzip();
    if ts.len() < 2 {
        return Ok(DecayFit { zeta: 0.0, ce: 0.0, r2: 1.0, max_rel_residual: 0.0, n_points: ts.len() });
    }
    let logs: Vec<f64> = vs.iter().map(|v| v.ln()).collect();
    let line = fit_line(&ts, &logs);
    let zeta = -line.slope;
    let ce = line.intercept.exp();
    let max_rel_residual =
        ts.iter().zip(&vs).map(|(t, v)| (v - ce * (-zeta * t).exp()).abs() / v).fold(0.0, f64::max);
    Ok(DecayFit { zeta, ce, r2: line.r_squared, max_rel_residual, n_points: ts.len() })
}

fn rms_state(states: &[DVector<f64>]) -> DVector<f64> {
    let n = states[0].len();
    DVector::from_fn(n, |i, _| pairwise_mean(&states.iter().map(|y| y[i] * y[i]).collect::<Vec<_>>()).sqrt())
}

fn shifted(u: &ControlSignal, by: usize) -> ControlSignal {
    let mut out = ControlSignal::zeros(u.mode, u.n_samples, u.n_steps, u.n_controls);
    let blocks = if u.mode == ControlMode::Stochastic { u.n_samples } else { 1 };
    for s in 0..blocks {
        for k in by..u.n_steps {
            out.set(s, k - by, &u.at(s, k).into_owned());
        }
    }
    out
}

fn ell_series(ell: Ell, traj: &Trajectory) -> &[f64] {
    match ell {
        Ell::H => &traj.mean_h2,
        Ell::V => &traj.mean_v2,
    }
}

/// Algorithm 1 (`RhcMode::Stochastic`) or Algorithm 2 (`RhcMode::Lognormal`).
pub fn run_rhc(model: &Model, y0: &[DVector<f64>], cfg: &RhcConfig) -> Result<RhcResult> {
    let errs = cfg.check(model.dt);
    if !errs.is_empty() {
        return Err(Error::invalid("rhc", errs.join("; ")));
    }
    if y0.len() != model.n_samples() {
        return Err(Error::invalid("rhc", "initial ensemble does not match the model"));
    }
    let seg = steps_for(cfg.delta, model.dt)?;
    let total = seg * cfg.n_cycles;
    let dt = model.dt;
    let deterministic = cfg.mode == RhcMode::Lognormal;

    let mut states: Vec<DVector<f64>> = y0.to_vec();
    let mut controls =
        ControlSignal::zeros(cfg.ocp.control_mode, model.n_samples(), total, model.n_controls());
    let norms = &model.setup.norms;
    let mut times = vec![0.0];
    let mut h2: Vec<Vec<f64>> = y0.iter().map(|y| vec![norms.h2(y)]).collect();
    let mut mean_h2 = vec![pairwise_mean(&h2.iter().map(|h| h[0]).collect::<Vec<_>>())];
    let mut mean_v2 = vec![pairwise_mean(&y0.iter().map(|y| norms.v2(y)).collect::<Vec<_>>())];
    let mut state_terms = vec![];
    let mut control_terms = vec![];
    let mut cycles = vec![];
    let mut v_t0 = f64::NAN;
    let mut warm: Option<ControlSignal> = None;
    let mut aborted = None;

    for c in 0..cfg.n_cycles {
        let start = c * seg;
        let problem = OcpProblem::new(model, start, cfg.ocp)?;
        let init: Vec<DVector<f64>> =
            if deterministic { vec![rms_state(&states); model.n_samples()] } else { states.clone() };
        let sol: OcpSolution = solve_ocp(&problem, &init, warm.as_ref())?;
        if c == 0 {
            v_t0 = sol.value;
        }
        if !sol.converged {
            aborted = Some(format!(
                "cycle {c}: CG stopped after {} iterations at relative residual {:e}",
                sol.iterations,
                sol.history.last().copied().unwrap_or(f64::NAN)
            ));
            break;
        }
        let applied = sol.u_star.window(0, seg);
        let traj =
            simulate(model, &states, start, seg, ControlSource::Open(&applied), SimOptions::default())?;
        let ell = ell_series(cfg.ocp.ell, &traj);
        let mut energy = vec![];
        for j in 0..seg {
            times.push(traj.times[j + 1]);
            mean_h2.push(traj.mean_h2[j + 1]);
            mean_v2.push(traj.mean_v2[j + 1]);
            for (s, h) in h2.iter_mut().enumerate() {
                h.push(traj.h2[s][j + 1]);
            }
            state_terms.push(dt * ell[j + 1]);
            control_terms.push(dt * applied.norm2_at(j));
            energy.push(dt * applied.norm2_at(j));
            let blocks = if deterministic { 1 } else { model.n_samples() };
            for s in 0..blocks {
                controls.set(s, start + j, &applied.at(s, j).into_owned());
            }
        }
        cycles.push(CycleRecord {
            cycle: c,
            t: model.time(start),
            value: sol.value,
            mean_h2: traj.mean_h2[0],
            mean_v2: traj.mean_v2[0],
            control_energy: pairwise_sum(&energy),
            cg_iterations: sol.iterations,
            converged: sol.converged,
        });
        states = traj.final_states;
        warm = cfg.warm_start.then(|| shifted(&sol.u_star, seg));
    }

    let j_inf = 0.5 * pairwise_sum(&state_terms) + 0.5 * cfg.ocp.beta_penalty * pairwise_sum(&control_terms);
    let alpha_hat = if j_inf > 0.0 { v_t0 / j_inf } else { 1.0 };
    let decay = if times.len() >= 10 {
        decay_fit(&times, &mean_h2)?
    } else {
        DecayFit { zeta: 0.0, ce: 0.0, r2: 0.0, max_rel_residual: f64::NAN, n_points: 0 }
    };
    let applied_steps = times.len() - 1;
    Ok(RhcResult {
        trace: RhcTrace {
            times,
            mean_h2,
            mean_v2,
            h2,
            controls: if applied_steps == total { controls } else { controls.window(0, applied_steps) },
            final_states: states,
        },
        cycles,
        v_t0,
        j_inf,
        alpha_hat,
        decay,
        aborted,
    })
}

pub fn run_rhc_stochastic(model: &Model, y0: &[DVector<f64>], cfg: &RhcConfig) -> Result<RhcResult> {
    if cfg.mode != RhcMode::Stochastic {
        return Err(Error::invalid("rhc", "configuration is not in stochastic mode"));
    }
    run_rhc(model, y0, cfg)
}

pub fn run_rhc_lognormal(model: &Model, y0: &[DVector<f64>], cfg: &RhcConfig) -> Result<RhcResult> {
    if cfg.mode != RhcMode::Lognormal {
        return Err(Error::invalid("rhc", "configuration is not in log-normal mode"));
    }
    if !model.convection.is_zero() {
        return Err(Error::precondition("rhc", "the log-normal loop requires b = 0"));
    }
    run_rhc(model, y0, cfg)
}

/// `V_T` over a long horizon, the stand-in for the infinite-horizon value.
pub fn value_surrogate(
    model: &Model,
    y0: &[DVector<f64>],
    cfg: &OcpConfig,
    horizon: f64,
) -> Result<OcpSolution> {
    let problem = OcpProblem::new(model, 0, OcpConfig { horizon, ..*cfg })?;
    let sol = solve_ocp(&problem, y0, None)?;
    if !sol.converged {
        return Err(Error::numerical(
            "ocp",
            format!("value surrogate did not converge in {} iterations", sol.iterations),
        ));
    }
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuboptimalityReport {
    pub v_t0: f64,
    pub v_inf_surrogate: f64,
    pub j_inf: f64,
    /// `ce e^{-zeta t_end} / zeta`: bound on the truncated state cost tail.
    pub tail_bound: f64,
    pub alpha_hat: f64,
    pub tol: f64,
    pub upper_ok: bool,
    pub lower_ok: bool,
    pub alpha_ok: bool,
}

pub fn suboptimality_report(result: &RhcResult, v_inf_surrogate: f64, tol: f64) -> SuboptimalityReport {
    let t_end = result.trace.times.last().copied().unwrap_or(0.0);
    let d = result.decay;
    let tail_bound = if d.zeta > 0.0 { d.ce * (-d.zeta * t_end).exp() / d.zeta } else { f64::INFINITY };
    let scale = v_inf_surrogate.abs();
    SuboptimalityReport {
        v_t0: result.v_t0,
        v_inf_surrogate,
        j_inf: result.j_inf,
        tail_bound,
        alpha_hat: result.alpha_hat,
        tol,
        upper_ok: result.v_t0 <= v_inf_surrogate + tol * scale,
        lower_ok: result.j_inf >= v_inf_surrogate - tol * scale,
        alpha_ok: result.alpha_hat > 0.0 && result.alpha_hat <= 1.0 + tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_exponential_is_recovered() {
        let t: Vec<f64> = (0..40).map(|k| 0.05 * k as f64).collect();
        let v: Vec<f64> = t.iter().map(|t| 3.5 * (-2.0 * t).exp()).collect();
        let f = decay_fit(&t, &v).unwrap();
        assert!((f.zeta - 2.0).abs() < 1e-8);
        assert!((f.ce - 3.5).abs() < 1e-8);
        assert!(f.max_rel_residual < 1e-8);
    }

    #[test]
    fn zero_and_short_traces() {
        let t: Vec<f64> = (0..12).map(|k| k as f64).collect();
        let f = decay_fit(&t, &[0.0; 12]).unwrap();
        assert_eq!((f.zeta, f.ce), (0.0, 0.0));
        assert!(decay_fit(&t[..9], &[1.0; 9]).is_err());
        let grow: Vec<f64> = t.iter().map(|t| t.exp()).collect();
        assert!(decay_fit(&t, &grow).unwrap().zeta < 0.0);
    }

    #[test]
    fn shift_moves_tail_forward() {
        let mut u = ControlSignal::zeros(ControlMode::Stochastic, 2, 4, 1);
        for s in 0..2 {
            for k in 0..4 {
                u.set(s, k, &DVector::from_element(1, (10 * s + k) as f64));
            }
        }
        let v = shifted(&u, 3);
        assert_eq!(v.at(1, 0)[0], 13.0);
        assert_eq!(v.at(1, 1)[0], 0.0);
    }
}
