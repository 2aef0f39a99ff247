//! One function per subcommand: compute, then write artifacts.

use rhc_core::config::ExperimentConfig;
use rhc_core::dynamics::{ControlMode, ControlSignal};
use rhc_core::experiment::Experiment;
use rhc_core::rhc::RhcResult;
use serde::Serialize;
use statrs::statistics::{Data, OrderStatistics};

use crate::output::Context;
use crate::Failure;

fn numerical(message: String) -> Failure {
    Failure { code: 3, message }
}

fn quantile(values: &[f64], tau: f64) -> f64 {
    Data::new(values.to_vec()).quantile(tau)
}

#[derive(Serialize)]
struct SimulateRow {
    t: f64,
    #[serde(rename = "E_H2")]
    e_h2: f64,
    #[serde(rename = "E_V2")]
    e_v2: f64,
    #[serde(rename = "H2_q05")]
    q05: f64,
    #[serde(rename = "H2_q50")]
    q50: f64,
    #[serde(rename = "H2_q95")]
    q95: f64,
    #[serde(rename = "E_H2_uncontrolled")]
    free_h2: f64,
}

pub fn simulate(cfg: ExperimentConfig, ctx: &Context) -> Result<(), Failure> {
    let exp = Experiment::new(cfg)?;
    let rep = exp.run_simulate()?;
    let c = &rep.controlled;
    let rows = (0..c.times.len()).map(|k| {
        let per_sample: Vec<f64> = c.h2.iter().map(|h| h[k]).collect();
        SimulateRow {
            t: c.times[k],
            e_h2: c.mean_h2[k],
            e_v2: c.mean_v2[k],
            q05: quantile(&per_sample, 0.05),
            q50: quantile(&per_sample, 0.5),
            q95: quantile(&per_sample, 0.95),
            free_h2: rep.uncontrolled.mean_h2[k],
        }
    });
    ctx.write_csv("simulate.csv", rows)?;
    let max_increase = c.max_energy_increase();
    let summary = serde_json::json!({
        "gain": rep.gain,
        "beta_table": rep.table,
        "controlled_decay": rep.controlled_fit,
        "uncontrolled_decay": rep.uncontrolled_fit,
        "max_energy_increase": max_increase,
        "energy_nonincreasing": max_increase <= 0.0,
        "max_energy_ratio": c.max_energy_ratio(),
        "estimates": rep.estimates,
    });
    ctx.write_json("simulate_summary.json", &summary)?;
    log::info!(
        "lambda = {:.4}, N* = {}, controlled zeta = {:.4}, uncontrolled zeta = {:.4}",
        rep.gain.gain.lambda,
        rep.gain.gain.n_star,
        rep.controlled_fit.zeta,
        rep.uncontrolled_fit.zeta
    );
    Ok(())
}

/// One row per step (and per sample in stochastic mode).
fn control_table(u: &ControlSignal, dt: f64, t0: f64) -> (Vec<String>, Vec<Vec<String>>) {
    let stochastic = u.mode == ControlMode::Stochastic;
    let mut header = vec!["step".to_string(), "t".to_string()];
    if stochastic {
        header.push("sample".into());
    }
    header.extend((1..=u.n_controls).map(|i| format!("u_{i}")));
    let blocks = if stochastic { u.n_samples } else { 1 };
    let mut rows = vec![];
    for s in 0..blocks {
        for k in 0..u.n_steps {
            let mut row = vec![k.to_string(), (t0 + k as f64 * dt).to_string()];
            if stochastic {
                row.push(s.to_string());
            }
            row.extend(u.at(s, k).iter().map(|v| v.to_string()));
            rows.push(row);
        }
    }
    (header, rows)
}

#[derive(Serialize)]
struct NormRow {
    t: f64,
    #[serde(rename = "E_H2")]
    e_h2: f64,
    #[serde(rename = "E_V2")]
    e_v2: f64,
}

#[derive(Serialize)]
struct HistoryRow {
    iteration: usize,
    rel_residual: f64,
}

pub fn ocp(cfg: ExperimentConfig, ctx: &Context) -> Result<(), Failure> {
    let exp = Experiment::new(cfg)?;
    let sol = exp.run_ocp()?;
    let (header, rows) = control_table(&sol.u_star, exp.model.dt, 0.0);
    ctx.write_table("ocp_control.csv", &header, &rows)?;
    let tr = &sol.trajectory;
    ctx.write_csv(
        "ocp_trajectory.csv",
        (0..tr.times.len()).map(|k| NormRow { t: tr.times[k], e_h2: tr.mean_h2[k], e_v2: tr.mean_v2[k] }),
    )?;
    ctx.write_csv(
        "ocp_history.csv",
        sol.history.iter().enumerate().map(|(i, r)| HistoryRow { iteration: i + 1, rel_residual: *r }),
    )?;
    let summary = serde_json::json!({
        "config": exp.cfg.ocp,
        "V_T": sol.value,
        "cost_parts": sol.parts,
        "uncontrolled_cost": sol.uncontrolled_value,
        "grad_norm": sol.grad_norm,
        "initial_grad_norm": sol.initial_grad_norm,
        "iterations": sol.iterations,
        "converged": sol.converged,
    });
    ctx.write_json("ocp_summary.json", &summary)?;
    log::info!("V_T = {:.8e} after {} CG iterations", sol.value, sol.iterations);
    if !sol.converged {
        return Err(numerical(format!("ocp: CG did not converge in {} iterations", sol.iterations)));
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    t: f64,
    #[serde(rename = "E_H2")]
    e_h2: f64,
    #[serde(rename = "E_V2")]
    e_v2: f64,
    /// `|u|_U^2` on `[t, t + dt)`, empty on the last instant.
    u_norm2: Option<f64>,
}

#[derive(Serialize)]
struct CycleRow {
    cycle: usize,
    t_k: f64,
    #[serde(rename = "V_T")]
    value: f64,
    #[serde(rename = "E_H2")]
    e_h2: f64,
    #[serde(rename = "E_V2")]
    e_v2: f64,
    control_energy: f64,
    cg_iterations: usize,
    converged: bool,
}

fn write_rhc_run(ctx: &Context, run: &RhcResult) -> Result<(), Failure> {
    ctx.write_csv(
        "rhc_cycles.csv",
        run.cycles.iter().map(|c| CycleRow {
            cycle: c.cycle,
            t_k: c.t,
            value: c.value,
            e_h2: c.mean_h2,
            e_v2: c.mean_v2,
            control_energy: c.control_energy,
            cg_iterations: c.cg_iterations,
            converged: c.converged,
        }),
    )?;
    let tr = &run.trace;
    let n_u = tr.controls.n_steps;
    ctx.write_csv(
        "rhc_trace.csv",
        (0..tr.times.len()).map(|k| TraceRow {
            t: tr.times[k],
            e_h2: tr.mean_h2[k],
            e_v2: tr.mean_v2[k],
            u_norm2: (k < n_u).then(|| tr.controls.norm2_at(k)),
        }),
    )
}

pub fn rhc(cfg: ExperimentConfig, ctx: &Context) -> Result<(), Failure> {
    let exp = Experiment::new(cfg)?;
    let main = exp.run_rhc_main()?;
    write_rhc_run(ctx, &main)?;
    if let Some(msg) = &main.aborted {
        ctx.write_json(
            "rhc_summary.json",
            &serde_json::json!({ "aborted": msg, "cycles_completed": main.cycles.len() }),
        )?;
        return Err(numerical(format!("rhc: run aborted with a partial trace: {msg}")));
    }
    let study = exp.rhc_study(main)?;
    ctx.write_csv("rhc_sweep.csv", study.sweep.iter())?;
    let m = &study.main;
    let r = &study.report;
    let summary = serde_json::json!({
        "mode": exp.cfg.rhc.as_ref().map(|s| s.mode),
        "delta": exp.cfg.rhc.as_ref().map(|s| s.delta),
        "horizon": exp.cfg.ocp.as_ref().map(|o| o.horizon),
        "n_cycles": m.cycles.len(),
        "V_T0": m.v_t0,
        "J_inf": m.j_inf,
        "alpha_hat": m.alpha_hat,
        "zeta_hat": m.decay.zeta,
        "ce_hat": m.decay.ce,
        "decay": m.decay,
        "uncontrolled_decay": study.uncontrolled_fit,
        "surrogate_horizon": study.surrogate_horizon,
        "V_inf_surrogate": study.surrogate.value,
        "surrogate_converged": study.surrogate.converged,
        "feedback_cost": study.feedback_cost,
        "checks": {
            "upper_ok": r.upper_ok,
            "lower_ok": r.lower_ok,
            "alpha_ok": r.alpha_ok,
            "alpha_nondecreasing": study.alpha_nondecreasing,
            "surrogate_below_feedback": study.feedback_cost.map(|f| study.surrogate.value <= f),
        },
        "tail_bound": r.tail_bound,
        "tolerance": r.tol,
        "smallest_positive_horizon": study.smallest_positive_horizon,
    });
    ctx.write_json("rhc_summary.json", &summary)?;
    log::info!(
        "alpha_hat = {:.6}, zeta_hat = {:.4}, V_T0 = {:.6e}, J_inf = {:.6e}, V_inf surrogate = {:.6e}",
        m.alpha_hat,
        m.decay.zeta,
        m.v_t0,
        m.j_inf,
        study.surrogate.value
    );
    if !study.surrogate.converged {
        return Err(numerical("rhc: surrogate problem did not converge".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct BetaCsvRow {
    #[serde(rename = "N")]
    n: usize,
    beta_n: f64,
    beta_n_over_n2: f64,
}

pub fn beta(cfg: ExperimentConfig, ctx: &Context) -> Result<(), Failure> {
    let exp = Experiment::new(cfg)?;
    let table = exp.beta_table(exp.cfg.feedback.n_beta_max)?;
    ctx.write_csv(
        "beta.csv",
        table.rows.iter().map(|r| BetaCsvRow {
            n: r.n,
            beta_n: r.beta_n,
            beta_n_over_n2: r.beta_n / (r.n * r.n) as f64,
        }),
    )?;
    let summary = serde_json::json!({
        "slope": table.slope,
        "c_beta_fit": table.c_beta_fit,
        "alpha_1": exp.model.setup.alpha_1,
        "r": exp.cfg.actuators.r,
        "n_cells": exp.cfg.domain.n_cells,
    });
    ctx.write_json("beta_summary.json", &summary)?;
    log::info!("log-log slope of beta_N: {:.4}", table.slope);
    Ok(())
}

#[derive(Serialize)]
struct FailRow<'a> {
    #[serde(rename = "N_bar")]
    n_bar: usize,
    beta: f64,
    p_empirical: f64,
    ci_lo: f64,
    ci_hi: f64,
    p_bound: Option<f64>,
    variant: rhc_core::risk::CriterionVariant,
    p_bound_upper: Option<f64>,
    vacuous: bool,
    note: &'a str,
}

pub fn failprob(cfg: ExperimentConfig, ctx: &Context) -> Result<(), Failure> {
    let exp = Experiment::new(cfg)?;
    let rep = exp.run_failprob()?;
    let b = &rep.report;
    ctx.write_csv(
        "failprob.csv",
        b.rows.iter().map(|r| FailRow {
            n_bar: r.n_bar,
            beta: r.beta,
            p_empirical: r.p_empirical.p,
            ci_lo: r.p_empirical.ci_lo,
            ci_hi: r.p_empirical.ci_hi,
            p_bound: r.p_bound,
            variant: b.variant,
            p_bound_upper: r.p_bound_upper,
            vacuous: r.vacuous,
            note: &r.note,
        }),
    )?;
    let summary = serde_json::json!({
        "family": b.family,
        "variant": b.variant,
        "c_emb": b.c_emb,
        "nab": b.nab,
        "moment_name": b.moment_name,
        "moment": b.moment,
        "moment_exact": b.moment_exact,
        "kappa0": b.kappa0,
        "decay_certificate": rep.certificate,
    });
    ctx.write_json("failprob_summary.json", &summary)?;
    let violated: Vec<&str> = b.rows.iter().filter(|r| !r.note.is_empty()).map(|r| r.note.as_str()).collect();
    if !violated.is_empty() {
        return Err(Failure {
            code: 4,
            message: format!("risk: precondition violated: {}", violated.join("; ")),
        });
    }
    Ok(())
}
