//! Time stepping for the sample ensemble, the stabilizing feedback and the
//! a posteriori energy checks.
//!
//! One step advances `t_k -> t_{k+1}` by solving
//! `(M + dt A(t_{k+1})) y^{k+1} = M y^k + dt M C u^k` (implicit Euler) with
//! `A = A_nu + R + B`. Step matrices are factorized once per sample and per
//! time level and cached; for autonomous coefficients one factorization per
//! sample is shared by every step.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::linalg::{pairwise_mean, pairwise_sum, solve_checked, Banded, BandedLu};
use crate::mesh_fem::{coefficient_size, Convection, Reaction};
use crate::random_fields::{rng_from_seed, FieldRealization};
use crate::setup::SpatialSetup;
use crate::spectral_actuators::BetaTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    #[default]
    ImplicitEuler,
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || n_steps == 0 {
            return Err(Error::invalid(
                "dynamics",
                format!("need dt > 0 and n_steps >= 1, got {dt}, {n_steps}"),
            ));
        }
        Ok(TimeGrid { t0, dt, n_steps })
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.t0 + k as f64 * self.dt).collect()
    }
}

struct StepOp {
    implicit: Banded,
    lu: BandedLu,
    explicit: Banded,
}

/// The ensemble of discretized plants sharing one spatial setup.
pub struct Model {
    pub setup: SpatialSetup,
    pub reaction: Reaction,
    pub convection: Convection,
    pub dt: f64,
    pub scheme: TimeScheme,
    pub realizations: Vec<FieldRealization>,
    diffusion: Vec<Banded>,
    cache: Vec<Vec<OnceLock<Arc<StepOp>>>>,
    autonomous: bool,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("samples", &self.realizations.len())
            .field("n_dofs", &self.setup.n_dofs())
            .field("dt", &self.dt)
            .field("scheme", &self.scheme)
            .finish()
    }
}

impl Model {
    /// `cached_steps` bounds how many time levels are kept factorized per
    /// sample when the coefficients depend on time.
    pub fn new(
        setup: SpatialSetup,
        realizations: Vec<FieldRealization>,
        reaction: Reaction,
        convection: Convection,
        dt: f64,
        scheme: TimeScheme,
        cached_steps: usize,
    ) -> Result<Self> {
        if realizations.is_empty() {
            return Err(Error::invalid("dynamics", "model needs at least one realization"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dynamics", format!("dt = {dt} must be positive")));
        }
        let diffusion: Vec<Banded> =
            realizations.par_iter().map(|nu| setup.grid.assemble_diffusion(nu)).collect();
        let autonomous = reaction.is_autonomous() && convection.is_autonomous();
        let slots = if autonomous { 1 } else { cached_steps.max(1) };
        let cache = (0..realizations.len()).map(|_| (0..slots).map(|_| OnceLock::new()).collect()).collect();
        Ok(Model { setup, reaction, convection, dt, scheme, realizations, diffusion, cache, autonomous })
    }

    pub fn n_samples(&self) -> usize {
        self.realizations.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.setup.n_dofs()
    }

    pub fn n_controls(&self) -> usize {
        self.setup.n_controls()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn is_autonomous(&self) -> bool {
        self.autonomous
    }

    /// `A_nu + R(t) + B(t)` for one sample.
    pub fn spatial_operator(&self, sample: usize, t: f64) -> Banded {
        let mut a = self.diffusion[sample].clone();
        if !self.reaction.is_zero() {
            a.add_scaled(1.0, &self.setup.grid.assemble_reaction(&self.reaction, t));
        }
        if !self.convection.is_zero() {
            a.add_scaled(1.0, &self.setup.grid.assemble_convection(&self.convection, t));
        }
        a
    }

    fn build_op(&self, sample: usize, k: usize) -> Result<StepOp> {
        let dt = self.dt;
        let t1 = self.time(k + 1);
        let (implicit, explicit) = match self.scheme {
            TimeScheme::ImplicitEuler => {
                let mut b = self.setup.mass.clone();
                b.add_scaled(dt, &self.spatial_operator(sample, t1));
                (b, self.setup.mass.clone())
            }
            TimeScheme::CrankNicolson => {
                let mut b = self.setup.mass.clone();
                b.add_scaled(0.5 * dt, &self.spatial_operator(sample, t1));
                let mut e = self.setup.mass.clone();
                e.add_scaled(-0.5 * dt, &self.spatial_operator(sample, self.time(k)));
                (b, e)
            }
        };
        let lu = implicit.lu().map_err(|e| match e {
            Error::Numerical { message, .. } => {
                Error::numerical("dynamics", format!("step matrix of sample {sample} at step {k}: {message}"))
            }
            other => other,
        })?;
        Ok(StepOp { implicit, lu, explicit })
    }

    fn op(&self, sample: usize, k: usize) -> Result<Arc<StepOp>> {
        let slot = if self.autonomous { 0 } else { k };
        match self.cache[sample].get(slot) {
            Some(cell) => {
                if let Some(op) = cell.get() {
                    return Ok(op.clone());
                }
                let op = Arc::new(self.build_op(sample, k)?);
                Ok(cell.get_or_init(|| op).clone())
            }
            None => Ok(Arc::new(self.build_op(sample, k)?)),
        }
    }

    /// One forward step from `t_k`; `load` is a load vector applied on `[t_k, t_{k+1})`.
    pub fn step(
        &self,
        sample: usize,
        k: usize,
        y: &DVector<f64>,
        load: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let op = self.op(sample, k)?;
        let mut rhs = op.explicit.mul_vec(y);
        if let Some(l) = load {
            rhs.axpy(self.dt, l, 1.0);
        }
        solve_checked(&op.implicit, &op.lu, &rhs, false)
    }

    /// Transposed step: returns `(B_k^{-T} g, E_k^T B_k^{-T} g)` where the
    /// forward step reads `B_k y^{k+1} = E_k y^k + dt f`.
    pub fn step_adjoint(
        &self,
        sample: usize,
        k: usize,
        g: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let op = self.op(sample, k)?;
        let lam = solve_checked(&op.implicit, &op.lu, g, true)?;
        let back = op.explicit.mul_vec_transpose(&lam);
        Ok((lam, back))
    }

    /// Load vector `M (C u)`, evaluated exactly as [`simulate`] does.
    pub fn control_load(&self, u: &DVector<f64>) -> DVector<f64> {
        self.setup.mass.mul_vec(&self.setup.actuators.synthesize(u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// One coefficient vector per step shared by all samples.
    Deterministic,
    /// One coefficient vector per sample and step.
    Stochastic,
}

/// Piecewise constant controls on a time grid, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub mode: ControlMode,
    pub n_samples: usize,
    pub n_steps: usize,
    pub n_controls: usize,
    pub data: DVector<f64>,
}

impl ControlSignal {
    pub fn zeros(mode: ControlMode, n_samples: usize, n_steps: usize, n_controls: usize) -> Self {
        let blocks = match mode {
            ControlMode::Deterministic => 1,
            ControlMode::Stochastic => n_samples,
        };
        ControlSignal {
            mode,
            n_samples,
            n_steps,
            n_controls,
            data: DVector::zeros(blocks * n_steps * n_controls),
        }
    }

    pub fn like(&self, data: DVector<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        ControlSignal { data, ..self.clone() }
    }

    fn offset(&self, sample: usize, k: usize) -> usize {
        let block = match self.mode {
            ControlMode::Deterministic => 0,
            ControlMode::Stochastic => sample,
        };
        (block * self.n_steps + k) * self.n_controls
    }

    pub fn at(&self, sample: usize, k: usize) -> DVectorView<'_, f64> {
        self.data.rows(self.offset(sample, k), self.n_controls)
    }

    pub fn set(&mut self, sample: usize, k: usize, u: &DVector<f64>) {
        let o = self.offset(sample, k);
        self.data.rows_mut(o, self.n_controls).copy_from(u);
    }

    /// `|u(t_k)|_U^2`: Euclidean, averaged over samples in stochastic mode.
    pub fn norm2_at(&self, k: usize) -> f64 {
        match self.mode {
            ControlMode::Deterministic => self.at(0, k).norm_squared(),
            ControlMode::Stochastic => {
                let v: Vec<f64> = (0..self.n_samples).map(|s| self.at(s, k).norm_squared()).collect();
                pairwise_mean(&v)
            }
        }
    }

    /// Restriction to steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> ControlSignal {
        let mut out = ControlSignal::zeros(self.mode, self.n_samples, len, self.n_controls);
        let blocks = if self.mode == ControlMode::Stochastic { self.n_samples } else { 1 };
        for s in 0..blocks {
            for k in 0..len {
                out.set(s, k, &self.at(s, start + k).into_owned());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainVariant {
    /// Thresholds with `N(a, b)` and the embedding constant.
    #[default]
    Full,
    /// `b = 0`, bounded `a`: thresholds with `|a|_inf` only.
    ReactionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainInputs {
    pub nu_lower: f64,
    pub nu_upper: f64,
    /// `N(a, b)` for the full variant, `|a|_inf` for the reaction-only one.
    pub nab: f64,
    pub mu: f64,
    pub c_emb: f64,
    pub alpha_1: f64,
    pub variant: GainVariant,
}

impl GainInputs {
    /// Lower bound required of `beta_{N*}`.
    pub fn beta_threshold(&self) -> f64 {
        let GainInputs { nu_lower: nl, nab, mu, c_emb: c, variant, .. } = *self;
        match variant {
            GainVariant::Full => 2.0 / nl * (4.0 * mu + 3.0 * c * c * nab * nab / (2.0 * nl)),
            GainVariant::ReactionOnly => (4.0 * mu + 3.0 * nab) / nl,
        }
    }

    pub fn lambda_star(&self) -> f64 {
        let GainInputs { nu_lower: nl, nu_upper: nu, nab, mu, c_emb: c, alpha_1: a1, variant } = *self;
        match variant {
            GainVariant::Full => (4.0 * mu + 3.0 * c * c * nab * nab / nl) / (2.0 * a1) + nu / 2.0,
            GainVariant::ReactionOnly => (2.0 * mu + 3.0 * nab) / a1 + nu,
        }
    }

    /// Worst-case `(Theta_theta, Theta_phi)` over `nu_min` in `[nu_lower, nu_upper]`.
    pub fn thetas(&self, lambda: f64, beta: f64) -> (f64, f64) {
        let GainInputs { nu_lower: nl, nu_upper: nu, nab, c_emb: c, alpha_1: a1, variant, .. } = *self;
        match variant {
            GainVariant::Full => {
                let k = 3.0 * c * c * nab * nab;
                ((2.0 * lambda - nu) * a1 - k / nl, nl * beta / 2.0 - k / (2.0 * nl))
            }
            GainVariant::ReactionOnly => (2.0 * (lambda - nu) * a1 - 6.0 * nab, nl * beta - 3.0 * nab),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeedbackGain {
    pub lambda: f64,
    pub mu: f64,
    pub n_star: usize,
    pub lambda_star: f64,
    pub beta_threshold: f64,
    pub theta_theta: f64,
    pub theta_phi: f64,
}

/// Smallest tabulated `N` meeting the `beta` threshold, and `lambda*`.
pub fn select_gain(
    inputs: &GainInputs,
    table: &BetaTable,
    n_used: usize,
    lambda: Option<f64>,
) -> Result<FeedbackGain> {
    if !(inputs.nu_lower > 0.0 && inputs.alpha_1 > 0.0) {
        return Err(Error::invalid("dynamics", "gain selection needs nu_lower > 0 and alpha_1 > 0"));
    }
    let beta_threshold = inputs.beta_threshold();
    let n_star = table.rows.iter().find(|r| r.beta_n >= beta_threshold).map(|r| r.n).ok_or_else(|| {
        Error::precondition(
            "dynamics",
            format!(
                "insufficient actuators: no N <= {} reaches beta threshold {beta_threshold:.4e}",
                table.rows.last().map_or(0, |r| r.n)
            ),
        )
    })?;
    let lambda_star = inputs.lambda_star();
    let lambda = lambda.unwrap_or(lambda_star);
    let beta_used = table.beta(n_used).unwrap_or(f64::NAN);
    let (theta_theta, theta_phi) = inputs.thetas(lambda, beta_used);
    Ok(FeedbackGain { lambda, mu: inputs.mu, n_star, lambda_star, beta_threshold, theta_theta, theta_phi })
}

/// Empirical `max |<a y, y> - (y b, grad y)| / (N(a,b) |y|_H |y|_V)` over
/// random smooth and rough vectors and a spread of times, times 1.5.
pub fn calibrate_embedding(
    setup: &SpatialSetup,
    reaction: &Reaction,
    convection: &Convection,
    t_span: f64,
    n_vectors: usize,
    seed: u64,
) -> f64 {
    let nab = coefficient_size(reaction, convection);
    if nab == 0.0 {
        return 1.0;
    }
    let grid = &setup.grid;
    let n_times = if reaction.is_autonomous() && convection.is_autonomous() { 1 } else { 16 };
    let mut rng = rng_from_seed(seed);
    let dim = grid.dim();
    let vectors: Vec<DVector<f64>> = (0..n_vectors)
        .map(|v| {
            if v % 2 == 0 {
                DVector::from_fn(grid.n_dofs(), |_, _| rng.random::<f64>() - 0.5)
            } else {
                let coeffs: Vec<(usize, usize, f64)> = (0..6)
                    .map(|_| (rng.random_range(1..5), rng.random_range(1..5), rng.random::<f64>() - 0.5))
                    .collect();
                grid.eval_interior(|p| {
                    coeffs
                        .iter()
                        .map(|(i, j, c)| {
                            let mut s =
                                c * (*i as f64 * std::f64::consts::PI * p[0] / grid.lengths()[0]).sin();
                            if dim == 2 {
                                s *= (*j as f64 * std::f64::consts::PI * p[1] / grid.lengths()[1]).sin();
                            }
                            s
                        })
                        .sum()
                })
            }
        })
        .collect();
    let mut worst = 0.0f64;
    for it in 0..n_times {
        let t = t_span * it as f64 / n_times as f64;
        let mut op = grid.assemble_reaction(reaction, t);
        op.add_scaled(1.0, &grid.assemble_convection(convection, t));
        for y in &vectors {
            let denom = nab * (setup.norms.h2(y) * setup.norms.v2(y)).sqrt();
            if denom > 0.0 {
                worst = worst.max(op.quad_form(y).abs() / denom);
            }
        }
    }
    1.5 * worst
}

/// `u = -lambda I P_O (-Delta) P_E y` as a matrix acting on nodal vectors.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub lambda: f64,
    pub matrix: DMatrix<f64>,
}

impl FeedbackLaw {
    pub fn new(setup: &SpatialSetup, lambda: f64) -> Self {
        let m = setup.n_controls();
        if m == 0 {
            return FeedbackLaw { lambda, matrix: DMatrix::zeros(0, setup.n_dofs()) };
        }
        let e = &setup.eigenbasis.functions;
        let stiff = e.transpose() * setup.laplacian.mul_mat(e);
        // G_O = E^T M C = G_E^T
        let g_e = &setup.p_e.gram;
        let g_o = g_e.transpose();
        let qr_o = g_o.col_piv_qr();
        let qr_e = g_e.clone().col_piv_qr();
        let weighted = setup.control_matrix.transpose();
        let c = qr_e.solve(&weighted).expect("gram checked at setup");
        let coeff = qr_o.solve(&(stiff * c)).expect("gram checked at setup");
        FeedbackLaw { lambda, matrix: coeff * (-lambda) }
    }

    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.matrix * y
    }

    /// The same law evaluated step by step through the projectors, with the
    /// `V'` representative of `-Delta theta` obtained by a mass solve.
    pub fn apply_literal(setup: &SpatialSetup, lambda: f64, y: &DVector<f64>) -> DVector<f64> {
        let theta = setup.p_e.apply(y);
        let neg_laplace_theta = setup.mass_lu.solve(&setup.laplacian.mul_vec(&theta));
        setup.p_o.coefficients(&neg_laplace_theta) * (-lambda)
    }
}

pub fn feedback_control(setup: &SpatialSetup, gain: &FeedbackGain, y: &DVector<f64>) -> DVector<f64> {
    FeedbackLaw::apply_literal(setup, gain.lambda, y)
}

/// Control applied during a simulation.
#[derive(Clone, Copy)]
pub enum ControlSource<'a> {
    None,
    Feedback(&'a FeedbackLaw),
    /// Controls indexed from the first simulated step.
    Open(&'a ControlSignal),
}

/// Nodal source term `f(t)` evaluated at the implicit time level.
pub type Source<'a> = &'a (dyn Fn(f64) -> DVector<f64> + Sync);

#[derive(Clone, Copy, Default)]
pub struct SimOptions<'a> {
    pub store_states: bool,
    pub source: Option<Source<'a>>,
}

/// One simulated window. Series have `n_steps + 1` entries, controls `n_steps`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub start_step: usize,
    pub times: Vec<f64>,
    pub h2: Vec<Vec<f64>>,
    pub v2: Vec<Vec<f64>>,
    /// `|f_k|_{V'}^2` and `|f_k|_H^2` of the total right-hand side on each step.
    pub forcing_dual2: Vec<Vec<f64>>,
    pub forcing_h2: Vec<Vec<f64>>,
    pub controls: Vec<Vec<DVector<f64>>>,
    pub states: Option<Vec<Vec<DVector<f64>>>>,
    pub final_states: Vec<DVector<f64>>,
    pub mean_h2: Vec<f64>,
    pub mean_v2: Vec<f64>,
    pub dt: f64,
}

struct SampleRun {
    h2: Vec<f64>,
    v2: Vec<f64>,
    fd2: Vec<f64>,
    fh2: Vec<f64>,
    controls: Vec<DVector<f64>>,
    states: Option<Vec<DVector<f64>>>,
    last: DVector<f64>,
}

pub fn simulate(
    model: &Model,
    y0: &[DVector<f64>],
    start_step: usize,
    n_steps: usize,
    control: ControlSource<'_>,
    opts: SimOptions<'_>,
) -> Result<Trajectory> {
    if y0.len() != model.n_samples() {
        return Err(Error::invalid(
            "dynamics",
            format!("{} initial states for {} samples", y0.len(), model.n_samples()),
        ));
    }
    if let ControlSource::Open(u) = control {
        if u.n_steps < n_steps || u.n_controls != model.n_controls() {
            return Err(Error::invalid("dynamics", "control signal shape does not match the simulation"));
        }
    }
    let setup = &model.setup;
    let m = model.n_controls();
    let runs: Vec<SampleRun> = (0..model.n_samples())
        .into_par_iter()
        .map(|s| -> Result<SampleRun> {
            let mut y = y0[s].clone();
            let mut run = SampleRun {
                h2: vec![setup.norms.h2(&y)],
                v2: vec![setup.norms.v2(&y)],
                fd2: vec![],
                fh2: vec![],
                controls: vec![],
                states: opts.store_states.then(|| vec![y.clone()]),
                last: DVector::zeros(0),
            };
            for j in 0..n_steps {
                let k = start_step + j;
                let u = match control {
                    ControlSource::None => DVector::zeros(m),
                    ControlSource::Feedback(law) => law.apply(&y),
                    ControlSource::Open(sig) => sig.at(s, j).into_owned(),
                };
                let mut f_nodal = setup.actuators.synthesize(&u);
                if let Some(src) = opts.source {
                    f_nodal += src(model.time(k + 1));
                }
                let load = setup.mass.mul_vec(&f_nodal);
                run.fd2.push(setup.norms.dual2_functional(&load));
                run.fh2.push(setup.norms.h2(&f_nodal));
                y = model.step(s, k, &y, Some(&load))?;
                run.h2.push(setup.norms.h2(&y));
                run.v2.push(setup.norms.v2(&y));
                run.controls.push(u);
                if let Some(st) = run.states.as_mut() {
                    st.push(y.clone());
                }
            }
            run.last = y;
            Ok(run)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_of = |f: &dyn Fn(&SampleRun) -> &Vec<f64>| -> Vec<f64> {
        (0..=n_steps).map(|k| pairwise_mean(&runs.iter().map(|r| f(r)[k]).collect::<Vec<_>>())).collect()
    };
    let mean_h2 = mean_of(&|r| &r.h2);
    let mean_v2 = mean_of(&|r| &r.v2);
    let times = (0..=n_steps).map(|j| model.time(start_step + j)).collect();
    let mut out = Trajectory {
        start_step,
        times,
        h2: vec![],
        v2: vec![],
        forcing_dual2: vec![],
        forcing_h2: vec![],
        controls: vec![],
        states: opts.store_states.then(Vec::new),
        final_states: vec![],
        mean_h2,
        mean_v2,
        dt: model.dt,
    };
    for r in runs {
        out.h2.push(r.h2);
        out.v2.push(r.v2);
        out.forcing_dual2.push(r.fd2);
        out.forcing_h2.push(r.fh2);
        out.controls.push(r.controls);
        if let (Some(all), Some(st)) = (out.states.as_mut(), r.states) {
            all.push(st);
        }
        out.final_states.push(r.last);
    }
    Ok(out)
}

pub fn solve_closed_loop(
    model: &Model,
    y0: &[DVector<f64>],
    law: &FeedbackLaw,
    n_steps: usize,
) -> Result<Trajectory> {
    simulate(model, y0, 0, n_steps, ControlSource::Feedback(law), SimOptions::default())
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Largest `|y^{k+1}|_H^2 - |y^k|_H^2` over steps `k >= 1` and samples.
    pub fn max_energy_increase(&self) -> f64 {
        self.h2
            .iter()
            .flat_map(|h| h.windows(2).skip(1).map(|w| w[1] - w[0]))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `|y(t)|_H^2 / |y_0|_H^2` over time and samples.
    pub fn max_energy_ratio(&self) -> f64 {
        self.h2
            .iter()
            .filter(|h| h[0] > 0.0)
            .map(|h| h.iter().fold(0.0f64, |m, v| m.max(*v)) / h[0])
            .fold(0.0, f64::max)
    }

    /// Right-endpoint `sum_k dt * E[v_k]` of a per-step series.
    pub fn time_integral(&self, series: &[f64]) -> f64 {
        let terms: Vec<f64> = series.iter().skip(1).map(|v| v * self.dt).collect();
        pairwise_sum(&terms)
    }

    pub fn mean_forcing_dual2(&self) -> Vec<f64> {
        (0..self.n_steps())
            .map(|k| pairwise_mean(&self.forcing_dual2.iter().map(|f| f[k]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn mean_forcing_h2(&self) -> Vec<f64> {
        (0..self.n_steps())
            .map(|k| pairwise_mean(&self.forcing_h2.iter().map(|f| f[k]).collect::<Vec<_>>()))
            .collect()
    }
}

/// Empirical constants of the energy and observability estimates on one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateReport {
    pub y0_h2: f64,
    pub state_v2_integral: f64,
    pub forcing_dual2_integral: f64,
    pub forcing_h2_integral: f64,
    /// `(sup_t E|y|_H^2 + int E|y|_V^2) / (E|y0|_H^2 + int E|f|_{V'}^2)`
    pub energy_ratio: f64,
    /// `E|y0|_H^2 / (int E|y|_V^2 + int E|f|_{V'}^2)`
    pub observability_ratio: f64,
    /// Same with the forcing measured in `H`.
    pub observability_ratio_h: f64,
}

pub fn check_energy_observability(traj: &Trajectory) -> EstimateReport {
    let y0_h2 = traj.mean_h2[0];
    let state_v2_integral = traj.time_integral(&traj.mean_v2);
    let fd: Vec<f64> = traj.mean_forcing_dual2().iter().map(|v| v * traj.dt).collect();
    let fh: Vec<f64> = traj.mean_forcing_h2().iter().map(|v| v * traj.dt).collect();
    let forcing_dual2_integral = pairwise_sum(&fd);
    let forcing_h2_integral = pairwise_sum(&fh);
    let sup_h2 = traj.mean_h2.iter().fold(0.0f64, |m, v| m.max(*v));
    let ratio = |num: f64, den: f64| if num == 0.0 { 0.0 } else { num / den };
    EstimateReport {
        y0_h2,
        state_v2_integral,
        forcing_dual2_integral,
        forcing_h2_integral,
        energy_ratio: ratio(sup_h2 + state_v2_integral, y0_h2 + forcing_dual2_integral),
        observability_ratio: ratio(y0_h2, state_v2_integral + forcing_dual2_integral),
        observability_ratio_h: ratio(y0_h2, state_v2_integral + forcing_h2_integral),
    }
}
