//! Wiring from a validated configuration to the computations behind each
//! subcommand. Nothing here writes files.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{ExperimentConfig, InitialState};
use crate::dynamics::{
    calibrate_embedding, check_energy_observability, select_gain, simulate, ControlMode, ControlSignal,
    ControlSource, EstimateReport, FeedbackGain, FeedbackLaw, GainInputs, GainVariant, Model, SimOptions,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::mesh_fem::{build_grid, coefficient_size, RectGrid};
use crate::ocp::{solve_ocp, steps_for, OcpConfig, OcpProblem, OcpSolution};
use crate::random_fields::{build_ensemble, derive_seed, rng_from_seed, stream, Ensemble, FieldModel};
use crate::rhc::{
    decay_fit, run_rhc, suboptimality_report, value_surrogate, DecayFit, RhcResult, SuboptimalityReport,
};
use crate::risk::{decay_certificate, failure_sweep, BoundReport, CriterionVariant, DecayCertificate};
use crate::setup::SpatialSetup;
use crate::spectral_actuators::{beta_table, BetaTable};

/// Slack on the log-log slope when certifying polynomial decay of the bound.
pub const SLOPE_TOL: f64 = 0.05;

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub grid: RectGrid,
    pub field: FieldModel,
    pub ensemble: Ensemble,
    pub model: Model,
    pub y0: DVector<f64>,
}

/// Nodal initial state on the interior nodes.
pub fn initial_state(grid: &RectGrid, spec: &InitialState, master_seed: u64) -> DVector<f64> {
    let lengths = grid.lengths().to_vec();
    let dim = grid.dim();
    let sines = move |modes: &dyn Fn(usize) -> usize, p: &[f64; 2]| -> f64 {
        (0..dim).map(|d| (modes(d) as f64 * std::f64::consts::PI * p[d] / lengths[d]).sin()).product()
    };
    match spec {
        InitialState::Modes { terms } => {
            grid.eval_interior(|p| terms.iter().map(|t| t.amplitude * sines(&|d| t.mode[d], p)).sum())
        }
        InitialState::Random { count, decay, draw } => {
            let mut rng = rng_from_seed(derive_seed(master_seed, stream::INITIAL_STATE, *draw));
            let coeffs: Vec<f64> = (1..=*count)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * (j as f64).powf(-decay)
                })
                .collect();
            grid.eval_interior(|p| coeffs.iter().enumerate().map(|(j, c)| c * sines(&|_| j + 1, p)).sum())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GainReport {
    pub inputs: GainInputsRecord,
    pub gain: FeedbackGain,
    pub n_used: usize,
    pub beta_used: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GainInputsRecord {
    pub nu_lower: f64,
    pub nu_upper: f64,
    pub nab: f64,
    pub mu: f64,
    pub c_emb: f64,
    pub alpha_1: f64,
    pub variant: GainVariant,
}

impl From<GainInputs> for GainInputsRecord {
    fn from(g: GainInputs) -> Self {
        GainInputsRecord {
            nu_lower: g.nu_lower,
            nu_upper: g.nu_upper,
            nab: g.nab,
            mu: g.mu,
            c_emb: g.c_emb,
            alpha_1: g.alpha_1,
            variant: g.variant,
        }
    }
}

pub struct SimulateReport {
    pub table: BetaTable,
    pub gain: GainReport,
    pub controlled: Trajectory,
    pub uncontrolled: Trajectory,
    pub controlled_fit: DecayFit,
    pub uncontrolled_fit: DecayFit,
    pub estimates: EstimateReport,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepPoint {
    pub horizon: f64,
    pub v_t0: f64,
    pub j_inf: f64,
    pub alpha_hat: f64,
    pub zeta: f64,
}

pub struct RhcReport {
    pub main: RhcResult,
    pub surrogate_horizon: f64,
    pub surrogate: OcpSolution,
    pub report: SuboptimalityReport,
    /// Decay of the same ensemble without control, for paired comparison.
    pub uncontrolled_fit: DecayFit,
    /// Cost of the stabilizing feedback over the window, an upper bound on
    /// the infinite-horizon value up to its tail; stochastic mode only.
    pub feedback_cost: Option<f64>,
    pub sweep: Vec<SweepPoint>,
    pub alpha_nondecreasing: bool,
    /// Smallest swept horizon with a positive suboptimality index.
    pub smallest_positive_horizon: Option<f64>,
}

pub struct FailprobReport {
    pub table: BetaTable,
    pub report: BoundReport,
    pub certificate: Option<DecayCertificate>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.domain;
        let grid = build_grid(d.dim, &d.lengths, &d.n_cells)?;
        let field = FieldModel::new(&cfg.field, &grid)?;
        let ensemble = build_ensemble(&field, cfg.ensemble.samples, cfg.ensemble.master_seed)?;
        let setup = SpatialSetup::new(grid.clone(), cfg.actuators.n, cfg.actuators.r)?;
        let dy = &cfg.dynamics;
        let mut horizon_steps = steps_for(dy.t_end, dy.dt)?;
        if let Some(o) = &cfg.ocp {
            let longest = cfg
                .rhc
                .as_ref()
                .map(|r| r.horizon_sweep.iter().copied().fold(o.horizon, f64::max) * r.surrogate_factor)
                .unwrap_or(o.horizon);
            horizon_steps =
                horizon_steps.max(steps_for(dy.t_end, dy.dt)? + (longest / dy.dt).ceil() as usize);
        }
        let model = Model::new(
            setup,
            ensemble.realizations.clone(),
            dy.reaction.clone(),
            dy.convection.clone(),
            dy.dt,
            dy.scheme,
            horizon_steps + 1,
        )?;
        let y0 = initial_state(&grid, &cfg.initial_state, cfg.ensemble.master_seed);
        Ok(Experiment { cfg, grid, field, ensemble, model, y0 })
    }

    pub fn initial_ensemble(&self) -> Vec<DVector<f64>> {
        vec![self.y0.clone(); self.model.n_samples()]
    }

    pub fn n_steps(&self) -> usize {
        steps_for(self.cfg.dynamics.t_end, self.cfg.dynamics.dt).expect("validated")
    }

    pub fn beta_table(&self, n_max: usize) -> Result<BetaTable> {
        let s = &self.model.setup;
        beta_table(&self.grid, &s.mass, &s.laplacian, n_max, self.cfg.actuators.r)
    }

    pub fn embedding_constant(&self) -> f64 {
        calibrate_embedding(
            &self.model.setup,
            &self.model.reaction,
            &self.model.convection,
            self.cfg.dynamics.t_end,
            self.cfg.feedback.embedding_vectors,
            derive_seed(self.cfg.ensemble.master_seed, stream::TEST_VECTORS, 0),
        )
    }

    /// Diffusion bounds entering the gain: the family's uniform bounds, or
    /// the ensemble extremes for the unbounded log-normal family.
    pub fn diffusion_bounds(&self) -> (f64, f64) {
        self.field.uniform_bounds().unwrap_or_else(|| {
            let r = &self.ensemble.realizations;
            (
                r.iter().map(|v| v.nu_min).fold(f64::INFINITY, f64::min),
                r.iter().map(|v| v.nu_max).fold(f64::NEG_INFINITY, f64::max),
            )
        })
    }

    pub fn gain(&self, table: &BetaTable) -> Result<GainReport> {
        let f = &self.cfg.feedback;
        let (nu_lower, nu_upper) = self.diffusion_bounds();
        let nab = match f.variant {
            GainVariant::Full => coefficient_size(&self.model.reaction, &self.model.convection),
            GainVariant::ReactionOnly => self.model.reaction.sup_norm(),
        };
        let c_emb = match f.variant {
            GainVariant::Full => self.embedding_constant(),
            GainVariant::ReactionOnly => 1.0,
        };
        let inputs = GainInputs {
            nu_lower,
            nu_upper,
            nab,
            mu: f.mu,
            c_emb,
            alpha_1: self.model.setup.alpha_1,
            variant: f.variant,
        };
        let n_used = self.cfg.actuators.n;
        let gain = select_gain(&inputs, table, n_used, f.lambda)?;
        if n_used < gain.n_star {
            log::warn!(
                "actuators.n = {n_used} is below N* = {}; the decay guarantee does not apply",
                gain.n_star
            );
        }
        Ok(GainReport {
            inputs: inputs.into(),
            gain,
            n_used,
            beta_used: table.beta(n_used).unwrap_or(f64::NAN),
        })
    }

    pub fn run_simulate(&self) -> Result<SimulateReport> {
        let table = self.beta_table(self.cfg.feedback.n_beta_max)?;
        let gain = self.gain(&table)?;
        let law = FeedbackLaw::new(&self.model.setup, gain.gain.lambda);
        let y0 = self.initial_ensemble();
        let n = self.n_steps();
        let controlled =
            simulate(&self.model, &y0, 0, n, ControlSource::Feedback(&law), SimOptions::default())?;
        let uncontrolled = simulate(&self.model, &y0, 0, n, ControlSource::None, SimOptions::default())?;
        let controlled_fit = decay_fit(&controlled.times, &controlled.mean_h2)?;
        let uncontrolled_fit = decay_fit(&uncontrolled.times, &uncontrolled.mean_h2)?;
        let estimates = check_energy_observability(&uncontrolled);
        Ok(SimulateReport {
            table,
            gain,
            controlled,
            uncontrolled,
            controlled_fit,
            uncontrolled_fit,
            estimates,
        })
    }

    fn ocp_config(&self) -> Result<OcpConfig> {
        self.cfg.ocp.ok_or_else(|| Error::Config(vec!["ocp: section required for this subcommand".into()]))
    }

    pub fn run_ocp(&self) -> Result<OcpSolution> {
        let problem = OcpProblem::new(&self.model, 0, self.ocp_config()?)?;
        solve_ocp(&problem, &self.initial_ensemble(), None)
    }

    /// Receding horizon run at the configured horizon. An aborted run is
    /// returned with its partial trace and `aborted` set.
    pub fn run_rhc_main(&self) -> Result<RhcResult> {
        run_rhc(&self.model, &self.initial_ensemble(), &self.cfg.rhc_config()?)
    }

    /// Configured run, each swept horizon, and the long-horizon surrogate of
    /// the infinite-horizon value.
    pub fn run_rhc(&self) -> Result<RhcReport> {
        let main = self.run_rhc_main()?;
        if let Some(msg) = &main.aborted {
            return Err(Error::numerical("ocp", format!("receding horizon run aborted: {msg}")));
        }
        self.rhc_study(main)
    }

    /// Surrogate, sweep and paired free decay around a completed main run.
    pub fn rhc_study(&self, main: RhcResult) -> Result<RhcReport> {
        let section =
            self.cfg.rhc.clone().ok_or_else(|| Error::Config(vec!["rhc: section required".into()]))?;
        let base = self.cfg.rhc_config()?;
        let y0 = self.initial_ensemble();
        let t_max = section.horizon_sweep.iter().copied().fold(base.ocp.horizon, f64::max);
        let surrogate_horizon = snap(section.surrogate_factor * t_max, self.model.dt);
        let surrogate = value_surrogate(&self.model, &y0, &base.ocp, surrogate_horizon)?;
        let t_end = self.cfg.dynamics.t_end;
        if t_end < surrogate_horizon * (1.0 - 1e-12) {
            log::warn!("t_end = {t_end} is shorter than the surrogate horizon {surrogate_horizon}; the lower check is approximate");
        }
        let report = suboptimality_report(&main, surrogate.value, section.tolerance);
        let free = simulate(&self.model, &y0, 0, self.n_steps(), ControlSource::None, SimOptions::default())?;
        let uncontrolled_fit = decay_fit(&free.times, &free.mean_h2)?;
        let feedback_cost = self.feedback_cost(&base.ocp)?;
        let mut sweep = vec![];
        for &t in &section.horizon_sweep {
            let mut c = base;
            c.ocp.horizon = t;
            let r = if (t - base.ocp.horizon).abs() < 1e-12 {
                main.clone()
            } else {
                run_rhc(&self.model, &y0, &c)?
            };
            if let Some(msg) = &r.aborted {
                return Err(Error::numerical("ocp", format!("sweep at T = {t} aborted: {msg}")));
            }
            sweep.push(SweepPoint {
                horizon: t,
                v_t0: r.v_t0,
                j_inf: r.j_inf,
                alpha_hat: r.alpha_hat,
                zeta: r.decay.zeta,
            });
        }
        sweep.sort_by(|a, b| a.horizon.total_cmp(&b.horizon));
        let alpha_nondecreasing = sweep.windows(2).all(|w| w[1].alpha_hat >= w[0].alpha_hat * (1.0 - 1e-12));
        let smallest_positive_horizon = sweep.iter().find(|p| p.alpha_hat > 0.0).map(|p| p.horizon);
        Ok(RhcReport {
            main,
            surrogate_horizon,
            surrogate,
            report,
            uncontrolled_fit,
            feedback_cost,
            sweep,
            alpha_nondecreasing,
            smallest_positive_horizon,
        })
    }

    /// OCP cost of the feedback law from `simulate` over `[0, t_end]`.
    pub fn feedback_cost(&self, ocp: &OcpConfig) -> Result<Option<f64>> {
        if ocp.control_mode != ControlMode::Stochastic {
            return Ok(None);
        }
        let table = self.beta_table(self.cfg.feedback.n_beta_max)?;
        let gain = self.gain(&table)?;
        let law = FeedbackLaw::new(&self.model.setup, gain.gain.lambda);
        let n = self.n_steps();
        let traj = simulate(
            &self.model,
            &self.initial_ensemble(),
            0,
            n,
            ControlSource::Feedback(&law),
            SimOptions::default(),
        )?;
        let mut u =
            ControlSignal::zeros(ControlMode::Stochastic, self.model.n_samples(), n, self.model.n_controls());
        for (s, per_step) in traj.controls.iter().enumerate() {
            for (k, v) in per_step.iter().enumerate() {
                u.set(s, k, v);
            }
        }
        let problem =
            OcpProblem::new(&self.model, 0, OcpConfig { horizon: self.cfg.dynamics.t_end, ..*ocp })?;
        Ok(Some(problem.parts_from_trajectory(&u, &traj).total()))
    }

    pub fn run_failprob(&self) -> Result<FailprobReport> {
        let settings = self
            .cfg
            .risk
            .ok_or_else(|| Error::Config(vec!["risk: section required for this subcommand".into()]))?;
        let table = self.beta_table(settings.n_bar_max)?;
        let variant = crate::risk::variant_for(&self.cfg.field);
        let (c_emb, nab) = match variant {
            CriterionVariant::Uniform => {
                (self.embedding_constant(), coefficient_size(&self.model.reaction, &self.model.convection))
            }
            CriterionVariant::Lognormal => (1.0, self.model.reaction.sup_norm()),
        };
        let report =
            failure_sweep(&self.field, &table, c_emb, nab, &settings, self.cfg.ensemble.master_seed)?;
        let certificate = match variant {
            CriterionVariant::Lognormal => decay_certificate(&report.rows, settings.p_order, SLOPE_TOL),
            CriterionVariant::Uniform => None,
        };
        Ok(FailprobReport { table, report, certificate })
    }
}

/// Rounds `t` to the nearest positive multiple of `dt`.
fn snap(t: f64, dt: f64) -> f64 {
    (t / dt).round().max(1.0) * dt
}
