//! Experiment configuration: JSON schema and cross-field validation.

use serde::{Deserialize, Serialize};

use crate::dynamics::{GainVariant, TimeScheme};
use crate::error::{Error, Result};
use crate::mesh_fem::{build_grid, Convection, Reaction};
use crate::ocp::{steps_for, OcpConfig};
use crate::random_fields::{FieldModel, FieldSpec, SineTerm};
use crate::rhc::{RhcConfig, RhcMode};
use crate::risk::RiskSettings;
use crate::spectral_actuators::actuator_resolution_errors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub dim: usize,
    pub lengths: Vec<f64>,
    pub n_cells: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorConfig {
    pub n: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub reaction: Reaction,
    #[serde(default = "zero_convection")]
    pub convection: Convection,
    pub dt: f64,
    pub t_end: f64,
    #[serde(default)]
    pub scheme: TimeScheme,
}

fn zero_convection() -> Convection {
    Convection::Zero
}

/// Initial state shared by every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    /// `sum amplitude * prod_n sin(m_n pi x_n / L_n)`
    Modes { terms: Vec<SineTerm> },
    /// Sines `j = 1..count` with coefficients `N(0, 1) * j^(-decay)` from draw `draw`.
    Random { count: usize, decay: f64, draw: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub samples: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    pub mu: f64,
    #[serde(default)]
    pub variant: GainVariant,
    /// Gain to use instead of `lambda*`.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_n_beta_max")]
    pub n_beta_max: usize,
    #[serde(default = "default_embedding_vectors")]
    pub embedding_vectors: usize,
}

fn default_n_beta_max() -> usize {
    8
}

fn default_embedding_vectors() -> usize {
    64
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig {
            mu: 1.0,
            variant: GainVariant::default(),
            lambda: None,
            n_beta_max: default_n_beta_max(),
            embedding_vectors: default_embedding_vectors(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhcSection {
    pub delta: f64,
    pub mode: RhcMode,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Extra prediction horizons for the suboptimality sweep.
    #[serde(default)]
    pub horizon_sweep: Vec<f64>,
    /// `V_inf` stand-in is `V_T` with `T = surrogate_factor * max horizon`.
    #[serde(default = "default_surrogate_factor")]
    pub surrogate_factor: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_true() -> bool {
    true
}

fn default_surrogate_factor() -> f64 {
    4.0
}

fn default_tolerance() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainConfig,
    pub field: FieldSpec,
    pub actuators: ActuatorConfig,
    pub dynamics: DynamicsConfig,
    pub initial_state: InitialState,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub feedback: FeedbackConfig,
    #[serde(default)]
    pub ocp: Option<OcpConfig>,
    #[serde(default)]
    pub rhc: Option<RhcSection>,
    #[serde(default)]
    pub risk: Option<RiskSettings>,
}

fn positive(errs: &mut Vec<String>, path: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errs.push(format!("{path}: must be positive and finite, got {v}"));
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Every violated invariant, prefixed by its field path.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = vec![];
        let d = &self.domain;
        let mut grid_ok = true;
        if !(d.dim == 1 || d.dim == 2) {
            errs.push(format!("domain.dim: must be 1 or 2, got {}", d.dim));
            grid_ok = false;
        }
        if d.lengths.len() != d.dim {
            errs.push(format!("domain.lengths: expected {} entries, got {}", d.dim, d.lengths.len()));
            grid_ok = false;
        }
        if d.n_cells.len() != d.dim {
            errs.push(format!("domain.n_cells: expected {} entries, got {}", d.dim, d.n_cells.len()));
            grid_ok = false;
        }
        for (i, l) in d.lengths.iter().enumerate() {
            if !(*l > 0.0 && l.is_finite()) {
                errs.push(format!("domain.lengths[{i}]: must be positive, got {l}"));
                grid_ok = false;
            }
        }
        for (i, n) in d.n_cells.iter().enumerate() {
            if *n < 4 {
                errs.push(format!("domain.n_cells[{i}]: need at least 4 cells, got {n}"));
                grid_ok = false;
            }
        }

        errs.extend(self.field.check().into_iter().map(|e| format!("field.{e}")));

        let a = self.actuators;
        if !(a.r > 0.0 && a.r < 1.0) {
            errs.push(format!("actuators.r: must lie in (0, 1), got {}", a.r));
        }
        if grid_ok {
            if let Ok(grid) = build_grid(d.dim, &d.lengths, &d.n_cells) {
                if a.r > 0.0 && a.r < 1.0 {
                    errs.extend(
                        actuator_resolution_errors(&grid, a.n, a.r)
                            .into_iter()
                            .map(|e| format!("actuators: {e}")),
                    );
                    if self.feedback.n_beta_max >= 1 {
                        let worst = actuator_resolution_errors(&grid, self.feedback.n_beta_max, a.r);
                        if !worst.is_empty() {
                            errs.push(format!(
                                "feedback.n_beta_max: grid does not resolve {} actuators per direction",
                                self.feedback.n_beta_max
                            ));
                        }
                    }
                    if let Some(risk) = &self.risk {
                        if !actuator_resolution_errors(&grid, risk.n_bar_max, a.r).is_empty() {
                            errs.push(format!(
                                "risk.n_bar_max: grid does not resolve {} actuators per direction",
                                risk.n_bar_max
                            ));
                        }
                    }
                }
                let min_cells = d.n_cells.iter().copied().min().unwrap_or(0);
                if 2 * a.n > min_cells {
                    errs.push(format!("actuators.n: at most n_cells/2 = {} supported", min_cells / 2));
                }
                if errs.iter().all(|e| !e.starts_with("field.")) {
                    if let Err(e) = FieldModel::new(&self.field, &grid) {
                        errs.push(format!("field: {e}"));
                    }
                }
            }
        }

        let dy = &self.dynamics;
        positive(&mut errs, "dynamics.dt", dy.dt);
        positive(&mut errs, "dynamics.t_end", dy.t_end);
        if dy.dt > 0.0 && dy.t_end > 0.0 && steps_for(dy.t_end, dy.dt).is_err() {
            errs.push(format!("dynamics.t_end: {} is not an integer multiple of dt = {}", dy.t_end, dy.dt));
        }
        if let Convection::Constant { b } | Convection::Oscillating { b, .. } = &dy.convection {
            if b.len() != d.dim {
                errs.push(format!("dynamics.convection.b: expected {} components, got {}", d.dim, b.len()));
            }
        }
        let finite_coeffs = match &dy.reaction {
            Reaction::Constant { value } => value.is_finite(),
            Reaction::Oscillating { mean, amplitude, omega } => {
                mean.is_finite() && amplitude.is_finite() && omega.is_finite()
            }
        };
        if !finite_coeffs {
            errs.push("dynamics.reaction: coefficients must be finite".into());
        }

        match &self.initial_state {
            InitialState::Modes { terms } => {
                if terms.is_empty() {
                    errs.push("initial_state.terms: at least one term is required".into());
                }
                for (i, t) in terms.iter().enumerate() {
                    if t.mode.len() != d.dim || t.mode.contains(&0) {
                        errs.push(format!("initial_state.terms[{i}].mode: need {} positive indices", d.dim));
                    }
                }
            }
            InitialState::Random { count, decay, .. } => {
                if *count == 0 {
                    errs.push("initial_state.count: must be at least 1".into());
                }
                if !decay.is_finite() {
                    errs.push("initial_state.decay: must be finite".into());
                }
            }
        }

        if self.ensemble.samples == 0 {
            errs.push("ensemble.samples: must be at least 1".into());
        }

        let f = &self.feedback;
        if !(f.mu >= 0.0 && f.mu.is_finite()) {
            errs.push(format!("feedback.mu: must be nonnegative, got {}", f.mu));
        }
        if let Some(l) = f.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                errs.push(format!("feedback.lambda: must be nonnegative, got {l}"));
            }
        }
        if f.n_beta_max < a.n.max(1) {
            errs.push(format!("feedback.n_beta_max: must be at least actuators.n = {}", a.n));
        }
        if f.embedding_vectors == 0 {
            errs.push("feedback.embedding_vectors: must be at least 1".into());
        }
        if f.variant == GainVariant::ReactionOnly && !dy.convection.is_zero() {
            errs.push("feedback.variant: the reaction-only thresholds need zero convection".into());
        }

        if let Some(o) = &self.ocp {
            errs.extend(o.check().into_iter().map(|e| format!("ocp.{e}")));
            if o.horizon > 0.0 && dy.dt > 0.0 && steps_for(o.horizon, dy.dt).is_err() {
                errs.push(format!("ocp.horizon: {} is not an integer multiple of dt = {}", o.horizon, dy.dt));
            }
        }
        if let Some(r) = &self.rhc {
            match &self.ocp {
                None => errs.push("rhc: needs an ocp section".into()),
                Some(o) => {
                    let rc = RhcConfig {
                        delta: r.delta,
                        n_cycles: 1,
                        mode: r.mode,
                        ocp: *o,
                        warm_start: r.warm_start,
                    };
                    errs.extend(rc.check(dy.dt).into_iter().map(|e| {
                        if e.starts_with("ocp.") {
                            e
                        } else {
                            format!("rhc.{e}")
                        }
                    }));
                    if r.delta > 0.0 && dy.t_end > 0.0 && steps_for(dy.t_end, r.delta).is_err() {
                        errs.push(format!(
                            "dynamics.t_end: {} is not an integer multiple of rhc.delta = {}",
                            dy.t_end, r.delta
                        ));
                    }
                }
            }
            for (i, t) in r.horizon_sweep.iter().enumerate() {
                if !(*t >= r.delta) {
                    errs.push(format!("rhc.horizon_sweep[{i}]: {t} is shorter than delta = {}", r.delta));
                } else if dy.dt > 0.0 && steps_for(*t, dy.dt).is_err() {
                    errs.push(format!(
                        "rhc.horizon_sweep[{i}]: {t} is not an integer multiple of dt = {}",
                        dy.dt
                    ));
                }
            }
            if !(r.surrogate_factor >= 1.0) {
                errs.push(format!("rhc.surrogate_factor: must be at least 1, got {}", r.surrogate_factor));
            }
            if !(r.tolerance >= 0.0) {
                errs.push(format!("rhc.tolerance: must be nonnegative, got {}", r.tolerance));
            }
            let lognormal = matches!(self.field, FieldSpec::LogNormal { .. });
            match r.mode {
                RhcMode::Stochastic if lognormal => {
                    errs.push("rhc.mode: the stochastic loop needs a uniformly bounded field family".into())
                }
                RhcMode::Lognormal => {
                    if !lognormal {
                        errs.push("rhc.mode: the log-normal loop needs the log_normal field family".into());
                    }
                    if !dy.convection.is_zero() {
                        errs.push("dynamics.convection: the log-normal loop needs b = 0".into());
                    }
                }
                _ => {}
            }
        }
        if let Some(risk) = &self.risk {
            errs.extend(risk.check().into_iter().map(|e| format!("risk.{e}")));
            if risk.n_bar_max > 0 && 2 * risk.n_bar_max > d.n_cells.iter().copied().min().unwrap_or(0) {
                errs.push(format!("risk.n_bar_max: at most n_cells/2 supported, got {}", risk.n_bar_max));
            }
            if dy.reaction.sup_norm() == 0.0 && self.dynamics.convection.is_zero() {
                errs.push("risk: failure criteria need a nonzero reaction or convection".into());
            }
        }
        let mut seen = std::collections::HashSet::new();
        errs.retain(|e| seen.insert(e.clone()));
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// `rhc` and `ocp` sections joined, with the cycle count covering `t_end`.
    pub fn rhc_config(&self) -> Result<RhcConfig> {
        let (Some(r), Some(o)) = (&self.rhc, &self.ocp) else {
            return Err(Error::Config(vec!["rhc: needs both rhc and ocp sections".into()]));
        };
        Ok(RhcConfig {
            delta: r.delta,
            n_cycles: steps_for(self.dynamics.t_end, r.delta)?,
            mode: r.mode,
            ocp: *o,
            warm_start: r.warm_start,
        })
    }
}
