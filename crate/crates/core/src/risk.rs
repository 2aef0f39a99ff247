//! Failure probabilities of the gain condition and their Markov and
//! Fernique upper bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fit_line, pairwise_mean};
use crate::random_fields::{derive_seed, stream, FieldModel, FieldSpec};
use crate::spectral_actuators::BetaTable;

const Z95: f64 = 1.959_963_984_540_054;

/// Relative agreement required between half- and full-sample moment estimates.
const KAPPA_STABILITY: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionVariant {
    /// Fails when `nu_min^2 beta <= 3 c^2 N(a,b)^2`.
    Uniform,
    /// Fails when `nu_min beta <= 3 |a|_inf`.
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FailureCriterion {
    pub variant: CriterionVariant,
    pub n_bar: usize,
    pub c_emb: f64,
    /// `N(a, b)` for the uniform variant, `|a|_inf` for the log-normal one.
    pub nab: f64,
    pub beta_nbar: f64,
}

impl FailureCriterion {
    pub fn new(
        variant: CriterionVariant,
        n_bar: usize,
        c_emb: f64,
        nab: f64,
        beta_nbar: f64,
    ) -> Result<Self> {
        if !(c_emb > 0.0 && nab > 0.0 && beta_nbar > 0.0) {
            return Err(Error::invalid(
                "risk",
                format!("criterion needs positive c, N(a,b), beta; got {c_emb}, {nab}, {beta_nbar}"),
            ));
        }
        Ok(FailureCriterion { variant, n_bar, c_emb, nab, beta_nbar })
    }

    /// Stabilizability may fail once `nu_min` is at or below this value.
    pub fn threshold(&self) -> f64 {
        match self.variant {
            CriterionVariant::Uniform => 3f64.sqrt() * self.c_emb * self.nab / self.beta_nbar.sqrt(),
            CriterionVariant::Lognormal => 3.0 * self.nab / self.beta_nbar,
        }
    }

    pub fn fails(&self, nu_min: f64) -> bool {
        nu_min <= self.threshold()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Proportion {
    pub hits: usize,
    pub trials: usize,
    pub p: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Proportion {
    /// Larger distance from the estimate to a Wilson endpoint.
    pub fn half_width(&self) -> f64 {
        (self.p - self.ci_lo).max(self.ci_hi - self.p)
    }
}

/// 95% Wilson score interval.
pub fn wilson(hits: usize, trials: usize) -> Proportion {
    assert!(trials > 0 && hits <= trials);
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let ci_lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0) };
    let ci_hi = if hits == trials { 1.0 } else { (centre + half).min(1.0) };
    Proportion { hits, trials, p, ci_lo, ci_hi }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl MomentEstimate {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len();
        let mean = pairwise_mean(v);
        let var = if n > 1 {
            pairwise_mean(&v.iter().map(|x| (x - mean) * (x - mean)).collect::<Vec<_>>()) * n as f64
                / (n - 1) as f64
        } else {
            0.0
        };
        MomentEstimate { mean, std_err: (var / n as f64).sqrt(), samples: n }
    }

    pub fn half_width(&self) -> f64 {
        Z95 * self.std_err
    }
}

/// Actual lattice minima of `samples` fresh realizations.
pub fn nu_min_samples(model: &FieldModel, samples: usize, seed: u64) -> Result<Vec<f64>> {
    (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let z = model.spec().sample(derive_seed(seed, stream::RISK_INDICATORS, i));
            Ok(model.realize(&z)?.min_value())
        })
        .collect()
}

/// `Gamma(omega)` of `samples` fresh coordinate draws.
pub fn gamma_samples(model: &FieldModel, samples: usize, seed: u64) -> Vec<f64> {
    (0..samples as u64)
        .into_par_iter()
        .map(|i| model.gamma(&model.spec().sample(derive_seed(seed, stream::RISK_MOMENTS, i)).z))
        .collect()
}

pub fn failure_from_samples(nu_mins: &[f64], crit: &FailureCriterion) -> Proportion {
    wilson(nu_mins.iter().filter(|v| crit.fails(**v)).count(), nu_mins.len())
}

pub fn empirical_failure(
    model: &FieldModel,
    crit: &FailureCriterion,
    samples: usize,
    seed: u64,
) -> Result<Proportion> {
    if samples < 100 {
        return Err(Error::invalid(
            "risk",
            format!("empirical failure needs at least 100 samples, got {samples}"),
        ));
    }
    Ok(failure_from_samples(&nu_min_samples(model, samples, seed)?, crit))
}

/// Exact `E[Gamma] = 1/2 sum |psi_j|_inf` for coordinates uniform on `[-1, 1]`.
pub fn expected_gamma_uniform(model: &FieldModel) -> f64 {
    0.5 * model.psi_sup_norms().iter().sum::<f64>()
}

pub fn moment_exp_gamma(gammas: &[f64]) -> MomentEstimate {
    MomentEstimate::from_values(&gammas.iter().map(|g| g.exp()).collect::<Vec<_>>())
}

pub fn moment_fernique(gammas: &[f64], kappa0: f64) -> MomentEstimate {
    MomentEstimate::from_values(&gammas.iter().map(|g| (kappa0 * g * g).exp()).collect::<Vec<_>>())
}

fn require_family(model: &FieldModel, want: &str) -> Result<()> {
    if model.spec().family_name() != want {
        return Err(Error::invalid(
            "risk",
            format!("bound needs a {want} field, got {}", model.spec().family_name()),
        ));
    }
    Ok(())
}

/// Markov bound for the truncated log-normal family:
/// `E[e^Gamma] (sqrt(3) c N(a,b) beta^{-1/2} - nu_lower)`.
pub fn bound_uniform_ex1(
    model: &FieldModel,
    crit: &FailureCriterion,
    moment: &MomentEstimate,
) -> Result<f64> {
    require_family(model, "truncated_log_normal")?;
    let x = crit.threshold() - model.nu0_inf();
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x > 1.0 {
        return Err(Error::precondition(
            "risk",
            format!(
                "N_bar = {}: need beta^(1/2) (1 + nu_lower) >= sqrt(3) c N(a,b), bracket is {x}",
                crit.n_bar
            ),
        ));
    }
    Ok(moment.mean * x)
}

/// Markov bound for the uniform affine family:
/// `E[Gamma] / (nu* - sqrt(3) c N(a,b) beta^{-1/2})`.
pub fn bound_uniform_ex2(model: &FieldModel, crit: &FailureCriterion) -> Result<f64> {
    require_family(model, "uniform_affine")?;
    let denom = model.nu0_inf() - crit.threshold();
    if !(denom > 0.0) {
        return Err(Error::precondition(
            "risk",
            format!(
                "N_bar = {}: assumption nu* - sqrt(3) c N(a,b) beta^(-1/2) > 0 violated ({denom})",
                crit.n_bar
            ),
        ));
    }
    Ok(expected_gamma_uniform(model) / denom)
}

/// Fernique bound `E[e^{kappa0 Gamma^2}] exp(-kappa0 log(beta / 3|a|)^2)`.
pub fn bound_lognormal(
    model: &FieldModel,
    crit: &FailureCriterion,
    kappa0: f64,
    moment: &MomentEstimate,
) -> Result<f64> {
    require_family(model, "log_normal")?;
    if !(kappa0 > 0.0) {
        return Err(Error::invalid("risk", format!("kappa0 must be positive, got {kappa0}")));
    }
    let ratio = crit.beta_nbar / (3.0 * crit.nab);
    if ratio < 1.0 {
        return Err(Error::precondition(
            "risk",
            format!("N_bar = {}: need beta >= 3 |a|_inf, got beta = {}", crit.n_bar, crit.beta_nbar),
        ));
    }
    Ok(moment.mean * (-kappa0 * ratio.ln().powi(2)).exp())
}

/// `C_p = e^{-p^2 / (4 kappa0)}`, so that `e^{kappa0 log(x)^2} >= C_p x^p` on `x >= 1`.
pub fn fernique_constant(p: f64, kappa0: f64) -> f64 {
    (-p * p / (4.0 * kappa0)).exp()
}

/// The certificate inequality in log form, `kappa log(x)^2 >= log C_p + p log x`.
pub fn fernique_certificate_holds(kappa0: f64, p: f64, x: f64) -> bool {
    let l = x.ln();
    kappa0 * l * l >= fernique_constant(p, kappa0).ln() + p * l
}

/// Whether the moment, and the moment at twice the exponent, are reproduced
/// by the first half of the samples: a proxy for finite mean and variance.
pub fn kappa_is_stable(gammas: &[f64], kappa0: f64) -> bool {
    let half = &gammas[..gammas.len() / 2];
    [kappa0, 2.0 * kappa0].iter().all(|&k| {
        let full = moment_fernique(gammas, k).mean;
        let part = moment_fernique(half, k).mean;
        full.is_finite() && part.is_finite() && ((full - part) / full).abs() <= KAPPA_STABILITY
    })
}

/// Largest `kappa0 = 2^j`, `j = 2, 1, ..., -12`, that passes the stability check.
pub fn select_kappa0(gammas: &[f64]) -> Result<f64> {
    (-12..=2).rev().map(|j| 2f64.powi(j)).find(|k| kappa_is_stable(gammas, *k)).ok_or_else(|| {
        Error::numerical("risk", "no kappa0 in the dyadic ladder gives a stable moment estimate")
    })
}

pub fn check_kappa0(gammas: &[f64], kappa0: f64) -> Result<()> {
    if !kappa_is_stable(gammas, kappa0) {
        return Err(Error::precondition(
            "risk",
            format!("kappa0 too large: moment estimate for kappa0 = {kappa0} is unstable under doubling the sample size"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n_bar: usize,
    pub beta: f64,
    pub threshold: f64,
    pub p_empirical: Proportion,
    pub p_bound: Option<f64>,
    /// The bound with the moment replaced by its upper 95% limit.
    pub p_bound_upper: Option<f64>,
    pub vacuous: bool,
    /// Empty when the bound applies, otherwise the violated precondition.
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub family: String,
    pub variant: CriterionVariant,
    pub c_emb: f64,
    pub nab: f64,
    pub moment_name: String,
    pub moment: MomentEstimate,
    /// Exact value of the moment when known.
    pub moment_exact: Option<f64>,
    pub kappa0: Option<f64>,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSettings {
    pub n_bar_max: usize,
    #[serde(default = "default_indicator_samples")]
    pub indicator_samples: usize,
    #[serde(default = "default_moment_samples")]
    pub moment_samples: usize,
    /// Fixed Fernique parameter; chosen from the dyadic ladder when absent.
    #[serde(default)]
    pub kappa0: Option<f64>,
    #[serde(default = "default_p_order")]
    pub p_order: f64,
}

fn default_indicator_samples() -> usize {
    10_000
}

fn default_moment_samples() -> usize {
    10_000
}

fn default_p_order() -> f64 {
    1.0
}

impl RiskSettings {
    pub fn check(&self) -> Vec<String> {
        let mut errs = vec![];
        if self.n_bar_max == 0 {
            errs.push("n_bar_max: must be at least 1".into());
        }
        if self.indicator_samples < 100 {
            errs.push(format!("indicator_samples: must be at least 100, got {}", self.indicator_samples));
        }
        if self.moment_samples < 100 {
            errs.push(format!("moment_samples: must be at least 100, got {}", self.moment_samples));
        }
        if let Some(k) = self.kappa0 {
            if !(k > 0.0 && k.is_finite()) {
                errs.push(format!("kappa0: must be positive, got {k}"));
            }
        }
        if !(self.p_order >= 1.0) {
            errs.push(format!("p_order: must be at least 1, got {}", self.p_order));
        }
        errs
    }
}

pub fn variant_for(spec: &FieldSpec) -> CriterionVariant {
    match spec {
        FieldSpec::LogNormal { .. } => CriterionVariant::Lognormal,
        _ => CriterionVariant::Uniform,
    }
}

/// Empirical failure and the matching analytic bound for `N_bar = 1..n_bar_max`,
/// all on shared samples.
pub fn failure_sweep(
    model: &FieldModel,
    table: &BetaTable,
    c_emb: f64,
    nab: f64,
    settings: &RiskSettings,
    seed: u64,
) -> Result<BoundReport> {
    let errs = settings.check();
    if !errs.is_empty() {
        return Err(Error::invalid("risk", errs.join("; ")));
    }
    let variant = variant_for(model.spec());
    let nu_mins = nu_min_samples(model, settings.indicator_samples, seed)?;
    let gammas = gamma_samples(model, settings.moment_samples, seed);
    let (moment_name, moment, moment_exact, kappa0) = match model.spec() {
        FieldSpec::UniformAffine { .. } => {
            ("E[Gamma]", MomentEstimate::from_values(&gammas), Some(expected_gamma_uniform(model)), None)
        }
        FieldSpec::TruncatedLogNormal { .. } => ("E[exp(Gamma)]", moment_exp_gamma(&gammas), None, None),
        FieldSpec::LogNormal { .. } => {
            let k = match settings.kappa0 {
                Some(k) => {
                    check_kappa0(&gammas, k)?;
                    k
                }
                None => select_kappa0(&gammas)?,
            };
            ("E[exp(kappa0 Gamma^2)]", moment_fernique(&gammas, k), None, Some(k))
        }
    };
    let mut upper = moment;
    upper.mean += moment.half_width();
    let mut rows = vec![];
    for n_bar in 1..=settings.n_bar_max {
        let beta = table
            .beta(n_bar)
            .ok_or_else(|| Error::invalid("risk", format!("beta table has no entry for N_bar = {n_bar}")))?;
        let crit = FailureCriterion::new(variant, n_bar, c_emb, nab, beta)?;
        let p_empirical = failure_from_samples(&nu_mins, &crit);
        let bound = |m: &MomentEstimate| match model.spec() {
            FieldSpec::UniformAffine { .. } => bound_uniform_ex2(model, &crit),
            FieldSpec::TruncatedLogNormal { .. } => bound_uniform_ex1(model, &crit, m),
            FieldSpec::LogNormal { .. } => bound_lognormal(model, &crit, kappa0.unwrap_or(0.0), m),
        };
        let (p_bound, p_bound_upper, note) = match (bound(&moment), bound(&upper)) {
            (Ok(b), Ok(u)) => (Some(b), Some(if moment_exact.is_some() { b } else { u }), String::new()),
            (Err(Error::Precondition { message, .. }), _) => (None, None, message),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        rows.push(SweepRow {
            n_bar,
            beta,
            threshold: crit.threshold(),
            p_empirical,
            p_bound,
            p_bound_upper,
            vacuous: p_bound.is_some_and(|b| b > 1.0),
            note,
        });
    }
    Ok(BoundReport {
        family: model.spec().family_name().to_string(),
        variant,
        c_emb,
        nab,
        moment_name: moment_name.to_string(),
        moment,
        moment_exact,
        kappa0,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayCertificate {
    pub slope: f64,
    pub target: f64,
    pub certified: bool,
}

/// Log-log slope of the bound against `N_bar` compared with `-2p`.
pub fn decay_certificate(rows: &[SweepRow], p_order: f64, tol: f64) -> Option<DecayCertificate> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.p_bound.filter(|b| *b > 0.0).map(|b| ((r.n_bar as f64).ln(), b.ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let slope = fit_line(&x, &y).slope;
    let target = -2.0 * p_order;
    Some(DecayCertificate { slope, target, certified: slope <= target + tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_edges() {
        let zero = wilson(0, 100);
        assert_eq!(zero.p, 0.0);
        assert_eq!(zero.ci_lo, 0.0);
        assert!(zero.ci_hi > 0.0 && zero.ci_hi < 0.05);
        let all = wilson(100, 100);
        assert_eq!(all.ci_hi, 1.0);
        let mid = wilson(50, 100);
        assert!((mid.ci_lo + mid.ci_hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fernique_certificate_on_grid() {
        for kappa in [0.05, 0.5, 2.0] {
            for p in [1.0, 2.0, 4.0] {
                for i in 0..=300 {
                    let x = 10f64.powf(3.0 * i as f64 / 300.0);
                    assert!(fernique_certificate_holds(kappa, p, x), "{kappa} {p} {x}");
                }
            }
        }
    }

    #[test]
    fn thresholds() {
        let c = FailureCriterion::new(CriterionVariant::Uniform, 1, 1.0, 1.0, 3.0).unwrap();
        assert!((c.threshold() - 1.0).abs() < 1e-15);
        let c = FailureCriterion::new(CriterionVariant::Lognormal, 1, 1.0, 2.0, 12.0).unwrap();
        assert_eq!(c.threshold(), 0.5);
        assert!(c.fails(0.5) && !c.fails(0.51));
    }
}
