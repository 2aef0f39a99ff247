//! Random diffusion coefficients.
//!
//! Three parametric families are supported:
//!
//! * uniform-affine: `nu = nu0 + sum_j z_j psi_j`, `z_j ~ U[-1, 1]`;
//! * truncated log-normal: `nu = nu0 + exp(sum_j z_j psi_j)`, `z_j` standard
//!   normal truncated to `[trunc_lo, trunc_hi]`;
//! * log-normal: `nu = exp(sum_j z_j psi_j)`, `z_j ~ N(0, 1)`.
//!
//! Every realization carries pointwise bounds `nu_min <= nu <= nu_max` written
//! in terms of `Gamma = sum_j |z_j| |psi_j|_inf`. Sup-norms are maxima over the
//! closed node lattice. The `psi_j` families shipped here (constants, sine
//! modes, decaying sines) are modelling choices, not prescribed by the theory.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::mesh_fem::{Point, RectGrid};

/// Independent random streams drawn from one master seed.
pub mod stream {
    pub const FIELD: u64 = 0;
    pub const INITIAL_STATE: u64 = 1;
    pub const RISK_MOMENTS: u64 = 2;
    pub const RISK_INDICATORS: u64 = 3;
    pub const TEST_VECTORS: u64 = 4;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Counter-based seed for item `index` of `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic part `nu0` of the diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nu0Spec {
    Constant {
        value: f64,
    },
    /// `base + amplitude * prod_n sin(pi x_n / L_n)`
    SineBump {
        base: f64,
        amplitude: f64,
    },
}

impl Nu0Spec {
    fn eval(&self, p: &Point, lengths: &[f64]) -> f64 {
        match *self {
            Nu0Spec::Constant { value } => value,
            Nu0Spec::SineBump { base, amplitude } => {
                base + amplitude
                    * lengths.iter().enumerate().map(|(n, l)| (PI * p[n] / l).sin()).product::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineTerm {
    pub amplitude: f64,
    /// Mode index per dimension.
    pub mode: Vec<usize>,
}

/// The expansion functions `psi_1, ..., psi_J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiSpec {
    /// `psi_j = values[j]`
    Constant { values: Vec<f64> },
    /// `psi_j = amplitude_j * prod_n sin(m_n pi x_n / L_n)`
    SineModes { terms: Vec<SineTerm> },
    /// `psi_j = scale * j^(-decay) * prod_n sin(j pi x_n / L_n)`, `j = 1..count`
    DecayingSine { scale: f64, decay: f64, count: usize },
}

impl PsiSpec {
    pub fn count(&self) -> usize {
        match self {
            PsiSpec::Constant { values } => values.len(),
            PsiSpec::SineModes { terms } => terms.len(),
            PsiSpec::DecayingSine { count, .. } => *count,
        }
    }

    fn eval(&self, j: usize, p: &Point, lengths: &[f64]) -> f64 {
        let sines = |m: &dyn Fn(usize) -> usize| -> f64 {
            lengths.iter().enumerate().map(|(n, l)| (m(n) as f64 * PI * p[n] / l).sin()).product()
        };
        match self {
            PsiSpec::Constant { values } => values[j],
            PsiSpec::SineModes { terms } => {
                terms[j].amplitude * sines(&|n| terms[j].mode.get(n).copied().unwrap_or(1))
            }
            PsiSpec::DecayingSine { scale, decay, .. } => {
                let k = j + 1;
                scale * (k as f64).powf(-decay) * sines(&|_| k)
            }
        }
    }

    /// Returns the same family with every function multiplied by `c`.
    pub fn scaled(&self, c: f64) -> PsiSpec {
        match self {
            PsiSpec::Constant { values } => {
                PsiSpec::Constant { values: values.iter().map(|v| c * v).collect() }
            }
            PsiSpec::SineModes { terms } => PsiSpec::SineModes {
                terms: terms
                    .iter()
                    .map(|t| SineTerm { amplitude: c * t.amplitude, mode: t.mode.clone() })
                    .collect(),
            },
            PsiSpec::DecayingSine { scale, decay, count } => {
                PsiSpec::DecayingSine { scale: c * scale, decay: *decay, count: *count }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    UniformAffine { nu0: Nu0Spec, psi: PsiSpec, kappa: f64 },
    TruncatedLogNormal { nu0: Nu0Spec, psi: PsiSpec, trunc_lo: f64, trunc_hi: f64 },
    LogNormal { psi: PsiSpec },
}

impl FieldSpec {
    pub fn psi(&self) -> &PsiSpec {
        match self {
            FieldSpec::UniformAffine { psi, .. }
            | FieldSpec::TruncatedLogNormal { psi, .. }
            | FieldSpec::LogNormal { psi } => psi,
        }
    }

    pub fn n_coordinates(&self) -> usize {
        self.psi().count()
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            FieldSpec::UniformAffine { .. } => "uniform_affine",
            FieldSpec::TruncatedLogNormal { .. } => "truncated_log_normal",
            FieldSpec::LogNormal { .. } => "log_normal",
        }
    }

    /// Grid-independent parameter checks, one message per violation.
    pub fn check(&self) -> Vec<String> {
        let mut errs = vec![];
        match self {
            FieldSpec::UniformAffine { kappa, psi, .. } => {
                if !(kappa.is_finite() && *kappa > 0.0) {
                    errs.push(format!("kappa: must be positive, got {kappa}"));
                }
                if psi.count() == 0 {
                    errs.push("psi: at least one expansion function is required".into());
                }
            }
            FieldSpec::TruncatedLogNormal { trunc_lo, trunc_hi, psi, .. } => {
                if !(*trunc_lo < 0.0 && 0.0 < *trunc_hi && trunc_lo.is_finite() && trunc_hi.is_finite()) {
                    errs.push(format!(
                        "trunc_lo/trunc_hi: need trunc_lo < 0 < trunc_hi, got {trunc_lo}, {trunc_hi}"
                    ));
                }
                if psi.count() == 0 {
                    errs.push("psi: at least one expansion function is required".into());
                }
            }
            FieldSpec::LogNormal { psi } => {
                if psi.count() == 0 {
                    errs.push("psi: at least one expansion function is required".into());
                }
            }
        }
        if let PsiSpec::DecayingSine { scale, decay, .. } = self.psi() {
            if !(scale.is_finite() && decay.is_finite()) {
                errs.push("psi: scale and decay must be finite".into());
            }
        }
        errs
    }

    /// Draws the coordinate vector for one realization.
    pub fn sample(&self, seed: u64) -> SampleVector {
        let mut rng = rng_from_seed(seed);
        let j = self.n_coordinates();
        let z = match *self {
            FieldSpec::UniformAffine { .. } => {
                let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
                (0..j).map(|_| u.sample(&mut rng)).collect()
            }
            FieldSpec::TruncatedLogNormal { trunc_lo, trunc_hi, .. } => {
                let normal = Normal::standard();
                let (plo, phi) = (normal.cdf(trunc_lo), normal.cdf(trunc_hi));
                (0..j)
                    .map(|_| {
                        let u: f64 = rng.random();
                        normal.inverse_cdf(plo + u * (phi - plo)).clamp(trunc_lo, trunc_hi)
                    })
                    .collect()
            }
            FieldSpec::LogNormal { .. } => (0..j).map(|_| StandardNormal.sample(&mut rng)).collect(),
        };
        SampleVector { z, seed }
    }
}

pub fn sample(spec: &FieldSpec, seed: u64) -> SampleVector {
    spec.sample(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleVector {
    pub z: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldRealization {
    /// Values on the closed node lattice.
    pub nu_values: Vec<f64>,
    pub nu_min: f64,
    pub nu_max: f64,
    pub gamma: f64,
}

impl FieldRealization {
    pub fn constant(grid: &RectGrid, value: f64) -> Self {
        FieldRealization {
            nu_values: vec![value; grid.n_lattice()],
            nu_min: value,
            nu_max: value,
            gamma: 0.0,
        }
    }

    pub fn min_value(&self) -> f64 {
        self.nu_values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.nu_values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A field spec evaluated on a grid: `nu0` and `psi_j` tabulated on the lattice.
#[derive(Debug, Clone)]
pub struct FieldModel {
    spec: FieldSpec,
    nu0: Vec<f64>,
    psi: Vec<Vec<f64>>,
    psi_sup: Vec<f64>,
    nu0_inf: f64,
    nu0_sup: f64,
}

impl FieldModel {
    pub fn new(spec: &FieldSpec, grid: &RectGrid) -> Result<Self> {
        let errs = spec.check();
        if !errs.is_empty() {
            return Err(Error::invalid("random_fields", errs.join("; ")));
        }
        let points = grid.lattice_points();
        let lengths = grid.lengths();
        let nu0: Vec<f64> = match spec {
            FieldSpec::UniformAffine { nu0, .. } | FieldSpec::TruncatedLogNormal { nu0, .. } => {
                points.iter().map(|p| nu0.eval(p, lengths)).collect()
            }
            FieldSpec::LogNormal { .. } => vec![0.0; points.len()],
        };
        let psi: Vec<Vec<f64>> = (0..spec.n_coordinates())
            .map(|j| points.iter().map(|p| spec.psi().eval(j, p, lengths)).collect())
            .collect();
        let psi_sup: Vec<f64> = psi.iter().map(|v| v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))).collect();
        if psi_sup.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("random_fields", "expansion functions must be finite"));
        }
        let nu0_inf = nu0.iter().copied().fold(f64::INFINITY, f64::min);
        let nu0_sup = nu0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match spec {
            FieldSpec::UniformAffine { kappa, .. } => {
                if !(nu0_inf > 0.0) {
                    return Err(Error::invalid(
                        "random_fields",
                        format!("essinf nu0 = {nu0_inf} must be positive"),
                    ));
                }
                let total: f64 = psi_sup.iter().sum();
                let cap = kappa / (1.0 + kappa) * nu0_inf;
                if total > cap * (1.0 + 1e-12) {
                    return Err(Error::invalid(
                        "random_fields",
                        format!("sum of sup-norms {total} exceeds kappa/(1+kappa) * nu* = {cap}"),
                    ));
                }
            }
            FieldSpec::TruncatedLogNormal { .. } => {
                if !(nu0_inf > 0.0) {
                    return Err(Error::invalid(
                        "random_fields",
                        format!("essinf nu0 = {nu0_inf} must be positive"),
                    ));
                }
            }
            FieldSpec::LogNormal { .. } => {}
        }
        Ok(FieldModel { spec: spec.clone(), nu0, psi, psi_sup, nu0_inf, nu0_sup })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn psi_sup_norms(&self) -> &[f64] {
        &self.psi_sup
    }

    /// `essinf nu0` over the lattice (zero for the pure log-normal family).
    pub fn nu0_inf(&self) -> f64 {
        self.nu0_inf
    }

    pub fn nu0_sup(&self) -> f64 {
        self.nu0_sup
    }

    pub fn gamma(&self, z: &[f64]) -> f64 {
        z.iter().zip(&self.psi_sup).map(|(z, s)| z.abs() * s).sum()
    }

    /// Realization-wise bounds `(nu_min, nu_max)` as functions of `Gamma`.
    pub fn bounds_from_gamma(&self, gamma: f64) -> (f64, f64) {
        match self.spec {
            FieldSpec::UniformAffine { .. } => (self.nu0_inf - gamma, self.nu0_sup + gamma),
            FieldSpec::TruncatedLogNormal { .. } => {
                (self.nu0_inf + (-gamma).exp(), self.nu0_sup + gamma.exp())
            }
            FieldSpec::LogNormal { .. } => ((-gamma).exp(), gamma.exp()),
        }
    }

    /// Deterministic bounds `(nu_lower, nu_upper)` valid for every admissible
    /// sample, when the family has them.
    pub fn uniform_bounds(&self) -> Option<(f64, f64)> {
        let total: f64 = self.psi_sup.iter().sum();
        match self.spec {
            FieldSpec::UniformAffine { kappa, .. } => {
                Some((self.nu0_inf / (1.0 + kappa), self.nu0_sup + total))
            }
            FieldSpec::TruncatedLogNormal { trunc_lo, trunc_hi, .. } => {
                let g = total * trunc_lo.abs().max(trunc_hi.abs());
                Some((self.nu0_inf + (-g).exp(), self.nu0_sup + g.exp()))
            }
            FieldSpec::LogNormal { .. } => None,
        }
    }

    pub fn is_admissible(&self, z: &[f64]) -> bool {
        if z.len() != self.psi.len() || z.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self.spec {
            FieldSpec::UniformAffine { .. } => z.iter().all(|v| v.abs() <= 1.0),
            FieldSpec::TruncatedLogNormal { trunc_lo, trunc_hi, .. } => {
                z.iter().all(|v| (trunc_lo..=trunc_hi).contains(v))
            }
            FieldSpec::LogNormal { .. } => true,
        }
    }

    pub fn realize(&self, z: &SampleVector) -> Result<FieldRealization> {
        if !self.is_admissible(&z.z) {
            return Err(Error::invalid("random_fields", format!("sample {:?} is not admissible", z.z)));
        }
        let n = self.nu0.len();
        let series: Vec<f64> =
            (0..n).map(|k| z.z.iter().zip(&self.psi).map(|(zj, psi)| zj * psi[k]).sum()).collect();
        let nu_values: Vec<f64> = match self.spec {
            FieldSpec::UniformAffine { .. } => self.nu0.iter().zip(&series).map(|(a, s)| a + s).collect(),
            FieldSpec::TruncatedLogNormal { .. } => {
                self.nu0.iter().zip(&series).map(|(a, s)| a + s.exp()).collect()
            }
            FieldSpec::LogNormal { .. } => series.iter().map(|s| s.exp()).collect(),
        };
        let gamma = self.gamma(&z.z);
        let (nu_min, nu_max) = self.bounds_from_gamma(gamma);
        if !(nu_min > 0.0) {
            return Err(Error::invalid("random_fields", format!("realization has nu_min = {nu_min} <= 0")));
        }
        Ok(FieldRealization { nu_values, nu_min, nu_max, gamma })
    }
}

pub fn realize(spec: &FieldSpec, z: &SampleVector, grid: &RectGrid) -> Result<FieldRealization> {
    FieldModel::new(spec, grid)?.realize(z)
}

/// Frozen set of samples and realizations reused for a whole experiment.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub master_seed: u64,
    pub samples: Vec<SampleVector>,
    pub realizations: Vec<FieldRealization>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Equal-weight average of a per-sample functional.
    pub fn expectation(&self, f: impl Fn(&FieldRealization) -> f64) -> f64 {
        let v: Vec<f64> = self.realizations.iter().map(f).collect();
        crate::linalg::pairwise_mean(&v)
    }
}

pub fn build_ensemble(model: &FieldModel, samples: usize, master_seed: u64) -> Result<Ensemble> {
    if samples == 0 {
        return Err(Error::invalid("random_fields", "ensemble needs at least one sample"));
    }
    let sample_vectors: Vec<SampleVector> = (0..samples as u64)
        .map(|i| model.spec().sample(derive_seed(master_seed, stream::FIELD, i)))
        .collect();
    let realizations = sample_vectors.par_iter().map(|z| model.realize(z)).collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { master_seed, samples: sample_vectors, realizations })
}

/// Nodal values of a field realization at interior nodes (diagnostics, output).
pub fn interior_values(grid: &RectGrid, nu: &FieldRealization) -> DVector<f64> {
    let per = grid.n_cells()[0] + 1;
    DVector::from_iterator(
        grid.n_dofs(),
        grid.nodes().iter().map(|p| {
            let i = (p[0] / grid.spacing()[0]).round() as usize;
            let j = if grid.dim() == 2 { (p[1] / grid.spacing()[1]).round() as usize } else { 0 };
            nu.nu_values[i + per * j]
        }),
    )
}
