mod common;

use common::*;
use nalgebra::DVector;
use proptest::prelude::*;
use rhc_core::mesh_fem::build_grid;
use rhc_core::random_fields::{build_ensemble, FieldModel, FieldSpec, Nu0Spec, PsiSpec};
use rhc_core::spectral_actuators::{alpha_1, beta_table, build_actuators, compute_beta};
use statrs::distribution::{ContinuousCDF, Normal};

fn arb_uniform() -> impl Strategy<Value = FieldSpec> {
    (0.5f64..3.0, 0.05f64..0.5, 1.0f64..3.0, 1usize..6, 0.2f64..4.0).prop_map(
        |(base, scale, decay, count, kappa)| {
            let psi = PsiSpec::DecayingSine { scale, decay, count };
            let grid = build_grid(1, &[1.0], &[32]).unwrap();
            let total: f64 = FieldModel::new(&FieldSpec::LogNormal { psi: psi.clone() }, &grid)
                .unwrap()
                .psi_sup_norms()
                .iter()
                .sum();
            let cap = kappa / (1.0 + kappa) * base;
            let psi = if total > cap { psi.scaled(0.999 * cap / total) } else { psi };
            FieldSpec::UniformAffine { nu0: Nu0Spec::Constant { value: base }, psi, kappa }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn uniform_realizations_respect_the_kappa_floor(spec in arb_uniform(), seed in any::<u64>()) {
        let grid = build_grid(1, &[1.0], &[32]).unwrap();
        let model = FieldModel::new(&spec, &grid).unwrap();
        let FieldSpec::UniformAffine { kappa, .. } = spec else { unreachable!() };
        let ens = build_ensemble(&model, 4, seed).unwrap();
        let (lo, hi) = model.uniform_bounds().unwrap();
        prop_assert!((lo - model.nu0_inf() / (1.0 + kappa)).abs() < 1e-14);
        for nu in &ens.realizations {
            prop_assert!(nu.nu_min >= lo * (1.0 - 1e-12));
            prop_assert!(nu.min_value() >= nu.nu_min - 1e-12);
            prop_assert!(nu.max_value() <= nu.nu_max + 1e-12);
            prop_assert!(nu.nu_max <= hi + 1e-12);
        }
    }

    #[test]
    fn diffusion_energy_is_bracketed_by_the_field_bounds(spec in arb_uniform(), seed in any::<u64>(), ys in any::<u64>()) {
        let grid = build_grid(1, &[1.0], &[24]).unwrap();
        let model = FieldModel::new(&spec, &grid).unwrap();
        let nu = &build_ensemble(&model, 1, seed).unwrap().realizations[0];
        let a = grid.assemble_diffusion(nu);
        let a0 = grid.assemble_laplacian();
        let y = random_vector(grid.n_dofs(), &mut rng(ys));
        let (e, e0) = (a.quad_form(&y), a0.quad_form(&y));
        prop_assert!(e >= nu.nu_min * e0 * (1.0 - 1e-12));
        prop_assert!(e <= nu.nu_max * e0 * (1.0 + 1e-12));
    }
}

/// Standardized sample mean of `f`, which should be N(0, 1) for large counts.
fn z_score(xs: &[f64], mean: f64, var: f64) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (m - mean) / (var / xs.len() as f64).sqrt()
}

#[test]
fn coordinate_moments_follow_the_central_limit_theorem() {
    let n = 100_000;
    let psi = PsiSpec::Constant { values: vec![0.1] };
    let nu0 = Nu0Spec::Constant { value: 1.0 };
    let normal = Normal::standard();
    let (lo, hi) = (-1.5, 2.0);
    let z_lo = normal.cdf(lo);
    let z_hi = normal.cdf(hi);
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = z_hi - z_lo;
    let tln_mean = (pdf(lo) - pdf(hi)) / mass;
    let tln_var = 1.0 + (lo * pdf(lo) - hi * pdf(hi)) / mass - tln_mean * tln_mean;
    let cases = [
        (FieldSpec::UniformAffine { nu0: nu0.clone(), psi: psi.clone(), kappa: 1.0 }, 0.0, 1.0 / 3.0),
        (
            FieldSpec::TruncatedLogNormal { nu0, psi: psi.clone(), trunc_lo: lo, trunc_hi: hi },
            tln_mean,
            tln_var,
        ),
        (FieldSpec::LogNormal { psi }, 0.0, 1.0),
    ];
    for (spec, mean, var) in cases {
        let xs: Vec<f64> = (0..n as u64).map(|i| spec.sample(i * 7919 + 1).z[0]).collect();
        let z = z_score(&xs, mean, var);
        assert!(z.abs() < 4.0, "{}: z = {z}", spec.family_name());
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((v - var).abs() < 0.02 * var, "{}: variance {v} vs {var}", spec.family_name());
    }
}

#[test]
fn mean_gamma_with_constant_psi_is_half_the_sup_norm_sum() {
    let values = vec![0.2, 0.1, 0.05];
    let spec = FieldSpec::UniformAffine {
        nu0: Nu0Spec::Constant { value: 1.0 },
        psi: PsiSpec::Constant { values: values.clone() },
        kappa: 1.0,
    };
    let grid = build_grid(1, &[1.0], &[8]).unwrap();
    let model = FieldModel::new(&spec, &grid).unwrap();
    let s = 10_000;
    let g: Vec<f64> = (0..s as u64).map(|i| model.gamma(&spec.sample(i + 17).z)).collect();
    let exact = 0.5 * values.iter().sum::<f64>();
    // Var |Z| = 1/12 per coordinate
    let var = values.iter().map(|v| v * v / 12.0).sum::<f64>();
    let z = z_score(&g, exact, var);
    assert!(z.abs() < 1.96 * 2.0, "z = {z}");
}

#[test]
fn discrete_norms_satisfy_poincare_and_interpolation() {
    let grid = build_grid(1, &[1.0], &[40]).unwrap();
    let m = grid.assemble_mass();
    let a = grid.assemble_laplacian();
    let minv = m.to_dense().try_inverse().unwrap();
    let mut r = rng(3);
    for _ in 0..100 {
        let y = random_vector(grid.n_dofs(), &mut r);
        let (h2, v2) = (m.quad_form(&y), a.quad_form(&y));
        assert!(v2 >= alpha_1(&grid) * h2 * (1.0 - 1e-12));
        let ay = a.mul_vec(&y);
        let lap2 = ay.dot(&(&minv * &ay));
        assert!(v2 * v2 <= h2 * lap2 * (1.0 + 1e-12));
    }
}

#[test]
fn spectral_gap_matches_dense_null_space_solve() {
    for (cells, n, r) in [(16, 1, 0.5), (24, 2, 0.3), (32, 3, 0.6)] {
        let grid = build_grid(1, &[1.0], &[cells]).unwrap();
        let m = grid.assemble_mass();
        let a = grid.assemble_laplacian();
        let act = build_actuators(&grid, n, r).unwrap();
        let fast = compute_beta(&m, &a, &act).unwrap().beta_n;
        let w = m.mul_mat(&act.indicators);
        let dense = dense_constrained_min(&m.to_dense(), &a.to_dense(), &w);
        assert!((fast - dense).abs() < 1e-8 * dense, "N = {n}: {fast} vs {dense}");
    }
}

#[test]
fn first_spectral_gap_is_the_second_eigenvalue() {
    // sin(2 pi x) is H-orthogonal to any indicator centered at 1/2
    let grid = build_grid(1, &[1.0], &[256]).unwrap();
    let table = beta_table(&grid, &grid.assemble_mass(), &grid.assemble_laplacian(), 1, 0.5).unwrap();
    let exact = 4.0 * std::f64::consts::PI.powi(2);
    assert!((table.rows[0].beta_n - exact).abs() < 1e-3 * exact);
}

#[test]
fn spectral_gap_grows_with_actuator_count() {
    let grid = build_grid(1, &[1.0], &[128]).unwrap();
    let table = beta_table(&grid, &grid.assemble_mass(), &grid.assemble_laplacian(), 6, 0.5).unwrap();
    for w in table.rows.windows(2) {
        assert!(w[1].beta_n > w[0].beta_n);
    }
    assert!(table.c_beta_fit > 0.0);
}

#[test]
fn projectors_are_consistent_on_small_grids() {
    for (dim, cells, n, r) in [(1, 32, 1, 0.5), (1, 32, 3, 0.2), (2, 12, 2, 0.5)] {
        let res = projector_residuals(dim, cells, n, r, 20, 5);
        assert!(res.iter().all(|v| *v < 1e-9), "{dim}-D N = {n}: {res:?}");
    }
}

#[test]
fn projector_range_and_kernel_are_as_specified() {
    let grid = build_grid(1, &[1.0], &[32]).unwrap();
    let setup = rhc_core::setup::SpatialSetup::new(grid, 3, 0.4).unwrap();
    let m = &setup.mass;
    let y = random_vector(setup.n_dofs(), &mut rng(8));
    let phi = &y - setup.p_e.apply(&y);
    // the kernel of P_E is the H-orthogonal complement of the actuators
    for c in setup.actuators.indicators.column_iter() {
        let ind: DVector<f64> = c.into_owned();
        assert!(m.bilinear(&phi, &ind).abs() < 1e-12 * m.quad_form(&y).sqrt());
    }
    let e1: DVector<f64> = setup.eigenbasis.functions.column(0).into_owned();
    assert!((setup.p_e.apply(&e1) - &e1).norm() < 1e-12 * e1.norm());
}
