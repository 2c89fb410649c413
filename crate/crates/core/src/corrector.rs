//! First-order corrector: the linearization of the hydrodynamic system around
//! the limit flow, its phase reconstruction, the triviality criterion for the
//! phase corrector, and the second-order expansion residuals.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{PhaseState, Trajectory};
use crate::profiles::Profile;
use crate::reconstruct::assemble_wavefunction;
use crate::scheme::{CubicNodeSeries, TimeSampler};
use crate::spectral::{
    analytic_norm, dealiased_dot, l2_quadrature_norm, spectral_derivative, DerivativeKind,
    GridField, SpectralGrid, WeightParams,
};

/// Corrector fields on the trajectory time grid. The phase series are empty
/// until [`reconstruct_corrector_phases`] fills them.
#[derive(Debug, Clone)]
pub struct CorrectorState {
    pub times: Vec<f64>,
    pub zeta1: Vec<GridField>,
    pub v1: Vec<GridField>,
    pub psi1: Vec<GridField>,
    pub phi1: Vec<GridField>,
}

fn require_limit_run(base: &Trajectory) -> Result<()> {
    if base.params.eps != 0.0 {
        return Err(Error::Config("corrector base must be an eps = 0 run".into()));
    }
    let d = base.grid.dim() as f64;
    let m = base.params.ell - 1.0;
    if !(m > (d - 1.0) / 2.0) {
        return Err(Error::Config(format!(
            "corrector regularity requires ell - 1 > (d-1)/2, got ell = {}",
            base.params.ell
        )));
    }
    Ok(())
}

/// Linearized right-hand side:
/// d_t v1 = -grad (v0 . v1) - lambda Re zeta1
/// d_t zeta1 = -grad (v0 . zeta1) - grad (v1 . zeta0) - grad div v1
///            + (i/2) grad div zeta0 + (i/4) grad (zeta0 . zeta0).
fn corrector_rhs(
    v0: &GridField,
    zeta0: &GridField,
    v1: &GridField,
    zeta1: &GridField,
    lambda: f64,
    g: &SpectralGrid,
) -> Result<(GridField, GridField)> {
    let vv = dealiased_dot(v0, v1, g)?;
    let mut nv =
        spectral_derivative(&vv, DerivativeKind::Grad, g)?.scale(Complex64::new(-1.0, 0.0));
    nv.axpy(Complex64::new(-lambda, 0.0), &zeta1.real_part());

    let vz = dealiased_dot(v0, zeta1, g)?;
    let mut nz =
        spectral_derivative(&vz, DerivativeKind::Grad, g)?.scale(Complex64::new(-1.0, 0.0));
    let v1z0 = dealiased_dot(v1, zeta0, g)?;
    let gv1z0 = spectral_derivative(&v1z0, DerivativeKind::Grad, g)?;
    nz.axpy(Complex64::new(-1.0, 0.0), &gv1z0);
    let gd_v1 = spectral_derivative(v1, DerivativeKind::GradDiv, g)?;
    nz.axpy(Complex64::new(-1.0, 0.0), &gd_v1);
    let gd_z0 = spectral_derivative(zeta0, DerivativeKind::GradDiv, g)?;
    nz.axpy(Complex64::new(0.0, 0.5), &gd_z0);
    let zz = dealiased_dot(zeta0, zeta0, g)?;
    let gzz = spectral_derivative(&zz, DerivativeKind::Grad, g)?;
    nz.axpy(Complex64::new(0.0, 0.25), &gzz);
    Ok((nv, nz))
}

/// Integrate the linearized system along the base trajectory with the
/// classical 4-stage stepper; half-step base values come from cubic
/// interpolation so the base sampling keeps the integrator's order.
pub fn solve_corrector(
    base: &Trajectory,
    zeta1_in: &GridField,
    v1_in: &GridField,
) -> Result<CorrectorState> {
    require_limit_run(base)?;
    let g = &base.grid;
    let lambda = base.params.lambda;
    let v0_s = CubicNodeSeries {
        times: &base.times,
        fields: &base.states.iter().map(|s| s.v.clone()).collect::<Vec<_>>(),
    };
    let z0_s = CubicNodeSeries {
        times: &base.times,
        fields: &base.states.iter().map(|s| s.zeta.clone()).collect::<Vec<_>>(),
    };

    let mut v1 = v1_in.clone();
    let mut zeta1 = zeta1_in.clone();
    let mut v1_series = vec![v1.clone()];
    let mut z1_series = vec![zeta1.clone()];
    for (step, pair) in base.times.windows(2).enumerate() {
        let (t, h) = (pair[0], pair[1] - pair[0]);
        let (v0_a, z0_a) = (&base.states[step].v, &base.states[step].zeta);
        let v0_h = v0_s.eval(t + 0.5 * h);
        let z0_h = z0_s.eval(t + 0.5 * h);
        let (v0_b, z0_b) = (&base.states[step + 1].v, &base.states[step + 1].zeta);

        let (kv1, kz1) = corrector_rhs(v0_a, z0_a, &v1, &zeta1, lambda, g)?;
        let mut v_2 = v1.clone();
        v_2.axpy(Complex64::new(0.5 * h, 0.0), &kv1);
        let mut z_2 = zeta1.clone();
        z_2.axpy(Complex64::new(0.5 * h, 0.0), &kz1);
        let (kv2, kz2) = corrector_rhs(&v0_h, &z0_h, &v_2, &z_2, lambda, g)?;
        let mut v_3 = v1.clone();
        v_3.axpy(Complex64::new(0.5 * h, 0.0), &kv2);
        let mut z_3 = zeta1.clone();
        z_3.axpy(Complex64::new(0.5 * h, 0.0), &kz2);
        let (kv3, kz3) = corrector_rhs(&v0_h, &z0_h, &v_3, &z_3, lambda, g)?;
        let mut v_4 = v1.clone();
        v_4.axpy(Complex64::new(h, 0.0), &kv3);
        let mut z_4 = zeta1.clone();
        z_4.axpy(Complex64::new(h, 0.0), &kz3);
        let (kv4, kz4) = corrector_rhs(v0_b, z0_b, &v_4, &z_4, lambda, g)?;

        v1.axpy(Complex64::new(h / 6.0, 0.0), &kv1);
        v1.axpy(Complex64::new(h / 3.0, 0.0), &kv2);
        v1.axpy(Complex64::new(h / 3.0, 0.0), &kv3);
        v1.axpy(Complex64::new(h / 6.0, 0.0), &kv4);
        zeta1.axpy(Complex64::new(h / 6.0, 0.0), &kz1);
        zeta1.axpy(Complex64::new(h / 3.0, 0.0), &kz2);
        zeta1.axpy(Complex64::new(h / 3.0, 0.0), &kz3);
        zeta1.axpy(Complex64::new(h / 6.0, 0.0), &kz4);
        if !v1.is_finite() || !zeta1.is_finite() {
            return Err(Error::NanDetected { step });
        }
        v1_series.push(v1.clone());
        z1_series.push(zeta1.clone());
    }
    Ok(CorrectorState {
        times: base.times.clone(),
        zeta1: z1_series,
        v1: v1_series,
        psi1: Vec::new(),
        phi1: Vec::new(),
    })
}

/// Fill the phase correctors by trapezoid quadrature:
/// psi1(t) = psi_in1 + int [ (i/2)(div zeta0 + (1/2) zeta0 . zeta0)
///                          - v0 . zeta1 - v1 . zeta0 - div v1 ]
/// phi1(t) = phi_in1 - int ( v0 . v1 + lambda Re psi1 ).
/// The div v1 term is the one the gradient-consistency identity
/// grad psi1 = zeta1 requires.
pub fn reconstruct_corrector_phases(
    c: &CorrectorState,
    base: &Trajectory,
    psi1_in: &Profile,
    phi1_in: &Profile,
) -> Result<CorrectorState> {
    require_limit_run(base)?;
    let g = &base.grid;
    let lambda = base.params.lambda;
    let n = base.times.len();
    if c.zeta1.len() != n || c.v1.len() != n {
        return Err(Error::Config("corrector series must align with the base run".into()));
    }
    let mut integrand = Vec::with_capacity(n);
    for i in 0..n {
        let z0 = &base.states[i].zeta;
        let v0 = &base.states[i].v;
        let mut ii = GridField::zeros(g, 1, false);
        let div_z0 = spectral_derivative(z0, DerivativeKind::Div, g)?;
        ii.axpy(Complex64::new(0.0, 0.5), &div_z0);
        let zz = dealiased_dot(z0, z0, g)?;
        ii.axpy(Complex64::new(0.0, 0.25), &zz);
        let vz1 = dealiased_dot(v0, &c.zeta1[i], g)?;
        ii.axpy(Complex64::new(-1.0, 0.0), &vz1);
        let v1z0 = dealiased_dot(&c.v1[i], z0, g)?;
        ii.axpy(Complex64::new(-1.0, 0.0), &v1z0);
        let div_v1 = spectral_derivative(&c.v1[i], DerivativeKind::Div, g)?;
        ii.axpy(Complex64::new(-1.0, 0.0), &div_v1);
        integrand.push(ii);
    }
    let psi_in_field = psi1_in.sample(g);
    let mut psi1 = Vec::with_capacity(n);
    let mut acc = GridField::zeros(g, 1, false);
    for i in 0..n {
        if i > 0 {
            let h = base.times[i] - base.times[i - 1];
            acc.axpy(Complex64::new(0.5 * h, 0.0), &integrand[i - 1]);
            acc.axpy(Complex64::new(0.5 * h, 0.0), &integrand[i]);
        }
        let mut p = psi_in_field.clone();
        p.axpy(Complex64::new(1.0, 0.0), &acc);
        p.real = false;
        psi1.push(p);
    }
    // phi1 needs Re psi1 inside its own integrand
    let phi_in_field = phi1_in.sample(g);
    let mut phi1 = Vec::with_capacity(n);
    let mut acc = GridField::zeros(g, 1, true);
    for i in 0..n {
        if i > 0 {
            let h = base.times[i] - base.times[i - 1];
            for j in [i - 1, i] {
                let mut ii = dealiased_dot(&base.states[j].v, &c.v1[j], g)?;
                ii.axpy(Complex64::new(lambda, 0.0), &psi1[j].real_part());
                acc.axpy(Complex64::new(0.5 * h, 0.0), &ii.real_part());
            }
        }
        let mut p = phi_in_field.clone();
        p.axpy(Complex64::new(-1.0, 0.0), &acc);
        phi1.push(p);
    }
    Ok(CorrectorState {
        times: c.times.clone(),
        zeta1: c.zeta1.clone(),
        v1: c.v1.clone(),
        psi1,
        phi1,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrivialityReport {
    pub trivial: bool,
    pub sup_phi1_l2: f64,
    pub data_scale: f64,
}

/// Run the corrector from the given phase data and decide whether the phase
/// corrector vanishes identically; it does exactly for zero data.
pub fn check_phi1_triviality(
    psi1_in: &Profile,
    phi1_in: &Profile,
    base: &Trajectory,
) -> Result<TrivialityReport> {
    let g = &base.grid;
    let zeta1_in = psi1_in.sample_gradient(g);
    let v1_in = phi1_in.sample_gradient(g);
    let c = solve_corrector(base, &zeta1_in, &v1_in)?;
    let c = reconstruct_corrector_phases(&c, base, psi1_in, phi1_in)?;
    let data_scale = l2_quadrature_norm(&psi1_in.sample(g), g)
        + l2_quadrature_norm(&phi1_in.sample(g), g);
    let sup_phi1_l2 = c
        .phi1
        .iter()
        .map(|f| l2_quadrature_norm(f, g))
        .fold(0.0, f64::max);
    Ok(TrivialityReport {
        trivial: sup_phi1_l2 <= 1e-10 * (1.0 + data_scale),
        sup_phi1_l2,
        data_scale,
    })
}

/// Sup-in-time norms of the second-order residuals and the wave-function
/// residual against the corrected approximation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionResiduals {
    /// sup_t || (zeta_eps - zeta_0) - eps zeta_1 ||_{ell-2, delta(t)}
    pub zeta_residual: f64,
    /// sup_t || (v_eps - v_0) - eps v_1 ||_{ell-1, delta(t)}
    pub v_residual: f64,
    /// sup_t || (psi_eps - psi_0) - eps psi_1 ||_{ell-1, delta(t)}
    pub psi_residual: f64,
    /// sup_t || (phi_eps - phi_0) - eps phi_1 ||_{ell, delta(t)}
    pub phi_residual: f64,
    /// sup_t max_x | u_eps - e^{psi0/2 + i phi1 + i phi0/eps} |
    pub wave_residual: f64,
}

pub fn expansion_residual(
    eps_run: &Trajectory,
    eps_phases: &[PhaseState],
    base: &Trajectory,
    base_phases: &[PhaseState],
    c: &CorrectorState,
    eps: f64,
) -> Result<ExpansionResiduals> {
    let g = &base.grid;
    let p = &base.params;
    let d = g.dim() as f64;
    if !(p.ell > (d + 3.0) / 2.0) {
        return Err(Error::Config(format!(
            "expansion residual requires ell > (d+3)/2, got ell = {}",
            p.ell
        )));
    }
    let n = base.times.len();
    if eps_run.times.len() != n
        || eps_phases.len() != n
        || base_phases.len() != n
        || c.psi1.len() != n
    {
        return Err(Error::Config("expansion residual inputs must share the time grid".into()));
    }
    let mut zeta_residual = 0.0f64;
    let mut v_residual = 0.0f64;
    let mut psi_residual = 0.0f64;
    let mut phi_residual = 0.0f64;
    let mut wave_residual = 0.0f64;
    for i in 0..n {
        let delta = base.delta_at(i);
        let w_z = WeightParams::new(p.ell - 2.0, delta)?;
        let w_v = WeightParams::new(p.ell - 1.0, delta)?;
        let w_psi = WeightParams::new(p.ell - 1.0, delta)?;
        let w_phi = WeightParams::new(p.ell, delta)?;

        let mut zr = eps_run.states[i].zeta.sub(&base.states[i].zeta);
        zr.axpy(Complex64::new(-eps, 0.0), &c.zeta1[i]);
        zeta_residual = zeta_residual.max(analytic_norm(&zr, &w_z, g)?);

        let mut vr = eps_run.states[i].v.sub(&base.states[i].v);
        vr.axpy(Complex64::new(-eps, 0.0), &c.v1[i]);
        v_residual = v_residual.max(analytic_norm(&vr, &w_v, g)?);

        let mut pr = eps_phases[i].psi_total(g).sub(&base_phases[i].psi_total(g));
        pr.axpy(Complex64::new(-eps, 0.0), &c.psi1[i]);
        psi_residual = psi_residual.max(analytic_norm(&pr, &w_psi, g)?);

        let mut qr = eps_phases[i].phi_total(g).sub(&base_phases[i].phi_total(g));
        qr.axpy(Complex64::new(-eps, 0.0), &c.phi1[i]);
        phi_residual = phi_residual.max(analytic_norm(&qr, &w_phi, g)?);

        if eps > 0.0 {
            let u_eps = assemble_wavefunction(&eps_phases[i], eps, g)?;
            let psi0 = base_phases[i].psi_total(g);
            let phi0 = base_phases[i].phi_total(g);
            let mut worst = 0.0f64;
            for k in 0..g.len() {
                let exponent = 0.5 * psi0.data[k]
                    + Complex64::i() * (c.phi1[i].data[k].re + phi0.data[k].re / eps);
                let approx = exponent.exp();
                worst = worst.max((u_eps.u.data[k] - approx).norm());
            }
            wave_residual = wave_residual.max(worst);
        }
    }
    Ok(ExpansionResiduals {
        zeta_residual,
        v_residual,
        psi_residual,
        phi_residual,
        wave_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{HydroState, Params};
    use crate::scheme::{derive_constants, direct_integrate};
    use crate::spectral::SpectralGrid;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn grid() -> Arc<SpectralGrid> {
        SpectralGrid::new(1, 256, 20.0).unwrap()
    }

    fn base_run(g: &Arc<SpectralGrid>, n_steps: f64) -> (Trajectory, Profile, Profile) {
        let psi_in = Profile::Gaussian { amplitude: 0.4, center: 0.0, width: 1.5 };
        let phi_in = Profile::Gaussian { amplitude: 0.3, center: 0.5, width: 2.0 };
        let data = HydroState::from_profiles(&psi_in, &phi_in, g);
        let k_ell = 0.8;
        let c = derive_constants(&data, 1.0, 3.0, 0.5, k_ell, None, g).unwrap();
        let p = Params {
            d: 1,
            lambda: 1.0,
            eps: 0.0,
            delta_in: 0.5,
            ell: 3.0,
            m: c.m,
            t_final: c.t_final,
            dt: c.t_final / n_steps,
            k_ell,
        };
        (direct_integrate(&data, &p, g).unwrap(), psi_in, phi_in)
    }

    fn zero_base(g: &Arc<SpectralGrid>, t_final: f64, dt: f64) -> Trajectory {
        let p = Params {
            d: 1,
            lambda: 1.0,
            eps: 0.0,
            delta_in: 0.5,
            ell: 3.0,
            m: 1.0,
            t_final,
            dt,
            k_ell: 0.8,
        };
        let n = (t_final / dt).round() as usize;
        let times: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
        let states: Vec<HydroState> = times.iter().map(|_| HydroState::zeros(g)).collect();
        Trajectory::new(g.clone(), times, states, p).unwrap()
    }

    #[test]
    fn zero_base_zero_data_gives_zero_corrector() {
        let g = grid();
        let base = zero_base(&g, 0.1, 0.01);
        let zero = GridField::zeros(&g, 1, true);
        let c = solve_corrector(&base, &zero, &zero).unwrap();
        for (z, v) in c.zeta1.iter().zip(&c.v1) {
            assert_eq!(z.max_abs(), 0.0);
            assert_eq!(v.max_abs(), 0.0);
        }
    }

    #[test]
    fn corrector_requires_limit_base() {
        let g = grid();
        let mut base = zero_base(&g, 0.1, 0.01);
        base.params.eps = 0.5;
        let zero = GridField::zeros(&g, 1, true);
        assert!(solve_corrector(&base, &zero, &zero).is_err());
        let mut base = zero_base(&g, 0.1, 0.01);
        base.params.ell = 0.9;
        assert!(solve_corrector(&base, &zero, &zero).is_err());
    }

    #[test]
    fn zero_base_single_mode_matches_matrix_exponential() {
        // base = 0 decouples: d_t v1 = -lambda Re zeta1, d_t zeta1 = -grad div v1.
        // A real cosine mode evolves by the 2x2 rotation with omega = xi sqrt(lambda).
        let g = grid();
        let base = zero_base(&g, 0.2, 0.2 / 256.0);
        let k0 = 5usize;
        let xi0 = g.xi(k0, 0);
        let lambda = base.params.lambda;
        let a0 = 0.7; // v1 amplitude on cos
        let b0 = -0.4; // Re zeta1 amplitude on cos
        let v1_in = g.sample(|x| a0 * (xi0 * x[0]).cos());
        let z1_in = g.sample(|x| b0 * (xi0 * x[0]).cos());
        let c = solve_corrector(&base, &z1_in, &v1_in).unwrap();
        let omega = xi0 * lambda.sqrt();
        let t = *c.times.last().unwrap();
        let a_t = a0 * (omega * t).cos() - lambda * b0 / omega * (omega * t).sin();
        let b_t = b0 * (omega * t).cos() + xi0 * xi0 * a0 / omega * (omega * t).sin();
        let v_expect = g.sample(|x| a_t * (xi0 * x[0]).cos());
        let z_expect = g.sample(|x| b_t * (xi0 * x[0]).cos());
        let dv = c.v1.last().unwrap().sub(&v_expect).max_abs();
        let dz = c.zeta1.last().unwrap().sub(&z_expect).max_abs();
        assert!(dv <= 1e-8 && dz <= 1e-8, "dv = {dv}, dz = {dz}");
    }

    #[test]
    fn corrector_self_convergence_fourth_order() {
        let g = grid();
        let psi1 = Profile::Gaussian { amplitude: 0.3, center: -0.3, width: 1.2 };
        let phi1 = Profile::Gaussian { amplitude: 0.2, center: 0.2, width: 1.8 };
        let mut errors = Vec::new();
        let (fine_base, _, _) = base_run(&g, 256.0);
        let z1_in = psi1.sample_gradient(&g);
        let v1_in = phi1.sample_gradient(&g);
        let reference = solve_corrector(&fine_base, &z1_in, &v1_in).unwrap();
        for &n in &[8.0, 16.0, 32.0] {
            let (base, _, _) = base_run(&g, n);
            let c = solve_corrector(&base, &z1_in, &v1_in).unwrap();
            let err = c.zeta1.last().unwrap().sub(reference.zeta1.last().unwrap()).max_abs()
                + c.v1.last().unwrap().sub(reference.v1.last().unwrap()).max_abs();
            errors.push(err);
        }
        let s1 = (errors[0] / errors[1]).log2();
        let s2 = (errors[1] / errors[2]).log2();
        assert!(
            (s1 - 4.0).abs() <= 0.3 || (s2 - 4.0).abs() <= 0.3,
            "slopes {s1} {s2}, errors {errors:?}"
        );
    }

    #[test]
    fn corrector_is_affine_linear_in_data() {
        let g = grid();
        let (base, _, _) = base_run(&g, 32.0);
        let psi1 = Profile::Gaussian { amplitude: 0.3, center: -0.3, width: 1.2 };
        let phi1 = Profile::Gaussian { amplitude: 0.2, center: 0.2, width: 1.8 };
        let z1 = psi1.sample_gradient(&g);
        let v1 = phi1.sample_gradient(&g);
        let zero = GridField::zeros(&g, 1, true);
        let c_src = solve_corrector(&base, &zero, &zero).unwrap();
        let c_one = solve_corrector(&base, &z1, &v1).unwrap();
        for &factor in &[2.0, -3.0] {
            let cz = z1.scale(Complex64::new(factor, 0.0));
            let cv = v1.scale(Complex64::new(factor, 0.0));
            let c_f = solve_corrector(&base, &cz, &cv).unwrap();
            for i in 0..c_f.times.len() {
                // homogeneous part scales linearly with the data
                let mut expect = c_one.zeta1[i].sub(&c_src.zeta1[i]);
                expect = expect.scale(Complex64::new(factor, 0.0));
                expect.axpy(Complex64::new(1.0, 0.0), &c_src.zeta1[i]);
                let diff = c_f.zeta1[i].sub(&expect).max_abs();
                let scale = expect.max_abs().max(1e-300);
                assert!(diff <= 1e-10 * scale, "factor {factor}, node {i}: {diff}");
            }
        }
    }

    #[test]
    fn zero_base_constant_psi_data_gives_hand_integrated_phases() {
        // psi_in1 constant, phi_in1 = 0: gradients vanish, the corrector
        // fields stay zero, psi1 stays constant and phi1 = -lambda t psi_in1.
        let g = grid();
        let base = zero_base(&g, 0.1, 0.005);
        let kappa = 0.8;
        let psi1_in = Profile::Constant { value: kappa };
        let phi1_in = Profile::Zero;
        let c = solve_corrector(
            &base,
            &psi1_in.sample_gradient(&g),
            &phi1_in.sample_gradient(&g),
        )
        .unwrap();
        let c = reconstruct_corrector_phases(&c, &base, &psi1_in, &phi1_in).unwrap();
        let lambda = base.params.lambda;
        for (i, &t) in c.times.iter().enumerate() {
            for z in &c.psi1[i].data {
                assert!((z.re - kappa).abs() < 1e-13 && z.im.abs() < 1e-13);
            }
            for z in &c.phi1[i].data {
                assert!((z.re + lambda * t * kappa).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corrector_phase_gradients_match_fields() {
        // grad psi1 = zeta1 and grad phi1 = v1 up to the quadrature error.
        let g = grid();
        let psi1_in = Profile::Gaussian { amplitude: 0.3, center: -0.3, width: 1.2 };
        let phi1_in = Profile::Gaussian { amplitude: 0.2, center: 0.2, width: 1.8 };
        let mut errs = Vec::new();
        for &n in &[16.0, 32.0, 64.0] {
            let (base, _, _) = base_run(&g, n);
            let c = solve_corrector(
                &base,
                &psi1_in.sample_gradient(&g),
                &phi1_in.sample_gradient(&g),
            )
            .unwrap();
            let c = reconstruct_corrector_phases(&c, &base, &psi1_in, &phi1_in).unwrap();
            let mut worst = 0.0f64;
            for i in 0..c.times.len() {
                let gp = spectral_derivative(&c.psi1[i], DerivativeKind::Grad, &g).unwrap();
                worst = worst.max(l2_quadrature_norm(&gp.sub(&c.zeta1[i]), &g));
                let gq = spectral_derivative(&c.phi1[i], DerivativeKind::Grad, &g).unwrap();
                worst = worst.max(l2_quadrature_norm(&gq.sub(&c.v1[i]), &g));
            }
            errs.push(worst);
        }
        let s1 = (errs[0] / errs[1]).log2();
        let s2 = (errs[1] / errs[2]).log2();
        assert!(
            (s1 - 2.0).abs() <= 0.35 && (s2 - 2.0).abs() <= 0.35,
            "slopes {s1} {s2}, errors {errs:?}"
        );
    }

    #[test]
    fn triviality_criterion_both_directions() {
        let g = grid();
        let (base, _, _) = base_run(&g, 32.0);
        let gaussian = Profile::Gaussian { amplitude: 0.3, center: 0.0, width: 1.5 };
        let report = check_phi1_triviality(&Profile::Zero, &Profile::Zero, &base).unwrap();
        assert!(report.trivial, "zero data must give trivial phi1");
        let report = check_phi1_triviality(&gaussian, &Profile::Zero, &base).unwrap();
        assert!(!report.trivial, "psi data must force phi1, sup = {}", report.sup_phi1_l2);
        let report = check_phi1_triviality(&Profile::Zero, &gaussian, &base).unwrap();
        assert!(!report.trivial, "phi data must force phi1, sup = {}", report.sup_phi1_l2);
    }

    #[test]
    fn real_part_subsystem_closes() {
        // With a real base, (Re psi1, phi1) solves the reduced real system;
        // integrate it independently and compare.
        let g = grid();
        let (base, _, _) = base_run(&g, 64.0);
        let psi1_in = Profile::Gaussian { amplitude: 0.3, center: -0.3, width: 1.2 };
        let phi1_in = Profile::Gaussian { amplitude: 0.2, center: 0.2, width: 1.8 };
        let c = solve_corrector(
            &base,
            &psi1_in.sample_gradient(&g),
            &phi1_in.sample_gradient(&g),
        )
        .unwrap();
        let c = reconstruct_corrector_phases(&c, &base, &psi1_in, &phi1_in).unwrap();

        // reduced system on (r, q) = (Re psi1, phi1):
        // d_t q = -v0 . grad q - lambda r
        // d_t r = -v0 . grad r - grad q . Re zeta0 - Lap q
        let lambda = base.params.lambda;
        let v0_fields: Vec<GridField> = base.states.iter().map(|s| s.v.clone()).collect();
        let z0_fields: Vec<GridField> = base.states.iter().map(|s| s.zeta.clone()).collect();
        let v0_s = CubicNodeSeries { times: &base.times, fields: &v0_fields };
        let z0_s = CubicNodeSeries { times: &base.times, fields: &z0_fields };
        let rhs = |v0: &GridField,
                   z0: &GridField,
                   r: &GridField,
                   q: &GridField|
         -> (GridField, GridField) {
            let grad_q = spectral_derivative(q, DerivativeKind::Grad, &g).unwrap();
            let grad_r = spectral_derivative(r, DerivativeKind::Grad, &g).unwrap();
            let mut dq = dealiased_dot(v0, &grad_q, &g).unwrap().scale(Complex64::new(-1.0, 0.0));
            dq.axpy(Complex64::new(-lambda, 0.0), r);
            let mut dr = dealiased_dot(v0, &grad_r, &g).unwrap().scale(Complex64::new(-1.0, 0.0));
            let gz = dealiased_dot(&grad_q, &z0.real_part(), &g).unwrap();
            dr.axpy(Complex64::new(-1.0, 0.0), &gz);
            let lap_q = spectral_derivative(q, DerivativeKind::Laplacian, &g).unwrap();
            dr.axpy(Complex64::new(-1.0, 0.0), &lap_q);
            (dr, dq)
        };
        let mut r = psi1_in.sample(&g);
        let mut q = phi1_in.sample(&g);
        for (step, pair) in base.times.windows(2).enumerate() {
            let (t, h) = (pair[0], pair[1] - pair[0]);
            let v0_a = &base.states[step].v;
            let z0_a = &base.states[step].zeta;
            let v0_h = v0_s.eval(t + 0.5 * h);
            let z0_h = z0_s.eval(t + 0.5 * h);
            let v0_b = &base.states[step + 1].v;
            let z0_b = &base.states[step + 1].zeta;
            let (kr1, kq1) = rhs(v0_a, z0_a, &r, &q);
            let mut r2 = r.clone();
            r2.axpy(Complex64::new(0.5 * h, 0.0), &kr1);
            let mut q2 = q.clone();
            q2.axpy(Complex64::new(0.5 * h, 0.0), &kq1);
            let (kr2, kq2) = rhs(&v0_h, &z0_h, &r2, &q2);
            let mut r3 = r.clone();
            r3.axpy(Complex64::new(0.5 * h, 0.0), &kr2);
            let mut q3 = q.clone();
            q3.axpy(Complex64::new(0.5 * h, 0.0), &kq2);
            let (kr3, kq3) = rhs(&v0_h, &z0_h, &r3, &q3);
            let mut r4 = r.clone();
            r4.axpy(Complex64::new(h, 0.0), &kr3);
            let mut q4 = q.clone();
            q4.axpy(Complex64::new(h, 0.0), &kq3);
            let (kr4, kq4) = rhs(v0_b, z0_b, &r4, &q4);
            r.axpy(Complex64::new(h / 6.0, 0.0), &kr1);
            r.axpy(Complex64::new(h / 3.0, 0.0), &kr2);
            r.axpy(Complex64::new(h / 3.0, 0.0), &kr3);
            r.axpy(Complex64::new(h / 6.0, 0.0), &kr4);
            q.axpy(Complex64::new(h / 6.0, 0.0), &kq1);
            q.axpy(Complex64::new(h / 3.0, 0.0), &kq2);
            q.axpy(Complex64::new(h / 3.0, 0.0), &kq3);
            q.axpy(Complex64::new(h / 6.0, 0.0), &kq4);
        }
        let re_psi1 = c.psi1.last().unwrap().real_part();
        let dr = re_psi1.sub(&r).max_abs();
        let dq = c.phi1.last().unwrap().sub(&q).max_abs();
        let dt = base.dt();
        // the quadrature route is O(dt^2); allow a calibrated constant
        let bound = 5.0 * dt * dt + 1e-10;
        assert!(dr <= bound && dq <= bound, "dr = {dr}, dq = {dq}, bound = {bound}");
    }

    #[test]
    fn expansion_residual_zero_at_eps_zero() {
        let g = grid();
        let (base, psi_in, phi_in) = base_run(&g, 32.0);
        let base_phases = crate::reconstruct::reconstruct_phases(&base, &psi_in, &phi_in).unwrap();
        let psi1_in = Profile::Zero;
        let phi1_in = Profile::Zero;
        let c = solve_corrector(
            &base,
            &psi1_in.sample_gradient(&g),
            &phi1_in.sample_gradient(&g),
        )
        .unwrap();
        let c = reconstruct_corrector_phases(&c, &base, &psi1_in, &phi1_in).unwrap();
        let res =
            expansion_residual(&base, &base_phases, &base, &base_phases, &c, 0.0).unwrap();
        assert_eq!(res.zeta_residual, 0.0);
        assert_eq!(res.v_residual, 0.0);
        assert_eq!(res.psi_residual, 0.0);
        assert_eq!(res.phi_residual, 0.0);
    }

    #[test]
    fn single_mode_frequency_sanity() {
        // the matrix-exponential test's frequency: one oscillation period
        // fits the horizon used there
        let g = grid();
        let xi0 = g.xi(5, 0);
        assert!(xi0 > 0.0 && xi0 * 0.2 < 2.0 * PI);
    }
}
