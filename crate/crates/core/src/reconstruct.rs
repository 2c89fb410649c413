//! Phase reconstruction from a trajectory via the integral relations, wave
//! function assembly, and gradient-consistency diagnostics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{PhaseState, Trajectory};
use crate::profiles::Profile;
use crate::spectral::{
    analytic_norm, dealiased_dot, l2_quadrature_norm, spectral_derivative, DerivativeKind,
    GridField, SpectralGrid, WeightParams,
};

/// Assembled wave function at one time node.
#[derive(Debug, Clone)]
pub struct WaveField {
    pub u: GridField,
    pub eps: f64,
    pub t: f64,
}

/// Prefix trapezoid integrals of a node series of scalar fields: out[i] is
/// the integral from 0 to t_i.
fn prefix_trapezoid(series: &[GridField], times: &[f64], g: &SpectralGrid) -> Vec<GridField> {
    let mut out = Vec::with_capacity(series.len());
    let mut acc = GridField::zeros(g, 1, series.iter().all(|f| f.real));
    out.push(acc.clone());
    for i in 1..series.len() {
        let h = times[i] - times[i - 1];
        acc.axpy(Complex64::new(0.5 * h, 0.0), &series[i - 1]);
        acc.axpy(Complex64::new(0.5 * h, 0.0), &series[i]);
        out.push(acc.clone());
    }
    out
}

/// psi(t) = psi_in - int_0^t [v . zeta + div v - i(eps/2)(div zeta + (1/2) zeta . zeta)];
/// the increment is accumulated by trapezoid quadrature on the trajectory
/// grid and vanishes at t = 0.
pub fn reconstruct_psi(traj: &Trajectory, psi_in: &Profile) -> Result<Vec<PhaseState>> {
    let g = &traj.grid;
    let eps = traj.params.eps;
    let mut integrand = Vec::with_capacity(traj.len());
    for s in &traj.states {
        let mut ii = dealiased_dot(&s.v, &s.zeta, g)?;
        let div_v = spectral_derivative(&s.v, DerivativeKind::Div, g)?;
        ii.axpy(Complex64::new(1.0, 0.0), &div_v);
        if eps != 0.0 {
            let div_z = spectral_derivative(&s.zeta, DerivativeKind::Div, g)?;
            ii.axpy(Complex64::new(0.0, -0.5 * eps), &div_z);
            let zz = dealiased_dot(&s.zeta, &s.zeta, g)?;
            ii.axpy(Complex64::new(0.0, -0.25 * eps), &zz);
        }
        integrand.push(ii);
    }
    let prefix = prefix_trapezoid(&integrand, &traj.times, g);
    let mut out = Vec::with_capacity(traj.len());
    for (i, acc) in prefix.into_iter().enumerate() {
        let psi_inc = acc.scale(Complex64::new(-1.0, 0.0));
        out.push(PhaseState {
            t: traj.times[i],
            lambda: traj.params.lambda,
            psi_in: psi_in.clone(),
            phi_in: Profile::Zero,
            psi_inc,
            phi_inc: GridField::zeros(g, 1, true),
        });
    }
    Ok(out)
}

/// phi(t) = phi_in - int_0^t ((1/2)|v|^2 + lambda Re psi). The non-decaying
/// lambda Re psi_in part is carried by the closed-form background
/// phi_in - lambda t psi_in; the grid increment integrates
/// (1/2) v . v + lambda Re Psi.
pub fn reconstruct_phi(
    traj: &Trajectory,
    psi_series: &[PhaseState],
    phi_in: &Profile,
) -> Result<Vec<PhaseState>> {
    if psi_series.len() != traj.len() {
        return Err(Error::Config("psi series must align with the trajectory".into()));
    }
    let g = &traj.grid;
    let mut integrand = Vec::with_capacity(traj.len());
    for (s, ps) in traj.states.iter().zip(psi_series) {
        let mut ii = dealiased_dot(&s.v, &s.v, g)?.scale(Complex64::new(0.5, 0.0));
        ii.axpy(Complex64::new(traj.params.lambda, 0.0), &ps.psi_inc.real_part());
        integrand.push(ii.real_part());
    }
    let prefix = prefix_trapezoid(&integrand, &traj.times, g);
    let mut out = Vec::with_capacity(traj.len());
    for (i, acc) in prefix.into_iter().enumerate() {
        out.push(PhaseState {
            t: traj.times[i],
            lambda: traj.params.lambda,
            psi_in: psi_series[i].psi_in.clone(),
            phi_in: phi_in.clone(),
            psi_inc: psi_series[i].psi_inc.clone(),
            phi_inc: acc.scale(Complex64::new(-1.0, 0.0)),
        });
    }
    Ok(out)
}

/// Both phases in one pass.
pub fn reconstruct_phases(
    traj: &Trajectory,
    psi_in: &Profile,
    phi_in: &Profile,
) -> Result<Vec<PhaseState>> {
    let psi = reconstruct_psi(traj, psi_in)?;
    reconstruct_phi(traj, &psi, phi_in)
}

/// u = e^{psi/2 + i phi / eps} assembled pointwise from background plus
/// increment. Rejects eps = 0 (no wave function in the limit system).
pub fn assemble_wavefunction(
    phase: &PhaseState,
    eps: f64,
    g: &SpectralGrid,
) -> Result<WaveField> {
    if !(eps > 0.0) {
        return Err(Error::Config("wave function assembly requires eps > 0".into()));
    }
    let psi = phase.psi_total(g);
    let phi = phase.phi_total(g);
    let mut u = GridField::zeros(g, 1, false);
    for ((uv, pv), fv) in u.data.iter_mut().zip(&psi.data).zip(&phi.data) {
        let exponent = 0.5 * pv + Complex64::i() * fv / eps;
        *uv = exponent.exp();
    }
    Ok(WaveField { u, eps, t: phase.t })
}

/// Per-time gradient-consistency residuals of a reconstructed phase series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub times: Vec<f64>,
    /// ||grad psi - zeta||_{L^2} per node.
    pub grad_psi_l2: Vec<f64>,
    /// ||grad phi - v||_{L^2} per node.
    pub grad_phi_l2: Vec<f64>,
    /// Same residuals in the (ell - 1/2, delta(t)) norm.
    pub grad_psi_weighted: Vec<f64>,
    pub grad_phi_weighted: Vec<f64>,
    /// Curl residual of v per node.
    pub curl_v: Vec<f64>,
    /// (ell - 1/2, delta(t)) norm of the centered finite difference of
    /// d_t psi (interior nodes; endpoints use one-sided differences).
    pub dt_psi_weighted: Vec<f64>,
}

impl ConsistencyReport {
    pub fn max_grad_psi_l2(&self) -> f64 {
        self.grad_psi_l2.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_grad_phi_l2(&self) -> f64 {
        self.grad_phi_l2.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn consistency_residuals(
    traj: &Trajectory,
    phases: &[PhaseState],
) -> Result<ConsistencyReport> {
    if phases.len() != traj.len() {
        return Err(Error::Config("phase series must align with the trajectory".into()));
    }
    let g = &traj.grid;
    let p = &traj.params;
    let mut grad_psi_l2 = Vec::with_capacity(traj.len());
    let mut grad_phi_l2 = Vec::with_capacity(traj.len());
    let mut grad_psi_weighted = Vec::with_capacity(traj.len());
    let mut grad_phi_weighted = Vec::with_capacity(traj.len());
    let mut curl_v = Vec::with_capacity(traj.len());
    let mut dt_psi_weighted = Vec::with_capacity(traj.len());
    for (i, ps) in phases.iter().enumerate() {
        let w = WeightParams::new((p.ell - 0.5).max(0.0), traj.delta_at(i))?;
        let dpsi = ps.grad_psi(g)?.sub(&traj.states[i].zeta);
        let dphi = ps.grad_phi(g)?.sub(&traj.states[i].v);
        grad_psi_l2.push(l2_quadrature_norm(&dpsi, g));
        grad_phi_l2.push(l2_quadrature_norm(&dphi, g));
        grad_psi_weighted.push(analytic_norm(&dpsi, &w, g)?);
        grad_phi_weighted.push(analytic_norm(&dphi, &w, g)?);
        curl_v.push(crate::fields::curl_residual(&traj.states[i].v, g)?);
        // finite-difference d_t psi = d_t Psi
        let dt = traj.dt();
        let diff = if i == 0 {
            phases[1].psi_inc.sub(&phases[0].psi_inc).scale(Complex64::new(1.0 / dt, 0.0))
        } else if i == traj.len() - 1 {
            phases[i].psi_inc.sub(&phases[i - 1].psi_inc).scale(Complex64::new(1.0 / dt, 0.0))
        } else {
            phases[i + 1]
                .psi_inc
                .sub(&phases[i - 1].psi_inc)
                .scale(Complex64::new(0.5 / dt, 0.0))
        };
        dt_psi_weighted.push(analytic_norm(&diff, &w, g)?);
    }
    Ok(ConsistencyReport {
        times: traj.times.clone(),
        grad_psi_l2,
        grad_phi_l2,
        grad_psi_weighted,
        grad_phi_weighted,
        curl_v,
        dt_psi_weighted,
    })
}

/// CSV snapshot of psi, phi and u (real/imaginary parts) at one time node.
pub fn export_phase_snapshot(
    phase: &PhaseState,
    eps: f64,
    g: &SpectralGrid,
    writer: &mut impl std::io::Write,
) -> Result<()> {
    let psi = phase.psi_total(g);
    let phi = phase.phi_total(g);
    let wf = assemble_wavefunction(phase, eps, g)?;
    writeln!(writer, "x,psi_re,psi_im,phi_re,u_re,u_im")?;
    for idx in 0..g.len() {
        writeln!(
            writer,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            g.coord(idx, 0),
            psi.data[idx].re,
            psi.data[idx].im,
            phi.data[idx].re,
            wf.u.data[idx].re,
            wf.u.data[idx].im
        )?;
    }
    Ok(())
}
