//! State model: run parameters, the hydrodynamic pair (zeta, v), phase fields
//! with background splitting, time-indexed trajectories, and the geometric
//! consistency checks (gradient structure, curl residuals, box adequacy).

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::Profile;
use crate::spectral::{
    forward_transform, inverse_transform, l2_quadrature_norm, DeltaSchedule, DerivativeKind,
    GridField, SpectralGrid,
};

/// Run parameters: nonlinearity strength, semiclassical parameter, radius
/// schedule, regularity level and derived time horizon.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Params {
    pub d: usize,
    pub lambda: f64,
    pub eps: f64,
    pub delta_in: f64,
    pub ell: f64,
    /// Radius shrink rate; derived by the constant derivation unless overridden.
    pub m: f64,
    pub t_final: f64,
    pub dt: f64,
    /// Product constant used inside the rate formulas.
    pub k_ell: f64,
}

impl Params {
    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0.0 {
            return Err(Error::Config("lambda must be nonzero".into()));
        }
        if !(0.0..=1.0).contains(&self.eps) {
            return Err(Error::Config(format!("eps must lie in [0, 1], got {}", self.eps)));
        }
        if !(self.delta_in > 0.0) {
            return Err(Error::Config("delta_in must be positive".into()));
        }
        if self.delta_in - self.m * self.t_final < -1e-12 {
            return Err(Error::Config(format!(
                "radius schedule exhausted before T: delta_in = {}, M T = {}",
                self.delta_in,
                self.m * self.t_final
            )));
        }
        if !(self.ell > self.d as f64 / 2.0) {
            return Err(Error::Config(format!(
                "ell must exceed d/2 = {}, got {}",
                self.d as f64 / 2.0,
                self.ell
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> DeltaSchedule {
        DeltaSchedule { delta_in: self.delta_in, rate: self.m }
    }
}

/// The evolved pair: complex gradient field zeta and real irrotational
/// velocity v, both d-vector fields on the grid.
#[derive(Debug, Clone)]
pub struct HydroState {
    pub zeta: GridField,
    pub v: GridField,
}

impl HydroState {
    pub fn zeros(g: &SpectralGrid) -> Self {
        HydroState {
            zeta: GridField::zeros(g, g.dim(), true),
            v: GridField::zeros(g, g.dim(), true),
        }
    }

    /// Initial state from phase profiles: zeta = grad psi_in, v = grad phi_in.
    pub fn from_profiles(psi_in: &Profile, phi_in: &Profile, g: &SpectralGrid) -> Self {
        HydroState { zeta: psi_in.sample_gradient(g), v: phi_in.sample_gradient(g) }
    }

    pub fn is_finite(&self) -> bool {
        self.zeta.is_finite() && self.v.is_finite()
    }

    /// Largest deviation from the gradient (spectral symmetry) structure:
    /// max over modes of |xi_i f_j - xi_j f_i| relative to the field scale.
    pub fn gradient_residual(&self, g: &SpectralGrid) -> Result<f64> {
        if g.dim() == 1 {
            return Ok(0.0);
        }
        let mut worst: f64 = 0.0;
        for field in [&self.zeta, &self.v] {
            let s = forward_transform(field, g)?;
            let f0 = s.component(0, g);
            let f1 = s.component(1, g);
            let mut scale: f64 = 0.0;
            let mut dev: f64 = 0.0;
            for k in 0..g.len() {
                let xi0 = g.xi(k, 0);
                let xi1 = g.xi(k, 1);
                dev = dev.max((xi0 * f1[k] - xi1 * f0[k]).norm());
                scale = scale.max((xi0 * f0[k] + xi1 * f1[k]).norm().max(f0[k].norm() + f1[k].norm()));
            }
            if scale > 0.0 {
                worst = worst.max(dev / scale);
            }
        }
        Ok(worst)
    }
}

/// grad p via the exact Fourier multiplier; curl-free by construction.
pub fn gradient_of_potential(p: &GridField, g: &SpectralGrid) -> Result<GridField> {
    crate::spectral::spectral_derivative(p, DerivativeKind::Grad, g)
}

/// L^2 quadrature norm of d1 v2 - d2 v1 (zero by convention in d = 1).
pub fn curl_residual(v: &GridField, g: &SpectralGrid) -> Result<f64> {
    if v.components != g.dim() {
        return Err(Error::ComponentMismatch { expected: g.dim(), got: v.components });
    }
    if g.dim() == 1 {
        return Ok(0.0);
    }
    let s = forward_transform(v, g)?;
    let v0 = s.component(0, g);
    let v1 = s.component(1, g);
    let mut curl = crate::spectral::Spectrum::zeros(g, 1);
    {
        let dst = curl.component_mut(0, g);
        for k in 0..g.len() {
            let xi0 = g.xi(k, 0);
            let xi1 = g.xi(k, 1);
            dst[k] = Complex64::i() * (xi0 * v1[k] - xi1 * v0[k]);
        }
    }
    let curl_phys = inverse_transform(&curl, g)?;
    Ok(l2_quadrature_norm(&curl_phys, g))
}

/// Max |profile| over the outer two grid cells of the box; validates that the
/// box half-width is adequate for decay-based runs.
pub fn periodization_error(profile: &Profile, g: &SpectralGrid) -> f64 {
    let n = g.n_per_axis();
    let dx = g.dx();
    let l = g.box_half_width();
    let mut worst: f64 = 0.0;
    for j in [0usize, 1, n - 2, n - 1] {
        let x = -l + j as f64 * dx;
        worst = worst.max(profile.eval(x).abs());
    }
    worst
}

/// psi and phi as closed-form backgrounds plus decaying grid increments.
///
/// Backgrounds: psi = psi_in + Psi and phi = phi_in - lambda t psi_in + Phi.
/// The time-linear term enters with the sign that renders the increment's
/// time derivative decaying (the variant used in the energy estimates).
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub t: f64,
    pub lambda: f64,
    pub psi_in: Profile,
    pub phi_in: Profile,
    /// Complex scalar increment Psi with Psi(0) = 0.
    pub psi_inc: GridField,
    /// Real scalar increment Phi with Phi(0) = 0.
    pub phi_inc: GridField,
}

impl PhaseState {
    pub fn initial(psi_in: Profile, phi_in: Profile, lambda: f64, g: &SpectralGrid) -> Self {
        PhaseState {
            t: 0.0,
            lambda,
            psi_in,
            phi_in,
            psi_inc: GridField::zeros(g, 1, true),
            phi_inc: GridField::zeros(g, 1, true),
        }
    }

    /// Full psi = psi_in + Psi on the grid.
    pub fn psi_total(&self, g: &SpectralGrid) -> GridField {
        let mut out = self.psi_in.sample(g);
        out.axpy(Complex64::new(1.0, 0.0), &self.psi_inc);
        out.real = self.psi_inc.real;
        out
    }

    /// Full phi = phi_in - lambda t psi_in + Phi on the grid.
    pub fn phi_total(&self, g: &SpectralGrid) -> GridField {
        let mut out = self.phi_in.sample(g);
        out.axpy(Complex64::new(-self.lambda * self.t, 0.0), &self.psi_in.sample(g));
        out.axpy(Complex64::new(1.0, 0.0), &self.phi_inc);
        out.real = self.phi_inc.real;
        out
    }

    /// grad psi with the background derivative taken in closed form.
    pub fn grad_psi(&self, g: &SpectralGrid) -> Result<GridField> {
        let mut out = self.psi_in.sample_gradient(g);
        let inc = gradient_of_potential(&self.psi_inc, g)?;
        out.axpy(Complex64::new(1.0, 0.0), &inc);
        out.real = inc.real;
        Ok(out)
    }

    /// grad phi with the background derivative taken in closed form.
    pub fn grad_phi(&self, g: &SpectralGrid) -> Result<GridField> {
        let mut out = self.phi_in.sample_gradient(g);
        let bg = self.psi_in.sample_gradient(g);
        out.axpy(Complex64::new(-self.lambda * self.t, 0.0), &bg);
        let inc = gradient_of_potential(&self.phi_inc, g)?;
        out.axpy(Complex64::new(1.0, 0.0), &inc);
        out.real = inc.real;
        Ok(out)
    }
}

/// Time-indexed hydrodynamic states on a uniform grid over [0, T], with the
/// radius schedule attached.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Arc<SpectralGrid>,
    pub times: Vec<f64>,
    pub states: Vec<HydroState>,
    pub params: Params,
}

impl Trajectory {
    pub fn new(
        grid: Arc<SpectralGrid>,
        times: Vec<f64>,
        states: Vec<HydroState>,
        params: Params,
    ) -> Result<Self> {
        if times.len() != states.len() || times.len() < 2 {
            return Err(Error::Config("trajectory needs aligned times and states".into()));
        }
        let dt = times[1] - times[0];
        for w in times.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-10 * dt.max(1e-300) {
                return Err(Error::Config("trajectory time grid must be uniform".into()));
            }
        }
        let sched = DeltaSchedule { delta_in: params.delta_in, rate: params.m };
        let t_last = *times.last().unwrap();
        if sched.at(t_last) < -1e-12 {
            return Err(Error::RadiusExhausted { t: t_last, delta: sched.at(t_last) });
        }
        Ok(Trajectory { grid, times, states, params })
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn delta_at(&self, i: usize) -> f64 {
        self.params.delta_in - self.params.m * self.times[i]
    }

    /// Component series for norm evaluation.
    pub fn zeta_series(&self) -> Vec<&GridField> {
        self.states.iter().map(|s| &s.zeta).collect()
    }

    pub fn v_series(&self) -> Vec<&GridField> {
        self.states.iter().map(|s| &s.v).collect()
    }

    /// Columnar debug dump: header with d, n, L, dt, then one row per time
    /// node with the real/imaginary parts of every component value.
    pub fn dump_csv(&self, writer: &mut impl std::io::Write) -> Result<()> {
        writeln!(
            writer,
            "# d={} n={} L={} dt={}",
            self.grid.dim(),
            self.grid.n_per_axis(),
            self.grid.box_half_width(),
            self.dt()
        )?;
        for (i, state) in self.states.iter().enumerate() {
            let mut row = Vec::with_capacity(2 + 4 * state.zeta.data.len());
            row.push(format!("{:.17e}", self.times[i]));
            for z in state.zeta.data.iter().chain(state.v.data.iter()) {
                row.push(format!("{:.17e}", z.re));
                row.push(format!("{:.17e}", z.im));
            }
            writeln!(writer, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{erf_profile, Profile};
    use crate::spectral::{random_band_limited, spectral_derivative};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize) -> Params {
        Params {
            d,
            lambda: 1.0,
            eps: 0.5,
            delta_in: 0.5,
            ell: 3.0,
            m: 5.0,
            t_final: 0.1,
            dt: 0.01,
            k_ell: 1.0,
        }
    }

    #[test]
    fn params_validation() {
        let mut p = params(1);
        p.validate().unwrap();
        p.lambda = 0.0;
        assert!(p.validate().is_err());
        let mut p = params(1);
        p.eps = 1.5;
        assert!(p.validate().is_err());
        let mut p = params(1);
        p.m = 10.0;
        assert!(p.validate().is_err());
        let mut p = params(2);
        p.ell = 0.9;
        assert!(p.validate().is_err());
    }

    #[test]
    fn gradient_of_constant_potential_vanishes() {
        let g = SpectralGrid::new(1, 64, 10.0).unwrap();
        let p = g.sample(|_| 3.25);
        let grad = gradient_of_potential(&p, &g).unwrap();
        assert!(grad.max_abs() < 1e-12);
    }

    #[test]
    fn gradient_of_gaussian_matches_closed_form() {
        let g = SpectralGrid::new(1, 512, 20.0).unwrap();
        let p = g.sample(|x| (-x[0] * x[0] / 2.0).exp());
        let grad = gradient_of_potential(&p, &g).unwrap();
        for idx in 0..g.len() {
            let x = g.coord(idx, 0);
            let exact = -x * (-x * x / 2.0).exp();
            assert!((grad.data[idx].re - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn curl_of_gradient_is_zero_2d() {
        let g = SpectralGrid::new(2, 32, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = random_band_limited(&mut rng, &g, 1, true, 0.4);
        let grad = spectral_derivative(&p, DerivativeKind::Grad, &g).unwrap();
        let r = curl_residual(&grad, &g).unwrap();
        let scale = l2_quadrature_norm(&grad, &g);
        assert!(r <= 1e-12 * scale.max(1e-300));
    }

    #[test]
    fn curl_of_rotational_field_is_positive() {
        let g = SpectralGrid::new(2, 32, 8.0).unwrap();
        // v = (-y, x) * bump: curl = 2 bump + r bump', strictly nonzero.
        let mut v = GridField::zeros(&g, 2, true);
        for idx in 0..g.len() {
            let x = g.coord(idx, 0);
            let y = g.coord(idx, 1);
            let bump = (-(x * x + y * y) / 4.0).exp();
            v.component_mut(0, &g)[idx] = Complex64::new(-y * bump, 0.0);
            v.component_mut(1, &g)[idx] = Complex64::new(x * bump, 0.0);
        }
        // independent quadrature of the curl
        let mut exact_sq = 0.0;
        for idx in 0..g.len() {
            let x = g.coord(idx, 0);
            let y = g.coord(idx, 1);
            let r2 = x * x + y * y;
            let bump = (-r2 / 4.0).exp();
            let curl = 2.0 * bump - r2 / 2.0 * bump;
            exact_sq += curl * curl;
        }
        let exact = (exact_sq * g.dx() * g.dx()).sqrt();
        let got = curl_residual(&v, &g).unwrap();
        assert!((got - exact).abs() < 1e-8 * exact);
        assert!(got > 0.1);
    }

    #[test]
    fn curl_residual_trivial_in_1d_and_zero_field() {
        let g1 = SpectralGrid::new(1, 64, 10.0).unwrap();
        let v = GridField::zeros(&g1, 1, true);
        assert_eq!(curl_residual(&v, &g1).unwrap(), 0.0);
        let g2 = SpectralGrid::new(2, 16, 5.0).unwrap();
        let v = GridField::zeros(&g2, 2, true);
        assert_eq!(curl_residual(&v, &g2).unwrap(), 0.0);
    }

    #[test]
    fn periodization_error_flags_non_decaying_profiles() {
        let g = SpectralGrid::new(1, 256, 20.0).unwrap();
        let gauss = Profile::Gaussian { amplitude: 1.0, center: 0.0, width: 1.0 };
        assert!(periodization_error(&gauss, &g) < 1e-70);
        let step = erf_profile(0.0, 1.0).unwrap();
        assert!(periodization_error(&step, &g) > 0.5);
        assert_eq!(periodization_error(&Profile::Zero, &g), 0.0);
    }

    #[test]
    fn phase_state_backgrounds_and_increments() {
        let g = SpectralGrid::new(1, 128, 10.0).unwrap();
        let psi_in = Profile::Constant { value: 2.0 * 0.7 };
        let phi_in = Profile::Zero;
        let lambda = 1.3;
        let mut ps = PhaseState::initial(psi_in, phi_in, lambda, &g);
        ps.t = 0.25;
        // zero increments: phi(t) = -lambda t psi_in = -2 lambda kappa t
        let phi = ps.phi_total(&g);
        let expected = -lambda * 0.25 * 1.4;
        for z in &phi.data {
            assert!((z.re - expected).abs() < 1e-14);
        }
        assert!(ps.psi_inc.max_abs() == 0.0 && ps.phi_inc.max_abs() == 0.0);
    }

    #[test]
    fn trajectory_requires_uniform_times() {
        let g = SpectralGrid::new(1, 64, 10.0).unwrap();
        let p = params(1);
        let states = vec![HydroState::zeros(&g), HydroState::zeros(&g), HydroState::zeros(&g)];
        assert!(Trajectory::new(g.clone(), vec![0.0, 0.01, 0.03], states.clone(), p).is_err());
        let traj = Trajectory::new(g, vec![0.0, 0.01, 0.02], states, p).unwrap();
        assert!((traj.delta_at(2) - (0.5 - 5.0 * 0.02)).abs() < 1e-14);
    }
}
