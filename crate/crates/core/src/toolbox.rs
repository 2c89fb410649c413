//! Verifiers for the weighted-norm toolbox inequalities on time-dependent
//! fields, the radius-shrink derivative identity, and the sup-norm control.
//! These instantiate the abstract product constants empirically and are run
//! both by the test suite and the `check` subcommand.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::spectral::{
    analytic_norm, analytic_norm_spectrum, dealiased_dot, dealiased_product,
    estimate_product_constant, forward_transform, random_band_limited, spectral_derivative,
    DeltaSchedule, DerivativeKind, GridField, SpectralGrid, Spectrum, WeightParams,
};

/// Safety factor applied to empirically estimated product constants before
/// they are used as inequality budget.
pub const K_SAFETY: f64 = 1.5;

/// sup over nodes of the (ell, delta(t_i)) norm.
pub fn sup_time_norm(
    spectra: &[Spectrum],
    times: &[f64],
    ell: f64,
    sched: DeltaSchedule,
    g: &SpectralGrid,
) -> Result<f64> {
    let mut sup: f64 = 0.0;
    for (s, &t) in spectra.iter().zip(times) {
        let w = WeightParams::new(ell, sched.checked_at(t)?)?;
        sup = sup.max(analytic_norm_spectrum(s, &w, g));
    }
    Ok(sup)
}

/// Trapezoid realization of ( int ||f(tau)||^2_{ell, delta(tau)} dtau )^{1/2}.
pub fn l2_time_norm(
    spectra: &[Spectrum],
    times: &[f64],
    ell: f64,
    sched: DeltaSchedule,
    g: &SpectralGrid,
) -> Result<f64> {
    let mut acc = 0.0;
    let mut prev = 0.0;
    for (i, (s, &t)) in spectra.iter().zip(times).enumerate() {
        let w = WeightParams::new(ell, sched.checked_at(t)?)?;
        let n = analytic_norm_spectrum(s, &w, g);
        let cur = n * n;
        if i > 0 {
            acc += 0.5 * (times[i] - times[i - 1]) * (prev + cur);
        }
        prev = cur;
    }
    Ok(acc.sqrt())
}

/// Smooth random time series: A + sin(omega t) B + t C with band-limited
/// analytic snapshots.
fn random_series(
    rng: &mut ChaCha8Rng,
    times: &[f64],
    components: usize,
    g: &SpectralGrid,
) -> Vec<GridField> {
    let a = random_band_limited(rng, g, components, false, 0.5);
    let b = random_band_limited(rng, g, components, false, 0.5);
    let c = random_band_limited(rng, g, components, false, 0.5);
    let omega = 2.0 + 6.0 * rng.random::<f64>();
    times
        .iter()
        .map(|&t| {
            let mut f = a.clone();
            f.axpy(Complex64::new((omega * t).sin(), 0.0), &b);
            f.axpy(Complex64::new(t, 0.0), &c);
            f
        })
        .collect()
}

fn spectra_of(series: &[GridField], g: &SpectralGrid) -> Result<Vec<Spectrum>> {
    series.iter().map(|f| forward_transform(f, g)).collect()
}

/// One verified inequality: its label, the number of trials, and the largest
/// observed ratio lhs / rhs (<= 1 means it held everywhere).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub label: String,
    pub trials: usize,
    pub worst_ratio: f64,
}

impl InequalityCheck {
    pub fn holds(&self) -> bool {
        self.worst_ratio <= 1.0 + 1e-12
    }
}

/// Run all toolbox inequalities on randomized time-dependent fields with
/// empirically calibrated product constants. `m` is the base regularity of
/// the statement; the checks need m > d/2.
pub fn verify_toolbox_inequalities(
    g: &SpectralGrid,
    m: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<InequalityCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = DeltaSchedule { delta_in: 0.5, rate: 1.0 };
    let times: Vec<f64> = (0..13).map(|i| i as f64 * 0.025).collect();
    let d = g.dim();

    // product constants at the levels the statements use
    let k_at = |level: f64| -> Result<f64> {
        Ok(K_SAFETY * estimate_product_constant(level, level, g, 48, seed ^ 0x9e37)?)
    };
    let k_half = k_at(m + 0.5)?;
    let k_three_half = k_at(m + 1.5)?;
    let k_one = k_at(m + 1.0)?;
    let k_mixed =
        K_SAFETY * estimate_product_constant(m + 0.5, m, g, 48, seed ^ 0x51f3)?;

    let mut out = Vec::new();
    let mut run = |label: &str,
                   eval: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<(f64, f64)>|
     -> Result<()> {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let (lhs, rhs) = eval(&mut rng)?;
            if rhs > 0.0 {
                worst = worst.max(lhs / rhs);
            }
        }
        out.push(InequalityCheck { label: label.into(), trials, worst_ratio: worst });
        Ok(())
    };

    // (2.2): F = F1 . F2, scalar product of vector fields
    run("product_l2_time", &mut |rng| {
        let f1 = random_series(rng, &times, d, g);
        let f2 = random_series(rng, &times, d, g);
        let prod: Vec<GridField> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| dealiased_dot(a, b, g))
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&prod, g)?, &times, m + 0.5, sched, g)?;
        let rhs = k_half
            * sup_time_norm(&spectra_of(&f1, g)?, &times, m + 0.5, sched, g)?
            * l2_time_norm(&spectra_of(&f2, g)?, &times, m + 1.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.3): F = (F1 . grad) F2, advective product, sup x L2 pairing
    run("advection_sup_l2", &mut |rng| {
        let f1 = random_series(rng, &times, d, g);
        let f2 = random_series(rng, &times, d, g);
        let adv: Vec<GridField> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| advect_fields(a, b, g))
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&adv, g)?, &times, m + 0.5, sched, g)?;
        let rhs = k_half
            * sup_time_norm(&spectra_of(&f1, g)?, &times, m + 0.5, sched, g)?
            * l2_time_norm(&spectra_of(&f2, g)?, &times, m + 1.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.4): same advective product, L2 x sup pairing
    run("advection_l2_sup", &mut |rng| {
        let f1 = random_series(rng, &times, d, g);
        let f2 = random_series(rng, &times, d, g);
        let adv: Vec<GridField> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| advect_fields(a, b, g))
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&adv, g)?, &times, m + 0.5, sched, g)?;
        let rhs = k_half
            * l2_time_norm(&spectra_of(&f1, g)?, &times, m + 0.5, sched, g)?
            * sup_time_norm(&spectra_of(&f2, g)?, &times, m + 1.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.5): F = theta Re F1; 2|theta| sup bound (T <= 4 makes it valid)
    run("real_part_bound", &mut |rng| {
        let theta = -1.5 + 3.0 * rng.random::<f64>();
        let f1 = random_series(rng, &times, 1, g);
        let re: Vec<GridField> =
            f1.iter().map(|f| f.real_part().scale(Complex64::new(theta, 0.0))).collect();
        let lhs = l2_time_norm(&spectra_of(&re, g)?, &times, m + 0.5, sched, g)?;
        let rhs = 2.0
            * theta.abs()
            * sup_time_norm(&spectra_of(&f1, g)?, &times, m + 0.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.6): F = grad (F1 . F2) at level m + 1/2
    run("grad_product_high", &mut |rng| {
        let f1 = random_series(rng, &times, d, g);
        let f2 = random_series(rng, &times, d, g);
        let gp: Vec<GridField> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| {
                let dot = dealiased_dot(a, b, g)?;
                spectral_derivative(&dot, DerivativeKind::Grad, g)
            })
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&gp, g)?, &times, m + 0.5, sched, g)?;
        let rhs = k_three_half
            * sup_time_norm(&spectra_of(&f1, g)?, &times, m + 1.5, sched, g)?
            * l2_time_norm(&spectra_of(&f2, g)?, &times, m + 1.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.7): G = grad (G1 . G2) at level m - 1/2
    run("grad_product_low", &mut |rng| {
        let f1 = random_series(rng, &times, d, g);
        let f2 = random_series(rng, &times, d, g);
        let gp: Vec<GridField> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| {
                let dot = dealiased_dot(a, b, g)?;
                spectral_derivative(&dot, DerivativeKind::Grad, g)
            })
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&gp, g)?, &times, m - 0.5, sched, g)?;
        let rhs = k_half
            * sup_time_norm(&spectra_of(&f1, g)?, &times, m + 0.5, sched, g)?
            * l2_time_norm(&spectra_of(&f2, g)?, &times, m + 0.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.8): G = theta D G1, exact multiplier bound, no K
    run("free_operator_bound", &mut |rng| {
        let theta = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let f1 = random_series(rng, &times, d, g);
        let dg: Vec<GridField> = f1
            .iter()
            .map(|f| {
                Ok(spectral_derivative(f, DerivativeKind::GradDiv, g)?.scale(theta))
            })
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&dg, g)?, &times, m - 0.5, sched, g)?;
        let rhs = theta.norm() * l2_time_norm(&spectra_of(&f1, g)?, &times, m + 1.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.9): G = theta grad (G1 . G1), mixed-level constant
    run("grad_square_mixed", &mut |rng| {
        let theta = Complex64::new(0.0, rng.random::<f64>() - 0.5);
        let f1 = random_series(rng, &times, d, g);
        let gs: Vec<GridField> = f1
            .iter()
            .map(|f| {
                let dot = dealiased_dot(f, f, g)?;
                Ok(spectral_derivative(&dot, DerivativeKind::Grad, g)?.scale(theta))
            })
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&gs, g)?, &times, m - 0.5, sched, g)?;
        let rhs = theta.norm()
            * k_mixed
            * sup_time_norm(&spectra_of(&f1, g)?, &times, m, sched, g)?
            * l2_time_norm(&spectra_of(&f1, g)?, &times, m + 0.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.10): G = G1 . G2 at level m - 1/2, level-(m+1) pairing
    run("product_low_high_levels", &mut |rng| {
        let f1 = random_series(rng, &times, d, g);
        let f2 = random_series(rng, &times, d, g);
        let prod: Vec<GridField> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| dealiased_dot(a, b, g))
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&prod, g)?, &times, m - 0.5, sched, g)?;
        let rhs = k_one
            * sup_time_norm(&spectra_of(&f1, g)?, &times, m + 1.0, sched, g)?
            * l2_time_norm(&spectra_of(&f2, g)?, &times, m + 1.0, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.10'): alternative pairing at level m + 1/2
    run("product_low_half_levels", &mut |rng| {
        let f1 = random_series(rng, &times, d, g);
        let f2 = random_series(rng, &times, d, g);
        let prod: Vec<GridField> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| dealiased_dot(a, b, g))
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&prod, g)?, &times, m - 0.5, sched, g)?;
        let rhs = k_half
            * sup_time_norm(&spectra_of(&f1, g)?, &times, m + 0.5, sched, g)?
            * l2_time_norm(&spectra_of(&f2, g)?, &times, m + 0.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    // (2.11): G = theta div G1, exact multiplier bound
    run("divergence_bound", &mut |rng| {
        let theta = Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let f1 = random_series(rng, &times, d, g);
        let dv: Vec<GridField> = f1
            .iter()
            .map(|f| Ok(spectral_derivative(f, DerivativeKind::Div, g)?.scale(theta)))
            .collect::<Result<_>>()?;
        let lhs = l2_time_norm(&spectra_of(&dv, g)?, &times, m - 0.5, sched, g)?;
        let rhs = theta.norm() * l2_time_norm(&spectra_of(&f1, g)?, &times, m + 0.5, sched, g)?;
        Ok((lhs, rhs))
    })?;

    Ok(out)
}

/// (a . grad) b with dealiased products, for the advective inequalities.
fn advect_fields(a: &GridField, b: &GridField, g: &SpectralGrid) -> Result<GridField> {
    let d = g.dim();
    let mut out = GridField::zeros(g, d, a.real && b.real);
    for j in 0..d {
        let bj = GridField { data: b.component(j, g).to_vec(), components: 1, real: b.real };
        let grad_bj = spectral_derivative(&bj, DerivativeKind::Grad, g)?;
        for i in 0..d {
            let ai = GridField { data: a.component(i, g).to_vec(), components: 1, real: a.real };
            let gi =
                GridField { data: grad_bj.component(i, g).to_vec(), components: 1, real: false };
            let term = dealiased_product(&ai, &gi, g)?;
            let dst = out.component_mut(j, g);
            for (o, v) in dst.iter_mut().zip(&term.data) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Norm-identity check: max over random fields and (ell, delta) pairs of the
/// relative defect in ||f||_{ell+1}^2 = ||f||_{ell}^2 + sum ||d_a f||_{ell}^2.
pub fn verify_derivative_decomposition(
    g: &SpectralGrid,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let decay = 0.3 + 0.4 * rng.random::<f64>();
        let f = random_band_limited(&mut rng, g, 1, false, decay);
        for &ell in &[0.0, 1.0, 2.0, 3.0] {
            for &delta in &[0.0, 0.25, 0.5] {
                let w = WeightParams::new(ell, delta)?;
                let w1 = WeightParams::new(ell + 1.0, delta)?;
                let lhs = analytic_norm(&f, &w1, g)?.powi(2);
                let grad = spectral_derivative(&f, DerivativeKind::Grad, g)?;
                let rhs = analytic_norm(&f, &w, g)?.powi(2) + analytic_norm(&grad, &w, g)?.powi(2);
                if lhs > 0.0 {
                    worst = worst.max((lhs - rhs).abs() / lhs);
                }
            }
        }
    }
    Ok(worst)
}

/// Semigroup isometry and group-law defect: max relative deviation across
/// weights, split times and random fields.
pub fn verify_semigroup_isometry(g: &SpectralGrid, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let f = random_band_limited(&mut rng, g, 1, false, 0.4);
        let s = forward_transform(&f, g)?;
        let eps = rng.random::<f64>();
        let tau = 0.5 * rng.random::<f64>();
        let adv = crate::scheme::schrodinger_semigroup(&s, tau, eps, g);
        for &ell in &[0.0, 1.0, 2.0, 3.0] {
            for &delta in &[0.0, 0.25, 0.5] {
                let w = WeightParams::new(ell, delta)?;
                let before = analytic_norm_spectrum(&s, &w, g);
                let after = analytic_norm_spectrum(&adv, &w, g);
                if before > 0.0 {
                    worst = worst.max((before - after).abs() / before);
                }
            }
        }
        // group law in the max norm
        let t1 = 0.3 * rng.random::<f64>();
        let t2 = 0.3 * rng.random::<f64>();
        let two = crate::scheme::schrodinger_semigroup(
            &crate::scheme::schrodinger_semigroup(&s, t1, eps, g),
            t2,
            eps,
            g,
        );
        let one = crate::scheme::schrodinger_semigroup(&s, t1 + t2, eps, g);
        let scale = s.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if scale > 0.0 {
            let dev = two
                .data
                .iter()
                .zip(&one.data)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            worst = worst.max(dev / scale);
        }
    }
    Ok(worst)
}

/// Radius-shrink derivative check: slope of the centered-difference defect of
/// d/dt ||f||^2_{ell, delta(t)} against -2 M ||f||^2_{ell+1/2, delta(t)} under
/// step halving; second-order for frozen fields.
pub fn radius_derivative_slope(g: &SpectralGrid, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = random_band_limited(&mut rng, g, 1, false, 0.35);
    let s = forward_transform(&f, g)?;
    let m = 1.3;
    let delta_in = 0.5;
    let ell = 1.5;
    let t0 = 0.12;
    let norm_sq_at = |t: f64| -> Result<f64> {
        let w = WeightParams::new(ell, delta_in - m * t)?;
        Ok(analytic_norm_spectrum(&s, &w, g).powi(2))
    };
    let w_half = WeightParams::new(ell + 0.5, delta_in - m * t0)?;
    let exact = -2.0 * m * analytic_norm_spectrum(&s, &w_half, g).powi(2);
    let mut errors = Vec::new();
    let mut dts = Vec::new();
    for k in 0..5 {
        let h = 0.02 / 2f64.powi(k);
        let fd = (norm_sq_at(t0 + h)? - norm_sq_at(t0 - h)?) / (2.0 * h);
        errors.push((fd - exact).abs());
        dts.push(h);
    }
    let (slope, _, _) = crate::experiments::fit_rate(
        &dts.iter().cloned().zip(errors.iter().cloned()).collect::<Vec<_>>(),
    )?;
    Ok(slope)
}

/// Calibrated sup-norm control: first pass estimates C, second pass verifies
/// ||f||_inf <= C ||f||_{ell, delta} on fresh samples. Returns (C, worst ratio).
pub fn verify_sup_norm_control(
    g: &SpectralGrid,
    ell: f64,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = WeightParams::new(ell, 0.0)?;
    let mut c_cal: f64 = 0.0;
    for _ in 0..trials.max(8) {
        let decay = 0.2 + 0.6 * rng.random::<f64>();
        let f = random_band_limited(&mut rng, g, 1, false, decay);
        let n = analytic_norm(&f, &w, g)?;
        if n > 0.0 {
            c_cal = c_cal.max(f.max_abs() / n);
        }
    }
    let c = 1.2 * c_cal;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let decay = 0.2 + 0.6 * rng.random::<f64>();
        let f = random_band_limited(&mut rng, g, 1, false, decay);
        for &delta in &[0.0, 0.25, 0.5] {
            let wd = WeightParams::new(ell, delta)?;
            let n = analytic_norm(&f, &wd, g)?;
            if n > 0.0 {
                worst = worst.max(f.max_abs() / (c * n));
            }
        }
    }
    Ok((c, worst))
}
