//! Inexact ADMM building blocks: penalty and proximity schedules, the
//! closed-form server update, the perturbed local subproblems and the dual
//! step.
//!
//! Every local subproblem has a Hessian that is a positive multiple of the
//! identity, so its constrained minimizer over a box is the coordinate-wise
//! clamp of the unconstrained minimizer.

use ndarray::Zip;

use crate::error::{Error, Result};
use crate::mechanisms::sample_gaussian_noise;
use crate::model::ParamMatrix;
use crate::rng::RngStream;

/// `rho_t = min(cap, c1 * 1.2^floor(t / period) + c2 / eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoSchedule {
    pub c1: f64,
    pub c2: f64,
    pub period: usize,
    pub cap: f64,
}

impl Default for RhoSchedule {
    fn default() -> Self {
        Self {
            c1: 2.0,
            c2: 5.0,
            period: 10_000,
            cap: 1e9,
        }
    }
}

impl RhoSchedule {
    /// A schedule that stays at `rho` for every iteration.
    pub fn constant(rho: f64) -> Self {
        Self {
            c1: rho,
            c2: 0.0,
            period: usize::MAX,
            cap: 1e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return Err(Error::config("rho.c1", "must be a finite value > 0"));
        }
        if !(self.c2 >= 0.0 && self.c2.is_finite()) {
            return Err(Error::config("rho.c2", "must be a finite value >= 0"));
        }
        if self.period == 0 {
            return Err(Error::config("rho.Tc", "must be a positive integer"));
        }
        if !(self.cap > 0.0) {
            return Err(Error::config("rho.cap", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub rho: RhoSchedule,
    /// Multiplies both `eta_t` and `delta_t`.
    pub prox_scale: f64,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            rho: RhoSchedule::default(),
            prox_scale: 1.0,
        }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        self.rho.validate()?;
        if !(self.prox_scale > 0.0 && self.prox_scale.is_finite()) {
            return Err(Error::config("prox.a", "must be a finite value > 0"));
        }
        Ok(())
    }
}

pub fn rho_schedule(t: usize, eps_bar: f64, sched: &RhoSchedule) -> f64 {
    let growth = 1.2f64.powi(i32::try_from(t / sched.period).unwrap_or(i32::MAX));
    (sched.c1 * growth + sched.c2 / eps_bar).min(sched.cap)
}

/// Proximal weight `eta_t = a / sqrt(t)`.
pub fn eta_schedule(t: usize, a: f64) -> f64 {
    a / (t as f64).sqrt()
}

/// Trust-region radius `delta_t = a / t^2`.
pub fn delta_schedule(t: usize, a: f64) -> f64 {
    a / (t as f64 * t as f64)
}

/// The feasible set `W`: a symmetric box `[-B, B]^{J x K}` or all of space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeasibleBox {
    Bounded(f64),
    /// Drops the compactness the convergence analysis relies on.
    Unbounded,
}

impl Default for FeasibleBox {
    fn default() -> Self {
        FeasibleBox::Bounded(100.0)
    }
}

impl FeasibleBox {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FeasibleBox::Bounded(b) if !(b > 0.0) || b.is_nan() => {
                Err(Error::config("box.B", "must be > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn bound(&self) -> f64 {
        match *self {
            FeasibleBox::Bounded(b) => b,
            FeasibleBox::Unbounded => f64::INFINITY,
        }
    }

    pub fn contains(&self, v: &ParamMatrix) -> bool {
        let b = self.bound();
        v.iter().all(|x| (-b..=b).contains(&x))
    }

    pub fn project(&self, v: &ParamMatrix) -> ParamMatrix {
        let b = self.bound();
        let mut out = v.clone();
        out.as_array_mut().mapv_inplace(|x| x.clamp(-b, b));
        out
    }
}

/// Coordinate-wise projection of `v` onto `[lo, hi]`.
pub fn project_box(v: &ParamMatrix, lo: &ParamMatrix, hi: &ParamMatrix) -> Result<ParamMatrix> {
    v.ensure_same_shape(lo)?;
    v.ensure_same_shape(hi)?;
    let mut out = v.clone();
    let mut bad = None;
    Zip::indexed(out.as_array_mut())
        .and(lo.as_array())
        .and(hi.as_array())
        .for_each(|idx, x, &l, &h| {
            if l > h {
                bad.get_or_insert(idx);
            } else {
                *x = x.max(l).min(h);
            }
        });
    match bad {
        Some(idx) => Err(Error::invalid(format!("empty box at coordinate {idx:?}"))),
        None => Ok(out),
    }
}

/// Server step: `w = (1/P) sum_p (z_p - lambda_p / rho)`.
pub fn w_update(
    z_list: &[ParamMatrix],
    lambda_list: &[ParamMatrix],
    rho: f64,
) -> Result<ParamMatrix> {
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be > 0, got {rho}")));
    }
    let first = z_list
        .first()
        .ok_or_else(|| Error::invalid("w-update needs at least one agent"))?;
    if lambda_list.len() != z_list.len() {
        return Err(Error::shape(
            format!("{} dual matrices", z_list.len()),
            lambda_list.len(),
        ));
    }
    let (j, k) = first.shape();
    let mut acc = ndarray::Array2::<f64>::zeros((j, k));
    for (z, lambda) in z_list.iter().zip(lambda_list) {
        z.ensure_same_shape(first)?;
        lambda.ensure_same_shape(first)?;
        acc += z.as_array();
        acc.scaled_add(-1.0 / rho, lambda.as_array());
    }
    acc /= z_list.len() as f64;
    Ok(ParamMatrix::from_array(acc))
}

/// Dual step: `lambda + rho (w_next - z_next)`.
pub fn dual_update(
    lambda: &ParamMatrix,
    w_next: &ParamMatrix,
    z_next: &ParamMatrix,
    rho: f64,
) -> Result<ParamMatrix> {
    lambda.ensure_same_shape(w_next)?;
    lambda.ensure_same_shape(z_next)?;
    let mut out = lambda.clone();
    Zip::from(out.as_array_mut())
        .and(w_next.as_array())
        .and(z_next.as_array())
        .for_each(|l, &w, &z| *l += rho * (w - z));
    Ok(out)
}

/// The data of one agent's local subproblem at iteration `t`.
#[derive(Debug, Clone, Copy)]
pub struct Subproblem<'a> {
    /// `z_p^t`, the agent's previous iterate.
    pub z_prev: &'a ParamMatrix,
    /// `w^{t+1}` from the server.
    pub w_next: &'a ParamMatrix,
    /// `lambda_p^t`.
    pub lambda: &'a ParamMatrix,
    /// `f_p'(z_p^t)`.
    pub grad: &'a ParamMatrix,
    pub rho: f64,
}

impl Subproblem<'_> {
    fn check(&self, xi: &ParamMatrix) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::invalid(format!("rho must be > 0, got {}", self.rho)));
        }
        for m in [self.w_next, self.lambda, self.grad, xi] {
            self.z_prev.ensure_same_shape(m)?;
        }
        Ok(())
    }

    /// The perturbed linearized objective
    /// `<grad, z> + (rho/2) ||w - z + (lambda - xi)/rho||^2`.
    pub fn linearized_objective(&self, xi: &ParamMatrix, z: &ParamMatrix) -> f64 {
        let mut linear = 0.0;
        let mut quad = 0.0;
        Zip::from(z.as_array())
            .and(self.grad.as_array())
            .and(self.w_next.as_array())
            .and(self.lambda.as_array())
            .and(xi.as_array())
            .for_each(|&z, &g, &w, &l, &x| {
                linear += g * z;
                let r = w - z + (l - x) / self.rho;
                quad += r * r;
            });
        linear + 0.5 * self.rho * quad
    }

    /// Linearized objective plus the proximal term `||z - z_prev||^2 / (2 eta)`.
    pub fn proximal_objective(&self, xi: &ParamMatrix, eta: f64, z: &ParamMatrix) -> f64 {
        let prox: f64 = Zip::from(z.as_array())
            .and(self.z_prev.as_array())
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        self.linearized_objective(xi, z) + prox / (2.0 * eta)
    }

    /// Gradient of the linearized objective at `z`:
    /// `grad - rho (w - z) - lambda + xi`.
    pub fn linearized_gradient(&self, xi: &ParamMatrix, z: &ParamMatrix) -> ParamMatrix {
        let mut out = z.clone();
        Zip::from(out.as_array_mut())
            .and(self.grad.as_array())
            .and(self.w_next.as_array())
            .and(self.lambda.as_array())
            .and(xi.as_array())
            .for_each(|z, &g, &w, &l, &x| *z = g - self.rho * (w - *z) - l + x);
        out
    }

    pub fn proximal_gradient(&self, xi: &ParamMatrix, eta: f64, z: &ParamMatrix) -> ParamMatrix {
        let mut out = self.linearized_gradient(xi, z);
        Zip::from(out.as_array_mut())
            .and(z.as_array())
            .and(self.z_prev.as_array())
            .for_each(|g, &a, &b| *g += (a - b) / eta);
        out
    }

    /// Feasible region of the trust-region subproblem:
    /// `[z_prev - delta, z_prev + delta]` intersected with `W`.
    pub fn trust_bounds(&self, delta: f64, feasible: &FeasibleBox) -> (ParamMatrix, ParamMatrix) {
        let b = feasible.bound();
        let mut lo = self.z_prev.clone();
        let mut hi = self.z_prev.clone();
        lo.as_array_mut().mapv_inplace(|z| (z - delta).max(-b));
        hi.as_array_mut().mapv_inplace(|z| (z + delta).min(b));
        (lo, hi)
    }
}

/// Proximal subproblem with objective perturbation:
/// `z* = (rho w + lambda - xi - grad + z_prev/eta) / (rho + 1/eta)`,
/// then projected onto `W`.
pub fn z_update_prox(
    sub: &Subproblem<'_>,
    xi: &ParamMatrix,
    eta: f64,
    feasible: &FeasibleBox,
) -> Result<ParamMatrix> {
    sub.check(xi)?;
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
    }
    let inv_eta = 1.0 / eta;
    let denom = sub.rho + inv_eta;
    let b = feasible.bound();
    let mut out = sub.z_prev.clone();
    Zip::from(out.as_array_mut())
        .and(sub.w_next.as_array())
        .and(sub.lambda.as_array())
        .and(xi.as_array())
        .and(sub.grad.as_array())
        .for_each(|z, &w, &l, &x, &g| {
            let unconstrained = (sub.rho * w + l - x - g + *z * inv_eta) / denom;
            *z = unconstrained.clamp(-b, b);
        });
    Ok(out)
}

/// Trust-region subproblem with objective perturbation (infinity-norm
/// region): `z* = w + (lambda - xi - grad)/rho`, clamped into
/// `[z_prev - delta, z_prev + delta]` intersected with `W`.
pub fn z_update_trust(
    sub: &Subproblem<'_>,
    xi: &ParamMatrix,
    delta: f64,
    feasible: &FeasibleBox,
) -> Result<ParamMatrix> {
    sub.check(xi)?;
    if !(delta >= 0.0) {
        return Err(Error::invalid(format!("delta must be >= 0, got {delta}")));
    }
    if !feasible.contains(sub.z_prev) {
        return Err(Error::invalid(
            "previous iterate lies outside the feasible box; trust region may be empty",
        ));
    }
    let (lo, hi) = sub.trust_bounds(delta, feasible);
    let mut out = sub.w_next.clone();
    Zip::from(out.as_array_mut())
        .and(sub.lambda.as_array())
        .and(xi.as_array())
        .and(sub.grad.as_array())
        .and(lo.as_array())
        .and(hi.as_array())
        .for_each(|z, &l, &x, &g, &lo, &hi| {
            *z = (*z + (l - x - g) / sub.rho).max(lo).min(hi);
        });
    Ok(out)
}

/// Output-perturbation baseline: the noiseless proximal step, plus
/// `N(0, sigma^2)` noise, projected onto `W`. Returns the new iterate and the
/// noise that was added.
pub fn z_update_outp(
    sub: &Subproblem<'_>,
    eta: f64,
    sigma: f64,
    feasible: &FeasibleBox,
    rng: &mut RngStream,
) -> Result<(ParamMatrix, ParamMatrix)> {
    let (j, k) = sub.z_prev.shape();
    let clean = z_update_prox(sub, &ParamMatrix::zeros(j, k), eta, feasible)?;
    let noise = sample_gaussian_noise((j, k), sigma, rng)?;
    let mut noisy = clean;
    *noisy.as_array_mut() += noise.as_array();
    Ok((feasible.project(&noisy), noise))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(values: &[f64]) -> ParamMatrix {
        ParamMatrix::from_vec(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn rho_examples() {
        let s = RhoSchedule::default();
        assert!((rho_schedule(1, 1.0, &s) - 7.0).abs() < 1e-12);
        assert!((rho_schedule(10_000, 1.0, &s) - 7.4).abs() < 1e-12);
        assert_eq!(rho_schedule(usize::MAX / 2, 1.0, &s), 1e9);
    }

    #[test]
    fn proximity_examples() {
        assert_eq!(eta_schedule(1, 1.0), 1.0);
        assert_eq!(eta_schedule(4, 1.0), 0.5);
        assert_eq!(eta_schedule(4, 100.0), 50.0);
        assert_eq!(delta_schedule(1, 1.0), 1.0);
        assert_eq!(delta_schedule(2, 1.0), 0.25);
        assert_eq!(delta_schedule(10, 1000.0), 10.0);
    }

    #[test]
    fn w_update_cases() {
        let v = m(&[1.0, -2.0]);
        let zero = m(&[0.0, 0.0]);
        let w = w_update(&[v.clone(), v.clone()], &[zero.clone(), zero.clone()], 3.0).unwrap();
        assert_eq!(w, v);

        let l = m(&[0.7, -4.0]);
        let neg = m(&[-0.7, 4.0]);
        let w = w_update(&[m(&[1.0, 1.0]), m(&[3.0, 0.0])], &[l, neg], 0.3).unwrap();
        assert!((w.get(0, 0) - 2.0).abs() < 1e-15 && (w.get(0, 1) - 0.5).abs() < 1e-15);

        assert!(w_update(std::slice::from_ref(&v), std::slice::from_ref(&zero), 0.0).is_err());
        assert!(w_update(&[v], &[], 1.0).is_err());
    }

    #[test]
    fn dual_update_cases() {
        let l = m(&[0.5, -0.5]);
        let w = m(&[1.0, 2.0]);
        assert_eq!(dual_update(&l, &w, &w, 10.0).unwrap(), l);
        let out = dual_update(&m(&[0.0, 0.0]), &m(&[2.0, 1.0]), &m(&[1.0, 0.0]), 2.0).unwrap();
        assert_eq!(out, m(&[2.0, 2.0]));
    }

    #[test]
    fn project_cases() {
        let lo = m(&[-1.0, -1.0]);
        let hi = m(&[1.0, 1.0]);
        let inside = m(&[0.3, -0.9]);
        assert_eq!(project_box(&inside, &lo, &hi).unwrap(), inside);
        let point = m(&[0.2, 0.2]);
        assert_eq!(
            project_box(&m(&[5.0, -5.0]), &point, &point).unwrap(),
            point
        );
        assert!(project_box(&inside, &hi, &lo).is_err());
    }

    #[test]
    fn prox_average_of_w_and_previous() {
        let z = m(&[2.0]);
        let zero = m(&[0.0]);
        let sub = Subproblem {
            z_prev: &z,
            w_next: &zero,
            lambda: &zero,
            grad: &zero,
            rho: 1.0,
        };
        let out = z_update_prox(&sub, &zero, 1.0, &FeasibleBox::Unbounded).unwrap();
        assert_eq!(out, m(&[1.0]));
        assert!(z_update_prox(&sub, &zero, 0.0, &FeasibleBox::Unbounded).is_err());
    }

    #[test]
    fn trust_degenerate_and_interior() {
        let z = m(&[0.5, -0.5]);
        let w = m(&[0.6, -0.3]);
        let zero = m(&[0.0, 0.0]);
        let g = m(&[3.0, -1.0]);
        let sub = Subproblem {
            z_prev: &z,
            w_next: &w,
            lambda: &zero,
            grad: &g,
            rho: 2.0,
        };
        let boxed = FeasibleBox::Bounded(1.0);
        assert_eq!(z_update_trust(&sub, &zero, 0.0, &boxed).unwrap(), z);

        let sub = Subproblem { grad: &zero, ..sub };
        assert_eq!(z_update_trust(&sub, &zero, 0.25, &boxed).unwrap(), w);
    }

    #[test]
    fn trust_rejects_infeasible_previous() {
        let z = m(&[5.0]);
        let zero = m(&[0.0]);
        let sub = Subproblem {
            z_prev: &z,
            w_next: &zero,
            lambda: &zero,
            grad: &zero,
            rho: 1.0,
        };
        assert!(z_update_trust(&sub, &zero, 1.0, &FeasibleBox::Bounded(1.0)).is_err());
    }

    #[test]
    fn outp_without_noise_is_prox() {
        let z = m(&[0.3, 0.1]);
        let w = m(&[-0.2, 0.4]);
        let l = m(&[0.05, 0.0]);
        let g = m(&[0.2, -0.1]);
        let sub = Subproblem {
            z_prev: &z,
            w_next: &w,
            lambda: &l,
            grad: &g,
            rho: 3.0,
        };
        let boxed = FeasibleBox::default();
        let prox = z_update_prox(&sub, &m(&[0.0, 0.0]), 0.5, &boxed).unwrap();
        let mut rng = RngStream::for_agent(0, 0, 1);
        let (outp, noise) = z_update_outp(&sub, 0.5, 0.0, &boxed, &mut rng).unwrap();
        assert_eq!(outp, prox);
        assert_eq!(noise, m(&[0.0, 0.0]));
    }
}
