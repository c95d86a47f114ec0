//! The controlled lake: parameters, recycling curves, the state-control
//! vector field and the maximized Hamiltonian.
//!
//! The phosphorus stock `x` evolves as
//!
//! ```text
//! dx = (u - b x + r(x)) dt + sigma x dW
//! ```
//!
//! and the manager maximizes the discounted benefit `E ∫ e^{-rho t} (ln u - c x²) dt`.
//! Along candidate optimal paths the loading `u` and the costate `p` are tied by
//! `u = -1/p`, which turns the Pontryagin system into the `(x, u)` system
//! implemented by [`drift`] and [`costate_dynamics`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LakeError, Result};

/// Economic and ecological parameters `(b, c, rho, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LakeParams {
    /// Loss rate of phosphorus (sedimentation, outflow).
    pub b: f64,
    /// Weight of the pollution cost `c x²`.
    pub c: f64,
    /// Discount rate.
    pub rho: f64,
    /// Multiplicative noise intensity.
    pub sigma: f64,
}

impl LakeParams {
    pub fn new(b: f64, c: f64, rho: f64, sigma: f64) -> Result<Self> {
        let p = LakeParams { b, c, rho, sigma };
        p.validate()?;
        Ok(p)
    }

    /// The bistable parameter set `(0.65, 0.512, 0.03)` with the given noise.
    pub fn reference(sigma: f64) -> Self {
        LakeParams {
            b: 0.65,
            c: 0.512,
            rho: 0.03,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.b, self.c, self.rho, self.sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(LakeError::InvalidParams("non-finite parameter".into()));
        }
        if self.b <= 0.0 || self.c <= 0.0 || self.rho <= 0.0 {
            return Err(LakeError::InvalidParams(format!(
                "b, c and rho must be positive (b={}, c={}, rho={})",
                self.b, self.c, self.rho
            )));
        }
        if self.sigma < 0.0 {
            return Err(LakeError::InvalidParams(format!(
                "sigma must be nonnegative (sigma={})",
                self.sigma
            )));
        }
        if self.sigma * self.sigma >= self.rho + 2.0 * self.b {
            return Err(LakeError::InvalidParams(format!(
                "sigma² = {} must stay below rho + 2b = {}",
                self.sigma * self.sigma,
                self.rho + 2.0 * self.b
            )));
        }
        Ok(())
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        LakeParams::new(self.b, self.c, self.rho, sigma)
    }

    /// Noise level of the additive-noise form of the log process, `sigma²/2`.
    pub fn epsilon(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }

    /// Far-field coefficient `A_sigma = c / (rho + 2b - sigma²)` of `V(x) ~ -A x²`.
    pub fn far_field_coefficient(&self) -> f64 {
        self.c / (self.rho + 2.0 * self.b - self.sigma * self.sigma)
    }
}

/// Evaluation contract for a recycling curve `r`.
///
/// `curvature` may return `None`; the wrapper then substitutes a centered
/// finite difference of `slope` and flags the curve.
pub trait Recycling: Send + Sync + fmt::Debug {
    /// Identifier that distinguishes the curve and its parameters (used in cache keys).
    fn name(&self) -> String;
    fn value(&self, x: f64) -> f64;
    fn slope(&self, x: f64) -> f64;
    fn curvature(&self, _x: f64) -> Option<f64> {
        None
    }
    /// `a = lim r(x)` as `x → ∞`.
    fn asymptote(&self) -> f64;
}

/// Generalized Hill curve `x^q / (1 + x^q)` with `q >= 2`; `q = 2` is the classical choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hill {
    pub exponent: f64,
}

impl Recycling for Hill {
    fn name(&self) -> String {
        if self.exponent == 2.0 {
            "hill".to_string()
        } else {
            format!("hill-{}", self.exponent)
        }
    }

    fn value(&self, x: f64) -> f64 {
        if self.exponent == 2.0 {
            let x2 = x * x;
            return x2 / (1.0 + x2);
        }
        let xq = x.powf(self.exponent);
        xq / (1.0 + xq)
    }

    fn slope(&self, x: f64) -> f64 {
        if self.exponent == 2.0 {
            let d = 1.0 + x * x;
            return 2.0 * x / (d * d);
        }
        if x == 0.0 {
            return 0.0;
        }
        let q = self.exponent;
        let xq = x.powf(q);
        let d = 1.0 + xq;
        q * xq / (x * d * d)
    }

    fn curvature(&self, x: f64) -> Option<f64> {
        if self.exponent == 2.0 {
            let x2 = x * x;
            let d = 1.0 + x2;
            return Some(2.0 * (1.0 - 3.0 * x2) / (d * d * d));
        }
        if x == 0.0 {
            return Some(0.0);
        }
        let q = self.exponent;
        let xq = x.powf(q);
        let d = 1.0 + xq;
        Some(q * xq * ((q - 1.0) - (q + 1.0) * xq) / (x * x * d * d * d))
    }

    fn asymptote(&self) -> f64 {
        1.0
    }
}

/// Findings of the registration audit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveAudit {
    /// Hard violations; registration fails when non-empty.
    pub violations: Vec<String>,
    /// `(a - r(x)) x` at the largest audit point, estimating the tail constant `C`.
    pub tail_constant: f64,
    /// Whether `r''` is a finite-difference substitute.
    pub curvature_estimated: bool,
}

/// A validated, shareable recycling curve.
#[derive(Clone)]
pub struct RecyclingCurve {
    inner: Arc<dyn Recycling>,
    name: String,
    curvature_estimated: bool,
    audit: CurveAudit,
}

impl fmt::Debug for RecyclingCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RecyclingCurve")
            .field("name", &self.name())
            .field("asymptote", &self.asymptote())
            .field("curvature_estimated", &self.curvature_estimated)
            .finish()
    }
}

const FD_CURVATURE_STEP: f64 = 1e-5;

/// Audit grid: `0` plus 61 log-spaced points from `1e-3` to `1e3`.
pub fn audit_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..=60).map(|k| 10f64.powf(-3.0 + k as f64 * 0.1)))
        .collect()
}

impl RecyclingCurve {
    /// Validates `curve` on the audit grid and wraps it.
    pub fn register(curve: impl Recycling + 'static) -> Result<Self> {
        let curvature_estimated = curve.curvature(1.0).is_none();
        let mut wrapped = RecyclingCurve {
            name: curve.name(),
            inner: Arc::new(curve),
            curvature_estimated,
            audit: CurveAudit::default(),
        };
        let audit = wrapped.run_audit();
        if !audit.violations.is_empty() {
            return Err(LakeError::CurveAudit {
                name: wrapped.name().to_string(),
                reasons: audit.violations,
            });
        }
        if curvature_estimated {
            log::warn!(
                "curve `{}` provides no second derivative; using finite differences",
                wrapped.name()
            );
        }
        wrapped.audit = audit;
        Ok(wrapped)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn r(&self, x: f64) -> f64 {
        self.inner.value(x)
    }

    #[inline]
    pub fn dr(&self, x: f64) -> f64 {
        self.inner.slope(x)
    }

    #[inline]
    pub fn d2r(&self, x: f64) -> f64 {
        match self.inner.curvature(x) {
            Some(v) => v,
            None => {
                let h = FD_CURVATURE_STEP;
                let lo = (x - h).max(0.0);
                (self.inner.slope(x + h) - self.inner.slope(lo)) / (x + h - lo)
            }
        }
    }

    pub fn asymptote(&self) -> f64 {
        self.inner.asymptote()
    }

    pub fn curvature_estimated(&self) -> bool {
        self.curvature_estimated
    }

    pub fn audit(&self) -> &CurveAudit {
        &self.audit
    }

    fn run_audit(&self) -> CurveAudit {
        let mut violations = Vec::new();
        let a = self.asymptote();
        if !a.is_finite() {
            violations.push("asymptote is not finite".into());
        }
        if self.r(0.0).abs() > 1e-14 {
            violations.push(format!("r(0) = {} is not zero", self.r(0.0)));
        }
        let grid = audit_grid();
        for &x in &grid {
            let r = self.r(x);
            let dr = self.dr(x);
            if !r.is_finite() || !dr.is_finite() {
                violations.push(format!("non-finite evaluation at x = {x}"));
                continue;
            }
            if dr < -1e-14 {
                violations.push(format!("r'({x}) = {dr} is negative"));
            }
            if r > a * (1.0 + 1e-12) {
                violations.push(format!("r({x}) = {r} exceeds the asymptote {a}"));
            }
            if x > 0.0 {
                let h = 1e-5 * x.max(1.0);
                let lo = (x - h).max(0.0);
                let fd = (self.r(x + h) - self.r(lo)) / (x + h - lo);
                if (fd - dr).abs() > 1e-6 * dr.abs() + 1e-10 {
                    violations.push(format!(
                        "gradient check failed for r' at x = {x}: fd {fd} vs {dr}"
                    ));
                }
                if !self.curvature_estimated {
                    let fd2 = (self.dr(x + h) - self.dr(lo)) / (x + h - lo);
                    let d2 = self.d2r(x);
                    if (fd2 - d2).abs() > 1e-6 * d2.abs() + 1e-10 {
                        violations.push(format!(
                            "gradient check failed for r'' at x = {x}: fd {fd2} vs {d2}"
                        ));
                    }
                }
            }
        }
        let x_far = *grid.last().unwrap_or(&1e3);
        if self.dr(x_far).abs() > 1e-3 {
            violations.push(format!("r'({x_far}) = {} does not decay", self.dr(x_far)));
        }
        CurveAudit {
            violations,
            tail_constant: (a - self.r(x_far)) * x_far,
            curvature_estimated: self.curvature_estimated,
        }
    }

    /// Points of the audit grid in `(0, 0.1]` where `r(x) > (b + rho) x`.
    ///
    /// These are reported rather than rejected: the requirement only holds
    /// "close to zero" and the neighbourhood is not quantified.
    pub fn near_origin_violations(&self, params: &LakeParams) -> Vec<f64> {
        audit_grid()
            .into_iter()
            .filter(|&x| x > 0.0 && x <= 0.1)
            .filter(|&x| self.r(x) > (params.b + params.rho) * x)
            .collect()
    }
}

/// The classical recycling curve `x² / (1 + x²)`.
pub fn hill_curve() -> RecyclingCurve {
    hill_curve_with_exponent(2.0).expect("the quadratic Hill curve passes its audit")
}

pub fn hill_curve_with_exponent(exponent: f64) -> Result<RecyclingCurve> {
    if !(exponent >= 2.0) {
        return Err(LakeError::InvalidParams(format!(
            "Hill exponent must be at least 2 (got {exponent})"
        )));
    }
    RecyclingCurve::register(Hill { exponent })
}

/// A point `(x, u)` of the state-control plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: f64,
    pub u: f64,
}

impl PhasePoint {
    pub fn new(x: f64, u: f64) -> Result<Self> {
        check_state(x, u)?;
        Ok(PhasePoint { x, u })
    }

    /// Costate `p = -1/u` associated with the loading.
    pub fn costate(&self) -> f64 {
        -1.0 / self.u
    }
}

fn check_state(x: f64, u: f64) -> Result<()> {
    if !(x >= 0.0) || !(u > 0.0) {
        return Err(LakeError::Domain(format!(
            "state requires x >= 0 and u > 0 (x={x}, u={u})"
        )));
    }
    Ok(())
}

/// `f(u, x) = u - b x + r(x)`.
pub fn drift(params: &LakeParams, curve: &RecyclingCurve, x: f64, u: f64) -> Result<f64> {
    check_state(x, u)?;
    Ok(drift_unchecked(params, curve, x, u))
}

#[inline]
pub(crate) fn drift_unchecked(params: &LakeParams, curve: &RecyclingCurve, x: f64, u: f64) -> f64 {
    u - params.b * x + curve.r(x)
}

/// `g(u, x) = -(rho + b - r'(x)) u + 2 c x u²`.
pub fn costate_dynamics(
    params: &LakeParams,
    curve: &RecyclingCurve,
    x: f64,
    u: f64,
) -> Result<f64> {
    check_state(x, u)?;
    Ok(costate_dynamics_unchecked(params, curve, x, u))
}

#[inline]
pub(crate) fn costate_dynamics_unchecked(
    params: &LakeParams,
    curve: &RecyclingCurve,
    x: f64,
    u: f64,
) -> f64 {
    let decay = params.rho + params.b - curve.dr(x);
    if x == 0.0 {
        return -decay * u;
    }
    2.0 * params.c * x * u * (u - decay / (2.0 * params.c * x))
}

/// Positive root `g₁(x) = (rho + b - r'(x)) / (2 c x)` of `u ↦ g(u, x)`.
pub fn costate_nullcline(params: &LakeParams, curve: &RecyclingCurve, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(LakeError::Domain(format!("nullcline needs x > 0 (x={x})")));
    }
    Ok((params.rho + params.b - curve.dr(x)) / (2.0 * params.c * x))
}

/// Maximized Hamiltonian `sup_u {(u - b x + r(x)) p + ln u} - c x²`.
///
/// For `p < 0` the supremum is attained at `u = -1/p`. A nonnegative costate
/// has an infinite supremum and is rejected.
pub fn hamiltonian(params: &LakeParams, curve: &RecyclingCurve, x: f64, p: f64) -> Result<f64> {
    if !(p < 0.0) {
        return Err(LakeError::Domain(format!(
            "Hamiltonian needs a negative costate (p={p})"
        )));
    }
    if !(x >= 0.0) {
        return Err(LakeError::Domain(format!(
            "Hamiltonian needs x >= 0 (x={x})"
        )));
    }
    Ok(hamiltonian_unchecked(params, curve, x, p))
}

#[inline]
pub(crate) fn hamiltonian_unchecked(
    params: &LakeParams,
    curve: &RecyclingCurve,
    x: f64,
    p: f64,
) -> f64 {
    (curve.r(x) - params.b * x) * p - (-p).ln() - 1.0 - params.c * x * x
}

/// Hamiltonian of the log-transformed problem `y = ln x`, including the Itô
/// correction `-sigma²/2 · p`.
pub fn log_hamiltonian(params: &LakeParams, curve: &RecyclingCurve, y: f64, p: f64) -> Result<f64> {
    if !(p < 0.0) {
        return Err(LakeError::Domain(format!(
            "log Hamiltonian needs a negative costate (p={p})"
        )));
    }
    let x = y.exp();
    Ok((curve.r(x) / x - params.b - params.epsilon()) * p - (-p).ln() + y - 1.0 - params.c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference() -> (LakeParams, RecyclingCurve) {
        (LakeParams::reference(0.0), hill_curve())
    }

    #[test]
    fn hill_values() {
        let r = hill_curve();
        assert_eq!(r.r(0.0), 0.0);
        assert_eq!(r.r(1.0), 0.5);
        assert_eq!(r.dr(1.0), 0.5);
        assert_eq!(r.asymptote(), 1.0);
        let x = 1e3;
        assert!((r.asymptote() - r.r(x)) * x <= 1.1e-3);
        assert!(!r.curvature_estimated());
    }

    #[test]
    fn generalized_hill_matches_quadratic_formulas() {
        // Force the generic branch by nudging the exponent.
        let generic = Hill {
            exponent: 2.0 + 1e-13,
        };
        let exact = Hill { exponent: 2.0 };
        for &x in &[0.1, 0.7, 1.3, 4.0] {
            assert_relative_eq!(generic.value(x), exact.value(x), max_relative = 1e-10);
            assert_relative_eq!(generic.slope(x), exact.slope(x), max_relative = 1e-10);
            assert_relative_eq!(
                generic.curvature(x).unwrap(),
                exact.curvature(x).unwrap(),
                max_relative = 1e-9
            );
        }
        assert!(hill_curve_with_exponent(3.0).is_ok());
        assert!(hill_curve_with_exponent(1.5).is_err());
    }

    #[derive(Debug)]
    struct NoCurvature;
    impl Recycling for NoCurvature {
        fn name(&self) -> String {
            "hill-no-curvature".into()
        }
        fn value(&self, x: f64) -> f64 {
            x * x / (1.0 + x * x)
        }
        fn slope(&self, x: f64) -> f64 {
            2.0 * x / (1.0 + x * x).powi(2)
        }
        fn asymptote(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn missing_curvature_is_substituted_and_flagged() {
        let curve = RecyclingCurve::register(NoCurvature).unwrap();
        assert!(curve.curvature_estimated());
        let exact = hill_curve();
        for &x in &[0.2, 0.9, 2.5] {
            assert!((curve.d2r(x) - exact.d2r(x)).abs() < 1e-8);
        }
    }

    #[derive(Debug)]
    struct Decreasing;
    impl Recycling for Decreasing {
        fn name(&self) -> String {
            "bad".into()
        }
        fn value(&self, x: f64) -> f64 {
            -x / (1.0 + x)
        }
        fn slope(&self, x: f64) -> f64 {
            -1.0 / (1.0 + x).powi(2)
        }
        fn asymptote(&self) -> f64 {
            -1.0
        }
    }

    #[test]
    fn audit_rejects_decreasing_curve() {
        let err = RecyclingCurve::register(Decreasing).unwrap_err();
        assert!(matches!(err, LakeError::CurveAudit { .. }));
    }

    #[test]
    fn near_origin_condition_holds_for_hill() {
        let (p, r) = reference();
        assert!(r.near_origin_violations(&p).is_empty());
    }

    #[test]
    fn params_validation() {
        assert!(LakeParams::new(0.65, 0.512, 0.03, 0.1).is_ok());
        assert!(LakeParams::new(-0.65, 0.512, 0.03, 0.1).is_err());
        assert!(LakeParams::new(0.65, 0.0, 0.03, 0.1).is_err());
        assert!(LakeParams::new(0.65, 0.512, 0.03, -0.1).is_err());
        // sigma² must stay below rho + 2b = 1.33
        assert!(LakeParams::new(0.65, 0.512, 0.03, 1.2).is_err());
        assert!(LakeParams::new(f64::NAN, 0.512, 0.03, 0.1).is_err());
    }

    #[test]
    fn drift_examples() {
        let (p, r) = reference();
        assert_eq!(drift(&p, &r, 0.0, 0.3).unwrap(), 0.3);
        assert!(drift(&p, &r, 1.0, 0.15).unwrap().abs() < 1e-15);
        assert!(drift(&p, &r, -1.0, 0.15).is_err());
        assert!(drift(&p, &r, 1.0, 0.0).is_err());
    }

    #[test]
    fn costate_examples() {
        let (p, r) = reference();
        assert_relative_eq!(
            costate_dynamics(&p, &r, 0.0, 1.0).unwrap(),
            -0.68,
            epsilon = 1e-15
        );
        let x = 0.8;
        let g1 = costate_nullcline(&p, &r, x).unwrap();
        assert!(costate_dynamics(&p, &r, x, g1 * (1.0 + 1e-6)).unwrap() > 0.0);
        assert!(costate_dynamics(&p, &r, x, g1 * (1.0 - 1e-6)).unwrap() < 0.0);
        // factored form agrees with the expanded one
        let u = 0.3;
        let expanded = -(p.rho + p.b - r.dr(x)) * u + 2.0 * p.c * x * u * u;
        assert_relative_eq!(
            costate_dynamics(&p, &r, x, u).unwrap(),
            expanded,
            max_relative = 1e-13
        );
        assert!(costate_dynamics(&p, &r, x, -1.0).is_err());
    }

    #[test]
    fn hamiltonian_examples() {
        let (p, r) = reference();
        assert_eq!(hamiltonian(&p, &r, 0.0, -1.0).unwrap(), -1.0);
        let e = std::f64::consts::E;
        // sup_u (u p + ln u) = -1 - ln(-p)
        assert_relative_eq!(hamiltonian(&p, &r, 0.0, -e).unwrap(), -2.0, epsilon = 1e-14);
        assert!(hamiltonian(&p, &r, 0.0, 0.0).is_err());
        assert!(hamiltonian(&p, &r, 0.0, 0.5).is_err());
    }

    #[test]
    fn hamiltonian_matches_grid_search() {
        let (p, r) = reference();
        let (x, costate) = (1.0, -2.0);
        let n = 100_000;
        let (lo, hi) = (1e-4f64.ln(), 10f64.ln());
        let best = (0..n)
            .map(|k| (lo + (hi - lo) * k as f64 / (n - 1) as f64).exp())
            .map(|u| (u - p.b * x + r.r(x)) * costate + u.ln() - p.c * x * x)
            .fold(f64::NEG_INFINITY, f64::max);
        let closed = hamiltonian(&p, &r, x, costate).unwrap();
        assert!((closed - best).abs() <= 1e-6, "{closed} vs {best}");
    }

    #[test]
    fn log_hamiltonian_examples() {
        let (p, r) = reference();
        assert_relative_eq!(
            log_hamiltonian(&p, &r, 0.0, -1.0).unwrap(),
            -1.362,
            epsilon = 1e-14
        );
        let near = log_hamiltonian(&p, &r, 0.3, -1e-200).unwrap();
        assert!(near > 400.0);
        assert!(log_hamiltonian(&p, &r, 0.3, 0.0).is_err());
    }

    #[test]
    fn evaluators_are_deterministic() {
        let (p, r) = reference();
        let a = hamiltonian(&p, &r, 0.77, -3.1).unwrap();
        let b = hamiltonian(&p, &r, 0.77, -3.1).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let a = costate_dynamics(&p, &r, 0.77, 0.2).unwrap();
        let b = costate_dynamics(&p, &r, 0.77, 0.2).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hamiltonian_dominates_every_control(
                x in 0.0f64..5.0,
                p in -50.0f64..-1e-3,
                log_u in -9.0f64..5.0,
            ) {
                let (params, r) = reference();
                let u = log_u.exp();
                let h = hamiltonian(&params, &r, x, p).unwrap();
                let value = (u - params.b * x + r.r(x)) * p + u.ln() - params.c * x * x;
                prop_assert!(h >= value - 1e-9 * (1.0 + value.abs()));
            }

            #[test]
            fn log_hamiltonian_chain_rule(
                y in -4.0f64..3.0,
                p in -20.0f64..-1e-3,
                sigma in 0.0f64..0.8,
            ) {
                let params = LakeParams::reference(sigma);
                let r = hill_curve();
                let x = y.exp();
                let lhs = log_hamiltonian(&params, &r, y, p).unwrap();
                let rhs = hamiltonian(&params, &r, x, p / x).unwrap();
                let gap = lhs - rhs + params.epsilon() * p;
                prop_assert!(gap.abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }
}
