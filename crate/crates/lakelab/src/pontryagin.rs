//! Deterministic problem: equilibria of the state-control system, stable
//! manifolds of its saddles and the candidate value function `J_P` assembled
//! from them, including Skiba (indifference) points.
//!
//! Along a saddle's stable manifold `dJ_P/dx = -1/u`, anchored at the
//! steady-state value `J_P(x₀) = (ln u₀ - c x₀²)/rho`. Where manifolds from
//! different saddles overlap, the candidate takes the pointwise larger value;
//! a crossing of the two values is a Skiba point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LakeError, Result};
use crate::model::{
    costate_dynamics_unchecked, drift_unchecked, LakeParams, PhasePoint, RecyclingCurve,
};
use crate::numerics::{bisect, hermite, hermite_slope};
use crate::ode::{Dopri5, Termination};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquilibriumKind {
    Saddle,
    /// Complex eigenvalue pair (a focus).
    Vortex,
    Node,
}

impl std::fmt::Display for EquilibriumKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EquilibriumKind::Saddle => "saddle",
            EquilibriumKind::Vortex => "vortex",
            EquilibriumKind::Node => "node",
        })
    }
}

/// A steady state of the state-control system together with its linearization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub point: PhasePoint,
    /// Row-major Jacobian of `(f, g)` with respect to `(x, u)`.
    pub jacobian: [[f64; 2]; 2],
    /// Real parts of the eigenvalues, ascending.
    pub eigenvalues: [f64; 2],
    /// Magnitude of the imaginary part (zero for real spectra).
    pub eigen_imag: f64,
    pub kind: EquilibriumKind,
    /// Slope `k = b - r'(x₀) + λ₋` of the stable eigenvector `(1, k)`; saddles only.
    pub stable_slope: Option<f64>,
}

impl Equilibrium {
    pub fn x(&self) -> f64 {
        self.point.x
    }

    pub fn u(&self) -> f64 {
        self.point.u
    }

    pub fn determinant(&self) -> f64 {
        let j = &self.jacobian;
        j[0][0] * j[1][1] - j[0][1] * j[1][0]
    }

    /// Steady-state benefit `(ln u₀ - c x₀²)/rho`.
    pub fn steady_value(&self, params: &LakeParams) -> f64 {
        (self.u().ln() - params.c * self.x() * self.x()) / params.rho
    }
}

/// `φ(x) = (b x - r(x)) - (b + rho - r'(x))/(2 c x)`; its roots are the equilibria.
pub fn equilibrium_function(params: &LakeParams, curve: &RecyclingCurve, x: f64) -> f64 {
    (params.b * x - curve.r(x)) - (params.b + params.rho - curve.dr(x)) / (2.0 * params.c * x)
}

/// `∂(f, g)/∂(x, u)` at a point of the plane.
pub fn jacobian(params: &LakeParams, curve: &RecyclingCurve, x: f64, u: f64) -> [[f64; 2]; 2] {
    let c = params.c;
    [
        [-params.b + curve.dr(x), 1.0],
        [
            curve.d2r(x) * u + 2.0 * c * u * u,
            -(params.b + params.rho - curve.dr(x)) + 4.0 * c * x * u,
        ],
    ]
}

/// Residuals of the two steady-state conditions.
pub fn steady_state_residuals(
    params: &LakeParams,
    curve: &RecyclingCurve,
    point: &PhasePoint,
) -> (f64, f64) {
    let (x, u) = (point.x, point.u);
    let r1 = u - (params.b * x - curve.r(x));
    let r2 = u - (params.b + params.rho - curve.dr(x)) / (2.0 * params.c * x);
    (r1, r2)
}

/// Linearizes the system at a steady state and classifies it.
pub fn classify(
    params: &LakeParams,
    curve: &RecyclingCurve,
    point: PhasePoint,
) -> Result<Equilibrium> {
    if !(point.x > 0.0) || !(point.u > 0.0) {
        return Err(LakeError::NotAnEquilibrium(format!(
            "equilibria need x > 0 and u > 0, got ({}, {})",
            point.x, point.u
        )));
    }
    let (r1, r2) = steady_state_residuals(params, curve, &point);
    if r1.abs() > 1e-8 || r2.abs() > 1e-8 {
        return Err(LakeError::NotAnEquilibrium(format!(
            "residuals ({r1:e}, {r2:e}) at ({}, {}) exceed 1e-8",
            point.x, point.u
        )));
    }
    let jac = jacobian(params, curve, point.x, point.u);
    let trace = jac[0][0] + jac[1][1];
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    let disc = 0.25 * trace * trace - det;
    let (eigenvalues, eigen_imag) = if disc >= 0.0 {
        let s = disc.sqrt();
        // avoid cancellation in the smaller-magnitude root
        let big = 0.5 * trace + s.copysign(trace);
        let other = if big != 0.0 { det / big } else { 0.0 };
        let mut ev = [big, other];
        if trace == 0.0 {
            ev = [-s, s];
        }
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (ev, 0.0)
    } else {
        ([0.5 * trace, 0.5 * trace], (-disc).sqrt())
    };
    let kind = if eigen_imag > 0.0 {
        EquilibriumKind::Vortex
    } else if det < 0.0 {
        EquilibriumKind::Saddle
    } else {
        EquilibriumKind::Node
    };
    let stable_slope = match kind {
        EquilibriumKind::Saddle => Some(params.b - curve.dr(point.x) + eigenvalues[0]),
        _ => None,
    };
    Ok(Equilibrium {
        point,
        jacobian: jac,
        eigenvalues,
        eigen_imag,
        kind,
        stable_slope,
    })
}

/// Outcome of the equilibrium search.
#[derive(Debug, Clone, Default)]
pub struct EquilibriumScan {
    /// Admissible equilibria sorted by `x₀`.
    pub equilibria: Vec<Equilibrium>,
    /// Roots of `φ` whose loading `u₀ = b x₀ - r(x₀)` is not positive.
    pub inadmissible: Vec<f64>,
}

impl EquilibriumScan {
    pub fn saddles(&self) -> impl Iterator<Item = &Equilibrium> {
        self.equilibria
            .iter()
            .filter(|e| e.kind == EquilibriumKind::Saddle)
    }
}

const SCAN_POINTS: usize = 20_000;

/// All steady states with `x₀ ∈ (0, x_max]`.
///
/// Sign scan of `φ` on a mixed log/linear grid followed by bisection to
/// machine precision.
pub fn find_equilibria(
    params: &LakeParams,
    curve: &RecyclingCurve,
    x_max: f64,
) -> Result<EquilibriumScan> {
    if !(x_max > 0.0) || !x_max.is_finite() {
        return Err(LakeError::Domain(format!(
            "x_max must be positive (got {x_max})"
        )));
    }
    let x_min = (1e-6f64).min(x_max * 1e-6);
    let log_part = SCAN_POINTS / 4;
    let mut grid: Vec<f64> = (0..log_part)
        .map(|k| x_min * (x_max / x_min).powf(k as f64 / log_part as f64 * 0.25))
        .collect();
    let start = *grid.last().unwrap();
    let lin = SCAN_POINTS - log_part;
    grid.extend((1..=lin).map(|k| start + (x_max - start) * k as f64 / lin as f64));

    let phi = |x: f64| equilibrium_function(params, curve, x);
    let mut scan = EquilibriumScan::default();
    let mut prev = (grid[0], phi(grid[0]));
    for &x in &grid[1..] {
        let v = phi(x);
        let root = if v == 0.0 {
            Some(x)
        } else if prev.1 != 0.0 && (v > 0.0) != (prev.1 > 0.0) {
            Some(bisect(prev.0, x, 0.0, phi))
        } else {
            None
        };
        if let Some(x0) = root {
            let u0 = params.b * x0 - curve.r(x0);
            if u0 > 0.0 {
                scan.equilibria
                    .push(classify(params, curve, PhasePoint { x: x0, u: u0 })?);
            } else {
                scan.inadmissible.push(x0);
            }
        }
        prev = (x, v);
    }
    Ok(scan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TowardSmallerX,
    TowardLargerX,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::TowardSmallerX => -1.0,
            Direction::TowardLargerX => 1.0,
        }
    }
}

/// Why a branch ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchEnd {
    LowerBound,
    UpperBound,
    ControlFloor,
    ArcLength,
    /// The manifold turned back in `x` (it spirals around a focus).
    Fold,
    TimeCap,
}

/// Termination settings for manifold integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldBounds {
    pub x_lo: f64,
    pub x_hi: f64,
    pub u_floor: f64,
    pub arc_cap: f64,
    pub time_cap: f64,
    /// Relative tolerance of the integrator.
    pub rtol: f64,
    /// Largest `x` or `u` increment between recorded samples.
    pub max_increment: f64,
}

impl ManifoldBounds {
    pub fn new(x_lo: f64, x_hi: f64) -> Self {
        ManifoldBounds {
            x_lo,
            x_hi,
            u_floor: 1e-8,
            arc_cap: 1e4,
            time_cap: 1e4,
            rtol: 1e-10,
            max_increment: 0.01,
        }
    }
}

/// A point of a stable manifold with the slope data used for interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSample {
    pub x: f64,
    pub u: f64,
    /// Candidate value `J_P(x)` along this branch.
    pub value: f64,
    /// `du/dx = g/f` along the manifold.
    pub du_dx: f64,
}

/// One x-monotone piece of a saddle's stable manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldBranch {
    pub source: Equilibrium,
    pub direction: Direction,
    /// Samples sorted by ascending `x`; the source equilibrium is one end.
    pub samples: Vec<ManifoldSample>,
    pub end: BranchEnd,
}

impl ManifoldBranch {
    pub fn x_range(&self) -> (f64, f64) {
        (self.samples[0].x, self.samples[self.samples.len() - 1].x)
    }

    pub fn covers(&self, x: f64) -> bool {
        let (lo, hi) = self.x_range();
        x >= lo && x <= hi
    }

    fn cell(&self, x: f64) -> (&ManifoldSample, &ManifoldSample) {
        let i = cell_index_by(&self.samples, x);
        (&self.samples[i], &self.samples[i + 1])
    }

    /// Loading `u(x)` on the branch (cubic Hermite in `x`).
    pub fn control(&self, x: f64) -> f64 {
        let (a, b) = self.cell(x);
        hermite(a.x, b.x, a.u, b.u, a.du_dx, b.du_dx, x)
    }

    /// Candidate value `J_P(x)` on the branch.
    pub fn value(&self, x: f64) -> f64 {
        let (a, b) = self.cell(x);
        hermite(a.x, b.x, a.value, b.value, -1.0 / a.u, -1.0 / b.u, x)
    }

    /// `du/dx` from the interpolant.
    pub fn control_slope(&self, x: f64) -> f64 {
        let (a, b) = self.cell(x);
        hermite_slope(a.x, b.x, a.u, b.u, a.du_dx, b.du_dx, x)
    }

    /// Cumulative trapezoid value of `-∫ du'/u` from the source, used to
    /// cross-check the value carried by the integrator.
    pub fn trapezoid_values(&self) -> Vec<f64> {
        let n = self.samples.len();
        let anchor = if self.direction == Direction::TowardLargerX {
            0
        } else {
            n - 1
        };
        let mut out = vec![0.0; n];
        out[anchor] = self.samples[anchor].value;
        let step =
            |a: &ManifoldSample, b: &ManifoldSample| -0.5 * (1.0 / a.u + 1.0 / b.u) * (b.x - a.x);
        if anchor == 0 {
            for i in 1..n {
                out[i] = out[i - 1] + step(&self.samples[i - 1], &self.samples[i]);
            }
        } else {
            for i in (0..n - 1).rev() {
                out[i] = out[i + 1] - step(&self.samples[i], &self.samples[i + 1]);
            }
        }
        out
    }
}

fn cell_index_by(samples: &[ManifoldSample], x: f64) -> usize {
    let last = samples.len() - 2;
    let i = samples.partition_point(|s| s.x <= x);
    i.saturating_sub(1).min(last)
}

/// Integrates the stable manifold of a saddle in reversed time.
///
/// The seed sits at `x₀ ± δ` along the stable eigenvector with
/// `δ = 1e-6·max(1, x₀)`. The state is augmented with `J_P`, whose reversed
/// time derivative is `f/u`, so the value inherits the integrator's error
/// control.
pub fn stable_manifold(
    params: &LakeParams,
    curve: &RecyclingCurve,
    eq: &Equilibrium,
    direction: Direction,
    bounds: &ManifoldBounds,
) -> Result<ManifoldBranch> {
    let slope = match (eq.kind, eq.stable_slope) {
        (EquilibriumKind::Saddle, Some(k)) => k,
        _ => {
            return Err(LakeError::Manifold(format!(
                "equilibrium at x = {} is a {}, not a saddle",
                eq.x(),
                eq.kind
            )))
        }
    };
    let (x0, u0) = (eq.x(), eq.u());
    let delta = direction.sign() * 1e-6 * x0.max(1.0);
    let seed_u = u0 + delta * slope;
    if !(seed_u > 0.0) {
        return Err(LakeError::Manifold(format!(
            "seed loading {seed_u} is not positive"
        )));
    }
    let j0 = eq.steady_value(params);
    // second-order Taylor step of J along the eigenvector: J'' = u'/u²
    let seed_j = j0 - delta / u0 + 0.5 * delta * delta * slope / (u0 * u0);

    let f = |x: f64, u: f64| drift_unchecked(params, curve, x, u);
    let g = |x: f64, u: f64| costate_dynamics_unchecked(params, curve, x, u.max(0.0));
    let rhs = |_t: f64, s: &[f64; 3]| {
        let fx = f(s[0].max(0.0), s[1]);
        let gu = g(s[0].max(0.0), s[1]);
        [-fx, -gu, fx / s[1]]
    };
    let inc = bounds.max_increment;
    let max_step = |s: &[f64; 3]| {
        let fx = f(s[0].max(0.0), s[1]).abs();
        let gu = g(s[0].max(0.0), s[1]).abs();
        (inc / fx.max(1e-300)).min(inc / gu.max(1e-300))
    };
    let ev_lo = |s: &[f64; 3]| s[0] - bounds.x_lo;
    let ev_hi = |s: &[f64; 3]| s[0] - bounds.x_hi;
    let ev_u = |s: &[f64; 3]| s[1] - bounds.u_floor;

    let mut samples = vec![ManifoldSample {
        x: x0,
        u: u0,
        value: j0,
        du_dx: slope,
    }];
    let mut arc = 0.0;
    let mut end = BranchEnd::TimeCap;
    let solver = Dopri5 {
        rtol: bounds.rtol,
        atol: bounds.rtol * 1e-2,
        h_init: 1e-3,
        h_max: 1.0,
        max_steps: 2_000_000,
    };
    let sign = direction.sign();
    let term = solver.solve(
        rhs,
        0.0,
        [x0 + delta, seed_u, seed_j],
        bounds.time_cap,
        max_step,
        &[&ev_lo, &ev_hi, &ev_u],
        |_t, s| {
            let prev = samples[samples.len() - 1];
            if (s[0] - prev.x) * sign <= 0.0 {
                end = BranchEnd::Fold;
                return false;
            }
            arc += (s[0] - prev.x).hypot(s[1] - prev.u);
            let fx = f(s[0], s[1]);
            let du_dx = g(s[0], s[1]) / fx;
            samples.push(ManifoldSample {
                x: s[0],
                u: s[1],
                value: s[2],
                du_dx,
            });
            if arc > bounds.arc_cap {
                end = BranchEnd::ArcLength;
                return false;
            }
            true
        },
    )?;
    match term {
        Termination::Event(0) => end = BranchEnd::LowerBound,
        Termination::Event(1) => end = BranchEnd::UpperBound,
        Termination::Event(_) => end = BranchEnd::ControlFloor,
        Termination::EndTime => end = BranchEnd::TimeCap,
        Termination::Observer => {}
    }
    // The fold sample is dropped; slopes near a fold blow up, so keep only
    // samples where the manifold is still a graph over x with a finite slope.
    if end == BranchEnd::Fold {
        while samples.len() > 2 && !samples[samples.len() - 1].du_dx.is_finite() {
            samples.pop();
        }
    }
    if samples.len() < 2 {
        return Err(LakeError::Manifold(format!(
            "branch from x = {x0} produced no samples"
        )));
    }
    if direction == Direction::TowardSmallerX {
        samples.reverse();
    }
    Ok(ManifoldBranch {
        source: *eq,
        direction,
        samples,
        end,
    })
}

/// Both branches of every saddle, integrated in parallel.
pub fn saddle_branches(
    params: &LakeParams,
    curve: &RecyclingCurve,
    equilibria: &[Equilibrium],
    bounds: &ManifoldBounds,
) -> Result<Vec<ManifoldBranch>> {
    let jobs: Vec<(Equilibrium, Direction)> = equilibria
        .iter()
        .filter(|e| e.kind == EquilibriumKind::Saddle)
        .flat_map(|e| {
            [
                (*e, Direction::TowardSmallerX),
                (*e, Direction::TowardLargerX),
            ]
        })
        .collect();
    jobs.par_iter()
        .map(|(eq, dir)| stable_manifold(params, curve, eq, *dir, bounds))
        .collect()
}

/// An indifference point with its one-sided data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkibaPoint {
    pub x: f64,
    pub value_left: f64,
    pub value_right: f64,
    pub u_left: f64,
    pub u_right: f64,
    /// One-sided derivatives `-1/u`.
    pub dv_left: f64,
    pub dv_right: f64,
    /// One-sided second derivatives from the differentiated HJB equation.
    pub d2v_left: f64,
    pub d2v_right: f64,
    /// Optimal drift `f(x⋆, u)` from each side.
    pub drift_left: f64,
    pub drift_right: f64,
}

impl SkibaPoint {
    /// Sign of `V'(x⋆+) - V'(x⋆-)` as observed.
    pub fn jump_sign(&self) -> f64 {
        (self.dv_right - self.dv_left).signum()
    }
}

/// Control at a point: single valued except at a Skiba point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Single(f64),
    Dual { left: f64, right: f64 },
}

/// A piece of the optimal envelope, `[lo, hi]` served by one branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyPiece {
    pub lo: f64,
    pub hi: f64,
    pub branch: usize,
}

/// The candidate value function `J_P` on `[0, x_max]`.
#[derive(Debug, Clone)]
pub struct CandidateValue {
    pub params: LakeParams,
    pub curve: RecyclingCurve,
    pub branches: Vec<ManifoldBranch>,
    pub pieces: Vec<PolicyPiece>,
    pub skiba: Option<SkibaPoint>,
    /// Repelling steady state separating the basins when no Skiba point exists.
    pub threshold: Option<f64>,
    pub domain: (f64, f64),
}

/// Second derivative of a classical solution of the deterministic equation,
/// from the differentiated HJB: `((r' - (rho+b)) V' - 2 c x) / (b x - r + 1/V')`.
pub fn deterministic_second_derivative(
    params: &LakeParams,
    curve: &RecyclingCurve,
    x: f64,
    dv: f64,
) -> f64 {
    let num = (curve.dr(x) - (params.rho + params.b)) * dv - 2.0 * params.c * x;
    let den = -curve.r(x) + params.b * x + 1.0 / dv;
    num / den
}

impl CandidateValue {
    fn piece_index(&self, x: f64) -> usize {
        let i = self.pieces.partition_point(|p| p.hi <= x);
        i.min(self.pieces.len() - 1)
    }

    fn branch_at(&self, x: f64) -> &ManifoldBranch {
        &self.branches[self.pieces[self.piece_index(x)].branch]
    }

    /// `J_P(x)`; continuous across the Skiba point.
    pub fn value(&self, x: f64) -> f64 {
        self.branch_at(x).value(x)
    }

    /// Optimal loading. At a Skiba point the right-hand branch is returned;
    /// use [`CandidateValue::policy`] to see both.
    pub fn control(&self, x: f64) -> f64 {
        self.branch_at(x).control(x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        -1.0 / self.control(x)
    }

    pub fn policy(&self, x: f64) -> Policy {
        if let Some(s) = &self.skiba {
            if x == s.x {
                return Policy::Dual {
                    left: s.u_left,
                    right: s.u_right,
                };
            }
        }
        Policy::Single(self.control(x))
    }

    /// Residual of the deterministic HJB equation at `x` with `V' = -1/u`.
    pub fn hjb_residual(&self, x: f64) -> f64 {
        let u = self.control(x);
        let v = self.value(x);
        hjb_residual_at(&self.params, &self.curve, x, v, u)
    }

    /// Samples of every piece of the envelope, for export and checks.
    pub fn envelope_samples(&self) -> Vec<(usize, ManifoldSample)> {
        let mut out = Vec::new();
        for p in &self.pieces {
            for s in &self.branches[p.branch].samples {
                if s.x >= p.lo && s.x <= p.hi {
                    out.push((p.branch, *s));
                }
            }
        }
        out
    }
}

pub(crate) fn hjb_residual_at(
    params: &LakeParams,
    curve: &RecyclingCurve,
    x: f64,
    v: f64,
    u: f64,
) -> f64 {
    params.rho * v + (curve.r(x) - params.b * x) / u - u.ln() + params.c * x * x + 1.0
}

const CROSSING_SCAN: usize = 2000;

/// Assembles `J_P` on `[0, x_max]` from saddle branches.
pub fn candidate_value(
    params: &LakeParams,
    curve: &RecyclingCurve,
    branches: Vec<ManifoldBranch>,
    x_max: f64,
    equilibria: &[Equilibrium],
) -> Result<CandidateValue> {
    if branches.is_empty() {
        return Err(LakeError::CoverageGap { lo: 0.0, hi: x_max });
    }
    // Breakpoints: branch ends plus crossings between branches of different saddles.
    let mut breaks = vec![0.0, x_max];
    for b in &branches {
        let (lo, hi) = b.x_range();
        breaks.extend([lo, hi]);
    }
    for (i, a) in branches.iter().enumerate() {
        for b in branches.iter().skip(i + 1) {
            if a.source.x() == b.source.x() {
                continue;
            }
            let lo = a.x_range().0.max(b.x_range().0);
            let hi = a.x_range().1.min(b.x_range().1);
            if !(hi > lo) {
                continue;
            }
            let diff = |x: f64| a.value(x) - b.value(x);
            let mut prev = (lo, diff(lo));
            for k in 1..=CROSSING_SCAN {
                let x = lo + (hi - lo) * k as f64 / CROSSING_SCAN as f64;
                let d = diff(x);
                if (d > 0.0) != (prev.1 > 0.0) {
                    breaks.push(bisect(prev.0, x, 1e-12, diff));
                }
                prev = (x, d);
            }
        }
    }
    breaks.retain(|x| (0.0..=x_max).contains(x));
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-13);

    let winner = |x: f64| -> Option<usize> {
        branches
            .iter()
            .enumerate()
            .filter(|(_, b)| b.covers(x))
            .max_by(|(_, a), (_, b)| a.value(x).partial_cmp(&b.value(x)).unwrap())
            .map(|(i, _)| i)
    };

    let mut pieces: Vec<PolicyPiece> = Vec::new();
    let mut threshold = None;
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo <= 0.0 {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let Some(idx) = winner(mid) else {
            // A repelling middle steady state leaves a gap the manifolds only
            // approach asymptotically.
            let middle = equilibria.iter().find(|e| {
                e.kind != EquilibriumKind::Saddle && e.x() >= lo - 1e-3 && e.x() <= hi + 1e-3
            });
            match middle {
                Some(e) if hi - lo <= 2e-3 => {
                    threshold = Some(e.x());
                    continue;
                }
                _ => return Err(LakeError::CoverageGap { lo, hi }),
            }
        };
        match pieces.last_mut() {
            Some(p) if p.branch == idx => p.hi = hi,
            _ => pieces.push(PolicyPiece {
                lo,
                hi,
                branch: idx,
            }),
        }
    }
    if pieces.is_empty() {
        return Err(LakeError::CoverageGap { lo: 0.0, hi: x_max });
    }
    // close gaps left by a threshold so lookups stay total
    for i in 1..pieces.len() {
        if pieces[i].lo > pieces[i - 1].hi {
            let mid = threshold.unwrap_or(0.5 * (pieces[i].lo + pieces[i - 1].hi));
            pieces[i - 1].hi = mid;
            pieces[i].lo = mid;
        }
    }

    let mut skiba = None;
    for w in pieces.windows(2) {
        let (l, r) = (&branches[w[0].branch], &branches[w[1].branch]);
        if l.source.x() == r.source.x() {
            continue;
        }
        let x = w[0].hi;
        if threshold.is_some() {
            continue;
        }
        let (ul, ur) = (l.control(x), r.control(x));
        let (dl, dr) = (-1.0 / ul, -1.0 / ur);
        skiba = Some(SkibaPoint {
            x,
            value_left: l.value(x),
            value_right: r.value(x),
            u_left: ul,
            u_right: ur,
            dv_left: dl,
            dv_right: dr,
            d2v_left: deterministic_second_derivative(params, curve, x, dl),
            d2v_right: deterministic_second_derivative(params, curve, x, dr),
            drift_left: drift_unchecked(params, curve, x, ul),
            drift_right: drift_unchecked(params, curve, x, ur),
        });
    }

    Ok(CandidateValue {
        params: *params,
        curve: curve.clone(),
        branches,
        pieces,
        skiba,
        threshold,
        domain: (0.0, x_max),
    })
}

/// Equilibria, saddle branches and the assembled candidate in one call.
pub fn deterministic_candidate(
    params: &LakeParams,
    curve: &RecyclingCurve,
    x_max: f64,
) -> Result<(EquilibriumScan, CandidateValue)> {
    let scan = find_equilibria(params, curve, x_max)?;
    let bounds = ManifoldBounds::new(0.0, x_max);
    let branches = saddle_branches(params, curve, &scan.equilibria, &bounds)?;
    let candidate = candidate_value(params, curve, branches, x_max, &scan.equilibria)?;
    Ok((scan, candidate))
}

/// Far-field checks on the candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBoundReport {
    /// `A = c/(rho + 2b)`.
    pub coefficient: f64,
    /// Largest increase of `J_P + A x²` between consecutive grid points (≤ 0 when monotone).
    pub worst_increase: f64,
    pub monotone: bool,
    pub x_eval: f64,
    /// `(-1/u(x)) / (-2 A x)` at the largest available `x`.
    pub slope_ratio: f64,
    pub slope_ok: bool,
}

impl QuadraticBoundReport {
    pub fn passed(&self) -> bool {
        self.monotone && self.slope_ok
    }
}

pub fn quadratic_lower_bound_check(
    candidate: &CandidateValue,
    params: &LakeParams,
) -> QuadraticBoundReport {
    let a = params.c / (params.rho + 2.0 * params.b);
    let (lo, hi) = candidate.domain;
    let n = 4001;
    let mut worst = f64::NEG_INFINITY;
    let mut prev: Option<f64> = None;
    for k in 0..n {
        let x = lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let w = candidate.value(x) + a * x * x;
        if let Some(p) = prev {
            worst = worst.max(w - p);
        }
        prev = Some(w);
    }
    let scale = candidate.value(hi).abs().max(1.0);
    let slope_ratio = candidate.derivative(hi) / (-2.0 * a * hi);
    QuadraticBoundReport {
        coefficient: a,
        worst_increase: worst,
        monotone: worst <= 1e-10 * scale,
        x_eval: hi,
        slope_ratio,
        slope_ok: (0.9..=1.1).contains(&slope_ratio),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::hill_curve;

    fn setup() -> (LakeParams, RecyclingCurve) {
        (LakeParams::reference(0.0), hill_curve())
    }

    /// Independent root oracle: 1e5-point uniform scan plus plain bisection.
    fn oracle_roots(params: &LakeParams, curve: &RecyclingCurve) -> Vec<f64> {
        let n = 100_000;
        let (lo, hi) = (1e-4, 4.0);
        let phi = |x: f64| equilibrium_function(params, curve, x);
        let mut out = Vec::new();
        for k in 0..n - 1 {
            let a = lo + (hi - lo) * k as f64 / (n - 1) as f64;
            let b = lo + (hi - lo) * (k + 1) as f64 / (n - 1) as f64;
            if phi(a) * phi(b) < 0.0 {
                let (mut l, mut r) = (a, b);
                while r - l > 1e-12 {
                    let m = 0.5 * (l + r);
                    if phi(l) * phi(m) <= 0.0 {
                        r = m;
                    } else {
                        l = m;
                    }
                }
                out.push(0.5 * (l + r));
            }
        }
        out
    }

    #[test]
    fn three_equilibria_in_the_bistable_regime() {
        let (p, r) = setup();
        let scan = find_equilibria(&p, &r, 4.0).unwrap();
        let kinds: Vec<_> = scan.equilibria.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![
                EquilibriumKind::Saddle,
                EquilibriumKind::Vortex,
                EquilibriumKind::Saddle
            ]
        );
        let oracle = oracle_roots(&p, &r);
        assert_eq!(oracle.len(), 3);
        for (e, x) in scan.equilibria.iter().zip(&oracle) {
            assert!((e.x() - x).abs() < 1e-8, "{} vs {}", e.x(), x);
            let (r1, r2) = steady_state_residuals(&p, &r, &e.point);
            assert!(r1.abs() <= 1e-10 && r2.abs() <= 1e-10);
        }
        // frozen from the oracle
        assert!((oracle[0] - 0.450_695_849_760_577_6).abs() < 1e-9);
        assert!((oracle[1] - 0.884_604_116_397_601_8).abs() < 1e-9);
        assert!((oracle[2] - 1.414_124_823_810_955_2).abs() < 1e-9);
    }

    #[test]
    fn equilibria_have_zero_drift() {
        let (p, r) = setup();
        let scan = find_equilibria(&p, &r, 4.0).unwrap();
        for e in &scan.equilibria {
            assert!(drift_unchecked(&p, &r, e.x(), e.u()).abs() <= 1e-10);
            assert!(costate_dynamics_unchecked(&p, &r, e.x(), e.u()).abs() <= 1e-10);
            let g1 = crate::model::costate_nullcline(&p, &r, e.x()).unwrap();
            assert!((e.u() - g1).abs() <= 1e-8);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (p, r) = setup();
        let scan = find_equilibria(&p, &r, 4.0).unwrap();
        let h = 1e-6;
        for e in &scan.equilibria {
            let (x, u) = (e.x(), e.u());
            let f = |x: f64, u: f64| drift_unchecked(&p, &r, x, u);
            let g = |x: f64, u: f64| costate_dynamics_unchecked(&p, &r, x, u);
            let fd = [
                [
                    (f(x + h, u) - f(x - h, u)) / (2.0 * h),
                    (f(x, u + h) - f(x, u - h)) / (2.0 * h),
                ],
                [
                    (g(x + h, u) - g(x - h, u)) / (2.0 * h),
                    (g(x, u + h) - g(x, u - h)) / (2.0 * h),
                ],
            ];
            for (fd_row, row) in fd.iter().zip(&e.jacobian) {
                for (a, b) in fd_row.iter().zip(row) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn saddle_spectrum_and_eigenvector() {
        let (p, r) = setup();
        let scan = find_equilibria(&p, &r, 4.0).unwrap();
        for e in scan.saddles() {
            assert!(e.determinant() < 0.0);
            assert!(e.eigenvalues[0] < 0.0 && e.eigenvalues[1] > 0.0);
            let k = e.stable_slope.unwrap();
            let j = e.jacobian;
            let lam = e.eigenvalues[0];
            let av = [j[0][0] + j[0][1] * k, j[1][0] + j[1][1] * k];
            assert!((av[0] - lam).abs() <= 1e-8 * lam.abs());
            assert!((av[1] - lam * k).abs() <= 1e-8 * (lam * k).abs().max(1e-12));
        }
    }

    #[test]
    fn classify_rejects_non_equilibria() {
        let (p, r) = setup();
        assert!(classify(&p, &r, PhasePoint { x: 1.0, u: 0.3 }).is_err());
        assert!(find_equilibria(&p, &r, 0.0).is_err());
    }

    #[test]
    fn manifold_leaves_along_eigenvector() {
        let (p, r) = setup();
        let scan = find_equilibria(&p, &r, 4.0).unwrap();
        let left = scan.equilibria[0];
        let b = stable_manifold(
            &p,
            &r,
            &left,
            Direction::TowardSmallerX,
            &ManifoldBounds::new(0.0, 20.0),
        )
        .unwrap();
        let n = b.samples.len();
        let first = b.samples[n - 2];
        let chord = (first.u - left.u()) / (first.x - left.x());
        let k = left.stable_slope.unwrap();
        assert!((chord - k).abs() <= 1e-3);
        assert!(((chord - k) / (1.0 + k * chord)).atan().abs() <= 1e-3);
        // reaches the origin with u decreasing in x
        assert_eq!(b.end, BranchEnd::LowerBound);
        assert!(b.samples[0].x <= 1e-3);
        assert!(b.samples.windows(2).all(|w| w[1].u < w[0].u));
    }

    #[test]
    fn manifold_is_self_convergent() {
        let (p, r) = setup();
        let scan = find_equilibria(&p, &r, 4.0).unwrap();
        let right = scan.equilibria[2];
        let coarse = ManifoldBounds::new(0.0, 20.0);
        let fine = ManifoldBounds {
            rtol: 1e-12,
            ..coarse
        };
        for dir in [Direction::TowardSmallerX, Direction::TowardLargerX] {
            let a = stable_manifold(&p, &r, &right, dir, &coarse).unwrap();
            let b = stable_manifold(&p, &r, &right, dir, &fine).unwrap();
            let mut lo = a.x_range().0.max(b.x_range().0);
            let mut hi = a.x_range().1.min(b.x_range().1);
            // du/dx diverges at a fold, so stay clear of fold ends
            if a.end == BranchEnd::Fold {
                match dir {
                    Direction::TowardSmallerX => lo += 0.05,
                    Direction::TowardLargerX => hi -= 0.05,
                }
            }
            let mut worst: f64 = 0.0;
            for k in 0..=2000 {
                let x = lo + (hi - lo) * k as f64 / 2000.0;
                worst = worst.max((a.control(x) - b.control(x)).abs());
            }
            assert!(worst <= 1e-7, "{dir:?}: {worst}");
        }
    }

    #[test]
    fn branch_samples_respect_the_vector_field() {
        let (p, r) = setup();
        let scan = find_equilibria(&p, &r, 4.0).unwrap();
        let b = stable_manifold(
            &p,
            &r,
            &scan.equilibria[2],
            Direction::TowardLargerX,
            &ManifoldBounds::new(0.0, 20.0),
        )
        .unwrap();
        assert_eq!(b.end, BranchEnd::UpperBound);
        assert!((b.x_range().1 - 20.0).abs() < 1e-9);
        for w in b.samples.windows(2) {
            assert!(w[1].x > w[0].x);
            assert!(w[1].value < w[0].value);
            assert!(w[0].u > 0.0);
        }
        // the carried value agrees with the trapezoid rule on the samples
        let trap = b.trapezoid_values();
        for (s, t) in b.samples.iter().zip(&trap) {
            assert!((s.value - t).abs() < 1e-3);
        }
    }

    #[test]
    fn candidate_has_a_skiba_point() {
        let (p, r) = setup();
        let (scan, cand) = deterministic_candidate(&p, &r, 20.0).unwrap();
        let s = cand.skiba.expect("bistable regime has a Skiba point");
        assert!((s.value_left - s.value_right).abs() <= 1e-8);
        assert!(s.dv_left != s.dv_right);
        assert!(s.x > scan.equilibria[0].x() && s.x < scan.equilibria[2].x());
        assert!(s.drift_left.abs() > 0.0 && s.drift_right.abs() > 0.0);
        assert!(s.drift_left < 0.0 && s.drift_right > 0.0);
        assert!(s.d2v_left.is_finite() && s.d2v_right.is_finite());
        assert!(matches!(cand.policy(s.x), Policy::Dual { .. }));
        // frozen from the crossing oracle (bisection of J_left - J_right)
        assert!((s.x - 0.9310).abs() < 2e-3, "{}", s.x);
        for e in scan.saddles() {
            assert!((cand.value(e.x()) - e.steady_value(&p)).abs() < 1e-12);
        }
    }

    #[test]
    fn candidate_solves_the_hjb_equation_off_skiba() {
        let (p, r) = setup();
        let (_, cand) = deterministic_candidate(&p, &r, 20.0).unwrap();
        let xs = cand.skiba.unwrap().x;
        let mut worst: f64 = 0.0;
        for (_, s) in cand.envelope_samples() {
            if (s.x - xs).abs() < 1e-9 {
                continue;
            }
            worst = worst.max(hjb_residual_at(&p, &r, s.x, s.value, s.u).abs());
        }
        assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn candidate_is_decreasing_with_positive_policy() {
        let (p, r) = setup();
        let (_, cand) = deterministic_candidate(&p, &r, 20.0).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=4000 {
            let x = 20.0 * k as f64 / 4000.0;
            let v = cand.value(x);
            assert!(v < prev);
            assert!(cand.control(x) > 0.0);
            prev = v;
        }
    }

    #[test]
    fn far_field_checks() {
        let (p, r) = setup();
        let (_, cand) = deterministic_candidate(&p, &r, 20.0).unwrap();
        let rep = quadratic_lower_bound_check(&cand, &p);
        assert!((rep.coefficient - 0.512 / 1.33).abs() < 1e-15);
        assert!((rep.coefficient - 0.38496).abs() < 1e-5);
        assert!(rep.monotone, "{}", rep.worst_increase);
        assert!(rep.slope_ok, "{}", rep.slope_ratio);
        // V'' tends to -2A
        let x = 20.0;
        let d2 = deterministic_second_derivative(&p, &r, x, cand.derivative(x));
        assert!((d2 / (-2.0 * rep.coefficient) - 1.0).abs() <= 0.1);
    }
}
