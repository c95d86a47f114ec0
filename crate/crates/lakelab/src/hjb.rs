//! Monotone upwind solver for the stationary HJB equation with noise,
//!
//! ```text
//! rho V - (r - b x) V' + ln(-V') + c x² + 1 - ½ sigma² x² V'' = 0,
//! ```
//!
//! on `[0, x_max]` by Howard policy iteration.
//!
//! Each policy evaluation is a tridiagonal M-matrix solve. The policy update
//! maximizes the upwinded discrete Hamiltonian over the three admissible
//! controls (forward-upwind, backward-upwind and the zero-drift loading
//! `u = b x - r(x)`), which makes the nonlinear scheme monotone and the
//! iteration a Newton method on it. The origin needs no boundary data since the
//! optimal drift there points inward; at `x_max` the derivative is pinned to the
//! far-field asymptote `-2 A_sigma x_max`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LakeError, Result};
use crate::model::{LakeParams, RecyclingCurve};
use crate::numerics::{cell_index, lerp, solve_tridiagonal};
use crate::pontryagin::{
    deterministic_second_derivative, find_equilibria, CandidateValue, SkibaPoint,
};

/// Uniform grid `x_i = i h`, `h = x_max/(n-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_max: f64,
    pub n: usize,
}

pub const DEFAULT_NODES: usize = 4096;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const U_FLOOR: f64 = 1e-10;

impl GridSpec {
    pub fn new(x_max: f64, n: usize) -> Result<Self> {
        if !(x_max > 0.0) || !x_max.is_finite() {
            return Err(LakeError::Domain(format!(
                "x_max must be positive (got {x_max})"
            )));
        }
        if n < 64 {
            return Err(LakeError::Domain(format!(
                "need at least 64 nodes (got {n})"
            )));
        }
        Ok(GridSpec { x_max, n })
    }

    /// `x_max = max(20, 4·x₊)` with `x₊` the largest equilibrium, `n` nodes.
    pub fn default_for(params: &LakeParams, curve: &RecyclingCurve, n: usize) -> Result<Self> {
        GridSpec::new(default_x_max(params, curve)?, n)
    }

    pub fn h(&self) -> f64 {
        self.x_max / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }
}

/// `max(20, 4·x₊)`, `x₊` the largest steady state found on `(0, 100]`.
pub fn default_x_max(params: &LakeParams, curve: &RecyclingCurve) -> Result<f64> {
    let scan = find_equilibria(params, curve, 100.0)?;
    let largest = scan.equilibria.iter().map(|e| e.x()).fold(0.0, f64::max);
    Ok(20f64.max(4.0 * largest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Pontryagin,
    Hjb,
}

/// Nodal value function with derivative data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunction {
    pub grid: GridSpec,
    pub v: Vec<f64>,
    /// `V' = -1/u*` at each node.
    pub vp: Vec<f64>,
    pub v2: Vec<f64>,
    /// Optimal loading `u*` at each node.
    pub policy: Vec<f64>,
    pub sigma: f64,
    pub provenance: Provenance,
    pub skiba: Option<SkibaPoint>,
    #[serde(skip)]
    candidate: Option<Arc<CandidateValue>>,
}

impl ValueFunction {
    /// Samples a deterministic candidate on `grid`, keeping it for exact evaluation.
    pub fn from_candidate(candidate: CandidateValue, grid: GridSpec) -> Result<Self> {
        let (lo, hi) = candidate.domain;
        if lo > 0.0 || hi < grid.x_max {
            return Err(LakeError::CoverageGap {
                lo: grid.x_max.min(hi),
                hi: grid.x_max,
            });
        }
        let xs = grid.nodes();
        let policy: Vec<f64> = xs.iter().map(|&x| candidate.control(x)).collect();
        let vp: Vec<f64> = policy.iter().map(|u| -1.0 / u).collect();
        let v2 = xs
            .iter()
            .zip(&vp)
            .map(|(&x, &p)| {
                deterministic_second_derivative(&candidate.params, &candidate.curve, x, p)
            })
            .collect();
        Ok(ValueFunction {
            grid,
            v: xs.iter().map(|&x| candidate.value(x)).collect(),
            vp,
            v2,
            policy,
            sigma: 0.0,
            provenance: Provenance::Pontryagin,
            skiba: candidate.skiba,
            candidate: Some(Arc::new(candidate)),
        })
    }

    pub fn candidate(&self) -> Option<&CandidateValue> {
        self.candidate.as_deref()
    }

    pub fn x(&self) -> Vec<f64> {
        self.grid.nodes()
    }

    pub fn covers(&self, x: f64) -> bool {
        (0.0..=self.grid.x_max).contains(&x)
    }

    /// `V(x)`; linear between nodes so monotonicity is preserved.
    pub fn value(&self, x: f64) -> f64 {
        match &self.candidate {
            Some(c) => c.value(x.clamp(0.0, self.grid.x_max)),
            None => self.interp(&self.v, x),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        -1.0 / self.control(x)
    }

    /// Feedback loading `u*(x) = -1/V'(x)`.
    pub fn control(&self, x: f64) -> f64 {
        match &self.candidate {
            Some(c) => c.control(x.clamp(0.0, self.grid.x_max)),
            None => self.interp(&self.policy, x),
        }
    }

    fn interp(&self, ys: &[f64], x: f64) -> f64 {
        let h = self.grid.h();
        let x = x.clamp(0.0, self.grid.x_max);
        let i = ((x / h) as usize).min(self.grid.n - 2);
        let t = (x - i as f64 * h) / h;
        ys[i] + t * (ys[i + 1] - ys[i])
    }

    /// Smallest `-V'` over the grid.
    pub fn derivative_floor(&self) -> f64 {
        self.vp.iter().map(|p| -p).fold(f64::INFINITY, f64::min)
    }
}

/// Diagnostics of a converged solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Largest residual scaled by the diagonal of the linearized scheme.
    pub residual: f64,
    /// Largest raw residual.
    pub raw_residual: f64,
    pub residual_history: Vec<f64>,
    pub policy_change: f64,
    /// `ln(-V'(0)) + rho V(0) + 1`.
    pub boundary_identity: f64,
    /// One-sided second-order estimate of `V''(0)`.
    pub second_derivative_at_zero: f64,
    /// `-(rho + b - r'(0)) V'(0)²`.
    pub second_derivative_formula: f64,
    /// `-V(x_max)/x_max²`.
    pub far_field_estimate: f64,
    /// `A_sigma = c/(rho + 2b - sigma²)`.
    pub far_field_coefficient: f64,
    /// Smallest `-V'` on the grid.
    pub derivative_floor: f64,
    /// Smallest centered second difference on `[0, SEMICONVEXITY_WINDOW]`.
    pub semiconvexity_floor: f64,
    pub floor_hits: usize,
}

impl SolveReport {
    pub fn second_derivative_rel_error(&self) -> f64 {
        (self.second_derivative_at_zero - self.second_derivative_formula).abs()
            / self.second_derivative_at_zero.abs()
    }
}

pub const SEMICONVEXITY_WINDOW: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub u_floor: f64,
}

impl Default for HjbOptions {
    fn default() -> Self {
        HjbOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            u_floor: U_FLOOR,
        }
    }
}

/// Evaluation of the nonlinear discrete operator at a nodal vector.
struct Operator {
    raw: Vec<f64>,
    scaled: Vec<f64>,
    policy: Vec<f64>,
    floor_hits: usize,
}

struct Scheme<'a> {
    params: &'a LakeParams,
    xs: Vec<f64>,
    h: f64,
    /// Zero-drift loading `b x - r(x)`.
    s: Vec<f64>,
    /// `½ sigma² x² / h²`.
    diff: Vec<f64>,
    /// Ghost derivative at `x_max`.
    neumann: f64,
    u_floor: f64,
}

impl<'a> Scheme<'a> {
    fn new(params: &'a LakeParams, curve: &RecyclingCurve, grid: &GridSpec, u_floor: f64) -> Self {
        let xs = grid.nodes();
        let h = grid.h();
        let s = xs.iter().map(|&x| params.b * x - curve.r(x)).collect();
        let diff = xs
            .iter()
            .map(|&x| 0.5 * params.sigma * params.sigma * x * x / (h * h))
            .collect();
        Scheme {
            params,
            neumann: -2.0 * params.far_field_coefficient() * grid.x_max,
            xs,
            h,
            s,
            diff,
            u_floor,
        }
    }

    fn n(&self) -> usize {
        self.xs.len()
    }

    /// One-sided differences at node `i`; the ghost node supplies `D⁺` at the end.
    fn differences(&self, v: &[f64], i: usize) -> (Option<f64>, f64) {
        let n = self.n();
        let fwd = if i + 1 < n {
            (v[i + 1] - v[i]) / self.h
        } else {
            self.neumann
        };
        let bwd = if i > 0 {
            Some((v[i] - v[i - 1]) / self.h)
        } else {
            None
        };
        (bwd, fwd)
    }

    /// Maximizer of the upwinded Hamiltonian `(u - s) D_up + ln u` at node `i`.
    fn best_control(&self, v: &[f64], i: usize) -> Option<(f64, f64)> {
        let s = self.s[i];
        let (bwd, fwd) = self.differences(v, i);
        let mut best: Option<(f64, f64)> = None;
        let mut offer = |u: f64, value: f64| {
            if match best {
                None => true,
                Some((_, b)) => value > b,
            } {
                best = Some((u, value));
            }
        };
        if fwd < 0.0 {
            let u = -1.0 / fwd;
            if u >= s {
                offer(u, (u - s) * fwd + u.ln());
            }
        }
        if let Some(d) = bwd {
            if d < 0.0 {
                let u = -1.0 / d;
                if u < s {
                    offer(u, (u - s) * d + u.ln());
                }
            }
        }
        if s > 0.0 {
            offer(s, s.ln());
        }
        best
    }

    fn second_difference(&self, v: &[f64], i: usize) -> f64 {
        let n = self.n();
        if i == 0 {
            return 0.0;
        }
        let right = if i + 1 < n {
            v[i + 1]
        } else {
            v[i - 1] + 2.0 * self.h * self.neumann
        };
        right - 2.0 * v[i] + v[i - 1]
    }

    fn operator(&self, v: &[f64]) -> Operator {
        let n = self.n();
        let mut raw = vec![0.0; n];
        let mut scaled = vec![0.0; n];
        let mut policy = vec![0.0; n];
        let mut floor_hits = 0;
        let p = self.params;
        for i in 0..n {
            let x = self.xs[i];
            let (u, ham) = match self.best_control(v, i) {
                Some(b) => b,
                None => {
                    floor_hits += 1;
                    let u = self.u_floor;
                    let (_, fwd) = self.differences(v, i);
                    (u, (u - self.s[i]) * fwd + u.ln())
                }
            };
            let res =
                p.rho * v[i] - ham + p.c * x * x - self.diff[i] * self.second_difference(v, i);
            let drift = u - self.s[i];
            raw[i] = res;
            scaled[i] = res / (p.rho + drift.abs() / self.h + 2.0 * self.diff[i]);
            policy[i] = u;
        }
        Operator {
            raw,
            scaled,
            policy,
            floor_hits,
        }
    }

    /// Solves the linear system for a fixed policy.
    fn evaluate(&self, policy: &[f64]) -> Vec<f64> {
        let n = self.n();
        let p = self.params;
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            let x = self.xs[i];
            let drift = policy[i] - self.s[i];
            // ties take the forward difference
            let (a, bb) = if drift >= 0.0 {
                (drift / self.h, 0.0)
            } else {
                (0.0, -drift / self.h)
            };
            let d = self.diff[i];
            rhs[i] = policy[i].ln() - p.c * x * x;
            if i + 1 < n {
                lower[i] = -bb - d;
                upper[i] = -a - d;
                diag[i] = p.rho + a + bb + 2.0 * d;
            } else {
                // ghost node v[n] = v[n-2] + 2 h g
                lower[i] = -bb - 2.0 * d;
                diag[i] = p.rho + a + bb + 2.0 * d;
                rhs[i] += 2.0 * d * self.h * self.neumann + a * self.h * self.neumann;
            }
        }
        solve_tridiagonal(&lower, &diag, &upper, &mut rhs);
        rhs
    }
}

/// Solves the HJB equation with default iteration settings and tolerance `tol`.
pub fn solve_hjb(
    params: &LakeParams,
    curve: &RecyclingCurve,
    grid: &GridSpec,
    tol: f64,
) -> Result<(ValueFunction, SolveReport)> {
    solve_hjb_with(
        params,
        curve,
        grid,
        &HjbOptions {
            tol,
            ..Default::default()
        },
    )
}

pub fn solve_hjb_with(
    params: &LakeParams,
    curve: &RecyclingCurve,
    grid: &GridSpec,
    opts: &HjbOptions,
) -> Result<(ValueFunction, SolveReport)> {
    params.validate()?;
    if !(params.sigma > 0.0) {
        return Err(LakeError::InvalidParams(
            "the HJB solver needs sigma > 0; use the deterministic candidate for sigma = 0".into(),
        ));
    }
    if grid.n < 64 {
        return Err(LakeError::Domain(format!(
            "need at least 64 nodes (got {})",
            grid.n
        )));
    }
    let scheme = Scheme::new(params, curve, grid, opts.u_floor);
    let n = grid.n;
    let mut policy = vec![params.rho; n];
    let mut history = Vec::new();
    let mut converged = None;
    for it in 1..=opts.max_iter {
        let v = scheme.evaluate(&policy);
        let op = scheme.operator(&v);
        let res = op.scaled.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let change = op
            .policy
            .iter()
            .zip(&policy)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        history.push(res);
        log::debug!("howard iteration {it}: residual {res:e}, policy change {change:e}");
        policy = op.policy.clone();
        if res <= opts.tol && change <= 10.0 * opts.tol {
            converged = Some((it, v, op, change));
            break;
        }
    }
    let Some((iterations, v, op, change)) = converged else {
        let last = history.last().copied().unwrap_or(f64::NAN);
        return Err(LakeError::NoConvergence {
            iterations: opts.max_iter,
            last,
            history,
        });
    };
    if op.floor_hits * 100 > n {
        return Err(LakeError::PolicyFloor {
            hits: op.floor_hits,
            nodes: n,
        });
    }

    let xs = grid.nodes();
    let h = grid.h();
    let vp: Vec<f64> = op.policy.iter().map(|u| -1.0 / u).collect();
    let mut v2: Vec<f64> = (0..n)
        .map(|i| second_derivative_from_equation(params, curve, xs[i], v[i], vp[i]))
        .collect();
    let v2_zero = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / (h * h);
    v2[0] = v2_zero;
    let formula = -(params.rho + params.b - curve.dr(0.0)) * vp[0] * vp[0];

    let window = ((SEMICONVEXITY_WINDOW / h) as usize).min(n - 2);
    let semiconvexity_floor = (1..=window)
        .map(|i| (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (h * h))
        .fold(f64::INFINITY, f64::min);

    let report = SolveReport {
        iterations,
        residual: history[history.len() - 1],
        raw_residual: op.raw.iter().fold(0.0f64, |m, r| m.max(r.abs())),
        residual_history: history,
        policy_change: change,
        boundary_identity: (-vp[0]).ln() + params.rho * v[0] + 1.0,
        second_derivative_at_zero: v2_zero,
        second_derivative_formula: formula,
        far_field_estimate: -v[n - 1] / (grid.x_max * grid.x_max),
        far_field_coefficient: params.far_field_coefficient(),
        derivative_floor: vp.iter().map(|p| -p).fold(f64::INFINITY, f64::min),
        semiconvexity_floor,
        floor_hits: op.floor_hits,
    };
    let vf = ValueFunction {
        grid: *grid,
        v,
        vp,
        v2,
        policy: op.policy,
        sigma: params.sigma,
        provenance: Provenance::Hjb,
        skiba: None,
        candidate: None,
    };
    Ok((vf, report))
}

/// `V''` recovered from the equation itself:
/// `(2/(sigma² x²)) (rho V - (r - b x) V' + ln(-V') + c x² + 1)`.
pub fn second_derivative_from_equation(
    params: &LakeParams,
    curve: &RecyclingCurve,
    x: f64,
    v: f64,
    vp: f64,
) -> f64 {
    let s2 = params.sigma * params.sigma;
    if x == 0.0 || s2 == 0.0 {
        return if x == 0.0 {
            -(params.rho + params.b - curve.dr(0.0)) * vp * vp
        } else {
            deterministic_second_derivative(params, curve, x, vp)
        };
    }
    2.0 / (s2 * x * x)
        * (params.rho * v - (curve.r(x) - params.b * x) * vp + (-vp).ln() + params.c * x * x + 1.0)
}

/// Per-node residuals.
///
/// For solver output this is the nonlinear discrete operator; for a sampled
/// deterministic candidate it is the reduced-form equation with the stored
/// `V' = -1/u`.
pub fn residual(vf: &ValueFunction, params: &LakeParams, curve: &RecyclingCurve) -> Vec<f64> {
    match vf.provenance {
        Provenance::Hjb => {
            let p = params.with_sigma(vf.sigma).unwrap_or(*params);
            Scheme::new(&p, curve, &vf.grid, U_FLOOR)
                .operator(&vf.v)
                .raw
        }
        Provenance::Pontryagin => vf
            .x()
            .iter()
            .zip(vf.v.iter().zip(&vf.vp))
            .map(|(&x, (&v, &p))| {
                params.rho * v - (curve.r(x) - params.b * x) * p
                    + (-p).ln()
                    + params.c * x * x
                    + 1.0
            })
            .collect(),
    }
}

/// Distances of stochastic value functions to the deterministic candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViscosityReport {
    pub sigmas: Vec<f64>,
    pub distances: Vec<f64>,
    pub interval: (f64, f64),
    /// Every distance is at most 1.1 times its predecessor.
    pub non_increasing: bool,
    pub strictly_decreasing: bool,
}

/// Solves for each `sigma` and measures `sup |V_sigma - J_P|` over the grid
/// nodes in `interval`.
pub fn viscosity_limit_check(
    params: &LakeParams,
    curve: &RecyclingCurve,
    sigmas: &[f64],
    interval: (f64, f64),
    grid: &GridSpec,
    candidate: &CandidateValue,
) -> Result<ViscosityReport> {
    if sigmas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LakeError::Domain(
            "sigmas must be strictly decreasing".into(),
        ));
    }
    let distances = sigmas
        .par_iter()
        .map(|&sigma| -> Result<f64> {
            let p = params.with_sigma(sigma)?;
            let (vf, _) = solve_hjb(&p, curve, grid, DEFAULT_TOL)?;
            Ok(vf
                .x()
                .iter()
                .zip(&vf.v)
                .filter(|(x, _)| **x >= interval.0 && **x <= interval.1)
                .map(|(&x, &v)| (v - candidate.value(x)).abs())
                .fold(0.0f64, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ViscosityReport {
        sigmas: sigmas.to_vec(),
        non_increasing: distances.windows(2).all(|w| w[1] <= 1.1 * w[0]),
        strictly_decreasing: distances.windows(2).all(|w| w[1] < w[0]),
        distances,
        interval,
    })
}

/// Bracket check for `V''` in the outermost decade of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondDerivativeReport {
    /// Empirical slope bound `max(-V'(x)/x)` over the decade.
    pub slope_bound: f64,
    pub lower: f64,
    pub upper: f64,
    pub min_v2: f64,
    pub max_v2: f64,
    pub within_bracket: bool,
    /// Largest relative gap between the equation-based `V''` and the centered
    /// second difference on interior decade nodes.
    pub max_rel_gap: f64,
}

pub fn second_derivative_bounds_check(
    vf: &ValueFunction,
    params: &LakeParams,
) -> Result<SecondDerivativeReport> {
    if vf.provenance != Provenance::Hjb {
        return Err(LakeError::Domain(
            "bounds check needs a solver-produced value function".into(),
        ));
    }
    let s2 = vf.sigma * vf.sigma;
    let a = params.with_sigma(vf.sigma)?.far_field_coefficient();
    let xs = vf.x();
    let h = vf.grid.h();
    let start = cell_index(&xs, vf.grid.x_max / 10.0) + 1;
    let n = xs.len();
    let slope_bound = (start..n).map(|i| -vf.vp[i] / xs[i]).fold(0.0f64, f64::max);
    let lower = 2.0 * (-params.rho * a - params.b * slope_bound + params.c) / s2;
    let upper = 2.0 * (-params.rho * a + params.c) / s2;
    let tail = &vf.v2[start..];
    let min_v2 = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_v2 = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_rel_gap = (start..n - 1)
        .map(|i| {
            let fd = (vf.v[i + 1] - 2.0 * vf.v[i] + vf.v[i - 1]) / (h * h);
            (vf.v2[i] - fd).abs() / fd.abs()
        })
        .fold(0.0f64, f64::max);
    Ok(SecondDerivativeReport {
        slope_bound,
        lower,
        upper,
        min_v2,
        max_v2,
        within_bracket: min_v2.is_finite() && min_v2 >= lower && max_v2 <= upper,
        max_rel_gap,
    })
}

/// `sup |V_fine - V_coarse|` over the coarse nodes, with the fine solution
/// interpolated linearly.
pub fn grid_difference(coarse: &ValueFunction, fine: &ValueFunction) -> f64 {
    let xf = fine.x();
    coarse
        .x()
        .iter()
        .zip(&coarse.v)
        .map(|(&x, &v)| (lerp(&xf, &fine.v, x) - v).abs())
        .fold(0.0f64, f64::max)
}
