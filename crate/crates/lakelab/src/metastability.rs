//! Metastability of the optimally controlled lake.
//!
//! In `y = ln x` the controlled state follows
//!
//! ```text
//! dy = -F'(y) dt + sigma dW,   F'(y) = -(u*(x) - b x + r(x))/x + sigma²/2,
//! ```
//!
//! so transitions between the oligotrophic and eutrophic states are exits from
//! the wells of the potential `F`. With `eps = sigma²/2` the mean time to reach
//! `y₋` from `y₊` is
//!
//! ```text
//! E[τ] = (1/eps) ∫_{y₋}^{y₊} ∫_z^∞ exp((F(z) - F(y))/eps) dy dz,
//! ```
//!
//! and `eps ln E[τ]` tends to the barrier height of the deterministic potential.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LakeError, Result};
use crate::hjb::{solve_hjb_with, GridSpec, HjbOptions, Provenance, ValueFunction};
use crate::model::{LakeParams, RecyclingCurve};
use crate::numerics::{bisect, gauss_legendre, hermite, log_add, log_gauss_legendre, pairwise_sum};
use crate::ode::Dopri5;

/// Uniform grid in `y` with `0` as a node: `y_k = k·dy`, `k_min ≤ k ≤ k_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YGrid {
    pub k_min: i64,
    pub k_max: i64,
    pub dy: f64,
}

impl YGrid {
    /// Smallest grid with spacing `dy` covering `[y_min, y_max]` and `0`.
    pub fn covering(y_min: f64, y_max: f64, dy: f64) -> Result<Self> {
        if !(dy > 0.0) || !(y_max > y_min) || !y_min.is_finite() || !y_max.is_finite() {
            return Err(LakeError::Domain(format!(
                "bad y-grid [{y_min}, {y_max}] with dy = {dy}"
            )));
        }
        Ok(YGrid {
            k_min: ((y_min / dy).floor() as i64).min(0),
            k_max: ((y_max / dy).ceil() as i64).max(0),
            dy,
        })
    }

    pub fn len(&self) -> usize {
        (self.k_max - self.k_min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.k_max < self.k_min
    }

    pub fn y(&self, i: usize) -> f64 {
        (self.k_min + i as i64) as f64 * self.dy
    }

    pub fn y_min(&self) -> f64 {
        self.y(0)
    }

    pub fn y_max(&self) -> f64 {
        self.y(self.len() - 1)
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.y(i)).collect()
    }

    /// Index of the node holding `y = 0`.
    pub fn origin(&self) -> usize {
        (-self.k_min) as usize
    }

    fn cell(&self, y: f64) -> usize {
        let i = ((y - self.y_min()) / self.dy).floor();
        (i.max(0.0) as usize).min(self.len() - 2)
    }
}

/// Linear lower bound `F(y) ≥ slope·y + intercept` valid for `y ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    pub slope: f64,
    pub intercept: f64,
}

impl TailBound {
    /// `ln ∫_{y_u}^∞ exp(-(slope·y + intercept)/eps) dy`.
    fn log_tail(&self, eps: f64, y_upper: f64) -> f64 {
        (eps / self.slope).ln() - (self.slope * y_upper + self.intercept) / eps
    }
}

/// Well and barrier locations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wells {
    pub lower: f64,
    pub barrier: f64,
    pub upper: f64,
}

impl Wells {
    pub fn x_lower(&self) -> f64 {
        self.lower.exp()
    }

    pub fn x_upper(&self) -> f64 {
        self.upper.exp()
    }

    pub fn x_barrier(&self) -> f64 {
        self.barrier.exp()
    }
}

/// Potential `F` sampled on a [`YGrid`], anchored at `F(0) = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Potential {
    pub grid: YGrid,
    pub f: Vec<f64>,
    pub fp: Vec<f64>,
    pub sigma: f64,
    pub wells: Option<Wells>,
    pub tail: TailBound,
}

impl Potential {
    /// A potential from nodal values; wells are located from `fp`.
    pub fn from_samples(
        grid: YGrid,
        f: Vec<f64>,
        fp: Vec<f64>,
        sigma: f64,
        tail: TailBound,
    ) -> Result<Self> {
        if f.len() != grid.len() || fp.len() != grid.len() {
            return Err(LakeError::Domain(
                "sample count does not match the grid".into(),
            ));
        }
        let mut pot = Potential {
            grid,
            f,
            fp,
            sigma,
            wells: None,
            tail,
        };
        pot.wells = locate_wells(&pot.grid, &pot.fp, |y| pot.derivative(y));
        Ok(pot)
    }

    /// Overrides the located wells.
    pub fn with_wells(mut self, wells: Wells) -> Self {
        self.wells = Some(wells);
        self
    }

    pub fn y(&self) -> Vec<f64> {
        self.grid.nodes()
    }

    /// `F(y)` by cubic Hermite interpolation of the nodal values and slopes.
    pub fn value(&self, y: f64) -> f64 {
        let i = self.grid.cell(y);
        let (a, b) = (self.grid.y(i), self.grid.y(i + 1));
        hermite(
            a,
            b,
            self.f[i],
            self.f[i + 1],
            self.fp[i],
            self.fp[i + 1],
            y,
        )
    }

    /// `F'(y)`, linear between nodes and constant outside the grid.
    pub fn derivative(&self, y: f64) -> f64 {
        if y <= self.grid.y_min() {
            return self.fp[0];
        }
        if y >= self.grid.y_max() {
            return self.fp[self.fp.len() - 1];
        }
        let i = self.grid.cell(y);
        let t = (y - self.grid.y(i)) / self.grid.dy;
        self.fp[i] + t * (self.fp[i + 1] - self.fp[i])
    }

    /// `F(y⋆) - F(y₊)`.
    pub fn barrier_height(&self) -> Option<f64> {
        self.wells
            .map(|w| self.value(w.barrier) - self.value(w.upper))
    }

    pub fn require_bistable(&self) -> Result<Wells> {
        self.wells.ok_or_else(|| {
            LakeError::NotBistable(format!(
                "no minimum/maximum/minimum pattern of F on [{}, {}] at sigma = {}",
                self.grid.y_min(),
                self.grid.y_max(),
                self.sigma
            ))
        })
    }
}

/// First min/max/min triple of `F` in ascending `y`, refined by bisection on `F'`.
fn locate_wells<D: Fn(f64) -> f64>(grid: &YGrid, fp: &[f64], deriv: D) -> Option<Wells> {
    let mut extrema: Vec<(f64, bool)> = Vec::new();
    for i in 0..fp.len() - 1 {
        let (a, b) = (fp[i], fp[i + 1]);
        let is_min = a < 0.0 && b >= 0.0;
        let is_max = a > 0.0 && b <= 0.0;
        if is_min || is_max {
            let y = bisect(grid.y(i), grid.y(i + 1), 1e-13, &deriv);
            extrema.push((y, is_min));
        }
    }
    extrema.windows(3).find_map(|w| match w {
        [(l, true), (m, false), (u, true)] => Some(Wells {
            lower: *l,
            barrier: *m,
            upper: *u,
        }),
        _ => None,
    })
}

/// `F'(y) = -(u*(x) - b x + r(x))/x + sigma²/2` at `x = e^y`.
pub fn potential_slope(
    vf: &ValueFunction,
    params: &LakeParams,
    curve: &RecyclingCurve,
    y: f64,
) -> f64 {
    let x = y.exp();
    let u = vf.control(x);
    -(u - params.b * x + curve.r(x)) / x + 0.5 * vf.sigma * vf.sigma
}

/// Builds `F` from a value function.
///
/// The noise term uses `vf.sigma`, so a deterministic candidate yields the
/// deterministic potential.
pub fn build_potential(
    vf: &ValueFunction,
    params: &LakeParams,
    curve: &RecyclingCurve,
    grid: YGrid,
) -> Result<Potential> {
    let x_hi = grid.y_max().exp();
    if x_hi > vf.grid.x_max * (1.0 + 1e-12) {
        return Err(LakeError::Domain(format!(
            "y-grid reaches x = {x_hi}, beyond the value function domain [0, {}]",
            vf.grid.x_max
        )));
    }
    let slope = |y: f64| potential_slope(vf, params, curve, y);
    let ys = grid.nodes();
    let fp: Vec<f64> = ys.iter().map(|&y| slope(y)).collect();
    for &y in &ys {
        let u = vf.control(y.exp());
        if !(u > 0.0) || !u.is_finite() {
            return Err(LakeError::Domain(format!(
                "V' is not negative at x = {}",
                y.exp()
            )));
        }
    }
    // A deterministic candidate has a derivative jump at the Skiba point; split
    // the cell there so the quadrature never straddles it.
    let kink = match (vf.provenance, vf.skiba) {
        (Provenance::Pontryagin, Some(s)) => Some(s.x.ln()),
        _ => None,
    };
    let cell_integral = |a: f64, b: f64| match kink {
        Some(k) if k > a && k < b => gauss_legendre(a, k, slope) + gauss_legendre(k, b, slope),
        _ => gauss_legendre(a, b, slope),
    };
    let increments: Vec<f64> = (0..ys.len() - 1)
        .into_par_iter()
        .map(|i| cell_integral(ys[i], ys[i + 1]))
        .collect();
    let o = grid.origin();
    let mut f = vec![0.0; ys.len()];
    for i in o + 1..ys.len() {
        f[i] = f[i - 1] + increments[i - 1];
    }
    for i in (0..o).rev() {
        f[i] = f[i + 1] - increments[i];
    }

    // F(y) - b y is bounded below for y ≥ 0: beyond the grid F' - b ≥ -(u + a)/x
    // with u non-increasing, which integrates to at most (u(x_e) + a)/x_e.
    let b = params.b;
    let grid_min = ys
        .iter()
        .zip(&f)
        .filter(|(y, _)| **y >= 0.0)
        .map(|(y, f)| f - b * y)
        .fold(f64::INFINITY, f64::min);
    let x_e = x_hi;
    let beyond = f[f.len() - 1] - b * grid.y_max() - (vf.control(x_e) + curve.asymptote()) / x_e;
    let tail = TailBound {
        slope: b,
        intercept: grid_min.min(beyond),
    };

    let mut pot = Potential {
        grid,
        f,
        fp,
        sigma: vf.sigma,
        wells: None,
        tail,
    };
    pot.wells = locate_wells(&grid, &pot.fp, slope);
    Ok(pot)
}

pub const DEFAULT_DY: f64 = 1e-3;
pub const DEFAULT_X_LO: f64 = 1e-2;

/// y-grid over `[ln(x_lo), ln(x_max)]` with spacing `dy`.
pub fn y_grid(vf: &ValueFunction, x_lo: f64, dy: f64) -> Result<YGrid> {
    if !(x_lo > 0.0) || !(x_lo < vf.grid.x_max) {
        return Err(LakeError::Domain(format!(
            "x_lo = {x_lo} outside (0, {})",
            vf.grid.x_max
        )));
    }
    YGrid::covering(x_lo.ln(), vf.grid.x_max.ln(), dy).map(|g| clip_to_domain(g, vf.grid.x_max))
}

/// Default y-grid for a value function: `[ln(x_lo), ln(x_max)]`, `dy = 1e-3`.
pub fn default_y_grid(vf: &ValueFunction, x_lo: f64) -> Result<YGrid> {
    y_grid(vf, x_lo, DEFAULT_DY)
}

/// Value of the exit-time double integral with its truncation bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitTimeQuadrature {
    pub value: f64,
    pub log_value: f64,
    /// Bound on the contribution of `y > y_upper`.
    pub truncation_bound: f64,
}

/// Mean exit time from `y₊` to `y₋` using the potential's own wells.
pub fn mean_exit_time_quadrature(
    pot: &Potential,
    eps: f64,
    y_upper: f64,
) -> Result<ExitTimeQuadrature> {
    let w = pot.require_bistable()?;
    mean_exit_time_between(pot, eps, w.lower, w.upper, y_upper)
}

/// `(1/eps) ∫_{y_absorb}^{y_start} ∫_z^{y_upper} exp((F(z) - F(y))/eps) dy dz`
/// accumulated in log space, plus the tail bound for the truncated range.
///
/// Fails when the bound exceeds `1e-6` of the value.
pub fn mean_exit_time_between(
    pot: &Potential,
    eps: f64,
    y_absorb: f64,
    y_start: f64,
    y_upper: f64,
) -> Result<ExitTimeQuadrature> {
    let q = truncated_exit_time(pot, eps, y_absorb, y_start, y_upper)?;
    if q.truncation_bound > 1e-6 * q.value {
        return Err(LakeError::TailTooLarge {
            bound: q.truncation_bound,
            value: q.value,
        });
    }
    Ok(q)
}

fn truncated_exit_time(
    pot: &Potential,
    eps: f64,
    y_absorb: f64,
    y_start: f64,
    y_upper: f64,
) -> Result<ExitTimeQuadrature> {
    if !(eps > 0.0) {
        return Err(LakeError::Domain(format!(
            "eps must be positive (got {eps})"
        )));
    }
    if !(y_absorb < y_start) || !(y_upper > y_start) {
        return Err(LakeError::Domain(format!(
            "need y_absorb < y_start < y_upper, got {y_absorb}, {y_start}, {y_upper}"
        )));
    }
    if y_absorb < pot.grid.y_min() || y_upper > pot.grid.y_max() + 1e-12 {
        return Err(LakeError::Domain(format!(
            "[{y_absorb}, {y_upper}] leaves the potential grid [{}, {}]",
            pot.grid.y_min(),
            pot.grid.y_max()
        )));
    }
    // breakpoints: grid nodes inside (y_absorb, y_upper) plus the three endpoints
    let mut pts: Vec<f64> = pot
        .grid
        .nodes()
        .into_iter()
        .filter(|&y| y > y_absorb && y < y_upper)
        .collect();
    pts.extend([y_absorb, y_start, y_upper]);
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);

    let neg = |y: f64| -pot.value(y) / eps;
    // log of the inner integral from each breakpoint up to y_upper
    let m = pts.len();
    let mut log_inner = vec![f64::NEG_INFINITY; m];
    for i in (0..m - 1).rev() {
        log_inner[i] = log_add(
            log_inner[i + 1],
            log_gauss_legendre(pts[i], pts[i + 1], neg),
        );
    }
    let start = pts.iter().position(|&y| y >= y_start).unwrap();
    let mut log_outer = f64::NEG_INFINITY;
    for i in 0..start {
        let (a, b) = (pts[i], pts[i + 1]);
        let cell = log_gauss_legendre(a, b, |z| {
            let partial = log_gauss_legendre(z, b, neg);
            pot.value(z) / eps + log_add(partial, log_inner[i + 1])
        });
        log_outer = log_add(log_outer, cell);
    }
    let log_value = log_outer - eps.ln();

    // (1/eps) ∫ exp(F(z)/eps) dz ≤ (span/eps) exp(max F/eps) over [y_absorb, y_start]
    let max_f = pts[..=start]
        .iter()
        .map(|&y| pot.value(y))
        .fold(f64::NEG_INFINITY, f64::max);
    let log_bound =
        ((y_start - y_absorb) / eps).ln() + max_f / eps + pot.tail.log_tail(eps, y_upper);
    Ok(ExitTimeQuadrature {
        value: log_value.exp(),
        log_value,
        truncation_bound: log_bound.exp(),
    })
}

/// Monte-Carlo settings for exit-time experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Paths still running at this time are censored.
    pub t_cap: f64,
    /// Fraction of paths repeated at `dt/2` to flag step-size bias.
    pub control_fraction: f64,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings {
            dt: 1e-3,
            n_paths: 10_000,
            seed: 0,
            t_cap: 1e4,
            control_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlRun {
    pub n_paths: usize,
    pub mean: f64,
    pub stderr: f64,
    /// The half-step mean differs from the main mean by more than two combined
    /// standard errors.
    pub biased: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitSimulation {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub censored: usize,
    /// No noise: the path cannot leave a stable well.
    pub diverged: bool,
    pub control: Option<ControlRun>,
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Euler–Maruyama in `y` until `y ≤ y_absorb`; `None` when censored.
fn exit_path(
    pot: &Potential,
    sigma: f64,
    y0: f64,
    y_absorb: f64,
    dt: f64,
    t_cap: f64,
    rng: &mut ChaCha8Rng,
) -> Option<f64> {
    let noise = sigma * dt.sqrt();
    let max_steps = (t_cap / dt).ceil() as u64;
    let mut y = y0;
    for k in 1..=max_steps {
        let xi: f64 = StandardNormal.sample(rng);
        y += -pot.derivative(y) * dt + noise * xi;
        if y <= y_absorb {
            return Some(k as f64 * dt);
        }
    }
    None
}

fn mean_and_stderr(times: &[f64]) -> (f64, f64) {
    let n = times.len() as f64;
    let mean = pairwise_sum(times) / n;
    let dev: Vec<f64> = times.iter().map(|t| (t - mean) * (t - mean)).collect();
    let var = if times.len() > 1 {
        pairwise_sum(&dev) / (n - 1.0)
    } else {
        0.0
    };
    (mean, (var / n).sqrt())
}

fn run_paths(
    pot: &Potential,
    sigma: f64,
    y0: f64,
    y_absorb: f64,
    dt: f64,
    t_cap: f64,
    seed: u64,
    ids: std::ops::Range<u64>,
) -> (Vec<f64>, usize) {
    let results: Vec<Option<f64>> = ids
        .into_par_iter()
        .map(|id| exit_path(pot, sigma, y0, y_absorb, dt, t_cap, &mut path_rng(seed, id)))
        .collect();
    let censored = results.iter().filter(|r| r.is_none()).count();
    (results.into_iter().flatten().collect(), censored)
}

/// Monte-Carlo mean of the first time the controlled lake started at
/// `x_start` falls to `x_absorb`.
///
/// Path `i` draws from ChaCha stream `i` of `seed`; the half-step control run
/// uses the streams after the main ones.
pub fn simulate_exit(
    vf: &ValueFunction,
    params: &LakeParams,
    curve: &RecyclingCurve,
    x_start: f64,
    x_absorb: f64,
    settings: &McSettings,
) -> Result<ExitSimulation> {
    if !(x_absorb > 0.0) || !(x_absorb < x_start) || x_start > vf.grid.x_max {
        return Err(LakeError::Domain(format!(
            "need 0 < x_absorb < x_start ≤ {}, got {x_absorb}, {x_start}",
            vf.grid.x_max
        )));
    }
    if !(settings.dt > 0.0) || settings.n_paths == 0 {
        return Err(LakeError::Domain(
            "dt must be positive and n_paths nonzero".into(),
        ));
    }
    let grid = YGrid::covering(x_absorb.ln() - 0.1, vf.grid.x_max.ln(), 1e-3)?;
    let grid = clip_to_domain(grid, vf.grid.x_max);
    let pot = build_potential(vf, params, curve, grid)?;
    let (y0, ya) = (x_start.ln(), x_absorb.ln());
    let n = settings.n_paths;

    if vf.sigma == 0.0 {
        // every path is the same deterministic trajectory
        let hit = exit_path(
            &pot,
            0.0,
            y0,
            ya,
            settings.dt,
            settings.t_cap,
            &mut path_rng(settings.seed, 0),
        );
        return Ok(match hit {
            Some(t) => ExitSimulation {
                mean: t,
                stderr: 0.0,
                n_paths: n,
                censored: 0,
                diverged: false,
                control: None,
            },
            None => ExitSimulation {
                mean: f64::INFINITY,
                stderr: f64::NAN,
                n_paths: n,
                censored: n,
                diverged: true,
                control: None,
            },
        });
    }

    let (times, censored) = run_paths(
        &pot,
        vf.sigma,
        y0,
        ya,
        settings.dt,
        settings.t_cap,
        settings.seed,
        0..n as u64,
    );
    if censored * 100 > n {
        return Err(LakeError::Censored { censored, paths: n });
    }
    let (mean, stderr) = mean_and_stderr(&times);
    let m = ((n as f64) * settings.control_fraction).round() as usize;
    let control = (m > 1).then(|| {
        let ids = n as u64..(n + m) as u64;
        let (ct, _) = run_paths(
            &pot,
            vf.sigma,
            y0,
            ya,
            0.5 * settings.dt,
            settings.t_cap,
            settings.seed,
            ids,
        );
        let (cm, cs) = mean_and_stderr(&ct);
        let biased = (cm - mean).abs() > 2.0 * (stderr * stderr + cs * cs).sqrt();
        if biased {
            log::warn!("half-step control mean {cm} differs from {mean}: step-size bias");
        }
        ControlRun {
            n_paths: ct.len(),
            mean: cm,
            stderr: cs,
            biased,
        }
    });
    Ok(ExitSimulation {
        mean,
        stderr,
        n_paths: n,
        censored,
        diverged: false,
        control,
    })
}

/// Drops nodes with `e^y > x_max`.
fn clip_to_domain(mut g: YGrid, x_max: f64) -> YGrid {
    while g.y_max().exp() > x_max {
        g.k_max -= 1;
    }
    g
}

/// Settings for trajectory sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSettings {
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    /// Spacing of recorded samples.
    pub sample_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub path_id: usize,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
}

/// Trajectories of the optimally controlled lake from each start.
///
/// Without noise the closed-loop ODE `x' = u*(x) - b x + r(x)` is integrated
/// adaptively; with noise, Euler–Maruyama in `y = ln x`.
pub fn simulate_paths(
    vf: &ValueFunction,
    params: &LakeParams,
    curve: &RecyclingCurve,
    x_starts: &[f64],
    settings: &PathSettings,
) -> Result<Vec<PathRecord>> {
    for &x in x_starts {
        if !(x > 0.0) || x > vf.grid.x_max {
            return Err(LakeError::Domain(format!(
                "start {x} outside (0, {}]",
                vf.grid.x_max
            )));
        }
    }
    if vf.sigma == 0.0 {
        return x_starts
            .par_iter()
            .enumerate()
            .map(|(id, &x0)| deterministic_path(vf, params, curve, id, x0, settings))
            .collect();
    }
    let x_lo = x_starts
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .min(1e-2);
    let grid = clip_to_domain(
        YGrid::covering(x_lo.ln() - 2.0, vf.grid.x_max.ln(), 1e-3)?,
        vf.grid.x_max,
    );
    let pot = build_potential(vf, params, curve, grid)?;
    let stride = (settings.sample_dt / settings.dt).round().max(1.0) as usize;
    let steps = (settings.horizon / settings.dt).ceil() as usize;
    let noise = vf.sigma * settings.dt.sqrt();
    Ok(x_starts
        .par_iter()
        .enumerate()
        .map(|(id, &x0)| {
            let mut rng = path_rng(settings.seed, id as u64);
            let mut y = x0.ln();
            let mut rec = PathRecord {
                path_id: id,
                t: vec![0.0],
                x: vec![x0],
            };
            for k in 1..=steps {
                let xi: f64 = StandardNormal.sample(&mut rng);
                y += -pot.derivative(y) * settings.dt + noise * xi;
                if k % stride == 0 {
                    rec.t.push(k as f64 * settings.dt);
                    rec.x.push(y.exp());
                }
            }
            rec
        })
        .collect())
}

fn deterministic_path(
    vf: &ValueFunction,
    params: &LakeParams,
    curve: &RecyclingCurve,
    id: usize,
    x0: f64,
    settings: &PathSettings,
) -> Result<PathRecord> {
    let x_max = vf.grid.x_max;
    let rhs = |_t: f64, s: &[f64; 1]| {
        let x = s[0].clamp(0.0, x_max);
        [vf.control(x) - params.b * x + curve.r(x)]
    };
    let mut rec = PathRecord {
        path_id: id,
        t: Vec::new(),
        x: Vec::new(),
    };
    let mut next = 0.0;
    let solver = Dopri5::with_tolerance(1e-10, 1e-12);
    solver.solve(
        rhs,
        0.0,
        [x0],
        settings.horizon,
        |_| settings.sample_dt,
        &[],
        |t, s| {
            if t >= next - 1e-12 {
                rec.t.push(t);
                rec.x.push(s[0]);
                next += settings.sample_dt;
            }
            true
        },
    )?;
    Ok(rec)
}

/// One rung of the noise ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitTimeReport {
    pub sigma: f64,
    pub epsilon: f64,
    pub tau_quadrature: f64,
    pub tau_mc: Option<f64>,
    pub tau_mc_stderr: Option<f64>,
    pub eps_log_tau: f64,
    /// `F_sigma(y⋆) - F_sigma(y₊)` at the deterministic barrier and well.
    pub barrier_height: f64,
    pub truncation_error_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrheniusReport {
    pub rows: Vec<ExitTimeReport>,
    /// Rungs that failed, with the error message.
    pub failures: Vec<(f64, String)>,
    /// Deterministic barrier height `F₀(y⋆) - F₀(y₊)`.
    pub delta_f0: f64,
    pub wells: Wells,
    /// `|eps ln E[τ] - ΔF₀|` per successful rung.
    pub distances: Vec<f64>,
    pub strictly_decreasing: bool,
    /// Least-squares line `eps ln E[τ] ≈ intercept + slope·eps`.
    pub intercept: Option<f64>,
    pub slope: Option<f64>,
    pub warnings: Vec<String>,
}

impl ArrheniusReport {
    pub fn intercept_rel_error(&self) -> Option<f64> {
        self.intercept
            .map(|c| (c - self.delta_f0).abs() / self.delta_f0)
    }
}

/// Options for [`arrhenius_estimate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrheniusOptions {
    pub grid: Option<GridSpec>,
    pub hjb: HjbOptions,
    /// Left end of the potential grid in `x`.
    pub x_lo: f64,
    /// Potential grid spacing in `y`.
    pub dy: f64,
    /// Monte-Carlo cross-check per rung.
    pub mc: Option<McSettings>,
}

impl Default for ArrheniusOptions {
    fn default() -> Self {
        ArrheniusOptions {
            grid: None,
            hjb: HjbOptions::default(),
            x_lo: DEFAULT_X_LO,
            dy: DEFAULT_DY,
            mc: None,
        }
    }
}

/// The deterministic potential with its wells, from the Pontryagin candidate.
pub fn deterministic_potential(
    params: &LakeParams,
    curve: &RecyclingCurve,
    grid: &GridSpec,
) -> Result<(ValueFunction, Potential)> {
    let p0 = params.with_sigma(0.0)?;
    let (_, cand) = crate::pontryagin::deterministic_candidate(&p0, curve, grid.x_max)?;
    let vf = ValueFunction::from_candidate(cand, *grid)?;
    let ygrid = default_y_grid(&vf, DEFAULT_X_LO)?;
    let pot = build_potential(&vf, &p0, curve, ygrid)?;
    Ok((vf, pot))
}

/// `eps ln E[τ]` along a noise ladder against the deterministic barrier.
///
/// Exit times always run between the wells of the deterministic potential.
pub fn arrhenius_estimate(
    params: &LakeParams,
    curve: &RecyclingCurve,
    ladder: &[f64],
    opts: &ArrheniusOptions,
) -> Result<ArrheniusReport> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LakeError::Domain(
            "sigma ladder must be non-empty and strictly decreasing".into(),
        ));
    }
    let grid = match opts.grid {
        Some(g) => g,
        None => GridSpec::default_for(params, curve, crate::hjb::DEFAULT_NODES)?,
    };
    let (_, f0) = deterministic_potential(params, curve, &grid)?;
    let wells = f0.require_bistable()?;
    let delta_f0 = f0.barrier_height().unwrap();

    let outcomes: Vec<Result<ExitTimeReport>> = ladder
        .par_iter()
        .map(|&sigma| exit_time_rung(params, curve, &grid, sigma, &wells, opts))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (sigma, out) in ladder.iter().zip(outcomes) {
        match out {
            Ok(r) => rows.push(r),
            Err(e) => {
                log::warn!("sigma = {sigma}: {e}");
                failures.push((*sigma, e.to_string()));
            }
        }
    }
    let distances: Vec<f64> = rows
        .iter()
        .map(|r| (r.eps_log_tau - delta_f0).abs())
        .collect();
    let mut warnings = Vec::new();
    let (intercept, slope) = if rows.len() >= 2 {
        let (c, s) = least_squares(
            &rows.iter().map(|r| r.epsilon).collect::<Vec<_>>(),
            &rows.iter().map(|r| r.eps_log_tau).collect::<Vec<_>>(),
        );
        (Some(c), Some(s))
    } else {
        let msg = format!("ladder has {} usable rung(s); no extrapolation", rows.len());
        log::warn!("{msg}");
        warnings.push(msg);
        (None, None)
    };
    Ok(ArrheniusReport {
        strictly_decreasing: distances.windows(2).all(|w| w[1] < w[0]),
        rows,
        failures,
        delta_f0,
        wells,
        distances,
        intercept,
        slope,
        warnings,
    })
}

fn exit_time_rung(
    params: &LakeParams,
    curve: &RecyclingCurve,
    grid: &GridSpec,
    sigma: f64,
    wells: &Wells,
    opts: &ArrheniusOptions,
) -> Result<ExitTimeReport> {
    let p = params.with_sigma(sigma)?;
    let (vf, _) = solve_hjb_with(&p, curve, grid, &opts.hjb)?;
    let pot = build_potential(&vf, &p, curve, y_grid(&vf, opts.x_lo, opts.dy)?)?;
    exit_time_report(&vf, &pot, &p, curve, wells, opts.mc.as_ref())
}

/// Mean exit time from `wells.upper` to `wells.lower` under the potential of
/// `vf`, by quadrature and optionally by simulation.
pub fn exit_time_report(
    vf: &ValueFunction,
    pot: &Potential,
    params: &LakeParams,
    curve: &RecyclingCurve,
    wells: &Wells,
    mc: Option<&McSettings>,
) -> Result<ExitTimeReport> {
    let eps = params.epsilon();
    let q = mean_exit_time_between(pot, eps, wells.lower, wells.upper, pot.grid.y_max())?;
    let (tau_mc, tau_mc_stderr) = match mc {
        Some(mc) => {
            let sim = simulate_exit(vf, params, curve, wells.x_upper(), wells.x_lower(), mc)?;
            (Some(sim.mean), Some(sim.stderr))
        }
        None => (None, None),
    };
    Ok(ExitTimeReport {
        sigma: params.sigma,
        epsilon: eps,
        tau_quadrature: q.value,
        tau_mc,
        tau_mc_stderr,
        eps_log_tau: eps * q.log_value,
        barrier_height: pot.value(wells.barrier) - pot.value(wells.upper),
        truncation_error_bound: q.truncation_bound,
    })
}

/// Ordinary least squares `y ≈ c + s x`; returns `(c, s)`.
fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let s = sxy / sxx;
    (my - s * mx, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(dy: f64, y_upper: f64) -> Potential {
        let grid = YGrid::covering(-3.0, y_upper, dy).unwrap();
        let ys = grid.nodes();
        let f = ys.iter().map(|y| 0.5 * y * y).collect();
        let fp = ys.clone();
        // y²/2 ≥ y_u·y - y_u²/2 everywhere
        let tail = TailBound {
            slope: y_upper,
            intercept: -0.5 * y_upper * y_upper,
        };
        Potential::from_samples(grid, f, fp, 0.0, tail)
            .unwrap()
            .with_wells(Wells {
                lower: -1.0,
                barrier: 0.0,
                upper: 1.0,
            })
    }

    #[test]
    fn grid_contains_origin() {
        let g = YGrid::covering(-0.73, 2.99, 0.01).unwrap();
        assert_eq!(g.y(g.origin()), 0.0);
        assert!(g.y_min() <= -0.73 && g.y_max() >= 2.99);
        let g = YGrid::covering(0.5, 2.0, 0.1).unwrap();
        assert_eq!(g.y_min(), 0.0);
        assert!(YGrid::covering(1.0, 0.0, 0.1).is_err());
    }

    #[test]
    fn constant_shift_leaves_exit_time_unchanged() {
        let a = quadratic(1e-3, 8.0);
        let mut b = a.clone();
        b.f.iter_mut().for_each(|f| *f += 7.0);
        b.tail.intercept += 7.0;
        let qa = mean_exit_time_quadrature(&a, 0.1, 8.0).unwrap();
        let qb = mean_exit_time_quadrature(&b, 0.1, 8.0).unwrap();
        assert!((qa.value - qb.value).abs() <= 1e-12 * qa.value);
    }

    #[test]
    fn tail_bound_dominates_truncation_change() {
        let p = quadratic(1e-3, 8.0);
        for eps in [0.5, 1.0, 2.0] {
            for y_u in [2.0, 3.0, 4.0] {
                let a = truncated_exit_time(&p, eps, -1.0, 1.0, y_u).unwrap();
                let b = truncated_exit_time(&p, eps, -1.0, 1.0, y_u + 1.0).unwrap();
                assert!(b.value > a.value);
                assert!(b.value - a.value <= a.truncation_bound, "{eps} {y_u}");
            }
        }
        assert!(matches!(
            mean_exit_time_between(&p, 2.0, -1.0, 1.0, 2.0),
            Err(LakeError::TailTooLarge { .. })
        ));
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = quadratic(1e-2, 8.0);
        assert!(mean_exit_time_between(&p, 0.0, -1.0, 1.0, 8.0).is_err());
        assert!(mean_exit_time_between(&p, 0.1, 1.0, -1.0, 8.0).is_err());
        assert!(mean_exit_time_between(&p, 0.1, -1.0, 1.0, 9.0).is_err());
    }

    #[test]
    fn wells_of_a_double_well() {
        let grid = YGrid::covering(-2.0, 2.0, 1e-3).unwrap();
        let ys = grid.nodes();
        let f: Vec<f64> = ys.iter().map(|y| 0.25 * y.powi(4) - 0.5 * y * y).collect();
        let fp: Vec<f64> = ys.iter().map(|y| y.powi(3) - y).collect();
        let tail = TailBound {
            slope: 1.0,
            intercept: -1.0,
        };
        let p = Potential::from_samples(grid, f, fp, 0.0, tail).unwrap();
        let w = p.wells.unwrap();
        assert!((w.lower + 1.0).abs() < 1e-9);
        assert!(w.barrier.abs() < 1e-9);
        assert!((w.upper - 1.0).abs() < 1e-9);
        assert!((p.barrier_height().unwrap() - 0.25).abs() < 1e-9);
    }

    #[test]
    fn least_squares_recovers_a_line() {
        let (c, s) = least_squares(&[0.1, 0.2, 0.4], &[1.3, 1.6, 2.2]);
        assert!((c - 1.0).abs() < 1e-12 && (s - 3.0).abs() < 1e-12);
    }

    #[test]
    fn mean_and_stderr_of_known_sample() {
        let (m, s) = mean_and_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
