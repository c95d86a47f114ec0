use std::path::{Path, PathBuf};

use lakelab::cache::{CacheStatus, ValueCache};
use lakelab::hjb::{self, HjbOptions, SolveReport, ValueFunction, U_FLOOR};
use lakelab::metastability::{
    arrhenius_estimate, build_potential, exit_time_report, simulate_paths, y_grid,
    ArrheniusOptions, ExitTimeReport, McSettings, PathSettings, Potential,
};
use lakelab::pontryagin::{
    deterministic_candidate, find_equilibria, saddle_branches, ManifoldBounds, SkibaPoint,
};
use lakelab::{LakeError, LakeParams};

use crate::config::Resolved;
use crate::output::{number, Csv, Opt};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(LakeError),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(e) => write!(f, "numerical failure: {e}"),
            CliError::Io(m) => write!(f, "I/O failure: {m}"),
        }
    }
}

impl From<LakeError> for CliError {
    fn from(e: LakeError) -> Self {
        match e {
            LakeError::Cache(_) | LakeError::Io(_) => CliError::Io(e.to_string()),
            e => CliError::Numerical(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub struct Context {
    pub resolved: Resolved,
    pub out_dir: PathBuf,
    pub cache: ValueCache,
}

type Outcome = Result<Vec<PathBuf>, CliError>;

impl Context {
    fn csv(&self, command: &str, columns: &[&'static str]) -> Csv {
        Csv::new(command, &self.resolved, columns)
    }

    fn write(&self, csv: &Csv, name: &str) -> Result<PathBuf, CliError> {
        csv.write(&self.out_dir, name)
            .map_err(|e| CliError::Io(format!("{}: {e}", self.out_dir.join(name).display())))
    }

    fn deterministic(&self) -> Result<LakeParams, CliError> {
        Ok(self.resolved.params.with_sigma(0.0)?)
    }

    fn hjb_options(&self) -> HjbOptions {
        let t = &self.resolved.settings.tolerances;
        HjbOptions {
            tol: t.hjb,
            max_iter: t.max_iter,
            u_floor: U_FLOOR,
        }
    }

    fn require_noise(&self, command: &str) -> Result<(), CliError> {
        if self.resolved.params.sigma > 0.0 {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "`{command}` needs params.sigma > 0"
            )))
        }
    }

    fn solve(&self) -> Result<(ValueFunction, SolveReport), CliError> {
        let r = &self.resolved;
        let (vf, report, status) =
            self.cache
                .solve(&r.params, &r.curve, &r.grid, &self.hjb_options())?;
        match status {
            CacheStatus::Hit => log::info!("value function loaded from cache"),
            CacheStatus::Miss => {
                log::info!("value function solved in {} iterations", report.iterations)
            }
            CacheStatus::Recomputed => log::warn!("corrupt cache entry replaced"),
        }
        Ok((vf, report))
    }

    /// The HJB solution for `sigma > 0`, the Pontryagin candidate otherwise.
    fn value_function(&self) -> Result<ValueFunction, CliError> {
        let r = &self.resolved;
        if r.params.sigma > 0.0 {
            Ok(self.solve()?.0)
        } else {
            let (_, cand) = deterministic_candidate(&r.params, &r.curve, r.grid.x_max)?;
            Ok(ValueFunction::from_candidate(cand, r.grid)?)
        }
    }

    fn potential(&self, vf: &ValueFunction, params: &LakeParams) -> Result<Potential, CliError> {
        let t = &self.resolved.settings.tolerances;
        let ygrid = y_grid(vf, t.potential_x_min, t.potential_dy)?;
        Ok(build_potential(vf, params, &self.resolved.curve, ygrid)?)
    }

    fn mc_settings(&self) -> McSettings {
        let mc = &self.resolved.settings.mc;
        McSettings {
            dt: mc.dt,
            n_paths: mc.n_paths,
            seed: mc.seed,
            t_cap: mc.t_cap,
            control_fraction: mc.control_fraction,
        }
    }
}

fn skiba_meta(csv: &mut Csv, skiba: &Option<SkibaPoint>) {
    match skiba {
        None => {
            csv.meta("skiba", "none");
        }
        Some(s) => {
            csv.meta("skiba_x", s.x)
                .meta("skiba_value_left", s.value_left)
                .meta("skiba_value_right", s.value_right)
                .meta("skiba_u_left", s.u_left)
                .meta("skiba_u_right", s.u_right)
                .meta("skiba_dv_left", s.dv_left)
                .meta("skiba_dv_right", s.dv_right)
                .meta("skiba_d2v_left", s.d2v_left)
                .meta("skiba_d2v_right", s.d2v_right)
                .meta("skiba_drift_left", s.drift_left)
                .meta("skiba_drift_right", s.drift_right)
                .meta("skiba_jump_sign", s.jump_sign());
        }
    }
}

pub fn equilibria(ctx: &Context) -> Outcome {
    let r = &ctx.resolved;
    let scan = find_equilibria(&ctx.deterministic()?, &r.curve, r.grid.x_max)?;
    let mut csv = ctx.csv(
        "equilibria",
        &[
            "x0",
            "u0",
            "lambda_minus",
            "lambda_plus",
            "kind",
            "stable_slope",
            "lambda_imag",
        ],
    );
    csv.meta("inadmissible_roots", &scan.inadmissible);
    for e in &scan.equilibria {
        csv.row(&[
            &e.x(),
            &e.u(),
            &e.eigenvalues[0],
            &e.eigenvalues[1],
            &e.kind,
            &Opt(e.stable_slope),
            &e.eigen_imag,
        ]);
    }
    Ok(vec![ctx.write(&csv, "equilibria.csv")?])
}

pub fn manifold(ctx: &Context) -> Outcome {
    let r = &ctx.resolved;
    let p0 = ctx.deterministic()?;
    let scan = find_equilibria(&p0, &r.curve, r.grid.x_max)?;
    let branches = saddle_branches(
        &p0,
        &r.curve,
        &scan.equilibria,
        &ManifoldBounds::new(0.0, r.grid.x_max),
    )?;
    let mut csv = ctx.csv("manifold", &["x", "u", "J_P", "branch_id"]);
    for (id, b) in branches.iter().enumerate() {
        csv.meta(
            &format!("branch {id}"),
            format!(
                "saddle x0 = {}, {:?}, ends at {:?}",
                number(b.source.x()),
                b.direction,
                b.end
            ),
        );
    }
    for (id, b) in branches.iter().enumerate() {
        for s in &b.samples {
            csv.row(&[&s.x, &s.u, &s.value, &id]);
        }
    }
    Ok(vec![ctx.write(&csv, "branches.csv")?])
}

pub fn value(ctx: &Context) -> Outcome {
    let r = &ctx.resolved;
    let (_, cand) = deterministic_candidate(&ctx.deterministic()?, &r.curve, r.grid.x_max)?;
    let mut csv = ctx.csv("value", &["x", "u", "J_P", "branch_id"]);
    skiba_meta(&mut csv, &cand.skiba);
    for p in &cand.pieces {
        csv.meta(
            &format!("piece branch {}", p.branch),
            format!("[{}, {}]", number(p.lo), number(p.hi)),
        );
    }
    for (id, s) in cand.envelope_samples() {
        csv.row(&[&s.x, &s.u, &s.value, &id]);
    }
    Ok(vec![ctx.write(&csv, "value.csv")?])
}

pub fn hjb(ctx: &Context) -> Outcome {
    ctx.require_noise("hjb")?;
    let r = &ctx.resolved;
    let (vf, rep) = ctx.solve()?;
    let res = hjb::residual(&vf, &r.params, &r.curve);
    let mut csv = ctx.csv("hjb", &["x", "V", "Vp", "V2", "residual"]);
    csv.meta("iterations", rep.iterations)
        .meta("scaled_residual", rep.residual)
        .meta("raw_residual", rep.raw_residual)
        .meta("policy_change", rep.policy_change)
        .meta("boundary_identity", rep.boundary_identity)
        .meta("V2_at_zero", rep.second_derivative_at_zero)
        .meta("V2_at_zero_formula", rep.second_derivative_formula)
        .meta("far_field_estimate", rep.far_field_estimate)
        .meta("far_field_coefficient", rep.far_field_coefficient)
        .meta("derivative_floor", rep.derivative_floor)
        .meta("semiconvexity_floor", rep.semiconvexity_floor)
        .meta("policy_floor_hits", rep.floor_hits);
    for (i, x) in vf.x().iter().enumerate() {
        csv.row(&[x, &vf.v[i], &vf.vp[i], &vf.v2[i], &res[i]]);
    }
    Ok(vec![ctx.write(&csv, "value_function.csv")?])
}

fn potential_meta(csv: &mut Csv, pot: &Potential) {
    csv.meta(
        "tail_bound",
        format!(
            "F >= {} y + {}",
            number(pot.tail.slope),
            number(pot.tail.intercept)
        ),
    );
    match pot.wells {
        Some(w) => {
            csv.meta(
                "well_lower",
                format!("y = {}, x = {}", number(w.lower), number(w.x_lower())),
            )
            .meta(
                "barrier",
                format!("y = {}, x = {}", number(w.barrier), number(w.x_barrier())),
            )
            .meta(
                "well_upper",
                format!("y = {}, x = {}", number(w.upper), number(w.x_upper())),
            )
            .meta("barrier_height", pot.barrier_height().unwrap_or(f64::NAN));
        }
        None => {
            csv.meta("wells", "none (single well)");
        }
    }
}

pub fn potential(ctx: &Context) -> Outcome {
    let vf = ctx.value_function()?;
    let pot = ctx.potential(&vf, &ctx.resolved.params)?;
    let mut csv = ctx.csv("potential", &["y", "F", "Fp"]);
    potential_meta(&mut csv, &pot);
    for (i, y) in pot.y().iter().enumerate() {
        csv.row(&[y, &pot.f[i], &pot.fp[i]]);
    }
    Ok(vec![ctx.write(&csv, "potential.csv")?])
}

const LADDER_COLUMNS: [&str; 7] = [
    "sigma",
    "epsilon",
    "tau_quad",
    "tau_mc",
    "stderr",
    "eps_log_tau",
    "barrier",
];

fn ladder_row(csv: &mut Csv, r: &ExitTimeReport) {
    csv.row(&[
        &r.sigma,
        &r.epsilon,
        &r.tau_quadrature,
        &Opt(r.tau_mc),
        &Opt(r.tau_mc_stderr),
        &r.eps_log_tau,
        &r.barrier_height,
    ]);
}

pub fn exit_time(ctx: &Context) -> Outcome {
    ctx.require_noise("exit-time")?;
    let r = &ctx.resolved;
    let (_, cand) = deterministic_candidate(&ctx.deterministic()?, &r.curve, r.grid.x_max)?;
    let vf0 = ValueFunction::from_candidate(cand, r.grid)?;
    let f0 = ctx.potential(&vf0, &ctx.deterministic()?)?;
    let wells = f0.require_bistable()?;

    let (vf, _) = ctx.solve()?;
    let pot = ctx.potential(&vf, &r.params)?;
    let mc = ctx.mc_settings();
    let mc = (mc.n_paths > 0).then_some(mc);
    let rep = exit_time_report(&vf, &pot, &r.params, &r.curve, &wells, mc.as_ref())?;

    let mut csv = ctx.csv("exit-time", &LADDER_COLUMNS);
    csv.meta("x_start", wells.x_upper())
        .meta("x_absorb", wells.x_lower())
        .meta("x_barrier", wells.x_barrier())
        .meta("delta_f0", f0.barrier_height().unwrap_or(f64::NAN))
        .meta("truncation_bound", rep.truncation_error_bound);
    ladder_row(&mut csv, &rep);
    Ok(vec![ctx.write(&csv, "exit_time.csv")?])
}

pub fn simulate(ctx: &Context) -> Outcome {
    let r = &ctx.resolved;
    let mc = &r.settings.mc;
    let vf = ctx.value_function()?;
    let settings = PathSettings {
        horizon: mc.horizon,
        dt: mc.dt,
        seed: mc.seed,
        sample_dt: mc.sample_dt,
    };
    let paths = simulate_paths(&vf, &r.params, &r.curve, &mc.x_starts, &settings)?;
    let mut written = Vec::new();
    for p in &paths {
        let mut csv = ctx.csv("simulate", &["path_id", "t", "x"]);
        csv.meta("x_start", mc.x_starts[p.path_id]);
        if let Some(x) = p.x.last() {
            csv.meta("x_final", x);
        }
        for (t, x) in p.t.iter().zip(&p.x) {
            csv.row(&[&p.path_id, t, x]);
        }
        written.push(ctx.write(&csv, &format!("paths_{}.csv", p.path_id))?);
    }
    Ok(written)
}

pub fn arrhenius(ctx: &Context) -> Outcome {
    let r = &ctx.resolved;
    let s = &r.settings;
    let opts = ArrheniusOptions {
        grid: Some(r.grid),
        hjb: ctx.hjb_options(),
        x_lo: s.tolerances.potential_x_min,
        dy: s.tolerances.potential_dy,
        mc: s.ladder.mc.then(|| ctx.mc_settings()),
    };
    let rep = arrhenius_estimate(&r.params, &r.curve, &s.ladder.sigmas, &opts)?;
    let mut csv = ctx.csv("arrhenius", &LADDER_COLUMNS);
    csv.meta("delta_f0", rep.delta_f0)
        .meta("x_start", rep.wells.x_upper())
        .meta("x_absorb", rep.wells.x_lower())
        .meta("x_barrier", rep.wells.x_barrier())
        .meta("distances", &rep.distances)
        .meta("strictly_decreasing", rep.strictly_decreasing)
        .meta("intercept", Opt(rep.intercept))
        .meta("slope", Opt(rep.slope))
        .meta("intercept_rel_error", Opt(rep.intercept_rel_error()));
    for (sigma, msg) in &rep.failures {
        csv.meta(&format!("failed sigma {}", number(*sigma)), msg);
    }
    for w in &rep.warnings {
        csv.meta("warning", w);
    }
    for row in &rep.rows {
        ladder_row(&mut csv, row);
    }
    Ok(vec![ctx.write(&csv, "ladder.csv")?])
}

pub fn cache_dir(configured: Option<&Path>) -> PathBuf {
    match std::env::var_os("LAKELAB_CACHE") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".lakelab-cache")),
    }
}
