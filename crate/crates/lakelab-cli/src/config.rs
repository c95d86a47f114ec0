//! Run configuration: strict TOML with defaults for every section.

use std::path::{Path, PathBuf};

use lakelab::hjb::{default_x_max, GridSpec, DEFAULT_MAX_ITER, DEFAULT_NODES, DEFAULT_TOL};
use lakelab::{hill_curve_with_exponent, LakeParams, RecyclingCurve};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsSection {
    pub b: f64,
    pub c: f64,
    pub rho: f64,
    pub sigma: f64,
}

impl Default for ParamsSection {
    fn default() -> Self {
        ParamsSection {
            b: 0.65,
            c: 0.512,
            rho: 0.03,
            sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSection {
    pub name: String,
    pub exponent: f64,
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection {
            name: "hill".into(),
            exponent: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Defaults to `max(20, 4·x₊)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    pub n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            x_max: None,
            n: DEFAULT_NODES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TolerancesSection {
    pub hjb: f64,
    pub max_iter: usize,
    /// Spacing of the potential grid in `y = ln x`.
    pub potential_dy: f64,
    /// Left end of the potential grid in `x`.
    pub potential_x_min: f64,
}

impl Default for TolerancesSection {
    fn default() -> Self {
        TolerancesSection {
            hjb: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            potential_dy: 1e-3,
            potential_x_min: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    /// Zero disables the Monte-Carlo cross-check of `exit-time`.
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub t_cap: f64,
    pub control_fraction: f64,
    pub horizon: f64,
    pub sample_dt: f64,
    /// Starting states for `simulate`.
    pub x_starts: Vec<f64>,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            n_paths: 10_000,
            dt: 1e-3,
            seed: 0,
            t_cap: 1e4,
            control_fraction: 0.1,
            horizon: 500.0,
            sample_dt: 0.1,
            x_starts: vec![0.7, 1.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderSection {
    pub sigmas: Vec<f64>,
    /// Run the Monte-Carlo cross-check on every rung.
    pub mc: bool,
}

impl Default for LadderSection {
    fn default() -> Self {
        LadderSection {
            sigmas: vec![0.30, 0.22, 0.16, 0.12],
            mc: false,
        }
    }
}

/// Everything that determines the numbers a command writes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub params: ParamsSection,
    pub curve: CurveSection,
    pub grid: GridSection,
    pub tolerances: TolerancesSection,
    pub mc: McSection,
    pub ladder: LadderSection,
}

/// The config file: settings plus where to put things.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub params: ParamsSection,
    pub curve: CurveSection,
    pub grid: GridSection,
    pub tolerances: TolerancesSection,
    pub mc: McSection,
    pub ladder: LadderSection,
}

impl RunConfig {
    pub fn settings(&self) -> Settings {
        Settings {
            params: self.params.clone(),
            curve: self.curve.clone(),
            grid: self.grid.clone(),
            tolerances: self.tolerances.clone(),
            mc: self.mc.clone(),
            ladder: self.ladder.clone(),
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse(&text)
}

/// Validated settings with derived objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub settings: Settings,
    pub params: LakeParams,
    pub curve: RecyclingCurve,
    pub grid: GridSpec,
}

impl Resolved {
    /// Canonical TOML of the effective settings (defaults filled in).
    pub fn echo(&self) -> String {
        toml::to_string(&self.settings).expect("settings serialize")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.echo().as_bytes()))
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if cond {
        Ok(())
    } else {
        Err(ConfigError(msg()))
    }
}

pub fn resolve(mut settings: Settings) -> Result<Resolved, ConfigError> {
    let p = &settings.params;
    let params =
        LakeParams::new(p.b, p.c, p.rho, p.sigma).map_err(|e| ConfigError(e.to_string()))?;
    check(settings.curve.name == "hill", || {
        format!("unknown curve `{}` (available: hill)", settings.curve.name)
    })?;
    let curve = hill_curve_with_exponent(settings.curve.exponent)
        .map_err(|e| ConfigError(e.to_string()))?;
    let t = &settings.tolerances;
    check(t.hjb > 0.0 && t.max_iter > 0, || {
        "tolerances.hjb and max_iter must be positive".into()
    })?;
    check(t.potential_dy > 0.0 && t.potential_x_min > 0.0, || {
        "tolerances.potential_dy and potential_x_min must be positive".into()
    })?;
    let mc = &settings.mc;
    check(
        mc.dt > 0.0 && mc.t_cap > 0.0 && mc.horizon > 0.0 && mc.sample_dt > 0.0,
        || "mc.dt, t_cap, horizon and sample_dt must be positive".into(),
    )?;
    check((0.0..=1.0).contains(&mc.control_fraction), || {
        "mc.control_fraction must lie in [0, 1]".into()
    })?;
    check(mc.x_starts.iter().all(|x| *x > 0.0), || {
        "mc.x_starts must be positive".into()
    })?;
    let s = &settings.ladder.sigmas;
    check(!s.is_empty() && s.windows(2).all(|w| w[1] < w[0]), || {
        "ladder.sigmas must be non-empty and strictly decreasing".into()
    })?;
    for &sigma in s {
        params
            .with_sigma(sigma)
            .map_err(|e| ConfigError(format!("ladder: {e}")))?;
        check(sigma > 0.0, || "ladder sigmas must be positive".into())?;
    }
    let x_max = match settings.grid.x_max {
        Some(x) => x,
        None => {
            let x = default_x_max(&params, &curve).map_err(|e| ConfigError(e.to_string()))?;
            settings.grid.x_max = Some(x);
            x
        }
    };
    let grid = GridSpec::new(x_max, settings.grid.n).map_err(|e| ConfigError(e.to_string()))?;
    Ok(Resolved {
        settings,
        params,
        curve,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_reference_setup() {
        let cfg = parse("").unwrap();
        let r = resolve(cfg.settings()).unwrap();
        assert_eq!(r.params, LakeParams::reference(0.1));
        assert_eq!(r.grid.x_max, 20.0);
        assert!(r.echo().contains("x_max = 20.0"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("[params]\nbb = 1.0\n").is_err());
        assert!(parse("[tolerances]\nhjb_tol = 1e-9\n").is_err());
        assert!(parse("extra = 1\n").is_err());
        assert!(parse("output_dir = \"out\"\n[params]\nb = 0.6\n").is_ok());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[params]\nb = -0.65\n",
            "[params]\nsigma = 2.0\n",
            "[curve]\nname = \"logistic\"\n",
            "[curve]\nexponent = 1.5\n",
            "[grid]\nn = 10\n",
            "[ladder]\nsigmas = [0.1, 0.2]\n",
            "[mc]\ndt = 0.0\n",
        ] {
            let cfg = parse(text).unwrap();
            assert!(resolve(cfg.settings()).is_err(), "{text}");
        }
    }

    #[test]
    fn documented_defaults_match() {
        let guide = include_str!("../../../book/src/cli.md");
        let block = guide
            .split("```toml\n")
            .nth(1)
            .and_then(|rest| rest.split("```").next())
            .expect("guide has a toml block");
        let cfg = parse(block).unwrap();
        assert_eq!(cfg.settings(), Settings::default());
        assert_eq!(cfg.output_dir.as_deref(), Some(Path::new("out")));
        assert_eq!(cfg.cache_dir.as_deref(), Some(Path::new(".lakelab-cache")));
    }

    #[test]
    fn hash_tracks_settings_only() {
        let a = resolve(parse("output_dir = \"a\"\n").unwrap().settings()).unwrap();
        let b = resolve(parse("output_dir = \"b\"\n").unwrap().settings()).unwrap();
        let c = resolve(parse("[mc]\nseed = 3\n").unwrap().settings()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
