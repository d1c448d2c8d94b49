//! Scenario configuration, named verification checks, and report generation.
//!
//! A scenario is a TOML file pairing an initial structure, a grid, and flow
//! parameters with a list of named checks.  Running it produces diagnostics
//! and snapshot CSVs plus a JSON report in which **every declared check
//! appears exactly once** with its measured value, tolerance, and verdict.
//!
//! The check library (see [`run_scenario`]):
//!
//! | name                             | what it asserts                                          |
//! |----------------------------------|----------------------------------------------------------|
//! | `flat_stationary`                | sup‖φ(T) − φ(0)‖ ≤ tol                                   |
//! | `conformal_reference_agreement`  | final field matches the scalar conformal-flow reference  |
//! | `gauge_vanishing`                | sup‖ξ‖ ≤ tol at every recorded step                      |
//! | `dual_route_rhs`                 | production rhs vs independent assembly on a test grid    |
//! | `parabolicity_positive`          | principal-symbol margin > 0 at every recorded step       |
//! | `pullback_matches_direct`        | pulled-back gauge-fixed run lands on the direct run      |
//! | `self_background_matches_direct` | gauge-fixed run with itself as background = direct run   |
//! | `no_blow_up`                     | the run reached its final time with a positive metric    |
//! | `riemannian_closure`             | reports the fiber variation of g (informational)         |
//! | `golden_trajectory`              | diagnostics CSV matches a committed golden file          |
//! | `determinism`                    | an in-process re-run reproduces the output byte-for-byte |
//!
//! Exit codes: 0 all checks pass, 1 a check failed, 2 configuration error,
//! 3 blow-up (the report is still written).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analytic::{FinslerStructure, TAU};
use crate::error::{FinslerError, Result};
use crate::flow::{
    deturck_rhs_expanded, deturck_rhs_quasilinear, run_flow, BackgroundMetric, DiagnosticsRow,
    FlowConfig, FlowState, Gauge, RhsRoute, Scheme, DIAGNOSTICS_HEADER,
};
use crate::grid::{sample_structure, ScalarBundleField, SphereBundleGrid, ThetaDerivative};
use crate::oracle::conformal_reference;
use crate::pullback::{integrate_diffeo, pullback_structure, PullbackMode, XiSeries};

/// Closed-form initial structure, selected by family name.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub family: String,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub eps1: Option<f64>,
    #[serde(default)]
    pub eps2: Option<f64>,
    #[serde(default)]
    pub b: Option<Vec<f64>>,
    #[serde(default)]
    pub wave: Option<Vec<i32>>,
}

impl StructureSpec {
    pub fn build(&self) -> Result<FinslerStructure> {
        let need = |v: Option<f64>, what: &str| -> Result<f64> {
            v.ok_or_else(|| {
                FinslerError::Config(format!("structure family {} needs `{what}`", self.family))
            })
        };
        match self.family.as_str() {
            "euclidean" => Ok(FinslerStructure::euclidean(2)),
            "conformal" => Ok(FinslerStructure::conformal(need(self.epsilon, "epsilon")?)),
            "conformal_wave" => {
                let wave = self.wave.clone().ok_or_else(|| {
                    FinslerError::Config("structure family conformal_wave needs `wave`".into())
                })?;
                Ok(FinslerStructure::conformal_wave(
                    need(self.epsilon, "epsilon")?,
                    wave,
                ))
            }
            "diagonal" => Ok(FinslerStructure::diagonal(
                need(self.eps1, "eps1")?,
                need(self.eps2, "eps2")?,
            )),
            "randers_constant" | "randers_bump" => {
                let b = self.b.clone().ok_or_else(|| {
                    FinslerError::Config(format!("structure family {} needs `b`", self.family))
                })?;
                if self.family == "randers_constant" {
                    FinslerStructure::randers_constant(b)
                } else {
                    FinslerStructure::randers_bump(b)
                }
            }
            other => Err(FinslerError::Config(format!(
                "unknown structure family `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n1: usize,
    pub n2: usize,
    pub ntheta: usize,
    #[serde(default = "default_theta_derivative")]
    pub theta_derivative: String,
}

fn default_theta_derivative() -> String {
    "spectral".into()
}

impl GridSpec {
    pub fn build(&self) -> Result<Arc<SphereBundleGrid>> {
        let mode = match self.theta_derivative.as_str() {
            "spectral" => ThetaDerivative::Spectral,
            "fd4" => ThetaDerivative::Fd4,
            other => {
                return Err(FinslerError::Config(format!(
                    "unknown theta_derivative `{other}` (spectral or fd4)"
                )))
            }
        };
        SphereBundleGrid::build_with_mode(self.n1, self.n2, self.ntheta, mode)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    #[serde(default = "default_gauge")]
    pub gauge: String,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub cfl: Option<f64>,
    pub duration: f64,
    #[serde(default = "default_diag_every")]
    pub diagnostics_every: usize,
    /// Project the stepped right-hand side onto fiber harmonics below the
    /// 2/3-rule cutoff; disable only for discretization studies.
    #[serde(default = "default_lowpass")]
    pub fiber_lowpass: bool,
    /// Right-hand-side assembly: `quasilinear` (production) or `spray-trace`
    /// (cross-check route for discretization studies).
    #[serde(default = "default_rhs")]
    pub rhs: String,
    /// Highest fiber harmonic retained in the stepped right-hand side.
    /// Absent: gauge default (2 for `direct`, uncapped for `deturck` — the
    /// ungauged flow is anti-diffusive above harmonic 2, the gauge-fixed
    /// flow is parabolic without a cap).  `0`: explicitly uncapped, for
    /// discretization studies of the raw ungauged operator.
    #[serde(default)]
    pub fiber_band: Option<usize>,
}

fn default_gauge() -> String {
    "direct".into()
}
fn default_scheme() -> String {
    "rk4".into()
}
fn default_diag_every() -> usize {
    10
}
fn default_lowpass() -> bool {
    true
}
fn default_rhs() -> String {
    "quasilinear".into()
}

impl FlowSpec {
    pub fn build(&self) -> Result<FlowConfig> {
        let gauge = match self.gauge.as_str() {
            "direct" => Gauge::Direct,
            "deturck" => Gauge::Deturck,
            other => {
                return Err(FinslerError::Config(format!(
                    "unknown gauge `{other}` (direct or deturck)"
                )))
            }
        };
        let scheme = match self.scheme.as_str() {
            "euler" => Scheme::Euler,
            "rk4" => Scheme::Rk4,
            other => {
                return Err(FinslerError::Config(format!(
                    "unknown scheme `{other}` (euler or rk4)"
                )))
            }
        };
        let rhs = match self.rhs.as_str() {
            "quasilinear" => RhsRoute::Quasilinear,
            "spray-trace" => RhsRoute::SprayTrace,
            other => {
                return Err(FinslerError::Config(format!(
                    "unknown rhs `{other}` (quasilinear or spray-trace)"
                )))
            }
        };
        let fiber_band = match self.fiber_band {
            None => match gauge {
                Gauge::Direct => Some(2),
                Gauge::Deturck => None,
            },
            Some(0) => None,
            Some(m) => Some(m),
        };
        Ok(FlowConfig {
            scheme,
            gauge,
            rhs,
            dt: self.dt,
            cfl: self.cfl,
            duration: self.duration,
            diagnostics_every: self.diagnostics_every,
            fiber_lowpass: self.fiber_lowpass,
            fiber_band,
        })
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_diag_file")]
    pub diagnostics: String,
    #[serde(default = "default_snapshot_file")]
    pub snapshot: String,
    /// Diffeomorphism trajectory CSV; written only for gauge-fixed runs.
    #[serde(default)]
    pub trajectory: Option<String>,
    /// Trajectory storage cadence in steps (rounded to pairs internally).
    #[serde(default = "default_store_every")]
    pub store_every: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            diagnostics: default_diag_file(),
            snapshot: default_snapshot_file(),
            trajectory: None,
            store_every: default_store_every(),
        }
    }
}

fn default_diag_file() -> String {
    "diagnostics.csv".into()
}
fn default_snapshot_file() -> String {
    "final_state.csv".into()
}
fn default_store_every() -> usize {
    250
}

/// One named check with its parameters.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub name: String,
    #[serde(default)]
    pub tol: Option<f64>,
    /// Reference base resolution for `conformal_reference_agreement`.
    #[serde(default)]
    pub reference_n: Option<usize>,
    /// Reference time step for `conformal_reference_agreement`.
    #[serde(default)]
    pub reference_dt: Option<f64>,
    /// Verification grid for `dual_route_rhs`.
    #[serde(default)]
    pub grid: Option<[usize; 3]>,
    /// Golden file path for `golden_trajectory`, relative to the scenario.
    #[serde(default)]
    pub path: Option<String>,
}

pub const KNOWN_CHECKS: [&str; 11] = [
    "flat_stationary",
    "conformal_reference_agreement",
    "gauge_vanishing",
    "dual_route_rhs",
    "parabolicity_positive",
    "pullback_matches_direct",
    "self_background_matches_direct",
    "no_blow_up",
    "riemannian_closure",
    "golden_trajectory",
    "determinism",
];

/// A fully parsed scenario.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub structure: StructureSpec,
    #[serde(default)]
    pub background: Option<StructureSpec>,
    pub grid: GridSpec,
    pub flow: FlowSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, rename = "check")]
    pub checks: Vec<CheckSpec>,
}

impl ScenarioConfig {
    pub fn from_str_validated(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| FinslerError::Config(format!("TOML parse error: {e}")))?;
        Self::from_value(toml::Value::Table(table))
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let config: ScenarioConfig = value
            .try_into()
            .map_err(|e| FinslerError::Config(format!("config schema error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads, applies `--set` overrides, and validates.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            FinslerError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| FinslerError::Config(format!("TOML parse error in {}: {e}", path.display())))?;
        let mut value = toml::Value::Table(table);
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        Self::from_value(value)
    }

    /// Everything must resolve to valid module inputs before any work runs.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid.build()?;
        self.structure.build()?;
        if let Some(bg) = &self.background {
            bg.build()?;
        }
        let flow = self.flow.build()?;
        flow.resolved_dt(&grid)?;
        if flow.gauge == Gauge::Deturck && self.background.is_none() {
            return Err(FinslerError::Config(
                "gauge = \"deturck\" requires a [background] section".into(),
            ));
        }
        let mut seen = Vec::new();
        for check in &self.checks {
            if !KNOWN_CHECKS.contains(&check.name.as_str()) {
                return Err(FinslerError::Config(format!(
                    "unknown check `{}`; known checks: {}",
                    check.name,
                    KNOWN_CHECKS.join(", ")
                )));
            }
            if seen.contains(&check.name) {
                return Err(FinslerError::Config(format!(
                    "check `{}` declared twice",
                    check.name
                )));
            }
            if check.name == "golden_trajectory" && check.path.is_none() {
                return Err(FinslerError::Config(
                    "golden_trajectory needs `path`".into(),
                ));
            }
            seen.push(check.name.clone());
        }
        Ok(())
    }
}

/// Applies one `--set section.key=value` override to the parsed tree.
/// The raw value is parsed as a TOML literal, falling back to a string.
fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            FinslerError::Config(format!("--set {key}: `{part}` is not a table"))
        })?;
        if depth == parts.len() - 1 {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    Err(FinslerError::Config(format!("--set {key}: empty key")))
}

/// Host fingerprint recorded in every report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Environment {
    pub fn probe() -> Self {
        Self {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// "pass", "fail", or "skipped" (a skipped check names its blocker).
    pub verdict: String,
    pub measured: Option<f64>,
    pub tolerance: Option<f64>,
    pub details: String,
    pub wall_seconds: f64,
}

impl CheckResult {
    fn passed(&self) -> bool {
        self.verdict == "pass"
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub passed: bool,
    pub exit_code: i32,
    /// Present when the run aborted; checks are then marked skipped.
    pub blow_up: Option<String>,
    pub environment: Environment,
    pub wall_seconds: f64,
    pub checks: Vec<CheckResult>,
    pub outputs: Vec<String>,
}

/// Everything the primary run leaves behind for the checks to inspect.
struct RunArtifacts {
    grid: Arc<SphereBundleGrid>,
    initial_phi: ScalarBundleField,
    /// Final state; `None` when the run blew up.
    final_state: Option<FlowState>,
    diagnostics: Vec<DiagnosticsRow>,
    xi_series: Option<XiSeries>,
    xi_sup_max: f64,
    failure: Option<String>,
}

fn diagnostics_csv(rows: &[DiagnosticsRow]) -> String {
    let mut text = String::from(DIAGNOSTICS_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv_line());
        text.push('\n');
    }
    text
}

/// Runs the configured flow once, capturing diagnostics and (for gauge-fixed
/// runs) the gauge-field series.  A blow-up is captured, not propagated.
fn execute_primary(config: &ScenarioConfig) -> Result<RunArtifacts> {
    let grid = config.grid.build()?;
    let structure = config.structure.build()?;
    let flow = config.flow.build()?;
    let initial_phi = sample_structure(&structure, &grid)?;

    let background = match (&config.background, flow.gauge) {
        (Some(spec), _) => Some(BackgroundMetric::from_structure(&spec.build()?, &grid)?),
        (None, Gauge::Deturck) => unreachable!("validated at load"),
        (None, Gauge::Direct) => None,
    };

    let mut state = FlowState::from_structure(&structure, &grid)?;
    let mut diagnostics = Vec::new();
    let mut xi_series = (flow.gauge == Gauge::Deturck)
        .then(|| XiSeries::new(grid.clone(), PullbackMode::BaseReduced));
    let mut xi_sup_max = 0.0f64;

    let outcome = run_flow(
        &mut state,
        &flow,
        background.as_ref(),
        &mut diagnostics,
        |ev| {
            if let (Some(series), Some(xi)) = (xi_series.as_mut(), ev.xi) {
                let mut sup = 0.0f64;
                for comp in xi {
                    for v in comp {
                        sup = sup.max(v.abs());
                    }
                }
                xi_sup_max = xi_sup_max.max(sup);
                series.record(ev.t, xi)?;
            }
            Ok(())
        },
    );

    let failure = match outcome {
        Ok(()) => None,
        Err(e @ FinslerError::BlowUp { .. }) => Some(e.to_string()),
        Err(other) => return Err(other),
    };
    Ok(RunArtifacts {
        grid,
        initial_phi,
        final_state: failure.is_none().then_some(state),
        diagnostics,
        xi_series,
        xi_sup_max,
        failure,
    })
}

/// Runs a twin of the primary flow in the direct gauge from the same initial
/// data (used by the pullback and self-background checks).
fn execute_direct_twin(config: &ScenarioConfig) -> Result<FlowState> {
    let grid = config.grid.build()?;
    let structure = config.structure.build()?;
    let mut flow = config.flow.build()?;
    flow.gauge = Gauge::Direct;
    let mut state = FlowState::from_structure(&structure, &grid)?;
    let mut diags = Vec::new();
    run_flow(&mut state, &flow, None, &mut diags, |_| Ok(()))?;
    Ok(state)
}

fn check_entry(
    spec: &CheckSpec,
    verdict: bool,
    measured: Option<f64>,
    tolerance: Option<f64>,
    details: String,
    started: Instant,
) -> CheckResult {
    CheckResult {
        name: spec.name.clone(),
        verdict: if verdict { "pass" } else { "fail" }.into(),
        measured,
        tolerance,
        details,
        wall_seconds: started.elapsed().as_secs_f64(),
    }
}

fn skipped(spec: &CheckSpec, why: &str) -> CheckResult {
    CheckResult {
        name: spec.name.clone(),
        verdict: "skipped".into(),
        measured: None,
        tolerance: None,
        details: why.to_string(),
        wall_seconds: 0.0,
    }
}

/// The expected conformal factor u(x) of a conformal-family structure.
fn conformal_profile(spec: &StructureSpec) -> Result<(f64, Vec<i32>)> {
    match spec.family.as_str() {
        "conformal" => Ok((spec.epsilon.unwrap_or(0.0), vec![1, 0])),
        "conformal_wave" => Ok((
            spec.epsilon.unwrap_or(0.0),
            spec.wave.clone().unwrap_or(vec![1, 0]),
        )),
        other => Err(FinslerError::Config(format!(
            "conformal_reference_agreement needs a conformal-family structure, got `{other}`"
        ))),
    }
}

fn run_check(
    spec: &CheckSpec,
    config: &ScenarioConfig,
    art: &RunArtifacts,
    scenario_dir: &Path,
) -> Result<CheckResult> {
    let started = Instant::now();
    // Checks that inspect the finished state are skipped after a blow-up;
    // `no_blow_up` itself still reports.
    let needs_final = spec.name != "no_blow_up";
    if needs_final && art.failure.is_some() {
        return Ok(skipped(spec, "not evaluated: the run blew up"));
    }

    match spec.name.as_str() {
        "flat_stationary" => {
            let tol = spec.tol.unwrap_or(1e-10);
            let state = art.final_state.as_ref().expect("checked above");
            let measured = state.phi.sup_diff(&art.initial_phi)?;
            Ok(check_entry(
                spec,
                measured <= tol,
                Some(measured),
                Some(tol),
                format!("sup|φ(T) − φ(0)| = {measured:.3e}"),
                started,
            ))
        }
        "conformal_reference_agreement" => {
            let tol = spec.tol.unwrap_or(1e-3);
            let nref = spec.reference_n.unwrap_or(256);
            let grid = &art.grid;
            if nref % grid.n1 != 0 || nref % grid.n2 != 0 {
                return Err(FinslerError::Config(format!(
                    "reference_n = {nref} must be a multiple of the base resolutions"
                )));
            }
            let (eps, wave) = conformal_profile(&config.structure)?;
            let h = TAU / nref as f64;
            let mut u0 = vec![0.0; nref * nref];
            for i in 0..nref {
                for j in 0..nref {
                    u0[i * nref + j] = eps
                        * (wave[0] as f64 * i as f64 * h + wave[1] as f64 * j as f64 * h).cos();
                }
            }
            // Keep the reference solidly inside the RK4 diffusion stability
            // region at its own resolution.
            let dt_ref = spec.reference_dt.unwrap_or(0.05 * h * h);
            let u = conformal_reference(&u0, nref, nref, config.flow.duration, dt_ref)?;
            let state = art.final_state.as_ref().expect("checked above");
            let (r1, r2) = (nref / grid.n1, nref / grid.n2);
            let mut measured = 0.0f64;
            for i in 0..grid.n1 {
                for j in 0..grid.n2 {
                    let expect = (2.0 * u[i * r1 * nref + j * r2]).exp();
                    for k in 0..grid.ntheta {
                        measured = measured.max((state.phi.at(i, j, k) - expect).abs());
                    }
                }
            }
            Ok(check_entry(
                spec,
                measured <= tol,
                Some(measured),
                Some(tol),
                format!("sup|F²(T) − e^{{2u_ref(T)}}| = {measured:.3e} against a {nref}² reference"),
                started,
            ))
        }
        "gauge_vanishing" => {
            let tol = spec.tol.unwrap_or(1e-10);
            if art.xi_series.is_none() {
                return Ok(skipped(spec, "not evaluated: run was not gauge-fixed"));
            }
            let measured = art.xi_sup_max;
            Ok(check_entry(
                spec,
                measured <= tol,
                Some(measured),
                Some(tol),
                format!("max over steps of sup|ξ| = {measured:.3e}"),
                started,
            ))
        }
        "dual_route_rhs" => {
            let tol = spec.tol.unwrap_or(1e-5);
            let [n1, n2, nt] = spec.grid.unwrap_or([64, 64, 32]);
            let vgrid = SphereBundleGrid::build(n1, n2, nt)?;
            let structure = config.structure.build()?;
            let bg_structure = match &config.background {
                Some(spec) => spec.build()?,
                None => FinslerStructure::euclidean(2),
            };
            let background = BackgroundMetric::from_structure(&bg_structure, &vgrid)?;
            let mut state = FlowState::from_structure(&structure, &vgrid)?;
            let a = deturck_rhs_quasilinear(&mut state, &background)?;
            let b = deturck_rhs_expanded(&mut state, &background)?;
            let measured = a.sup_diff(&b)?;
            Ok(check_entry(
                spec,
                measured <= tol,
                Some(measured),
                Some(tol),
                format!("rhs route disagreement {measured:.3e} on a {n1}×{n2}×{nt} grid"),
                started,
            ))
        }
        "parabolicity_positive" => {
            let measured = art
                .diagnostics
                .iter()
                .map(|r| r.parabolicity_margin)
                .fold(f64::INFINITY, f64::min);
            Ok(check_entry(
                spec,
                measured > 0.0,
                Some(measured),
                Some(0.0),
                format!("min principal-symbol eigenvalue over the run = {measured:.6e}"),
                started,
            ))
        }
        "pullback_matches_direct" => {
            let tol = spec.tol.unwrap_or(5e-3);
            let Some(series) = &art.xi_series else {
                return Ok(skipped(spec, "not evaluated: run was not gauge-fixed"));
            };
            let direct = execute_direct_twin(config)?;
            let fixed = art.final_state.as_ref().expect("checked above");
            let traj = integrate_diffeo(series, config.output.store_every)?;
            let pulled = pullback_structure(&fixed.phi, &traj, traj.maps.len() - 1)?;
            let measured = pulled.sup_diff(&direct.phi)?;
            let offset = fixed.phi.sup_diff(&direct.phi)?;
            Ok(check_entry(
                spec,
                measured <= tol,
                Some(measured),
                Some(tol),
                format!(
                    "pulled-back vs direct sup-difference {measured:.3e} (raw gauge offset {offset:.3e})"
                ),
                started,
            ))
        }
        "self_background_matches_direct" => {
            let tol = spec.tol.unwrap_or(1e-6);
            if art.xi_series.is_none() {
                return Ok(skipped(spec, "not evaluated: run was not gauge-fixed"));
            }
            let direct = execute_direct_twin(config)?;
            let fixed = art.final_state.as_ref().expect("checked above");
            let measured = fixed.phi.sup_diff(&direct.phi)?;
            Ok(check_entry(
                spec,
                measured <= tol,
                Some(measured),
                Some(tol),
                format!("gauge-fixed vs direct trajectory sup-difference {measured:.3e}"),
                started,
            ))
        }
        "no_blow_up" => {
            let ok = art.failure.is_none();
            let min_eig = art
                .diagnostics
                .iter()
                .map(|r| r.min_eig_g)
                .fold(f64::INFINITY, f64::min);
            Ok(check_entry(
                spec,
                ok && min_eig > 0.0,
                Some(min_eig),
                Some(0.0),
                match &art.failure {
                    Some(f) => f.clone(),
                    None => format!("run completed; min metric eigenvalue {min_eig:.6e}"),
                },
                started,
            ))
        }
        "riemannian_closure" => {
            let state = art.final_state.as_ref().expect("checked above");
            let measured = state.cache.riemannian_closure_defect();
            // Informational unless a tolerance is configured.
            let ok = spec.tol.map(|t| measured <= t).unwrap_or(true);
            Ok(check_entry(
                spec,
                ok,
                Some(measured),
                spec.tol,
                format!("fiber variation of the metric at T = {measured:.6e}"),
                started,
            ))
        }
        "golden_trajectory" => {
            let tol = spec.tol.unwrap_or(1e-12);
            let path = scenario_dir.join(spec.path.as_ref().expect("validated"));
            // A missing or malformed golden file is a loud failure rather
            // than a hard error, so regenerating goldens stays a plain
            // run-copy-rerun workflow.
            let golden = match fs::read_to_string(&path) {
                Ok(text) => text,
                Err(e) => {
                    return Ok(check_entry(
                        spec,
                        false,
                        None,
                        Some(tol),
                        format!("cannot read golden file {}: {e}", path.display()),
                        started,
                    ))
                }
            };
            let produced = diagnostics_csv(&art.diagnostics);
            let measured = match compare_diagnostics(&golden, &produced) {
                Ok(worst) => worst,
                Err(e) => {
                    return Ok(check_entry(
                        spec,
                        false,
                        None,
                        Some(tol),
                        format!("golden comparison failed: {e}"),
                        started,
                    ))
                }
            };
            Ok(check_entry(
                spec,
                measured <= tol,
                Some(measured),
                Some(tol),
                format!(
                    "largest numeric deviation from {} = {measured:.3e} (wall-time column ignored)",
                    path.display()
                ),
                started,
            ))
        }
        "determinism" => {
            let rerun = execute_primary(config)?;
            let same_rows = strip_wall(&diagnostics_csv(&art.diagnostics))
                == strip_wall(&diagnostics_csv(&rerun.diagnostics));
            let bit_diff = match (&art.final_state, &rerun.final_state) {
                (Some(a), Some(b)) => a
                    .phi
                    .v
                    .iter()
                    .zip(&b.phi.v)
                    .filter(|(x, y)| x.to_bits() != y.to_bits())
                    .count(),
                _ => usize::MAX,
            };
            Ok(check_entry(
                spec,
                same_rows && bit_diff == 0,
                Some(bit_diff as f64),
                Some(0.0),
                format!(
                    "re-run: diagnostics rows identical = {same_rows}, differing field bits = {bit_diff}"
                ),
                started,
            ))
        }
        other => Err(FinslerError::Config(format!("unknown check `{other}`"))),
    }
}

/// Drops the trailing wall-time column from every diagnostics CSV line.
fn strip_wall(text: &str) -> String {
    text.lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Numeric comparison of two diagnostics CSVs, ignoring the wall-time
/// column; returns the largest absolute deviation.
fn compare_diagnostics(golden: &str, produced: &str) -> Result<f64> {
    let g: Vec<&str> = golden.trim().lines().collect();
    let p: Vec<&str> = produced.trim().lines().collect();
    if g.is_empty() || g[0] != DIAGNOSTICS_HEADER {
        return Err(FinslerError::Config(
            "golden file does not start with the diagnostics header".into(),
        ));
    }
    if g.len() != p.len() {
        return Err(FinslerError::Config(format!(
            "golden file has {} rows, run produced {}",
            g.len() - 1,
            p.len() - 1
        )));
    }
    let mut worst = 0.0f64;
    for (lg, lp) in g.iter().zip(&p).skip(1) {
        let cg: Vec<&str> = lg.split(',').collect();
        let cp: Vec<&str> = lp.split(',').collect();
        if cg.len() != cp.len() {
            return Err(FinslerError::Config("column count mismatch".into()));
        }
        // Last column is wall time.
        for (vg, vp) in cg.iter().zip(&cp).take(cg.len() - 1) {
            let (a, b): (f64, f64) = (
                vg.parse().map_err(|_| {
                    FinslerError::Config(format!("golden file has non-numeric cell `{vg}`"))
                })?,
                vp.parse().map_err(|_| {
                    FinslerError::Config(format!("produced CSV has non-numeric cell `{vp}`"))
                })?,
            );
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Executes a scenario end to end: primary run, declared checks, output
/// files, report.  The report is written to `<out_dir>/report.json` even
/// when the run blows up.
pub fn run_scenario(config: &ScenarioConfig, scenario_dir: &Path, out_dir: &Path) -> Result<Report> {
    let total = Instant::now();
    fs::create_dir_all(out_dir)?;
    let art = execute_primary(config)?;
    let mut outputs = Vec::new();

    let diag_path = out_dir.join(&config.output.diagnostics);
    fs::write(&diag_path, diagnostics_csv(&art.diagnostics))?;
    outputs.push(diag_path.display().to_string());

    if let Some(state) = &art.final_state {
        let snap_path = out_dir.join(&config.output.snapshot);
        let mut buf = Vec::new();
        state.phi.write_csv(&mut buf)?;
        fs::write(&snap_path, buf)?;
        outputs.push(snap_path.display().to_string());
    }
    if let (Some(series), Some(name)) = (&art.xi_series, &config.output.trajectory) {
        let traj = integrate_diffeo(series, config.output.store_every)?;
        let traj_path = out_dir.join(name);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf)?;
        fs::write(&traj_path, buf)?;
        outputs.push(traj_path.display().to_string());
    }

    let mut checks = Vec::new();
    for spec in &config.checks {
        checks.push(run_check(spec, config, &art, scenario_dir)?);
    }

    let all_pass = checks.iter().all(|c| c.passed() || c.verdict == "skipped");
    let exit_code = if art.failure.is_some() {
        3
    } else if all_pass {
        0
    } else {
        1
    };
    let report = Report {
        scenario: config.name.clone(),
        passed: exit_code == 0,
        exit_code,
        blow_up: art.failure.clone(),
        environment: Environment::probe(),
        wall_seconds: total.elapsed().as_secs_f64(),
        checks,
        outputs,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| FinslerError::Config(format!("report serialization failed: {e}")))?;
    fs::write(out_dir.join("report.json"), json)?;
    Ok(report)
}

/// Suite file: a list of scenario paths run in order (or in parallel).
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub name: String,
    pub scenarios: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub exit_code: i32,
    pub reports: Vec<Report>,
}

/// Runs every scenario of a suite; the suite exit code is the worst
/// individual one.  Scenario outputs land in per-name subdirectories.
pub fn run_suite(
    suite_path: &Path,
    out_dir: &Path,
    overrides: &[(String, String)],
    parallel: bool,
) -> Result<SuiteReport> {
    let text = fs::read_to_string(suite_path).map_err(|e| {
        FinslerError::Config(format!("cannot read {}: {e}", suite_path.display()))
    })?;
    let suite: SuiteConfig = toml::from_str(&text)
        .map_err(|e| FinslerError::Config(format!("suite schema error: {e}")))?;
    let base = suite_path.parent().unwrap_or(Path::new("."));

    let jobs: Vec<(PathBuf, ScenarioConfig)> = suite
        .scenarios
        .iter()
        .map(|rel| {
            let path = base.join(rel);
            let config = ScenarioConfig::load(&path, overrides)?;
            Ok((path, config))
        })
        .collect::<Result<_>>()?;

    let run_one = |(path, config): &(PathBuf, ScenarioConfig)| -> Result<Report> {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        run_scenario(config, &dir, &out_dir.join(&config.name))
    };

    let reports: Vec<Report> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.iter().map(|job| scope.spawn(|| run_one(job))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scenario thread panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    };

    let exit_code = reports.iter().map(|r| r.exit_code).max().unwrap_or(0);
    let report = SuiteReport {
        suite: suite.name,
        passed: exit_code == 0,
        exit_code,
        reports,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| FinslerError::Config(format!("report serialization failed: {e}")))?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("suite_report.json"), json)?;
    Ok(report)
}

/// Samples a per-node quantity of the scenario's initial state and writes it
/// as a field CSV (the `dump-field` CLI entry).
pub fn dump_field(config: &ScenarioConfig, quantity: &str, out: &Path) -> Result<()> {
    let grid = config.grid.build()?;
    let structure = config.structure.build()?;
    let mut state = FlowState::from_structure(&structure, &grid)?;
    state.refresh(false)?;
    let field = match quantity {
        "f2" => state.phi.clone(),
        "ricci" => {
            let mut f = ScalarBundleField::zeros(grid.clone(), 0)?;
            f.v.copy_from_slice(&state.cache.ric);
            f
        }
        "margin" => {
            let mut f = ScalarBundleField::zeros(grid.clone(), 0)?;
            for i in 0..grid.n1 {
                for j in 0..grid.n2 {
                    for k in 0..grid.ntheta {
                        f.v[grid.idx(i, j, k)] =
                            crate::flow::principal_symbol(&state.cache, &state.phi.v, i, j, k)
                                .min_eigenvalue;
                    }
                }
            }
            f
        }
        other => {
            return Err(FinslerError::Config(format!(
                "unknown quantity `{other}` (f2, ricci, or margin)"
            )))
        }
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf = Vec::new();
    field.write_csv(&mut buf)?;
    fs::write(out, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    const FLAT_CFG: &str = r#"
name = "flat_test"

[structure]
family = "euclidean"

[grid]
n1 = 8
n2 = 8
ntheta = 8

[flow]
gauge = "direct"
scheme = "euler"
dt = 1e-3
duration = 5e-3
diagnostics_every = 1

[[check]]
name = "flat_stationary"
tol = 1e-10

[[check]]
name = "parabolicity_positive"

[[check]]
name = "no_blow_up"

[[check]]
name = "determinism"
"#;

    #[test]
    fn parses_and_validates() {
        let config = ScenarioConfig::from_str_validated(FLAT_CFG).unwrap();
        assert_eq!(config.name, "flat_test");
        assert_eq!(config.checks.len(), 4);
        assert_eq!(config.grid.n1, 8);
    }

    #[test]
    fn rejects_unknown_checks_and_bad_schema() {
        let bad = FLAT_CFG.replace("flat_stationary", "no_such_check");
        assert!(matches!(
            ScenarioConfig::from_str_validated(&bad),
            Err(FinslerError::Config(_))
        ));

        let bad = FLAT_CFG.replace("[flow]", "[flows]");
        assert!(matches!(
            ScenarioConfig::from_str_validated(&bad),
            Err(FinslerError::Config(_))
        ));

        // Gauge-fixed flow without a background is rejected up front.
        let bad = FLAT_CFG.replace("gauge = \"direct\"", "gauge = \"deturck\"");
        assert!(matches!(
            ScenarioConfig::from_str_validated(&bad),
            Err(FinslerError::Config(_))
        ));
    }

    #[test]
    fn set_overrides_reshape_the_config() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("flat.cfg");
        fs::write(&path, FLAT_CFG).unwrap();
        let config = ScenarioConfig::load(
            &path,
            &[
                ("flow.dt".into(), "5e-4".into()),
                ("grid.n1".into(), "16".into()),
                ("structure.family".into(), "\"conformal\"".into()),
                ("structure.epsilon".into(), "0.05".into()),
            ],
        )
        .unwrap();
        assert_eq!(config.flow.dt, Some(5e-4));
        assert_eq!(config.grid.n1, 16);
        assert_eq!(config.structure.family, "conformal");
    }

    #[test]
    fn flat_scenario_passes_every_check() {
        let dir = tempdir().unwrap();
        let config = ScenarioConfig::from_str_validated(FLAT_CFG).unwrap();
        let report = run_scenario(&config, dir.path(), &dir.path().join("out")).unwrap();
        assert_eq!(report.exit_code, 0, "report: {report:?}");
        assert!(report.passed);
        assert_eq!(report.checks.len(), 4);
        assert!(report.checks.iter().all(|c| c.verdict == "pass"));
        // Outputs and the report exist on disk.
        assert!(dir.path().join("out/report.json").is_file());
        assert!(dir.path().join("out/diagnostics.csv").is_file());
        assert!(dir.path().join("out/final_state.csv").is_file());
        // The report round-trips as JSON.
        let text = fs::read_to_string(dir.path().join("out/report.json")).unwrap();
        let parsed: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.scenario, "flat_test");
    }

    #[test]
    fn failing_tolerance_yields_exit_one() {
        let dir = tempdir().unwrap();
        let cfg = FLAT_CFG
            .replace("family = \"euclidean\"", "family = \"conformal\"\nepsilon = 0.1")
            .replace("tol = 1e-10", "tol = 1e-30");
        let config = ScenarioConfig::from_str_validated(&cfg).unwrap();
        let report = run_scenario(&config, dir.path(), &dir.path().join("out")).unwrap();
        assert_eq!(report.exit_code, 1);
        let failed: Vec<_> = report
            .checks
            .iter()
            .filter(|c| c.verdict == "fail")
            .map(|c| c.name.clone())
            .collect();
        assert_eq!(failed, vec!["flat_stationary".to_string()]);
    }

    #[test]
    fn gauge_checks_run_on_a_gauge_fixed_scenario() {
        let cfg = r#"
name = "self_background"

[structure]
family = "conformal"
epsilon = 0.1

[background]
family = "conformal"
epsilon = 0.1

[grid]
n1 = 16
n2 = 16
ntheta = 8

[flow]
gauge = "deturck"
scheme = "euler"
dt = 5e-4
duration = 5e-3
diagnostics_every = 2

[[check]]
name = "gauge_vanishing"
tol = 1e-10

[[check]]
name = "self_background_matches_direct"
tol = 1e-6

[[check]]
name = "pullback_matches_direct"
tol = 1e-6

[[check]]
name = "dual_route_rhs"
tol = 1e-5
grid = [32, 32, 16]
"#;
        let dir = tempdir().unwrap();
        let config = ScenarioConfig::from_str_validated(cfg).unwrap();
        let report = run_scenario(&config, dir.path(), &dir.path().join("out")).unwrap();
        assert_eq!(report.exit_code, 0, "report: {report:?}");
        // The self-background gauge field cancels analytically; numerically
        // it sits at rounding level once the state has evolved away from the
        // background, so both trajectories agree to the same level.
        let gauge = report.checks.iter().find(|c| c.name == "gauge_vanishing").unwrap();
        assert!(gauge.measured.unwrap() <= 1e-12, "gauge: {gauge:?}");
        let pullback = report
            .checks
            .iter()
            .find(|c| c.name == "pullback_matches_direct")
            .unwrap();
        assert!(pullback.measured.unwrap() <= 1e-12, "pullback: {pullback:?}");
    }

    #[test]
    fn blow_up_exits_three_and_still_reports() {
        // A coarse conformal run at the very edge of the step-size guard is
        // violently unstable for the diffusion stencil; it must abort with
        // the blow-up exit code yet leave a complete report behind.
        let cfg = r#"
name = "unstable"

[structure]
family = "conformal_wave"
epsilon = 0.3
wave = [3, 0]

[grid]
n1 = 8
n2 = 8
ntheta = 8

[flow]
gauge = "direct"
scheme = "euler"
cfl = 0.499
duration = 40.0
diagnostics_every = 50

[[check]]
name = "no_blow_up"

[[check]]
name = "parabolicity_positive"
"#;
        let dir = tempdir().unwrap();
        let config = ScenarioConfig::from_str_validated(cfg).unwrap();
        let report = run_scenario(&config, dir.path(), &dir.path().join("out")).unwrap();
        assert_eq!(report.exit_code, 3, "report: {report:?}");
        assert!(report.blow_up.is_some());
        assert_eq!(report.checks.len(), 2);
        let no_blow = report.checks.iter().find(|c| c.name == "no_blow_up").unwrap();
        assert_eq!(no_blow.verdict, "fail");
        let skipped = report
            .checks
            .iter()
            .find(|c| c.name == "parabolicity_positive")
            .unwrap();
        assert_eq!(skipped.verdict, "skipped");
        assert!(dir.path().join("out/report.json").is_file());
    }

    #[test]
    fn dump_field_writes_a_readable_csv() {
        let dir = tempdir().unwrap();
        let config = ScenarioConfig::from_str_validated(FLAT_CFG).unwrap();
        let out = dir.path().join("field.csv");
        dump_field(&config, "f2", &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("i,j,k,x1,x2,theta,value"));
        assert_eq!(text.lines().count(), 1 + 8 * 8 * 8);
        assert!(matches!(
            dump_field(&config, "nonsense", &out),
            Err(FinslerError::Config(_))
        ));
    }
}
