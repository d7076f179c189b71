//! Run configuration, the time-stepping pipeline and file output.
//!
//! One step advances concentrations implicitly, updates the displacement from
//! the resulting fluxes, then optionally applies the Gauss sweep and the
//! Faraday reconstruction before recording diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ampere::{
    faraday_correct_with, gauss_correct, ma_bdf2_update, ma_euler_update, FaradayMode, SweepOrder,
};
use crate::diagnostics::{
    dt_star, error_vs_exact_cell, error_vs_exact_face, faraday_residual, free_energy,
    gauss_residual, DiagnosticsRecord, ErrorReport,
};
use crate::error::{Error, Result};
use crate::grid::{
    read_cell_csv, read_face_csv, write_cell_csv, write_face_csv, CellField, FaceField,
};
use crate::linsolve::{SolveStats, SolverOptions, DEFAULT_TOL};
use crate::model::{
    builtin_example, expr_scalar, expr_vector, materialize, ChemicalPotential, DiscreteProblem,
    Domain, InitialDisplacement, MuReference, ProblemSpec, SpeciesSpec,
};
use crate::transport::{bdf2_np_step, compute_dg, euler_np_step, DgField, NpStep, Scheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub time: TimeConfig,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub corrections: CorrectionsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub mu_reference: MuReference,
}

fn default_scheme() -> Scheme {
    Scheme::Euler
}

/// Either `builtin = <id>` or an `[problem.inline]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineProblem>,
}

/// Problem given by expressions in `x`, `y` and `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub domain: Domain,
    pub kappa: f64,
    pub permittivity: String,
    #[serde(default = "zero_expr")]
    pub fixed_charge: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ma_source: Option<[String; 2]>,
    /// `"poisson_init"` or a pair of expressions.
    pub initial_displacement: InlineDisplacement,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_displacement: Option<[String; 2]>,
    pub species: Vec<InlineSpecies>,
}

fn zero_expr() -> String {
    "0".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InlineDisplacement {
    Tag(String),
    Explicit([String; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineSpecies {
    pub valence: f64,
    pub initial_concentration: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chemical_potential: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<String>,
}

impl InlineProblem {
    pub fn to_spec(&self) -> Result<ProblemSpec> {
        let initial_displacement = match &self.initial_displacement {
            InlineDisplacement::Tag(t) if t == "poisson_init" => InitialDisplacement::PoissonInit,
            InlineDisplacement::Tag(t) => {
                return Err(Error::Config(format!(
                    "initial_displacement must be \"poisson_init\" or two expressions, got \"{t}\""
                )))
            }
            InlineDisplacement::Explicit([x, y]) => {
                InitialDisplacement::Explicit(expr_vector(x, y)?)
            }
        };
        let pair = |p: &Option<[String; 2]>| -> Result<_> {
            p.as_ref().map(|[x, y]| expr_vector(x, y)).transpose()
        };
        let species = self
            .species
            .iter()
            .map(|s| {
                Ok(SpeciesSpec {
                    valence: s.valence,
                    initial_concentration: expr_scalar(&s.initial_concentration)?,
                    np_source: s.source.as_deref().map(expr_scalar).transpose()?,
                    chemical_potential: s
                        .chemical_potential
                        .as_deref()
                        .map(|e| expr_scalar(e).map(ChemicalPotential::Field))
                        .transpose()?,
                    exact: s.exact.as_deref().map(expr_scalar).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProblemSpec {
            name: "inline".into(),
            domain: self.domain,
            kappa: self.kappa,
            permittivity: expr_scalar(&self.permittivity)?,
            fixed_charge: expr_scalar(&self.fixed_charge)?,
            theta: pair(&self.theta)?,
            ma_source: pair(&self.ma_source)?,
            species,
            initial_displacement,
            exact_displacement: pair(&self.exact_displacement)?,
            default_corrections: true,
        })
    }
}

impl ProblemConfig {
    pub fn builtin(id: u32) -> Self {
        Self {
            builtin: Some(id),
            inline: None,
        }
    }

    pub fn to_spec(&self) -> Result<ProblemSpec> {
        match (&self.builtin, &self.inline) {
            (Some(id), None) => builtin_example(*id),
            (None, Some(p)) => p.to_spec(),
            _ => Err(Error::Config(
                "problem needs exactly one of `builtin` or `inline`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_final: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionsConfig {
    /// Defaults to the problem's own setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauss: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faraday: Option<bool>,
    #[serde(default)]
    pub sweep_order: SweepOrder,
    #[serde(default)]
    pub faraday_mode: FaradayMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maxit: Option<usize>,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            maxit: None,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            maxit: self.maxit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub directory: PathBuf,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_every")]
    pub diagnostics_every: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("output")
}

fn default_every() -> usize {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: default_out_dir(),
            snapshot_times: Vec::new(),
            diagnostics_every: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Desk-scale defaults for a built-in example.
    pub fn example(id: u32) -> Result<Self> {
        let (n, dt, t_final, snapshots): (usize, f64, f64, Vec<f64>) = match id {
            1 => (20, 0.01, 1.0, vec![0.0, 1.0]),
            2 => (100, 1e-3, 5.0, vec![0.0, 0.01, 0.1, 1.0, 5.0]),
            3 => (100, 1e-3, 2.0, vec![0.0, 0.01, 0.1, 0.5, 1.0, 2.0]),
            _ => return Err(Error::UnknownExample(id)),
        };
        Ok(Self {
            problem: ProblemConfig::builtin(id),
            grid: GridConfig {
                nx: n,
                ny: n,
                domain: None,
            },
            time: TimeConfig { dt, t_final },
            scheme: Scheme::Euler,
            corrections: CorrectionsConfig::default(),
            solver: SolverConfig::default(),
            output: OutputConfig {
                directory: PathBuf::from(format!("output/example{id}")),
                snapshot_times: snapshots,
                diagnostics_every: 1,
            },
            // The species' own concentration makes the solvation drift
            // anti-diffusive (ratio ~17.6 > 1) and the run collapses within a
            // hundred steps; the solvent reading keeps it well posed.
            mu_reference: if id == 3 {
                MuReference::Solvent
            } else {
                MuReference::default()
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dt = self.time.dt;
        let t_final = self.time.t_final;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if !(t_final >= dt) || !t_final.is_finite() {
            return Err(Error::Config(format!(
                "t_final must be at least dt, got t_final = {t_final}, dt = {dt}"
            )));
        }
        self.n_steps()?;
        if let Some(t) = self
            .output
            .snapshot_times
            .iter()
            .find(|&&t| !(0.0..=t_final * (1.0 + 1e-12)).contains(&t))
        {
            return Err(Error::Config(format!(
                "snapshot time {t} outside [0, {t_final}]"
            )));
        }
        if self.output.diagnostics_every == 0 {
            return Err(Error::Config("diagnostics_every must be at least 1".into()));
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        match (&self.problem.builtin, &self.problem.inline) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(
                "problem needs exactly one of `builtin` or `inline`".into(),
            )),
        }
    }

    /// Number of steps; `t_final` must be a whole multiple of `dt`.
    pub fn n_steps(&self) -> Result<usize> {
        let ratio = self.time.t_final / self.time.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "t_final = {} is not a whole number of steps of dt = {}",
                self.time.t_final, self.time.dt
            )));
        }
        Ok(n as usize)
    }

    /// SHA-256 of the canonical config text, framed like a git blob.
    pub fn content_hash(&self) -> String {
        let text = self.to_toml();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", text.len()).as_bytes());
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Corrections actually applied, after resolving defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedCorrections {
    pub gauss: bool,
    pub faraday: bool,
    pub sweep_order: SweepOrder,
    pub faraday_mode: FaradayMode,
}

/// Problem and settings ready to step.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: DiscreteProblem,
    pub scheme: Scheme,
    pub dt: f64,
    pub n_steps: usize,
    pub corrections: ResolvedCorrections,
    pub solver: SolverOptions,
}

impl Setup {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.problem.to_spec()?;
        let domain = config.grid.domain.unwrap_or(spec.domain);
        let grid = domain.grid(config.grid.nx, config.grid.ny)?;
        let problem = materialize(&spec, grid)?.with_mu_reference(config.mu_reference);
        let default = spec.default_corrections;
        Ok(Self {
            problem,
            scheme: config.scheme,
            dt: config.time.dt,
            n_steps: config.n_steps()?,
            corrections: ResolvedCorrections {
                gauss: config.corrections.gauss.unwrap_or(default),
                faraday: config.corrections.faraday.unwrap_or(default),
                sweep_order: config.corrections.sweep_order,
                faraday_mode: config.corrections.faraday_mode,
            },
            solver: config.solver.options(),
        })
    }
}

/// Accumulated linear-solver and correction statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunStats {
    pub np_solves: usize,
    pub np_iterations: usize,
    pub np_max_iterations: usize,
    pub np_max_residual: f64,
    pub max_gauss_xi: f64,
    pub max_faraday_change: f64,
}

impl RunStats {
    fn record_solve(&mut self, s: &SolveStats) {
        self.np_solves += 1;
        self.np_iterations += s.iterations;
        self.np_max_iterations = self.np_max_iterations.max(s.iterations);
        self.np_max_residual = self.np_max_residual.max(s.final_relative_residual);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub step: usize,
    pub c: Vec<CellField>,
    /// Previous level; kept only for BDF2 after the first step.
    pub c_prev: Option<Vec<CellField>>,
    pub d: FaceField,
    pub d_prev: Option<FaceField>,
    pub phi: Option<CellField>,
    pub diagnostics: DiagnosticsRecord,
    /// Running minimum over all recorded levels, per species.
    pub running_min: Vec<f64>,
}

impl SimState {
    pub fn initial(setup: &Setup) -> Result<Self> {
        let p = &setup.problem;
        let c = p.c0.clone();
        let d = p.d0.clone();
        let mu = p.mu_fields(0.0, &c)?;
        let dg = compute_dg(&d, &mu, &p.valences, &p.eps_face)?;
        let ds = dt_star(&dg, &p.eps_face, &c, p.kappa, &p.valences);
        let g = gauss_residual(&d, &c, &p.valences, &p.rho_f, p.kappa)?;
        let diagnostics = record(p, 0.0, &c, &mu, &d, g, ds)?;
        Ok(Self {
            t: 0.0,
            step: 0,
            running_min: diagnostics.min_c.clone(),
            c,
            c_prev: None,
            d,
            d_prev: None,
            phi: p.phi0.clone(),
            diagnostics,
        })
    }
}

fn record(
    p: &DiscreteProblem,
    t: f64,
    c: &[CellField],
    mu: &[CellField],
    d: &FaceField,
    gauss_pre: f64,
    dt_star: f64,
) -> Result<DiagnosticsRecord> {
    let energy = if c.iter().all(|c| c.min() > 0.0) {
        free_energy(d, c, mu, p.kappa, &p.eps_face)?
    } else {
        f64::NAN
    };
    Ok(DiagnosticsRecord {
        t,
        mass: c.iter().map(CellField::integral).collect(),
        min_c: c.iter().map(CellField::min).collect(),
        energy,
        gauss_residual: gauss_residual(d, c, &p.valences, &p.rho_f, p.kappa)?,
        faraday_residual: faraday_residual(d, &p.eps_face)?,
        dt_star,
        gauss_residual_pre_faraday: gauss_pre,
    })
}

fn dg_at(p: &DiscreteProblem, t: f64, c: &[CellField], d: &FaceField) -> Result<DgField> {
    let mu = p.mu_fields(t, c)?;
    compute_dg(d, &mu, &p.valences, &p.eps_face)
}

fn tag_species(err: Error, l: usize) -> Error {
    match err {
        Error::NonPositiveConcentration { i, j, value, .. } => Error::NonPositiveConcentration {
            species: l + 1,
            i,
            j,
            value,
        },
        other => other,
    }
}

/// Advances `state` by one step. BDF2 falls back to a backward-Euler step when
/// no history is present.
pub fn step(state: &SimState, setup: &Setup, stats: &mut RunStats) -> Result<SimState> {
    let p = &setup.problem;
    let dt = setup.dt;
    let n = state.step;
    let t_n = n as f64 * dt;
    let t_new = (n + 1) as f64 * dt;
    let history = match (setup.scheme, &state.c_prev, &state.d_prev) {
        (Scheme::Bdf2, Some(c), Some(d)) => Some((c, d)),
        _ => None,
    };

    let dg_n = dg_at(p, t_n, &state.c, &state.d)?;
    let dg = match history {
        Some((c_prev, d_prev)) => {
            let dg_prev = dg_at(p, t_n - dt, c_prev, d_prev)?;
            DgField::extrapolate(&dg_n, &dg_prev)?
        }
        None => dg_n,
    };

    let mut c_new = Vec::with_capacity(p.n_species());
    let mut fluxes = Vec::with_capacity(p.n_species());
    for l in 0..p.n_species() {
        let src = p.np_source(l, t_new);
        let NpStep { c, flux, stats: s } = match history {
            Some((c_prev, _)) => bdf2_np_step(
                &state.c[l],
                &c_prev[l],
                &dg.species[l],
                p.kappa,
                dt,
                src.as_ref(),
                setup.solver,
            ),
            None => euler_np_step(
                &state.c[l],
                &dg.species[l],
                p.kappa,
                dt,
                src.as_ref(),
                setup.solver,
            ),
        }
        .map_err(|e| tag_species(e, l))?;
        stats.record_solve(&s);
        c_new.push(c);
        fluxes.push(flux);
    }

    let mut d_new = match history {
        Some((_, d_prev)) => {
            let theta = match (p.theta(t_n), p.theta(t_n - dt)) {
                (Some(a), Some(b)) => {
                    let mut th = a.scaled(2.0);
                    th.add_scaled(-1.0, &b);
                    Some(th)
                }
                _ => None,
            };
            ma_bdf2_update(
                &state.d,
                d_prev,
                &fluxes,
                &p.valences,
                p.kappa,
                dt,
                theta.as_ref(),
                p.ma_source(t_new).as_ref(),
            )?
        }
        None => ma_euler_update(
            &state.d,
            &fluxes,
            &p.valences,
            p.kappa,
            dt,
            p.theta(t_n).as_ref(),
            p.ma_source(t_n).as_ref(),
        )?,
    };
    if !d_new.is_finite() {
        return Err(Error::NonFinite("displacement update".into()));
    }

    if setup.corrections.gauss {
        let (d, report) = gauss_correct(
            &d_new,
            &c_new,
            &p.valences,
            &p.rho_f,
            p.kappa,
            setup.corrections.sweep_order,
        )?;
        stats.max_gauss_xi = stats.max_gauss_xi.max(report.max_xi);
        d_new = d;
    }
    let gauss_pre = gauss_residual(&d_new, &c_new, &p.valences, &p.rho_f, p.kappa)?;
    let mut phi = state.phi.clone();
    if setup.corrections.faraday {
        let rec = faraday_correct_with(
            &d_new,
            &p.eps_face,
            setup.corrections.faraday_mode,
            setup.solver,
        )?;
        stats.max_faraday_change = stats.max_faraday_change.max(rec.max_change);
        d_new = rec.d_tilde;
        phi = Some(rec.phi);
    }

    // The bound takes c_max over both levels of the step.
    let both_levels: Vec<CellField> = state.c.iter().chain(&c_new).cloned().collect();
    let ds = dt_star(&dg, &p.eps_face, &both_levels, p.kappa, &p.valences);
    let mu_new = p.mu_fields(t_new, &c_new)?;
    let diagnostics = record(p, t_new, &c_new, &mu_new, &d_new, gauss_pre, ds)?;
    let running_min = state
        .running_min
        .iter()
        .zip(&diagnostics.min_c)
        .map(|(a, b)| a.min(*b))
        .collect();

    let keep_history = setup.scheme == Scheme::Bdf2;
    Ok(SimState {
        t: t_new,
        step: n + 1,
        c_prev: keep_history.then(|| state.c.clone()),
        d_prev: keep_history.then(|| state.d.clone()),
        c: c_new,
        d: d_new,
        phi,
        diagnostics,
        running_min,
    })
}

/// A run held in memory.
pub struct Simulation {
    pub setup: Setup,
    pub state: SimState,
    pub records: Vec<DiagnosticsRecord>,
    pub stats: RunStats,
}

impl Simulation {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let setup = Setup::new(config)?;
        Self::from_setup(setup)
    }

    pub fn from_setup(setup: Setup) -> Result<Self> {
        let state = SimState::initial(&setup)?;
        Ok(Self {
            records: vec![state.diagnostics.clone()],
            setup,
            state,
            stats: RunStats::default(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.setup.n_steps
    }

    pub fn advance(&mut self) -> Result<()> {
        self.state = step(&self.state, &self.setup, &mut self.stats)?;
        self.records.push(self.state.diagnostics.clone());
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.advance()?;
        }
        Ok(())
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub steps: usize,
    pub final_diagnostics: DiagnosticsRecord,
    pub running_min: Vec<f64>,
    pub wall_time_s: f64,
    pub stats: RunStats,
    pub config_hash: String,
}

fn snapshot_tag(t: f64) -> String {
    format!("t{t}")
}

/// Writes `c_<l>_t<value>.csv`, `d_t<value>.csv` and, when known,
/// `phi_t<value>.csv`.
pub fn write_snapshot(dir: &Path, label: f64, state: &SimState) -> Result<()> {
    let tag = snapshot_tag(label);
    for (l, c) in state.c.iter().enumerate() {
        write_cell_csv(&dir.join(format!("c_{}_{tag}.csv", l + 1)), c)?;
    }
    write_face_csv(&dir.join(format!("d_{tag}.csv")), &state.d)?;
    if let Some(phi) = &state.phi {
        write_cell_csv(&dir.join(format!("phi_{tag}.csv")), phi)?;
    }
    Ok(())
}

/// Rebuilds a backward-Euler state from a snapshot written by [`run`].
pub fn load_snapshot(setup: &Setup, dir: &Path, label: f64) -> Result<SimState> {
    if setup.scheme != Scheme::Euler {
        return Err(Error::Config(
            "snapshots hold one time level; reloading needs the euler scheme".into(),
        ));
    }
    let p = &setup.problem;
    let tag = snapshot_tag(label);
    let c = (0..p.n_species())
        .map(|l| read_cell_csv(&dir.join(format!("c_{}_{tag}.csv", l + 1)), p.grid))
        .collect::<Result<Vec<_>>>()?;
    let d = read_face_csv(&dir.join(format!("d_{tag}.csv")), p.grid)?;
    let phi_path = dir.join(format!("phi_{tag}.csv"));
    let phi = if phi_path.exists() {
        Some(read_cell_csv(&phi_path, p.grid)?)
    } else {
        None
    };
    let step_f = label / setup.dt;
    let step = step_f.round() as usize;
    if (step_f - step as f64).abs() > 1e-9 * step_f.max(1.0) {
        return Err(Error::Config(format!(
            "snapshot time {label} is not on the step grid of dt = {}",
            setup.dt
        )));
    }
    let t = step as f64 * setup.dt;
    let mu = p.mu_fields(t, &c)?;
    let dg = compute_dg(&d, &mu, &p.valences, &p.eps_face)?;
    let ds = dt_star(&dg, &p.eps_face, &c, p.kappa, &p.valences);
    let g = gauss_residual(&d, &c, &p.valences, &p.rho_f, p.kappa)?;
    let diagnostics = record(p, t, &c, &mu, &d, g, ds)?;
    Ok(SimState {
        t,
        step,
        running_min: diagnostics.min_c.clone(),
        c,
        c_prev: None,
        d,
        d_prev: None,
        phi,
        diagnostics,
    })
}

fn snapshot_due(step: usize, dt: f64, times: &[f64]) -> Vec<f64> {
    times
        .iter()
        .copied()
        .filter(|&ts| (ts / dt).round() as usize == step)
        .collect()
}

fn summary_text(
    config: &RunConfig,
    summary: &RunSummary,
    setup: &Setup,
    error: Option<&Error>,
) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "status: {}",
        error.map_or("completed".to_string(), |e| format!("failed: {e}"))
    );
    let _ = writeln!(s, "config_sha256: {}", summary.config_hash);
    let _ = writeln!(s, "steps: {} of {}", summary.steps, setup.n_steps);
    let _ = writeln!(s, "wall_time_s: {:.3}", summary.wall_time_s);
    let c = setup.corrections;
    let _ = writeln!(
        s,
        "corrections: gauss={} faraday={} ({:?}) sweep_order={:?}",
        c.gauss, c.faraday, c.faraday_mode, c.sweep_order
    );
    let st = &summary.stats;
    let _ = writeln!(
        s,
        "np_solves: {} total_iterations: {} max_iterations: {} max_relative_residual: {:e}",
        st.np_solves, st.np_iterations, st.np_max_iterations, st.np_max_residual
    );
    if let Some(ps) = &setup.problem.poisson_stats {
        let _ = writeln!(s, "poisson_init: {ps}");
    }
    let _ = writeln!(s, "max_gauss_xi: {:e}", st.max_gauss_xi);
    let _ = writeln!(s, "max_faraday_change: {:e}", st.max_faraday_change);
    let n = summary.final_diagnostics.mass.len();
    let _ = writeln!(s, "final_diagnostics:");
    let _ = writeln!(s, "{}", DiagnosticsRecord::csv_header(n));
    let _ = writeln!(s, "{}", summary.final_diagnostics.csv_row());
    let mins: Vec<String> = summary
        .running_min
        .iter()
        .map(|m| format!("{m:.16e}"))
        .collect();
    let _ = writeln!(s, "running_min_c: {}", mins.join(","));
    let _ = writeln!(s, "\n[config]\n{}", config.to_toml());
    s
}

/// Runs `config` to completion, writing diagnostics, snapshots and a summary
/// under the configured output directory. On failure the last good state is
/// written as a snapshot before the error is returned.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let setup = Setup::new(config)?;
    let dir = config.output.directory.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut sim = Simulation::from_setup(setup)?;
    let n_species = sim.setup.problem.n_species();
    let mut csv = String::new();
    csv.push_str(&DiagnosticsRecord::csv_header(n_species));
    csv.push('\n');
    csv.push_str(&sim.state.diagnostics.csv_row());
    csv.push('\n');
    let times = &config.output.snapshot_times;
    for ts in snapshot_due(0, sim.setup.dt, times) {
        write_snapshot(&dir, ts, &sim.state)?;
    }

    let mut failure = None;
    while !sim.is_finished() {
        if let Err(e) = sim.advance() {
            failure = Some(e);
            break;
        }
        let k = sim.state.step;
        if k % config.output.diagnostics_every == 0 || sim.is_finished() {
            csv.push_str(&sim.state.diagnostics.csv_row());
            csv.push('\n');
        }
        for ts in snapshot_due(k, sim.setup.dt, times) {
            write_snapshot(&dir, ts, &sim.state)?;
        }
    }
    let diag_path = dir.join("diagnostics.csv");
    fs::write(&diag_path, &csv).map_err(|e| Error::io(&diag_path, e))?;
    if failure.is_some() {
        write_snapshot(&dir, sim.state.t, &sim.state)?;
    }

    let summary = RunSummary {
        output_dir: dir.clone(),
        steps: sim.state.step,
        final_diagnostics: sim.state.diagnostics.clone(),
        running_min: sim.state.running_min.clone(),
        wall_time_s: started.elapsed().as_secs_f64(),
        stats: sim.stats,
        config_hash: config.content_hash(),
    };
    let text = summary_text(config, &summary, &sim.setup, failure.as_ref());
    let summary_path = dir.join("summary.txt");
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Time-step rule of a convergence study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtRule {
    /// `dt = h^2`.
    HSquared,
    /// `dt = h / divisor`.
    HOver(f64),
    Fixed(f64),
}

impl DtRule {
    pub fn dt(&self, h: f64) -> f64 {
        match *self {
            DtRule::HSquared => h * h,
            DtRule::HOver(k) => h / k,
            DtRule::Fixed(dt) => dt,
        }
    }
}

/// Runs `base` on square meshes of width `h` (per entry of `hs`) and reports
/// final-time L2 errors of every concentration and displacement component.
pub fn convergence_study(base: &RunConfig, hs: &[f64], rule: DtRule) -> Result<ErrorReport> {
    let spec = base.problem.to_spec()?;
    if !spec.has_exact_solution() {
        return Err(Error::Config(
            "convergence study needs a problem with exact solutions".into(),
        ));
    }
    let domain = base.grid.domain.unwrap_or(spec.domain);
    let n_species = spec.species.len();
    let mut columns: Vec<(String, Vec<f64>)> = (1..=n_species)
        .map(|l| (format!("c{l}"), Vec::new()))
        .chain([
            ("D1".to_string(), Vec::new()),
            ("D2".to_string(), Vec::new()),
        ])
        .collect();
    let mut min_c = Vec::new();
    for &h in hs {
        let mut cfg = base.clone();
        let nx = (domain.lx / h).round() as usize;
        let ny = (domain.ly / h).round() as usize;
        cfg.grid = GridConfig {
            nx,
            ny,
            domain: Some(domain),
        };
        let dt = rule.dt(h);
        let steps = (base.time.t_final / dt).round().max(1.0);
        cfg.time.dt = base.time.t_final / steps;
        let mut sim = Simulation::new(&cfg)?;
        sim.run_to_end()?;
        let t = sim.state.t;
        for l in 0..n_species {
            let exact = spec.species[l].exact.as_ref().expect("checked above");
            columns[l]
                .1
                .push(error_vs_exact_cell(&sim.state.c[l], exact, t));
        }
        let exact_d = spec.exact_displacement.as_ref().expect("checked above");
        let (ex, ey) = error_vs_exact_face(&sim.state.d, exact_d, t);
        columns[n_species].1.push(ex);
        columns[n_species + 1].1.push(ey);
        min_c.push(sim.state.running_min.clone());
    }
    Ok(ErrorReport {
        h: hs.to_vec(),
        columns,
        min_c,
    })
}

/// Result of checking a configuration without running it.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub nx: usize,
    pub ny: usize,
    pub n_steps: usize,
    pub corrections: ResolvedCorrections,
    pub initial: DiagnosticsRecord,
    pub net_charge: f64,
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "grid: {} x {}, {} steps", self.nx, self.ny, self.n_steps)?;
        writeln!(
            f,
            "corrections: gauss={} faraday={} ({:?}) sweep_order={:?}",
            self.corrections.gauss,
            self.corrections.faraday,
            self.corrections.faraday_mode,
            self.corrections.sweep_order
        )?;
        writeln!(f, "net charge: {:e}", self.net_charge)?;
        let n = self.initial.mass.len();
        writeln!(f, "{}", DiagnosticsRecord::csv_header(n))?;
        write!(f, "{}", self.initial.csv_row())
    }
}

/// Materializes the problem and evaluates the initial-state invariants.
pub fn validate(config: &RunConfig) -> Result<ValidationReport> {
    let setup = Setup::new(config)?;
    let state = SimState::initial(&setup)?;
    let p = &setup.problem;
    let mut net = p.rho_f.integral();
    for (c, q) in state.c.iter().zip(&p.valences) {
        net += q * c.integral();
    }
    Ok(ValidationReport {
        nx: p.grid.nx,
        ny: p.grid.ny,
        n_steps: setup.n_steps,
        corrections: setup.corrections,
        initial: state.diagnostics,
        net_charge: net,
    })
}
