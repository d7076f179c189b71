//! Problem definitions and their sampling onto a grid.

use std::f64::consts::PI;
use std::fmt;
use std::rc::Rc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_positive_faces, divergence, CellField, FaceField, GridSpec};
use crate::linsolve::{relative_residual, solve_spd, CsrMatrix, SolveStats, SolverOptions};

/// Scalar function of `(x, y, t)`. Time-independent data ignores `t`.
pub type ScalarFn = Rc<dyn Fn(f64, f64, f64) -> f64>;
/// Vector function of `(x, y, t)`.
pub type VectorFn = Rc<dyn Fn(f64, f64, f64) -> (f64, f64)>;

pub fn scalar_fn(f: impl Fn(f64, f64, f64) -> f64 + 'static) -> ScalarFn {
    Rc::new(f)
}

pub fn vector_fn(f: impl Fn(f64, f64, f64) -> (f64, f64) + 'static) -> VectorFn {
    Rc::new(f)
}

/// Compiles an expression in `x`, `y`, `t` (e.g. `"0.1 + sin(pi*x)"`).
pub fn expr_scalar(expr: &str) -> Result<ScalarFn> {
    let err = |message: String| Error::Expression {
        expr: expr.to_string(),
        message,
    };
    let parsed: meval::Expr = expr.parse().map_err(|e: meval::Error| err(e.to_string()))?;
    let f = parsed
        .bind3("x", "y", "t")
        .map_err(|e| err(e.to_string()))?;
    Ok(Rc::new(f))
}

pub fn expr_vector(x_expr: &str, y_expr: &str) -> Result<VectorFn> {
    let fx = expr_scalar(x_expr)?;
    let fy = expr_scalar(y_expr)?;
    Ok(Rc::new(move |x, y, t| (fx(x, y, t), fy(x, y, t))))
}

/// Which concentration enters the solvation potential `-r log(v0 c_ref)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuReference {
    /// The initial concentration, frozen for the whole run.
    Initial,
    /// The species' own concentration at the previous time level.
    #[default]
    PreviousStep,
    /// The solvent concentration `(1 - sum_k v_k c_k) / v0` at the previous
    /// time level, with `v_k = ratio_k * v0` the ion volumes.
    Solvent,
}

#[derive(Clone)]
pub enum ChemicalPotential {
    /// Prescribed field `mu(x, y, t)`.
    Field(ScalarFn),
    /// `mu = -ratio * log(solvent_volume * c_ref)`.
    Solvation { ratio: f64, solvent_volume: f64 },
}

impl fmt::Debug for ChemicalPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChemicalPotential::Field(_) => f.write_str("Field(..)"),
            ChemicalPotential::Solvation {
                ratio,
                solvent_volume,
            } => f
                .debug_struct("Solvation")
                .field("ratio", ratio)
                .field("solvent_volume", solvent_volume)
                .finish(),
        }
    }
}

#[derive(Clone)]
pub struct SpeciesSpec {
    pub valence: f64,
    pub initial_concentration: ScalarFn,
    pub np_source: Option<ScalarFn>,
    pub chemical_potential: Option<ChemicalPotential>,
    /// Known exact solution, when there is one.
    pub exact: Option<ScalarFn>,
}

impl fmt::Debug for SpeciesSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpeciesSpec")
            .field("valence", &self.valence)
            .field("np_source", &self.np_source.is_some())
            .field("chemical_potential", &self.chemical_potential)
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

#[derive(Clone)]
pub enum InitialDisplacement {
    Explicit(VectorFn),
    /// `D0 = -eps grad(phi0)` with `phi0` solving the periodic Poisson problem
    /// for the initial net charge.
    PoissonInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub x0: f64,
    pub y0: f64,
    pub lx: f64,
    pub ly: f64,
}

impl Domain {
    pub fn grid(&self, nx: usize, ny: usize) -> Result<GridSpec> {
        GridSpec::new(nx, ny, self.x0, self.y0, self.lx, self.ly)
    }
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub domain: Domain,
    pub kappa: f64,
    pub permittivity: ScalarFn,
    pub fixed_charge: ScalarFn,
    pub theta: Option<VectorFn>,
    pub ma_source: Option<VectorFn>,
    pub species: Vec<SpeciesSpec>,
    pub initial_displacement: InitialDisplacement,
    pub exact_displacement: Option<VectorFn>,
    /// Whether Gauss and Faraday corrections are applied unless overridden.
    pub default_corrections: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("kappa", &self.kappa)
            .field("theta", &self.theta.is_some())
            .field("ma_source", &self.ma_source.is_some())
            .field("species", &self.species)
            .field(
                "poisson_init",
                &matches!(self.initial_displacement, InitialDisplacement::PoissonInit),
            )
            .finish()
    }
}

impl ProblemSpec {
    pub fn valences(&self) -> Vec<f64> {
        self.species.iter().map(|s| s.valence).collect()
    }

    pub fn has_exact_solution(&self) -> bool {
        self.exact_displacement.is_some() && self.species.iter().all(|s| s.exact.is_some())
    }
}

/// A problem sampled on a grid.
#[derive(Clone)]
pub struct DiscreteProblem {
    pub spec: ProblemSpec,
    pub grid: GridSpec,
    pub kappa: f64,
    pub valences: Vec<f64>,
    pub eps_face: FaceField,
    pub rho_f: CellField,
    pub c0: Vec<CellField>,
    pub d0: FaceField,
    /// Potential of the initial displacement, when it came from a Poisson solve.
    pub phi0: Option<CellField>,
    pub mu_reference: MuReference,
    pub poisson_stats: Option<SolveStats>,
}

impl fmt::Debug for DiscreteProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteProblem")
            .field("spec", &self.spec)
            .field("grid", &self.grid)
            .field("mu_reference", &self.mu_reference)
            .finish_non_exhaustive()
    }
}

impl DiscreteProblem {
    pub fn n_species(&self) -> usize {
        self.valences.len()
    }

    pub fn with_mu_reference(mut self, r: MuReference) -> Self {
        self.mu_reference = r;
        self
    }

    /// True when some species carries a chemical potential.
    pub fn has_mu(&self) -> bool {
        self.spec
            .species
            .iter()
            .any(|s| s.chemical_potential.is_some())
    }

    /// True when the chemical potentials do not change over a run.
    pub fn mu_is_static(&self) -> bool {
        self.spec
            .species
            .iter()
            .all(|s| match &s.chemical_potential {
                None => true,
                Some(ChemicalPotential::Field(_)) => false,
                Some(ChemicalPotential::Solvation { .. }) => {
                    self.mu_reference == MuReference::Initial
                }
            })
    }

    /// Chemical potential of every species at time `t`, given the concentrations
    /// of the previous level.
    pub fn mu_fields(&self, t: f64, previous: &[CellField]) -> Result<Vec<CellField>> {
        self.spec
            .species
            .iter()
            .enumerate()
            .map(|(l, s)| match &s.chemical_potential {
                None => Ok(CellField::zeros(self.grid)),
                Some(ChemicalPotential::Field(f)) => {
                    Ok(CellField::from_fn(self.grid, |x, y| f(x, y, t)))
                }
                Some(ChemicalPotential::Solvation {
                    ratio,
                    solvent_volume,
                }) => {
                    let solvent;
                    let reference = match self.mu_reference {
                        MuReference::Initial => &self.c0[l],
                        MuReference::PreviousStep => &previous[l],
                        MuReference::Solvent => {
                            solvent = self.solvent_concentration(previous)?;
                            &solvent
                        }
                    };
                    if let Some((i, j, value)) = reference.find(|v| !(v > 0.0)) {
                        if self.mu_reference == MuReference::Solvent {
                            return Err(Error::Validation(format!(
                                "ions fill the whole volume at cell ({i}, {j}): solvent concentration {value:e}"
                            )));
                        }
                        return Err(Error::NonPositiveConcentration {
                            species: l + 1,
                            i,
                            j,
                            value,
                        });
                    }
                    let values = reference
                        .values
                        .iter()
                        .map(|c| -ratio * (solvent_volume * c).ln())
                        .collect();
                    CellField::from_values(self.grid, values)
                }
            })
            .collect()
    }

    /// `(1 - sum_k v_k c_k) / v0` over species with a solvation potential.
    fn solvent_concentration(&self, c: &[CellField]) -> Result<CellField> {
        let mut v0 = None;
        let mut occupied = CellField::zeros(self.grid);
        for (s, ck) in self.spec.species.iter().zip(c) {
            if let Some(ChemicalPotential::Solvation {
                ratio,
                solvent_volume,
            }) = &s.chemical_potential
            {
                match v0 {
                    Some(v) if v != *solvent_volume => {
                        return Err(Error::Validation(
                            "species disagree on the solvent volume".into(),
                        ))
                    }
                    _ => v0 = Some(*solvent_volume),
                }
                occupied.add_scaled(ratio * solvent_volume, ck);
            }
        }
        let v0 = v0.ok_or_else(|| Error::Validation("no solvation potential".into()))?;
        let values = occupied.values.iter().map(|o| (1.0 - o) / v0).collect();
        CellField::from_values(self.grid, values)
    }

    pub fn np_source(&self, l: usize, t: f64) -> Option<CellField> {
        self.spec.species[l]
            .np_source
            .as_ref()
            .map(|f| CellField::from_fn(self.grid, |x, y| f(x, y, t)))
    }

    pub fn theta(&self, t: f64) -> Option<FaceField> {
        self.spec
            .theta
            .as_ref()
            .map(|f| sample_vector(self.grid, f, t))
    }

    pub fn ma_source(&self, t: f64) -> Option<FaceField> {
        self.spec
            .ma_source
            .as_ref()
            .map(|f| sample_vector(self.grid, f, t))
    }

    pub fn exact_concentration(&self, l: usize, t: f64) -> Option<CellField> {
        self.spec.species[l]
            .exact
            .as_ref()
            .map(|f| CellField::from_fn(self.grid, |x, y| f(x, y, t)))
    }

    pub fn exact_displacement(&self, t: f64) -> Option<FaceField> {
        self.spec
            .exact_displacement
            .as_ref()
            .map(|f| sample_vector(self.grid, f, t))
    }
}

/// Samples the x-component at x-faces and the y-component at y-faces.
pub fn sample_vector(grid: GridSpec, f: &VectorFn, t: f64) -> FaceField {
    FaceField::from_fns(grid, |x, y| f(x, y, t).0, |x, y| f(x, y, t).1)
}

/// Samples `spec` on `grid`.
pub fn materialize(spec: &ProblemSpec, grid: GridSpec) -> Result<DiscreteProblem> {
    if !(spec.kappa > 0.0) || !spec.kappa.is_finite() {
        return Err(Error::Validation(format!(
            "kappa must be positive, got {}",
            spec.kappa
        )));
    }
    if spec.species.is_empty() {
        return Err(Error::Validation("at least one species is required".into()));
    }
    let eps = &spec.permittivity;
    let eps_face = FaceField::from_fns(grid, |x, y| eps(x, y, 0.0), |x, y| eps(x, y, 0.0));
    check_positive_faces(&eps_face)?;

    let rho = &spec.fixed_charge;
    let rho_f = CellField::from_fn(grid, |x, y| rho(x, y, 0.0));
    if !rho_f.is_finite() {
        return Err(Error::NonFinite("fixed charge".into()));
    }

    let mut c0 = Vec::with_capacity(spec.species.len());
    for (l, s) in spec.species.iter().enumerate() {
        let f = &s.initial_concentration;
        let c = CellField::from_fn(grid, |x, y| f(x, y, 0.0));
        if let Some((i, j, value)) = c.find(|v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NonPositiveConcentration {
                species: l + 1,
                i,
                j,
                value,
            });
        }
        c0.push(c);
    }

    if let Some(theta) = &spec.theta {
        let th = sample_vector(grid, theta, 0.0);
        let div = divergence(&th);
        let div_max = div.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tol = 1e-10 * th.norm_inf();
        if div_max > tol {
            return Err(Error::Validation(format!(
                "theta is not discretely divergence-free: max |div| = {div_max:e} > {tol:e}"
            )));
        }
    }

    let valences = spec.valences();
    let (d0, phi0, poisson_stats) = match &spec.initial_displacement {
        InitialDisplacement::Explicit(f) => (sample_vector(grid, f, 0.0), None, None),
        InitialDisplacement::PoissonInit => {
            let mut net = rho_f.clone();
            for (c, &q) in c0.iter().zip(&valences) {
                net.add_scaled(q, c);
            }
            let rhs = net.scaled(1.0 / (2.0 * spec.kappa * spec.kappa));
            let (phi, stats) = poisson_solve_with(&rhs, &eps_face, SolverOptions::default())?;
            let d0 = crate::ampere::potential_to_displacement(&phi, &eps_face);
            (d0, Some(phi), Some(stats))
        }
    };
    if !d0.is_finite() {
        return Err(Error::NonFinite("initial displacement".into()));
    }

    Ok(DiscreteProblem {
        spec: spec.clone(),
        grid,
        kappa: spec.kappa,
        valences,
        eps_face,
        rho_f,
        c0,
        d0,
        phi0,
        mu_reference: MuReference::default(),
        poisson_stats,
    })
}

/// Matrix of `-div(eps grad .)` on the periodic grid.
pub fn poisson_matrix(eps_face: &FaceField) -> Result<CsrMatrix> {
    let g = eps_face.grid;
    let (ax, ay) = (1.0 / (g.dx() * g.dx()), 1.0 / (g.dy() * g.dy()));
    let mut t = Vec::with_capacity(5 * g.n_cells());
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            let e = eps_face.x[k] * ax;
            let w = eps_face.x[g.idx(g.im(i), j)] * ax;
            let n = eps_face.y[k] * ay;
            let s = eps_face.y[g.idx(i, g.jm(j))] * ay;
            t.push((k, k, e + w + n + s));
            t.push((k, g.idx(g.ip(i), j), -e));
            t.push((k, g.idx(g.im(i), j), -w));
            t.push((k, g.idx(i, g.jp(j)), -n));
            t.push((k, g.idx(i, g.jm(j)), -s));
        }
    }
    CsrMatrix::from_triplets(g.n_cells(), &t)
}

/// Zero-mean `phi` with `-div(eps grad phi) = rho - mean(rho)`; the mean of
/// `rho` must vanish up to rounding (`1e-10` of its largest entry).
pub fn poisson_solve(rho: &CellField, eps_face: &FaceField) -> Result<CellField> {
    poisson_solve_with(rho, eps_face, SolverOptions::default()).map(|(phi, _)| phi)
}

/// As [`poisson_solve`], returning the solver statistics.
///
/// Uniform permittivities are solved directly with FFTs, others by conjugate
/// gradients; either is followed by refinement on the residual, which removes
/// the error a relative tolerance leaves behind when `rho` is large.
pub fn poisson_solve_with(
    rho: &CellField,
    eps_face: &FaceField,
    opts: SolverOptions,
) -> Result<(CellField, SolveStats)> {
    check_positive_faces(eps_face)?;
    let a = poisson_matrix(eps_face)?;
    let n = rho.values.len() as f64;
    let rho_mean = rho.values.iter().sum::<f64>() / n;
    let scale = rho.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if rho_mean.abs() > 1e-10 * scale {
        return Err(Error::IncompatibleRhs {
            mean: rho_mean,
            tol: 1e-10 * scale,
        });
    }
    let spectral = uniform_permittivity(eps_face);
    let solve = |b: &[f64]| -> Result<(Vec<f64>, SolveStats)> {
        match spectral {
            Some((ex, ey)) => {
                let x = fft_poisson(rho.grid, ex, ey, b);
                let final_relative_residual = relative_residual(&a, &x, b);
                Ok((
                    x,
                    SolveStats {
                        iterations: 0,
                        final_relative_residual,
                        converged: true,
                    },
                ))
            }
            None => solve_spd(&a, b, opts, true),
        }
    };
    let centered: Vec<f64> = rho.values.iter().map(|v| v - rho_mean).collect();
    let (mut x, mut stats) = solve(&centered)?;
    let scale = rho
        .values
        .iter()
        .fold(0.0_f64, |m, v| m.max((v - rho_mean).abs()));
    for _ in 0..MAX_REFINEMENTS {
        let ax = crate::linsolve::matvec(&a, &x)?;
        let mut r: Vec<f64> = rho
            .values
            .iter()
            .zip(&ax)
            .map(|(b, y)| b - rho_mean - y)
            .collect();
        let size = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if size <= REFINE_TOL * scale {
            break;
        }
        let r_mean = r.iter().sum::<f64>() / n;
        r.iter_mut().for_each(|v| *v -= r_mean);
        let (dx, s) = solve(&r)?;
        stats.iterations += s.iterations;
        x.iter_mut().zip(&dx).for_each(|(xi, di)| *xi += di);
    }
    let x_mean = x.iter().sum::<f64>() / n;
    x.iter_mut().for_each(|v| *v -= x_mean);
    Ok((CellField::from_values(rho.grid, x)?, stats))
}

const MAX_REFINEMENTS: usize = 3;
const REFINE_TOL: f64 = 1e-15;

/// Face permittivities that are constant per direction.
fn uniform_permittivity(eps_face: &FaceField) -> Option<(f64, f64)> {
    let (ex, ey) = (eps_face.x[0], eps_face.y[0]);
    let uniform = eps_face.x.iter().all(|&e| e == ex) && eps_face.y.iter().all(|&e| e == ey);
    uniform.then_some((ex, ey))
}

/// Zero-mean solution of the constant-coefficient periodic problem by
/// diagonalizing the five-point operator with 2D FFTs.
fn fft_poisson(g: GridSpec, ex: f64, ey: f64, b: &[f64]) -> Vec<f64> {
    let (nx, ny) = (g.nx, g.ny);
    let mut planner = FftPlanner::<f64>::new();
    let mut data: Vec<Complex<f64>> = b.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let transform = |data: &mut [Complex<f64>], planner: &mut FftPlanner<f64>, inverse: bool| {
        let (row, col) = if inverse {
            (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(ny))
        } else {
            (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny))
        };
        for r in data.chunks_exact_mut(nx) {
            row.process(r);
        }
        let mut column = vec![Complex::new(0.0, 0.0); ny];
        for i in 0..nx {
            for j in 0..ny {
                column[j] = data[j * nx + i];
            }
            col.process(&mut column);
            for j in 0..ny {
                data[j * nx + i] = column[j];
            }
        }
    };
    transform(&mut data, &mut planner, false);
    let (ax, ay) = (ex / (g.dx() * g.dx()), ey / (g.dy() * g.dy()));
    for j in 0..ny {
        let sy = ay * (2.0 - 2.0 * (2.0 * PI * j as f64 / ny as f64).cos());
        for i in 0..nx {
            let sx = ax * (2.0 - 2.0 * (2.0 * PI * i as f64 / nx as f64).cos());
            let k = j * nx + i;
            data[k] = if i == 0 && j == 0 {
                Complex::new(0.0, 0.0)
            } else {
                data[k] / (sx + sy)
            };
        }
    }
    transform(&mut data, &mut planner, true);
    let scale = 1.0 / (nx * ny) as f64;
    data.iter().map(|z| z.re * scale).collect()
}

fn square_domain() -> Domain {
    Domain {
        x0: -1.0,
        y0: -1.0,
        lx: 2.0,
        ly: 2.0,
    }
}

/// Built-in problems: 1 manufactured solution, 2 quadrupole fixed charge,
/// 3 annular fixed charge with solvation potential.
pub fn builtin_example(id: u32) -> Result<ProblemSpec> {
    match id {
        1 => Ok(example1(1.0)),
        2 => Ok(example2()),
        3 => Ok(example3()),
        _ => Err(Error::UnknownExample(id)),
    }
}

/// Manufactured solution with both concentrations equal to
/// `(pi^2/5) e^{-t} cos(pi x) cos(pi y) + 2` and
/// `D = (pi/2) e^{-t} (sin(pi x) cos(pi y), cos(pi x) sin(pi y))`, `eps = 1/2`.
/// Sources are derived for arbitrary `kappa`.
pub fn example1(kappa: f64) -> ProblemSpec {
    const EPS: f64 = 0.5;
    let valences = [1.0, -1.0];
    let amp = |t: f64| PI * PI / 5.0 * (-t).exp();
    let conc = move |x: f64, y: f64, t: f64| amp(t) * (PI * x).cos() * (PI * y).cos() + 2.0;
    let disp = |x: f64, y: f64, t: f64| {
        let a = 0.5 * PI * (-t).exp();
        (
            a * (PI * x).sin() * (PI * y).cos(),
            a * (PI * x).cos() * (PI * y).sin(),
        )
    };
    // Flux J = -kappa (grad c - q c D / eps) of the exact solution.
    let flux = move |q: f64, x: f64, y: f64, t: f64| {
        let a = amp(t);
        let (sx, cx, sy, cy) = (
            (PI * x).sin(),
            (PI * x).cos(),
            (PI * y).sin(),
            (PI * y).cos(),
        );
        let grad = (-PI * a * sx * cy, -PI * a * cx * sy);
        let c = conc(x, y, t);
        let (dx, dy) = disp(x, y, t);
        (
            -kappa * (grad.0 - q * c * dx / EPS),
            -kappa * (grad.1 - q * c * dy / EPS),
        )
    };
    // g = dc/dt + div J, with div J written out.
    let source = move |q: f64, x: f64, y: f64, t: f64| {
        let a = amp(t);
        let e = (-t).exp();
        let (sx, cx, sy, cy) = (
            (PI * x).sin(),
            (PI * x).cos(),
            (PI * y).sin(),
            (PI * y).cos(),
        );
        let lap_c = -2.0 * PI * PI * a * cx * cy;
        let grad_c_dot_d = -PI * a * 0.5 * PI * e * (sx * sx * cy * cy + cx * cx * sy * sy);
        let div_d = PI * PI * e * cx * cy;
        let div_cd = grad_c_dot_d + conc(x, y, t) * div_d;
        -a * cx * cy - kappa * (lap_c - q / EPS * div_cd)
    };
    let species = valences
        .iter()
        .map(|&q| SpeciesSpec {
            valence: q,
            initial_concentration: scalar_fn(move |x, y, _| conc(x, y, 0.0)),
            np_source: Some(scalar_fn(move |x, y, t| source(q, x, y, t))),
            chemical_potential: None,
            exact: Some(scalar_fn(conc)),
        })
        .collect();
    // S = dD/dt + sum_l q_l J_l / (2 kappa^2).
    let ma_source = vector_fn(move |x, y, t| {
        let (dx, dy) = disp(x, y, t);
        let (mut sx, mut sy) = (-dx, -dy);
        for q in valences {
            let (jx, jy) = flux(q, x, y, t);
            sx += q * jx / (2.0 * kappa * kappa);
            sy += q * jy / (2.0 * kappa * kappa);
        }
        (sx, sy)
    });
    ProblemSpec {
        name: "example1".into(),
        domain: square_domain(),
        kappa,
        permittivity: scalar_fn(|_, _, _| EPS),
        fixed_charge: scalar_fn(|_, _, _| 0.0),
        theta: None,
        ma_source: Some(ma_source),
        species,
        initial_displacement: InitialDisplacement::Explicit(vector_fn(move |x, y, _| {
            disp(x, y, 0.0)
        })),
        exact_displacement: Some(vector_fn(disp)),
        default_corrections: false,
    }
}

fn gaussian(x: f64, y: f64, cx: f64, cy: f64) -> f64 {
    (-100.0 * ((x - cx).powi(2) + (y - cy).powi(2))).exp()
}

fn ion_pair(c0: f64, mu: Option<[ChemicalPotential; 2]>) -> Vec<SpeciesSpec> {
    let mut mu = mu.map(|[a, b]| vec![a, b].into_iter());
    [1.0, -1.0]
        .into_iter()
        .map(|q| SpeciesSpec {
            valence: q,
            initial_concentration: scalar_fn(move |_, _, _| c0),
            np_source: None,
            chemical_potential: mu.as_mut().and_then(Iterator::next),
            exact: None,
        })
        .collect()
}

/// Quadrupole of Gaussian fixed charges, `kappa = 1e-4`, `eps = 2`.
pub fn example2() -> ProblemSpec {
    let rho = |x: f64, y: f64, _t: f64| {
        5.0 * gaussian(x, y, -0.5, -0.5)
            - 5.0 * gaussian(x, y, -0.5, 0.5)
            - 5.0 * gaussian(x, y, 0.5, -0.5)
            + 5.0 * gaussian(x, y, 0.5, 0.5)
    };
    ProblemSpec {
        name: "example2".into(),
        domain: square_domain(),
        kappa: 1e-4,
        permittivity: scalar_fn(|_, _, _| 2.0),
        fixed_charge: scalar_fn(rho),
        theta: None,
        ma_source: None,
        species: ion_pair(0.1, None),
        initial_displacement: InitialDisplacement::PoissonInit,
        exact_displacement: None,
        default_corrections: true,
    }
}

pub const SOLVENT_VOLUME: f64 = 0.275 * 0.275 * 0.275;
pub const CATION_VOLUME: f64 = 0.716 * 0.716 * 0.716;
pub const ANION_VOLUME: f64 = 0.676 * 0.676 * 0.676;

/// Polar angle in `(0, 2 pi]`.
pub fn polar_angle(x: f64, y: f64) -> f64 {
    let a = y.atan2(x);
    if a <= 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

/// `+10` on the upper half of the annulus `0.24 <= r^2 <= 0.26`, `-10` on the lower half.
pub fn annular_charge(x: f64, y: f64) -> f64 {
    // Nodes such as (0.34, 0.38) sit exactly on the closed band edges; the
    // allowance keeps mirror-image nodes on the same side despite rounding.
    let r2 = x * x + y * y;
    if !(0.24 - BAND_SLACK..=0.26 + BAND_SLACK).contains(&r2) {
        return 0.0;
    }
    if polar_angle(x, y) <= PI {
        10.0
    } else {
        -10.0
    }
}

const BAND_SLACK: f64 = 1e-12;

/// Annular fixed charge with solvation chemical potentials, `kappa = 0.2`, `eps = 1`.
pub fn example3() -> ProblemSpec {
    let mu = [
        ChemicalPotential::Solvation {
            ratio: CATION_VOLUME / SOLVENT_VOLUME,
            solvent_volume: SOLVENT_VOLUME,
        },
        ChemicalPotential::Solvation {
            ratio: ANION_VOLUME / SOLVENT_VOLUME,
            solvent_volume: SOLVENT_VOLUME,
        },
    ];
    ProblemSpec {
        name: "example3".into(),
        domain: square_domain(),
        kappa: 0.2,
        permittivity: scalar_fn(|_, _, _| 1.0),
        fixed_charge: scalar_fn(|x, y, _| annular_charge(x, y)),
        theta: None,
        ma_source: None,
        species: ion_pair(0.1, Some(mu)),
        initial_displacement: InitialDisplacement::PoissonInit,
        exact_displacement: None,
        default_corrections: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ampere::charge_density;
    use crate::ampere::max_gauss_residual;
    use crate::grid::{norm_inf, norm_l2};

    #[test]
    fn example1_values_at_origin() {
        let spec = builtin_example(1).unwrap();
        let c = (spec.species[0].initial_concentration)(0.0, 0.0, 0.0);
        assert!((c - (PI * PI / 5.0 + 2.0)).abs() < 1e-14);
        assert!((c - 3.97392).abs() < 1e-5);
        assert_eq!(spec.species[0].valence, 1.0);
        assert_eq!(spec.species[1].valence, -1.0);
    }

    #[test]
    fn example1_sources_match_printed_forms_at_unit_kappa() {
        let spec = example1(1.0);
        let g1 = spec.species[0].np_source.clone().unwrap();
        let g2 = spec.species[1].np_source.clone().unwrap();
        for &(x, y, t) in &[(0.1, -0.3, 0.0), (0.7, 0.2, 0.5), (-0.9, 0.45, 1.0)] {
            let e = (-t as f64).exp();
            let cc = (PI * x).cos() * (PI * y).cos();
            let quad = (2.0 * PI * x).cos() * (PI * y).cos().powi(2)
                + (2.0 * PI * y).cos() * (PI * x).cos().powi(2);
            let p1 = (2.0 * PI.powi(4) + 19.0 * PI * PI) / 5.0 * e * cc
                + PI.powi(4) / 5.0 * e * e * quad;
            let p2 = (2.0 * PI.powi(4) - 21.0 * PI * PI) / 5.0 * e * cc
                - PI.powi(4) / 5.0 * e * e * quad;
            assert!((g1(x, y, t) - p1).abs() < 1e-12, "g1 at ({x},{y},{t})");
            assert!((g2(x, y, t) - p2).abs() < 1e-12, "g2 at ({x},{y},{t})");
        }
    }

    #[test]
    fn example1_ma_source_closed_form() {
        for kappa in [1.0, 0.5] {
            let spec = example1(kappa);
            let s = spec.ma_source.clone().unwrap();
            let (x, y, t) = (0.3, -0.6, 0.4);
            let e = (-t as f64).exp();
            let cc = (PI * x).cos() * (PI * y).cos();
            let dx = 0.5 * PI * e * (PI * x).sin() * (PI * y).cos();
            let dy = 0.5 * PI * e * (PI * x).cos() * (PI * y).sin();
            let factor = -1.0 + 4.0 / kappa + 2.0 * PI * PI / (5.0 * kappa) * e * cc;
            let (sx, sy) = s(x, y, t);
            assert!((sx - factor * dx).abs() < 1e-12);
            assert!((sy - factor * dy).abs() < 1e-12);
        }
    }

    #[test]
    fn example2_fixed_charge_at_centre() {
        let spec = builtin_example(2).unwrap();
        let r = (spec.fixed_charge)(-0.5, -0.5, 0.0);
        let expected =
            5.0 - 5.0 * (-100.0_f64).exp() - 5.0 * (-100.0_f64).exp() + 5.0 * (-200.0_f64).exp();
        assert!((r - expected).abs() < 1e-14);
        assert_eq!(spec.kappa, 1e-4);
    }

    #[test]
    fn example3_uses_solvation_volumes() {
        let spec = builtin_example(3).unwrap();
        match &spec.species[0].chemical_potential {
            Some(ChemicalPotential::Solvation {
                ratio,
                solvent_volume,
            }) => {
                assert!((ratio - 0.716_f64.powi(3) / 0.275_f64.powi(3)).abs() < 1e-12);
                assert!((solvent_volume - 0.275_f64.powi(3)).abs() < 1e-15);
            }
            other => panic!("unexpected potential {other:?}"),
        }
        assert_eq!(annular_charge(0.0, 0.5), 10.0);
        assert_eq!(annular_charge(0.0, -0.5), -10.0);
        assert_eq!(annular_charge(-0.5, 0.0), 10.0);
        assert_eq!(annular_charge(0.5, 0.0), -10.0);
        assert_eq!(annular_charge(0.0, 0.0), 0.0);
    }

    #[test]
    fn solvent_reference_uses_void_fraction() {
        let spec = example3();
        let g = spec.domain.grid(10, 10).unwrap();
        let p = materialize(&spec, g)
            .unwrap()
            .with_mu_reference(MuReference::Solvent);
        let c = vec![CellField::constant(g, 0.2), CellField::constant(g, 0.3)];
        let mu = p.mu_fields(0.0, &c).unwrap();
        let void = 1.0 - CATION_VOLUME * 0.2 - ANION_VOLUME * 0.3;
        let expect = [
            -(CATION_VOLUME / SOLVENT_VOLUME) * void.ln(),
            -(ANION_VOLUME / SOLVENT_VOLUME) * void.ln(),
        ];
        for (m, e) in mu.iter().zip(expect) {
            assert!(m.values.iter().all(|v| (v - e).abs() < 1e-12 * e.abs()));
        }
        let packed = vec![CellField::constant(g, 2.0), CellField::constant(g, 2.0)];
        assert!(matches!(
            p.mu_fields(0.0, &packed),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn annular_charge_is_neutral_on_grids() {
        let spec = example3();
        for n in [50, 100, 200] {
            let g = spec.domain.grid(n, n).unwrap();
            let rho = CellField::from_fn(g, annular_charge);
            assert_eq!(rho.sum(), 0.0, "n = {n}");
        }
    }

    #[test]
    fn unknown_example_is_rejected() {
        assert!(matches!(builtin_example(4), Err(Error::UnknownExample(4))));
    }

    #[test]
    fn materialize_example1_matches_closed_forms() {
        let spec = builtin_example(1).unwrap();
        let g = spec.domain.grid(10, 10).unwrap();
        let p = materialize(&spec, g).unwrap();
        for j in 0..10 {
            for i in 0..10 {
                let (x, y) = (g.x(i), g.y(j));
                let c = PI * PI / 5.0 * (PI * x).cos() * (PI * y).cos() + 2.0;
                assert!((p.c0[0].get(i, j) - c).abs() < 1e-14);
                let dx = 0.5 * PI * (PI * g.x_half(i)).sin() * (PI * y).cos();
                assert!((p.d0.xc(i, j) - dx).abs() < 1e-14);
                let dy = 0.5 * PI * (PI * x).cos() * (PI * g.y_half(j)).sin();
                assert!((p.d0.yc(i, j) - dy).abs() < 1e-14);
            }
        }
        assert!(p.eps_face.x.iter().all(|&e| e == 0.5));
    }

    #[test]
    fn uniform_neutral_poisson_init_gives_zero_displacement() {
        let mut spec = example2();
        spec.fixed_charge = scalar_fn(|_, _, _| 0.0);
        let g = spec.domain.grid(8, 8).unwrap();
        let p = materialize(&spec, g).unwrap();
        assert_eq!(p.d0.norm_inf(), 0.0);
    }

    #[test]
    fn example2_initial_state_satisfies_gauss() {
        let spec = builtin_example(2).unwrap();
        let g = spec.domain.grid(40, 40).unwrap();
        let p = materialize(&spec, g).unwrap();
        let rho = charge_density(&p.c0, &p.valences, &p.rho_f).unwrap();
        let res = max_gauss_residual(&p.d0, &rho, p.kappa);
        assert!(res < 1e-10, "gauss residual {res:e}");
        // Four rings of |D| around the charge centres: maxima away from the centres.
        let mag = p.d0.magnitude_at_cells();
        let centre = mag.get(g.nx / 4, g.ny / 4);
        assert!(centre < 0.2 * mag.max());
    }

    #[test]
    fn rejects_bad_data() {
        let mut spec = example2();
        spec.permittivity = scalar_fn(|x, _, _| x);
        let g = spec.domain.grid(4, 4).unwrap();
        assert!(matches!(
            materialize(&spec, g),
            Err(Error::NonPositivePermittivity { .. })
        ));
        let mut spec = example2();
        spec.species[1].initial_concentration = scalar_fn(|x, _, _| x);
        assert!(matches!(
            materialize(&spec, g),
            Err(Error::NonPositiveConcentration { species: 2, .. })
        ));
        let mut spec = example2();
        spec.theta = Some(vector_fn(|x, _, _| (x, 0.0)));
        assert!(matches!(materialize(&spec, g), Err(Error::Validation(_))));
    }

    #[test]
    fn poisson_zero_rhs() {
        let g = GridSpec::square(8, 0.0, 1.0).unwrap();
        let phi = poisson_solve(&CellField::zeros(g), &FaceField::constant(g, 1.0, 1.0)).unwrap();
        assert_eq!(norm_inf(&phi), 0.0);
    }

    #[test]
    fn poisson_manufactured_second_order() {
        let mut errs = Vec::new();
        for n in [32, 64] {
            let g = GridSpec::square(n, -1.0, 2.0).unwrap();
            let rho = CellField::from_fn(g, |x, y| 2.0 * PI * PI * (PI * x).cos() * (PI * y).cos());
            let eps = FaceField::constant(g, 1.0, 1.0);
            let (phi, stats) = poisson_solve_with(&rho, &eps, SolverOptions::default()).unwrap();
            assert!(stats.final_relative_residual <= 1e-12);
            assert!(phi.mean().abs() <= 1e-13 * norm_inf(&phi));
            let exact = CellField::from_fn(g, |x, y| (PI * x).cos() * (PI * y).cos());
            let mut diff = phi.clone();
            diff.add_scaled(-1.0, &exact);
            errs.push(norm_l2(&diff));
        }
        let order = (errs[0] / errs[1]).log2();
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn poisson_rejects_incompatible_rhs() {
        let g = GridSpec::square(8, 0.0, 1.0).unwrap();
        let err = poisson_solve(
            &CellField::constant(g, 1.0),
            &FaceField::constant(g, 1.0, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::IncompatibleRhs { .. }));
    }

    #[test]
    fn solvation_mu_follows_reference() {
        let spec = builtin_example(3).unwrap();
        let g = spec.domain.grid(8, 8).unwrap();
        let p = materialize(&spec, g).unwrap();
        let prev = vec![CellField::constant(g, 0.2), CellField::constant(g, 0.2)];
        let mu_prev = p.mu_fields(0.0, &prev).unwrap();
        let ratio = CATION_VOLUME / SOLVENT_VOLUME;
        assert!((mu_prev[0].get(0, 0) + ratio * (SOLVENT_VOLUME * 0.2).ln()).abs() < 1e-12);
        let p = p.with_mu_reference(MuReference::Initial);
        let mu0 = p.mu_fields(0.0, &prev).unwrap();
        assert!((mu0[0].get(3, 3) + ratio * (SOLVENT_VOLUME * 0.1).ln()).abs() < 1e-12);
        assert!(p.mu_is_static());
    }

    #[test]
    fn expressions_compile_and_report_errors() {
        let f = expr_scalar("0.1 + x*y + t").unwrap();
        assert!((f(2.0, 3.0, 1.0) - 7.1).abs() < 1e-15);
        assert!(matches!(
            expr_scalar("x +* 1"),
            Err(Error::Expression { .. })
        ));
        assert!(matches!(expr_scalar("z"), Err(Error::Expression { .. })));
    }

    #[test]
    fn materialize_is_deterministic() {
        let spec = builtin_example(2).unwrap();
        let g = spec.domain.grid(16, 16).unwrap();
        let a = materialize(&spec, g).unwrap();
        let b = materialize(&spec, g).unwrap();
        assert_eq!(a.d0, b.d0);
        assert_eq!(a.rho_f, b.rho_f);
    }
}
