//! Nernst–Planck transport: Scharfetter–Gummel fluxes in Slotboom form and the
//! implicit concentration updates for both time integrators.
//!
//! For species `l`, the face increment `dg` is the jump of `g = q phi + mu`
//! across a face, written through the displacement as
//! `dg(i+1/2, j) = -dx q D_x / eps + mu(i+1, j) - mu(i, j)` (and the `y` analogue
//! with `dy`). The flux through that face is
//! `J = -(kappa/dx) [B(-dg) c(i+1, j) - B(dg) c(i, j)]`
//! with `B` the Bernoulli function. The resulting operator
//! `Q c = -div J` has non-negative off-diagonals, so `I - dt Q` is an
//! M-matrix for every `dt > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_positive_faces, neumaier_sum, CellField, FaceField, GridSpec};
use crate::linsolve::{solve_nonsymmetric, CsrMatrix, SolveStats, SolverOptions};

/// Below this magnitude the Bernoulli function is evaluated by its Taylor series.
const BERNOULLI_SERIES_THRESHOLD: f64 = 1e-6;

/// `B(z) = z / (e^z - 1)`, with `B(0) = 1`.
///
/// Overflow-safe for any finite `z`: `B(z) -> 0` as `z -> +inf` and
/// `B(z) ~ -z` as `z -> -inf`.
pub fn bernoulli(z: f64) -> f64 {
    if z.abs() < BERNOULLI_SERIES_THRESHOLD {
        1.0 - 0.5 * z + z * z / 12.0
    } else if z > 0.0 {
        // z e^{-z} / (1 - e^{-z}); no overflow for large z.
        let e = (-z).exp();
        z * e / -(-z).exp_m1()
    } else {
        z / z.exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Bdf2,
}

impl Scheme {
    /// `(a, b)` such that the concentration matrix is `a I - b dt Q`.
    fn weights(self) -> (f64, f64) {
        match self {
            Scheme::Euler => (1.0, 1.0),
            Scheme::Bdf2 => (3.0, 2.0),
        }
    }
}

/// Face increments of `g = q phi + mu`, one face field per species.
#[derive(Debug, Clone, PartialEq)]
pub struct DgField {
    pub species: Vec<FaceField>,
}

impl DgField {
    pub fn new(species: Vec<FaceField>) -> Result<Self> {
        for (l, f) in species.iter().enumerate() {
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("dg of species {}", l + 1)));
            }
        }
        Ok(Self { species })
    }

    /// Linear extrapolation `2 current - previous`.
    pub fn extrapolate(current: &DgField, previous: &DgField) -> Result<DgField> {
        let species = current
            .species
            .iter()
            .zip(&previous.species)
            .map(|(c, p)| {
                let mut out = c.scaled(2.0);
                out.add_scaled(-1.0, p);
                out
            })
            .collect();
        DgField::new(species)
    }

    /// Largest `|dg|` over both face directions and all species.
    pub fn max_abs(&self) -> f64 {
        self.species
            .iter()
            .map(FaceField::norm_inf)
            .fold(0.0, f64::max)
    }
}

/// Face increments of `g` for every species from the displacement and the
/// chemical potentials at cells.
pub fn compute_dg(
    d: &FaceField,
    mu: &[CellField],
    valences: &[f64],
    eps_face: &FaceField,
) -> Result<DgField> {
    check_positive_faces(eps_face)?;
    if mu.len() != valences.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} chemical potentials for {} species",
            mu.len(),
            valences.len()
        )));
    }
    let g = d.grid;
    let (dx, dy) = (g.dx(), g.dy());
    let species = valences
        .iter()
        .zip(mu)
        .map(|(&q, mu)| {
            let mut out = FaceField::zeros(g);
            for j in 0..g.ny {
                let jp = g.jp(j);
                for i in 0..g.nx {
                    let k = g.idx(i, j);
                    let m = mu.get(i, j);
                    out.x[k] = -dx * q * d.x[k] / eps_face.x[k] + (mu.get(g.ip(i), j) - m);
                    out.y[k] = -dy * q * d.y[k] / eps_face.y[k] + (mu.get(i, jp) - m);
                }
            }
            out
        })
        .collect();
    DgField::new(species)
}

/// Scharfetter–Gummel flux of one species at every face.
pub fn compute_flux(c: &CellField, dg: &FaceField, kappa: f64) -> FaceField {
    let g = c.grid;
    let (ax, ay) = (kappa / g.dx(), kappa / g.dy());
    let mut out = FaceField::zeros(g);
    for j in 0..g.ny {
        let jp = g.jp(j);
        for i in 0..g.nx {
            let k = g.idx(i, j);
            let ci = c.values[k];
            let zx = dg.x[k];
            let zy = dg.y[k];
            out.x[k] = -ax * (bernoulli(-zx) * c.get(g.ip(i), j) - bernoulli(zx) * ci);
            out.y[k] = -ay * (bernoulli(-zy) * c.get(i, jp) - bernoulli(zy) * ci);
        }
    }
    out
}

/// Matrix-free `Q c = -div J(c)`.
pub fn apply_transport_operator(c: &CellField, dg: &FaceField, kappa: f64) -> CellField {
    crate::grid::divergence(&compute_flux(c, dg, kappa)).scaled(-1.0)
}

/// Assembles `I - dt Q` (backward Euler) or `3 I - 2 dt Q` (BDF2) on the
/// periodic five-point stencil.
pub fn assemble_np_matrix(
    dg: &FaceField,
    kappa: f64,
    dt: f64,
    scheme: Scheme,
) -> Result<CsrMatrix> {
    if !(dt > 0.0) {
        return Err(Error::Validation(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let g = dg.grid;
    let (a, b) = scheme.weights();
    let cx = b * dt * kappa / (g.dx() * g.dx());
    let cy = b * dt * kappa / (g.dy() * g.dy());
    let mut t = Vec::with_capacity(5 * g.n_cells());
    for j in 0..g.ny {
        let (jp, jm) = (g.jp(j), g.jm(j));
        for i in 0..g.nx {
            let (ip, im) = (g.ip(i), g.im(i));
            let row = g.idx(i, j);
            let east = dg.x[row];
            let west = dg.x[g.idx(im, j)];
            let north = dg.y[row];
            let south = dg.y[g.idx(i, jm)];
            let diag = a
                + cx * (bernoulli(east) + bernoulli(-west))
                + cy * (bernoulli(north) + bernoulli(-south));
            t.push((row, row, diag));
            t.push((row, g.idx(ip, j), -cx * bernoulli(-east)));
            t.push((row, g.idx(im, j), -cx * bernoulli(west)));
            t.push((row, g.idx(i, jp), -cy * bernoulli(-north)));
            t.push((row, g.idx(i, jm), -cy * bernoulli(south)));
        }
    }
    CsrMatrix::from_triplets(g.n_cells(), &t)
}

/// Result of one implicit concentration update.
#[derive(Debug, Clone)]
pub struct NpStep {
    pub c: CellField,
    /// Flux evaluated at the new concentration with the increments used in the solve.
    pub flux: FaceField,
    pub stats: SolveStats,
}

fn solve_np(
    grid: GridSpec,
    dg: &FaceField,
    kappa: f64,
    dt: f64,
    scheme: Scheme,
    rhs: Vec<f64>,
    opts: SolverOptions,
) -> Result<NpStep> {
    let matrix = assemble_np_matrix(dg, kappa, dt, scheme)?;
    let (mut x, stats) = solve_nonsymmetric(&matrix, &rhs, opts)?;
    // Columns of the matrix sum to `a`, so the exact solution carries mass
    // sum(rhs)/a. Rescaling removes the iterative error's mass component
    // without touching signs.
    let (a, _) = scheme.weights();
    let target = neumaier_sum(rhs.iter().copied()) / a;
    let current = neumaier_sum(x.iter().copied());
    if target > 0.0 && current > 0.0 {
        let s = target / current;
        if (s - 1.0).abs() < 1e-8 {
            x.iter_mut().for_each(|v| *v *= s);
        }
    }
    let c = CellField::from_values(grid, x)?;
    if !c.is_finite() {
        return Err(Error::NonFinite("concentration update".into()));
    }
    let flux = compute_flux(&c, dg, kappa);
    Ok(NpStep { c, flux, stats })
}

/// Backward-Euler step: solves `(I - dt Q) c^{n+1} = c^n + dt s^{n+1}`.
///
/// Fails if the result is not strictly positive while the source is
/// non-negative, which the M-matrix structure rules out for an exact solve.
pub fn euler_np_step(
    c_n: &CellField,
    dg_n: &FaceField,
    kappa: f64,
    dt: f64,
    source: Option<&CellField>,
    opts: SolverOptions,
) -> Result<NpStep> {
    let mut rhs = c_n.values.clone();
    if let Some(s) = source {
        for (r, v) in rhs.iter_mut().zip(&s.values) {
            *r += dt * v;
        }
    }
    let step = solve_np(c_n.grid, dg_n, kappa, dt, Scheme::Euler, rhs, opts)?;
    let source_nonneg = source.map_or(true, |s| s.min() >= 0.0);
    if source_nonneg && c_n.min() > 0.0 {
        if let Some((i, j, value)) = step.c.find(|v| !(v > 0.0)) {
            return Err(Error::NonPositiveConcentration {
                species: 0,
                i,
                j,
                value,
            });
        }
    }
    Ok(step)
}

/// BDF2 step: solves `(3I - 2 dt Q) c^{n+1} = 4 c^n - c^{n-1} + 2 dt s^{n+1}`.
///
/// Positivity is not guaranteed here; negative values are returned as is.
pub fn bdf2_np_step(
    c_n: &CellField,
    c_nm1: &CellField,
    dg_extrap: &FaceField,
    kappa: f64,
    dt: f64,
    source: Option<&CellField>,
    opts: SolverOptions,
) -> Result<NpStep> {
    let mut rhs: Vec<f64> = c_n
        .values
        .iter()
        .zip(&c_nm1.values)
        .map(|(a, b)| 4.0 * a - b)
        .collect();
    if let Some(s) = source {
        for (r, v) in rhs.iter_mut().zip(&s.values) {
            *r += 2.0 * dt * v;
        }
    }
    solve_np(c_n.grid, dg_extrap, kappa, dt, Scheme::Bdf2, rhs, opts)
}
