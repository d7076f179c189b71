//! Maxwell–Ampère update of the displacement and the two constraint corrections.
//!
//! Per step the displacement is advanced explicitly from the transport fluxes,
//! then the Gauss correction sweeps the grid cell by cell so that
//! `2 kappa^2 div D = sum_l q_l c_l + rho_f` holds in every cell, and the
//! Faraday correction rebuilds `D` from a potential by path integration so
//! that the discrete curl of `D / eps` vanishes at every corner. Path
//! integration of a field that still carries curl moves charge onto the wrap
//! faces, so the divergence-preserving mode follows it with a potential
//! correction that restores the divergence of the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_positive_faces, divergence, neumaier_sum, CellField, FaceField};
use crate::linsolve::SolverOptions;
use crate::model::poisson_solve_with;

/// Visiting order of the Gauss sweep. Each variant names the starting corner and
/// the corner the sweep ends in; rows are the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    /// Lower-left to upper-right; corrects right and top faces.
    #[default]
    LlToUr,
    /// Upper-left to lower-right; corrects right and bottom faces.
    UlToLr,
    /// Lower-right to upper-left; corrects left and top faces.
    LrToUl,
    /// Upper-right to lower-left; corrects left and bottom faces.
    UrToLl,
}

impl SweepOrder {
    pub const ALL: [SweepOrder; 4] = [
        SweepOrder::LlToUr,
        SweepOrder::UlToLr,
        SweepOrder::LrToUl,
        SweepOrder::UrToLl,
    ];

    /// `(x step, y step)`: `true` means ascending index.
    fn directions(self) -> (bool, bool) {
        match self {
            SweepOrder::LlToUr => (true, true),
            SweepOrder::UlToLr => (true, false),
            SweepOrder::LrToUl => (false, true),
            SweepOrder::UrToLl => (false, false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionReport {
    /// Largest `|xi|` met during the sweep.
    pub max_xi: f64,
    /// Max Gauss residual after the sweep.
    pub closure_residual: f64,
    pub sweep_order: SweepOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialReconstruction {
    /// Zero-mean potential.
    pub phi: CellField,
    /// Curl-free displacement rebuilt from `phi`.
    pub d_tilde: FaceField,
    /// `||d_tilde - d||_inf`.
    pub max_change: f64,
}

fn total_flux(fluxes: &[FaceField], valences: &[f64], kappa: f64) -> Result<FaceField> {
    if fluxes.len() != valences.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} fluxes for {} species",
            fluxes.len(),
            valences.len()
        )));
    }
    let g = fluxes
        .first()
        .map(|f| f.grid)
        .ok_or_else(|| Error::Validation("no species".into()))?;
    let mut out = FaceField::zeros(g);
    let w = 1.0 / (2.0 * kappa * kappa);
    for (f, &q) in fluxes.iter().zip(valences) {
        out.add_scaled(-q * w, f);
    }
    Ok(out)
}

/// `D* = D^n + dt (-sum_l q_l J_l / (2 kappa^2) + Theta^n + S^n)`.
pub fn ma_euler_update(
    d_n: &FaceField,
    fluxes: &[FaceField],
    valences: &[f64],
    kappa: f64,
    dt: f64,
    theta: Option<&FaceField>,
    source: Option<&FaceField>,
) -> Result<FaceField> {
    let mut rate = total_flux(fluxes, valences, kappa)?;
    if let Some(t) = theta {
        rate.add_scaled(1.0, t);
    }
    if let Some(s) = source {
        rate.add_scaled(1.0, s);
    }
    let mut out = d_n.clone();
    out.add_scaled(dt, &rate);
    Ok(out)
}

/// `D* = (4 D^n - D^{n-1} + 2 dt (-sum_l q_l J_l / (2 kappa^2) + Theta + S)) / 3`,
/// where `theta` is already extrapolated to the new level.
#[allow(clippy::too_many_arguments)]
pub fn ma_bdf2_update(
    d_n: &FaceField,
    d_nm1: &FaceField,
    fluxes: &[FaceField],
    valences: &[f64],
    kappa: f64,
    dt: f64,
    theta: Option<&FaceField>,
    source: Option<&FaceField>,
) -> Result<FaceField> {
    let mut rate = total_flux(fluxes, valences, kappa)?;
    if let Some(t) = theta {
        rate.add_scaled(1.0, t);
    }
    if let Some(s) = source {
        rate.add_scaled(1.0, s);
    }
    let mut out = d_n.scaled(4.0);
    out.add_scaled(-1.0, d_nm1);
    out.add_scaled(2.0 * dt, &rate);
    Ok(out.scaled(1.0 / 3.0))
}

/// Net charge density `sum_l q_l c_l + rho_f` at cells.
pub fn charge_density(
    concentrations: &[CellField],
    valences: &[f64],
    rho_f: &CellField,
) -> Result<CellField> {
    if concentrations.len() != valences.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} concentrations for {} species",
            concentrations.len(),
            valences.len()
        )));
    }
    let mut rho = rho_f.clone();
    for (c, &q) in concentrations.iter().zip(valences) {
        rho.add_scaled(q, c);
    }
    Ok(rho)
}

fn local_residual(d: &FaceField, rho: &CellField, two_k2: f64, i: usize, j: usize) -> f64 {
    let g = d.grid;
    let div = (d.xc(i, j) - d.xc(g.im(i), j)) / g.dx() + (d.yc(i, j) - d.yc(i, g.jm(j))) / g.dy();
    two_k2 * div - rho.get(i, j)
}

/// Max over cells of `|2 kappa^2 div d - rho|`.
pub(crate) fn max_gauss_residual(d: &FaceField, rho: &CellField, kappa: f64) -> f64 {
    let g = d.grid;
    let two_k2 = 2.0 * kappa * kappa;
    let mut m = 0.0_f64;
    for j in 0..g.ny {
        for i in 0..g.nx {
            m = m.max(local_residual(d, rho, two_k2, i, j).abs());
        }
    }
    m
}

/// Scale against which Gauss residuals are judged.
pub(crate) fn gauss_scale(d: &FaceField, rho: &CellField, kappa: f64) -> f64 {
    let g = d.grid;
    let rho_max = rho.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let flux_scale = 2.0 * kappa * kappa * d.norm_inf() / g.dx().min(g.dy());
    rho_max.max(flux_scale).max(f64::MIN_POSITIVE)
}

/// Sequential Gauss-law correction of `d_star`.
///
/// Cells are visited in `order`; at each cell the residual `xi` is recomputed
/// from the partially corrected field and removed by adjusting the cell's
/// outgoing faces, half through the x-face and half through the y-face. On the
/// last column of the sweep the wrapped x-face belongs to an already finished
/// cell, so the whole correction goes through the y-face; on the last row it
/// goes through the x-face. The final cell then carries the net charge, which
/// must vanish for the sweep to close; the rounding-level net charge that
/// passes the neutrality check is subtracted evenly beforehand.
pub fn gauss_correct(
    d_star: &FaceField,
    concentrations: &[CellField],
    valences: &[f64],
    rho_f: &CellField,
    kappa: f64,
    order: SweepOrder,
) -> Result<(FaceField, CorrectionReport)> {
    let mut rho = charge_density(concentrations, valences, rho_f)?;
    let g = d_star.grid;
    let net = neumaier_sum(rho.values.iter().copied());
    let net_tol = 1e-9 * neumaier_sum(rho.values.iter().map(|v| v.abs())).max(f64::MIN_POSITIVE);
    if net.abs() > net_tol {
        return Err(Error::NetCharge {
            total: net * g.cell_area(),
            tol: net_tol * g.cell_area(),
        });
    }
    // The admissible net charge is rounding left over from the transport
    // solves; spread it evenly rather than leaving it all in the final cell.
    let mean = net / g.n_cells() as f64;
    rho.values.iter_mut().for_each(|v| *v -= mean);

    let two_k2 = 2.0 * kappa * kappa;
    let (dx, dy) = (g.dx(), g.dy());
    let (x_up, y_up) = order.directions();
    let mut d = d_star.clone();
    let mut max_xi = 0.0_f64;
    for jj in 0..g.ny {
        let j = if y_up { jj } else { g.ny - 1 - jj };
        let last_row = jj + 1 == g.ny;
        for ii in 0..g.nx {
            let i = if x_up { ii } else { g.nx - 1 - ii };
            let last_col = ii + 1 == g.nx;
            let xi = local_residual(&d, &rho, two_k2, i, j);
            max_xi = max_xi.max(xi.abs());
            let (wx, wy) = match (last_col, last_row) {
                (true, true) => continue,
                (true, false) => (0.0, 1.0),
                (false, true) => (1.0, 0.0),
                (false, false) => (0.5, 0.5),
            };
            if wx > 0.0 {
                let dd = xi * wx * dx / two_k2;
                if x_up {
                    d.x[g.idx(i, j)] -= dd;
                } else {
                    d.x[g.idx(g.im(i), j)] += dd;
                }
            }
            if wy > 0.0 {
                let dd = xi * wy * dy / two_k2;
                if y_up {
                    d.y[g.idx(i, j)] -= dd;
                } else {
                    d.y[g.idx(i, g.jm(j))] += dd;
                }
            }
        }
    }
    let closure_residual = max_gauss_residual(&d, &rho, kappa);
    let report = CorrectionReport {
        max_xi,
        closure_residual,
        sweep_order: order,
    };
    let tol = 1e-10 * gauss_scale(&d, &rho, kappa);
    if closure_residual > tol {
        return Err(Error::SweepClosure {
            residual: closure_residual,
            tol,
        });
    }
    Ok((d, report))
}

/// Rebuilds a curl-free displacement from a potential obtained by integrating
/// `d / eps` along the first column and then along every row.
pub fn faraday_correct(d: &FaceField, eps_face: &FaceField) -> Result<PotentialReconstruction> {
    check_positive_faces(eps_face)?;
    let g = d.grid;
    let (dx, dy) = (g.dx(), g.dy());
    let mut phi = CellField::zeros(g);
    for j in 0..g.ny - 1 {
        let v = phi.get(0, j) - dy * d.yc(0, j) / eps_face.yc(0, j);
        phi.set(0, j + 1, v);
    }
    for j in 0..g.ny {
        for i in 0..g.nx - 1 {
            let v = phi.get(i, j) - dx * d.xc(i, j) / eps_face.xc(i, j);
            phi.set(i + 1, j, v);
        }
    }
    let mean = phi.mean();
    phi.values.iter_mut().for_each(|v| *v -= mean);

    let d_tilde = potential_to_displacement(&phi, eps_face);
    let max_change = max_abs_diff(&d_tilde, d);
    Ok(PotentialReconstruction {
        phi,
        d_tilde,
        max_change,
    })
}

/// How the Faraday correction turns the displacement into a potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaradayMode {
    /// Integrate, then correct the potential so that the rebuilt field keeps
    /// the divergence of the input and hence the Gauss identity.
    #[default]
    DivergencePreserving,
    /// Integrate the field as given.
    PathIntegration,
}

/// Faraday correction in the given mode.
pub fn faraday_correct_with(
    d: &FaceField,
    eps_face: &FaceField,
    mode: FaradayMode,
    opts: SolverOptions,
) -> Result<PotentialReconstruction> {
    let path = faraday_correct(d, eps_face)?;
    if mode == FaradayMode::PathIntegration {
        return Ok(path);
    }
    let target = divergence(d);
    let mut phi = path.phi;
    let mut d_tilde = path.d_tilde;
    let scale = target.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for _ in 0..MAX_REFINEMENTS {
        let mut defect = divergence(&d_tilde);
        for (r, t) in defect.values.iter_mut().zip(&target.values) {
            *r = t - *r;
        }
        let size = defect.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if size <= REFINE_TOL * scale {
            break;
        }
        // Both divergences sum to zero; only rounding is left in the mean.
        let mean = defect.mean();
        defect.values.iter_mut().for_each(|v| *v -= mean);
        let (dphi, _) = poisson_solve_with(&defect, eps_face, opts)?;
        phi.add_scaled(1.0, &dphi);
        let mean = phi.mean();
        phi.values.iter_mut().for_each(|v| *v -= mean);
        d_tilde = potential_to_displacement(&phi, eps_face);
    }
    Ok(PotentialReconstruction {
        phi,
        max_change: max_abs_diff(&d_tilde, d),
        d_tilde,
    })
}

const MAX_REFINEMENTS: usize = 3;
const REFINE_TOL: f64 = 1e-15;

fn max_abs_diff(a: &FaceField, b: &FaceField) -> f64 {
    a.x.iter()
        .zip(&b.x)
        .chain(a.y.iter().zip(&b.y))
        .fold(0.0_f64, |m, (u, v)| m.max((u - v).abs()))
}

/// `D = -eps grad(phi)` on the staggered faces.
pub fn potential_to_displacement(phi: &CellField, eps_face: &FaceField) -> FaceField {
    let g = phi.grid;
    let (dx, dy) = (g.dx(), g.dy());
    let mut out = FaceField::zeros(g);
    for j in 0..g.ny {
        let jp = g.jp(j);
        for i in 0..g.nx {
            let k = g.idx(i, j);
            out.x[k] = -eps_face.x[k] * (phi.get(g.ip(i), j) - phi.get(i, j)) / dx;
            out.y[k] = -eps_face.y[k] * (phi.get(i, jp) - phi.get(i, j)) / dy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{curl_scaled, divergence, gradient, GridSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_face(g: GridSpec, rng: &mut ChaCha8Rng) -> FaceField {
        FaceField {
            grid: g,
            x: (0..g.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            y: (0..g.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn zero_mean_cell(g: GridSpec, rng: &mut ChaCha8Rng) -> CellField {
        let mut c = CellField::from_values(
            g,
            (0..g.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let m = c.mean();
        c.values.iter_mut().for_each(|v| *v -= m);
        c
    }

    #[test]
    fn euler_update_without_fluxes_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GridSpec::square(4, 0.0, 1.0).unwrap();
        let d = rand_face(g, &mut rng);
        let z = FaceField::zeros(g);
        let out = ma_euler_update(&d, &[z.clone(), z], &[1.0, -1.0], 1.0, 0.1, None, None).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn euler_update_single_species() {
        let g = GridSpec::square(3, 0.0, 1.0).unwrap();
        let d = FaceField::constant(g, 0.25, 0.0);
        let j = FaceField::constant(g, 1.0, 0.0);
        let out = ma_euler_update(&d, &[j], &[1.0], 1.0, 0.1, None, None).unwrap();
        for v in &out.x {
            assert!((v - (0.25 - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn bdf2_update_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = GridSpec::square(4, 0.0, 1.0).unwrap();
        let d = rand_face(g, &mut rng);
        let z = FaceField::zeros(g);
        let out = ma_bdf2_update(&d, &d, &[z], &[1.0], 1.0, 0.1, None, None).unwrap();
        for (a, b) in out.x.iter().zip(&d.x).chain(out.y.iter().zip(&d.y)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gauss_consistent_field_is_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GridSpec::square(6, -1.0, 2.0).unwrap();
        let d = rand_face(g, &mut rng);
        let kappa = 0.7;
        let rho = divergence(&d).scaled(2.0 * kappa * kappa);
        let zero = CellField::zeros(g);
        let (out, rep) =
            gauss_correct(&d, &[zero], &[1.0], &rho, kappa, SweepOrder::LlToUr).unwrap();
        assert!(rep.max_xi <= 1e-13 * gauss_scale(&d, &rho, kappa));
        for (a, b) in out.x.iter().zip(&d.x).chain(out.y.iter().zip(&d.y)) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn gauss_two_by_two_example() {
        let g = GridSpec::square(2, 0.0, 2.0).unwrap();
        let mut d = FaceField::zeros(g);
        d.x[g.idx(0, 0)] = 1.0;
        let zero = CellField::zeros(g);
        let (out, _) =
            gauss_correct(&d, &[zero.clone()], &[1.0], &zero, 1.0, SweepOrder::LlToUr).unwrap();
        // Independent divergence loop.
        for j in 0..2usize {
            for i in 0..2usize {
                let div = out.x[j * 2 + i] - out.x[j * 2 + (i + 1) % 2] + out.y[j * 2 + i]
                    - out.y[((j + 1) % 2) * 2 + i];
                assert!(div.abs() < 1e-15, "cell ({i},{j}) div {div}");
            }
        }
    }

    #[test]
    fn every_sweep_order_closes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = GridSpec::new(7, 5, -1.0, -1.0, 2.0, 1.5).unwrap();
        let kappa = 0.3;
        let d = rand_face(g, &mut rng);
        let rho_f = zero_mean_cell(g, &mut rng);
        let zero = CellField::zeros(g);
        let mut outs = Vec::new();
        for order in SweepOrder::ALL {
            let (out, rep) =
                gauss_correct(&d, &[zero.clone()], &[1.0], &rho_f, kappa, order).unwrap();
            assert!(rep.closure_residual <= 1e-12 * gauss_scale(&out, &rho_f, kappa));
            assert_eq!(rep.sweep_order, order);
            outs.push(out);
        }
        // Orders differ by divergence-free fields.
        let mut diff = outs[0].clone();
        diff.add_scaled(-1.0, &outs[3]);
        assert!(diff.norm_inf() > 1e-6);
        let div = divergence(&diff);
        assert!(crate::grid::norm_inf(&div) < 1e-11);
    }

    #[test]
    fn gauss_correction_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = GridSpec::square(6, 0.0, 1.0).unwrap();
        let d = rand_face(g, &mut rng);
        let rho_f = zero_mean_cell(g, &mut rng);
        let zero = CellField::zeros(g);
        let (once, _) =
            gauss_correct(&d, &[zero.clone()], &[1.0], &rho_f, 1.0, SweepOrder::LlToUr).unwrap();
        let (twice, rep) =
            gauss_correct(&once, &[zero], &[1.0], &rho_f, 1.0, SweepOrder::LlToUr).unwrap();
        assert!(rep.max_xi < 1e-12);
        for (a, b) in once
            .x
            .iter()
            .zip(&twice.x)
            .chain(once.y.iter().zip(&twice.y))
        {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn gauss_rejects_net_charge() {
        let g = GridSpec::square(4, 0.0, 1.0).unwrap();
        let rho_f = CellField::constant(g, 1.0);
        let err = gauss_correct(
            &FaceField::zeros(g),
            &[CellField::zeros(g)],
            &[1.0],
            &rho_f,
            1.0,
            SweepOrder::LlToUr,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NetCharge { .. }));
    }

    #[test]
    fn faraday_inverts_gradient_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = GridSpec::new(6, 5, -1.0, -1.0, 2.0, 2.0).unwrap();
        let psi = zero_mean_cell(g, &mut rng);
        let eps = FaceField::constant(g, 0.5, 0.5);
        let d = gradient(&psi).mul(&eps).scaled(-1.0);
        let rec = faraday_correct(&d, &eps).unwrap();
        assert!(rec.max_change < 1e-13);
        for (a, b) in rec.phi.values.iter().zip(&psi.values) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn faraday_output_is_curl_free_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = GridSpec::square(8, -1.0, 2.0).unwrap();
        let d = rand_face(g, &mut rng);
        let mut eps = rand_face(g, &mut rng);
        eps.x
            .iter_mut()
            .chain(eps.y.iter_mut())
            .for_each(|e| *e = e.abs() + 0.5);
        let rec = faraday_correct(&d, &eps).unwrap();
        let curl = curl_scaled(&rec.d_tilde, &eps).unwrap();
        assert!(curl.norm_inf() < 1e-13 * (1.0 + rec.d_tilde.norm_inf()) / g.dx());
        assert!(rec.phi.mean().abs() < 1e-14);
        let again = faraday_correct(&rec.d_tilde, &eps).unwrap();
        assert!(again.max_change < 1e-12);
    }

    #[test]
    fn divergence_preserving_faraday_keeps_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = GridSpec::new(8, 6, -1.0, -1.0, 2.0, 1.5).unwrap();
        let d = rand_face(g, &mut rng);
        let mut eps = rand_face(g, &mut rng);
        eps.x
            .iter_mut()
            .chain(eps.y.iter_mut())
            .for_each(|e| *e = e.abs() + 0.5);
        let opts = SolverOptions::default();
        let rec = faraday_correct_with(&d, &eps, FaradayMode::DivergencePreserving, opts).unwrap();
        let curl = curl_scaled(&rec.d_tilde, &eps).unwrap();
        assert!(curl.norm_inf() < 1e-12);
        let (before, after) = (divergence(&d), divergence(&rec.d_tilde));
        for (a, b) in before.values.iter().zip(&after.values) {
            assert!((a - b).abs() < 1e-12);
        }
        // d_tilde is exactly the field of the returned potential.
        let rebuilt = potential_to_displacement(&rec.phi, &eps);
        assert_eq!(rebuilt, rec.d_tilde);
        // Plain path integration generally moves divergence onto the wrap faces.
        let path = faraday_correct(&d, &eps).unwrap();
        let moved = divergence(&path.d_tilde)
            .values
            .iter()
            .zip(&before.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(moved > 1e-3);
    }

    #[test]
    fn modes_agree_on_consistent_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = GridSpec::square(7, 0.0, 1.0).unwrap();
        let psi = zero_mean_cell(g, &mut rng);
        let eps = FaceField::constant(g, 2.0, 2.0);
        let d = potential_to_displacement(&psi, &eps);
        let opts = SolverOptions::default();
        let a = faraday_correct_with(&d, &eps, FaradayMode::PathIntegration, opts).unwrap();
        let b = faraday_correct_with(&d, &eps, FaradayMode::DivergencePreserving, opts).unwrap();
        assert!(a.max_change < 1e-12 && b.max_change < 1e-12);
        for (x, y) in a.phi.values.iter().zip(&b.phi.values) {
            assert!((x - y).abs() < 1e-13);
        }
    }
}
