//! Per-step measurements and error analysis.

use std::fmt;

use crate::ampere::{charge_density, max_gauss_residual};
use crate::error::{Error, Result};
use crate::grid::{
    check_positive_faces, curl_scaled, fmt_f, neumaier_sum, norm_l2, CellField, FaceField,
};
use crate::model::{sample_vector, ScalarFn, VectorFn};
use crate::transport::DgField;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub mass: Vec<f64>,
    pub min_c: Vec<f64>,
    pub energy: f64,
    pub gauss_residual: f64,
    pub faraday_residual: f64,
    pub dt_star: f64,
    /// Gauss residual of the displacement before the Faraday reconstruction.
    pub gauss_residual_pre_faraday: f64,
}

impl DiagnosticsRecord {
    pub fn csv_header(n_species: usize) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=n_species).map(|l| format!("mass_{l}")));
        cols.extend((1..=n_species).map(|l| format!("min_c_{l}")));
        cols.extend(
            [
                "energy",
                "gauss_residual",
                "faraday_residual",
                "dt_star",
                "gauss_residual_pre_faraday",
            ]
            .map(String::from),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![fmt_f(self.t)];
        cols.extend(self.mass.iter().map(|&v| fmt_f(v)));
        cols.extend(self.min_c.iter().map(|&v| fmt_f(v)));
        cols.extend(
            [
                self.energy,
                self.gauss_residual,
                self.faraday_residual,
                self.dt_star,
                self.gauss_residual_pre_faraday,
            ]
            .map(fmt_f),
        );
        cols.join(",")
    }

    /// Parses a row written by [`csv_row`](Self::csv_row).
    pub fn parse_csv_row(row: &str, n_species: usize) -> Result<Self> {
        let vals: Vec<f64> = row
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(format!("bad diagnostics row `{row}`: {e}")))?;
        if vals.len() != 1 + 2 * n_species + 5 {
            return Err(Error::Validation(format!(
                "diagnostics row has {} columns, expected {}",
                vals.len(),
                1 + 2 * n_species + 5
            )));
        }
        let m = n_species;
        Ok(Self {
            t: vals[0],
            mass: vals[1..1 + m].to_vec(),
            min_c: vals[1 + m..1 + 2 * m].to_vec(),
            energy: vals[1 + 2 * m],
            gauss_residual: vals[2 + 2 * m],
            faraday_residual: vals[3 + 2 * m],
            dt_star: vals[4 + 2 * m],
            gauss_residual_pre_faraday: vals[5 + 2 * m],
        })
    }
}

/// `dOmega sum (kappa^2 Dx^2/eps + kappa^2 Dy^2/eps) + dOmega sum_cells sum_l c (log c + mu)`.
pub fn free_energy(
    d: &FaceField,
    concentrations: &[CellField],
    mu: &[CellField],
    kappa: f64,
    eps_face: &FaceField,
) -> Result<f64> {
    check_positive_faces(eps_face)?;
    if mu.len() != concentrations.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} chemical potentials for {} species",
            mu.len(),
            concentrations.len()
        )));
    }
    let area = d.grid.cell_area();
    let k2 = kappa * kappa;
    let field = neumaier_sum(
        d.x.iter()
            .zip(&eps_face.x)
            .chain(d.y.iter().zip(&eps_face.y))
            .map(|(v, e)| k2 * v * v / e),
    );
    let mut terms = Vec::with_capacity(concentrations.len() * d.grid.n_cells());
    for (l, (c, m)) in concentrations.iter().zip(mu).enumerate() {
        if let Some((i, j, value)) = c.find(|v| !(v > 0.0)) {
            return Err(Error::NonPositiveConcentration {
                species: l + 1,
                i,
                j,
                value,
            });
        }
        terms.extend(
            c.values
                .iter()
                .zip(&m.values)
                .map(|(c, m)| c * (c.ln() + m)),
        );
    }
    Ok(area * (field + neumaier_sum(terms)))
}

/// Step-size bound `2 kappa eps_min^3 / (eps_max^2 c_max sum q^2) exp(-max|dg|)`.
pub fn dt_star(
    dg: &DgField,
    eps_face: &FaceField,
    concentrations: &[CellField],
    kappa: f64,
    valences: &[f64],
) -> f64 {
    let eps_min = eps_face.min();
    let eps_max = eps_face.max();
    let c_max = concentrations
        .iter()
        .map(CellField::max)
        .fold(f64::NEG_INFINITY, f64::max);
    let q2: f64 = valences.iter().map(|q| q * q).sum();
    2.0 * kappa * eps_min.powi(3) / (eps_max * eps_max * c_max * q2) * (-dg.max_abs()).exp()
}

/// Max over cells of `|2 kappa^2 div d - sum_l q_l c_l - rho_f|`.
pub fn gauss_residual(
    d: &FaceField,
    concentrations: &[CellField],
    valences: &[f64],
    rho_f: &CellField,
    kappa: f64,
) -> Result<f64> {
    let rho = charge_density(concentrations, valences, rho_f)?;
    Ok(max_gauss_residual(d, &rho, kappa))
}

/// Max-norm of the discrete curl of `d / eps`.
pub fn faraday_residual(d: &FaceField, eps_face: &FaceField) -> Result<f64> {
    Ok(curl_scaled(d, eps_face)?.norm_inf())
}

/// Discrete L2 error of a cell field against `exact(x, y, t)` sampled at cells.
pub fn error_vs_exact_cell(numeric: &CellField, exact: &ScalarFn, t: f64) -> f64 {
    let mut diff = CellField::from_fn(numeric.grid, |x, y| exact(x, y, t));
    diff.add_scaled(-1.0, numeric);
    norm_l2(&diff)
}

/// Discrete L2 errors `(x, y)` of a face field against `exact` sampled at faces.
pub fn error_vs_exact_face(numeric: &FaceField, exact: &VectorFn, t: f64) -> (f64, f64) {
    let mut diff = sample_vector(numeric.grid, exact, t);
    diff.add_scaled(-1.0, numeric);
    crate::grid::face_norm_l2(&diff)
}

/// `log(e_{k-1}/e_k) / log(h_{k-1}/h_k)` for successive levels; `None` where an
/// error is zero.
pub fn observed_orders(levels: &[(f64, f64)]) -> Result<Vec<Option<f64>>> {
    if levels.len() < 2 {
        return Err(Error::Validation(
            "observed orders need at least two levels".into(),
        ));
    }
    for w in levels.windows(2) {
        if !(w[1].0 < w[0].0) {
            return Err(Error::Validation(format!(
                "mesh sizes must strictly decrease, got {} then {}",
                w[0].0, w[1].0
            )));
        }
    }
    Ok(levels
        .windows(2)
        .map(|w| {
            let ((h0, e0), (h1, e1)) = (w[0], w[1]);
            if e0 > 0.0 && e1 > 0.0 {
                Some((e0 / e1).ln() / (h0 / h1).ln())
            } else {
                None
            }
        })
        .collect())
}

/// Final-time errors of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub h: Vec<f64>,
    /// `(name, error per level)`, e.g. `("c1", ..)`, `("D2", ..)`.
    pub columns: Vec<(String, Vec<f64>)>,
    /// Running minimum of each species' concentration per level.
    pub min_c: Vec<Vec<f64>>,
}

impl ErrorReport {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Observed orders of one column; empty for a single level.
    pub fn orders(&self, name: &str) -> Vec<Option<f64>> {
        let Some(errors) = self.column(name) else {
            return Vec::new();
        };
        let levels: Vec<(f64, f64)> = self.h.iter().copied().zip(errors.iter().copied()).collect();
        observed_orders(&levels).unwrap_or_default()
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8}", "h")?;
        for (name, _) in &self.columns {
            write!(f, " {:>12} {:>7}", name, "order")?;
        }
        writeln!(f)?;
        let orders: Vec<Vec<Option<f64>>> =
            self.columns.iter().map(|(n, _)| self.orders(n)).collect();
        for (k, h) in self.h.iter().enumerate() {
            write!(f, "{h:>8.4}")?;
            for (c, (_, errs)) in self.columns.iter().enumerate() {
                let order = match k.checked_sub(1).and_then(|p| orders[c].get(p)) {
                    Some(Some(o)) => format!("{o:.4}"),
                    Some(None) => "n/a".to_string(),
                    None => "-".to_string(),
                };
                write!(f, " {:>12.4e} {:>7}", errs[k], order)?;
            }
            writeln!(f)?;
        }
        if !self.min_c.is_empty() {
            writeln!(f, "running minimum concentration per level:")?;
            for (h, mins) in self.h.iter().zip(&self.min_c) {
                let s: Vec<String> = mins.iter().map(|m| format!("{m:.4e}")).collect();
                writeln!(f, "{h:>8.4} {}", s.join(" "))?;
            }
        }
        Ok(())
    }
}
