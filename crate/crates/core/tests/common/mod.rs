//! Randomized structural checks shared by the property suite and the
//! acceptance report. Each check runs a deterministic proptest runner and
//! returns a one-line summary, or the failing case.

#![allow(dead_code)]

use std::cell::Cell;

use manp_core::ampere::{
    faraday_correct, faraday_correct_with, gauss_correct, FaradayMode, SweepOrder,
};
use manp_core::diagnostics::{faraday_residual, gauss_residual};
use manp_core::grid::{divergence, gradient, neumaier_sum};
use manp_core::linsolve::SolverOptions;
use manp_core::transport::{assemble_np_matrix, bernoulli, euler_np_step, Scheme};
use manp_core::{CellField, FaceField, GridSpec};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub type Check = Result<String, String>;

pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn finish(
    result: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>,
    ok: String,
) -> Check {
    result.map(|_| ok).map_err(|e| e.to_string())
}

/// Random small periodic grid on a random rectangle.
pub fn small_grid() -> impl Strategy<Value = GridSpec> {
    (2usize..=8, 2usize..=8, 0.5f64..3.0, 0.5f64..3.0)
        .prop_map(|(nx, ny, lx, ly)| GridSpec::new(nx, ny, -0.5 * lx, -0.5 * ly, lx, ly).unwrap())
}

pub fn cell_values(g: GridSpec, lo: f64, hi: f64) -> impl Strategy<Value = CellField> {
    vec(lo..hi, g.n_cells()).prop_map(move |v| CellField::from_values(g, v).unwrap())
}

pub fn face_values(g: GridSpec, lo: f64, hi: f64) -> impl Strategy<Value = FaceField> {
    (vec(lo..hi, g.n_cells()), vec(lo..hi, g.n_cells())).prop_map(move |(x, y)| FaceField {
        grid: g,
        x,
        y,
    })
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

/// The transport matrix of either scheme is an M-matrix: its dense inverse is
/// entrywise non-negative for any increments and step.
pub fn m_matrix_inverse_positive(cases: u32) -> Check {
    let strategy = small_grid().prop_flat_map(|g| {
        (
            face_values(g, -8.0, 8.0),
            0.01f64..2.0,
            prop_oneof![Just(1e-4), Just(1e-2), Just(1.0), Just(100.0)],
            prop_oneof![Just(Scheme::Euler), Just(Scheme::Bdf2)],
        )
    });
    let smallest = Cell::new(f64::INFINITY);
    let result = runner(cases).run(&strategy, |(dg, kappa, dt, scheme)| {
        let a = assemble_np_matrix(&dg, kappa, dt, scheme).unwrap();
        let n = a.dim();
        for r in 0..n {
            for (c, v) in a.row(r) {
                if c == r {
                    check(v > 0.0, || format!("diagonal {v} at row {r}"))?;
                } else {
                    check(v <= 0.0, || format!("off-diagonal {v} at ({r}, {c})"))?;
                }
            }
        }
        let inv = a
            .to_dense()
            .inverse()
            .ok_or_else(|| TestCaseError::fail("singular matrix"))?;
        for r in 0..n {
            for c in 0..n {
                let v = inv[(r, c)];
                check(v >= 0.0, || format!("inverse entry {v} at ({r}, {c})"))?;
                smallest.set(smallest.get().min(v));
            }
        }
        Ok(())
    });
    finish(
        result,
        format!(
            "{cases} random cases, smallest inverse entry {:.3e}",
            smallest.get()
        ),
    )
}

/// Largest growth `max c^{n+1} / max c^n` of one Euler step with random
/// increments, over `cases` random cases.
pub fn max_norm_growth_random_dg(cases: u32) -> f64 {
    let strategy = small_grid().prop_flat_map(|g| {
        (
            cell_values(g, 0.1, 2.0),
            face_values(g, -2.0, 2.0),
            prop_oneof![Just(1e-3), Just(1e-1), Just(10.0)],
        )
    });
    let worst = Cell::new(0.0_f64);
    let _ = runner(cases).run(&strategy, |(c, dg, dt)| {
        let step = euler_np_step(&c, &dg, 1.0, dt, None, SolverOptions::default()).unwrap();
        worst.set(worst.get().max(step.c.max() / c.max()));
        Ok(())
    });
    worst.get()
}

/// Max-norm non-expansion of an Euler step on random positive data with
/// random face increments.
pub fn max_norm_non_expansion(cases: u32) -> Check {
    let worst = max_norm_growth_random_dg(cases);
    if worst <= 1.0 + 1e-12 {
        Ok(format!(
            "{cases} random cases, largest growth factor {worst:.6}"
        ))
    } else {
        Err(format!(
            "{cases} random cases, largest growth factor of the max norm {worst:.6} > 1 \
             (the max norm can grow where increments drive ions into a potential well)"
        ))
    }
}

/// Max-norm non-expansion in the two settings where it does hold: pure
/// diffusion, and the Slotboom variable `e^g c` when the increments are jumps
/// of a cell potential `g`.
pub fn weighted_max_principle(cases: u32) -> Check {
    let strategy = small_grid().prop_flat_map(|g| {
        (
            cell_values(g, 0.1, 2.0),
            cell_values(g, -2.0, 2.0),
            prop_oneof![Just(1e-3), Just(1e-1), Just(10.0)],
        )
    });
    let result = runner(cases).run(&strategy, |(c, pot, dt)| {
        let g = c.grid;
        let opts = SolverOptions {
            tol: 1e-14,
            maxit: None,
        };
        let flat = euler_np_step(&c, &FaceField::zeros(g), 1.0, dt, None, opts).unwrap();
        check(flat.c.max() <= c.max() * (1.0 + 1e-12), || {
            format!(
                "diffusion grew the max from {} to {}",
                c.max(),
                flat.c.max()
            )
        })?;
        check(flat.c.min() >= c.min() * (1.0 - 1e-12), || {
            format!(
                "diffusion lowered the min from {} to {}",
                c.min(),
                flat.c.min()
            )
        })?;
        let mut dg = FaceField::zeros(g);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                dg.x[k] = pot.get(g.ip(i), j) - pot.get(i, j);
                dg.y[k] = pot.get(i, g.jp(j)) - pot.get(i, j);
            }
        }
        let step = euler_np_step(&c, &dg, 1.0, dt, None, opts).unwrap();
        let u = |c: &CellField| -> Vec<f64> {
            c.values
                .iter()
                .zip(&pot.values)
                .map(|(c, p)| c * p.exp())
                .collect()
        };
        let (u0, u1) = (u(&c), u(&step.c));
        let max0 = u0.iter().copied().fold(f64::MIN, f64::max);
        let max1 = u1.iter().copied().fold(f64::MIN, f64::max);
        check(max1 <= max0 * (1.0 + 1e-10), || {
            format!("max of e^g c grew from {max0} to {max1}")
        })
    });
    finish(result, format!("{cases} random cases"))
}

/// Random charges shifted to zero total.
pub fn neutral_charges(g: GridSpec) -> impl Strategy<Value = (Vec<CellField>, CellField)> {
    (
        cell_values(g, 0.1, 2.0),
        cell_values(g, 0.1, 2.0),
        cell_values(g, -1.0, 1.0),
    )
        .prop_map(|(c1, c2, mut rho_f)| {
            let net = neumaier_sum(
                c1.values
                    .iter()
                    .zip(&c2.values)
                    .zip(&rho_f.values)
                    .map(|((a, b), r)| a - b + r),
            );
            let mean = net / c1.grid.n_cells() as f64;
            rho_f.values.iter_mut().for_each(|v| *v -= mean);
            (vec![c1, c2], rho_f)
        })
}

/// The Gauss sweep closes for every sweep order on neutral random data.
pub fn gauss_exactness(cases: u32) -> Check {
    let strategy = small_grid()
        .prop_flat_map(|g| (neutral_charges(g), face_values(g, -3.0, 3.0), 0.05f64..1.0));
    let worst = Cell::new(0.0_f64);
    let result = runner(cases).run(&strategy, |((c, rho_f), d_star, kappa)| {
        let q = [1.0, -1.0];
        for order in SweepOrder::ALL {
            let (d, _) = gauss_correct(&d_star, &c, &q, &rho_f, kappa, order)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let r = gauss_residual(&d, &c, &q, &rho_f, kappa).unwrap();
            worst.set(worst.get().max(r));
            check(r <= 1e-12, || format!("residual {r:e} for {order:?}"))?;
        }
        Ok(())
    });
    finish(
        result,
        format!(
            "{cases} random cases x 4 orders, worst residual {:.2e}",
            worst.get()
        ),
    )
}

/// The Faraday reconstruction returns a curl-free field and is idempotent,
/// in both modes.
pub fn faraday_exactness(cases: u32) -> Check {
    let strategy =
        small_grid().prop_flat_map(|g| (face_values(g, -3.0, 3.0), face_values(g, 0.5, 4.0)));
    let worst = Cell::new(0.0_f64);
    let result = runner(cases).run(&strategy, |(d, eps)| {
        let opts = SolverOptions::default();
        let scale = d.norm_inf().max(1.0);
        let path = faraday_correct(&d, &eps).unwrap();
        let preserving =
            faraday_correct_with(&d, &eps, FaradayMode::DivergencePreserving, opts).unwrap();
        for (name, rec) in [("path", &path), ("divergence-preserving", &preserving)] {
            let curl = faraday_residual(&rec.d_tilde, &eps).unwrap();
            let h = d.grid.dx().min(d.grid.dy());
            check(curl <= 1e-12 * scale / h, || {
                format!("{name}: curl {curl:e}")
            })?;
            worst.set(worst.get().max(curl));
        }
        let again = faraday_correct(&path.d_tilde, &eps).unwrap();
        check(again.max_change <= 1e-12 * scale, || {
            format!("path: second pass moved {:e}", again.max_change)
        })?;
        let again = faraday_correct_with(
            &preserving.d_tilde,
            &eps,
            FaradayMode::DivergencePreserving,
            opts,
        )
        .unwrap();
        check(again.max_change <= 1e-12 * scale, || {
            format!(
                "divergence-preserving: second pass moved {:e}",
                again.max_change
            )
        })?;
        let drift = divergence(&preserving.d_tilde)
            .values
            .iter()
            .zip(&divergence(&d).values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let h = d.grid.dx().min(d.grid.dy());
        check(drift <= 1e-11 * scale / h, || {
            format!("divergence changed by {drift:e}")
        })
    });
    finish(
        result,
        format!("{cases} random cases, worst curl {:.2e}", worst.get()),
    )
}

/// `sum phi div F = -sum grad(phi) . F` on the periodic grid.
pub fn summation_by_parts(cases: u32) -> Check {
    let strategy =
        small_grid().prop_flat_map(|g| (cell_values(g, -2.0, 2.0), face_values(g, -2.0, 2.0)));
    let worst = Cell::new(0.0_f64);
    let result = runner(cases).run(&strategy, |(phi, f)| {
        let div = divergence(&f);
        let grad = gradient(&phi);
        let lhs = neumaier_sum(phi.values.iter().zip(&div.values).map(|(a, b)| a * b));
        let rhs = -neumaier_sum(
            grad.x
                .iter()
                .zip(&f.x)
                .chain(grad.y.iter().zip(&f.y))
                .map(|(a, b)| a * b),
        );
        let scale = neumaier_sum(
            phi.values
                .iter()
                .zip(&div.values)
                .map(|(a, b)| (a * b).abs()),
        )
        .max(1.0);
        let rel = (lhs - rhs).abs() / scale;
        worst.set(worst.get().max(rel));
        check(rel <= 1e-13, || format!("sums {lhs} and {rhs} differ"))
    });
    finish(
        result,
        format!(
            "{cases} random cases, worst relative gap {:.2e}",
            worst.get()
        ),
    )
}

/// `|B(-z) - B(z) - z|` relative to the larger operand, the scale at which
/// the subtraction rounds.
fn identity_error(z: f64) -> f64 {
    let (a, b) = (bernoulli(-z), bernoulli(z));
    ((a - b) - z).abs() / a.max(b)
}

/// `B(0) = 1` and `B(-z) - B(z) = z` for `|z|` from 1e-10 to 1e2.
pub fn bernoulli_identities(cases: u32) -> Check {
    if bernoulli(0.0) != 1.0 {
        return Err(format!("B(0) = {}", bernoulli(0.0)));
    }
    let strategy = (-10.0f64..2.0, prop::bool::ANY).prop_map(|(e, neg)| {
        let z = 10f64.powf(e);
        if neg {
            -z
        } else {
            z
        }
    });
    let worst = Cell::new(0.0_f64);
    let result = runner(cases).run(&strategy, |z| {
        let b = bernoulli(z);
        let rel = identity_error(z);
        worst.set(worst.get().max(rel));
        check(b > 0.0 && b.is_finite(), || format!("B({z}) = {b}"))?;
        check(rel <= 1e-14, || {
            format!("B(-z) - B(z) - z relative {rel:e} at z = {z:e}")
        })
    });
    let mut sweep = 0.0_f64;
    for k in -10..=2 {
        for m in [1.0, 2.5, 7.0] {
            for s in [1.0, -1.0] {
                let z = s * m * 10f64.powi(k);
                sweep = sweep.max(identity_error(z));
            }
        }
    }
    if sweep > 1e-14 {
        return Err(format!("decade sweep relative error {sweep:e}"));
    }
    finish(
        result,
        format!(
            "B(0) = 1, {cases} random z, worst relative error {:.2e}",
            worst.get().max(sweep)
        ),
    )
}
