//! Bound-constrained sparse nonlinear least squares.
//!
//! The solver is a projected Levenberg-Marquardt loop. Each outer iteration
//! linearizes at the current iterate (fixing the sequence velocity branches),
//! solves the damped normal equations `(J^T J + lambda D) delta = -J^T r`
//! with Jacobi-preconditioned conjugate gradients, clamps the trial point to
//! `[0, 1]`, and accepts it only if the true objective does not increase.
//! Acceptance is judged on the exact global error, with the velocity
//! branches re-selected at the trial point, so the reported trace is
//! non-increasing by construction and bitwise-consistent with
//! [`FactorGraph::global_error`].
//!
//! Derivative evaluation is structured (see [`evaluator`]): factors are
//! never materialized, so memory stays `O(M^2 + N^2 + M N)` regardless of
//! how many pair terms the graph implies. [`residuals`] and [`jacobian`]
//! enumerate the factor list explicitly and exist for verification at small
//! scale; [`check_jacobian`] compares the analytic Jacobian against central
//! finite differences.

pub(crate) mod evaluator;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::factors::{best_velocity, segment_mean, Factor, FactorKind, FactorPayload};
use crate::graph::FactorGraph;
use crate::types::{ExclusionVariant, SimilarityMatrix};
use evaluator::StructuredEval;

/// Half-width of the exclusion zone around derivative discontinuities used
/// by [`check_jacobian`]. Rows whose active branch could switch within this
/// margin are skipped, since finite differences straddle the kink there.
pub const KINK_MARGIN: f64 = 1e-4;

/// Entries where both the analytic and differenced derivative are at most
/// this large are skipped by [`check_jacobian`]; relative error on values
/// dominated by round-off is meaningless.
const DERIVATIVE_FLOOR: f64 = 1e-8;

const CG_REL_TOL: f64 = 1e-8;
const CG_MAX_ITERS: usize = 60;
const LAMBDA_SHRINK: f64 = 3.0;
const LAMBDA_GROW: f64 = 4.0;
const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e12;

/// Levenberg-Marquardt controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Maximum accepted steps.
    pub max_iterations: usize,
    /// Stop when an accepted step reduces the objective by at most
    /// `ftol * previous_objective`.
    pub ftol: f64,
    /// Stop when an accepted step moves the iterate by at most
    /// `xtol * (|x| + xtol)`.
    pub xtol: f64,
    /// Initial damping `lambda`.
    pub initial_damping: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 100,
            ftol: 1e-8,
            xtol: 1e-8,
            initial_damping: 1e-3,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidParams {
                reason: "max_iterations must be at least 1".into(),
            });
        }
        for (name, v) in [
            ("ftol", self.ftol),
            ("xtol", self.xtol),
            ("initial_damping", self.initial_damping),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParams {
                    reason: format!("{name} must be positive and finite, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Why the solver stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Objective decrease fell below the relative `ftol` threshold.
    FTol,
    /// Step size fell below the relative `xtol` threshold, or damping grew
    /// past the point where any acceptable step exists.
    XTol,
    /// Iteration budget exhausted.
    MaxIter,
}

/// Outcome of one [`solve`] call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_error: f64,
    pub final_error: f64,
    /// Accepted steps taken.
    pub iterations: usize,
    pub termination: Termination,
    /// Objective after each accepted step, starting with the initial value.
    /// Non-increasing.
    pub trace: Vec<f64>,
}

/// Minimizes the graph's global error over `[0, 1]^(M x N)`, starting from
/// the measured similarities.
pub fn solve(graph: &FactorGraph, settings: &SolverSettings) -> Result<(SimilarityMatrix, SolveReport)> {
    settings.validate()?;
    let eval = StructuredEval::new(graph);
    let mut x = graph.initial_values().clone();
    let mut error = eval.error(&x);
    if !error.is_finite() {
        return Err(Error::NumericalFailure {
            context: "objective is not finite at the starting point".into(),
        });
    }
    let initial_error = error;
    let mut trace = vec![error];
    let mut lambda = settings.initial_damping;
    let mut termination = Termination::MaxIter;

    'outer: for _ in 0..settings.max_iterations {
        let st = eval.prepare(&x);
        let (g, d) = eval.gradient_diag(&st);
        let rhs = g.mapv(|v| -v);
        loop {
            let delta = cg(&eval, &st, &d, lambda, &rhs)?;
            let mut x_new = &x + &delta;
            x_new.mapv_inplace(|v| v.clamp(0.0, 1.0));
            let e_new = eval.error(&x_new);
            if e_new.is_finite() && e_new <= error {
                let xs = x.as_slice().unwrap();
                let ns = x_new.as_slice().unwrap();
                let step_norm = exec::sum_indexed(xs.len(), |c| {
                    let dv = ns[c] - xs[c];
                    dv * dv
                })
                .sqrt();
                let x_norm = exec::norm_sq(xs).sqrt();
                let decrease = error - e_new;
                let previous = error;
                x = x_new;
                error = e_new;
                trace.push(error);
                lambda = (lambda / LAMBDA_SHRINK).max(LAMBDA_MIN);
                if decrease <= settings.ftol * previous {
                    termination = Termination::FTol;
                    break 'outer;
                }
                if step_norm <= settings.xtol * (x_norm + settings.xtol) {
                    termination = Termination::XTol;
                    break 'outer;
                }
                break;
            }
            lambda *= LAMBDA_GROW;
            if lambda > LAMBDA_MAX {
                // No descent direction survives this much damping; the
                // iterate is as converged as the arithmetic allows.
                termination = Termination::XTol;
                break 'outer;
            }
        }
    }

    let iterations = trace.len() - 1;
    let values = SimilarityMatrix::from_array(x)?;
    Ok((
        values,
        SolveReport { initial_error, final_error: error, iterations, termination, trace },
    ))
}

/// Solves `(J^T J + lambda D) delta = rhs` with preconditioned conjugate
/// gradients, `D = diag(J^T J)`. Returns the best iterate after at most
/// [`CG_MAX_ITERS`] steps; an inexact solve only costs the outer loop an
/// extra damping adjustment.
fn cg(
    eval: &StructuredEval<'_>,
    st: &evaluator::IterationState,
    d: &Array2<f64>,
    lambda: f64,
    rhs: &Array2<f64>,
) -> Result<Array2<f64>> {
    let shape = rhs.raw_dim();
    let mut x = Array2::zeros(shape);
    let bb = exec::norm_sq(rhs.as_slice().unwrap());
    if bb == 0.0 {
        return Ok(x);
    }
    let tol_sq = CG_REL_TOL * CG_REL_TOL * bb;
    // Damped system diagonal; d >= prior coefficient > 0, so this is a
    // valid Jacobi preconditioner.
    let md = d.mapv(|v| (1.0 + lambda) * v);
    let mut r = rhs.clone();
    let mut z = &r / &md;
    let mut p = z.clone();
    let mut rz = exec::dot(r.as_slice().unwrap(), z.as_slice().unwrap());
    let mut ap = Array2::zeros(shape);
    for _ in 0..CG_MAX_ITERS {
        eval.apply_normal(st, &p, &mut ap);
        ndarray::Zip::from(&mut ap)
            .and(d)
            .and(&p)
            .for_each(|a, &dv, &pv| *a += lambda * dv * pv);
        let pap = exec::dot(p.as_slice().unwrap(), ap.as_slice().unwrap());
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::NumericalFailure {
                context: "conjugate gradient lost positive definiteness".into(),
            });
        }
        let alpha = rz / pap;
        ndarray::Zip::from(&mut x).and(&p).for_each(|xv, &pv| *xv += alpha * pv);
        ndarray::Zip::from(&mut r).and(&ap).for_each(|rv, &av| *rv -= alpha * av);
        if exec::norm_sq(r.as_slice().unwrap()) <= tol_sq {
            break;
        }
        z = &r / &md;
        let rz_new = exec::dot(r.as_slice().unwrap(), z.as_slice().unwrap());
        let beta = rz_new / rz;
        p.zip_mut_with(&z, |pv, &zv| *pv = zv + beta * *pv);
        rz = rz_new;
    }
    Ok(x)
}

/// The residual vector, one entry per factor in canonical order, so that
/// its squared norm equals [`FactorGraph::global_error`] up to round-off.
/// Materializes the factor list; intended for verification at small scale.
pub fn residuals(graph: &FactorGraph, values: &Array2<f64>) -> Result<Vec<f64>> {
    graph.check_shape(values)?;
    let std = values.as_standard_layout();
    let flat = std.as_slice().unwrap();
    let cols = graph.cols();
    let mut out = Vec::with_capacity(graph.factor_count() as usize);
    graph.for_each_factor(|f| out.push(f.residual(flat, cols)));
    Ok(out)
}

/// Sparse Jacobian of the residual vector: one row per factor, entries as
/// `(flat variable index, derivative)` pairs, variable-ascending.
#[derive(Clone, Debug)]
pub struct SparseJacobian {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseJacobian {
    /// Derivative of residual `row` with respect to flat variable `var`.
    pub fn entry(&self, row: usize, var: u32) -> f64 {
        match self.rows[row].binary_search_by_key(&var, |e| e.0) {
            Ok(pos) => self.rows[row][pos].1,
            Err(_) => 0.0,
        }
    }
}

/// Analytic Jacobian at `values`, rows in the same canonical order as
/// [`residuals`]. Sequence rows differentiate the active velocity branch.
pub fn jacobian(graph: &FactorGraph, values: &Array2<f64>) -> Result<SparseJacobian> {
    graph.check_shape(values)?;
    let std = values.as_standard_layout();
    let flat = std.as_slice().unwrap();
    let cols = graph.cols();
    let mut rows = Vec::with_capacity(graph.factor_count() as usize);
    graph.for_each_factor(|f| rows.push(f.jacobian_row(flat, cols)));
    Ok(SparseJacobian { nrows: rows.len(), ncols: flat.len(), rows })
}

/// Compares the analytic Jacobian against central finite differences with
/// half-step `step` and returns the worst relative deviation.
///
/// All values must lie in `[step, 1 - step]` so perturbed points stay in
/// the box. Rows within [`KINK_MARGIN`] of a derivative discontinuity
/// (Min/SoftAnd active-set switches, sequence velocity switches) are
/// excluded, as are entries where both derivatives are below
/// [`DERIVATIVE_FLOOR`].
pub fn check_jacobian(graph: &FactorGraph, values: &Array2<f64>, step: f64) -> Result<f64> {
    graph.check_shape(values)?;
    if !step.is_finite() || step <= 0.0 || step >= 0.5 {
        return Err(Error::InvalidParams {
            reason: format!("finite-difference step must lie in (0, 0.5), got {step}"),
        });
    }
    let std = values.as_standard_layout();
    let flat = std.as_slice().unwrap();
    if let Some(v) = flat.iter().find(|v| **v < step || **v > 1.0 - step) {
        return Err(Error::InvalidParams {
            reason: format!(
                "value {v} is within {step} of the box boundary; finite differences would leave [0, 1]"
            ),
        });
    }
    let cols = graph.cols();
    let grid: Array2<f64> = std.to_owned();
    let factors = graph.factors();
    let analytic: Vec<Vec<(u32, f64)>> =
        factors.iter().map(|f| f.jacobian_row(flat, cols)).collect();
    let masked: Vec<bool> = factors.iter().map(|f| near_kink(f, &grid, flat)).collect();

    // Factors touching each variable; a factor's residual only depends on
    // its own variables, so differencing visits just these rows.
    let mut rows_of_var: Vec<Vec<u32>> = vec![Vec::new(); flat.len()];
    for (row, f) in factors.iter().enumerate() {
        for &v in &f.variables {
            rows_of_var[v as usize].push(row as u32);
        }
    }

    let worst_per_var = exec::map_indexed(flat.len(), |var| {
        let mut plus = flat.to_vec();
        let mut minus = flat.to_vec();
        plus[var] += step;
        minus[var] -= step;
        let mut worst = 0.0_f64;
        for &row in &rows_of_var[var] {
            let row = row as usize;
            if masked[row] {
                continue;
            }
            let f = &factors[row];
            let fd = (f.residual(&plus, cols) - f.residual(&minus, cols)) / (2.0 * step);
            let an = match analytic[row].binary_search_by_key(&(var as u32), |e| e.0) {
                Ok(pos) => analytic[row][pos].1,
                Err(_) => 0.0,
            };
            let scale = an.abs().max(fd.abs());
            if scale > DERIVATIVE_FLOOR {
                worst = worst.max((an - fd).abs() / scale);
            }
        }
        worst
    });
    Ok(worst_per_var.into_iter().fold(0.0, f64::max))
}

/// True when the factor's derivative could switch branches within
/// [`KINK_MARGIN`] of the current point.
fn near_kink(f: &Factor, grid: &Array2<f64>, flat: &[f64]) -> bool {
    match (&f.payload, f.kind) {
        (FactorPayload::Pair, FactorKind::DbExclusion | FactorKind::QExclusion) => {
            let a = flat[f.variables[0] as usize];
            let b = flat[f.variables[1] as usize];
            match f.variant {
                ExclusionVariant::Product => false,
                ExclusionVariant::Min => (a - b).abs() <= KINK_MARGIN,
                ExclusionVariant::SoftAnd => (a + b - 1.0).abs() <= KINK_MARGIN,
            }
        }
        (FactorPayload::Sequence(nbhd), _) => {
            if nbhd.velocities.len() < 2 {
                return false;
            }
            let best = best_velocity(grid, nbhd);
            let runner_up = nbhd
                .cells
                .iter()
                .enumerate()
                .filter(|(vi, _)| *vi != best.index)
                .map(|(_, cells)| segment_mean(grid, cells))
                .fold(f64::NEG_INFINITY, f64::max);
            best.mean - runner_up <= KINK_MARGIN
        }
        _ => false,
    }
}
