//! Levenberg–Marquardt with Marquardt (diagonal) damping and optional Huber
//! loss via iteratively reweighted residual blocks.

use std::ops::Range;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    #[default]
    ForwardDiff,
    CentralDiff,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RobustLoss {
    #[default]
    None,
    /// Quadratic up to `delta` (in weighted, dimensionless residual units),
    /// linear beyond.
    Huber { delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// On `max |J^T r|`.
    pub gradient_tol: f64,
    /// On `|dx| / |x|`.
    pub step_tol: f64,
    /// On the relative cost decrease of an accepted step.
    pub cost_tol: f64,
    pub jacobian_mode: JacobianMode,
    pub robust_loss: RobustLoss,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            cost_tol: 1e-12,
            jacobian_mode: JacobianMode::ForwardDiff,
            robust_loss: RobustLoss::None,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("solve options: {m}")));
        if !(self.lambda_up > 1.0 && self.lambda_down > 1.0) {
            return bad("damping factors must be > 1");
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return bad("lambda0 must be positive");
        }
        if !(self.gradient_tol > 0.0 && self.step_tol > 0.0 && self.cost_tol > 0.0) {
            return bad("tolerances must be > 0");
        }
        if let RobustLoss::Huber { delta } = self.robust_loss {
            if !(delta > 0.0) {
                return bad("huber delta must be > 0");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTol,
    StepTol,
    CostTol,
    MaxIterations,
    /// Damping grew past 1e16 without finding a decreasing step.
    DampingLimit,
}

/// A residual function `x -> r(x)` of fixed dimensions.
pub trait LeastSquaresProblem: Sync {
    fn n_params(&self) -> usize;

    /// Fails when `x` is outside the domain (e.g. a marker moved behind the
    /// camera); the solver then rejects the trial step.
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian_mode(&self) -> JacobianMode {
        JacobianMode::ForwardDiff
    }

    fn jacobian(&self, x: &DVector<f64>, r: &DVector<f64>) -> Result<DMatrix<f64>> {
        finite_difference_jacobian(self, x, r, self.jacobian_mode())
    }

    /// Row groups that share one robust-loss weight. Defaults to one block
    /// per row.
    fn blocks(&self) -> Option<&[Range<usize>]> {
        None
    }

    /// Maps a trial point back into the feasible set.
    fn project(&self, _x: &mut DVector<f64>) {}
}

/// Finite-difference step for one parameter.
pub fn fd_step(x: f64) -> f64 {
    (1e-7 * x.abs()).max(1e-6)
}

/// Column-parallel finite-difference Jacobian. When one side of a
/// difference leaves the residual domain the other side is used; a column
/// with no evaluable side is left at zero.
pub fn finite_difference_jacobian<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    r: &DVector<f64>,
    mode: JacobianMode,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let m = r.len();
    let columns: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let h = fd_step(x[j]);
            let shifted = |delta: f64| {
                let mut xp = x.clone();
                xp[j] += delta;
                let actual = xp[j] - x[j];
                problem.residuals(&xp).map(|rp| (rp, actual))
            };
            let col = match mode {
                JacobianMode::ForwardDiff => match shifted(h) {
                    Ok((rp, dh)) => Some((rp - r) / dh),
                    Err(_) => shifted(-h).ok().map(|(rm, dh)| (rm - r) / dh),
                },
                JacobianMode::CentralDiff => match (shifted(h), shifted(-h)) {
                    (Ok((rp, hp)), Ok((rm, hm))) => Some((rp - rm) / (hp - hm)),
                    (Ok((rp, hp)), Err(_)) => Some((rp - r) / hp),
                    (Err(_), Ok((rm, hm))) => Some((rm - r) / hm),
                    (Err(_), Err(_)) => None,
                },
            };
            match col {
                Some(c) if c.len() == m => c,
                _ => {
                    warn!("jacobian column {j} could not be evaluated; using zeros");
                    DVector::zeros(m)
                }
            }
        })
        .collect();
    let mut jac = DMatrix::zeros(m, n);
    for (j, c) in columns.into_iter().enumerate() {
        jac.set_column(j, &c);
    }
    Ok(jac)
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub x: DVector<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub lambda: f64,
}

/// Robust cost of a residual vector and the per-row IRLS weights
/// (`sqrt` of the block weight).
fn robust_cost(
    r: &DVector<f64>,
    loss: RobustLoss,
    blocks: Option<&[Range<usize>]>,
) -> (f64, DVector<f64>) {
    match loss {
        RobustLoss::None => (0.5 * r.norm_squared(), DVector::from_element(r.len(), 1.0)),
        RobustLoss::Huber { delta } => {
            let mut cost = 0.0;
            let mut w = DVector::from_element(r.len(), 1.0);
            let mut apply = |range: Range<usize>| {
                let s = r.rows(range.start, range.len()).norm();
                if s <= delta {
                    cost += 0.5 * s * s;
                } else {
                    cost += delta * (s - 0.5 * delta);
                    let sw = (delta / s).sqrt();
                    w.rows_mut(range.start, range.len()).fill(sw);
                }
            };
            match blocks {
                Some(b) => b.iter().cloned().for_each(&mut apply),
                None => (0..r.len()).map(|i| i..i + 1).for_each(&mut apply),
            }
            (cost, w)
        }
    }
}

pub fn levenberg_marquardt<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: DVector<f64>,
    opts: &SolveOptions,
) -> Result<LmOutcome> {
    opts.validate()?;
    if x0.len() != problem.n_params() {
        return Err(Error::LengthMismatch {
            what: "initial parameter vector",
            expected: problem.n_params(),
            got: x0.len(),
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial parameter vector".into()));
    }
    let mut x = x0;
    problem.project(&mut x);
    let mut r = problem.residuals(&x)?;
    let (mut cost, mut w) = robust_cost(&r, opts.robust_loss, problem.blocks());
    if !cost.is_finite() {
        return Err(Error::Solver(format!(
            "initial cost is not finite ({cost})"
        )));
    }
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = opts.lambda0;
    let mut iterations = 0;

    let termination = 'outer: loop {
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        if cost == 0.0 {
            break Termination::GradientTol;
        }
        let mut jac = problem.jacobian(&x, &r)?;
        for (mut row, wi) in jac.row_iter_mut().zip(w.iter()) {
            row *= *wi;
        }
        let rw = r.component_mul(&w);
        let g = jac.tr_mul(&rw);
        if g.amax() < opts.gradient_tol {
            break Termination::GradientTol;
        }
        let a = jac.tr_mul(&jac);
        let max_diag = a.diagonal().max();
        let floor = if max_diag > 0.0 {
            1e-12 * max_diag
        } else {
            1.0
        };
        let diag = a.diagonal().map(|d| d.max(floor));

        loop {
            if lambda > 1e16 {
                break 'outer Termination::DampingLimit;
            }
            let mut damped = a.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * diag[i];
            }
            let Some(chol) = damped.cholesky() else {
                debug!("normal equations not positive definite at lambda {lambda:e}");
                lambda *= opts.lambda_up;
                continue;
            };
            let mut x_new = &x - chol.solve(&g);
            problem.project(&mut x_new);
            let step = &x_new - &x;
            if step.norm() <= opts.step_tol * (x.norm() + opts.step_tol) {
                break 'outer Termination::StepTol;
            }
            let r_new = match problem.residuals(&x_new) {
                Ok(r) => r,
                Err(e) => {
                    debug!("trial point rejected: {e}");
                    lambda *= opts.lambda_up;
                    continue;
                }
            };
            let (cost_new, w_new) = robust_cost(&r_new, opts.robust_loss, problem.blocks());
            if !cost_new.is_finite() {
                return Err(Error::Solver(format!(
                    "non-finite cost at iteration {iterations} (lambda {lambda:e})"
                )));
            }
            if cost_new < cost {
                let rel = (cost - cost_new) / cost;
                x = x_new;
                r = r_new;
                w = w_new;
                cost = cost_new;
                lambda = (lambda / opts.lambda_down).max(1e-12);
                iterations += 1;
                history.push(cost);
                debug!("iteration {iterations}: cost {cost:e}, lambda {lambda:e}");
                if rel < opts.cost_tol {
                    break 'outer Termination::CostTol;
                }
                break;
            }
            lambda *= opts.lambda_up;
        }
    };

    Ok(LmOutcome {
        x,
        initial_cost,
        final_cost: cost,
        iterations,
        termination,
        cost_history: history,
        lambda,
    })
}
