//! Unified weighted cost over all closure kinds, its finite-difference
//! Jacobian, and the Levenberg–Marquardt calibration solver.
//!
//! Every raw residual is divided by the noise sigma of its kind, so all rows
//! are dimensionless and share one cost `0.5 * |r|^2`. Parameters are
//! optimized in scaled coordinates (value / scale), so the Jacobian is
//! dimensionless as well.

pub mod lm;
pub mod residuals;

use std::collections::BTreeMap;
use std::ops::Range;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinecore::{unpack, ParameterVector, RobotModel};
use crate::measurements::{Dataset, Kind};

pub use lm::{
    finite_difference_jacobian, levenberg_marquardt, JacobianMode, LeastSquaresProblem, LmOutcome,
    RobustLoss, SolveOptions, Termination,
};
pub use residuals::{
    residual, residual_external, residual_plane, residual_projection, residual_self_contact,
};

/// Rows of one measurement inside the stacked residual vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub measurement: usize,
    pub kind: Kind,
    pub rows: Range<usize>,
}

/// Stacked weighted residuals and their Jacobian w.r.t. the scaled
/// parameters.
#[derive(Debug, Clone)]
pub struct ResidualSystem {
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub blocks: Vec<Block>,
    /// `1 / sigma` per kind.
    pub weights: BTreeMap<Kind, f64>,
    /// Measurements left out because their marker projects behind the camera.
    pub excluded: Vec<usize>,
}

impl ResidualSystem {
    pub fn cost(&self) -> f64 {
        0.5 * self.residuals.norm_squared()
    }

    pub fn rows(&self) -> usize {
        self.residuals.len()
    }
}

/// The calibration cost as a least-squares problem over scaled parameters,
/// with a fixed set of active measurements.
pub struct CalibrationProblem<'a> {
    model: &'a RobotModel,
    dataset: &'a Dataset,
    template: ParameterVector,
    active: Vec<usize>,
    blocks: Vec<Block>,
    row_ranges: Vec<Range<usize>>,
    weights: BTreeMap<Kind, f64>,
    excluded: Vec<usize>,
    mode: JacobianMode,
}

impl<'a> CalibrationProblem<'a> {
    /// Measurements that cannot be evaluated at `params` because of the
    /// camera geometry are excluded for the lifetime of the problem; any
    /// other failure is an error.
    pub fn new(
        model: &'a RobotModel,
        params: &ParameterVector,
        dataset: &'a Dataset,
        mode: JacobianMode,
    ) -> Result<Self> {
        dataset.validate(model)?;
        let at = unpack(model, params)?;
        let outcomes: Vec<Result<usize>> = dataset
            .measurements
            .par_iter()
            .map(|m| residuals::residual(&at, m).map(|r| r.len()))
            .collect();
        let mut active = Vec::new();
        let mut excluded = Vec::new();
        let mut blocks = Vec::new();
        let mut row = 0;
        for (i, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(dim) => {
                    active.push(i);
                    blocks.push(Block {
                        measurement: i,
                        kind: dataset.measurements[i].kind(),
                        rows: row..row + dim,
                    });
                    row += dim;
                }
                Err(Error::BehindCamera { z }) => {
                    warn!("measurement {i} excluded: marker behind camera (z = {z:.4})");
                    excluded.push(i);
                }
                Err(e) => return Err(e),
            }
        }
        if active.is_empty() {
            return Err(Error::EmptySystem);
        }
        let weights = dataset
            .kinds()
            .into_iter()
            .map(|k| dataset.sigma(k).map(|s| (k, 1.0 / s)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let row_ranges = blocks.iter().map(|b| b.rows.clone()).collect();
        Ok(Self {
            model,
            dataset,
            template: params.clone(),
            active,
            blocks,
            row_ranges,
            weights,
            excluded,
            mode,
        })
    }

    pub fn template(&self) -> &ParameterVector {
        &self.template
    }

    pub fn blocks_info(&self) -> &[Block] {
        &self.blocks
    }

    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }

    pub fn rows(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.rows.end)
    }

    fn model_at(&self, z: &DVector<f64>) -> Result<RobotModel> {
        unpack(self.model, &self.template.with_scaled(z)?)
    }

    /// Unweighted residual blocks in native units, in block order.
    pub fn raw_residuals(&self, z: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let model = self.model_at(z)?;
        self.active
            .par_iter()
            .map(|&i| residuals::residual(&model, &self.dataset.measurements[i]))
            .collect()
    }

    /// Root-mean-square raw residual component per kind, native units.
    pub fn rms_by_kind(&self, z: &DVector<f64>) -> Result<BTreeMap<Kind, f64>> {
        let raw = self.raw_residuals(z)?;
        let mut acc: BTreeMap<Kind, (f64, usize)> = BTreeMap::new();
        for (b, r) in self.blocks.iter().zip(&raw) {
            let e = acc.entry(b.kind).or_default();
            e.0 += r.norm_squared();
            e.1 += r.len();
        }
        Ok(acc
            .into_iter()
            .map(|(k, (s, n))| (k, (s / n as f64).sqrt()))
            .collect())
    }

    pub fn system(&self, z: &DVector<f64>) -> Result<ResidualSystem> {
        let r = self.residuals(z)?;
        let jacobian = self.jacobian(z, &r)?;
        Ok(ResidualSystem {
            residuals: r,
            jacobian,
            blocks: self.blocks.clone(),
            weights: self.weights.clone(),
            excluded: self.excluded.clone(),
        })
    }
}

impl LeastSquaresProblem for CalibrationProblem<'_> {
    fn n_params(&self) -> usize {
        self.template.len()
    }

    fn residuals(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let raw = self.raw_residuals(z)?;
        let mut r = DVector::zeros(self.rows());
        for (b, block) in self.blocks.iter().zip(raw) {
            if block.len() != b.rows.len() {
                return Err(Error::Invalid("residual block changed dimension".into()));
            }
            let w = self.weights[&b.kind];
            r.rows_mut(b.rows.start, b.rows.len())
                .copy_from(&(block * w));
        }
        Ok(r)
    }

    fn jacobian_mode(&self) -> JacobianMode {
        self.mode
    }

    fn blocks(&self) -> Option<&[Range<usize>]> {
        Some(&self.row_ranges)
    }
}

/// Weighted residuals and Jacobian of `dataset` at `params`.
pub fn build_system(
    model: &RobotModel,
    params: &ParameterVector,
    dataset: &Dataset,
    mode: JacobianMode,
) -> Result<ResidualSystem> {
    let problem = CalibrationProblem::new(model, params, dataset, mode)?;
    problem.system(&params.scaled())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub initial_params: ParameterVector,
    pub params: ParameterVector,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub initial_rms: BTreeMap<Kind, f64>,
    pub final_rms: BTreeMap<Kind, f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Costs after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Residual rows and active measurements.
    pub rows: usize,
    pub excluded: Vec<usize>,
    /// `s^2 (J^T J)^-1` in native units, with `s^2 = 2 cost / (m - n)` the a
    /// posteriori variance factor. `None` when `J^T J` is ill-conditioned or
    /// the system has no redundancy.
    #[serde(skip)]
    pub covariance: Option<DMatrix<f64>>,
    /// Square roots of the covariance diagonal.
    pub std_devs: Option<Vec<f64>>,
}

/// One line of the parameter table in a calibration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub key: String,
    pub unit: String,
    pub before: f64,
    pub after: f64,
    pub std_dev: Option<f64>,
}

impl CalibrationResult {
    pub fn parameter_table(&self) -> Vec<ParameterRow> {
        (0..self.params.len())
            .map(|i| ParameterRow {
                key: self.params.keys[i].to_string(),
                unit: self.params.class(i).unit().to_string(),
                before: self.initial_params.values[i],
                after: self.params.values[i],
                std_dev: self.std_devs.as_ref().map(|s| s[i]),
            })
            .collect()
    }

    /// Flat JSON report: costs, per-kind RMS keyed by kind code,
    /// iterations, termination and the parameter table.
    pub fn report(&self) -> serde_json::Value {
        let rms = |m: &BTreeMap<Kind, f64>| {
            m.iter()
                .map(|(k, v)| (k.code().to_string(), serde_json::json!(v)))
                .collect::<serde_json::Map<_, _>>()
        };
        serde_json::json!({
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "initial_rms": rms(&self.initial_rms),
            "final_rms": rms(&self.final_rms),
            "iterations": self.iterations,
            "termination": self.termination,
            "rows": self.rows,
            "excluded": self.excluded.len(),
            "cost_history": self.cost_history,
            "parameters": self.parameter_table(),
        })
    }
}

/// Reciprocal condition number below which no covariance is reported.
const COVARIANCE_RCOND: f64 = 1e-10;

fn covariance(jac: &DMatrix<f64>, final_cost: f64, scales: &[f64]) -> Option<DMatrix<f64>> {
    let (m, n) = jac.shape();
    if n == 0 || m <= n {
        return None;
    }
    let svd = jac.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < COVARIANCE_RCOND {
        return None;
    }
    let v_t = svd.v_t?;
    let inv_s2 = svd.singular_values.map(|s| 1.0 / (s * s));
    let s2 = 2.0 * final_cost / (m - n) as f64;
    let cov_scaled = v_t.transpose() * DMatrix::from_diagonal(&inv_s2) * &v_t * s2;
    Some(DMatrix::from_fn(n, n, |i, j| {
        cov_scaled[(i, j)] * scales[i] * scales[j]
    }))
}

/// Calibrates the free parameters of `model` against `dataset` from `x0`.
pub fn lm_solve(
    model: &RobotModel,
    dataset: &Dataset,
    x0: &ParameterVector,
    opts: &SolveOptions,
) -> Result<CalibrationResult> {
    if x0.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial parameter vector".into()));
    }
    let problem = CalibrationProblem::new(model, x0, dataset, opts.jacobian_mode)?;
    let z0 = x0.scaled();
    let initial_rms = problem.rms_by_kind(&z0)?;
    let outcome = levenberg_marquardt(&problem, z0, opts)?;
    let params = x0.with_scaled(&outcome.x)?;
    let final_rms = problem.rms_by_kind(&outcome.x)?;
    let r = problem.residuals(&outcome.x)?;
    let jac = problem.jacobian(&outcome.x, &r)?;
    let covariance = covariance(&jac, 0.5 * r.norm_squared(), &x0.scales);
    let std_devs = covariance
        .as_ref()
        .map(|c| c.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect());
    Ok(CalibrationResult {
        initial_params: x0.clone(),
        params,
        initial_cost: outcome.initial_cost,
        final_cost: outcome.final_cost,
        initial_rms,
        final_rms,
        iterations: outcome.iterations,
        termination: outcome.termination,
        cost_history: outcome.cost_history,
        rows: problem.rows(),
        excluded: problem.excluded().to_vec(),
        covariance,
        std_devs,
    })
}
