use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use kinecal::estimator::{
    lm_solve, CalibrationProblem, CalibrationResult, JacobianMode, Termination,
};
use kinecal::kinecore::{pack, unpack, Field, ParamKey, ParameterVector, RobotModel};
use kinecal::measurements::{kinds_label, split, split_workspace, Dataset, Kind};
use kinecal::observability::{
    analyze, compare_campaigns, marginal_jacobian, ObservabilityReport, DEFAULT_RANK_TOL,
};
use kinecal::simlab::{parameter_error, synthesize, ParamError, ScenarioSpec};

use crate::config::{RunConfig, SplitMode};

pub const NOMINAL_ROBOT_FILE: &str = "nominal_robot.json";
pub const TRUE_ROBOT_FILE: &str = "true_robot.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CALIBRATED_ROBOT_FILE: &str = "calibrated_robot.json";
pub const CALIBRATION_REPORT_FILE: &str = "calibration.json";
pub const OBSERVABILITY_REPORT_FILE: &str = "observability.json";
pub const EVALUATION_REPORT_FILE: &str = "evaluation.json";
pub const CAMPAIGN_REPORT_FILE: &str = "campaign.json";
pub const CAMPAIGN_TABLE_FILE: &str = "campaign.csv";

/// How a command that produced its outputs went.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Outputs were written but are incomplete or questionable.
    Degraded(String),
}

impl Outcome {
    fn from_warnings(w: Vec<String>) -> Self {
        if w.is_empty() {
            Outcome::Success
        } else {
            Outcome::Degraded(w.join("; "))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub struct SimulateOutput {
    pub files: Vec<PathBuf>,
    pub shortfall: BTreeMap<Kind, usize>,
}

/// Generates a synthetic experiment and writes the nominal robot, the true
/// robot and the dataset under `out`.
pub fn simulate(spec_path: &Path, out: &Path) -> Result<(SimulateOutput, Outcome)> {
    let spec = ScenarioSpec::load(spec_path)
        .with_context(|| format!("loading scenario {}", spec_path.display()))?;
    let syn = synthesize(&spec)?;
    create_out(out)?;
    let files: Vec<PathBuf> = [NOMINAL_ROBOT_FILE, TRUE_ROBOT_FILE, DATASET_FILE]
        .iter()
        .map(|f| out.join(f))
        .collect();
    syn.nominal.save(&files[0])?;
    syn.truth.save(&files[1])?;
    syn.dataset.save(&files[2])?;
    info!(
        "wrote {} records ({}) to {}",
        syn.dataset.len(),
        kinds_label(&syn.dataset.kinds()),
        out.display()
    );
    let warnings = syn
        .shortfall
        .iter()
        .map(|(k, n)| format!("{n} {} records could not be generated", k.name()))
        .collect();
    Ok((
        SimulateOutput {
            files,
            shortfall: syn.shortfall,
        },
        Outcome::from_warnings(warnings),
    ))
}

/// Loaded and checked inputs of a run.
pub struct Inputs {
    pub robot: RobotModel,
    pub truth: Option<RobotModel>,
    /// Kind-filtered.
    pub dataset: Dataset,
}

fn merge(datasets: Vec<Dataset>) -> Result<Dataset> {
    let mut it = datasets.into_iter();
    let mut merged = it.next().context("no dataset")?;
    for d in it {
        for (k, s) in d.sigmas {
            match merged.sigmas.get(&k) {
                Some(prev) if *prev != s => {
                    bail!(
                        "datasets disagree on the {} sigma ({prev} vs {s})",
                        k.name()
                    )
                }
                _ => {
                    merged.sigmas.insert(k, s);
                }
            }
        }
        merged.measurements.extend(d.measurements);
    }
    Ok(merged)
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    cfg.validate()?;
    let path = cfg.robot.as_ref().context("no robot given")?;
    let mut robot =
        RobotModel::load(path).with_context(|| format!("loading robot {}", path.display()))?;
    if let Some(m) = &cfg.mask {
        robot = robot.with_mask(m)?;
    }
    let truth = match &cfg.truth {
        Some(p) => Some(
            RobotModel::load(p)
                .and_then(|t| t.with_mask_bits(robot.mask().to_vec()))
                .with_context(|| format!("loading ground truth {}", p.display()))?,
        ),
        None => None,
    };
    let datasets = cfg
        .dataset
        .iter()
        .map(|p| Dataset::load(p).with_context(|| format!("loading dataset {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut dataset = merge(datasets)?;
    if let Some(k) = &cfg.kinds {
        dataset = dataset.filter_kinds(k)?;
    }
    dataset
        .validate(&robot)
        .context("dataset does not match the robot")?;
    Ok(Inputs {
        robot,
        truth,
        dataset,
    })
}

/// Training and held-out parts; no held-out part when the split is 1.
pub fn split_dataset(d: &Dataset, cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    if cfg.split >= 1.0 {
        return Ok((d.clone(), None));
    }
    let (train, test) = match cfg.split_mode {
        SplitMode::Random => split(d, cfg.split, cfg.seed)?,
        SplitMode::Workspace => split_workspace(d, cfg.split, cfg.split_joint)?,
    };
    Ok((train, Some(test)))
}

/// Residual statistics of a model on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    /// Raw RMS per kind, native units (m or px).
    pub rms: BTreeMap<Kind, f64>,
    /// RMS of the sigma-weighted residuals (dimensionless).
    pub weighted_rms: f64,
}

pub fn fit(model: &RobotModel, d: &Dataset) -> Result<Fit> {
    let p = pack(model);
    let problem = CalibrationProblem::new(model, &p, d, JacobianMode::ForwardDiff)?;
    let z = p.scaled();
    let r = kinecal::estimator::LeastSquaresProblem::residuals(&problem, &z)?;
    Ok(Fit {
        rms: problem.rms_by_kind(&z)?,
        weighted_rms: (r.norm_squared() / r.len() as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub nominal: ParamError,
    pub calibrated: ParamError,
}

fn error_pair(
    x0: &ParameterVector,
    x: &ParameterVector,
    truth: Option<&RobotModel>,
    cfg: &RunConfig,
    filter: impl Fn(&ParamKey) -> bool,
) -> Result<Option<ErrorPair>> {
    let Some(truth) = truth else { return Ok(None) };
    let t = pack(truth);
    Ok(Some(ErrorPair {
        nominal: parameter_error(x0, &t, &cfg.reference, &filter)?,
        calibrated: parameter_error(x, &t, &cfg.reference, &filter)?,
    }))
}

pub struct Calibration {
    pub result: CalibrationResult,
    pub calibrated: RobotModel,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub fn run_calibration(inputs: &Inputs, cfg: &RunConfig) -> Result<Calibration> {
    let (train, test) = split_dataset(&inputs.dataset, cfg)?;
    let x0 = pack(&inputs.robot);
    info!(
        "calibrating {} parameters on {} records ({})",
        x0.len(),
        train.len(),
        kinds_label(&train.kinds())
    );
    let result = lm_solve(&inputs.robot, &train, &x0, &cfg.solve)?;
    info!(
        "cost {:.6e} -> {:.6e} in {} iterations ({:?})",
        result.initial_cost, result.final_cost, result.iterations, result.termination
    );
    let calibrated = unpack(&inputs.robot, &result.params)?;
    Ok(Calibration {
        result,
        calibrated,
        train,
        test,
    })
}

fn calibration_warnings(result: &CalibrationResult) -> Vec<String> {
    let mut w = Vec::new();
    if result.termination == Termination::MaxIterations {
        w.push("solver stopped at the iteration limit".to_string());
    }
    if !result.excluded.is_empty() {
        w.push(format!("{} records excluded", result.excluded.len()));
    }
    w
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub kinds: Vec<Kind>,
    pub train_records: usize,
    pub test_records: usize,
    pub solver: serde_json::Value,
    /// `None` without a ground-truth robot.
    pub parameter_error: Option<ErrorPair>,
    pub config: RunConfig,
}

/// Calibrates on the training split and writes the report and the
/// calibrated robot.
pub fn calibrate(cfg: &RunConfig) -> Result<(CalibrationReport, Outcome)> {
    let inputs = load_inputs(cfg)?;
    let cal = run_calibration(&inputs, cfg)?;
    let report = CalibrationReport {
        kinds: cal.train.kinds().into_iter().collect(),
        train_records: cal.train.len(),
        test_records: cal.test.as_ref().map_or(0, Dataset::len),
        solver: cal.result.report(),
        parameter_error: error_pair(
            &cal.result.initial_params,
            &cal.result.params,
            inputs.truth.as_ref(),
            cfg,
            |_| true,
        )?,
        config: cfg.clone(),
    };
    create_out(&cfg.out)?;
    cal.calibrated.save(cfg.out.join(CALIBRATED_ROBOT_FILE))?;
    write_json(&cfg.out.join(CALIBRATION_REPORT_FILE), &report)?;
    Ok((
        report,
        Outcome::from_warnings(calibration_warnings(&cal.result)),
    ))
}

/// Indices of the parameters kept by the marginal analysis.
pub fn kept_parameters(p: &ParameterVector, cfg: &RunConfig) -> Vec<usize> {
    (0..p.len())
        .filter(|&i| match &cfg.nuisance {
            Some(owners) => !owners.contains(&p.keys[i].owner),
            None => Field::DH.contains(&p.keys[i].field),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub key: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedNullDirection {
    pub singular_value: f64,
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilitySection {
    pub rows: usize,
    pub parameters: Vec<String>,
    pub full: ObservabilityReport,
    /// Parameters kept after projecting out the nuisance ones.
    pub kept: Vec<String>,
    pub marginal: ObservabilityReport,
    pub unidentifiable: Vec<NamedNullDirection>,
}

pub fn observability_section(
    model: &RobotModel,
    d: &Dataset,
    cfg: &RunConfig,
) -> Result<ObservabilitySection> {
    let p = pack(model);
    let problem = CalibrationProblem::new(model, &p, d, cfg.solve.jacobian_mode)?;
    let sys = problem.system(&p.scaled())?;
    let m = sys.rows();
    let full = analyze(&sys.jacobian, m, DEFAULT_RANK_TOL)?;
    let keep = kept_parameters(&p, cfg);
    let marginal = if keep.len() == p.len() {
        full.clone()
    } else {
        analyze(
            &marginal_jacobian(&sys.jacobian, &keep)?,
            m,
            DEFAULT_RANK_TOL,
        )?
    };
    let unidentifiable = full
        .unidentifiable
        .iter()
        .map(|nd| NamedNullDirection {
            singular_value: nd.singular_value,
            components: nd
                .params
                .iter()
                .map(|&i| Component {
                    key: p.keys[i].to_string(),
                    value: nd.direction[i],
                })
                .collect(),
        })
        .collect();
    Ok(ObservabilitySection {
        rows: m,
        parameters: p.keys.iter().map(ToString::to_string).collect(),
        kept: keep.iter().map(|&i| p.keys[i].to_string()).collect(),
        full,
        marginal,
        unidentifiable,
    })
}

/// Identification Jacobian analysis of the robot as given, on the whole
/// kind-filtered dataset.
pub fn observability(cfg: &RunConfig) -> Result<(ObservabilitySection, Outcome)> {
    let inputs = load_inputs(cfg)?;
    let section = observability_section(&inputs.robot, &inputs.dataset, cfg)?;
    create_out(&cfg.out)?;
    write_json(&cfg.out.join(OBSERVABILITY_REPORT_FILE), &section)?;
    let mut w = Vec::new();
    if !section.unidentifiable.is_empty() {
        w.push(format!(
            "{} unidentifiable parameter combinations",
            section.unidentifiable.len()
        ));
    }
    Ok((section, Outcome::from_warnings(w)))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub kinds: Vec<Kind>,
    pub train_records: usize,
    pub test_records: usize,
    pub train: FitPair,
    pub test: FitPair,
    /// `1 - calibrated / nominal` of the held-out RMS per kind.
    pub test_rms_reduction: BTreeMap<Kind, f64>,
    pub parameter_error: Option<ErrorPair>,
    pub observability: ObservabilitySection,
    pub solver: serde_json::Value,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitPair {
    pub nominal: Fit,
    pub calibrated: Fit,
}

/// Calibrates on the training split and compares calibrated and nominal
/// parameters on the held-out records.
pub fn evaluate(cfg: &RunConfig) -> Result<(EvaluationReport, Outcome)> {
    ensure!(
        cfg.split < 1.0,
        "evaluation needs a held-out split (--split < 1)"
    );
    let inputs = load_inputs(cfg)?;
    let cal = run_calibration(&inputs, cfg)?;
    let test = cal.test.as_ref().context("held-out split is empty")?;
    let pair = |d: &Dataset| -> Result<FitPair> {
        Ok(FitPair {
            nominal: fit(&inputs.robot, d)?,
            calibrated: fit(&cal.calibrated, d)?,
        })
    };
    let train_fit = pair(&cal.train)?;
    let test_fit = pair(test)?;
    let test_rms_reduction = test_fit
        .calibrated
        .rms
        .iter()
        .map(|(k, c)| (*k, 1.0 - c / test_fit.nominal.rms[k]))
        .collect();
    let report = EvaluationReport {
        kinds: inputs.dataset.kinds().into_iter().collect(),
        train_records: cal.train.len(),
        test_records: test.len(),
        train: train_fit,
        test: test_fit,
        test_rms_reduction,
        parameter_error: error_pair(
            &cal.result.initial_params,
            &cal.result.params,
            inputs.truth.as_ref(),
            cfg,
            |_| true,
        )?,
        observability: observability_section(&cal.calibrated, &cal.train, cfg)?,
        solver: cal.result.report(),
        config: cfg.clone(),
    };
    create_out(&cfg.out)?;
    cal.calibrated.save(cfg.out.join(CALIBRATED_ROBOT_FILE))?;
    write_json(&cfg.out.join(EVALUATION_REPORT_FILE), &report)?;
    Ok((
        report,
        Outcome::from_warnings(calibration_warnings(&cal.result)),
    ))
}

/// Every single kind, every pair and the full set of `kinds`.
pub fn campaign_kind_sets(kinds: &BTreeSet<Kind>) -> Vec<Vec<Kind>> {
    let ks: Vec<Kind> = kinds.iter().copied().collect();
    let mut sets: Vec<Vec<Kind>> = ks.iter().map(|&k| vec![k]).collect();
    for i in 0..ks.len() {
        for j in i + 1..ks.len() {
            sets.push(vec![ks[i], ks[j]]);
        }
    }
    if ks.len() > 2 {
        sets.push(ks);
    }
    sets
}

/// `total` records split as evenly as possible over `kinds`, taking the
/// first records of each kind in file order.
pub fn campaign_subset(d: &Dataset, kinds: &[Kind], total: usize) -> Result<Dataset> {
    let mut ms = Vec::with_capacity(total);
    for (i, &k) in kinds.iter().enumerate() {
        let quota = total / kinds.len() + usize::from(i < total % kinds.len());
        let have = d.count(k);
        ensure!(
            have >= quota,
            "campaign {} needs {quota} {} records, the training split has {have}",
            kinds_label(&kinds.iter().copied().collect()),
            k.name()
        );
        ms.extend(
            d.measurements
                .iter()
                .filter(|m| m.kind() == k)
                .take(quota)
                .cloned(),
        );
    }
    Ok(Dataset::new(ms, d.sigmas.clone(), d.provenance.clone())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRun {
    pub label: String,
    pub kinds: Vec<Kind>,
    pub counts: BTreeMap<Kind, usize>,
    pub iterations: usize,
    pub termination: Termination,
    pub final_cost: f64,
    /// Of the kept parameters, at the calibrated values.
    pub observability: ObservabilityReport,
    /// Over the kept parameters.
    pub parameter_error: Option<ParamError>,
    pub test: Option<Fit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub total: usize,
    pub kept: Vec<String>,
    /// In kind-set order: singles, pairs, all.
    pub runs: Vec<CampaignRun>,
    /// Labels ranked by O1, then O3.
    pub ranking: Vec<String>,
    /// Every multi-kind run beats every single-kind run on O1 and O3.
    pub multi_dominates_observability: Option<bool>,
    /// ... on parameter error over the kept parameters.
    pub multi_dominates_error: Option<bool>,
    /// ... on held-out weighted RMS.
    pub multi_dominates_test: Option<bool>,
}

fn dominates(runs: &[CampaignRun], metric: impl Fn(&CampaignRun) -> Option<f64>) -> Option<bool> {
    let (singles, multis): (Vec<_>, Vec<_>) = runs.iter().partition(|r| r.kinds.len() == 1);
    if singles.is_empty() || multis.is_empty() {
        return None;
    }
    let mut ok = true;
    for m in &multis {
        for s in &singles {
            ok &= metric(m)? < metric(s)?;
        }
    }
    Some(ok)
}

fn campaign_run(
    inputs: &Inputs,
    train: &Dataset,
    test: Option<&Dataset>,
    kinds: &[Kind],
    total: usize,
    keep: &[usize],
    cfg: &RunConfig,
) -> Result<(CampaignRun, RobotModel)> {
    let d = campaign_subset(train, kinds, total)?;
    let x0 = pack(&inputs.robot);
    let result = lm_solve(&inputs.robot, &d, &x0, &cfg.solve)?;
    let calibrated = unpack(&inputs.robot, &result.params)?;
    let problem =
        CalibrationProblem::new(&calibrated, &result.params, &d, cfg.solve.jacobian_mode)?;
    let sys = problem.system(&result.params.scaled())?;
    let jm = if keep.len() == x0.len() {
        sys.jacobian.clone()
    } else {
        marginal_jacobian(&sys.jacobian, keep)?
    };
    let observability = analyze(&jm, sys.rows(), DEFAULT_RANK_TOL)?;
    let kept: BTreeSet<String> = keep.iter().map(|&i| x0.keys[i].to_string()).collect();
    let parameter_error = error_pair(&x0, &result.params, inputs.truth.as_ref(), cfg, |k| {
        kept.contains(&k.to_string())
    })?
    .map(|e| e.calibrated);
    let run = CampaignRun {
        label: kinds_label(&kinds.iter().copied().collect()),
        kinds: kinds.to_vec(),
        counts: kinds.iter().map(|&k| (k, d.count(k))).collect(),
        iterations: result.iterations,
        termination: result.termination,
        final_cost: result.final_cost,
        observability,
        parameter_error,
        test: test.map(|t| fit(&calibrated, t)).transpose()?,
    };
    Ok((run, calibrated))
}

/// Calibrates every kind set on matched record counts and ranks them.
pub fn campaign_report(
    inputs: &Inputs,
    cfg: &RunConfig,
) -> Result<(CampaignReport, Vec<RobotModel>)> {
    let (train, test) = split_dataset(&inputs.dataset, cfg)?;
    let kinds = train.kinds();
    let total = match cfg.campaign_total {
        Some(t) => t,
        None => kinds.iter().map(|&k| train.count(k)).min().unwrap_or(0),
    };
    ensure!(total > 0, "campaign needs at least one record per campaign");
    let sets = campaign_kind_sets(&kinds);
    let x0 = pack(&inputs.robot);
    let keep = kept_parameters(&x0, cfg);
    ensure!(
        !keep.is_empty(),
        "no parameter is left after removing nuisance owners"
    );
    let run = |k: &Vec<Kind>| campaign_run(inputs, &train, test.as_ref(), k, total, &keep, cfg);
    let results: Vec<(CampaignRun, RobotModel)> = if cfg.parallel {
        sets.par_iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
        pool.install(|| sets.iter().map(run).collect::<Result<_>>())?
    };
    let (runs, models): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let ranking = compare_campaigns(
        runs.iter()
            .map(|r| (r.kinds.clone(), r.observability.clone()))
            .collect(),
    )?;
    let report = CampaignReport {
        total,
        kept: keep.iter().map(|&i| x0.keys[i].to_string()).collect(),
        ranking: ranking.rows.iter().map(|r| r.label.clone()).collect(),
        multi_dominates_observability: ranking.multi_dominates,
        multi_dominates_error: dominates(&runs, |r| r.parameter_error.map(|e| e.normalized_rms)),
        multi_dominates_test: dominates(&runs, |r| r.test.as_ref().map(|f| f.weighted_rms)),
        runs,
    };
    Ok((report, models))
}

#[derive(Serialize)]
struct CampaignCsvRow<'a> {
    rank: usize,
    kinds: &'a str,
    records: usize,
    m: usize,
    o1: f64,
    o2: f64,
    o3: f64,
    o4: f64,
    unidentifiable: usize,
    parameter_rms: Option<f64>,
    test_weighted_rms: Option<f64>,
}

pub fn campaign_csv(report: &CampaignReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (rank, label) in report.ranking.iter().enumerate() {
        let r = report
            .runs
            .iter()
            .find(|r| &r.label == label)
            .context("ranking names an unknown run")?;
        w.serialize(CampaignCsvRow {
            rank: rank + 1,
            kinds: &r.label,
            records: r.counts.values().sum(),
            m: r.observability.m,
            o1: r.observability.o1,
            o2: r.observability.o2,
            o3: r.observability.o3,
            o4: r.observability.o4,
            unidentifiable: r.observability.unidentifiable.len(),
            parameter_rms: r.parameter_error.map(|e| e.normalized_rms),
            test_weighted_rms: r.test.as_ref().map(|f| f.weighted_rms),
        })?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Runs the campaign and writes the JSON report, the CSV ranking and one
/// subdirectory per kind set with its calibrated robot.
pub fn campaign(cfg: &RunConfig) -> Result<(CampaignReport, Outcome)> {
    let inputs = load_inputs(cfg)?;
    let (report, models) = campaign_report(&inputs, cfg)?;
    create_out(&cfg.out)?;
    for (run, model) in report.runs.iter().zip(&models) {
        let dir = cfg.out.join("runs").join(&run.label);
        create_out(&dir)?;
        model.save(dir.join(CALIBRATED_ROBOT_FILE))?;
    }
    write_json(&cfg.out.join(CAMPAIGN_REPORT_FILE), &report)?;
    std::fs::write(cfg.out.join(CAMPAIGN_TABLE_FILE), campaign_csv(&report)?)?;
    let w: Vec<String> = report
        .runs
        .iter()
        .filter(|r| r.termination == Termination::MaxIterations)
        .map(|r| format!("campaign {} stopped at the iteration limit", r.label))
        .collect();
    if report.multi_dominates_observability == Some(false) {
        warn!("not every multi-kind campaign dominates every single-kind one");
    }
    Ok((report, Outcome::from_warnings(w)))
}
