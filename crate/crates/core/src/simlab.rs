//! Synthetic ground truth: a builtin desk-scale dual-arm rig, configuration
//! sampling, contact solving and noisy measurement synthesis.
//!
//! Every record draws from its own random stream, keyed by the scenario
//! seed, the closure kind and the record index, so generation order does
//! not affect the output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Issue, Result};
use crate::estimator::{levenberg_marquardt, JacobianMode, LeastSquaresProblem, SolveOptions};
use crate::kinecore::{
    perturb, wrap_angle, DhLink, FieldClass, Frame, FrameKind, JointKind, MountTransform, ParamKey,
    ParameterVector, Perturbation, RobotModel, ROOT_FRAME,
};
use crate::measurements::{Closure, Dataset, Kind, Measurement, Provenance};
use crate::sensemodel::{
    point_world, CameraModel, ExternalDevice, MarkerPoint, PlaneParam, PointRef, TaxelPatch,
};

/// Restarts allowed when searching for a contact configuration.
pub const CONTACT_RESTARTS: usize = 20;

/// A point on the robot used as a measurement target. A bare patch means
/// "any taxel of this patch", drawn at random per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetPoint {
    Taxel { patch: String, taxel: u32 },
    Patch { patch: String },
    Marker { marker: String },
}

impl TargetPoint {
    fn draw(&self, model: &RobotModel, rng: &mut ChaCha8Rng) -> Result<PointRef> {
        Ok(match self {
            TargetPoint::Marker { marker } => PointRef::marker(marker),
            TargetPoint::Taxel { patch, taxel } => PointRef::taxel(patch, *taxel),
            TargetPoint::Patch { patch } => {
                let p = model.taxel_patch(patch)?;
                let t = &p.taxels[rng.random_range(0..p.taxels.len())];
                PointRef::taxel(patch, t.id)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactTarget {
    pub a: TargetPoint,
    pub b: TargetPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneTarget {
    pub point: TargetPoint,
    pub plane: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTarget {
    pub camera: String,
    pub marker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalTarget {
    pub point: TargetPoint,
    pub device: String,
}

/// What each kind of record measures. Record `i` of a kind uses target
/// `i % len`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Targets {
    pub self_contact: Vec<ContactTarget>,
    pub plane_contact: Vec<PlaneTarget>,
    pub self_observation: Vec<ObservationTarget>,
    pub external: Vec<ExternalTarget>,
}

impl Targets {
    fn len(&self, kind: Kind) -> usize {
        match kind {
            Kind::SelfContact => self.self_contact.len(),
            Kind::PlaneContact => self.plane_contact.len(),
            Kind::SelfObservation => self.self_observation.len(),
            Kind::External => self.external.len(),
        }
    }
}

fn default_contact_tolerance() -> f64 {
    1e-6
}

fn default_outlier_scale() -> f64 {
    20.0
}

fn default_max_attempts() -> usize {
    500
}

/// Description of one synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub description: String,
    /// Robot description file; the builtin desk rig when absent.
    #[serde(default)]
    pub robot: Option<PathBuf>,
    /// Free-parameter patterns replacing the robot's own mask.
    #[serde(default)]
    pub mask: Option<Vec<String>>,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub counts: BTreeMap<Kind, usize>,
    /// Standard deviation of the injected noise per kind (m or px).
    #[serde(default)]
    pub sigmas: BTreeMap<Kind, f64>,
    /// Sampling range per joint (rad); the robot's limits when absent.
    #[serde(default)]
    pub joint_limits: Option<Vec<[f64; 2]>>,
    /// Contact closure tolerance (m).
    #[serde(default = "default_contact_tolerance")]
    pub contact_tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of records receiving a gross error.
    #[serde(default)]
    pub outlier_rate: f64,
    /// Gross errors are uniform in `[-scale * sigma, scale * sigma]` per
    /// component.
    #[serde(default = "default_outlier_scale")]
    pub outlier_scale: f64,
    /// Standard deviation of noise added to the recorded joint angles (rad).
    #[serde(default)]
    pub joint_noise: f64,
    /// Required for robots other than the desk rig.
    #[serde(default)]
    pub targets: Option<Targets>,
    /// Draws per record before giving up on visibility or contact.
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            description: String::new(),
            robot: None,
            mask: None,
            perturbation: Perturbation::default(),
            counts: BTreeMap::new(),
            sigmas: BTreeMap::new(),
            joint_limits: None,
            contact_tolerance: default_contact_tolerance(),
            seed: 0,
            outlier_rate: 0.0,
            outlier_scale: default_outlier_scale(),
            joint_noise: 0.0,
            targets: None,
            max_attempts: default_max_attempts(),
        }
    }
}

impl ScenarioSpec {
    /// Reads a TOML or JSON spec (by extension; TOML otherwise). A relative
    /// robot path is resolved against the scenario file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut spec: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        if let (Some(robot), Some(dir)) = (&spec.robot, path.parent()) {
            if robot.is_relative() {
                spec.robot = Some(dir.join(robot));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let mut bad = |field: String, msg: String| issues.push(Issue::header(field, msg));
        for (k, s) in &self.sigmas {
            if !(s.is_finite() && *s >= 0.0) {
                bad(
                    format!("sigmas.{}", k.name()),
                    format!("must be >= 0, got {s}"),
                );
            }
        }
        if !(self.contact_tolerance.is_finite() && self.contact_tolerance > 0.0) {
            bad(
                "contact_tolerance".into(),
                format!("must be > 0, got {}", self.contact_tolerance),
            );
        }
        let p = self.perturbation;
        if !(p.length.is_finite() && p.length >= 0.0 && p.angle.is_finite() && p.angle >= 0.0) {
            bad(
                "perturbation".into(),
                format!("magnitudes must be >= 0, got {p:?}"),
            );
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            bad(
                "outlier_rate".into(),
                format!("must lie in [0, 1], got {}", self.outlier_rate),
            );
        }
        if !(self.outlier_scale.is_finite() && self.outlier_scale >= 0.0) {
            bad(
                "outlier_scale".into(),
                format!("must be >= 0, got {}", self.outlier_scale),
            );
        }
        if !(self.joint_noise.is_finite() && self.joint_noise >= 0.0) {
            bad(
                "joint_noise".into(),
                format!("must be >= 0, got {}", self.joint_noise),
            );
        }
        if let Some(limits) = &self.joint_limits {
            for (j, [lo, hi]) in limits.iter().enumerate() {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    bad(
                        format!("joint_limits[{j}]"),
                        format!("invalid range [{lo}, {hi}]"),
                    );
                }
            }
        }
        if self.max_attempts == 0 {
            bad("max_attempts".into(), "must be >= 1".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(issues))
        }
    }

    /// Hex SHA-256 of the scenario and the nominal robot it resolves to.
    pub fn hash(&self, nominal: &RobotModel) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        h.update(nominal.to_json()?.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Nominal robot: the referenced file or the desk rig, with the mask
    /// override applied.
    pub fn nominal_robot(&self) -> Result<RobotModel> {
        let base = match &self.robot {
            Some(path) => RobotModel::load(path)?,
            None => desk_rig(),
        };
        match &self.mask {
            Some(m) => base.with_mask(m),
            None => Ok(base),
        }
    }

    fn targets_for(&self) -> Result<Targets> {
        match (&self.targets, &self.robot) {
            (Some(t), _) => Ok(t.clone()),
            (None, None) => Ok(desk_rig_targets()),
            (None, Some(_)) => Err(Error::Validation(vec![Issue::header(
                "targets",
                "required when a robot file is given",
            )])),
        }
    }
}

/// Sigma written to the dataset header for kinds generated without noise,
/// so that weights stay finite.
pub fn fallback_sigma(kind: Kind) -> f64 {
    match kind {
        Kind::SelfObservation => 1.0,
        _ => 1e-3,
    }
}

/// Uniform i.i.d. configurations within `limits`.
pub fn sample_configurations(limits: &[[f64; 2]], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_q(limits, &mut rng)).collect()
}

fn sample_q(limits: &[[f64; 2]], rng: &mut ChaCha8Rng) -> Vec<f64> {
    limits
        .iter()
        .map(|&[lo, hi]| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
        .collect()
}

fn clamp_q(q: &mut [f64], limits: &[[f64; 2]]) {
    for (v, [lo, hi]) in q.iter_mut().zip(limits) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Joint-space search for a configuration satisfying a point closure.
struct ClosureSearch<'a, F> {
    limits: &'a [[f64; 2]],
    residual: F,
}

impl<F> LeastSquaresProblem for ClosureSearch<'_, F>
where
    F: Fn(&[f64]) -> Result<DVector<f64>> + Sync,
{
    fn n_params(&self) -> usize {
        self.limits.len()
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.residual)(x.as_slice())
    }

    fn jacobian_mode(&self) -> JacobianMode {
        JacobianMode::CentralDiff
    }

    fn project(&self, x: &mut DVector<f64>) {
        clamp_q(x.as_mut_slice(), self.limits);
    }
}

fn search_options() -> SolveOptions {
    SolveOptions {
        max_iterations: 100,
        gradient_tol: 1e-16,
        step_tol: 1e-14,
        cost_tol: 1e-16,
        ..SolveOptions::default()
    }
}

/// Runs the search from an accepted solution until no further decrease is
/// possible, so that closures hold to rounding rather than to `eps`.
fn polish<F>(problem: &ClosureSearch<'_, F>, x: DVector<f64>, norm: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>> + Sync,
{
    let opts = SolveOptions {
        max_iterations: 50,
        gradient_tol: f64::MIN_POSITIVE,
        step_tol: f64::MIN_POSITIVE,
        cost_tol: f64::MIN_POSITIVE,
        ..search_options()
    };
    Ok(match levenberg_marquardt(problem, x.clone(), &opts) {
        Ok(out) if (problem.residual)(out.x.as_slice())?.norm() <= norm => out.x,
        _ => x,
    }
    .as_slice()
    .to_vec())
}

/// Drives `residual(q)` to zero from random starts; succeeds when its
/// norm is at most `eps`.
fn solve_closure<F>(
    limits: &[[f64; 2]],
    eps: f64,
    rng: &mut ChaCha8Rng,
    residual: F,
) -> Result<Option<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>> + Sync,
{
    let problem = ClosureSearch { limits, residual };
    let opts = search_options();
    for _ in 0..CONTACT_RESTARTS {
        let q0 = DVector::from_vec(sample_q(limits, rng));
        if (problem.residual)(q0.as_slice())?.norm() <= eps {
            return Ok(Some(q0.as_slice().to_vec()));
        }
        let out = match levenberg_marquardt(&problem, q0, &opts) {
            Ok(out) => out,
            Err(Error::Solver(_)) => continue,
            Err(e) => return Err(e),
        };
        let r = (problem.residual)(out.x.as_slice())?.norm();
        if r <= eps {
            return Ok(Some(polish(&problem, out.x, r)?));
        }
    }
    Ok(None)
}

fn check_limits(model: &RobotModel, limits: &[[f64; 2]], eps: f64) -> Result<()> {
    if limits.len() != model.n_joints() {
        return Err(Error::JointCountMismatch {
            expected: model.n_joints(),
            got: limits.len(),
        });
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Invalid(format!(
            "contact tolerance must be > 0, got {eps}"
        )));
    }
    Ok(())
}

/// Configuration within `limits` at which points `a` and `b` coincide to
/// within `eps`, or `None` after [`CONTACT_RESTARTS`] random starts.
pub fn solve_contact_configuration(
    model: &RobotModel,
    a: &PointRef,
    b: &PointRef,
    eps: f64,
    limits: &[[f64; 2]],
    seed: u64,
) -> Result<Option<Vec<f64>>> {
    check_limits(model, limits, eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    contact_with_offset(model, a, b, &Vector3::zeros(), eps, limits, &mut rng)
}

/// As [`solve_contact_configuration`] but for `p_a - p_b = target`.
fn contact_with_offset(
    model: &RobotModel,
    a: &PointRef,
    b: &PointRef,
    target: &Vector3<f64>,
    eps: f64,
    limits: &[[f64; 2]],
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<f64>>> {
    a.resolve(model)?;
    b.resolve(model)?;
    solve_closure(limits, eps, rng, |q| {
        let poses = model.frame_poses(q)?;
        let d = point_world(model, &poses, a)? - point_world(model, &poses, b)? - target;
        Ok(DVector::from_column_slice(d.as_slice()))
    })
}

/// Output of [`synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub nominal: RobotModel,
    pub truth: RobotModel,
    pub dataset: Dataset,
    /// Requested minus generated record count, for kinds that fell short.
    pub shortfall: BTreeMap<Kind, usize>,
    pub spec_hash: String,
}

impl Synthesis {
    pub fn is_complete(&self) -> bool {
        self.shortfall.is_empty()
    }
}

fn kind_stream(kind: Kind) -> u64 {
    match kind {
        Kind::SelfContact => 1,
        Kind::PlaneContact => 2,
        Kind::SelfObservation => 3,
        Kind::External => 4,
    }
}

struct Generator<'a> {
    spec: &'a ScenarioSpec,
    truth: &'a RobotModel,
    targets: &'a Targets,
    limits: Vec<[f64; 2]>,
}

impl Generator<'_> {
    fn rng(&self, kind: Kind, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream((kind_stream(kind) << 48) | index as u64);
        rng
    }

    fn noise(&self, kind: Kind, dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let sigma = self.spec.sigmas.get(&kind).copied().unwrap_or(0.0);
        let mut e = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            DVector::from_fn(dim, |_, _| normal.sample(rng))
        } else {
            DVector::zeros(dim)
        };
        if self.spec.outlier_rate > 0.0 && rng.random_bool(self.spec.outlier_rate) {
            let half = self.spec.outlier_scale * sigma.max(fallback_sigma(kind));
            if half > 0.0 {
                for v in e.iter_mut() {
                    *v += rng.random_range(-half..=half);
                }
            }
        }
        e
    }

    fn recorded_q(&self, mut q: Vec<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if self.spec.joint_noise > 0.0 {
            let normal = Normal::new(0.0, self.spec.joint_noise).expect("validated joint noise");
            for v in &mut q {
                *v += normal.sample(rng);
            }
        }
        q
    }

    fn record(&self, kind: Kind, index: usize) -> Result<Option<Measurement>> {
        let mut rng = self.rng(kind, index);
        let n = self.targets.len(kind);
        if n == 0 {
            return Err(Error::Validation(vec![Issue::header(
                format!("targets.{}", kind.name()),
                "no targets for a kind with a non-zero count",
            )]));
        }
        let eps = self.spec.contact_tolerance;
        let model = self.truth;
        let out = match kind {
            Kind::SelfContact => {
                let t = &self.targets.self_contact[index % n];
                let e = self.noise(kind, 3, &mut rng);
                let target = Vector3::new(e[0], e[1], e[2]);
                let mut found = None;
                let tries = self.spec.max_attempts.div_ceil(CONTACT_RESTARTS).max(1);
                for _ in 0..tries {
                    let a = t.a.draw(model, &mut rng)?;
                    let b = t.b.draw(model, &mut rng)?;
                    let limits = &self.limits;
                    if let Some(q) =
                        contact_with_offset(model, &a, &b, &target, eps, limits, &mut rng)?
                    {
                        found = Some((q, a, b));
                        break;
                    }
                }
                found.map(|(q, a, b)| (q, Closure::SelfContact { a, b, offset: None }))
            }
            Kind::PlaneContact => {
                let t = &self.targets.plane_contact[index % n];
                let e = self.noise(kind, 1, &mut rng)[0];
                let plane = model.plane(&t.plane)?.clone();
                let mut found = None;
                let tries = self.spec.max_attempts.div_ceil(CONTACT_RESTARTS).max(1);
                for _ in 0..tries {
                    let point = t.point.draw(model, &mut rng)?;
                    point.resolve(model)?;
                    let q = solve_closure(&self.limits, eps, &mut rng, |q| {
                        let p = point_world(model, &model.frame_poses(q)?, &point)?;
                        Ok(DVector::from_element(1, plane.signed_distance(&p) - e))
                    })?;
                    if let Some(q) = q {
                        found = Some((q, point));
                        break;
                    }
                }
                found.map(|(q, point)| {
                    (
                        q,
                        Closure::PlaneContact {
                            point,
                            plane: t.plane.clone(),
                        },
                    )
                })
            }
            Kind::SelfObservation => {
                let t = &self.targets.self_observation[index % n];
                let cam = model.camera(&t.camera)?;
                let marker = PointRef::marker(&t.marker);
                let e = self.noise(kind, 2, &mut rng);
                let e = nalgebra::Vector2::new(e[0], e[1]);
                let mut found = None;
                for _ in 0..self.spec.max_attempts {
                    let q = sample_q(&self.limits, &mut rng);
                    let poses = model.frame_poses(&q)?;
                    let p = point_world(model, &poses, &marker)?;
                    let pc = poses
                        .get(model, &cam.frame)?
                        .inverse_transform_point(&p.into())
                        .coords;
                    if pc.z <= 0.0 {
                        continue;
                    }
                    let px = cam.project(&pc)?;
                    if cam.in_image(&px) && cam.in_image(&(px + e)) {
                        found = Some((q, px + e));
                        break;
                    }
                }
                found.map(|(q, px)| {
                    (
                        q,
                        Closure::SelfObservation {
                            camera: t.camera.clone(),
                            marker: t.marker.clone(),
                            pixel: [px.x, px.y],
                        },
                    )
                })
            }
            Kind::External => {
                let t = &self.targets.external[index % n];
                let point = t.point.draw(model, &mut rng)?;
                let q = sample_q(&self.limits, &mut rng);
                let p = point_world(model, &model.frame_poses(&q)?, &point)?;
                let m = model.external_device(&t.device)?.to_device(&p);
                let e = self.noise(kind, 3, &mut rng);
                Some((
                    q,
                    Closure::External {
                        point,
                        device: t.device.clone(),
                        measured: [m.x + e[0], m.y + e[1], m.z + e[2]],
                    },
                ))
            }
        };
        Ok(out.map(|(q, closure)| Measurement {
            q: self.recorded_q(q, &mut rng),
            closure,
        }))
    }
}

/// Builds nominal and perturbed robots and a noisy dataset generated from
/// the perturbed one. Records that could not be generated (no contact or
/// no visible marker within the attempt budget) are reported as shortfall.
pub fn synthesize(spec: &ScenarioSpec) -> Result<Synthesis> {
    spec.validate()?;
    let nominal = spec.nominal_robot()?;
    let targets = spec.targets_for()?;
    let truth = perturb(&nominal, &spec.perturbation, spec.seed)?;
    let limits = spec
        .joint_limits
        .clone()
        .unwrap_or_else(|| nominal.joint_limits());
    check_limits(&nominal, &limits, spec.contact_tolerance)?;
    let spec_hash = spec.hash(&nominal)?;
    let gen = Generator {
        spec,
        truth: &truth,
        targets: &targets,
        limits,
    };
    let mut measurements = Vec::new();
    let mut shortfall = BTreeMap::new();
    let mut sigmas = BTreeMap::new();
    for kind in Kind::ALL {
        let count = spec.counts.get(&kind).copied().unwrap_or(0);
        if count == 0 {
            continue;
        }
        let records: Vec<Option<Measurement>> = (0..count)
            .into_par_iter()
            .map(|i| gen.record(kind, i))
            .collect::<Result<_>>()?;
        let got: Vec<Measurement> = records.into_iter().flatten().collect();
        if got.len() < count {
            shortfall.insert(kind, count - got.len());
        }
        if !got.is_empty() {
            let s = spec.sigmas.get(&kind).copied().unwrap_or(0.0);
            sigmas.insert(kind, if s > 0.0 { s } else { fallback_sigma(kind) });
        }
        measurements.extend(got);
    }
    let provenance = Provenance {
        description: spec.description.clone(),
        seed: Some(spec.seed),
        spec_hash: Some(spec_hash.clone()),
    };
    let dataset = Dataset::new(measurements, sigmas, provenance)?;
    Ok(Synthesis {
        nominal,
        truth,
        dataset,
        shortfall,
        spec_hash,
    })
}

/// Parameter error between two vectors with the same layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    /// RMS over length parameters (m); zero when there are none.
    pub length_rms: f64,
    /// RMS over angle parameters (rad); zero when there are none.
    pub angle_rms: f64,
    /// RMS of the errors divided by the perturbation magnitude of their
    /// class (dimensionless).
    pub normalized_rms: f64,
    pub count: usize,
}

/// Errors of `estimate` against `truth` over the entries accepted by
/// `filter`. Angle differences are wrapped to `(-pi, pi]`.
pub fn parameter_error(
    estimate: &ParameterVector,
    truth: &ParameterVector,
    reference: &Perturbation,
    filter: impl Fn(&ParamKey) -> bool,
) -> Result<ParamError> {
    if estimate.keys != truth.keys {
        return Err(Error::Invalid(
            "parameter vectors have different layouts".into(),
        ));
    }
    let (mut sl, mut nl, mut sa, mut na, mut sn) = (0.0, 0usize, 0.0, 0usize, 0.0);
    for i in 0..estimate.len() {
        if !filter(&estimate.keys[i]) {
            continue;
        }
        let class = estimate.class(i);
        let mut d = estimate.values[i] - truth.values[i];
        if class == FieldClass::Angle {
            d = wrap_angle(d);
        }
        let mag = reference.for_class(class);
        sn += if mag > 0.0 { (d / mag).powi(2) } else { d * d };
        match class {
            FieldClass::Length => {
                sl += d * d;
                nl += 1;
            }
            FieldClass::Angle => {
                sa += d * d;
                na += 1;
            }
        }
    }
    let rms = |s: f64, n: usize| if n > 0 { (s / n as f64).sqrt() } else { 0.0 };
    Ok(ParamError {
        length_rms: rms(sl, nl),
        angle_rms: rms(sa, na),
        normalized_rms: rms(sn, nl + na),
        count: nl + na,
    })
}

fn dh_frame(id: &str, parent: &str, a: f64, d: f64, alpha: f64, theta: f64) -> Frame {
    Frame {
        id: id.into(),
        parent: parent.into(),
        kind: FrameKind::Dh(
            DhLink::new(a, d, alpha, theta, JointKind::Revolute).with_limits(-1.6, 1.6),
        ),
    }
}

fn mount_frame(id: &str, parent: &str, t: [f64; 3], r: UnitQuaternion<f64>, cal: bool) -> Frame {
    Frame {
        id: id.into(),
        parent: parent.into(),
        kind: FrameKind::Mount(MountTransform::new(t, r, cal)),
    }
}

/// Rotation of a camera at `eye` looking at `target` with world `z` up:
/// optical axis `z`, image `x` to the right and `y` down.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> UnitQuaternion<f64> {
    let f = (target - eye).normalize();
    let x = f.cross(&Vector3::z()).normalize();
    let y = f.cross(&x);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::from_columns(
        &[x, y, f],
    )))
}

/// Joint-level DH parameters of one desk-rig arm: `(a, d, alpha, theta_offset)`.
const ARM: [(f64, f64, f64, f64); 6] = [
    (0.03, 0.05, -std::f64::consts::FRAC_PI_2, 0.0),
    (
        0.0,
        0.0,
        std::f64::consts::FRAC_PI_2,
        -std::f64::consts::FRAC_PI_2,
    ),
    (0.015, 0.26, -std::f64::consts::FRAC_PI_2, 0.0),
    (0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0),
    (0.0, 0.22, -std::f64::consts::FRAC_PI_2, 0.0),
    (0.05, 0.0, std::f64::consts::FRAC_PI_2, 0.0),
];

/// Default free parameters of the desk rig: the DH parameters of both
/// arms, except the last twist of each arm, which a single fingertip point
/// cannot separate from the last link's `a` and `d`.
pub fn desk_rig_mask() -> Vec<String> {
    let mut mask = Vec::new();
    for side in ["l", "r"] {
        for k in 1..=5 {
            mask.push(format!("{side}{k}.*"));
        }
        for f in ["a", "d", "theta_offset"] {
            mask.push(format!("{side}6.{f}"));
        }
    }
    mask
}

/// Inclined board in front of the robot, normal tilted back towards it,
/// passing through `(0.45, 0, -0.1)`.
fn board() -> PlaneParam {
    let (azimuth, elevation) = (std::f64::consts::PI, 1.2);
    let n = crate::sensemodel::plane_normal(azimuth, elevation);
    PlaneParam {
        id: "board".into(),
        normal_azimuth: azimuth,
        normal_elevation: elevation,
        offset: n.dot(&Vector3::new(0.45, 0.0, -0.1)),
        calibratable: true,
    }
}

/// Dual six-joint arms on a fixed torso, a head camera looking at the
/// shared workspace, a 4x4 taxel patch on each forearm, a fingertip marker
/// on each hand, an inclined board and an external tracker.
pub fn desk_rig() -> RobotModel {
    let mut frames = Vec::new();
    for (side, y, sign) in [("l", 0.18, 1.0), ("r", -0.18, -1.0)] {
        let base = format!("{side}_base");
        frames.push(mount_frame(
            &base,
            ROOT_FRAME,
            [0.0, y, 0.0],
            UnitQuaternion::from_euler_angles(0.0, 0.0, sign * 0.3),
            false,
        ));
        let mut parent = base;
        for (k, &(a, d, alpha, theta)) in ARM.iter().enumerate() {
            let id = format!("{side}{}", k + 1);
            frames.push(dh_frame(&id, &parent, a, d, alpha, theta));
            parent = id;
        }
        frames.push(mount_frame(
            &format!("{side}_skin"),
            &format!("{side}4"),
            [0.035, 0.0, 0.12],
            UnitQuaternion::from_euler_angles(0.0, std::f64::consts::FRAC_PI_2, 0.0),
            true,
        ));
    }
    let eye = Vector3::new(-0.05, 0.0, 0.35);
    frames.push(mount_frame(
        "head_cam",
        ROOT_FRAME,
        eye.into(),
        look_at(eye, Vector3::new(0.35, 0.0, -0.05)),
        true,
    ));
    let markers = ["l", "r"]
        .iter()
        .map(|side| MarkerPoint {
            id: format!("{side}_tip"),
            frame: format!("{side}6"),
            position: [0.03, 0.01, 0.015],
            calibratable: false,
        })
        .collect();
    let patches = ["l", "r"]
        .iter()
        .map(|side| {
            TaxelPatch::grid(
                &format!("{side}_patch"),
                &format!("{side}_skin"),
                4,
                4,
                0.01,
            )
        })
        .collect();
    let tracker_pos = Vector3::new(1.2, -0.3, 0.4);
    let tracker_rot = look_at(tracker_pos, Vector3::new(0.3, 0.0, 0.0));
    let mut tracker = ExternalDevice {
        id: "tracker".into(),
        translation: [0.0; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        noise_sigma: 2e-4,
        calibratable: true,
    };
    tracker.set_pose(&nalgebra::Isometry3::from_parts(
        tracker_pos.into(),
        tracker_rot,
    ));
    RobotModel::builder("desk_rig", frames)
        .chains(
            ["l", "r"]
                .iter()
                .map(|side| {
                    let name = if *side == "l" {
                        "left_arm"
                    } else {
                        "right_arm"
                    };
                    let mut path = vec![format!("{side}_base")];
                    path.extend((1..=6).map(|k| format!("{side}{k}")));
                    (name.to_string(), path)
                })
                .collect(),
        )
        .cameras(vec![CameraModel {
            id: "head".into(),
            frame: "head_cam".into(),
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            resolution: [640, 480],
        }])
        .markers(markers)
        .taxel_patches(patches)
        .planes(vec![board()])
        .external_devices(vec![tracker])
        .mask(&desk_rig_mask())
        .build()
        .expect("builtin desk rig is valid")
}

/// Measurement targets of the desk rig: fingertips touching the opposite
/// forearm patch or each other, fingertips on the board, the head camera
/// watching both fingertips, and the tracker following both fingertips.
pub fn desk_rig_targets() -> Targets {
    let marker = |m: &str| TargetPoint::Marker { marker: m.into() };
    let patch = |p: &str| TargetPoint::Patch { patch: p.into() };
    Targets {
        self_contact: vec![
            ContactTarget {
                a: marker("l_tip"),
                b: patch("r_patch"),
            },
            ContactTarget {
                a: marker("r_tip"),
                b: patch("l_patch"),
            },
            ContactTarget {
                a: marker("l_tip"),
                b: marker("r_tip"),
            },
        ],
        plane_contact: ["l_tip", "r_tip"]
            .iter()
            .map(|m| PlaneTarget {
                point: marker(m),
                plane: "board".into(),
            })
            .collect(),
        self_observation: ["l_tip", "r_tip"]
            .iter()
            .map(|m| ObservationTarget {
                camera: "head".into(),
                marker: m.to_string(),
            })
            .collect(),
        external: ["l_tip", "r_tip"]
            .iter()
            .map(|m| ExternalTarget {
                point: marker(m),
                device: "tracker".into(),
            })
            .collect(),
    }
}
