//! Robot structure, Denavit–Hartenberg kinematics and calibratable
//! parameters.
//!
//! # Conventions
//!
//! Links use the classic (distal) DH convention: the transform from a link's
//! parent frame to the link frame is
//!
//! ```text
//! Rz(theta_offset + q) * Tz(d) * Tx(a) * Rx(alpha)
//! ```
//!
//! where `q` is the joint variable of a revolute link (zero for fixed links).
//! All frames form a tree rooted at the implicit frame [`ROOT_FRAME`]. A frame
//! must be declared after its parent, which makes the tree acyclic and
//! connected by construction.
//!
//! The joint vector `q` always covers the whole robot: one entry per revolute
//! link, in declaration order.
//!
//! Every calibratable scalar of the model (DH fields, calibratable mounts,
//! markers, planes and external devices) is a *parameter slot*; the
//! calibration mask selects which slots are free. Mount and device rotations
//! are stored as unit quaternions and exposed to the optimizer as rotation
//! vectors (`rx, ry, rz`, axis times angle).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensemodel::{CameraModel, ExternalDevice, MarkerPoint, PlaneParam, TaxelPatch};

pub const ROOT_FRAME: &str = "world";
pub const SCHEMA_VERSION: u32 = 1;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    if x > -PI && x <= PI {
        return x;
    }
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhLink {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    pub theta_offset: f64,
    pub joint: JointKind,
    /// Joint range `[lo, hi]` in radians. Metadata for the simulator only;
    /// forward kinematics never clamps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<[f64; 2]>,
}

impl DhLink {
    pub fn new(a: f64, d: f64, alpha: f64, theta_offset: f64, joint: JointKind) -> Self {
        Self {
            a,
            d,
            alpha: wrap_angle(alpha),
            theta_offset: wrap_angle(theta_offset),
            joint,
            limits: None,
        }
    }

    pub fn with_limits(mut self, lo: f64, hi: f64) -> Self {
        self.limits = Some([lo, hi]);
        self
    }

    pub fn transform(&self, q: f64) -> Isometry3<f64> {
        let theta = self.theta_offset + q;
        let (st, ct) = theta.sin_cos();
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        Isometry3::from_parts(
            Translation3::new(self.a * ct, self.a * st, self.d),
            rotation,
        )
    }
}

/// Rigid mounting transform from the parent frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MountRepr", into = "MountRepr")]
pub struct MountTransform {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub calibratable: bool,
}

#[derive(Serialize, Deserialize)]
struct MountRepr {
    translation: [f64; 3],
    /// `[w, x, y, z]`
    rotation: [f64; 4],
    #[serde(default)]
    calibratable: bool,
}

impl TryFrom<MountRepr> for MountTransform {
    type Error = Error;

    fn try_from(r: MountRepr) -> Result<Self> {
        let rotation = unit_quaternion(r.rotation)?;
        Ok(Self {
            translation: Vector3::from(r.translation),
            rotation,
            calibratable: r.calibratable,
        })
    }
}

impl From<MountTransform> for MountRepr {
    fn from(m: MountTransform) -> Self {
        let q = m.rotation.quaternion();
        Self {
            translation: m.translation.into(),
            rotation: [q.w, q.i, q.j, q.k],
            calibratable: m.calibratable,
        }
    }
}

/// Parses a `[w, x, y, z]` quaternion that must already be unit length up
/// to rounding in the source file.
pub(crate) fn unit_quaternion(wxyz: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let [w, x, y, z] = wxyz;
    let q = Quaternion::new(w, x, y, z);
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!(
            "quaternion {wxyz:?} is not unit length (norm {norm})"
        )));
    }
    Ok(UnitQuaternion::from_quaternion(q))
}

impl MountTransform {
    pub fn new(translation: [f64; 3], rotation: UnitQuaternion<f64>, calibratable: bool) -> Self {
        Self {
            translation: Vector3::from(translation),
            rotation,
            calibratable,
        }
    }

    pub fn transform(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FrameKind {
    Dh(DhLink),
    Mount(MountTransform),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: String,
    pub parent: String,
    #[serde(flatten)]
    pub kind: FrameKind,
}

/// Name of one scalar inside a calibratable entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    A,
    D,
    Alpha,
    ThetaOffset,
    Tx,
    Ty,
    Tz,
    Rx,
    Ry,
    Rz,
    Px,
    Py,
    Pz,
    Azimuth,
    Elevation,
    Offset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldClass {
    Length,
    Angle,
}

impl FieldClass {
    pub fn unit(self) -> &'static str {
        match self {
            FieldClass::Length => "m",
            FieldClass::Angle => "rad",
        }
    }
}

impl Field {
    pub const DH: [Field; 4] = [Field::A, Field::D, Field::Alpha, Field::ThetaOffset];
    pub const POSE: [Field; 6] = [
        Field::Tx,
        Field::Ty,
        Field::Tz,
        Field::Rx,
        Field::Ry,
        Field::Rz,
    ];
    pub const POINT: [Field; 3] = [Field::Px, Field::Py, Field::Pz];
    pub const PLANE: [Field; 3] = [Field::Azimuth, Field::Elevation, Field::Offset];

    pub fn class(self) -> FieldClass {
        match self {
            Field::Alpha
            | Field::ThetaOffset
            | Field::Rx
            | Field::Ry
            | Field::Rz
            | Field::Azimuth
            | Field::Elevation => FieldClass::Angle,
            _ => FieldClass::Length,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::A => "a",
            Field::D => "d",
            Field::Alpha => "alpha",
            Field::ThetaOffset => "theta_offset",
            Field::Tx => "tx",
            Field::Ty => "ty",
            Field::Tz => "tz",
            Field::Rx => "rx",
            Field::Ry => "ry",
            Field::Rz => "rz",
            Field::Px => "px",
            Field::Py => "py",
            Field::Pz => "pz",
            Field::Azimuth => "azimuth",
            Field::Elevation => "elevation",
            Field::Offset => "offset",
        }
    }

    fn rotation_axis(self) -> Option<usize> {
        match self {
            Field::Rx => Some(0),
            Field::Ry => Some(1),
            Field::Rz => Some(2),
            _ => None,
        }
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Field::DH.as_slice(),
            &Field::POSE,
            &Field::POINT,
            &Field::PLANE,
        ]
        .concat()
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| Error::Invalid(format!("unknown parameter field `{s}`")))
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamOwner {
    Frame(usize),
    Marker(usize),
    Plane(usize),
    Device(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamSlot {
    pub owner: ParamOwner,
    pub field: Field,
}

/// Identifies one entry of a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub owner: String,
    pub field: Field,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.owner, self.field)
    }
}

/// Normalization units used to make parameters dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub length: f64,
    pub angle: f64,
}

impl Default for Scales {
    fn default() -> Self {
        Self {
            length: 1.0,
            angle: 1.0,
        }
    }
}

impl Scales {
    pub fn for_class(&self, class: FieldClass) -> f64 {
        match class {
            FieldClass::Length => self.length,
            FieldClass::Angle => self.angle,
        }
    }
}

/// Flat view of the free parameters of a model, in native units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub scales: Vec<f64>,
    pub keys: Vec<ParamKey>,
    /// Slot index in the owning model for every entry.
    #[serde(skip)]
    slots: Vec<usize>,
}

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn class(&self, i: usize) -> FieldClass {
        self.keys[i].field.class()
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Values divided by their scales.
    pub fn scaled(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(
            self.len(),
            self.values.iter().zip(&self.scales).map(|(v, s)| v / s),
        )
    }

    /// Same layout with values taken from a scaled vector.
    pub fn with_scaled(&self, z: &nalgebra::DVector<f64>) -> Result<Self> {
        if z.len() != self.len() {
            return Err(Error::LengthMismatch {
                what: "scaled parameter vector",
                expected: self.len(),
                got: z.len(),
            });
        }
        let mut out = self.clone();
        for (v, (zi, s)) in out.values.iter_mut().zip(z.iter().zip(&self.scales)) {
            *v = zi * s;
        }
        Ok(out)
    }

    pub fn index_of(&self, owner: &str, field: Field) -> Option<usize> {
        self.keys
            .iter()
            .position(|k| k.owner == owner && k.field == field)
    }
}

/// Precomputed root-frame poses of every frame for one configuration.
#[derive(Debug, Clone)]
pub struct FramePoses {
    poses: Vec<Isometry3<f64>>,
}

impl FramePoses {
    pub fn get(&self, model: &RobotModel, frame: &str) -> Result<Isometry3<f64>> {
        if frame == ROOT_FRAME {
            return Ok(Isometry3::identity());
        }
        let i = model.frame_index(frame)?;
        Ok(self.poses[i])
    }

    pub fn by_index(&self, i: usize) -> &Isometry3<f64> {
        &self.poses[i]
    }
}

/// JSON robot description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotDescription {
    pub schema_version: u32,
    pub name: String,
    pub frames: Vec<Frame>,
    #[serde(default)]
    pub chains: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub cameras: Vec<CameraModel>,
    #[serde(default)]
    pub markers: Vec<MarkerPoint>,
    #[serde(default)]
    pub taxel_patches: Vec<TaxelPatch>,
    #[serde(default)]
    pub planes: Vec<PlaneParam>,
    #[serde(default)]
    pub external_devices: Vec<ExternalDevice>,
    /// Free parameters as `owner.field` keys; `owner.*` selects every
    /// slot of an entity and `*` selects everything.
    #[serde(default)]
    pub mask: Vec<String>,
}

/// Tree of DH links and mounts with the sensors attached to it.
///
/// Immutable once built: use [`unpack`] or the `with_*` methods to derive
/// modified copies.
#[derive(Debug, Clone)]
pub struct RobotModel {
    name: String,
    frames: Vec<Frame>,
    chains: BTreeMap<String, Vec<String>>,
    cameras: Vec<CameraModel>,
    markers: Vec<MarkerPoint>,
    taxel_patches: Vec<TaxelPatch>,
    planes: Vec<PlaneParam>,
    devices: Vec<ExternalDevice>,
    frame_lookup: HashMap<String, usize>,
    parents: Vec<Option<usize>>,
    joints: Vec<Option<usize>>,
    n_joints: usize,
    slots: Vec<ParamSlot>,
    mask: Vec<bool>,
}

pub struct RobotModelBuilder {
    desc: RobotDescription,
}

impl RobotModelBuilder {
    pub fn chains(mut self, chains: BTreeMap<String, Vec<String>>) -> Self {
        self.desc.chains = chains;
        self
    }
    pub fn cameras(mut self, v: Vec<CameraModel>) -> Self {
        self.desc.cameras = v;
        self
    }
    pub fn markers(mut self, v: Vec<MarkerPoint>) -> Self {
        self.desc.markers = v;
        self
    }
    pub fn taxel_patches(mut self, v: Vec<TaxelPatch>) -> Self {
        self.desc.taxel_patches = v;
        self
    }
    pub fn planes(mut self, v: Vec<PlaneParam>) -> Self {
        self.desc.planes = v;
        self
    }
    pub fn external_devices(mut self, v: Vec<ExternalDevice>) -> Self {
        self.desc.external_devices = v;
        self
    }
    pub fn mask<S: AsRef<str>>(mut self, keys: &[S]) -> Self {
        self.desc.mask = keys.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }
    pub fn build(self) -> Result<RobotModel> {
        RobotModel::from_description(self.desc)
    }
}

impl RobotModel {
    pub fn builder(name: &str, frames: Vec<Frame>) -> RobotModelBuilder {
        RobotModelBuilder {
            desc: RobotDescription {
                schema_version: SCHEMA_VERSION,
                name: name.to_string(),
                frames,
                chains: BTreeMap::new(),
                cameras: vec![],
                markers: vec![],
                taxel_patches: vec![],
                planes: vec![],
                external_devices: vec![],
                mask: vec![],
            },
        }
    }

    pub fn from_description(desc: RobotDescription) -> Result<Self> {
        if desc.schema_version != SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported robot schema version {}",
                desc.schema_version
            )));
        }
        let mut ids: HashSet<&str> = HashSet::new();
        ids.insert(ROOT_FRAME);
        let all_ids = desc
            .frames
            .iter()
            .map(|f| f.id.as_str())
            .chain(desc.cameras.iter().map(|c| c.id.as_str()))
            .chain(desc.markers.iter().map(|m| m.id.as_str()))
            .chain(desc.taxel_patches.iter().map(|p| p.id.as_str()))
            .chain(desc.planes.iter().map(|p| p.id.as_str()))
            .chain(desc.external_devices.iter().map(|d| d.id.as_str()));
        for id in all_ids {
            if id.is_empty() || id.contains('.') || id.contains('/') || id == "*" {
                return Err(Error::Invalid(format!(
                    "id `{id}` is empty or contains a reserved character"
                )));
            }
            if !ids.insert(id) {
                return Err(Error::Invalid(format!("duplicate id `{id}`")));
            }
        }

        let mut frames = desc.frames;
        let mut frame_lookup = HashMap::new();
        let mut parents = Vec::with_capacity(frames.len());
        let mut joints = Vec::with_capacity(frames.len());
        let mut n_joints = 0;
        for (i, frame) in frames.iter_mut().enumerate() {
            let parent = if frame.parent == ROOT_FRAME {
                None
            } else {
                match frame_lookup.get(&frame.parent) {
                    Some(&p) => Some(p),
                    None => {
                        return Err(Error::Invalid(format!(
                            "frame `{}` references parent `{}` which is not declared before it",
                            frame.id, frame.parent
                        )))
                    }
                }
            };
            parents.push(parent);
            match &mut frame.kind {
                FrameKind::Dh(link) => {
                    if ![link.a, link.d, link.alpha, link.theta_offset]
                        .iter()
                        .all(|v| v.is_finite())
                    {
                        return Err(Error::NonFinite(format!("DH link `{}`", frame.id)));
                    }
                    link.alpha = wrap_angle(link.alpha);
                    link.theta_offset = wrap_angle(link.theta_offset);
                    if link.joint == JointKind::Revolute {
                        joints.push(Some(n_joints));
                        n_joints += 1;
                    } else {
                        joints.push(None);
                    }
                }
                FrameKind::Mount(m) => {
                    if !m.translation.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite(format!("mount `{}`", frame.id)));
                    }
                    joints.push(None);
                }
            }
            frame_lookup.insert(frame.id.clone(), i);
        }

        let has_frame = |id: &str| id == ROOT_FRAME || frame_lookup.contains_key(id);
        for c in &desc.cameras {
            c.validate()?;
            if !has_frame(&c.frame) {
                return Err(Error::UnknownFrame(c.frame.clone()));
            }
        }
        for m in &desc.markers {
            if !has_frame(&m.frame) {
                return Err(Error::UnknownFrame(m.frame.clone()));
            }
            if m.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("marker `{}`", m.id)));
            }
        }
        for p in &desc.taxel_patches {
            p.validate()?;
            if !has_frame(&p.frame) {
                return Err(Error::UnknownFrame(p.frame.clone()));
            }
        }
        for p in &desc.planes {
            if ![p.normal_azimuth, p.normal_elevation, p.offset]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::NonFinite(format!("plane `{}`", p.id)));
            }
        }
        let mut devices = desc.external_devices;
        for d in devices.iter_mut() {
            let q = unit_quaternion(d.rotation)?;
            d.set_pose(&Isometry3::from_parts(
                Translation3::from(Vector3::from(d.translation)),
                q,
            ));
            if !(d.noise_sigma >= 0.0) {
                return Err(Error::Invalid(format!(
                    "device `{}`: noise_sigma must be non-negative",
                    d.id
                )));
            }
        }

        let mut model = RobotModel {
            name: desc.name,
            frames,
            chains: desc.chains,
            cameras: desc.cameras,
            markers: desc.markers,
            taxel_patches: desc.taxel_patches,
            planes: desc.planes,
            devices,
            frame_lookup,
            parents,
            joints,
            n_joints,
            slots: vec![],
            mask: vec![],
        };
        model.validate_chains()?;
        model.slots = model.enumerate_slots();
        model.mask = model.resolve_mask(&desc.mask)?;
        Ok(model)
    }

    fn validate_chains(&self) -> Result<()> {
        for (name, path) in &self.chains {
            if path.is_empty() {
                return Err(Error::Invalid(format!("chain `{name}` is empty")));
            }
            let mut expected_parent = ROOT_FRAME;
            for id in path {
                let i = self.frame_index(id)?;
                if self.frames[i].parent != expected_parent {
                    return Err(Error::Invalid(format!(
                        "chain `{name}` is not a root-to-frame path at `{id}`"
                    )));
                }
                expected_parent = id;
            }
        }
        Ok(())
    }

    fn enumerate_slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        let mut push = |owner: ParamOwner, fields: &[Field]| {
            slots.extend(fields.iter().map(|&field| ParamSlot { owner, field }));
        };
        for (i, f) in self.frames.iter().enumerate() {
            match &f.kind {
                FrameKind::Dh(_) => push(ParamOwner::Frame(i), &Field::DH),
                FrameKind::Mount(m) if m.calibratable => push(ParamOwner::Frame(i), &Field::POSE),
                FrameKind::Mount(_) => {}
            }
        }
        for (i, m) in self.markers.iter().enumerate() {
            if m.calibratable {
                push(ParamOwner::Marker(i), &Field::POINT);
            }
        }
        for (i, p) in self.planes.iter().enumerate() {
            if p.calibratable {
                push(ParamOwner::Plane(i), &Field::PLANE);
            }
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.calibratable {
                push(ParamOwner::Device(i), &Field::POSE);
            }
        }
        slots
    }

    fn resolve_mask<S: AsRef<str>>(&self, patterns: &[S]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.slots.len()];
        for pattern in patterns {
            let pattern = pattern.as_ref();
            if pattern == "*" {
                mask.iter_mut().for_each(|m| *m = true);
                continue;
            }
            let (owner, field) = pattern.split_once('.').ok_or_else(|| {
                Error::Invalid(format!(
                    "mask entry `{pattern}` is not of the form owner.field"
                ))
            })?;
            let field = if field == "*" {
                None
            } else {
                Some(field.parse::<Field>()?)
            };
            let mut hit = false;
            for (i, slot) in self.slots.iter().enumerate() {
                if self.owner_id(slot.owner) == owner && field.is_none_or(|f| f == slot.field) {
                    mask[i] = true;
                    hit = true;
                }
            }
            if !hit {
                return Err(Error::Invalid(format!(
                    "mask entry `{pattern}` matches no calibratable parameter"
                )));
            }
        }
        Ok(mask)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn chains(&self) -> &BTreeMap<String, Vec<String>> {
        &self.chains
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn markers(&self) -> &[MarkerPoint] {
        &self.markers
    }

    pub fn taxel_patches(&self) -> &[TaxelPatch] {
        &self.taxel_patches
    }

    pub fn planes(&self) -> &[PlaneParam] {
        &self.planes
    }

    pub fn external_devices(&self) -> &[ExternalDevice] {
        &self.devices
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    /// Joint index driven by a frame, if it is a revolute link.
    pub fn joint_of(&self, frame: usize) -> Option<usize> {
        self.joints[frame]
    }

    /// Joint limits in joint order; revolute links without limits get
    /// `[-pi, pi]`.
    pub fn joint_limits(&self) -> Vec<[f64; 2]> {
        self.frames
            .iter()
            .filter_map(|f| match &f.kind {
                FrameKind::Dh(l) if l.joint == JointKind::Revolute => {
                    Some(l.limits.unwrap_or([-PI, PI]))
                }
                _ => None,
            })
            .collect()
    }

    pub fn frame_index(&self, id: &str) -> Result<usize> {
        self.frame_lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownFrame(id.to_string()))
    }

    pub fn parent_of(&self, frame: usize) -> Option<usize> {
        self.parents[frame]
    }

    pub fn camera(&self, id: &str) -> Result<&CameraModel> {
        find(&self.cameras, id, "camera", |c| &c.id)
    }

    pub fn marker(&self, id: &str) -> Result<&MarkerPoint> {
        find(&self.markers, id, "marker", |m| &m.id)
    }

    pub fn taxel_patch(&self, id: &str) -> Result<&TaxelPatch> {
        find(&self.taxel_patches, id, "taxel patch", |p| &p.id)
    }

    pub fn plane(&self, id: &str) -> Result<&PlaneParam> {
        find(&self.planes, id, "plane", |p| &p.id)
    }

    pub fn external_device(&self, id: &str) -> Result<&ExternalDevice> {
        find(&self.devices, id, "external device", |d| &d.id)
    }

    /// Total number of parameter slots (the mask length).
    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn slot_key(&self, slot: usize) -> ParamKey {
        let s = self.slots[slot];
        ParamKey {
            owner: self.owner_id(s.owner).to_string(),
            field: s.field,
        }
    }

    /// Mask entries as `owner.field` strings.
    pub fn mask_keys(&self) -> Vec<String> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| self.slot_key(i).to_string())
            .collect()
    }

    /// Copy with a new mask given as `owner.field` patterns.
    pub fn with_mask<S: AsRef<str>>(&self, patterns: &[S]) -> Result<Self> {
        let mut out = self.clone();
        out.mask = self.resolve_mask(patterns)?;
        Ok(out)
    }

    pub fn with_mask_bits(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.slots.len() {
            return Err(Error::LengthMismatch {
                what: "calibration mask",
                expected: self.slots.len(),
                got: mask.len(),
            });
        }
        let mut out = self.clone();
        out.mask = mask;
        Ok(out)
    }

    fn owner_id(&self, owner: ParamOwner) -> &str {
        match owner {
            ParamOwner::Frame(i) => &self.frames[i].id,
            ParamOwner::Marker(i) => &self.markers[i].id,
            ParamOwner::Plane(i) => &self.planes[i].id,
            ParamOwner::Device(i) => &self.devices[i].id,
        }
    }

    /// Current value of a slot, in native units.
    pub fn slot_value(&self, slot: usize) -> f64 {
        let s = self.slots[slot];
        match s.owner {
            ParamOwner::Frame(i) => match (&self.frames[i].kind, s.field) {
                (FrameKind::Dh(l), Field::A) => l.a,
                (FrameKind::Dh(l), Field::D) => l.d,
                (FrameKind::Dh(l), Field::Alpha) => l.alpha,
                (FrameKind::Dh(l), Field::ThetaOffset) => l.theta_offset,
                (FrameKind::Mount(m), f) => pose_field(&m.translation, &m.rotation, f),
                _ => unreachable!("slot/field mismatch"),
            },
            ParamOwner::Marker(i) => {
                let p = &self.markers[i].position;
                match s.field {
                    Field::Px => p[0],
                    Field::Py => p[1],
                    Field::Pz => p[2],
                    _ => unreachable!("slot/field mismatch"),
                }
            }
            ParamOwner::Plane(i) => {
                let p = &self.planes[i];
                match s.field {
                    Field::Azimuth => p.normal_azimuth,
                    Field::Elevation => p.normal_elevation,
                    Field::Offset => p.offset,
                    _ => unreachable!("slot/field mismatch"),
                }
            }
            ParamOwner::Device(i) => {
                let pose = self.devices[i].pose();
                pose_field(&pose.translation.vector, &pose.rotation, s.field)
            }
        }
    }

    /// Applies slot values. Rotation components of one owner are applied
    /// together so untouched components are not re-derived.
    fn apply_slots(&mut self, updates: &[(usize, f64)]) -> Result<()> {
        let mut rotations: BTreeMap<(u8, usize), [Option<f64>; 3]> = BTreeMap::new();
        for &(slot, value) in updates {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter {}",
                    self.slot_key(slot)
                )));
            }
            let s = self.slots[slot];
            if let Some(axis) = s.field.rotation_axis() {
                let key = match s.owner {
                    ParamOwner::Frame(i) => (0, i),
                    ParamOwner::Device(i) => (1, i),
                    _ => unreachable!("rotation field on a non-pose owner"),
                };
                rotations.entry(key).or_default()[axis] = Some(value);
                continue;
            }
            match s.owner {
                ParamOwner::Frame(i) => match (&mut self.frames[i].kind, s.field) {
                    (FrameKind::Dh(l), Field::A) => l.a = value,
                    (FrameKind::Dh(l), Field::D) => l.d = value,
                    (FrameKind::Dh(l), Field::Alpha) => l.alpha = wrap_angle(value),
                    (FrameKind::Dh(l), Field::ThetaOffset) => l.theta_offset = wrap_angle(value),
                    (FrameKind::Mount(m), Field::Tx) => m.translation.x = value,
                    (FrameKind::Mount(m), Field::Ty) => m.translation.y = value,
                    (FrameKind::Mount(m), Field::Tz) => m.translation.z = value,
                    _ => unreachable!("slot/field mismatch"),
                },
                ParamOwner::Marker(i) => {
                    let k = match s.field {
                        Field::Px => 0,
                        Field::Py => 1,
                        _ => 2,
                    };
                    self.markers[i].position[k] = value;
                }
                ParamOwner::Plane(i) => {
                    let p = &mut self.planes[i];
                    match s.field {
                        Field::Azimuth => p.normal_azimuth = wrap_angle(value),
                        Field::Elevation => p.normal_elevation = wrap_angle(value),
                        _ => p.offset = value,
                    }
                }
                ParamOwner::Device(i) => {
                    let k = match s.field {
                        Field::Tx => 0,
                        Field::Ty => 1,
                        _ => 2,
                    };
                    self.devices[i].translation[k] = value;
                }
            }
        }
        for ((kind, i), comps) in rotations {
            let current = match kind {
                0 => match &self.frames[i].kind {
                    FrameKind::Mount(m) => m.rotation,
                    FrameKind::Dh(_) => unreachable!("rotation slot on DH link"),
                },
                _ => self.devices[i].pose().rotation,
            };
            let mut v = current.scaled_axis();
            for (k, c) in comps.iter().enumerate() {
                if let Some(c) = c {
                    v[k] = *c;
                }
            }
            let rotation = UnitQuaternion::from_scaled_axis(v);
            match kind {
                0 => {
                    if let FrameKind::Mount(m) = &mut self.frames[i].kind {
                        m.rotation = rotation;
                    }
                }
                _ => {
                    let d = &mut self.devices[i];
                    let t = Vector3::from(d.translation);
                    d.set_pose(&Isometry3::from_parts(Translation3::from(t), rotation));
                }
            }
        }
        Ok(())
    }

    pub fn local_transform(&self, frame: usize, q: &[f64]) -> Isometry3<f64> {
        match &self.frames[frame].kind {
            FrameKind::Dh(link) => {
                let qi = self.joints[frame].map_or(0.0, |j| q[j]);
                link.transform(qi)
            }
            FrameKind::Mount(m) => m.transform(),
        }
    }

    fn check_q(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.n_joints {
            return Err(Error::JointCountMismatch {
                expected: self.n_joints,
                got: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint vector".into()));
        }
        Ok(())
    }

    /// Root-frame pose of `target` at configuration `q`.
    pub fn fk(&self, q: &[f64], target: &str) -> Result<Isometry3<f64>> {
        self.check_q(q)?;
        if target == ROOT_FRAME {
            return Ok(Isometry3::identity());
        }
        let mut i = Some(self.frame_index(target)?);
        let mut pose = Isometry3::identity();
        while let Some(f) = i {
            pose = self.local_transform(f, q) * pose;
            i = self.parents[f];
        }
        Ok(pose)
    }

    /// Root-frame poses of all frames at configuration `q`.
    pub fn frame_poses(&self, q: &[f64]) -> Result<FramePoses> {
        self.check_q(q)?;
        let mut poses: Vec<Isometry3<f64>> = Vec::with_capacity(self.frames.len());
        for i in 0..self.frames.len() {
            let local = self.local_transform(i, q);
            let pose = match self.parents[i] {
                Some(p) => poses[p] * local,
                None => local,
            };
            poses.push(pose);
        }
        Ok(FramePoses { poses })
    }

    /// Frames on the path from the root to `target`, root side first.
    pub fn path_to(&self, target: &str) -> Result<Vec<usize>> {
        let mut path = Vec::new();
        let mut i = Some(self.frame_index(target)?);
        while let Some(f) = i {
            path.push(f);
            i = self.parents[f];
        }
        path.reverse();
        Ok(path)
    }

    pub fn to_description(&self) -> RobotDescription {
        RobotDescription {
            schema_version: SCHEMA_VERSION,
            name: self.name.clone(),
            frames: self.frames.clone(),
            chains: self.chains.clone(),
            cameras: self.cameras.clone(),
            markers: self.markers.clone(),
            taxel_patches: self.taxel_patches.clone(),
            planes: self.planes.clone(),
            external_devices: self.devices.clone(),
            mask: self.mask_keys(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_description())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_description(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

fn find<'a, T>(
    items: &'a [T],
    id: &str,
    kind: &'static str,
    key: impl Fn(&T) -> &String,
) -> Result<&'a T> {
    items
        .iter()
        .find(|t| key(t) == id)
        .ok_or_else(|| Error::UnknownId {
            kind,
            id: id.to_string(),
        })
}

fn pose_field(t: &Vector3<f64>, r: &UnitQuaternion<f64>, field: Field) -> f64 {
    match field {
        Field::Tx => t.x,
        Field::Ty => t.y,
        Field::Tz => t.z,
        Field::Rx | Field::Ry | Field::Rz => r.scaled_axis()[field.rotation_axis().unwrap()],
        _ => unreachable!("not a pose field"),
    }
}

/// Free parameters of `model` with unit scales.
pub fn pack(model: &RobotModel) -> ParameterVector {
    pack_with(model, &Scales::default())
}

pub fn pack_with(model: &RobotModel, scales: &Scales) -> ParameterVector {
    let slots: Vec<usize> = (0..model.n_slots()).filter(|&i| model.mask[i]).collect();
    ParameterVector {
        values: slots.iter().map(|&i| model.slot_value(i)).collect(),
        scales: slots
            .iter()
            .map(|&i| scales.for_class(model.slots[i].field.class()))
            .collect(),
        keys: slots.iter().map(|&i| model.slot_key(i)).collect(),
        slots,
    }
}

/// Copy of `model` with the free parameters replaced by `params`.
pub fn unpack(model: &RobotModel, params: &ParameterVector) -> Result<RobotModel> {
    let masked: Vec<usize> = (0..model.n_slots()).filter(|&i| model.mask[i]).collect();
    let slots = if params.slots.is_empty() && !params.keys.is_empty() {
        // Deserialized vectors carry keys only.
        params
            .keys
            .iter()
            .map(|k| {
                masked
                    .iter()
                    .copied()
                    .find(|&s| model.slot_key(s) == *k)
                    .ok_or_else(|| {
                        Error::Invalid(format!("parameter `{k}` is not free in the model"))
                    })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        params.slots.clone()
    };
    if slots.len() != masked.len() || params.values.len() != masked.len() {
        return Err(Error::LengthMismatch {
            what: "parameter vector",
            expected: masked.len(),
            got: params.values.len(),
        });
    }
    if slots != masked {
        return Err(Error::Invalid(
            "parameter vector layout does not match the model mask".into(),
        ));
    }
    let mut out = model.clone();
    let updates: Vec<(usize, f64)> = slots
        .into_iter()
        .zip(params.values.iter().copied())
        .collect();
    out.apply_slots(&updates)?;
    Ok(out)
}

/// Root-frame pose of `target` for the model with `params` applied.
pub fn fk(
    model: &RobotModel,
    params: &ParameterVector,
    q: &[f64],
    target: &str,
) -> Result<Isometry3<f64>> {
    unpack(model, params)?.fk(q, target)
}

/// Half-widths of the uniform perturbation per field class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    /// m
    pub length: f64,
    /// rad
    pub angle: f64,
}

impl Perturbation {
    pub fn for_class(&self, class: FieldClass) -> f64 {
        match class {
            FieldClass::Length => self.length,
            FieldClass::Angle => self.angle,
        }
    }
}

/// Offsets every free scalar by a uniform draw in `[-mag, mag]` of its
/// field class.
pub fn perturb(model: &RobotModel, magnitudes: &Perturbation, seed: u64) -> Result<RobotModel> {
    if !(magnitudes.length >= 0.0 && magnitudes.angle >= 0.0)
        || !magnitudes.length.is_finite()
        || !magnitudes.angle.is_finite()
    {
        return Err(Error::Invalid(format!(
            "perturbation magnitudes must be finite and non-negative: {magnitudes:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = pack(model);
    for i in 0..params.len() {
        let mag = magnitudes.for_class(params.class(i));
        if mag > 0.0 {
            params.values[i] += rng.random_range(-mag..=mag);
        }
    }
    unpack(model, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn dh(id: &str, parent: &str, a: f64, d: f64, alpha: f64) -> Frame {
        Frame {
            id: id.into(),
            parent: parent.into(),
            kind: FrameKind::Dh(DhLink::new(a, d, alpha, 0.0, JointKind::Revolute)),
        }
    }

    pub(crate) fn six_dof() -> RobotModel {
        let table = [
            (0.0, 0.1, -FRAC_PI_2),
            (0.0, 0.0, FRAC_PI_2),
            (0.02, 0.25, -FRAC_PI_2),
            (-0.02, 0.0, FRAC_PI_2),
            (0.0, 0.22, -FRAC_PI_2),
            (0.0, 0.0, FRAC_PI_2),
        ];
        let mut frames = Vec::new();
        let mut parent = ROOT_FRAME.to_string();
        for (k, (a, d, alpha)) in table.iter().enumerate() {
            let id = format!("l{}", k + 1);
            frames.push(dh(&id, &parent, *a, *d, *alpha));
            parent = id;
        }
        RobotModel::builder("arm", frames)
            .mask(&["*"])
            .build()
            .unwrap()
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(2.0 * PI + 0.5), 0.5, epsilon = 1e-12);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn fk_examples() {
        let empty = RobotModel::builder("e", vec![]).build().unwrap();
        assert_eq!(empty.fk(&[], ROOT_FRAME).unwrap(), Isometry3::identity());

        let one = RobotModel::builder("one", vec![dh("l1", ROOT_FRAME, 1.0, 0.0, 0.0)])
            .build()
            .unwrap();
        let p = one.fk(&[FRAC_PI_2], "l1").unwrap().translation.vector;
        assert_relative_eq!(p, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);

        let two = RobotModel::builder(
            "two",
            vec![
                dh("l1", ROOT_FRAME, 1.0, 0.0, 0.0),
                dh("l2", "l1", 1.0, 0.0, 0.0),
            ],
        )
        .build()
        .unwrap();
        let p = two.fk(&[0.0, 0.0], "l2").unwrap().translation.vector;
        assert_relative_eq!(p, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn fk_errors() {
        let m = six_dof();
        assert!(matches!(
            m.fk(&[0.0; 6], "nope"),
            Err(Error::UnknownFrame(_))
        ));
        assert!(matches!(
            m.fk(&[0.0; 5], "l6"),
            Err(Error::JointCountMismatch {
                expected: 6,
                got: 5
            })
        ));
        assert!(matches!(
            m.fk(&[0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0], "l6"),
            Err(Error::NonFinite(_))
        ));
        let mut p = pack(&m);
        p.values[0] = f64::INFINITY;
        assert!(matches!(
            fk(&m, &p, &[0.0; 6], "l6"),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn pack_examples() {
        let m = six_dof();
        assert_eq!(pack(&m).len(), 24);
        let none = m.with_mask::<&str>(&[]).unwrap();
        assert!(pack(&none).is_empty());

        let one = m.with_mask(&["l3.theta_offset"]).unwrap();
        let mut p = pack(&one);
        assert_eq!(p.len(), 1);
        p.values[0] += 0.1;
        let changed = unpack(&one, &p).unwrap();
        for (a, b) in m.frames().iter().zip(changed.frames()) {
            match (&a.kind, &b.kind) {
                (FrameKind::Dh(x), FrameKind::Dh(y)) if a.id == "l3" => {
                    assert_relative_eq!(y.theta_offset, x.theta_offset + 0.1);
                    assert_eq!((x.a, x.d, x.alpha), (y.a, y.d, y.alpha));
                }
                _ => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let m = six_dof();
        let mut p = pack(&m);
        p.values.pop();
        assert!(matches!(unpack(&m, &p), Err(Error::LengthMismatch { .. })));
        let other = m.with_mask(&["l1.a"]).unwrap();
        assert!(unpack(&other, &pack(&m)).is_err());
    }

    #[test]
    fn mask_patterns() {
        let m = six_dof();
        let m2 = m.with_mask(&["l2.*", "l5.d"]).unwrap();
        assert_eq!(
            m2.mask_keys(),
            vec!["l2.a", "l2.d", "l2.alpha", "l2.theta_offset", "l5.d"]
        );
        assert!(m.with_mask(&["l9.a"]).is_err());
        assert!(m.with_mask(&["l1.bogus"]).is_err());
        assert!(m.with_mask(&["l1"]).is_err());
        assert_eq!(m.mask().len(), m.n_slots());
    }

    #[test]
    fn structure_validation() {
        // parent declared after child
        let frames = vec![
            dh("a", "b", 1.0, 0.0, 0.0),
            dh("b", ROOT_FRAME, 1.0, 0.0, 0.0),
        ];
        assert!(RobotModel::builder("x", frames).build().is_err());
        // self-cycle
        assert!(RobotModel::builder("x", vec![dh("a", "a", 1.0, 0.0, 0.0)])
            .build()
            .is_err());
        // duplicate id
        let frames = vec![
            dh("a", ROOT_FRAME, 1.0, 0.0, 0.0),
            dh("a", ROOT_FRAME, 1.0, 0.0, 0.0),
        ];
        assert!(RobotModel::builder("x", frames).build().is_err());
        // chains must be root paths
        let frames = vec![
            dh("a", ROOT_FRAME, 1.0, 0.0, 0.0),
            dh("b", "a", 1.0, 0.0, 0.0),
        ];
        let mut chains = BTreeMap::new();
        chains.insert("bad".to_string(), vec!["b".to_string()]);
        assert!(RobotModel::builder("x", frames.clone())
            .chains(chains)
            .build()
            .is_err());
        let mut chains = BTreeMap::new();
        chains.insert("good".to_string(), vec!["a".to_string(), "b".to_string()]);
        assert!(RobotModel::builder("x", frames)
            .chains(chains)
            .build()
            .is_ok());
        // non-unit quaternion in a file
        let json = r#"{"schema_version":1,"name":"x","frames":[
            {"id":"m","parent":"world","type":"mount","translation":[0,0,0],"rotation":[2,0,0,0]}]}"#;
        assert!(RobotModel::from_json(json).is_err());
    }

    #[test]
    fn dh_angles_are_normalized() {
        let link = DhLink::new(0.0, 0.0, 3.0 * PI, -PI, JointKind::Fixed);
        assert_relative_eq!(link.alpha, PI, epsilon = 1e-12);
        assert_eq!(link.theta_offset, PI);
    }

    #[test]
    fn json_round_trip() {
        let m = six_dof();
        let back = RobotModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.frames(), m.frames());
        assert_eq!(back.mask(), m.mask());
    }

    #[test]
    fn mount_rotation_params_round_trip() {
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let frames = vec![Frame {
            id: "cam".into(),
            parent: ROOT_FRAME.into(),
            kind: FrameKind::Mount(MountTransform::new([0.1, 0.2, 0.3], q, true)),
        }];
        let m = RobotModel::builder("x", frames)
            .mask(&["cam.*"])
            .build()
            .unwrap();
        let p = pack(&m);
        assert_eq!(p.len(), 6);
        let back = unpack(&m, &p).unwrap();
        assert_relative_eq!(
            back.fk(&[], "cam").unwrap(),
            m.fk(&[], "cam").unwrap(),
            epsilon = 1e-14
        );
        let p2 = pack(&back);
        for (a, b) in p.values.iter().zip(&p2.values) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn perturb_examples() {
        let m = six_dof();
        let same = perturb(&m, &Perturbation::default(), 7).unwrap();
        assert_eq!(same.frames(), m.frames());
        let mags = Perturbation {
            length: 0.005,
            angle: 0.02,
        };
        let a = perturb(&m, &mags, 11).unwrap();
        let b = perturb(&m, &mags, 11).unwrap();
        assert_eq!(a.frames(), b.frames());
        assert!(perturb(
            &m,
            &Perturbation {
                length: -1.0,
                angle: 0.0
            },
            0
        )
        .is_err());
    }

    #[test]
    fn perturb_bounded_over_many_seeds() {
        let m = six_dof();
        let mags = Perturbation {
            length: 0.005,
            angle: 0.02,
        };
        let nominal = pack(&m);
        for seed in 0..1000 {
            let p = pack(&perturb(&m, &mags, seed).unwrap());
            for i in 0..p.len() {
                let delta = p.values[i] - nominal.values[i];
                let delta = if p.class(i) == FieldClass::Angle {
                    wrap_angle(delta)
                } else {
                    delta
                };
                assert!(delta.abs() <= mags.for_class(p.class(i)) + 1e-15);
            }
        }
    }

    #[test]
    fn fk_is_invariant_to_full_turns() {
        let m = six_dof();
        let q = [0.3, -0.7, 1.1, 0.2, -1.4, 0.9];
        let base = m.fk(&q, "l6").unwrap().translation.vector;
        for j in 0..6 {
            let mut q2 = q;
            q2[j] += 2.0 * PI;
            let p = m.fk(&q2, "l6").unwrap().translation.vector;
            assert!((p - base).norm() < 1e-12);
        }
    }

    fn random_tree(seed: u64, n: usize) -> (RobotModel, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frames: Vec<Frame> = Vec::new();
        for i in 0..n {
            let parent = if i == 0 || rng.random_bool(0.2) {
                ROOT_FRAME.to_string()
            } else {
                frames[rng.random_range(0..i)].id.clone()
            };
            let kind = if rng.random_bool(0.7) {
                let joint = if rng.random_bool(0.8) {
                    JointKind::Revolute
                } else {
                    JointKind::Fixed
                };
                FrameKind::Dh(DhLink::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-PI..PI),
                    rng.random_range(-PI..PI),
                    joint,
                ))
            } else {
                let v = Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                );
                FrameKind::Mount(MountTransform::new(
                    [rng.random_range(-1.0..1.0), 0.2, -0.1],
                    UnitQuaternion::from_scaled_axis(v),
                    rng.random_bool(0.5),
                ))
            };
            frames.push(Frame {
                id: format!("f{i}"),
                parent,
                kind,
            });
        }
        let model = RobotModel::builder("tree", frames)
            .mask(&["*"])
            .build()
            .unwrap();
        let q = (0..model.n_joints())
            .map(|_| rng.random_range(-PI..PI))
            .collect();
        (model, q)
    }

    #[test]
    fn fk_composes_with_parent_for_every_frame() {
        for seed in 0..20 {
            let (model, q) = random_tree(seed, 25);
            let poses = model.frame_poses(&q).unwrap();
            for (i, f) in model.frames().iter().enumerate() {
                let parent = model.fk(&q, &f.parent).unwrap();
                let expected = parent * model.local_transform(i, &q);
                let got = model.fk(&q, &f.id).unwrap();
                assert_relative_eq!(got, expected, epsilon = 1e-12);
                assert_relative_eq!(*poses.by_index(i), got, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn pose_times_inverse_is_identity(
            t in proptest::array::uniform3(-10.0f64..10.0),
            r in proptest::array::uniform3(-3.0f64..3.0),
        ) {
            let pose = Isometry3::new(Vector3::from(t), Vector3::from(r));
            let id = pose * pose.inverse();
            prop_assert!(id.translation.vector.norm() < 1e-12);
            prop_assert!(id.rotation.angle() < 1e-12);
        }

        #[test]
        fn pack_unpack_pack_is_idempotent(seed in 0u64..500) {
            let (model, _) = random_tree(seed, 12);
            let p = pack(&model);
            let once = unpack(&model, &p).unwrap();
            let p2 = pack(&once);
            let twice = unpack(&once, &p2).unwrap();
            let p3 = pack(&twice);
            prop_assert_eq!(&p2.keys, &p.keys);
            for ((a, b), c) in p.values.iter().zip(&p2.values).zip(&p3.values) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((b - c).abs() < 1e-12);
            }
        }
    }
}
