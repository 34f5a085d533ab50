//! Chain-closure measurements and their on-disk format.
//!
//! A dataset file is JSON Lines: the first line is a header with the schema
//! version, the per-kind noise sigmas and provenance; every following line is
//! one measurement. Angles are radians, lengths meters, pixels image
//! coordinates with the origin at the top-left corner.
//!
//! ```text
//! {"schema_version":1,"sigmas":{"self_contact":0.0005,"self_observation":1.0},"provenance":{...}}
//! {"q":[...],"kind":"self_contact","a":{"marker":"L_tip"},"b":{"patch":"R_skin","taxel":5}}
//! {"q":[...],"kind":"self_observation","camera":"head_cam","marker":"R_tip","pixel":[312.5,201.25]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Issue, Result};
use crate::kinecore::RobotModel;
use crate::sensemodel::PointRef;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// The four ways of closing a kinematic chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    SelfContact,
    PlaneContact,
    SelfObservation,
    External,
}

impl Kind {
    pub const ALL: [Kind; 4] = [
        Kind::SelfContact,
        Kind::PlaneContact,
        Kind::SelfObservation,
        Kind::External,
    ];

    /// Rows contributed to the residual vector by one measurement.
    pub fn residual_dim(self) -> usize {
        match self {
            Kind::SelfContact | Kind::External => 3,
            Kind::PlaneContact => 1,
            Kind::SelfObservation => 2,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Kind::SelfContact => "sc",
            Kind::PlaneContact => "pl",
            Kind::SelfObservation => "so",
            Kind::External => "ext",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::SelfContact => "self_contact",
            Kind::PlaneContact => "plane_contact",
            Kind::SelfObservation => "self_observation",
            Kind::External => "external",
        }
    }

    /// Unit of the raw residual.
    pub fn unit(self) -> &'static str {
        match self {
            Kind::SelfObservation => "px",
            _ => "m",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL
            .into_iter()
            .find(|k| k.code() == s || k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown closure kind `{s}`")))
    }
}

/// Parses a comma-separated kind list such as `sc,so`.
pub fn parse_kinds(s: &str) -> Result<BTreeSet<Kind>> {
    let kinds = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(Kind::from_str)
        .collect::<Result<BTreeSet<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::Invalid("kind list is empty".into()));
    }
    Ok(kinds)
}

pub fn kinds_label(kinds: &BTreeSet<Kind>) -> String {
    kinds.iter().map(|k| k.code()).collect::<Vec<_>>().join("+")
}

/// Kind-specific content of a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Closure {
    /// Point `a` touches point `b`. A contact offset (m) accounts for
    /// finite fingertip size along the line between the points.
    SelfContact {
        a: PointRef,
        b: PointRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<f64>,
    },
    PlaneContact {
        point: PointRef,
        plane: String,
    },
    SelfObservation {
        camera: String,
        marker: String,
        pixel: [f64; 2],
    },
    /// `measured` is the point in the device frame.
    External {
        point: PointRef,
        device: String,
        measured: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub q: Vec<f64>,
    #[serde(flatten)]
    pub closure: Closure,
}

impl Measurement {
    pub fn kind(&self) -> Kind {
        match self.closure {
            Closure::SelfContact { .. } => Kind::SelfContact,
            Closure::PlaneContact { .. } => Kind::PlaneContact,
            Closure::SelfObservation { .. } => Kind::SelfObservation,
            Closure::External { .. } => Kind::External,
        }
    }

    fn check(&self, index: usize, model: Option<&RobotModel>, issues: &mut Vec<Issue>) {
        if self.q.iter().any(|v| !v.is_finite()) {
            issues.push(Issue::record(index, "q", "non-finite joint value"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match &self.closure {
            Closure::SelfContact {
                offset: Some(o), ..
            } if !o.is_finite() => {
                issues.push(Issue::record(index, "offset", "non-finite contact offset"))
            }
            Closure::SelfObservation { pixel, .. } if !finite(pixel) => {
                issues.push(Issue::record(index, "pixel", "non-finite pixel"))
            }
            Closure::External { measured, .. } if !finite(measured) => {
                issues.push(Issue::record(index, "measured", "non-finite point"))
            }
            _ => {}
        }
        let Some(model) = model else { return };
        if self.q.len() != model.n_joints() {
            issues.push(Issue::record(
                index,
                "q",
                format!(
                    "{} joint values, robot has {} revolute joints",
                    self.q.len(),
                    model.n_joints()
                ),
            ));
        }
        let point = |field: &str, p: &PointRef, issues: &mut Vec<Issue>| {
            if let Err(e) = p.resolve(model) {
                issues.push(Issue::record(index, field, e.to_string()));
            }
        };
        match &self.closure {
            Closure::SelfContact { a, b, .. } => {
                point("a", a, issues);
                point("b", b, issues);
            }
            Closure::PlaneContact { point: p, plane } => {
                point("point", p, issues);
                if let Err(e) = model.plane(plane) {
                    issues.push(Issue::record(index, "plane", e.to_string()));
                }
            }
            Closure::SelfObservation {
                camera,
                marker,
                pixel,
            } => {
                match model.camera(camera) {
                    Ok(cam) => {
                        if !cam.in_image(&nalgebra::Vector2::new(pixel[0], pixel[1])) {
                            issues.push(Issue::record(
                                index,
                                "pixel",
                                format!("pixel {pixel:?} outside the image of camera `{camera}`"),
                            ));
                        }
                    }
                    Err(e) => issues.push(Issue::record(index, "camera", e.to_string())),
                }
                if let Err(e) = model.marker(marker) {
                    issues.push(Issue::record(index, "marker", e.to_string()));
                }
            }
            Closure::External {
                point: p, device, ..
            } => {
                point("point", p, issues);
                if let Err(e) = model.external_device(device) {
                    issues.push(Issue::record(index, "device", e.to_string()));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    sigmas: BTreeMap<Kind, f64>,
    #[serde(default)]
    provenance: Provenance,
}

/// An ordered list of measurements with per-kind noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub measurements: Vec<Measurement>,
    /// Noise standard deviation per kind (m, or px for self-observation).
    pub sigmas: BTreeMap<Kind, f64>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        measurements: Vec<Measurement>,
        sigmas: BTreeMap<Kind, f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let d = Self {
            measurements,
            sigmas,
            provenance,
        };
        let issues = d.issues(None);
        if issues.is_empty() {
            Ok(d)
        } else {
            Err(Error::Validation(issues))
        }
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn kinds(&self) -> BTreeSet<Kind> {
        self.measurements.iter().map(Measurement::kind).collect()
    }

    pub fn count(&self, kind: Kind) -> usize {
        self.measurements
            .iter()
            .filter(|m| m.kind() == kind)
            .count()
    }

    pub fn sigma(&self, kind: Kind) -> Result<f64> {
        self.sigmas
            .get(&kind)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no sigma for kind `{}`", kind.name())))
    }

    fn issues(&self, model: Option<&RobotModel>) -> Vec<Issue> {
        let mut issues = Vec::new();
        if self.measurements.is_empty() {
            issues.push(Issue::header("measurements", "dataset must be non-empty"));
        }
        for kind in self.kinds() {
            match self.sigmas.get(&kind) {
                Some(s) if *s > 0.0 && s.is_finite() => {}
                Some(s) => issues.push(Issue::header(
                    format!("sigmas.{}", kind.name()),
                    format!("sigma must be strictly positive, got {s}"),
                )),
                None => issues.push(Issue::header(
                    format!("sigmas.{}", kind.name()),
                    "missing sigma for a kind present in the dataset",
                )),
            }
        }
        for (i, m) in self.measurements.iter().enumerate() {
            m.check(i, model, &mut issues);
        }
        issues
    }

    /// Checks every record against `model`, reporting all problems at once.
    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        let issues = self.issues(Some(model));
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(issues))
        }
    }

    fn with_measurements(&self, measurements: Vec<Measurement>) -> Self {
        Self {
            measurements,
            sigmas: self.sigmas.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps only the measurements of the given kinds.
    pub fn filter_kinds(&self, kinds: &BTreeSet<Kind>) -> Result<Self> {
        let ms: Vec<Measurement> = self
            .measurements
            .iter()
            .filter(|m| kinds.contains(&m.kind()))
            .cloned()
            .collect();
        if ms.is_empty() {
            return Err(Error::Invalid(format!(
                "no measurement of kinds {} in the dataset",
                kinds_label(kinds)
            )));
        }
        Ok(self.with_measurements(ms))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let header = Header {
            schema_version: DATASET_SCHEMA_VERSION,
            sigmas: self.sigmas.clone(),
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for m in &self.measurements {
            serde_json::to_writer(&mut *out, m)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(BufReader::new(file))
    }

    /// Parses a dataset, collecting every malformed record rather than
    /// stopping at the first.
    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines();
        let header_line = loop {
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => {
                    return Err(Error::Validation(vec![Issue::header(
                        "header",
                        "file is empty",
                    )]))
                }
            }
        };
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| Error::Validation(vec![Issue::header(field_of(&e), e.to_string())]))?;
        if header.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Validation(vec![Issue::header(
                "schema_version",
                format!("unsupported schema version {}", header.schema_version),
            )]));
        }
        let mut issues = Vec::new();
        let mut measurements = Vec::new();
        let mut index = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Measurement>(&line) {
                Ok(m) => measurements.push(m),
                Err(e) => issues.push(Issue::record(index, field_of(&e), e.to_string())),
            }
            index += 1;
        }
        let d = Self {
            measurements,
            sigmas: header.sigmas,
            provenance: header.provenance,
        };
        if issues.is_empty() {
            issues = d.issues(None);
        } else if index == 0 {
            issues.extend(d.issues(None));
        }
        if issues.is_empty() {
            Ok(d)
        } else {
            Err(Error::Validation(issues))
        }
    }
}

/// Best-effort field name from a serde error message (the first
/// backtick-quoted word).
fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).unwrap_or("record").to_string()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load(path)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.save(path)
}

/// Per-kind train sizes that sum to `floor(n * fraction)`: each kind gets
/// `floor(n_k * fraction)` and the remainder goes to the kinds with the
/// largest fractional parts (ties in kind order).
fn stratified_sizes(
    groups: &BTreeMap<Kind, Vec<usize>>,
    n: usize,
    fraction: f64,
) -> BTreeMap<Kind, usize> {
    let target = (n as f64 * fraction).floor() as usize;
    let mut sizes: BTreeMap<Kind, usize> = BTreeMap::new();
    let mut rema: Vec<(f64, Kind)> = Vec::new();
    for (&k, idx) in groups {
        let exact = idx.len() as f64 * fraction;
        let base = exact.floor() as usize;
        sizes.insert(k, base);
        rema.push((exact - base as f64, k));
    }
    let mut missing = target.saturating_sub(sizes.values().sum());
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, k) in rema {
        if missing == 0 {
            break;
        }
        let s = sizes.get_mut(&k).unwrap();
        if *s < groups[&k].len() {
            *s += 1;
            missing -= 1;
        }
    }
    sizes
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    Ok(())
}

fn groups_by_kind(d: &Dataset) -> BTreeMap<Kind, Vec<usize>> {
    let mut groups: BTreeMap<Kind, Vec<usize>> = BTreeMap::new();
    for (i, m) in d.measurements.iter().enumerate() {
        groups.entry(m.kind()).or_default().push(i);
    }
    groups
}

fn partition(d: &Dataset, train_idx: BTreeSet<usize>) -> Result<(Dataset, Dataset)> {
    let (train, test): (Vec<_>, Vec<_>) = d
        .measurements
        .iter()
        .enumerate()
        .partition(|(i, _)| train_idx.contains(i));
    let strip =
        |v: Vec<(usize, &Measurement)>| v.into_iter().map(|(_, m)| m.clone()).collect::<Vec<_>>();
    let (train, test) = (strip(train), strip(test));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Invalid(format!(
            "split of {} records leaves an empty side",
            d.len()
        )));
    }
    Ok((d.with_measurements(train), d.with_measurements(test)))
}

/// Random split stratified per kind. Record order is preserved on both
/// sides.
pub fn split(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    check_fraction(fraction)?;
    let groups = groups_by_kind(d);
    let sizes = stratified_sizes(&groups, d.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeSet::new();
    for (k, mut idx) in groups {
        idx.shuffle(&mut rng);
        train.extend(idx.into_iter().take(sizes[&k]));
    }
    partition(d, train)
}

/// Workspace split: within each kind, records are ordered by the value of
/// joint `joint` and the lower part goes to training, so the test set covers
/// a region of joint space never seen during calibration.
pub fn split_workspace(d: &Dataset, fraction: f64, joint: usize) -> Result<(Dataset, Dataset)> {
    check_fraction(fraction)?;
    if let Some(m) = d.measurements.iter().find(|m| m.q.len() <= joint) {
        return Err(Error::Invalid(format!(
            "joint {joint} out of range for a record with {} joints",
            m.q.len()
        )));
    }
    let groups = groups_by_kind(d);
    let sizes = stratified_sizes(&groups, d.len(), fraction);
    let mut train = BTreeSet::new();
    for (k, mut idx) in groups {
        idx.sort_by(|&a, &b| {
            d.measurements[a].q[joint]
                .total_cmp(&d.measurements[b].q[joint])
                .then(a.cmp(&b))
        });
        train.extend(idx.into_iter().take(sizes[&k]));
    }
    partition(d, train)
}

/// Reads External measurements from a CSV with columns `q1..qn, x, y, z`
/// (point in the device frame).
pub fn import_external_csv(
    path: impl AsRef<Path>,
    point: &PointRef,
    device: &str,
) -> Result<Vec<Measurement>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut q_cols: Vec<(usize, usize)> = Vec::new();
    let mut xyz = [None; 3];
    for (c, h) in headers.iter().enumerate() {
        match h {
            "x" => xyz[0] = Some(c),
            "y" => xyz[1] = Some(c),
            "z" => xyz[2] = Some(c),
            _ => {
                let n = h
                    .strip_prefix('q')
                    .and_then(|s| s.parse::<usize>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| Error::Invalid(format!("unexpected CSV column `{h}`")))?;
                q_cols.push((n, c));
            }
        }
    }
    q_cols.sort();
    if q_cols.iter().enumerate().any(|(i, (n, _))| *n != i + 1) {
        return Err(Error::Invalid(
            "joint columns must be q1..qn without gaps".into(),
        ));
    }
    let xyz: [usize; 3] = match xyz {
        [Some(x), Some(y), Some(z)] => [x, y, z],
        _ => return Err(Error::Invalid("CSV needs x, y and z columns".into())),
    };
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let num = |c: usize| -> Result<f64> {
            record[c].parse::<f64>().map_err(|_| {
                Error::Validation(vec![Issue::record(
                    row,
                    headers[c].to_string(),
                    "not a number",
                )])
            })
        };
        let q = q_cols
            .iter()
            .map(|&(_, c)| num(c))
            .collect::<Result<Vec<_>>>()?;
        out.push(Measurement {
            q,
            closure: Closure::External {
                point: point.clone(),
                device: device.to_string(),
                measured: [num(xyz[0])?, num(xyz[1])?, num(xyz[2])?],
            },
        });
    }
    Ok(out)
}
