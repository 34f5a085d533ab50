//! Everything that closes a kinematic chain: pinhole cameras, body points
//! (fingertips and fiducial markers), skin taxel patches, contact planes and
//! external metrology devices.
//!
//! Cameras, markers and taxel patches hang off frames of the [`RobotModel`]
//! tree. Planes and external devices live in the root frame.
//!
//! Camera frames follow the usual optical convention: `z` along the optical
//! axis, `x` to the right and `y` down, so that pixel `(0, 0)` is the
//! top-left corner of the image.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinecore::{FramePoses, RobotModel};

/// Pinhole camera without lens distortion.
///
/// A distortion model could be added as a post-projection hook on
/// [`CameraModel::project`]; nothing in the estimator depends on the
/// projection being linear in `x/z, y/z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: String,
    /// Optical frame of the camera; its mounting is the frame's transform.
    pub frame: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image size in pixels, `[width, height]`.
    pub resolution: [u32; 2],
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.resolution;
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid(format!(
                "camera `{}`: focal lengths must be positive",
                self.id
            )));
        }
        if !(self.cx >= 0.0 && self.cx <= w as f64 && self.cy >= 0.0 && self.cy <= h as f64) {
            return Err(Error::Invalid(format!(
                "camera `{}`: principal point outside the image",
                self.id
            )));
        }
        Ok(())
    }

    /// Projects a point given in camera coordinates to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(p.z > 0.0) {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Normalized ray `(x/z, y/z)` through a pixel.
    pub fn back_project(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        let [w, h] = self.resolution;
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= w as f64 && pixel.y <= h as f64
    }
}

/// A named point rigidly attached to a frame: fingertips, fiducials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerPoint {
    pub id: String,
    pub frame: String,
    pub position: [f64; 3],
    #[serde(default)]
    pub calibratable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Taxel {
    pub id: u32,
    pub position: [f64; 3],
}

/// A skin patch. Taxel positions are given in the patch frame, and the patch
/// frame is a mount frame of the robot tree (usually calibratable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxelPatch {
    pub id: String,
    pub frame: String,
    pub taxels: Vec<Taxel>,
}

impl TaxelPatch {
    /// Regular `rows x cols` grid in the patch `xy` plane, centered on the
    /// origin, with ids assigned row-major from 0.
    pub fn grid(id: &str, frame: &str, rows: u32, cols: u32, pitch: f64) -> Self {
        let x0 = -0.5 * pitch * (cols.saturating_sub(1)) as f64;
        let y0 = -0.5 * pitch * (rows.saturating_sub(1)) as f64;
        let taxels = (0..rows)
            .flat_map(|r| {
                (0..cols).map(move |c| Taxel {
                    id: r * cols + c,
                    position: [x0 + pitch * c as f64, y0 + pitch * r as f64, 0.0],
                })
            })
            .collect();
        Self {
            id: id.to_string(),
            frame: frame.to_string(),
            taxels,
        }
    }

    pub fn taxel(&self, id: u32) -> Option<&Taxel> {
        self.taxels.iter().find(|t| t.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taxels.is_empty() {
            return Err(Error::Invalid(format!(
                "taxel patch `{}` is empty",
                self.id
            )));
        }
        let mut seen = HashSet::new();
        for t in &self.taxels {
            if !seen.insert(t.id) {
                return Err(Error::Invalid(format!(
                    "taxel patch `{}`: duplicate taxel id {}",
                    self.id, t.id
                )));
            }
            if t.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "taxel {} of patch `{}`",
                    t.id, self.id
                )));
            }
        }
        Ok(())
    }
}

/// Replaces the taxels of `patches` with rows read from a CSV file with
/// columns `patch_id, taxel_id, x, y, z`. Patches not mentioned in the file
/// keep their taxels.
pub fn load_taxel_csv(path: impl AsRef<Path>, patches: &mut [TaxelPatch]) -> Result<()> {
    #[derive(Deserialize)]
    struct Row {
        patch_id: String,
        taxel_id: u32,
        x: f64,
        y: f64,
        z: f64,
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut loaded: Vec<(String, Taxel)> = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        loaded.push((
            row.patch_id,
            Taxel {
                id: row.taxel_id,
                position: [row.x, row.y, row.z],
            },
        ));
    }
    for (patch_id, _) in &loaded {
        if !patches.iter().any(|p| &p.id == patch_id) {
            return Err(Error::UnknownId {
                kind: "taxel patch",
                id: patch_id.clone(),
            });
        }
    }
    for patch in patches.iter_mut() {
        let taxels: Vec<Taxel> = loaded
            .iter()
            .filter(|(id, _)| id == &patch.id)
            .map(|(_, t)| t.clone())
            .collect();
        if !taxels.is_empty() {
            patch.taxels = taxels;
            patch.validate()?;
        }
    }
    Ok(())
}

/// Plane `{p : n . p = offset}` in the root frame, with the unit normal
/// given by azimuth/elevation so that it has exactly three free scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneParam {
    pub id: String,
    pub normal_azimuth: f64,
    pub normal_elevation: f64,
    pub offset: f64,
    #[serde(default)]
    pub calibratable: bool,
}

impl PlaneParam {
    pub fn normal(&self) -> Vector3<f64> {
        plane_normal(self.normal_azimuth, self.normal_elevation)
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal().dot(p) - self.offset
    }
}

pub fn plane_normal(azimuth: f64, elevation: f64) -> Vector3<f64> {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vector3::new(ce * ca, ce * sa, se)
}

/// External metrology device (laser tracker, motion capture) whose pose in
/// the root frame may be co-estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalDevice {
    pub id: String,
    pub translation: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub noise_sigma: f64,
    #[serde(default)]
    pub calibratable: bool,
}

impl ExternalDevice {
    pub fn pose(&self) -> Isometry3<f64> {
        let [w, x, y, z] = self.rotation;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        let [tx, ty, tz] = self.translation;
        Isometry3::from_parts(Translation3::new(tx, ty, tz), q)
    }

    pub fn set_pose(&mut self, pose: &Isometry3<f64>) {
        let t = pose.translation.vector;
        let q = pose.rotation.quaternion();
        self.translation = [t.x, t.y, t.z];
        self.rotation = [q.w, q.i, q.j, q.k];
    }

    /// Expresses a root-frame point in the device frame.
    pub fn to_device(&self, p_root: &Vector3<f64>) -> Vector3<f64> {
        self.pose()
            .inverse_transform_point(&Point3::from(*p_root))
            .coords
    }
}

/// Reference to a point on the robot body.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointRef {
    Marker { marker: String },
    Taxel { patch: String, taxel: u32 },
}

impl PointRef {
    pub fn marker(id: &str) -> Self {
        PointRef::Marker {
            marker: id.to_string(),
        }
    }

    pub fn taxel(patch: &str, taxel: u32) -> Self {
        PointRef::Taxel {
            patch: patch.to_string(),
            taxel,
        }
    }

    /// Frame the point is attached to and its position in that frame.
    pub fn resolve<'a>(&self, model: &'a RobotModel) -> Result<(&'a str, Vector3<f64>)> {
        match self {
            PointRef::Marker { marker } => {
                let m = model.marker(marker)?;
                Ok((m.frame.as_str(), Vector3::from(m.position)))
            }
            PointRef::Taxel { patch, taxel } => {
                let p = model.taxel_patch(patch)?;
                let t = p.taxel(*taxel).ok_or_else(|| Error::UnknownId {
                    kind: "taxel",
                    id: format!("{patch}/{taxel}"),
                })?;
                Ok((p.frame.as_str(), Vector3::from(t.position)))
            }
        }
    }
}

impl std::fmt::Display for PointRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PointRef::Marker { marker } => write!(f, "{marker}"),
            PointRef::Taxel { patch, taxel } => write!(f, "{patch}/{taxel}"),
        }
    }
}

/// Root-frame position of a body point for precomputed frame poses.
pub fn point_world(
    model: &RobotModel,
    poses: &FramePoses,
    point: &PointRef,
) -> Result<Vector3<f64>> {
    let (frame, local) = point.resolve(model)?;
    let pose = poses.get(model, frame)?;
    Ok(pose.transform_point(&Point3::from(local)).coords)
}

/// Root-frame position of one taxel at configuration `q`.
pub fn taxel_world(model: &RobotModel, q: &[f64], patch: &str, taxel: u32) -> Result<Vector3<f64>> {
    let poses = model.frame_poses(q)?;
    point_world(model, &poses, &PointRef::taxel(patch, taxel))
}
