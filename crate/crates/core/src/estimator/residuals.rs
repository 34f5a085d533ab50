//! Raw (unweighted) residuals of the four closure kinds, in native units.

use nalgebra::{DVector, Point3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::kinecore::{FramePoses, RobotModel};
use crate::measurements::{Closure, Kind, Measurement};
use crate::sensemodel::{point_world, PointRef};

fn wrong_kind(expected: Kind, m: &Measurement) -> Error {
    Error::Invalid(format!(
        "expected a {} measurement, got {}",
        expected.name(),
        m.kind().name()
    ))
}

/// `p_a - p_b - offset * u` with `u` the unit vector from `p_b` to `p_a`.
/// The offset is ignored when the points coincide.
pub fn self_contact(
    model: &RobotModel,
    poses: &FramePoses,
    a: &PointRef,
    b: &PointRef,
    offset: Option<f64>,
) -> Result<Vector3<f64>> {
    let d = point_world(model, poses, a)? - point_world(model, poses, b)?;
    match offset {
        Some(o) if o != 0.0 => {
            let n = d.norm();
            if n > 0.0 {
                Ok(d - d * (o / n))
            } else {
                Ok(d)
            }
        }
        _ => Ok(d),
    }
}

/// Signed distance of the point from the plane, `n . p - offset`.
pub fn plane(model: &RobotModel, poses: &FramePoses, point: &PointRef, plane: &str) -> Result<f64> {
    let p = point_world(model, poses, point)?;
    Ok(model.plane(plane)?.signed_distance(&p))
}

/// Reprojection error `project(camera, marker) - observed`, in pixels.
pub fn projection(
    model: &RobotModel,
    poses: &FramePoses,
    camera: &str,
    marker: &str,
    observed: &[f64; 2],
) -> Result<Vector2<f64>> {
    let cam = model.camera(camera)?;
    let p = point_world(model, poses, &PointRef::marker(marker))?;
    let cam_pose = poses.get(model, &cam.frame)?;
    let pc = cam_pose.inverse_transform_point(&Point3::from(p)).coords;
    Ok(cam.project(&pc)? - Vector2::from(*observed))
}

/// Point predicted in the device frame minus the measured point.
pub fn external(
    model: &RobotModel,
    poses: &FramePoses,
    point: &PointRef,
    device: &str,
    measured: &[f64; 3],
) -> Result<Vector3<f64>> {
    let p = point_world(model, poses, point)?;
    Ok(model.external_device(device)?.to_device(&p) - Vector3::from(*measured))
}

/// Raw residual of any measurement kind.
pub fn residual(model: &RobotModel, m: &Measurement) -> Result<DVector<f64>> {
    let poses = model.frame_poses(&m.q)?;
    residual_with_poses(model, &poses, m)
}

pub(crate) fn residual_with_poses(
    model: &RobotModel,
    poses: &FramePoses,
    m: &Measurement,
) -> Result<DVector<f64>> {
    Ok(match &m.closure {
        Closure::SelfContact { a, b, offset } => {
            DVector::from_column_slice(self_contact(model, poses, a, b, *offset)?.as_slice())
        }
        Closure::PlaneContact { point, plane: id } => {
            DVector::from_element(1, plane(model, poses, point, id)?)
        }
        Closure::SelfObservation {
            camera,
            marker,
            pixel,
        } => {
            DVector::from_column_slice(projection(model, poses, camera, marker, pixel)?.as_slice())
        }
        Closure::External {
            point,
            device,
            measured,
        } => {
            DVector::from_column_slice(external(model, poses, point, device, measured)?.as_slice())
        }
    })
}

pub fn residual_self_contact(model: &RobotModel, m: &Measurement) -> Result<Vector3<f64>> {
    match &m.closure {
        Closure::SelfContact { a, b, offset } => {
            self_contact(model, &model.frame_poses(&m.q)?, a, b, *offset)
        }
        _ => Err(wrong_kind(Kind::SelfContact, m)),
    }
}

pub fn residual_plane(model: &RobotModel, m: &Measurement) -> Result<f64> {
    match &m.closure {
        Closure::PlaneContact { point, plane: id } => {
            plane(model, &model.frame_poses(&m.q)?, point, id)
        }
        _ => Err(wrong_kind(Kind::PlaneContact, m)),
    }
}

pub fn residual_projection(model: &RobotModel, m: &Measurement) -> Result<Vector2<f64>> {
    match &m.closure {
        Closure::SelfObservation {
            camera,
            marker,
            pixel,
        } => projection(model, &model.frame_poses(&m.q)?, camera, marker, pixel),
        _ => Err(wrong_kind(Kind::SelfObservation, m)),
    }
}

pub fn residual_external(model: &RobotModel, m: &Measurement) -> Result<Vector3<f64>> {
    match &m.closure {
        Closure::External {
            point,
            device,
            measured,
        } => external(model, &model.frame_poses(&m.q)?, point, device, measured),
        _ => Err(wrong_kind(Kind::External, m)),
    }
}
