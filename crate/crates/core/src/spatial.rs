//! 6D spatial vectors and frame transforms.
//!
//! Velocities are stacked linear-first, `V = [v; w]`, and wrenches force-first,
//! `F = [f; m]`. A [`FrameTransform`] from a parent frame `A` to a child frame
//! `B` carries the 6x6 matrix
//!
//! ```text
//!        | R        0 |
//! U_AB = |            |
//!        | [r]x R   R |
//! ```
//!
//! where `R` rotates child coordinates into the parent and `r` points from the
//! parent origin to the child origin, expressed in the parent. Velocities move
//! towards the child with `U^T`, wrenches move towards the parent with `U`, and
//! the pair preserves power: `<v_A, U f_B> = <U^T v_A, f_B>`.

use std::fmt;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Tolerance on `R^T R - I` and `det R - 1` when building a transform.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Identifier of a frame in the serial chain.
///
/// `T(0)` is the ground frame. Body `i` (1-based) owns the frame `B(i)` at its
/// driving joint and `T(i)` at its distal cutting point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    B(u8),
    T(u8),
}

impl Frame {
    pub const GROUND: Frame = Frame::T(0);
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frame::B(i) => write!(f, "B{i}"),
            Frame::T(i) => write!(f, "T{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpatialError {
    #[error("frame mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("rotation is not orthonormal (deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
}

fn check_frame(expected: Frame, found: Frame) -> Result<(), SpatialError> {
    if expected == found {
        Ok(())
    } else {
        Err(SpatialError::FrameMismatch { expected, found })
    }
}

/// Skew-symmetric cross-product matrix: `skew(r) * x == r.cross(&x)`.
pub fn skew(r: &Vec3) -> Mat3 {
    Mat3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

/// Motion cross-product operator `crm(V)` so that `crm(V) * W = V x W`.
pub fn crm(v: &Vec6) -> Mat6 {
    let lin = skew(&v.fixed_rows::<3>(0).into_owned());
    let ang = skew(&v.fixed_rows::<3>(3).into_owned());
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ang);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&lin);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ang);
    out
}

/// Force cross-product operator, `crf(V) = -crm(V)^T`.
pub fn crf(v: &Vec6) -> Mat6 {
    -crm(v).transpose()
}

/// Twist of a frame, expressed in that frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialVelocity {
    pub linear: Vec3,
    pub angular: Vec3,
    pub frame: Frame,
}

impl SpatialVelocity {
    pub fn new(linear: Vec3, angular: Vec3, frame: Frame) -> Self {
        Self {
            linear,
            angular,
            frame,
        }
    }

    pub fn zero(frame: Frame) -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros(), frame)
    }

    pub fn from_vec6(v: &Vec6, frame: Frame) -> Self {
        Self::new(
            v.fixed_rows::<3>(0).into_owned(),
            v.fixed_rows::<3>(3).into_owned(),
            frame,
        )
    }

    pub fn to_vec6(&self) -> Vec6 {
        Vec6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    /// Instantaneous power `<V, F>`; both must live in the same frame.
    pub fn power(&self, force: &SpatialForce) -> Result<f64, SpatialError> {
        check_frame(self.frame, force.frame)?;
        Ok(self.linear.dot(&force.force) + self.angular.dot(&force.moment))
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec6().iter().all(|x| x.is_finite())
    }
}

/// Wrench acting on a frame, expressed in that frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialForce {
    pub force: Vec3,
    pub moment: Vec3,
    pub frame: Frame,
}

impl SpatialForce {
    pub fn new(force: Vec3, moment: Vec3, frame: Frame) -> Self {
        Self {
            force,
            moment,
            frame,
        }
    }

    pub fn zero(frame: Frame) -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros(), frame)
    }

    pub fn from_vec6(f: &Vec6, frame: Frame) -> Self {
        Self::new(
            f.fixed_rows::<3>(0).into_owned(),
            f.fixed_rows::<3>(3).into_owned(),
            frame,
        )
    }

    pub fn to_vec6(&self) -> Vec6 {
        Vec6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec6().iter().all(|x| x.is_finite())
    }
}

/// Rigid transform between two frames of the chain, with its cached 6x6 `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTransform {
    rotation: Mat3,
    offset: Vec3,
    parent: Frame,
    child: Frame,
    u: Mat6,
}

fn assemble_u(rotation: &Mat3, offset: &Vec3) -> Mat6 {
    let mut u = Mat6::zeros();
    u.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    u.fixed_view_mut::<3, 3>(3, 3).copy_from(rotation);
    u.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(skew(offset) * rotation));
    u
}

/// Largest deviation of `R` from a proper rotation.
pub fn orthonormality_error(rotation: &Mat3) -> f64 {
    let gram = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
    gram.max((rotation.determinant() - 1.0).abs())
}

/// Builds `U_AB` from the rotation `R_AB` and the offset `r_AB` (in `A`).
pub fn make_transform(
    rotation: Mat3,
    offset: Vec3,
    parent: Frame,
    child: Frame,
) -> Result<FrameTransform, SpatialError> {
    let deviation = orthonormality_error(&rotation);
    if !(deviation <= ORTHONORMAL_TOL) {
        return Err(SpatialError::NotOrthonormal { deviation });
    }
    Ok(FrameTransform::from_parts_unchecked(
        rotation, offset, parent, child,
    ))
}

impl FrameTransform {
    pub(crate) fn from_parts_unchecked(
        rotation: Mat3,
        offset: Vec3,
        parent: Frame,
        child: Frame,
    ) -> Self {
        let u = assemble_u(&rotation, &offset);
        Self {
            rotation,
            offset,
            parent,
            child,
            u,
        }
    }

    pub fn identity(parent: Frame, child: Frame) -> Self {
        Self::from_parts_unchecked(Mat3::identity(), Vec3::zeros(), parent, child)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn offset(&self) -> &Vec3 {
        &self.offset
    }

    pub fn parent(&self) -> Frame {
        self.parent
    }

    pub fn child(&self) -> Frame {
        self.child
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.u
    }

    /// `V_child = U^T V_parent`.
    pub fn velocity_to_child(
        &self,
        v_parent: &SpatialVelocity,
    ) -> Result<SpatialVelocity, SpatialError> {
        check_frame(self.parent, v_parent.frame)?;
        Ok(SpatialVelocity::from_vec6(
            &self.motion_to_child(&v_parent.to_vec6()),
            self.child,
        ))
    }

    /// `F_parent = U F_child`.
    pub fn force_to_parent(
        &self,
        f_child: &SpatialForce,
    ) -> Result<SpatialForce, SpatialError> {
        check_frame(self.child, f_child.frame)?;
        Ok(SpatialForce::from_vec6(
            &self.wrench_to_parent(&f_child.to_vec6()),
            self.parent,
        ))
    }

    /// Untagged `U^T v`, used inside the chain recursions.
    pub fn motion_to_child(&self, v: &Vec6) -> Vec6 {
        let lin = v.fixed_rows::<3>(0).into_owned();
        let ang = v.fixed_rows::<3>(3).into_owned();
        let rt = self.rotation.transpose();
        let lin_c = rt * (lin + ang.cross(&self.offset));
        let ang_c = rt * ang;
        Vec6::new(lin_c.x, lin_c.y, lin_c.z, ang_c.x, ang_c.y, ang_c.z)
    }

    /// Untagged `U f`.
    pub fn wrench_to_parent(&self, f: &Vec6) -> Vec6 {
        let force = self.rotation * f.fixed_rows::<3>(0).into_owned();
        let moment = self.offset.cross(&force) + self.rotation * f.fixed_rows::<3>(3).into_owned();
        Vec6::new(force.x, force.y, force.z, moment.x, moment.y, moment.z)
    }

    pub fn inverse(&self) -> FrameTransform {
        let rt = self.rotation.transpose();
        FrameTransform::from_parts_unchecked(rt, -(rt * self.offset), self.child, self.parent)
    }
}

/// `U_ac = U_ab U_bc`; the middle frames must agree.
pub fn compose(
    u_ab: &FrameTransform,
    u_bc: &FrameTransform,
) -> Result<FrameTransform, SpatialError> {
    check_frame(u_ab.child, u_bc.parent)?;
    Ok(FrameTransform::from_parts_unchecked(
        u_ab.rotation * u_bc.rotation,
        u_ab.offset + u_ab.rotation * u_bc.offset,
        u_ab.parent,
        u_bc.child,
    ))
}

/// Rotation by `angle` about a unit coordinate axis (0 = x, 1 = y, 2 = z).
pub fn axis_rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    match axis {
        0 => Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        1 => Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        2 => Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        _ => panic!("axis index {axis} out of range"),
    }
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`, angles in radians.
pub fn rpy_rotation(roll: f64, pitch: f64, yaw: f64) -> Mat3 {
    axis_rotation(2, yaw) * axis_rotation(1, pitch) * axis_rotation(0, roll)
}
