//! The serial chain: frames, velocity and force sweeps, and the joint-space
//! plant used for simulation.
//!
//! Joint `i` connects frame `T(i-1)` (distal end of body `i-1`, or the ground
//! for `i = 1`) to `B(i)`. The transform `T(i-1) -> B(i)` is a fixed rotation
//! and offset followed by the joint rotation `q_i` about the selector axis
//! `mu_i`, so `V_Bi = U^T V_T(i-1) + mu_i qdot_i`. Body `i` then carries a fixed
//! transform `B(i) -> T(i)` to its distal cutting point.
//!
//! Every body holds the robot link and the overlapping human arm segment; the
//! plant uses the summed (augmented) parameters, and each joint adds the motor
//! inertia plus the human joint inertia on the diagonal.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::body::{dynamics_terms_unchecked, spatial_inertia, BodyError, InertialParams};
use crate::spatial::{
    axis_rotation, crm, make_transform, orthonormality_error, Frame, FrameTransform, Mat3,
    Mat6, SpatialError, SpatialForce, SpatialVelocity, Vec3, Vec6, ORTHONORMAL_TOL,
};

pub const STANDARD_GRAVITY: f64 = 9.81;

pub fn world_gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -STANDARD_GRAVITY)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("body {body}: {source}")]
    Body { body: usize, source: BodyError },
    #[error("{what}: expected {expected} entries, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("joint {joint}: {what} must be positive, got {value}")]
    NonPositive {
        joint: usize,
        what: &'static str,
        value: f64,
    },
    #[error("joint-space inertia is singular")]
    SingularInertia,
    #[error("unknown frame {0}")]
    UnknownFrame(Frame),
}

/// Joint axis selector, expressed in the joint's `B` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointAxis {
    X,
    Y,
    Z,
}

impl JointAxis {
    pub fn index(self) -> usize {
        match self {
            JointAxis::X => 0,
            JointAxis::Y => 1,
            JointAxis::Z => 2,
        }
    }

    /// The 6-vector `mu` picking the angular component about this axis.
    pub fn selector(self) -> Vec6 {
        let mut mu = Vec6::zeros();
        mu[3 + self.index()] = 1.0;
        mu
    }

    pub fn unit(self) -> Vec3 {
        let mut e = Vec3::zeros();
        e[self.index()] = 1.0;
        e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGeometry {
    pub axis: JointAxis,
    /// Fixed rotation from `T(i-1)` to the zero-angle `B(i)`.
    pub pre_rotation: Mat3,
    /// Origin of `B(i)` in `T(i-1)`.
    pub offset: Vec3,
    pub link_rotation: Mat3,
    /// Origin of `T(i)` in `B(i)`.
    pub link_offset: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyInertia {
    pub robot: InertialParams,
    pub human: InertialParams,
}

impl BodyInertia {
    pub fn augmented(&self) -> InertialParams {
        self.robot + self.human
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainGeometry {
    joints: Vec<JointGeometry>,
    bodies: Vec<BodyInertia>,
    motor_inertia: Vec<f64>,
    human_joint_inertia: Vec<f64>,
    gravity: Vec3,
    augmented: Vec<InertialParams>,
    spatial_inertia: Vec<Mat6>,
    link: Vec<FrameTransform>,
}

impl ChainGeometry {
    pub fn new(
        joints: Vec<JointGeometry>,
        bodies: Vec<BodyInertia>,
        motor_inertia: Vec<f64>,
        human_joint_inertia: Vec<f64>,
        gravity: Vec3,
    ) -> Result<Self, ChainError> {
        let n = joints.len();
        for (what, found) in [
            ("bodies", bodies.len()),
            ("motor inertia", motor_inertia.len()),
            ("human joint inertia", human_joint_inertia.len()),
        ] {
            if found != n {
                return Err(ChainError::Length {
                    what,
                    expected: n,
                    found,
                });
            }
        }
        let mut link = Vec::with_capacity(n);
        for (i, j) in joints.iter().enumerate() {
            let dev = orthonormality_error(&j.pre_rotation);
            if !(dev <= ORTHONORMAL_TOL) {
                return Err(SpatialError::NotOrthonormal { deviation: dev }.into());
            }
            let k = (i + 1) as u8;
            link.push(make_transform(
                j.link_rotation,
                j.link_offset,
                Frame::B(k),
                Frame::T(k),
            )?);
        }
        for i in 0..n {
            let total = motor_inertia[i] + human_joint_inertia[i];
            if !(motor_inertia[i] >= 0.0 && human_joint_inertia[i] >= 0.0 && total > 0.0) {
                return Err(ChainError::NonPositive {
                    joint: i + 1,
                    what: "joint inertia",
                    value: total,
                });
            }
        }
        let augmented: Vec<InertialParams> = bodies.iter().map(BodyInertia::augmented).collect();
        for (i, b) in bodies.iter().enumerate() {
            for phi in [&b.robot, &b.human, &augmented[i]] {
                let l = crate::body::phi_to_pseudo(phi);
                if !l.is_positive_definite() {
                    return Err(ChainError::Body {
                        body: i + 1,
                        source: BodyError::NotPositiveDefinite {
                            min_eigenvalue: l.min_eigenvalue(),
                        },
                    });
                }
            }
        }
        let spatial_inertia = augmented.iter().map(spatial_inertia).collect();
        Ok(Self {
            joints,
            bodies,
            motor_inertia,
            human_joint_inertia,
            gravity,
            augmented,
            spatial_inertia,
            link,
        })
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointGeometry] {
        &self.joints
    }

    pub fn bodies(&self) -> &[BodyInertia] {
        &self.bodies
    }

    pub fn gravity(&self) -> &Vec3 {
        &self.gravity
    }

    pub fn with_gravity(mut self, gravity: Vec3) -> Self {
        self.gravity = gravity;
        self
    }

    pub fn selector(&self, i: usize) -> Vec6 {
        self.joints[i].axis.selector()
    }

    /// Augmented (robot + human) parameters of body `i` (0-based).
    pub fn augmented_params(&self, i: usize) -> &InertialParams {
        &self.augmented[i]
    }

    /// Motor plus human joint inertia of joint `i` (0-based).
    pub fn joint_inertia(&self, i: usize) -> f64 {
        self.motor_inertia[i] + self.human_joint_inertia[i]
    }

    pub fn kinematics(&self, q: &DVector<f64>) -> Kinematics {
        assert_eq!(q.len(), self.dof(), "joint vector length");
        let n = self.dof();
        let mut joint = Vec::with_capacity(n);
        let mut rot_b = Vec::with_capacity(n);
        let mut pos_b = Vec::with_capacity(n);
        let mut rot_t = vec![Mat3::identity()];
        let mut pos_t = vec![Vec3::zeros()];
        for (i, jg) in self.joints.iter().enumerate() {
            let k = (i + 1) as u8;
            let r = jg.pre_rotation * axis_rotation(jg.axis.index(), q[i]);
            joint.push(FrameTransform::from_parts_unchecked(
                r,
                jg.offset,
                Frame::T(k - 1),
                Frame::B(k),
            ));
            let rb = rot_t[i] * r;
            let pb = pos_t[i] + rot_t[i] * jg.offset;
            rot_t.push(rb * jg.link_rotation);
            pos_t.push(pb + rb * jg.link_offset);
            rot_b.push(rb);
            pos_b.push(pb);
        }
        Kinematics {
            joint,
            link: self.link.clone(),
            rot_b,
            pos_b,
            rot_t,
            pos_t,
        }
    }

    /// World gravity expressed in every body frame `B(i)`.
    pub fn gravity_in_bodies(&self, kin: &Kinematics) -> Vec<Vec3> {
        kin.rot_b.iter().map(|r| r.transpose() * self.gravity).collect()
    }
}

/// Joint positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl ChainState {
    pub fn zeros(n: usize) -> Self {
        Self {
            q: DVector::zeros(n),
            qdot: DVector::zeros(n),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|x| x.is_finite())
    }
}

/// Configuration-dependent transforms and world poses of every frame.
#[derive(Debug, Clone)]
pub struct Kinematics {
    /// `T(i-1) -> B(i)`.
    pub joint: Vec<FrameTransform>,
    /// `B(i) -> T(i)`.
    pub link: Vec<FrameTransform>,
    pub rot_b: Vec<Mat3>,
    pub pos_b: Vec<Vec3>,
    /// Includes the ground frame at index 0.
    pub rot_t: Vec<Mat3>,
    pub pos_t: Vec<Vec3>,
}

impl Kinematics {
    /// Matrix of `U_{B(i) B(i+1)}`, mapping child wrenches into `B(i)` (0-based `i`).
    pub fn body_to_child(&self, i: usize) -> Mat6 {
        self.link[i].matrix() * self.joint[i + 1].matrix()
    }
}

/// Velocities of all frames: `body[i]` is `B(i+1)`, `tip[j]` is `T(j)` with
/// `tip[0]` the ground.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVelocities {
    pub body: Vec<SpatialVelocity>,
    pub tip: Vec<SpatialVelocity>,
}

/// Wrenches of all frames, same indexing as [`FrameVelocities`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameForces {
    pub body: Vec<SpatialForce>,
    pub tip: Vec<SpatialForce>,
}

pub fn forward_velocities(
    geom: &ChainGeometry,
    kin: &Kinematics,
    qdot: &DVector<f64>,
    v_base: &SpatialVelocity,
) -> Result<FrameVelocities, ChainError> {
    let n = geom.dof();
    if v_base.frame != Frame::GROUND {
        return Err(SpatialError::FrameMismatch {
            expected: Frame::GROUND,
            found: v_base.frame,
        }
        .into());
    }
    let mut body = Vec::with_capacity(n);
    let mut tip = Vec::with_capacity(n + 1);
    tip.push(*v_base);
    for i in 0..n {
        let through = kin.joint[i].velocity_to_child(&tip[i])?;
        let vb = SpatialVelocity::from_vec6(
            &(through.to_vec6() + geom.selector(i) * qdot[i]),
            through.frame,
        );
        tip.push(kin.link[i].velocity_to_child(&vb)?);
        body.push(vb);
    }
    Ok(FrameVelocities { body, tip })
}

/// Same sweep driven by required joint velocities.
pub fn forward_required_velocities(
    geom: &ChainGeometry,
    kin: &Kinematics,
    qdot_r: &DVector<f64>,
    v_base_r: &SpatialVelocity,
) -> Result<FrameVelocities, ChainError> {
    forward_velocities(geom, kin, qdot_r, v_base_r)
}

/// Time derivative of a velocity sweep, in body coordinates.
///
/// `swept` is the sweep being differentiated (measured or required),
/// `qdot` the measured joint rates that move the frames, and `rate` the
/// derivative of the joint rates that drove `swept`.
pub fn forward_accelerations(
    geom: &ChainGeometry,
    kin: &Kinematics,
    qdot: &DVector<f64>,
    swept: &FrameVelocities,
    rate: &DVector<f64>,
    a_base: &Vec6,
) -> Vec<Vec6> {
    let n = geom.dof();
    let mut out = Vec::with_capacity(n);
    let mut a_tip = *a_base;
    for i in 0..n {
        let mu = geom.selector(i);
        let carried = kin.joint[i].motion_to_child(&swept.tip[i].to_vec6());
        let a = kin.joint[i].motion_to_child(&a_tip) - crm(&(mu * qdot[i])) * carried + mu * rate[i];
        a_tip = kin.link[i].motion_to_child(&a);
        out.push(a);
    }
    out
}

/// `F_Bj = U_BjTj F_Tj + F*_j`, `F_T(j-1) = U_T(j-1)Bj F_Bj`, for `j = n..1`.
pub fn backward_forces(
    geom: &ChainGeometry,
    kin: &Kinematics,
    net: &[SpatialForce],
    f_tip: &SpatialForce,
) -> Result<FrameForces, ChainError> {
    let n = geom.dof();
    if net.len() != n {
        return Err(ChainError::Length {
            what: "net wrenches",
            expected: n,
            found: net.len(),
        });
    }
    let last = Frame::T(n as u8);
    if f_tip.frame != last {
        return Err(SpatialError::FrameMismatch {
            expected: last,
            found: f_tip.frame,
        }
        .into());
    }
    let mut body = vec![SpatialForce::zero(Frame::GROUND); n];
    let mut tip = vec![SpatialForce::zero(Frame::GROUND); n + 1];
    tip[n] = *f_tip;
    for j in (0..n).rev() {
        let carried = kin.link[j].force_to_parent(&tip[j + 1])?;
        if net[j].frame != carried.frame {
            return Err(SpatialError::FrameMismatch {
                expected: carried.frame,
                found: net[j].frame,
            }
            .into());
        }
        let fb = SpatialForce::from_vec6(&(carried.to_vec6() + net[j].to_vec6()), carried.frame);
        tip[j] = kin.joint[j].force_to_parent(&fb)?;
        body[j] = fb;
    }
    Ok(FrameForces { body, tip })
}

pub fn backward_required_forces(
    geom: &ChainGeometry,
    kin: &Kinematics,
    net_r: &[SpatialForce],
    f_tip_r: &SpatialForce,
) -> Result<FrameForces, ChainError> {
    backward_forces(geom, kin, net_r, f_tip_r)
}

pub fn gravity_direction_in_frame(
    geom: &ChainGeometry,
    state: &ChainState,
    frame: Frame,
) -> Result<Vec3, ChainError> {
    let kin = geom.kinematics(&state.q);
    let n = geom.dof();
    let rot = match frame {
        Frame::B(i) if (1..=n).contains(&(i as usize)) => kin.rot_b[i as usize - 1],
        Frame::T(i) if (i as usize) <= n => kin.rot_t[i as usize],
        _ => return Err(ChainError::UnknownFrame(frame)),
    };
    Ok(rot.transpose() * geom.gravity)
}

/// Net wrenches `F*_i = M_i A_i + C_i(V_i) V_i + G_i + F_d,i` of the augmented bodies.
pub fn net_body_wrenches(
    geom: &ChainGeometry,
    kin: &Kinematics,
    vel: &FrameVelocities,
    accel: &[Vec6],
    dist: &[Vec6],
) -> Vec<SpatialForce> {
    let g = geom.gravity_in_bodies(kin);
    (0..geom.dof())
        .map(|i| {
            let v = vel.body[i].to_vec6();
            let t = dynamics_terms_unchecked(&geom.augmented[i], &v, &g[i]);
            SpatialForce::from_vec6(&(t.wrench(&accel[i], &v) + dist[i]), vel.body[i].frame)
        })
        .collect()
}

/// Joint torques that realise `qddot`: `tau = mu^T F_B + I qddot + tau_h`.
pub fn inverse_dynamics(
    geom: &ChainGeometry,
    state: &ChainState,
    qddot: &DVector<f64>,
    dist: &[Vec6],
    tau_h: &DVector<f64>,
) -> Result<DVector<f64>, ChainError> {
    let kin = geom.kinematics(&state.q);
    let forces = link_forces(geom, &kin, state, qddot, dist)?;
    let n = geom.dof();
    Ok(DVector::from_fn(n, |i, _| {
        geom.selector(i).dot(&forces.body[i].to_vec6()) + geom.joint_inertia(i) * qddot[i] + tau_h[i]
    }))
}

fn link_forces(
    geom: &ChainGeometry,
    kin: &Kinematics,
    state: &ChainState,
    qddot: &DVector<f64>,
    dist: &[Vec6],
) -> Result<FrameForces, ChainError> {
    let n = geom.dof();
    if dist.len() != n {
        return Err(ChainError::Length {
            what: "disturbance wrenches",
            expected: n,
            found: dist.len(),
        });
    }
    let vel = forward_velocities(geom, kin, &state.qdot, &SpatialVelocity::zero(Frame::GROUND))?;
    let acc = forward_accelerations(geom, kin, &state.qdot, &vel, qddot, &Vec6::zeros());
    let net = net_body_wrenches(geom, kin, &vel, &acc, dist);
    backward_forces(geom, kin, &net, &SpatialForce::zero(Frame::T(n as u8)))
}

/// Velocity-product (Coriolis and centripetal) joint torques `c(q, qdot)`,
/// without gravity, joint inertia or external loads.
pub fn velocity_product_torques(geom: &ChainGeometry, state: &ChainState) -> DVector<f64> {
    let n = geom.dof();
    let kin = geom.kinematics(&state.q);
    let vel = forward_velocities(geom, &kin, &state.qdot, &SpatialVelocity::zero(Frame::GROUND))
        .expect("ground frame");
    let acc = forward_accelerations(geom, &kin, &state.qdot, &vel, &DVector::zeros(n), &Vec6::zeros());
    let net: Vec<SpatialForce> = (0..n)
        .map(|i| {
            let v = vel.body[i].to_vec6();
            let t = dynamics_terms_unchecked(&geom.augmented[i], &v, &Vec3::zeros());
            SpatialForce::from_vec6(&(t.mass * acc[i] + t.coriolis * v), vel.body[i].frame)
        })
        .collect();
    let f = backward_forces(geom, &kin, &net, &SpatialForce::zero(Frame::T(n as u8))).expect("frames");
    DVector::from_fn(n, |i, _| geom.selector(i).dot(&f.body[i].to_vec6()))
}

/// Joint-space inertia by composite rigid bodies, motor and human joint
/// inertia included on the diagonal.
pub fn mass_matrix(geom: &ChainGeometry, kin: &Kinematics) -> DMatrix<f64> {
    let n = geom.dof();
    let mut composite: Vec<Mat6> = geom.spatial_inertia.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        let x = kin.body_to_child(i);
        let child = x * composite[i + 1] * x.transpose();
        composite[i] += child;
    }
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut f = composite[i] * geom.selector(i);
        h[(i, i)] = geom.selector(i).dot(&f) + geom.joint_inertia(i);
        for j in (0..i).rev() {
            f = kin.body_to_child(j) * f;
            let hij = geom.selector(j).dot(&f);
            h[(i, j)] = hij;
            h[(j, i)] = hij;
        }
    }
    h
}

/// Joint accelerations of the augmented chain under the applied torque,
/// per-body disturbance wrenches `F_d` (in `B(i)`) and human joint torque.
pub fn plant_forward_dynamics(
    geom: &ChainGeometry,
    state: &ChainState,
    tau_applied: &DVector<f64>,
    dist: &[Vec6],
    tau_h: &DVector<f64>,
) -> Result<DVector<f64>, ChainError> {
    let n = geom.dof();
    let kin = geom.kinematics(&state.q);
    let forces = link_forces(geom, &kin, state, &DVector::zeros(n), dist)?;
    let rhs = DVector::from_fn(n, |i, _| {
        tau_applied[i] - tau_h[i] - geom.selector(i).dot(&forces.body[i].to_vec6())
    });
    let h = mass_matrix(geom, &kin);
    let chol = h.cholesky().ok_or(ChainError::SingularInertia)?;
    Ok(chol.solve(&rhs))
}

/// Kinetic plus gravitational potential energy of the augmented chain.
pub fn mechanical_energy(geom: &ChainGeometry, state: &ChainState) -> f64 {
    let kin = geom.kinematics(&state.q);
    let vel = forward_velocities(geom, &kin, &state.qdot, &SpatialVelocity::zero(Frame::GROUND))
        .expect("ground frame");
    let mut e = 0.0;
    for i in 0..geom.dof() {
        let v = vel.body[i].to_vec6();
        e += 0.5 * v.dot(&(geom.spatial_inertia[i] * v));
        e += 0.5 * geom.joint_inertia(i) * state.qdot[i].powi(2);
        let phi = &geom.augmented[i];
        let com_moment = kin.pos_b[i] * phi.mass() + kin.rot_b[i] * phi.first_moment();
        e -= geom.gravity.dot(&com_moment);
    }
    e
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::body::testutil::random_vec6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> ChainState {
        ChainState {
            q: DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5)),
            qdot: DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
        }
    }

    fn ground() -> SpatialVelocity {
        SpatialVelocity::zero(Frame::GROUND)
    }

    #[test]
    fn zero_rates_give_zero_velocities() {
        let geom = test_chain();
        let kin = geom.kinematics(&DVector::from_element(7, 0.3));
        let v = forward_velocities(&geom, &kin, &DVector::zeros(7), &ground()).unwrap();
        assert!(v.body.iter().chain(v.tip.iter()).all(|x| x.to_vec6() == Vec6::zeros()));
        let vr = forward_required_velocities(&geom, &kin, &DVector::zeros(7), &ground()).unwrap();
        assert_eq!(v, vr);
    }

    #[test]
    fn first_joint_rate_appears_on_b1_z() {
        let geom = test_chain();
        let kin = geom.kinematics(&DVector::zeros(7));
        let mut qdot = DVector::zeros(7);
        qdot[0] = 1.0;
        let v = forward_velocities(&geom, &kin, &qdot, &ground()).unwrap();
        assert_eq!(v.body[0].angular.z, 1.0);
        assert_eq!(v.body[0].frame, Frame::B(1));
        assert_eq!(v.tip[7].frame, Frame::T(7));
    }

    #[test]
    fn base_velocity_must_be_in_ground_frame() {
        let geom = test_chain();
        let kin = geom.kinematics(&DVector::zeros(7));
        let err = forward_velocities(&geom, &kin, &DVector::zeros(7), &SpatialVelocity::zero(Frame::B(1)));
        assert!(err.is_err());
    }

    #[test]
    fn kinematics_world_poses_match_homogeneous_products() {
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = random_state(&mut rng, 7);
            let kin = geom.kinematics(&s.q);
            for (i, (r, p)) in world_body_poses(&geom, &s.q).into_iter().enumerate() {
                assert!((kin.rot_b[i] - r).abs().max() < 1e-12);
                assert!((kin.pos_b[i] - p).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn velocities_match_jacobian_oracle() {
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = random_state(&mut rng, 7);
            let kin = geom.kinematics(&s.q);
            let v = forward_velocities(&geom, &kin, &s.qdot, &ground()).unwrap();
            for (i, jac) in body_jacobians(&geom, &s.q).iter().enumerate() {
                let oracle = jac * &s.qdot;
                let ours = v.body[i].to_vec6();
                for k in 0..6 {
                    assert!((ours[k] - oracle[k]).abs() < 1e-12 * (1.0 + oracle.norm()));
                }
            }
        }
    }

    #[test]
    fn required_velocities_are_linear_in_rates() {
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_state(&mut rng, 7);
        let kin = geom.kinematics(&s.q);
        let a = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let va = forward_required_velocities(&geom, &kin, &a, &ground()).unwrap();
        let vb = forward_required_velocities(&geom, &kin, &b, &ground()).unwrap();
        let vab = forward_required_velocities(&geom, &kin, &(&a * 2.0 - &b * 3.0), &ground()).unwrap();
        for i in 0..7 {
            let lin = va.body[i].to_vec6() * 2.0 - vb.body[i].to_vec6() * 3.0;
            assert!((vab.body[i].to_vec6() - lin).norm() < 1e-12);
        }
    }

    #[test]
    fn accelerations_match_finite_difference_of_velocities() {
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = random_state(&mut rng, 7);
            let qddot = DVector::from_fn(7, |_, _| rng.random_range(-3.0..3.0));
            // a second rate profile swept with the measured frames moving at qdot
            let w = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
            let wdot = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
            let kin = geom.kinematics(&s.q);
            let swept = forward_velocities(&geom, &kin, &w, &ground()).unwrap();
            let acc = forward_accelerations(&geom, &kin, &s.qdot, &swept, &wdot, &Vec6::zeros());
            let h = 1e-6;
            let at = |t: f64| {
                let q = &s.q + &s.qdot * t + &qddot * (0.5 * t * t);
                let k = geom.kinematics(&q);
                forward_velocities(&geom, &k, &(&w + &wdot * t), &ground()).unwrap()
            };
            let (plus, minus) = (at(h), at(-h));
            for i in 0..7 {
                let fd = (plus.body[i].to_vec6() - minus.body[i].to_vec6()) / (2.0 * h);
                assert!((fd - acc[i]).norm() < 1e-6 * (1.0 + fd.norm()), "body {i}");
            }
        }
    }

    #[test]
    fn zero_wrenches_propagate_to_zero() {
        let geom = test_chain();
        let kin = geom.kinematics(&DVector::zeros(7));
        let net: Vec<_> = (1..=7).map(|i| SpatialForce::zero(Frame::B(i))).collect();
        let f = backward_forces(&geom, &kin, &net, &SpatialForce::zero(Frame::T(7))).unwrap();
        assert!(f.body.iter().chain(f.tip.iter()).all(|x| x.to_vec6() == Vec6::zeros()));
        assert_eq!(f.tip[0].frame, Frame::GROUND);
        let r = backward_required_forces(&geom, &kin, &net, &SpatialForce::zero(Frame::T(7))).unwrap();
        assert_eq!(f, r);
    }

    #[test]
    fn backward_forces_reject_bad_frames() {
        let geom = test_chain();
        let kin = geom.kinematics(&DVector::zeros(7));
        let net: Vec<_> = (1..=7).map(|i| SpatialForce::zero(Frame::B(i))).collect();
        assert!(backward_forces(&geom, &kin, &net, &SpatialForce::zero(Frame::T(6))).is_err());
        let mut wrong = net.clone();
        wrong[3].frame = Frame::T(4);
        assert!(backward_forces(&geom, &kin, &wrong, &SpatialForce::zero(Frame::T(7))).is_err());
        assert!(backward_forces(&geom, &kin, &net[..6], &SpatialForce::zero(Frame::T(7))).is_err());
    }

    #[test]
    fn static_gravity_load_reaches_ground_as_total_weight() {
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = ChainState { q: random_state(&mut rng, 7).q, qdot: DVector::zeros(7) };
        let kin = geom.kinematics(&s.q);
        let g = geom.gravity_in_bodies(&kin);
        let net: Vec<_> = (0..7)
            .map(|i| SpatialForce::from_vec6(&crate::body::gravity_wrench(geom.augmented_params(i), &g[i]), Frame::B(i as u8 + 1)))
            .collect();
        let f = backward_forces(&geom, &kin, &net, &SpatialForce::zero(Frame::T(7))).unwrap();
        let total: f64 = (0..7).map(|i| geom.augmented_params(i).mass()).sum();
        let ground = f.tip[0].force;
        assert!((ground - Vec3::new(0.0, 0.0, total * STANDARD_GRAVITY)).norm() < 1e-10);
    }

    #[test]
    fn power_telescopes_through_the_chain() {
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let s = random_state(&mut rng, 7);
            let kin = geom.kinematics(&s.q);
            let vbase = SpatialVelocity::from_vec6(&random_vec6(&mut rng, 1.0), Frame::GROUND);
            let v = forward_velocities(&geom, &kin, &s.qdot, &vbase).unwrap();
            let net: Vec<_> = (0..7).map(|i| SpatialForce::from_vec6(&random_vec6(&mut rng, 5.0), Frame::B(i as u8 + 1))).collect();
            let ftip = SpatialForce::from_vec6(&random_vec6(&mut rng, 5.0), Frame::T(7));
            let f = backward_forces(&geom, &kin, &net, &ftip).unwrap();
            let lhs: f64 = (0..7).map(|i| v.body[i].power(&net[i]).unwrap()).sum();
            let joint: f64 = (0..7).map(|i| s.qdot[i] * geom.selector(i).dot(&f.body[i].to_vec6())).sum();
            let rhs = v.tip[0].power(&f.tip[0]).unwrap() - v.tip[7].power(&f.tip[7]).unwrap() + joint;
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gravity_direction() {
        let geom = test_chain();
        let s = ChainState::zeros(7);
        assert_eq!(gravity_direction_in_frame(&geom, &s, Frame::GROUND).unwrap(), world_gravity());
        // B1 is the ground rotated by -90 deg about x: gravity lands on +y
        let g1 = gravity_direction_in_frame(&geom, &s, Frame::B(1)).unwrap();
        assert!((g1 - Vec3::new(0.0, 9.81, 0.0)).norm() < 1e-12);
        assert!(gravity_direction_in_frame(&geom, &s, Frame::B(8)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = random_state(&mut rng, 7);
            for i in 1..=7 {
                let g = gravity_direction_in_frame(&geom, &s, Frame::B(i)).unwrap();
                assert!((g.norm() - STANDARD_GRAVITY).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gravity_flips_under_half_turn() {
        let mut geom = test_chain();
        geom.joints[0].pre_rotation = crate::spatial::axis_rotation(0, std::f64::consts::PI);
        let g = gravity_direction_in_frame(&geom, &ChainState::zeros(7), Frame::B(1)).unwrap();
        assert!((g - Vec3::new(0.0, 0.0, 9.81)).norm() < 1e-12);
    }

    fn zero_dist() -> Vec<Vec6> {
        vec![Vec6::zeros(); 7]
    }

    #[test]
    fn mass_matrix_matches_jacobian_oracle() {
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let s = random_state(&mut rng, 7);
            let kin = geom.kinematics(&s.q);
            let h = mass_matrix(&geom, &kin);
            let mut oracle = DMatrix::from_diagonal(&DVector::from_fn(7, |i, _| geom.joint_inertia(i)));
            for (i, jac) in body_jacobians(&geom, &s.q).iter().enumerate() {
                let m = DMatrix::from_column_slice(6, 6, spatial_inertia(geom.augmented_params(i)).as_slice());
                oracle += jac.transpose() * m * jac;
            }
            assert!((h - oracle).abs().max() < 1e-12);
        }
    }

    #[test]
    fn gravity_compensation_holds_still() {
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = ChainState { q: random_state(&mut rng, 7).q, qdot: DVector::zeros(7) };
        let tau_h = DVector::zeros(7);
        let tau = inverse_dynamics(&geom, &s, &DVector::zeros(7), &zero_dist(), &tau_h).unwrap();
        let qddot = plant_forward_dynamics(&geom, &s, &tau, &zero_dist(), &tau_h).unwrap();
        assert!(qddot.norm() < 1e-10);
    }

    #[test]
    fn zero_gravity_zero_torque_at_rest() {
        let geom = test_chain().with_gravity(Vec3::zeros());
        let s = ChainState { q: DVector::from_element(7, 0.4), qdot: DVector::zeros(7) };
        let qddot = plant_forward_dynamics(&geom, &s, &DVector::zeros(7), &zero_dist(), &DVector::zeros(7)).unwrap();
        assert_eq!(qddot, DVector::zeros(7));
    }

    #[test]
    fn forward_dynamics_matches_lagrangian_oracle() {
        // H qddot + c = tau - tau_h - sum J^T F_d with H, c assembled from body
        // Jacobians and a finite-difference Jdot, independent of the sweeps.
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..30 {
            let s = random_state(&mut rng, 7);
            let tau = DVector::from_fn(7, |_, _| rng.random_range(-5.0..5.0));
            let tau_h = DVector::from_fn(7, |_, _| rng.random_range(-0.5..0.5));
            let dist: Vec<Vec6> = (0..7).map(|_| random_vec6(&mut rng, 1.0)).collect();
            let ours = plant_forward_dynamics(&geom, &s, &tau, &dist, &tau_h).unwrap();

            let jac = body_jacobians(&geom, &s.q);
            let eps = 1e-6;
            let jp = body_jacobians(&geom, &(&s.q + &s.qdot * eps));
            let jm = body_jacobians(&geom, &(&s.q - &s.qdot * eps));
            let poses = world_body_poses(&geom, &s.q);
            let mut h = DMatrix::from_diagonal(&DVector::from_fn(7, |i, _| geom.joint_inertia(i)));
            let mut c = DVector::zeros(7);
            for i in 0..7 {
                let m = spatial_inertia(geom.augmented_params(i));
                let md = DMatrix::from_column_slice(6, 6, m.as_slice());
                h += jac[i].transpose() * &md * &jac[i];
                let v: Vec6 = Vec6::from_column_slice((&jac[i] * &s.qdot).as_slice());
                let jdot_qdot = (&jp[i] - &jm[i]) / (2.0 * eps) * &s.qdot;
                let vdot_bias = Vec6::from_column_slice(jdot_qdot.as_slice());
                let g = poses[i].0.transpose() * world_gravity();
                let terms = dynamics_terms_unchecked(geom.augmented_params(i), &v, &g);
                let w = m * vdot_bias + terms.coriolis * v + terms.gravity + dist[i];
                c += jac[i].transpose() * DVector::from_column_slice(w.as_slice());
            }
            let oracle = h.cholesky().unwrap().solve(&(&tau - &tau_h - c));
            assert!((&ours - &oracle).norm() < 1e-6 * (1.0 + oracle.norm()), "{ours} vs {oracle}");
        }
    }

    fn rk4_step(geom: &ChainGeometry, s: &ChainState, h: f64) -> ChainState {
        let zero = DVector::zeros(7);
        let f = |s: &ChainState| plant_forward_dynamics(geom, s, &zero, &zero_dist(), &zero).unwrap();
        let shift = |s: &ChainState, dq: &DVector<f64>, dv: &DVector<f64>, k: f64| ChainState {
            q: &s.q + dq * k,
            qdot: &s.qdot + dv * k,
        };
        let a1 = f(s);
        let s2 = shift(s, &s.qdot, &a1, h / 2.0);
        let a2 = f(&s2);
        let s3 = shift(s, &s2.qdot, &a2, h / 2.0);
        let a3 = f(&s3);
        let s4 = shift(s, &s3.qdot, &a3, h);
        let a4 = f(&s4);
        ChainState {
            q: &s.q + (&s.qdot + &s2.qdot * 2.0 + &s3.qdot * 2.0 + &s4.qdot) * (h / 6.0),
            qdot: &s.qdot + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0),
        }
    }

    #[test]
    fn passive_chain_conserves_energy() {
        let geom = test_chain();
        let mut s = ChainState { q: DVector::from_element(7, 0.3), qdot: DVector::from_element(7, 0.5) };
        let e0 = mechanical_energy(&geom, &s);
        let mut worst: f64 = 0.0;
        for _ in 0..2000 {
            s = rk4_step(&geom, &s, 1e-3);
            worst = worst.max((mechanical_energy(&geom, &s) - e0).abs());
        }
        let scale = e0.abs().max(1.0);
        assert!(worst / scale < 1e-3, "drift {worst}");
    }

    #[test]
    fn joint_space_inertia_rate_minus_twice_coriolis_is_skew() {
        // C is recovered from the Newton-Euler velocity products as half the
        // qdot-Jacobian (exact for a quadratic form); Hdot by central differences.
        let geom = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = random_state(&mut rng, 7);
            let mut c = DMatrix::zeros(7, 7);
            let d = 1e-3;
            for j in 0..7 {
                let mut p = s.clone();
                let mut m = s.clone();
                p.qdot[j] += d;
                m.qdot[j] -= d;
                let col = (velocity_product_torques(&geom, &p) - velocity_product_torques(&geom, &m)) / (4.0 * d);
                c.set_column(j, &col);
            }
            assert!((&c * &s.qdot - velocity_product_torques(&geom, &s)).norm() < 1e-9);
            let h = 1e-6;
            let hp = mass_matrix(&geom, &geom.kinematics(&(&s.q + &s.qdot * h)));
            let hm = mass_matrix(&geom, &geom.kinematics(&(&s.q - &s.qdot * h)));
            let n = (hp - hm) / (2.0 * h) - c * 2.0;
            assert!((&n + n.transpose()).abs().max() < 1e-6);
        }
    }
}
