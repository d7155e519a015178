//! Decentralized control law on the chain, plus a PD baseline.
//!
//! One control tick runs, in order: required joint velocities, the forward
//! sweep of required body velocities and accelerations, the body wrench of
//! every subsystem, the backward sweep of required wrenches, the joint
//! torques, and finally the estimator updates.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::body::{pseudo_to_phi, regressor, InertialParams, Regressor};
use crate::chain::{
    backward_required_forces, forward_accelerations, forward_required_velocities,
    forward_velocities, ChainError, ChainGeometry, ChainState, FrameForces, FrameVelocities,
    JointAxis, Kinematics,
};
use crate::estimator::{
    adaptation_matrix, joint_adaptation_coeff, joint_inertia_of, nal_step, EstimatorError,
    NalState, RbfNet,
};
use crate::spatial::{Frame, Mat6, SpatialForce, SpatialVelocity, Vec6};

/// Inputs of one body network: required and measured velocity, integral and
/// proportional velocity error, and the load torque.
pub const BODY_NET_INPUTS: usize = 25;
/// Inputs of one joint network.
pub const JOINT_NET_INPUTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("|e_a| = {e_a} reached the barrier k_b = {k_b}")]
pub struct BarrierBreach {
    pub e_a: f64,
    pub k_b: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("barrier breach at t={t:.3} s on joint {joint}: |e_a| = {e_a:.6} rad >= k_b = {k_b:.6} rad")]
    Barrier { t: f64, joint: usize, e_a: f64, k_b: f64 },
    #[error("estimator on {subsystem} at t={t:.3} s: {source}")]
    Estimator {
        t: f64,
        subsystem: String,
        source: EstimatorError,
    },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Estimate(#[from] EstimatorError),
}

/// Desired joint motion at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Desired {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlGains {
    pub lambda: DVector<f64>,
    pub k_body_d: Mat6,
    pub k_body_i: Mat6,
    /// RBF weight gain of the body networks (units x units).
    pub gamma_w: DMatrix<f64>,
    /// Inertia adaptation gain of the bodies.
    pub gamma_1: f64,
    /// Offset gain of the body networks.
    pub gamma_2: f64,
    pub k_d: DVector<f64>,
    pub k_i: DVector<f64>,
    /// Inertia adaptation gain of the joints.
    pub zeta: f64,
    pub beta_1: f64,
    pub beta_2: f64,
    /// Barrier half-width, rad.
    pub k_b: f64,
    pub k_p: DVector<f64>,
    pub k_v: DVector<f64>,
}

impl ControlGains {
    pub fn table_defaults(dof: usize, units: usize) -> Self {
        Self {
            lambda: DVector::from_element(dof, 5.0),
            k_body_d: Mat6::identity() * 3.0,
            k_body_i: Mat6::identity() * 5.0,
            gamma_w: DMatrix::identity(units, units) * 10.0,
            gamma_1: 10.0,
            gamma_2: 10.0,
            k_d: DVector::from_element(dof, 1.5),
            k_i: DVector::from_element(dof, 5.0),
            zeta: 10.0,
            beta_1: 10.0,
            beta_2: 10.0,
            k_b: 3f64.to_radians(),
            k_p: DVector::from_element(dof, 100.0),
            k_v: DVector::from_element(dof, 15.0),
        }
    }
}

pub fn required_joint_velocity(qd_dot: f64, qd: f64, q: f64, lambda: f64) -> f64 {
    qd_dot + lambda * (qd - q)
}

pub fn required_joint_acceleration(qd_ddot: f64, qd_dot: f64, qdot: f64, lambda: f64) -> f64 {
    qd_ddot + lambda * (qd_dot - qdot)
}

/// `K_D e + W^T psi + eps + K_I E_I + Y phi`.
#[allow(clippy::too_many_arguments)]
pub fn body_control_wrench(
    y: &Regressor,
    phi_hat: &InertialParams,
    net: &RbfNet,
    chi: &DVector<f64>,
    vel_err: &Vec6,
    int_err: &Vec6,
    k_d: &Mat6,
    k_i: &Mat6,
) -> Result<Vec6, EstimatorError> {
    let nn = net.estimate(chi)?;
    Ok(k_d * vel_err + Vec6::from_column_slice(nn.as_slice()) + k_i * int_err + y.apply(phi_hat))
}

pub fn barrier_term(e_a: f64, k_b: f64) -> Result<f64, BarrierBreach> {
    if !(e_a.abs() < k_b) {
        return Err(BarrierBreach { e_a, k_b });
    }
    Ok(e_a / (k_b * k_b - e_a * e_a))
}

/// `k_d (qdot_r - qdot) + k_I int + Y_a phi_a + nn + e_a / (k_b^2 - e_a^2)`.
#[allow(clippy::too_many_arguments)]
pub fn joint_control_torque(
    qdot_r: f64,
    qdot: f64,
    int_err: f64,
    y_a: f64,
    phi_a_hat: f64,
    nn: f64,
    e_a: f64,
    k_d: f64,
    k_i: f64,
    k_b: f64,
) -> Result<f64, BarrierBreach> {
    Ok(k_d * (qdot_r - qdot) + k_i * int_err + y_a * phi_a_hat + nn + barrier_term(e_a, k_b)?)
}

pub fn load_torque(axis: JointAxis, f_r: &SpatialForce) -> f64 {
    axis.selector().dot(&f_r.to_vec6())
}

pub fn compose_control(tau_star_r: f64, tau_ar: f64) -> f64 {
    tau_star_r + tau_ar
}

pub fn pd_control(qd: f64, q: f64, qd_dot: f64, qdot: f64, k_p: f64, k_v: f64) -> f64 {
    k_p * (qd - q) + k_v * (qd_dot - qdot)
}

/// Estimator states of every subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub body_nal: Vec<NalState>,
    pub joint_nal: Vec<NalState>,
    pub body_nets: Vec<RbfNet>,
    pub joint_nets: Vec<RbfNet>,
}

impl Estimates {
    pub fn body_phi(&self, i: usize) -> Result<InertialParams, EstimatorError> {
        Ok(pseudo_to_phi(&self.body_nal[i].l_hat)?)
    }

    pub fn joint_inertia(&self, i: usize) -> f64 {
        joint_inertia_of(&self.joint_nal[i].l_hat)
    }
}

/// Network inputs that lag one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct NetMemory {
    pub body_int: Vec<Vec6>,
    pub body_err: Vec<Vec6>,
    pub tau_ar: DVector<f64>,
    pub tau_star_r: DVector<f64>,
}

impl NetMemory {
    pub fn zeros(n: usize) -> Self {
        Self {
            body_int: vec![Vec6::zeros(); n],
            body_err: vec![Vec6::zeros(); n],
            tau_ar: DVector::zeros(n),
            tau_star_r: DVector::zeros(n),
        }
    }
}

/// Measured and required motion of every frame at one instant.
#[derive(Debug, Clone)]
pub struct RequiredMotion {
    pub kin: Kinematics,
    pub qdot_r: DVector<f64>,
    pub qddot_r: DVector<f64>,
    pub vel: FrameVelocities,
    pub vel_r: FrameVelocities,
    /// Time derivative of the required body velocities.
    pub acc_r: Vec<Vec6>,
    /// `V_r - V` per body.
    pub body_err: Vec<Vec6>,
    /// `qdot_r - qdot` per joint.
    pub joint_err: DVector<f64>,
}

pub fn required_motion(
    geom: &ChainGeometry,
    gains: &ControlGains,
    plant: &ChainState,
    desired: &Desired,
) -> Result<RequiredMotion, ChainError> {
    let n = geom.dof();
    let qdot_r = DVector::from_fn(n, |i, _| {
        required_joint_velocity(desired.qdot[i], desired.q[i], plant.q[i], gains.lambda[i])
    });
    let qddot_r = DVector::from_fn(n, |i, _| {
        required_joint_acceleration(desired.qddot[i], desired.qdot[i], plant.qdot[i], gains.lambda[i])
    });
    let kin = geom.kinematics(&plant.q);
    let ground = SpatialVelocity::zero(Frame::GROUND);
    let vel = forward_velocities(geom, &kin, &plant.qdot, &ground)?;
    let vel_r = forward_required_velocities(geom, &kin, &qdot_r, &ground)?;
    let acc_r = forward_accelerations(geom, &kin, &plant.qdot, &vel_r, &qddot_r, &Vec6::zeros());
    let body_err = (0..n)
        .map(|i| vel_r.body[i].to_vec6() - vel.body[i].to_vec6())
        .collect();
    let joint_err = &qdot_r - &plant.qdot;
    Ok(RequiredMotion {
        kin,
        qdot_r,
        qddot_r,
        vel,
        vel_r,
        acc_r,
        body_err,
        joint_err,
    })
}

/// Integrated quantities the law needs besides the measured state.
#[derive(Debug, Clone, PartialEq)]
pub struct LawIntegrals {
    pub q_r: DVector<f64>,
    pub joint: DVector<f64>,
    pub body: Vec<Vec6>,
}

impl LawIntegrals {
    pub fn start(q0: &DVector<f64>) -> Self {
        Self {
            q_r: q0.clone(),
            joint: DVector::zeros(q0.len()),
            body: vec![Vec6::zeros(); q0.len()],
        }
    }
}

/// Everything one evaluation of the law produces.
#[derive(Debug, Clone)]
pub struct LawOutput {
    pub tau: DVector<f64>,
    pub tau_star_r: DVector<f64>,
    pub tau_ar: DVector<f64>,
    pub e_a: DVector<f64>,
    /// Net required body wrenches.
    pub net_r: Vec<SpatialForce>,
    pub forces_r: FrameForces,
    pub regressors: Vec<Regressor>,
    pub body_psi: Vec<DVector<f64>>,
    pub joint_psi: Vec<DVector<f64>>,
}

/// The control law as a pure function of the measured state, the required
/// motion, the integrals and the current estimates.
#[allow(clippy::too_many_arguments)]
pub fn vdc_law(
    geom: &ChainGeometry,
    gains: &ControlGains,
    est: &Estimates,
    t: f64,
    plant: &ChainState,
    motion: &RequiredMotion,
    integrals: &LawIntegrals,
    memory: &NetMemory,
) -> Result<LawOutput, ControlError> {
    let n = geom.dof();
    let g = geom.gravity_in_bodies(&motion.kin);
    let mut net_r = Vec::with_capacity(n);
    let mut regressors = Vec::with_capacity(n);
    let mut body_psi = Vec::with_capacity(n);
    for i in 0..n {
        let v = motion.vel.body[i].to_vec6();
        let vr = motion.vel_r.body[i].to_vec6();
        let y = regressor(&v, &vr, &motion.acc_r[i], &g[i]);
        let mut chi = DVector::zeros(BODY_NET_INPUTS);
        chi.rows_mut(0, 6).copy_from(&vr);
        chi.rows_mut(6, 6).copy_from(&v);
        chi.rows_mut(12, 6).copy_from(&memory.body_int[i]);
        chi.rows_mut(18, 6).copy_from(&memory.body_err[i]);
        chi[24] = memory.tau_ar[i];
        let net = &est.body_nets[i];
        let psi = net.basis(&chi)?;
        let nn = Vec6::from_column_slice(net.output(&psi).as_slice());
        let phi = est.body_phi(i)?;
        let f = gains.k_body_d * motion.body_err[i]
            + nn
            + gains.k_body_i * integrals.body[i]
            + y.apply(&phi);
        net_r.push(SpatialForce::from_vec6(&f, motion.vel.body[i].frame));
        regressors.push(y);
        body_psi.push(psi);
    }
    let tip = SpatialForce::zero(Frame::T(n as u8));
    let forces_r = backward_required_forces(geom, &motion.kin, &net_r, &tip)?;

    let mut tau = DVector::zeros(n);
    let mut tau_star_r = DVector::zeros(n);
    let mut tau_ar = DVector::zeros(n);
    let mut e_a = DVector::zeros(n);
    let mut joint_psi = Vec::with_capacity(n);
    for i in 0..n {
        e_a[i] = integrals.q_r[i] - plant.q[i];
        let chi = DVector::from_vec(vec![
            motion.qddot_r[i],
            motion.qdot_r[i],
            plant.qdot[i],
            e_a[i],
            motion.joint_err[i],
            memory.tau_star_r[i],
        ]);
        let net = &est.joint_nets[i];
        let psi = net.basis(&chi)?;
        let nn = net.output(&psi)[0];
        tau_ar[i] = load_torque(geom.joints()[i].axis, &forces_r.body[i]);
        tau_star_r[i] = joint_control_torque(
            motion.qdot_r[i],
            plant.qdot[i],
            integrals.joint[i],
            motion.qddot_r[i],
            est.joint_inertia(i),
            nn,
            e_a[i],
            gains.k_d[i],
            gains.k_i[i],
            gains.k_b,
        )
        .map_err(|b| ControlError::Barrier {
            t,
            joint: i + 1,
            e_a: b.e_a,
            k_b: b.k_b,
        })?;
        tau[i] = compose_control(tau_star_r[i], tau_ar[i]);
        joint_psi.push(psi);
    }
    Ok(LawOutput {
        tau,
        tau_star_r,
        tau_ar,
        e_a,
        net_r,
        forces_r,
        regressors,
        body_psi,
        joint_psi,
    })
}

/// What a controller hands the simulator each tick.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    /// Commanded torque, before actuator constraints.
    pub tau: DVector<f64>,
    pub tau_star_r: DVector<f64>,
    pub tau_ar: DVector<f64>,
    pub q_r: DVector<f64>,
    pub e_a: DVector<f64>,
    pub sweep: Option<Box<Sweep>>,
}

/// Required-side sweep data kept for the power-flow bookkeeping.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub motion: RequiredMotion,
    pub net_r: Vec<SpatialForce>,
    pub forces_r: FrameForces,
}

pub trait Controller {
    fn step(&mut self, t: f64, plant: &ChainState, desired: &Desired) -> Result<ControlOutput, ControlError>;

    fn estimates(&self) -> Option<&Estimates> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct PdController {
    pub k_p: DVector<f64>,
    pub k_v: DVector<f64>,
}

impl Controller for PdController {
    /// There is no required angle here, so `q_r` reports the desired angle.
    fn step(&mut self, _t: f64, plant: &ChainState, d: &Desired) -> Result<ControlOutput, ControlError> {
        let n = plant.q.len();
        let tau = DVector::from_fn(n, |i, _| {
            pd_control(d.q[i], plant.q[i], d.qdot[i], plant.qdot[i], self.k_p[i], self.k_v[i])
        });
        Ok(ControlOutput {
            tau_star_r: tau.clone(),
            tau,
            tau_ar: DVector::zeros(n),
            q_r: d.q.clone(),
            e_a: &d.q - &plant.q,
            sweep: None,
        })
    }
}

/// Adaptation diagnostics of the last tick.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptStats {
    pub body_min_eig: Vec<f64>,
    pub joint_min_eig: Vec<f64>,
    pub halvings: u32,
}

#[derive(Debug, Clone)]
struct Previous {
    qdot_r: DVector<f64>,
    joint_err: DVector<f64>,
    body_err: Vec<Vec6>,
}

#[derive(Debug, Clone)]
pub struct VdcController {
    geom: ChainGeometry,
    gains: ControlGains,
    dt: f64,
    pub est: Estimates,
    /// Keep all estimators at their initial values.
    pub frozen: bool,
    pub integrals: LawIntegrals,
    memory: NetMemory,
    previous: Option<Previous>,
    pub stats: AdaptStats,
}

impl VdcController {
    /// `geom` supplies kinematics only; inertial knowledge comes from `est`.
    pub fn new(geom: ChainGeometry, gains: ControlGains, est: Estimates, dt: f64, q0: &DVector<f64>) -> Self {
        let n = geom.dof();
        Self {
            geom,
            gains,
            dt,
            est,
            frozen: false,
            integrals: LawIntegrals::start(q0),
            memory: NetMemory::zeros(n),
            previous: None,
            stats: AdaptStats::default(),
        }
    }

    pub fn gains(&self) -> &ControlGains {
        &self.gains
    }

    fn accumulate(&mut self, motion: &RequiredMotion) {
        let half = 0.5 * self.dt;
        if let Some(p) = &self.previous {
            self.integrals.q_r += (&p.qdot_r + &motion.qdot_r) * half;
            self.integrals.joint += (&p.joint_err + &motion.joint_err) * half;
            for (acc, (a, b)) in self
                .integrals
                .body
                .iter_mut()
                .zip(p.body_err.iter().zip(&motion.body_err))
            {
                *acc += (a + b) * half;
            }
        }
        self.previous = Some(Previous {
            qdot_r: motion.qdot_r.clone(),
            joint_err: motion.joint_err.clone(),
            body_err: motion.body_err.clone(),
        });
    }

    fn adapt(&mut self, t: f64, motion: &RequiredMotion, out: &LawOutput) -> Result<(), ControlError> {
        let n = self.geom.dof();
        let dt = self.dt;
        let mut stats = AdaptStats {
            body_min_eig: Vec::with_capacity(n),
            joint_min_eig: Vec::with_capacity(n),
            halvings: 0,
        };
        for i in 0..n {
            let err = &motion.body_err[i];
            let s = adaptation_matrix(&out.regressors[i].transpose_apply(err));
            let state = NalState {
                gain: self.gains.gamma_1,
                ..self.est.body_nal[i].clone()
            };
            let (next, info) = nal_step(&state, &s, dt).map_err(|source| ControlError::Estimator {
                t,
                subsystem: format!("body {}", i + 1),
                source,
            })?;
            self.est.body_nal[i] = next;
            stats.body_min_eig.push(info.min_eigenvalue);
            stats.halvings += info.halvings;
            let e = DVector::from_column_slice(err.as_slice());
            self.est.body_nets[i].update_body(&out.body_psi[i], &e, &self.gains.gamma_w, self.gains.gamma_2, dt);

            let ej = motion.joint_err[i];
            let s = adaptation_matrix(&joint_adaptation_coeff(motion.qddot_r[i], ej));
            let state = NalState {
                gain: self.gains.zeta,
                ..self.est.joint_nal[i].clone()
            };
            let (next, info) = nal_step(&state, &s, dt).map_err(|source| ControlError::Estimator {
                t,
                subsystem: format!("joint {}", i + 1),
                source,
            })?;
            self.est.joint_nal[i] = next;
            stats.joint_min_eig.push(info.min_eigenvalue);
            stats.halvings += info.halvings;
            self.est.joint_nets[i].update_joint(&out.joint_psi[i], ej, self.gains.beta_1, self.gains.beta_2, dt);
        }
        self.stats = stats;
        Ok(())
    }
}

impl Controller for VdcController {
    fn step(&mut self, t: f64, plant: &ChainState, desired: &Desired) -> Result<ControlOutput, ControlError> {
        let motion = required_motion(&self.geom, &self.gains, plant, desired)?;
        self.accumulate(&motion);
        let out = vdc_law(
            &self.geom,
            &self.gains,
            &self.est,
            t,
            plant,
            &motion,
            &self.integrals,
            &self.memory,
        )?;
        if !self.frozen {
            self.adapt(t, &motion, &out)?;
        } else {
            self.stats = AdaptStats {
                body_min_eig: self.est.body_nal.iter().map(|s| s.l_hat.min_eigenvalue()).collect(),
                joint_min_eig: self.est.joint_nal.iter().map(|s| s.l_hat.min_eigenvalue()).collect(),
                halvings: 0,
            };
        }
        self.memory = NetMemory {
            body_int: self.integrals.body.clone(),
            body_err: motion.body_err.clone(),
            tau_ar: out.tau_ar.clone(),
            tau_star_r: out.tau_star_r.clone(),
        };
        Ok(ControlOutput {
            tau: out.tau,
            tau_star_r: out.tau_star_r,
            tau_ar: out.tau_ar,
            q_r: self.integrals.q_r.clone(),
            e_a: out.e_a,
            sweep: Some(Box::new(Sweep {
                motion,
                net_r: out.net_r,
                forces_r: out.forces_r,
            })),
        })
    }

    fn estimates(&self) -> Option<&Estimates> {
        Some(&self.est)
    }
}
