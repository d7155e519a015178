//! Closed-loop simulation, power-flow bookkeeping, accompanying functions
//! and run metrics.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::actuator::{saturate_deadzone, ConstraintParams};
use crate::body::{bregman, dynamics_terms_unchecked, phi_to_pseudo, BodyError};
use crate::chain::{
    backward_forces, forward_accelerations, plant_forward_dynamics, ChainError, ChainGeometry,
    ChainState,
};
use crate::controller::{
    required_motion, vdc_law, ControlError, ControlGains, ControlOutput, Controller, Estimates,
    LawIntegrals, NetMemory, PdController, RequiredMotion, Sweep, VdcController,
};
use crate::estimator::{joint_pseudo_inertia, NalState};
use crate::scenario::{ControllerKind, ScenarioConfig, ScenarioError};
use crate::spatial::{Frame, SpatialError, SpatialForce, SpatialVelocity, Vec6};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("non-finite state at t={t:.3} s")]
    NonFinite { t: f64 },
    #[error("telescoping residual {residual:.3e} exceeds {RESIDUAL_TOL:e} at t={t:.3} s")]
    Telescoping { t: f64, residual: f64 },
    #[error("Bregman divergence of subsystem {subsystem} is not finite at t={t:.3} s")]
    Divergence { t: f64, subsystem: usize },
}

/// Largest relative telescoping residual tolerated at a logged step.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// A run that stopped early, with everything logged up to the failure.
#[derive(Debug)]
pub struct SimFailure {
    pub error: SimError,
    pub partial: SimLog,
}

impl std::fmt::Display for SimFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for SimFailure {}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Log per-subsystem accompanying functions, power flows and barrier margins.
    pub diagnostics: bool,
    /// Keep every n-th control step in the log.
    pub decimate: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            diagnostics: false,
            decimate: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub unit: String,
}

/// Column-oriented time series on a uniform grid, one row per logged step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LogParseError {
    #[error("empty log")]
    Empty,
    #[error("header field {0:?} is not `name [unit]`")]
    Header(String),
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
}

impl SimLog {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.index(name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sub-log with the named columns, in the given order; unknown names are skipped.
    pub fn select(&self, names: &[String]) -> SimLog {
        let idx: Vec<usize> = names.iter().filter_map(|n| self.index(n)).collect();
        SimLog {
            columns: idx.iter().map(|&k| self.columns[k].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| idx.iter().map(|&k| r[k]).collect())
                .collect(),
        }
    }

    /// CSV text: a `name [unit]` header, then shortest round-trip floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self
            .columns
            .iter()
            .map(|c| format!("{} [{}]", c.name, c.unit))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<SimLog, LogParseError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(LogParseError::Empty)?;
        let columns = header
            .split(',')
            .map(|h| {
                let (name, rest) = h.rsplit_once(" [").ok_or_else(|| LogParseError::Header(h.into()))?;
                let unit = rest.strip_suffix(']').ok_or_else(|| LogParseError::Header(h.into()))?;
                Ok(Column {
                    name: name.into(),
                    unit: unit.into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut rows = vec![];
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| LogParseError::Row {
                    line: i + 2,
                    message: e.to_string(),
                })?;
            if row.len() != columns.len() {
                return Err(LogParseError::Row {
                    line: i + 2,
                    message: format!("expected {} fields, found {}", columns.len(), row.len()),
                });
            }
            rows.push(row);
        }
        Ok(SimLog { columns, rows })
    }

    fn push_column(&mut self, name: String, unit: &str) {
        self.columns.push(Column {
            name,
            unit: unit.into(),
        });
    }
}

/// `(V_r - V)^T (F_r - F)` at one frame.
pub fn vpf(
    v_r: &SpatialVelocity,
    v: &SpatialVelocity,
    f_r: &SpatialForce,
    f: &SpatialForce,
) -> Result<f64, SpatialError> {
    for found in [v.frame, f_r.frame, f.frame] {
        if found != v_r.frame {
            return Err(SpatialError::FrameMismatch {
                expected: v_r.frame,
                found,
            });
        }
    }
    Ok((v_r.to_vec6() - v.to_vec6()).dot(&(f_r.to_vec6() - f.to_vec6())))
}

/// Power-flow terms of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlows {
    /// `(V_r - V)^T (F*_r - F*)` per body.
    pub body: Vec<f64>,
    /// `(qdot_r - qdot)(tau*_r - tau*)` per joint.
    pub joint: Vec<f64>,
    /// Flow at the ground cut `T(0)`.
    pub base: f64,
    /// Flow at the free end `T(n)`.
    pub tip: f64,
}

/// Absolute residual of the telescoping sum and the scale it should be
/// judged against (sum of magnitudes of all terms).
pub fn telescoping_residual(p: &PowerFlows) -> (f64, f64) {
    let sum: f64 = p.body.iter().chain(&p.joint).sum();
    let scale: f64 = p.body.iter().chain(&p.joint).map(|x| x.abs()).sum::<f64>() + p.base.abs() + p.tip.abs();
    (sum - (p.base - p.tip), scale)
}

pub fn relative_residual(p: &PowerFlows) -> f64 {
    let (r, scale) = telescoping_residual(p);
    if scale > 0.0 {
        r.abs() / scale
    } else {
        r.abs()
    }
}

/// Power flows from the required sweep and the actual plant wrenches at the
/// control instant; `tau_cmd` is the torque the law composed.
#[allow(clippy::too_many_arguments)]
pub fn power_flows(
    geom: &ChainGeometry,
    plant: &ChainState,
    sweep: &Sweep,
    tau_star_r: &DVector<f64>,
    tau_cmd: &DVector<f64>,
    qddot: &DVector<f64>,
    dist: &[Vec6],
) -> Result<PowerFlows, SimError> {
    let n = geom.dof();
    let m = &sweep.motion;
    let acc = forward_accelerations(geom, &m.kin, &plant.qdot, &m.vel, qddot, &Vec6::zeros());
    let g = geom.gravity_in_bodies(&m.kin);
    let net: Vec<SpatialForce> = (0..n)
        .map(|i| {
            let v = m.vel.body[i].to_vec6();
            let t = dynamics_terms_unchecked(geom.augmented_params(i), &v, &g[i]);
            SpatialForce::from_vec6(&(t.wrench(&acc[i], &v) + dist[i]), m.vel.body[i].frame)
        })
        .collect();
    let forces = backward_forces(geom, &m.kin, &net, &SpatialForce::zero(Frame::T(n as u8)))?;
    let mut body = Vec::with_capacity(n);
    let mut joint = Vec::with_capacity(n);
    for i in 0..n {
        body.push(vpf(&m.vel_r.body[i], &m.vel.body[i], &sweep.net_r[i], &net[i]).map_err(ChainError::from)?);
        let tau_star = tau_cmd[i] - geom.selector(i).dot(&forces.body[i].to_vec6());
        joint.push(m.joint_err[i] * (tau_star_r[i] - tau_star));
    }
    let base = vpf(&m.vel_r.tip[0], &m.vel.tip[0], &sweep.forces_r.tip[0], &forces.tip[0]).map_err(ChainError::from)?;
    let tip = vpf(&m.vel_r.tip[n], &m.vel.tip[n], &sweep.forces_r.tip[n], &forces.tip[n]).map_err(ChainError::from)?;
    Ok(PowerFlows { body, joint, base, tip })
}

/// Per-subsystem accompanying functions.
#[derive(Debug, Clone, PartialEq)]
pub struct Accompanying {
    pub body: Vec<f64>,
    pub joint: Vec<f64>,
    pub total: f64,
}

/// Evaluate every accompanying-function term against the true parameters of
/// `geom`. Network weights and offsets are measured from zero.
pub fn accompanying_functions(
    geom: &ChainGeometry,
    gains: &ControlGains,
    gamma_w_inv: &DMatrix<f64>,
    plant: &ChainState,
    motion: &RequiredMotion,
    integrals: &LawIntegrals,
    est: &Estimates,
) -> Result<Accompanying, BodyError> {
    let n = geom.dof();
    let mut body = Vec::with_capacity(n);
    let mut joint = Vec::with_capacity(n);
    for i in 0..n {
        let e = &motion.body_err[i];
        let m = crate::body::spatial_inertia(geom.augmented_params(i));
        let ei = &integrals.body[i];
        let net = &est.body_nets[i];
        let nn = 0.5 * (net.w_hat.transpose() * gamma_w_inv * &net.w_hat).trace()
            + 0.5 * net.eps_hat.norm_squared() / gains.gamma_2;
        let truth = phi_to_pseudo(geom.augmented_params(i));
        body.push(
            0.5 * e.dot(&(m * e))
                + 0.5 * ei.dot(&(gains.k_body_i * ei))
                + gains.gamma_1 * bregman(&truth, &est.body_nal[i].l_hat)?
                + nn,
        );

        let ej = motion.joint_err[i];
        let ea = integrals.q_r[i] - plant.q[i];
        let kb2 = gains.k_b * gains.k_b;
        let jn = &est.joint_nets[i];
        let nn = 0.5 * jn.w_hat.norm_squared() / gains.beta_1 + 0.5 * jn.eps_hat.norm_squared() / gains.beta_2;
        let truth = joint_pseudo_inertia(geom.joint_inertia(i));
        joint.push(
            0.5 * geom.joint_inertia(i) * ej * ej
                + 0.5 * gains.k_i[i] * integrals.joint[i].powi(2)
                + 0.5 * (kb2 / (kb2 - ea * ea)).ln()
                + gains.zeta * bregman(&truth, &est.joint_nal[i].l_hat)?
                + nn,
        );
    }
    let total = body.iter().chain(&joint).sum();
    Ok(Accompanying { body, joint, total })
}

/// `-sum(k_d (qdot_r - qdot)^2 + e^T K_D e)`.
pub fn ideal_dissipation(gains: &ControlGains, motion: &RequiredMotion) -> f64 {
    let body: f64 = motion.body_err.iter().map(|e| e.dot(&(gains.k_body_d * e))).sum();
    let joint: f64 = motion
        .joint_err
        .iter()
        .zip(gains.k_d.iter())
        .map(|(e, k)| k * e * e)
        .sum();
    -(body + joint)
}

struct PlantInputs<'a> {
    config: &'a ScenarioConfig,
    geom: &'a ChainGeometry,
}

impl PlantInputs<'_> {
    fn accel(&self, s: &ChainState, tau: &DVector<f64>, t: f64) -> Result<DVector<f64>, ChainError> {
        plant_forward_dynamics(
            self.geom,
            s,
            tau,
            &self.config.disturbance(t),
            &self.config.human_torque(t),
        )
    }

    /// One classical RK4 step of the plant with the torque held.
    fn rk4(&self, s: &ChainState, tau: &DVector<f64>, t: f64, h: f64) -> Result<ChainState, ChainError> {
        let shift = |dq: &DVector<f64>, dv: &DVector<f64>, k: f64| ChainState {
            q: &s.q + dq * k,
            qdot: &s.qdot + dv * k,
        };
        let a1 = self.accel(s, tau, t)?;
        let s2 = shift(&s.qdot, &a1, h / 2.0);
        let a2 = self.accel(&s2, tau, t + h / 2.0)?;
        let s3 = shift(&s2.qdot, &a2, h / 2.0);
        let a3 = self.accel(&s3, tau, t + h / 2.0)?;
        let s4 = shift(&s3.qdot, &a3, h);
        let a4 = self.accel(&s4, tau, t + h)?;
        Ok(ChainState {
            q: &s.q + (&s.qdot + &s2.qdot * 2.0 + &s3.qdot * 2.0 + &s4.qdot) * (h / 6.0),
            qdot: &s.qdot + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (h / 6.0),
        })
    }
}

fn joint_columns(log: &mut SimLog, n: usize, prefix: &str, unit: &str) {
    for i in 1..=n {
        log.push_column(format!("{prefix}{i}"), unit);
    }
}

fn log_header(n: usize, vdc: bool, diagnostics: bool) -> SimLog {
    let mut log = SimLog::default();
    log.push_column("time".into(), "s");
    for (p, u) in [
        ("q", "rad"),
        ("qd", "rad"),
        ("qdot", "rad/s"),
        ("e", "rad"),
        ("ea", "rad"),
        ("tau_cmd", "N m"),
        ("tau", "N m"),
    ] {
        joint_columns(&mut log, n, p, u);
    }
    if vdc {
        for (p, u) in [
            ("w_norm_b", "-"),
            ("eps_norm_b", "-"),
            ("phi_norm_b", "-"),
            ("min_eig_b", "-"),
            ("bregman_b", "-"),
            ("w_norm_j", "-"),
            ("eps_norm_j", "-"),
            ("inertia_j", "kg m^2"),
            ("min_eig_j", "-"),
            ("bregman_j", "-"),
        ] {
            joint_columns(&mut log, n, p, u);
        }
        log.push_column("nu".into(), "J");
        log.push_column("vpf_residual".into(), "-");
        if diagnostics {
            for (p, u) in [
                ("nu_b", "J"),
                ("nu_j", "J"),
                ("vpf_b", "W"),
                ("vpf_j", "W"),
                ("margin", "rad"),
            ] {
                joint_columns(&mut log, n, p, u);
            }
            log.push_column("vpf_base".into(), "W");
            log.push_column("vpf_tip".into(), "W");
        }
    }
    log
}

/// Everything a run needs, assembled from a scenario.
pub struct Setup {
    pub geom: ChainGeometry,
    pub gains: ControlGains,
    pub constraints: Option<Vec<ConstraintParams>>,
}

impl Setup {
    pub fn new(config: &ScenarioConfig) -> Result<Self, SimError> {
        Ok(Self {
            geom: config.geometry()?,
            gains: config.gains(),
            constraints: config.constraints(),
        })
    }
}

/// Run the scenario with the controller it selects.
pub fn run(config: &ScenarioConfig, opts: &SimOptions) -> Result<SimLog, SimFailure> {
    let fail = |error: SimError| SimFailure {
        error,
        partial: SimLog::default(),
    };
    let setup = Setup::new(config).map_err(fail)?;
    let q0 = config.initial_q();
    match config.run.controller {
        ControllerKind::Vdc => {
            let est = config.initial_estimates(&setup.geom);
            let mut c = VdcController::new(setup.geom.clone(), setup.gains.clone(), est, config.run.dt, &q0);
            run_loop(config, opts, &setup, &mut c, true)
        }
        ControllerKind::Pd => {
            let mut c = PdController {
                k_p: setup.gains.k_p.clone(),
                k_v: setup.gains.k_v.clone(),
            };
            run_loop(config, opts, &setup, &mut c, false)
        }
    }
}

trait Observed: Controller {
    fn vdc(&self) -> Option<&VdcController> {
        None
    }
}

impl Observed for PdController {}

impl Observed for VdcController {
    fn vdc(&self) -> Option<&VdcController> {
        Some(self)
    }
}

fn run_loop<C: Observed>(
    config: &ScenarioConfig,
    opts: &SimOptions,
    setup: &Setup,
    controller: &mut C,
    vdc: bool,
) -> Result<SimLog, SimFailure> {
    let n = config.dof();
    let geom = &setup.geom;
    let gains = &setup.gains;
    let dt = config.run.dt;
    let steps = config.steps();
    let substeps = config.run.substeps.max(1);
    let decimate = opts.decimate.max(1);
    let plant = PlantInputs { config, geom };
    let gamma_w_inv = gains
        .gamma_w
        .clone()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::zeros(gains.gamma_w.nrows(), gains.gamma_w.ncols()));
    let mut log = log_header(n, vdc, opts.diagnostics);
    let mut state = ChainState {
        q: config.initial_q(),
        qdot: config.initial_qdot(),
    };
    for k in 0..=steps {
        let t = k as f64 * dt;
        let mut step = || -> Result<(Vec<f64>, DVector<f64>), SimError> {
            let desired = config.desired(t);
            let out: ControlOutput = controller.step(t, &state, &desired)?;
            let tau = match &setup.constraints {
                Some(cs) => DVector::from_fn(n, |i, _| saturate_deadzone(out.tau[i], &cs[i])),
                None => out.tau.clone(),
            };
            let mut row = Vec::with_capacity(log.columns.len());
            if k % decimate == 0 {
                row.push(t);
                row.extend(state.q.iter());
                row.extend(desired.q.iter());
                row.extend(state.qdot.iter());
                row.extend((&desired.q - &state.q).iter());
                row.extend(out.e_a.iter());
                row.extend(out.tau.iter());
                row.extend(tau.iter());
                if let (Some(c), Some(sweep)) = (controller.vdc(), out.sweep.as_deref()) {
                    observe_vdc(config, geom, gains, &gamma_w_inv, &state, c, &out, sweep, &mut row, opts.diagnostics)?;
                }
            }
            Ok((row, tau))
        };
        let (row, tau) = match step() {
            Ok(v) => v,
            Err(error) => return Err(SimFailure { error, partial: log }),
        };
        if !row.is_empty() {
            log.rows.push(row);
        }
        if k == steps {
            break;
        }
        let h = dt / substeps as f64;
        for j in 0..substeps {
            match plant.rk4(&state, &tau, t + j as f64 * h, h) {
                Ok(next) => state = next,
                Err(e) => {
                    return Err(SimFailure {
                        error: e.into(),
                        partial: log,
                    })
                }
            }
        }
        if !state.is_finite() {
            return Err(SimFailure {
                error: SimError::NonFinite { t: t + dt },
                partial: log,
            });
        }
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn observe_vdc(
    config: &ScenarioConfig,
    geom: &ChainGeometry,
    gains: &ControlGains,
    gamma_w_inv: &DMatrix<f64>,
    state: &ChainState,
    c: &VdcController,
    out: &ControlOutput,
    sweep: &Sweep,
    row: &mut Vec<f64>,
    diagnostics: bool,
) -> Result<(), SimError> {
    let n = geom.dof();
    let t = row[0];
    let est = &c.est;
    for net in &est.body_nets {
        row.push(net.weight_norm());
    }
    for net in &est.body_nets {
        row.push(net.offset_norm());
    }
    for i in 0..n {
        row.push(est.body_phi(i).map_err(ControlError::from)?.as_vec().norm());
    }
    for nal in &est.body_nal {
        row.push(nal.l_hat.min_eigenvalue());
    }
    for i in 0..n {
        let d = bregman(&phi_to_pseudo(geom.augmented_params(i)), &est.body_nal[i].l_hat)?;
        if !d.is_finite() {
            return Err(SimError::Divergence { t, subsystem: i + 1 });
        }
        row.push(d);
    }
    for net in &est.joint_nets {
        row.push(net.weight_norm());
    }
    for net in &est.joint_nets {
        row.push(net.offset_norm());
    }
    for i in 0..n {
        row.push(est.joint_inertia(i));
    }
    for nal in &est.joint_nal {
        row.push(nal.l_hat.min_eigenvalue());
    }
    for i in 0..n {
        let d = bregman(&joint_pseudo_inertia(geom.joint_inertia(i)), &est.joint_nal[i].l_hat)?;
        if !d.is_finite() {
            return Err(SimError::Divergence { t, subsystem: i + 1 });
        }
        row.push(d);
    }
    let nu = accompanying_functions(geom, gains, gamma_w_inv, state, &sweep.motion, &c.integrals, est)?;
    row.push(nu.total);
    let tau_app = match config.constraints() {
        Some(cs) => DVector::from_fn(n, |i, _| saturate_deadzone(out.tau[i], &cs[i])),
        None => out.tau.clone(),
    };
    let dist = config.disturbance(t);
    let qddot = plant_forward_dynamics(geom, state, &tau_app, &dist, &config.human_torque(t))?;
    let flows = power_flows(geom, state, sweep, &out.tau_star_r, &out.tau, &qddot, &dist)?;
    let residual = relative_residual(&flows);
    if !(residual < RESIDUAL_TOL) {
        return Err(SimError::Telescoping { t, residual });
    }
    row.push(residual);
    if diagnostics {
        row.extend(&nu.body);
        row.extend(&nu.joint);
        row.extend(&flows.body);
        row.extend(&flows.joint);
        row.extend(out.e_a.iter().map(|e| gains.k_b - e.abs()));
        row.push(flows.base);
        row.push(flows.tip);
    }
    Ok(())
}

/// One sample of the ideal-case run.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealSample {
    pub t: f64,
    pub nu: f64,
    /// Central difference of `nu`.
    pub nu_dot: f64,
    pub dissipation: f64,
}

#[derive(Debug, Clone)]
struct IdealState {
    plant: ChainState,
    integrals: LawIntegrals,
}

/// Exact parameters, no disturbance or human torque, no actuator limits and
/// estimators frozen at the truth. The law is evaluated continuously inside
/// each integration stage, with the required angle and all integral errors
/// integrated alongside the plant.
pub fn run_ideal(config: &ScenarioConfig, duration: f64) -> Result<Vec<IdealSample>, SimError> {
    let geom = config.geometry()?;
    let gains = config.gains();
    let n = geom.dof();
    let mut est = config.initial_estimates(&geom);
    for i in 0..n {
        est.body_nal[i] = NalState {
            l_hat: phi_to_pseudo(geom.augmented_params(i)),
            gain: gains.gamma_1,
        };
        est.joint_nal[i] = NalState {
            l_hat: joint_pseudo_inertia(geom.joint_inertia(i)),
            gain: gains.zeta,
        };
    }
    let gamma_w_inv = gains.gamma_w.clone().try_inverse().expect("positive gain");
    let memory = NetMemory::zeros(n);
    let zero_dist = vec![Vec6::zeros(); n];
    let zero_tau_h = DVector::zeros(n);

    let deriv = |t: f64, x: &IdealState| -> Result<(IdealState, RequiredMotion), SimError> {
        let desired = config.desired(t);
        let motion = required_motion(&geom, &gains, &x.plant, &desired)?;
        let out = vdc_law(&geom, &gains, &est, t, &x.plant, &motion, &x.integrals, &memory)?;
        let qddot = plant_forward_dynamics(&geom, &x.plant, &out.tau, &zero_dist, &zero_tau_h)?;
        Ok((
            IdealState {
                plant: ChainState {
                    q: x.plant.qdot.clone(),
                    qdot: qddot,
                },
                integrals: LawIntegrals {
                    q_r: motion.qdot_r.clone(),
                    joint: motion.joint_err.clone(),
                    body: motion.body_err.clone(),
                },
            },
            motion,
        ))
    };
    let axpy = |x: &IdealState, d: &IdealState, h: f64| IdealState {
        plant: ChainState {
            q: &x.plant.q + &d.plant.q * h,
            qdot: &x.plant.qdot + &d.plant.qdot * h,
        },
        integrals: LawIntegrals {
            q_r: &x.integrals.q_r + &d.integrals.q_r * h,
            joint: &x.integrals.joint + &d.integrals.joint * h,
            body: x.integrals.body.iter().zip(&d.integrals.body).map(|(a, b)| a + b * h).collect(),
        },
    };
    let combine = |x: &IdealState, ks: [&IdealState; 4], h: f64| {
        let mut acc = x.clone();
        for (k, w) in ks.iter().zip([1.0, 2.0, 2.0, 1.0]) {
            acc = axpy(&acc, k, h * w / 6.0);
        }
        acc
    };

    let dt = config.run.dt;
    let substeps = config.run.substeps.max(1);
    let h = dt / substeps as f64;
    let steps = (duration / dt).round() as usize;
    let q0 = config.initial_q();
    let mut x = IdealState {
        plant: ChainState {
            q: q0.clone(),
            qdot: config.initial_qdot(),
        },
        integrals: LawIntegrals::start(&q0),
    };
    let mut nus = Vec::with_capacity(steps + 1);
    let mut diss = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (k1, motion) = deriv(t, &x)?;
        let nu = accompanying_functions(&geom, &gains, &gamma_w_inv, &x.plant, &motion, &x.integrals, &est)?;
        nus.push(nu.total);
        diss.push(ideal_dissipation(&gains, &motion));
        if k == steps {
            break;
        }
        let mut first = Some(k1);
        for j in 0..substeps {
            let ts = t + j as f64 * h;
            let k1 = match first.take() {
                Some(k1) => k1,
                None => deriv(ts, &x)?.0,
            };
            let k2 = deriv(ts + h / 2.0, &axpy(&x, &k1, h / 2.0))?.0;
            let k3 = deriv(ts + h / 2.0, &axpy(&x, &k2, h / 2.0))?.0;
            let k4 = deriv(ts + h, &axpy(&x, &k3, h))?.0;
            x = combine(&x, [&k1, &k2, &k3, &k4], h);
        }
        if !x.plant.is_finite() {
            return Err(SimError::NonFinite { t: t + dt });
        }
    }
    Ok((1..steps)
        .map(|k| IdealSample {
            t: k as f64 * dt,
            nu: nus[k],
            nu_dot: (nus[k + 1] - nus[k - 1]) / (2.0 * dt),
            dissipation: diss[k],
        })
        .collect())
}

/// Summary statistics of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub steps: usize,
    pub rms_e: Vec<f64>,
    pub max_e: Vec<f64>,
    pub max_ea: Vec<f64>,
    /// Max |e_a| over the steady-state window at the end of the run.
    pub steady_max_ea: Vec<f64>,
    pub barrier_margin: Option<f64>,
    pub max_tau: Vec<f64>,
    pub rms_tau: Vec<f64>,
    /// Fraction of steps where the actuator constraint changed the command.
    pub saturation_fraction: f64,
    pub max_vpf_residual: Option<f64>,
    pub final_w_norm: Option<f64>,
    pub final_eps_norm: Option<f64>,
    pub final_phi_norm: Option<f64>,
    pub min_eig: Option<f64>,
}

fn joint_series(log: &SimLog, prefix: &str) -> Vec<Vec<f64>> {
    (1..)
        .map_while(|i| log.column(&format!("{prefix}{i}")))
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `k_b` enables the barrier margin; `steady_window` is in seconds.
pub fn metrics(log: &SimLog, k_b: Option<f64>, steady_window: f64) -> Metrics {
    let time = log.column("time").unwrap_or_default();
    let t_end = time.last().copied().unwrap_or(0.0);
    let steady_from = time.iter().position(|t| *t >= t_end - steady_window).unwrap_or(0);
    let e = joint_series(log, "e");
    let ea = joint_series(log, "ea");
    let cmd = joint_series(log, "tau_cmd");
    let tau = joint_series(log, "tau");
    let max_ea: Vec<f64> = ea.iter().map(|s| max_abs(s)).collect();
    let saturated = (0..log.len())
        .filter(|&k| cmd.iter().zip(&tau).any(|(c, a)| c[k] != a[k]))
        .count();
    let last_max = |prefix: &str| {
        let s = joint_series(log, prefix);
        if s.is_empty() {
            return None;
        }
        Some(s.iter().map(|c| c.last().copied().unwrap_or(0.0)).fold(0.0, f64::max))
    };
    let all_min = |prefix: &str| {
        let s = joint_series(log, prefix);
        if s.is_empty() {
            return None;
        }
        Some(s.iter().flatten().copied().fold(f64::INFINITY, f64::min))
    };
    let min_eig = match (all_min("min_eig_b"), all_min("min_eig_j")) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    Metrics {
        steps: log.len(),
        rms_e: e.iter().map(|s| rms(s)).collect(),
        max_e: e.iter().map(|s| max_abs(s)).collect(),
        steady_max_ea: ea.iter().map(|s| max_abs(&s[steady_from.min(s.len())..])).collect(),
        barrier_margin: k_b.map(|kb| kb - max_ea.iter().copied().fold(0.0, f64::max)),
        max_ea,
        max_tau: cmd.iter().map(|s| max_abs(s)).collect(),
        rms_tau: cmd.iter().map(|s| rms(s)).collect(),
        saturation_fraction: if log.is_empty() {
            0.0
        } else {
            saturated as f64 / log.len() as f64
        },
        max_vpf_residual: log.column("vpf_residual").map(|c| max_abs(&c)),
        final_w_norm: last_max("w_norm_b"),
        final_eps_norm: last_max("eps_norm_b"),
        final_phi_norm: last_max("phi_norm_b"),
        min_eig,
    }
}

impl Metrics {
    /// Flat `(name, value)` pairs; absent values are NaN.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![("steps".to_string(), self.steps as f64)];
        for (name, v) in [
            ("rms_e", &self.rms_e),
            ("max_e", &self.max_e),
            ("max_ea", &self.max_ea),
            ("steady_max_ea", &self.steady_max_ea),
            ("max_tau", &self.max_tau),
            ("rms_tau", &self.rms_tau),
        ] {
            for (i, x) in v.iter().enumerate() {
                out.push((format!("{name}_{}", i + 1), *x));
            }
        }
        let opt = |x: Option<f64>| x.unwrap_or(f64::NAN);
        out.push(("barrier_margin".into(), opt(self.barrier_margin)));
        out.push(("saturation_fraction".into(), self.saturation_fraction));
        out.push(("max_vpf_residual".into(), opt(self.max_vpf_residual)));
        out.push(("final_w_norm".into(), opt(self.final_w_norm)));
        out.push(("final_eps_norm".into(), opt(self.final_eps_norm)));
        out.push(("final_phi_norm".into(), opt(self.final_phi_norm)));
        out.push(("min_eig".into(), opt(self.min_eig)));
        out
    }
}

/// Aligned text table with one value column per labelled run.
pub fn metrics_table(runs: &[(&str, &Metrics)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<24}", "metric");
    for (label, _) in runs {
        let _ = write!(out, " {label:>14}");
    }
    out.push('\n');
    let cols: Vec<Vec<(String, f64)>> = runs.iter().map(|(_, m)| m.entries()).collect();
    if let Some(first) = cols.first() {
        for (k, (name, _)) in first.iter().enumerate() {
            let _ = write!(out, "{name:<24}");
            for c in &cols {
                let _ = write!(out, " {:>14.6e}", c[k].1);
            }
            out.push('\n');
        }
    }
    out
}
