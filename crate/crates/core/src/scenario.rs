//! Scenario files: TOML with one table per concern. Missing gain fields
//! fall back to the reference gain set, a missing `dt` to 1 ms.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{split_levels, ConstraintParams, SplitConstraint};
use crate::body::{phi_to_pseudo, InertialParams};
use crate::chain::{BodyInertia, ChainError, ChainGeometry, JointAxis, JointGeometry};
use crate::controller::{ControlGains, Desired, Estimates, BODY_NET_INPUTS, JOINT_NET_INPUTS};
use crate::estimator::{joint_pseudo_inertia, InputScaling, NalState, RbfNet};
use crate::spatial::{rpy_rotation, Mat3, Vec3, Vec6};

pub const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default_sim.scenario");
pub const BARRIER_BREACH_SCENARIO: &str = include_str!("../scenarios/barrier_breach.scenario");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}: field `{field}`: {message}")]
    Parse {
        origin: String,
        field: String,
        message: String,
    },
    #[error("{origin}: invalid scenario:\n  - {}", issues.join("\n  - "))]
    Invalid { origin: String, issues: Vec<String> },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[default]
    Vdc,
    Pd,
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerKind::Vdc => "vdc",
            ControllerKind::Pd => "pd",
        })
    }
}

/// A scalar applied to every joint, or one value per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerJoint {
    All(f64),
    Each(Vec<f64>),
}

impl PerJoint {
    pub fn expand(&self, n: usize) -> DVector<f64> {
        match self {
            PerJoint::All(v) => DVector::from_element(n, *v),
            PerJoint::Each(v) => DVector::from_fn(n, |i, _| v.get(i).copied().unwrap_or(f64::NAN)),
        }
    }

    fn check(&self, name: &str, n: usize, positive: bool, issues: &mut Vec<String>) {
        if let PerJoint::Each(v) = self {
            if v.len() != n {
                issues.push(format!("{name}: expected {n} values, found {}", v.len()));
                return;
            }
        }
        let bad = self.expand(n).iter().any(|x| !x.is_finite() || (positive && *x <= 0.0));
        if bad {
            issues.push(format!("{name}: values must be finite{}", if positive { " and > 0" } else { "" }));
        }
    }
}

fn default_duration() -> f64 {
    40.0
}
fn default_dt() -> f64 {
    0.001
}
fn default_seed() -> u64 {
    1
}
fn default_substeps() -> u32 {
    4
}
fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -crate::chain::STANDARD_GRAVITY]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Plant integration steps per control period.
    #[serde(default = "default_substeps")]
    pub substeps: u32,
    #[serde(default)]
    pub initial_q: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_qdot: Option<Vec<f64>>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            controller: ControllerKind::Vdc,
            duration: default_duration(),
            dt: default_dt(),
            seed: default_seed(),
            substeps: default_substeps(),
            initial_q: None,
            initial_qdot: None,
            gravity: default_gravity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisName {
    X,
    Y,
    Z,
}

impl From<AxisName> for JointAxis {
    fn from(a: AxisName) -> Self {
        match a {
            AxisName::X => JointAxis::X,
            AxisName::Y => JointAxis::Y,
            AxisName::Z => JointAxis::Z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSection {
    pub axis: AxisName,
    /// Roll, pitch, yaw in degrees; `Rz(yaw) Ry(pitch) Rx(roll)`.
    #[serde(default)]
    pub pre_rotation_deg: [f64; 3],
    #[serde(default)]
    pub offset: [f64; 3],
    #[serde(default)]
    pub link_rotation_deg: [f64; 3],
    #[serde(default)]
    pub link_offset: [f64; 3],
    pub motor_inertia: f64,
    pub human_inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    pub mass: f64,
    pub com: [f64; 3],
    /// `[Ixx, Iyy, Izz, Ixy, Iyz, Ixz]` about the center of mass.
    pub inertia_com: [f64; 6],
}

impl SegmentSection {
    pub fn params(&self) -> InertialParams {
        let [ixx, iyy, izz, ixy, iyz, ixz] = self.inertia_com;
        let ic = Mat3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz);
        InertialParams::from_com(self.mass, Vec3::from(self.com), ic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySection {
    pub robot: SegmentSection,
    pub human: SegmentSection,
}

fn pj(v: f64) -> PerJoint {
    PerJoint::All(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainSection {
    pub lambda: PerJoint,
    /// Diagonal of the body velocity gain.
    pub k_body_d: f64,
    pub k_body_i: f64,
    pub gamma_w: f64,
    pub gamma_1: f64,
    pub gamma_2: f64,
    pub k_d: PerJoint,
    pub k_i: PerJoint,
    pub zeta: f64,
    pub beta_1: f64,
    pub beta_2: f64,
    pub k_b_deg: f64,
    pub k_p: PerJoint,
    pub k_v: PerJoint,
}

impl Default for GainSection {
    fn default() -> Self {
        Self {
            lambda: pj(5.0),
            k_body_d: 3.0,
            k_body_i: 5.0,
            gamma_w: 10.0,
            gamma_1: 10.0,
            gamma_2: 10.0,
            k_d: pj(1.5),
            k_i: pj(5.0),
            zeta: 10.0,
            beta_1: 10.0,
            beta_2: 10.0,
            k_b_deg: 3.0,
            k_p: pj(100.0),
            k_v: pj(15.0),
        }
    }
}

/// One joint's desired angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrajectorySpec {
    Constant {
        value: f64,
    },
    /// `offset + amplitude sin(omega t + phase)`, omega in rad/s.
    Sinusoid {
        amplitude: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl TrajectorySpec {
    /// Angle, rate and acceleration at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        match *self {
            TrajectorySpec::Constant { value } => (value, 0.0, 0.0),
            TrajectorySpec::Sinusoid {
                amplitude,
                omega,
                phase,
                offset,
            } => {
                let (s, c) = (omega * t + phase).sin_cos();
                (
                    offset + amplitude * s,
                    amplitude * omega * c,
                    -amplitude * omega * omega * s,
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub joints: Vec<TrajectorySpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wave {
    pub amplitude: f64,
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Wave {
    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceSection {
    pub enabled: bool,
    /// Six components, force then moment, in each body frame.
    pub wrench: Vec<Wave>,
    /// Multiplier per link.
    pub link_scale: Option<Vec<f64>>,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        Self {
            enabled: false,
            wrench: vec![],
            link_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct HumanTorqueSection {
    pub enabled: bool,
    /// One wave per joint.
    pub joints: Vec<Wave>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintGroup {
    /// 1-based joint numbers.
    pub joints: Vec<usize>,
    #[serde(flatten)]
    pub params: ConstraintParams,
}

fn default_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub group: Vec<ConstraintGroup>,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        Self {
            enabled: false,
            split_fraction: default_fraction(),
            group: vec![],
        }
    }
}

fn default_units() -> usize {
    crate::estimator::DEFAULT_UNITS
}
fn default_initial_fraction() -> f64 {
    0.5
}
fn default_range() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    #[serde(default = "default_units")]
    pub units: usize,
    /// Initial inertial estimates as a fraction of the true augmented values.
    #[serde(default = "default_initial_fraction")]
    pub initial_fraction: f64,
    /// Map network inputs from `[-range, range]` onto `[-1, 1]`.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_range")]
    pub body_input_range: f64,
    #[serde(default = "default_range")]
    pub joint_input_range: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            units: default_units(),
            initial_fraction: default_initial_fraction(),
            normalize: false,
            body_input_range: default_range(),
            joint_input_range: default_range(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub run: RunSection,
    pub joint: Vec<JointSection>,
    pub body: Vec<BodySection>,
    #[serde(default)]
    pub gains: GainSection,
    pub trajectory: TrajectorySection,
    #[serde(default)]
    pub disturbance: DisturbanceSection,
    #[serde(default)]
    pub human_torque: HumanTorqueSection,
    #[serde(default)]
    pub constraints: ConstraintSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
}

/// Parse and validate scenario text; `origin` names the source in errors.
pub fn parse_scenario(text: &str, origin: &str) -> Result<ScenarioConfig, ScenarioError> {
    let parse_err = |field: String, message: String| ScenarioError::Parse {
        origin: origin.to_string(),
        field,
        message,
    };
    let de = toml::Deserializer::parse(text).map_err(|e| parse_err("<document>".into(), e.to_string()))?;
    let config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        parse_err(field, e.into_inner().to_string().trim_end().to_string())
    })?;
    let issues = config.issues();
    if !issues.is_empty() {
        return Err(ScenarioError::Invalid {
            origin: origin.to_string(),
            issues,
        });
    }
    Ok(config)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text, &path.display().to_string())
}

pub fn default_scenario() -> ScenarioConfig {
    parse_scenario(DEFAULT_SCENARIO, "default_sim.scenario").expect("bundled scenario is valid")
}

impl ScenarioConfig {
    pub fn dof(&self) -> usize {
        self.joint.len()
    }

    pub fn steps(&self) -> usize {
        (self.run.duration / self.run.dt).round() as usize
    }

    /// Every invariant violation, in file order.
    pub fn issues(&self) -> Vec<String> {
        let n = self.dof();
        let mut issues = vec![];
        let mut need = |ok: bool, msg: String| {
            if !ok {
                issues.push(msg);
            }
        };
        need(n > 0 && n < 255, format!("joint: need between 1 and 254 joints, found {n}"));
        let r = &self.run;
        need(r.dt > 0.0 && r.dt.is_finite(), format!("run.dt: must be > 0, got {}", r.dt));
        need(
            r.duration.is_finite() && r.duration >= r.dt,
            format!("run.duration: must be >= dt, got {}", r.duration),
        );
        need(r.substeps >= 1, "run.substeps: must be >= 1".into());
        for (name, v) in [("run.initial_q", &r.initial_q), ("run.initial_qdot", &r.initial_qdot)] {
            if let Some(v) = v {
                need(v.len() == n, format!("{name}: expected {n} values, found {}", v.len()));
                need(v.iter().all(|x| x.is_finite()), format!("{name}: values must be finite"));
            }
        }
        need(self.body.len() == n, format!("body: expected {n} entries, found {}", self.body.len()));
        for (i, j) in self.joint.iter().enumerate() {
            need(
                j.motor_inertia >= 0.0 && j.human_inertia >= 0.0 && j.motor_inertia + j.human_inertia > 0.0,
                format!("joint[{i}]: motor_inertia + human_inertia must be > 0"),
            );
        }
        for (i, b) in self.body.iter().enumerate() {
            for (part, seg) in [("robot", &b.robot), ("human", &b.human)] {
                need(
                    seg.params().is_physically_consistent(),
                    format!("body[{i}].{part}: inertial parameters are not physically consistent"),
                );
            }
        }
        let g = &self.gains;
        for (name, v) in [
            ("gains.lambda", &g.lambda),
            ("gains.k_d", &g.k_d),
            ("gains.k_i", &g.k_i),
            ("gains.k_p", &g.k_p),
            ("gains.k_v", &g.k_v),
        ] {
            v.check(name, n, true, &mut issues);
        }
        let mut need = |ok: bool, msg: String| {
            if !ok {
                issues.push(msg);
            }
        };
        for (name, v) in [
            ("gains.k_body_d", g.k_body_d),
            ("gains.k_body_i", g.k_body_i),
            ("gains.gamma_w", g.gamma_w),
            ("gains.gamma_1", g.gamma_1),
            ("gains.gamma_2", g.gamma_2),
            ("gains.zeta", g.zeta),
            ("gains.beta_1", g.beta_1),
            ("gains.beta_2", g.beta_2),
            ("gains.k_b_deg", g.k_b_deg),
        ] {
            need(v > 0.0 && v.is_finite(), format!("{name}: must be > 0, got {v}"));
        }
        need(
            self.trajectory.joints.len() == n,
            format!("trajectory.joints: expected {n} entries, found {}", self.trajectory.joints.len()),
        );
        let d = &self.disturbance;
        if d.enabled {
            need(d.wrench.len() == 6, format!("disturbance.wrench: expected 6 waves, found {}", d.wrench.len()));
        }
        if let Some(s) = &d.link_scale {
            need(s.len() == n, format!("disturbance.link_scale: expected {n} values, found {}", s.len()));
        }
        let h = &self.human_torque;
        if h.enabled {
            need(h.joints.len() == n, format!("human_torque.joints: expected {n} waves, found {}", h.joints.len()));
        }
        let c = &self.constraints;
        if c.enabled {
            need(
                c.split_fraction > 0.0 && c.split_fraction < 1.0,
                format!("constraints.split_fraction: must lie in (0, 1), got {}", c.split_fraction),
            );
            let mut covered = vec![0usize; n];
            for (k, grp) in c.group.iter().enumerate() {
                if let Err(e) = grp.params.validate() {
                    issues.push(format!("constraints.group[{k}]: {e}"));
                }
                for &j in &grp.joints {
                    if (1..=n).contains(&j) {
                        covered[j - 1] += 1;
                    } else {
                        issues.push(format!("constraints.group[{k}].joints: no joint {j}"));
                    }
                }
            }
            for (j, count) in covered.iter().enumerate() {
                if *count != 1 {
                    issues.push(format!("constraints: joint {} is covered by {count} groups, expected 1", j + 1));
                }
            }
        }
        let e = &self.estimator;
        let mut need = |ok: bool, msg: String| {
            if !ok {
                issues.push(msg);
            }
        };
        need(e.units > 0, "estimator.units: must be > 0".into());
        need(
            e.initial_fraction > 0.0 && e.initial_fraction.is_finite(),
            format!("estimator.initial_fraction: must be > 0, got {}", e.initial_fraction),
        );
        need(
            e.body_input_range > 0.0 && e.joint_input_range > 0.0,
            "estimator input ranges must be > 0".into(),
        );
        issues
    }

    pub fn geometry(&self) -> Result<ChainGeometry, ScenarioError> {
        let deg = |v: [f64; 3]| rpy_rotation(v[0].to_radians(), v[1].to_radians(), v[2].to_radians());
        let joints = self
            .joint
            .iter()
            .map(|j| JointGeometry {
                axis: j.axis.into(),
                pre_rotation: deg(j.pre_rotation_deg),
                offset: Vec3::from(j.offset),
                link_rotation: deg(j.link_rotation_deg),
                link_offset: Vec3::from(j.link_offset),
            })
            .collect();
        let bodies = self
            .body
            .iter()
            .map(|b| BodyInertia {
                robot: b.robot.params(),
                human: b.human.params(),
            })
            .collect();
        Ok(ChainGeometry::new(
            joints,
            bodies,
            self.joint.iter().map(|j| j.motor_inertia).collect(),
            self.joint.iter().map(|j| j.human_inertia).collect(),
            Vec3::from(self.run.gravity),
        )?)
    }

    pub fn gains(&self) -> ControlGains {
        let n = self.dof();
        let g = &self.gains;
        let units = self.estimator.units;
        ControlGains {
            lambda: g.lambda.expand(n),
            k_body_d: crate::spatial::Mat6::identity() * g.k_body_d,
            k_body_i: crate::spatial::Mat6::identity() * g.k_body_i,
            gamma_w: DMatrix::identity(units, units) * g.gamma_w,
            gamma_1: g.gamma_1,
            gamma_2: g.gamma_2,
            k_d: g.k_d.expand(n),
            k_i: g.k_i.expand(n),
            zeta: g.zeta,
            beta_1: g.beta_1,
            beta_2: g.beta_2,
            k_b: g.k_b_deg.to_radians(),
            k_p: g.k_p.expand(n),
            k_v: g.k_v.expand(n),
        }
    }

    pub fn initial_q(&self) -> DVector<f64> {
        match &self.run.initial_q {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(self.dof()),
        }
    }

    pub fn initial_qdot(&self) -> DVector<f64> {
        match &self.run.initial_qdot {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(self.dof()),
        }
    }

    pub fn desired(&self, t: f64) -> Desired {
        let n = self.dof();
        let vals: Vec<_> = self.trajectory.joints.iter().map(|s| s.eval(t)).collect();
        Desired {
            q: DVector::from_fn(n, |i, _| vals[i].0),
            qdot: DVector::from_fn(n, |i, _| vals[i].1),
            qddot: DVector::from_fn(n, |i, _| vals[i].2),
        }
    }

    /// Disturbance wrench of every body at `t`.
    pub fn disturbance(&self, t: f64) -> Vec<Vec6> {
        let n = self.dof();
        let d = &self.disturbance;
        if !d.enabled {
            return vec![Vec6::zeros(); n];
        }
        let base = Vec6::from_fn(|k, _| d.wrench[k].at(t));
        (0..n)
            .map(|i| base * d.link_scale.as_ref().map_or(1.0, |s| s[i]))
            .collect()
    }

    pub fn human_torque(&self, t: f64) -> DVector<f64> {
        let n = self.dof();
        let h = &self.human_torque;
        if !h.enabled {
            return DVector::zeros(n);
        }
        DVector::from_fn(n, |i, _| h.joints[i].at(t))
    }

    /// Actuator constraint of every joint, `None` when disabled.
    pub fn constraints(&self) -> Option<Vec<ConstraintParams>> {
        if !self.constraints.enabled {
            return None;
        }
        let mut out = vec![None; self.dof()];
        for g in &self.constraints.group {
            for &j in &g.joints {
                out[j - 1] = Some(g.params);
            }
        }
        Some(out.into_iter().map(|c| c.expect("validated coverage")).collect())
    }

    pub fn split_constraints(&self) -> Option<Vec<SplitConstraint>> {
        self.constraints().map(|cs| {
            cs.iter()
                .map(|c| split_levels(c, self.constraints.split_fraction).expect("validated"))
                .collect()
        })
    }

    /// Initial estimator states: scaled true parameters and seeded networks.
    pub fn initial_estimates(&self, geom: &ChainGeometry) -> Estimates {
        let n = self.dof();
        let e = &self.estimator;
        let gains = self.gains();
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed);
        let scaling = |dim: usize, range: f64| InputScaling {
            lo: DVector::from_element(dim, -range),
            hi: DVector::from_element(dim, range),
        };
        let mut make = |dim: usize, out: usize, range: f64| {
            let net = RbfNet::random(&mut rng, e.units, dim, out);
            if e.normalize {
                net.with_scaling(scaling(dim, range)).expect("matching dimensions")
            } else {
                net
            }
        };
        let body_nets = (0..n).map(|_| make(BODY_NET_INPUTS, 6, e.body_input_range)).collect();
        let joint_nets = (0..n).map(|_| make(JOINT_NET_INPUTS, 1, e.joint_input_range)).collect();
        Estimates {
            body_nal: (0..n)
                .map(|i| NalState {
                    l_hat: phi_to_pseudo(&geom.augmented_params(i).scaled(e.initial_fraction)),
                    gain: gains.gamma_1,
                })
                .collect(),
            joint_nal: (0..n)
                .map(|i| NalState {
                    l_hat: joint_pseudo_inertia(geom.joint_inertia(i) * e.initial_fraction),
                    gain: gains.zeta,
                })
                .collect(),
            body_nets,
            joint_nets,
        }
    }
}
