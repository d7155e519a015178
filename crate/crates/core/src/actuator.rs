//! Actuator input constraint: saturation combined with a dead zone, reduced
//! to an equivalent clamp on the commanded torque.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActuatorError {
    #[error("invalid constraint: {0}")]
    Invalid(String),
    #[error("split fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
}

/// Saturation levels `k_max > 0 > k_min`, dead-zone offsets `m_r > 0 > m_l`
/// and branch slopes `k_r, k_l > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintParams {
    pub k_max: f64,
    pub k_min: f64,
    pub m_r: f64,
    pub m_l: f64,
    #[serde(default = "one")]
    pub k_r: f64,
    #[serde(default = "one")]
    pub k_l: f64,
}

fn one() -> f64 {
    1.0
}

impl ConstraintParams {
    /// Symmetric limits `±level` with a symmetric dead zone `±dead_zone`, unit slopes.
    pub fn symmetric(level: f64, dead_zone: f64) -> Self {
        Self {
            k_max: level,
            k_min: -level,
            m_r: dead_zone,
            m_l: -dead_zone,
            k_r: 1.0,
            k_l: 1.0,
        }
    }

    pub fn upper(&self) -> f64 {
        self.k_r * (self.k_max - self.m_r)
    }

    pub fn lower(&self) -> f64 {
        self.k_l * (self.k_min - self.m_l)
    }

    pub fn validate(&self) -> Result<(), ActuatorError> {
        let mut issues = vec![];
        if !(self.k_max > 0.0) {
            issues.push(format!("k_max must be > 0, got {}", self.k_max));
        }
        if !(self.k_min < 0.0) {
            issues.push(format!("k_min must be < 0, got {}", self.k_min));
        }
        if !(self.m_r >= 0.0) {
            issues.push(format!("m_r must be >= 0, got {}", self.m_r));
        }
        if !(self.m_l <= 0.0) {
            issues.push(format!("m_l must be <= 0, got {}", self.m_l));
        }
        if !(self.k_r > 0.0 && self.k_l > 0.0) {
            issues.push(format!("slopes must be > 0, got k_r={} k_l={}", self.k_r, self.k_l));
        }
        if issues.is_empty() && !(self.upper() > 0.0 && self.lower() < 0.0) {
            issues.push(format!(
                "clamp levels must straddle zero, got [{}, {}]",
                self.lower(),
                self.upper()
            ));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ActuatorError::Invalid(issues.join("; ")))
        }
    }

    pub fn is_active(&self, pi: f64) -> bool {
        pi >= self.upper() || pi <= self.lower()
    }
}

/// Torque actually delivered for a commanded `pi`.
pub fn saturate_deadzone(pi: f64, p: &ConstraintParams) -> f64 {
    let (lo, hi) = (p.lower(), p.upper());
    if pi >= hi {
        hi
    } else if pi <= lo {
        lo
    } else {
        pi
    }
}

/// Share of the joint's constraint assigned to the rigid-body part (`body`)
/// and the joint part (`joint`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConstraint {
    pub body: ConstraintParams,
    pub joint: ConstraintParams,
}

impl SplitConstraint {
    pub fn upper(&self) -> f64 {
        self.body.upper() + self.joint.upper()
    }

    pub fn lower(&self) -> f64 {
        self.body.lower() + self.joint.lower()
    }
}

/// Divide the clamp levels of `total` between the two parts.
///
/// Dead-zone offsets and slopes are kept; saturation levels are chosen so
/// each part's clamp level is the given share of the total one.
pub fn split_levels(total: &ConstraintParams, fraction: f64) -> Result<SplitConstraint, ActuatorError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ActuatorError::Fraction(fraction));
    }
    total.validate()?;
    let share = |f: f64| ConstraintParams {
        k_max: f * total.upper() / total.k_r + total.m_r,
        k_min: f * total.lower() / total.k_l + total.m_l,
        ..*total
    };
    Ok(SplitConstraint {
        body: share(fraction),
        joint: share(1.0 - fraction),
    })
}
