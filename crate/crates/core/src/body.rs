//! Single rigid body dynamics in its own frame.
//!
//! Inertial parameters are the 10-vector
//! `phi = [m, hx, hy, hz, Ixx, Iyy, Izz, Ixy, Iyz, Ixz]` where `h = m c` is the
//! first mass moment and the rotational inertia is taken about the frame
//! origin (not the centre of mass). With that convention the pseudo-inertia
//!
//! ```text
//!     | 0.5 tr(I) 1 - I   h |
//! L = |                     |
//!     |       h^T         m |
//! ```
//!
//! is the second moment of the mass distribution, and `phi` is physically
//! consistent exactly when `L` is positive definite.
//!
//! The free-body equation `M dV/dt + C(V) V + G = F*` uses the Coriolis
//! factorization `C(V) = crf(V) M + M crm(V)`, which is skew-symmetric, so
//! `x^T C(V) x = 0` for every `x`.

use nalgebra::{Matrix4, SMatrix, SVector};
use thiserror::Error;

use crate::spatial::{crf, crm, skew, Mat3, Mat6, Vec3, Vec6};

pub type Vec10 = SVector<f64, 10>;
pub type Mat4 = Matrix4<f64>;
pub type Mat6x10 = SMatrix<f64, 6, 10>;

/// Symmetry tolerance for pseudo-inertia input (relative to the largest entry).
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BodyError {
    #[error("pseudo-inertia is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("pseudo-inertia is not symmetric (asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
}

/// The ten standard inertial parameters of a rigid body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertialParams(pub Vec10);

impl InertialParams {
    pub fn zero() -> Self {
        Self(Vec10::zeros())
    }

    pub fn from_vec(phi: Vec10) -> Self {
        Self(phi)
    }

    /// From mass, centre of mass and rotational inertia about the centre of mass.
    pub fn from_com(mass: f64, com: Vec3, inertia_com: Mat3) -> Self {
        let h = com * mass;
        let shift = (Mat3::identity() * com.norm_squared() - com * com.transpose()) * mass;
        Self::from_parts(mass, h, inertia_com + shift)
    }

    /// From mass, first mass moment and rotational inertia about the frame origin.
    pub fn from_parts(mass: f64, first_moment: Vec3, inertia: Mat3) -> Self {
        let i = &inertia;
        Self(Vec10::from_column_slice(&[
            mass,
            first_moment.x,
            first_moment.y,
            first_moment.z,
            i[(0, 0)],
            i[(1, 1)],
            i[(2, 2)],
            i[(0, 1)],
            i[(1, 2)],
            i[(0, 2)],
        ]))
    }

    pub fn as_vec(&self) -> &Vec10 {
        &self.0
    }

    pub fn mass(&self) -> f64 {
        self.0[0]
    }

    pub fn first_moment(&self) -> Vec3 {
        Vec3::new(self.0[1], self.0[2], self.0[3])
    }

    /// Rotational inertia about the frame origin.
    pub fn inertia(&self) -> Mat3 {
        let p = &self.0;
        Mat3::new(p[4], p[7], p[9], p[7], p[5], p[8], p[9], p[8], p[6])
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0 * factor)
    }

    pub fn is_physically_consistent(&self) -> bool {
        phi_to_pseudo(self).is_positive_definite()
    }
}

impl std::ops::Add for InertialParams {
    type Output = InertialParams;

    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

/// 4x4 pseudo-inertia matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoInertia(pub Mat4);

impl PseudoInertia {
    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn is_positive_definite(&self) -> bool {
        self.0.cholesky().is_some()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (self.0 + self.0.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }

    fn check_pd(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::U4>, BodyError> {
        self.0.cholesky().ok_or(BodyError::NotPositiveDefinite {
            min_eigenvalue: self.min_eigenvalue(),
        })
    }
}

pub fn phi_to_pseudo(phi: &InertialParams) -> PseudoInertia {
    let inertia = phi.inertia();
    let sigma = Mat3::identity() * (0.5 * inertia.trace()) - inertia;
    let h = phi.first_moment();
    let mut l = Mat4::zeros();
    l.fixed_view_mut::<3, 3>(0, 0).copy_from(&sigma);
    l.fixed_view_mut::<3, 1>(0, 3).copy_from(&h);
    l.fixed_view_mut::<1, 3>(3, 0).copy_from(&h.transpose());
    l[(3, 3)] = phi.mass();
    PseudoInertia(l)
}

pub fn pseudo_to_phi(l: &PseudoInertia) -> Result<InertialParams, BodyError> {
    let m = &l.0;
    let asymmetry = (m - m.transpose()).abs().max();
    if asymmetry > SYMMETRY_TOL * (1.0 + m.abs().max()) {
        return Err(BodyError::NotSymmetric { asymmetry });
    }
    let sigma: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
    let inertia = Mat3::identity() * sigma.trace() - sigma;
    let h = Vec3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    Ok(InertialParams::from_parts(m[(3, 3)], h, inertia))
}

/// The unique symmetric `S(s)` with `phi^T s = tr(L(phi) S(s))`.
pub fn coeff_to_symmetric(s: &Vec10) -> Mat4 {
    Mat4::new(
        s[5] + s[6],
        -0.5 * s[7],
        -0.5 * s[9],
        0.5 * s[1],
        -0.5 * s[7],
        s[4] + s[6],
        -0.5 * s[8],
        0.5 * s[2],
        -0.5 * s[9],
        -0.5 * s[8],
        s[4] + s[5],
        0.5 * s[3],
        0.5 * s[1],
        0.5 * s[2],
        0.5 * s[3],
        s[0],
    )
}

/// Mass matrix, Coriolis matrix and gravity wrench of one body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyDynTerms {
    pub mass: Mat6,
    pub coriolis: Mat6,
    pub gravity: Vec6,
}

impl BodyDynTerms {
    /// `M a + C(V) w + G`.
    pub fn wrench(&self, accel: &Vec6, velocity_factor: &Vec6) -> Vec6 {
        self.mass * accel + self.coriolis * velocity_factor + self.gravity
    }
}

/// Spatial inertia about the frame origin, linear-first ordering.
pub fn spatial_inertia(phi: &InertialParams) -> Mat6 {
    let hx = skew(&phi.first_moment());
    let mut m = Mat6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(Mat3::identity() * phi.mass()));
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hx));
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&hx);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&phi.inertia());
    m
}

/// Gravity term `G` for gravity acceleration `g` expressed in the body frame.
pub fn gravity_wrench(phi: &InertialParams, g: &Vec3) -> Vec6 {
    let f = -g * phi.mass();
    let n = -phi.first_moment().cross(g);
    Vec6::new(f.x, f.y, f.z, n.x, n.y, n.z)
}

pub fn dynamics_terms(
    phi: &InertialParams,
    velocity: &Vec6,
    gravity_in_frame: &Vec3,
) -> Result<BodyDynTerms, BodyError> {
    phi_to_pseudo(phi).check_pd()?;
    Ok(dynamics_terms_unchecked(phi, velocity, gravity_in_frame))
}

pub(crate) fn dynamics_terms_unchecked(
    phi: &InertialParams,
    velocity: &Vec6,
    gravity_in_frame: &Vec3,
) -> BodyDynTerms {
    let mass = spatial_inertia(phi);
    let coriolis = crf(velocity) * mass + mass * crm(velocity);
    BodyDynTerms {
        mass,
        coriolis,
        gravity: gravity_wrench(phi, gravity_in_frame),
    }
}

/// Linear-in-parameters map with `Y phi = M a_r + C(V) V_r + G`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regressor(pub Mat6x10);

impl Regressor {
    pub fn matrix(&self) -> &Mat6x10 {
        &self.0
    }

    pub fn apply(&self, phi: &InertialParams) -> Vec6 {
        self.0 * phi.0
    }

    /// `Y^T e`, the coefficient vector fed to the adaptation law.
    pub fn transpose_apply(&self, e: &Vec6) -> Vec10 {
        self.0.transpose() * e
    }
}

// Columns of `M(phi) z` with respect to phi.
fn momentum_columns(z: &Vec6) -> Mat6x10 {
    let zv = Vec3::new(z[0], z[1], z[2]);
    let zw = Vec3::new(z[3], z[4], z[5]);
    let mut a = Mat6x10::zeros();
    a.fixed_view_mut::<3, 1>(0, 0).copy_from(&zv);
    a.fixed_view_mut::<3, 3>(0, 1).copy_from(&skew(&zw));
    a.fixed_view_mut::<3, 3>(3, 1).copy_from(&(-skew(&zv)));
    // I w with I = [[Ixx Ixy Ixz] [Ixy Iyy Iyz] [Ixz Iyz Izz]]
    a[(3, 4)] = zw.x;
    a[(3, 7)] = zw.y;
    a[(3, 9)] = zw.z;
    a[(4, 5)] = zw.y;
    a[(4, 7)] = zw.x;
    a[(4, 8)] = zw.z;
    a[(5, 6)] = zw.z;
    a[(5, 8)] = zw.y;
    a[(5, 9)] = zw.x;
    a
}

pub fn regressor(
    velocity: &Vec6,
    required_velocity: &Vec6,
    required_accel: &Vec6,
    gravity_in_frame: &Vec3,
) -> Regressor {
    let shifted = required_accel + crm(velocity) * required_velocity;
    let mut y = momentum_columns(&shifted) + crf(velocity) * momentum_columns(required_velocity);
    let g = gravity_in_frame;
    for k in 0..3 {
        y[(k, 0)] -= g[k];
    }
    let gx = skew(g);
    for r in 0..3 {
        for c in 0..3 {
            y[(3 + r, 1 + c)] += gx[(r, c)];
        }
    }
    Regressor(y)
}

/// Log-determinant divergence between a true and an estimated pseudo-inertia.
pub fn bregman(truth: &PseudoInertia, estimate: &PseudoInertia) -> Result<f64, BodyError> {
    let chol_t = truth.check_pd()?;
    let chol_e = estimate.check_pd()?;
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::U4>| {
        2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    };
    let trace = chol_e.solve(&truth.0).trace();
    Ok(logdet(&chol_e) - logdet(&chol_t) + trace - 4.0)
}
