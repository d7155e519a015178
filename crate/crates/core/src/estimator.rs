//! Online estimators: Gaussian RBF networks with an additive offset, and the
//! natural adaptation law on pseudo-inertia matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::body::{coeff_to_symmetric, BodyError, Mat4, PseudoInertia, Vec10};

pub const DEFAULT_UNITS: usize = 9;
pub const MAX_HALVINGS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("input dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("RBF widths must be positive")]
    Width,
    #[error("adaptation step lost positive definiteness after {halvings} halvings (min eigenvalue {min_eigenvalue:e})")]
    NalDiverged { halvings: u32, min_eigenvalue: f64 },
    #[error(transparent)]
    Body(#[from] BodyError),
}

/// Per-input affine map of `[lo, hi]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl InputScaling {
    pub fn apply(&self, chi: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(chi.len(), |i, _| {
            let span = self.hi[i] - self.lo[i];
            if span > 0.0 {
                2.0 * (chi[i] - self.lo[i]) / span - 1.0
            } else {
                chi[i]
            }
        })
    }
}

/// `Z(chi) = W^T psi(chi) + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfNet {
    /// One center per row.
    centers: DMatrix<f64>,
    widths: DVector<f64>,
    pub w_hat: DMatrix<f64>,
    pub eps_hat: DVector<f64>,
    scaling: Option<InputScaling>,
}

impl RbfNet {
    /// Unit widths, centers uniform in `[-1, 1]`, zero weights and offset.
    pub fn random<R: Rng>(rng: &mut R, units: usize, input_dim: usize, out_dim: usize) -> Self {
        let centers = DMatrix::from_fn(units, input_dim, |_, _| rng.random_range(-1.0..=1.0));
        Self {
            centers,
            widths: DVector::from_element(units, 1.0),
            w_hat: DMatrix::zeros(units, out_dim),
            eps_hat: DVector::zeros(out_dim),
            scaling: None,
        }
    }

    pub fn from_centers(
        centers: DMatrix<f64>,
        widths: DVector<f64>,
        out_dim: usize,
    ) -> Result<Self, EstimatorError> {
        if widths.len() != centers.nrows() {
            return Err(EstimatorError::Dimension {
                expected: centers.nrows(),
                found: widths.len(),
            });
        }
        if !widths.iter().all(|w| *w > 0.0) {
            return Err(EstimatorError::Width);
        }
        let units = centers.nrows();
        Ok(Self {
            centers,
            widths,
            w_hat: DMatrix::zeros(units, out_dim),
            eps_hat: DVector::zeros(out_dim),
            scaling: None,
        })
    }

    pub fn with_scaling(mut self, scaling: InputScaling) -> Result<Self, EstimatorError> {
        for v in [&scaling.lo, &scaling.hi] {
            self.check_dim(v)?;
        }
        self.scaling = Some(scaling);
        Ok(self)
    }

    pub fn units(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.eps_hat.len()
    }

    pub fn centers(&self) -> &DMatrix<f64> {
        &self.centers
    }

    fn check_dim(&self, chi: &DVector<f64>) -> Result<(), EstimatorError> {
        if chi.len() != self.input_dim() {
            return Err(EstimatorError::Dimension {
                expected: self.input_dim(),
                found: chi.len(),
            });
        }
        Ok(())
    }

    pub fn basis(&self, chi: &DVector<f64>) -> Result<DVector<f64>, EstimatorError> {
        self.check_dim(chi)?;
        let x = match &self.scaling {
            Some(s) => s.apply(chi),
            None => chi.clone(),
        };
        Ok(DVector::from_fn(self.units(), |k, _| {
            let d2: f64 = self
                .centers
                .row(k)
                .iter()
                .zip(x.iter())
                .map(|(c, xi)| (xi - c).powi(2))
                .sum();
            (-d2 / self.widths[k].powi(2)).exp()
        }))
    }

    pub fn estimate(&self, chi: &DVector<f64>) -> Result<DVector<f64>, EstimatorError> {
        let psi = self.basis(chi)?;
        Ok(self.output(&psi))
    }

    pub fn output(&self, psi: &DVector<f64>) -> DVector<f64> {
        self.w_hat.tr_mul(psi) + &self.eps_hat
    }

    /// `W += dt Gamma psi err^T`, `eps += dt gamma2 err`.
    pub fn update_body(
        &mut self,
        psi: &DVector<f64>,
        err: &DVector<f64>,
        gamma: &DMatrix<f64>,
        gamma2: f64,
        dt: f64,
    ) {
        self.w_hat += (gamma * psi) * err.transpose() * dt;
        self.eps_hat += err * (gamma2 * dt);
    }

    /// Scalar-output analogue: `W += dt beta1 err psi`, `eps += dt beta2 err`.
    pub fn update_joint(&mut self, psi: &DVector<f64>, err: f64, beta1: f64, beta2: f64, dt: f64) {
        let mut col = self.w_hat.column_mut(0);
        col.axpy(dt * beta1 * err, psi, 1.0);
        self.eps_hat[0] += dt * beta2 * err;
    }

    pub fn weight_norm(&self) -> f64 {
        self.w_hat.norm()
    }

    pub fn offset_norm(&self) -> f64 {
        self.eps_hat.norm()
    }
}

/// Pseudo-inertia estimate driven by the natural adaptation law with gain
/// `gain` (the law integrates `L S L / gain`).
#[derive(Debug, Clone, PartialEq)]
pub struct NalState {
    pub l_hat: PseudoInertia,
    pub gain: f64,
}

/// Outcome of one accepted adaptation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NalStep {
    pub halvings: u32,
    pub min_eigenvalue: f64,
}

/// One explicit step `L <- L + (dt/gain) L S L`, symmetrized. If the result
/// is not positive definite the step is halved, up to [`MAX_HALVINGS`] times.
pub fn nal_step(state: &NalState, s: &Mat4, dt: f64) -> Result<(NalState, NalStep), EstimatorError> {
    let l = state.l_hat.matrix();
    let sym_s = (s + s.transpose()) * 0.5;
    let rate = l * sym_s * l / state.gain;
    let mut h = dt;
    for halvings in 0..=MAX_HALVINGS {
        let next = l + rate * h;
        let next = PseudoInertia((next + next.transpose()) * 0.5);
        if next.is_positive_definite() {
            let min_eigenvalue = next.min_eigenvalue();
            return Ok((
                NalState {
                    l_hat: next,
                    gain: state.gain,
                },
                NalStep {
                    halvings,
                    min_eigenvalue,
                },
            ));
        }
        h *= 0.5;
    }
    let last = PseudoInertia(l + rate * h);
    Err(EstimatorError::NalDiverged {
        halvings: MAX_HALVINGS,
        min_eigenvalue: last.min_eigenvalue(),
    })
}

/// Symmetric adaptation matrix from regressor coefficients `s = Y^T err`.
pub fn adaptation_matrix(s: &Vec10) -> Mat4 {
    coeff_to_symmetric(s)
}

/// Embed a scalar joint inertia as a pseudo-inertia: `diag(1, 1, 1, inertia)`.
/// The inertia sits in the mass slot, so a regressor row carrying only the
/// required joint acceleration in its first entry adapts it alone.
pub fn joint_pseudo_inertia(inertia: f64) -> PseudoInertia {
    PseudoInertia(Mat4::from_diagonal(&nalgebra::Vector4::new(1.0, 1.0, 1.0, inertia)))
}

pub fn joint_inertia_of(l: &PseudoInertia) -> f64 {
    l.matrix()[(3, 3)]
}

/// Regressor coefficients of a joint subsystem: `Y_a = [qddot_r, 0, ..]`.
pub fn joint_adaptation_coeff(qddot_r: f64, err: f64) -> Vec10 {
    let mut s = Vec10::zeros();
    s[0] = qddot_r * err;
    s
}
