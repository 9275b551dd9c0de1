//! Sieve bases `Φ(X₀)` built coordinatewise from baseline covariates, and
//! the projection onto their column space.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SieveFamily {
    Legendre,
    Polynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SieveSpec {
    pub family: SieveFamily,
    #[serde(rename = "order")]
    pub max_order: usize,
    #[serde(default = "default_true")]
    pub include_intercept: bool,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SieveSpec {
    fn default() -> Self {
        Self { family: SieveFamily::Legendre, max_order: 2, include_intercept: true, standardize: true }
    }
}

impl SieveSpec {
    pub fn legendre(order: usize) -> Self {
        Self { max_order: order, ..Self::default() }
    }

    pub fn polynomial(order: usize) -> Self {
        Self { family: SieveFamily::Polynomial, max_order: order, include_intercept: true, standardize: false }
    }

    /// `d_Φ` for `d0` baseline covariates.
    pub fn dim(&self, d0: usize) -> usize {
        usize::from(self.include_intercept) + self.max_order * d0
    }
}

/// Legendre polynomials `Υ₀(x), …, Υ_J(x)` by the three-term recurrence.
pub fn legendre_values(x: f64, order: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(1.0);
    if order >= 1 {
        out.push(x);
    }
    for j in 2..=order {
        let jf = j as f64;
        let v = ((2.0 * jf - 1.0) * out[j - 1] * x - (jf - 1.0) * out[j - 2]) / jf;
        out.push(v);
    }
    out
}

/// A fitted basis: remembers the column-wise affine map learned on the
/// training covariates so that new subjects can be expanded consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveBasis {
    pub spec: SieveSpec,
    /// Per column `(shift, scale)`; the standardized value is `(x − shift)·scale`.
    pub affine: Vec<(f64, f64)>,
}

impl SieveBasis {
    pub fn fit(x0: &Matrix, spec: SieveSpec) -> Result<Self> {
        if x0.rows() == 0 {
            return Err(Error::argument("sieve basis needs at least one subject"));
        }
        let affine = (0..x0.cols())
            .map(|j| {
                if !spec.standardize {
                    return (0.0, 1.0);
                }
                let col = x0.column(j);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
                    warn!("baseline covariate {} has zero variance; mapped to 0", j + 1);
                    (lo, 0.0)
                } else {
                    ((hi + lo) / 2.0, 2.0 / (hi - lo))
                }
            })
            .collect();
        Ok(Self { spec, affine })
    }

    /// `Φ` for (possibly new) subjects with the stored standardization.
    pub fn transform(&self, x0: &Matrix) -> Result<Matrix> {
        if x0.cols() != self.affine.len() {
            return Err(Error::argument(format!(
                "basis fitted on {} covariates, got {}",
                self.affine.len(),
                x0.cols()
            )));
        }
        let d0 = x0.cols();
        let order = self.spec.max_order;
        let offset = usize::from(self.spec.include_intercept);
        let mut phi = Matrix::zeros(x0.rows(), self.spec.dim(d0));
        for i in 0..x0.rows() {
            let row = phi.row_mut(i);
            if offset == 1 {
                row[0] = 1.0;
            }
            for (c, &(shift, scale)) in self.affine.iter().enumerate() {
                let x = (x0[(i, c)] - shift) * scale;
                // Column layout: order-major, covariate-minor.
                match self.spec.family {
                    SieveFamily::Legendre => {
                        let v = legendre_values(x, order);
                        for j in 1..=order {
                            row[offset + (j - 1) * d0 + c] = v[j];
                        }
                    }
                    SieveFamily::Polynomial => {
                        let mut p = 1.0;
                        for j in 1..=order {
                            p *= x;
                            row[offset + (j - 1) * d0 + c] = p;
                        }
                    }
                }
            }
        }
        Ok(phi)
    }
}

/// `Φ(X₀)` with columns `[1, Υ₁(x₀), …, Υ_J(x₀)]`, each block spanning all
/// baseline covariates.
pub fn build_basis(x0: &Matrix, spec: SieveSpec) -> Result<Matrix> {
    SieveBasis::fit(x0, spec)?.transform(x0)
}

/// Applies `P_Φ = Φ(ΦᵀΦ)⁻¹Φᵀ` without forming the `N × N` matrix.
#[derive(Debug, Clone)]
pub struct SieveProjector {
    phi: Matrix,
    gram_chol: Matrix,
    ridge: f64,
}

const GRAM_RIDGE: f64 = 1e-10;

impl SieveProjector {
    pub fn new(phi: &Matrix) -> Result<Self> {
        if phi.cols() == 0 || phi.rows() == 0 {
            return Err(Error::argument("empty sieve basis"));
        }
        if !phi.is_finite() {
            return Err(Error::argument("sieve basis has non-finite entries"));
        }
        let gram = phi.t_matmul(phi)?;
        let d = gram.rows();
        let well_posed = cholesky(&gram).filter(|l| {
            // Relative pivots flag numerical rank deficiency.
            (0..d).all(|j| l[(j, j)] * l[(j, j)] > 1e-11 * gram[(j, j)].max(f64::MIN_POSITIVE))
        });
        let (gram_chol, ridge) = match well_posed {
            Some(l) => (l, 0.0),
            None => {
                let base = (gram.trace() / d as f64).max(f64::MIN_POSITIVE);
                let mut ridge = GRAM_RIDGE * base;
                warn!("sieve basis is rank deficient; adding ridge {ridge:.3e} to its Gram matrix");
                loop {
                    let mut reg = gram.clone();
                    for j in 0..d {
                        reg[(j, j)] += ridge;
                    }
                    if let Some(l) = cholesky(&reg) {
                        break (l, ridge);
                    }
                    ridge *= 10.0;
                    if ridge > base {
                        return Err(Error::numerical("sieve Gram matrix cannot be regularized"));
                    }
                }
            }
        };
        Ok(Self { phi: phi.clone(), gram_chol, ridge })
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn n_rows(&self) -> usize {
        self.phi.rows()
    }

    /// Least-squares sieve coefficients `B = (ΦᵀΦ)⁻¹ΦᵀU`.
    pub fn coefficients(&self, u: &Matrix) -> Result<Matrix> {
        let rhs = self.phi.t_matmul(u)?;
        Ok(cholesky_solve(&self.gram_chol, &rhs))
    }

    /// `P_Φ U`.
    pub fn project(&self, u: &Matrix) -> Result<Matrix> {
        self.phi.matmul(&self.coefficients(u)?)
    }

    /// The dense `N × N` projector.
    pub fn matrix(&self) -> Matrix {
        let inv_phi_t = cholesky_solve(&self.gram_chol, &self.phi.transpose());
        self.phi.matmul(&inv_phi_t).expect("conformable by construction")
    }
}

/// Dense `P_Φ`.
pub fn projector(phi: &Matrix) -> Result<Matrix> {
    Ok(SieveProjector::new(phi)?.matrix())
}
