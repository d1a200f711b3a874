use nalgebra::{DMatrix, DVector};

use crate::error::{KmclError, Result};

/// Location of an exponential kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum Mean {
    Vector(Vec<f64>),
    /// Scalar `μ` standing for `μ·1` in every dimension.
    Broadcast(f64),
}

/// Shape of an exponential kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(Vec<f64>),
    Isotropic(f64),
}

/// A squared exponential kernel `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))` in `dim` dimensions.
///
/// Constructors check shapes, finiteness, positive variances and symmetry of
/// full covariances. Positive-definiteness of a full covariance is left to the
/// factorization performed by the similarity routines, which report the
/// offending input.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    mean: Mean,
    covariance: Covariance,
    dim: usize,
}

fn check_finite(field: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(KmclError::invalid(field, "entries must be finite"))
    }
}

fn check_variance(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(KmclError::invalid(
            field,
            format!("variances must be strictly positive, got {v}"),
        ))
    }
}

impl KernelSpec {
    /// Full covariance given as a row-major `dim × dim` buffer.
    pub fn full(mean: Vec<f64>, covariance: &[f64]) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(KmclError::invalid("dim", "must be at least 1"));
        }
        if covariance.len() != dim * dim {
            return Err(KmclError::DimensionMismatch {
                what: "full covariance entries",
                expected: dim * dim,
                found: covariance.len(),
            });
        }
        check_finite("mean", &mean)?;
        check_finite("covariance", covariance)?;
        let m = DMatrix::from_row_slice(dim, dim, covariance);
        for i in 0..dim {
            check_variance("covariance diagonal", m[(i, i)])?;
            for j in 0..i {
                let scale = m[(i, j)].abs().max(m[(j, i)].abs()).max(1.0);
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(KmclError::invalid("covariance", "matrix is not symmetric"));
                }
            }
        }
        Ok(KernelSpec {
            mean: Mean::Vector(mean),
            covariance: Covariance::Full(m),
            dim,
        })
    }

    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(KmclError::invalid("dim", "must be at least 1"));
        }
        if variances.len() != dim {
            return Err(KmclError::DimensionMismatch {
                what: "diagonal variances",
                expected: dim,
                found: variances.len(),
            });
        }
        check_finite("mean", &mean)?;
        for &v in &variances {
            check_variance("variances", v)?;
        }
        Ok(KernelSpec {
            mean: Mean::Vector(mean),
            covariance: Covariance::Diagonal(variances),
            dim,
        })
    }

    /// Isotropic kernel with broadcast mean `μ·1` and covariance `σ²I`.
    pub fn isotropic(mean: f64, variance: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(KmclError::invalid("dim", "must be at least 1"));
        }
        check_finite("mean", &[mean])?;
        check_variance("variance", variance)?;
        Ok(KernelSpec {
            mean: Mean::Broadcast(mean),
            covariance: Covariance::Isotropic(variance),
            dim,
        })
    }

    /// Isotropic covariance `σ²I` around an arbitrary mean vector.
    pub fn isotropic_at(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(KmclError::invalid("dim", "must be at least 1"));
        }
        check_finite("mean", &mean)?;
        check_variance("variance", variance)?;
        Ok(KernelSpec {
            mean: Mean::Vector(mean),
            covariance: Covariance::Isotropic(variance),
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &Mean {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        match &self.mean {
            Mean::Vector(v) => DVector::from_column_slice(v),
            Mean::Broadcast(mu) => DVector::from_element(self.dim, *mu),
        }
    }

    pub fn mean_at(&self, i: usize) -> f64 {
        match &self.mean {
            Mean::Vector(v) => v[i],
            Mean::Broadcast(mu) => *mu,
        }
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        match &self.covariance {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            Covariance::Isotropic(s) => DMatrix::from_diagonal_element(self.dim, self.dim, *s),
        }
    }

    /// Per-axis variances when the covariance is diagonal or isotropic.
    pub fn diagonal_variances(&self) -> Option<Vec<f64>> {
        match &self.covariance {
            Covariance::Full(_) => None,
            Covariance::Diagonal(v) => Some(v.clone()),
            Covariance::Isotropic(s) => Some(vec![*s; self.dim]),
        }
    }

    /// Same kernel with its covariance expressed as a full matrix.
    pub fn to_full(&self) -> KernelSpec {
        KernelSpec {
            mean: Mean::Vector(self.mean_vector().iter().copied().collect()),
            covariance: Covariance::Full(self.covariance_matrix()),
            dim: self.dim,
        }
    }

    /// Same kernel with a diagonal covariance; `None` for full covariances.
    pub fn to_diagonal(&self) -> Option<KernelSpec> {
        self.diagonal_variances().map(|vars| KernelSpec {
            mean: Mean::Vector(self.mean_vector().iter().copied().collect()),
            covariance: Covariance::Diagonal(vars),
            dim: self.dim,
        })
    }

    /// Largest standard deviation along any direction.
    pub fn max_std(&self) -> f64 {
        match &self.covariance {
            Covariance::Full(m) => m
                .clone()
                .symmetric_eigenvalues()
                .iter()
                .fold(0.0_f64, |a, &b| a.max(b))
                .sqrt(),
            Covariance::Diagonal(v) => v.iter().fold(0.0_f64, |a, &b| a.max(b)).sqrt(),
            Covariance::Isotropic(s) => s.sqrt(),
        }
    }

    /// Unnormalized kernel value at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(KmclError::DimensionMismatch {
                what: "evaluation point",
                expected: self.dim,
                found: x.len(),
            });
        }
        let precision = self
            .covariance_matrix()
            .try_inverse()
            .ok_or(KmclError::NotPositiveDefinite { which: "kernel" })?;
        let d = DVector::from_column_slice(x) - self.mean_vector();
        Ok((-0.5 * d.dot(&(precision * &d))).exp())
    }
}
