//! Kernelized movement primitive: training on a probabilistic reference
//! trajectory and prediction of full output distributions.
//!
//! With the stacked reference mean `μ`, block-diagonal reference covariance
//! `Σ` and block Gram matrix `K` (scalar kernel times `I_{D_O}`), a query
//! with cross-kernel block row `k*` gets
//!
//! ```text
//! mean = k* (K + λ₁Σ)⁻¹ μ
//! cov  = (N / λ₂) (k** − k* (K + λ₂Σ)⁻¹ k*ᵀ)
//! ```
//!
//! Far from the reference inputs `k*` vanishes and the covariance tends to
//! `σ_f² (N / λ₂) I`, which [`uncertainty_limit`] returns in closed form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PackedCholesky};
use crate::gmm::{build_reference, fit_gmm, sample_inputs, EmOptions};
use crate::reference::{pool_joint, Demonstration, ReferenceTrajectory};
use crate::sub_seed;

/// Eigenvalues of a predicted covariance between this and zero are treated as
/// rounding and clamped; anything lower is a hard error.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmpHyperparams {
    /// Mean regularizer λ₁.
    pub lambda1: f64,
    /// Covariance regularizer λ₂.
    pub lambda2: f64,
    /// `l` in `σ_f² exp(−‖Δ‖² / l)`; the correlation length is `√l`.
    pub lengthscale: f64,
    pub sigma_f2: f64,
}

impl KmpHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lengthscale", self.lengthscale),
            ("sigma_f2", self.sigma_f2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Squared-exponential kernel `σ_f² exp(−‖xi − xj‖² / l)`.
pub fn kernel_eval(xi: &DVector<f64>, xj: &DVector<f64>, hyper: &KmpHyperparams) -> f64 {
    debug_assert_eq!(xi.len(), xj.len());
    let d2: f64 = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    hyper.sigma_f2 * (-d2 / hyper.lengthscale).exp()
}

/// `σ_f² (N / λ₂) I_{d_out}`.
pub fn uncertainty_limit(hyper: &KmpHyperparams, n: usize, d_out: usize) -> DMatrix<f64> {
    DMatrix::identity(d_out, d_out) * (hyper.sigma_f2 * n as f64 / hyper.lambda2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Fraction of the far-field covariance trace, in `[0, 1]`.
    pub uncertainty_ratio: f64,
}

/// A trained predictor. Immutable once built.
#[derive(Clone, Debug)]
pub struct KmpModel {
    hyper: KmpHyperparams,
    reference: ReferenceTrajectory,
    mean_system: PackedCholesky,
    cov_system: PackedCholesky,
    /// `(K + λ₁Σ)⁻¹ μ`, split into one `D_O` block per reference point.
    mean_weights: Vec<DVector<f64>>,
}

impl KmpModel {
    pub fn train(reference: ReferenceTrajectory, hyper: KmpHyperparams) -> Result<Self> {
        hyper.validate()?;
        let kmat = kernel_matrix(reference.inputs(), &hyper);
        let mean_system = PackedCholesky::factor(
            assemble_system(&kmat, &reference, hyper.lambda1),
            "K + lambda1*Sigma",
        )?;
        let cov_system = PackedCholesky::factor(
            assemble_system(&kmat, &reference, hyper.lambda2),
            "K + lambda2*Sigma",
        )?;
        drop(kmat);

        let d_o = reference.dim_out();
        let mut mu = DVector::zeros(reference.len() * d_o);
        for (n, m) in reference.means().iter().enumerate() {
            mu.rows_mut(n * d_o, d_o).copy_from(m);
        }
        let alpha = mean_system.solve(&mu);
        let mean_weights = (0..reference.len())
            .map(|n| alpha.rows(n * d_o, d_o).into_owned())
            .collect();

        Ok(Self {
            hyper,
            reference,
            mean_system,
            cov_system,
            mean_weights,
        })
    }

    /// Full learning pipeline: a `components`-component GMM on the pooled
    /// joint samples, `reference_points` inputs drawn from its input
    /// marginal, GMR at those inputs, then KMP training.
    pub fn from_demonstrations(
        demos: &[Demonstration],
        components: usize,
        reference_points: usize,
        hyper: KmpHyperparams,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        let data = pool_joint(demos)?;
        let dim_in = demos[0].dim_in();
        let opts = EmOptions {
            seed: sub_seed(seed, 0),
            ..EmOptions::default()
        };
        let fit = fit_gmm(&data, dim_in, components, &opts)?;
        let inputs = sample_inputs(&fit.model, reference_points, sub_seed(seed, 1));
        let reference = build_reference(&fit.model, &inputs)?;
        Self::train(reference, hyper)
    }

    pub fn hyper(&self) -> &KmpHyperparams {
        &self.hyper
    }

    pub fn reference(&self) -> &ReferenceTrajectory {
        &self.reference
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    pub fn dim_in(&self) -> usize {
        self.reference.dim_in()
    }

    pub fn dim_out(&self) -> usize {
        self.reference.dim_out()
    }

    /// Scalar kernel values between the query and every reference input.
    fn cross_kernel(&self, query: &DVector<f64>) -> Result<Vec<f64>> {
        if query.len() != self.dim_in() {
            return Err(Error::Dimension(format!(
                "query has dimension {}, model expects {}",
                query.len(),
                self.dim_in()
            )));
        }
        Ok(self
            .reference
            .inputs()
            .iter()
            .map(|x| kernel_eval(query, x, &self.hyper))
            .collect())
    }

    pub fn predict_mean(&self, query: &DVector<f64>) -> Result<DVector<f64>> {
        let k = self.cross_kernel(query)?;
        Ok(self.mean_from_kernel(&k))
    }

    fn mean_from_kernel(&self, k: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim_out());
        for (kn, w) in k.iter().zip(&self.mean_weights) {
            out.axpy(*kn, w, 1.0);
        }
        out
    }

    pub fn predict_cov(&self, query: &DVector<f64>) -> Result<DMatrix<f64>> {
        let k = self.cross_kernel(query)?;
        self.cov_from_kernel(&k)
    }

    fn cov_from_kernel(&self, k: &[f64]) -> Result<DMatrix<f64>> {
        let d_o = self.dim_out();
        let n = self.len();
        let mut kt = DMatrix::zeros(n * d_o, d_o);
        for (i, kn) in k.iter().enumerate() {
            for d in 0..d_o {
                kt[(i * d_o + d, d)] = *kn;
            }
        }
        let y = self.cov_system.forward_solve(&kt);
        let explained = y.transpose() * &y;
        let kss = DMatrix::identity(d_o, d_o) * self.hyper.sigma_f2;
        let raw = (kss - explained) * (n as f64 / self.hyper.lambda2);
        clamp_psd(linalg::symmetrize(&raw))
    }

    pub fn predict(&self, query: &DVector<f64>) -> Result<Prediction> {
        let k = self.cross_kernel(query)?;
        let mean = self.mean_from_kernel(&k);
        let covariance = self.cov_from_kernel(&k)?;
        let uncertainty_ratio = self.is_uncertain(&covariance);
        Ok(Prediction {
            mean,
            covariance,
            uncertainty_ratio,
        })
    }

    pub fn uncertainty_limit(&self) -> DMatrix<f64> {
        uncertainty_limit(&self.hyper, self.len(), self.dim_out())
    }

    /// `trace(cov) / trace(limit)`, clamped to `[0, 1]`; 1 means the model
    /// has no data near the query.
    pub fn is_uncertain(&self, cov: &DMatrix<f64>) -> f64 {
        let limit = self.hyper.sigma_f2 * self.len() as f64 / self.hyper.lambda2 * self.dim_out() as f64;
        (cov.trace() / limit).clamp(0.0, 1.0)
    }

    /// Block Gram matrix `K` (scalar kernel matrix ⊗ `I_{D_O}`).
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let kmat = kernel_matrix(self.reference.inputs(), &self.hyper);
        kmat.kronecker(&DMatrix::<f64>::identity(self.dim_out(), self.dim_out()))
    }

    /// `K + λΣ` for an arbitrary `λ`.
    pub fn system_matrix(&self, lambda: f64) -> DMatrix<f64> {
        let kmat = kernel_matrix(self.reference.inputs(), &self.hyper);
        assemble_system(&kmat, &self.reference, lambda)
    }

    /// Solves `(K + λ₁Σ) x = b` with the cached factor.
    pub fn solve_mean_system(&self, b: &DVector<f64>) -> DVector<f64> {
        self.mean_system.solve(b)
    }

    /// Solves `(K + λ₂Σ) x = b` with the cached factor.
    pub fn solve_cov_system(&self, b: &DVector<f64>) -> DVector<f64> {
        self.cov_system.solve(b)
    }
}

fn kernel_matrix(inputs: &[DVector<f64>], hyper: &KmpHyperparams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.sigma_f2;
        for j in 0..i {
            let v = kernel_eval(&inputs[i], &inputs[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn assemble_system(kmat: &DMatrix<f64>, reference: &ReferenceTrajectory, lambda: f64) -> DMatrix<f64> {
    let n = reference.len();
    let d_o = reference.dim_out();
    let mut a = DMatrix::zeros(n * d_o, n * d_o);
    for j in 0..n {
        for i in 0..n {
            let v = kmat[(i, j)];
            for d in 0..d_o {
                a[(i * d_o + d, j * d_o + d)] = v;
            }
        }
    }
    for (n_idx, c) in reference.covariances().iter().enumerate() {
        let off = n_idx * d_o;
        for r in 0..d_o {
            for s in 0..d_o {
                a[(off + r, off + s)] += lambda * c[(r, s)];
            }
        }
    }
    a
}

/// Rounding-level negative eigenvalues become `1e-12 · trace`; anything below
/// `-PSD_TOLERANCE` is reported.
fn clamp_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(m);
    }
    if min < -PSD_TOLERANCE {
        return Err(Error::NegativeCovariance { eigenvalue: min });
    }
    let floor = 1e-12 * m.trace().abs().max(f64::MIN_POSITIVE);
    let vals = eig.eigenvalues.map(|v| if v < 0.0 { floor } else { v });
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok(linalg::symmetrize(&rebuilt))
}
