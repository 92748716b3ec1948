//! Precision-weighted fusion of candidate controller commands.
//!
//! The fused command minimizes `Σ_p (u − uᵖ)ᵀ Γᵖ (u − uᵖ)`, giving
//! `û = (Σ Γᵖ)⁻¹ Σ Γᵖ uᵖ`, the mean of the Gaussian product.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerOutput {
    pub source_id: String,
    pub command: DVector<f64>,
    /// Precision `Γᵖ`, symmetric positive semi-definite.
    pub weight: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedCommand {
    pub command: DVector<f64>,
    pub combined_precision: DMatrix<f64>,
    /// `trace(Γᵖ) / Σ trace(Γ)`, in the order the outputs were given.
    pub per_controller_share: Vec<f64>,
}

/// `Γ = cov⁻¹`, symmetrized.
pub fn gamma_from_cov(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    linalg::spd_inverse(cov, "controller covariance")
}

fn validate(o: &ControllerOutput, n_c: usize) -> Result<()> {
    if o.command.len() != n_c || o.weight.nrows() != n_c || o.weight.ncols() != n_c {
        return Err(Error::Dimension(format!(
            "controller '{}' has command dim {} and weight {}x{}, expected {n_c}",
            o.source_id,
            o.command.len(),
            o.weight.nrows(),
            o.weight.ncols()
        )));
    }
    if !linalg::is_finite(&o.command) || o.weight.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("controller '{}' is not finite", o.source_id)));
    }
    let scale = o.weight.amax();
    if !linalg::is_symmetric(&o.weight, 1e-9 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::InvalidArgument(format!("weight of '{}' is not symmetric", o.source_id)));
    }
    if scale > 0.0 && linalg::min_eigenvalue(&o.weight) < -1e-9 * scale {
        return Err(Error::InvalidArgument(format!(
            "weight of '{}' is not positive semi-definite",
            o.source_id
        )));
    }
    Ok(())
}

/// Fuses candidate commands. Sums run in `source_id` order so the result does
/// not depend on the order of `outputs`.
pub fn fuse(outputs: &[ControllerOutput]) -> Result<FusedCommand> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("fusion needs at least one controller".into()))?;
    let n_c = first.command.len();
    for o in outputs {
        validate(o, n_c)?;
    }
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    order.sort_by(|&a, &b| outputs[a].source_id.cmp(&outputs[b].source_id));
    for w in order.windows(2) {
        if outputs[w[0]].source_id == outputs[w[1]].source_id {
            return Err(Error::InvalidArgument(format!(
                "duplicate controller id '{}'",
                outputs[w[0]].source_id
            )));
        }
    }

    let mut precision = DMatrix::zeros(n_c, n_c);
    let mut info = DVector::zeros(n_c);
    for &i in &order {
        let o = &outputs[i];
        precision += &o.weight;
        info += &o.weight * &o.command;
    }
    let precision = linalg::symmetrize(&precision);
    let chol = linalg::cholesky(&precision, "combined precision").map_err(|_| Error::NoConfidence)?;
    let command = chol.solve(&info);
    if !linalg::is_finite(&command) {
        return Err(Error::NoConfidence);
    }

    let total: f64 = order.iter().map(|&i| outputs[i].weight.trace()).sum();
    let per_controller_share = outputs.iter().map(|o| o.weight.trace() / total).collect();
    Ok(FusedCommand {
        command,
        combined_precision: precision,
        per_controller_share,
    })
}

/// Gradient of the fusion objective at `u`: `2 Σ Γᵖ (u − uᵖ)`.
pub fn objective_gradient(outputs: &[ControllerOutput], u: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(u.len());
    for o in outputs {
        g += &o.weight * (u - &o.command) * 2.0;
    }
    g
}
