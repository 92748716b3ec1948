use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// One recorded trajectory of paired input/output samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    inputs: Vec<DVector<f64>>,
    outputs: Vec<DVector<f64>>,
}

impl Demonstration {
    pub fn new(inputs: Vec<DVector<f64>>, outputs: Vec<DVector<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("demonstration has no samples".into()));
        }
        if inputs.len() != outputs.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} outputs",
                inputs.len(),
                outputs.len()
            )));
        }
        let (di, d_o) = (inputs[0].len(), outputs[0].len());
        if di == 0 || d_o == 0 {
            return Err(Error::Dimension("input and output dimensions must be >= 1".into()));
        }
        for (n, (x, y)) in inputs.iter().zip(&outputs).enumerate() {
            if x.len() != di || y.len() != d_o {
                return Err(Error::Dimension(format!(
                    "sample {n} has dims ({}, {}), expected ({di}, {d_o})",
                    x.len(),
                    y.len()
                )));
            }
        }
        Ok(Self { inputs, outputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim_in(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn dim_out(&self) -> usize {
        self.outputs[0].len()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[DVector<f64>] {
        &self.outputs
    }

    pub fn samples(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.inputs.iter().zip(&self.outputs)
    }
}

/// Stacks `[input; output]` for every sample of every demonstration.
pub fn pool_joint(demos: &[Demonstration]) -> Result<Vec<DVector<f64>>> {
    let first = demos
        .first()
        .ok_or_else(|| Error::InvalidArgument("no demonstrations".into()))?;
    let (di, d_o) = (first.dim_in(), first.dim_out());
    let mut pooled = Vec::new();
    for d in demos {
        if d.dim_in() != di || d.dim_out() != d_o {
            return Err(Error::Dimension("demonstrations disagree on dimensions".into()));
        }
        for (x, y) in d.samples() {
            let mut z = DVector::zeros(di + d_o);
            z.rows_mut(0, di).copy_from(x);
            z.rows_mut(di, d_o).copy_from(y);
            pooled.push(z);
        }
    }
    Ok(pooled)
}

/// The N-point probabilistic reference trajectory that initializes a KMP.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    inputs: Vec<DVector<f64>>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl ReferenceTrajectory {
    pub fn new(
        inputs: Vec<DVector<f64>>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::InvalidArgument("reference trajectory is empty".into()));
        }
        if means.len() != n || covariances.len() != n {
            return Err(Error::Dimension("reference fields have different lengths".into()));
        }
        let (di, d_o) = (inputs[0].len(), means[0].len());
        if di == 0 || d_o == 0 {
            return Err(Error::Dimension("input and output dimensions must be >= 1".into()));
        }
        for i in 0..n {
            if inputs[i].len() != di || means[i].len() != d_o {
                return Err(Error::Dimension(format!("reference point {i} has wrong dimension")));
            }
            let c = &covariances[i];
            if c.nrows() != d_o || c.ncols() != d_o {
                return Err(Error::Dimension(format!("covariance {i} is not {d_o}x{d_o}")));
            }
            if !linalg::is_symmetric(c, 1e-9 * c.amax().max(1.0)) {
                return Err(Error::NotPositiveDefinite(format!("reference covariance {i}")));
            }
            linalg::cholesky(c, &format!("reference covariance {i}"))?;
        }
        Ok(Self {
            inputs,
            means,
            covariances,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim_in(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn dim_out(&self) -> usize {
        self.means[0].len()
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }
}
