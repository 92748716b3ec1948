//! Gaussian mixture fitting and regression used to build the KMP reference
//! trajectory.
//!
//! EM runs on joint `[input; output]` vectors. Initialization is seeded
//! k-means++ so that a given seed always yields the same model. Component
//! responsibilities, both during EM and in regression, are computed in log
//! space so that queries far from every component do not underflow.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::reference::ReferenceTrajectory;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative size of the ridge added to collapsing covariances.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Per-component quantities needed to condition on the input block.
#[derive(Clone, Debug)]
struct Conditional {
    input_mean: DVector<f64>,
    input_chol: Cholesky<f64, Dyn>,
    input_log_norm: f64,
    output_mean: DVector<f64>,
    /// Σ_OI Σ_II⁻¹
    gain: DMatrix<f64>,
    /// Σ_OO − Σ_OI Σ_II⁻¹ Σ_IO
    covariance: DMatrix<f64>,
}

/// A fitted mixture over joint `[input; output]` vectors.
#[derive(Clone, Debug)]
pub struct GmmModel {
    dim_in: usize,
    dim_out: usize,
    components: Vec<GaussianComponent>,
    conditionals: Vec<Conditional>,
}

impl GmmModel {
    pub fn new(dim_in: usize, components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim_in == 0 || dim_in >= dim {
            return Err(Error::Dimension(format!(
                "input dimension {dim_in} must lie in 1..{dim}"
            )));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be non-negative and sum to 1 (sum {total})"
            )));
        }
        let dim_out = dim - dim_in;
        let mut conditionals = Vec::with_capacity(components.len());
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.covariance.nrows() != dim || c.covariance.ncols() != dim {
                return Err(Error::Dimension(format!("component {k} has wrong dimension")));
            }
            linalg::cholesky(&c.covariance, &format!("component {k} covariance"))?;
            let s_ii = c.covariance.view((0, 0), (dim_in, dim_in)).into_owned();
            let s_oi = c.covariance.view((dim_in, 0), (dim_out, dim_in)).into_owned();
            let s_oo = c.covariance.view((dim_in, dim_in), (dim_out, dim_out)).into_owned();
            let input_chol = linalg::cholesky(&s_ii, &format!("component {k} input covariance"))?;
            let gain = input_chol.solve(&s_oi.transpose()).transpose();
            let covariance = linalg::symmetrize(&(s_oo - &gain * s_oi.transpose()));
            let log_det: f64 = input_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            conditionals.push(Conditional {
                input_mean: c.mean.rows(0, dim_in).into_owned(),
                input_log_norm: -log_det - 0.5 * dim_in as f64 * LN_2PI,
                input_chol,
                output_mean: c.mean.rows(dim_in, dim_out).into_owned(),
                gain,
                covariance,
            });
        }
        Ok(Self {
            dim_in,
            dim_out,
            components,
            conditionals,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// Pooled log-likelihood of joint samples.
    pub fn log_likelihood(&self, data: &[DVector<f64>]) -> Result<f64> {
        let chols = component_factors(&self.components)?;
        let mut lw = vec![0.0; self.components.len()];
        Ok(data
            .iter()
            .map(|x| {
                for (k, (c, (ch, ln))) in self.components.iter().zip(&chols).enumerate() {
                    lw[k] = c.weight.ln() + log_gauss(x, &c.mean, ch, *ln);
                }
                log_sum_exp(&lw)
            })
            .sum())
    }
}

/// EM settings. `tol` bounds the change of the pooled log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmOptions {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Pooled log-likelihood before each M-step, plus the final value.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Fits a `k`-component mixture to joint samples whose first `dim_in`
/// coordinates are inputs.
pub fn fit_gmm(data: &[DVector<f64>], dim_in: usize, k: usize, opts: &EmOptions) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("component count must be >= 1".into()));
    }
    if data.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot support {k} components",
            data.len()
        )));
    }
    if opts.max_iter == 0 || !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("max_iter and tol must be positive".into()));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim || !linalg::is_finite(x)) {
        return Err(Error::Dimension("samples must share one finite dimension".into()));
    }
    if dim_in == 0 || dim_in >= dim {
        return Err(Error::Dimension(format!("input dimension {dim_in} must lie in 1..{dim}")));
    }

    let n = data.len();
    let global_scale = {
        let mean = mean_of(data);
        let var: f64 = data.iter().map(|x| (x - &mean).norm_squared()).sum::<f64>() / (n * dim) as f64;
        if var > 0.0 {
            var
        } else {
            1.0
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centers = kmeans_pp(data, k, &mut rng);
    let mut resp = DMatrix::zeros(n, k);
    for (i, x) in data.iter().enumerate() {
        let nearest = (0..k)
            .min_by(|&a, &b| {
                (x - &centers[a])
                    .norm_squared()
                    .total_cmp(&(x - &centers[b]).norm_squared())
            })
            .unwrap_or(0);
        resp[(i, nearest)] = 1.0;
    }
    let mut components = m_step(data, &resp, global_scale);

    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iter = 0;
    loop {
        let ll = e_step(data, &components, &mut resp)?;
        if let Some(&prev) = history.last() {
            if (ll - prev).abs() < opts.tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        if iter == opts.max_iter {
            break;
        }
        components = m_step(data, &resp, global_scale);
        iter += 1;
    }

    Ok(GmmFit {
        model: GmmModel::new(dim_in, components)?,
        log_likelihood: history,
        converged,
    })
}

fn mean_of(data: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(data[0].len());
    for x in data {
        m += x;
    }
    m / data.len() as f64
}

fn kmeans_pp(data: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc >= target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = data[pick].clone();
        for (di, x) in d2.iter_mut().zip(data) {
            *di = di.min((x - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

fn regularize(cov: &mut DMatrix<f64>, fallback_scale: f64) {
    let d = cov.nrows();
    *cov = linalg::symmetrize(cov);
    let mut scale = cov.diagonal().iter().map(|v| v.abs()).sum::<f64>() / d as f64;
    if !(scale > 0.0) {
        scale = fallback_scale;
    }
    let eps = COVARIANCE_FLOOR * scale;
    if linalg::min_eigenvalue(cov) < eps {
        for i in 0..d {
            cov[(i, i)] += eps;
        }
    }
}

fn m_step(data: &[DVector<f64>], resp: &DMatrix<f64>, fallback_scale: f64) -> Vec<GaussianComponent> {
    let (n, k) = (data.len(), resp.ncols());
    let dim = data[0].len();
    (0..k)
        .map(|j| {
            let nk: f64 = resp.column(j).sum();
            if !(nk > 0.0) {
                // Empty component: park it on the pooled statistics with zero weight.
                let mean = mean_of(data);
                let mut covariance = DMatrix::identity(dim, dim) * fallback_scale;
                regularize(&mut covariance, fallback_scale);
                return GaussianComponent {
                    weight: 0.0,
                    mean,
                    covariance,
                };
            }
            let mut mean = DVector::zeros(dim);
            for (i, x) in data.iter().enumerate() {
                mean.axpy(resp[(i, j)], x, 1.0);
            }
            mean /= nk;
            let mut covariance = DMatrix::zeros(dim, dim);
            for (i, x) in data.iter().enumerate() {
                let r = resp[(i, j)];
                if r != 0.0 {
                    let dx = x - &mean;
                    covariance.ger(r, &dx, &dx, 1.0);
                }
            }
            covariance /= nk;
            regularize(&mut covariance, fallback_scale);
            GaussianComponent {
                weight: nk / n as f64,
                mean,
                covariance,
            }
        })
        .collect()
}

fn component_factors(components: &[GaussianComponent]) -> Result<Vec<(Cholesky<f64, Dyn>, f64)>> {
    components
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let ch = linalg::cholesky(&c.covariance, &format!("component {k} covariance"))?;
            let log_det: f64 = ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            let ln = -log_det - 0.5 * c.mean.len() as f64 * LN_2PI;
            Ok((ch, ln))
        })
        .collect()
}

fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>, log_norm: f64) -> f64 {
    let dx = x - mean;
    let y = chol
        .l_dirty()
        .solve_lower_triangular(&dx)
        .expect("Cholesky factor has a positive diagonal");
    log_norm - 0.5 * y.norm_squared()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Fills `resp` with responsibilities and returns the pooled log-likelihood.
fn e_step(data: &[DVector<f64>], components: &[GaussianComponent], resp: &mut DMatrix<f64>) -> Result<f64> {
    let chols = component_factors(components)?;
    let k = components.len();
    let mut lw = vec![0.0; k];
    let mut total = 0.0;
    for (i, x) in data.iter().enumerate() {
        for (j, (c, (ch, ln))) in components.iter().zip(&chols).enumerate() {
            lw[j] = c.weight.ln() + log_gauss(x, &c.mean, ch, *ln);
        }
        let lse = log_sum_exp(&lw);
        total += lse;
        for j in 0..k {
            resp[(i, j)] = (lw[j] - lse).exp();
        }
    }
    Ok(total)
}

/// Gaussian mixture regression: the moment-matched output distribution given
/// an input.
pub fn gmr_condition(model: &GmmModel, query: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if query.len() != model.dim_in {
        return Err(Error::Dimension(format!(
            "query has dimension {}, model expects {}",
            query.len(),
            model.dim_in
        )));
    }
    let k = model.components.len();
    let mut lw = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    for (c, cond) in model.components.iter().zip(&model.conditionals) {
        lw.push(c.weight.ln() + log_gauss(query, &cond.input_mean, &cond.input_chol, cond.input_log_norm));
        means.push(&cond.output_mean + &cond.gain * (query - &cond.input_mean));
    }
    let lse = log_sum_exp(&lw);
    let h: Vec<f64> = lw.iter().map(|l| (l - lse).exp()).collect();

    let mut mean = DVector::zeros(model.dim_out);
    for (hk, mk) in h.iter().zip(&means) {
        mean.axpy(*hk, mk, 1.0);
    }
    let mut cov = DMatrix::zeros(model.dim_out, model.dim_out);
    for ((hk, mk), cond) in h.iter().zip(&means).zip(&model.conditionals) {
        if *hk == 0.0 {
            continue;
        }
        let dm = mk - &mean;
        cov += &cond.covariance * *hk;
        cov.ger(*hk, &dm, &dm, 1.0);
    }
    Ok((mean, linalg::symmetrize(&cov)))
}

/// Draws `n` inputs from the mixture's input marginal. One-dimensional draws
/// are sorted; multi-dimensional draws keep their draw order.
pub fn sample_inputs(model: &GmmModel, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = model.components.len() - 1;
        for (j, c) in model.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = j;
                break;
            }
        }
        let cond = &model.conditionals[pick];
        let z = DVector::from_fn(model.dim_in, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.push(&cond.input_mean + cond.input_chol.l_dirty().lower_triangle() * z);
    }
    if model.dim_in == 1 {
        out.sort_by(|a, b| a[0].total_cmp(&b[0]));
    }
    out
}

/// Conditions the mixture at every input, preserving order.
pub fn build_reference(model: &GmmModel, inputs: &[DVector<f64>]) -> Result<ReferenceTrajectory> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("reference needs at least one input".into()));
    }
    let mut means = Vec::with_capacity(inputs.len());
    let mut covs = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (m, c) = gmr_condition(model, x)?;
        means.push(m);
        covs.push(c);
    }
    ReferenceTrajectory::new(inputs.to_vec(), means, covs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn single(mean: &[f64], cov: &[f64]) -> GmmModel {
        let d = mean.len();
        GmmModel::new(
            1,
            vec![GaussianComponent {
                weight: 1.0,
                mean: v(mean),
                covariance: DMatrix::from_row_slice(d, d, cov),
            }],
        )
        .unwrap()
    }

    #[test]
    fn conditioning_unit_correlation() {
        let m = single(&[0.0, 0.0], &[1.0, 0.5, 0.5, 1.0]);
        let (mu, cov) = gmr_condition(&m, &v(&[1.0])).unwrap();
        assert!((mu[0] - 0.5).abs() < 1e-15);
        assert!((cov[(0, 0)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mirrored_components_cancel_at_origin() {
        let comp = |mi: f64, mo: f64| GaussianComponent {
            weight: 0.5,
            mean: v(&[mi, mo]),
            covariance: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
        };
        let m = GmmModel::new(1, vec![comp(-2.0, 3.0), comp(2.0, -3.0)]).unwrap();
        let (mu, _) = gmr_condition(&m, &v(&[0.0])).unwrap();
        assert!(mu[0].abs() < 1e-12);
    }

    #[test]
    fn far_query_does_not_underflow() {
        let m = single(&[0.0, 0.0], &[1e-4, 0.0, 0.0, 1.0]);
        let (mu, cov) = gmr_condition(&m, &v(&[1e3])).unwrap();
        assert!(mu[0].is_finite() && cov[(0, 0)].is_finite());
    }

    #[test]
    fn k_larger_than_sample_count_is_rejected() {
        let data = vec![v(&[0.0, 1.0]), v(&[1.0, 2.0])];
        assert!(matches!(
            fit_gmm(&data, 1, 3, &EmOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = single(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(gmr_condition(&m, &v(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn degenerate_cluster_is_regularized_not_rejected() {
        // Every sample identical: the covariance collapses to zero.
        let data = vec![v(&[1.0, 2.0]); 20];
        let fit = fit_gmm(&data, 1, 1, &EmOptions::default()).unwrap();
        let c = &fit.model.components()[0].covariance;
        assert!(linalg::min_eigenvalue(c) > 0.0);
    }

    #[test]
    fn singleton_reference_matches_conditioning() {
        let m = single(&[0.0, 1.0], &[2.0, 0.3, 0.3, 1.0]);
        let q = v(&[0.7]);
        let r = build_reference(&m, std::slice::from_ref(&q)).unwrap();
        let (mu, cov) = gmr_condition(&m, &q).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.means()[0], mu);
        assert_eq!(r.covariances()[0], cov);
    }

    #[test]
    fn one_dimensional_samples_are_sorted() {
        let m = single(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let xs = sample_inputs(&m, 200, 5);
        assert!(xs.windows(2).all(|w| w[0][0] <= w[1][0]));
        assert_eq!(xs, sample_inputs(&m, 200, 5));
    }
}
