//! Stiffness and damping gains from LQR on a unit-mass double integrator.
//!
//! Infinite-horizon gains solve the continuous algebraic Riccati equation by
//! Kleinman–Newton iteration. Finite-horizon gains run the discrete Riccati
//! recursion backwards on the zero-order-hold discretization. The discrete
//! infinite-horizon problem is solved separately (Hewer iteration) so that
//! the two discrete routes can be checked against each other.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};
use crate::linalg;

pub const MAX_RICCATI_ITERATIONS: usize = 200;
/// Target relative residual for the Riccati iterations.
pub const RICCATI_TOLERANCE: f64 = 1e-10;
/// Residual accepted once Newton steps stop making progress.
const RICCATI_ACCEPT: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Structure {
    DoubleIntegrator,
    General,
}

/// Continuous-time `ζ̇ = A ζ + B u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    structure: Structure,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self {
            a,
            b,
            structure: Structure::General,
        })
    }

    /// `A = [[0, I], [0, 0]]`, `B = [[0], [I]]` with `n_c`-sized blocks.
    pub fn double_integrator(n_c: usize) -> Self {
        assert!(n_c >= 1, "double integrator needs at least one axis");
        let n_s = 2 * n_c;
        let mut a = DMatrix::zeros(n_s, n_s);
        let mut b = DMatrix::zeros(n_s, n_c);
        for i in 0..n_c {
            a[(i, n_c + i)] = 1.0;
            b[(n_c + i, i)] = 1.0;
        }
        Self {
            a,
            b,
            structure: Structure::DoubleIntegrator,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut c = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for i in 0..n {
            c.view_mut((0, i * m), (n, m)).copy_from(&block);
            block = &self.a * block;
        }
        c
    }

    pub fn controllability_rank(&self) -> usize {
        numerical_rank(&self.controllability_matrix())
    }

    /// Exact zero-order-hold discretization at step `dt`.
    pub fn discretize(&self, dt: f64) -> Result<DiscreteSystem> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut aug = DMatrix::zeros(n + m, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(&self.a);
        aug.view_mut((0, n), (n, m)).copy_from(&self.b);
        let e = linalg::expm(&(aug * dt));
        let initial_gain = match self.structure {
            Structure::DoubleIntegrator => Some(pole_placement_gain(m)),
            Structure::General => None,
        };
        Ok(DiscreteSystem {
            a: e.view((0, 0), (n, n)).into_owned(),
            b: e.view((0, n), (n, m)).into_owned(),
            initial_gain,
        })
    }

    /// A gain that makes `A − B K` Hurwitz, used to seed the Newton iteration.
    pub fn stabilizing_gain(&self) -> Result<DMatrix<f64>> {
        match self.structure {
            // Places every axis at {−1, −2}: s² + 3s + 2.
            Structure::DoubleIntegrator => Ok(pole_placement_gain(self.input_dim())),
            Structure::General => bass_gain(self),
        }
    }
}

fn pole_placement_gain(n_c: usize) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n_c, 2 * n_c);
    for i in 0..n_c {
        k[(i, i)] = 2.0;
        k[(i, n_c + i)] = 3.0;
    }
    k
}

/// Bass's construction: with `β` above the spectral radius of `A`, solve
/// `(A + βI) W + W (A + βI)ᵀ = 2 B Bᵀ`; then `K = Bᵀ W⁻¹` is stabilizing.
fn bass_gain(sys: &LinearSystem) -> Result<DMatrix<f64>> {
    if sys.controllability_rank() < sys.state_dim() {
        return Err(Error::InvalidArgument("(A, B) is not controllable".into()));
    }
    let n = sys.state_dim();
    let beta = sys.a.norm() + 1.0;
    let shifted = &sys.a + DMatrix::identity(n, n) * beta;
    let w = solve_lyapunov(&shifted, &(&sys.b * sys.b.transpose() * 2.0))?;
    let w_inv = linalg::spd_inverse(&linalg::symmetrize(&w), "Bass Gramian")?;
    Ok(sys.b.transpose() * w_inv)
}

/// `ζ[k+1] = A ζ[k] + B u[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    initial_gain: Option<DMatrix<f64>>,
}

impl DiscreteSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        Self {
            a,
            b,
            initial_gain: None,
        }
    }
}

/// Stiffness and damping blocks of `u = [Kp Kv] (ζ̂ − ζ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGains {
    pub kp: DMatrix<f64>,
    pub kv: DMatrix<f64>,
}

impl ControlGains {
    pub fn from_stacked(k: &DMatrix<f64>) -> Result<Self> {
        let n_c = k.nrows();
        if k.ncols() != 2 * n_c {
            return Err(Error::Dimension(format!(
                "gain is {}x{}, expected {n_c}x{}",
                k.nrows(),
                k.ncols(),
                2 * n_c
            )));
        }
        Ok(Self {
            kp: k.columns(0, n_c).into_owned(),
            kv: k.columns(n_c, n_c).into_owned(),
        })
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        let n_c = self.kp.nrows();
        let mut k = DMatrix::zeros(n_c, 2 * n_c);
        k.columns_mut(0, n_c).copy_from(&self.kp);
        k.columns_mut(n_c, n_c).copy_from(&self.kv);
        k
    }

    pub fn zeros(n_c: usize) -> Self {
        Self {
            kp: DMatrix::zeros(n_c, n_c),
            kv: DMatrix::zeros(n_c, n_c),
        }
    }

    /// Largest real part of the continuous closed loop `A − B [Kp Kv]`.
    pub fn closed_loop_abscissa(&self, sys: &LinearSystem) -> f64 {
        let ac = sys.a() - sys.b() * self.stacked();
        ac.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Spectral radius of the discrete closed loop `Ad − Bd [Kp Kv]`.
    pub fn discrete_spectral_radius(&self, sys: &DiscreteSystem) -> f64 {
        spectral_radius(&(&sys.a - &sys.b * self.stacked()))
    }
}

/// Validated quadratic cost `ζᵀ Q ζ + uᵀ R u`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() || !r.is_square() {
            return Err(Error::Dimension("cost weights must be square".into()));
        }
        let q_scale = q.norm().max(1.0);
        if !linalg::is_symmetric(&q, 1e-10 * q_scale) {
            return Err(Error::InvalidArgument("Q is not symmetric".into()));
        }
        if !linalg::is_symmetric(&r, 1e-10 * r.norm().max(1.0)) {
            return Err(Error::InvalidArgument("R is not symmetric".into()));
        }
        if linalg::min_eigenvalue(&q) < -1e-10 * q_scale {
            return Err(Error::InvalidArgument("Q is not positive semi-definite".into()));
        }
        linalg::cholesky(&r, "R")?;
        Ok(Self {
            q: linalg::symmetrize(&q),
            r: linalg::symmetrize(&r),
        })
    }
}

/// `Q = blockdiag(cov⁻¹, κ I)` for a position covariance `cov`.
pub fn weight_from_cov(cov: &DMatrix<f64>, velocity_weight: f64) -> Result<DMatrix<f64>> {
    if !(velocity_weight >= 0.0 && velocity_weight.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "velocity weight must be non-negative, got {velocity_weight}"
        )));
    }
    let precision = linalg::spd_inverse(
        cov,
        "predicted covariance (inspect the KMP model that produced it)",
    )?;
    let n = cov.nrows();
    let vel = DMatrix::identity(n, n) * velocity_weight;
    Ok(linalg::block_diag(&[&precision, &vel]))
}

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    /// `[Kp Kv]`, `N_C × N_S`.
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    /// Riccati residual relative to `‖Q‖_F`.
    pub residual: f64,
}

/// Residual `AᵀP + PA − P B R⁻¹ Bᵀ P + Q`.
pub fn care_residual(sys: &LinearSystem, p: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r_inv = linalg::spd_inverse(r, "R")?;
    let a = sys.a();
    let b = sys.b();
    Ok(a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q)
}

/// Residual `AᵀPA − P − AᵀPB (R + BᵀPB)⁻¹ BᵀPA + Q`.
pub fn dare_residual(sys: &DiscreteSystem, p: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (&sys.a, &sys.b);
    let s = r + b.transpose() * p * b;
    let s_inv = linalg::spd_inverse(&s, "R + BᵀPB")?;
    let bpa = b.transpose() * p * a;
    Ok(a.transpose() * p * a - p - bpa.transpose() * s_inv * &bpa + q)
}

fn check_dims(n_s: usize, n_c: usize, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    if q.nrows() != n_s || q.ncols() != n_s || r.nrows() != n_c || r.ncols() != n_c {
        return Err(Error::Dimension(format!(
            "expected Q {n_s}x{n_s} and R {n_c}x{n_c}, got Q {}x{} and R {}x{}",
            q.nrows(),
            q.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    Ok(())
}

/// Stabilizing solution of the continuous ARE by Kleinman–Newton iteration,
/// optionally warm-started from a known stabilizing gain.
pub fn solve_care(
    sys: &LinearSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    initial_gain: Option<&DMatrix<f64>>,
) -> Result<RiccatiSolution> {
    let (n_s, n_c) = (sys.state_dim(), sys.input_dim());
    check_dims(n_s, n_c, q, r)?;
    let w = CostWeights::new(q.clone(), r.clone())?;
    let (q, r) = (&w.q, &w.r);
    check_detectable(sys.a(), q, |re, _| re >= -1e-12)?;

    let r_inv = linalg::spd_inverse(r, "R")?;
    let (a, b) = (sys.a(), sys.b());
    let q_norm = q.norm().max(f64::MIN_POSITIVE);

    let mut k = match initial_gain {
        Some(k0) => k0.clone(),
        None => sys.stabilizing_gain()?,
    };
    let abscissa = ControlGains::from_stacked(&k)
        .map(|g| g.closed_loop_abscissa(sys))
        .unwrap_or_else(|_| (a - b * &k).complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max));
    if abscissa >= 0.0 {
        return Err(Error::Unstable(abscissa));
    }

    let mut prev_residual = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for iter in 1..=MAX_RICCATI_ITERATIONS {
        let ac = a - b * &k;
        let rhs = -(q + k.transpose() * r * &k);
        let p = linalg::symmetrize(&solve_lyapunov(&ac.transpose(), &rhs)?);
        k = &r_inv * b.transpose() * &p;
        residual = care_residual_with(a, b, &r_inv, &p, q).norm() / q_norm;
        let stalled = residual >= 0.5 * prev_residual && residual < RICCATI_ACCEPT;
        if residual < RICCATI_TOLERANCE || stalled {
            return Ok(RiccatiSolution {
                p,
                gain: k,
                iterations: iter,
                residual,
            });
        }
        prev_residual = residual;
    }
    Err(Error::NoConvergence {
        iterations: MAX_RICCATI_ITERATIONS,
        residual,
    })
}

fn care_residual_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> DMatrix<f64> {
    let pb = p * b;
    a.transpose() * p + p * a - &pb * r_inv * pb.transpose() + q
}

/// Optimal infinite-horizon gains for a double-integrator-shaped system.
pub fn infinite_horizon_gains(sys: &LinearSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<ControlGains> {
    infinite_horizon_gains_from(sys, q, r, None)
}

/// As [`infinite_horizon_gains`], seeding the iteration with `warm` when it
/// is stabilizing.
pub fn infinite_horizon_gains_from(
    sys: &LinearSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    warm: Option<&ControlGains>,
) -> Result<ControlGains> {
    if sys.state_dim() != 2 * sys.input_dim() {
        return Err(Error::Dimension("gains split into Kp/Kv need N_S = 2 N_C".into()));
    }
    let seed = warm
        .filter(|g| g.closed_loop_abscissa(sys) < 0.0)
        .map(|g| g.stacked());
    let sol = solve_care(sys, q, r, seed.as_ref())?;
    let gains = ControlGains::from_stacked(&sol.gain)?;
    let abscissa = gains.closed_loop_abscissa(sys);
    if abscissa >= 0.0 {
        return Err(Error::Unstable(abscissa));
    }
    Ok(gains)
}

/// Stabilizing solution of the discrete ARE by Hewer's iteration.
pub fn solve_dare(
    sys: &DiscreteSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    initial_gain: Option<&DMatrix<f64>>,
) -> Result<RiccatiSolution> {
    let (n_s, n_c) = (sys.a.nrows(), sys.b.ncols());
    check_dims(n_s, n_c, q, r)?;
    let w = CostWeights::new(q.clone(), r.clone())?;
    let (q, r) = (&w.q, &w.r);
    check_detectable(&sys.a, q, |re, im| (re * re + im * im).sqrt() >= 1.0 - 1e-12)?;
    let (a, b) = (&sys.a, &sys.b);
    let q_norm = q.norm().max(f64::MIN_POSITIVE);

    let mut k = match (initial_gain, &sys.initial_gain) {
        (Some(k0), _) => k0.clone(),
        (None, Some(k0)) => k0.clone(),
        (None, None) => DMatrix::zeros(n_c, n_s),
    };
    let rho = spectral_radius(&(a - b * &k));
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }

    let mut prev_residual = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for iter in 1..=MAX_RICCATI_ITERATIONS {
        let ac = a - b * &k;
        let rhs = q + k.transpose() * r * &k;
        let p = linalg::symmetrize(&solve_discrete_lyapunov(&ac, &rhs)?);
        let s = r + b.transpose() * &p * b;
        k = linalg::cholesky(&s, "R + BᵀPB")?.solve(&(b.transpose() * &p * a));
        residual = dare_residual(sys, &p, q, r)?.norm() / q_norm;
        let stalled = residual >= 0.5 * prev_residual && residual < RICCATI_ACCEPT;
        if residual < RICCATI_TOLERANCE || stalled {
            return Ok(RiccatiSolution {
                p,
                gain: k,
                iterations: iter,
                residual,
            });
        }
        prev_residual = residual;
    }
    Err(Error::NoConvergence {
        iterations: MAX_RICCATI_ITERATIONS,
        residual,
    })
}

/// Infinite-horizon gains of the zero-order-hold discretized problem with
/// per-step cost `ζᵀQζ + uᵀRu`.
pub fn discrete_infinite_horizon_gains(
    sys: &LinearSystem,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    dt: f64,
) -> Result<ControlGains> {
    let d = sys.discretize(dt)?;
    ControlGains::from_stacked(&solve_dare(&d, q, r, None)?.gain)
}

/// Time-varying gains from the backward discrete Riccati recursion, starting
/// at `P_T = terminal_q`. Entry `t` is the gain applied at step `t`.
pub fn finite_horizon_gains(
    sys: &LinearSystem,
    q_sequence: &[DMatrix<f64>],
    r: &DMatrix<f64>,
    dt: f64,
    terminal_q: &DMatrix<f64>,
) -> Result<Vec<ControlGains>> {
    if q_sequence.is_empty() {
        return Err(Error::InvalidArgument("horizon must contain at least one step".into()));
    }
    if sys.state_dim() != 2 * sys.input_dim() {
        return Err(Error::Dimension("gains split into Kp/Kv need N_S = 2 N_C".into()));
    }
    let d = sys.discretize(dt)?;
    let (n_s, n_c) = (sys.state_dim(), sys.input_dim());
    let terminal = CostWeights::new(terminal_q.clone(), r.clone())
        .and_then(|w| check_dims(n_s, n_c, &w.q, &w.r).map(|_| w))
        .map_err(|e| Error::at(q_sequence.len(), e))?;
    let (a, b) = (&d.a, &d.b);
    let r = &terminal.r;
    let mut p = terminal.q;
    let mut gains = vec![ControlGains::zeros(n_c); q_sequence.len()];
    for t in (0..q_sequence.len()).rev() {
        let q_t = CostWeights::new(q_sequence[t].clone(), r.clone())
            .and_then(|w| check_dims(n_s, n_c, &w.q, &w.r).map(|_| w.q))
            .map_err(|e| Error::at(t, e))?;
        let s = r + b.transpose() * &p * b;
        let k = linalg::cholesky(&s, "R + BᵀPB")
            .map_err(|e| Error::at(t, e))?
            .solve(&(b.transpose() * &p * a));
        p = linalg::symmetrize(&(&q_t + a.transpose() * &p * (a - b * &k)));
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::at(t, Error::NoConvergence { iterations: t, residual: f64::NAN }));
        }
        gains[t] = ControlGains::from_stacked(&k)?;
    }
    Ok(gains)
}

/// `u = Kp (x̂ − x) + Kv (ẋ̂ − ẋ)` for stacked states `[x; ẋ]`.
pub fn control_command(gains: &ControlGains, target: &DVector<f64>, state: &DVector<f64>) -> Result<DVector<f64>> {
    let n_c = gains.kp.nrows();
    if target.len() != 2 * n_c || state.len() != 2 * n_c {
        return Err(Error::Dimension(format!(
            "states must have dimension {}, got {} and {}",
            2 * n_c,
            target.len(),
            state.len()
        )));
    }
    let err = target - state;
    Ok(&gains.kp * err.rows(0, n_c) + &gains.kv * err.rows(n_c, n_c))
}

/// Solves `M X + X Mᵀ = C` through its Kronecker form.
pub fn solve_lyapunov(m: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(m) + m.kronecker(&eye);
    let rhs = DVector::from_column_slice(c.as_slice());
    let x = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotPositiveDefinite("Lyapunov operator (singular)".into()))?;
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// Solves `X = Mᵀ X M + C` through its Kronecker form.
pub fn solve_discrete_lyapunov(m: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mt = m.transpose();
    let op = DMatrix::<f64>::identity(n * n, n * n) - mt.kronecker(&mt);
    let rhs = DVector::from_column_slice(c.as_slice());
    let x = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotPositiveDefinite("discrete Lyapunov operator (singular)".into()))?;
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let tol = max * 1e-10 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|s| **s > tol).count()
}

/// Fails when the unobservable subspace of `(A, Q)` carries a mode flagged
/// by `bad(re, im)`.
fn check_detectable(a: &DMatrix<f64>, q: &DMatrix<f64>, bad: impl Fn(f64, f64) -> bool) -> Result<()> {
    let n = a.nrows();
    let mut obs = DMatrix::zeros(n * n, n);
    let mut block = q.clone();
    for i in 0..n {
        obs.view_mut((i * n, 0), (n, n)).copy_from(&block);
        block = &block * a;
    }
    let svd = SVD::new(obs, false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let sv = &svd.singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let tol = max.max(f64::MIN_POSITIVE) * 1e-10 * n as f64;
    let mut null: Vec<DVector<f64>> = (0..sv.len())
        .filter(|&i| sv[i] <= tol)
        .map(|i| v_t.row(i).transpose())
        .collect();
    // A wide SVD returns only min(rows, cols) vectors; the remainder of the
    // basis is unobservable as well.
    if v_t.nrows() < n {
        return Err(Error::Dimension("observability matrix has unexpected shape".into()));
    }
    if max == 0.0 {
        null = (0..n).map(|i| DVector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 })).collect();
    }
    if null.is_empty() {
        return Ok(());
    }
    let k = null.len();
    let mut basis = DMatrix::zeros(n, k);
    for (j, v) in null.iter().enumerate() {
        basis.set_column(j, v);
    }
    let reduced = basis.transpose() * a * &basis;
    if reduced.complex_eigenvalues().iter().any(|z| bad(z.re, z.im)) {
        return Err(Error::NotDetectable {
            basis: null.iter().map(|v| v.iter().copied().collect()).collect(),
        });
    }
    Ok(())
}
