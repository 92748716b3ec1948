//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use ukmp::ControllerOutput;

/// Stable invariant subspace of the Hamiltonian through the matrix sign
/// function, an ARE solve that shares nothing with Newton iteration.
pub fn sign_function_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let g = b * r.clone().try_inverse().unwrap() * b.transpose();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut z = h;
    for _ in 0..100 {
        let inv = z.clone().try_inverse().unwrap();
        let c = (inv.determinant().abs() / z.determinant().abs()).powf(0.5 / (2 * n) as f64);
        let next = (&z * c + inv / c) * 0.5;
        let done = (&next - &z).norm() <= 1e-14 * next.norm();
        z = next;
        if done {
            break;
        }
    }
    let i = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + &i));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(z.view((0, 0), (n, n)) + &i)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let p = lhs.svd(true, true).solve(&rhs, 1e-14).unwrap();
    (&p + p.transpose()) * 0.5
}

/// Fusion objective `Σ (u − uᵖ)ᵀ Γᵖ (u − uᵖ)`.
pub fn fusion_objective(outputs: &[ControllerOutput], u: &DVector<f64>) -> f64 {
    outputs
        .iter()
        .map(|o| {
            let e = u - &o.command;
            e.dot(&(&o.weight * &e))
        })
        .sum()
}

/// Minimizes the fusion objective by cyclic coordinate descent, using only
/// objective values: each coordinate step fits a parabola through three
/// evaluations.
pub fn brute_force_fusion(outputs: &[ControllerOutput]) -> DVector<f64> {
    let n = outputs[0].command.len();
    let mut u = DVector::zeros(n);
    for _ in 0..200_000 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let f0 = fusion_objective(outputs, &u);
            let mut probe = u.clone();
            probe[i] += 1.0;
            let fp = fusion_objective(outputs, &probe);
            probe[i] -= 2.0;
            let fm = fusion_objective(outputs, &probe);
            let curvature = fp + fm - 2.0 * f0;
            if curvature <= 0.0 {
                continue;
            }
            let step = (fm - fp) / (2.0 * curvature);
            u[i] += step;
            moved = moved.max(step.abs());
        }
        if moved < 1e-13 {
            break;
        }
    }
    u
}
