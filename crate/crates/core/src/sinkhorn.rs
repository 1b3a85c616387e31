//! Entropic optimal transport over the relaxed transportation polytope.
//!
//! Given a similarity matrix `S` (`M x N`, clusters by points), the
//! regularized assignment problem has the closed-form solution
//! `A = diag(u) · S^λ · diag(v)` where the exponent is elementwise. The
//! scaling vectors are found by alternating row and column rescaling of the
//! kernel `K = S^λ` until `A·1 = 1/M` and `Aᵀ·1 = 1/N`.

use crate::error::{Error, KernelAxis, Result};
use crate::numerics::Matrix;

/// Kernel rows or columns whose every entry falls below this are treated as
/// underflowed.
pub const KERNEL_FLOOR: f64 = 1e-300;

pub const DEFAULT_LAMBDA: f64 = 25.0;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

/// Regularization and stopping parameters shared by every per-class solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub lambda: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            lambda: DEFAULT_LAMBDA,
            max_iters: DEFAULT_MAX_ITERS,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TransportProblem {
    /// `M x N`, each column a distribution over clusters.
    pub similarity: Matrix,
    pub settings: SolverSettings,
}

impl TransportProblem {
    pub fn new(similarity: Matrix, settings: SolverSettings) -> Self {
        TransportProblem {
            similarity,
            settings,
        }
    }
}

/// Transport plan plus the scaling vectors that produced it.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    /// `M x N` nonnegative plan.
    pub plan: Matrix,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub iters_used: usize,
    pub converged: bool,
}

impl AssignmentMatrix {
    pub fn clusters(&self) -> usize {
        self.plan.rows()
    }

    pub fn points(&self) -> usize {
        self.plan.cols()
    }
}

/// Elementwise `S^λ`, rejecting kernels with an all-underflow row or column.
pub fn kernel(similarity: &Matrix, lambda: f64) -> Result<Matrix> {
    let mut k = similarity.clone();
    k.as_mut_slice().iter_mut().for_each(|s| *s = s.powf(lambda));
    check_kernel(&k)?;
    Ok(k)
}

fn check_kernel(k: &Matrix) -> Result<()> {
    let (m, n) = (k.rows(), k.cols());
    let mut col_ok = vec![false; n];
    for r in 0..m {
        let mut row_ok = false;
        for (c, &x) in k.row(r).iter().enumerate() {
            if x >= KERNEL_FLOOR {
                row_ok = true;
                col_ok[c] = true;
            }
        }
        if !row_ok {
            return Err(Error::DegenerateKernel {
                axis: KernelAxis::Row,
                index: r,
            });
        }
    }
    if let Some(c) = col_ok.iter().position(|ok| !ok) {
        return Err(Error::DegenerateKernel {
            axis: KernelAxis::Column,
            index: c,
        });
    }
    Ok(())
}

pub fn solve(problem: &TransportProblem) -> Result<AssignmentMatrix> {
    let s = &problem.similarity;
    let settings = problem.settings;
    settings.validate()?;
    let (m, n) = (s.rows(), s.cols());
    if m == 0 || n == 0 {
        return Err(Error::invalid(format!("empty transport problem ({m}x{n})")));
    }
    if !s.as_slice().iter().all(|&x| x.is_finite() && x >= 0.0) {
        return Err(Error::invalid("similarity entries must be finite and nonnegative"));
    }
    let k = kernel(s, settings.lambda)?;
    let row_target = 1.0 / m as f64;
    let col_target = 1.0 / n as f64;

    let mut u = vec![1.0; m];
    let mut v = vec![1.0; n];
    let mut kv = vec![0.0; m];
    let mut ktu = vec![0.0; n];
    let mut converged = false;
    let mut iters_used = 0;

    // After each column rescale the column marginals hold up to rounding, so
    // convergence is judged on the row marginals `u ⊙ Kv`.
    for iter in 0..=settings.max_iters {
        for (r, out) in kv.iter_mut().enumerate() {
            *out = crate::numerics::dot(k.row(r), &v);
        }
        if iter > 0 {
            let residual = u
                .iter()
                .zip(&kv)
                .map(|(ui, kvi)| (ui * kvi - row_target).abs())
                .fold(0.0, f64::max);
            if residual <= settings.tolerance {
                converged = true;
                break;
            }
            if iter == settings.max_iters {
                break;
            }
        }
        iters_used = iter + 1;
        for (ui, kvi) in u.iter_mut().zip(&kv) {
            *ui = row_target / kvi;
        }
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for (r, &ur) in u.iter().enumerate() {
            crate::numerics::axpy(ur, k.row(r), &mut ktu);
        }
        for (vi, ktui) in v.iter_mut().zip(&ktu) {
            *vi = col_target / ktui;
        }
        if !(u.iter().all(|x| x.is_finite()) && v.iter().all(|x| x.is_finite())) {
            // Scaling blew up: some kernel mass vanished relative to the rest.
            let r = u.iter().position(|x| !x.is_finite());
            return Err(match r {
                Some(index) => Error::DegenerateKernel {
                    axis: KernelAxis::Row,
                    index,
                },
                None => Error::DegenerateKernel {
                    axis: KernelAxis::Column,
                    index: v.iter().position(|x| !x.is_finite()).unwrap_or(0),
                },
            });
        }
    }

    Ok(AssignmentMatrix {
        plan: reconstruct(&k, &u, &v),
        u,
        v,
        iters_used,
        converged,
    })
}

/// `diag(u) · K · diag(v)`.
pub fn reconstruct(kernel: &Matrix, u: &[f64], v: &[f64]) -> Matrix {
    let mut a = kernel.clone();
    for (r, &ur) in u.iter().enumerate() {
        for (x, &vc) in a.row_mut(r).iter_mut().zip(v) {
            *x *= ur * vc;
        }
    }
    a
}

/// Per-column argmax; ties go to the lowest row index.
pub fn harden(a: &AssignmentMatrix) -> Vec<usize> {
    harden_plan(&a.plan)
}

pub fn harden_plan(plan: &Matrix) -> Vec<usize> {
    let (m, n) = (plan.rows(), plan.cols());
    let mut best = vec![0usize; n];
    let mut best_val: Vec<f64> = if m > 0 { plan.row(0).to_vec() } else { vec![] };
    for r in 1..m {
        for (c, &x) in plan.row(r).iter().enumerate() {
            if x > best_val[c] {
                best_val[c] = x;
                best[c] = r;
            }
        }
    }
    best
}

/// `(max |row_sum − 1/M|, max |col_sum − 1/N|)`.
pub fn marginal_residuals(a: &AssignmentMatrix) -> (f64, f64) {
    plan_residuals(&a.plan)
}

pub fn plan_residuals(plan: &Matrix) -> (f64, f64) {
    let (m, n) = (plan.rows(), plan.cols());
    let row_target = 1.0 / m as f64;
    let col_target = 1.0 / n as f64;
    let mut col_sums = vec![0.0; n];
    let mut row_res: f64 = 0.0;
    for r in 0..m {
        let row = plan.row(r);
        row_res = row_res.max((row.iter().sum::<f64>() - row_target).abs());
        crate::numerics::axpy(1.0, row, &mut col_sums);
    }
    let col_res = col_sums
        .iter()
        .map(|s| (s - col_target).abs())
        .fold(0.0, f64::max);
    (row_res, col_res)
}

/// Shannon entropy of a plan viewed as a joint distribution.
pub fn plan_entropy(plan: &Matrix) -> f64 {
    -plan
        .as_slice()
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}
