//! Closed-form estimation for the knowledge part of a model: linear least
//! squares over selected terms and quadratic-variation noise amplitudes.
//!
//! Both estimators are direct formulas, not iterative optimizers: the
//! knowledge coefficients enter the drift linearly, so the forecast-error
//! minimum has a closed form, and the noise amplitudes follow from the
//! quadratic variation of the residual between observed and modeled
//! derivatives.

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::KnowledgeTerm;

/// Ordinary least squares `min_beta |target - design * beta|^2` via the
/// normal equations.
///
/// `design` is row-major `samples x terms`.  The Gram matrix must admit a
/// Cholesky factorization without any jitter repair; a failing pivot means
/// two effectively proportional columns and is reported as
/// [`Error::RankDeficient`] rather than silently regularized.
pub fn least_squares_fit(
    design: &[f64],
    samples: usize,
    terms: usize,
    target: &[f64],
) -> Result<Vec<f64>> {
    assert_eq!(design.len(), samples * terms, "design has wrong length");
    if target.len() != samples {
        return Err(Error::LengthMismatch {
            context: "least squares target",
            left: target.len(),
            right: samples,
        });
    }
    assert!(terms > 0, "least squares needs at least one term");
    if samples <= terms {
        return Err(Error::InsufficientSamples {
            got: samples,
            need: terms + 1,
        });
    }

    // Gram matrix and right-hand side of the normal equations.
    let mut gram = vec![0.0; terms * terms];
    let mut rhs = vec![0.0; terms];
    for k in 0..samples {
        let row = &design[k * terms..(k + 1) * terms];
        for i in 0..terms {
            rhs[i] += row[i] * target[k];
            for j in 0..=i {
                gram[i * terms + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..terms {
        for j in 0..i {
            gram[j * terms + i] = gram[i * terms + j];
        }
    }

    let maxdiag = (0..terms)
        .map(|i| gram[i * terms + i])
        .fold(f64::NEG_INFINITY, f64::max);
    if !(maxdiag > 0.0) {
        return Err(Error::RankDeficient { terms, samples });
    }
    let l = linalg::cholesky_raw(&gram, terms, linalg::PIVOT_REL_TOL * maxdiag)
        .map_err(|_| Error::RankDeficient { terms, samples })?;
    // Forward/back substitution on the verified factor.
    let mut y = vec![0.0; terms];
    for i in 0..terms {
        let mut acc = rhs[i];
        for k in 0..i {
            acc -= l[i * terms + k] * y[k];
        }
        y[i] = acc / l[i * terms + i];
    }
    let mut beta = vec![0.0; terms];
    for i in (0..terms).rev() {
        let mut acc = y[i];
        for k in (i + 1)..terms {
            acc -= l[k * terms + i] * beta[k];
        }
        beta[i] = acc / l[i * terms + i];
    }
    Ok(beta)
}

/// Fits the shared coefficient pool of a set of knowledge terms against
/// per-equation derivative targets.
///
/// `derivs` is row-major `n x traj.dim` (any derivative estimate aligned
/// with the first `n` trajectory points).  Every equation that owns at
/// least one term contributes `n` stacked samples; a coefficient shared by
/// several terms (within or across equations) receives the sum of its term
/// factors in each sample row, so tied coefficients are fitted jointly over
/// all their uses — the regression analogue of gradient accumulation.
pub fn fit_knowledge_coefficients(
    traj: &Trajectory,
    terms: &[KnowledgeTerm],
    coeff_count: usize,
    derivs: &[f64],
) -> Result<Vec<f64>> {
    let dim = traj.dim;
    assert!(coeff_count > 0, "coefficient pool is empty");
    if derivs.len() % dim != 0 {
        return Err(Error::LengthMismatch {
            context: "derivative matrix",
            left: derivs.len(),
            right: dim,
        });
    }
    let n = derivs.len() / dim;
    if n > traj.points() {
        return Err(Error::LengthMismatch {
            context: "derivative rows vs trajectory points",
            left: n,
            right: traj.points(),
        });
    }
    for t in terms {
        assert!(t.row < dim, "term row out of range");
        assert!(t.coeff < coeff_count, "term coefficient out of range");
    }

    let mut eqs: Vec<usize> = terms.iter().map(|t| t.row).collect();
    eqs.sort_unstable();
    eqs.dedup();
    assert!(!eqs.is_empty(), "no knowledge terms to fit");

    let samples = n * eqs.len();
    let mut design = vec![0.0; samples * coeff_count];
    let mut target = vec![0.0; samples];
    for (e, &eq) in eqs.iter().enumerate() {
        for k in 0..n {
            let state = traj.state(k);
            let s = (e * n + k) * coeff_count;
            for t in terms.iter().filter(|t| t.row == eq) {
                design[s + t.coeff] += t.desc.eval(state);
            }
            target[e * n + k] = derivs[k * dim + eq];
        }
    }
    least_squares_fit(&design, samples, coeff_count, &target)
}

/// Per-component noise amplitudes from the quadratic variation of the
/// residual derivative.
///
/// # Algorithm
///
/// With `r_k = true_deriv_k - model_deriv_k` the estimate is
/// `sigma_i = sqrt( dt / n * sum_k r_{k,i}^2 )`: the observed derivative of
/// a diffusion carries a noise term of magnitude `sigma/sqrt(dt)` that
/// dominates any drift mismatch at small `dt`, so the scaled residual power
/// recovers the diffusion amplitude.
///
/// Both series are row-major `n x dim` and must be aligned; at least 100
/// rows are required for a stable estimate.
pub fn estimate_noise_sigma(
    true_derivs: &[f64],
    model_derivs: &[f64],
    dim: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    assert!(dt > 0.0, "time step must be positive");
    assert!(dim > 0, "dimension must be positive");
    if true_derivs.len() != model_derivs.len() {
        return Err(Error::LengthMismatch {
            context: "derivative series",
            left: true_derivs.len(),
            right: model_derivs.len(),
        });
    }
    if true_derivs.len() % dim != 0 {
        return Err(Error::LengthMismatch {
            context: "derivative series vs dimension",
            left: true_derivs.len(),
            right: dim,
        });
    }
    let n = true_derivs.len() / dim;
    if n < 100 {
        return Err(Error::InsufficientSamples { got: n, need: 100 });
    }
    let mut acc = vec![0.0; dim];
    for k in 0..n {
        for i in 0..dim {
            let r = true_derivs[k * dim + i] - model_derivs[k * dim + i];
            acc[i] += r * r;
        }
    }
    Ok(acc.iter().map(|a| (dt / n as f64 * a).sqrt()).collect())
}
