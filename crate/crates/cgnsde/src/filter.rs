//! Closed-form data assimilation for conditionally linear models.
//!
//! Because the drift of the unobserved components `u2` is linear in `u2`
//! given the observed path, the distribution of `u2` conditioned on the
//! observed history stays Gaussian, `N(mu, R)`, and evolves by closed-form
//! moment equations driven by the observed increments `du1`:
//!
//! ```text
//! dmu = (f2 + g2 mu) dt
//!     + R g1^T (s1 s1^T)^{-1} [ du1 - (f1 + g1 mu) dt ]
//! dR  = [ g2 R + R g2^T + s2 s2^T
//!         - R g1^T (s1 s1^T)^{-1} g1 R ] dt
//! ```
//!
//! Both equations are discretized with the explicit Euler scheme at the
//! sampling interval of the observations.  After every step the covariance
//! is symmetrized and validated positive definite (with the standard
//! diagonal jitter as a one-shot repair); an unrepairable covariance aborts
//! the run with [`Error::CovarianceCollapse`].
//!
//! The update is recorded on the reverse-mode [`Tape`], so the same code
//! path serves both gradient-based training (record the whole chain, then
//! run `backward`) and plain evaluation ([`run_filter`] truncates the tape
//! every step and re-interns the carried state, which keeps memory flat and
//! produces bitwise identical trajectories of `mu` and `R`).

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::model::{CgnModel, TapeModel};
use crate::tape::{Tape, Var};

/// Default initial covariance scale: `R(0) = 0.01 I`.
pub const DEFAULT_R0_DIAG: f64 = 0.01;

/// Zero initial mean and `0.01 I` initial covariance for an
/// `n2`-dimensional hidden state.
pub fn default_initial_posterior(n2: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r0 = vec![0.0; n2 * n2];
    for i in 0..n2 {
        r0[i * n2 + i] = DEFAULT_R0_DIAG;
    }
    (vec![0.0; n2], r0)
}

/// Posterior mean and covariance at every observation time.
///
/// Entry `k` conditions on observations up to time `t0 + k dt`; entry 0 is
/// the prescribed initial posterior.
#[derive(Debug, Clone)]
pub struct PosteriorSeries {
    pub t0: f64,
    pub dt: f64,
    /// Hidden-state dimension.
    pub n2: usize,
    /// Row-major means, `points x n2`.
    pub means: Vec<f64>,
    /// Row-major covariances, `points x (n2 * n2)`.
    pub covs: Vec<f64>,
}

impl PosteriorSeries {
    /// Number of stored time points.
    pub fn points(&self) -> usize {
        self.means.len() / self.n2
    }

    /// Posterior mean at point `k`.
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.n2..(k + 1) * self.n2]
    }

    /// Posterior covariance at point `k`, row-major `n2 x n2`.
    pub fn cov(&self, k: usize) -> &[f64] {
        &self.covs[k * self.n2 * self.n2..(k + 1) * self.n2 * self.n2]
    }

    /// Time of point `k`.
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }
}

/// One filtering pass recorded on a tape.
///
/// The struct holds the tape handles that persist across steps: the
/// constant matrices `(s1 s1^T)^{-1}` and `s2 s2^T dt`, and the current
/// posterior `(mu, cov)`.  Callers that train through the filter keep the
/// whole chain on the tape and read `mu` / `cov` after each step; callers
/// that only want values truncate the tape and re-intern (see
/// [`run_filter`]).
pub struct TapeFilter<'m> {
    model: &'m CgnModel,
    tm: TapeModel,
    dt: f64,
    /// `n1 x n1` constant `diag(1 / sigma1_i^2)`.
    s1inv: Var,
    /// `n2 x n2` constant `diag(sigma2_i^2) * dt`.
    q2dt: Var,
    /// Current posterior mean, `n2 x 1`.
    pub mu: Var,
    /// Current posterior covariance, `n2 x n2`.
    pub cov: Var,
}

impl<'m> TapeFilter<'m> {
    /// Interns the filter constants and the initial posterior.
    ///
    /// Call before taking any tape mark that later truncation rewinds to,
    /// so the constants survive across steps.
    pub fn new(
        tape: &mut Tape,
        model: &'m CgnModel,
        tm: TapeModel,
        mu0: &[f64],
        r0: &[f64],
        dt: f64,
    ) -> Result<Self> {
        let n1 = model.partition.n1();
        let n2 = model.partition.n2();
        if mu0.len() != n2 {
            return Err(Error::DimensionMismatch {
                context: "initial posterior mean",
                expected: n2,
                got: mu0.len(),
            });
        }
        if r0.len() != n2 * n2 {
            return Err(Error::DimensionMismatch {
                context: "initial posterior covariance",
                expected: n2 * n2,
                got: r0.len(),
            });
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::Validation(format!(
                "observation interval must be positive, got {dt}"
            )));
        }
        let mut s1inv = vec![0.0; n1 * n1];
        for i in 0..n1 {
            s1inv[i * n1 + i] = 1.0 / (model.sigma1[i] * model.sigma1[i]);
        }
        let mut q2dt = vec![0.0; n2 * n2];
        for i in 0..n2 {
            q2dt[i * n2 + i] = model.sigma2[i] * model.sigma2[i] * dt;
        }
        let s1inv = tape.leaf(&s1inv, n1, n1);
        let q2dt = tape.leaf(&q2dt, n2, n2);
        let mu = tape.leaf(mu0, n2, 1);
        let cov = tape.leaf(r0, n2, n2);
        Ok(TapeFilter {
            model,
            tm,
            dt,
            s1inv,
            q2dt,
            mu,
            cov,
        })
    }

    /// Re-interns a posterior as fresh leaves (used after tape truncation,
    /// and by training code to start a new window).
    pub fn reset(&mut self, tape: &mut Tape, mu: &[f64], cov: &[f64]) {
        let n2 = self.model.partition.n2();
        self.mu = tape.leaf(mu, n2, 1);
        self.cov = tape.leaf(cov, n2, n2);
    }

    /// Advances the posterior by one observation: `u1` is the observed
    /// state at the current time, `u1_next` at the next.  `step` only
    /// labels errors.  On success `self.mu` / `self.cov` point at the new
    /// posterior.
    pub fn step(&mut self, tape: &mut Tape, u1: &[f64], u1_next: &[f64], step: usize) -> Result<()> {
        let n1 = self.model.partition.n1();
        let dt = self.dt;
        let du1: Vec<f64> = u1_next.iter().zip(u1).map(|(a, b)| a - b).collect();

        let u1v = tape.leaf(u1, n1, 1);
        let du1v = tape.leaf(&du1, n1, 1);
        let slots = self.model.eval_slots(tape, &self.tm, u1v);

        // Innovation: du1 - (f1 + g1 mu) dt.
        let g1mu = tape.matmul(slots.g1, self.mu);
        let pred = tape.add(slots.f1, g1mu);
        let innov = tape.add_scaled(du1v, pred, -dt);

        // Gain: R g1^T (s1 s1^T)^{-1}.
        let g1t = tape.transpose(slots.g1);
        let rg1t = tape.matmul(self.cov, g1t);
        let gain = tape.matmul(rg1t, self.s1inv);

        // Mean: mu + (f2 + g2 mu) dt + gain * innovation.
        let g2mu = tape.matmul(slots.g2, self.mu);
        let drift2 = tape.add(slots.f2, g2mu);
        let mu_pred = tape.add_scaled(self.mu, drift2, dt);
        let correction = tape.matmul(gain, innov);
        let mu_next = tape.add(mu_pred, correction);

        // Covariance: R + (g2 R + R g2^T + s2 s2^T - gain g1 R) dt,
        // then symmetrize and validate.
        let g2r = tape.matmul(slots.g2, self.cov);
        let g2rt = tape.transpose(g2r);
        let lyap = tape.add(g2r, g2rt);
        let damped = {
            let g1r = tape.matmul(slots.g1, self.cov);
            let dissip = tape.matmul(gain, g1r);
            tape.sub(lyap, dissip)
        };
        let ricc = tape.add_scaled(self.cov, damped, dt);
        let cov_next = tape.add(ricc, self.q2dt);
        let cov_sym = tape.symmetrize_sq(cov_next);

        if tape.read(mu_next).iter().any(|v| !v.is_finite())
            || tape.read(cov_sym).iter().any(|v| !v.is_finite())
        {
            return Err(Error::NumericalBlowup { step });
        }
        let cov_fixed = tape.spd_repair(cov_sym).map_err(|e| match e {
            Error::NotPositiveDefinite { .. } => Error::CovarianceCollapse { step },
            other => other,
        })?;
        self.mu = mu_next;
        self.cov = cov_fixed;
        Ok(())
    }
}

/// Runs the filter over an observed trajectory (dimension `n1`, ordered
/// like the model's observed components) and returns the posterior at every
/// observation time.  Memory stays flat: the tape is truncated after every
/// step.
pub fn run_filter(
    model: &CgnModel,
    obs: &Trajectory,
    mu0: &[f64],
    r0: &[f64],
) -> Result<PosteriorSeries> {
    let n1 = model.partition.n1();
    let n2 = model.partition.n2();
    if obs.dim != n1 {
        return Err(Error::DimensionMismatch {
            context: "observed trajectory dimension",
            expected: n1,
            got: obs.dim,
        });
    }
    if obs.points() < 2 {
        return Err(Error::TooShort {
            len: obs.points(),
            need: 2,
        });
    }
    let mut tape = Tape::new();
    let tm = model.intern(&mut tape);
    let mut filt = TapeFilter::new(&mut tape, model, tm, mu0, r0, obs.dt)?;
    let base = tape.mark();

    let points = obs.points();
    let mut series = PosteriorSeries {
        t0: obs.t0,
        dt: obs.dt,
        n2,
        means: Vec::with_capacity(points * n2),
        covs: Vec::with_capacity(points * n2 * n2),
    };
    series.means.extend_from_slice(mu0);
    series.covs.extend_from_slice(r0);

    let mut mu_buf = mu0.to_vec();
    let mut cov_buf = r0.to_vec();
    for k in 0..points - 1 {
        filt.reset(&mut tape, &mu_buf, &cov_buf);
        filt.step(&mut tape, obs.state(k), obs.state(k + 1), k)?;
        mu_buf.copy_from_slice(tape.read(filt.mu));
        cov_buf.copy_from_slice(tape.read(filt.cov));
        series.means.extend_from_slice(&mu_buf);
        series.covs.extend_from_slice(&cov_buf);
        tape.truncate(base);
    }
    Ok(series)
}
