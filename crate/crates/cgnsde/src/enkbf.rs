//! Ensemble Kalman–Bucy filter: the reference assimilation method when the
//! true dynamics are not conditionally Gaussian.
//!
//! The observed components are pinned to the data; each ensemble member
//! carries only the unobserved components.  Per observation interval every
//! member takes one combined Euler update: the full-model forecast of its
//! hidden state, inflated propagation noise, and a Kalman correction with
//! the gain built from the ensemble cross-covariance between the hidden
//! members and their observed-drift values.  The correction uses the
//! deterministic (symmetrized-innovation) variant, so no perturbed
//! observations enter.
//!
//! Noise inflation multiplies the hidden-state diffusion inside the
//! propagation only; the gain is untouched.  Member overflow flags the run
//! as a catastrophic divergence, which the sweep drivers record instead of
//! crashing.

use rand_chacha::ChaCha12Rng;

use crate::dynamics::{Trajectory, BLOWUP_LIMIT};
use crate::error::{Error, Result};
use crate::filter::{default_initial_posterior, PosteriorSeries};
use crate::linalg;
use crate::model::StatePartition;
use crate::rng::gaussian_vec;

/// Ensemble spread below which the filter is considered collapsed.
pub const COLLAPSE_SPREAD: f64 = 1e-12;

/// Multiplicative factor on the hidden-state noise amplitudes during member
/// propagation.  A factor of one leaves the scheme bitwise unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflationConfig {
    factor: f64,
}

impl InflationConfig {
    pub fn new(factor: f64) -> Result<Self> {
        if !factor.is_finite() || factor < 1.0 {
            return Err(Error::Validation(format!(
                "inflation factor must be finite and at least 1, got {factor}"
            )));
        }
        Ok(InflationConfig { factor })
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }
}

/// Hidden-state ensemble: `J` member vectors of dimension `n2`, row-major.
#[derive(Debug, Clone)]
pub struct Ensemble {
    n2: usize,
    data: Vec<f64>,
}

impl Ensemble {
    /// Wraps raw member data (`J x n2` row-major).
    pub fn new(n2: usize, data: Vec<f64>) -> Result<Self> {
        assert!(n2 > 0, "hidden dimension must be positive");
        assert_eq!(data.len() % n2, 0, "member data has ragged shape");
        let j = data.len() / n2;
        if j < 2 {
            return Err(Error::Validation(format!(
                "ensemble needs at least two members, got {j}"
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Validation("ensemble members must be finite".into()));
        }
        Ok(Ensemble { n2, data })
    }

    /// Draws `j` members from the Gaussian `N(mu0, r0)`.
    pub fn sample(
        j: usize,
        mu0: &[f64],
        r0: &[f64],
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let n2 = mu0.len();
        assert_eq!(r0.len(), n2 * n2, "covariance has wrong shape");
        let l = linalg::cholesky(r0, n2)?;
        let mut data = Vec::with_capacity(j * n2);
        for _ in 0..j {
            let xi = gaussian_vec(rng, n2);
            for r in 0..n2 {
                let mut v = mu0[r];
                for c in 0..=r {
                    v += l[r * n2 + c] * xi[c];
                }
                data.push(v);
            }
        }
        Ensemble::new(n2, data)
    }

    /// Member count `J`.
    pub fn members(&self) -> usize {
        self.data.len() / self.n2
    }

    /// Hidden-state dimension.
    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn member(&self, k: usize) -> &[f64] {
        &self.data[k * self.n2..(k + 1) * self.n2]
    }

    /// Ensemble mean, fixed (member-order) summation.
    pub fn mean(&self) -> Vec<f64> {
        let j = self.members();
        let mut out = vec![0.0; self.n2];
        for k in 0..j {
            for (o, m) in out.iter_mut().zip(self.member(k)) {
                *o += m;
            }
        }
        for o in &mut out {
            *o /= j as f64;
        }
        out
    }

    /// Unbiased ensemble covariance (`n2 x n2`), positive semidefinite by
    /// construction from the anomalies.
    pub fn covariance(&self) -> Vec<f64> {
        let j = self.members();
        let n2 = self.n2;
        let mean = self.mean();
        let mut out = vec![0.0; n2 * n2];
        for k in 0..j {
            let m = self.member(k);
            for r in 0..n2 {
                let ar = m[r] - mean[r];
                for c in 0..n2 {
                    out[r * n2 + c] += ar * (m[c] - mean[c]);
                }
            }
        }
        for o in &mut out {
            *o /= (j - 1) as f64;
        }
        out
    }

    /// Largest absolute deviation of any member entry from the mean.
    pub fn spread(&self) -> f64 {
        let mean = self.mean();
        let mut s: f64 = 0.0;
        for k in 0..self.members() {
            for (m, mu) in self.member(k).iter().zip(&mean) {
                s = s.max((m - mu).abs());
            }
        }
        s
    }
}

/// Advances the ensemble across one observation interval.
///
/// # Algorithm
///
/// With the observed state pinned to `u1`, each member's full state is
/// assembled and the full drift evaluated; its observed rows `F1_j` feed
/// the gain, its hidden rows `F2_j` the forecast.  The gain is
/// `K = C (s1 s1^T)^{-1}` with `C` the unbiased ensemble cross-covariance
/// between the hidden members and `F1`, and the update per member is
///
/// ```text
/// u2_j += F2_j dt + inflation * s2 . sqrt(dt) xi_j
///              + K (du1 - (F1_j + F1_mean)/2 dt)
/// ```
///
/// in one combined Euler step.  `sigma` holds the full-state noise
/// amplitudes; `step` only labels errors.  All reductions run in member
/// order, so results are reproducible.
///
/// # Errors
///
/// [`Error::EnsembleCollapse`] when the incoming spread is below
/// [`COLLAPSE_SPREAD`]; [`Error::NumericalBlowup`] when any updated member
/// entry is non-finite or exceeds [`BLOWUP_LIMIT`] (catastrophic filter
/// divergence).
#[allow(clippy::too_many_arguments)]
pub fn enkbf_step<F>(
    ens: &mut Ensemble,
    mut drift: F,
    sigma: &[f64],
    partition: &StatePartition,
    u1: &[f64],
    du1: &[f64],
    dt: f64,
    inflation: &InflationConfig,
    rng: &mut ChaCha12Rng,
    step: usize,
) -> Result<()>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n1 = partition.n1();
    let n2 = partition.n2();
    let n = partition.n();
    let j = ens.members();
    assert_eq!(ens.n2(), n2, "ensemble dimension mismatch");
    assert_eq!(sigma.len(), n, "noise amplitudes have wrong dimension");
    assert_eq!(u1.len(), n1, "observed state has wrong dimension");
    assert_eq!(du1.len(), n1, "observed increment has wrong dimension");
    assert!(dt > 0.0, "time step must be positive");

    if ens.spread() < COLLAPSE_SPREAD {
        return Err(Error::EnsembleCollapse { step });
    }

    // Full drift per member with the observed components pinned.
    let mut full = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut f1 = vec![0.0; j * n1];
    let mut f2 = vec![0.0; j * n2];
    for k in 0..j {
        for (pos, &i) in partition.observed.iter().enumerate() {
            full[i] = u1[pos];
        }
        for (pos, &i) in partition.unobserved.iter().enumerate() {
            full[i] = ens.member(k)[pos];
        }
        drift(&full, &mut out);
        for (pos, &i) in partition.observed.iter().enumerate() {
            f1[k * n1 + pos] = out[i];
        }
        for (pos, &i) in partition.unobserved.iter().enumerate() {
            f2[k * n2 + pos] = out[i];
        }
    }

    let u2_mean = ens.mean();
    let mut f1_mean = vec![0.0; n1];
    for k in 0..j {
        for c in 0..n1 {
            f1_mean[c] += f1[k * n1 + c];
        }
    }
    for v in &mut f1_mean {
        *v /= j as f64;
    }

    // Gain K = C (s1 s1^T)^{-1} with C the unbiased cross-covariance of the
    // hidden members against their observed-drift values.
    let mut gain = vec![0.0; n2 * n1];
    for k in 0..j {
        let m = ens.member(k);
        for r in 0..n2 {
            let ar = m[r] - u2_mean[r];
            for c in 0..n1 {
                gain[r * n1 + c] += ar * (f1[k * n1 + c] - f1_mean[c]);
            }
        }
    }
    for r in 0..n2 {
        for c in 0..n1 {
            let s1 = sigma[partition.observed[c]];
            gain[r * n1 + c] /= (j - 1) as f64 * s1 * s1;
        }
    }

    let sqrt_dt = dt.sqrt();
    let mut innovation = vec![0.0; n1];
    for k in 0..j {
        let xi = gaussian_vec(rng, n2);
        for c in 0..n1 {
            innovation[c] = du1[c] - 0.5 * (f1[k * n1 + c] + f1_mean[c]) * dt;
        }
        let row = &mut ens.data[k * n2..(k + 1) * n2];
        for r in 0..n2 {
            let s2 = sigma[partition.unobserved[r]];
            let mut v = row[r]
                + f2[k * n2 + r] * dt
                + inflation.factor() * s2 * sqrt_dt * xi[r];
            for c in 0..n1 {
                v += gain[r * n1 + c] * innovation[c];
            }
            row[r] = v;
        }
    }

    if ens
        .data
        .iter()
        .any(|x| !x.is_finite() || x.abs() > BLOWUP_LIMIT)
    {
        return Err(Error::NumericalBlowup { step });
    }
    Ok(())
}

/// Runs the ensemble filter over an observed trajectory of a benchmark
/// system, returning the posterior as ensemble mean and covariance per
/// observation point.
///
/// The ensemble starts from `J` draws of the default initial posterior; the
/// first series point holds the empirical statistics of that initial
/// ensemble.  Errors from [`enkbf_step`] propagate with their time index —
/// a [`Error::NumericalBlowup`] is the catastrophic-divergence signal that
/// sweep drivers record.
pub fn run_enkbf(
    bench: &crate::dynamics::Benchmark,
    partition: &StatePartition,
    obs: &Trajectory,
    j: usize,
    inflation: &InflationConfig,
    rng: &mut ChaCha12Rng,
) -> Result<PosteriorSeries> {
    let n1 = partition.n1();
    let n2 = partition.n2();
    assert_eq!(partition.n(), bench.dim(), "partition does not cover the system");
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

    let (mu0, r0) = default_initial_posterior(n2);
    let mut ens = Ensemble::sample(j, &mu0, &r0, rng)?;
    let sigma = bench.sigma();

    let points = obs.points();
    let mut series = PosteriorSeries {
        t0: obs.t0,
        dt: obs.dt,
        n2,
        means: Vec::with_capacity(points * n2),
        covs: Vec::with_capacity(points * n2 * n2),
    };
    series.means.extend_from_slice(&ens.mean());
    series.covs.extend_from_slice(&ens.covariance());

    let mut du1 = vec![0.0; n1];
    for k in 0..points - 1 {
        let u1 = obs.state(k);
        for (d, (a, b)) in du1.iter_mut().zip(obs.state(k + 1).iter().zip(u1)) {
            *d = a - b;
        }
        enkbf_step(
            &mut ens,
            |s, out| bench.drift(s, out),
            &sigma,
            partition,
            u1,
            &du1,
            obs.dt,
            inflation,
            rng,
            k,
        )?;
        series.means.extend_from_slice(&ens.mean());
        series.covs.extend_from_slice(&ens.covariance());
    }
    Ok(series)
}
