//! Count distributions used for the probabilistic layer: Poisson and the
//! negative binomial in the failures-count parameterization
//! (pmf(k) = C(r+k−1, k) p^r (1−p)^k, mean r(1−p)/p, variance mean/p).
//!
//! Quantiles are found by summing the pmf from k = 0 upward; the recurrence
//! runs in linear space whenever pmf(0) is representable and falls back to
//! log space for very large means.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CountDist {
    Poisson { lambda: f64 },
    NegBin { r: f64, p: f64 },
}

impl CountDist {
    pub fn poisson(lambda: f64) -> Result<CountDist> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Numeric(format!("invalid Poisson rate {lambda}")));
        }
        Ok(CountDist::Poisson { lambda })
    }

    pub fn negbin(r: f64, p: f64) -> Result<CountDist> {
        if !r.is_finite() || r <= 0.0 || !p.is_finite() || p <= 0.0 || p >= 1.0 {
            return Err(Error::Numeric(format!("invalid negative-binomial (r={r}, p={p})")));
        }
        Ok(CountDist::NegBin { r, p })
    }

    pub fn mean(&self) -> f64 {
        match *self {
            CountDist::Poisson { lambda } => lambda,
            CountDist::NegBin { r, p } => r * (1.0 - p) / p,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            CountDist::Poisson { lambda } => lambda,
            CountDist::NegBin { r, p } => r * (1.0 - p) / (p * p),
        }
    }

    /// pmf(k+1) from pmf(k); the multiply-then-divide order keeps dyadic
    /// parameter cases exact.
    fn pmf_step(&self, pmf: f64, k: u64) -> f64 {
        match *self {
            CountDist::Poisson { lambda } => pmf * lambda / (k as f64 + 1.0),
            CountDist::NegBin { r, p } => pmf * (1.0 - p) * (r + k as f64) / (k as f64 + 1.0),
        }
    }

    fn ln_pmf_step(&self, ln_pmf: f64, k: u64) -> f64 {
        match *self {
            CountDist::Poisson { lambda } => ln_pmf + lambda.ln() - (k as f64 + 1.0).ln(),
            CountDist::NegBin { r, p } => {
                ln_pmf + (1.0 - p).ln() + (r + k as f64).ln() - (k as f64 + 1.0).ln()
            }
        }
    }

    fn ln_pmf0(&self) -> f64 {
        match *self {
            CountDist::Poisson { lambda } => -lambda,
            CountDist::NegBin { r, p } => r * p.ln(),
        }
    }

    /// Upper summation bound: mean + 50 standard deviations.
    fn cap(&self) -> u64 {
        let cap = self.mean() + 50.0 * self.variance().sqrt();
        if cap.is_finite() {
            cap.ceil().max(10.0) as u64
        } else {
            u64::MAX
        }
    }

    /// P(X ≤ k) by cumulative pmf summation.
    pub fn cdf(&self, k: u64) -> f64 {
        let mut acc = Cumulative::start(self);
        let mut cdf = acc.cdf;
        for _ in 0..k {
            cdf = acc.advance(self);
        }
        cdf.min(1.0)
    }

    /// Smallest k with CDF(k) ≥ u. `u` must lie strictly inside (0, 1).
    pub fn quantile(&self, u: f64) -> Result<u64> {
        Ok(self.quantile_set(&[u])?[0])
    }

    /// Quantiles for an ascending set of levels in one pass over k.
    pub fn quantile_set(&self, levels: &[f64]) -> Result<Vec<u64>> {
        validate_levels(levels)?;
        if let CountDist::Poisson { lambda } = self {
            if *lambda == 0.0 {
                return Ok(vec![0; levels.len()]);
            }
        }

        let cap = self.cap();
        let mut out = Vec::with_capacity(levels.len());
        let mut acc = Cumulative::start(self);
        let mut k = 0u64;
        'levels: for &u in levels {
            loop {
                if acc.cdf >= u {
                    out.push(k);
                    continue 'levels;
                }
                if k >= cap {
                    // tail guard: the summation cap bounds the quantile
                    out.push(cap);
                    continue 'levels;
                }
                acc.advance(self);
                k += 1;
            }
        }
        Ok(out)
    }
}

/// Quantile levels must be ascending and strictly inside (0, 1).
pub fn validate_levels(levels: &[f64]) -> Result<()> {
    for pair in levels.windows(2) {
        if pair[0] > pair[1] {
            return Err(Error::Config(format!(
                "quantile levels must be ascending, got {} before {}",
                pair[0], pair[1]
            )));
        }
    }
    if let Some(bad) = levels.iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::Config(format!("quantile level {bad} outside (0, 1)")));
    }
    Ok(())
}

/// Running CDF state; linear-space pmf recurrence with a log-space fallback
/// when pmf(0) underflows.
struct Cumulative {
    pmf: f64,
    ln_pmf: f64,
    linear: bool,
    cdf: f64,
    k: u64,
}

impl Cumulative {
    fn start(dist: &CountDist) -> Cumulative {
        let ln_pmf0 = dist.ln_pmf0();
        let linear = ln_pmf0 > -700.0;
        let pmf = match *dist {
            CountDist::Poisson { lambda } => (-lambda).exp(),
            CountDist::NegBin { r, p } => p.powf(r),
        };
        let pmf = if linear { pmf } else { 0.0 };
        Cumulative { pmf, ln_pmf: ln_pmf0, linear, cdf: if linear { pmf } else { ln_pmf0.exp() }, k: 0 }
    }

    fn advance(&mut self, dist: &CountDist) -> f64 {
        if self.linear {
            self.pmf = dist.pmf_step(self.pmf, self.k);
            self.cdf += self.pmf;
        } else {
            self.ln_pmf = dist.ln_pmf_step(self.ln_pmf, self.k);
            self.cdf += self.ln_pmf.exp();
        }
        self.k += 1;
        self.cdf
    }
}
