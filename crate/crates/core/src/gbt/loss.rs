//! Pluggable second-order losses for the boosting engine.
//!
//! Count losses (Poisson, Tweedie, negative binomial) model the raw score f
//! through a log link, so the predicted mean e^f stays positive while f
//! ranges over all reals. Losses without a usable second derivative get a
//! small Hessian floor so the leaf-weight formula stays valid.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const HESSIAN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    L2,
    L1,
    /// Quadratic within `delta` of the target, linear outside.
    Huber(f64),
    Poisson,
    /// Compound Poisson-gamma with power in (1, 2).
    Tweedie(f64),
    /// Quantile loss at level u; the minimizer is the u-th conditional
    /// quantile.
    Pinball(f64),
    /// Negative binomial with fixed dispersion r.
    NegBin(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Log,
}

impl LossKind {
    /// The link is a property of the loss, not a free choice.
    pub fn link(&self) -> Link {
        match self {
            LossKind::Poisson | LossKind::Tweedie(_) | LossKind::NegBin(_) => Link::Log,
            _ => Link::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Huber(delta) if !(delta > 0.0 && delta.is_finite()) => {
                Err(Error::Config(format!("huber delta must be positive, got {delta}")))
            }
            LossKind::Tweedie(power) if !(power > 1.0 && power < 2.0) => {
                Err(Error::Config(format!("tweedie power must lie in (1, 2), got {power}")))
            }
            LossKind::Pinball(u) if !(u > 0.0 && u < 1.0) => {
                Err(Error::Config(format!("pinball level must lie in (0, 1), got {u}")))
            }
            LossKind::NegBin(r) if !(r > 0.0 && r.is_finite()) => {
                Err(Error::Config(format!("negative-binomial r must be positive, got {r}")))
            }
            _ => Ok(()),
        }
    }

    /// Log-link losses need non-negative count targets.
    pub fn validate_targets(&self, targets: &[f64]) -> Result<()> {
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("non-finite training target".into()));
        }
        if self.link() == Link::Log {
            if let Some(bad) = targets.iter().find(|&&t| t < 0.0) {
                return Err(Error::Data(format!(
                    "negative target {bad} is invalid for a count loss"
                )));
            }
        }
        Ok(())
    }

    /// Gradient and Hessian of the per-sample loss w.r.t. the raw score f.
    /// The Hessian comes back floored at `HESSIAN_FLOOR`.
    pub fn grad_hess(&self, x: f64, f: f64) -> Result<(f64, f64)> {
        if !f.is_finite() {
            return Err(Error::Numeric(format!("non-finite raw score {f}")));
        }
        let (g, h) = match *self {
            LossKind::L2 => (f - x, 1.0),
            // the kinked losses carry no usable curvature; a unit upper
            // bound keeps leaf steps at the mean-gradient scale instead
            // of exploding against the floored Hessian
            LossKind::L1 => ((f - x).signum(), 1.0),
            LossKind::Huber(delta) => ((f - x).clamp(-delta, delta), 1.0),
            LossKind::Poisson => {
                let ef = f.exp();
                (ef - x, ef)
            }
            LossKind::Tweedie(p) => {
                let a = ((1.0 - p) * f).exp();
                let b = ((2.0 - p) * f).exp();
                (-x * a + b, (p - 1.0) * x * a + (2.0 - p) * b)
            }
            LossKind::Pinball(u) => (if f < x { -u } else { 1.0 - u }, 1.0),
            LossKind::NegBin(r) => {
                // stable rewrite of g = e^f(r+x)/(e^f+r) − x and
                // h = e^f·r·(r+x)/(e^f+r)² via e^{−f}
                let emf = (-f).exp();
                let denom = 1.0 + r * emf;
                let g = (r + x) / denom - x;
                let mut h = r * (r + x) * emf / (denom * denom);
                if !h.is_finite() {
                    h = 0.0;
                }
                (g, h)
            }
        };
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at x={x}, f={f}")));
        }
        Ok((g, h.max(HESSIAN_FLOOR)))
    }

    /// Per-sample loss value (up to target-only constants for the smooth
    /// count losses; the negative binomial keeps its full likelihood terms).
    pub fn value(&self, x: f64, f: f64) -> f64 {
        match *self {
            LossKind::L2 => 0.5 * (f - x) * (f - x),
            LossKind::L1 => (f - x).abs(),
            LossKind::Huber(delta) => {
                let e = (f - x).abs();
                if e <= delta {
                    0.5 * e * e
                } else {
                    delta * (e - 0.5 * delta)
                }
            }
            LossKind::Poisson => f.exp() - x * f,
            LossKind::Tweedie(p) => {
                ((2.0 - p) * f).exp() / (2.0 - p) - x * ((1.0 - p) * f).exp() / (1.0 - p)
            }
            LossKind::Pinball(u) => {
                if f < x {
                    u * (x - f)
                } else {
                    (1.0 - u) * (f - x)
                }
            }
            LossKind::NegBin(r) => nb_nll_single(x, f, r),
        }
    }

    /// Loss-minimizing constant raw score used to initialize boosting.
    pub fn base_score(&self, targets: &[f64]) -> f64 {
        match *self {
            LossKind::L1 => empirical_quantile(targets, 0.5),
            LossKind::Pinball(u) => empirical_quantile(targets, u),
            _ => {
                let mean = targets.iter().sum::<f64>() / targets.len() as f64;
                let mut f = match self.link() {
                    Link::Identity => mean,
                    Link::Log => mean.max(1e-8).ln(),
                };
                // a few Newton steps handle the non-quadratic losses
                for _ in 0..50 {
                    let (mut g_sum, mut h_sum) = (0.0, 0.0);
                    for &x in targets {
                        let Ok((g, h)) = self.grad_hess(x, f) else { return f };
                        g_sum += g;
                        h_sum += h;
                    }
                    let step = g_sum / h_sum.max(HESSIAN_FLOOR * targets.len() as f64);
                    f -= step.clamp(-10.0, 10.0);
                    if step.abs() < 1e-12 {
                        break;
                    }
                }
                f
            }
        }
    }
}

/// Smallest observed value whose empirical CDF reaches u (type-1 quantile),
/// with a guard against ⌈u·n⌉ landing a hair past an integer.
pub fn empirical_quantile(values: &[f64], u: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t = u * sorted.len() as f64;
    let rank = if (t - t.round()).abs() < 1e-9 { t.round() } else { t.ceil() };
    let idx = (rank as usize).max(1) - 1;
    sorted[idx.min(sorted.len() - 1)]
}

/// ln(e^f + r) without overflow.
fn ln_exp_plus(f: f64, r: f64) -> f64 {
    let ln_r = r.ln();
    let (hi, lo) = if f > ln_r { (f, ln_r) } else { (ln_r, f) };
    hi + (lo - hi).exp().ln_1p()
}

fn nb_nll_single(x: f64, f: f64, r: f64) -> f64 {
    let lep = ln_exp_plus(f, r);
    -ln_gamma(r + x) + ln_gamma(r) + ln_gamma(x + 1.0) - r * r.ln() + r * lep - x * f + x * lep
}

/// Negative-binomial negative log likelihood summed over samples, for raw
/// scores f and dispersion r.
pub fn nb_nll(x: &[f64], f: &[f64], r: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Config(format!("negative-binomial r must be positive, got {r}")));
    }
    if x.len() != f.len() {
        return Err(Error::Data(format!(
            "target and score lengths differ: {} vs {}",
            x.len(),
            f.len()
        )));
    }
    let mut total = 0.0;
    for (&xi, &fi) in x.iter().zip(f) {
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(Error::Data(format!("invalid count target {xi}")));
        }
        if !fi.is_finite() {
            return Err(Error::Numeric(format!("non-finite raw score {fi}")));
        }
        total += nb_nll_single(xi, fi, r);
    }
    if !total.is_finite() {
        return Err(Error::Numeric("negative-binomial likelihood overflowed".into()));
    }
    Ok(total)
}
