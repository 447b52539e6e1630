//! Conditional-variance estimation and confidence intervals.
//!
//! For each step τ the conditional variance Var[F̂_τ | D_τ] is estimated from
//! the later samples s_τ..s_t: an exact sum over units already labeled since
//! τ plus an importance-sampling term for the newest sample, mixed over r with
//! normalized LURE weights β̄_r. [`VarianceAccumulator`] keeps that mix in
//! O(t) per step; [`var_single`] and [`var_tau`] recompute it directly from a
//! [`ProposalHistory`] in O(t²) and serve as the reference path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::lure_weight;

/// Read access to the sample path of a run. Step indices are 1-based.
pub trait ProposalHistory {
    fn steps(&self) -> usize;
    /// Steps available to the run (units minus initially labeled).
    fn horizon(&self) -> usize;
    /// Unit sampled at step r.
    fn unit_at(&self, r: usize) -> usize;
    /// Label of the unit sampled at step r.
    fn f_at(&self, r: usize) -> f64;
    /// q_τ(unit), for units unlabeled at step τ.
    fn q_at(&self, tau: usize, unit: usize) -> Option<f64>;
    /// F(D_τ): labeled mass before step τ.
    fn partial_before(&self, tau: usize) -> f64;
}

fn q_or_err<H: ProposalHistory + ?Sized>(h: &H, tau: usize, unit: usize) -> Result<f64> {
    h.q_at(tau, unit)
        .ok_or_else(|| Error::State(format!("no proposal for step {tau} at unit #{unit}")))
}

/// Var̂_{τ,r}: the estimate of Var[F̂_τ | D_τ] formed from samples up to r,
/// centered at `g_hat` in place of F(Ω∖D_τ).
pub fn var_single<H: ProposalHistory + ?Sized>(h: &H, tau: usize, r: usize, g_hat: f64) -> Result<f64> {
    if tau == 0 || tau > r || r > h.steps() {
        return Err(Error::Precondition(format!(
            "need 1 <= tau <= r <= {}, got tau={tau} r={r}",
            h.steps()
        )));
    }
    let mut exact = 0.0;
    for k in tau..r {
        let s = h.unit_at(k);
        let q = q_or_err(h, tau, s)?;
        let d = h.f_at(k) / q - g_hat;
        exact += q * d * d;
    }
    let s_r = h.unit_at(r);
    let q_tau = q_or_err(h, tau, s_r)?;
    let q_r = q_or_err(h, r, s_r)?;
    let d = h.f_at(r) / q_tau - g_hat;
    Ok(exact + q_tau / q_r * d * d)
}

/// Var̂_τ at time t: Σ_r β̄_r Var̂_{τ,r} with LURE β normalized over r = τ..t.
pub fn var_tau<H: ProposalHistory + ?Sized>(h: &H, tau: usize, t: usize, g_hat: f64) -> Result<f64> {
    let betas = (tau..=t)
        .map(|r| lure_weight(r, h.horizon()))
        .collect::<Result<Vec<_>>>()?;
    let mass: f64 = betas.iter().sum();
    let mut acc = 0.0;
    for (r, beta) in (tau..=t).zip(&betas) {
        acc += beta * var_single(h, tau, r, g_hat)?;
    }
    Ok(acc / mass)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Registers {
    // sums over D_t∖D_τ
    x: f64, // f²/q_τ
    y: f64, // f
    z: f64, // q_τ
    // β-weighted polynomial coefficients in Ĝ, and the β mass
    a: f64,
    b: f64,
    c: f64,
    u: f64,
}

/// Streaming per-τ conditional variance estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarianceAccumulator {
    regs: Vec<Registers>,
    var_tau: Vec<f64>,
}

impl VarianceAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        VarianceAccumulator {
            regs: Vec::with_capacity(n),
            var_tau: Vec::with_capacity(n),
        }
    }

    /// Number of steps absorbed.
    pub fn len(&self) -> usize {
        self.regs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regs.is_empty()
    }

    /// Current Var̂_τ for τ = 1..t.
    pub fn var_taus(&self) -> &[f64] {
        &self.var_tau
    }

    /// Absorbs step `t` (sampled label `f` drawn with probability `q_t`) and
    /// refreshes every Var̂_τ. `q_lookup(τ)` must return q_τ(s_t) and
    /// `g_hat(τ)` the plug-in mean Ĝ_{τ,t}.
    pub fn streaming_update<Q, G>(
        &mut self,
        t: usize,
        f: f64,
        q_t: f64,
        beta: f64,
        q_lookup: Q,
        g_hat: G,
    ) -> Result<&[f64]>
    where
        Q: Fn(usize) -> f64,
        G: Fn(usize) -> f64,
    {
        if t != self.regs.len() + 1 {
            return Err(Error::Sequencing {
                expected: self.regs.len() + 1,
                got: t,
            });
        }
        if !(q_t > 0.0) {
            return Err(Error::Domain(format!("q_t must be positive, got {q_t}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!(
                "beta must be finite and nonnegative, got {beta}"
            )));
        }
        self.regs.push(Registers::default());
        self.var_tau.push(0.0);
        let f2 = f * f;
        for (i, (reg, var)) in self.regs.iter_mut().zip(self.var_tau.iter_mut()).enumerate() {
            let tau = i + 1;
            let q_tau = if tau == t { q_t } else { q_lookup(tau) };
            let g = g_hat(tau);
            reg.a += beta * (reg.x + f2 / (q_t * q_tau));
            reg.b += beta * (reg.y + f / q_t);
            reg.c += beta * (reg.z + q_tau / q_t);
            reg.u += beta;
            if reg.u > 0.0 {
                *var = (reg.a - 2.0 * reg.b * g + reg.c * g * g) / reg.u;
            }
            reg.x += f2 / q_tau;
            reg.y += f;
            reg.z += q_tau;
        }
        Ok(&self.var_tau)
    }
}

/// Σ ᾱ_τ² Var̂_τ, floored at zero. The flag reports whether flooring fired.
pub fn var_combined(weights: &[f64], var_taus: &[f64]) -> Result<(f64, bool)> {
    if weights.len() != var_taus.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} variance estimates",
            weights.len(),
            var_taus.len()
        )));
    }
    let v: f64 = weights.iter().zip(var_taus).map(|(w, v)| w * w * v).sum();
    Ok(if v < 0.0 { (0.0, true) } else { (v, false) })
}

/// Σ ᾱ_τ² (F̂_τ − F̂_{1:t})².
pub fn var_simple(weights: &[f64], estimates: &[f64], combined: f64) -> Result<f64> {
    if weights.len() != estimates.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} estimates",
            weights.len(),
            estimates.len()
        )));
    }
    Ok(weights
        .iter()
        .zip(estimates)
        .map(|(w, e)| {
            let d = e - combined;
            w * w * d * d
        })
        .sum::<f64>()
        .max(0.0))
}

/// Standard normal quantile Φ⁻¹(p) (Wichura's AS 241, ~1e-16 relative).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {p}")));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((r * 2509.0809287301226727 + 33430.575583588128105) * r + 67265.770927008700853) * r
            + 45921.953931549871457)
            * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r
            + 3.387132872796366608;
        let den = ((((((r * 5226.495278852545925 + 28729.085735721942674) * r + 39307.89580009271061) * r
            + 21213.794301586595867)
            * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r
            + 1.0;
        return Ok(q * num / den);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((r * 7.7454501427834140764e-4 + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((r * 1.05075007164441684324e-9 + 5.475938084995344946e-4) * r + 0.0151986665636164571966)
            * r
            + 0.14810397642748007459)
            * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((r * 2.01033439929228813265e-7 + 2.71155556874348757815e-5) * r + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((r * 2.04426310338993978564e-15 + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5)
            * r
            + 7.868691311456132591e-4)
            * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -x } else { x })
}

/// Two-sided critical value z_{α/2} for a confidence level 1 − α.
pub fn z_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    normal_quantile(1.0 - (1.0 - level) / 2.0)
}

/// estimate ± z·√var_hat.
pub fn confidence_interval(estimate: f64, var_hat: f64, level: f64) -> Result<(f64, f64)> {
    if !(var_hat >= 0.0) {
        return Err(Error::Domain(format!("variance must be nonnegative, got {var_hat}")));
    }
    let radius = z_for_level(level)? * var_hat.sqrt();
    Ok((estimate - radius, estimate + radius))
}

/// Snapshot of a run after step t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub t: usize,
    /// F̂_{1:t}
    pub estimate: f64,
    pub var_cond: f64,
    pub var_simp: f64,
    /// Interval from `var_cond`.
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    /// Set when weights were estimated from the data (INV); the interval
    /// may under-cover.
    pub caveat: bool,
}

impl EstimateReport {
    pub fn ci_radius(&self) -> f64 {
        (self.ci_hi - self.ci_lo) / 2.0
    }
}
