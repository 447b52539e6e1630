//! Step-weighting schemes for combining per-step estimates.
//!
//! All functions return *unnormalized* weights α_τ for τ = 1..t; `normalize`
//! turns them into ᾱ_τ. `n` is the number of steps the pool can support
//! (units minus the initially labeled ones), which is where LURE-style
//! weights become singular.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightScheme {
    Sqrt,
    Lure,
    Comb,
    Inv { gamma: f64 },
}

impl WeightScheme {
    pub fn inv(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Domain(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        Ok(WeightScheme::Inv { gamma })
    }

    pub fn parse(name: &str, gamma: Option<f64>) -> Result<Self> {
        match (name.trim().to_ascii_lowercase().as_str(), gamma) {
            ("sqrt", None) => Ok(WeightScheme::Sqrt),
            ("lure", None) => Ok(WeightScheme::Lure),
            ("comb", None) => Ok(WeightScheme::Comb),
            ("inv", g) => Self::inv(g.unwrap_or(0.5)),
            (other @ ("sqrt" | "lure" | "comb"), Some(_)) => {
                Err(Error::Config(format!("gamma only applies to inv weights, not {other}")))
            }
            (other, _) => Err(Error::Config(format!("unknown weighting scheme `{other}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            WeightScheme::Sqrt => "sqrt".into(),
            WeightScheme::Lure => "lure".into(),
            WeightScheme::Comb => "comb".into(),
            WeightScheme::Inv { gamma } => format!("inv({gamma})"),
        }
    }

    pub fn is_estimated(&self) -> bool {
        matches!(self, WeightScheme::Inv { .. })
    }
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// α_τ = √τ.
pub fn sqrt_weights(t: usize) -> Vec<f64> {
    (1..=t).map(|tau| (tau as f64).sqrt()).collect()
}

/// w_τ = 1/((n−τ)(n−τ+1)).
pub fn lure_weight(tau: usize, n: usize) -> Result<f64> {
    if tau == 0 || tau >= n {
        return Err(Error::Singular { tau, horizon: n });
    }
    let a = (n - tau) as f64;
    Ok(1.0 / (a * (a + 1.0)))
}

pub fn lure_weights(t: usize, n: usize) -> Result<Vec<f64>> {
    (1..=t).map(|tau| lure_weight(tau, n)).collect()
}

/// α_τ = w_τ·√τ.
pub fn comb_weight(tau: usize, n: usize) -> Result<f64> {
    Ok(lure_weight(tau, n)? * (tau as f64).sqrt())
}

pub fn comb_weights(t: usize, n: usize) -> Result<Vec<f64>> {
    (1..=t).map(|tau| comb_weight(tau, n)).collect()
}

/// Last step weighted by inverse estimated variance: ⌈γt⌉, clamped to [1, t].
pub fn inv_junction(gamma: f64, t: usize) -> usize {
    // absorb representation error such as 0.3 * 10 = 3.0000000000000004
    let j = (gamma * t as f64 - 1e-9).ceil();
    (j.max(1.0) as usize).min(t)
}

/// Inverse estimated variances up to the junction, COMB continued after it
/// with a factor making the sequence continuous at the junction.
pub fn inv_weights(var_hats: &[f64], gamma: f64, t: usize, n: usize) -> Result<Vec<f64>> {
    let j = inv_junction(gamma, t);
    if var_hats.len() < j {
        return Err(Error::Shape(format!(
            "need {j} variance estimates, got {}",
            var_hats.len()
        )));
    }
    if let Some((i, &v)) = var_hats[..j].iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(Error::DegenerateVariance { tau: i + 1, value: v });
    }
    let scale = (1.0 / var_hats[j - 1]) / comb_weight(j, n)?;
    (1..=t)
        .map(|tau| {
            if tau <= j {
                Ok(1.0 / var_hats[tau - 1])
            } else {
                Ok(comb_weight(tau, n)? * scale)
            }
        })
        .collect()
}

/// How the INV weights at one step were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvOutcome {
    Clean,
    /// Nonpositive estimates replaced by the smallest positive one.
    Substituted,
    /// No positive estimate below the junction; COMB used.
    CombFallback,
}

/// `inv_weights` that never fails on degenerate estimates.
pub fn inv_weights_or_fallback(var_hats: &[f64], gamma: f64, t: usize, n: usize) -> Result<(Vec<f64>, InvOutcome)> {
    let j = inv_junction(gamma, t);
    if var_hats.len() < j {
        return Err(Error::Shape(format!(
            "need {j} variance estimates, got {}",
            var_hats.len()
        )));
    }
    let used = &var_hats[..j];
    if used.iter().all(|&v| v > 0.0 && v.is_finite()) {
        return Ok((inv_weights(var_hats, gamma, t, n)?, InvOutcome::Clean));
    }
    let smallest = used
        .iter()
        .copied()
        .filter(|&v| v > 0.0 && v.is_finite())
        .fold(f64::INFINITY, f64::min);
    if smallest.is_finite() {
        let mut patched = used.to_vec();
        for v in patched.iter_mut().filter(|v| !(**v > 0.0 && v.is_finite())) {
            *v = smallest;
        }
        Ok((inv_weights(&patched, gamma, t, n)?, InvOutcome::Substituted))
    } else {
        Ok((comb_weights(t, n)?, InvOutcome::CombFallback))
    }
}

/// ᾱ_τ = α_τ / Σα.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Domain("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Normalization(total));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Worst case over y ∈ [0, 1] of the COMB-to-optimal variance ratio when the
/// per-step variance is ∝ τ^(−y)/w_τ:
/// (Σ w_τ)(Σ w_τ τ) / (Σ w_τ √τ)².
pub fn worst_case_ratio(w: &[f64], t: usize) -> Result<f64> {
    if t == 0 || w.len() < t {
        return Err(Error::Precondition(format!(
            "need t >= 1 weights, got t = {t} with {} weights",
            w.len()
        )));
    }
    let w = &w[..t];
    if w.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Precondition("weights must be positive".into()));
    }
    if w.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::Precondition("weights must be non-decreasing".into()));
    }
    let (mut s0, mut s1, mut sh) = (0.0, 0.0, 0.0);
    for (i, &wi) in w.iter().enumerate() {
        let tau = (i + 1) as f64;
        s0 += wi;
        s1 += wi * tau;
        sh += wi * tau.sqrt();
    }
    Ok(s0 * s1 / (sh * sh))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn sqrt_law() {
        assert_eq!(sqrt_weights(1), vec![1.0]);
        let w = sqrt_weights(4);
        assert_eq!(w[0], 1.0);
        assert!(close(w[1], std::f64::consts::SQRT_2, 1e-12));
        assert!(close(w[2], 1.73205081, 1e-8));
        assert_eq!(w[3], 2.0);
        let n = normalize(&sqrt_weights(2)).unwrap();
        let r2 = 2f64.sqrt();
        assert!(close(n[0], 1.0 / (1.0 + r2), 1e-15));
        assert!(close(n[1], r2 / (1.0 + r2), 1e-15));
    }

    #[test]
    fn lure_values() {
        assert_eq!(lure_weight(1, 10).unwrap(), 1.0 / 90.0);
        assert_eq!(lure_weight(9, 10).unwrap(), 0.5);
        assert!(matches!(lure_weight(10, 10), Err(Error::Singular { .. })));
        assert!(lure_weights(10, 10).is_err());
    }

    #[test]
    fn lure_partial_sums_telescope() {
        // Σ_{τ=τ0..t} w_τ = (t−τ0+1)/((n−t)(n−τ0+1))
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = |m: usize| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % m as u64) as usize
        };
        for _ in 0..500 {
            let n = 2 + next(3000);
            let t = 1 + next(n - 1);
            let tau0 = 1 + next(t);
            let sum: f64 = (tau0..=t).map(|tau| lure_weight(tau, n).unwrap()).sum();
            let closed = (t - tau0 + 1) as f64 / (((n - t) * (n - tau0 + 1)) as f64);
            assert!(close(sum, closed, 1e-11), "n={n} t={t} tau0={tau0}");
        }
    }

    #[test]
    fn comb_identities() {
        assert!(close(comb_weight(4, 10).unwrap(), 1.0 / 21.0, 1e-15));
        let c = comb_weights(9, 10).unwrap();
        let l = lure_weights(9, 10).unwrap();
        let s = sqrt_weights(9);
        for tau in 0..9 {
            assert!(close(c[tau] / l[tau], s[tau], 1e-14));
            assert!(close(c[tau] / s[tau], l[tau], 1e-14));
        }
    }

    #[test]
    fn inv_is_continuous_at_junction() {
        let v = vec![2.0; 10];
        let w = inv_weights(&v, 0.5, 10, 30).unwrap();
        let j = inv_junction(0.5, 10);
        assert_eq!(j, 5);
        let comb_branch = comb_weight(j, 30).unwrap() * (1.0 / v[j - 1]) / comb_weight(j, 30).unwrap();
        assert!(close(w[j - 1], comb_branch, 1e-15));
        assert_eq!(w[j - 1], 0.5);
    }

    #[test]
    fn inv_tiny_gamma_is_comb_shape() {
        let v = vec![3.0, 1.0, 7.0, 2.0, 5.0, 9.0];
        let inv = normalize(&inv_weights(&v, 1e-6, 6, 20).unwrap()).unwrap();
        let comb = normalize(&comb_weights(6, 20).unwrap()).unwrap();
        for (a, b) in inv.iter().zip(&comb) {
            assert!(close(*a, *b, 1e-14));
        }
    }

    #[test]
    fn inv_proportional_to_comb_when_var_inverse_comb() {
        // Var̂_τ = c/α^COMB_τ gives α^INV_τ = α^COMB_τ/c below the junction
        // and α^COMB_τ · (α^COMB_j/c)/α^COMB_j = α^COMB_τ/c above it.
        let (t, n, c) = (12, 40, 3.5);
        let comb = comb_weights(t, n).unwrap();
        let v: Vec<f64> = comb.iter().map(|a| c / a).collect();
        let inv = inv_weights(&v, 0.6, t, n).unwrap();
        for (a, b) in inv.iter().zip(&comb) {
            assert!(close(*a, b / c, 1e-13));
        }
    }

    #[test]
    fn inv_junction_rounding() {
        assert_eq!(inv_junction(0.3, 10), 3);
        assert_eq!(inv_junction(0.5, 1), 1);
        assert_eq!(inv_junction(0.5, 7), 4);
        assert_eq!(inv_junction(0.9, 20), 18);
        assert_eq!(inv_junction(1e-9, 5), 1);
    }

    #[test]
    fn inv_degenerate_and_fallback() {
        let v = vec![1.0, 0.0, 4.0, 2.0];
        assert!(matches!(
            inv_weights(&v, 0.5, 4, 10),
            Err(Error::DegenerateVariance { tau: 2, .. })
        ));
        let (w, outcome) = inv_weights_or_fallback(&v, 0.5, 4, 10).unwrap();
        assert_eq!(outcome, InvOutcome::Substituted);
        assert_eq!(w[1], 1.0);
        let (w, outcome) = inv_weights_or_fallback(&[0.0, -1.0, 1.0], 0.5, 3, 10).unwrap();
        assert_eq!(outcome, InvOutcome::CombFallback);
        assert_eq!(w, comb_weights(3, 10).unwrap());
        assert!(inv_weights(&[1.0], 0.9, 4, 10).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(normalize(&[5.0]).unwrap(), vec![1.0]);
        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::Normalization(_))));
        assert!(normalize(&[1.0, -1.0]).is_err());
        let w = [0.3, 1.7, 2.2];
        let scaled: Vec<f64> = w.iter().map(|x| x * 7.5).collect();
        for (a, b) in normalize(&w).unwrap().iter().zip(normalize(&scaled).unwrap()) {
            assert!(close(*a, b, 1e-15));
        }
    }

    #[test]
    fn worst_case_ratio_values() {
        assert_eq!(worst_case_ratio(&[3.0], 1).unwrap(), 1.0);
        // uniform weights, t = 100, summed independently
        let t = 100usize;
        let s1: f64 = (1..=t).map(|k| k as f64).sum();
        let sh: f64 = (1..=t).map(|k| (k as f64).sqrt()).sum();
        let direct = t as f64 * s1 / (sh * sh);
        let r = worst_case_ratio(&vec![1.0; t], t).unwrap();
        assert!(close(r, direct, 1e-14));
        assert!(r > 1.0 && r <= 1.125);
        let lure = lure_weights(700, 1000).unwrap();
        assert!(worst_case_ratio(&lure, 700).unwrap() <= 1.125);
        assert!(matches!(worst_case_ratio(&[2.0, 1.0], 2), Err(Error::Precondition(_))));
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!(WeightScheme::parse("COMB", None).unwrap(), WeightScheme::Comb);
        assert_eq!(
            WeightScheme::parse("inv", None).unwrap(),
            WeightScheme::Inv { gamma: 0.5 }
        );
        assert!(WeightScheme::parse("inv", Some(1.0)).is_err());
        assert!(WeightScheme::parse("lure", Some(0.5)).is_err());
        assert!(WeightScheme::parse("median", None).is_err());
    }

    #[test]
    fn all_schemes_positive() {
        let n = 50;
        for t in 1..n {
            for w in [
                sqrt_weights(t),
                lure_weights(t, n).unwrap(),
                comb_weights(t, n).unwrap(),
            ] {
                assert!(w.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn fig2_curve_shape() {
        let (t, n) = (700, 1000);
        let comb = normalize(&comb_weights(t, n).unwrap()).unwrap();
        let lure = normalize(&lure_weights(t, n).unwrap()).unwrap();
        let sqrt = normalize(&sqrt_weights(t)).unwrap();
        // COMB sits below LURE early on and above SQRT late
        assert!(comb[..50].iter().zip(&lure[..50]).all(|(c, l)| c < l));
        assert!(comb[600..].iter().zip(&sqrt[600..]).all(|(c, s)| c > s));
    }
}
