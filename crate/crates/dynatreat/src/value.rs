//! Linear value approximation over `(z, t)` with TD learning.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Time factor of a basis term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFactor {
    One,
    /// `(1 − t)^q`.
    OneMinusT(u32),
    /// `sin(kπt)`.
    SinPi(u32),
    /// `cos(kπt)`.
    CosPi(u32),
}

/// One basis function `z^p · g(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisTerm {
    pub z_pow: u32,
    pub time: TimeFactor,
}

impl BasisTerm {
    pub const fn new(z_pow: u32, time: TimeFactor) -> Self {
        BasisTerm { z_pow, time }
    }

    #[inline]
    pub fn eval(&self, z: f64, t: f64) -> f64 {
        let g = match self.time {
            TimeFactor::One => 1.0,
            TimeFactor::OneMinusT(q) => (1.0 - t).powi(q as i32),
            TimeFactor::SinPi(k) => (k as f64 * PI * t).sin(),
            TimeFactor::CosPi(k) => (k as f64 * PI * t).cos(),
        };
        z.powi(self.z_pow as i32) * g
    }
}

/// Ordered list of basis terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub terms: Vec<BasisTerm>,
}

use TimeFactor::{OneMinusT, SinPi};

const E9: [BasisTerm; 9] = [
    BasisTerm::new(1, OneMinusT(1)),
    BasisTerm::new(1, OneMinusT(2)),
    BasisTerm::new(2, OneMinusT(1)),
    BasisTerm::new(2, OneMinusT(2)),
    BasisTerm::new(1, SinPi(1)),
    BasisTerm::new(1, SinPi(2)),
    BasisTerm::new(2, SinPi(1)),
    BasisTerm::new(2, SinPi(2)),
    BasisTerm::new(3, OneMinusT(1)),
];

impl BasisSpec {
    pub fn new(terms: Vec<BasisTerm>) -> Result<Self> {
        let s = BasisSpec { terms };
        s.validate()?;
        Ok(s)
    }

    /// Nine terms, each vanishing at `z = 0` and at `t = 1`.
    pub fn appendix_e9() -> Self {
        BasisSpec { terms: E9.to_vec() }
    }

    /// [`BasisSpec::appendix_e9`] plus `z³sin(πt)`, `z³sin(2πt)`.
    pub fn appendix_e11() -> Self {
        let mut terms = E9.to_vec();
        terms.extend([BasisTerm::new(3, SinPi(1)), BasisTerm::new(3, SinPi(2))]);
        BasisSpec { terms }
    }

    /// [`BasisSpec::appendix_e11`] plus `z³(1−t)²`, `z⁴(1−t)`.
    pub fn appendix_e13() -> Self {
        let mut terms = Self::appendix_e11().terms;
        terms.extend([BasisTerm::new(3, OneMinusT(2)), BasisTerm::new(4, OneMinusT(1))]);
        BasisSpec { terms }
    }

    /// Look up a named preset: `appendixE9`, `appendixE11` or `appendixE13`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "appendixE9" => Ok(Self::appendix_e9()),
            "appendixE11" => Ok(Self::appendix_e11()),
            "appendixE13" => Ok(Self::appendix_e13()),
            _ => Err(invalid(format!("unknown basis preset {name:?}"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(invalid("basis spec has no terms"));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if self.terms[..i].contains(t) {
                return Err(invalid(format!("duplicate basis term {t:?}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn eval_into(&self, z: f64, t: f64, out: &mut [f64]) {
        for (o, term) in out.iter_mut().zip(&self.terms) {
            *o = term.eval(z, t);
        }
    }

    #[inline]
    pub fn dot(&self, nu: &[f64], z: f64, t: f64) -> f64 {
        nu.iter().zip(&self.terms).map(|(v, term)| v * term.eval(z, t)).sum()
    }
}

/// Basis vector `φ_{z,t}`.
pub fn basis(z: f64, t: f64, spec: &BasisSpec) -> Vec<f64> {
    let mut out = vec![0.0; spec.dim()];
    spec.eval_into(z, t, &mut out);
    out
}

/// Coefficients `ν` of the value approximation `νᵀφ_{z,t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueWeights {
    pub basis_spec: BasisSpec,
    pub nu: Vec<f64>,
}

impl ValueWeights {
    pub fn zeros(spec: BasisSpec) -> Self {
        let k = spec.dim();
        ValueWeights { basis_spec: spec, nu: vec![0.0; k] }
    }

    pub fn new(spec: BasisSpec, nu: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if nu.len() != spec.dim() {
            return Err(invalid(format!("nu has {} entries, basis has {}", nu.len(), spec.dim())));
        }
        if nu.iter().any(|v| !v.is_finite()) {
            return Err(invalid("nu must be finite"));
        }
        Ok(ValueWeights { basis_spec: spec, nu })
    }

    #[inline]
    pub fn predict(&self, z: f64, t: f64) -> f64 {
        self.basis_spec.dot(&self.nu, z, t)
    }
}

pub fn predict(weights: &ValueWeights, z: f64, t: f64) -> f64 {
    weights.predict(z, t)
}

/// One-step TD error `R + 𝕀(next in domain)·e^{−βΔt}·V(z′,t′) − V(z,t)`.
#[allow(clippy::too_many_arguments)]
pub fn td_error(reward: f64, beta: f64, dt: f64, next_in_domain: bool, weights: &ValueWeights, z: f64, t: f64, z_next: f64, t_next: f64) -> f64 {
    let boot = if next_in_domain { (-beta * dt).exp() * weights.predict(z_next, t_next) } else { 0.0 };
    reward + boot - weights.predict(z, t)
}

/// `ν ← ν + α_ν·δ·φ`.
pub fn td_update(weights: &mut ValueWeights, delta: f64, phi: &[f64], alpha_v: f64) {
    let s = alpha_v * delta;
    for (v, p) in weights.nu.iter_mut().zip(phi) {
        *v += s * p;
    }
}

/// `0.1 / mean ‖φ‖` over a sample of visited `(z, t)` states.
pub fn rule_of_thumb_alpha_v(states: &[(f64, f64)], spec: &BasisSpec) -> Result<f64> {
    if states.is_empty() {
        return Err(invalid("rule of thumb needs at least one state"));
    }
    let mut buf = vec![0.0; spec.dim()];
    let mut total = 0.0;
    for &(z, t) in states {
        spec.eval_into(z, t, &mut buf);
        total += buf.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mean = total / states.len() as f64;
    if !(mean > 0.0) {
        return Err(invalid("all sampled basis vectors are zero"));
    }
    Ok(0.1 / mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_examples() {
        let s = BasisSpec::appendix_e9();
        assert!(basis(0.0, 0.3, &s).iter().all(|v| *v == 0.0));
        assert!(basis(0.7, 1.0, &s).iter().all(|v| v.abs() < 1e-15));
        let v = basis(1.0, 0.0, &s);
        assert_eq!(v, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(BasisSpec::appendix_e11().dim(), 11);
        assert_eq!(BasisSpec::appendix_e13().dim(), 13);
        assert!(BasisSpec::appendix_e13().validate().is_ok());
        assert!(BasisSpec::preset("nope").is_err());
    }

    #[test]
    fn predict_examples() {
        let s = BasisSpec::appendix_e9();
        assert_eq!(predict(&ValueWeights::zeros(s.clone()), 0.5, 0.5), 0.0);
        let mut w = ValueWeights::zeros(s);
        w.nu[0] = 1.0;
        assert_eq!(predict(&w, 1.0, 0.0), 1.0);
    }

    #[test]
    fn td_examples() {
        let s = BasisSpec::new(vec![BasisTerm::new(0, TimeFactor::One)]).unwrap();
        let w = ValueWeights::zeros(s.clone());
        assert_eq!(td_error(0.3, 0.1, 0.5, true, &w, 1.0, 0.0, 1.0, 0.5), 0.3);
        let w = ValueWeights::new(s.clone(), vec![2.0]).unwrap();
        assert_eq!(td_error(0.0, 0.1, 0.5, false, &w, 1.0, 0.0, 1.0, 0.5), -2.0);
        let s2 = BasisSpec::new(vec![BasisTerm::new(1, TimeFactor::One)]).unwrap();
        let w = ValueWeights::new(s2, vec![1.0]).unwrap();
        assert_eq!(td_error(0.0, 0.0, 0.3, true, &w, 2.0, 0.0, 1.0, 0.3), -1.0);
    }

    #[test]
    fn td_update_examples() {
        let s = BasisSpec::appendix_e9();
        let mut w = ValueWeights::zeros(s);
        td_update(&mut w, 0.0, &[1.0; 9], 0.1);
        assert!(w.nu.iter().all(|v| *v == 0.0));
        let mut e2 = [0.0; 9];
        e2[1] = 1.0;
        td_update(&mut w, 1.0, &e2, 0.1);
        assert_eq!(w.nu[1], 0.1);
        assert_eq!(w.nu.iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn one_state_fixed_point() {
        // V = r + γV with γ = e^{−β}, so V = r / (1 − γ).
        let s = BasisSpec::new(vec![BasisTerm::new(0, TimeFactor::One)]).unwrap();
        let mut w = ValueWeights::zeros(s);
        let (r, beta) = (0.4, 0.5);
        for _ in 0..5000 {
            let d = td_error(r, beta, 1.0, true, &w, 1.0, 0.0, 1.0, 0.0);
            td_update(&mut w, d, &[1.0], 0.1);
        }
        let expect = r / (1.0 - (-beta).exp());
        assert!((w.predict(1.0, 0.0) - expect).abs() < 1e-3);
    }

    #[test]
    fn rule_of_thumb_examples() {
        let s = BasisSpec::new(vec![BasisTerm::new(0, TimeFactor::One)]).unwrap();
        assert!((rule_of_thumb_alpha_v(&[(0.0, 0.0); 5], &s).unwrap() - 0.1).abs() < 1e-15);
        let s = BasisSpec::new(vec![BasisTerm::new(1, TimeFactor::One)]).unwrap();
        assert!((rule_of_thumb_alpha_v(&[(10.0, 0.0); 5], &s).unwrap() - 0.01).abs() < 1e-15);
        assert!(rule_of_thumb_alpha_v(&[(0.0, 0.0)], &s).is_err());
    }
}
