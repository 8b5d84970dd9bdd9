//! Synthetic randomized-trial data with seasonal arrivals and known
//! treatment effects.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arrivals::{RateCoef, RateModel};
use crate::data::ObservationalData;
use crate::error::{invalid, Result};
use crate::rng::substream;

/// Covariate distribution and arrival intensity of one population segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    /// Seasonal intensity over one period; only relative levels matter.
    pub rate: RateCoef,
    pub age: (f64, f64),
    pub earnings: (f64, f64),
    pub education: (f64, f64),
}

/// `τ(x) = c0 + c_age·a² + c_earn·e + c_edu·s`, with `a = (age − 38)/10`,
/// `e = (earnings − 15)/10` and `s = (education − 11.5)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectModel {
    pub intercept: f64,
    pub age_sq: f64,
    pub earnings: f64,
    pub education: f64,
}

impl EffectModel {
    pub fn zero() -> Self {
        EffectModel { intercept: 0.0, age_sq: 0.0, earnings: 0.0, education: 0.0 }
    }

    /// Effect at raw covariates `[education, earnings, age]`.
    pub fn tau(&self, x: &[f64]) -> f64 {
        let (s, e, a) = ((x[0] - 11.5) / 2.0, (x[1] - 15.0) / 10.0, (x[2] - 38.0) / 10.0);
        self.intercept + self.age_sq * a * a + self.earnings * e + self.education * s
    }
}

/// Shares of compliers and always-takers when assignment is an instrument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthCompliance {
    pub q_c: f64,
    pub q_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    /// Probability of assignment to treatment.
    pub propensity: f64,
    pub segments: Vec<Segment>,
    pub effect: EffectModel,
    pub noise_sd: f64,
    #[serde(default)]
    pub compliance: Option<SynthCompliance>,
}

/// Segment whose arrivals make up `share` of a unit-rate year.
fn seg(name: &str, share: f64, b1: f64, b2: f64, age: (f64, f64), earnings: (f64, f64)) -> Segment {
    let shape = RateCoef { b0: 0.0, b1, b2 };
    let rate = RateCoef { b0: (share / segment_mass(&shape)).ln(), ..shape };
    Segment { name: name.into(), rate, age, earnings, education: (11.5, 1.8) }
}

impl SynthSpec {
    /// Four segments: young applicants (15% of arrivals) peak at the start
    /// of the year, older ones (15%) mid-year, and two prime-age groups
    /// arrive almost evenly. Effects are U-shaped in age and decrease with
    /// prior earnings.
    pub fn jtpa_like(n: usize) -> Self {
        SynthSpec {
            n,
            propensity: 2.0 / 3.0,
            segments: vec![
                seg("young", 0.15, 0.0, 2.0, (22.0, 3.0), (8.0, 4.0)),
                seg("older", 0.15, 0.0, -2.0, (54.0, 4.0), (18.0, 8.0)),
                seg("prime_low", 0.35, 0.3, 0.0, (37.0, 4.0), (10.0, 4.0)),
                seg("prime_high", 0.35, -0.3, 0.0, (37.0, 4.0), (25.0, 8.0)),
            ],
            effect: EffectModel { intercept: -0.5, age_sq: 2.0, earnings: -0.5, education: 0.3 },
            noise_sd: 3.0,
            compliance: None,
        }
    }

    pub fn zero_effect(n: usize) -> Self {
        SynthSpec { effect: EffectModel::zero(), ..Self::jtpa_like(n) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid("synthetic sample needs at least 2 rows"));
        }
        if !(self.propensity > 0.0 && self.propensity < 1.0) {
            return Err(invalid("propensity must lie in (0, 1)"));
        }
        if self.segments.is_empty() {
            return Err(invalid("at least one segment is required"));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(invalid("noise_sd must be nonnegative"));
        }
        for s in &self.segments {
            for (m, sd) in [s.age, s.earnings, s.education] {
                if !m.is_finite() || !(sd >= 0.0) {
                    return Err(invalid(format!("segment {}: invalid covariate distribution", s.name)));
                }
            }
        }
        if let Some(c) = self.compliance {
            if !(c.q_c > 0.0 && c.q_a >= 0.0 && c.q_c + c.q_a <= 1.0) {
                return Err(invalid("compliance shares must satisfy q_c > 0, q_a ≥ 0, q_c + q_a ≤ 1"));
            }
        }
        Ok(())
    }

    /// True seasonal rates of the segments, scaled so the mean aggregate
    /// rate over one period is 1.
    pub fn rate_model(&self) -> RateModel {
        let mut m = RateModel::from_coefs(self.segments.iter().map(|s| s.rate).collect());
        let shift = (0..m.k()).map(|c| segment_mass(&m.clusters[c])).sum::<f64>().ln();
        for c in &mut m.clusters {
            c.b0 -= shift;
        }
        m
    }
}

/// `∫₀¹ exp(b0 + b1 sin 2πt + b2 cos 2πt) dt` by the midpoint rule.
fn segment_mass(c: &RateCoef) -> f64 {
    const M: usize = 4096;
    (0..M).map(|i| c.eval((i as f64 + 0.5) / M as f64, 1.0)).sum::<f64>() / M as f64
}

/// Known quantities behind a synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub seed: u64,
    pub ate: f64,
    /// `τ(X_i)` for every row.
    pub tau: Vec<f64>,
    /// Segment of every row.
    pub segment: Vec<usize>,
    pub rates: RateModel,
}

impl SynthTruth {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn draw_normal<R: Rng + ?Sized>(rng: &mut R, (m, sd): (f64, f64), lo: f64) -> f64 {
    let v = if sd > 0.0 { Normal::new(m, sd).map(|d| d.sample(rng)).unwrap_or(m) } else { m };
    v.max(lo)
}

/// Draw a randomized sample: arrival time and segment from the seasonal
/// intensities, covariates from the segment, assignment with the given
/// propensity and `Y = μ₀(X) + W·τ(X) + ε`. Covariates are on their raw
/// scale, named `education`, `prev_earnings` and `age`.
pub fn synth_data(spec: &SynthSpec, seed: u64) -> Result<(ObservationalData, SynthTruth)> {
    spec.validate()?;
    let mut rng = substream(seed, "data", 0);
    let rates = spec.rate_model();
    let masses: Vec<f64> = rates.clusters.iter().map(segment_mass).collect();
    let peaks: Vec<f64> = rates.clusters.iter().map(|c| (c.b0 + c.b1.hypot(c.b2)).exp()).collect();
    let total: f64 = masses.iter().sum();
    let n = spec.n;
    let (mut x, mut y, mut w, mut arr) = (Vec::with_capacity(3 * n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut tau, mut segment, mut inst) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    for _ in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut s = masses.len() - 1;
        for (k, m) in masses.iter().enumerate() {
            if u < *m {
                s = k;
                break;
            }
            u -= m;
        }
        let t = loop {
            let t: f64 = rng.random();
            if rng.random::<f64>() * peaks[s] <= rates.clusters[s].eval(t, 1.0) {
                break t;
            }
        };
        let g = &spec.segments[s];
        let row = [draw_normal(&mut rng, g.education, 6.0), draw_normal(&mut rng, g.earnings, 0.0), draw_normal(&mut rng, g.age, 16.0)];
        let te = spec.effect.tau(&row);
        let assigned = rng.random::<f64>() < spec.propensity;
        let treated = match spec.compliance {
            None => assigned,
            Some(c) => {
                let v: f64 = rng.random();
                if v < c.q_c {
                    assigned
                } else {
                    v < c.q_c + c.q_a
                }
            }
        };
        let (sc, ec, ac) = ((row[0] - 11.5) / 2.0, (row[1] - 15.0) / 10.0, (row[2] - 38.0) / 10.0);
        let mu0 = 10.0 + 3.0 * sc + 5.0 * ec - 2.0 * ac * ac + 0.5 * (2.0 * PI * t).sin();
        let eps = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        x.extend_from_slice(&row);
        y.push(mu0 + if treated { te } else { 0.0 } + eps);
        w.push(treated);
        inst.push(assigned);
        arr.push(t);
        tau.push(te);
        segment.push(s);
    }
    let mut data = ObservationalData::new(x, 3, y, w)?.with_arrival(arr)?;
    if spec.compliance.is_some() {
        data = data.with_instrument(inst)?;
    }
    data.covariate_names = vec!["education".into(), "prev_earnings".into(), "age".into()];
    let ate = tau.iter().sum::<f64>() / n as f64;
    Ok((data, SynthTruth { spec: spec.clone(), seed, ate, tau, segment, rates }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        let (d, t) = synth_data(&SynthSpec::jtpa_like(9223), 1).unwrap();
        assert_eq!(d.n(), 9223);
        assert_eq!(d.d, 3);
        assert_eq!(t.tau.len(), 9223);
        let share = d.n_treated() as f64 / d.n() as f64;
        assert!((share - 2.0 / 3.0).abs() < 0.02);
        assert!(d.arrival.as_ref().unwrap().iter().all(|a| (0.0..1.0).contains(a)));
    }

    #[test]
    fn zero_effect_truth() {
        let (_, t) = synth_data(&SynthSpec::zero_effect(500), 2).unwrap();
        assert_eq!(t.ate, 0.0);
        assert!(t.tau.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heterogeneous_signs() {
        let (d, t) = synth_data(&SynthSpec::jtpa_like(3000), 3).unwrap();
        assert!(t.tau.iter().any(|v| *v > 0.0) && t.tau.iter().any(|v| *v < 0.0));
        let spec = SynthSpec::jtpa_like(1);
        for i in 0..d.n() {
            assert_eq!(spec.effect.tau(d.row(i)), t.tau[i]);
        }
    }

    #[test]
    fn seasonal_segments() {
        let (d, t) = synth_data(&SynthSpec::jtpa_like(20000), 4).unwrap();
        let a = d.arrival.as_ref().unwrap();
        let winter = |s: usize| {
            let v: Vec<f64> = (0..d.n()).filter(|&i| t.segment[i] == s).map(|i| (2.0 * PI * a[i]).cos()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(winter(0) > 0.3 && winter(1) < -0.3);
        let m = t.rates.clusters.iter().map(segment_mass).sum::<f64>();
        assert!((m - 1.0).abs() < 1e-9);
    }
}
