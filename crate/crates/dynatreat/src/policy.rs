//! Logistic policies over a configurable feature map, deterministic
//! conversion and the static EWM baseline.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::logistic;
use crate::rng;

/// One entry of the feature vector `f(x, z, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTerm {
    Constant,
    Covariate(usize),
    CovariateBudget(usize),
    CovariateCos(usize),
    CovariateSin(usize),
    Budget,
    Cos,
}

impl FeatureTerm {
    fn covariate(&self) -> Option<usize> {
        match *self {
            FeatureTerm::Covariate(j)
            | FeatureTerm::CovariateBudget(j)
            | FeatureTerm::CovariateCos(j)
            | FeatureTerm::CovariateSin(j) => Some(j),
            _ => None,
        }
    }

    /// True for terms that do not depend on `(z, t)`.
    pub fn is_static(&self) -> bool {
        matches!(self, FeatureTerm::Constant | FeatureTerm::Covariate(_))
    }

    fn label(&self, names: &[String]) -> String {
        let nm = |j: usize| names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
        match *self {
            FeatureTerm::Constant => "1".into(),
            FeatureTerm::Covariate(j) => nm(j),
            FeatureTerm::CovariateBudget(j) => format!("{}*z", nm(j)),
            FeatureTerm::CovariateCos(j) => format!("{}*cos(2*pi*t)", nm(j)),
            FeatureTerm::CovariateSin(j) => format!("{}*sin(2*pi*t)", nm(j)),
            FeatureTerm::Budget => "z".into(),
            FeatureTerm::Cos => "cos(2*pi*t)".into(),
        }
    }
}

fn default_period() -> f64 {
    1.0
}

/// Ordered list of feature terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub terms: Vec<FeatureTerm>,
    /// Period of the seasonal terms.
    #[serde(default = "default_period")]
    pub period: f64,
}

impl FeatureSpec {
    pub fn new(terms: Vec<FeatureTerm>) -> Self {
        FeatureSpec { terms, period: 1.0 }
    }

    /// `θ₀ + θ₁ᵀx`.
    pub fn restricted(d: usize) -> Self {
        let mut t = vec![FeatureTerm::Constant];
        t.extend((0..d).map(FeatureTerm::Covariate));
        Self::new(t)
    }

    /// `θ₀ + θ₁ᵀx + θ₂ᵀx·z + θ₃ᵀx·cos(2πt)` over the `d` covariates.
    pub fn class_a(d: usize) -> Self {
        let mut t = Self::restricted(d).terms;
        t.extend((0..d).map(FeatureTerm::CovariateBudget));
        t.extend((0..d).map(FeatureTerm::CovariateCos));
        Self::new(t)
    }

    /// [`FeatureSpec::class_a`] with the bare `z` and `cos(2πt)` terms that
    /// arise when the covariate vector carries a leading 1.
    pub fn class_a_with_intercepts(d: usize) -> Self {
        let mut s = Self::class_a(d);
        s.terms.push(FeatureTerm::Budget);
        s.terms.push(FeatureTerm::Cos);
        s
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    /// Check the spec against a covariate dimension.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.terms.is_empty() {
            return Err(invalid("feature spec has no terms"));
        }
        for (i, t) in self.terms.iter().enumerate() {
            if self.terms[..i].contains(t) {
                return Err(invalid(format!("duplicate feature term {t:?}")));
            }
            if let Some(j) = t.covariate() {
                if j >= d {
                    return Err(invalid(format!("feature term {t:?} needs covariate {j}, data has {d}")));
                }
            }
        }
        if !(self.period > 0.0) {
            return Err(invalid("feature period must be positive"));
        }
        Ok(())
    }

    /// Value of term `k` at `(x, z, t)` given precomputed seasonal factors.
    #[inline]
    fn term(&self, k: usize, x: &[f64], z: f64, cos: f64, sin: f64) -> f64 {
        match self.terms[k] {
            FeatureTerm::Constant => 1.0,
            FeatureTerm::Covariate(j) => x[j],
            FeatureTerm::CovariateBudget(j) => x[j] * z,
            FeatureTerm::CovariateCos(j) => x[j] * cos,
            FeatureTerm::CovariateSin(j) => x[j] * sin,
            FeatureTerm::Budget => z,
            FeatureTerm::Cos => cos,
        }
    }

    #[inline]
    fn seasonal(&self, t: f64) -> (f64, f64) {
        let a = 2.0 * PI * t / self.period;
        (a.cos(), a.sin())
    }

    /// Write `f(x, z, t)` into `out`.
    pub fn eval_into(&self, x: &[f64], z: f64, t: f64, out: &mut [f64]) {
        let (c, s) = self.seasonal(t);
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.term(k, x, z, c, s);
        }
    }

    /// `θᵀf(x, z, t)` without allocating.
    #[inline]
    pub fn dot(&self, theta: &[f64], x: &[f64], z: f64, t: f64) -> f64 {
        let (c, s) = self.seasonal(t);
        let mut v = 0.0;
        for (k, th) in theta.iter().enumerate() {
            v += th * self.term(k, x, z, c, s);
        }
        v
    }

    pub fn labels(&self, names: &[String]) -> Vec<String> {
        self.terms.iter().map(|t| t.label(names)).collect()
    }
}

/// Feature vector at a decision point.
pub fn features(spec: &FeatureSpec, x: &[f64], z: f64, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; spec.dim()];
    spec.eval_into(x, z, t, &mut out);
    out
}

/// Anything that maps a decision point to a treatment probability.
pub trait Policy: Sync {
    fn prob(&self, x: &[f64], z: f64, t: f64) -> f64;
}

/// Coefficients `θ` of a logistic policy `π_θ(1|s) = logistic(θᵀf(s))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub feature_spec: FeatureSpec,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(spec: FeatureSpec) -> Self {
        let k = spec.dim();
        PolicyParams { feature_spec: spec, theta: vec![0.0; k] }
    }

    pub fn new(spec: FeatureSpec, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != spec.dim() {
            return Err(invalid(format!("theta has {} entries, spec has {}", theta.len(), spec.dim())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(invalid("theta must be finite"));
        }
        Ok(PolicyParams { feature_spec: spec, theta })
    }

    #[inline]
    pub fn index(&self, x: &[f64], z: f64, t: f64) -> f64 {
        self.feature_spec.dot(&self.theta, x, z, t)
    }

    pub fn norm(&self) -> f64 {
        self.theta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Write `∇_θ ln π_θ(a|s) = (a − π)·f(s)` into `out`.
    pub fn log_grad_into(&self, x: &[f64], z: f64, t: f64, action: bool, out: &mut [f64]) {
        self.feature_spec.eval_into(x, z, t, out);
        let p = logistic(self.theta.iter().zip(out.iter()).map(|(a, b)| a * b).sum());
        let w = f64::from(u8::from(action)) - p;
        for o in out.iter_mut() {
            *o *= w;
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let p: PolicyParams = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        PolicyParams::new(p.feature_spec, p.theta)
    }
}

impl Policy for PolicyParams {
    #[inline]
    fn prob(&self, x: &[f64], z: f64, t: f64) -> f64 {
        logistic(self.index(x, z, t))
    }
}

/// Probability of treatment under a logistic policy.
pub fn action_prob(params: &PolicyParams, x: &[f64], z: f64, t: f64) -> f64 {
    params.prob(x, z, t)
}

/// Score of the logistic policy, `(a − π_θ(1|s))·f(s)`.
pub fn log_grad(params: &PolicyParams, x: &[f64], z: f64, t: f64, action: bool) -> Vec<f64> {
    let mut out = vec![0.0; params.theta.len()];
    params.log_grad_into(x, z, t, action, &mut out);
    out
}

/// Deterministic rule `a = 𝕀(θᵀf(s) > 0)`; a zero index means no treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub params: PolicyParams,
}

impl DecisionRule {
    #[inline]
    pub fn treat(&self, x: &[f64], z: f64, t: f64) -> bool {
        self.params.index(x, z, t) > 0.0
    }

    /// Human-readable form, e.g. `treat if 0.5 + 1.2*age - 0.3*age*z > 0`.
    pub fn expression(&self, names: &[String]) -> String {
        let labels = self.params.feature_spec.labels(names);
        let mut s = String::new();
        for (k, (th, lab)) in self.params.theta.iter().zip(&labels).enumerate() {
            let (sign, mag) = if *th < 0.0 { ("-", -th) } else { ("+", *th) };
            let term = if lab == "1" { format!("{mag}") } else { format!("{mag}*{lab}") };
            if k == 0 {
                s.push_str(&if sign == "-" { format!("-{term}") } else { term });
            } else {
                s.push_str(&format!(" {sign} {term}"));
            }
        }
        format!("treat if {s} > 0")
    }
}

impl Policy for DecisionRule {
    #[inline]
    fn prob(&self, x: &[f64], z: f64, t: f64) -> f64 {
        if self.treat(x, z, t) {
            1.0
        } else {
            0.0
        }
    }
}

pub fn to_deterministic(params: &PolicyParams) -> DecisionRule {
    DecisionRule { params: params.clone() }
}

/// Policy that treats with a fixed probability regardless of state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn prob(&self, _x: &[f64], _z: f64, _t: f64) -> f64 {
        self.0
    }
}

/// Search settings for [`ewm_search`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmConfig {
    pub directions: usize,
    pub seed: u64,
}

impl Default for EwmConfig {
    fn default() -> Self {
        EwmConfig { directions: 100_000, seed: 0 }
    }
}

/// Best static rule found by [`ewm_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct EwmResult {
    pub rule: DecisionRule,
    /// `n⁻¹ Σ r̂_i 𝕀(treated)`.
    pub welfare: f64,
    pub share_treated: f64,
    pub directions_searched: usize,
}

struct Candidate {
    welfare: f64,
    count: usize,
    threshold: f64,
    dir: usize,
}

/// Best prefix of the rows sorted by descending score, under a size cap.
///
/// Only prefixes ending at a strict drop in score are implementable by a
/// threshold rule, so ties are kept together.
fn best_prefix(scores: &[f64], r_hat: &[f64], cap: usize, order: &mut Vec<usize>) -> (f64, usize, f64) {
    let n = scores.len();
    order.clear();
    order.extend(0..n);
    let desc = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]);
    if cap + 1 < n {
        order.select_nth_unstable_by(cap + 1, desc);
        order[..cap + 2].sort_unstable_by(desc);
    } else {
        order.sort_unstable_by(desc);
    }
    let top = scores[order[0]];
    let (mut best, mut best_m, mut best_thr) = (0.0, 0usize, top + 1.0);
    let mut acc = 0.0;
    for m in 1..=cap.min(n) {
        acc += r_hat[order[m - 1]];
        let here = scores[order[m - 1]];
        let (gap, thr) = if m == n { (true, here - 1.0) } else {
            let next = scores[order[m]];
            (here > next, 0.5 * (here + next))
        };
        if gap && acc > best {
            best = acc;
            best_m = m;
            best_thr = thr;
        }
    }
    (best, best_m, best_thr)
}

/// Empirical welfare maximization over static threshold rules.
///
/// Maximizes `n⁻¹ Σ r̂_i 𝕀(θᵀf(X_i) > 0)` subject to a treated share of at
/// most `budget_fraction`, searching random unit directions for the
/// non-constant coefficients and every data-induced threshold for the
/// constant. With a single non-constant term both signs are searched
/// exactly.
pub fn ewm_search(r_hat: &[f64], x: &[f64], d: usize, budget_fraction: f64, spec: &FeatureSpec, cfg: &EwmConfig) -> Result<EwmResult> {
    spec.validate(d)?;
    let n = r_hat.len();
    if x.len() != n * d || n == 0 {
        return Err(invalid("EWM needs one covariate row per reward"));
    }
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(invalid("budget_fraction must lie in (0, 1]"));
    }
    if spec.terms.iter().any(|t| !t.is_static()) {
        return Err(invalid("EWM rules may only use constant and covariate terms"));
    }
    let c0 = spec
        .terms
        .iter()
        .position(|t| *t == FeatureTerm::Constant)
        .ok_or_else(|| invalid("EWM spec needs a constant term"))?;
    let slopes: Vec<usize> = (0..spec.dim()).filter(|&k| k != c0).collect();
    let cap = ((budget_fraction * n as f64) + 1e-9).floor() as usize;
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let feat: Vec<Vec<f64>> = (0..n).map(|i| features(spec, row(i), 0.0, 0.0)).collect();

    let dirs: Vec<Vec<f64>> = match slopes.len() {
        0 => vec![vec![]],
        1 => vec![vec![1.0], vec![-1.0]],
        m => {
            let mut g = rng::substream(cfg.seed, "ewm", 0);
            (0..cfg.directions.max(1))
                .map(|_| {
                    let v: Vec<f64> = (0..m).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
                    let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
                    v.into_iter().map(|a| a / nrm).collect()
                })
                .collect()
        }
    };

    let eval_dir = |di: usize, order: &mut Vec<usize>, scores: &mut Vec<f64>| -> Candidate {
        let u = &dirs[di];
        scores.clear();
        scores.extend(feat.iter().map(|f| slopes.iter().zip(u).map(|(&k, a)| f[k] * a).sum::<f64>()));
        if cap == 0 {
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            return Candidate { welfare: 0.0, count: 0, threshold: top + 1.0, dir: di };
        }
        let (w, m, thr) = best_prefix(scores, r_hat, cap, order);
        Candidate { welfare: w, count: m, threshold: thr, dir: di }
    };
    let better = |a: Candidate, b: Candidate| -> Candidate {
        if b.welfare > a.welfare || (b.welfare == a.welfare && b.dir < a.dir) {
            b
        } else {
            a
        }
    };
    let best = (0..dirs.len())
        .into_par_iter()
        .fold(
            || (None::<Candidate>, Vec::new(), Vec::new()),
            |(acc, mut order, mut scores), di| {
                let c = eval_dir(di, &mut order, &mut scores);
                let acc = Some(match acc {
                    None => c,
                    Some(a) => better(a, c),
                });
                (acc, order, scores)
            },
        )
        .map(|(c, _, _)| c)
        .reduce(|| None, |a, b| match (a, b) {
            (None, x) | (x, None) => x,
            (Some(a), Some(b)) => Some(better(a, b)),
        })
        .expect("at least one direction");

    let mut theta = vec![0.0; spec.dim()];
    theta[c0] = -best.threshold;
    for (&k, a) in slopes.iter().zip(&dirs[best.dir]) {
        theta[k] = *a;
    }
    let rule = DecisionRule { params: PolicyParams::new(spec.clone(), theta)? };
    Ok(EwmResult {
        rule,
        welfare: best.welfare / n as f64,
        share_treated: best.count as f64 / n as f64,
        directions_searched: dirs.len(),
    })
}
