//! Cross-fitted doubly-robust reward estimation and compliance quantities.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ObservationalData;
use crate::error::{invalid, Result};
use crate::linalg::{logit, ols, LinearFit, LogitFit};
use crate::rng;

/// Overlap clamp applied to every propensity prediction.
pub const PROPENSITY_CLAMP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// Known assignment probability (RCT).
    Fixed(f64),
    /// Out-of-fold logistic regression of W on X.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub folds: usize,
    pub seed: u64,
    pub propensity: PropensityMode,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig { folds: 5, seed: 0, propensity: PropensityMode::Estimated }
    }
}

/// Nuisance models fitted on one training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldModels {
    pub mu0: LinearFit,
    pub mu1: LinearFit,
    pub propensity: Option<LogitFit>,
}

impl FoldModels {
    pub fn ridge(&self) -> bool {
        self.mu0.ridge || self.mu1.ridge || self.propensity.as_ref().is_some_and(|p| p.ridge())
    }
}

/// Cross-fitted nuisance predictions, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceModels {
    pub folds: Vec<usize>,
    pub models: Vec<FoldModels>,
    pub mode: PropensityMode,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub propensity: Vec<f64>,
    /// Some fold needed the ridge fallback.
    pub ridge_fallback: bool,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)
}

/// Deterministic assignment of `n` rows to `k` folds of near-equal size.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::substream(seed, "folds", 0));
    let mut folds = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

/// Fit the outcome and propensity models on the given training rows.
pub fn fit_fold(data: &ObservationalData, train: &[usize], mode: PropensityMode) -> Result<FoldModels> {
    let (t1, t0): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| data.w[i]);
    if t1.is_empty() || t0.is_empty() {
        return Err(invalid("a training fold contains only one treatment arm"));
    }
    let fit_arm = |rows: &[usize]| {
        let xs: Vec<&[f64]> = rows.iter().map(|&i| data.row(i)).collect();
        let ys: Vec<f64> = rows.iter().map(|&i| data.y[i]).collect();
        ols(&xs, &ys)
    };
    let propensity = match mode {
        PropensityMode::Fixed(_) => None,
        PropensityMode::Estimated => {
            let xs: Vec<&[f64]> = train.iter().map(|&i| data.row(i)).collect();
            let ws: Vec<bool> = train.iter().map(|&i| data.w[i]).collect();
            Some(logit(&xs, &ws))
        }
    };
    Ok(FoldModels { mu0: fit_arm(&t0), mu1: fit_arm(&t1), propensity })
}

/// Out-of-fold conditional means and propensities for every row.
pub fn fit_nuisance(data: &ObservationalData, cfg: &NuisanceConfig) -> Result<NuisanceModels> {
    let k = cfg.folds;
    if k < 2 {
        return Err(invalid("need at least 2 folds"));
    }
    if data.n() < 2 * k {
        return Err(invalid(format!("n = {} is below 2 x folds = {}", data.n(), 2 * k)));
    }
    if let PropensityMode::Fixed(p) = cfg.propensity {
        if !(p > 0.0 && p < 1.0) {
            return Err(invalid(format!("fixed propensity {p} outside (0,1)")));
        }
    }
    let folds = fold_assignment(data.n(), k, cfg.seed);
    let models: Vec<FoldModels> = (0..k)
        .map(|f| {
            let train: Vec<usize> = (0..data.n()).filter(|&i| folds[i] != f).collect();
            fit_fold(data, &train, cfg.propensity)
        })
        .collect::<Result<_>>()?;
    let n = data.n();
    let (mut mu0, mut mu1, mut prop) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let m = &models[folds[i]];
        let x = data.row(i);
        mu0[i] = m.mu0.predict(x);
        mu1[i] = m.mu1.predict(x);
        prop[i] = clamp_p(match (&m.propensity, cfg.propensity) {
            (Some(p), _) => p.prob(x),
            (None, PropensityMode::Fixed(p)) => p,
            (None, PropensityMode::Estimated) => unreachable!("estimated mode always fits a model"),
        });
    }
    let ridge_fallback = models.iter().any(FoldModels::ridge);
    Ok(NuisanceModels { folds, models, mode: cfg.propensity, mu0, mu1, propensity: prop, ridge_fallback })
}

/// Compliance quantities for one row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    pub q_c: f64,
    pub q_a: f64,
    pub q_n: f64,
    pub late: f64,
}

/// Per-row reward estimates `r̂(X_i, 1)`; `r̂(x, 0) ≡ 0` is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    pub r_hat: Vec<f64>,
    pub compliance: Option<Vec<Compliance>>,
}

impl RewardTable {
    pub fn new(r_hat: Vec<f64>) -> Self {
        RewardTable { r_hat, compliance: None }
    }

    pub fn len(&self) -> usize {
        self.r_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_hat.is_empty()
    }

    /// Expected reward of treating row `i` (the ITT value under non-compliance).
    pub fn expected(&self, i: usize) -> f64 {
        match &self.compliance {
            Some(c) => c[i].q_c * c[i].late,
            None => self.r_hat[i],
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["row_id", "r_hat", "q_c", "q_a", "q_n", "late"])?;
        for (i, r) in self.r_hat.iter().enumerate() {
            let mut rec = vec![i.to_string(), r.to_string()];
            match &self.compliance {
                Some(c) => {
                    let c = c[i];
                    rec.extend([c.q_c, c.q_a, c.q_n, c.late].iter().map(|v| v.to_string()));
                }
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path.as_ref())?;
        let mut r_hat = Vec::new();
        let mut comp = Vec::new();
        let mut has_comp = true;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id: usize = rec.get(0).unwrap_or("").trim().parse().map_err(|_| invalid(format!("row {row}: bad row_id")))?;
            if id != row {
                return Err(invalid(format!("row {row}: row_id {id} out of order")));
            }
            let num = |k: usize| -> Option<f64> { rec.get(k).and_then(|s| s.trim().parse().ok()) };
            r_hat.push(num(1).ok_or_else(|| invalid(format!("row {row}: bad r_hat")))?);
            match (num(2), num(3), num(4), num(5)) {
                (Some(q_c), Some(q_a), Some(q_n), Some(late)) => comp.push(Compliance { q_c, q_a, q_n, late }),
                _ => has_comp = false,
            }
        }
        Ok(RewardTable { r_hat, compliance: (has_comp && !comp.is_empty()).then_some(comp) })
    }
}

/// AIPW score for one row.
pub fn dr_score(mu1: f64, mu0: f64, w: bool, y: f64, p: f64) -> f64 {
    let (mu_w, denom) = if w { (mu1, p) } else { (mu0, 1.0 - p) };
    let sign = if w { 1.0 } else { -1.0 };
    mu1 - mu0 + sign * (y - mu_w) / denom
}

/// Doubly-robust rewards from cross-fitted nuisances.
pub fn doubly_robust_rewards(data: &ObservationalData, nuis: &NuisanceModels) -> RewardTable {
    let r_hat = (0..data.n())
        .map(|i| {
            let p = nuis.propensity[i];
            assert!(p > 0.0 && p < 1.0, "propensity {p} escaped its clamp");
            dr_score(nuis.mu1[i], nuis.mu0[i], data.w[i], data.y[i], p)
        })
        .collect();
    RewardTable::new(r_hat)
}

/// Result of [`estimate_compliance`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplianceEstimate {
    pub table: RewardTable,
    /// Set when no row has a positive complier share.
    pub warning: Option<String>,
}

/// Compliance shares and LATE under a binary instrument.
///
/// `q_a` and `q_n` are out-of-fold logits of `W` within `Z = 0` and of
/// `1 − W` within `Z = 1`. `late` is the AIPW intent-to-treat score divided
/// by the fitted first stage `q_c`, so that `q_c · late` is the doubly-robust
/// ITT score. Rows with `q_c < 0.01` get `late = 0`.
pub fn estimate_compliance(data: &ObservationalData, cfg: &NuisanceConfig) -> Result<ComplianceEstimate> {
    let z = data
        .instrument
        .as_ref()
        .ok_or_else(|| invalid("estimate_compliance needs an instrument column"))?;
    let n1 = z.iter().filter(|&&v| v).count();
    if n1 == 0 || n1 == data.n() {
        return Err(invalid("instrument has only one arm"));
    }
    // Swap W for Z to reuse the cross-fitted machinery for E[Y | X, Z].
    let mut itt = data.clone();
    itt.w = z.clone();
    let ny = fit_nuisance(&itt, cfg)?;
    let k = cfg.folds;
    let folds = &ny.folds;
    let mut comp = vec![Compliance { q_c: 0.0, q_a: 0.0, q_n: 0.0, late: 0.0 }; data.n()];
    for f in 0..k {
        let train: Vec<usize> = (0..data.n()).filter(|&i| folds[i] != f).collect();
        let (tz1, tz0): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| z[i]);
        let rows = |v: &[usize]| v.iter().map(|&i| data.row(i)).collect::<Vec<_>>();
        let qa = logit(&rows(&tz0), &tz0.iter().map(|&i| data.w[i]).collect::<Vec<_>>());
        let qn = logit(&rows(&tz1), &tz1.iter().map(|&i| !data.w[i]).collect::<Vec<_>>());
        for i in (0..data.n()).filter(|&i| folds[i] == f) {
            let x = data.row(i);
            let (a, nv) = (qa.prob(x), qn.prob(x));
            let c = (1.0 - a - nv).clamp(0.0, 1.0);
            let s = a + nv + c;
            comp[i] = Compliance { q_c: c / s, q_a: a / s, q_n: nv / s, late: 0.0 };
        }
    }
    let mut any_complier = false;
    for (i, c) in comp.iter_mut().enumerate() {
        let psi = dr_score(ny.mu1[i], ny.mu0[i], z[i], data.y[i], ny.propensity[i]);
        if c.q_c >= PROPENSITY_CLAMP {
            c.late = psi / c.q_c;
            any_complier = true;
        }
    }
    let warning = (!any_complier).then(|| "no compliers: complier share is zero for every row; all rewards are zero".to_string());
    let r_hat = comp.iter().map(|c| c.q_c * c.late).collect();
    Ok(ComplianceEstimate { table: RewardTable { r_hat, compliance: Some(comp) }, warning })
}
