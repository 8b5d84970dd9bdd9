//! Welfare evaluation under common random numbers, paired comparison and
//! selectivity diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{run_episode, EpisodeStats, Environment, Transition};
use crate::error::{invalid, Result};
use crate::policy::{ConstantPolicy, Policy};
use crate::rng::substream;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_welfare: f64,
    pub ci_halfwidth: f64,
    /// Mean welfare of the random 50% policy on the same episodes.
    pub random_welfare: f64,
    /// `mean_welfare / random_welfare`; `None` when the random welfare is 0.
    pub relative_welfare: Option<f64>,
    pub relative_ci_halfwidth: Option<f64>,
    pub treatment_share: f64,
    pub budget_exhaustion_rate: f64,
    /// Welfare of each episode in order.
    pub per_episode: Vec<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn ci(sd: f64, n: usize) -> f64 {
    Z95 * sd / (n as f64).sqrt()
}

/// Episode statistics for episodes `0..episodes`, each on its own substream.
pub fn simulate<P: Policy + ?Sized>(policy: &P, env: &Environment, episodes: usize, seed: u64) -> Result<Vec<EpisodeStats>> {
    (0..episodes)
        .into_par_iter()
        .map(|e| run_episode(env, policy, &mut substream(seed, "eval", e as u64), None))
        .collect()
}

/// Ratio of means with a delta-method interval from paired samples.
fn ratio_ci(a: &[f64], b: &[f64]) -> (Option<f64>, Option<f64>) {
    let (ma, _) = mean_sd(a);
    let (mb, _) = mean_sd(b);
    if mb == 0.0 {
        return (None, None);
    }
    let r = ma / mb;
    let lin: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - r * y) / mb).collect();
    let (_, sd) = mean_sd(&lin);
    (Some(r), Some(ci(sd, a.len())))
}

/// Mean welfare of a frozen policy, absolute and relative to the random 50%
/// policy evaluated on the same episode substreams.
pub fn evaluate_welfare<P: Policy + ?Sized>(policy: &P, env: &Environment, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(invalid("episodes must be at least 1"));
    }
    let own = simulate(policy, env, episodes, seed)?;
    let rand = simulate(&ConstantPolicy(0.5), env, episodes, seed)?;
    let w: Vec<f64> = own.iter().map(|s| s.welfare).collect();
    let wr: Vec<f64> = rand.iter().map(|s| s.welfare).collect();
    let (m, sd) = mean_sd(&w);
    let (mr, _) = mean_sd(&wr);
    let (rel, rel_ci) = ratio_ci(&w, &wr);
    let steps: u64 = own.iter().map(|s| s.steps).sum();
    let treated: u64 = own.iter().map(|s| s.treatments).sum();
    Ok(EvalReport {
        episodes,
        mean_welfare: m,
        ci_halfwidth: ci(sd, episodes),
        random_welfare: mr,
        relative_welfare: rel,
        relative_ci_halfwidth: rel_ci,
        treatment_share: if steps == 0 { 0.0 } else { treated as f64 / steps as f64 },
        budget_exhaustion_rate: own.iter().filter(|s| s.exhausted).count() as f64 / episodes as f64,
        per_episode: w,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub episodes: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean of `welfare_a − welfare_b` over paired episodes.
    pub difference: f64,
    pub ci_halfwidth: f64,
    pub ratio: Option<f64>,
    pub ratio_ci_halfwidth: Option<f64>,
}

impl CompareReport {
    /// The paired interval for the difference excludes zero from above.
    pub fn a_significantly_better(&self) -> bool {
        self.difference - self.ci_halfwidth > 0.0
    }
}

/// Paired evaluation of two policies on common random numbers.
pub fn compare<A: Policy + ?Sized, B: Policy + ?Sized>(a: &A, b: &B, env: &Environment, episodes: usize, seed: u64) -> Result<CompareReport> {
    if episodes == 0 {
        return Err(invalid("episodes must be at least 1"));
    }
    let wa: Vec<f64> = simulate(a, env, episodes, seed)?.iter().map(|s| s.welfare).collect();
    let wb: Vec<f64> = simulate(b, env, episodes, seed)?.iter().map(|s| s.welfare).collect();
    let diff: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| x - y).collect();
    let (d, sd) = mean_sd(&diff);
    let (ratio, rci) = ratio_ci(&wa, &wb);
    Ok(CompareReport {
        episodes,
        mean_a: mean_sd(&wa).0,
        mean_b: mean_sd(&wb).0,
        difference: d,
        ci_halfwidth: ci(sd, episodes),
        ratio,
        ratio_ci_halfwidth: rci,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub sims: usize,
    /// Mean rejections before a treatment, by calendar month of the
    /// treatment; `None` for months without treatments.
    pub by_month: Vec<Option<f64>>,
    pub month_events: Vec<u64>,
    /// Same, by decile of `(z − z̲)/(z0 − z̲)` at the treatment.
    pub by_budget_decile: Vec<Option<f64>>,
    pub decile_events: Vec<u64>,
    pub events: u64,
}

/// Rejections preceding each treatment: `(t, z, count)` per treatment.
pub fn rejection_runs(trajectory: &[Transition]) -> Vec<(f64, f64, u64)> {
    let mut out = Vec::new();
    let mut run = 0;
    for tr in trajectory {
        if tr.action {
            out.push((tr.state.t, tr.state.z, run));
            run = 0;
        } else {
            run += 1;
        }
    }
    out
}

/// Count how many arrivals were declined before each treatment, aggregated
/// by month of the year and by remaining-budget decile.
pub fn selectivity_stats<P: Policy + ?Sized>(policy: &P, env: &Environment, sims: usize, seed: u64) -> Result<SelectivityReport> {
    if sims == 0 {
        return Err(invalid("sims must be at least 1"));
    }
    let c = &env.config;
    let runs: Vec<Vec<(f64, f64, u64)>> = (0..sims)
        .into_par_iter()
        .map(|e| {
            let mut log = Vec::new();
            run_episode(env, policy, &mut substream(seed, "selectivity", e as u64), Some(&mut log))?;
            Ok(rejection_runs(&log))
        })
        .collect::<Result<_>>()?;
    let (mut ms, mut mc) = (vec![0.0; 12], vec![0u64; 12]);
    let (mut ds, mut dc) = (vec![0.0; 10], vec![0u64; 10]);
    let floor = c.z_lower.unwrap_or(0.0);
    let span = (c.z0 - floor).max(f64::MIN_POSITIVE);
    for (t, z, k) in runs.into_iter().flatten() {
        let frac = (t / c.period).rem_euclid(1.0);
        let m = ((frac * 12.0) as usize).min(11);
        ms[m] += k as f64;
        mc[m] += 1;
        let q = (((z - floor) / span * 10.0).floor().max(0.0) as usize).min(9);
        ds[q] += k as f64;
        dc[q] += 1;
    }
    let avg = |s: &[f64], c: &[u64]| s.iter().zip(c).map(|(a, &n)| (n > 0).then(|| a / n as f64)).collect();
    Ok(SelectivityReport {
        sims,
        by_month: avg(&ms, &mc),
        by_budget_decile: avg(&ds, &dc),
        events: mc.iter().sum(),
        month_events: mc,
        decile_events: dc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arrivals::{ForecastEnsemble, RateModel};
    use crate::env::{EnvConfig, Population};
    use crate::reward::RewardTable;

    fn env() -> Environment {
        let pop = Population::single(vec![0.0, 1.0, 2.0], 1, RewardTable::new(vec![1.0, 2.0, 0.5])).unwrap();
        Environment::new(EnvConfig::dirichlet(0.3, 1.0, 0.1, 30.0, 0.05), pop, ForecastEnsemble::single(RateModel::constant(1))).unwrap()
    }

    #[test]
    fn random_policy_is_exactly_one() {
        let r = evaluate_welfare(&ConstantPolicy(0.5), &env(), 50, 3).unwrap();
        assert_eq!(r.relative_welfare, Some(1.0));
        let r = evaluate_welfare(&ConstantPolicy(0.0), &env(), 50, 3).unwrap();
        assert_eq!(r.mean_welfare, 0.0);
        assert_eq!(r.treatment_share, 0.0);
    }

    #[test]
    fn compare_examples() {
        let c = compare(&ConstantPolicy(0.3), &ConstantPolicy(0.3), &env(), 40, 1).unwrap();
        assert_eq!(c.difference, 0.0);
        let c = compare(&ConstantPolicy(1.0), &ConstantPolicy(0.0), &env(), 40, 1).unwrap();
        assert!(c.difference > 0.0 && c.a_significantly_better());
    }

    #[test]
    fn selectivity_examples() {
        let s = selectivity_stats(&ConstantPolicy(1.0), &env(), 20, 2).unwrap();
        assert!(s.events > 0);
        assert!(s.by_month.iter().flatten().all(|v| *v == 0.0));
    }
}
