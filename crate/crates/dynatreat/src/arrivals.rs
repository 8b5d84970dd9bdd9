//! Arrival model: k-median clusters, seasonal Poisson intensities and
//! interarrival sampling.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::data::ObservationalData;
use crate::error::{invalid, Error, Result};

const MAX_KMEDIAN_ITERS: usize = 100;

/// Hard assignment of rows to `k` clusters with their coordinate-wise medians.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Zero-based cluster label per row.
    pub labels: Vec<usize>,
    pub medians: Vec<Vec<f64>>,
    /// Sum of L1 distances after each assignment step.
    pub objective_history: Vec<f64>,
}

impl ClusterAssignment {
    /// A single cluster holding every row.
    pub fn single(n: usize, d: usize) -> Self {
        ClusterAssignment { k: 1, labels: vec![0; n], medians: vec![vec![0.0; d]], objective_history: vec![] }
    }

    /// Row indices per cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &c) in self.labels.iter().enumerate() {
            m[c].push(i);
        }
        m
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["row_id", "cluster"])?;
        for (i, c) in self.labels.iter().enumerate() {
            w.write_record([i.to_string(), (c + 1).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read labels (1-based on disk) and recompute medians from `data`.
    pub fn read_csv(path: impl AsRef<Path>, data: &ObservationalData) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path.as_ref())?;
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let c: usize = rec
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .filter(|&c| c >= 1)
                .ok_or_else(|| invalid(format!("row {row}: bad cluster label")))?;
            labels.push(c - 1);
        }
        if labels.len() != data.n() {
            return Err(invalid("cluster file length differs from dataset"));
        }
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let medians = medians_of(data, &labels, k);
        Ok(ClusterAssignment { k, labels, medians, objective_history: vec![] })
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn medians_of(data: &ObservationalData, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; data.d]; k];
    let mut buf = Vec::new();
    for (c, med) in out.iter_mut().enumerate() {
        for (j, mj) in med.iter_mut().enumerate() {
            buf.clear();
            buf.extend((0..data.n()).filter(|&i| labels[i] == c).map(|i| data.row(i)[j]));
            if !buf.is_empty() {
                *mj = median(&mut buf);
            }
        }
    }
    out
}

fn distinct_rows(data: &ObservationalData) -> usize {
    let mut rows: Vec<&[f64]> = (0..data.n()).map(|i| data.row(i)).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.dedup();
    rows.len()
}

/// k-median clustering under L1 distance.
///
/// Seeding picks the first center uniformly and later centers with
/// probability proportional to their L1 distance from the nearest chosen
/// center. Assignment and median updates then alternate until labels stop
/// changing or 100 iterations pass. A cluster that empties is re-seeded with
/// the row farthest from its current median.
pub fn cluster_covariates<R: Rng + ?Sized>(data: &ObservationalData, k: usize, rng: &mut R) -> Result<ClusterAssignment> {
    let n = data.n();
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if k > n {
        return Err(invalid(format!("k = {k} exceeds n = {n}")));
    }
    if k > distinct_rows(data) {
        return Err(invalid(format!("k = {k} exceeds the number of distinct rows")));
    }
    let mut centers: Vec<Vec<f64>> = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| l1(data.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &dist) in nearest.iter().enumerate() {
            if dist > 0.0 && u < dist {
                pick = i;
                break;
            }
            u -= dist;
        }
        if nearest[pick] == 0.0 {
            pick = nearest.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        }
        centers.push(data.row(pick).to_vec());
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(l1(data.row(i), centers.last().unwrap()));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..MAX_KMEDIAN_ITERS {
        let mut changed = false;
        let mut obj = 0.0;
        for (i, label) in labels.iter_mut().enumerate() {
            let (best, dist) = centers
                .iter()
                .enumerate()
                .map(|(c, m)| (c, l1(data.row(i), m)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if *label != best {
                *label = best;
                changed = true;
            }
            obj += dist;
        }
        // Re-seed empty clusters from the worst-fit rows.
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        for c in 0..k {
            if sizes[c] == 0 {
                let (far, _) = (0..n)
                    .filter(|&i| sizes[labels[i]] > 1)
                    .map(|i| (i, l1(data.row(i), &centers[labels[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("some cluster has two members");
                obj -= l1(data.row(far), &centers[labels[far]]);
                sizes[labels[far]] -= 1;
                sizes[c] = 1;
                labels[far] = c;
                centers[c] = data.row(far).to_vec();
                changed = true;
            }
        }
        history.push(obj);
        if !changed {
            break;
        }
        centers = medians_of(data, &labels, k);
    }
    let medians = medians_of(data, &labels, k);
    Ok(ClusterAssignment { k, labels, medians, objective_history: history })
}

/// Coefficients of `λ_c(t) = exp(b0 + b1·sin(2πt/T_p) + b2·cos(2πt/T_p))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCoef {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

impl RateCoef {
    pub fn eval(&self, t: f64, period: f64) -> f64 {
        let s = 2.0 * PI * t.rem_euclid(period) / period;
        (self.b0 + self.b1 * s.sin() + self.b2 * s.cos()).exp()
    }
}

fn default_period() -> f64 {
    1.0
}

/// Cluster-specific seasonal Poisson intensities.
///
/// Stored coefficients are normalized so the aggregate rate equals 1 at the
/// reference time; `normalization` is the factor that was divided out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub clusters: Vec<RateCoef>,
    pub normalization: f64,
    #[serde(default = "default_period")]
    pub period: f64,
}

impl RateModel {
    /// A model with constant unit aggregate rate split evenly across `k` clusters.
    pub fn constant(k: usize) -> Self {
        let b0 = -(k as f64).ln();
        RateModel { clusters: vec![RateCoef { b0, b1: 0.0, b2: 0.0 }; k], normalization: 1.0, period: 1.0 }
    }

    pub fn from_coefs(clusters: Vec<RateCoef>) -> Self {
        RateModel { clusters, normalization: 1.0, period: 1.0 }
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_rate(&self, c: usize, t: f64) -> f64 {
        self.clusters[c].eval(t, self.period)
    }

    /// Rescale so that the aggregate rate at `t0` is exactly representable as 1.
    pub fn normalized_at(mut self, t0: f64) -> Self {
        let total = aggregate_rate(&self, t0);
        let shift = total.ln();
        for c in &mut self.clusters {
            c.b0 -= shift;
        }
        self.normalization *= total;
        self
    }

    /// Minimum of the aggregate rate over an `m`-point grid of one period.
    pub fn min_rate(&self, m: usize) -> f64 {
        (0..m)
            .map(|i| aggregate_rate(self, self.period * i as f64 / m as f64))
            .fold(f64::INFINITY, f64::min)
    }

    /// `∫_a^b λ(t) dt` by the composite midpoint rule with `m` panels.
    pub fn integral(&self, a: f64, b: f64, m: usize) -> f64 {
        let h = (b - a) / m as f64;
        (0..m).map(|i| aggregate_rate(self, a + (i as f64 + 0.5) * h)).sum::<f64>() * h
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(invalid("rate model has no clusters"));
        }
        if !(self.period > 0.0) || !self.normalization.is_finite() || self.normalization <= 0.0 {
            return Err(invalid("rate model period and normalization must be positive"));
        }
        if self.clusters.iter().any(|c| !(c.b0.is_finite() && c.b1.is_finite() && c.b2.is_finite())) {
            return Err(invalid("rate coefficients must be finite"));
        }
        if !(self.min_rate(1000) > 1e-12) {
            return Err(invalid("aggregate rate is not bounded away from zero"));
        }
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let m: RateModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

/// Aggregate intensity `λ(t) = Σ_c λ_c(t mod T_p)`.
pub fn aggregate_rate(model: &RateModel, t: f64) -> f64 {
    (0..model.k()).map(|c| model.cluster_rate(c, t)).sum()
}

/// Cluster weights `λ_c(t) / λ(t)`.
pub fn covariate_weights(model: &RateModel, t: f64) -> Vec<f64> {
    let rates: Vec<f64> = (0..model.k()).map(|c| model.cluster_rate(c, t)).collect();
    let total: f64 = rates.iter().sum();
    rates.into_iter().map(|r| r / total).collect()
}

/// Settings for the binned Poisson likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFitConfig {
    pub bins: usize,
    pub period: f64,
    /// Multiplier `N` in the intensity `N·λ_c(t)`; `None` uses the total
    /// number of arrivals across all clusters.
    pub exposure: Option<f64>,
    /// Reference time at which the fitted aggregate rate is normalized to 1.
    pub t0: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for RateFitConfig {
    fn default() -> Self {
        RateFitConfig { bins: 365, period: 1.0, exposure: None, t0: 0.0, max_iter: 200, tol: 1e-8 }
    }
}

/// Maximum-likelihood fit of one cluster's seasonal intensity.
///
/// Arrival times are binned into `cfg.bins` equal bins per period and the
/// Poisson log-likelihood `Σ n_b log μ_b − μ_b`, with
/// `μ_b = N·Δ·exp(b0 + b1 sin + b2 cos)` at the bin midpoint, is maximized by
/// damped Newton steps.
pub fn fit_rate(times: &[f64], exposure: f64, cfg: &RateFitConfig) -> Result<RateCoef> {
    if times.is_empty() {
        return Err(invalid("cannot fit a rate with no arrivals"));
    }
    if !(exposure > 0.0) {
        return Err(invalid("exposure must be positive"));
    }
    let nb = cfg.bins;
    let width = cfg.period / nb as f64;
    let mut counts = vec![0.0; nb];
    for &t in times {
        let b = ((t.rem_euclid(cfg.period) / width) as usize).min(nb - 1);
        counts[b] += 1.0;
    }
    let design: Vec<Vector3<f64>> = (0..nb)
        .map(|b| {
            let s = 2.0 * PI * (b as f64 + 0.5) / nb as f64;
            Vector3::new(1.0, s.sin(), s.cos())
        })
        .collect();
    let scale = exposure * width;
    let loglik = |beta: &Vector3<f64>| -> f64 {
        design
            .iter()
            .zip(&counts)
            .map(|(x, &n)| {
                let eta = beta.dot(x);
                n * eta - scale * eta.exp()
            })
            .sum()
    };
    let total: f64 = counts.iter().sum();
    let mut beta = Vector3::new((total / (exposure * cfg.period)).ln(), 0.0, 0.0);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let mut g = Vector3::zeros();
        let mut h = Matrix3::zeros();
        for (x, &n) in design.iter().zip(&counts) {
            let mu = scale * beta.dot(x).exp();
            g += x * (n - mu);
            h += x * x.transpose() * mu;
        }
        grad_norm = g.norm();
        if grad_norm < cfg.tol * total.max(1.0) {
            return Ok(RateCoef { b0: beta[0], b1: beta[1], b2: beta[2] });
        }
        let step = h.cholesky().map(|c| c.solve(&g)).unwrap_or(g * 1e-3);
        let base = loglik(&beta);
        let mut s = 1.0;
        loop {
            let cand = beta + step * s;
            if loglik(&cand) >= base || s < 1e-8 {
                beta = cand;
                break;
            }
            s *= 0.5;
        }
    }
    Err(Error::Convergence { what: "Poisson rate fit".into(), iterations: cfg.max_iter, residual: grad_norm })
}

/// Fit every cluster's intensity and normalize the aggregate at `cfg.t0`.
pub fn fit_poisson_rates(assignment: &ClusterAssignment, arrival: &[f64], cfg: &RateFitConfig) -> Result<RateModel> {
    if arrival.len() != assignment.labels.len() {
        return Err(invalid("arrival times and labels differ in length"));
    }
    let exposure = cfg.exposure.unwrap_or(arrival.len() as f64);
    let members = assignment.members();
    let mut coefs = Vec::with_capacity(assignment.k);
    for (c, rows) in members.iter().enumerate() {
        if rows.len() < 3 {
            return Err(invalid(format!("cluster {} has {} arrivals; need at least 3", c + 1, rows.len())));
        }
        let times: Vec<f64> = rows.iter().map(|&i| arrival[i]).collect();
        coefs.push(fit_rate(&times, exposure, cfg)?);
    }
    let model = RateModel { clusters: coefs, normalization: 1.0, period: cfg.period }.normalized_at(cfg.t0);
    model.validate()?;
    Ok(model)
}

/// One interarrival draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub dt: f64,
    /// Cluster of the next arrival.
    pub cluster: usize,
    /// The horizon bound the exponential draw.
    pub censored: bool,
}

const STACK_CLUSTERS: usize = 32;

fn pick(rates: &[f64], total: f64, u: f64) -> usize {
    let mut acc = u * total;
    for (c, r) in rates.iter().enumerate() {
        if acc < *r {
            return c;
        }
        acc -= r;
    }
    rates.len() - 1
}

fn with_rates<T>(model: &RateModel, t: f64, f: impl FnOnce(&[f64], f64) -> T) -> T {
    let k = model.k();
    let mut stack = [0.0; STACK_CLUSTERS];
    let mut heap = Vec::new();
    let buf: &mut [f64] = if k <= STACK_CLUSTERS {
        &mut stack[..k]
    } else {
        heap.resize(k, 0.0);
        &mut heap
    };
    let mut total = 0.0;
    for (c, r) in buf.iter_mut().enumerate() {
        *r = model.cluster_rate(c, t);
        total += *r;
    }
    f(buf, total)
}

/// Draw the cluster of an arrival at `t` with probability `λ_c(t)/λ(t)`.
pub fn sample_cluster<R: Rng + ?Sized>(model: &RateModel, t: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    with_rates(model, t, |rates, total| pick(rates, total, u))
}

/// `Δt = min(ω/b_n, T − t)` with `ω ~ Exponential(λ(t))`, plus the next
/// arrival's cluster drawn at the pre-jump time `t`.
pub fn sample_arrival<R: Rng + ?Sized>(model: &RateModel, t: f64, b_n: f64, horizon: Option<f64>, rng: &mut R) -> Arrival {
    let e: f64 = rng.sample(Exp1);
    let u: f64 = rng.random();
    arrival_from_draws(model, t, b_n, horizon, e, u)
}

/// [`sample_arrival`] from a pre-drawn unit exponential `e` and uniform `u`.
pub fn arrival_from_draws(model: &RateModel, t: f64, b_n: f64, horizon: Option<f64>, e: f64, u: f64) -> Arrival {
    let (raw, cluster) = with_rates(model, t, |rates, total| (e / total / b_n, pick(rates, total, u)));
    match horizon {
        Some(h) if raw >= h - t => Arrival { dt: h - t, cluster, censored: true },
        _ => Arrival { dt: raw, cluster, censored: false },
    }
}

/// Weighted set of alternative arrival models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastEnsemble {
    pub members: Vec<RateModel>,
    pub weights: Vec<f64>,
}

impl ForecastEnsemble {
    pub fn single(model: RateModel) -> Self {
        ForecastEnsemble { members: vec![model], weights: vec![1.0] }
    }

    pub fn new(members: Vec<RateModel>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() || members.len() != weights.len() {
            return Err(invalid("ensemble needs one weight per member and at least one member"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("ensemble weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("ensemble weights sum to zero"));
        }
        let k = members[0].k();
        if members.iter().any(|m| m.k() != k) {
            return Err(invalid("ensemble members disagree on the cluster count"));
        }
        Ok(ForecastEnsemble { members, weights: weights.iter().map(|w| w / total).collect() })
    }

    /// Index of the member governing a new episode.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.members.len() == 1 {
            return 0;
        }
        WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
    }
}

/// Draw one ensemble member.
pub fn draw_forecast<'a, R: Rng + ?Sized>(ens: &'a ForecastEnsemble, rng: &mut R) -> &'a RateModel {
    &ens.members[ens.draw(rng)]
}
