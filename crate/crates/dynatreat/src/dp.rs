//! Reference solvers for the integrated value function on small instances.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arrivals::{aggregate_rate, RateModel};
use crate::env::{deterministic_dt, Boundary, EnvConfig, Environment, Interarrival, Population, Z_TOL};
use crate::error::{invalid, Error, Result};
use crate::policy::{Policy, PolicyParams};
use crate::value::{BasisSpec, ValueWeights};

/// Value of the simple budget recursion on the lattice `z0 − j/b_n`.
///
/// `h(z) = r̄(z)/b + (1 − β/b)·[h(z − 1/b)·π̄(1|z) + h(z)·π̄(0|z)]` for
/// `z ≥ 1/b`, zero below, where the bars are exact averages over all rows.
/// Returns `(z, h)` pairs in ascending `z`; the last entry is at `z0`.
pub fn solve_ode_value(params: &PolicyParams, r_hat: &[f64], x: &[f64], d: usize, beta: f64, b_n: f64, z0: f64) -> Result<Vec<(f64, f64)>> {
    let n = r_hat.len();
    if n == 0 || x.len() != n * d {
        return Err(invalid("ODE solver needs one covariate row per reward"));
    }
    if beta >= b_n {
        return Err(invalid("beta must be below b_n"));
    }
    if z0 < 0.0 {
        return Err(invalid("z0 must be nonnegative"));
    }
    let k = (z0 * b_n + 1e-9).floor() as usize;
    let disc = 1.0 - beta / b_n;
    let base = z0 - k as f64 / b_n;
    let mut out = Vec::with_capacity(k + 1);
    out.push((base.max(0.0), 0.0));
    let mut prev = 0.0;
    for j in 1..=k {
        let z = base + j as f64 / b_n;
        let (mut pi1, mut rbar) = (0.0, 0.0);
        for i in 0..n {
            let p = params.prob(&x[i * d..(i + 1) * d], z, 0.0);
            pi1 += p;
            rbar += p * r_hat[i];
        }
        pi1 /= n as f64;
        rbar /= n as f64;
        let h = (rbar / b_n + disc * pi1 * prev) / (1.0 - disc * (1.0 - pi1));
        out.push((z, h));
        prev = h;
    }
    Ok(out)
}

/// Tabulated `h̃_θ(z, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridValue {
    pub boundary: Boundary,
    pub interarrival: Interarrival,
    /// Budget levels, ascending.
    pub z: Vec<f64>,
    /// Time nodes, ascending.
    pub t: Vec<f64>,
    /// `h[i][m]` is the value at `(z[i], t[m])`.
    pub h: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub b_n: f64,
    /// Period of the time grid in the periodic regime.
    pub period: Option<f64>,
    /// Largest violation of the discretized recursion by the solution.
    pub residual: f64,
}

impl GridValue {
    fn time_weights(&self, t: f64) -> (usize, usize, f64) {
        let nt = self.t.len();
        if nt == 1 {
            return (0, 0, 0.0);
        }
        let t = match self.period {
            Some(p) => self.t[0] + (t - self.t[0]).rem_euclid(p),
            None => t.clamp(self.t[0], self.t[nt - 1]),
        };
        let m = self.t.partition_point(|&v| v <= t).saturating_sub(1);
        if m + 1 >= nt {
            return match self.period {
                Some(p) => {
                    let span = self.t[0] + p - self.t[m];
                    (m, 0, (t - self.t[m]) / span)
                }
                None => (nt - 1, nt - 1, 0.0),
            };
        }
        (m, m + 1, (t - self.t[m]) / (self.t[m + 1] - self.t[m]))
    }

    fn level_at(&self, i: usize, t: f64) -> f64 {
        let (a, b, w) = self.time_weights(t);
        self.h[i][a] * (1.0 - w) + self.h[i][b] * w
    }

    /// Value at `(z, t)`, linear in `t` between nodes and linear in `z`
    /// between budget levels. Below the lowest level the value is 0.
    pub fn value_at(&self, z: f64, t: f64) -> f64 {
        if let Some(i) = self.z.iter().position(|&v| (v - z).abs() <= 1e-9) {
            return self.level_at(i, t);
        }
        let i = self.z.partition_point(|&v| v < z);
        if i == 0 {
            return 0.0;
        }
        if i == self.z.len() {
            return self.level_at(i - 1, t);
        }
        let w = (z - self.z[i - 1]) / (self.z[i] - self.z[i - 1]);
        self.level_at(i - 1, t) * (1.0 - w) + self.level_at(i, t) * w
    }

    pub fn max_abs(&self) -> f64 {
        self.h.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    /// CSV with columns `z, t, h`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["z", "t", "h"])?;
        for (i, z) in self.z.iter().enumerate() {
            for (m, t) in self.t.iter().enumerate() {
                w.write_record([z.to_string(), t.to_string(), self.h[i][m].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Budget levels reachable from `z0` by repeated treatment, with the same
/// arithmetic and snapping as the environment. Returned descending.
fn budget_levels(c: &EnvConfig) -> Result<Vec<f64>> {
    let floor = c.floor();
    if !floor.is_finite() {
        return Err(invalid("solver needs a finite z_lower"));
    }
    if c.cost <= 0.0 {
        return Ok(vec![c.z0]);
    }
    let need = ((c.z0 - floor) / c.cost).ceil() as usize + 2;
    if need > 1_000_000 {
        return Err(Error::TooLarge { needed: need as f64, limit: 1e6 });
    }
    let mut levels = vec![c.z0];
    let mut z = c.z0;
    while z > floor + Z_TOL && z - c.cost >= floor - Z_TOL {
        z -= c.cost;
        if z <= floor + Z_TOL {
            z = floor;
        }
        levels.push(z);
    }
    Ok(levels)
}

fn check_solvable(env: &Environment) -> Result<&RateModel> {
    let c = &env.config;
    if env.forecasts.members.len() != 1 {
        return Err(invalid("solver needs a single-member forecast ensemble"));
    }
    if !c.boundary.absorbing() {
        return Err(invalid("solver supports the dirichlet and periodic regimes only"));
    }
    if c.income != 0.0 || c.interest != 0.0 || !c.cost_slopes.is_empty() {
        return Err(invalid("solver needs zero income, zero interest and a constant cost"));
    }
    Ok(&env.forecasts.members[0])
}

/// Expected scaled reward and delivery probability of one arrival at
/// `(z, t)`, with covariates drawn from the cluster mix at `t_mix`.
fn moments<P: Policy + ?Sized>(pop: &Population, model: &RateModel, policy: &P, z: f64, t: f64, t_mix: f64, b_n: f64) -> (f64, f64) {
    let total = aggregate_rate(model, t_mix);
    let (mut r, mut p) = (0.0, 0.0);
    for (c, rows) in pop.members.iter().enumerate() {
        let w = if pop.k() == 1 { 1.0 } else { model.cluster_rate(c, t_mix) / total };
        let (mut rc, mut pc) = (0.0, 0.0);
        for &i in rows {
            let pi = policy.prob(pop.row(i), z, t);
            match &pop.rewards.compliance {
                None => {
                    pc += pi;
                    rc += pi * pop.rewards.r_hat[i];
                }
                Some(comp) => {
                    let q = &comp[i];
                    pc += q.q_c * pi + q.q_a;
                    rc += q.q_c * pi * q.late;
                }
            }
        }
        let m = rows.len() as f64;
        r += w * rc / m;
        p += w * pc / m;
    }
    (r / b_n, p)
}

/// Which interarrival law the grid solver should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeGrid {
    /// Nodes visited by the deterministic-interarrival environment.
    Deterministic,
    /// Uniform grid with this many intervals over `[t0, T]` (or one period).
    Uniform(usize),
}

/// Solve for `h̃_θ` on a budget × time grid.
///
/// Deterministic mode reproduces the deterministic-interarrival environment
/// exactly. Uniform mode integrates the censored exponential interarrival
/// law exactly against a value that is piecewise linear in time; in the
/// periodic regime each budget level is a linear system solved directly.
pub fn solve_dp_value<P: Policy + ?Sized>(env: &Environment, policy: &P, theta: &[f64], grid: TimeGrid) -> Result<GridValue> {
    let model = check_solvable(env)?;
    let c = &env.config;
    let mut levels = budget_levels(c)?;
    levels.reverse();
    let (t, h, residual) = match grid {
        TimeGrid::Deterministic => solve_deterministic(env, model, policy, &levels)?,
        TimeGrid::Uniform(m) => {
            if m < 2 {
                return Err(invalid("time grid needs at least 2 intervals"));
            }
            if c.boundary.periodic() {
                solve_periodic(env, model, policy, &levels, m)?
            } else {
                let horizon = c.horizon.ok_or_else(|| invalid("dirichlet grid solver needs a finite horizon"))?;
                solve_dirichlet(env, model, policy, &levels, m, horizon)?
            }
        }
    };
    if h.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("grid value".into()));
    }
    Ok(GridValue {
        boundary: c.boundary,
        interarrival: match grid {
            TimeGrid::Deterministic => Interarrival::Deterministic,
            TimeGrid::Uniform(_) => Interarrival::Exponential,
        },
        z: levels,
        t,
        h,
        theta: theta.to_vec(),
        b_n: c.b_n,
        period: (c.boundary.periodic() && !matches!(grid, TimeGrid::Deterministic)).then_some(c.period),
        residual,
    })
}

/// Affordability of each ascending level: treatment from level `i` lands on
/// level `i − 1`.
fn live_levels(levels: &[f64], c: &EnvConfig) -> Vec<bool> {
    let floor = c.floor();
    levels.iter().map(|&z| z > floor + Z_TOL && z - c.cost >= floor - Z_TOL).collect()
}

type Solved = (Vec<f64>, Vec<Vec<f64>>, f64);

fn solve_deterministic<P: Policy + ?Sized>(env: &Environment, model: &RateModel, policy: &P, levels: &[f64]) -> Result<Solved> {
    let c = &env.config;
    let end = c.end_time();
    let mut times = vec![c.t0];
    let mut dts = Vec::new();
    loop {
        let t = *times.last().unwrap();
        let (dt, censored) = deterministic_dt(aggregate_rate(model, t), c.b_n, t, end);
        dts.push(dt);
        times.push(if censored { end } else { t + dt });
        if censored {
            break;
        }
        if times.len() > 10_000_000 {
            return Err(Error::TooLarge { needed: times.len() as f64, limit: 1e7 });
        }
    }
    let nt = times.len();
    let live = live_levels(levels, c);
    let down = |i: usize| if c.cost > 0.0 { i - 1 } else { i };
    let mut h = vec![vec![0.0; nt]; levels.len()];
    for i in 0..levels.len() {
        if !live[i] {
            continue;
        }
        for m in (0..nt - 1).rev() {
            let t_mix = if m == 0 { times[0] } else { times[m - 1] };
            let (r, p) = moments(&env.population, model, policy, levels[i], times[m], t_mix, c.b_n);
            let g = (-c.beta * dts[m]).exp();
            let hd = h[down(i)][m + 1];
            let hs = h[i][m + 1];
            h[i][m] = r + g * (p * hd + (1.0 - p) * hs);
        }
    }
    Ok((times, h, 0.0))
}

/// `∫₀^D e^{−κu} du` and `∫₀^D u e^{−κu} du`.
fn exp_moments(kappa: f64, d: f64) -> (f64, f64) {
    let x = kappa * d;
    if x < 1e-4 {
        let i0 = d * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0);
        let i1 = d * d * (0.5 - x / 3.0 + x * x / 8.0 - x * x * x / 30.0);
        (i0, i1)
    } else {
        let e = (-x).exp();
        let i0 = -(-x).exp_m1() / kappa;
        let i1 = (1.0 - e * (1.0 + x)) / (kappa * kappa);
        (i0, i1)
    }
}

/// Weights `w_j` such that `E[e^{−βΔ} f(t + Δ)] = Σ_j w_j f(t_j)` for `f`
/// linear between nodes, `Δ ~ Exp(rate)` and `f = 0` past the last node
/// (the censoring atom carries value 0). Offsets are `(node_a, s_a, node_b,
/// s_b)` per interval, measured from `t`.
fn kernel(rate: f64, beta: f64, offsets: impl Iterator<Item = (usize, f64, usize, f64)>) -> Vec<(usize, f64)> {
    let kappa = rate + beta;
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (ja, sa, jb, sb) in offsets {
        if kappa * sa > 60.0 {
            break;
        }
        let scale = rate * (-kappa * sa).exp();
        let d = sb - sa;
        let (i0, i1) = exp_moments(kappa, d);
        let wa = scale * (i0 - i1 / d);
        let wb = scale * i1 / d;
        out.push((ja, wa));
        out.push((jb, wb));
    }
    out
}

fn solve_dirichlet<P: Policy + ?Sized>(env: &Environment, model: &RateModel, policy: &P, levels: &[f64], m: usize, horizon: f64) -> Result<Solved> {
    let c = &env.config;
    let times: Vec<f64> = (0..=m).map(|j| c.t0 + (horizon - c.t0) * j as f64 / m as f64).collect();
    let live = live_levels(levels, c);
    let down = |i: usize| if c.cost > 0.0 { i - 1 } else { i };
    let kernels: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|j| {
            let rate = aggregate_rate(model, times[j]) * c.b_n;
            let offs = (j..m).map(|q| (q, times[q] - times[j], q + 1, times[q + 1] - times[j]));
            kernel(rate, c.beta, offs)
        })
        .collect();
    let mom: Vec<Vec<(f64, f64)>> = levels
        .iter()
        .map(|&z| (0..m).map(|j| moments(&env.population, model, policy, z, times[j], times[j], c.b_n)).collect())
        .collect();
    let mut h = vec![vec![0.0; m + 1]; levels.len()];
    let mut residual = 0.0_f64;
    for i in 0..levels.len() {
        if !live[i] {
            continue;
        }
        let di = down(i);
        for j in (0..m).rev() {
            let (r, p) = mom[i][j];
            let (mut ed, mut es, mut self_w) = (0.0, 0.0, 0.0);
            for &(q, w) in &kernels[j] {
                ed += w * if di == i { 0.0 } else { h[di][q] };
                if q == j {
                    self_w += w;
                } else {
                    es += w * h[i][q];
                }
            }
            let v = if di == i {
                (r + es) / (1.0 - self_w)
            } else {
                (r + p * ed + (1.0 - p) * es) / (1.0 - (1.0 - p) * self_w)
            };
            h[i][j] = v;
        }
        for j in 0..m {
            let (r, p) = mom[i][j];
            let (mut ed, mut es) = (0.0, 0.0);
            for &(q, w) in &kernels[j] {
                ed += w * h[di][q];
                es += w * h[i][q];
            }
            let rhs = if di == i { r + es } else { r + p * ed + (1.0 - p) * es };
            residual = residual.max((rhs - h[i][j]).abs());
        }
    }
    Ok((times, h, residual))
}

fn solve_periodic<P: Policy + ?Sized>(env: &Environment, model: &RateModel, policy: &P, levels: &[f64], m: usize) -> Result<Solved> {
    let c = &env.config;
    if !(c.beta > 0.0) {
        return Err(invalid("periodic solver needs beta > 0"));
    }
    let step = c.period / m as f64;
    let times: Vec<f64> = (0..m).map(|j| c.t0 + step * j as f64).collect();
    let live = live_levels(levels, c);
    let down = |i: usize| if c.cost > 0.0 { i - 1 } else { i };
    let kernels: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|j| {
            let rate = aggregate_rate(model, times[j]) * c.b_n;
            let offs = (0..).map(move |q: usize| ((j + q) % m, q as f64 * step, (j + q + 1) % m, (q + 1) as f64 * step));
            kernel(rate, c.beta, offs)
        })
        .collect();
    let mut h = vec![vec![0.0; m]; levels.len()];
    let mut residual = 0.0_f64;
    for i in 0..levels.len() {
        if !live[i] {
            continue;
        }
        let di = down(i);
        let mut a = DMatrix::<f64>::identity(m, m);
        let mut b = DVector::<f64>::zeros(m);
        let mut mom = Vec::with_capacity(m);
        for j in 0..m {
            let (r, p) = moments(&env.population, model, policy, levels[i], times[j], times[j], c.b_n);
            mom.push((r, p));
            let stay = if di == i { 1.0 } else { 1.0 - p };
            let mut ed = 0.0;
            for &(q, w) in &kernels[j] {
                a[(j, q)] -= stay * w;
                if di != i {
                    ed += w * h[di][q];
                }
            }
            b[j] = r + if di == i { 0.0 } else { p * ed };
        }
        let sol = a.lu().solve(&b).ok_or_else(|| Error::Convergence { what: "periodic level solve".into(), iterations: 0, residual: f64::NAN })?;
        h[i] = sol.iter().cloned().collect();
        for j in 0..m {
            let (r, p) = mom[j];
            let (mut ed, mut es) = (0.0, 0.0);
            for &(q, w) in &kernels[j] {
                ed += w * h[di][q];
                es += w * h[i][q];
            }
            let rhs = if di == i { r + es } else { r + p * ed + (1.0 - p) * es };
            residual = residual.max((rhs - h[i][j]).abs());
        }
    }
    Ok((times, h, residual))
}

/// Covariate type of a [`TinyInstance`]; all types are equally likely.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyType {
    pub x: Vec<f64>,
    pub reward: f64,
}

/// Small lattice problem for exhaustive enumeration: arrivals at
/// `t_j = j/b_n` for `j < epochs`, a budget floor of 0 and a constant cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub types: Vec<TinyType>,
    pub b_n: f64,
    pub beta: f64,
    pub cost: f64,
    pub z0: f64,
    pub epochs: usize,
}

/// Enumeration cap for [`brute_force_welfare`].
pub const MAX_BRANCHES: f64 = 1e8;

impl TinyInstance {
    /// The same problem as a deterministic-interarrival environment.
    pub fn environment(&self) -> Result<Environment> {
        let d = self.types[0].x.len();
        let x: Vec<f64> = self.types.iter().flat_map(|t| t.x.iter().cloned()).collect();
        let r = self.types.iter().map(|t| t.reward).collect();
        let pop = Population::single(x, d, crate::reward::RewardTable::new(r))?;
        let mut cfg = EnvConfig::dirichlet(self.z0, self.epochs as f64 / self.b_n, self.beta, self.b_n, self.cost);
        cfg.interarrival = Interarrival::Deterministic;
        Environment::new(cfg, pop, crate::arrivals::ForecastEnsemble::single(RateModel::constant(1)))
    }

    pub fn branches(&self) -> f64 {
        (2.0 * self.types.len() as f64).powi(self.epochs as i32)
    }
}

/// Exact expected welfare by enumerating every sequence of arrival types and
/// actions.
pub fn brute_force_welfare<P: Policy + ?Sized>(policy: &P, inst: &TinyInstance) -> Result<f64> {
    if inst.types.is_empty() || inst.epochs == 0 {
        return Ok(0.0);
    }
    let needed = inst.branches();
    if needed > MAX_BRANCHES {
        return Err(Error::TooLarge { needed, limit: MAX_BRANCHES });
    }
    fn walk<P: Policy + ?Sized>(policy: &P, inst: &TinyInstance, epoch: usize, z: f64) -> f64 {
        if epoch == inst.epochs || z <= Z_TOL {
            return 0.0;
        }
        let t = epoch as f64 / inst.b_n;
        let disc = (-inst.beta * t).exp();
        let w = 1.0 / inst.types.len() as f64;
        let mut total = 0.0;
        for ty in &inst.types {
            let p1 = policy.prob(&ty.x, z, t);
            let can = z - inst.cost >= -Z_TOL;
            let mut z_after = z - inst.cost;
            if z_after <= Z_TOL {
                z_after = 0.0;
            }
            let treated = if can { disc * ty.reward / inst.b_n + walk(policy, inst, epoch + 1, z_after) } else { walk(policy, inst, epoch + 1, z) };
            let skipped = walk(policy, inst, epoch + 1, z);
            total += w * (p1 * treated + (1.0 - p1) * skipped);
        }
        total
    }
    Ok(walk(policy, inst, 0, inst.z0))
}

/// Central finite-difference gradient of `f` at `theta`.
pub fn policy_grad_fd(theta: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    let mut th = theta.to_vec();
    let mut g = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        th[j] = theta[j] + eps;
        let up = f(&th)?;
        th[j] = theta[j] - eps;
        let dn = f(&th)?;
        th[j] = theta[j];
        g.push((up - dn) / (2.0 * eps));
    }
    Ok(g)
}

/// `h̃_θ(z0, t0)` for a logistic policy, using the given grid.
pub fn value_at_start(env: &Environment, params: &PolicyParams, grid: TimeGrid) -> Result<f64> {
    let g = solve_dp_value(env, params, &params.theta, grid)?;
    Ok(g.value_at(env.config.z0, env.config.t0))
}

/// TD(0) fixed point of a linear value approximation for a frozen policy in
/// the deterministic-interarrival environment, by direct linear solve.
///
/// Solves `Σ_s d(s)·φ(s)·(φ(s) − E[γφ(s′)])ᵀν = Σ_s d(s)·φ(s)·E[R]`, where
/// `d` is the expected number of visits per episode started at `(z0, t0)`
/// and terminal successors contribute no bootstrap.
pub fn td_fixed_point<P: Policy + ?Sized>(env: &Environment, policy: &P, basis: &BasisSpec) -> Result<ValueWeights> {
    let model = check_solvable(env)?;
    let c = &env.config;
    let mut levels = budget_levels(c)?;
    levels.reverse();
    let live = live_levels(&levels, c);
    let top = levels.len() - 1;
    let end = c.end_time();
    let k = basis.dim();
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut b = DVector::<f64>::zeros(k);
    let mut mass = vec![0.0; levels.len()];
    mass[top] = 1.0;
    let (mut t, mut t_prev) = (c.t0, c.t0);
    let mut phi = vec![0.0; k];
    let mut phi_same = vec![0.0; k];
    let mut phi_down = vec![0.0; k];
    loop {
        let (dt, censored) = deterministic_dt(aggregate_rate(model, t), c.b_n, t, end);
        let t_next = if censored { end } else { t + dt };
        let g = (-c.beta * dt).exp();
        let natural_end = c.horizon.is_some_and(|h| t_next >= h);
        let mut next_mass = vec![0.0; levels.len()];
        for i in 0..levels.len() {
            let d = mass[i];
            if d == 0.0 {
                continue;
            }
            let z = levels[i];
            let (r, p) = if live[i] { moments(&env.population, model, policy, z, t, t_prev, c.b_n) } else { (0.0, 0.0) };
            let di = if live[i] && c.cost > 0.0 { i - 1 } else { i };
            let down_terminal = levels[di] <= c.floor() + Z_TOL;
            basis.eval_into(z, t, &mut phi);
            basis.eval_into(z, t_next, &mut phi_same);
            basis.eval_into(levels[di], t_next, &mut phi_down);
            let boot_same = if natural_end { 0.0 } else { g };
            let boot_down = if natural_end || down_terminal { 0.0 } else { g };
            for u in 0..k {
                b[u] += d * phi[u] * r;
                for v in 0..k {
                    let next = (1.0 - p) * boot_same * phi_same[v] + p * boot_down * phi_down[v];
                    a[(u, v)] += d * phi[u] * (phi[v] - next);
                }
            }
            if !natural_end && !censored {
                next_mass[i] += d * (1.0 - p);
                if !down_terminal {
                    next_mass[di] += d * p;
                }
            }
        }
        if censored {
            break;
        }
        mass = next_mass;
        t_prev = t;
        t = t_next;
    }
    let nu = a
        .clone()
        .lu()
        .solve(&b)
        .or_else(|| {
            let mut r = a.clone();
            for u in 0..k {
                r[(u, u)] += 1e-12;
            }
            r.lu().solve(&b)
        })
        .ok_or_else(|| invalid("TD system is singular"))?;
    ValueWeights::new(basis.clone(), nu.iter().cloned().collect())
}
