//! Simulated allocation environment: budget law of motion, arrivals,
//! rewards and boundary handling.

use std::path::Path;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::arrivals::{aggregate_rate, arrival_from_draws, Arrival, ForecastEnsemble, RateModel};
use crate::error::{invalid, Error, Result};
use crate::policy::Policy;
use crate::reward::RewardTable;

/// Tolerance used when comparing the budget against its floor.
pub const Z_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Dirichlet,
    Periodic,
    Neumann,
    PeriodicNeumann,
}

impl Boundary {
    /// Regimes in which reaching the floor ends the episode.
    pub fn absorbing(self) -> bool {
        matches!(self, Boundary::Dirichlet | Boundary::Periodic)
    }

    pub fn reflecting(self) -> bool {
        !self.absorbing()
    }

    pub fn periodic(self) -> bool {
        matches!(self, Boundary::Periodic | Boundary::PeriodicNeumann)
    }
}

/// How the time between arrivals is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interarrival {
    /// `min(ω/(λ(t)·b_n), T − t)` with `ω ~ Exp(1)`.
    #[default]
    Exponential,
    /// The mean `1/(λ(t)·b_n)`, censored at `T`.
    Deterministic,
}

fn default_z_lower() -> Option<f64> {
    Some(0.0)
}
fn one() -> f64 {
    1.0
}
fn twenty() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub boundary: Boundary,
    pub z0: f64,
    #[serde(default)]
    pub t0: f64,
    /// Horizon `T`; `None` for the periodic regimes.
    pub horizon: Option<f64>,
    #[serde(default = "default_z_lower")]
    pub z_lower: Option<f64>,
    pub beta: f64,
    pub b_n: f64,
    /// Budget drained by one delivered treatment.
    pub cost: f64,
    /// Optional covariate slopes: `c(x) = max(cost + slopesᵀx, 0)`.
    #[serde(default)]
    pub cost_slopes: Vec<f64>,
    /// Income flow `ρ` per unit time.
    #[serde(default)]
    pub income: f64,
    /// Interest rate `b` on the balance.
    #[serde(default)]
    pub interest: f64,
    /// Boundary flow `σ̄` at the floor under the reflecting regimes.
    #[serde(default)]
    pub boundary_flow: f64,
    #[serde(default = "one")]
    pub period: f64,
    #[serde(default)]
    pub interarrival: Interarrival,
    /// Episodes without a horizon stop after this many periods.
    #[serde(default = "twenty")]
    pub max_periods: f64,
}

impl EnvConfig {
    /// Finite-horizon budget problem with no income and floor 0.
    pub fn dirichlet(z0: f64, horizon: f64, beta: f64, b_n: f64, cost: f64) -> Self {
        EnvConfig {
            boundary: Boundary::Dirichlet,
            z0,
            t0: 0.0,
            horizon: Some(horizon),
            z_lower: Some(0.0),
            beta,
            b_n,
            cost,
            cost_slopes: Vec::new(),
            income: 0.0,
            interest: 0.0,
            boundary_flow: 0.0,
            period: 1.0,
            interarrival: Interarrival::Exponential,
            max_periods: 20.0,
        }
    }

    pub fn floor(&self) -> f64 {
        self.z_lower.unwrap_or(f64::NEG_INFINITY)
    }

    /// Time at which an episode stops: `T` or the truncation point.
    pub fn end_time(&self) -> f64 {
        self.horizon.unwrap_or(self.t0 + self.max_periods * self.period)
    }

    pub fn validate(&self) -> Result<()> {
        let fin = |v: f64, name: &str| if v.is_finite() { Ok(()) } else { Err(invalid(format!("{name} must be finite"))) };
        for (v, n) in [(self.z0, "z0"), (self.t0, "t0"), (self.beta, "beta"), (self.cost, "cost"), (self.income, "income"), (self.interest, "interest"), (self.boundary_flow, "boundary_flow")] {
            fin(v, n)?;
        }
        if !(self.b_n >= 1.0 && self.b_n.is_finite()) {
            return Err(invalid("b_n must be at least 1"));
        }
        if self.cost < 0.0 {
            return Err(invalid("cost must be nonnegative"));
        }
        if !(self.period > 0.0) || !(self.max_periods > 0.0) {
            return Err(invalid("period and max_periods must be positive"));
        }
        if let Some(zl) = self.z_lower {
            fin(zl, "z_lower")?;
            if self.z0 < zl {
                return Err(invalid("z0 lies below z_lower"));
            }
        }
        if let Some(h) = self.horizon {
            fin(h, "horizon")?;
            if h <= self.t0 {
                return Err(invalid("horizon must exceed t0"));
            }
        }
        match self.boundary {
            Boundary::Dirichlet => {
                if self.horizon.is_none() && self.z_lower.is_none() {
                    return Err(invalid("dirichlet needs a finite horizon or a finite z_lower"));
                }
            }
            Boundary::Periodic | Boundary::PeriodicNeumann => {
                if !(self.beta > 0.0) {
                    return Err(invalid("periodic regimes need beta > 0"));
                }
                if self.horizon.is_some() {
                    return Err(invalid("periodic regimes have no horizon"));
                }
            }
            Boundary::Neumann => {}
        }
        if self.boundary.reflecting() {
            if self.z_lower.is_none() {
                return Err(invalid("reflecting regimes need a finite z_lower"));
            }
            if !(self.boundary_flow > 0.0) {
                return Err(invalid("reflecting regimes need boundary_flow > 0"));
            }
        }
        Ok(())
    }

    /// Truncation error bound `e^{−β(T_end − t0)}·sup|r̂|/β` for episodes
    /// cut off before a natural end; `None` when a horizon exists.
    pub fn truncation_bound(&self, sup_reward: f64) -> Option<f64> {
        if self.horizon.is_some() {
            return None;
        }
        Some((-self.beta * self.max_periods * self.period).exp() * sup_reward / self.beta)
    }
}

/// Rows available to arrive, with their rewards and cluster membership.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub x: Vec<f64>,
    pub d: usize,
    pub rewards: RewardTable,
    /// Row indices per arrival cluster.
    pub members: Vec<Vec<usize>>,
}

impl Population {
    pub fn new(x: Vec<f64>, d: usize, rewards: RewardTable, members: Vec<Vec<usize>>) -> Result<Self> {
        let n = rewards.len();
        if n == 0 || x.len() != n * d {
            return Err(invalid("population needs one covariate row per reward"));
        }
        if members.is_empty() || members.iter().any(|m| m.is_empty()) {
            return Err(invalid("every cluster needs at least one row"));
        }
        if members.iter().flatten().any(|&i| i >= n) {
            return Err(invalid("cluster member index out of range"));
        }
        Ok(Population { x, d, rewards, members })
    }

    /// All rows in one cluster.
    pub fn single(x: Vec<f64>, d: usize, rewards: RewardTable) -> Result<Self> {
        let n = rewards.len();
        Self::new(x, d, rewards, vec![(0..n).collect()])
    }

    pub fn n(&self) -> usize {
        self.rewards.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }
}

/// Decision point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    /// Population row of the current arrival.
    pub row: usize,
    pub z: f64,
    pub t: f64,
    /// Discount accumulator `e^{−β(t − t_start)}`.
    pub discount: f64,
    pub forecast: usize,
    pub t_start: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: State,
    /// Action chosen by the policy.
    pub requested: bool,
    /// Treatment actually delivered after coercion and compliance.
    pub action: bool,
    /// Scaled reward `r/b_n`.
    pub reward: f64,
    pub next: State,
    pub dt: f64,
    pub terminal: bool,
    /// Episode stopped at the truncation point without a natural end.
    pub truncated: bool,
    pub cluster: usize,
}

impl Transition {
    /// The next state should be bootstrapped in a TD target.
    pub fn bootstrap(&self) -> bool {
        !self.terminal
    }

    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// Uniforms and exponentials consumed by one step, always drawn in the same
/// order so that two policies see common random numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDraws {
    pub u_action: f64,
    pub u_comply: f64,
    pub exp1: f64,
    pub u_cluster: f64,
    pub u_row: f64,
}

impl StepDraws {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u_action = rng.random();
        let u_comply = rng.random();
        let exp1 = rng.sample(Exp1);
        let u_cluster = rng.random();
        let u_row = rng.random();
        StepDraws { u_action, u_comply, exp1, u_cluster, u_row }
    }
}

/// Environment inputs shared read-only by all workers.
#[derive(Debug, Clone)]
pub struct Environment {
    pub config: EnvConfig,
    pub population: Population,
    pub forecasts: ForecastEnsemble,
}

fn uniform_index(u: f64, n: usize) -> usize {
    ((u * n as f64) as usize).min(n - 1)
}

impl Environment {
    pub fn new(config: EnvConfig, population: Population, forecasts: ForecastEnsemble) -> Result<Self> {
        config.validate()?;
        for m in &forecasts.members {
            m.validate()?;
            if m.k() != population.k() {
                return Err(invalid(format!("rate model has {} clusters, population has {}", m.k(), population.k())));
            }
        }
        if !config.cost_slopes.is_empty() && config.cost_slopes.len() != population.d {
            return Err(invalid("cost_slopes must match the covariate dimension"));
        }
        Ok(Environment { config, population, forecasts })
    }

    pub fn rate_model(&self, s: &State) -> &RateModel {
        &self.forecasts.members[s.forecast]
    }

    #[inline]
    pub fn x(&self, s: &State) -> &[f64] {
        self.population.row(s.row)
    }

    pub fn cost_of(&self, row: usize) -> f64 {
        let c = &self.config;
        if c.cost_slopes.is_empty() {
            return c.cost;
        }
        let x = self.population.row(row);
        (c.cost + c.cost_slopes.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
    }

    fn draw_row(&self, model: &RateModel, t: f64, u_cluster: f64, u_row: f64) -> usize {
        let c = arrival_from_draws(model, t, 1.0, None, 0.0, u_cluster).cluster;
        let m = &self.population.members[c];
        m[uniform_index(u_row, m.len())]
    }

    /// Start an episode at `(z0, t0)` with an arrival at `t0`.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        self.reset_at(self.config.z0, self.config.t0, rng)
    }

    /// Start an episode at an arbitrary `(z, t)` with an arrival there.
    pub fn reset_at<R: Rng + ?Sized>(&self, z: f64, t: f64, rng: &mut R) -> State {
        let forecast = self.forecasts.draw(rng);
        let (uc, ur) = (rng.random(), rng.random());
        let row = self.draw_row(&self.forecasts.members[forecast], t, uc, ur);
        State { row, z, t, discount: 1.0, forecast, t_start: t }
    }

    /// Episode over at this state.
    pub fn is_terminal(&self, s: &State) -> bool {
        is_terminal(s, &self.config)
    }

    /// Advance one arrival with a fresh set of draws.
    pub fn step<R: Rng + ?Sized>(&self, s: &State, action: bool, rng: &mut R) -> Result<Transition> {
        let d = StepDraws::draw(rng);
        self.step_with(s, action, &d)
    }

    /// Advance one arrival using pre-drawn randomness.
    pub fn step_with(&self, s: &State, requested: bool, d: &StepDraws) -> Result<Transition> {
        let c = &self.config;
        if self.is_terminal(s) {
            return Err(invalid(format!("step from terminal state z={} t={}", s.z, s.t)));
        }
        let floor = c.floor();
        let model = self.rate_model(s);
        let lam = aggregate_rate(model, s.t);
        let cost = self.cost_of(s.row);
        let at_floor = c.boundary.reflecting() && s.z <= floor + Z_TOL;

        let mut reward_r = 0.0;
        let mut action = false;
        if !at_floor {
            let rt = &self.population.rewards;
            let (delivered, r) = match &rt.compliance {
                None => (requested, if requested { rt.r_hat[s.row] } else { 0.0 }),
                Some(comp) => {
                    let q = &comp[s.row];
                    if d.u_comply < q.q_c {
                        (requested, if requested { q.late } else { 0.0 })
                    } else if d.u_comply < q.q_c + q.q_a {
                        (true, 0.0)
                    } else {
                        (false, 0.0)
                    }
                }
            };
            let affordable = !c.boundary.absorbing() || s.z - cost >= floor - Z_TOL;
            if delivered && affordable {
                action = true;
                reward_r = r;
            }
        }

        let end = c.end_time();
        let horizon = Some(end);
        let arr = match c.interarrival {
            Interarrival::Exponential => arrival_from_draws(model, s.t, c.b_n, horizon, d.exp1, d.u_cluster),
            Interarrival::Deterministic => {
                let cluster = arrival_from_draws(model, s.t, c.b_n, None, 0.0, d.u_cluster).cluster;
                let (dt, censored) = deterministic_dt(lam, c.b_n, s.t, end);
                Arrival { dt, cluster, censored }
            }
        };

        let z_next = if at_floor {
            floor + c.boundary_flow / (lam * c.b_n)
        } else {
            let mut z = s.z + (c.income + c.interest * s.z) / (lam * c.b_n);
            if action {
                z -= cost;
            }
            if z <= floor + Z_TOL {
                z = floor;
            }
            z
        };
        let t_next = if arr.censored { end } else { s.t + arr.dt };
        let disc = s.discount * (-c.beta * arr.dt).exp();
        let row = self.population.members[arr.cluster][uniform_index(d.u_row, self.population.members[arr.cluster].len())];
        let next = State { row, z: z_next, t: t_next, discount: disc, forecast: s.forecast, t_start: s.t_start };
        if !z_next.is_finite() || !disc.is_finite() {
            return Err(Error::NonFinite(format!("state after step from z={} t={}", s.z, s.t)));
        }
        let natural_end = c.horizon.is_some_and(|h| t_next >= h) || (c.boundary.absorbing() && z_next <= floor);
        let truncated = !natural_end && t_next >= end;
        Ok(Transition {
            state: *s,
            requested,
            action,
            reward: reward_r / c.b_n,
            next,
            dt: arr.dt,
            terminal: natural_end,
            truncated,
            cluster: arr.cluster,
        })
    }
}

/// Mean interarrival time `1/(λ·b_n)` censored at `end`. A remainder within
/// rounding of the step is absorbed so that lattices land exactly on `end`.
pub fn deterministic_dt(lam: f64, b_n: f64, t: f64, end: f64) -> (f64, bool) {
    let raw = 1.0 / (lam * b_n);
    if raw >= end - t - 1e-12 * end.abs().max(1.0) {
        (end - t, true)
    } else {
        (raw, false)
    }
}

/// Terminal under the configured regime: `t ≥ T`, or the floor is reached
/// in an absorbing regime. Truncation of horizonless episodes is reported on
/// the transition, not here.
pub fn is_terminal(s: &State, c: &EnvConfig) -> bool {
    if c.horizon.is_some_and(|h| s.t >= h) {
        return true;
    }
    c.boundary.absorbing() && c.z_lower.is_some_and(|zl| s.z <= zl)
}

/// `Σ_i I_i · reward_i`, with `I_i = e^{−β(t_i − t0)}`.
pub fn episode_welfare(trajectory: &[Transition], beta: f64, t0: f64) -> f64 {
    trajectory.iter().map(|tr| (-beta * (tr.state.t - t0)).exp() * tr.reward).sum()
}

/// Summary of one simulated episode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeStats {
    pub welfare: f64,
    pub steps: u64,
    pub treatments: u64,
    pub final_z: f64,
    pub final_t: f64,
    /// Episode ended because the budget hit its floor.
    pub exhausted: bool,
}

/// Run one episode under a frozen policy. When `log` is given every
/// transition is appended to it.
pub fn run_episode<P: Policy + ?Sized, R: Rng + ?Sized>(env: &Environment, policy: &P, rng: &mut R, mut log: Option<&mut Vec<Transition>>) -> Result<EpisodeStats> {
    let mut s = env.reset(rng);
    let mut st = EpisodeStats { final_z: s.z, final_t: s.t, ..Default::default() };
    if env.is_terminal(&s) {
        st.exhausted = true;
        return Ok(st);
    }
    loop {
        let d = StepDraws::draw(rng);
        let p = policy.prob(env.x(&s), s.z, s.t);
        let tr = env.step_with(&s, d.u_action < p, &d)?;
        st.welfare += s.discount * tr.reward;
        st.steps += 1;
        st.treatments += u64::from(tr.action);
        if let Some(l) = log.as_deref_mut() {
            l.push(tr);
        }
        s = tr.next;
        if tr.done() {
            st.final_z = s.z;
            st.final_t = s.t;
            st.exhausted = env.config.boundary.absorbing() && env.config.z_lower.is_some_and(|zl| s.z <= zl);
            return Ok(st);
        }
    }
}

/// Write a trajectory as CSV with columns `t, z, cluster, action, reward, I`.
pub fn write_trajectory(path: impl AsRef<Path>, trajectory: &[Transition]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "z", "cluster", "action", "reward", "I"])?;
    for tr in trajectory {
        w.write_record([
            tr.state.t.to_string(),
            tr.state.z.to_string(),
            (tr.cluster + 1).to_string(),
            u8::from(tr.action).to_string(),
            tr.reward.to_string(),
            tr.state.discount.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
