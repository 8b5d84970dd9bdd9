//! Decision-time learning: rewards and the value function are re-estimated
//! from all past observations before every real decision, while the policy
//! moves one gradient step per real arrival.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor_critic::Schedule;
use crate::arrivals::{ForecastEnsemble, RateModel};
use crate::env::{EnvConfig, Environment, Population, StepDraws};
use crate::error::{invalid, Result};
use crate::linalg::ols;
use crate::policy::{Policy, PolicyParams};
use crate::reward::{dr_score, RewardTable};
use crate::rng::{substream, Rng as StreamRng};
use crate::value::{td_error, ValueWeights};

/// Rows needed before rewards are estimated; earlier arrivals get `π = 0.5`.
pub const MIN_HISTORY: usize = 20;

/// Bounds applied to recorded propensities inside the reward formula.
const PROPENSITY_CLAMP: (f64, f64) = (0.01, 0.99);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    /// Dynamics used for the simulated TD sweeps.
    pub env: EnvConfig,
    /// Arrival forecast; a single cluster.
    pub forecast: RateModel,
    pub alpha_theta: f64,
    #[serde(default)]
    pub schedule_theta: Schedule,
    /// Value step size for the first sweep; sweep `k` uses `α_ν/(k+1)`.
    pub alpha_v: f64,
    pub episodes_per_sweep: usize,
    pub max_sweeps: usize,
    /// Sweeps stop once `max|Δν|` over a sweep falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl OnlineConfig {
    pub fn new(env: EnvConfig, alpha_theta: f64, alpha_v: f64, seed: u64) -> Self {
        OnlineConfig {
            env,
            forecast: RateModel::constant(1),
            alpha_theta,
            schedule_theta: Schedule::Constant,
            alpha_v,
            episodes_per_sweep: 10,
            max_sweeps: 50,
            tolerance: 1e-4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.forecast.validate()?;
        if self.forecast.k() != 1 {
            return Err(invalid("online learning supports a single-cluster forecast"));
        }
        if !(self.alpha_theta >= 0.0) || !(self.alpha_v >= 0.0) {
            return Err(invalid("learning rates must be nonnegative"));
        }
        if self.episodes_per_sweep == 0 || self.max_sweeps == 0 || !(self.tolerance > 0.0) {
            return Err(invalid("sweep settings must be positive"));
        }
        Ok(())
    }
}

/// One past arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub x: Vec<f64>,
    pub treated: bool,
    pub y: f64,
    /// `π_{θ_i}(1|S_i)` when the action was drawn.
    pub propensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    z: f64,
    t: f64,
    discount: f64,
    treated: bool,
    /// Index of the arrival in the history.
    row: usize,
    /// Policy parameters were still frozen by the cold-start rule.
    cold: bool,
}

/// What happened after the pending decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NextState {
    /// Next arrival at `(z, t)` inside the domain.
    At { z: f64, t: f64 },
    /// The episode ended.
    Terminal { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub treat: bool,
    pub prob: f64,
    /// Sweeps used to re-estimate the value function; 0 when skipped.
    pub sweeps: usize,
    pub converged: bool,
}

/// Decision-time actor-critic learner.
#[derive(Debug, Clone)]
pub struct OnlineLearner {
    pub config: OnlineConfig,
    pub params: PolicyParams,
    pub weights: ValueWeights,
    pub history: Vec<HistoryRow>,
    pending: Option<(Pending, Option<NextState>)>,
    last_x: Option<(Vec<f64>, f64)>,
    updates: u64,
    rng: StreamRng,
}

impl OnlineLearner {
    pub fn new(config: OnlineConfig, params: PolicyParams, weights: ValueWeights) -> Result<Self> {
        config.validate()?;
        let rng = substream(config.seed, "online", 0);
        Ok(OnlineLearner { config, params, weights, history: Vec::new(), pending: None, last_x: None, updates: 0, rng })
    }

    /// Doubly-robust rewards of every history row, with per-arm OLS outcome
    /// models and the recorded propensities.
    pub fn history_rewards(&self) -> Vec<f64> {
        let (mut r1, mut y1, mut r0, mut y0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for h in &self.history {
            if h.treated {
                r1.push(h.x.as_slice());
                y1.push(h.y);
            } else {
                r0.push(h.x.as_slice());
                y0.push(h.y);
            }
        }
        let m1 = ols(&r1, &y1);
        let m0 = ols(&r0, &y0);
        self.history
            .iter()
            .map(|h| {
                let p = h.propensity.clamp(PROPENSITY_CLAMP.0, PROPENSITY_CLAMP.1);
                dr_score(m1.predict(&h.x), m0.predict(&h.x), h.treated, h.y, p)
            })
            .collect()
    }

    fn sample_env(&self, rewards: Vec<f64>) -> Result<Environment> {
        let d = self.history[0].x.len();
        let x: Vec<f64> = self.history.iter().flat_map(|h| h.x.iter().copied()).collect();
        let pop = Population::single(x, d, RewardTable::new(rewards))?;
        Environment::new(self.config.env.clone(), pop, ForecastEnsemble::single(self.config.forecast.clone()))
    }

    /// TD sweeps from `(z, t)` under the current policy, warm-started at the
    /// current weights. Returns `(sweeps, converged)`.
    fn reestimate(&mut self, env: &Environment, z: f64, t: f64) -> Result<(usize, bool)> {
        let mut phi = vec![0.0; self.weights.nu.len()];
        for k in 0..self.config.max_sweeps {
            let before = self.weights.nu.clone();
            let alpha = self.config.alpha_v / (k + 1) as f64;
            for _ in 0..self.config.episodes_per_sweep {
                let mut s = env.reset_at(z, t, &mut self.rng);
                while !env.is_terminal(&s) {
                    let d = StepDraws::draw(&mut self.rng);
                    let p = self.params.prob(env.x(&s), s.z, s.t);
                    let tr = env.step_with(&s, d.u_action < p, &d)?;
                    let n = &tr.next;
                    let delta = td_error(tr.reward, env.config.beta, tr.dt, tr.bootstrap(), &self.weights, s.z, s.t, n.z, n.t);
                    self.weights.basis_spec.eval_into(s.z, s.t, &mut phi);
                    for (v, f) in self.weights.nu.iter_mut().zip(&phi) {
                        *v += alpha * delta * f;
                    }
                    s = tr.next;
                    if tr.done() {
                        break;
                    }
                }
            }
            if self.weights.nu.iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::NonFinite("value weights during decision-time sweeps".into()));
            }
            let change = self.weights.nu.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if change < self.config.tolerance {
                return Ok((k + 1, true));
            }
        }
        Ok((self.config.max_sweeps, false))
    }

    /// Choose an action for an arrival with covariates `x` at `(z, t)`.
    /// `discount` is `e^{−β(t − t_start)}` for the current episode.
    pub fn decide(&mut self, x: &[f64], z: f64, t: f64, discount: f64) -> Result<Decision> {
        if self.pending.as_ref().is_some_and(|p| p.1.is_none()) {
            return Err(invalid("record_outcome must follow each decision"));
        }
        let mut sweeps = 0;
        let mut converged = false;
        let prob = if self.history.len() < MIN_HISTORY {
            0.5
        } else {
            let rewards = self.history_rewards();
            let env = self.sample_env(rewards.clone())?;
            (sweeps, converged) = self.reestimate(&env, z, t)?;
            if let Some((p, Some(next))) = self.pending.take() {
                if !p.cold {
                    self.policy_step(&p, next, rewards[p.row], &env)?;
                }
            }
            self.params.prob(x, z, t)
        };
        let treat = self.rng.random::<f64>() < prob;
        self.pending = Some((
            Pending { z, t, discount, treated: treat, row: self.history.len(), cold: self.history.len() < MIN_HISTORY },
            None,
        ));
        self.last_x = Some((x.to_vec(), prob));
        Ok(Decision { treat, prob, sweeps, converged })
    }

    fn policy_step(&mut self, p: &Pending, next: NextState, r_hat: f64, env: &Environment) -> Result<()> {
        let c = &env.config;
        let x = &self.history[p.row].x;
        let reward = if p.treated { r_hat / c.b_n } else { 0.0 };
        let (in_domain, zn, tn) = match next {
            NextState::At { z, t } => (true, z, t),
            NextState::Terminal { t } => (false, p.z, t),
        };
        let delta = td_error(reward, c.beta, tn - p.t, in_domain, &self.weights, p.z, p.t, zn, tn);
        let alpha = self.config.schedule_theta.rate(self.config.alpha_theta, self.updates);
        let mut g = vec![0.0; self.params.theta.len()];
        self.params.log_grad_into(x, p.z, p.t, p.treated, &mut g);
        for (th, gi) in self.params.theta.iter_mut().zip(&g) {
            *th += alpha * p.discount * delta * gi;
        }
        self.updates += 1;
        if self.params.theta.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite("policy parameters after online update".into()));
        }
        Ok(())
    }

    /// Record the outcome of the last decision and where the process went.
    /// `treated` is the delivered action; when it differs from the drawn one
    /// (budget coercion) the row carries no valid propensity and is dropped.
    pub fn record_outcome(&mut self, y: f64, treated: bool, next: NextState) -> Result<()> {
        let Some((mut p, None)) = self.pending.take() else {
            return Err(invalid("record_outcome without a pending decision"));
        };
        let (x, prob) = self.last_x.take().ok_or_else(|| invalid("missing decision context"))?;
        if !y.is_finite() {
            return Err(invalid("outcome must be finite"));
        }
        if treated != p.treated {
            return Ok(());
        }
        self.history.push(HistoryRow { x, treated, y, propensity: prob });
        p.row = self.history.len() - 1;
        self.pending = Some((p, Some(next)));
        Ok(())
    }
}

/// Summary of [`run_online`].
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRun {
    /// Discounted true welfare of each completed episode.
    pub episode_welfare: Vec<f64>,
    pub steps: u64,
}

/// Drive a learner against a real environment for `steps` arrivals,
/// restarting episodes as they end. `outcome(row, treated, rng)` draws the
/// observed outcome; welfare uses the environment's own reward table.
pub fn run_online<R: Rng + ?Sized>(learner: &mut OnlineLearner, world: &Environment, mut outcome: impl FnMut(usize, bool, &mut R) -> f64, steps: u64, rng: &mut R) -> Result<OnlineRun> {
    let mut out = OnlineRun { episode_welfare: Vec::new(), steps: 0 };
    let mut s = world.reset(rng);
    let mut w = 0.0;
    while out.steps < steps {
        let x = world.x(&s).to_vec();
        let dec = learner.decide(&x, s.z, s.t, s.discount)?;
        let d = StepDraws::draw(rng);
        let tr = world.step_with(&s, dec.treat, &d)?;
        let y = outcome(s.row, tr.action, rng);
        w += s.discount * tr.reward;
        out.steps += 1;
        let next = if tr.done() { NextState::Terminal { t: tr.next.t } } else { NextState::At { z: tr.next.z, t: tr.next.t } };
        learner.record_outcome(y, tr.action, next)?;
        if tr.done() {
            out.episode_welfare.push(w);
            w = 0.0;
            s = world.reset(rng);
        } else {
            s = tr.next;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureSpec;
    use crate::rng::seeded;
    use crate::value::BasisSpec;

    fn learner(alpha_theta: f64) -> OnlineLearner {
        let cfg = OnlineConfig::new(EnvConfig::dirichlet(0.5, 1.0, 0.1, 10.0, 0.1), alpha_theta, 0.05, 4);
        OnlineLearner::new(cfg, PolicyParams::zeros(FeatureSpec::class_a(1)), ValueWeights::zeros(BasisSpec::appendix_e9())).unwrap()
    }

    #[test]
    fn cold_start() {
        let mut l = learner(1.0);
        let mut rng = seeded(1);
        for i in 0..19 {
            let x = [rng.random::<f64>()];
            let d = l.decide(&x, 0.5, i as f64 * 0.01, 1.0).unwrap();
            assert_eq!(d.prob, 0.5);
            assert_eq!(d.sweeps, 0);
            l.record_outcome(x[0], d.treat, NextState::At { z: 0.5, t: (i + 1) as f64 * 0.01 }).unwrap();
        }
        assert!(l.params.theta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_policy_still_reestimates() {
        let mut l = learner(0.0);
        let mut rng = seeded(2);
        let mut t = 0.0;
        for _ in 0..40 {
            let x = [rng.random::<f64>() * 2.0 - 1.0];
            let d = l.decide(&x, 0.5, t, 1.0).unwrap();
            if l.history.len() >= MIN_HISTORY {
                assert!(d.sweeps >= 1);
            }
            let y = if d.treat { 1.0 + x[0] } else { 0.0 } + 0.1 * rng.random::<f64>();
            t += 0.01;
            l.record_outcome(y, d.treat, NextState::At { z: 0.5, t }).unwrap();
        }
        assert!(l.params.theta.iter().all(|v| *v == 0.0));
        assert!(l.weights.nu.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn protocol_errors() {
        let mut l = learner(1.0);
        assert!(l.record_outcome(0.0, false, NextState::Terminal { t: 1.0 }).is_err());
        l.decide(&[0.0], 0.5, 0.0, 1.0).unwrap();
        assert!(l.decide(&[0.0], 0.5, 0.0, 1.0).is_err());
    }
}
