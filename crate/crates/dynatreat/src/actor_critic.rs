//! Actor-critic training: single worker, batched asynchronous workers and
//! decision-time online learning.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EpisodeStats, Environment, State, StepDraws, Transition};
use crate::error::{invalid, Error, Result};
use crate::eval::evaluate_welfare;
use crate::policy::{Policy, PolicyParams};
use crate::rng::{substream, Rng as WorkerRng};
use crate::value::{td_error, ValueWeights};

/// Learning-rate schedule, indexed by the global update count `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// `α·k/(k + n)`.
    Harmonic { k: f64 },
}

impl Schedule {
    pub fn rate(&self, base: f64, n: u64) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Harmonic { k } => base * k / (k + n as f64),
        }
    }
}

/// How workers share `(θ, ν)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// Each batch is applied under a lock; snapshots are consistent.
    #[default]
    LockPerBatch,
    /// Per-entry atomic adds with no ordering across entries.
    Hogwild,
    /// One thread runs the workers round-robin, one batch each; bitwise
    /// reproducible.
    SingleWriter,
}

fn default_threshold() -> f64 {
    1e6
}
fn default_eval_episodes() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha_theta: f64,
    pub alpha_v: f64,
    #[serde(default)]
    pub schedule_theta: Schedule,
    pub batch_size: usize,
    pub workers: usize,
    /// Stop after this many global batch updates.
    pub max_updates: u64,
    /// Optional cap on completed episodes across all workers.
    #[serde(default)]
    pub max_episodes: Option<u64>,
    /// Evaluate every this many updates; 0 disables the curve.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub seed: u64,
    /// Rescale each θ batch update to at most this norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub mode: SharingMode,
    /// `‖θ‖` above this counts as divergence.
    #[serde(default = "default_threshold")]
    pub divergence_threshold: f64,
    /// Record every step term and update (single-writer mode only).
    #[serde(default)]
    pub trace: bool,
}

impl TrainConfig {
    pub fn new(alpha_theta: f64, alpha_v: f64, batch_size: usize, workers: usize, max_updates: u64, seed: u64) -> Self {
        TrainConfig {
            alpha_theta,
            alpha_v,
            schedule_theta: Schedule::Constant,
            batch_size,
            workers,
            max_updates,
            max_episodes: None,
            eval_every: 0,
            eval_episodes: 500,
            seed,
            clip_norm: None,
            mode: SharingMode::LockPerBatch,
            divergence_threshold: 1e6,
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_theta >= 0.0 && self.alpha_theta.is_finite()) || !(self.alpha_v >= 0.0 && self.alpha_v.is_finite()) {
            return Err(invalid("learning rates must be finite and nonnegative"));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(invalid("batch_size and workers must be at least 1"));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(invalid("eval_episodes must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("clip_norm must be positive"));
            }
        }
        if let Schedule::Harmonic { k } = self.schedule_theta {
            if !(k > 0.0) {
                return Err(invalid("harmonic schedule needs k > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update_index: u64,
    pub episodes: u64,
    /// Welfare relative to the random 50% policy.
    pub mean_welfare: f64,
    pub ci_halfwidth: f64,
    pub absolute_welfare: f64,
    pub theta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainStatus {
    Completed,
    Diverged { update: u64, reason: String },
    WorkerFailed { message: String },
}

/// One step's contribution to a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub worker: usize,
    pub policy_term: Vec<f64>,
    pub value_term: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub worker: usize,
    pub steps: usize,
    pub theta_before: Vec<f64>,
    pub theta_after: Vec<f64>,
    pub nu_before: Vec<f64>,
    pub nu_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
    pub updates: Vec<UpdateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub params: PolicyParams,
    pub weights: ValueWeights,
    pub curve: Vec<CurvePoint>,
    pub config: TrainConfig,
    pub status: TrainStatus,
    pub updates: u64,
    pub episodes: u64,
    pub wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Trace>,
}

impl TrainedPolicy {
    /// Convert a non-completed status into the matching error.
    pub fn into_result(self) -> Result<TrainedPolicy> {
        match &self.status {
            TrainStatus::Completed => Ok(self),
            TrainStatus::Diverged { update, reason } => Err(Error::Divergence { update: *update, reason: reason.clone() }),
            TrainStatus::WorkerFailed { message } => Err(Error::Worker(message.clone())),
        }
    }
}

/// Result of one actor-critic step at a frozen `(θ, ν)`.
#[derive(Debug, Clone)]
pub struct StepTerms {
    pub transition: Transition,
    pub delta: f64,
}

/// Sample the action, advance the environment and compute the TD error.
/// `grad` receives `I·δ·∇ln π(a|s)` and `phi` receives `δ·φ(z, t)`, both
/// before learning rates.
pub fn ac_step(env: &Environment, params: &PolicyParams, weights: &ValueWeights, s: &State, draws: &StepDraws, grad: &mut [f64], phi: &mut [f64]) -> Result<StepTerms> {
    let x = env.x(s);
    let p = params.prob(x, s.z, s.t);
    let a = draws.u_action < p;
    let tr = env.step_with(s, a, draws)?;
    let n = &tr.next;
    let delta = td_error(tr.reward, env.config.beta, tr.dt, tr.bootstrap(), weights, s.z, s.t, n.z, n.t);
    if !delta.is_finite() {
        return Err(Error::NonFinite(format!("TD error at z={} t={} row={}", s.z, s.t, s.row)));
    }
    params.log_grad_into(x, s.z, s.t, a, grad);
    let w = s.discount * delta;
    for g in grad.iter_mut() {
        *g *= w;
    }
    weights.basis_spec.eval_into(s.z, s.t, phi);
    for v in phi.iter_mut() {
        *v *= delta;
    }
    Ok(StepTerms { transition: tr, delta })
}

fn check_params(theta: &[f64], nu: &[f64], threshold: f64) -> Option<String> {
    if theta.iter().chain(nu).any(|v| !v.is_finite()) {
        return Some("non-finite parameter".into());
    }
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > threshold).then(|| format!("theta norm {norm:.3e} exceeds {threshold:.1e}"))
}

/// One episode of actor-critic with an update after every step.
pub fn train_episode<R: Rng + ?Sized>(env: &Environment, params: &mut PolicyParams, weights: &mut ValueWeights, alpha_theta: f64, alpha_v: f64, rng: &mut R) -> Result<EpisodeStats> {
    let mut s = env.reset(rng);
    let mut st = EpisodeStats { final_z: s.z, final_t: s.t, ..Default::default() };
    if env.is_terminal(&s) {
        return Ok(st);
    }
    let mut grad = vec![0.0; params.theta.len()];
    let mut phi = vec![0.0; weights.nu.len()];
    loop {
        let d = StepDraws::draw(rng);
        let out = ac_step(env, params, weights, &s, &d, &mut grad, &mut phi)?;
        for (t, g) in params.theta.iter_mut().zip(&grad) {
            *t += alpha_theta * g;
        }
        for (v, p) in weights.nu.iter_mut().zip(&phi) {
            *v += alpha_v * p;
        }
        let tr = out.transition;
        st.welfare += s.discount * tr.reward;
        st.steps += 1;
        st.treatments += u64::from(tr.action);
        s = tr.next;
        if let Some(reason) = check_params(&params.theta, &weights.nu, f64::INFINITY) {
            return Err(Error::Divergence { update: st.steps, reason });
        }
        if tr.done() {
            st.final_z = s.z;
            st.final_t = s.t;
            st.exhausted = env.config.boundary.absorbing() && env.config.z_lower.is_some_and(|zl| s.z <= zl);
            return Ok(st);
        }
    }
}

/// Monte Carlo estimate of `E[I·δ·∇ln π(a|s)]` over `n_steps` on-policy
/// decision points with frozen `(θ, ν)`.
pub fn policy_gradient_estimate<R: Rng + ?Sized>(env: &Environment, params: &PolicyParams, weights: &ValueWeights, n_steps: u64, rng: &mut R) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(invalid("n_steps must be at least 1"));
    }
    let mut acc = vec![0.0; params.theta.len()];
    let mut grad = vec![0.0; params.theta.len()];
    let mut phi = vec![0.0; weights.nu.len()];
    let mut done = 0;
    while done < n_steps {
        let mut s = env.reset(rng);
        if env.is_terminal(&s) {
            return Err(invalid("start state is terminal"));
        }
        loop {
            let d = StepDraws::draw(rng);
            let out = ac_step(env, params, weights, &s, &d, &mut grad, &mut phi)?;
            for (a, g) in acc.iter_mut().zip(&grad) {
                *a += g;
            }
            done += 1;
            s = out.transition.next;
            if out.transition.done() || done >= n_steps {
                break;
            }
        }
    }
    Ok(acc.into_iter().map(|v| v / n_steps as f64).collect())
}

/// Where TD policy evaluation starts its episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartDist {
    /// `(z0, t0)` from the environment.
    Fixed,
    /// Uniform `t` on `[t_lo, t_hi)` and `z` uniform on the lattice
    /// `z_hi − j·z_step` for `j = 0..z_levels`.
    Lattice { z_hi: f64, z_step: f64, z_levels: usize, t_lo: f64, t_hi: f64 },
}

/// TD(0) evaluation of a frozen policy: `episodes` episodes from `start`,
/// updating `ν` after every step.
pub fn td_evaluate<P: Policy + ?Sized, R: Rng + ?Sized>(env: &Environment, policy: &P, weights: &mut ValueWeights, alpha_v: f64, episodes: u64, start: StartDist, rng: &mut R) -> Result<()> {
    let mut phi = vec![0.0; weights.nu.len()];
    for _ in 0..episodes {
        let mut s = match start {
            StartDist::Fixed => env.reset(rng),
            StartDist::Lattice { z_hi, z_step, z_levels, t_lo, t_hi } => {
                let j = rng.random_range(0..z_levels.max(1));
                let t = rng.random_range(t_lo..t_hi);
                env.reset_at(z_hi - j as f64 * z_step, t, rng)
            }
        };
        while !env.is_terminal(&s) {
            let d = StepDraws::draw(rng);
            let p = policy.prob(env.x(&s), s.z, s.t);
            let tr = env.step_with(&s, d.u_action < p, &d)?;
            let n = &tr.next;
            let delta = td_error(tr.reward, env.config.beta, tr.dt, tr.bootstrap(), weights, s.z, s.t, n.z, n.t);
            weights.basis_spec.eval_into(s.z, s.t, &mut phi);
            for (v, p) in weights.nu.iter_mut().zip(&phi) {
                *v += alpha_v * delta * p;
            }
            if weights.nu.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { update: 0, reason: "non-finite value weights".into() });
            }
            s = tr.next;
            if tr.done() {
                break;
            }
        }
    }
    Ok(())
}

/// Per-worker simulation state.
struct Worker {
    id: usize,
    rng: WorkerRng,
    state: Option<State>,
    grad: Vec<f64>,
    phi: Vec<f64>,
    batch_theta: Vec<f64>,
    batch_nu: Vec<f64>,
}

struct BatchOut {
    steps: usize,
    episodes_done: u64,
}

impl Worker {
    fn new(id: usize, seed: u64, kt: usize, kv: usize) -> Self {
        Worker {
            id,
            rng: substream(seed, "worker", id as u64),
            state: None,
            grad: vec![0.0; kt],
            phi: vec![0.0; kv],
            batch_theta: vec![0.0; kt],
            batch_nu: vec![0.0; kv],
        }
    }

    /// Accumulate up to `B` steps, refreshing the snapshot before each one.
    #[allow(clippy::too_many_arguments)]
    fn run_batch(&mut self, env: &Environment, cfg: &TrainConfig, alpha_theta: f64, snapshot: &mut dyn FnMut(&mut PolicyParams, &mut ValueWeights), params: &mut PolicyParams, weights: &mut ValueWeights, trace: Option<&mut Vec<StepRecord>>) -> Result<BatchOut> {
        self.batch_theta.iter_mut().for_each(|v| *v = 0.0);
        self.batch_nu.iter_mut().for_each(|v| *v = 0.0);
        let mut trace = trace;
        let mut out = BatchOut { steps: 0, episodes_done: 0 };
        while out.steps < cfg.batch_size {
            let s = match self.state {
                Some(s) => s,
                None => {
                    let s = env.reset(&mut self.rng);
                    if env.is_terminal(&s) {
                        return Err(invalid("start state is terminal"));
                    }
                    s
                }
            };
            snapshot(params, weights);
            let d = StepDraws::draw(&mut self.rng);
            let st = ac_step(env, params, weights, &s, &d, &mut self.grad, &mut self.phi)?;
            for (b, g) in self.batch_theta.iter_mut().zip(&self.grad) {
                *b += alpha_theta * g;
            }
            for (b, p) in self.batch_nu.iter_mut().zip(&self.phi) {
                *b += cfg.alpha_v * p;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(StepRecord {
                    worker: self.id,
                    policy_term: self.grad.iter().map(|g| alpha_theta * g).collect(),
                    value_term: self.phi.iter().map(|p| cfg.alpha_v * p).collect(),
                });
            }
            out.steps += 1;
            if st.transition.done() {
                self.state = None;
                out.episodes_done += 1;
                break;
            }
            self.state = Some(st.transition.next);
        }
        let b = cfg.batch_size as f64;
        for v in self.batch_theta.iter_mut() {
            *v /= b;
        }
        for v in self.batch_nu.iter_mut() {
            *v /= b;
        }
        if let Some(c) = cfg.clip_norm {
            let n = self.batch_theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > c {
                let s = c / n;
                self.batch_theta.iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(out)
    }
}

fn curve_point(env: &Environment, cfg: &TrainConfig, params: &PolicyParams, update: u64, episodes: u64) -> Result<CurvePoint> {
    let r = evaluate_welfare(params, env, cfg.eval_episodes, substream_seed(cfg.seed, update))?;
    Ok(CurvePoint {
        update_index: update,
        episodes,
        mean_welfare: r.relative_welfare.unwrap_or(f64::NAN),
        ci_halfwidth: r.relative_ci_halfwidth.unwrap_or(f64::NAN),
        absolute_welfare: r.mean_welfare,
        theta_norm: params.norm(),
    })
}

/// Evaluation seed for a checkpoint, independent of the training streams.
fn substream_seed(seed: u64, update: u64) -> u64 {
    substream(seed, "checkpoint", update).random()
}

/// Batched actor-critic with `P` workers sharing `(θ, ν)`.
///
/// Each worker takes a fresh snapshot before every step, accumulates up to
/// `B` learning-rate-scaled terms (stopping early at the end of an episode)
/// and applies their sum divided by `B` to the shared parameters.
pub fn train_a3c(env: &Environment, init_params: PolicyParams, init_weights: ValueWeights, cfg: &TrainConfig) -> Result<TrainedPolicy> {
    cfg.validate()?;
    let start = Instant::now();
    let mut out = match cfg.mode {
        SharingMode::SingleWriter => train_single_writer(env, init_params, init_weights, cfg)?,
        SharingMode::LockPerBatch | SharingMode::Hogwild => train_threaded(env, init_params, init_weights, cfg)?,
    };
    out.curve.sort_by_key(|c| c.update_index);
    out.wall_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

fn stop(cfg: &TrainConfig, updates: u64, episodes: u64) -> bool {
    updates >= cfg.max_updates || cfg.max_episodes.is_some_and(|m| episodes >= m)
}

fn train_single_writer(env: &Environment, init_params: PolicyParams, init_weights: ValueWeights, cfg: &TrainConfig) -> Result<TrainedPolicy> {
    let kt = init_params.theta.len();
    let kv = init_weights.nu.len();
    let mut global_p = init_params.clone();
    let mut global_v = init_weights.clone();
    let mut local_p = init_params;
    let mut local_v = init_weights;
    let mut workers: Vec<Worker> = (0..cfg.workers).map(|i| Worker::new(i, cfg.seed, kt, kv)).collect();
    let mut trace = cfg.trace.then(Trace::default);
    let mut curve = Vec::new();
    let (mut updates, mut episodes) = (0u64, 0u64);
    let mut status = TrainStatus::Completed;
    if cfg.eval_every > 0 {
        curve.push(curve_point(env, cfg, &global_p, 0, 0)?);
    }
    'outer: while !stop(cfg, updates, episodes) {
        for w in workers.iter_mut() {
            if stop(cfg, updates, episodes) {
                break 'outer;
            }
            let alpha = cfg.schedule_theta.rate(cfg.alpha_theta, updates);
            let (gp, gv) = (&global_p, &global_v);
            let mut snap = |p: &mut PolicyParams, v: &mut ValueWeights| {
                p.theta.copy_from_slice(&gp.theta);
                v.nu.copy_from_slice(&gv.nu);
            };
            let b = w.run_batch(env, cfg, alpha, &mut snap, &mut local_p, &mut local_v, trace.as_mut().map(|t| &mut t.steps))?;
            let (tb, vb) = (global_p.theta.clone(), global_v.nu.clone());
            for (g, d) in global_p.theta.iter_mut().zip(&w.batch_theta) {
                *g += d;
            }
            for (g, d) in global_v.nu.iter_mut().zip(&w.batch_nu) {
                *g += d;
            }
            updates += 1;
            episodes += b.episodes_done;
            if let Some(t) = trace.as_mut() {
                t.updates.push(UpdateRecord { worker: w.id, steps: b.steps, theta_before: tb.clone(), theta_after: global_p.theta.clone(), nu_before: vb, nu_after: global_v.nu.clone() });
            }
            if let Some(reason) = check_params(&global_p.theta, &global_v.nu, cfg.divergence_threshold) {
                global_p.theta = tb;
                status = TrainStatus::Diverged { update: updates, reason };
                break 'outer;
            }
            if cfg.eval_every > 0 && updates % cfg.eval_every == 0 {
                curve.push(curve_point(env, cfg, &global_p, updates, episodes)?);
            }
        }
    }
    if matches!(status, TrainStatus::Diverged { .. }) && global_v.nu.iter().any(|v| !v.is_finite()) {
        global_v.nu.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(TrainedPolicy { params: global_p, weights: global_v, curve, config: cfg.clone(), status, updates, episodes, wall_seconds: 0.0, trace })
}

/// Shared parameter store for the threaded modes.
enum Store {
    Locked(RwLock<(Vec<f64>, Vec<f64>)>),
    Atomic(Vec<AtomicU64>, Vec<AtomicU64>),
}

fn atomic_add(a: &AtomicU64, d: f64) {
    let mut cur = a.load(Ordering::Relaxed);
    loop {
        let new = (f64::from_bits(cur) + d).to_bits();
        match a.compare_exchange_weak(cur, new, Ordering::AcqRel, Ordering::Relaxed) {
            Ok(_) => return,
            Err(v) => cur = v,
        }
    }
}

impl Store {
    fn read(&self, theta: &mut [f64], nu: &mut [f64]) {
        match self {
            Store::Locked(l) => {
                let g = l.read().unwrap_or_else(|e| e.into_inner());
                theta.copy_from_slice(&g.0);
                nu.copy_from_slice(&g.1);
            }
            Store::Atomic(t, v) => {
                for (o, a) in theta.iter_mut().zip(t) {
                    *o = f64::from_bits(a.load(Ordering::Acquire));
                }
                for (o, a) in nu.iter_mut().zip(v) {
                    *o = f64::from_bits(a.load(Ordering::Acquire));
                }
            }
        }
    }

    /// Apply a batch; returns the parameters after the update.
    fn apply(&self, dt: &[f64], dv: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Store::Locked(l) => {
                let mut g = l.write().unwrap_or_else(|e| e.into_inner());
                for (a, d) in g.0.iter_mut().zip(dt) {
                    *a += d;
                }
                for (a, d) in g.1.iter_mut().zip(dv) {
                    *a += d;
                }
                (g.0.clone(), g.1.clone())
            }
            Store::Atomic(t, v) => {
                for (a, d) in t.iter().zip(dt) {
                    atomic_add(a, *d);
                }
                for (a, d) in v.iter().zip(dv) {
                    atomic_add(a, *d);
                }
                let mut th = vec![0.0; t.len()];
                let mut nu = vec![0.0; v.len()];
                self.read(&mut th, &mut nu);
                (th, nu)
            }
        }
    }
}

fn train_threaded(env: &Environment, init_params: PolicyParams, init_weights: ValueWeights, cfg: &TrainConfig) -> Result<TrainedPolicy> {
    let kt = init_params.theta.len();
    let kv = init_weights.nu.len();
    let store = match cfg.mode {
        SharingMode::Hogwild => Store::Atomic(
            init_params.theta.iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
            init_weights.nu.iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
        ),
        _ => Store::Locked(RwLock::new((init_params.theta.clone(), init_weights.nu.clone()))),
    };
    let updates = AtomicU64::new(0);
    let episodes = AtomicU64::new(0);
    let halt = AtomicBool::new(false);
    let failure: Mutex<Option<TrainStatus>> = Mutex::new(None);
    let last_good: Mutex<(Vec<f64>, Vec<f64>)> = Mutex::new((init_params.theta.clone(), init_weights.nu.clone()));
    let curve: Mutex<Vec<CurvePoint>> = Mutex::new(Vec::new());
    if cfg.eval_every > 0 {
        curve.lock().unwrap().push(curve_point(env, cfg, &init_params, 0, 0)?);
    }

    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|id| {
                let (store, updates, episodes, halt, failure, last_good, curve) = (&store, &updates, &episodes, &halt, &failure, &last_good, &curve);
                let (mut lp, mut lv) = (init_params.clone(), init_weights.clone());
                scope.spawn(move || {
                    let mut w = Worker::new(id, cfg.seed, kt, kv);
                    let fail = |s: TrainStatus| {
                        let mut f = failure.lock().unwrap_or_else(|e| e.into_inner());
                        f.get_or_insert(s);
                        halt.store(true, Ordering::SeqCst);
                    };
                    loop {
                        if halt.load(Ordering::SeqCst) || stop(cfg, updates.load(Ordering::SeqCst), episodes.load(Ordering::SeqCst)) {
                            return;
                        }
                        let alpha = cfg.schedule_theta.rate(cfg.alpha_theta, updates.load(Ordering::SeqCst));
                        let mut snap = |p: &mut PolicyParams, v: &mut ValueWeights| store.read(&mut p.theta, &mut v.nu);
                        let b = match w.run_batch(env, cfg, alpha, &mut snap, &mut lp, &mut lv, None) {
                            Ok(b) => b,
                            Err(e) => {
                                let s = match e {
                                    Error::NonFinite(m) => TrainStatus::Diverged { update: updates.load(Ordering::SeqCst), reason: m },
                                    other => TrainStatus::WorkerFailed { message: other.to_string() },
                                };
                                fail(s);
                                return;
                            }
                        };
                        let (th, nu) = store.apply(&w.batch_theta, &w.batch_nu);
                        let u = updates.fetch_add(1, Ordering::SeqCst) + 1;
                        let ep = episodes.fetch_add(b.episodes_done, Ordering::SeqCst) + b.episodes_done;
                        if let Some(reason) = check_params(&th, &nu, cfg.divergence_threshold) {
                            fail(TrainStatus::Diverged { update: u, reason });
                            return;
                        }
                        *last_good.lock().unwrap_or_else(|e| e.into_inner()) = (th.clone(), nu);
                        if cfg.eval_every > 0 && u % cfg.eval_every == 0 {
                            let p = PolicyParams { feature_spec: lp.feature_spec.clone(), theta: th };
                            match curve_point(env, cfg, &p, u, ep) {
                                Ok(c) => curve.lock().unwrap_or_else(|e| e.into_inner()).push(c),
                                Err(e) => {
                                    fail(TrainStatus::WorkerFailed { message: e.to_string() });
                                    return;
                                }
                            }
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            if h.join().is_err() {
                let mut f = failure.lock().unwrap_or_else(|e| e.into_inner());
                f.get_or_insert(TrainStatus::WorkerFailed { message: "worker thread panicked".into() });
                halt.store(true, Ordering::SeqCst);
            }
        }
    });

    let status = failure.into_inner().unwrap_or_else(|e| e.into_inner()).unwrap_or(TrainStatus::Completed);
    let (theta, nu) = match status {
        TrainStatus::Completed => {
            let mut th = vec![0.0; kt];
            let mut nu = vec![0.0; kv];
            store.read(&mut th, &mut nu);
            (th, nu)
        }
        _ => last_good.into_inner().unwrap_or_else(|e| e.into_inner()),
    };
    Ok(TrainedPolicy {
        params: PolicyParams { feature_spec: init_params.feature_spec, theta },
        weights: ValueWeights { basis_spec: init_weights.basis_spec, nu },
        curve: curve.into_inner().unwrap_or_else(|e| e.into_inner()),
        config: cfg.clone(),
        status,
        updates: updates.load(Ordering::SeqCst),
        episodes: episodes.load(Ordering::SeqCst),
        wall_seconds: 0.0,
        trace: None,
    })
}
