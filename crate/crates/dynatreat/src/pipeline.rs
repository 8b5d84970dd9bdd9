//! End-to-end configuration and the pure stage functions behind the CLI:
//! rewards, clusters, rates, environment, training and baselines.

use serde::{Deserialize, Serialize};

use crate::actor_critic::{train_a3c, TrainConfig, TrainedPolicy};
use crate::arrivals::{cluster_covariates, fit_poisson_rates, ClusterAssignment, ForecastEnsemble, RateFitConfig, RateModel};
use crate::data::{ObservationalData, Schema};
use crate::env::{Boundary, EnvConfig, Environment, Interarrival, Population};
use crate::error::{invalid, Result};
use crate::policy::{ewm_search, EwmConfig, EwmResult, FeatureSpec, PolicyParams};
use crate::reward::{doubly_robust_rewards, estimate_compliance, fit_nuisance, NuisanceConfig, RewardTable};
use crate::rng::substream;
use crate::synth::SynthSpec;
use crate::value::{BasisSpec, ValueWeights};

/// Current configuration schema.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Generate a synthetic sample with the master seed.
    Synth { spec: SynthSpec },
    /// Read a CSV file.
    Csv { path: String, schema: Schema },
}

/// Budget environment built from the estimated inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSettings {
    pub boundary: Boundary,
    #[serde(default)]
    pub t0: f64,
    /// Horizon for the Dirichlet regime.
    #[serde(default)]
    pub horizon: Option<f64>,
    pub beta: f64,
    pub b_n: f64,
    /// Budget as a share of the expected number of arrivals before the
    /// horizon (or within one period without a horizon).
    pub budget_share: f64,
    #[serde(default)]
    pub income: f64,
    #[serde(default)]
    pub interest: f64,
    #[serde(default)]
    pub boundary_flow: f64,
    #[serde(default)]
    pub interarrival: Interarrival,
    /// Measure the budget in units of the initial budget, so `z0 = 1`.
    #[serde(default)]
    pub unit_budget: bool,
}

impl EnvSettings {
    /// One-year Dirichlet problem with `β = −ln 0.9` and a budget for 25% of
    /// expected arrivals.
    pub fn annual(b_n: f64) -> Self {
        EnvSettings {
            boundary: Boundary::Dirichlet,
            t0: 0.0,
            horizon: Some(1.0),
            beta: -(0.9f64).ln(),
            b_n,
            budget_share: 0.25,
            income: 0.0,
            interest: 0.0,
            boundary_flow: 0.0,
            interarrival: Interarrival::Exponential,
            unit_budget: true,
        }
    }

    /// Concrete environment configuration: each treatment costs `1/b_n`
    /// and `z0` covers `budget_share` of the expected arrivals.
    pub fn env_config(&self, rates: &RateModel) -> Result<EnvConfig> {
        if !(self.budget_share > 0.0 && self.budget_share <= 1.0) {
            return Err(invalid("budget_share must lie in (0, 1]"));
        }
        let span_end = self.horizon.unwrap_or(self.t0 + rates.period);
        let expected = rates.integral(self.t0, span_end, 10_000);
        // Round to whole treatments so the budget lattice is exact.
        let treatments = (self.budget_share * expected * self.b_n).round().max(1.0);
        let (z0, cost) = if self.unit_budget { (1.0, 1.0 / treatments) } else { (treatments / self.b_n, 1.0 / self.b_n) };
        let mut c = EnvConfig::dirichlet(z0, span_end, self.beta, self.b_n, cost);
        c.boundary = self.boundary;
        c.t0 = self.t0;
        c.horizon = self.horizon;
        c.income = self.income;
        c.interest = self.interest;
        c.boundary_flow = self.boundary_flow;
        c.interarrival = self.interarrival;
        c.period = rates.period;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySettings {
    /// `restricted`, `class_a` or `class_a_with_intercepts`.
    pub features: String,
    /// Basis preset name.
    pub basis: String,
}

impl PolicySettings {
    pub fn feature_spec(&self, d: usize) -> Result<FeatureSpec> {
        let s = match self.features.as_str() {
            "restricted" => FeatureSpec::restricted(d),
            "class_a" => FeatureSpec::class_a(d),
            "class_a_with_intercepts" => FeatureSpec::class_a_with_intercepts(d),
            other => return Err(invalid(format!("unknown feature class {other:?}"))),
        };
        s.validate(d)?;
        Ok(s)
    }

    pub fn basis_spec(&self) -> Result<BasisSpec> {
        BasisSpec::preset(&self.basis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub selectivity_sims: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { episodes: 500, selectivity_sims: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: DataSource,
    pub nuisance: NuisanceConfig,
    pub clusters: usize,
    pub rates: RateFitConfig,
    pub env: EnvSettings,
    pub policy: PolicySettings,
    pub train: TrainConfig,
    #[serde(default)]
    pub ewm: EwmConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl PipelineConfig {
    /// Defaults for a synthetic sample of `n` rows.
    pub fn synthetic(n: usize, seed: u64) -> Self {
        let mut train = TrainConfig::new(5.0, 0.1, 64, 4, 300_000, seed);
        train.eval_every = 50_000;
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            data: DataSource::Synth { spec: SynthSpec::jtpa_like(n) },
            nuisance: NuisanceConfig { folds: 5, seed, propensity: crate::reward::PropensityMode::Estimated },
            clusters: 4,
            rates: RateFitConfig::default(),
            env: EnvSettings::annual(200.0),
            policy: PolicySettings { features: "class_a_with_intercepts".into(), basis: "appendixE9".into() },
            train,
            ewm: EwmConfig { directions: 20_000, seed },
            eval: EvalSettings::default(),
        }
    }

    /// Apply the master seed to every component that carries one.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.nuisance.seed = seed;
        self.train.seed = seed;
        self.ewm.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        if self.clusters == 0 {
            return Err(invalid("clusters must be at least 1"));
        }
        if let DataSource::Synth { spec } = &self.data {
            spec.validate()?;
        }
        self.train.validate()?;
        if self.eval.episodes == 0 || self.eval.selectivity_sims == 0 {
            return Err(invalid("evaluation counts must be at least 1"));
        }
        self.policy.basis_spec()?;
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: PipelineConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// Doubly-robust rewards, or compliance-adjusted ones when the data carry
/// an instrument.
pub fn estimate_rewards(data: &ObservationalData, cfg: &NuisanceConfig) -> Result<RewardTable> {
    if data.instrument.is_some() {
        return Ok(estimate_compliance(data, cfg)?.table);
    }
    Ok(doubly_robust_rewards(data, &fit_nuisance(data, cfg)?))
}

/// k-median clusters of the covariates on a dedicated substream.
pub fn cluster(data: &ObservationalData, k: usize, seed: u64) -> Result<ClusterAssignment> {
    if k == 1 {
        return Ok(ClusterAssignment::single(data.n(), data.d));
    }
    cluster_covariates(data, k, &mut substream(seed, "cluster", 0))
}

pub fn fit_rates(data: &ObservationalData, clusters: &ClusterAssignment, cfg: &RateFitConfig) -> Result<RateModel> {
    let arr = data.arrival.as_ref().ok_or_else(|| invalid("rate fitting needs an arrival-time column"))?;
    fit_poisson_rates(clusters, arr, cfg)
}

/// Sample environment `F_{n,t}` with the estimated rewards.
pub fn build_environment(data: &ObservationalData, rewards: RewardTable, clusters: &ClusterAssignment, rates: RateModel, settings: &EnvSettings) -> Result<Environment> {
    if rewards.len() != data.n() {
        return Err(invalid("reward table and data differ in length"));
    }
    let cfg = settings.env_config(&rates)?;
    let pop = Population::new(data.x.clone(), data.d, rewards, clusters.members())?;
    Environment::new(cfg, pop, ForecastEnsemble::single(rates))
}

/// Train the dynamic policy from `θ = 0`, `ν = 0`.
pub fn train_dynamic(env: &Environment, policy: &PolicySettings, cfg: &TrainConfig) -> Result<TrainedPolicy> {
    let p = PolicyParams::zeros(policy.feature_spec(env.population.d)?);
    let v = ValueWeights::zeros(policy.basis_spec()?);
    train_a3c(env, p, v, cfg)
}

/// Static EWM rule over the covariates under the environment's budget
/// share.
pub fn static_baseline(env: &Environment, budget_share: f64, cfg: &EwmConfig) -> Result<EwmResult> {
    let pop = &env.population;
    ewm_search(&pop.rewards.r_hat, &pop.x, pop.d, budget_share, &FeatureSpec::restricted(pop.d), cfg)
}
