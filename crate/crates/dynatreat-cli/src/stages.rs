//! Pipeline stages over an artifact directory, with a manifest of content
//! hashes so completed stages are skipped on rerun.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dynatreat::actor_critic::{CurvePoint, TrainConfig, TrainStatus};
use dynatreat::arrivals::{ClusterAssignment, RateModel};
use dynatreat::data::{load_dataset, write_dataset, ObservationalData, Schema};
use dynatreat::dp::{solve_dp_value, TimeGrid};
use dynatreat::env::Environment;
use dynatreat::eval::{compare, evaluate_welfare, selectivity_stats};
use dynatreat::pipeline::{build_environment, cluster, estimate_rewards, fit_rates, static_baseline, train_dynamic, DataSource, PipelineConfig};
use dynatreat::policy::{to_deterministic, ConstantPolicy, DecisionRule, Policy, PolicyParams};
use dynatreat::reward::RewardTable;
use dynatreat::synth::{synth_data, SynthSpec};
use dynatreat::value::ValueWeights;
use dynatreat::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Estimate,
    Cluster,
    Rates,
    Train,
    Static,
    Evaluate,
    Compare,
    Selectivity,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Data,
        Stage::Estimate,
        Stage::Cluster,
        Stage::Rates,
        Stage::Train,
        Stage::Static,
        Stage::Evaluate,
        Stage::Compare,
        Stage::Selectivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Estimate => "estimate",
            Stage::Cluster => "cluster",
            Stage::Rates => "rates",
            Stage::Train => "train",
            Stage::Static => "static",
            Stage::Evaluate => "evaluate",
            Stage::Compare => "compare",
            Stage::Selectivity => "selectivity",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Estimate | Stage::Cluster => &[Stage::Data],
            Stage::Rates => &[Stage::Data, Stage::Cluster],
            Stage::Train | Stage::Static => &[Stage::Data, Stage::Estimate, Stage::Cluster, Stage::Rates],
            Stage::Evaluate | Stage::Selectivity => &[Stage::Data, Stage::Estimate, Stage::Cluster, Stage::Rates, Stage::Train],
            Stage::Compare => &[Stage::Data, Stage::Estimate, Stage::Cluster, Stage::Rates, Stage::Train, Stage::Static],
        }
    }

    /// Config sections that determine the stage output.
    fn inputs(self, c: &PipelineConfig) -> Value {
        match self {
            Stage::Data => json!({ "seed": c.seed, "data": c.data }),
            Stage::Estimate => json!(c.nuisance),
            Stage::Cluster => json!({ "seed": c.seed, "k": c.clusters }),
            Stage::Rates => json!(c.rates),
            Stage::Train => json!({ "env": c.env, "policy": c.policy, "train": c.train }),
            Stage::Static => json!({ "share": c.env.budget_share, "ewm": c.ewm }),
            Stage::Evaluate | Stage::Compare | Stage::Selectivity => json!({ "seed": c.seed, "env": c.env, "eval": c.eval }),
        }
    }
}

/// Error from a stage, tagged with the stage name.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    stages: BTreeMap<String, StageRecord>,
}

/// Trained policy as persisted: no timings, so identical runs give
/// identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub params: PolicyParams,
    pub weights: ValueWeights,
    pub status: TrainStatus,
    pub updates: u64,
    pub episodes: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StaticArtifact {
    pub rule: DecisionRule,
    pub expression: String,
    pub welfare: f64,
    pub share_treated: f64,
    pub directions_searched: usize,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn sha256_str(s: &str) -> String {
    Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    if curve.is_empty() {
        w.write_record(["update_index", "episodes", "mean_welfare", "ci_halfwidth", "absolute_welfare", "theta_norm"])?;
    }
    w.flush()?;
    Ok(())
}

/// Schema of the CSV written by the data stage for a synthetic source.
pub fn synth_schema(spec: &SynthSpec) -> Schema {
    let mut s = Schema::new("y", "w", &["education", "prev_earnings", "age"]);
    s.arrival_time = Some("arrival".into());
    if spec.compliance.is_some() {
        s.instrument = Some("z".into());
    }
    s
}

/// Policy file or keyword accepted by `evaluate` and `compare`.
pub enum PolicyChoice {
    Soft(PolicyParams),
    Rule(DecisionRule),
    Constant(f64),
}

impl PolicyChoice {
    pub fn as_policy(&self) -> Box<dyn Policy + Send + Sync + '_> {
        match self {
            PolicyChoice::Soft(p) => Box::new(p.clone()),
            PolicyChoice::Rule(r) => Box::new(r.clone()),
            PolicyChoice::Constant(q) => Box::new(ConstantPolicy(*q)),
        }
    }
}

pub struct Workspace {
    pub dir: PathBuf,
    pub config: PipelineConfig,
    manifest: Manifest,
    pub log: Vec<String>,
}

impl Workspace {
    pub fn open(dir: &Path, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(dir)?;
        let mpath = dir.join(MANIFEST);
        let manifest = if mpath.exists() { serde_json::from_str(&fs::read_to_string(&mpath)?)? } else { Manifest::default() };
        write_json(&dir.join("config.json"), &config)?;
        Ok(Workspace { dir: dir.to_path_buf(), config, manifest, log: Vec::new() })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.path(MANIFEST), &self.manifest)
    }

    fn key(&self, stage: Stage) -> String {
        let deps: Vec<Value> = stage
            .deps()
            .iter()
            .map(|d| json!(self.manifest.stages.get(d.name()).map(|r| &r.files)))
            .collect();
        sha256_str(&json!({ "stage": stage.name(), "inputs": stage.inputs(&self.config), "deps": deps }).to_string())
    }

    /// Whether `stage` is recorded with the current key; a recorded file
    /// whose contents changed is an error naming the file.
    fn up_to_date(&self, stage: Stage) -> Result<bool> {
        let Some(rec) = self.manifest.stages.get(stage.name()) else { return Ok(false) };
        if rec.key != self.key(stage) {
            return Ok(false);
        }
        for (file, hash) in &rec.files {
            let p = self.path(file);
            if !p.exists() {
                return Ok(false);
            }
            if &sha256_file(&p)? != hash {
                return Err(Error::Validation(format!("hash mismatch for {}: file changed since it was written", p.display())));
            }
        }
        Ok(true)
    }

    /// Run `target` and everything it depends on, skipping stages whose
    /// inputs and outputs are unchanged.
    pub fn run_until(&mut self, target: Stage) -> std::result::Result<(), StageError> {
        let mut needed: Vec<Stage> = target.deps().to_vec();
        needed.push(target);
        for stage in needed {
            self.run_stage(stage, false)?;
        }
        Ok(())
    }

    pub fn run_all(&mut self) -> std::result::Result<(), StageError> {
        for stage in Stage::ALL {
            self.run_stage(stage, false)?;
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage, force: bool) -> std::result::Result<(), StageError> {
        let tag = |error| StageError { stage: stage.name(), error };
        if !force && self.up_to_date(stage).map_err(tag)? {
            self.log.push(format!("{}: up to date", stage.name()));
            return Ok(());
        }
        self.manifest.stages.remove(stage.name());
        let files = self.execute(stage).map_err(tag)?;
        let mut rec = StageRecord { key: self.key(stage), files: BTreeMap::new() };
        for f in files {
            let h = sha256_file(&self.path(f)).map_err(tag)?;
            rec.files.insert(f.to_string(), h);
        }
        self.manifest.stages.insert(stage.name().to_string(), rec);
        self.save_manifest().map_err(tag)?;
        self.log.push(format!("{}: done", stage.name()));
        Ok(())
    }

    fn execute(&mut self, stage: Stage) -> Result<Vec<&'static str>> {
        let c = self.config.clone();
        match stage {
            Stage::Data => {
                match &c.data {
                    DataSource::Synth { spec } => {
                        let (data, truth) = synth_data(spec, c.seed)?;
                        write_dataset(self.path("data.csv"), &data)?;
                        truth.write_json(self.path("truth.json"))?;
                        self.load_data()?;
                        return Ok(vec!["data.csv", "truth.json"]);
                    }
                    DataSource::Csv { path, schema } => {
                        load_dataset(path, schema)?;
                        fs::copy(path, self.path("data.csv"))?;
                    }
                }
                Ok(vec!["data.csv"])
            }
            Stage::Estimate => {
                estimate_rewards(&self.load_data()?, &c.nuisance)?.write_csv(self.path("rewards.csv"))?;
                Ok(vec!["rewards.csv"])
            }
            Stage::Cluster => {
                cluster(&self.load_data()?, c.clusters, c.seed)?.write_csv(self.path("clusters.csv"))?;
                Ok(vec!["clusters.csv"])
            }
            Stage::Rates => {
                let data = self.load_data()?;
                let cl = ClusterAssignment::read_csv(self.path("clusters.csv"), &data)?;
                fit_rates(&data, &cl, &c.rates)?.write_json(self.path("rates.json"))?;
                Ok(vec!["rates.json"])
            }
            Stage::Train => {
                let env = self.environment()?;
                let tp = train_dynamic(&env, &c.policy, &c.train)?;
                write_json(
                    &self.path("train_report.json"),
                    &json!({ "status": tp.status, "updates": tp.updates, "episodes": tp.episodes, "wall_seconds": tp.wall_seconds, "theta_norm": tp.params.norm() }),
                )?;
                write_curve(&self.path("curve.csv"), &tp.curve)?;
                // A diverged run stops here without writing a policy.
                let tp = tp.into_result()?;
                let art = PolicyArtifact { params: tp.params, weights: tp.weights, status: tp.status, updates: tp.updates, episodes: tp.episodes, config: tp.config };
                write_json(&self.path("policy.json"), &art)?;
                Ok(vec!["policy.json", "curve.csv"])
            }
            Stage::Static => {
                let env = self.environment()?;
                let r = static_baseline(&env, c.env.budget_share, &c.ewm)?;
                let names = self.load_data()?.covariate_names;
                let art = StaticArtifact {
                    expression: r.rule.expression(&names),
                    rule: r.rule,
                    welfare: r.welfare,
                    share_treated: r.share_treated,
                    directions_searched: r.directions_searched,
                };
                write_json(&self.path("static.json"), &art)?;
                Ok(vec!["static.json"])
            }
            Stage::Evaluate => {
                let env = self.environment()?;
                let p = self.trained()?.params;
                let soft = evaluate_welfare(&p, &env, c.eval.episodes, self.eval_seed())?;
                let det = evaluate_welfare(&to_deterministic(&p), &env, c.eval.episodes, self.eval_seed())?;
                write_json(&self.path("eval.json"), &json!({ "soft_max": soft, "deterministic": det }))?;
                Ok(vec!["eval.json"])
            }
            Stage::Compare => {
                let env = self.environment()?;
                let p = self.trained()?.params;
                let s: StaticArtifact = read_json(&self.path("static.json"))?;
                let seed = self.eval_seed();
                let n = c.eval.episodes;
                let rule = to_deterministic(&p);
                let report = json!({
                    "dynamic_vs_static": compare(&p, &s.rule, &env, n, seed)?,
                    "deterministic_vs_static": compare(&rule, &s.rule, &env, n, seed)?,
                    "deterministic_vs_soft_max": compare(&rule, &p, &env, n, seed)?,
                });
                write_json(&self.path("compare.json"), &report)?;
                Ok(vec!["compare.json"])
            }
            Stage::Selectivity => {
                let env = self.environment()?;
                let p = self.trained()?.params;
                let r = selectivity_stats(&p, &env, c.eval.selectivity_sims, self.eval_seed())?;
                write_json(&self.path("selectivity.json"), &r)?;
                Ok(vec!["selectivity.json"])
            }
        }
    }

    fn eval_seed(&self) -> u64 {
        use rand::Rng;
        dynatreat::rng::substream(self.config.seed, "eval", 0).random()
    }

    pub fn load_data(&self) -> Result<ObservationalData> {
        let schema = match &self.config.data {
            DataSource::Synth { spec } => synth_schema(spec),
            DataSource::Csv { schema, .. } => schema.clone(),
        };
        load_dataset(self.path("data.csv"), &schema)
    }

    pub fn environment(&self) -> Result<Environment> {
        let data = self.load_data()?;
        let rewards = RewardTable::read_csv(self.path("rewards.csv"))?;
        let cl = ClusterAssignment::read_csv(self.path("clusters.csv"), &data)?;
        let rates = RateModel::read_json(self.path("rates.json"))?;
        build_environment(&data, rewards, &cl, rates, &self.config.env)
    }

    pub fn trained(&self) -> Result<PolicyArtifact> {
        read_json(&self.path("policy.json"))
    }

    /// Resolve a policy argument: a policy or static-rule JSON file, or one
    /// of `trained`, `deterministic`, `static`, `random`, `nobody`,
    /// `everyone`.
    pub fn policy_choice(&self, arg: &str) -> Result<PolicyChoice> {
        Ok(match arg {
            "trained" => PolicyChoice::Soft(self.trained()?.params),
            "deterministic" => PolicyChoice::Rule(to_deterministic(&self.trained()?.params)),
            "static" => PolicyChoice::Rule(read_json::<StaticArtifact>(&self.path("static.json"))?.rule),
            "random" => PolicyChoice::Constant(0.5),
            "nobody" => PolicyChoice::Constant(0.0),
            "everyone" => PolicyChoice::Constant(1.0),
            path => {
                let v: Value = read_json(Path::new(path))?;
                if v.get("rule").is_some() {
                    PolicyChoice::Rule(serde_json::from_value::<StaticArtifact>(v)?.rule)
                } else if v.get("params").is_some() {
                    PolicyChoice::Soft(serde_json::from_value::<PolicyArtifact>(v)?.params)
                } else {
                    PolicyChoice::Soft(serde_json::from_value(v)?)
                }
            }
        })
    }

    /// Value of the trained policy on a budget × time grid.
    pub fn dp_solve(&self, grid: TimeGrid) -> Result<PathBuf> {
        let env = self.environment()?;
        let p = self.trained()?.params;
        let v = solve_dp_value(&env, &p, &p.theta, grid)?;
        let out = self.path("dp_value.csv");
        v.write_csv(&out)?;
        Ok(out)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&s)?)
}
