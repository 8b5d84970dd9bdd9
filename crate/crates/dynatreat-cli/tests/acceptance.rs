//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use dynatreat::actor_critic::{policy_gradient_estimate, td_evaluate, StartDist};
use dynatreat::arrivals::{fit_poisson_rates, ClusterAssignment, ForecastEnsemble, RateCoef, RateFitConfig, RateModel};
use dynatreat::dp::{brute_force_welfare, policy_grad_fd, solve_dp_value, solve_ode_value, td_fixed_point, value_at_start, TimeGrid, TinyInstance, TinyType};
use dynatreat::env::{run_episode, Boundary, EnvConfig, Environment, Interarrival, Population};
use dynatreat::eval::compare;
use dynatreat::pipeline::{build_environment, cluster, estimate_rewards, fit_rates, static_baseline, train_dynamic, DataSource, PipelineConfig};
use dynatreat::policy::{to_deterministic, ConstantPolicy, FeatureSpec, FeatureTerm, PolicyParams};
use dynatreat::reward::{NuisanceConfig, PropensityMode};
use dynatreat::rng::substream;
use dynatreat::synth::{synth_data, SynthSpec};
use dynatreat::value::{BasisSpec, ValueWeights};

fn verdict(n: u32, pass: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn covariate_policy(theta: Vec<f64>) -> PolicyParams {
    let spec = FeatureSpec::new(vec![FeatureTerm::Constant, FeatureTerm::Covariate(0), FeatureTerm::CovariateBudget(0), FeatureTerm::CovariateCos(0)]);
    PolicyParams::new(spec, theta).unwrap()
}

fn normal_vec<R: Rng>(rng: &mut R, k: usize, sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).unwrap();
    (0..k).map(|_| n.sample(rng)).collect()
}

#[test]
fn c01_dp_equals_brute_force() {
    let start = Instant::now();
    let mut rng = substream(101, "acceptance", 1);
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for _ in 0..6 {
        let k = rng.random_range(2..=4usize);
        let epochs = match k {
            2 => 12,
            3 => 9,
            _ => 7,
        };
        let types: Vec<TinyType> = (0..k).map(|_| TinyType { x: vec![rng.random_range(-1.5..1.5)], reward: rng.random_range(-1.0..2.0) }).collect();
        let inst = TinyInstance {
            types,
            b_n: epochs as f64,
            beta: rng.random_range(0.05..0.5),
            cost: 0.25,
            z0: 0.25 * rng.random_range(1..=4) as f64,
            epochs,
        };
        let p = covariate_policy(normal_vec(&mut rng, 4, 1.0));
        let env = inst.environment().unwrap();
        let dp = solve_dp_value(&env, &p, &p.theta, TimeGrid::Deterministic).unwrap().value_at(inst.z0, 0.0);
        let bf = brute_force_welfare(&p, &inst).unwrap();
        worst = worst.max((dp - bf).abs());
        cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && cases >= 5 && secs < 10.0;
    verdict(1, pass, &format!("max |dp - brute| = {worst:.2e} over {cases} instances in {secs:.1}s"));
    assert!(pass);
}

/// Budget problem with one covariate and a constant arrival rate.
fn small_env(b_n: f64, cost: f64, rows: usize, seed: u64) -> Environment {
    let mut rng = substream(seed, "acceptance-env", 0);
    let x = normal_vec(&mut rng, rows, 1.0);
    let r: Vec<f64> = x.iter().map(|v| 1.0 + 0.8 * v + 0.3 * rng.random_range(-1.0..1.0)).collect();
    let pop = Population::single(x, 1, dynatreat::reward::RewardTable::new(r)).unwrap();
    let cfg = EnvConfig::dirichlet(1.0, 1.0, -(0.9f64).ln(), b_n, cost);
    Environment::new(cfg, pop, ForecastEnsemble::single(RateModel::constant(1))).unwrap()
}

#[test]
fn c02_td_matches_dp() {
    let start = Instant::now();
    let mut env = small_env(50.0, 1.0 / 16.0, 40, 2);
    env.config.interarrival = Interarrival::Deterministic;
    // Budget-paced policy: treats more when budget is ahead of schedule.
    let spec = FeatureSpec::new(vec![FeatureTerm::Constant, FeatureTerm::Covariate(0), FeatureTerm::Budget, FeatureTerm::Cos]);
    let p = PolicyParams::new(spec, vec![-3.0, 1.5, 6.0, 0.0]).unwrap();
    let truth = solve_dp_value(&env, &p, &p.theta, TimeGrid::Deterministic).unwrap();
    let mut w = ValueWeights::zeros(BasisSpec::appendix_e9());
    let starts = StartDist::Lattice { z_hi: 1.0, z_step: 1.0 / 16.0, z_levels: 16, t_lo: 0.0, t_hi: 1.0 };
    let mut rng = substream(2, "acceptance", 2);
    for (alpha, episodes) in [(0.2, 20_000), (0.05, 20_000), (0.01, 40_000), (0.002, 80_000)] {
        td_evaluate(&env, &p, &mut w, alpha, episodes, starts, &mut rng).unwrap();
    }
    // Iterate averaging over the last stretch.
    let mut avg = ValueWeights::zeros(BasisSpec::appendix_e9());
    for _ in 0..20 {
        td_evaluate(&env, &p, &mut w, 0.002, 5_000, starts, &mut rng).unwrap();
        for (a, v) in avg.nu.iter_mut().zip(&w.nu) {
            *a += v / 20.0;
        }
    }
    let (mut lo, mut hi, mut err) = (f64::INFINITY, f64::NEG_INFINITY, 0.0_f64);
    for i in 0..20 {
        for j in 0..20 {
            let (z, t) = (i as f64 / 19.0, j as f64 / 19.0);
            let h = truth.value_at(z, t);
            lo = lo.min(h);
            hi = hi.max(h);
            err = err.max((avg.predict(z, t) - h).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = err <= 0.05 * (hi - lo) && secs < 60.0;
    verdict(2, pass, &format!("sup error {err:.4} vs 5% of range {:.4}, {secs:.1}s", 0.05 * (hi - lo)));
    assert!(pass);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn c03_gradient_fidelity() {
    let inst = TinyInstance {
        types: vec![
            TinyType { x: vec![-1.0], reward: -0.5 },
            TinyType { x: vec![0.0], reward: 0.6 },
            TinyType { x: vec![1.2], reward: 1.8 },
        ],
        b_n: 12.0,
        beta: -(0.9f64).ln(),
        cost: 0.25,
        z0: 0.75,
        epochs: 12,
    };
    let env = inst.environment().unwrap();
    let mut rng = substream(3, "acceptance", 3);
    let mut worst = f64::INFINITY;
    for _ in 0..5 {
        let p = covariate_policy(normal_vec(&mut rng, 4, 0.7));
        let nu = td_fixed_point(&env, &p, &BasisSpec::appendix_e9()).unwrap();
        let est = policy_gradient_estimate(&env, &p, &nu, 100_000, &mut rng).unwrap();
        let fd = policy_grad_fd(&p.theta, 1e-5, |th| value_at_start(&env, &PolicyParams::new(p.feature_spec.clone(), th.to_vec())?, TimeGrid::Deterministic)).unwrap();
        worst = worst.min(cosine(&est, &fd));
    }
    let pass = worst >= 0.9;
    verdict(3, pass, &format!("min cosine {worst:.4} over 5 parameter draws"));
    assert!(pass);
}

#[test]
fn c04_discretization_rate() {
    let mut rng = substream(4, "acceptance", 4);
    let n = 50;
    let x = normal_vec(&mut rng, n, 1.0);
    let r: Vec<f64> = x.iter().map(|v| 1.0 + v).collect();
    let p = PolicyParams::new(FeatureSpec::new(vec![FeatureTerm::Constant, FeatureTerm::Covariate(0), FeatureTerm::CovariateBudget(0)]), vec![-0.3, 1.0, -0.8]).unwrap();
    let beta = -(0.9f64).ln();
    let value = |b: f64| solve_ode_value(&p, &r, &x, 1, beta, b, 1.0).unwrap().last().unwrap().1;
    let reference = value(4096.0);
    let errs: Vec<f64> = [64.0, 128.0, 256.0].iter().map(|&b| (value(b) - reference).abs()).collect();
    let ratios = [errs[1] / errs[0], errs[2] / errs[1]];
    let pass = ratios.iter().all(|q| (0.3..=0.7).contains(q));
    verdict(4, pass, &format!("errors {:.3e} {:.3e} {:.3e}, ratios {ratios:.3?}", errs[0], errs[1], errs[2]));
    assert!(pass);
}

struct SeedResult {
    ratio: f64,
    significant: bool,
    det_minus_soft: f64,
    det_ci: f64,
}

fn dynamic_vs_static(seed: u64) -> SeedResult {
    let cfg = PipelineConfig::synthetic(9223, seed);
    let DataSource::Synth { spec } = &cfg.data else { unreachable!() };
    let (mut data, _) = synth_data(spec, seed).unwrap();
    data.standardize();
    let rewards = estimate_rewards(&data, &cfg.nuisance).unwrap();
    let cl = cluster(&data, cfg.clusters, seed).unwrap();
    let rates = fit_rates(&data, &cl, &cfg.rates).unwrap();
    let env = build_environment(&data, rewards, &cl, rates, &cfg.env).unwrap();
    let ewm = static_baseline(&env, cfg.env.budget_share, &cfg.ewm).unwrap();
    let mut train = cfg.train.clone();
    train.eval_every = 0;
    let tp = train_dynamic(&env, &cfg.policy, &train).unwrap().into_result().unwrap();
    let eval_seed = substream(seed, "eval", 0).random();
    let c = compare(&tp.params, &ewm.rule, &env, cfg.eval.episodes, eval_seed).unwrap();
    let d = compare(&to_deterministic(&tp.params), &tp.params, &env, cfg.eval.episodes, eval_seed).unwrap();
    SeedResult { ratio: c.ratio.unwrap_or(0.0), significant: c.a_significantly_better(), det_minus_soft: d.difference, det_ci: d.ci_halfwidth }
}

#[test]
fn c05_c06_dynamic_beats_static() {
    let start = Instant::now();
    let results: Vec<SeedResult> = (1..=10).map(dynamic_vs_static).collect();
    let wins = results.iter().filter(|r| r.ratio >= 1.05 && r.significant).count();
    let ratios: Vec<String> = results.iter().map(|r| format!("{:.3}", r.ratio)).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass5 = wins >= 8 && secs < 1800.0;
    verdict(5, pass5, &format!("{wins}/10 seeds with ratio >= 1.05 and CI excluding 0 (ratios {}) in {secs:.0}s", ratios.join(", ")));
    let det_ok = results.iter().filter(|r| r.det_minus_soft >= -r.det_ci).count();
    let pass6 = det_ok == results.len();
    let gaps: Vec<String> = results.iter().map(|r| format!("{:+.4}", r.det_minus_soft)).collect();
    verdict(6, pass6, &format!("deterministic >= soft-max - CI in {det_ok}/10 seeds (differences {})", gaps.join(", ")));
    assert!(pass5 && pass6);
}

fn regime_env(boundary: Boundary, z0: f64) -> Environment {
    let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let r: Vec<f64> = x.iter().map(|v| 1.0 + v).collect();
    let pop = Population::single(x, 1, dynatreat::reward::RewardTable::new(r)).unwrap();
    let mut cfg = EnvConfig::dirichlet(z0, 1.0, 0.5, 64.0, 1.0 / 64.0);
    cfg.boundary = boundary;
    match boundary {
        Boundary::Periodic | Boundary::PeriodicNeumann => cfg.horizon = None,
        _ => {}
    }
    if boundary.reflecting() {
        cfg.boundary_flow = 0.5;
    }
    let model = RateModel::from_coefs(vec![RateCoef { b0: 0.0, b1: 0.3, b2: 0.2 }]).normalized_at(0.0);
    Environment::new(cfg, pop, ForecastEnsemble::single(model)).unwrap()
}

#[test]
fn c07_boundary_invariants() {
    const EPISODES: u64 = 10_000;
    let policy = ConstantPolicy(0.7);
    let mut failures = Vec::new();

    for b in [Boundary::Dirichlet, Boundary::Periodic] {
        let env = regime_env(b, 0.0);
        for e in 0..EPISODES {
            let st = run_episode(&env, &policy, &mut substream(7, "null", e), None).unwrap();
            if st.welfare != 0.0 || st.steps != 0 || st.treatments != 0 {
                failures.push(format!("{b:?}: zero budget produced welfare {}", st.welfare));
                break;
            }
        }
    }

    let env = regime_env(Boundary::Dirichlet, 0.5);
    for e in 0..EPISODES {
        let st = run_episode(&env, &policy, &mut substream(7, "conserve", e), None).unwrap();
        if st.final_z != 0.5 - st.treatments as f64 / 64.0 {
            failures.push(format!("dirichlet: z0 - spent = {} but final z = {}", 0.5 - st.treatments as f64 / 64.0, st.final_z));
            break;
        }
    }

    for b in [Boundary::Neumann, Boundary::PeriodicNeumann] {
        let env = regime_env(b, 0.0);
        let mut floor_steps = 0u64;
        'eps: for e in 0..EPISODES {
            let mut log = Vec::new();
            run_episode(&env, &ConstantPolicy(1.0), &mut substream(7, "reflect", e), Some(&mut log)).unwrap();
            for tr in &log {
                if tr.state.z <= env.config.floor() {
                    floor_steps += 1;
                    if tr.reward != 0.0 || tr.action || tr.next.z <= env.config.floor() {
                        failures.push(format!("{b:?}: floor step with reward {} and next z {}", tr.reward, tr.next.z));
                        break 'eps;
                    }
                }
            }
        }
        if floor_steps == 0 {
            failures.push(format!("{b:?}: the floor was never visited"));
        }
    }

    let pass = failures.is_empty();
    verdict(7, pass, &format!("{EPISODES} episodes per regime{}", if pass { String::new() } else { format!("; {}", failures.join("; ")) }));
    assert!(pass);
}

fn bootstrap_sd(n: usize, resamples: usize) -> f64 {
    let spec = SynthSpec::jtpa_like(n);
    let (mut data, _) = synth_data(&spec, 800 + n as u64).unwrap();
    data.standardize();
    let p = PolicyParams::new(FeatureSpec::restricted(3), vec![-0.5, 0.4, -0.6, 0.3]).unwrap();
    let mut rng = substream(8, "bootstrap", n as u64);
    let mut values = Vec::with_capacity(resamples);
    for b in 0..resamples {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let sample = data.select(&idx);
        let nc = NuisanceConfig { folds: 5, seed: b as u64, propensity: PropensityMode::Estimated };
        let rewards = estimate_rewards(&sample, &nc).unwrap();
        let pop = Population::single(sample.x.clone(), sample.d, rewards).unwrap();
        let cfg = EnvConfig::dirichlet(1.0, 1.0, -(0.9f64).ln(), 50.0, 1.0 / 16.0);
        let env = Environment::new(cfg, pop, ForecastEnsemble::single(RateModel::constant(1))).unwrap();
        values.push(value_at_start(&env, &p, TimeGrid::Uniform(50)).unwrap());
    }
    let m = values.iter().sum::<f64>() / resamples as f64;
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (resamples as f64 - 1.0)).sqrt()
}

#[test]
fn c08_bootstrap_rate() {
    let (small, large) = (bootstrap_sd(500, 200), bootstrap_sd(2000, 200));
    let ratio = large / small;
    let pass = (0.35..=0.65).contains(&ratio);
    verdict(8, pass, &format!("bootstrap sd {small:.4e} (n=500) vs {large:.4e} (n=2000), ratio {ratio:.3}"));
    assert!(pass);
}

#[test]
fn c09_rate_recovery() {
    let (b1, b2) = (0.5, -0.3);
    let shape = RateCoef { b0: 0.0, b1, b2 };
    let mass = (0..4096).map(|i| shape.eval((i as f64 + 0.5) / 4096.0, 1.0)).sum::<f64>() / 4096.0;
    let truth = RateCoef { b0: -mass.ln(), b1, b2 };
    let peak = (truth.b0 + b1.hypot(b2)).exp();
    let expected = 5000.0;
    let mut worst = 0.0_f64;
    let mut ok = 0;
    for seed in 0..10 {
        let mut rng = substream(9, "arrivals", seed);
        let count = Poisson::new(expected * peak).unwrap().sample(&mut rng) as usize;
        let mut times = Vec::new();
        for _ in 0..count {
            let t: f64 = rng.random();
            if rng.random::<f64>() * peak <= truth.eval(t, 1.0) {
                times.push(t);
            }
        }
        let cfg = RateFitConfig { exposure: Some(expected), ..RateFitConfig::default() };
        let m = fit_poisson_rates(&ClusterAssignment::single(times.len(), 1), &times, &cfg).unwrap();
        let c = m.clusters[0];
        let err = [(c.b0 + m.normalization.ln() - truth.b0).abs(), (c.b1 - b1).abs(), (c.b2 - b2).abs()];
        let e = err.iter().cloned().fold(0.0, f64::max);
        worst = worst.max(e);
        ok += usize::from(e <= 0.1);
    }
    let pass = ok == 10;
    verdict(9, pass, &format!("{ok}/10 seeds within 0.1, worst coefficient error {worst:.4}"));
    assert!(pass);
}

fn sample_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/sample500.json")
}

fn cli(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dynatreat"))
        .arg("--config")
        .arg(sample_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn c10_pipeline_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = cli(&["--seed", "11", "--deterministic", "pipeline"], &a);
    let rb = cli(&["--seed", "11", "--deterministic", "pipeline"], &b);
    let ok_runs = ra.status.success() && rb.status.success();
    let same = ok_runs && std::fs::read(a.join("policy.json")).unwrap() == std::fs::read(b.join("policy.json")).unwrap();
    verdict(10, same, &format!("exit codes {:?}/{:?}, trained-policy JSON identical: {same}", ra.status.code(), rb.status.code()));
    assert!(same, "{}", String::from_utf8_lossy(&ra.stderr));
}

#[test]
fn c11_divergence_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let r = cli(&["--deterministic", "train", "--alpha-theta", "50", "--alpha-v", "0.1"], &out);
    let code = r.status.code();
    let nan_policy = std::fs::read_to_string(out.join("policy.json")).map(|s| s.contains("NaN") || s.contains("null")).unwrap_or(false);
    let pass = code == Some(3) && !nan_policy;
    verdict(11, pass, &format!("exit code {code:?} at alpha_theta=50, alpha_v=0.1; {}", String::from_utf8_lossy(&r.stderr).lines().last().unwrap_or("")));
    assert!(pass);
}
