use proptest::prelude::*;

use dynatreat::dp::{td_fixed_point, TinyInstance, TinyType};
use dynatreat::policy::{action_prob, FeatureSpec, FeatureTerm, PolicyParams};
use dynatreat::value::{basis, td_update, BasisSpec, BasisTerm, TimeFactor, ValueWeights};

fn presets() -> Vec<BasisSpec> {
    vec![BasisSpec::appendix_e9(), BasisSpec::appendix_e11(), BasisSpec::appendix_e13()]
}

fn instance() -> (TinyInstance, PolicyParams) {
    let inst = TinyInstance {
        types: vec![
            TinyType { x: vec![-1.0], reward: -0.4 },
            TinyType { x: vec![0.2], reward: 0.7 },
            TinyType { x: vec![1.1], reward: 1.6 },
        ],
        b_n: 12.0,
        beta: 0.3,
        cost: 0.25,
        z0: 0.75,
        epochs: 12,
    };
    let spec = FeatureSpec::new(vec![FeatureTerm::Constant, FeatureTerm::Covariate(0), FeatureTerm::CovariateBudget(0)]);
    (inst, PolicyParams::new(spec, vec![-0.3, 1.2, 0.8]).unwrap())
}

/// Three boundary-vanishing terms; E9 is nearly collinear on so few states.
fn small_basis() -> BasisSpec {
    BasisSpec::new(vec![BasisTerm::new(1, TimeFactor::OneMinusT(1)), BasisTerm::new(2, TimeFactor::OneMinusT(1)), BasisTerm::new(1, TimeFactor::SinPi(1))]).unwrap()
}

/// One expected TD(0) sweep over every reachable state, weighted by its
/// expected visit count per episode.
fn expected_sweep(inst: &TinyInstance, p: &PolicyParams, w: &ValueWeights) -> Vec<f64> {
    let levels = (inst.z0 / inst.cost).round() as usize;
    let gamma = (-inst.beta / inst.b_n).exp();
    let k = inst.types.len() as f64;
    let mut mass = vec![0.0; levels + 1];
    mass[levels] = 1.0;
    let mut g = vec![0.0; w.nu.len()];
    for j in 0..inst.epochs {
        let (t, t_next) = (j as f64 / inst.b_n, (j + 1) as f64 / inst.b_n);
        let last = j + 1 == inst.epochs;
        let mut next = vec![0.0; levels + 1];
        for l in 1..=levels {
            if mass[l] == 0.0 {
                continue;
            }
            let z = l as f64 * inst.cost;
            let v = w.predict(z, t);
            let phi = basis(z, t, &w.basis_spec);
            let boot = |lv: usize| if last || lv == 0 { 0.0 } else { gamma * w.predict(lv as f64 * inst.cost, t_next) };
            for ty in &inst.types {
                let q = action_prob(p, &ty.x, z, t);
                let delta = q * (ty.reward / inst.b_n + boot(l - 1) - v) + (1.0 - q) * (boot(l) - v);
                for (a, f) in g.iter_mut().zip(&phi) {
                    *a += mass[l] / k * delta * f;
                }
                next[l - 1] += mass[l] / k * q;
                next[l] += mass[l] / k * (1.0 - q);
            }
        }
        mass = next;
    }
    g
}

#[test]
fn td_iteration_reaches_projected_fixed_point() {
    let (inst, p) = instance();
    let env = inst.environment().unwrap();
    let oracle = td_fixed_point(&env, &p, &small_basis()).unwrap();
    let mut w = ValueWeights::zeros(small_basis());
    let mut sweeps = 0;
    loop {
        let g = expected_sweep(&inst, &p, &w);
        let before = w.nu.clone();
        td_update(&mut w, 1.0, &g, 1.5);
        sweeps += 1;
        let change = w.nu.iter().zip(&before).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        if change < 1e-6 {
            break;
        }
        assert!(sweeps < 100_000, "TD sweeps did not converge");
    }
    let mut worst = 0.0_f64;
    for j in 0..inst.epochs {
        for l in 1..=3 {
            let (z, t) = (l as f64 * inst.cost, j as f64 / inst.b_n);
            worst = worst.max((w.predict(z, t) - oracle.predict(z, t)).abs());
        }
    }
    assert!(worst < 1e-3, "max prediction gap {worst} after {sweeps} sweeps");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn presets_vanish_on_the_dirichlet_boundary(nu in prop::collection::vec(-1e3f64..1e3, 13), z in 0.0f64..2.0, t in 0.0f64..1.0) {
        for spec in presets() {
            let w = ValueWeights::new(spec.clone(), nu[..spec.dim()].to_vec()).unwrap();
            prop_assert_eq!(w.predict(0.0, t).abs(), 0.0);
            prop_assert!(w.predict(z, 1.0).abs() < 1e-9 * nu.iter().fold(1.0_f64, |m, v| m.max(v.abs())) * (1.0 + z).powi(4));
        }
    }

    #[test]
    fn td_update_is_affine(nu in prop::collection::vec(-5.0f64..5.0, 9), phi1 in prop::collection::vec(-2.0f64..2.0, 9), phi2 in prop::collection::vec(-2.0f64..2.0, 9), delta in -3.0f64..3.0, alpha in 1e-4f64..1.0, k in -8i32..8) {
        let spec = BasisSpec::appendix_e9();
        let step = |nu0: &[f64], d: f64, phi: &[f64]| {
            let mut w = ValueWeights::new(spec.clone(), nu0.to_vec()).unwrap();
            td_update(&mut w, d, phi, alpha);
            w.nu
        };
        let zero = vec![0.0; 9];
        let sum: Vec<f64> = phi1.iter().zip(&phi2).map(|(a, b)| a + b).collect();
        let base = step(&zero, delta, &phi1);
        for (i, v) in step(&nu, delta, &phi1).iter().enumerate() {
            prop_assert_eq!(v.to_bits(), (nu[i] + base[i]).to_bits());
        }
        let scale = 2f64.powi(k);
        for (a, b) in step(&zero, delta * scale, &phi1).iter().zip(&base) {
            prop_assert_eq!(a.to_bits(), (b * scale).to_bits());
        }
        let s = alpha * delta;
        for (a, b) in step(&zero, delta, &sum).iter().zip(&sum) {
            prop_assert_eq!(a.to_bits(), (s * b).to_bits());
        }
    }
}

