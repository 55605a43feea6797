use aoi_whittle::oracle::{rvi_solve, CostTiming, DecoupledMdp};
use aoi_whittle::policies::{PolicyKind, PolicyOptions};
use aoi_whittle::sim::{run_named, transition, SimConfig};
use aoi_whittle::{CostFunction, UeConfig, UeState};

const CAP: u64 = 80;

fn slot(a: u64, d: u64) -> usize {
    ((a.min(CAP) - 1) * (CAP + 1) + d.min(CAP)) as usize
}

/// Stationary law of one always-scheduled user, by power iteration over the
/// clamped chain.
fn always_schedule_stationary(lambda: f64, eps: f64) -> Vec<f64> {
    let n = (CAP * (CAP + 1)) as usize;
    let mut p = vec![0.0; n];
    p[slot(1, 0)] = 1.0;
    for _ in 0..20_000 {
        let mut next = vec![0.0; n];
        for a in 1..=CAP {
            for d in 0..=CAP {
                let mass = p[slot(a, d)];
                if mass == 0.0 {
                    continue;
                }
                let s = UeState { a, d };
                let scheduled = d > 0;
                for (success, ps) in [(true, 1.0 - eps), (false, eps)] {
                    for (arrival, pa) in [(true, lambda), (false, 1.0 - lambda)] {
                        let t = transition(s, scheduled, success, arrival);
                        next[slot(t.a, t.d)] += mass * ps * pa;
                    }
                }
            }
        }
        let delta: f64 = next.iter().zip(&p).map(|(x, y)| (x - y).abs()).sum();
        p = next;
        if delta < 1e-14 {
            break;
        }
    }
    p
}

#[test]
fn simulator_matches_stationary_chain() {
    for (lambda, eps) in [(0.4, 0.3), (0.7, 0.1), (0.9, 0.5)] {
        let cost = CostFunction::linear();
        let p = always_schedule_stationary(lambda, eps);
        let mut expected = 0.0;
        for a in 1..=CAP {
            for d in 0..=CAP {
                expected += p[slot(a, d)] * cost.evaluate(a + d);
            }
        }
        let cfg = SimConfig::new(vec![UeConfig::new(lambda, eps, cost)], 200_000, PolicyKind::AlwaysSchedule)
            .with_seed(11)
            .with_replications(8);
        let r = run_named(&cfg, &PolicyOptions::default()).unwrap();
        let half = (r.ci_high - r.ci_low) / 2.0;
        assert!(
            (r.mean_cost - expected).abs() <= 4.0 * half + 1e-3,
            "lambda={lambda} eps={eps}: simulated {} vs chain {expected}",
            r.mean_cost
        );
    }
}

#[test]
fn always_schedule_error_free_matches_renewal_formula() {
    for lambda in [0.25, 0.5, 0.8, 1.0] {
        let cfg = SimConfig::new(
            vec![UeConfig::new(lambda, 0.0, CostFunction::linear())],
            400_000,
            PolicyKind::AlwaysSchedule,
        )
        .with_seed(5)
        .with_replications(4);
        let r = run_named(&cfg, &PolicyOptions::default()).unwrap();
        let expected = 1.0 + 1.0 / lambda;
        assert!((r.mean_cost - expected).abs() < 0.02 * expected, "{lambda}: {}", r.mean_cost);
    }
}

/// Plain undamped value iteration on the start-of-slot problem; the gain is
/// read off the converged increments.
fn reference_gain(lambda: f64, eps: f64, cost: CostFunction, charge: f64, cap: u64) -> f64 {
    let idx = |a: u64, d: u64| ((a.min(cap) - 1) * (cap + 1) + d.min(cap)) as usize;
    let n = (cap * (cap + 1)) as usize;
    let mut f = vec![0.0; n];
    let mut gain = 0.0;
    for _ in 0..200_000 {
        let mut next = vec![0.0; n];
        for a in 1..=cap {
            for d in 0..=cap {
                let s = UeState { a, d };
                let expect = |scheduled: bool| {
                    let mut total = 0.0;
                    for (success, ps) in [(true, 1.0 - eps), (false, eps)] {
                        for (arrival, pa) in [(true, lambda), (false, 1.0 - lambda)] {
                            let t = transition(s, scheduled, success, arrival);
                            total += ps * pa * f[idx(t.a, t.d)];
                        }
                    }
                    total
                };
                let idle = cost.evaluate(a + d) + expect(false);
                let act = cost.evaluate(a + d) + charge + expect(true);
                next[idx(a, d)] = 0.5 * f[idx(a, d)] + 0.5 * idle.min(act);
            }
        }
        let diffs: Vec<f64> = next.iter().zip(&f).map(|(x, y)| x - y).collect();
        let lo = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let base = next[0];
        f = next.iter().map(|x| x - base).collect();
        gain = 2.0 * (lo + hi) / 2.0;
        if hi - lo < 1e-11 {
            break;
        }
    }
    gain
}

#[test]
fn rvi_gain_matches_reference_value_iteration() {
    let cases = [
        (0.5, 0.25, CostFunction::linear(), 3.0),
        (0.8, 0.1, CostFunction::step(4), 0.4),
        (0.3, 0.4, CostFunction::polynomial(2, 0.2), 5.0),
    ];
    for (lambda, eps, cost, m) in cases {
        let table = rvi_solve(
            &DecoupledMdp::new(lambda, eps, cost, m)
                .with_caps(40, 40)
                .with_timing(CostTiming::StartOfSlot),
        )
        .unwrap();
        let reference = reference_gain(lambda, eps, cost, m, 40);
        assert!(
            (table.gain - reference).abs() < 1e-6 * reference.max(1.0),
            "lambda={lambda} eps={eps} {cost:?}: {} vs {reference}",
            table.gain
        );
    }
}
