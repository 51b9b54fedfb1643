mod common;

use common::{max_z, sample_futures};
use empower::mdp::{
    discounted_occupancy, discounted_state_visitation, marginal_chain, Condition, DiscountSpec, Policy, TabularMdp,
};
use empower::oracle::{conditional_mi, effective_empowerment};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn marginal_chain_matches_transition_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mdp = TabularMdp::random(3, 2, 2, 1.0, &mut rng).unwrap();
    let (ph, pr) = (Policy::uniform(3, 2), Policy::uniform(3, 2));
    let t = marginal_chain(&mdp, &ph, &pr).unwrap();
    let n = 1_000_000;
    let mut counts = [[0usize; 3]; 3];
    for i in 0..n {
        let s = i % 3;
        let next = mdp.sample_next(s, ph.sample(s, &mut rng), pr.sample(s, &mut rng), &mut rng);
        counts[s][next] += 1;
    }
    for s in 0..3 {
        let total: usize = counts[s].iter().sum();
        for j in 0..3 {
            assert!((counts[s][j] as f64 / total as f64 - t[(s, j)]).abs() < 3e-3);
        }
    }
}

#[test]
fn occupancy_and_mi_match_geometric_rollouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gamma = 0.9;
    let spec = DiscountSpec::future(gamma).unwrap();
    for _ in 0..3 {
        let mdp = TabularMdp::random(5, 3, 2, 0.5, &mut rng).unwrap();
        let ph = Policy::random(5, 3, &mut rng);
        let pr = Policy::random(5, 2, &mut rng);
        let s = 2;
        let counts = sample_futures(&mdp, &ph, &pr, gamma, s, 200_000, &mut rng);
        let (p, se) = counts.marginal();
        let exact = discounted_occupancy(&mdp, &ph, &pr, &spec, Condition::state(s)).unwrap();
        let tv: f64 = p.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 1e-2, "tv {tv}");
        assert!(max_z(&p, &se, &exact) < 4.5);
        for a in 0..3 {
            let (pa, sea) = counts.conditional(a).unwrap();
            let exact = discounted_occupancy(&mdp, &ph, &pr, &spec, Condition::human(s, a)).unwrap();
            assert!(max_z(&pa, &sea, &exact) < 4.5);
        }
        let (mi, mi_se) = counts.plug_in_mi();
        let want = conditional_mi(&mdp, &ph, &pr, &spec, s).unwrap();
        assert!((mi - want).abs() < 4.5 * mi_se + 1e-4, "{mi} vs {want} (se {mi_se})");
    }
}

#[test]
fn selector_total_matches_truncated_rollout() {
    // a^H picks the next state; uniform policies
    let mdp = TabularMdp::deterministic(2, 2, 1, |_, a, _| a, vec![1.0, 0.0]).unwrap();
    let (ph, pr) = (Policy::uniform(2, 2), Policy::uniform(2, 1));
    let spec = DiscountSpec::future(0.5).unwrap().with_visitation(0.9).unwrap();
    let report = effective_empowerment(&mdp, &ph, &pr, &spec).unwrap();
    // from either state the human's choice fixes s_{t+1}: I = ln 2 - (mixing of later steps)
    let per = conditional_mi(&mdp, &ph, &pr, &spec, 0).unwrap();
    assert!((report.total_empowerment - per / (1.0 - 0.9)).abs() < 1e-9);
    // truncated sum_t 0.9^t E[I(s_t)] with the exact state marginals
    let t = marginal_chain(&mdp, &ph, &pr).unwrap();
    let mut dist = [1.0, 0.0];
    let mut total = 0.0;
    for step in 0..=200 {
        let i: f64 = (0..2).map(|s| dist[s] * conditional_mi(&mdp, &ph, &pr, &spec, s).unwrap()).sum();
        total += 0.9f64.powi(step) * i;
        dist = [
            dist[0] * t[(0, 0)] + dist[1] * t[(1, 0)],
            dist[0] * t[(0, 1)] + dist[1] * t[(1, 1)],
        ];
    }
    assert!((total - report.total_empowerment).abs() < 1e-3);
    let d = discounted_state_visitation(&mdp, &ph, &pr, &spec).unwrap();
    assert!((d.iter().sum::<f64>() - 10.0).abs() < 1e-6);
}
