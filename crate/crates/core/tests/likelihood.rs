mod common;

use common::{dataset, Lcg};
use poolcal_core::{
    clr_stratum_loglik, pooled_logpseudolik, pooled_score, pseudo_stratum_loglik, Beta, PooledDataset,
    StratumProbTable,
};
use proptest::prelude::*;

/// Independent enumeration of the marginalized conditional likelihood,
/// written out term by term without log-space tricks.
fn enumerate_pseudo(beta_x: &[f64], beta_z: &[f64], probs: &[Vec<f64>], z: &[Vec<f64>]) -> f64 {
    let n = probs.len();
    let p = probs[0].len();
    let mut total = 0.0;
    let mut idx = vec![0usize; n];
    loop {
        let weight: f64 = (0..n).map(|i| probs[i][idx[i]]).product();
        let lin = |i: usize| {
            let level = if idx[i] == 0 { 0.0 } else { beta_x[idx[i] - 1] };
            level + beta_z.iter().zip(&z[i]).map(|(b, v)| b * v).sum::<f64>()
        };
        let denom: f64 = (0..n).map(|i| lin(i).exp()).sum();
        total += weight * lin(0).exp() / denom;
        let mut k = 0;
        loop {
            if k == n {
                return total.ln();
            }
            idx[k] += 1;
            if idx[k] < p {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn random_table(rng: &mut Lcg, n: usize, p: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng.simplex(p)).collect()
}

#[test]
fn four_term_enumeration_for_binary_pairs() {
    let mut rng = Lcg(4);
    for _ in 0..50 {
        let probs = random_table(&mut rng, 2, 2);
        let b = rng.range(-2.0, 2.0);
        // The four assignments (case level, control level), by hand.
        let (p, q) = (&probs[0], &probs[1]);
        let r = b.exp();
        let hand = p[0] * q[0] * 0.5
            + p[0] * q[1] * (1.0 / (1.0 + r))
            + p[1] * q[0] * (r / (r + 1.0))
            + p[1] * q[1] * 0.5;
        let beta = Beta::new(vec![b], vec![]).unwrap();
        let table = StratumProbTable::new(probs.clone()).unwrap();
        let got = pseudo_stratum_loglik(&beta, &table, &[vec![], vec![]]).unwrap();
        assert!((got - hand.ln()).abs() <= 1e-12, "{got} vs {}", hand.ln());
    }
}

#[test]
fn matches_independent_enumeration_with_covariates() {
    let mut rng = Lcg(17);
    for &(p, m, k) in &[(2, 1, 0), (3, 2, 2), (3, 1, 1), (4, 3, 2)] {
        let n = m + 1;
        let probs = random_table(&mut rng, n, p);
        let z: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.range(-1.0, 1.0)).collect())
            .collect();
        let bx: Vec<f64> = (0..p - 1).map(|_| rng.range(-1.5, 1.5)).collect();
        let bz: Vec<f64> = (0..k).map(|_| rng.range(-1.0, 1.0)).collect();
        let beta = Beta::new(bx.clone(), bz.clone()).unwrap();
        let got = pseudo_stratum_loglik(&beta, &StratumProbTable::new(probs.clone()).unwrap(), &z).unwrap();
        let want = enumerate_pseudo(&bx, &bz, &probs, &z);
        assert!((got - want).abs() < 1e-12, "P={p} M={m} K={k}: {got} vs {want}");
    }
}

#[test]
fn case_position_probabilities_sum_to_one() {
    let mut rng = Lcg(5);
    for _ in 0..20 {
        let n = 2 + rng.below(3);
        let probs = random_table(&mut rng, n, 3);
        let z: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.range(-1.0, 1.0)]).collect();
        let beta = Beta::new(vec![rng.range(-2.0, 2.0), rng.range(-2.0, 2.0)], vec![0.7]).unwrap();
        let mut total = 0.0;
        for case in 0..n {
            let mut order: Vec<usize> = vec![case];
            order.extend((0..n).filter(|&i| i != case));
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| probs[i].clone()).collect();
            let zs: Vec<Vec<f64>> = order.iter().map(|&i| z[i].clone()).collect();
            let v = pseudo_stratum_loglik(&beta, &StratumProbTable::new(rows).unwrap(), &zs).unwrap();
            assert!(v <= 0.0);
            total += v.exp();
        }
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }
}

#[test]
fn controls_can_be_permuted() {
    let mut rng = Lcg(8);
    let probs = random_table(&mut rng, 4, 3);
    let z: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64 * 0.3]).collect();
    let beta = Beta::new(vec![0.4, -0.9], vec![0.2]).unwrap();
    let base = pseudo_stratum_loglik(&beta, &StratumProbTable::new(probs.clone()).unwrap(), &z).unwrap();
    let order = [0, 3, 1, 2];
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| probs[i].clone()).collect();
    let zs: Vec<Vec<f64>> = order.iter().map(|&i| z[i].clone()).collect();
    let perm = pseudo_stratum_loglik(&beta, &StratumProbTable::new(rows).unwrap(), &zs).unwrap();
    assert!((base - perm).abs() < 1e-14);
}

fn three_stratum_fixture() -> PooledDataset {
    dataset(
        &[
            ("A", "1", true, 10.0, None),
            ("A", "1", false, 12.0, Some(2)),
            ("A", "2", true, 30.0, None),
            ("A", "2", false, 5.0, None),
            ("A", "2", false, 22.0, Some(1)),
            ("B", "1", true, 18.0, Some(3)),
            ("B", "1", false, 9.0, None),
        ],
        3,
    )
}

fn tables_for(ds: &PooledDataset, rng: &mut Lcg) -> Vec<StratumProbTable> {
    ds.strata()
        .map(|(_, s)| StratumProbTable::new(random_table(rng, s.len(), ds.category_count())).unwrap())
        .collect()
}

#[test]
fn pooled_value_is_the_sum_of_strata() {
    let ds = three_stratum_fixture();
    let mut rng = Lcg(21);
    let tables = tables_for(&ds, &mut rng);
    let beta = Beta::new(vec![-0.3, 0.8], vec![]).unwrap();
    let pooled = pooled_logpseudolik(&beta, &ds, &tables).unwrap();
    let by_hand: f64 = ds
        .strata()
        .zip(&tables)
        .map(|((_, s), t)| enumerate_pseudo(&beta.x, &[], t.rows(), &vec![vec![]; s.len()]))
        .sum();
    assert!((pooled - by_hand).abs() < 1e-12);

    let zero = Beta::zeros(3, 0);
    let at_zero = pooled_logpseudolik(&zero, &ds, &tables).unwrap();
    let expected: f64 = ds.strata().map(|(_, s)| -(s.len() as f64).ln()).sum();
    assert!((at_zero - expected).abs() < 1e-12);
}

#[test]
fn single_stratum_pooled_equals_stratum_value() {
    let ds = dataset(&[("A", "1", true, 1.0, None), ("A", "1", false, 2.0, None)], 2);
    let table = StratumProbTable::new(vec![vec![0.3, 0.7], vec![0.9, 0.1]]).unwrap();
    let beta = Beta::new(vec![1.3], vec![]).unwrap();
    let a = pooled_logpseudolik(&beta, &ds, std::slice::from_ref(&table)).unwrap();
    let b = pseudo_stratum_loglik(&beta, &table, &[vec![], vec![]]).unwrap();
    assert_eq!(a, b);
}

/// Random pooled fixture with covariates.
fn random_fixture(rng: &mut Lcg, p: usize, m: usize, k: usize) -> (PooledDataset, Vec<StratumProbTable>) {
    use poolcal_core::data::{assemble, Record};
    use poolcal_core::CategoryScheme;
    let mut records = Vec::new();
    for s in 0..2 {
        for j in 0..4 {
            for i in 0..=m {
                records.push(Record {
                    row: records.len() + 1,
                    study_id: format!("S{s}"),
                    stratum_id: format!("{j}"),
                    case: i == 0,
                    local_value: Some(rng.range(0.0, 50.0)),
                    covariates: (0..k).map(|_| rng.range(-1.0, 1.0)).collect(),
                    ..Record::default()
                });
            }
        }
    }
    let ds = assemble(records, &CategoryScheme::direct(p).unwrap(), k).unwrap();
    let tables = tables_for(&ds, rng);
    (ds, tables)
}

#[test]
fn analytic_score_matches_central_differences() {
    let mut rng = Lcg(2024);
    let mut fixtures = 0;
    for p in [2, 3] {
        for m in [1, 2] {
            for k in [0, 2] {
                for _ in 0..3 {
                    let (ds, tables) = random_fixture(&mut rng, p, m, k);
                    let d = p - 1 + k;
                    let flat: Vec<f64> = (0..d).map(|_| rng.range(-1.0, 1.0)).collect();
                    let score = pooled_score(&Beta::from_flat(&flat, p), &ds, &tables).unwrap();
                    for c in 0..d {
                        let h = 1e-5;
                        let mut up = flat.clone();
                        up[c] += h;
                        let mut down = flat.clone();
                        down[c] -= h;
                        let fd = (pooled_logpseudolik(&Beta::from_flat(&up, p), &ds, &tables).unwrap()
                            - pooled_logpseudolik(&Beta::from_flat(&down, p), &ds, &tables).unwrap())
                            / (2.0 * h);
                        let rel = (score[c] - fd).abs() / score[c].abs().max(1e-3);
                        assert!(rel <= 1e-6, "P={p} M={m} K={k} c={c}: {} vs {fd}", score[c]);
                    }
                    fixtures += 1;
                }
            }
        }
    }
    assert!(fixtures >= 20);
}

#[test]
fn degenerate_tables_give_the_clr_score() {
    let mut rng = Lcg(77);
    let (ds, _) = random_fixture(&mut rng, 3, 2, 1);
    let cats: Vec<Vec<usize>> = ds
        .strata()
        .map(|(_, s)| (0..s.len()).map(|_| 1 + rng.below(3)).collect())
        .collect();
    let tables: Vec<StratumProbTable> = cats
        .iter()
        .map(|c| StratumProbTable::one_hot(c, 3).unwrap())
        .collect();
    let beta = Beta::new(vec![0.3, -0.5], vec![0.8]).unwrap();
    let score = pooled_score(&beta, &ds, &tables).unwrap();

    // Classical CLR score: x_case - sum_i softmax_i x_i.
    let mut want = vec![0.0; 3];
    for ((_, s), c) in ds.strata().zip(&cats) {
        let xs: Vec<[f64; 3]> = s
            .participants
            .iter()
            .zip(c)
            .map(|(p, &cat)| {
                [
                    f64::from(u8::from(cat == 2)),
                    f64::from(u8::from(cat == 3)),
                    p.covariates[0],
                ]
            })
            .collect();
        let eta: Vec<f64> = xs.iter().map(|x| 0.3 * x[0] - 0.5 * x[1] + 0.8 * x[2]).collect();
        let denom: f64 = eta.iter().map(|e| e.exp()).sum();
        for a in 0..3 {
            let mean: f64 = xs.iter().zip(&eta).map(|(x, e)| x[a] * e.exp() / denom).sum();
            want[a] += xs[0][a] - mean;
        }
        let one_hot_value = clr_stratum_loglik(
            &beta,
            c,
            &s.participants
                .iter()
                .map(|p| p.covariates.clone())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((one_hot_value - (eta[0] - denom.ln())).abs() < 1e-12);
    }
    for (g, w) in score.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn swapped_strata_cancel_at_null() {
    let ds = dataset(
        &[
            ("A", "1", true, 0.0, None),
            ("A", "1", false, 0.0, None),
            ("A", "2", true, 0.0, None),
            ("A", "2", false, 0.0, None),
        ],
        3,
    );
    let t1 = StratumProbTable::new(vec![vec![0.1, 0.3, 0.6], vec![0.5, 0.4, 0.1]]).unwrap();
    let t2 = StratumProbTable::new(vec![vec![0.5, 0.4, 0.1], vec![0.1, 0.3, 0.6]]).unwrap();
    let score = pooled_score(&Beta::zeros(3, 0), &ds, &[t1, t2]).unwrap();
    assert!(score.iter().all(|g| g.abs() < 1e-15), "{score:?}");
}

proptest! {
    #[test]
    fn null_beta_gives_uniform_case_probability(seed in any::<u64>(), n in 2usize..6, p in 2usize..5) {
        let mut rng = Lcg(seed);
        let table = StratumProbTable::new(random_table(&mut rng, n, p)).unwrap();
        let v = pseudo_stratum_loglik(&Beta::zeros(p, 0), &table, &vec![vec![]; n]).unwrap();
        prop_assert!((v + (n as f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn one_hot_tables_reduce_to_clr(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = Lcg(seed);
        let cats: Vec<usize> = (0..n).map(|_| 1 + rng.below(3)).collect();
        let z: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.range(-2.0, 2.0)]).collect();
        let beta = Beta::new(vec![rng.range(-3.0, 3.0), rng.range(-3.0, 3.0)], vec![rng.range(-1.0, 1.0)]).unwrap();
        let a = pseudo_stratum_loglik(&beta, &StratumProbTable::one_hot(&cats, 3).unwrap(), &z).unwrap();
        let b = clr_stratum_loglik(&beta, &cats, &z).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn pseudo_loglik_is_a_log_probability(seed in any::<u64>(), n in 2usize..5) {
        let mut rng = Lcg(seed);
        let table = StratumProbTable::new(random_table(&mut rng, n, 3)).unwrap();
        let beta = Beta::new(vec![rng.range(-5.0, 5.0), rng.range(-5.0, 5.0)], vec![]).unwrap();
        let v = pseudo_stratum_loglik(&beta, &table, &vec![vec![]; n]).unwrap();
        prop_assert!(v <= 0.0 && v.is_finite());
    }
}
