//! Evaluation and defense contracts: accuracy accounting, transfer-matrix
//! identities, randomized-switch behavior, and the feature-distance probe.

use rst_core::{
    evaluate, feature_distance, r2s_evaluate, r2s_predict, search_rst, transfer_matrix,
    AdaptiveAttack, AttackConfig, AttackNorm, DataSplit, InitMethod, InitSpec, Network,
    NetworkSpec, Prng, R2sMode, R2sPolicy, Schedule, SparsityPattern, Tensor,
};

fn balanced_split(classes: usize, per_class: usize, features: usize, seed: u64) -> DataSplit {
    let mut prng = Prng::new(seed);
    let n = classes * per_class;
    let images = Tensor::new(
        &[n, 1, 1, features],
        prng.vec_uniform(n * features, 0.0, 1.0),
    )
    .unwrap();
    let labels = (0..n).map(|i| i % classes).collect();
    DataSplit::new(images, labels, classes).unwrap()
}

/// Linear net that always predicts the same class (all-zero weights make
/// every logit zero and argmax settles on class 0).
fn constant_classifier(features: usize, classes: usize) -> Network {
    let spec = NetworkSpec::toy_linear((1, 1, features), classes);
    let mut net = Network::new(
        spec,
        InitSpec::new(InitMethod::KaimingNormal, 1),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    let shape = net.weights()[0].theta().shape().to_vec();
    let numel = net.weights()[0].theta().numel();
    net.weights_mut()[0]
        .set_theta(Tensor::new(&shape, vec![0.0; numel]).unwrap())
        .unwrap();
    net
}

/// Linear net that always predicts `class` on positive inputs.
fn biased_classifier(features: usize, classes: usize, class: usize) -> Network {
    let spec = NetworkSpec::toy_linear((1, 1, features), classes);
    let mut net = Network::new(
        spec,
        InitSpec::new(InitMethod::KaimingNormal, 1),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    let mut theta = vec![-10.0; classes * features];
    for f in 0..features {
        theta[class * features + f] = 10.0;
    }
    net.weights_mut()[0]
        .set_theta(Tensor::new(&[classes, features], theta).unwrap())
        .unwrap();
    net
}

fn no_rs_pgd(eps: f64) -> AttackConfig {
    AttackConfig::pgd_linf(eps, eps / 4.0, 5, false, (0.0, 1.0)).unwrap()
}

#[test]
fn constant_classifier_scores_chance_on_balanced_split() {
    let split = balanced_split(10, 5, 4, 3);
    let net = constant_classifier(4, 10);
    let report = evaluate(&net, &split, &[], 0).unwrap();
    assert_eq!(report.n, 50);
    assert!((report.natural_acc - 0.10).abs() < 1e-12);
}

#[test]
fn null_attack_equals_natural_accuracy() {
    let split = balanced_split(3, 8, 4, 5);
    let net = Network::new(
        NetworkSpec::toy_linear((1, 1, 4), 3),
        InitSpec::new(InitMethod::KaimingNormal, 7),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    let null = AttackConfig::new(AttackNorm::Linf, 0.0, 0.0, 1, false, (0.0, 1.0)).unwrap();
    let report = evaluate(&net, &split, &[null], 0).unwrap();
    assert_eq!(report.robust[0].acc, report.natural_acc);
}

// Evaluating shards separately and merging must match the single-shot
// result exactly (deterministic attacks, evaluation-mode statistics).
#[test]
fn sharded_evaluation_matches_sequential() {
    let split = balanced_split(3, 20, 6, 11);
    let net = Network::new(
        NetworkSpec::toy_mlp((1, 1, 6), 3),
        InitSpec::new(InitMethod::KaimingNormal, 13),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    let cfg = no_rs_pgd(0.08);
    let whole = evaluate(&net, &split, &[cfg.clone()], 9).unwrap();
    let cut = 23;
    let a = split.range(0, cut).unwrap();
    let b = split.range(cut, split.len()).unwrap();
    let ra = evaluate(&net, &a, &[cfg.clone()], 9).unwrap();
    let rb = evaluate(&net, &b, &[cfg], 9).unwrap();
    let merged_nat =
        (ra.natural_acc * a.len() as f64 + rb.natural_acc * b.len() as f64) / split.len() as f64;
    let merged_rob = (ra.robust[0].acc * a.len() as f64 + rb.robust[0].acc * b.len() as f64)
        / split.len() as f64;
    assert_eq!(whole.natural_acc, merged_nat);
    assert_eq!(whole.robust[0].acc, merged_rob);
}

fn three_tickets(seed: u64) -> Vec<Network> {
    (0..3)
        .map(|i| {
            Network::new(
                NetworkSpec::toy_mlp((1, 1, 6), 3),
                InitSpec::new(InitMethod::SignedKaimingConstant, seed + i),
                (0.2 + 0.2 * i as f64).min(1.0),
                SparsityPattern::Element,
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn transfer_diagonal_matches_matched_evaluation() {
    let split = balanced_split(3, 10, 6, 17);
    let tickets = three_tickets(40);
    let refs: Vec<&Network> = tickets.iter().collect();
    let cfg = no_rs_pgd(0.06);
    let matrix = transfer_matrix(&refs, &split, &cfg, 21).unwrap();
    for (i, ticket) in tickets.iter().enumerate() {
        let report = evaluate(ticket, &split, &[cfg.clone()], 21).unwrap();
        assert_eq!(matrix.acc[i][i], report.robust[0].acc, "diagonal entry {i}");
    }
}

#[test]
fn duplicated_ticket_duplicates_row_and_column() {
    let split = balanced_split(3, 8, 6, 19);
    let tickets = three_tickets(50);
    let refs = vec![&tickets[0], &tickets[1], &tickets[0]];
    let cfg = no_rs_pgd(0.06);
    let m = transfer_matrix(&refs, &split, &cfg, 23).unwrap();
    assert_eq!(m.acc[0], m.acc[2], "duplicate attacker rows");
    for row in &m.acc {
        assert_eq!(row[0], row[2], "duplicate defender columns");
    }
}

#[test]
fn r2s_singleton_set_is_the_ticket_itself() {
    let split = balanced_split(3, 8, 6, 29);
    let tickets = three_tickets(60);
    let policy = R2sPolicy::uniform(1).unwrap();
    let preds = r2s_predict(
        &[&tickets[1]],
        &policy,
        &split.images,
        &mut Prng::new(4),
    )
    .unwrap();
    assert_eq!(preds, tickets[1].predict(&split.images).unwrap());

    // Robust accuracy of the singleton set equals the matched-attack
    // robust accuracy (degenerate 1x1 grid).
    let cfg = no_rs_pgd(0.06);
    let report = r2s_evaluate(
        &[&tickets[1]],
        &policy,
        &split,
        &cfg,
        AdaptiveAttack::None,
        R2sMode::Exact,
        31,
    )
    .unwrap();
    let matched = evaluate(&tickets[1], &split, &[cfg], 31).unwrap();
    assert_eq!(report.robust_acc, matched.robust[0].acc);
}

#[test]
fn point_mass_distribution_always_picks_first() {
    let split = balanced_split(2, 10, 4, 37);
    let a = biased_classifier(4, 2, 0);
    let b = biased_classifier(4, 2, 1);
    let policy = R2sPolicy::weighted(vec![1.0, 0.0]).unwrap();
    let preds = r2s_predict(&[&a, &b], &policy, &split.images, &mut Prng::new(5)).unwrap();
    assert!(preds.iter().all(|&p| p == 0), "always the first ticket");
}

#[test]
fn sampling_frequencies_match_distribution() {
    // Distinguishable constant classifiers expose the sampled ticket
    // through the prediction itself.
    let n = 10_000;
    let mut prng = Prng::new(41);
    let images = Tensor::new(&[n, 1, 1, 4], prng.vec_uniform(n * 4, 0.1, 1.0)).unwrap();
    let tickets = [
        biased_classifier(4, 3, 0),
        biased_classifier(4, 3, 1),
        biased_classifier(4, 3, 2),
    ];
    let refs: Vec<&Network> = tickets.iter().collect();
    let probs = vec![0.2, 0.3, 0.5];
    let policy = R2sPolicy::weighted(probs.clone()).unwrap();
    let preds = r2s_predict(&refs, &policy, &images, &mut Prng::new(43)).unwrap();
    for (k, &p) in probs.iter().enumerate() {
        let freq = preds.iter().filter(|&&c| c == k).count() as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (freq - p).abs() <= 3.0 * se,
            "ticket {k}: freq {freq} vs prob {p} (3se {})",
            3.0 * se
        );
    }
}

#[test]
fn exact_mode_is_weighted_transfer_average() {
    let split = balanced_split(3, 10, 6, 43);
    let tickets = three_tickets(70);
    let refs: Vec<&Network> = tickets.iter().collect();
    let cfg = no_rs_pgd(0.06);
    let probs = vec![0.5, 0.25, 0.25];
    let policy = R2sPolicy::weighted(probs.clone()).unwrap();
    let report = r2s_evaluate(
        &refs,
        &policy,
        &split,
        &cfg,
        AdaptiveAttack::None,
        R2sMode::Exact,
        47,
    )
    .unwrap();
    let m = transfer_matrix(&refs, &split, &cfg, 47).unwrap();
    let mut expected = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            expected += probs[i] * probs[j] * m.acc[i][j];
        }
    }
    assert!((report.robust_acc - expected).abs() < 1e-12);
}

#[test]
fn sampled_mode_converges_to_exact() {
    // 10^4 inputs: the Monte Carlo estimate must land within 2 points.
    let n = 10_000;
    let mut prng = Prng::new(53);
    let images = Tensor::new(&[n, 1, 1, 6], prng.vec_uniform(n * 6, 0.0, 1.0)).unwrap();
    let labels = (0..n).map(|i| i % 3).collect();
    let split = DataSplit::new(images, labels, 3).unwrap();
    let tickets = three_tickets(80);
    let refs: Vec<&Network> = tickets.iter().collect();
    let cfg = AttackConfig::pgd_linf(0.06, 0.015, 3, false, (0.0, 1.0)).unwrap();
    let policy = R2sPolicy::uniform(3).unwrap();
    let exact = r2s_evaluate(
        &refs,
        &policy,
        &split,
        &cfg,
        AdaptiveAttack::None,
        R2sMode::Exact,
        59,
    )
    .unwrap();
    let sampled = r2s_evaluate(
        &refs,
        &policy,
        &split,
        &cfg,
        AdaptiveAttack::None,
        R2sMode::Sampled,
        59,
    )
    .unwrap();
    assert!(
        (exact.robust_acc - sampled.robust_acc).abs() < 0.02,
        "exact {} vs sampled {}",
        exact.robust_acc,
        sampled.robust_acc
    );
}

#[test]
fn shuffled_split_leaves_exact_mode_unchanged() {
    let split = balanced_split(3, 12, 6, 61);
    let tickets = three_tickets(90);
    let refs: Vec<&Network> = tickets.iter().collect();
    let cfg = no_rs_pgd(0.05);
    let policy = R2sPolicy::uniform(3).unwrap();
    let before = r2s_evaluate(
        &refs,
        &policy,
        &split,
        &cfg,
        AdaptiveAttack::None,
        R2sMode::Exact,
        67,
    )
    .unwrap();

    let mut order: Vec<usize> = (0..split.len()).collect();
    Prng::new(71).shuffle(&mut order);
    let shuffled = split.gather(&order).unwrap();
    let after = r2s_evaluate(
        &refs,
        &policy,
        &shuffled,
        &cfg,
        AdaptiveAttack::None,
        R2sMode::Exact,
        67,
    )
    .unwrap();
    assert_eq!(before.robust_acc, after.robust_acc);
    assert_eq!(before.natural_acc, after.natural_acc);
}

#[test]
fn adaptive_attacks_run_and_stay_in_bounds() {
    let split = balanced_split(3, 8, 6, 73);
    let tickets = three_tickets(100);
    let refs: Vec<&Network> = tickets.iter().collect();
    let cfg = no_rs_pgd(0.06);
    let policy = R2sPolicy::uniform(3).unwrap();
    for adaptive in [AdaptiveAttack::Eot, AdaptiveAttack::Ensemble] {
        for mode in [R2sMode::Exact, R2sMode::Sampled] {
            let r = r2s_evaluate(&refs, &policy, &split, &cfg, adaptive, mode, 79).unwrap();
            assert!((0.0..=1.0).contains(&r.robust_acc));
            assert!((0.0..=1.0).contains(&r.natural_acc));
        }
    }
}

#[test]
fn feature_distance_zero_noise_is_zero() {
    let mut prng = Prng::new(83);
    let split = DataSplit::new(
        Tensor::new(&[6, 1, 3, 3], prng.vec_uniform(54, 0.0, 1.0)).unwrap(),
        (0..6).map(|i| i % 2).collect(),
        2,
    )
    .unwrap();
    let net = Network::new(
        NetworkSpec::toy_conv((1, 3, 3), 2),
        InitSpec::new(InitMethod::KaimingNormal, 17),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    let d0 = feature_distance(&net, &split, 0.0, 89).unwrap();
    assert_eq!(d0, 0.0);
    let d = feature_distance(&net, &split, 0.1, 89).unwrap();
    assert!(d >= 0.0);
}

#[test]
fn feature_distance_requires_a_conv_layer() {
    let mut prng = Prng::new(97);
    let split = DataSplit::new(
        Tensor::new(&[4, 1, 1, 2], prng.vec_uniform(8, 0.0, 1.0)).unwrap(),
        vec![0, 1, 0, 1],
        2,
    )
    .unwrap();
    let net = Network::new(
        NetworkSpec::toy_linear((1, 1, 2), 2),
        InitSpec::new(InitMethod::KaimingNormal, 19),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    assert!(feature_distance(&net, &split, 0.1, 0).is_err());
}

// Reconstructing a checkpoint (init spec + masks + norm stats) must
// reproduce recorded accuracy exactly, including through batch-norm state.
#[test]
fn instantiated_checkpoint_reproduces_accuracy_exactly() {
    let mut prng = Prng::new(0xAB);
    let n = 40;
    let split = DataSplit::new(
        Tensor::new(&[n, 1, 8, 8], prng.vec_uniform(n * 64, 0.0, 1.0)).unwrap(),
        (0..n).map(|i| i % 2).collect(),
        2,
    )
    .unwrap();
    let spec = NetworkSpec::desk_cnn((1, 8, 8), 2);
    let outcome = search_rst(
        &spec,
        InitSpec::new(InitMethod::SignedKaimingConstant, 0xCD),
        &split,
        0.2,
        SparsityPattern::Element,
        &no_rs_pgd(0.05),
        &Schedule::new(2, 8, 0.1, 0.9, vec![], 0.1).unwrap(),
        Prng::new(0xEF),
    )
    .unwrap();
    let cfg = no_rs_pgd(0.05);
    let recorded = evaluate(&outcome.net, &split, &[cfg.clone()], 101).unwrap();

    let restored = outcome.checkpoint.instantiate().unwrap();
    let replayed = evaluate(&restored, &split, &[cfg], 101).unwrap();
    assert_eq!(recorded.natural_acc, replayed.natural_acc);
    assert_eq!(recorded.robust[0].acc, replayed.robust[0].acc);
}
