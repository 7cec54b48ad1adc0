//! Attack contracts: ball and bounds invariants, closed-form optima on
//! linear models, identity cases, and the adaptive attacks' degenerate and
//! oracle checks.

use rst_core::{
    ensemble_perturb, eot_perturb, input_keys, perturb, AttackConfig, AttackNorm, InitMethod,
    InitSpec, Network, NetworkSpec, Prng, Reduction, SparsityPattern, Tape, Tensor,
};

/// Two-class linear model with logits [w.x, 0]: gradient of the label-1
/// loss w.r.t. x is a positive multiple of w.
fn linear_net(w: &[f64]) -> Network {
    let spec = NetworkSpec::toy_linear((1, 1, w.len()), 2);
    let init = InitSpec::new(InitMethod::KaimingNormal, 1);
    let mut net = Network::new(spec, init, 1.0, SparsityPattern::Element).unwrap();
    let mut theta = w.to_vec();
    theta.extend(core::iter::repeat(0.0).take(w.len()));
    net.weights_mut()[0]
        .set_theta(Tensor::new(&[2, w.len()], theta).unwrap())
        .unwrap();
    net
}

fn single(x: &[f64]) -> Tensor {
    Tensor::new(&[1, 1, 1, x.len()], x.to_vec()).unwrap()
}

fn loss_of(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = net.forward(&mut tape, xv, false, false).unwrap();
    let loss = tape.cross_entropy_logits(out.logits, y, Reduction::Sum).unwrap();
    tape.value(loss).item().unwrap()
}

#[test]
fn fgsm_is_epsilon_sign_of_gradient() {
    // Input gradient proportional to [0.3, -0.7, 0]; eps 0.1 gives
    // delta [0.1, -0.1, 0].
    let net = linear_net(&[0.3, -0.7, 0.0]);
    let x = single(&[0.2, 0.2, 0.2]);
    let cfg = AttackConfig::fgsm(0.1, (-10.0, 10.0)).unwrap();
    let adv = perturb(&net, &x, &[1], &cfg, &Prng::new(0), &[0]).unwrap();
    let delta: Vec<f64> = adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    assert!((delta[0] - 0.1).abs() < 1e-12);
    assert!((delta[1] + 0.1).abs() < 1e-12);
    assert_eq!(delta[2], 0.0, "sign(0) must be 0");
}

#[test]
fn pgd_single_step_equals_fgsm() {
    let net = linear_net(&[0.5, -0.25, 0.8]);
    let x = single(&[0.1, 0.4, -0.3]);
    let fgsm = AttackConfig::fgsm(0.07, (-10.0, 10.0)).unwrap();
    let pgd = AttackConfig::pgd_linf(0.07, 0.07, 1, false, (-10.0, 10.0)).unwrap();
    let a = perturb(&net, &x, &[1], &fgsm, &Prng::new(0), &[0]).unwrap();
    let b = perturb(&net, &x, &[1], &pgd, &Prng::new(0), &[0]).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn l2_step_normalizes_and_projects() {
    // Gradient direction [3, 4]; step alpha 5 lands on [3, 4], radial
    // projection to the unit ball gives [0.6, 0.8].
    let net = linear_net(&[3.0, 4.0]);
    let x = single(&[0.0, 0.0]);
    let cfg = AttackConfig::pgd_l2(1.0, 5.0, 1, false, (-10.0, 10.0)).unwrap();
    let adv = perturb(&net, &x, &[1], &cfg, &Prng::new(0), &[0]).unwrap();
    assert!((adv.data()[0] - 0.6).abs() < 1e-9);
    assert!((adv.data()[1] - 0.8).abs() < 1e-9);
}

#[test]
fn linf_pgd_reaches_closed_form_optimum_on_linear_model() {
    let w = [0.7, -1.3, 0.45, 2.0, -0.2];
    let net = linear_net(&w);
    let x = single(&[0.1, -0.2, 0.3, 0.0, 0.5]);
    let eps = 0.25;
    let cfg = AttackConfig::pgd_linf(eps, eps / 4.0, 10, false, (-10.0, 10.0)).unwrap();
    let adv = perturb(&net, &x, &[1], &cfg, &Prng::new(0), &[0]).unwrap();

    // Closed-form worst case: x + eps * sign(w).
    let optimum: Vec<f64> = x
        .data()
        .iter()
        .zip(&w)
        .map(|(xi, wi)| xi + eps * wi.signum())
        .collect();
    for (a, o) in adv.data().iter().zip(&optimum) {
        assert!((a - o).abs() < 1e-9, "coordinate off optimum: {a} vs {o}");
    }
    let achieved = loss_of(&net, &adv, &[1]);
    let best = loss_of(&net, &single(&optimum), &[1]);
    assert!((achieved - best).abs() < 1e-6);
}

// Linf and L2 budgets hold (with 1e-6 headroom) and outputs stay in bounds,
// over randomized inputs and configs, all variants.
#[test]
fn perturbations_respect_ball_and_bounds() {
    let mut prng = Prng::new(99);
    let spec = NetworkSpec::toy_mlp((1, 2, 2), 3);
    let net = Network::new(
        spec,
        InitSpec::new(InitMethod::KaimingNormal, 5),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    for case in 0..200 {
        let batch = 1 + prng.below(3);
        let x = Tensor::new(&[batch, 1, 2, 2], prng.vec_uniform(batch * 4, 0.0, 1.0)).unwrap();
        let y: Vec<usize> = (0..batch).map(|_| prng.below(3)).collect();
        let eps = prng.uniform(0.01, 0.5);
        let alpha = prng.uniform(0.005, 0.5);
        let steps = 1 + prng.below(6);
        let rs = prng.below(2) == 1;
        let norm = if prng.below(2) == 1 {
            AttackNorm::Linf
        } else {
            AttackNorm::L2
        };
        let cfg = AttackConfig::new(norm, eps, alpha, steps, rs, (0.0, 1.0)).unwrap();
        let keys = input_keys((case * 10) as u64, batch);
        let adv = perturb(&net, &x, &y, &cfg, &Prng::new(case as u64), &keys).unwrap();
        let per = 4;
        for b in 0..batch {
            let dx: Vec<f64> = adv.data()[b * per..(b + 1) * per]
                .iter()
                .zip(&x.data()[b * per..(b + 1) * per])
                .map(|(a, o)| a - o)
                .collect();
            match norm {
                AttackNorm::Linf => {
                    let linf = dx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    assert!(linf <= eps + 1e-6, "case {case}: linf {linf} > eps {eps}");
                }
                AttackNorm::L2 => {
                    let l2 = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!(l2 <= eps + 1e-6, "case {case}: l2 {l2} > eps {eps}");
                }
            }
        }
        assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn attacks_are_deterministic_given_seed() {
    let net = linear_net(&[0.4, -0.9, 0.1]);
    let x = single(&[0.5, 0.5, 0.5]);
    for rs in [false, true] {
        let cfg = AttackConfig::pgd_linf(0.2, 0.05, 5, rs, (0.0, 1.0)).unwrap();
        let a = perturb(&net, &x, &[0], &cfg, &Prng::new(33), &[7]).unwrap();
        let b = perturb(&net, &x, &[0], &cfg, &Prng::new(33), &[7]).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn eot_single_ticket_equals_plain_perturb() {
    let net = linear_net(&[1.0, -2.0]);
    let x = single(&[0.3, 0.1]);
    let cfg = AttackConfig::pgd_linf(0.1, 0.025, 4, false, (-5.0, 5.0)).unwrap();
    let plain = perturb(&net, &x, &[1], &cfg, &Prng::new(3), &[0]).unwrap();
    let eot = eot_perturb(&[&net], &x, &[1], &cfg, &Prng::new(3), &[0]).unwrap();
    assert_eq!(plain.data(), eot.data());
}

#[test]
fn eot_opposite_gradients_cancel() {
    // w and -w at a point with w.x = 0: per-ticket gradients are exactly
    // opposite, the mean is zero, and delta never moves.
    let a = linear_net(&[1.0, -1.0]);
    let b = linear_net(&[-1.0, 1.0]);
    let x = single(&[1.0, 1.0]);
    let cfg = AttackConfig::pgd_linf(0.3, 0.1, 5, false, (-5.0, 5.0)).unwrap();
    let adv = eot_perturb(&[&a, &b], &x, &[1], &cfg, &Prng::new(0), &[0]).unwrap();
    assert_eq!(adv.data(), x.data());
}

// Independent oracle: the EOT step direction equals the sign of the
// brute-force average of per-ticket gradients, computed here ticket by
// ticket on separate tapes.
#[test]
fn eot_matches_brute_force_gradient_average() {
    let spec = NetworkSpec::toy_mlp((1, 1, 4), 3);
    let t1 = Network::new(
        spec.clone(),
        InitSpec::new(InitMethod::KaimingNormal, 21),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    let t2 = Network::new(
        spec,
        InitSpec::new(InitMethod::KaimingNormal, 22),
        1.0,
        SparsityPattern::Element,
    )
    .unwrap();
    let x = Tensor::new(&[2, 1, 1, 4], vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.3, 0.8, 0.5]).unwrap();
    let y = vec![0, 2];

    let mut mean_grad = vec![0.0f64; 8];
    for net in [&t1, &t2] {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad());
        let out = net.forward(&mut tape, xv, false, false).unwrap();
        let loss = tape.cross_entropy_logits(out.logits, &y, Reduction::Sum).unwrap();
        tape.backward(loss).unwrap();
        for (m, g) in mean_grad.iter_mut().zip(tape.grad(xv).unwrap()) {
            *m += g / 2.0;
        }
    }

    let alpha = 0.05;
    let cfg = AttackConfig::pgd_linf(0.1, alpha, 1, false, (-5.0, 5.0)).unwrap();
    let adv = eot_perturb(&[&t1, &t2], &x, &y, &cfg, &Prng::new(0), &[0, 1]).unwrap();
    for i in 0..8 {
        let expected = x.data()[i] + alpha * mean_grad[i].signum();
        assert!(
            (adv.data()[i] - expected).abs() < 1e-9,
            "coordinate {i}: {} vs {}",
            adv.data()[i],
            expected
        );
    }
}

#[test]
fn ensemble_degenerate_cases_match_plain_attack() {
    let net = linear_net(&[0.6, 0.8, -1.0]);
    let x = single(&[0.2, 0.4, 0.6]);
    let cfg = AttackConfig::pgd_linf(0.15, 0.05, 3, false, (-5.0, 5.0)).unwrap();
    let plain = perturb(&net, &x, &[1], &cfg, &Prng::new(5), &[0]).unwrap();
    let single_set = ensemble_perturb(&[&net], &x, &[1], &cfg, &Prng::new(5), &[0]).unwrap();
    assert_eq!(plain.data(), single_set.data());
    // Two identical tickets average to the same distribution.
    let twin = ensemble_perturb(&[&net, &net], &x, &[1], &cfg, &Prng::new(5), &[0]).unwrap();
    assert_eq!(plain.data(), twin.data());
}

#[test]
fn ticket_set_validation() {
    let net = linear_net(&[1.0, 1.0]);
    let x = single(&[0.0, 0.0]);
    let cfg = AttackConfig::fgsm(0.1, (-1.0, 1.0)).unwrap();
    let empty: Vec<&Network> = Vec::new();
    assert!(eot_perturb(&empty, &x, &[0], &cfg, &Prng::new(0), &[0]).is_err());
    assert!(ensemble_perturb(&empty, &x, &[0], &cfg, &Prng::new(0), &[0]).is_err());
    // Label out of class range is rejected.
    assert!(perturb(&net, &x, &[2], &cfg, &Prng::new(0), &[0]).is_err());
}

#[test]
fn invalid_configs_rejected() {
    let b = (0.0, 1.0);
    assert!(AttackConfig::new(AttackNorm::Linf, -0.1, 0.1, 1, false, b).is_err());
    assert!(AttackConfig::new(AttackNorm::Linf, 0.1, -0.1, 1, false, b).is_err());
    assert!(AttackConfig::new(AttackNorm::Linf, 0.1, 0.1, 0, false, b).is_err());
    assert!(AttackConfig::new(AttackNorm::Linf, 0.1, 0.1, 1, false, (1.0, 0.0)).is_err());
    // The degenerate null attack is allowed.
    assert!(AttackConfig::new(AttackNorm::Linf, 0.0, 0.0, 1, false, b).is_ok());
}
