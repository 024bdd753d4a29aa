use pcolab::losses::{
    binarize_pairs, binary_objective, gate, pair_objective, pairwise_margin, reference_logprobs, score_pair,
    CandidateSampler, LossConfig, LossVariant, PreferencePair,
};
use pcolab::numerics::{rng, Graph};
use pcolab::tinylm::{LmConfig, TinyLm};
use proptest::prelude::*;

fn tiny(seed: u64) -> TinyLm<f64> {
    let cfg = LmConfig {
        vocab_size: 10,
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        max_seq_len: 12,
        init_std: 0.4,
        ..LmConfig::default()
    };
    TinyLm::new(cfg, seed).unwrap()
}

fn pair() -> PreferencePair {
    PreferencePair::new(vec![3, 4], vec![5, 6, 7], vec![8, 8, 9, 2])
}

fn objective(model: &TinyLm<f64>, pairs: &[PreferencePair], cfg: &LossConfig, seed: u64) -> (f64, Vec<f64>) {
    let reference = reference_logprobs(model, pairs).unwrap();
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let mut s = CandidateSampler::new(seed);
    let loss = pair_objective(&mut g, &b, pairs, cfg, &mut s, Some(&reference)).unwrap();
    let v = g.scalar_value(loss).unwrap();
    g.backward(loss).unwrap();
    let grad = b
        .vars()
        .iter()
        .zip(model.params.tensors())
        .flat_map(|(&x, t)| g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    (v, grad)
}

proptest! {
    #[test]
    fn gate_is_decreasing(m in -50.0..50.0f64, d in 1e-3..10.0f64, b in -5.0..5.0f64, tau in 0.1..10.0f64) {
        prop_assert!(gate(m + d, b, tau) <= gate(m, b, tau));
        prop_assert!((0.0..=1.0).contains(&gate(m, b, tau)));
        if ((b - m) / tau).abs() < 30.0 {
            prop_assert!(gate(m, b, tau) > 0.0 && gate(m, b, tau) < 1.0);
            prop_assert!(gate(m + d, b, tau) < gate(m, b, tau));
        }
    }

    #[test]
    fn gate_is_scale_invariant(m in -5.0..5.0f64, b in -5.0..5.0f64, tau in 0.1..10.0f64, c in 0.1..10.0f64) {
        prop_assert!((gate(c * m, c * b, c * tau) - gate(m, b, tau)).abs() < 1e-12);
    }

    #[test]
    fn gate_is_half_at_margin(b in -1e6..1e6f64, tau in 1e-6..1e6f64) {
        prop_assert_eq!(gate(b, b, tau), 0.5);
    }

    #[test]
    fn losses_are_non_negative_and_finite(seed in 0u64..1000, v in 0usize..6, alpha in 0.0..1.0f64, b in -3.0..3.0f64) {
        let cfg = LossConfig { variant: LossVariant::ALL[v], alpha, b, tau: 1.0, k: 3, ..LossConfig::default() };
        let (loss, grad) = objective(&tiny(seed), &[pair()], &cfg, seed);
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!(grad.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn gate_reaches_three_quarters() {
    let (b, tau) = (0.3, 2.0);
    assert!((gate(b - tau * 3f64.ln(), b, tau) - 0.75).abs() < 1e-12);
    assert!(gate(1e6, 0.0, 1.0) < 1e-100);
}

#[test]
fn margin_is_antisymmetric() {
    let m = tiny(1);
    let p = pair();
    let a = pairwise_margin(&m, &p, true).unwrap();
    let b = pairwise_margin(&m, &p.swapped(), true).unwrap();
    assert!((a + b).abs() < 1e-12);
    let same = PreferencePair::new(vec![3], vec![5, 6], vec![5, 6]);
    assert_eq!(pairwise_margin(&m, &same, false).unwrap(), 0.0);
}

#[test]
fn very_negative_offset_switches_the_loss_off() {
    let cfg = LossConfig {
        variant: LossVariant::PairwiseCringe,
        b: -1e4,
        tau: 1.0,
        ..LossConfig::default()
    };
    let (loss, grad) = objective(&tiny(2), &[pair()], &cfg, 0);
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&x| x == 0.0));
}

#[test]
fn hard_margin_above_offset_has_no_loss_or_gradient() {
    let model = tiny(3);
    let m = pairwise_margin(&model, &pair(), true).unwrap();
    let cfg = LossConfig {
        variant: LossVariant::HardMarginCringe,
        b: m - 0.1,
        ..LossConfig::default()
    };
    let (loss, grad) = objective(&model, &[pair()], &cfg, 0);
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|&x| x == 0.0));
    let below = LossConfig { b: m + 0.1, ..cfg };
    let bin = LossConfig {
        variant: LossVariant::BinaryCringe,
        ..cfg
    };
    assert!((objective(&model, &[pair()], &below, 4).0 - objective(&model, &[pair()], &bin, 4).0).abs() < 1e-12);
}

#[test]
fn dpo_at_reference_is_log_two() {
    let cfg = LossConfig {
        variant: LossVariant::Dpo,
        dpo_beta: 0.5,
        ..LossConfig::default()
    };
    let (loss, _) = objective(&tiny(4), &[pair(), pair().swapped()], &cfg, 0);
    assert!((loss - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_alpha_binary_is_winner_cross_entropy_over_all_tokens() {
    let model = tiny(5);
    let pairs = [pair()];
    let cfg = LossConfig {
        variant: LossVariant::BinaryCringe,
        alpha: 0.0,
        ..LossConfig::default()
    };
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let loss = binary_objective(&mut g, &b, &binarize_pairs(&pairs), &cfg, &mut CandidateSampler::new(0)).unwrap();
    let got = g.scalar_value(loss).unwrap();
    let ce = -model.sequence_logprob(&pairs[0].winner_pr(), false).unwrap();
    assert!((got - ce / 7.0).abs() < 1e-12);
}

#[test]
fn a_small_step_does_not_shrink_the_margin() {
    let cfg = LossConfig {
        variant: LossVariant::PairwiseCringe,
        alpha: 0.5,
        k: 3,
        b: 0.0,
        tau: 1.0,
        ..LossConfig::default()
    };
    let mut ok = 0;
    for i in 0..100u64 {
        let model = tiny(1000 + i);
        let mut r = rng::rng_for(i, &[9]);
        use rand::Rng as _;
        let mut toks = |n: usize| (0..n).map(|_| r.random_range(3..10)).collect::<Vec<usize>>();
        let p = PreferencePair::new(toks(2), toks(3), toks(3));
        if p.winner == p.loser {
            ok += 1;
            continue;
        }
        let m0 = pairwise_margin(&model, &p, true).unwrap();
        let (_, grad) = objective(&model, std::slice::from_ref(&p), &cfg, i);
        let mut stepped = model.clone();
        let mut off = 0;
        for t in 0..stepped.params.len() {
            for x in stepped.params.get_mut(t).data_mut() {
                *x -= 1e-3 * grad[off];
                off += 1;
            }
        }
        let m1 = pairwise_margin(&stepped, &p, true).unwrap();
        ok += (m1 >= m0) as usize;
    }
    assert!(ok >= 95, "{ok}/100");
}

#[test]
fn scored_pairs_share_the_prompt() {
    let model = tiny(6);
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let sp = score_pair(&mut g, &b, &pair()).unwrap();
    assert_eq!(sp.winner.valid(), 3);
    assert_eq!(sp.loser.valid(), 4);
}
