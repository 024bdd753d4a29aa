use pcolab::evalkit::repeat_at_n;
use pcolab::losses::{Label, PreferencePair};
use pcolab::preferences::{
    best_worst_of_n, median_labels, mine_best_worst, mine_repetition_pairs, select_best_worst, PreferenceDataset,
    Provenance, RewardModel, SampleSpec,
};
use pcolab::numerics::rng;
use pcolab::tinylm::{DecodeStrategy, LmConfig, TinyLm, Vocab};
use proptest::prelude::*;

fn cfg() -> LmConfig {
    LmConfig {
        vocab_size: 12,
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 8,
        max_seq_len: 24,
        ..LmConfig::default()
    }
}

fn vocab() -> Vocab {
    Vocab::new(&(3..12).map(|i| format!("t{i}")).collect::<Vec<_>>()).unwrap()
}

fn pairs(n: usize, offset: usize) -> Vec<PreferencePair> {
    (0..n)
        .map(|i| PreferencePair::new(vec![3 + i % 5], vec![4, 5 + (i + offset) % 6], vec![6, 7]))
        .collect()
}

#[test]
fn looping_model_yields_a_pair_per_prompt() {
    let model = TinyLm::<f64>::two_cycle(cfg(), 4, 7).unwrap();
    let prompts: Vec<Vec<usize>> = (0..10).map(|i| vec![3 + i % 8, 5]).collect();
    let out = mine_repetition_pairs(&model, &prompts, 3, 12).unwrap();
    assert_eq!(out.dataset.len(), 10);
    assert_eq!(out.discarded, 0);
    assert_eq!(out.fallbacks, 0);
    for e in out.dataset.entries() {
        assert_eq!(repeat_at_n(&e.pair.prompt, &e.pair.winner, 3), 0);
        assert!(repeat_at_n(&e.pair.prompt, &e.pair.loser, 3) > 0);
    }
}

#[test]
fn non_repeating_greedy_output_is_discarded() {
    let model = TinyLm::<f64>::two_cycle(cfg(), 4, 7).unwrap();
    let out = mine_repetition_pairs(&model, &[vec![3, 5]], 3, 3).unwrap();
    assert_eq!(out.dataset.len(), 0);
    assert_eq!(out.discarded, 1);
}

#[test]
fn best_and_worst_follow_the_tie_rule() {
    assert_eq!(select_best_worst(&[3.0, 1.0, 4.0, 1.0]), (2, 1));
    assert_eq!(select_best_worst(&[2.0, 5.0]), (1, 0));
}

proptest! {
    #[test]
    fn selection_is_affine_invariant(r in prop::collection::vec(-10.0..10.0f64, 2..12), a in 0.1..5.0f64, c in -3.0..3.0f64) {
        let t: Vec<f64> = r.iter().map(|x| a * x + c).collect();
        prop_assert_eq!(select_best_worst(&r), select_best_worst(&t));
    }

    #[test]
    fn median_split_is_balanced(r in prop::collection::vec(-10.0..10.0f64, 1..40)) {
        let labels = median_labels(&r);
        let pos = labels.iter().filter(|l| **l == Some(Label::Positive)).count();
        let neg = labels.iter().filter(|l| **l == Some(Label::Negative)).count();
        prop_assert_eq!(pos, neg);
    }

    #[test]
    fn merge_adds_sizes_and_counts(a in 0usize..20, b in 0usize..20) {
        let x = PreferenceDataset::from_pairs(pairs(a, 0), Provenance::Original).unwrap();
        let y = PreferenceDataset::from_pairs(pairs(b, 1), Provenance::Mined(2)).unwrap();
        let m = PreferenceDataset::merge(&x, &y);
        prop_assert_eq!(m.len(), a + b);
        let counts = m.provenance_counts();
        prop_assert_eq!(counts.get("original").copied().unwrap_or(0), a);
        prop_assert_eq!(counts.get("mined_iteration_2").copied().unwrap_or(0), b);
        let bal = PreferenceDataset::merge_balanced(&x, &y, 7);
        if a > 0 && b > 0 {
            prop_assert_eq!(bal.len(), 2 * a.min(b));
        }
    }
}

#[test]
fn merging_with_empty_is_identity() {
    let a = PreferenceDataset::from_pairs(pairs(4, 0), Provenance::Original).unwrap();
    assert_eq!(PreferenceDataset::merge(&a, &PreferenceDataset::new()), a);
}

#[test]
fn binarize_splits_every_pair() {
    let d = PreferenceDataset::from_pairs(pairs(10, 0), Provenance::Original).unwrap();
    let items = d.binarize().items;
    assert_eq!(items.len(), 20);
    assert_eq!(items.iter().filter(|i| i.label == Label::Positive).count(), 10);
    assert!(PreferenceDataset::new().binarize().items.is_empty());
}

#[test]
fn jsonl_round_trip() {
    let mut d = PreferenceDataset::new();
    d.push(PreferencePair::new(vec![3, 4], vec![5, 2], vec![6, 6, 2]), Provenance::Mined(1), Some([1.5, -0.5]))
        .unwrap();
    d.push(PreferencePair::new(vec![7], vec![8], vec![9]), Provenance::Original, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    d.save_jsonl(&path, &vocab()).unwrap();
    assert_eq!(PreferenceDataset::load_jsonl(&path, &vocab()).unwrap(), d);
    let missing = PreferenceDataset::load_jsonl(&dir.path().join("nope.jsonl"), &vocab());
    assert!(matches!(missing, Err(pcolab::Error::MissingArtifact(_))));
}

#[test]
fn sampled_pairs_prefer_the_higher_reward() {
    let model = TinyLm::<f64>::new(LmConfig { init_std: 0.5, ..cfg() }, 3).unwrap();
    let reward = RewardModel::hidden_linear(12, 5, 0.0);
    for i in 0..20 {
        let mut r = rng::rng_for(i, &[]);
        if let Some(c) = best_worst_of_n(&model, &[3, 4], &reward, 4, DecodeStrategy::Temperature(1.0), 8, &mut r).unwrap() {
            assert!(c.rewards[0] > c.rewards[1]);
            assert_eq!(reward.score(&c.pair.prompt, &c.pair.winner).unwrap(), c.rewards[0]);
        }
    }
    let spec = SampleSpec {
        n: 4,
        strategy: DecodeStrategy::Temperature(1.0),
        max_new_tokens: 8,
        seed: 1,
        iteration: 2,
    };
    let prompts: Vec<Vec<usize>> = (3..9).map(|t| vec![t]).collect();
    let a = mine_best_worst(&model, &prompts, &reward, &spec).unwrap();
    assert_eq!(a, mine_best_worst(&model, &prompts, &reward, &spec).unwrap());
    assert!(a.entries().iter().all(|e| e.provenance == Provenance::Mined(2)));
}
