//! Verification harness: finite-difference gradients, the step-by-step
//! reference transcriptions, limit equivalences, the two gradient pathways
//! of the gated loss, candidate exclusion, and binarization consistency.
//! Every check is a report entry; nothing here panics on failure.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::sequence::{self, Pathways, ScoredPair, ScoredSeq};
use crate::losses::{
    binary_objective, cringe_candidates, cringe_token_loss, gate, pair_objective, score_pair, CandidateSampler, Label,
    LossConfig, LossVariant, PreferencePair,
};
use crate::numerics::gradcheck::{gradcheck_multi, DEFAULT_STEP};
use crate::numerics::rng::{self, stream, Rng};
use crate::numerics::{Graph, Tensor, Var};
use crate::preferences::{PreferenceDataset, Provenance};
use crate::tinylm::{LmConfig, TinyLm, Vocab};

use super::listing::{self, RefSeq};

/// Deliberate defects used to show the harness catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    /// The implementation under test detaches the gate.
    DetachedGate,
    /// The reference transcription uses a different `α`.
    PerturbedAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed error, or pass fraction for rate checks.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub mutation: Mutation,
    pub checks: Vec<Check>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4);
        for c in &self.checks {
            writeln!(
                f,
                "{:<w$}  {}  value={:.3e}  threshold={:.1e}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.value,
                c.threshold,
                c.detail
            )?;
        }
        Ok(())
    }
}

fn below(name: &str, value: f64, threshold: f64, detail: String) -> Check {
    Check {
        name: name.into(),
        passed: value < threshold,
        value,
        threshold,
        detail,
    }
}

fn failed(name: &str, threshold: f64, e: crate::Error) -> Check {
    Check {
        name: name.into(),
        passed: false,
        value: f64::NAN,
        threshold,
        detail: format!("error: {e}"),
    }
}

const VOCAB: usize = 10;

fn random_seq(r: &mut Rng, rows: usize, scale: f64) -> RefSeq {
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let logits = (0..rows * VOCAB).map(|_| normal.sample(r)).collect();
    let mut mask: Vec<bool> = (0..rows).map(|_| r.random::<f64>() < 0.8).collect();
    let keep = r.random_range(0..rows);
    mask[keep] = true;
    let targets = mask
        .iter()
        .map(|&m| if m { r.random_range(0..VOCAB) } else { Vocab::PAD_ID })
        .collect();
    RefSeq {
        vocab: VOCAB,
        logits,
        targets,
        mask,
    }
}

fn random_pairs(r: &mut Rng, n: usize) -> Vec<(RefSeq, RefSeq)> {
    (0..n)
        .map(|_| {
            let rw = r.random_range(2..=6);
            let rl = r.random_range(2..=6);
            (random_seq(r, rw, 2.0), random_seq(r, rl, 2.0))
        })
        .collect()
}

fn scored(g: &mut Graph<f64>, s: &RefSeq) -> Result<ScoredSeq> {
    let logits = g.leaf(vec![s.targets.len(), s.vocab], s.logits.clone(), true)?;
    Ok(scored_from(logits, s))
}

fn scored_from(logits: Var, s: &RefSeq) -> ScoredSeq {
    ScoredSeq {
        logits,
        targets: s.targets.clone(),
        mask: s.mask.clone(),
    }
}

/// The library loss for `variant` on logits-level pairs.
fn library_loss(
    g: &mut Graph<f64>,
    pairs: &[ScoredPair],
    cfg: &LossConfig,
    sampler: &mut CandidateSampler,
    reference: &[(f64, f64)],
    pathways: Pathways,
) -> Result<Var> {
    match cfg.variant {
        LossVariant::Ce => sequence::winner_ce(g, pairs),
        LossVariant::BinaryCringe => {
            let items: Vec<(ScoredSeq, Label)> = pairs
                .iter()
                .flat_map(|p| [(p.winner.clone(), Label::Positive), (p.loser.clone(), Label::Negative)])
                .collect();
            sequence::binary_cringe(g, &items, cfg, sampler)
        }
        LossVariant::PairwiseCringe => sequence::pairwise_cringe(g, pairs, cfg, sampler, pathways),
        LossVariant::HardMarginCringe => sequence::hard_margin_cringe(g, pairs, cfg, sampler),
        LossVariant::Dpo => sequence::dpo(g, pairs, reference, cfg.dpo_beta),
        LossVariant::Unlikelihood => sequence::unlikelihood_pairs(g, pairs, cfg.alpha),
    }
}

fn library_value(pairs: &[(RefSeq, RefSeq)], cfg: &LossConfig, seed: u64, reference: &[(f64, f64)]) -> Result<f64> {
    let mut g = Graph::new();
    let sp = pairs
        .iter()
        .map(|(w, l)| {
            Ok(ScoredPair {
                winner: scored(&mut g, w)?,
                loser: scored(&mut g, l)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = CandidateSampler::new(seed);
    let out = library_loss(&mut g, &sp, cfg, &mut s, reference, Pathways::default())?;
    g.scalar_value(out)
}

fn gradcheck_variant(variant: LossVariant, seed: u64) -> Check {
    let name = format!("gradcheck/{}", variant.cli_name());
    let threshold = 1e-4;
    let mut r = rng::rng_for(seed, &[stream::ORACLE, 1, variant as u64]);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for _ in 0..20 {
        let n = if variant == LossVariant::HardMarginCringe { 1 } else { r.random_range(1..=3) };
        let pairs = random_pairs(&mut r, n);
        let reference: Vec<(f64, f64)> = pairs.iter().map(|_| (r.random_range(-8.0..-1.0), r.random_range(-8.0..-1.0))).collect();
        let mut cfg = LossConfig {
            variant,
            alpha: r.random_range(0.1..1.0),
            k: r.random_range(1..=4),
            b: r.random_range(-1.0..1.0),
            tau: r.random_range(0.5..2.0),
            dpo_beta: r.random_range(0.1..1.0),
            normalize_margin: r.random::<bool>(),
        };
        if variant == LossVariant::HardMarginCringe {
            let m = listing::get_logprob(&pairs[0].0) - listing::get_logprob(&pairs[0].1);
            cfg.normalize_margin = true;
            cfg.b = m + if r.random::<bool>() { 0.5 } else { -0.5 };
        }
        let inputs: Vec<Tensor<f64>> = pairs
            .iter()
            .flat_map(|(w, l)| [w, l])
            .map(|s| Tensor::new(vec![s.targets.len(), s.vocab], s.logits.clone()).expect("shape"))
            .collect();
        let build = |g: &mut Graph<f64>, vars: &[Var], sampler: &mut CandidateSampler| -> Result<Var> {
            let sp: Vec<ScoredPair> = pairs
                .iter()
                .enumerate()
                .map(|(i, (w, l))| ScoredPair {
                    winner: scored_from(vars[2 * i], w),
                    loser: scored_from(vars[2 * i + 1], l),
                })
                .collect();
            library_loss(g, &sp, &cfg, sampler, &reference, Pathways::default())
        };
        let mut recorder = CandidateSampler::new(seed);
        let recorded = (|| -> Result<CandidateSampler> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .map(|t| g.leaf(t.shape().to_vec(), t.data().to_vec(), false))
                .collect::<Result<_>>()?;
            build(&mut g, &vars, &mut recorder)?;
            Ok(recorder)
        })();
        let recorded = match recorded {
            Ok(s) => s,
            Err(e) => return failed(&name, threshold, e),
        };
        let f = |g: &mut Graph<f64>, vars: &[Var]| build(g, vars, &mut CandidateSampler::replaying(&recorded));
        match gradcheck_multi(f, &inputs, DEFAULT_STEP) {
            Ok(rep) => {
                worst = worst.max(rep.max_rel_error);
                coords += rep.coordinates;
            }
            Err(e) => return failed(&name, threshold, e),
        }
    }
    below(&name, worst, threshold, format!("{coords} coordinates"))
}

fn listing_check(kind: LossVariant, seed: u64, mutation: Mutation) -> Check {
    let name = format!("listing/{}", kind.cli_name());
    let threshold = 1e-6;
    let mut r = rng::rng_for(seed, &[stream::ORACLE, 2, kind as u64]);
    let mut worst = 0.0f64;
    for batch in 0..100u64 {
        let n = r.random_range(1..=4);
        let pairs = random_pairs(&mut r, n);
        let cfg = LossConfig {
            variant: kind,
            alpha: r.random_range(0.0..1.0),
            k: r.random_range(1..=4),
            b: r.random_range(-2.0..2.0),
            tau: r.random_range(0.5..10.0),
            normalize_margin: true,
            ..LossConfig::default()
        };
        let oracle_alpha = match mutation {
            Mutation::PerturbedAlpha => cfg.alpha * 1.1 + 0.01,
            _ => cfg.alpha,
        };
        let draw_seed = rng::derive_seed(seed, &[stream::CRINGE, batch]);
        let expected = match kind {
            LossVariant::BinaryCringe => {
                let items: Vec<(RefSeq, bool)> = pairs
                    .iter()
                    .flat_map(|(w, l)| [(w.clone(), true), (l.clone(), false)])
                    .collect();
                listing::binary_cringe(&items, oracle_alpha, cfg.k, draw_seed)
            }
            LossVariant::HardMarginCringe => {
                listing::pairwise_cringe(&pairs, oracle_alpha, cfg.k, cfg.b, cfg.tau, true, draw_seed)
            }
            _ => listing::pairwise_cringe(&pairs, oracle_alpha, cfg.k, cfg.b, cfg.tau, false, draw_seed),
        };
        match library_value(&pairs, &cfg, draw_seed, &[]) {
            Ok(v) => worst = worst.max((v - expected).abs()),
            Err(e) => return failed(&name, threshold, e),
        }
    }
    below(&name, worst, threshold, "100 random batches".into())
}

fn limit_checks(seed: u64) -> Vec<Check> {
    let mut r = rng::rng_for(seed, &[stream::ORACLE, 3]);
    let mut worst_b = 0.0f64;
    let mut worst_tau = 0.0f64;
    let mut compared = 0;
    let mut err = None;
    for batch in 0..100u64 {
        let n = r.random_range(1..=4);
        let pairs = random_pairs(&mut r, n);
        let base = LossConfig {
            alpha: r.random_range(0.0..1.0),
            k: r.random_range(1..=4),
            ..LossConfig::default()
        };
        let s = rng::derive_seed(seed, &[stream::CRINGE, batch]);
        let wide = LossConfig {
            b: 1e9,
            variant: LossVariant::PairwiseCringe,
            ..base
        };
        let bin = LossConfig {
            variant: LossVariant::BinaryCringe,
            ..base
        };
        match (library_value(&pairs, &wide, s, &[]), library_value(&pairs, &bin, s, &[])) {
            (Ok(a), Ok(b)) => worst_b = worst_b.max((a - b).abs()),
            (Err(e), _) | (_, Err(e)) => err = Some(e),
        }
        // one pair per batch so the |M - b| condition is per comparison
        let single = &pairs[..1];
        let m = listing::get_logprob(&single[0].0) - listing::get_logprob(&single[0].1);
        let b = m + r.random_range(-1.0..1.0);
        if (m - b).abs() <= 1e-3 {
            continue;
        }
        let soft = LossConfig {
            b,
            tau: 1e-6,
            variant: LossVariant::PairwiseCringe,
            ..base
        };
        let hard = LossConfig {
            b,
            variant: LossVariant::HardMarginCringe,
            ..base
        };
        match (library_value(single, &soft, s, &[]), library_value(single, &hard, s, &[])) {
            (Ok(a), Ok(h)) => {
                worst_tau = worst_tau.max((a - h).abs());
                compared += 1;
            }
            (Err(e), _) | (_, Err(e)) => err = Some(e),
        }
    }
    if let Some(e) = err {
        return vec![failed("limit/b_to_infinity", 1e-6, e)];
    }
    let mut gate_ok = true;
    for _ in 0..100 {
        let x: f64 = r.random_range(-50.0..50.0);
        let t: f64 = r.random_range(1e-3..100.0);
        gate_ok &= gate(x, x, t) == 0.5;
        let mut g = Graph::<f64>::new();
        let m = g.scalar(x);
        let v = sequence::gate_var(&mut g, m, x, t).and_then(|v| g.scalar_value(v));
        gate_ok &= matches!(v, Ok(h) if h == 0.5);
    }
    vec![
        below("limit/b_to_infinity", worst_b, 1e-6, "pairwise at b=1e9 vs binary on binarized pairs".into()),
        below("limit/tau_to_zero", worst_tau, 1e-5, format!("{compared} pairs with |M-b| > 1e-3")),
        Check {
            name: "limit/gate_at_margin".into(),
            passed: gate_ok,
            value: if gate_ok { 0.0 } else { 1.0 },
            threshold: 0.0,
            detail: "gate(M=b) == 0.5 exactly".into(),
        },
    ]
}

fn tiny_model(seed: u64) -> Result<TinyLm<f64>> {
    let cfg = LmConfig {
        vocab_size: 9,
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        max_seq_len: 12,
        init_std: 0.5,
        ..LmConfig::default()
    };
    TinyLm::new(cfg, seed)
}

fn random_tokens(r: &mut Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(3..9)).collect()
}

fn random_pair(r: &mut Rng) -> PreferencePair {
    let prompt = random_tokens(r, 2);
    let nw = r.random_range(2..=4);
    let winner = random_tokens(r, nw);
    let nl = r.random_range(2..=4);
    let mut loser = random_tokens(r, nl);
    if loser == winner {
        loser.push(Vocab::EOS_ID);
    }
    PreferencePair::new(prompt, winner, loser)
}

fn pathway_grad(model: &TinyLm<f64>, pair: &PreferencePair, cfg: &LossConfig, seed: u64, pathways: Pathways) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let sp = score_pair(&mut g, &bound, pair)?;
    let mut s = CandidateSampler::new(seed);
    let loss = sequence::pairwise_cringe(&mut g, &[sp], cfg, &mut s, pathways)?;
    g.backward(loss)?;
    Ok(bound
        .vars()
        .iter()
        .zip(model.params.tensors())
        .flat_map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

fn two_pathway_checks(seed: u64, mutation: Mutation) -> Vec<Check> {
    let cfg = LossConfig {
        alpha: 0.5,
        k: 2,
        b: 0.0,
        tau: 1.0,
        ..LossConfig::default()
    };
    let mut worst = 0.0f64;
    let mut increased = 0;
    let n = 100;
    for i in 0..n as u64 {
        let run = || -> Result<(f64, bool)> {
            let model = tiny_model(rng::derive_seed(seed, &[stream::ORACLE, 4, i]))?;
            let pair = random_pair(&mut rng::rng_for(seed, &[stream::ORACLE, 5, i]));
            let s = rng::derive_seed(seed, &[stream::CRINGE, i]);
            let under_test = Pathways {
                gate: mutation != Mutation::DetachedGate,
                body: true,
            };
            let full = pathway_grad(&model, &pair, &cfg, s, under_test)?;
            let via_gate = pathway_grad(&model, &pair, &cfg, s, Pathways { gate: true, body: false })?;
            let via_body = pathway_grad(&model, &pair, &cfg, s, Pathways { gate: false, body: true })?;
            let diff = full
                .iter()
                .zip(via_gate.iter().zip(&via_body))
                .map(|(f, (a, b))| (f - a - b).abs())
                .fold(0.0, f64::max);
            let norm = via_gate.iter().map(|v| v * v).sum::<f64>().sqrt();
            let m0 = crate::losses::pairwise_margin(&model, &pair, cfg.normalize_margin)?;
            let mut stepped = model.clone();
            if norm > 0.0 {
                let eta = 1e-3 / norm;
                let mut off = 0;
                for t in 0..stepped.params.len() {
                    for x in stepped.params.get_mut(t).data_mut() {
                        *x -= eta * via_gate[off];
                        off += 1;
                    }
                }
            }
            let m1 = crate::losses::pairwise_margin(&stepped, &pair, cfg.normalize_margin)?;
            Ok((diff, m1 > m0))
        };
        match run() {
            Ok((d, up)) => {
                worst = worst.max(d);
                increased += up as usize;
            }
            Err(e) => return vec![failed("two_pathway/sum", 1e-6, e)],
        }
    }
    let rate = increased as f64 / n as f64;
    vec![
        below("two_pathway/sum", worst, 1e-6, "full gradient vs gate-only + body-only".into()),
        Check {
            name: "two_pathway/gate_raises_margin".into(),
            passed: rate >= 0.95,
            value: rate,
            threshold: 0.95,
            detail: format!("{increased}/{n} instances"),
        },
    ]
}

fn topk_checks(seed: u64) -> Vec<Check> {
    let mut r = rng::rng_for(seed, &[stream::ORACLE, 6]);
    let mut positions = 0;
    let mut hits = 0;
    let mut batch = 0u64;
    while positions < 10_000 {
        let k = r.random_range(1..=5);
        let rows = r.random_range(1..=8);
        let ties = r.random::<f64>() < 0.25;
        let data: Vec<f64> = (0..rows * 12)
            .map(|_| if ties { r.random_range(0..4) as f64 } else { r.random_range(-3.0..3.0) })
            .collect();
        let negs: Vec<usize> = (0..rows).map(|_| r.random_range(0..12)).collect();
        let mut g = Graph::<f64>::new();
        let x = match g.leaf(vec![rows, 12], data, false) {
            Ok(x) => x,
            Err(e) => return vec![failed("topk/exclusion", 1.0, e)],
        };
        let mut s = CandidateSampler::new(rng::derive_seed(seed, &[stream::CRINGE, batch]));
        if let Err(e) = cringe_token_loss(&mut g, x, &negs, &vec![true; rows], k, &mut s, 0) {
            return vec![failed("topk/exclusion", 1.0, e)];
        }
        for (&(_, row), &choice) in s.choices() {
            positions += 1;
            hits += (choice == negs[row]) as usize;
        }
        batch += 1;
    }
    let mut mismatches = 0;
    let rows = 2000;
    for _ in 0..rows {
        let v = r.random_range(3..=12);
        let k = r.random_range(1..v);
        let ties = r.random::<f64>() < 0.3;
        let row: Vec<f64> = (0..v)
            .map(|_| if ties { r.random_range(0..3) as f64 } else { r.random_range(-5.0..5.0) })
            .collect();
        let neg = r.random_range(0..v);
        if cringe_candidates(&row, neg, k) != listing::candidate_set(&row, neg, k) {
            mismatches += 1;
        }
    }
    vec![
        Check {
            name: "topk/exclusion".into(),
            passed: hits == 0,
            value: hits as f64,
            threshold: 0.0,
            detail: format!("{positions} sampled positions"),
        },
        Check {
            name: "topk/brute_force".into(),
            passed: mismatches == 0,
            value: mismatches as f64,
            threshold: 0.0,
            detail: format!("{rows} random score rows"),
        },
    ]
}

fn binarize_check(seed: u64) -> Check {
    let name = "binarize/consistency";
    let threshold = 1e-9;
    let mut r = rng::rng_for(seed, &[stream::ORACLE, 7]);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mut run = || -> Result<f64> {
            let model = tiny_model(rng::derive_seed(seed, &[stream::ORACLE, 7, i]))?;
            let mut d = PreferenceDataset::new();
            for _ in 0..3 {
                d.push(random_pair(&mut r), Provenance::Original, None)?;
            }
            let cfg = LossConfig {
                alpha: 0.3,
                k: 3,
                b: 1e300,
                ..LossConfig::default()
            };
            let s = rng::derive_seed(seed, &[stream::CRINGE, i]);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let bin = binary_objective(&mut g, &bound, &d.binarize(), &cfg, &mut CandidateSampler::new(s))?;
            let pair = pair_objective(&mut g, &bound, &d.pairs(), &cfg, &mut CandidateSampler::new(s), None)?;
            Ok((g.scalar_value(bin)? - g.scalar_value(pair)?).abs())
        };
        match run() {
            Ok(d) => worst = worst.max(d),
            Err(e) => return failed(name, threshold, e),
        }
    }
    below(name, worst, threshold, "binary on binarized pairs vs pairwise with gate 1".into())
}

/// Runs every check for `seed`, optionally with a deliberate defect.
pub fn oracle_suite(seed: u64, mutation: Mutation) -> OracleReport {
    let mut checks: Vec<Check> = LossVariant::ALL.iter().map(|&v| gradcheck_variant(v, seed)).collect();
    for kind in [LossVariant::BinaryCringe, LossVariant::PairwiseCringe, LossVariant::HardMarginCringe] {
        checks.push(listing_check(kind, seed, mutation));
    }
    checks.extend(limit_checks(seed));
    checks.extend(two_pathway_checks(seed, mutation));
    checks.extend(topk_checks(seed));
    checks.push(binarize_check(seed));
    OracleReport { seed, mutation, checks }
}

/// Only the finite-difference checks.
pub fn gradcheck_suite(seed: u64) -> OracleReport {
    OracleReport {
        seed,
        mutation: Mutation::None,
        checks: LossVariant::ALL.iter().map(|&v| gradcheck_variant(v, seed)).collect(),
    }
}
