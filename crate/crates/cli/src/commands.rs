use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pcolab::config::ExperimentConfig;
use pcolab::corpus::{read_corpus, write_corpus, Grammar};
use pcolab::evalkit::{
    bar_chart_svg, comparison_table, gradcheck_suite, oracle_suite, repeat_at_n, sort_rows, MetricReport, Mutation,
    RunRow,
};
use pcolab::experiment::{evaluate_model, greedy_outputs, reward_model, ToyData};
use pcolab::losses::{LossConfig, LossVariant};
use pcolab::numerics::{checkpoint, DType, Scalar};
use pcolab::pco::{pco_run, sft, train_pref, Hooks, TrainPlan};
use pcolab::preferences::{mine_best_worst, mine_repetition_pairs, PreferenceDataset, Provenance, SampleSpec};
use pcolab::tinylm::{LmConfig, TinyLm, Vocab};

use crate::record::{RunRecord, RECORD_SCHEMA};
use crate::{Command, Common, PairSource, Precision};

/// A verification command found failing checks.
#[derive(Debug)]
pub struct VerificationFailed(pub Vec<String>);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "failing checks: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerificationFailed {}

/// Exit code and machine-readable category of a failure.
pub fn categorize(e: &anyhow::Error) -> (u8, &'static str) {
    if e.downcast_ref::<VerificationFailed>().is_some() {
        return (7, "verification_failed");
    }
    match e.chain().find_map(|c| c.downcast_ref::<pcolab::Error>()) {
        Some(pcolab::Error::Config(_)) => (3, "config"),
        Some(pcolab::Error::MissingArtifact(_)) => (4, "missing_artifact"),
        Some(pcolab::Error::Diverged { .. } | pcolab::Error::NonFinite { .. }) => (5, "diverged"),
        Some(pcolab::Error::Io(_) | pcolab::Error::Json(_) | pcolab::Error::Checkpoint(_)) => (6, "io"),
        Some(pcolab::Error::EmptyDataset) => (8, "empty_dataset"),
        _ if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) => (6, "io"),
        _ => (1, "runtime"),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    started: Instant,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.paths.resolve(p)
    }

    fn reports_dir(&self) -> Result<PathBuf> {
        let d = self.path(&self.cfg.paths.reports);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn record(&self, command: &str, tag: Option<&str>, outputs: BTreeMap<String, String>, rows: Vec<RunRow>, details: serde_json::Value) -> Result<()> {
        let rec = RunRecord {
            schema_version: RECORD_SCHEMA,
            command: command.to_string(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            outputs,
            rows,
            details,
        };
        let name = match tag {
            Some(t) => format!("{command}-{t}.json"),
            None => format!("{command}.json"),
        };
        let path = self.reports_dir()?.join(name);
        rec.save(&path)?;
        log::info!("run record written to {}", path.display());
        Ok(())
    }

    fn vocab(&self) -> Result<Vocab> {
        Ok(Vocab::load(&self.path(&self.cfg.paths.vocab))?)
    }

    fn sft_path(&self) -> PathBuf {
        self.path(&self.cfg.paths.sft_checkpoint)
    }

    fn pairs(&self, vocab: &Vocab) -> Result<PreferenceDataset> {
        Ok(PreferenceDataset::load_jsonl(&self.path(&self.cfg.paths.pairs), vocab)?)
    }

    fn plan(&self, base: &TrainPlan) -> TrainPlan {
        TrainPlan {
            seed: self.cfg.seed,
            ..base.clone()
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out_dir = o.clone();
    }
    if let Some(p) = common.precision {
        cfg.precision = match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model<T: Scalar>(path: &Path, fallback: &LmConfig) -> Result<TinyLm<T>> {
    let (header, params) = checkpoint::load::<T>(path)?;
    let lm = header
        .meta
        .get("lm")
        .map(|v| serde_json::from_value::<LmConfig>(v.clone()))
        .transpose()
        .context("checkpoint model config")?
        .unwrap_or_else(|| fallback.clone());
    Ok(TinyLm::from_params(lm, params)?)
}

fn outputs<const N: usize>(items: [(&str, &Path); N]) -> BTreeMap<String, String> {
    items.into_iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect()
}

fn row(name: &str, iteration: Option<usize>, m: &MetricReport) -> RunRow {
    RunRow {
        name: name.to_string(),
        iteration,
        win_rate: Some(m.win_rate),
        repeat_at_n: Some(m.repeat_at_n),
        f1: Some(m.f1),
    }
}

pub fn run(common: &Common, command: &Command) -> Result<()> {
    if let Command::Report { records, svg } = command {
        return report(common, records, svg.as_deref());
    }
    let cfg = load_config(common)?;
    if let Command::Config = command {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    std::fs::create_dir_all(&cfg.paths.out_dir).with_context(|| format!("creating {}", cfg.paths.out_dir.display()))?;
    std::fs::write(cfg.paths.out_dir.join("config.json"), cfg.to_json() + "\n")?;
    let ctx = Ctx {
        cfg,
        started: Instant::now(),
    };
    macro_rules! typed {
        ($f:ident $(, $a:expr)*) => {
            match ctx.cfg.precision {
                DType::F32 => $f::<f32>(&ctx $(, $a)*),
                DType::F64 => $f::<f64>(&ctx $(, $a)*),
            }
        };
    }
    match command {
        Command::GenCorpus => gen_corpus(&ctx),
        Command::Sft => typed!(cmd_sft),
        Command::MakePairs { source } => typed!(make_pairs, *source),
        Command::Train { loss } => typed!(train, loss.unwrap_or(ctx.cfg.loss.variant)),
        Command::Pco { iterations, loss } => {
            typed!(pco, iterations.unwrap_or(ctx.cfg.iterations), loss.unwrap_or(ctx.cfg.loss.variant))
        }
        Command::Eval { checkpoint } => typed!(eval, checkpoint.clone()),
        Command::Gradcheck { full } => gradcheck(&ctx, *full),
        Command::Report { .. } | Command::Config => unreachable!("handled above"),
    }
}

fn gen_corpus(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let g = Grammar::new(cfg.corpus.clone(), cfg.seed)?;
    let sentences = g.sentences(0..cfg.corpus.n_sentences as u64);
    let vocab = g.vocab();
    let corpus_path = ctx.path(&cfg.paths.corpus);
    let vocab_path = ctx.path(&cfg.paths.vocab);
    write_corpus(&corpus_path, &vocab, &sentences)?;
    vocab.save(&vocab_path)?;
    let repeats = sentences
        .iter()
        .map(|s| repeat_at_n(&s.prompt_tokens, &s.response_tokens, 3) as f64)
        .sum::<f64>()
        / sentences.len() as f64;
    println!("wrote {} sentences to {}", sentences.len(), corpus_path.display());
    ctx.record(
        "gen-corpus",
        None,
        outputs([("corpus", &corpus_path), ("vocab", &vocab_path)]),
        Vec::new(),
        serde_json::json!({ "sentences": sentences.len(), "repeat_at_3_per_sentence": repeats }),
    )
}

fn cmd_sft<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let vocab = ctx.vocab()?;
    let corpus = read_corpus(&ctx.path(&cfg.paths.corpus), &vocab)?;
    let model = TinyLm::<T>::new(cfg.lm.clone(), cfg.seed)?;
    let out = sft(model, &corpus, &ctx.plan(&cfg.sft), &Hooks::default())?;
    let path = ctx.sft_path();
    let meta = serde_json::json!({ "lm": cfg.lm, "stage": "sft" });
    checkpoint::save(&path, &out.model.params, cfg.seed, None, meta)?;
    println!("final training loss {:.4}; checkpoint {}", out.final_loss(), path.display());
    ctx.record(
        "sft",
        None,
        outputs([("checkpoint", &path)]),
        Vec::new(),
        serde_json::json!({ "final_loss": out.final_loss(), "window_means": out.window_means, "steps": out.steps_run }),
    )
}

fn make_pairs<T: Scalar>(ctx: &Ctx, source: PairSource) -> Result<()> {
    let cfg = &ctx.cfg;
    let vocab = ctx.vocab()?;
    let model = load_model::<T>(&ctx.sft_path(), &cfg.lm)?;
    let data = ToyData::generate(cfg)?;
    let (dataset, details) = match source {
        PairSource::Repetition => {
            let mined = mine_repetition_pairs(&model, &data.pair_prompts, cfg.eval.ngram, cfg.pco.max_new_tokens)?;
            let d = serde_json::json!({
                "source": "repetition",
                "discarded": mined.discarded,
                "fallbacks": mined.fallbacks,
            });
            (mined.dataset, d)
        }
        PairSource::Reward => {
            let reward = reward_model(cfg.eval.reward, cfg.lm.vocab_size, cfg.seed);
            let spec = SampleSpec {
                n: cfg.pco.samples_per_prompt,
                strategy: cfg.pco.strategy,
                max_new_tokens: cfg.pco.max_new_tokens,
                seed: cfg.seed,
                iteration: 0,
            };
            let mut d = PreferenceDataset::new();
            for e in mine_best_worst(&model, &data.pair_prompts, &reward, &spec)?.entries() {
                d.push(e.pair.clone(), Provenance::Original, e.rewards)?;
            }
            (d, serde_json::json!({ "source": "reward", "judge": reward.describe() }))
        }
    };
    if dataset.is_empty() {
        return Err(pcolab::Error::EmptyDataset).context("no pairs survived filtering");
    }
    let path = ctx.path(&cfg.paths.pairs);
    dataset.save_jsonl(&path, &vocab)?;
    println!("wrote {} pairs to {}", dataset.len(), path.display());
    let mut details = details;
    details["pairs"] = dataset.len().into();
    ctx.record("make-pairs", None, outputs([("pairs", &path)]), Vec::new(), details)
}

fn train<T: Scalar>(ctx: &Ctx, variant: LossVariant) -> Result<()> {
    let cfg = &ctx.cfg;
    let vocab = ctx.vocab()?;
    let start = load_model::<T>(&ctx.sft_path(), &cfg.lm)?;
    let pairs = ctx.pairs(&vocab)?.pairs();
    let loss = LossConfig { variant, ..cfg.loss };
    let probe: Vec<_> = pairs.iter().take(32).cloned().collect();
    let hooks = Hooks {
        evaluate: None,
        probe_pairs: Some(&probe),
    };
    let out = train_pref(&start, &pairs, &loss, &ctx.plan(&cfg.pref), &hooks)?;
    let name = variant.cli_name();
    let path = cfg.paths.out_dir.join(format!("train_{name}.ckpt"));
    let meta = serde_json::json!({ "lm": out.model.config, "stage": "train", "variant": variant, "iteration": 1 });
    checkpoint::save(&path, &out.model.params, cfg.seed, None, meta)?;
    println!("{name}: final training loss {:.4}; checkpoint {}", out.final_loss(), path.display());
    ctx.record(
        "train",
        Some(name),
        outputs([("checkpoint", &path)]),
        Vec::new(),
        serde_json::json!({
            "variant": variant,
            "pairs": pairs.len(),
            "final_loss": out.final_loss(),
            "window_means": out.window_means,
            "gate_saturation": out.gate_saturation,
        }),
    )
}

fn pco<T: Scalar>(ctx: &Ctx, iterations: usize, variant: LossVariant) -> Result<()> {
    let cfg = &ctx.cfg;
    let vocab = ctx.vocab()?;
    let start = load_model::<T>(&ctx.sft_path(), &cfg.lm)?;
    let original = ctx.pairs(&vocab)?;
    let data = ToyData::generate(cfg)?;
    let judge = reward_model(cfg.eval.reward, cfg.lm.vocab_size, cfg.seed);
    let baseline = greedy_outputs(&start, &data.eval_prompts, cfg.eval.max_new_tokens)?;
    let eval = |m: &TinyLm<T>| evaluate_model(m, &data, &baseline, &judge, cfg);
    let loss = LossConfig { variant, ..cfg.loss };
    let name = variant.cli_name();
    let dir = cfg.paths.out_dir.join(format!("pco_{name}"));
    let runs = pco_run(
        &start,
        &original,
        &data.unlabeled_prompts,
        &judge,
        iterations,
        &loss,
        &ctx.plan(&cfg.pref),
        &cfg.pco,
        Some(&eval),
        Some(&dir),
    )?;
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    let rows = reports
        .iter()
        .filter_map(|r| r.metrics.as_ref().map(|m| row(name, Some(r.iteration_index), m)))
        .collect::<Vec<_>>();
    print!("{}", comparison_table(&rows));
    ctx.record(
        "pco",
        Some(name),
        outputs([("checkpoints", &dir)]),
        rows,
        serde_json::json!({ "judge": judge.describe(), "iterations": reports }),
    )
}

fn eval<T: Scalar>(ctx: &Ctx, checkpoint_path: Option<PathBuf>) -> Result<()> {
    let cfg = &ctx.cfg;
    let sft_model = load_model::<T>(&ctx.sft_path(), &cfg.lm)?;
    let path = checkpoint_path.unwrap_or_else(|| ctx.sft_path());
    let (header, _) = checkpoint::load::<T>(&path)?;
    let model = load_model::<T>(&path, &cfg.lm)?;
    let data = ToyData::generate(cfg)?;
    let judge = reward_model(cfg.eval.reward, cfg.lm.vocab_size, cfg.seed);
    let baseline = greedy_outputs(&sft_model, &data.eval_prompts, cfg.eval.max_new_tokens)?;
    let metrics = evaluate_model(&model, &data, &baseline, &judge, cfg)?;
    let name = path.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned());
    let iteration = header.meta.get("iteration").and_then(serde_json::Value::as_u64).map(|i| i as usize);
    println!("{}", judge.describe());
    print!("{}", comparison_table(&[row(&name, iteration, &metrics)]));
    ctx.record(
        "eval",
        Some(&name),
        outputs([("checkpoint", &path)]),
        vec![row(&name, iteration, &metrics)],
        serde_json::json!({ "judge": judge.describe(), "metrics": metrics }),
    )
}

fn gradcheck(ctx: &Ctx, full: bool) -> Result<()> {
    let report = if full {
        oracle_suite(ctx.cfg.seed, Mutation::None)
    } else {
        gradcheck_suite(ctx.cfg.seed)
    };
    print!("{report}");
    let failed: Vec<String> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    ctx.record(
        "gradcheck",
        full.then_some("full"),
        BTreeMap::new(),
        Vec::new(),
        serde_json::to_value(&report)?,
    )?;
    if !failed.is_empty() {
        bail!(VerificationFailed(failed));
    }
    Ok(())
}

fn report(common: &Common, records: &[PathBuf], svg: Option<&Path>) -> Result<()> {
    let files = if records.is_empty() {
        let cfg = load_config(common)?;
        let dir = cfg.paths.resolve(&cfg.paths.reports);
        let mut v: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|_| pcolab::Error::MissingArtifact(dir.display().to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        records.to_vec()
    };
    let mut rows = Vec::new();
    let mut used = 0;
    for f in &files {
        match RunRecord::load(f) {
            Ok(r) => {
                used += 1;
                rows.extend(r.rows);
            }
            Err(e) => log::warn!("skipping {}: {e:#}", f.display()),
        }
    }
    if used == 0 {
        bail!(pcolab::Error::MissingArtifact("no readable run records".into()));
    }
    sort_rows(&mut rows);
    print!("{}", comparison_table(&rows));
    if let Some(path) = svg {
        let bars: Vec<(String, f64)> = rows
            .iter()
            .filter_map(|r| {
                let label = match r.iteration {
                    Some(i) => format!("{} #{i}", r.name),
                    None => r.name.clone(),
                };
                r.win_rate.map(|w| (label, w))
            })
            .collect();
        std::fs::write(path, bar_chart_svg("win rate against the fine-tuned baseline", &bars))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
