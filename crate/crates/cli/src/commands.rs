use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use dsq_core::checkpoint::{Checkpoint, CheckpointMeta, Payload};
use dsq_core::data::cer::score_corpus;
use dsq_core::data::synth::SynthTask;
use dsq_core::data::{format_transcripts, load_manifest, parse_transcripts, references, save_manifest, Discourse};
use dsq_core::decoding::{decode_corpus, ContextMode};
use dsq_core::features::FeatureStats;
use dsq_core::training::{
    build_targets, prepare, save_teacher_cache, train, EpochMetrics, Smoothing, TeacherCache, TrainOutcome,
};
use dsq_core::verify::gradient_suite;
use dsq_core::{DiscourseModel, Error, ModelKind, Vocabulary};

use crate::config::RunConfig;
use crate::{ConfigArgs, NumericFailure, UsageError};

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn load_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    eprintln!("# effective configuration\n{}", cfg.to_toml());
    Ok(cfg)
}

/// Creates `out`, refusing to reuse a non-empty directory unless forced.
fn prepare_out(out: &Path, force: bool) -> anyhow::Result<()> {
    let occupied = out.exists() && (out.is_file() || std::fs::read_dir(out)?.next().is_some());
    if occupied {
        if !force {
            bail!(UsageError(format!("{} already exists; pass --force to overwrite", out.display())));
        }
        if out.is_dir() {
            std::fs::remove_dir_all(out)?;
        } else {
            std::fs::remove_file(out)?;
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

pub fn gen_data(args: &ConfigArgs, out: &Path, force: bool) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    prepare_out(out, force)?;
    let task = SynthTask::new(cfg.data.clone())?;
    let corpus = task.generate();
    for (split, ds) in SPLITS.iter().zip([&corpus.train, &corpus.valid, &corpus.test]) {
        let manifest = save_manifest(out, split, ds)?;
        std::fs::write(out.join(format!("{split}.ref")), format_transcripts(&references(ds)))?;
        eprintln!("{split}: {} lectures -> {}", ds.len(), manifest.display());
    }
    cfg.save(out)?;
    println!(
        "Bayes token error after the first utterance: {:.4} without context, {:.4} with the topic known",
        task.bayes_error(&corpus.test, false)?,
        task.bayes_error(&corpus.test, true)?
    );
    Ok(())
}

struct Corpus {
    train: Vec<Discourse>,
    valid: Vec<Discourse>,
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    let train = load_manifest(&dir.join("train.tsv")).with_context(|| format!("loading {}/train.tsv", dir.display()))?;
    if train.is_empty() {
        bail!(Error::Data("empty training corpus".into()));
    }
    let valid_path = dir.join("valid.tsv");
    let valid = if valid_path.exists() { load_manifest(&valid_path)? } else { Vec::new() };
    Ok(Corpus { train, valid })
}

fn build_vocab(train: &[Discourse]) -> anyhow::Result<Vocabulary> {
    let texts: Vec<&str> = train.iter().flat_map(|d| d.texts()).collect();
    Ok(Vocabulary::build(&texts)?)
}

struct MetricsLog {
    file: File,
}

impl MetricsLog {
    fn create(out: &Path) -> anyhow::Result<Self> {
        Ok(Self {
            file: File::create(out.join("metrics.tsv"))?,
        })
    }

    fn record(&mut self, m: &EpochMetrics) {
        let line = m.log_line();
        eprintln!("epoch\t{line}");
        // A failed metrics write should not abort training.
        let _ = writeln!(self.file, "{line}").and_then(|_| self.file.flush());
    }
}

fn finish(
    out: &Path,
    cfg: &RunConfig,
    meta: CheckpointMeta,
    store: dsq_core::nn::ParamStore,
    outcome: TrainOutcome,
) -> anyhow::Result<PathBuf> {
    let path = out.join("model.dsck");
    Checkpoint {
        meta,
        params: store,
        optimizer: Some(outcome.optimizer),
    }
    .save(&path, Payload::F64)?;
    cfg.save(out)?;
    let best = &outcome.metrics[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {} ({} steps): valid loss {:.6}, perplexity {:.4}",
        outcome.best_epoch,
        outcome.metrics.len(),
        outcome.steps,
        best.valid_loss,
        best.valid_loss.exp()
    );
    eprintln!("checkpoint written to {}", path.display());
    Ok(path)
}

pub fn train_lm(args: &ConfigArgs, corpus_dir: &Path, out: &Path, force: bool) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    if cfg.training.smoothing.needs_teacher() {
        bail!(UsageError("the language model cannot be trained with distillation".into()));
    }
    let corpus = load_corpus(corpus_dir)?;
    prepare_out(out, force)?;
    let vocab = build_vocab(&corpus.train)?;
    let train_set = prepare(&corpus.train, &vocab, None)?;
    let valid_set = prepare(&corpus.valid, &vocab, None)?;
    let (model, mut store) = DiscourseModel::new_lm(&cfg.model, vocab.len(), cfg.seed)?;
    let targets = build_targets(&train_set, vocab.len(), &cfg.training, None)?;
    let mut log = MetricsLog::create(out)?;
    let outcome = train(&model, &mut store, &train_set, &valid_set, &targets, &cfg.training, cfg.seed, |m| {
        log.record(m)
    })?;
    let meta = CheckpointMeta {
        kind: ModelKind::Lm,
        model: cfg.model.clone(),
        vocab,
        feature_stats: None,
        use_context: cfg.training.use_context,
        run: serde_json::to_value(&cfg)?,
    };
    finish(out, &cfg, meta, store, outcome)?;
    Ok(())
}

pub fn train_asr(
    args: &ConfigArgs,
    corpus_dir: &Path,
    smoothing: Option<Smoothing>,
    teacher: Option<&Path>,
    out: &Path,
    force: bool,
) -> anyhow::Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = smoothing {
        cfg.training.smoothing = s;
    }
    let smoothing = cfg.training.smoothing;
    if smoothing.needs_teacher() && teacher.is_none() {
        bail!(UsageError(format!("--smoothing {smoothing:?} needs --teacher <checkpoint>")));
    }
    let corpus = load_corpus(corpus_dir)?;
    let vocab = build_vocab(&corpus.train)?;
    // Check the teacher before any expensive work.
    let teacher = match teacher.filter(|_| smoothing.needs_teacher()) {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading teacher {}", path.display()))?;
            if ck.meta.kind != ModelKind::Lm {
                bail!(Error::Data(format!("{} is not a language model checkpoint", path.display())));
            }
            if ck.meta.vocab.hash() != vocab.hash() {
                bail!(Error::VocabMismatch(format!(
                    "teacher {} was trained with a different vocabulary",
                    path.display()
                )));
            }
            Some(ck)
        }
        None => None,
    };
    prepare_out(out, force)?;
    let stats = FeatureStats::compute(corpus.train.iter().flat_map(|d| d.utterances.iter().map(|u| &u.features)))?;
    let train_set = prepare(&corpus.train, &vocab, Some(&stats))?;
    let valid_set = prepare(&corpus.valid, &vocab, Some(&stats))?;
    let cache = match &teacher {
        Some(ck) => {
            let (lm, lm_store) = ck.model()?;
            let cache = TeacherCache::compute(
                &lm,
                &lm_store,
                &train_set,
                &vocab.hash(),
                cfg.training.max_utterances,
                smoothing == Smoothing::Kd,
                cfg.training.precision,
            )?;
            save_teacher_cache(&out.join("teacher"), &cache)?;
            Some(cache)
        }
        None => None,
    };
    let (model, mut store) = DiscourseModel::new_asr(&cfg.model, vocab.len(), cfg.seed)?;
    let targets = build_targets(&train_set, vocab.len(), &cfg.training, cache.as_ref())?;
    let mut log = MetricsLog::create(out)?;
    let outcome = train(&model, &mut store, &train_set, &valid_set, &targets, &cfg.training, cfg.seed, |m| {
        log.record(m)
    })?;
    let meta = CheckpointMeta {
        kind: ModelKind::Asr,
        model: cfg.model.clone(),
        vocab,
        feature_stats: Some(stats),
        use_context: cfg.training.use_context,
        run: serde_json::to_value(&cfg)?,
    };
    finish(out, &cfg, meta, store, outcome)?;
    Ok(())
}

pub fn decode(
    args: &ConfigArgs,
    ckpt: &Path,
    manifest: &Path,
    beam: Option<usize>,
    context: Option<ContextMode>,
    max_len: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(b) = beam {
        cfg.decode.beam_size = b;
    }
    if let Some(c) = context {
        cfg.decode.context = c;
    }
    if let Some(m) = max_len {
        cfg.decode.max_len = m;
    }
    cfg.validate()?;
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if ck.meta.kind != ModelKind::Asr {
        bail!(Error::Data(format!("{} is not a recognizer checkpoint", ckpt.display())));
    }
    let stats = ck
        .meta
        .feature_stats
        .as_ref()
        .ok_or_else(|| Error::Data("checkpoint has no feature statistics".into()))?;
    let (model, store) = ck.model()?;
    let lectures = load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let data = prepare(&lectures, &ck.meta.vocab, Some(stats))?;
    let hyps = decode_corpus(&model, &store, cfg.training.precision, &data, &ck.meta.vocab, &cfg.decode)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, format_transcripts(&hyps)).with_context(|| format!("writing {}", out.display()))?;
    let score = score_corpus(&hyps, &references(&lectures))?;
    println!(
        "decoded {} utterances of {} lectures; CER {:.4} against the manifest transcripts",
        hyps.len(),
        lectures.len(),
        score.cer()
    );
    Ok(())
}

pub fn eval(hyp: &Path, reference: &Path) -> anyhow::Result<()> {
    let read = |p: &Path| -> anyhow::Result<_> {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(parse_transcripts(&text)?)
    };
    let score = score_corpus(&read(hyp)?, &read(reference)?)?;
    println!("CER {:.6} ({} errors / {} reference characters)", score.cer(), score.errors, score.ref_chars);
    Ok(())
}

pub fn gradcheck(args: &ConfigArgs, samples: usize, tol: f64) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let reports = gradient_suite(&cfg.model, samples, tol, cfg.seed)?;
    let mut failed = Vec::new();
    for (name, r) in &reports {
        println!(
            "{name:<22} {} max rel err {:.3e} over {} coordinates (analytic {:.6e}, numeric {:.6e})",
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.checked,
            r.analytic,
            r.numeric
        );
        if !r.passed {
            failed.push(name.as_str());
        }
    }
    if !failed.is_empty() {
        bail!(NumericFailure(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
