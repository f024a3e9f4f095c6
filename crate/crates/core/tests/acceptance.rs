//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so that every criterion reports even
//! when an earlier one fails. `ACCEPTANCE_CRITERIA=1,4` restricts the run.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_discourse, random_matrix, FIRST_CHAR};
use dsq_core::autodiff::{grad_check_many, Probe};
use dsq_core::data::cer::{compute_cer, edit_distance, score_corpus};
use dsq_core::data::synth::{SynthCorpus, SynthTask, SynthTaskConfig};
use dsq_core::data::{references, Discourse};
use dsq_core::decoding::{beam_search, decode_corpus, decoder_stepper, ContextMode, DecodeConfig};
use dsq_core::features::FeatureStats;
use dsq_core::model::DecoderState;
use dsq_core::nn::{
    check_param_grads, AttentionMask, AttentionPooling, BlockConfig, ConvPooling, DecoderBlock, EncoderBlock,
    FeedForward, Init, LayerNorm, MultiHeadAttention, ParamStore, Session,
};
use dsq_core::training::{
    build_targets, mean_nll, onehot, prepare, segment_loss, smooth_targets_kd, smooth_targets_label,
    teacher_forced_accuracy, train, uniform_non_pad, PreparedDiscourse, Smoothing, SpecAugmentConfig, TeacherCache,
    TrainingConfig,
};
use dsq_core::vocab::{BOS, EOS};
use dsq_core::{ContextCache, DiscourseModel, ModelConfig, Precision, Result, Tensor, Vocabulary};

const P: Precision = Precision::Verification;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Result<Verdict> {
    let started = Instant::now();
    let tol = 1e-4;
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let block = BlockConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        dropout: 0.0,
    };
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, r: dsq_core::autodiff::GradCheckReport| {
        worst.push((name.to_string(), r.max_rel_err));
        r.passed
    };
    let mut ok = true;

    // Primitives with respect to their inputs.
    let x = random_matrix(&mut rng, 5, 8);
    let (g, b) = (random_matrix(&mut rng, 1, 8), random_matrix(&mut rng, 1, 8));
    let t = random_matrix(&mut rng, 5, 8);
    ok &= record(
        "layer norm",
        grad_check_many(
            |_, v| v[0].layer_norm(&v[1], &v[2])?.mul_const(&t)?.sum(),
            &[x.clone(), g, b],
            Probe::All,
            h,
            tol,
        )?,
    );
    let mask = AttentionMask::causal(5);
    let (sq, t5) = (random_matrix(&mut rng, 5, 5), random_matrix(&mut rng, 5, 5));
    ok &= record(
        "masked softmax",
        grad_check_many(
            |_, v| v[0].masked_softmax(Some(mask.as_slice()))?.mul_const(&t5)?.sum(),
            &[sq],
            Probe::All,
            h,
            tol,
        )?,
    );
    ok &= record(
        "gelu",
        grad_check_many(|_, v| v[0].gelu()?.mul_const(&t)?.sum(), std::slice::from_ref(&x), Probe::All, h, tol)?,
    );
    let img = Tensor::new(&[1, 2, 5, 4], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = Tensor::new(&[3, 2, 3, 3], (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let bias = Tensor::new(&[3], vec![0.1, -0.2, 0.3])?;
    let probe = Tensor::new(&[1, 3, 3, 2], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    ok &= record(
        "conv + pool",
        grad_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?.relu()?;
                g.max_pool2d(y)?.mul_const(&probe)?.sum()
            },
            &[img, w, bias],
            Probe::All,
            h,
            tol,
        )?,
    );

    // Parametrized blocks with respect to their parameters.
    macro_rules! params_check {
        ($name:expr, |$init:ident| $build:expr, |$s:ident, $m:ident| $loss:expr) => {{
            let mut store = ParamStore::new();
            let mut init_rng = ChaCha8Rng::seed_from_u64(7);
            let $m = {
                let mut $init = Init::new(&mut store, &mut init_rng);
                $build?
            };
            let r = check_param_grads(&store, |$s| $loss, Probe::All, h, tol)?;
            ok &= record($name, r);
        }};
    }
    let q = random_matrix(&mut rng, 4, 8);
    let mem = random_matrix(&mut rng, 6, 8);
    let t4 = random_matrix(&mut rng, 4, 8);
    params_check!(
        "attention",
        |init| MultiHeadAttention::new(&mut init, &block),
        |s, m| m
            .forward(s, s.constant(q.clone()), s.constant(mem.clone()), None)?
            .mul_const(&t4)?
            .sum()
    );
    params_check!(
        "feed-forward",
        |init| FeedForward::new(&mut init, 8, 16),
        |s, m| m.forward(s, s.constant(q.clone()))?.mul_const(&t4)?.sum()
    );
    params_check!(
        "layer norm params",
        |init| LayerNorm::new(&mut init, 8),
        |s, m| m.forward(s, s.constant(q.clone()))?.mul_const(&t4)?.sum()
    );
    let pool_t = random_matrix(&mut rng, 1, 8);
    params_check!(
        "attention pooling",
        |init| AttentionPooling::new(&mut init, 8),
        |s, m| m.forward(s, s.constant(mem.clone()))?.mul_const(&pool_t)?.sum()
    );
    let feats = random_matrix(&mut rng, 9, 6);
    let conv_t = random_matrix(&mut rng, 3, 8);
    params_check!(
        "conv front end",
        |init| ConvPooling::new(&mut init, 6, (2, 3), 8),
        |s, m| m.forward(s, &feats)?.mul_const(&conv_t)?.sum()
    );
    params_check!(
        "encoder block",
        |init| EncoderBlock::new(&mut init, &block),
        |s, m| m.forward_causal(s, s.constant(q.clone()))?.mul_const(&t4)?.sum()
    );
    let ctx = random_matrix(&mut rng, 2, 8);
    params_check!(
        "decoder block",
        |init| DecoderBlock::new(&mut init, &block, &["speech", "context"]),
        |s, m| {
            let kv = m.project_sources(s, &[s.constant(mem.clone()), s.constant(ctx.clone())])?;
            m.forward(s, s.constant(q.clone()), &kv)?.mul_const(&t4)?.sum()
        }
    );

    // Whole-model losses, sampled coordinates of every parameter.
    let cfg = common::tiny_config();
    let v = 10;
    for kind in ["recognizer", "language model"] {
        let (model, store) = if kind == "recognizer" {
            DiscourseModel::new_asr(&cfg, v, 9)?
        } else {
            DiscourseModel::new_lm(&cfg, v, 9)?
        };
        let d = random_discourse(10, 3, v, model.speech.is_some().then_some(cfg.n_feats));
        let targets: Vec<Tensor> = d.utterances.iter().map(|u| onehot(&u.tokens, v)).collect::<Result<_>>()?;
        let r = check_param_grads(
            &store,
            |s| segment_loss(s, &model, &d.utterances, &targets, true, None),
            Probe::Sample { per_input: 4, seed: 11 },
            h,
            tol,
        )?;
        ok &= record(&format!("{kind} loss"), r);
    }
    let secs = started.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<&str> = worst.iter().filter(|w| !(w.1 <= tol)).map(|w| w.0.as_str()).collect();
    verdict(
        ok && secs < 300.0,
        format!(
            "{} checks, max rel err {max:.2e} (tol {tol:.0e}), {secs:.1}s{}",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn causality_suite() -> Result<Verdict> {
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
    let v = 16;
    let (model, store) = DiscourseModel::new_asr(&cfg, v, 21)?;
    let s = Session::eval(&store, P);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut checked = 0;
    let mut leaks = 0;
    for _ in 0..10 {
        let speech = s.constant(random_matrix(&mut rng, 5, cfg.d_model));
        let context = s.constant(random_matrix(&mut rng, 3, cfg.d_model));
        let mut inputs = vec![BOS];
        inputs.extend(common::random_tokens(&mut rng, 7, v));
        let base = model.decoder.logits(&s, &inputs, &[speech, context])?.value();
        for k in 1..inputs.len() {
            let mut changed = inputs.clone();
            changed[k] = FIRST_CHAR + (changed[k] - FIRST_CHAR + 1) % (v - FIRST_CHAR);
            let out = model.decoder.logits(&s, &changed, &[speech, context])?.value();
            checked += 1;
            if out.slice_rows(0, k) != base.slice_rows(0, k) {
                leaks += 1;
            }
        }
    }
    for seed in 0..10 {
        let texts: Vec<Vec<usize>> = random_discourse(30 + seed, 6, v, None).utterances.into_iter().map(|u| u.tokens).collect();
        let z = model.context.encode_discourse(&s, &texts)?.value();
        for j in 0..texts.len() {
            let mut changed = texts.clone();
            changed[j] = vec![FIRST_CHAR, FIRST_CHAR + 1, EOS];
            let z2 = model.context.encode_discourse(&s, &changed)?.value();
            checked += 1;
            if z.slice_rows(0, j) != z2.slice_rows(0, j) {
                leaks += 1;
            }
        }
    }
    verdict(leaks == 0, format!("{checked} perturbations, {leaks} with nonzero influence on earlier positions"))
}

// ---------------------------------------------------------------- 3

fn incremental_suite() -> Result<Verdict> {
    let cfg = ModelConfig::default();
    let v = 16;
    let (model, store) = DiscourseModel::new_asr(&cfg, v, 31)?;
    let s = Session::eval(&store, P);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (mut ctx_err, mut dec_err) = (0.0f64, 0.0f64);
    let mut stable = true;
    for seed in 0..5 {
        let d = random_discourse(40 + seed, 6, v, Some(cfg.n_feats));
        let texts: Vec<Vec<usize>> = d.utterances.iter().map(|u| u.tokens.clone()).collect();
        let z = model.context.encode_discourse(&s, &texts)?.value();
        let mut cache = ContextCache::new(&model.context);
        let mut prev: Option<Tensor> = None;
        for (t, text) in texts.iter().enumerate() {
            cache.append(&model.context, &store, P, text)?;
            let m = cache.memory(&model.context, &store)?;
            ctx_err = ctx_err.max(m.max_abs_diff(&z.slice_rows(0, t + 1)));
            if let Some(p) = &prev {
                stable &= &m.slice_rows(0, t) == p;
            }
            prev = Some(m);
        }
        let memories = vec![
            dsq_core::decoding::speech_memory(&model, &store, P, d.utterances[0].features.as_ref().unwrap())?,
            random_matrix(&mut rng, 3, cfg.d_model),
        ];
        let targets = &d.utterances[1].tokens;
        let full = model.decoder.teacher_forced_log_probs(&store, P, targets, &memories)?;
        let sources = model.decoder.prepare_sources(&store, P, &memories)?;
        let mut state = DecoderState::new(&model.decoder);
        for (n, &input) in std::iter::once(&BOS).chain(&targets[..targets.len() - 1]).enumerate() {
            let (lp, next) = model.decoder.step(&store, P, &sources, &state, input)?;
            for (a, b) in lp.iter().zip(full.row(n)) {
                dec_err = dec_err.max((a - b).abs());
            }
            state = next;
        }
    }
    verdict(
        ctx_err < 1e-10 && dec_err < 1e-10 && stable,
        format!("context max diff {ctx_err:.1e}, decoder max diff {dec_err:.1e}, earlier context rows unchanged: {stable}"),
    )
}

// ---------------------------------------------------------------- 4

/// Best EOS-terminated sequence of at most `max_len` tokens by
/// enumerating all of them and scoring each with one teacher-forced pass.
fn exhaustive_best(model: &DiscourseModel, store: &ParamStore, memories: &[Tensor], v: usize, max_len: usize) -> Result<Vec<usize>> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut prefixes: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut seq = p.clone();
            seq.push(EOS);
            let lp = model.decoder.teacher_forced_log_probs(store, P, &seq, memories)?;
            let score: f64 = seq.iter().enumerate().map(|(n, &t)| lp.get(n, t)).sum();
            let better = match &best {
                None => true,
                Some((b, bs)) => score > *b || (score == *b && seq < *bs),
            };
            if better {
                best = Some((score, seq));
            }
            for t in (0..v).filter(|&t| t != EOS) {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        prefixes = next;
    }
    Ok(best.expect("at least one sequence").1)
}

fn beam_oracle() -> Result<Verdict> {
    let v = 4;
    let cfg = DecodeConfig {
        beam_size: 64,
        max_len: 3,
        length_norm: false,
        context: ContextMode::None,
    };
    let model_cfg = common::tiny_config();
    let (mut matches, mut total) = (0, 0);
    for seed in 0..100u64 {
        let (model, mut store) = DiscourseModel::new_lm(&model_cfg, v, 1000 + seed)?;
        // Sharpen the output layer so that the instances are not near-uniform.
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("decoder.output")).collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 30.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memories = vec![random_matrix(&mut rng, 2, model_cfg.d_model)];
        let sources = model.decoder.prepare_sources(&store, P, &memories)?;
        let out = beam_search(
            decoder_stepper(&model, &store, P, &sources),
            DecoderState::new(&model.decoder),
            EOS,
            &[],
            &cfg,
        )?;
        let oracle = exhaustive_best(&model, &store, &memories, v, cfg.max_len)?;
        total += 1;
        if out.ranked[0].tokens[1..] == oracle[..] {
            matches += 1;
        }
    }
    verdict(matches == total, format!("{matches}/{total} instances equal the exhaustive optimum"))
}

// ---------------------------------------------------------------- 5

fn smoothing_algebra() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let v = 9;
    let cfg = common::tiny_config();
    let (model, store) = DiscourseModel::new_asr(&cfg, v, 51)?;
    let s = Session::eval(&store, P);
    let (mut bitwise, mut ls_err, mut sum_err) = (true, 0.0f64, 0.0f64);
    for k in 0..20 {
        let d = random_discourse(60 + k, 2, v, Some(cfg.n_feats));
        let y: Vec<Tensor> = d.utterances.iter().map(|u| onehot(&u.tokens, v)).collect::<Result<_>>()?;
        let teacher: Vec<Tensor> = y
            .iter()
            .map(|t| {
                let rows: Vec<Vec<f64>> = (0..t.rows())
                    .map(|_| {
                        let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.0..1.0)).collect();
                        let z: f64 = raw.iter().sum();
                        raw.into_iter().map(|x| x / z).collect()
                    })
                    .collect();
                Tensor::from_rows(&rows)
            })
            .collect::<Result<_>>()?;
        let kd0: Vec<Tensor> = y.iter().zip(&teacher).map(|(a, q)| smooth_targets_kd(a, q, 0.0)).collect::<Result<_>>()?;
        let ml = segment_loss(&s, &model, &d.utterances, &y, true, None)?.value().item();
        let kd = segment_loss(&s, &model, &d.utterances, &kd0, true, None)?.value().item();
        bitwise &= ml.to_bits() == kd.to_bits();
        let alpha = rng.gen_range(0.05..0.95);
        for (yt, qt) in y.iter().zip(&teacher) {
            let uniform = uniform_non_pad(yt.rows(), v);
            let a = smooth_targets_kd(yt, &uniform, alpha)?;
            let b = smooth_targets_label(yt, alpha)?;
            ls_err = ls_err.max(a.max_abs_diff(&b));
            for t in [a, b, smooth_targets_kd(yt, qt, alpha)?] {
                for r in 0..t.rows() {
                    sum_err = sum_err.max((t.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    verdict(
        bitwise && ls_err < 1e-12 && sum_err < 1e-9,
        format!("alpha=0 bitwise: {bitwise}, uniform teacher vs label smoothing {ls_err:.1e}, row sums {sum_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 6

/// Step budgets: one epoch is two optimizer steps on the toy corpus.
const OVERFIT_ASR_EPOCHS: usize = 150;
const OVERFIT_LM_EPOCHS: usize = 600;

fn overfit() -> Result<Verdict> {
    let task = SynthTask::new(SynthTaskConfig {
        n_train: 2,
        n_valid: 1,
        n_test: 1,
        seed: 60,
        ..SynthTaskConfig::default()
    })?;
    let corpus = task.generate();
    let (vocab, stats) = vocab_and_stats(&corpus);
    let data = prepare(&corpus.train, &vocab, Some(&stats))?;
    let mcfg = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
    let tcfg = TrainingConfig {
        batch_size: 1,
        max_epochs: OVERFIT_ASR_EPOCHS,
        peak_lr: 5e-3,
        warmup_steps: 50,
        spec_augment: SpecAugmentConfig { enabled: false, ..SpecAugmentConfig::default() },
        ..TrainingConfig::default()
    };
    let targets = build_targets(&data, vocab.len(), &tcfg, None)?;

    let started = Instant::now();
    let (asr, mut asr_store) = DiscourseModel::new_asr(&mcfg, vocab.len(), 61)?;
    let out = train(&asr, &mut asr_store, &data, &[], &targets, &tcfg, 61, |_| {})?;
    let acc = teacher_forced_accuracy(&asr, &asr_store, &data, tcfg.max_utterances, true, P)?;
    let asr_secs = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let (lm, mut lm_store) = DiscourseModel::new_lm(&mcfg, vocab.len(), 62)?;
    let lm_cfg = TrainingConfig { max_epochs: OVERFIT_LM_EPOCHS, ..tcfg.clone() };
    let lm_out = train(&lm, &mut lm_store, &data, &[], &targets, &lm_cfg, 62, |_| {})?;
    let ppl = mean_nll(&lm, &lm_store, &data, tcfg.max_utterances, true, P)?.exp();
    let lm_secs = started.elapsed().as_secs_f64();
    verdict(
        acc == 1.0 && ppl < 1.05 && asr_secs < 120.0 && lm_secs < 120.0,
        format!(
            "recognizer accuracy {acc:.4} after {} steps ({asr_secs:.1}s), LM perplexity {ppl:.4} after {} steps ({lm_secs:.1}s)",
            out.steps, lm_out.steps
        ),
    )
}

// ---------------------------------------------------------------- 7-9

struct Desk {
    task: SynthTask,
    corpus: SynthCorpus,
    vocab: Vocabulary,
    train: Vec<PreparedDiscourse>,
    valid: Vec<PreparedDiscourse>,
    test: Vec<PreparedDiscourse>,
}

fn vocab_and_stats(corpus: &SynthCorpus) -> (Vocabulary, FeatureStats) {
    let texts: Vec<&str> = corpus.train.iter().flat_map(|d| d.texts()).collect();
    let vocab = Vocabulary::build(&texts).expect("nonempty corpus");
    let stats = FeatureStats::compute(corpus.train.iter().flat_map(|d| d.utterances.iter().map(|u| &u.features)))
        .expect("nonempty corpus");
    (vocab, stats)
}

fn desk() -> Result<Desk> {
    let task = SynthTask::new(SynthTaskConfig::default())?;
    let corpus = task.generate();
    let (vocab, stats) = vocab_and_stats(&corpus);
    Ok(Desk {
        train: prepare(&corpus.train, &vocab, Some(&stats))?,
        valid: prepare(&corpus.valid, &vocab, Some(&stats))?,
        test: prepare(&corpus.test, &vocab, Some(&stats))?,
        task,
        corpus,
        vocab,
    })
}

fn desk_training(use_context: bool, max_epochs: usize) -> TrainingConfig {
    TrainingConfig {
        use_context,
        max_epochs,
        batch_size: 2,
        peak_lr: 5e-3,
        warmup_steps: 50,
        patience: 3,
        spec_augment: SpecAugmentConfig { enabled: false, ..SpecAugmentConfig::default() },
        ..TrainingConfig::default()
    }
}

fn train_model(
    desk: &Desk,
    lm: bool,
    cfg: &TrainingConfig,
    seed: u64,
    teacher: Option<&TeacherCache>,
) -> Result<(DiscourseModel, ParamStore)> {
    let mcfg = ModelConfig::default();
    let (model, mut store) = if lm {
        DiscourseModel::new_lm(&mcfg, desk.vocab.len(), seed)?
    } else {
        DiscourseModel::new_asr(&mcfg, desk.vocab.len(), seed)?
    };
    let targets = build_targets(&desk.train, desk.vocab.len(), cfg, teacher)?;
    train(&model, &mut store, &desk.train, &desk.valid, &targets, cfg, seed, |_| {})?;
    Ok((model, store))
}

fn corpus_cer(
    desk: &Desk,
    model: &DiscourseModel,
    store: &ParamStore,
    data: &[PreparedDiscourse],
    raw: &[Discourse],
    context: ContextMode,
) -> Result<f64> {
    let cfg = DecodeConfig {
        beam_size: 4,
        max_len: 2 * desk.task.config.tokens_per_utterance + 1,
        length_norm: false,
        context,
    };
    let hyps = decode_corpus(model, store, P, data, &desk.vocab, &cfg)?;
    Ok(score_corpus(&hyps, &references(raw))?.cer())
}

struct ContextRuns {
    hypothesis: Vec<f64>,
    oracle: Vec<f64>,
    ablation: Vec<f64>,
    bayes_free: f64,
    bayes_topic: f64,
    seconds: f64,
}

fn context_runs(desk: &Desk) -> Result<ContextRuns> {
    let started = Instant::now();
    let mut runs = ContextRuns {
        hypothesis: Vec::new(),
        oracle: Vec::new(),
        ablation: Vec::new(),
        bayes_free: desk.task.bayes_error(&desk.corpus.test, false)?,
        bayes_topic: desk.task.bayes_error(&desk.corpus.test, true)?,
        seconds: 0.0,
    };
    for seed in SEEDS {
        let (m, s) = train_model(desk, false, &desk_training(true, 15), seed, None)?;
        runs.hypothesis.push(corpus_cer(desk, &m, &s, &desk.test, &desk.corpus.test, ContextMode::Hypothesis)?);
        runs.oracle.push(corpus_cer(desk, &m, &s, &desk.test, &desk.corpus.test, ContextMode::Oracle)?);
        let (m, s) = train_model(desk, false, &desk_training(false, 15), seed, None)?;
        runs.ablation.push(corpus_cer(desk, &m, &s, &desk.test, &desk.corpus.test, ContextMode::None)?);
        println!(
            "  seed {seed}: hypothesis {:.4} oracle {:.4} utterance-level {:.4}",
            runs.hypothesis.last().unwrap(),
            runs.oracle.last().unwrap(),
            runs.ablation.last().unwrap()
        );
    }
    runs.seconds = started.elapsed().as_secs_f64();
    Ok(runs)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn direction_of_effect(runs: &ContextRuns) -> Result<Verdict> {
    let (hier, flat) = (mean(&runs.hypothesis), mean(&runs.ablation));
    let reduction = if flat > 0.0 { (flat - hier) / flat } else { 0.0 };
    // The floor certifies the gap: without context some confusions are
    // unavoidable, with the topic known none are.
    let certified = runs.bayes_free > runs.bayes_topic;
    verdict(
        reduction >= 0.15 && certified && runs.seconds <= 1800.0,
        format!(
            "mean CER hierarchical {hier:.4} vs utterance-level {flat:.4} ({:.1}% reduction); Bayes floor without context {:.4}, with topic {:.4}; {:.0}s",
            100.0 * reduction,
            runs.bayes_free,
            runs.bayes_topic,
            runs.seconds
        ),
    )
}

fn oracle_context(runs: &ContextRuns) -> Result<Verdict> {
    let (hyp, orc) = (mean(&runs.hypothesis), mean(&runs.oracle));
    let gap = hyp - orc;
    // With a perfect hypothesis both CERs are zero; the relative gap is then
    // taken as satisfied only when oracle decoding is perfect too.
    let pass = orc <= hyp && if hyp > 0.0 { gap < 0.2 * hyp } else { orc == 0.0 };
    verdict(pass, format!("mean CER oracle {orc:.4} vs hypothesis {hyp:.4} (gap {gap:.4})"))
}

/// Validation grid for the distillation weight. The teacher's next-token
/// distribution on this task is close to flat, so large weights act like
/// heavy smoothing.
const ALPHAS: [f64; 3] = [0.05, 0.1, 0.2];

fn distillation(desk: &Desk) -> Result<Verdict> {
    let started = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (lm, lm_store) = train_model(desk, true, &desk_training(true, 15), 100 + seed, None)?;
        let teacher = TeacherCache::compute(&lm, &lm_store, &desk.train, &desk.vocab.hash(), 50, true, P)?;
        let ls_cfg = TrainingConfig { smoothing: Smoothing::Label, ..desk_training(true, 15) };
        let (m, s) = train_model(desk, false, &ls_cfg, seed, None)?;
        let ls = corpus_cer(desk, &m, &s, &desk.valid, &desk.corpus.valid, ContextMode::Hypothesis)?;
        let mut kd = f64::INFINITY;
        let mut grid = Vec::new();
        for alpha in ALPHAS {
            let cfg = TrainingConfig { smoothing: Smoothing::Kd, alpha, ..desk_training(true, 15) };
            let (m, s) = train_model(desk, false, &cfg, seed, Some(&teacher))?;
            let c = corpus_cer(desk, &m, &s, &desk.valid, &desk.corpus.valid, ContextMode::Hypothesis)?;
            kd = kd.min(c);
            grid.push(format!("{alpha}: {c:.4}"));
        }
        wins += usize::from(kd <= ls);
        println!("  seed {seed}: label smoothing {ls:.4}, distillation by alpha {{{}}}", grid.join(", "));
        lines.push(format!("{kd:.4}/{ls:.4}"));
    }
    verdict(
        wins >= 2,
        format!(
            "distillation ≤ label smoothing on {wins}/3 seeds (KD/LS valid CER {}); {:.0}s",
            lines.join(", "),
            started.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 10

/// Memoized recursion over suffixes, written independently of the scorer.
fn levenshtein_oracle(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

fn cer_oracle() -> Result<Verdict> {
    let alphabet: Vec<char> = "abcあいう é".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut word = |max: usize| -> String {
            let n = rng.gen_range(0..=max);
            (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        let hyp = word(12);
        let mut reference = word(12);
        if reference.is_empty() {
            reference.push('a');
        }
        let (h, r): (Vec<char>, Vec<char>) = (hyp.chars().collect(), reference.chars().collect());
        let want = levenshtein_oracle(&h, &r);
        let cer = compute_cer(&hyp, &reference)?;
        if edit_distance(&hyp, &reference) != want || cer != want as f64 / r.len() as f64 {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("1000 random pairs, {mismatches} mismatches"))
}

// ----------------------------------------------------------------

fn main() {
    let selected: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut failures = 0;
    let mut report = |n: usize, name: &str, started: Instant, v: Result<Verdict>| {
        let secs = started.elapsed().as_secs_f64();
        match v {
            Ok(v) => {
                failures += usize::from(!v.pass);
                println!(
                    "criterion {n:>2} {:<28} {} ({secs:.1}s) {}",
                    name,
                    if v.pass { "PASS" } else { "FAIL" },
                    v.detail
                );
            }
            Err(e) => {
                failures += 1;
                println!("criterion {n:>2} {name:<28} FAIL ({secs:.1}s) error: {e}");
            }
        }
    };
    let simple: [(usize, &str, fn() -> Result<Verdict>); 7] = [
        (1, "gradient suite", gradient_suite),
        (2, "causality", causality_suite),
        (3, "incremental equals batch", incremental_suite),
        (4, "beam search oracle", beam_oracle),
        (5, "smoothing algebra", smoothing_algebra),
        (6, "overfit", overfit),
        (10, "CER oracle", cer_oracle),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            let t = Instant::now();
            report(n, name, t, f());
        }
    }
    if wanted(7) || wanted(8) || wanted(9) {
        match desk() {
            Ok(desk) => {
                if wanted(7) || wanted(8) {
                    let t = Instant::now();
                    match context_runs(&desk) {
                        Ok(runs) => {
                            if wanted(7) {
                                report(7, "context direction of effect", t, direction_of_effect(&runs));
                            }
                            if wanted(8) {
                                report(8, "oracle vs hypothesis context", t, oracle_context(&runs));
                            }
                        }
                        Err(e) => {
                            for n in [7, 8].into_iter().filter(|&n| wanted(n)) {
                                report(n, "context experiment", t, Err(dsq_core::Error::Data(e.to_string())));
                            }
                        }
                    }
                }
                if wanted(9) {
                    let t = Instant::now();
                    report(9, "distillation vs smoothing", t, distillation(&desk));
                }
            }
            Err(e) => println!("synthetic corpus could not be built: {e}"),
        }
    }
    if failures > 0 {
        println!("acceptance: {failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
