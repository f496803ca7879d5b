use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::anyhow;
use visaug::augmenter::{Augmenter, MockBackend, RemoteBackend, RemoteConfig};
use visaug::data::{
    build_examples, corpus_gammas, prepare, read_jsonl, source_example, tokenize_source, PipelineConfig, Record,
};
use visaug::decoding::{generate, DecodeConfig};
use visaug::embed_cache::EmbeddingCache;
use visaug::gating::{gated_fraction, load_noun_lexicon, synthesis_texts, FusionScope, GateConfig};
use visaug::metrics::{evaluate, EvalReport, METRICS};
use visaug::model::{read_checkpoint, Example, InitOptions, Model, ModelConfig};
use visaug::segmentation::{build_vocab, Vocab};
use visaug::training::{
    derive_seed, few_shot_seeds, few_shot_split, finetune, pretrain, CaptionImage, FinetuneConfig, PretrainConfig,
    RunDir, TrainError,
};

use crate::config::RunConfig;
use crate::{usage, Failure, StageExt};

type Res<T> = Result<T, Failure>;

pub fn dispatch(name: &str, cfg: &RunConfig) -> Res<()> {
    check_all(cfg)?;
    match name {
        "prepare" => cmd_prepare(cfg),
        "pretrain" => cmd_pretrain(cfg),
        "finetune" => cmd_finetune(cfg),
        "generate" => cmd_generate(cfg),
        "evaluate" => cmd_evaluate(cfg),
        "sweep-theta" => cmd_sweep(cfg),
        "fewshot" => cmd_fewshot(cfg),
        other => Err(usage(format!("unknown command '{other}'"))),
    }
}

/// Parses every key up front so a bad value fails before any work,
/// whichever command reads it.
fn check_all(cfg: &RunConfig) -> Res<()> {
    pipeline(cfg)?;
    augmenter(cfg)?;
    decode_config(cfg)?;
    finetune_config(cfg, 0)?;
    pretrain_config(cfg, 0)?;
    let vocab_size: usize = get(cfg, "vocab-size")?;
    ModelConfig::from_kv(&model_kv(cfg, vocab_size)?).map_err(|e| usage(e.to_string()))?;
    for key in ["augment-batch", "groups", "remote-retries", "remote-timeout-secs"] {
        get::<u64>(cfg, key)?;
    }
    for key in ["theta-grid", "fractions"] {
        cfg.list::<f64>(key).map_err(usage)?;
    }
    Ok(())
}

fn get<T: std::str::FromStr>(cfg: &RunConfig, key: &str) -> Res<T>
where
    T::Err: std::fmt::Display,
{
    cfg.get(key).map_err(usage)
}

/// An input file that must exist before any work starts.
fn input(cfg: &RunConfig, key: &str) -> Res<PathBuf> {
    let p = cfg.path(key).ok_or_else(|| usage(format!("--{key} is required")))?;
    if !p.is_file() {
        return Err(usage(format!("--{key} {}: no such file", p.display())));
    }
    Ok(p)
}

fn optional_input(cfg: &RunConfig, key: &str) -> Res<Option<PathBuf>> {
    if cfg.path(key).is_some() {
        input(cfg, key).map(Some)
    } else {
        Ok(None)
    }
}

fn unit_interval(cfg: &RunConfig, key: &str) -> Res<f64> {
    let v: f64 = get(cfg, key)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(usage(format!("{key} must lie in [0, 1], got {v}")));
    }
    Ok(v)
}

fn gate_config(cfg: &RunConfig, theta: f64) -> Res<GateConfig> {
    let scope: FusionScope = get(cfg, "fusion-scope")?;
    let noun_lexicon = match (scope, optional_input(cfg, "noun-lexicon")?) {
        (FusionScope::NounsOnly, None) => return Err(usage("fusion-scope=nouns_only needs --noun-lexicon")),
        (FusionScope::NounsOnly, Some(p)) => Some(load_noun_lexicon(&p).stage("load noun lexicon")?),
        (_, _) => None,
    };
    Ok(GateConfig {
        theta,
        granularity: get(cfg, "granularity")?,
        scope,
        noun_lexicon,
    })
}

fn pipeline(cfg: &RunConfig) -> Res<PipelineConfig> {
    Ok(PipelineConfig {
        mode: get(cfg, "segment-mode")?,
        gate: gate_config(cfg, unit_interval(cfg, "theta")?)?,
        seed: derive_seed(get(cfg, "seed")?, "augment"),
        steps: get(cfg, "diffusion-steps")?,
        patch_count: get(cfg, "patch-count")?,
        image_dim: get(cfg, "image-dim")?,
    })
}

fn augmenter(cfg: &RunConfig) -> Res<Augmenter> {
    Ok(match cfg.raw("backend") {
        "mock" => match optional_input(cfg, "mock-fixtures")? {
            Some(p) => Augmenter::Mock(MockBackend::from_fixture_file(&p).stage("load mock fixtures")?),
            None => Augmenter::Mock(MockBackend::new()),
        },
        "remote" => Augmenter::Remote(RemoteBackend::new(RemoteConfig {
            base_url: cfg.raw("remote-url").to_string(),
            timeout: Duration::from_secs(get(cfg, "remote-timeout-secs")?),
            retries: get(cfg, "remote-retries")?,
            backoff: Duration::from_millis(500),
        })),
        "noise" => Augmenter::Noise,
        other => return Err(usage(format!("unknown backend '{other}'"))),
    })
}

fn clip_norm(cfg: &RunConfig) -> Res<Option<f64>> {
    match cfg.raw("clip-norm") {
        "none" | "" => Ok(None),
        _ => get(cfg, "clip-norm").map(Some),
    }
}

fn decode_config(cfg: &RunConfig) -> Res<DecodeConfig> {
    let d = DecodeConfig {
        mode: get(cfg, "decode-mode")?,
        beam_size: get(cfg, "beam-size")?,
        top_p: get(cfg, "top-p")?,
        temperature: get(cfg, "temperature")?,
        max_len: get(cfg, "decode-max-len")?,
        seed: derive_seed(get(cfg, "seed")?, "decode"),
        length_normalize: get(cfg, "length-normalize")?,
    };
    d.validate().map_err(usage)?;
    Ok(d)
}

fn finetune_config(cfg: &RunConfig, seed: u64) -> Res<FinetuneConfig> {
    let metric = cfg.raw("metric").to_string();
    if metric != "loss" && !METRICS.contains(&metric.as_str()) {
        return Err(usage(format!("unknown metric '{metric}'; expected loss or one of {METRICS:?}")));
    }
    let f = FinetuneConfig {
        batch_size: get(cfg, "batch-size")?,
        epochs: get(cfg, "epochs")?,
        learning_rate: get(cfg, "learning-rate")?,
        momentum: get(cfg, "momentum")?,
        smoothing: get(cfg, "smoothing")?,
        clip_norm: clip_norm(cfg)?,
        metric,
        seed,
    };
    f.validate().map_err(|e| usage(e.to_string()))?;
    Ok(f)
}

fn pretrain_config(cfg: &RunConfig, seed: u64) -> Res<PretrainConfig> {
    let p = PretrainConfig {
        mask_ratio: get(cfg, "mask-ratio")?,
        span_lambda: get(cfg, "span-lambda")?,
        batch_size: get(cfg, "pretrain-batch-size")?,
        steps: get(cfg, "pretrain-steps")?,
        learning_rate: get(cfg, "pretrain-learning-rate")?,
        momentum: get(cfg, "momentum")?,
        clip_norm: clip_norm(cfg)?,
        seed,
    };
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

/// Backbone shape keys; a checkpoint fixes them.
const BACKBONE_KEYS: &[&str] = &[
    "model-dim",
    "heads",
    "encoder-layers",
    "decoder-layers",
    "ffn-dim",
    "max-len",
];
const FUSION_KEYS: &[&str] = &[
    "image-dim",
    "projection-hidden",
    "fusion-strategy",
    "fusion-layers",
    "fusion-norm",
];

/// Model keys as `ModelConfig::from_kv` expects them, with `auto` and
/// `all` resolved.
fn model_kv(cfg: &RunConfig, vocab_size: usize) -> Res<BTreeMap<String, String>> {
    let d: usize = get(cfg, "model-dim")?;
    let mut kv: BTreeMap<String, String> = BACKBONE_KEYS
        .iter()
        .chain(FUSION_KEYS)
        .map(|k| (k.to_string(), cfg.raw(k).to_string()))
        .collect();
    kv.insert("vocab-size".into(), vocab_size.to_string());
    for (key, mult) in [("ffn-dim", 4), ("projection-hidden", 2)] {
        if kv[key] == "auto" {
            kv.insert(key.into(), (mult * d).to_string());
        }
    }
    if kv["fusion-layers"] == "all" {
        let layers: usize = get(cfg, "encoder-layers")?;
        let all: Vec<String> = (0..layers).map(|l| l.to_string()).collect();
        kv.insert("fusion-layers".into(), all.join(","));
    }
    Ok(kv)
}

/// Model and vocabulary for a run: from `--checkpoint` with any explicitly
/// set fusion keys applied, or freshly initialized with a vocabulary built
/// from the training set. `fusion_changes` lists the keys allowed to
/// differ from the checkpoint.
fn load_model(cfg: &RunConfig, train: Option<&[Record]>, fusion_changes: &[&str], init_seed: u64) -> Res<(Model, Vocab)> {
    let init = InitOptions::default();
    if let Some(path) = optional_input(cfg, "checkpoint")? {
        let ckpt = read_checkpoint(&path).stage("load checkpoint")?;
        let vocab = Vocab::from_tokens(ckpt.vocab.clone()).map_err(|e| Failure::Stage("load checkpoint", anyhow!(e)))?;
        let mut kv: BTreeMap<String, String> = ckpt.config.to_kv().into_iter().collect();
        let wanted = model_kv(cfg, ckpt.config.vocab_size)?;
        for key in BACKBONE_KEYS.iter().chain(FUSION_KEYS) {
            if !cfg.is_set(key) || kv[*key] == wanted[*key] {
                continue;
            }
            if !fusion_changes.contains(key) {
                return Err(usage(format!(
                    "--{key} {} conflicts with checkpoint value {}",
                    wanted[*key], kv[*key]
                )));
            }
            kv.insert(key.to_string(), wanted[*key].clone());
        }
        let mc = ModelConfig::from_kv(&kv).map_err(|e| usage(e.to_string()))?;
        let model = if mc == ckpt.config {
            ckpt.model()
        } else {
            Model::assemble(mc, &ckpt.params, init, init_seed)
        }
        .stage("load checkpoint")?;
        return Ok((model, vocab));
    }
    let train = train.ok_or_else(|| usage("--checkpoint is required"))?;
    let corpus: Vec<&str> = train.iter().flat_map(|r| [r.source.as_str(), r.target.as_str()]).collect();
    let vocab = build_vocab(&corpus, get(cfg, "vocab-size")?).stage("build vocabulary")?;
    let mc = ModelConfig::from_kv(&model_kv(cfg, vocab.len())?).map_err(|e| usage(e.to_string()))?;
    let model = Model::new(mc, init, init_seed).stage("initialize model")?;
    Ok((model, vocab))
}

fn records(path: &Path, stage: &'static str) -> Res<Vec<Record>> {
    let r = read_jsonl(path).stage(stage)?;
    if r.is_empty() {
        return Err(Failure::Stage(stage, anyhow!("{} has no records", path.display())));
    }
    Ok(r)
}

fn load_cache(cfg: &RunConfig, model: Option<&Model>) -> Res<EmbeddingCache> {
    let cache = EmbeddingCache::load(&input(cfg, "cache")?).stage("load cache")?;
    let (_, d) = cache.shape();
    if let Some(m) = model {
        if m.config().image_dim != d {
            return Err(usage(format!(
                "model image-dim {} does not match cache width {d}",
                m.config().image_dim
            )));
        }
    }
    Ok(cache)
}

fn run_dir(cfg: &RunConfig, vocab: &Vocab) -> Res<RunDir> {
    let path = cfg.path("run-dir").ok_or_else(|| usage("--run-dir is required"))?;
    RunDir::create(&path, &cfg.snapshot(), vocab.tokens().to_vec()).stage("create run directory")
}

fn cmd_prepare(cfg: &RunConfig) -> Res<()> {
    let pipe = pipeline(cfg)?;
    let aug = augmenter(cfg)?;
    let batch: usize = get(cfg, "augment-batch")?;
    let mut files = Vec::new();
    for key in ["train", "valid", "test"] {
        if let Some(p) = optional_input(cfg, key)? {
            files.push(p);
        }
    }
    if files.is_empty() {
        return Err(usage("prepare needs at least one of --train, --valid, --test"));
    }
    let cache_path = cfg.path("cache").ok_or_else(|| usage("--cache is required"))?;
    let mut sources = Vec::new();
    for f in &files {
        sources.extend(records(f, "read dataset")?.into_iter().map(|r| r.source));
    }
    let vocab = build_vocab(&sources, usize::MAX).stage("build vocabulary")?;
    let mut cache = if cache_path.exists() {
        let c = EmbeddingCache::load(&cache_path).stage("load cache")?;
        if c.shape() != (pipe.patch_count, pipe.image_dim) {
            return Err(usage(format!(
                "cache {} holds {:?} patches, config asks for {:?}",
                cache_path.display(),
                c.shape(),
                (pipe.patch_count, pipe.image_dim)
            )));
        }
        c
    } else {
        EmbeddingCache::new(pipe.patch_count, pipe.image_dim)
    };
    let stats = prepare(&sources, &vocab, &aug, &mut cache, &pipe, batch).stage("augment")?;
    cache.persist(&cache_path).stage("write cache")?;
    println!(
        "prepare: {} texts, {} unique, {} hits, {} misses, hit rate {:.1}%",
        stats.texts,
        stats.unique,
        stats.hits,
        stats.misses,
        100.0 * stats.hit_rate()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Res<()> {
    let master: u64 = get(cfg, "seed")?;
    let pipe = pipeline(cfg)?;
    let train = records(&input(cfg, "train")?, "read dataset")?;
    let (mut model, vocab) = load_model(cfg, Some(&train), FUSION_KEYS, derive_seed(master, "init"))?;
    let cache = load_cache(cfg, Some(&model))?;
    let pcfg = pretrain_config(cfg, derive_seed(master, "pretrain"))?;

    let mut pairs = Vec::new();
    for (i, r) in train.iter().enumerate() {
        let doc = tokenize_source(&r.source, &vocab, pipe.mode)
            .map_err(|e| Failure::Stage("segment", anyhow!("record {i}: {e}")))?;
        for text in synthesis_texts(&doc, pipe.gate.granularity) {
            let emb = cache
                .lookup(&text)
                .ok_or_else(|| Failure::Stage("load cache", anyhow!("no cached image for \"{text}\"; run prepare first")))?;
            pairs.push(CaptionImage {
                ids: vocab.encode(&text),
                image: emb.patches.to_matrix(),
                gamma: emb.gamma,
            });
        }
    }
    let mut run = run_dir(cfg, &vocab)?;
    let report = pretrain(&mut model, &pairs, &pcfg, pipe.gate.theta, Some(&mut run)).stage("pretrain")?;
    println!(
        "pretrain: {} pairs, {} steps, loss {:.4} -> {:.4}, saved {}",
        pairs.len(),
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        run.path().join("pretrained.ckpt").display()
    );
    Ok(())
}

/// Decodes every example; seeds differ per example.
fn generate_all(model: &Model, vocab: &Vocab, examples: &[Example], dcfg: &DecodeConfig) -> Result<Vec<String>, TrainError> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let d = DecodeConfig {
                seed: derive_seed(dcfg.seed, &i.to_string()),
                ..dcfg.clone()
            };
            let ids = generate(model, &ex.src, &ex.images, &ex.assign, &d)?;
            Ok(vocab.decode(&ids))
        })
        .collect()
}

/// All targets sharing each record's source serve as its references.
fn references(recs: &[Record]) -> Vec<Vec<String>> {
    let mut by_source: HashMap<&str, Vec<String>> = HashMap::new();
    for r in recs {
        by_source.entry(&r.source).or_default().push(r.target.clone());
    }
    recs.iter().map(|r| by_source[r.source.as_str()].clone()).collect()
}

fn score(model: &Model, vocab: &Vocab, examples: &[Example], recs: &[Record], dcfg: &DecodeConfig) -> Result<EvalReport, TrainError> {
    let hyps = generate_all(model, vocab, examples, dcfg)?;
    evaluate(&hyps, &references(recs), BTreeMap::new()).map_err(|e| TrainError::InvalidConfig(e.to_string()))
}

fn validation_metric<'a>(
    metric: &'a str,
    vocab: &'a Vocab,
    examples: &'a [Example],
    recs: &'a [Record],
    dcfg: &'a DecodeConfig,
) -> impl FnMut(&Model) -> Result<f64, TrainError> + 'a {
    move |model: &Model| {
        if metric == "loss" {
            return Ok(-model.batch_loss(examples, 0.0)?);
        }
        let report = score(model, vocab, examples, recs, dcfg)?;
        Ok(report.get(metric).unwrap_or(0.0))
    }
}

fn cmd_finetune(cfg: &RunConfig) -> Res<()> {
    let master: u64 = get(cfg, "seed")?;
    let pipe = pipeline(cfg)?;
    let fcfg = finetune_config(cfg, derive_seed(master, "finetune"))?;
    let dcfg = decode_config(cfg)?;
    let train = records(&input(cfg, "train")?, "read dataset")?;
    let valid = match optional_input(cfg, "valid")? {
        Some(p) => records(&p, "read dataset")?,
        None => train.clone(),
    };
    let (mut model, vocab) = load_model(cfg, Some(&train), FUSION_KEYS, derive_seed(master, "init"))?;
    let cache = load_cache(cfg, Some(&model))?;
    let train_ex = build_examples(&train, &vocab, &cache, &pipe).stage("build examples")?;
    let valid_ex = build_examples(&valid, &vocab, &cache, &pipe).stage("build examples")?;
    let mut run = run_dir(cfg, &vocab)?;
    let validate = validation_metric(&fcfg.metric, &vocab, &valid_ex, &valid, &dcfg);
    let report = finetune(&mut model, &train_ex, &fcfg, validate, Some(&mut run)).stage("finetune")?;
    for (e, m) in report.epoch_metrics.iter().enumerate() {
        println!("epoch {e} {}={m:.6}", fcfg.metric);
    }
    println!(
        "finetune: best epoch {}, saved {}",
        report.best_epoch,
        run.path().join("best.ckpt").display()
    );
    Ok(())
}

fn cmd_generate(cfg: &RunConfig) -> Res<()> {
    let pipe = pipeline(cfg)?;
    let dcfg = decode_config(cfg)?;
    input(cfg, "checkpoint")?;
    let test = records(&input(cfg, "test")?, "read dataset")?;
    let seed = derive_seed(get(cfg, "seed")?, "init");
    let (model, vocab) = load_model(cfg, None, &["fusion-strategy"], seed)?;
    let cache = load_cache(cfg, Some(&model))?;
    let mut lines = Vec::with_capacity(test.len());
    for (i, r) in test.iter().enumerate() {
        let ex = source_example(&r.source, Vec::new(), &vocab, &cache, &pipe)
            .map_err(|e| Failure::Stage("build examples", anyhow!("record {i}: {e}")))?;
        let d = DecodeConfig {
            seed: derive_seed(dcfg.seed, &i.to_string()),
            ..dcfg.clone()
        };
        let ids = generate(&model, &ex.src, &ex.images, &ex.assign, &d)
            .map_err(|e| Failure::Stage("generate", anyhow!("record {i}: {e}")))?;
        lines.push(vocab.decode(&ids));
    }
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match cfg.path("output") {
        Some(p) => std::fs::write(&p, text).stage("write output")?,
        None => std::io::stdout().write_all(text.as_bytes()).stage("write output")?,
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Res<()> {
    let hyp_path = input(cfg, "hypotheses")?;
    let test_path = input(cfg, "test")?;
    let test = records(&test_path, "read dataset")?;
    let hyps: Vec<String> = std::fs::read_to_string(&hyp_path)
        .stage("read hypotheses")?
        .lines()
        .map(str::to_string)
        .collect();
    if hyps.len() != test.len() {
        return Err(Failure::Stage(
            "evaluate",
            anyhow!("{} hypotheses for {} test records", hyps.len(), test.len()),
        ));
    }
    let echo = BTreeMap::from([
        ("hypotheses".to_string(), hyp_path.display().to_string()),
        ("test".to_string(), test_path.display().to_string()),
    ]);
    let report = evaluate(&hyps, &references(&test), echo).stage("evaluate")?;
    print!("{}", report.table());
    let report_path = match cfg.path("report") {
        Some(p) => p,
        None => {
            let dir = cfg.path("run-dir").ok_or_else(|| usage("--report or --run-dir is required"))?;
            std::fs::create_dir_all(&dir).stage("write report")?;
            dir.join("report.jsonl")
        }
    };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&report_path)
        .stage("write report")?;
    writeln!(f, "{}", report.json_line()).stage("write report")?;
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Res<()> {
    let grid: Vec<f64> = cfg.list("theta-grid").map_err(usage)?;
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(usage("theta-grid values must lie in [0, 1]"));
    }
    let corpus_path = match optional_input(cfg, "test")? {
        Some(p) => p,
        None => input(cfg, "train")?,
    };
    let recs = records(&corpus_path, "read dataset")?;
    let mut pipe = pipeline(cfg)?;
    let scored = match optional_input(cfg, "checkpoint")? {
        Some(_) => {
            let seed = derive_seed(get(cfg, "seed")?, "init");
            Some((load_model(cfg, None, &["fusion-strategy"], seed)?, decode_config(cfg)?))
        }
        None => None,
    };
    let cache = load_cache(cfg, scored.as_ref().map(|((m, _), _)| m))?;
    let vocab = match &scored {
        Some(((_, v), _)) => v.clone(),
        None => {
            let sources: Vec<&str> = recs.iter().map(|r| r.source.as_str()).collect();
            build_vocab(&sources, usize::MAX).stage("build vocabulary")?
        }
    };
    let sources: Vec<String> = recs.iter().map(|r| r.source.clone()).collect();
    let gammas = corpus_gammas(&sources, &vocab, &cache, &pipe).stage("sweep")?;
    for &theta in &grid {
        let mut line = format!("theta={theta:.3} gated={:.6}", gated_fraction(gammas.iter().copied(), theta));
        if let Some(((model, vocab), dcfg)) = &scored {
            pipe.gate.theta = theta;
            let examples = build_examples(&recs, vocab, &cache, &pipe).stage("build examples")?;
            let report = score(model, vocab, &examples, &recs, dcfg).stage("generate")?;
            line.push_str(&format!(" bleu4={:.6}", report.get("bleu4").unwrap_or(0.0)));
        }
        println!("{line}");
    }
    Ok(())
}

fn cmd_fewshot(cfg: &RunConfig) -> Res<()> {
    let master: u64 = get(cfg, "seed")?;
    let fractions: Vec<f64> = cfg.list("fractions").map_err(usage)?;
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(usage("fractions must lie in (0, 1]"));
    }
    let groups: usize = get(cfg, "groups")?;
    let pipe = pipeline(cfg)?;
    let dcfg = decode_config(cfg)?;
    finetune_config(cfg, 0)?;
    let train = records(&input(cfg, "train")?, "read dataset")?;
    let test = records(&input(cfg, "test")?, "read dataset")?;
    let valid = match optional_input(cfg, "valid")? {
        Some(p) => Some(records(&p, "read dataset")?),
        None => None,
    };
    let (base, vocab) = load_model(cfg, Some(&train), FUSION_KEYS, derive_seed(master, "init"))?;
    let cache = load_cache(cfg, Some(&base))?;
    let train_ex = build_examples(&train, &vocab, &cache, &pipe).stage("build examples")?;
    let test_ex = build_examples(&test, &vocab, &cache, &pipe).stage("build examples")?;
    let valid_ex = match &valid {
        Some(v) => Some(build_examples(v, &vocab, &cache, &pipe).stage("build examples")?),
        None => None,
    };
    let mut run = run_dir(cfg, &vocab)?;
    let from_checkpoint = cfg.path("checkpoint").is_some();

    for &fraction in &fractions {
        let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
        for (g, seed) in few_shot_seeds(derive_seed(master, "fewshot"), groups).into_iter().enumerate() {
            let idx = few_shot_split(train.len(), fraction, seed).stage("fewshot")?;
            let sub_ex: Vec<Example> = idx.iter().map(|&i| train_ex[i].clone()).collect();
            let sub_recs: Vec<Record> = idx.iter().map(|&i| train[i].clone()).collect();
            let (v_ex, v_recs) = match (&valid_ex, &valid) {
                (Some(e), Some(r)) => (e.as_slice(), r.as_slice()),
                _ => (sub_ex.as_slice(), sub_recs.as_slice()),
            };
            let mut model = if from_checkpoint {
                base.clone()
            } else {
                Model::new(base.config().clone(), InitOptions::default(), derive_seed(seed, "init")).stage("initialize model")?
            };
            let fcfg = finetune_config(cfg, seed)?;
            let validate = validation_metric(&fcfg.metric, &vocab, v_ex, v_recs, &dcfg);
            finetune(&mut model, &sub_ex, &fcfg, validate, None).stage("finetune")?;
            let report = score(&model, &vocab, &test_ex, &test, &dcfg).stage("generate")?;
            let mut line = format!("fraction={fraction} group={g} examples={}", idx.len());
            for m in METRICS {
                let v = report.get(m).unwrap_or(0.0);
                *totals.entry(m).or_default() += v;
                line.push_str(&format!(" {m}={v:.6}"));
            }
            println!("{line}");
            run.log_line(&line).stage("write log")?;
        }
        let mut line = format!("fraction={fraction} mean");
        for m in METRICS {
            line.push_str(&format!(" {m}={:.6}", totals[m] / groups as f64));
        }
        println!("{line}");
        run.log_line(&line).stage("write log")?;
    }
    Ok(())
}
