use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use restyle::config::RunConfig;
use restyle::corpus::{
    dataset_stats, filter_dataset, load_corpus, write_atomic, write_corpus, Story, StyleId,
    StyleVocabulary,
};
use restyle::eval::{evaluate, points_to_csv, project_2d, style_features, BleuMode};
use restyle::keywords::{build_dictionary, load_dictionaries, save_dictionaries, KeywordDictionary};
use restyle::nn::{Checkpoint, FillModel, StyleClassifier, TransferModel};
use restyle::pipeline::{parse_requests, records_to_jsonl, Pipeline, TransferRecord};
use restyle::text::{LanguageRules, SimpleTokenizer, Tokenizer};
use restyle::trainer::{
    classifier_examples, holdout_split, keyword_swaps, prepare_stage1, prepare_stage2, train_classifier,
    train_stage1, train_stage2, RunManifest, Stage1Options, TrainOptions,
};
use restyle::workflow::{all_keywords, build_vocab, default_tagger, trainable};

use crate::{AblationArgs, Cli, Command, GlobalArgs};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global).context("configuration")?;
    if cfg.deterministic {
        // Kernel thread pools read this on first use.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match cli.command {
        Command::Prepare {
            input,
            synthetic,
            out,
            max_tokens,
            min_sentences,
        } => prepare(input, synthetic, &out, max_tokens, min_sentences, &cfg).context("prepare"),
        Command::ExtractKeywords { corpus, out } => {
            extract_keywords(&corpus.corpus, &out, &cfg).context("extract-keywords")
        }
        Command::TrainClassifier { corpus, dicts, out } => {
            train_classifier_cmd(&corpus.corpus, dicts.as_deref(), &out, &cfg).context("train-classifier")
        }
        Command::TrainStage1 {
            corpus,
            dicts,
            classifier,
            out,
            ablation,
            resume,
        } => {
            let cfg = apply_ablation(cfg, &ablation)?;
            train_stage1_cmd(&corpus.corpus, dicts.as_deref(), &classifier, &out, resume, &cfg)
                .context("train-stage1")
        }
        Command::TrainStage2 {
            corpus,
            dicts,
            out,
            resume,
        } => train_stage2_cmd(&corpus.corpus, &dicts, &out, resume, &cfg).context("train-stage2"),
        Command::Transfer {
            stage1,
            stage2,
            dicts,
            target,
            input,
            out,
        } => transfer(&stage1, stage2.as_deref(), dicts.as_deref(), target.as_deref(), &input, &out)
            .context("transfer"),
        Command::Evaluate {
            outputs,
            inputs,
            target,
            classifier,
            embedder,
            sentence_bleu,
            out,
        } => evaluate_cmd(&outputs, &inputs, &target, &classifier, &embedder, sentence_bleu, out.as_deref())
            .context("evaluate"),
        Command::ProjectStyles {
            corpus,
            outputs,
            csv,
            png,
        } => project_styles(&corpus.corpus, outputs.as_deref(), &csv, png.as_deref()).context("project-styles"),
    }
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::profile(g.profile.as_deref().unwrap_or("toy"))?;
    if let Some(path) = &g.config {
        cfg.apply_file(path)?;
        if let Some(p) = &g.profile {
            if *p != cfg.profile {
                log::warn!("config file selects profile {}, overriding --profile {p}", cfg.profile);
            }
        }
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if g.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_ablation(mut cfg: RunConfig, a: &AblationArgs) -> Result<RunConfig> {
    if let Some(v) = a.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = a.lambda3 {
        cfg.lambda3 = v;
    }
    if a.skip_stage2 {
        cfg.skip_stage2 = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Writes `<out>.config.txt` and returns its path.
fn echo_config(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let path = sibling(out, ".config.txt");
    write_atomic(&path, cfg.to_text().as_bytes())?;
    Ok(path)
}

/// Style names in order of first appearance in a JSONL corpus.
fn corpus_styles(path: &Path) -> Result<StyleVocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut names: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let Some(style) = v.get("style").and_then(Value::as_str) else {
            bail!("{}:{}: record has no \"style\" field", path.display(), i + 1);
        };
        if !names.iter().any(|n| n == style) {
            names.push(style.to_string());
        }
    }
    Ok(StyleVocabulary::new(names)?)
}

fn read_corpus(path: &Path) -> Result<(StyleVocabulary, Vec<Story>)> {
    let styles = corpus_styles(path)?;
    let stories = load_corpus(path, &styles, &SimpleTokenizer, &LanguageRules::default())
        .with_context(|| format!("loading {}", path.display()))?;
    if stories.is_empty() {
        bail!("{} contains no stories", path.display());
    }
    Ok((styles, stories))
}

/// The corpus restricted to stories that fit the model's length limits.
fn read_trainable(path: &Path, cfg: &RunConfig) -> Result<(StyleVocabulary, Vec<Story>, Vec<Story>)> {
    let (styles, all) = read_corpus(path)?;
    let kept = trainable(&all, cfg);
    if kept.len() < all.len() {
        log::warn!(
            "{} of {} stories exceed max_len {} or max_sentences {} and are skipped",
            all.len() - kept.len(),
            all.len(),
            cfg.max_len,
            cfg.max_sentences
        );
    }
    if kept.is_empty() {
        bail!("no story fits the model limits");
    }
    Ok((styles, all, kept))
}

fn read_dicts(path: &Path, styles: &StyleVocabulary) -> Result<BTreeMap<StyleId, KeywordDictionary>> {
    load_dictionaries(path, styles).with_context(|| format!("loading dictionaries {}", path.display()))
}

fn write_manifest(command: &str, cfg: &RunConfig, out: &Path, config_path: PathBuf, metrics: Option<PathBuf>, results: Value) -> Result<()> {
    RunManifest {
        command: command.to_string(),
        seed: cfg.seed,
        steps: match command {
            "train-classifier" => cfg.clf_steps,
            "train-stage2" => cfg.stage2_steps,
            _ => cfg.steps,
        },
        config_path: Some(config_path),
        checkpoint_paths: vec![out.to_path_buf()],
        metrics_log: metrics,
        results,
    }
    .save(&sibling(out, ".manifest.json"))?;
    Ok(())
}

fn prepare(
    input: Option<PathBuf>,
    synthetic: Option<usize>,
    out: &Path,
    max_tokens: Option<usize>,
    min_sentences: usize,
    cfg: &RunConfig,
) -> Result<()> {
    let (styles, stories) = match (input, synthetic) {
        (Some(path), _) => read_corpus(&path)?,
        (None, Some(per_style)) => restyle::synthetic::generate(&restyle::synthetic::SyntheticConfig {
            per_style,
            seed: cfg.seed,
            ..Default::default()
        })?,
        (None, None) => bail!("either --in or --synthetic is required"),
    };
    let kept = filter_dataset(&stories, max_tokens.unwrap_or(usize::MAX), min_sentences);
    ensure_parent(out)?;
    write_corpus(out, &kept, &styles, &SimpleTokenizer)?;
    let stats = dataset_stats(&kept);
    println!(
        "{}",
        json!({"input": stories.len(), "kept": kept.len(), "styles": styles.names(), "stats": stats})
    );
    Ok(())
}

fn extract_keywords(corpus: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let (styles, stories) = read_corpus(corpus)?;
    let groups = restyle::corpus::group_by_style(&stories, &styles);
    let dicts = build_dictionary(&groups, &cfg.keyword_config(), default_tagger())?;
    ensure_parent(out)?;
    save_dictionaries(out, &dicts, &styles)?;
    for (id, d) in &dicts {
        println!("{}: {}", styles.name(*id)?, d.words.iter().cloned().collect::<Vec<_>>().join(" "));
    }
    Ok(())
}

fn train_classifier_cmd(corpus: &Path, dicts: Option<&Path>, out: &Path, cfg: &RunConfig) -> Result<()> {
    let (styles, all, stories) = read_trainable(corpus, cfg)?;
    let dicts = dicts.map(|p| read_dicts(p, &styles)).transpose()?;
    let vocab = build_vocab(&all);
    let mut clf = StyleClassifier::new(cfg.model_config(vocab.len(), styles.len()), vocab, styles, cfg.seed)?;
    let (train, held) = holdout_split(&stories, cfg.clf_holdout);
    ensure_parent(out)?;
    let config_path = echo_config(cfg, out)?;
    let metrics = sibling(out, ".metrics.jsonl");
    let opts = TrainOptions {
        log_path: Some(metrics.clone()),
        checkpoint_path: Some(out.to_path_buf()),
        ..TrainOptions::classifier(cfg)
    };
    let acc = train_classifier(
        &mut clf,
        &classifier_examples(&train, dicts.as_ref()),
        &classifier_examples(&held, dicts.as_ref()),
        &opts,
    )?;
    println!("{}", json!({"held_out_accuracy": acc}));
    write_manifest("train-classifier", cfg, out, config_path, Some(metrics), json!({"held_out_accuracy": acc}))
}

fn train_stage1_cmd(
    corpus: &Path,
    dicts: Option<&Path>,
    classifier: &Path,
    out: &Path,
    resume: bool,
    cfg: &RunConfig,
) -> Result<()> {
    let (styles, all, stories) = read_trainable(corpus, cfg)?;
    let dicts = match (dicts, cfg.skip_stage2) {
        (_, true) => None,
        (Some(p), false) => Some(read_dicts(p, &styles)?),
        (None, false) => bail!("--dicts is required unless --skip-stage2 is set"),
    };
    let clf = StyleClassifier::from_checkpoint(&Checkpoint::load(classifier)?)
        .with_context(|| format!("loading classifier {}", classifier.display()))?;
    if !clf.is_frozen() {
        bail!("classifier checkpoint {} is not frozen", classifier.display());
    }
    let vocab = build_vocab(&all);
    if clf.vocab() != &vocab || clf.styles() != &styles {
        bail!("classifier was trained on a different corpus vocabulary");
    }
    let mut model = TransferModel::new(cfg.model_config(vocab.len(), styles.len()), vocab.clone(), styles, cfg.seed)?;
    let data = prepare_stage1(&stories, dicts.as_ref(), &vocab);
    ensure_parent(out)?;
    let config_path = echo_config(cfg, out)?;
    let metrics = sibling(out, ".metrics.jsonl");
    let mut opts = Stage1Options::from_config(cfg);
    opts.train.log_path = Some(metrics.clone());
    opts.train.checkpoint_path = Some(out.to_path_buf());
    opts.train.resume = resume;
    let summary = train_stage1(&mut model, &clf, &data, &[], &opts)?;
    let last = summary.parts.last().copied();
    let results = json!({
        "start_step": summary.start_step,
        "final_loss": summary.losses.last(),
        "final_parts": last.map(|p| json!({"l_self": p.self_rec, "l_dis": p.dis, "l_sop": p.sop, "l_style": p.style})),
    });
    println!("{results}");
    write_manifest("train-stage1", cfg, out, config_path, Some(metrics), results)
}

fn train_stage2_cmd(corpus: &Path, dicts: &Path, out: &Path, resume: bool, cfg: &RunConfig) -> Result<()> {
    let (styles, all, stories) = read_trainable(corpus, cfg)?;
    let dicts = read_dicts(dicts, &styles)?;
    let vocab = build_vocab(&all);
    let mut model = FillModel::new(cfg.model_config(vocab.len(), styles.len()), vocab.clone(), cfg.seed)?;
    let mut texts: Vec<Vec<String>> = stories.iter().map(|s| s.tokens.clone()).collect();
    let keywords = all_keywords(&dicts);
    texts.extend(keyword_swaps(&texts, &keywords, cfg.stage2_keyword_swap, cfg.seed));
    let data = prepare_stage2(&texts, &keywords, &vocab);
    ensure_parent(out)?;
    let config_path = echo_config(cfg, out)?;
    let metrics = sibling(out, ".metrics.jsonl");
    let opts = TrainOptions {
        log_path: Some(metrics.clone()),
        checkpoint_path: Some(out.to_path_buf()),
        resume,
        ..TrainOptions::stage2(cfg)
    };
    let summary = train_stage2(&mut model, &data, &opts)?;
    let results = json!({"start_step": summary.start_step, "final_loss": summary.losses.last()});
    println!("{results}");
    write_manifest("train-stage2", cfg, out, config_path, Some(metrics), results)
}

fn transfer(
    stage1: &Path,
    stage2: Option<&Path>,
    dicts: Option<&Path>,
    target: Option<&str>,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let model = TransferModel::from_checkpoint(&Checkpoint::load(stage1)?)
        .with_context(|| format!("loading stage-one model {}", stage1.display()))?;
    let filler = stage2
        .map(|p| {
            FillModel::from_checkpoint(&Checkpoint::load(p)?)
                .with_context(|| format!("loading filler {}", p.display()))
        })
        .transpose()?;
    let styles = model.styles().clone();
    let dicts = match (dicts, &filler) {
        (Some(p), _) => read_dicts(p, &styles)?,
        (None, None) => BTreeMap::new(),
        (None, Some(_)) => bail!("--dicts is required with --stage2"),
    };
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let requests = parse_requests(&text).with_context(|| format!("parsing {}", input.display()))?;
    let rules = LanguageRules::default();
    let mut stories = Vec::with_capacity(requests.len());
    let mut targets = Vec::with_capacity(requests.len());
    for (i, r) in requests.iter().enumerate() {
        let style = styles.id(&r.style).with_context(|| format!("request {}", i + 1))?;
        let t = match (r.target_style.as_deref(), target) {
            (Some(t), _) | (None, Some(t)) => styles.id(t).with_context(|| format!("request {}", i + 1))?,
            (None, None) => bail!("request {} has no target style and --target is not set", i + 1),
        };
        stories.push(Story::from_text(&r.source, style, &SimpleTokenizer, &rules).with_context(|| format!("request {}", i + 1))?);
        targets.push(t);
    }
    let results = Pipeline::new(&model, filler.as_ref(), &dicts).transfer_batch(&stories, &targets)?;
    let records = requests
        .iter()
        .zip(&results)
        .map(|(req, res)| TransferRecord::new(&req.source, res, &styles))
        .collect::<restyle::Result<Vec<_>>>()?;
    ensure_parent(out)?;
    write_atomic(out, records_to_jsonl(&records)?.as_bytes())?;
    log::info!("wrote {} transfers to {}", records.len(), out.display());
    Ok(())
}

/// One text per non-empty line, from the first of `fields` present.
fn read_texts(path: &Path, fields: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let Some(s) = fields.iter().find_map(|f| v.get(*f).and_then(Value::as_str)) else {
            bail!("{}:{}: none of the fields {fields:?} present", path.display(), i + 1);
        };
        out.push(SimpleTokenizer.tokenize(s));
    }
    Ok(out)
}

fn evaluate_cmd(
    outputs: &Path,
    inputs: &Path,
    target: &str,
    classifier: &Path,
    embedder: &Path,
    sentence_bleu: bool,
    out: Option<&Path>,
) -> Result<()> {
    let outs = read_texts(outputs, &["output", "text"])?;
    let ins = read_texts(inputs, &["source", "text"])?;
    if outs.len() != ins.len() {
        bail!(
            "alignment error: {} has {} records but {} has {}",
            outputs.display(),
            outs.len(),
            inputs.display(),
            ins.len()
        );
    }
    let clf = StyleClassifier::from_checkpoint(&Checkpoint::load(classifier)?)
        .with_context(|| format!("loading classifier {}", classifier.display()))?;
    let emb = FillModel::from_checkpoint(&Checkpoint::load(embedder)?)
        .with_context(|| format!("loading embedder {}", embedder.display()))?;
    let target = clf.styles().id(target)?;
    let mode = if sentence_bleu {
        BleuMode::SentenceAveraged
    } else {
        BleuMode::Corpus
    };
    let report = evaluate(&outs, &ins, target, &clf, &emb, mode)?;
    let text = report.to_json()?;
    println!("{text}");
    if let Some(path) = out {
        ensure_parent(path)?;
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn project_styles(corpus: &Path, outputs: Option<&Path>, csv: &Path, png: Option<&Path>) -> Result<()> {
    let (styles, stories) = read_corpus(corpus)?;
    let mut vectors = Vec::new();
    let mut groups = Vec::new();
    for s in &stories {
        vectors.push(style_features(&SimpleTokenizer.detokenize(&s.tokens)));
        groups.push(styles.name(s.style)?.to_string());
    }
    if let Some(path) = outputs {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: TransferRecord =
                serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            vectors.push(style_features(&rec.output));
            groups.push(format!("{} (transferred)", rec.target_style));
        }
    }
    let points = project_2d(&vectors, &groups)?;
    ensure_parent(csv)?;
    write_atomic(csv, points_to_csv(&points).as_bytes())?;
    if let Some(png) = png {
        ensure_parent(png)?;
        crate::plot::scatter(&points, png)?;
    }
    Ok(())
}
