//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use clmrc_core::data::{
    dataset_stats, generate_synthetic_bilingual, load_bilingual_jsonl, load_predictions,
    load_squad_json, make_bilingual, round_trip_answer, save_bilingual_jsonl, save_predictions,
    save_squad_json, BilingualExample, MRCExample, TranslatorSpec,
};
use clmrc_core::gradcheck::suite;
use clmrc_core::metrics::evaluate_dataset;
use clmrc_core::simplematch::align_predictions;
use clmrc_core::span::{PackingKind, SingleModelParams};
use clmrc_core::text::Vocabulary;
use clmrc_core::training::{
    predict_dual_predictions, predict_single, train_dual, train_single, MetricRecord,
    SingleExample,
};

use crate::bundle::{self, LoadedModel, ModelSpec};
use crate::config::{ModelKind, RunConfig};
use crate::manifest::write_manifest;
use crate::pipeline::{run_backtranslation_pipeline, PipelineInputs};
use crate::{BacktranslateArgs, CommonArgs, GradcheckArgs};

/// Resolve the run configuration: file values first, flags on top.
fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    macro_rules! merge {
        ($($flag:ident => $field:ident),+ $(,)?) => {
            $(if let Some(v) = &args.$flag { config.$field = v.clone().into(); })+
        };
    }
    merge! {
        seed => seed,
        model => model,
        max_len => max_len,
        epochs => epochs,
        batch => batch_size,
        lr => learning_rate,
        noise_rate => noise_rate,
        dropout => dropout_rate,
        hidden => hidden_size,
        layers => num_layers,
    }
    // Path flags.
    if let Some(v) = &args.train_file {
        config.train_file = Some(v.clone());
    }
    if let Some(v) = &args.dev_file {
        config.dev_file = Some(v.clone());
    }
    if let Some(v) = &args.dict {
        config.dict = Some(v.clone());
    }
    if let Some(v) = &args.params {
        config.params = Some(v.clone());
    }
    if let Some(v) = &args.predictions {
        config.predictions = Some(v.clone());
    }
    if let Some(v) = &args.out {
        config.out = Some(v.clone());
    }
    if let Some(v) = args.delta {
        config.delta = v as usize;
    }
    if let Some(v) = args.seed {
        config.synthetic.seed = v;
    }
    if let Some(v) = args.num {
        config.synthetic.num_examples = v;
    }
    if let Some(v) = args.ambiguity {
        config.synthetic.ambiguity_rate = v;
    }
    for path in [&config.train_file, &config.dev_file, &config.dict, &config.params]
        .into_iter()
        .flatten()
    {
        if !path.exists() {
            bail!("referenced path does not exist: {}", path.display());
        }
    }
    Ok(config)
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let out = config
        .out
        .as_ref()
        .context("--out directory is required")?
        .clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn input_list(config: &RunConfig) -> Vec<&PathBuf> {
    [
        &config.train_file,
        &config.dev_file,
        &config.dict,
        &config.predictions,
    ]
    .into_iter()
    .flatten()
    .collect()
}

fn load_examples(path: &Path) -> Result<Vec<MRCExample>> {
    let load = load_squad_json(path)?;
    if !load.repaired_ids.is_empty() {
        log::warn!(
            "{}: repaired {} answer offsets",
            path.display(),
            load.repaired_ids.len()
        );
    }
    Ok(load.examples)
}

/// Bilingual data: either a `.jsonl` of paired records or a SQuAD file
/// plus a dictionary to translate with.
fn load_bilingual(path: &Path, config: &RunConfig) -> Result<Vec<BilingualExample>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(load_bilingual_jsonl(path)?);
    }
    let dict = config
        .dict
        .as_ref()
        .context("a SQuAD train file for the dual model needs --dict to build source pairs")?;
    let forward = TranslatorSpec::from_tsv(dict, config.source_tokenizer)?
        .inverted()?
        .with_token_mode(config.target_tokenizer)
        .with_noise(config.noise_rate)?;
    let examples = load_examples(path)?;
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(make_bilingual(
                e,
                &forward,
                config.seed.wrapping_add(i as u64),
                config.delta,
            )?)
        })
        .collect()
}

fn corpus_of(examples: &[MRCExample]) -> Vec<String> {
    examples
        .iter()
        .flat_map(|e| [e.passage.clone(), e.question.clone()])
        .collect()
}

/// Reader inputs are plain; aligner/verifier inputs carry a translated
/// answer, synthesized by a noisy round trip through the dictionary.
fn to_single_examples(
    examples: Vec<MRCExample>,
    kind: PackingKind,
    config: &RunConfig,
) -> Result<Vec<SingleExample>> {
    if kind == PackingKind::Reader {
        return Ok(examples.into_iter().map(SingleExample::reader).collect());
    }
    let dict = config
        .dict
        .as_ref()
        .context("aligner/verifier packing needs --dict to synthesize translated answers")?;
    let backward = TranslatorSpec::from_tsv(dict, config.source_tokenizer)?
        .with_noise(config.noise_rate)?;
    let forward = backward
        .inverted()?
        .with_token_mode(config.target_tokenizer)
        .with_noise(config.noise_rate)?;
    examples
        .into_iter()
        .enumerate()
        .map(|(i, example)| {
            let answer = example
                .primary_answer()
                .with_context(|| format!("example {} has no answer", example.id))?;
            let translated = round_trip_answer(
                &answer.text,
                &forward,
                &backward,
                config.seed.wrapping_add(i as u64),
            )?;
            Ok(SingleExample {
                example,
                translated_answer: Some(translated),
            })
        })
        .collect()
}

fn packing_kind(model: ModelKind) -> PackingKind {
    match model {
        ModelKind::Reader => PackingKind::Reader,
        ModelKind::Aligner => PackingKind::Aligner,
        ModelKind::Verifier => PackingKind::Verifier,
        ModelKind::Dual => unreachable!("dual model has no single packing"),
    }
}

fn write_metrics(log: &[MetricRecord], out: &Path) -> Result<()> {
    let mut body = String::new();
    for record in log {
        body.push_str(&serde_json::to_string(record)?);
        body.push('\n');
    }
    std::fs::write(out.join("metrics.jsonl"), body)?;
    Ok(())
}

fn model_spec(config: &RunConfig) -> ModelSpec {
    ModelSpec {
        kind: config.model,
        encoder: config.encoder_config(),
        target_tokenizer: config.target_tokenizer,
        source_tokenizer: config.source_tokenizer,
        max_answer_len: config.max_answer_len,
        use_saa: config.use_saa,
        saa_heads: config.saa_heads,
        fixed_lambda: config.fixed_lambda,
        whole_sequence_softmax: config.whole_sequence_softmax,
    }
}

pub fn train(args: &CommonArgs) -> Result<()> {
    let config = resolve(args)?;
    let out = out_dir(&config)?;
    let train_path = config
        .train_file
        .as_ref()
        .context("--train-file is required")?
        .clone();
    write_manifest("train", &config, &input_list(&config), &out)?;

    match config.model {
        ModelKind::Dual => {
            let train_set = load_bilingual(&train_path, &config)?;
            let dev_set = match &config.dev_file {
                Some(path) => Some(load_bilingual(path, &config)?),
                None => None,
            };
            // One joint vocabulary over both languages so translation
            // pairs get distinct ids in the shared embedding table,
            // mirroring the single multilingual wordpiece inventory.
            // (Requires both languages to share a tokenize mode; real
            // char-mode targets pair with char-mode joint vocabularies.)
            let mut corpus = corpus_of(
                &train_set.iter().map(|b| b.target.clone()).collect::<Vec<_>>(),
            );
            corpus.extend(corpus_of(
                &train_set.iter().map(|b| b.source.clone()).collect::<Vec<_>>(),
            ));
            if let Some(dev) = &dev_set {
                corpus.extend(corpus_of(
                    &dev.iter().map(|b| b.target.clone()).collect::<Vec<_>>(),
                ));
                corpus.extend(corpus_of(
                    &dev.iter().map(|b| b.source.clone()).collect::<Vec<_>>(),
                ));
            }
            let vocab_t =
                Vocabulary::build(&corpus, config.target_tokenizer, config.vocab_size)?;
            let vocab_s = vocab_t.clone();
            let dual_config = config.dual_config();
            let mut params = clmrc_core::dual::DualParams::init(&dual_config)?;
            let log = train_dual(
                &mut params,
                &dual_config,
                &train_set,
                dev_set.as_deref(),
                &vocab_t,
                &vocab_s,
                &config.train_config(),
            )?;
            write_metrics(&log, &out)?;
            bundle::save_model(&out, &model_spec(&config), &params, &vocab_t, Some(&vocab_s))?;
            if let Some(record) = log.iter().rev().find(|r| r.dev_em.is_some()) {
                println!(
                    "dev EM {:.2} F1 {:.2}",
                    record.dev_em.unwrap(),
                    record.dev_f1.unwrap()
                );
            }
        }
        kind => {
            let kind = packing_kind(kind);
            let train_set = to_single_examples(load_examples(&train_path)?, kind, &config)?;
            let dev_set = match &config.dev_file {
                Some(path) => Some(to_single_examples(load_examples(path)?, kind, &config)?),
                None => None,
            };
            let mut corpus = corpus_of(
                &train_set.iter().map(|e| e.example.clone()).collect::<Vec<_>>(),
            );
            if let Some(dev) = &dev_set {
                corpus.extend(corpus_of(
                    &dev.iter().map(|e| e.example.clone()).collect::<Vec<_>>(),
                ));
            }
            // Translated answers must tokenize into the vocabulary too.
            corpus.extend(
                train_set
                    .iter()
                    .chain(dev_set.iter().flatten())
                    .filter_map(|e| e.translated_answer.clone()),
            );
            let vocab = Vocabulary::build(&corpus, config.target_tokenizer, config.vocab_size)?;
            let encoder_config = config.encoder_config();
            let mut params = SingleModelParams::init(&encoder_config)?;
            let log = train_single(
                &mut params,
                &encoder_config,
                kind,
                &train_set,
                dev_set.as_deref(),
                &vocab,
                &config.train_config(),
            )?;
            write_metrics(&log, &out)?;
            bundle::save_model(&out, &model_spec(&config), &params, &vocab, None)?;
            if let Some(record) = log.iter().rev().find(|r| r.dev_em.is_some()) {
                println!(
                    "dev EM {:.2} F1 {:.2}",
                    record.dev_em.unwrap(),
                    record.dev_f1.unwrap()
                );
            }
        }
    }
    Ok(())
}

pub fn predict(args: &CommonArgs) -> Result<()> {
    let config = resolve(args)?;
    let out = out_dir(&config)?;
    let dev_path = config
        .dev_file
        .as_ref()
        .context("--dev-file is required")?
        .clone();
    let params_dir = config
        .params
        .as_ref()
        .context("--params is required")?
        .clone();
    write_manifest("predict", &config, &input_list(&config), &out)?;

    let predictions = match bundle::load_model(&params_dir)? {
        LoadedModel::Dual {
            spec,
            params,
            vocab_target,
            vocab_source,
        } => {
            let examples = load_bilingual(&dev_path, &config)?;
            predict_dual_predictions(
                &params,
                &spec.dual_config(),
                &examples,
                &vocab_target,
                &vocab_source,
            )?
        }
        LoadedModel::Single {
            spec,
            params,
            vocab,
        } => {
            let kind = packing_kind(spec.kind);
            let examples = to_single_examples(load_examples(&dev_path)?, kind, &config)?;
            predict_single(
                &params,
                &spec.encoder,
                kind,
                &examples,
                &vocab,
                spec.max_answer_len,
                &format!("{:?}", spec.kind).to_lowercase(),
            )?
        }
    };
    save_predictions(&predictions, &out.join("predictions.json"))?;
    println!("wrote {} predictions", predictions.len());
    Ok(())
}

pub fn evaluate(args: &CommonArgs) -> Result<()> {
    let config = resolve(args)?;
    let dev_path = config
        .dev_file
        .as_ref()
        .context("--dev-file is required")?
        .clone();
    let predictions_path = config
        .predictions
        .as_ref()
        .context("--predictions is required")?
        .clone();
    let examples = load_examples(&dev_path)?;
    let predictions = load_predictions(&predictions_path)?;
    let result = evaluate_dataset(&predictions, &examples)?;
    println!("EM {:.4} F1 {:.4}", result.em, result.f1);
    if config.out.is_some() {
        let out = out_dir(&config)?;
        write_manifest("evaluate", &config, &input_list(&config), &out)?;
        std::fs::write(
            out.join("eval.json"),
            serde_json::to_string_pretty(&result)?,
        )?;
    }
    Ok(())
}

pub fn align(args: &CommonArgs) -> Result<()> {
    let config = resolve(args)?;
    let out = out_dir(&config)?;
    let dev_path = config
        .dev_file
        .as_ref()
        .context("--dev-file is required")?
        .clone();
    let predictions_path = config
        .predictions
        .as_ref()
        .context("--predictions is required")?
        .clone();
    write_manifest("align", &config, &input_list(&config), &out)?;

    let examples = load_examples(&dev_path)?;
    let predictions = load_predictions(&predictions_path)?;
    let (aligned, confidences) = align_predictions(&predictions, &examples, config.delta)?;
    save_predictions(&aligned, &out.join("aligned_predictions.json"))?;
    std::fs::write(
        out.join("confidences.json"),
        serde_json::to_string_pretty(&confidences)?,
    )?;
    let low = confidences.values().filter(|&&f1| f1 < 0.3).count();
    println!(
        "aligned {} predictions ({} low-confidence)",
        aligned.len(),
        low
    );
    Ok(())
}

pub fn backtranslate(args: &BacktranslateArgs) -> Result<()> {
    let config = resolve(&args.common)?;
    let out = out_dir(&config)?;
    let dev_path = config
        .dev_file
        .as_ref()
        .context("--dev-file is required")?
        .clone();
    let dict_path = config.dict.as_ref().context("--dict is required")?.clone();
    let params_dir = config
        .params
        .as_ref()
        .context("--params (a source-language reader) is required")?
        .clone();
    write_manifest("backtranslate", &config, &input_list(&config), &out)?;

    let (spec, reader, source_vocab) = bundle::expect_single(bundle::load_model(&params_dir)?)?;
    let examples = load_examples(&dev_path)?;
    let backward = TranslatorSpec::from_tsv(&dict_path, config.source_tokenizer)?
        .with_noise(config.noise_rate)?;
    let forward = backward
        .inverted()?
        .with_token_mode(config.target_tokenizer)
        .with_noise(config.noise_rate)?;

    let (predictions, report) = run_backtranslation_pipeline(&PipelineInputs {
        examples: &examples,
        reader: &reader,
        encoder: &spec.encoder,
        source_vocab: &source_vocab,
        forward: &forward,
        backward: &backward,
        use_simplematch: args.use_simplematch,
        delta: config.delta,
        max_answer_len: spec.max_answer_len,
        seed: config.seed,
    })?;
    save_predictions(&predictions, &out.join("predictions.json"))?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if let Some(eval) = &report.eval {
        println!("EM {:.4} F1 {:.4}", eval.em, eval.f1);
    } else {
        println!("wrote {} predictions", predictions.len());
    }
    Ok(())
}

pub fn gen_synthetic(args: &CommonArgs) -> Result<()> {
    let config = resolve(args)?;
    let out = out_dir(&config)?;
    write_manifest("gen-synthetic", &config, &[], &out)?;

    let data = generate_synthetic_bilingual(&config.synthetic)?;
    save_squad_json(&data.target_examples(), &out.join("target.json"))?;
    save_squad_json(&data.source_examples(), &out.join("source.json"))?;
    save_bilingual_jsonl(&data.examples, &out.join("bilingual.jsonl"))?;
    let mut dict = String::new();
    for (source, target) in &data.dictionary {
        dict.push_str(&format!("{source}\t{target}\n"));
    }
    std::fs::write(out.join("dict.tsv"), dict)?;
    println!(
        "generated {} bilingual examples into {}",
        data.examples.len(),
        out.display()
    );
    Ok(())
}

pub fn stats(args: &CommonArgs) -> Result<()> {
    let config = resolve(args)?;
    let path = config
        .train_file
        .as_ref()
        .or(config.dev_file.as_ref())
        .context("--train-file (or --dev-file) is required")?
        .clone();
    let examples = load_examples(&path)?;
    let stats = dataset_stats(&examples)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    if config.out.is_some() {
        let out = out_dir(&config)?;
        write_manifest("stats", &config, &input_list(&config), &out)?;
        std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut entries = Vec::new();
    if args.model == "primitives" || args.model == "all" {
        entries.extend(suite::primitives(args.seeds)?);
    }
    if args.model == "encoder" || args.model == "all" {
        entries.extend(suite::encoder_one_layer(args.h, args.seeds)?);
    }
    if args.model == "dual" || args.model == "all" {
        entries.extend(suite::dual_model(args.h, args.seeds)?);
    }
    if entries.is_empty() {
        bail!(
            "unknown gradcheck target {:?}; use primitives, encoder, dual, or all",
            args.model
        );
    }
    let mut failed = 0;
    for entry in &entries {
        let status = if entry.report.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {} max_rel_err={:.3e}",
            entry.name, entry.report.max_relative_error
        );
        if !entry.report.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
