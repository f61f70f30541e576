//! End-to-end experiment orchestration: the library behind the CLI verbs.
//!
//! Every run writes into a fixed layout under the configured output
//! directory; ablation variants share the base corpus and write their models
//! and reports under `ablations/<name>/`.
//!
//! ```text
//! out/
//!   config.toml            resolved configuration (hash embedded everywhere)
//!   corpus/                registry, text splits, paired + eval data,
//!                          oracle, speakers, orthographies, vocabulary
//!   pretrain/model.ckpt    + trace.jsonl
//!   finetune/model.ckpt    + trace.jsonl
//!   results/report.jsonl   + aggregate.tsv
//!   synth/                 feature containers + diagnostics sidecars
//! ```

use crate::config::{run_ablation, ExperimentConfig};
use crate::corpus::{
    generate_synthetic_corpus, load_oracle, load_orthographies, load_paired_corpus, load_registry,
    load_speakers, load_text_corpus, realize_language_family, save_oracle, save_orthographies,
    save_paired_corpus, save_registry, save_speakers, save_text_corpus, split_corpus,
    write_feature_matrix, AcousticOracle, LanguageRegistry, PairedUtterance, SpeakerTable,
    SyntheticLanguageSpec, Utterance,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, EvalSetup};
use crate::inference::{synthesize, resolve_speaker, SpeakerSource, SynthesisRequest};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::tokenizer::{SymbolTable, TokenType, Vocabulary};
use crate::training::{
    finetune, pretrain, write_trace, FinetuneSetup, PretrainSetup,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Paths of one experiment's artifacts.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
    pub corpus: PathBuf,
}

impl OutputLayout {
    /// Layout rooted at the config's output directory.
    pub fn new(config: &ExperimentConfig) -> Self {
        OutputLayout {
            root: config.out_dir.clone(),
            corpus: config.out_dir.join("corpus"),
        }
    }

    /// Layout whose corpus lives elsewhere (ablation variants share the base
    /// corpus).
    pub fn with_corpus(config: &ExperimentConfig, corpus: PathBuf) -> Self {
        OutputLayout {
            root: config.out_dir.clone(),
            corpus,
        }
    }

    pub fn registry(&self) -> PathBuf {
        self.corpus.join("registry.tsv")
    }
    pub fn text_train(&self) -> PathBuf {
        self.corpus.join("text_train.tsv")
    }
    pub fn text_dev(&self) -> PathBuf {
        self.corpus.join("text_dev.tsv")
    }
    pub fn text_test(&self) -> PathBuf {
        self.corpus.join("text_test.tsv")
    }
    pub fn paired_dir(&self) -> PathBuf {
        self.corpus.join("paired")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.corpus.join("eval")
    }
    pub fn oracle(&self) -> PathBuf {
        self.corpus.join("oracle.bin")
    }
    pub fn speakers(&self) -> PathBuf {
        self.corpus.join("speakers.tsv")
    }
    pub fn orthographies(&self) -> PathBuf {
        self.corpus.join("orthographies.tsv")
    }
    pub fn vocab(&self) -> PathBuf {
        self.corpus.join("vocab.tsv")
    }
    pub fn pretrain_ckpt(&self) -> PathBuf {
        self.root.join("pretrain").join("model.ckpt")
    }
    pub fn pretrain_trace(&self) -> PathBuf {
        self.root.join("pretrain").join("trace.jsonl")
    }
    pub fn finetune_ckpt(&self) -> PathBuf {
        self.root.join("finetune").join("model.ckpt")
    }
    pub fn finetune_trace(&self) -> PathBuf {
        self.root.join("finetune").join("trace.jsonl")
    }
    pub fn report_jsonl(&self) -> PathBuf {
        self.root.join("results").join("report.jsonl")
    }
    pub fn report_tsv(&self) -> PathBuf {
        self.root.join("results").join("aggregate.tsv")
    }
    pub fn embeddings_tsv(&self) -> PathBuf {
        self.root.join("results").join("embeddings.tsv")
    }
    pub fn synth_dir(&self) -> PathBuf {
        self.root.join("synth")
    }
    pub fn ablation_table(&self) -> PathBuf {
        self.root.join("results").join("ablation_table.tsv")
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// All corpus artifacts a run needs, loaded into memory.
pub struct CorpusArtifacts {
    pub registry: LanguageRegistry,
    pub text_train: Vec<Utterance>,
    pub text_dev: Vec<Utterance>,
    pub paired: Vec<PairedUtterance>,
    pub eval: Vec<PairedUtterance>,
    pub oracle: AcousticOracle<crate::Real>,
    pub speakers: SpeakerTable,
    pub vocab: Vocabulary,
    pub tables: BTreeMap<usize, SymbolTable>,
}

impl CorpusArtifacts {
    pub fn symbol_tables(&self) -> Option<&BTreeMap<usize, SymbolTable>> {
        Some(&self.tables)
    }
}

/// Generate the corpus bundle in memory (no files written).
pub fn build_corpus(config: &ExperimentConfig) -> Result<(SyntheticLanguageSpec, CorpusArtifacts)> {
    let spec = realize_language_family(&config.corpus.family, config.seed)?;
    let corpus = generate_synthetic_corpus(&spec, &config.corpus.sizes, config.seed)?;
    let (text_train, text_dev, _text_test) = split_corpus(
        &corpus.text,
        |u: &Utterance| u.language_id,
        config.corpus.n_dev,
        config.corpus.n_test,
        config.seed,
    )?;
    let vocab = match config.token_type {
        TokenType::Bytes => Vocabulary::build_bytes(&text_train)?,
        TokenType::Symbols => {
            let tables: BTreeMap<usize, SymbolTable> = (0..spec.n_languages())
                .map(|lang| (lang, spec.grapheme_table(lang)))
                .collect();
            Vocabulary::build_symbols(&text_train, &tables)?
        }
    };
    let tables: BTreeMap<usize, SymbolTable> = (0..spec.n_languages())
        .map(|lang| (lang, spec.grapheme_table(lang)))
        .collect();
    let artifacts = CorpusArtifacts {
        registry: corpus.registry,
        text_train,
        text_dev,
        paired: corpus.paired,
        eval: corpus.eval,
        oracle: corpus.oracle,
        speakers: corpus.speakers,
        vocab,
        tables,
    };
    Ok((spec, artifacts))
}

/// Generate and persist the corpus. Refuses to overwrite without `force`.
pub fn cmd_gen_corpus(config: &ExperimentConfig, force: bool) -> Result<OutputLayout> {
    config.validate()?;
    let layout = OutputLayout::new(config);
    if layout.registry().exists() && !force {
        return Err(Error::WouldOverwrite(layout.corpus.display().to_string()));
    }
    let (spec, artifacts) = build_corpus(config)?;
    ensure_dir(&layout.corpus)?;
    save_registry(&layout.registry(), &artifacts.registry)?;
    save_text_corpus(&layout.text_train(), &artifacts.text_train, &artifacts.registry)?;
    save_text_corpus(&layout.text_dev(), &artifacts.text_dev, &artifacts.registry)?;
    // The text test split exists for diffability even though no stage
    // consumes it today.
    let (_, _, text_test) = split_corpus(
        &{
            let corpus = generate_synthetic_corpus(&spec, &config.corpus.sizes, config.seed)?;
            corpus.text
        },
        |u: &Utterance| u.language_id,
        config.corpus.n_dev,
        config.corpus.n_test,
        config.seed,
    )?;
    save_text_corpus(&layout.text_test(), &text_test, &artifacts.registry)?;
    save_paired_corpus(&layout.paired_dir(), &artifacts.paired, &artifacts.registry)?;
    save_paired_corpus(&layout.eval_dir(), &artifacts.eval, &artifacts.registry)?;
    save_oracle(&layout.oracle(), &artifacts.oracle)?;
    save_speakers(&layout.speakers(), &artifacts.speakers, &artifacts.registry)?;
    save_orthographies(&layout.orthographies(), &spec.orthographies, &artifacts.registry)?;
    artifacts.vocab.save(&layout.vocab())?;
    config.save(&layout.root.join("config.toml"))?;
    Ok(layout)
}

/// Load persisted corpus artifacts.
pub fn load_corpus(layout: &OutputLayout) -> Result<CorpusArtifacts> {
    let registry = load_registry(&layout.registry())?;
    let text_train = load_text_corpus(&layout.text_train(), &registry)?;
    let text_dev = load_text_corpus(&layout.text_dev(), &registry)?;
    let paired = load_paired_corpus(&layout.paired_dir(), &registry)?;
    let eval = load_paired_corpus(&layout.eval_dir(), &registry)?;
    let oracle = load_oracle(&layout.oracle())?;
    let speakers = load_speakers(&layout.speakers(), &registry)?;
    let vocab = Vocabulary::load(&layout.vocab())?;
    let orthographies = load_orthographies(&layout.orthographies(), &registry)?;
    let tables = orthographies
        .iter()
        .enumerate()
        .map(|(lang, table)| {
            let rules: Vec<(String, usize)> =
                table.iter().map(|(&p, g)| (g.clone(), p)).collect();
            (lang, SymbolTable::new(rules))
        })
        .collect();
    Ok(CorpusArtifacts {
        registry,
        text_train,
        text_dev,
        paired,
        eval,
        oracle,
        speakers,
        vocab,
        tables,
    })
}

/// SHA-256 over the corpus files, recorded in ablation tables.
pub fn corpus_hash(layout: &OutputLayout) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for path in [
        layout.registry(),
        layout.text_train(),
        layout.text_dev(),
        layout.paired_dir().join("index.tsv"),
        layout.eval_dir().join("index.tsv"),
        layout.oracle(),
        layout.speakers(),
        layout.orthographies(),
        layout.vocab(),
    ] {
        let bytes =
            std::fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn model_dims(config: &ExperimentConfig, artifacts: &CorpusArtifacts) -> crate::model::ModelDims {
    config.model.to_dims(
        artifacts.vocab.len(),
        artifacts.registry.len(),
        config.corpus.family.feature_dim,
        config.corpus.family.speaker_dim,
    )
}

/// MLM pretraining; writes checkpoint and trace. With `resume` the previous
/// checkpoint continues its step counter.
pub fn cmd_pretrain(
    config: &ExperimentConfig,
    layout: &OutputLayout,
    resume: bool,
) -> Result<Checkpoint> {
    config.validate()?;
    let artifacts = load_corpus(layout)?;
    let dims = model_dims(config, &artifacts);
    let previous = if resume && layout.pretrain_ckpt().exists() {
        Some(load_checkpoint(&layout.pretrain_ckpt())?)
    } else {
        None
    };
    let setup = PretrainSetup {
        corpus: &artifacts.text_train,
        registry: &artifacts.registry,
        vocab: &artifacts.vocab,
        policy: &config.masking,
        dims: &dims,
        config: &config.pretrain,
        seed: config.seed,
        config_hash: config.hash(),
        resume: previous.as_ref(),
        symbol_tables: artifacts.symbol_tables(),
        ablation: config.ablation.clone(),
    };
    let (ckpt, trace) = pretrain(&setup)?;
    ensure_dir(layout.pretrain_ckpt().parent().unwrap())?;
    save_checkpoint(&layout.pretrain_ckpt(), &ckpt)?;
    write_trace(&layout.pretrain_trace(), &trace)?;
    Ok(ckpt)
}

/// Supervised fine-tuning; writes checkpoint and trace.
pub fn cmd_finetune(config: &ExperimentConfig, layout: &OutputLayout) -> Result<Checkpoint> {
    config.validate()?;
    let artifacts = load_corpus(layout)?;
    let dims = model_dims(config, &artifacts);
    let pretrained = if config.finetune.from_scratch {
        None
    } else {
        if !layout.pretrain_ckpt().exists() {
            return Err(Error::Checkpoint(format!(
                "{} does not exist; run pretraining first or set from_scratch",
                layout.pretrain_ckpt().display()
            )));
        }
        Some(load_checkpoint(&layout.pretrain_ckpt())?)
    };
    let setup = FinetuneSetup {
        corpus: &artifacts.paired,
        registry: &artifacts.registry,
        vocab: &artifacts.vocab,
        dims: &dims,
        config: &config.finetune.train,
        freeze: config.finetune.freeze,
        weights: &config.loss,
        speakers: &artifacts.speakers,
        pretrained: pretrained.as_ref(),
        seed: config.seed,
        config_hash: config.hash(),
        symbol_tables: artifacts.symbol_tables(),
        ablation: config.ablation.clone(),
    };
    let (ckpt, trace) = finetune(&setup)?;
    ensure_dir(layout.finetune_ckpt().parent().unwrap())?;
    save_checkpoint(&layout.finetune_ckpt(), &ckpt)?;
    write_trace(&layout.finetune_trace(), &trace)?;
    Ok(ckpt)
}

/// Parse `target_mean` / `cross:<code>` speaker-source labels.
pub fn parse_speaker_source(
    label: &str,
    registry: &LanguageRegistry,
) -> Result<SpeakerSource> {
    if label == "target_mean" {
        return Ok(SpeakerSource::TargetLanguageMean);
    }
    if let Some(code) = label.strip_prefix("cross:") {
        let lang = registry
            .id(code)
            .ok_or_else(|| Error::Config(format!("unknown language code `{code}`")))?;
        return Ok(SpeakerSource::CrossLingual(lang));
    }
    Err(Error::Config(format!(
        "speaker source `{label}` is neither `target_mean` nor `cross:<code>`"
    )))
}

/// Outcome of one CLI synthesis.
pub struct SynthOutcome {
    pub feature_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub mode: crate::corpus::SynthesisMode,
    pub frames: usize,
    pub stopped_naturally: bool,
}

/// Synthesize one utterance and write the feature container plus a JSON
/// diagnostics sidecar (request, mode, stop probabilities, attention tensor).
pub fn cmd_synth(
    config: &ExperimentConfig,
    layout: &OutputLayout,
    text: &str,
    language_code: &str,
    speaker_source: &str,
) -> Result<SynthOutcome> {
    let artifacts = load_corpus(layout)?;
    let language_id = artifacts.registry.id(language_code).ok_or_else(|| {
        Error::Registry(format!("unknown language code `{language_code}`"))
    })?;
    let ckpt_path = if layout.finetune_ckpt().exists() {
        layout.finetune_ckpt()
    } else {
        return Err(Error::Checkpoint(format!(
            "{} does not exist; fine-tune a model first",
            layout.finetune_ckpt().display()
        )));
    };
    let ckpt = load_checkpoint(&ckpt_path)?;
    let source = parse_speaker_source(speaker_source, &artifacts.registry)?;
    let speaker = resolve_speaker(&source, language_id, &artifacts.eval, &artifacts.speakers)?;
    let req = SynthesisRequest {
        text: text.to_string(),
        language_id,
        speaker: source.clone(),
        max_frames: config.eval.max_frames,
        stop_threshold: config.eval.stop_threshold,
    };
    let result = synthesize(
        &req,
        &ckpt.params,
        &artifacts.vocab,
        &artifacts.registry,
        &ckpt.meta.provenance,
        &speaker,
        artifacts.symbol_tables(),
    )?;

    ensure_dir(&layout.synth_dir())?;
    let stem = format!("{language_code}_{:08x}", {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(text.as_bytes());
        u32::from_le_bytes(digest[..4].try_into().unwrap())
    });
    let feature_path = layout.synth_dir().join(format!("{stem}.bin"));
    let sidecar_path = layout.synth_dir().join(format!("{stem}.json"));
    write_feature_matrix(&feature_path, &result.features)?;

    let attention: Vec<Vec<Vec<Vec<f64>>>> = result
        .attention
        .weights
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|head| head.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect()
        })
        .collect();
    let sidecar = serde_json::json!({
        "text": text,
        "language_code": language_code,
        "speaker_source": speaker_source,
        "mode": result.mode.to_string(),
        "stopped_naturally": result.stopped_naturally,
        "frames": result.features.nrows(),
        "stop_probs": result.stop_probs,
        "attention": attention,
        "config_hash": config.hash(),
        "seed": config.seed,
    });
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;

    Ok(SynthOutcome {
        feature_path,
        sidecar_path,
        mode: result.mode,
        frames: result.features.nrows(),
        stopped_naturally: result.stopped_naturally,
    })
}

/// Evaluate the fine-tuned model over the evaluation corpus; writes the
/// JSONL records and the aggregate TSV.
pub fn cmd_eval(config: &ExperimentConfig, layout: &OutputLayout) -> Result<EvalReport> {
    let artifacts = load_corpus(layout)?;
    if !layout.finetune_ckpt().exists() {
        return Err(Error::Checkpoint(format!(
            "{} does not exist; fine-tune a model first",
            layout.finetune_ckpt().display()
        )));
    }
    let ckpt = load_checkpoint(&layout.finetune_ckpt())?;
    let sources: Vec<SpeakerSource> = config
        .eval
        .speaker_sources
        .iter()
        .map(|label| parse_speaker_source(label, &artifacts.registry))
        .collect::<Result<_>>()?;
    let setup = EvalSetup {
        params: &ckpt.params,
        provenance: &ckpt.meta.provenance,
        vocab: &artifacts.vocab,
        registry: &artifacts.registry,
        test_corpus: &artifacts.eval,
        oracle: &artifacts.oracle,
        speakers: &artifacts.speakers,
        speaker_sources: &sources,
        tables: artifacts.symbol_tables(),
        max_frames: config.eval.max_frames,
        stop_threshold: config.eval.stop_threshold,
        config_hash: config.hash(),
        seed: config.seed,
    };
    let report = evaluate(&setup)?;
    ensure_dir(layout.report_jsonl().parent().unwrap())?;
    std::fs::write(layout.report_jsonl(), report.to_jsonl())
        .map_err(|e| Error::io(layout.report_jsonl().display().to_string(), e))?;
    std::fs::write(layout.report_tsv(), report.aggregate_tsv())
        .map_err(|e| Error::io(layout.report_tsv().display().to_string(), e))?;
    Ok(report)
}

/// Export per-utterance embedding means over the evaluation texts.
pub fn cmd_export_embeddings(_config: &ExperimentConfig, layout: &OutputLayout) -> Result<PathBuf> {
    let artifacts = load_corpus(layout)?;
    let ckpt_path = if layout.finetune_ckpt().exists() {
        layout.finetune_ckpt()
    } else if layout.pretrain_ckpt().exists() {
        layout.pretrain_ckpt()
    } else {
        return Err(Error::Checkpoint("no checkpoint to export from".into()));
    };
    let ckpt = load_checkpoint(&ckpt_path)?;
    let sample: Vec<Utterance> = artifacts
        .eval
        .iter()
        .map(|u| Utterance {
            language_id: u.language_id,
            text: u.text.clone(),
        })
        .collect();
    let export = crate::evaluation::export_embeddings(
        &ckpt.params,
        &sample,
        &artifacts.vocab,
        artifacts.symbol_tables(),
    )?;
    ensure_dir(layout.embeddings_tsv().parent().unwrap())?;
    let mut content = export.header;
    content.push('\n');
    for row in export.rows {
        content.push_str(&row);
        content.push('\n');
    }
    std::fs::write(layout.embeddings_tsv(), content)
        .map_err(|e| Error::io(layout.embeddings_tsv().display().to_string(), e))?;
    Ok(layout.embeddings_tsv())
}

/// One row of the ablation comparison table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub corpus_hash: String,
    pub report: EvalReport,
}

/// Run base plus the named ablations end to end, sharing the base corpus and
/// seed; returns the rows and writes the comparison table.
pub fn cmd_ablate(
    config: &ExperimentConfig,
    layout: &OutputLayout,
    names: &[String],
) -> Result<Vec<AblationRow>> {
    if !layout.registry().exists() {
        cmd_gen_corpus(config, false)?;
    }
    let shared_hash = corpus_hash(layout)?;

    let mut rows = Vec::new();
    let mut variants = vec![("base".to_string(), config.clone())];
    for name in names {
        variants.push((name.clone(), run_ablation(name, config)?));
    }
    for (variant, var_config) in variants {
        let var_layout = OutputLayout::with_corpus(&var_config, layout.corpus.clone());
        cmd_pretrain(&var_config, &var_layout, false)?;
        cmd_finetune(&var_config, &var_layout)?;
        let report = cmd_eval(&var_config, &var_layout)?;
        rows.push(AblationRow {
            variant,
            corpus_hash: shared_hash.clone(),
            report,
        });
    }

    // Table 4-style layout: one row per variant, distortion and CER per
    // language plus the average.
    let artifacts = load_corpus(layout)?;
    let codes: Vec<String> = artifacts
        .registry
        .codes()
        .map(|(code, _)| code.to_string())
        .collect();
    let mut table = String::from("variant\tcorpus_hash");
    for code in &codes {
        table.push_str(&format!("\t{code}_distortion\t{code}_cer"));
    }
    table.push_str("\tavg_distortion\tavg_cer\n");
    for row in &rows {
        table.push_str(&row.variant);
        table.push('\t');
        table.push_str(&row.corpus_hash[..12]);
        let mut dist_sum = 0.0;
        let mut cer_sum = 0.0;
        let mut n = 0usize;
        for code in &codes {
            let agg = row
                .report
                .aggregates
                .iter()
                .find(|a| &a.code == code && a.speaker_source == "target_mean");
            match agg {
                Some(a) => {
                    table.push_str(&format!("\t{:.4}\t{:.4}", a.mean_distortion, a.mean_cer));
                    dist_sum += a.mean_distortion;
                    cer_sum += a.mean_cer;
                    n += 1;
                }
                None => table.push_str("\t-\t-"),
            }
        }
        let n = n.max(1) as f64;
        table.push_str(&format!("\t{:.4}\t{:.4}\n", dist_sum / n, cer_sum / n));
    }
    ensure_dir(layout.ablation_table().parent().unwrap())?;
    std::fs::write(layout.ablation_table(), table)
        .map_err(|e| Error::io(layout.ablation_table().display().to_string(), e))?;
    Ok(rows)
}
