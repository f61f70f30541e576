//! End-to-end CLI smoke tests on a micro configuration: every verb, the
//! overwrite guard, resume semantics, freeze hashes, and output metadata.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use tempfile::TempDir;
use ttslab_cli::{execute, exit_code, Cli, Command};
use ttslab_core::config::{desk_family, ExperimentConfig};
use ttslab_core::corpus::CorpusSizes;
use ttslab_core::model::{load_checkpoint, ParamGroup};
use ttslab_core::Error;

fn micro_config(out_dir: PathBuf) -> ExperimentConfig {
    let mut family = desk_family();
    for def in &mut family.languages {
        def.n_speakers = 1;
    }
    let sizes = CorpusSizes {
        text: vec![40, 40, 40, 40, 40, 0],
        paired: vec![12, 12, 12, 12, 0, 0],
        eval: vec![3, 3, 3, 3, 3, 3],
    };
    let mut config = ExperimentConfig::desk_defaults(family, sizes, out_dir);
    config.corpus.n_dev = 2;
    config.corpus.n_test = 2;
    config.pretrain.steps = 30;
    config.pretrain.batch_size = 4;
    config.pretrain.warmup_steps = 20;
    config.pretrain.log_interval = 10;
    config.finetune.train.steps = 30;
    config.finetune.train.batch_size = 4;
    config.finetune.train.warmup_steps = 20;
    config.finetune.train.log_interval = 10;
    config.eval.max_frames = 40;
    config.model.d = 16;
    config.model.heads = 2;
    config.model.encoder_blocks = 1;
    config.model.decoder_blocks = 1;
    config.model.bottleneck_hidden = 8;
    config.model.prediction_hidden = 16;
    config.model.postnet_layers = 1;
    config.model.postnet_kernel = 3;
    config.seed = 11;
    config
}

struct Workbench {
    _dir: TempDir,
    config_path: PathBuf,
    out_dir: PathBuf,
}

fn workbench() -> Workbench {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("run");
    let config = micro_config(out_dir.clone());
    let config_path = dir.path().join("exp.toml");
    config.save(&config_path).unwrap();
    Workbench {
        _dir: dir,
        config_path,
        out_dir,
    }
}

fn cli(bench: &Workbench, force: bool, command: Command) -> Cli {
    Cli {
        config: Some(bench.config_path.clone()),
        seed: None,
        out: None,
        force,
        command,
    }
}

#[test]
fn full_pipeline_through_all_verbs() {
    let bench = workbench();

    // gen-corpus
    let out = execute(&cli(&bench, false, Command::GenCorpus)).unwrap();
    assert!(out.contains("corpus written"));
    assert!(bench.out_dir.join("corpus/registry.tsv").exists());
    assert!(bench.out_dir.join("corpus/vocab.tsv").exists());

    // refuses to overwrite without --force, and the error maps to exit 2
    let err = execute(&cli(&bench, false, Command::GenCorpus)).unwrap_err();
    assert!(matches!(err, Error::WouldOverwrite(_)));
    assert_eq!(exit_code(&err), 2);
    execute(&cli(&bench, true, Command::GenCorpus)).unwrap();

    // pretrain
    let out = execute(&cli(&bench, false, Command::Pretrain { resume: false })).unwrap();
    assert!(out.contains("pretrained 30 steps"));
    let trace = std::fs::read_to_string(bench.out_dir.join("pretrain/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 3, "steps / log_interval trace lines");

    // resume continues the step counter
    let out = execute(&cli(&bench, false, Command::Pretrain { resume: true })).unwrap();
    assert!(out.contains("pretrained 60 steps"), "{out}");

    // finetune with freeze hashes checked against the pretrained checkpoint
    execute(&cli(&bench, false, Command::Finetune)).unwrap();
    let pre = load_checkpoint(&bench.out_dir.join("pretrain/model.ckpt")).unwrap();
    let fine = load_checkpoint(&bench.out_dir.join("finetune/model.ckpt")).unwrap();
    for group in [
        ParamGroup::TokenEmbedding,
        ParamGroup::LanguageEmbedding,
        ParamGroup::Bottleneck,
    ] {
        assert_eq!(
            pre.params.group_hash(group),
            fine.params.group_hash(group),
            "frozen {group:?} must be bitwise invariant"
        );
    }
    assert_ne!(
        pre.params.group_hash(ParamGroup::Encoder),
        fine.params.group_hash(ParamGroup::Encoder)
    );
    assert_eq!(fine.meta.provenance.freeze.as_deref(), Some("freeze_lae"));

    // synth prints the mode and writes feature container plus sidecar
    let out = execute(&cli(
        &bench,
        false,
        Command::Synth {
            text: "ka lu".into(),
            language: "ax".into(),
            speaker: "target_mean".into(),
        },
    ))
    .unwrap();
    assert!(out.contains("mode: text-seen zero-shot"), "{out}");
    let synth_dir = bench.out_dir.join("synth");
    let bins: Vec<_> = std::fs::read_dir(&synth_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
        .collect();
    assert_eq!(bins.len(), 1);

    // deterministic synthesis output
    let first = std::fs::read(bins[0].path()).unwrap();
    execute(&cli(
        &bench,
        false,
        Command::Synth {
            text: "ka lu".into(),
            language: "ax".into(),
            speaker: "target_mean".into(),
        },
    ))
    .unwrap();
    assert_eq!(std::fs::read(bins[0].path()).unwrap(), first);

    // unknown language code is a config-class failure (exit 2)
    let err = execute(&cli(
        &bench,
        false,
        Command::Synth {
            text: "ka".into(),
            language: "qq".into(),
            speaker: "target_mean".into(),
        },
    ))
    .unwrap_err();
    assert_eq!(exit_code(&err), 2);

    // eval writes records and aggregates; counts match the eval corpus
    let out = execute(&cli(&bench, false, Command::Eval)).unwrap();
    assert!(out.contains("evaluated 18 syntheses"), "{out}");
    let records = std::fs::read_to_string(bench.out_dir.join("results/report.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 18);
    let tsv = std::fs::read_to_string(bench.out_dir.join("results/aggregate.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 6, "header plus one row per language");

    // export-emb writes one row per evaluated utterance
    execute(&cli(&bench, false, Command::ExportEmb)).unwrap();
    let emb = std::fs::read_to_string(bench.out_dir.join("results/embeddings.tsv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 18);
}

#[test]
fn eval_report_is_reproducible_under_the_seed() {
    let bench = workbench();
    execute(&cli(&bench, false, Command::GenCorpus)).unwrap();
    execute(&cli(&bench, false, Command::Pretrain { resume: false })).unwrap();
    execute(&cli(&bench, false, Command::Finetune)).unwrap();
    execute(&cli(&bench, false, Command::Eval)).unwrap();
    let first = std::fs::read(bench.out_dir.join("results/report.jsonl")).unwrap();
    execute(&cli(&bench, false, Command::Eval)).unwrap();
    let second = std::fs::read(bench.out_dir.join("results/report.jsonl")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn baseline_mode_skips_checkpoint_loading() {
    let bench = workbench();
    execute(&cli(&bench, false, Command::GenCorpus)).unwrap();
    // No pretraining has run; from_scratch must still fine-tune.
    let mut config = ExperimentConfig::load(&bench.config_path).unwrap();
    config.finetune.from_scratch = true;
    config.save(&bench.config_path).unwrap();
    let out = execute(&cli(&bench, false, Command::Finetune)).unwrap();
    assert!(out.contains("fine-tuned 30 steps"));
    let fine = load_checkpoint(&bench.out_dir.join("finetune/model.ckpt")).unwrap();
    assert!(fine.meta.provenance.pretrained_on.is_empty());
}

#[test]
fn zero_step_pretrain_copies_initialization() {
    let bench = workbench();
    execute(&cli(&bench, false, Command::GenCorpus)).unwrap();
    let mut config = ExperimentConfig::load(&bench.config_path).unwrap();
    config.pretrain.steps = 0;
    config.save(&bench.config_path).unwrap();
    execute(&cli(&bench, false, Command::Pretrain { resume: false })).unwrap();
    let ckpt = load_checkpoint(&bench.out_dir.join("pretrain/model.ckpt")).unwrap();
    assert_eq!(ckpt.meta.step, 0);
    // Recompute the deterministic initialization and compare hashes.
    let artifacts = ttslab_core::experiment::load_corpus(
        &ttslab_core::experiment::OutputLayout::new(&config),
    )
    .unwrap();
    let dims = config.model.to_dims(
        artifacts.vocab.len(),
        artifacts.registry.len(),
        config.corpus.family.feature_dim,
        config.corpus.family.speaker_dim,
    );
    let init = ttslab_core::model::Params::<f64>::init(&dims, config.seed).unwrap();
    for group in ParamGroup::ALL {
        assert_eq!(init.group_hash(group), ckpt.params.group_hash(group));
    }
}

#[test]
fn ablation_table_has_five_rows_sharing_the_corpus_hash() {
    let bench = workbench();
    execute(&cli(&bench, false, Command::GenCorpus)).unwrap();
    let out = execute(&cli(&bench, false, Command::Ablate { names: vec![] })).unwrap();
    assert!(out.contains("5 variants evaluated"), "{out}");
    let table = std::fs::read_to_string(bench.out_dir.join("results/ablation_table.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 5, "header plus base plus four ablations");
    let hashes: BTreeSet<&str> = lines[1..]
        .iter()
        .map(|l| l.split('\t').nth(1).unwrap())
        .collect();
    assert_eq!(hashes.len(), 1, "all rows share the corpus hash");
    for name in ["base", "no_bottleneck", "no_language_id", "no_encoder_init", "update_lae"] {
        assert!(table.contains(name), "missing row {name}");
    }
    // Each ablation wrote its own metadata.
    let ckpt = load_checkpoint(
        &bench
            .out_dir
            .join("ablations/update_lae/finetune/model.ckpt"),
    )
    .unwrap();
    assert_eq!(ckpt.meta.provenance.ablation.as_deref(), Some("update_lae"));
    assert_eq!(ckpt.meta.provenance.freeze.as_deref(), Some("update_lae"));
}

#[test]
fn unknown_ablation_name_fails_with_config_exit_code() {
    let bench = workbench();
    execute(&cli(&bench, false, Command::GenCorpus)).unwrap();
    let err = execute(&cli(
        &bench,
        false,
        Command::Ablate {
            names: vec!["bogus".into()],
        },
    ))
    .unwrap_err();
    assert_eq!(exit_code(&err), 2);
    assert!(err.to_string().contains("no_bottleneck"));
}

#[test]
fn seed_and_out_overrides_change_the_run() {
    let bench = workbench();
    let alt_out = bench.out_dir.parent().unwrap().join("alt");
    let mut cli_cmd = cli(&bench, false, Command::GenCorpus);
    cli_cmd.seed = Some(99);
    cli_cmd.out = Some(alt_out.clone());
    execute(&cli_cmd).unwrap();
    assert!(alt_out.join("corpus/registry.tsv").exists());
    let saved = ExperimentConfig::load(&alt_out.join("config.toml")).unwrap();
    assert_eq!(saved.seed, 99);
    assert!(!bench.out_dir.join("corpus/registry.tsv").exists());

    let missing = Cli {
        config: None,
        seed: None,
        out: None,
        force: false,
        command: Command::Eval,
    };
    let err = execute(&missing).unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn config_hash_is_embedded_in_outputs() {
    let bench = workbench();
    execute(&cli(&bench, false, Command::GenCorpus)).unwrap();
    execute(&cli(&bench, false, Command::Pretrain { resume: false })).unwrap();
    let config = ExperimentConfig::load(&bench.config_path).unwrap();
    let ckpt = load_checkpoint(&bench.out_dir.join("pretrain/model.ckpt")).unwrap();
    assert_eq!(ckpt.meta.config_hash, config.hash());
    assert_eq!(ckpt.meta.seed, config.seed);
}

#[test]
fn eval_before_training_is_a_runtime_failure() {
    let bench = workbench();
    execute(&cli(&bench, false, Command::GenCorpus)).unwrap();
    let err = execute(&cli(&bench, false, Command::Eval)).unwrap_err();
    assert_eq!(exit_code(&err), 3);
    let _ = Path::new("");
}
