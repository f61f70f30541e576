//! Probe: the acceptance-criterion quantities for one seed.
use std::collections::BTreeSet;
use ttslab_core::config::desk_experiment;
use ttslab_core::evaluation::{evaluate, EvalSetup};
use ttslab_core::experiment::build_corpus;
use ttslab_core::inference::SpeakerSource;
use ttslab_core::model::{LossWeights, ModelDims};
use ttslab_core::training::{finetune, pretrain, FinetuneSetup, FreezePolicy, PretrainSetup, TrainConfig, InitPart};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let pre_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3200);
    let ft_steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2400);

    let dur_hi: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);
    let mut cfg = desk_experiment("/tmp/probe".into());
    cfg.seed = seed;
    cfg.corpus.family.duration_range = (4, dur_hi);
    let (_, art) = build_corpus(&cfg).unwrap();
    let dims = ModelDims::desk(art.vocab.len(), art.registry.len(), 8, 8);
    let weights = LossWeights::default();
    let t0 = std::time::Instant::now();

    let pre_cfg = TrainConfig {
        steps: pre_steps, batch_size: 12, warmup_steps: 300, lr_scale: 0.5, tau: 1.0,
        log_interval: 100000, init_parts: BTreeSet::new(),
    };
    let (pre_ckpt, _) = pretrain(&PretrainSetup {
        corpus: &art.text_train, registry: &art.registry, vocab: &art.vocab,
        policy: &cfg.masking, dims: &dims, config: &pre_cfg, seed, config_hash: "p".into(),
        resume: None, symbol_tables: None, ablation: None,
    }).unwrap();

    let ft_cfg = TrainConfig {
        steps: ft_steps, batch_size: 8, warmup_steps: 400, lr_scale: 1.0, tau: 1.0,
        log_interval: 100000,
        init_parts: BTreeSet::from([InitPart::EmbeddingLayer, InitPart::Encoder]),
    };
    let (ft_ckpt, _) = finetune(&FinetuneSetup {
        corpus: &art.paired, registry: &art.registry, vocab: &art.vocab, dims: &dims,
        config: &ft_cfg, freeze: FreezePolicy::FreezeLae, weights: &weights,
        speakers: &art.speakers, pretrained: Some(&pre_ckpt), seed, config_hash: "f".into(),
        symbol_tables: None, ablation: None,
    }).unwrap();

    let mut base_dims = dims;
    base_dims.use_language_id = false;
    let (base_ckpt, _) = finetune(&FinetuneSetup {
        corpus: &art.paired, registry: &art.registry, vocab: &art.vocab, dims: &base_dims,
        config: &TrainConfig { init_parts: BTreeSet::new(), ..ft_cfg.clone() },
        freeze: FreezePolicy::None, weights: &weights,
        speakers: &art.speakers, pretrained: None, seed, config_hash: "b".into(),
        symbol_tables: None, ablation: None,
    }).unwrap();

    let sources = [SpeakerSource::TargetLanguageMean];
    let mut rows = Vec::new();
    for (name, ckpt) in [("pre", &ft_ckpt), ("base", &base_ckpt)] {
        let report = evaluate(&EvalSetup {
            params: &ckpt.params, provenance: &ckpt.meta.provenance, vocab: &art.vocab,
            registry: &art.registry, test_corpus: &art.eval, oracle: &art.oracle,
            speakers: &art.speakers, speaker_sources: &sources, tables: None,
            max_frames: 120, stop_threshold: 0.5, config_hash: "e".into(), seed,
        }).unwrap();
        for agg in &report.aggregates {
            rows.push(format!(
                "{name:5} {}: cer {:.3} dist {:.3} diag {:.4} stop {:.2}",
                agg.code, agg.mean_cer, agg.mean_distortion, agg.mean_diagonality,
                agg.stopped_fraction
            ));
        }
        let seen_mean = report.mean_cer_where(|r| r.language_id < 4).unwrap();
        rows.push(format!("{name:5} SEEN-MEAN cer {seen_mean:.3}"));
    }
    println!("seed {seed} [total {:.0}s]", t0.elapsed().as_secs_f64());
    for r in rows { println!("  {r}"); }
}
