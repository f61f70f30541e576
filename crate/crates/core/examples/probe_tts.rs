//! Probe: end-to-end TTS quality, pretrained vs from-scratch baseline.
use std::collections::BTreeSet;
use ttslab_core::config::desk_experiment;
use ttslab_core::evaluation::{evaluate, EvalSetup};
use ttslab_core::experiment::build_corpus;
use ttslab_core::inference::SpeakerSource;
use ttslab_core::model::{LossWeights, ModelDims};
use ttslab_core::training::{finetune, pretrain, FinetuneSetup, FreezePolicy, PretrainSetup, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ft_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1200);
    let ft_batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(7);

    let mut cfg = desk_experiment("/tmp/probe".into());
    cfg.seed = seed;
    let (_, art) = build_corpus(&cfg).unwrap();
    let dims = ModelDims::desk(art.vocab.len(), art.registry.len(), 8, 8);
    let policy = cfg.masking;
    let weights = LossWeights::default();
    let t0 = std::time::Instant::now();

    // Pretrain.
    let pre_cfg = TrainConfig {
        steps: 2200, batch_size: 12, warmup_steps: 300, lr_scale: 0.5, tau: 1.0,
        log_interval: 100000, init_parts: BTreeSet::new(),
    };
    let (pre_ckpt, _) = pretrain(&PretrainSetup {
        corpus: &art.text_train, registry: &art.registry, vocab: &art.vocab,
        policy: &policy, dims: &dims, config: &pre_cfg, seed, config_hash: "p".into(),
        resume: None, symbol_tables: None, ablation: None,
    }).unwrap();
    eprintln!("pretrain done [{:.0}s]", t0.elapsed().as_secs_f64());

    // Fine-tune (pretrained, freeze LAE).
    let ft_cfg = TrainConfig {
        steps: ft_steps, batch_size: ft_batch, warmup_steps: 400, lr_scale: 1.0, tau: 1.0,
        log_interval: ft_steps / 4,
        init_parts: BTreeSet::from([ttslab_core::training::InitPart::EmbeddingLayer, ttslab_core::training::InitPart::Encoder]),
    };
    let (ft_ckpt, trace) = finetune(&FinetuneSetup {
        corpus: &art.paired, registry: &art.registry, vocab: &art.vocab, dims: &dims,
        config: &ft_cfg, freeze: FreezePolicy::FreezeLae, weights: &weights,
        speakers: &art.speakers, pretrained: Some(&pre_ckpt), seed, config_hash: "f".into(),
        symbol_tables: None, ablation: None,
    }).unwrap();
    for r in &trace {
        let c = r.components.as_ref().unwrap();
        eprintln!("  ft step {:5} loss {:.4} (l1 {:.3}/{:.3} stop {:.3} ga {:.3})",
            r.step, r.loss, c.l1_pre, c.l1_post, c.stop_bce, c.guided_attention);
    }
    eprintln!("finetune done [{:.0}s]", t0.elapsed().as_secs_f64());

    // Baseline: from scratch, no language id (fully-zero-shot baseline).
    let mut base_dims = dims;
    base_dims.use_language_id = false;
    let (base_ckpt, _) = finetune(&FinetuneSetup {
        corpus: &art.paired, registry: &art.registry, vocab: &art.vocab, dims: &base_dims,
        config: &TrainConfig { init_parts: BTreeSet::new(), ..ft_cfg.clone() },
        freeze: FreezePolicy::None, weights: &weights,
        speakers: &art.speakers, pretrained: None, seed, config_hash: "b".into(),
        symbol_tables: None, ablation: None,
    }).unwrap();
    eprintln!("baseline done [{:.0}s]", t0.elapsed().as_secs_f64());

    // Evaluate both.
    let sources = [SpeakerSource::TargetLanguageMean];
    for (name, ckpt) in [("pretrained", &ft_ckpt), ("baseline", &base_ckpt)] {
        let report = evaluate(&EvalSetup {
            params: &ckpt.params, provenance: &ckpt.meta.provenance, vocab: &art.vocab,
            registry: &art.registry, test_corpus: &art.eval, oracle: &art.oracle,
            speakers: &art.speakers, speaker_sources: &sources, tables: None,
            max_frames: 120, stop_threshold: 0.5, config_hash: "e".into(), seed,
        }).unwrap();
        eprintln!("eval {name} done [{:.0}s]", t0.elapsed().as_secs_f64());
        for agg in &report.aggregates {
            println!(
                "{name:10} {} ({}): cer {:.3} dist {:.3} diag {:.3} stopped {:.2}",
                agg.code, agg.mode, agg.mean_cer, agg.mean_distortion, agg.mean_diagonality,
                agg.stopped_fraction
            );
        }
    }
}
