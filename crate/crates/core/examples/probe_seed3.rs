//! Probe: decompose the zero-shot failure of one seed.
use std::collections::BTreeSet;
use ttslab_core::config::desk_experiment;
use ttslab_core::evaluation::oracle_cer;
use ttslab_core::experiment::build_corpus;
use ttslab_core::inference::{mean_speaker_vector, synthesize, SpeakerSource, SynthesisRequest};
use ttslab_core::model::{LossWeights, ModelDims};
use ttslab_core::training::{finetune, pretrain, FinetuneSetup, FreezePolicy, InitPart, PretrainSetup, TrainConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let pre_steps: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(3200);
    let ax_text: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(250);
    let mut cfg = desk_experiment("/tmp/probe".into());
    cfg.seed = seed;
    cfg.corpus.sizes.text = vec![ax_text, ax_text, ax_text, ax_text, ax_text, 0];
    let (_, art) = build_corpus(&cfg).unwrap();
    let dims = ModelDims::desk(art.vocab.len(), art.registry.len(), 8, 8);
    let weights = LossWeights::default();
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
        steps: 2400, batch_size: 8, warmup_steps: 400, lr_scale: 1.0, tau: 1.0,
        log_interval: 100000,
        init_parts: BTreeSet::from([InitPart::EmbeddingLayer, InitPart::Encoder]),
    };
    let (ft_ckpt, _) = finetune(&FinetuneSetup {
        corpus: &art.paired, registry: &art.registry, vocab: &art.vocab, dims: &dims,
        config: &ft_cfg, freeze: FreezePolicy::FreezeLae, weights: &weights,
        speakers: &art.speakers, pretrained: Some(&pre_ckpt), seed, config_hash: "f".into(),
        symbol_tables: None, ablation: None,
    }).unwrap();

    let ax = art.registry.id("ax").unwrap();
    let aa = art.registry.id("aa").unwrap();
    let spk_ax = mean_speaker_vector(&art.eval, &art.speakers, ax).unwrap();
    let spk_aa = mean_speaker_vector(&art.eval, &art.speakers, aa).unwrap();
    for (label, lang, spk) in [
        ("ax id + ax spk", ax, &spk_ax),
        ("ax id + aa spk", ax, &spk_aa),
        ("aa id + ax spk", aa, &spk_ax),
        ("aa id + aa spk", aa, &spk_aa),
    ] {
        let mut cers = Vec::new();
        for utt in art.eval.iter().filter(|u| u.language_id == ax) {
            let req = SynthesisRequest {
                text: utt.text.clone(), language_id: lang,
                speaker: SpeakerSource::TargetLanguageMean, max_frames: 120, stop_threshold: 0.5,
            };
            let out = synthesize(&req, &ft_ckpt.params, &art.vocab, &art.registry,
                                 &ft_ckpt.meta.provenance, spk, None).unwrap();
            cers.push(oracle_cer(&out.features.view(), &utt.phonemes, &art.oracle).unwrap());
        }
        println!("seed {seed} {label}: CER {:.3}", cers.iter().sum::<f64>() / cers.len() as f64);
    }
}
