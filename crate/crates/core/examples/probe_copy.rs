//! Probe: MLM on a trivial two-token copy corpus.
use std::collections::BTreeSet;
use ttslab_core::corpus::{LanguageRegistry, RoleSets, Utterance};
use ttslab_core::masking::MaskingPolicy;
use ttslab_core::model::ModelDims;
use ttslab_core::tokenizer::Vocabulary;
use ttslab_core::training::{pretrain, PretrainSetup, TrainConfig};

fn main() {
    let roles = RoleSets {
        text: BTreeSet::from([0]),
        ..Default::default()
    };
    let registry = LanguageRegistry::new(vec!["aa".into()], roles).unwrap();
    let mut corpus = Vec::new();
    for i in 0..64 {
        let ch = if i % 2 == 0 { "a" } else { "b" };
        corpus.push(Utterance::new(0, ch.repeat(24), &registry).unwrap());
    }
    let vocab = Vocabulary::build_bytes(&corpus).unwrap();
    let dims = ModelDims::desk(vocab.len(), 1, 4, 3);
    let config = TrainConfig {
        steps: 200,
        batch_size: 8,
        warmup_steps: 100,
        lr_scale: 1.0,
        tau: 1.0,
        log_interval: 20,
        init_parts: BTreeSet::new(),
    };
    let setup = PretrainSetup {
        corpus: &corpus,
        registry: &registry,
        vocab: &vocab,
        policy: &MaskingPolicy::default(),
        dims: &dims,
        config: &config,
        seed: 1,
        config_hash: "probe".into(),
        resume: None,
        symbol_tables: None,
        ablation: None,
    };
    let (_, trace) = pretrain(&setup).unwrap();
    for r in &trace {
        println!("step {:4} loss {:.4} acc {:.3}", r.step, r.loss, r.accuracy.unwrap());
    }
}
