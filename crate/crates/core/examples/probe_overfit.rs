//! Probe: can the MLM overfit 16 utterances?
use std::collections::BTreeSet;
use ttslab_core::config::desk_experiment;
use ttslab_core::experiment::build_corpus;
use ttslab_core::masking::{apply_mask, MaskingPolicy};
use ttslab_core::model::{ForwardCtx, ModelDims};
use ttslab_core::rng::DetRng;
use ttslab_core::tokenizer::{tokenize_bytes, TokenSequence};
use ttslab_core::training::{mlm_forward, pretrain, MlmExample, PretrainSetup, TrainConfig};

fn main() {
    let cfg = desk_experiment("/tmp/probe".into());
    let (_, art) = build_corpus(&cfg).unwrap();
    let subset: Vec<_> = art.text_train.iter().take(16).cloned().collect();
    let dims = ModelDims::desk(art.vocab.len(), art.registry.len(), 8, 8);
    let policy = MaskingPolicy::default();
    let mut resume = None;
    for done in [500, 1000, 2000, 3000] {
        let config = TrainConfig {
            steps: done - resume.as_ref().map(|c: &ttslab_core::model::Checkpoint| c.meta.step as usize).unwrap_or(0),
            batch_size: 16,
            warmup_steps: 300,
            lr_scale: 0.5,
            tau: 1.0,
            log_interval: 100000,
            init_parts: BTreeSet::new(),
        };
        let setup = PretrainSetup {
            corpus: &subset,
            registry: &art.registry,
            vocab: &art.vocab,
            policy: &policy,
            dims: &dims,
            config: &config,
            seed: 7,
            config_hash: "probe".into(),
            resume: resume.as_ref(),
            symbol_tables: None,
            ablation: None,
        };
        let (ckpt, _) = pretrain(&setup).unwrap();
        // Eval on the SAME subset with fixed masks.
        let mut mask_rng = DetRng::new(999, "dev.mask");
        let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0);
        for utt in &subset {
            let seq = TokenSequence { ids: tokenize_bytes(&utt.text, &art.vocab).ids };
            let masked = apply_mask(&seq, &policy, &mut mask_rng, &art.vocab);
            if masked.k() == 0 { continue; }
            let ex = MlmExample {
                masked_ids: &masked.masked_ids,
                positions: &masked.positions,
                targets: &masked.targets,
                language_id: utt.language_id,
            };
            let (loss, acc) = mlm_forward(&ckpt.params, &ex, &mut ForwardCtx::eval()).unwrap();
            loss_sum += loss; acc_sum += acc; n += 1;
        }
        println!("step {done:5} train16_loss {:.4} acc {:.3}", loss_sum / n as f64, acc_sum / n as f64);
        resume = Some(ckpt);
    }
}
