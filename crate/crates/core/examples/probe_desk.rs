//! Probe: MLM pretraining quality on the desk corpus, with dev-set eval.
use std::collections::BTreeSet;
use ttslab_core::config::{desk_experiment, desk_family, desk_sizes};
use ttslab_core::experiment::build_corpus;
use ttslab_core::masking::{apply_mask, MaskingPolicy};
use ttslab_core::model::{ForwardCtx, ModelDims};
use ttslab_core::rng::DetRng;
use ttslab_core::tokenizer::{tokenize_bytes, TokenSequence};
use ttslab_core::training::{mlm_forward, pretrain, MlmExample, PretrainSetup, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1600);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let warmup: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
    let lr_scale: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);

    let mut cfg = desk_experiment("/tmp/probe".into());
    cfg.corpus.family = desk_family();
    cfg.corpus.sizes = desk_sizes();
    let (_, art) = build_corpus(&cfg).unwrap();
    println!(
        "corpus: {} train text, {} dev, vocab {}",
        art.text_train.len(),
        art.text_dev.len(),
        art.vocab.len()
    );

    let dims = ModelDims::desk(art.vocab.len(), art.registry.len(), 8, 8);
    let chunk = 200usize;
    let mut resume = None;
    let policy = MaskingPolicy::default();
    let t0 = std::time::Instant::now();
    for done in (chunk..=steps).step_by(chunk) {
        let config = TrainConfig {
            steps: chunk,
            batch_size: batch,
            warmup_steps: warmup,
            lr_scale,
            tau: 1.0,
            log_interval: chunk,
            init_parts: BTreeSet::new(),
        };
        let setup = PretrainSetup {
            corpus: &art.text_train,
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
        // Dev eval with fixed mask seed.
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut n = 0;
        let mut mask_rng = DetRng::new(999, "dev.mask");
        for utt in &art.text_dev {
            let seq = TokenSequence {
                ids: tokenize_bytes(&utt.text, &art.vocab).ids,
            };
            let masked = apply_mask(&seq, &policy, &mut mask_rng, &art.vocab);
            if masked.k() == 0 {
                continue;
            }
            let ex = MlmExample {
                masked_ids: &masked.masked_ids,
                positions: &masked.positions,
                targets: &masked.targets,
                language_id: utt.language_id,
            };
            let (loss, acc) = mlm_forward(&ckpt.params, &ex, &mut ForwardCtx::eval()).unwrap();
            loss_sum += loss;
            acc_sum += acc;
            n += 1;
        }
        println!(
            "step {:5} dev_loss {:.4} dev_acc {:.3} [{:.1}s] (0.5 ln V = {:.3})",
            done,
            loss_sum / n as f64,
            acc_sum / n as f64,
            t0.elapsed().as_secs_f64(),
            0.5 * (art.vocab.len() as f64).ln()
        );
        resume = Some(ckpt);
    }
}
