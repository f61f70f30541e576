//! Probe: MLM difficulty across family shapes.
use std::collections::BTreeSet;
use ttslab_core::config::desk_experiment;
use ttslab_core::experiment::build_corpus;
use ttslab_core::masking::{apply_mask, MaskingPolicy};
use ttslab_core::model::{ForwardCtx, ModelDims};
use ttslab_core::rng::DetRng;
use ttslab_core::tokenizer::{tokenize_bytes, TokenSequence};
use ttslab_core::training::{mlm_forward, pretrain, MlmExample, PretrainSetup, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let inventory: usize = args[1].parse().unwrap();
    let lexicon: usize = args[2].parse().unwrap();
    let wl_hi: usize = args[3].parse().unwrap();
    let steps: usize = args[4].parse().unwrap();
    let batch: usize = args[5].parse().unwrap();
    let text: usize = args[6].parse().unwrap();

    let mut cfg = desk_experiment("/tmp/probe".into());
    cfg.corpus.family.inventory_size = inventory;
    cfg.corpus.family.lexicon_size = lexicon;
    cfg.corpus.family.word_len_range = (2, wl_hi);
    cfg.corpus.family.words_per_utterance = (2, 3);
    cfg.corpus.sizes.text = vec![text, text, text, text, text, 0];
    let (_, art) = build_corpus(&cfg).unwrap();
    let dims = ModelDims::desk(art.vocab.len(), art.registry.len(), 8, 8);
    let policy = MaskingPolicy::default();
    let config = TrainConfig {
        steps,
        batch_size: batch,
        warmup_steps: 300,
        lr_scale: 0.5,
        tau: 1.0,
        log_interval: 100000,
        init_parts: BTreeSet::new(),
    };
    let t0 = std::time::Instant::now();
    let setup = PretrainSetup {
        corpus: &art.text_train,
        registry: &art.registry,
        vocab: &art.vocab,
        policy: &policy,
        dims: &dims,
        config: &config,
        seed: 7,
        config_hash: "probe".into(),
        resume: None,
        symbol_tables: None,
        ablation: None,
    };
    let (ckpt, _) = pretrain(&setup).unwrap();
    let mut mask_rng = DetRng::new(999, "dev.mask");
    let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0);
    for utt in &art.text_dev {
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
    println!(
        "inv={inventory} lex={lexicon} wl=(2,{wl_hi}) steps={steps} b={batch} text={text}: vocab {} dev_loss {:.4} (target {:.3}) dev_acc {:.3} [{:.0}s]",
        art.vocab.len(), loss_sum / n as f64, 0.5 * (art.vocab.len() as f64).ln(), acc_sum / n as f64,
        t0.elapsed().as_secs_f64()
    );
}
