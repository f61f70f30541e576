//! Probe: why does zero-shot transfer (not) happen?
use std::collections::BTreeSet;
use ttslab_core::config::desk_experiment;
use ttslab_core::evaluation::oracle_cer;
use ttslab_core::experiment::build_corpus;
use ttslab_core::inference::{synthesize, SpeakerSource, SynthesisRequest, mean_speaker_vector};
use ttslab_core::model::{LossWeights, ModelDims};
use ttslab_core::training::{finetune, pretrain, FinetuneSetup, FreezePolicy, PretrainSetup, TrainConfig, InitPart};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pre_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2200);
    let ft_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1600);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(7);

    let cfg = desk_experiment("/tmp/probe".into());
    let (_, art) = build_corpus(&cfg).unwrap();
    let dims = ModelDims::desk(art.vocab.len(), art.registry.len(), 8, 8);
    let weights = LossWeights::default();

    let pre_cfg = TrainConfig {
        steps: pre_steps, batch_size: 12, warmup_steps: 300, lr_scale: 0.5, tau: 1.0,
        log_interval: 100000, init_parts: BTreeSet::new(),
    };
    let t0 = std::time::Instant::now();
    let (pre_ckpt, _) = pretrain(&PretrainSetup {
        corpus: &art.text_train, registry: &art.registry, vocab: &art.vocab,
        policy: &cfg.masking, dims: &dims, config: &pre_cfg, seed, config_hash: "p".into(),
        resume: None, symbol_tables: None, ablation: None,
    }).unwrap();

    eprintln!("pretrain [{:.0}s]", t0.elapsed().as_secs_f64());
    // Language embedding cosine similarity matrix after MLM.
    let emb = &pre_ckpt.params.language_embedding;
    println!("language embedding cosine similarities (MLM):");
    print!("      ");
    for (code, _) in art.registry.codes() { print!("{code:>7}"); }
    println!();
    for (ci, i) in art.registry.codes() {
        print!("{ci:>6}");
        for (_, j) in art.registry.codes() {
            let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for k in 0..emb.ncols() {
                dot += emb[(i, k)] * emb[(j, k)];
                ni += emb[(i, k)] * emb[(i, k)];
                nj += emb[(j, k)] * emb[(j, k)];
            }
            print!("{:>7.3}", dot / (ni.sqrt() * nj.sqrt()));
        }
        println!();
    }

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

    eprintln!("finetune [{:.0}s]", t0.elapsed().as_secs_f64());
    // ax utterances synthesized under (a) its own language id, (b) its anchor's.
    let ax = art.registry.id("ax").unwrap();
    let aa = art.registry.id("aa").unwrap();
    let spk = mean_speaker_vector(&art.eval, &art.speakers, ax).unwrap();
    for (label, lang) in [("ax id", ax), ("aa id (cheat)", aa)] {
        let mut cers = Vec::new();
        for utt in art.eval.iter().filter(|u| u.language_id == ax).take(12) {
            let req = SynthesisRequest {
                text: utt.text.clone(), language_id: lang,
                speaker: SpeakerSource::TargetLanguageMean, max_frames: 120, stop_threshold: 0.5,
            };
            let out = synthesize(&req, &ft_ckpt.params, &art.vocab, &art.registry,
                                 &ft_ckpt.meta.provenance, &spk, None).unwrap();
            cers.push(oracle_cer(&out.features.view(), &utt.phonemes, &art.oracle).unwrap());
        }
        let mean = cers.iter().sum::<f64>() / cers.len() as f64;
        println!("ax text with {label}: mean CER {mean:.3}");
    }
    // Teacher-forced reconstruction CER on seen data (acoustic fit only).
    {
        use ttslab_core::model::{decode_teacher_forced, ForwardCtx};
        use ttslab_core::inference::encode_for_synthesis;
        let mut cers = Vec::new();
        for utt in art.eval.iter().filter(|u| u.language_id < 4).take(20) {
            let ids = ttslab_core::inference::tokenize_request(&utt.text, utt.language_id, &art.vocab, None).unwrap();
            let spk_v = art.speakers.get(utt.language_id, utt.speaker_id).unwrap();
            let spk_v = ndarray::Array1::from_vec(spk_v.to_vec());
            let h = encode_for_synthesis(&ft_ckpt.params, &ids, utt.language_id, &spk_v).unwrap();
            let (out, _) = decode_teacher_forced(&ft_ckpt.params, &h, &utt.features, &mut ForwardCtx::eval()).unwrap();
            cers.push(oracle_cer(&out.y_post.view(), &utt.phonemes, &art.oracle).unwrap());
        }
        println!("teacher-forced seen reconstruction CER: {:.3}", cers.iter().sum::<f64>() / cers.len() as f64);
    }
    // Seen-language check at this budget.
    for code in ["aa", "ba"] {
        let lang = art.registry.id(code).unwrap();
        let spk = mean_speaker_vector(&art.eval, &art.speakers, lang).unwrap();
        let mut cers = Vec::new();
        for utt in art.eval.iter().filter(|u| u.language_id == lang).take(12) {
            let req = SynthesisRequest {
                text: utt.text.clone(), language_id: lang,
                speaker: SpeakerSource::TargetLanguageMean, max_frames: 120, stop_threshold: 0.5,
            };
            let out = synthesize(&req, &ft_ckpt.params, &art.vocab, &art.registry,
                                 &ft_ckpt.meta.provenance, &spk, None).unwrap();
            cers.push(oracle_cer(&out.features.view(), &utt.phonemes, &art.oracle).unwrap());
        }
        println!("{code} seen: mean CER {:.3}", cers.iter().sum::<f64>() / cers.len() as f64);
    }
}
