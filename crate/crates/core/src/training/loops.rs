//! The two training loops: MLM pretraining and teacher-forced fine-tuning.
//!
//! One seeded stream drives batch sampling, masking, and dropout so a
//! checkpoint's RNG state fully determines the continuation; traces reproduce
//! bit-exactly under a fixed seed.

use super::step::{mlm_step, MlmExample, TtsExample};
use super::{
    sample_batch_indices, AdamNoam, FreezePolicy, InitPart, TraceRecord, TrainConfig,
};
use crate::corpus::{LanguageRegistry, PairedUtterance, SpeakerTable, Utterance};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskingPolicy};
use crate::model::{
    Checkpoint, CheckpointMeta, ForwardCtx, LossWeights, ModelDims, ParamGroup, Params,
    Provenance,
};
use crate::rng::DetRng;
use crate::scalar::s;
use crate::tokenizer::{tokenize_bytes, tokenize_symbols, SymbolTable, TokenType, Vocabulary};
use crate::Real;
use std::collections::{BTreeMap, BTreeSet};

/// Everything `pretrain` needs.
pub struct PretrainSetup<'a> {
    pub corpus: &'a [Utterance],
    pub registry: &'a LanguageRegistry,
    pub vocab: &'a Vocabulary,
    pub policy: &'a MaskingPolicy,
    pub dims: &'a ModelDims,
    pub config: &'a TrainConfig,
    pub seed: u64,
    pub config_hash: String,
    /// Continue from an earlier pretraining checkpoint.
    pub resume: Option<&'a Checkpoint>,
    /// Required when the vocabulary is symbol-typed.
    pub symbol_tables: Option<&'a BTreeMap<usize, SymbolTable>>,
    pub ablation: Option<String>,
}

fn tokenize_corpus(
    texts: &[(usize, &str)],
    vocab: &Vocabulary,
    tables: Option<&BTreeMap<usize, SymbolTable>>,
) -> Result<Vec<Vec<usize>>> {
    texts
        .iter()
        .map(|(lang, text)| match vocab.token_type() {
            TokenType::Bytes => Ok(tokenize_bytes(text, vocab).ids),
            TokenType::Symbols => {
                let table = tables
                    .and_then(|t| t.get(lang))
                    .ok_or_else(|| Error::Vocabulary(format!("no symbol table for language {lang}")))?;
                Ok(tokenize_symbols(text, table, vocab)?.ids)
            }
        })
        .collect()
}

fn dump_config<T: serde::Serialize>(config: &T) -> String {
    serde_json::to_string(config).unwrap_or_else(|_| "<unserializable>".into())
}

/// MLM pretraining of the language-aware embedding layer, encoder, and
/// prediction net. The decoder is untouched.
pub fn pretrain(setup: &PretrainSetup<'_>) -> Result<(Checkpoint, Vec<TraceRecord>)> {
    setup.config.validate()?;
    setup.policy.validate()?;
    if setup.corpus.is_empty() {
        return Err(Error::Corpus("pretraining corpus is empty".into()));
    }

    let texts: Vec<(usize, &str)> = setup
        .corpus
        .iter()
        .map(|u| (u.language_id, u.text.as_str()))
        .collect();
    let token_ids = tokenize_corpus(&texts, setup.vocab, setup.symbol_tables)?;
    let language_ids: Vec<usize> = setup.corpus.iter().map(|u| u.language_id).collect();

    let mut params = match setup.resume {
        Some(ckpt) => {
            if ckpt.meta.dims != *setup.dims {
                return Err(Error::Checkpoint("resume dims mismatch".into()));
            }
            if ckpt.meta.vocab_hash != setup.vocab.content_hash() {
                return Err(Error::Checkpoint("resume vocabulary mismatch".into()));
            }
            ckpt.params.clone()
        }
        None => Params::<Real>::init(setup.dims, setup.seed)?,
    };

    let trainable = BTreeSet::from([
        ParamGroup::TokenEmbedding,
        ParamGroup::LanguageEmbedding,
        ParamGroup::Bottleneck,
        ParamGroup::Encoder,
        ParamGroup::Prediction,
    ]);
    let mut opt = AdamNoam::<Real>::new(
        setup.dims.d,
        setup.config.warmup_steps,
        setup.config.lr_scale,
        trainable,
    );
    let mut rng = DetRng::new(setup.seed, "pretrain.loop");
    if let Some(ckpt) = setup.resume {
        opt.restore(ckpt.meta.step as usize, ckpt.opt_m.clone(), ckpt.opt_v.clone());
        if let Some(state) = &ckpt.meta.rng {
            rng = DetRng::from_state(state);
        }
    }

    let final_step = opt.step_count() + setup.config.steps;
    let mut trace = Vec::new();
    while opt.step_count() < final_step {
        let batch = sample_batch_indices(
            &language_ids,
            setup.config.tau,
            setup.config.batch_size,
            &mut rng,
        );
        let mut grads = params.zeros_like();
        let mut batch_loss = 0.0;
        let mut batch_acc = 0.0;
        for idx in batch {
            let masked = apply_mask(
                &crate::tokenizer::TokenSequence {
                    ids: token_ids[idx].clone(),
                },
                setup.policy,
                &mut rng,
                setup.vocab,
            );
            if masked.k() == 0 {
                continue;
            }
            let ex = MlmExample {
                masked_ids: &masked.masked_ids,
                positions: &masked.positions,
                targets: &masked.targets,
                language_id: language_ids[idx],
            };
            let (loss, acc) = if setup.dims.dropout > 0.0 {
                let mut ctx = ForwardCtx::train(setup.dims.dropout, &mut rng);
                mlm_step(&params, &ex, &mut ctx, &mut grads)?
            } else {
                mlm_step(&params, &ex, &mut ForwardCtx::eval(), &mut grads)?
            };
            batch_loss += loss;
            batch_acc += acc;
        }
        let inv_b = 1.0 / setup.config.batch_size as f64;
        batch_loss *= inv_b;
        batch_acc *= inv_b;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                step: opt.step_count() + 1,
                message: format!("non-finite MLM loss; config: {}", dump_config(setup.config)),
            });
        }
        grads.for_each_param_mut(&mut |_, mut t| {
            for g in t.iter_mut() {
                *g = *g * s::<Real>(inv_b);
            }
        });
        let lr = opt.apply(&mut params, &grads);
        let step = opt.step_count();
        if step % setup.config.log_interval == 0 || step == final_step {
            if trace.last().map(|r: &TraceRecord| r.step) != Some(step) {
                trace.push(TraceRecord {
                    step,
                    lr,
                    loss: batch_loss,
                    accuracy: Some(batch_acc),
                    components: None,
                });
            }
        }
    }

    let meta = CheckpointMeta {
        dims: *setup.dims,
        config_hash: setup.config_hash.clone(),
        vocab_hash: setup.vocab.content_hash(),
        seed: setup.seed,
        step: opt.step_count() as u64,
        rng: Some(rng.state()),
        provenance: Provenance {
            pretrained_on: setup.registry.roles.text.clone(),
            paired_on: BTreeSet::new(),
            freeze: None,
            ablation: setup.ablation.clone(),
        },
    };
    let (m, v) = opt.state();
    Ok((
        Checkpoint {
            meta,
            params,
            opt_m: m.clone(),
            opt_v: v.clone(),
        },
        trace,
    ))
}

/// Everything `finetune` needs.
pub struct FinetuneSetup<'a> {
    pub corpus: &'a [PairedUtterance],
    pub registry: &'a LanguageRegistry,
    pub vocab: &'a Vocabulary,
    pub dims: &'a ModelDims,
    pub config: &'a TrainConfig,
    pub freeze: FreezePolicy,
    pub weights: &'a LossWeights,
    pub speakers: &'a SpeakerTable,
    /// Pretrained checkpoint; `None` trains the baseline from scratch.
    pub pretrained: Option<&'a Checkpoint>,
    pub seed: u64,
    pub config_hash: String,
    pub symbol_tables: Option<&'a BTreeMap<usize, SymbolTable>>,
    pub ablation: Option<String>,
}

/// Supervised TTS fine-tuning with teacher forcing under a freeze policy.
/// The prediction net is never updated here.
pub fn finetune(setup: &FinetuneSetup<'_>) -> Result<(Checkpoint, Vec<TraceRecord>)> {
    setup.config.validate()?;
    if setup.corpus.is_empty() {
        return Err(Error::Corpus("paired corpus is empty".into()));
    }
    let corpus_langs: BTreeSet<usize> = setup.corpus.iter().map(|u| u.language_id).collect();
    if !corpus_langs.is_subset(&setup.registry.roles.paired) {
        return Err(Error::Registry(format!(
            "paired corpus languages {corpus_langs:?} exceed the paired role set {:?}",
            setup.registry.roles.paired
        )));
    }
    if !setup.registry.roles.paired.is_subset(&setup.registry.roles.text) {
        return Err(Error::Registry(
            "paired languages must be a subset of text languages".into(),
        ));
    }

    let mut params = Params::<Real>::init(setup.dims, setup.seed)?;
    if let Some(ckpt) = setup.pretrained {
        if ckpt.meta.dims != *setup.dims {
            return Err(Error::Checkpoint(
                "pretrained checkpoint dims do not match the fine-tuning model".into(),
            ));
        }
        if ckpt.meta.vocab_hash != setup.vocab.content_hash() {
            return Err(Error::Checkpoint(
                "vocabulary mismatch between checkpoint and corpus".into(),
            ));
        }
        for part in &setup.config.init_parts {
            match part {
                InitPart::EmbeddingLayer => {
                    params.copy_group_from(&ckpt.params, ParamGroup::TokenEmbedding)?;
                    params.copy_group_from(&ckpt.params, ParamGroup::LanguageEmbedding)?;
                    params.copy_group_from(&ckpt.params, ParamGroup::Bottleneck)?;
                }
                InitPart::Encoder => {
                    params.copy_group_from(&ckpt.params, ParamGroup::Encoder)?;
                }
            }
        }
        // The prediction net rides along so pretraining stays resumable.
        params.copy_group_from(&ckpt.params, ParamGroup::Prediction)?;
    }

    let texts: Vec<(usize, &str)> = setup
        .corpus
        .iter()
        .map(|u| (u.language_id, u.text.as_str()))
        .collect();
    let token_ids = tokenize_corpus(&texts, setup.vocab, setup.symbol_tables)?;
    let language_ids: Vec<usize> = setup.corpus.iter().map(|u| u.language_id).collect();
    let speaker_vecs: Vec<ndarray::Array1<Real>> = setup
        .corpus
        .iter()
        .map(|u| {
            setup
                .speakers
                .get(u.language_id, u.speaker_id)
                .map(|v| ndarray::Array1::from_vec(v.to_vec()))
                .ok_or_else(|| {
                    Error::Corpus(format!(
                        "no speaker vector for language {} speaker {}",
                        u.language_id, u.speaker_id
                    ))
                })
        })
        .collect::<Result<_>>()?;

    let mut opt = AdamNoam::<Real>::new(
        setup.dims.d,
        setup.config.warmup_steps,
        setup.config.lr_scale,
        setup.freeze.trainable_groups(),
    );
    let mut rng = DetRng::new(setup.seed, "finetune.loop");

    let final_step = setup.config.steps;
    let mut trace = Vec::new();
    while opt.step_count() < final_step {
        let batch = sample_batch_indices(
            &language_ids,
            setup.config.tau,
            setup.config.batch_size,
            &mut rng,
        );
        let mut grads = params.zeros_like();
        let mut batch_loss = 0.0;
        let mut components_sum: Option<crate::model::TtsLossBreakdown> = None;
        for idx in batch {
            let ex = TtsExample {
                token_ids: &token_ids[idx],
                language_id: language_ids[idx],
                speaker: &speaker_vecs[idx],
                y_ref: &setup.corpus[idx].features,
            };
            let (loss, parts) = if setup.dims.dropout > 0.0 {
                let mut ctx = ForwardCtx::train(setup.dims.dropout, &mut rng);
                super::step::tts_step(&params, &ex, setup.weights, &mut ctx, &mut grads)?
            } else {
                super::step::tts_step(
                    &params,
                    &ex,
                    setup.weights,
                    &mut ForwardCtx::eval(),
                    &mut grads,
                )?
            };
            batch_loss += loss;
            components_sum = Some(match components_sum {
                None => parts,
                Some(acc) => crate::model::TtsLossBreakdown {
                    l1_pre: acc.l1_pre + parts.l1_pre,
                    l1_post: acc.l1_post + parts.l1_post,
                    stop_bce: acc.stop_bce + parts.stop_bce,
                    guided_attention: acc.guided_attention + parts.guided_attention,
                    total: acc.total + parts.total,
                },
            });
        }
        let inv_b = 1.0 / setup.config.batch_size as f64;
        batch_loss *= inv_b;
        let components = components_sum.map(|c| crate::model::TtsLossBreakdown {
            l1_pre: c.l1_pre * inv_b,
            l1_post: c.l1_post * inv_b,
            stop_bce: c.stop_bce * inv_b,
            guided_attention: c.guided_attention * inv_b,
            total: c.total * inv_b,
        });
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                step: opt.step_count() + 1,
                message: format!("non-finite TTS loss; config: {}", dump_config(setup.config)),
            });
        }
        grads.for_each_param_mut(&mut |_, mut t| {
            for g in t.iter_mut() {
                *g = *g * s::<Real>(inv_b);
            }
        });
        let lr = opt.apply(&mut params, &grads);
        let step = opt.step_count();
        if step % setup.config.log_interval == 0 || step == final_step {
            if trace.last().map(|r: &TraceRecord| r.step) != Some(step) {
                trace.push(TraceRecord {
                    step,
                    lr,
                    loss: batch_loss,
                    accuracy: None,
                    components,
                });
            }
        }
    }

    let pretrained_on = setup
        .pretrained
        .filter(|_| !setup.config.init_parts.is_empty())
        .map(|c| c.meta.provenance.pretrained_on.clone())
        .unwrap_or_default();
    let meta = CheckpointMeta {
        dims: *setup.dims,
        config_hash: setup.config_hash.clone(),
        vocab_hash: setup.vocab.content_hash(),
        seed: setup.seed,
        step: opt.step_count() as u64,
        rng: Some(rng.state()),
        provenance: Provenance {
            pretrained_on,
            paired_on: corpus_langs,
            freeze: Some(setup.freeze.name().to_string()),
            ablation: setup.ablation.clone(),
        },
    };
    let (m, v) = opt.state();
    Ok((
        Checkpoint {
            meta,
            params,
            opt_m: m.clone(),
            opt_v: v.clone(),
        },
        trace,
    ))
}
