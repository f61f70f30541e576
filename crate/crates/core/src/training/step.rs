//! Single-utterance forward and forward+backward passes for both objectives.
//!
//! Batches are loops over these functions with gradient accumulation, which
//! keeps every tensor two-dimensional and the backward code auditable.

use crate::error::Result;
use crate::model::{
    add_speaker, add_speaker_backward, bottleneck_backward, bottleneck_forward, decode_backward,
    decode_teacher_forced, embed_language, embed_language_backward, embed_tokens,
    embed_tokens_backward, encode, encode_backward, masked_accuracy, mlm_loss, mlm_loss_backward,
    predict_backward, predict_tokens, stop_targets, tts_loss, tts_loss_backward, DecodeOut,
    ForwardCtx, LossWeights, Params, TtsLossBreakdown,
};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Axis};

/// One masked utterance ready for the MLM objective.
pub struct MlmExample<'a> {
    pub masked_ids: &'a [usize],
    pub positions: &'a [usize],
    pub targets: &'a [usize],
    pub language_id: usize,
}

/// One paired utterance ready for the TTS objective.
pub struct TtsExample<'a, S: Scalar> {
    pub token_ids: &'a [usize],
    pub language_id: usize,
    pub speaker: &'a Array1<S>,
    pub y_ref: &'a Array2<S>,
}

fn embed_input<S: Scalar>(
    params: &Params<S>,
    ids: &[usize],
    language_id: usize,
) -> Result<Array2<S>> {
    let z = embed_tokens(ids, &params.token_embedding)?;
    if params.dims.use_language_id {
        let e = embed_language(language_id, &params.language_embedding)?;
        Ok(&z + &e)
    } else {
        Ok(z)
    }
}

fn embed_backward<S: Scalar>(
    params: &Params<S>,
    ids: &[usize],
    language_id: usize,
    d_x0: &Array2<S>,
    grads: &mut Params<S>,
) {
    embed_tokens_backward(ids, d_x0, &mut grads.token_embedding);
    if params.dims.use_language_id {
        let d_e = d_x0.sum_axis(Axis(0));
        embed_language_backward(language_id, &d_e, &mut grads.language_embedding);
    }
}

/// MLM loss (and masked accuracy) without gradients.
pub fn mlm_forward<S: Scalar>(
    params: &Params<S>,
    ex: &MlmExample<'_>,
    ctx: &mut ForwardCtx<'_, S>,
) -> Result<(S, f64)> {
    let x0 = embed_input(params, ex.masked_ids, ex.language_id)?;
    let (h_in, _) = bottleneck_forward(params, &x0, ctx);
    let pad = vec![false; ex.masked_ids.len()];
    let (h_out, _) = encode(params, &h_in, &pad, ctx)?;
    let (probs, _) = predict_tokens(params, &h_out);
    Ok((
        mlm_loss(&probs, ex.targets, ex.positions),
        masked_accuracy(&probs, ex.targets, ex.positions),
    ))
}

/// MLM loss with gradient accumulation into `grads`.
pub fn mlm_step<S: Scalar>(
    params: &Params<S>,
    ex: &MlmExample<'_>,
    ctx: &mut ForwardCtx<'_, S>,
    grads: &mut Params<S>,
) -> Result<(S, f64)> {
    let x0 = embed_input(params, ex.masked_ids, ex.language_id)?;
    let (h_in, bcache) = bottleneck_forward(params, &x0, ctx);
    let pad = vec![false; ex.masked_ids.len()];
    let (h_out, ecache) = encode(params, &h_in, &pad, ctx)?;
    let (probs, pcache) = predict_tokens(params, &h_out);
    let loss = mlm_loss(&probs, ex.targets, ex.positions);
    let acc = masked_accuracy(&probs, ex.targets, ex.positions);

    let d_logits = mlm_loss_backward(&probs, ex.targets, ex.positions);
    let d_h_out = predict_backward(params, &pcache, &d_logits, grads);
    let d_h_in = encode_backward(params, &ecache, &d_h_out, grads);
    let d_x0 = bottleneck_backward(params, &bcache, &d_h_in, grads);
    embed_backward(params, ex.masked_ids, ex.language_id, &d_x0, grads);
    Ok((loss, acc))
}

/// Teacher-forced TTS loss without gradients.
pub fn tts_forward<S: Scalar>(
    params: &Params<S>,
    ex: &TtsExample<'_, S>,
    weights: &LossWeights,
    ctx: &mut ForwardCtx<'_, S>,
) -> Result<(S, TtsLossBreakdown)> {
    let (out, _) = tts_decode(params, ex, ctx)?;
    let targets = stop_targets::<S>(ex.y_ref.nrows());
    Ok(tts_loss(&out, ex.y_ref, &targets, weights))
}

fn tts_decode<'c, S: Scalar>(
    params: &Params<S>,
    ex: &TtsExample<'_, S>,
    ctx: &mut ForwardCtx<'c, S>,
) -> Result<(DecodeOut<S>, TtsCaches<S>)> {
    let x0 = embed_input(params, ex.token_ids, ex.language_id)?;
    let (h_in, bcache) = bottleneck_forward(params, &x0, ctx);
    let pad = vec![false; ex.token_ids.len()];
    let (h_out, ecache) = encode(params, &h_in, &pad, ctx)?;
    let (h_spk, scache) = add_speaker(params, &h_out, ex.speaker)?;
    let (out, dcache) = decode_teacher_forced(params, &h_spk, ex.y_ref, ctx)?;
    Ok((
        out,
        TtsCaches {
            bcache,
            ecache,
            scache,
            dcache,
        },
    ))
}

struct TtsCaches<S: Scalar> {
    bcache: crate::model::BottleneckCache<S>,
    ecache: crate::model::EncodeCache<S>,
    scache: crate::model::SpeakerCache<S>,
    dcache: crate::model::DecodeCache<S>,
}

/// Teacher-forced TTS loss with gradient accumulation into `grads`.
pub fn tts_step<S: Scalar>(
    params: &Params<S>,
    ex: &TtsExample<'_, S>,
    weights: &LossWeights,
    ctx: &mut ForwardCtx<'_, S>,
    grads: &mut Params<S>,
) -> Result<(S, TtsLossBreakdown)> {
    let (out, caches) = tts_decode(params, ex, ctx)?;
    let targets = stop_targets::<S>(ex.y_ref.nrows());
    let (loss, breakdown) = tts_loss(&out, ex.y_ref, &targets, weights);

    let d_out = tts_loss_backward(&out, ex.y_ref, &targets, weights);
    let d_h_spk = decode_backward(params, &caches.dcache, &d_out, grads);
    let d_h_out = add_speaker_backward(params, &caches.scache, &d_h_spk, grads);
    let d_h_in = encode_backward(params, &caches.ecache, &d_h_out, grads);
    let d_x0 = bottleneck_backward(params, &caches.bcache, &d_h_in, grads);
    embed_backward(params, ex.token_ids, ex.language_id, &d_x0, grads);
    Ok((loss, breakdown))
}
