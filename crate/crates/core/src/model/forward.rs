//! Forward and backward passes for every operation of the network.
//!
//! Conventions: `N` is the token-sequence length, `T` the frame count, `d`
//! the model width, `D` the feature dimension. Backward functions accumulate
//! parameter gradients into a zeroed mirror of [`Params`] and return input
//! gradients.

use super::{Bottleneck, DecoderBlock, EncoderBlock, Params};
use crate::error::{Error, Result};
use crate::nn::{
    bce_with_logits, bce_with_logits_backward, gelu, gelu_backward, relu, relu_backward,
    sinusoidal_pe, softmax_rows, AttnMask, Conv1dCache, FfnCache, LayerNormCache, MhaCache,
};
use crate::rng::DetRng;
use crate::scalar::{s, s_usize, Scalar};
use ndarray::{s as nd_s, Array1, Array2, Axis};

/// Training-time context: dropout probability and its seeded stream.
/// `ForwardCtx::eval()` disables all stochastic behavior.
pub struct ForwardCtx<'a, S: Scalar> {
    pub dropout: f64,
    pub rng: Option<&'a mut DetRng>,
    _marker: std::marker::PhantomData<S>,
}

impl<'a, S: Scalar> ForwardCtx<'a, S> {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn train(dropout: f64, rng: &'a mut DetRng) -> Self {
        ForwardCtx {
            dropout,
            rng: Some(rng),
            _marker: std::marker::PhantomData,
        }
    }

    fn rng(&mut self) -> Option<&mut DetRng> {
        self.rng.as_deref_mut()
    }
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

/// Row `n` of the output is the embedding-table row `ids[n]`.
pub fn embed_tokens<S: Scalar>(ids: &[usize], table: &Array2<S>) -> Result<Array2<S>> {
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (i, &id) in ids.iter().enumerate() {
        if id >= table.nrows() {
            return Err(Error::Vocabulary(format!(
                "token id {id} out of range for table with {} rows",
                table.nrows()
            )));
        }
        out.row_mut(i).assign(&table.row(id));
    }
    Ok(out)
}

/// Scatter-add of `d_out` rows into the embedding-table gradient.
pub fn embed_tokens_backward<S: Scalar>(
    ids: &[usize],
    d_out: &Array2<S>,
    grad_table: &mut Array2<S>,
) {
    for (i, &id) in ids.iter().enumerate() {
        let mut row = grad_table.row_mut(id);
        row += &d_out.row(i);
    }
}

/// Language embedding lookup.
pub fn embed_language<S: Scalar>(language_id: usize, table: &Array2<S>) -> Result<Array1<S>> {
    if language_id >= table.nrows() {
        return Err(Error::Registry(format!(
            "language id {language_id} out of range for table with {} rows",
            table.nrows()
        )));
    }
    Ok(table.row(language_id).to_owned())
}

pub fn embed_language_backward<S: Scalar>(
    language_id: usize,
    d_vec: &Array1<S>,
    grad_table: &mut Array2<S>,
) {
    let mut row = grad_table.row_mut(language_id);
    row += d_vec;
}

// ---------------------------------------------------------------------------
// Bottleneck
// ---------------------------------------------------------------------------

pub enum BottleneckCache<S: Scalar> {
    Residual {
        x: Array2<S>,
        ln: LayerNormCache<S>,
        normed: Array2<S>,
        pre: Array2<S>,
        hidden: Array2<S>,
    },
    Transformer(Box<EncBlockCache<S>>),
    Identity,
}

/// `x + Up(relu(Down(layernorm(x))))`, a transformer block, or identity.
pub fn bottleneck_forward<S: Scalar>(
    params: &Params<S>,
    x: &Array2<S>,
    ctx: &mut ForwardCtx<'_, S>,
) -> (Array2<S>, BottleneckCache<S>) {
    match &params.bottleneck {
        Bottleneck::Residual { ln, down, up } => {
            let (normed, ln_cache) = ln.forward(x);
            let pre = down.forward(&normed);
            let hidden = relu(&pre);
            let y = x + &up.forward(&hidden);
            (
                y,
                BottleneckCache::Residual {
                    x: x.clone(),
                    ln: ln_cache,
                    normed,
                    pre,
                    hidden,
                },
            )
        }
        Bottleneck::Transformer(block) => {
            let (y, cache) = enc_block_forward(block, x, AttnMask::Full, ctx);
            (y, BottleneckCache::Transformer(Box::new(cache)))
        }
        Bottleneck::Identity => (x.clone(), BottleneckCache::Identity),
    }
}

pub fn bottleneck_backward<S: Scalar>(
    params: &Params<S>,
    cache: &BottleneckCache<S>,
    dy: &Array2<S>,
    grads: &mut Params<S>,
) -> Array2<S> {
    match (&params.bottleneck, cache, &mut grads.bottleneck) {
        (
            Bottleneck::Residual { ln, down, up },
            BottleneckCache::Residual {
                x: _,
                ln: ln_cache,
                normed,
                pre,
                hidden,
            },
            Bottleneck::Residual {
                ln: g_ln,
                down: g_down,
                up: g_up,
            },
        ) => {
            let dhidden = up.backward(hidden, dy, g_up);
            let dpre = relu_backward(pre, &dhidden);
            let dnormed = down.backward(normed, &dpre, g_down);
            let dln = ln.backward(ln_cache, &dnormed, g_ln);
            dy + &dln
        }
        (
            Bottleneck::Transformer(block),
            BottleneckCache::Transformer(cache),
            Bottleneck::Transformer(g_block),
        ) => enc_block_backward(block, cache, dy, None, g_block),
        (Bottleneck::Identity, BottleneckCache::Identity, Bottleneck::Identity) => dy.clone(),
        _ => unreachable!("bottleneck cache/variant mismatch"),
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

pub struct EncBlockCache<S: Scalar> {
    ln1: LayerNormCache<S>,
    mha: MhaCache<S>,
    ln2: LayerNormCache<S>,
    ffn: FfnCache<S>,
}

fn enc_block_forward<S: Scalar>(
    block: &EncoderBlock<S>,
    x: &Array2<S>,
    mask: AttnMask<'_>,
    ctx: &mut ForwardCtx<'_, S>,
) -> (Array2<S>, EncBlockCache<S>) {
    let (normed1, ln1) = block.ln1.forward(x);
    let (sa, mha) = block
        .attn
        .forward(&normed1, &normed1, mask, ctx.dropout, ctx.rng());
    let x1 = x + &sa;
    let (normed2, ln2) = block.ln2.forward(&x1);
    let (ff, ffn) = block.ffn.forward(&normed2, ctx.dropout, ctx.rng());
    let y = &x1 + &ff;
    (
        y,
        EncBlockCache {
            ln1,
            mha,
            ln2,
            ffn,
        },
    )
}

fn enc_block_backward<S: Scalar>(
    block: &EncoderBlock<S>,
    cache: &EncBlockCache<S>,
    dy: &Array2<S>,
    _extra: Option<()>,
    grad: &mut EncoderBlock<S>,
) -> Array2<S> {
    let dff = dy;
    let dnormed2 = block.ffn.backward(&cache.ffn, dff, &mut grad.ffn);
    let dx1 = dy + &block.ln2.backward(&cache.ln2, &dnormed2, &mut grad.ln2);
    let (dq, dkv) = block.attn.backward(&cache.mha, &dx1, None, &mut grad.attn);
    let dnormed1 = dq + dkv;
    &dx1 + &block.ln1.backward(&cache.ln1, &dnormed1, &mut grad.ln1)
}

pub struct EncodeCache<S: Scalar> {
    h_in: Array2<S>,
    blocks: Vec<EncBlockCache<S>>,
    final_ln: Option<LayerNormCache<S>>,
    pad_mask: Vec<bool>,
}

/// Pre-norm transformer encoder with sinusoidal positions added to the input.
/// Padded positions neither attend nor are attended to, and their output rows
/// are zeroed.
pub fn encode<S: Scalar>(
    params: &Params<S>,
    h_in: &Array2<S>,
    pad_mask: &[bool],
    ctx: &mut ForwardCtx<'_, S>,
) -> Result<(Array2<S>, EncodeCache<S>)> {
    if pad_mask.len() != h_in.nrows() {
        return Err(Error::Shape(format!(
            "pad mask length {} != sequence length {}",
            pad_mask.len(),
            h_in.nrows()
        )));
    }
    let pe = sinusoidal_pe::<S>(h_in.nrows(), h_in.ncols());
    let mut x = h_in + &pe;
    let mut blocks = Vec::with_capacity(params.encoder_blocks.len());
    for block in &params.encoder_blocks {
        let (next, cache) = enc_block_forward(block, &x, AttnMask::PaddedKeys(pad_mask), ctx);
        blocks.push(cache);
        x = next;
    }
    let final_ln = if params.encoder_blocks.is_empty() {
        None
    } else {
        let (normed, cache) = params.encoder_final_ln.forward(&x);
        x = normed;
        Some(cache)
    };
    for (i, &pad) in pad_mask.iter().enumerate() {
        if pad {
            x.row_mut(i).fill(S::zero());
        }
    }
    Ok((
        x,
        EncodeCache {
            h_in: h_in.clone(),
            blocks,
            final_ln,
            pad_mask: pad_mask.to_vec(),
        },
    ))
}

pub fn encode_backward<S: Scalar>(
    params: &Params<S>,
    cache: &EncodeCache<S>,
    dy: &Array2<S>,
    grads: &mut Params<S>,
) -> Array2<S> {
    let mut dx = dy.clone();
    for (i, &pad) in cache.pad_mask.iter().enumerate() {
        if pad {
            dx.row_mut(i).fill(S::zero());
        }
    }
    if let Some(ln_cache) = &cache.final_ln {
        dx = params
            .encoder_final_ln
            .backward(ln_cache, &dx, &mut grads.encoder_final_ln);
    }
    for (block, (cache, grad)) in params.encoder_blocks.iter().rev().zip(
        cache
            .blocks
            .iter()
            .rev()
            .zip(grads.encoder_blocks.iter_mut().rev()),
    ) {
        dx = enc_block_backward(block, cache, &dx, None, grad);
    }
    let _ = &cache.h_in;
    dx
}

// ---------------------------------------------------------------------------
// Prediction head and MLM loss
// ---------------------------------------------------------------------------

pub struct PredictCache<S: Scalar> {
    x: Array2<S>,
    pre_gelu: Array2<S>,
    ln: LayerNormCache<S>,
    normed: Array2<S>,
    pub probs: Array2<S>,
}

/// Token probabilities: `softmax(lin2(layernorm(gelu(lin1(h)))))`.
pub fn predict_tokens<S: Scalar>(params: &Params<S>, h_out: &Array2<S>) -> (Array2<S>, PredictCache<S>) {
    let pre_gelu = params.prediction.lin1.forward(h_out);
    let gelu_out = gelu(&pre_gelu);
    let (normed, ln) = params.prediction.ln.forward(&gelu_out);
    let logits = params.prediction.lin2.forward(&normed);
    let probs = softmax_rows(&logits);
    (
        probs.clone(),
        PredictCache {
            x: h_out.clone(),
            pre_gelu,
            ln,
            normed,
            probs,
        },
    )
}

/// Backward from a gradient on the logits (softmax already folded in).
pub fn predict_backward<S: Scalar>(
    params: &Params<S>,
    cache: &PredictCache<S>,
    d_logits: &Array2<S>,
    grads: &mut Params<S>,
) -> Array2<S> {
    let dnormed = params
        .prediction
        .lin2
        .backward(&cache.normed, d_logits, &mut grads.prediction.lin2);
    let dgelu_out = params
        .prediction
        .ln
        .backward(&cache.ln, &dnormed, &mut grads.prediction.ln);
    let dpre = gelu_backward(&cache.pre_gelu, &dgelu_out);
    params
        .prediction
        .lin1
        .backward(&cache.x, &dpre, &mut grads.prediction.lin1)
}

/// Mean negative log-likelihood of the targets at the masked positions.
/// An empty position set is defined as zero loss.
pub fn mlm_loss<S: Scalar>(probs: &Array2<S>, targets: &[usize], positions: &[usize]) -> S {
    if positions.is_empty() {
        return S::zero();
    }
    let k = s_usize::<S>(positions.len());
    let mut total = S::zero();
    for (&pos, &target) in positions.iter().zip(targets) {
        total = total - probs[(pos, target)].max(s(1e-300)).ln();
    }
    total / k
}

/// Gradient of [`mlm_loss`] with respect to the logits: `(p - onehot) / K`
/// at the masked rows, zero elsewhere.
pub fn mlm_loss_backward<S: Scalar>(
    probs: &Array2<S>,
    targets: &[usize],
    positions: &[usize],
) -> Array2<S> {
    let mut d = Array2::zeros(probs.raw_dim());
    if positions.is_empty() {
        return d;
    }
    let inv_k = S::one() / s_usize::<S>(positions.len());
    for (&pos, &target) in positions.iter().zip(targets) {
        for j in 0..probs.ncols() {
            let indicator = if j == target { S::one() } else { S::zero() };
            d[(pos, j)] = (probs[(pos, j)] - indicator) * inv_k;
        }
    }
    d
}

/// Fraction of positions whose argmax equals the target.
pub fn masked_accuracy<S: Scalar>(probs: &Array2<S>, targets: &[usize], positions: &[usize]) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (&pos, &target) in positions.iter().zip(targets) {
        let row = probs.row(pos);
        let mut best = 0;
        let mut best_val = S::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if v > best_val {
                best_val = v;
                best = j;
            }
        }
        if best == target {
            hits += 1;
        }
    }
    hits as f64 / positions.len() as f64
}

// ---------------------------------------------------------------------------
// Speaker injection
// ---------------------------------------------------------------------------

pub struct SpeakerCache<S: Scalar> {
    spk_row: Array2<S>,
}

/// `H + broadcast(project(speaker_vec))`.
pub fn add_speaker<S: Scalar>(
    params: &Params<S>,
    h_out: &Array2<S>,
    speaker_vec: &Array1<S>,
) -> Result<(Array2<S>, SpeakerCache<S>)> {
    if speaker_vec.len() != params.decoder.speaker_proj.in_dim() {
        return Err(Error::Shape(format!(
            "speaker vector dim {} != configured {}",
            speaker_vec.len(),
            params.decoder.speaker_proj.in_dim()
        )));
    }
    let spk_row = speaker_vec.clone().insert_axis(Axis(0));
    let projected = params.decoder.speaker_proj.forward(&spk_row);
    let y = h_out + &projected.row(0);
    Ok((y, SpeakerCache { spk_row }))
}

pub fn add_speaker_backward<S: Scalar>(
    params: &Params<S>,
    cache: &SpeakerCache<S>,
    dy: &Array2<S>,
    grads: &mut Params<S>,
) -> Array2<S> {
    let d_proj = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let _ = params.decoder.speaker_proj.backward(
        &cache.spk_row,
        &d_proj,
        &mut grads.decoder.speaker_proj,
    );
    dy.clone()
}

// ---------------------------------------------------------------------------
// Attention maps
// ---------------------------------------------------------------------------

/// Decoder cross-attention probabilities: `weights[layer][head]` of shape
/// `T_out x N_in`, each row a distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<S: Scalar> {
    pub weights: Vec<Vec<Array2<S>>>,
}

impl<S: Scalar> AttentionMap<S> {
    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_heads(&self) -> usize {
        self.weights.first().map(|l| l.len()).unwrap_or(0)
    }

    /// `(T_out, N_in)` of the maps.
    pub fn io_shape(&self) -> (usize, usize) {
        let m = &self.weights[0][0];
        (m.nrows(), m.ncols())
    }

    /// Rows must be non-negative and sum to one within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for layer in &self.weights {
            for head in layer {
                for row in head.rows() {
                    let sum = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
                    if (sum - 1.0).abs() > tol {
                        return Err(Error::Evaluation(format!(
                            "attention row sums to {sum}, outside 1 +- {tol}"
                        )));
                    }
                    if row.iter().any(|&v| v < S::zero()) {
                        return Err(Error::Evaluation("negative attention weight".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(layers, heads, T_out, N_in)` tuple for diagnostics sidecars.
pub fn attention_shape<S: Scalar>(map: &AttentionMap<S>) -> (usize, usize, usize, usize) {
    let (t, n) = map.io_shape();
    (map.n_layers(), map.n_heads(), t, n)
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

pub struct DecBlockCache<S: Scalar> {
    ln1: LayerNormCache<S>,
    self_mha: MhaCache<S>,
    ln2: LayerNormCache<S>,
    cross_mha: MhaCache<S>,
    ln3: LayerNormCache<S>,
    ffn: FfnCache<S>,
}

pub struct DecodeCache<S: Scalar> {
    h_enc: Array2<S>,
    y_shifted: Array2<S>,
    blocks: Vec<DecBlockCache<S>>,
    final_ln: LayerNormCache<S>,
    x_final: Array2<S>,
    /// Per postnet layer: (conv cache, post-activation output).
    postnet: Vec<(Conv1dCache<S>, Array2<S>)>,
}

/// Teacher-forced decoder outputs.
#[derive(Clone, Debug)]
pub struct DecodeOut<S: Scalar> {
    pub y_pre: Array2<S>,
    pub y_post: Array2<S>,
    pub stop_logits: Array1<S>,
    pub attn: AttentionMap<S>,
}

fn dec_block_forward<S: Scalar>(
    block: &DecoderBlock<S>,
    x: &Array2<S>,
    h_enc: &Array2<S>,
    ctx: &mut ForwardCtx<'_, S>,
) -> (Array2<S>, DecBlockCache<S>) {
    let (normed1, ln1) = block.ln1.forward(x);
    let (sa, self_mha) =
        block
            .self_attn
            .forward(&normed1, &normed1, AttnMask::Causal, ctx.dropout, ctx.rng());
    let x1 = x + &sa;
    let (normed2, ln2) = block.ln2.forward(&x1);
    let (ca, cross_mha) =
        block
            .cross_attn
            .forward(&normed2, h_enc, AttnMask::Full, ctx.dropout, ctx.rng());
    let x2 = &x1 + &ca;
    let (normed3, ln3) = block.ln3.forward(&x2);
    let (ff, ffn) = block.ffn.forward(&normed3, ctx.dropout, ctx.rng());
    let y = &x2 + &ff;
    (
        y,
        DecBlockCache {
            ln1,
            self_mha,
            ln2,
            cross_mha,
            ln3,
            ffn,
        },
    )
}

fn dec_block_backward<S: Scalar>(
    block: &DecoderBlock<S>,
    cache: &DecBlockCache<S>,
    dy: &Array2<S>,
    d_cross_attn: Option<&[Array2<S>]>,
    grad: &mut DecoderBlock<S>,
    dh_enc: &mut Array2<S>,
) -> Array2<S> {
    let dnormed3 = block.ffn.backward(&cache.ffn, dy, &mut grad.ffn);
    let dx2 = dy + &block.ln3.backward(&cache.ln3, &dnormed3, &mut grad.ln3);
    let (dnormed2, denc) = block.cross_attn.backward(
        &cache.cross_mha,
        &dx2,
        d_cross_attn,
        &mut grad.cross_attn,
    );
    *dh_enc = &*dh_enc + &denc;
    let dx1 = &dx2 + &block.ln2.backward(&cache.ln2, &dnormed2, &mut grad.ln2);
    let (dq, dkv) = block
        .self_attn
        .backward(&cache.self_mha, &dx1, None, &mut grad.self_attn);
    let dnormed1 = dq + dkv;
    &dx1 + &block.ln1.backward(&cache.ln1, &dnormed1, &mut grad.ln1)
}

/// Teacher-forced decode: causal self-attention over the shifted reference
/// frames (a zero frame is prepended), cross-attention over the encoder
/// output, postnet residual refinement, and a scalar stop head per step.
pub fn decode_teacher_forced<S: Scalar>(
    params: &Params<S>,
    h_enc: &Array2<S>,
    y_ref: &Array2<S>,
    ctx: &mut ForwardCtx<'_, S>,
) -> Result<(DecodeOut<S>, DecodeCache<S>)> {
    let t = y_ref.nrows();
    if t == 0 {
        return Err(Error::Shape("teacher forcing needs at least one frame".into()));
    }
    if y_ref.ncols() != params.dims.feature_dim {
        return Err(Error::Shape(format!(
            "feature dim {} != configured {}",
            y_ref.ncols(),
            params.dims.feature_dim
        )));
    }
    let mut y_shifted = Array2::zeros((t, y_ref.ncols()));
    if t > 1 {
        y_shifted
            .slice_mut(nd_s![1.., ..])
            .assign(&y_ref.slice(nd_s![..t - 1, ..]));
    }
    let (out, cache) = decode_frames(params, h_enc, &y_shifted, ctx)?;
    Ok((out, cache))
}

/// Shared decoder body over already-shifted input frames (row `t` of the
/// input is the frame emitted at step `t-1`; row 0 is the zero start frame).
pub fn decode_frames<S: Scalar>(
    params: &Params<S>,
    h_enc: &Array2<S>,
    y_shifted: &Array2<S>,
    ctx: &mut ForwardCtx<'_, S>,
) -> Result<(DecodeOut<S>, DecodeCache<S>)> {
    let t = y_shifted.nrows();
    let d = params.dims.d;
    let pe = sinusoidal_pe::<S>(t, d);
    let mut x = params.decoder.frame_proj.forward(y_shifted) + &pe;
    let mut blocks = Vec::with_capacity(params.decoder.blocks.len());
    for block in &params.decoder.blocks {
        let (next, cache) = dec_block_forward(block, &x, h_enc, ctx);
        blocks.push(cache);
        x = next;
    }
    let (x_final, final_ln) = params.decoder.final_ln.forward(&x);
    let y_pre = params.decoder.feat_out.forward(&x_final);
    let stop_logits = params.decoder.stop_head.forward(&x_final).column(0).to_owned();

    let mut postnet_caches = Vec::with_capacity(params.decoder.postnet.len());
    let n_post = params.decoder.postnet.len();
    let mut z = y_pre.clone();
    for (i, conv) in params.decoder.postnet.iter().enumerate() {
        let (c, conv_cache) = conv.forward(&z);
        z = if i + 1 < n_post { c.mapv(|v| v.tanh()) } else { c };
        postnet_caches.push((conv_cache, z.clone()));
    }
    let y_post = if n_post == 0 { y_pre.clone() } else { &y_pre + &z };

    let attn = AttentionMap {
        weights: blocks
            .iter()
            .map(|b| b.cross_mha.probs.clone())
            .collect(),
    };
    Ok((
        DecodeOut {
            y_pre: y_pre.clone(),
            y_post,
            stop_logits,
            attn,
        },
        DecodeCache {
            h_enc: h_enc.clone(),
            y_shifted: y_shifted.clone(),
            blocks,
            final_ln,
            x_final,
            postnet: postnet_caches,
        },
    ))
}

/// Upstream gradients for [`decode_backward`].
pub struct DecodeGrads<S: Scalar> {
    pub d_y_pre: Array2<S>,
    pub d_y_post: Array2<S>,
    pub d_stop: Array1<S>,
    /// Per layer, per head, gradient on the cross-attention probabilities.
    pub d_attn: Option<Vec<Vec<Array2<S>>>>,
}

/// Backward through the decoder; returns the gradient on the encoder output.
pub fn decode_backward<S: Scalar>(
    params: &Params<S>,
    cache: &DecodeCache<S>,
    d: &DecodeGrads<S>,
    grads: &mut Params<S>,
) -> Array2<S> {
    let n_post = params.decoder.postnet.len();
    let mut d_y_pre = d.d_y_pre.clone();
    if n_post == 0 {
        d_y_pre = &d_y_pre + &d.d_y_post;
    } else {
        // y_post = y_pre + z_last
        d_y_pre = &d_y_pre + &d.d_y_post;
        let mut dz = d.d_y_post.clone();
        for i in (0..n_post).rev() {
            let (conv_cache, post_act) = &cache.postnet[i];
            let dc = if i + 1 < n_post {
                // z = tanh(c): dc = dz * (1 - z^2)
                let mut dc = dz.clone();
                dc.zip_mut_with(post_act, |g, &zv| *g = *g * (S::one() - zv * zv));
                dc
            } else {
                dz.clone()
            };
            dz = params.decoder.postnet[i].backward(
                conv_cache,
                &dc,
                &mut grads.decoder.postnet[i],
            );
        }
        d_y_pre = &d_y_pre + &dz;
    }

    let d_stop_col = d.d_stop.clone().insert_axis(Axis(1));
    let dx_from_stop = params.decoder.stop_head.backward(
        &cache.x_final,
        &d_stop_col,
        &mut grads.decoder.stop_head,
    );
    let dx_from_feat =
        params
            .decoder
            .feat_out
            .backward(&cache.x_final, &d_y_pre, &mut grads.decoder.feat_out);
    let dx_final = dx_from_stop + dx_from_feat;
    let mut dx = params
        .decoder
        .final_ln
        .backward(&cache.final_ln, &dx_final, &mut grads.decoder.final_ln);

    let mut dh_enc = Array2::zeros(cache.h_enc.raw_dim());
    for (i, block) in params.decoder.blocks.iter().enumerate().rev() {
        let d_cross = d.d_attn.as_ref().map(|a| a[i].as_slice());
        dx = dec_block_backward(
            block,
            &cache.blocks[i],
            &dx,
            d_cross,
            &mut grads.decoder.blocks[i],
            &mut dh_enc,
        );
    }
    let _ = params.decoder.frame_proj.backward(
        &cache.y_shifted,
        &dx,
        &mut grads.decoder.frame_proj,
    );
    dh_enc
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Penalty matrix `W[t, n] = 1 - exp(-(n/N - t/T)^2 / (2 g^2))`.
pub fn guided_attention_weight_matrix<S: Scalar>(t_len: usize, n_len: usize, g: f64) -> Array2<S> {
    Array2::from_shape_fn((t_len, n_len), |(t, n)| {
        let diff = n as f64 / n_len as f64 - t as f64 / t_len as f64;
        s(1.0 - (-diff * diff / (2.0 * g * g)).exp())
    })
}

/// Mean over all layer-head maps of `(1/T) sum A[t, n] W[t, n]`.
pub fn guided_attention_loss<S: Scalar>(attn: &AttentionMap<S>, g: f64) -> S {
    let (t_len, n_len) = attn.io_shape();
    let w = guided_attention_weight_matrix::<S>(t_len, n_len, g);
    let mut total = S::zero();
    let mut count = 0usize;
    for layer in &attn.weights {
        for head in layer {
            total = total + (head * &w).sum() / s_usize::<S>(t_len);
            count += 1;
        }
    }
    total / s_usize::<S>(count.max(1))
}

fn guided_attention_backward<S: Scalar>(
    attn: &AttentionMap<S>,
    g: f64,
    weight: S,
) -> Vec<Vec<Array2<S>>> {
    let (t_len, n_len) = attn.io_shape();
    let w = guided_attention_weight_matrix::<S>(t_len, n_len, g);
    let n_maps = attn.n_layers() * attn.n_heads();
    let scale = weight / (s_usize::<S>(n_maps.max(1)) * s_usize::<S>(t_len));
    attn.weights
        .iter()
        .map(|layer| layer.iter().map(|_| w.mapv(|v| v * scale)).collect())
        .collect()
}

/// Loss weights for the composite TTS objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Weight of each L1 term (pre- and post-postnet).
    pub l1: f64,
    /// Weight of the stop-token BCE.
    pub stop: f64,
    /// Extra weight on the positive stop frame (class imbalance).
    pub stop_pos_weight: f64,
    /// Weight of the guided attention penalty.
    pub guided: f64,
    /// Width of the diagonal corridor.
    pub guided_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            stop: 1.0,
            stop_pos_weight: 5.0,
            guided: 1.0,
            guided_g: 0.2,
        }
    }
}

/// Per-component values of one TTS loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TtsLossBreakdown {
    pub l1_pre: f64,
    pub l1_post: f64,
    pub stop_bce: f64,
    pub guided_attention: f64,
    pub total: f64,
}

fn l1_mean<S: Scalar>(pred: &Array2<S>, target: &Array2<S>) -> S {
    let n = s_usize::<S>(pred.len());
    pred.iter()
        .zip(target.iter())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<S>()
        / n
}

fn l1_backward<S: Scalar>(pred: &Array2<S>, target: &Array2<S>, weight: S) -> Array2<S> {
    let scale = weight / s_usize::<S>(pred.len());
    let mut d = Array2::zeros(pred.raw_dim());
    for ((dv, &p), &t) in d.iter_mut().zip(pred.iter()).zip(target.iter()) {
        *dv = if p > t {
            scale
        } else if p < t {
            -scale
        } else {
            S::zero()
        };
    }
    d
}

/// Composite teacher-forcing objective:
/// `w_l1 (L1_pre + L1_post) + w_stop BCE(stop) + w_ga GuidedAttention`.
pub fn tts_loss<S: Scalar>(
    out: &DecodeOut<S>,
    y_ref: &Array2<S>,
    stop_targets: &Array1<S>,
    weights: &LossWeights,
) -> (S, TtsLossBreakdown) {
    let l1_pre = l1_mean(&out.y_pre, y_ref);
    let l1_post = l1_mean(&out.y_post, y_ref);
    let t = s_usize::<S>(out.stop_logits.len());
    let mut stop = S::zero();
    for (&logit, &target) in out.stop_logits.iter().zip(stop_targets.iter()) {
        let w = S::one() + s::<S>(weights.stop_pos_weight - 1.0) * target;
        stop = stop + w * bce_with_logits(logit, target);
    }
    stop = stop / t;
    let ga = guided_attention_loss(&out.attn, weights.guided_g);
    let total = s::<S>(weights.l1) * (l1_pre + l1_post)
        + s::<S>(weights.stop) * stop
        + s::<S>(weights.guided) * ga;
    let breakdown = TtsLossBreakdown {
        l1_pre: l1_pre.to_f64().unwrap_or(f64::NAN),
        l1_post: l1_post.to_f64().unwrap_or(f64::NAN),
        stop_bce: stop.to_f64().unwrap_or(f64::NAN),
        guided_attention: ga.to_f64().unwrap_or(f64::NAN),
        total: total.to_f64().unwrap_or(f64::NAN),
    };
    (total, breakdown)
}

/// Gradients of [`tts_loss`] with respect to the decoder outputs.
pub fn tts_loss_backward<S: Scalar>(
    out: &DecodeOut<S>,
    y_ref: &Array2<S>,
    stop_targets: &Array1<S>,
    weights: &LossWeights,
) -> DecodeGrads<S> {
    let w_l1 = s::<S>(weights.l1);
    let d_y_pre = l1_backward(&out.y_pre, y_ref, w_l1);
    let d_y_post = l1_backward(&out.y_post, y_ref, w_l1);
    let t = s_usize::<S>(out.stop_logits.len());
    let mut d_stop = Array1::zeros(out.stop_logits.len());
    for (i, (&logit, &target)) in out.stop_logits.iter().zip(stop_targets.iter()).enumerate() {
        let w = S::one() + s::<S>(weights.stop_pos_weight - 1.0) * target;
        d_stop[i] = s::<S>(weights.stop) * w * bce_with_logits_backward(logit, target) / t;
    }
    let d_attn = if weights.guided > 0.0 {
        Some(guided_attention_backward(
            &out.attn,
            weights.guided_g,
            s::<S>(weights.guided),
        ))
    } else {
        None
    };
    DecodeGrads {
        d_y_pre,
        d_y_post,
        d_stop,
        d_attn,
    }
}

/// Stop targets for a reference of `t` frames: zero everywhere, one at the
/// final frame.
pub fn stop_targets<S: Scalar>(t: usize) -> Array1<S> {
    let mut targets = Array1::zeros(t);
    if t > 0 {
        targets[t - 1] = S::one();
    }
    targets
}
