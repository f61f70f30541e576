//! The differentiable network and its named parameter groups.
//!
//! Parameters partition into six groups: token embedding (T), language
//! embedding (L), bottleneck (B), encoder (E), prediction net (P), and
//! decoder (D). The partition is total by construction: every tensor name
//! starts with exactly one group prefix, which is what freeze policies,
//! group hashing, and checkpoints key on.

mod checkpoint;
mod forward;
pub mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Provenance};
pub use forward::{
    add_speaker, add_speaker_backward, attention_shape, bottleneck_backward, bottleneck_forward,
    decode_backward, decode_frames, decode_teacher_forced, embed_language,
    embed_language_backward, embed_tokens, embed_tokens_backward, encode, encode_backward,
    guided_attention_loss,
    guided_attention_weight_matrix, masked_accuracy, mlm_loss, mlm_loss_backward, predict_backward,
    predict_tokens, stop_targets, tts_loss, tts_loss_backward, AttentionMap, BottleneckCache,
    DecodeCache, DecodeGrads, DecodeOut, EncodeCache, ForwardCtx, LossWeights, PredictCache,
    SpeakerCache, TtsLossBreakdown,
};

use crate::nn::{Conv1d, Ffn, LayerNorm, Linear, Mha};
use crate::rng::DetRng;
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2};

/// Bottleneck architecture between the summed embeddings and the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckVariant {
    /// Layer norm, down projection, ReLU, up projection, residual add.
    Residual,
    /// A single transformer encoder block.
    TransformerBlock,
    /// Identity (the ablation without a bottleneck).
    None,
}

/// Widths and depths of the network.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub bottleneck_hidden: usize,
    pub vocab_size: usize,
    pub n_languages: usize,
    pub feature_dim: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub prediction_hidden: usize,
    pub speaker_dim: usize,
    pub bottleneck_variant: BottleneckVariant,
    pub use_language_id: bool,
    pub dropout: f64,
}

impl ModelDims {
    /// Desk-scale defaults sized so the full pipeline runs in minutes on CPU.
    pub fn desk(vocab_size: usize, n_languages: usize, feature_dim: usize, speaker_dim: usize) -> Self {
        ModelDims {
            d: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            bottleneck_hidden: 32,
            vocab_size,
            n_languages,
            feature_dim,
            postnet_layers: 3,
            postnet_kernel: 5,
            prediction_hidden: 64,
            speaker_dim,
            bottleneck_variant: BottleneckVariant::Residual,
            use_language_id: true,
            dropout: 0.1,
        }
    }

    /// Published-scale dimensions (selectable, far too slow for CPU tests).
    pub fn paper(vocab_size: usize, n_languages: usize, feature_dim: usize, speaker_dim: usize) -> Self {
        ModelDims {
            d: 512,
            heads: 8,
            encoder_blocks: 6,
            decoder_blocks: 6,
            bottleneck_hidden: 256,
            vocab_size,
            n_languages,
            feature_dim,
            postnet_layers: 5,
            postnet_kernel: 5,
            prediction_hidden: 512,
            speaker_dim,
            bottleneck_variant: BottleneckVariant::Residual,
            use_language_id: true,
            dropout: 0.1,
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        4 * self.d
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(crate::Error::Config(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("n_languages", self.n_languages),
            ("feature_dim", self.feature_dim),
            ("prediction_hidden", self.prediction_hidden),
            ("speaker_dim", self.speaker_dim),
            ("decoder_blocks", self.decoder_blocks),
        ] {
            if v == 0 {
                return Err(crate::Error::Config(format!("{name} must be positive")));
            }
        }
        if self.bottleneck_variant == BottleneckVariant::Residual && self.bottleneck_hidden == 0 {
            return Err(crate::Error::Config("bottleneck_hidden must be positive".into()));
        }
        if self.postnet_layers > 0 && self.postnet_kernel % 2 == 0 {
            return Err(crate::Error::Config("postnet kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(crate::Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<S: Scalar> {
    pub ln1: LayerNorm<S>,
    pub attn: Mha<S>,
    pub ln2: LayerNorm<S>,
    pub ffn: Ffn<S>,
}

impl<S: Scalar> EncoderBlock<S> {
    pub fn zeros(d: usize, heads: usize, ffn_hidden: usize) -> Self {
        EncoderBlock {
            ln1: LayerNorm::zeros(d),
            attn: Mha::zeros(d, heads),
            ln2: LayerNorm::zeros(d),
            ffn: Ffn::zeros(d, ffn_hidden),
        }
    }

    pub fn init(d: usize, heads: usize, ffn_hidden: usize, rng: &mut DetRng) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(d),
            attn: Mha::init(d, heads, rng),
            ln2: LayerNorm::new(d),
            ffn: Ffn::init(d, ffn_hidden, rng),
        }
    }
}

/// Pre-norm transformer decoder block with causal self- and cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<S: Scalar> {
    pub ln1: LayerNorm<S>,
    pub self_attn: Mha<S>,
    pub ln2: LayerNorm<S>,
    pub cross_attn: Mha<S>,
    pub ln3: LayerNorm<S>,
    pub ffn: Ffn<S>,
}

impl<S: Scalar> DecoderBlock<S> {
    pub fn zeros(d: usize, heads: usize, ffn_hidden: usize) -> Self {
        DecoderBlock {
            ln1: LayerNorm::zeros(d),
            self_attn: Mha::zeros(d, heads),
            ln2: LayerNorm::zeros(d),
            cross_attn: Mha::zeros(d, heads),
            ln3: LayerNorm::zeros(d),
            ffn: Ffn::zeros(d, ffn_hidden),
        }
    }

    pub fn init(d: usize, heads: usize, ffn_hidden: usize, rng: &mut DetRng) -> Self {
        DecoderBlock {
            ln1: LayerNorm::new(d),
            self_attn: Mha::init(d, heads, rng),
            ln2: LayerNorm::new(d),
            cross_attn: Mha::init(d, heads, rng),
            ln3: LayerNorm::new(d),
            ffn: Ffn::init(d, ffn_hidden, rng),
        }
    }
}

/// Bottleneck parameters, matching [`BottleneckVariant`].
#[derive(Clone, Debug, PartialEq)]
pub enum Bottleneck<S: Scalar> {
    Residual {
        ln: LayerNorm<S>,
        down: Linear<S>,
        up: Linear<S>,
    },
    Transformer(Box<EncoderBlock<S>>),
    Identity,
}

/// Linear -> GELU -> LayerNorm -> Linear token prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionNet<S: Scalar> {
    pub lin1: Linear<S>,
    pub ln: LayerNorm<S>,
    pub lin2: Linear<S>,
}

/// Decoder stack, output heads, postnet, and speaker projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<S: Scalar> {
    pub speaker_proj: Linear<S>,
    pub frame_proj: Linear<S>,
    pub blocks: Vec<DecoderBlock<S>>,
    pub final_ln: LayerNorm<S>,
    pub feat_out: Linear<S>,
    pub stop_head: Linear<S>,
    pub postnet: Vec<Conv1d<S>>,
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S: Scalar> {
    pub dims: ModelDims,
    pub token_embedding: Array2<S>,
    pub language_embedding: Array2<S>,
    pub bottleneck: Bottleneck<S>,
    pub encoder_blocks: Vec<EncoderBlock<S>>,
    pub encoder_final_ln: LayerNorm<S>,
    pub prediction: PredictionNet<S>,
    pub decoder: Decoder<S>,
}

/// The six named parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    TokenEmbedding,
    LanguageEmbedding,
    Bottleneck,
    Encoder,
    Prediction,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::TokenEmbedding,
        ParamGroup::LanguageEmbedding,
        ParamGroup::Bottleneck,
        ParamGroup::Encoder,
        ParamGroup::Prediction,
        ParamGroup::Decoder,
    ];

    pub fn prefix(&self) -> &'static str {
        match self {
            ParamGroup::TokenEmbedding => "token_embedding",
            ParamGroup::LanguageEmbedding => "language_embedding",
            ParamGroup::Bottleneck => "bottleneck",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Prediction => "prediction",
            ParamGroup::Decoder => "decoder",
        }
    }

    /// Group of a parameter name. The name space is prefix-partitioned, so
    /// every parameter belongs to exactly one group.
    pub fn of(name: &str) -> ParamGroup {
        let head = name.split('.').next().unwrap_or(name);
        match head {
            "token_embedding" => ParamGroup::TokenEmbedding,
            "language_embedding" => ParamGroup::LanguageEmbedding,
            "bottleneck" => ParamGroup::Bottleneck,
            "encoder" => ParamGroup::Encoder,
            "prediction" => ParamGroup::Prediction,
            "decoder" => ParamGroup::Decoder,
            other => panic!("parameter `{other}` belongs to no group"),
        }
    }
}

/// Borrowed view of one parameter tensor.
pub enum TensorRef<'a, S: Scalar> {
    M(&'a Array2<S>),
    V(&'a Array1<S>),
}

impl<S: Scalar> TensorRef<'_, S> {
    pub fn len(&self) -> usize {
        match self {
            TensorRef::M(m) => m.len(),
            TensorRef::V(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &S> + '_> {
        match self {
            TensorRef::M(m) => Box::new(m.iter()),
            TensorRef::V(v) => Box::new(v.iter()),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::M(m) => m.shape().to_vec(),
            TensorRef::V(v) => vec![v.len()],
        }
    }
}

/// Mutable view of one parameter tensor.
pub enum TensorMut<'a, S: Scalar> {
    M(&'a mut Array2<S>),
    V(&'a mut Array1<S>),
}

impl<S: Scalar> TensorMut<'_, S> {
    pub fn len(&self) -> usize {
        match self {
            TensorMut::M(m) => m.len(),
            TensorMut::V(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_mut(&mut self) -> Box<dyn Iterator<Item = &mut S> + '_> {
        match self {
            TensorMut::M(m) => Box::new(m.iter_mut()),
            TensorMut::V(v) => Box::new(v.iter_mut()),
        }
    }
}

fn visit_linear<'a, S: Scalar>(
    prefix: &str,
    lin: &'a Linear<S>,
    f: &mut dyn FnMut(String, TensorRef<'a, S>),
) {
    f(format!("{prefix}.w"), TensorRef::M(&lin.w));
    f(format!("{prefix}.b"), TensorRef::V(&lin.b));
}

fn visit_linear_mut<S: Scalar>(
    prefix: &str,
    lin: &mut Linear<S>,
    f: &mut dyn FnMut(String, TensorMut<'_, S>),
) {
    f(format!("{prefix}.w"), TensorMut::M(&mut lin.w));
    f(format!("{prefix}.b"), TensorMut::V(&mut lin.b));
}

fn visit_ln<'a, S: Scalar>(
    prefix: &str,
    ln: &'a LayerNorm<S>,
    f: &mut dyn FnMut(String, TensorRef<'a, S>),
) {
    f(format!("{prefix}.g"), TensorRef::V(&ln.gamma));
    f(format!("{prefix}.beta"), TensorRef::V(&ln.beta));
}

fn visit_ln_mut<S: Scalar>(
    prefix: &str,
    ln: &mut LayerNorm<S>,
    f: &mut dyn FnMut(String, TensorMut<'_, S>),
) {
    f(format!("{prefix}.g"), TensorMut::V(&mut ln.gamma));
    f(format!("{prefix}.beta"), TensorMut::V(&mut ln.beta));
}

fn visit_mha<'a, S: Scalar>(
    prefix: &str,
    mha: &'a Mha<S>,
    f: &mut dyn FnMut(String, TensorRef<'a, S>),
) {
    visit_linear(&format!("{prefix}.wq"), &mha.wq, f);
    visit_linear(&format!("{prefix}.wk"), &mha.wk, f);
    visit_linear(&format!("{prefix}.wv"), &mha.wv, f);
    visit_linear(&format!("{prefix}.wo"), &mha.wo, f);
}

fn visit_mha_mut<S: Scalar>(
    prefix: &str,
    mha: &mut Mha<S>,
    f: &mut dyn FnMut(String, TensorMut<'_, S>),
) {
    visit_linear_mut(&format!("{prefix}.wq"), &mut mha.wq, f);
    visit_linear_mut(&format!("{prefix}.wk"), &mut mha.wk, f);
    visit_linear_mut(&format!("{prefix}.wv"), &mut mha.wv, f);
    visit_linear_mut(&format!("{prefix}.wo"), &mut mha.wo, f);
}

fn visit_ffn<'a, S: Scalar>(
    prefix: &str,
    ffn: &'a Ffn<S>,
    f: &mut dyn FnMut(String, TensorRef<'a, S>),
) {
    visit_linear(&format!("{prefix}.w1"), &ffn.w1, f);
    visit_linear(&format!("{prefix}.w2"), &ffn.w2, f);
}

fn visit_ffn_mut<S: Scalar>(
    prefix: &str,
    ffn: &mut Ffn<S>,
    f: &mut dyn FnMut(String, TensorMut<'_, S>),
) {
    visit_linear_mut(&format!("{prefix}.w1"), &mut ffn.w1, f);
    visit_linear_mut(&format!("{prefix}.w2"), &mut ffn.w2, f);
}

fn visit_enc_block<'a, S: Scalar>(
    prefix: &str,
    b: &'a EncoderBlock<S>,
    f: &mut dyn FnMut(String, TensorRef<'a, S>),
) {
    visit_ln(&format!("{prefix}.ln1"), &b.ln1, f);
    visit_mha(&format!("{prefix}.attn"), &b.attn, f);
    visit_ln(&format!("{prefix}.ln2"), &b.ln2, f);
    visit_ffn(&format!("{prefix}.ffn"), &b.ffn, f);
}

fn visit_enc_block_mut<S: Scalar>(
    prefix: &str,
    b: &mut EncoderBlock<S>,
    f: &mut dyn FnMut(String, TensorMut<'_, S>),
) {
    visit_ln_mut(&format!("{prefix}.ln1"), &mut b.ln1, f);
    visit_mha_mut(&format!("{prefix}.attn"), &mut b.attn, f);
    visit_ln_mut(&format!("{prefix}.ln2"), &mut b.ln2, f);
    visit_ffn_mut(&format!("{prefix}.ffn"), &mut b.ffn, f);
}

fn visit_dec_block<'a, S: Scalar>(
    prefix: &str,
    b: &'a DecoderBlock<S>,
    f: &mut dyn FnMut(String, TensorRef<'a, S>),
) {
    visit_ln(&format!("{prefix}.ln1"), &b.ln1, f);
    visit_mha(&format!("{prefix}.self_attn"), &b.self_attn, f);
    visit_ln(&format!("{prefix}.ln2"), &b.ln2, f);
    visit_mha(&format!("{prefix}.cross_attn"), &b.cross_attn, f);
    visit_ln(&format!("{prefix}.ln3"), &b.ln3, f);
    visit_ffn(&format!("{prefix}.ffn"), &b.ffn, f);
}

fn visit_dec_block_mut<S: Scalar>(
    prefix: &str,
    b: &mut DecoderBlock<S>,
    f: &mut dyn FnMut(String, TensorMut<'_, S>),
) {
    visit_ln_mut(&format!("{prefix}.ln1"), &mut b.ln1, f);
    visit_mha_mut(&format!("{prefix}.self_attn"), &mut b.self_attn, f);
    visit_ln_mut(&format!("{prefix}.ln2"), &mut b.ln2, f);
    visit_mha_mut(&format!("{prefix}.cross_attn"), &mut b.cross_attn, f);
    visit_ln_mut(&format!("{prefix}.ln3"), &mut b.ln3, f);
    visit_ffn_mut(&format!("{prefix}.ffn"), &mut b.ffn, f);
}

impl<S: Scalar> Params<S> {
    /// Random initialization; deterministic under `seed`.
    pub fn init(dims: &ModelDims, seed: u64) -> crate::Result<Self> {
        dims.validate()?;
        let mut rng = DetRng::new(seed, "model.init");
        // Token embeddings start at unit scale so they are not drowned by
        // the unit-amplitude position encoding. Language embeddings start
        // near zero: distinctions between languages then grow only where the
        // data demands them, which is what lets a related unseen language
        // stay close to its seen relatives.
        let token_embedding =
            Array2::from_shape_fn((dims.vocab_size, dims.d), |_| s(rng.normal()));
        let language_embedding =
            Array2::from_shape_fn((dims.n_languages, dims.d), |_| s(rng.normal() * 0.1));
        let bottleneck = match dims.bottleneck_variant {
            BottleneckVariant::Residual => Bottleneck::Residual {
                ln: LayerNorm::new(dims.d),
                down: Linear::init(dims.d, dims.bottleneck_hidden, &mut rng),
                up: Linear::init(dims.bottleneck_hidden, dims.d, &mut rng),
            },
            BottleneckVariant::TransformerBlock => Bottleneck::Transformer(Box::new(
                EncoderBlock::init(dims.d, dims.heads, dims.ffn_hidden(), &mut rng),
            )),
            BottleneckVariant::None => Bottleneck::Identity,
        };
        let encoder_blocks = (0..dims.encoder_blocks)
            .map(|_| EncoderBlock::init(dims.d, dims.heads, dims.ffn_hidden(), &mut rng))
            .collect();
        let encoder_final_ln = LayerNorm::new(dims.d);
        let prediction = PredictionNet {
            lin1: Linear::init(dims.d, dims.prediction_hidden, &mut rng),
            ln: LayerNorm::new(dims.prediction_hidden),
            lin2: Linear::init(dims.prediction_hidden, dims.vocab_size, &mut rng),
        };
        let decoder = Decoder {
            speaker_proj: Linear::init(dims.speaker_dim, dims.d, &mut rng),
            frame_proj: Linear::init(dims.feature_dim, dims.d, &mut rng),
            blocks: (0..dims.decoder_blocks)
                .map(|_| DecoderBlock::init(dims.d, dims.heads, dims.ffn_hidden(), &mut rng))
                .collect(),
            final_ln: LayerNorm::new(dims.d),
            feat_out: Linear::init(dims.d, dims.feature_dim, &mut rng),
            stop_head: Linear::init(dims.d, 1, &mut rng),
            postnet: (0..dims.postnet_layers)
                .map(|_| Conv1d::init(dims.feature_dim, dims.feature_dim, dims.postnet_kernel, &mut rng))
                .collect(),
        };
        Ok(Params {
            dims: *dims,
            token_embedding,
            language_embedding,
            bottleneck,
            encoder_blocks,
            encoder_final_ln,
            prediction,
            decoder,
        })
    }

    /// Same structure with every tensor zeroed (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_param_mut(&mut |_, mut t| {
            for v in t.iter_mut() {
                *v = S::zero();
            }
        });
        out
    }

    /// Visit every parameter tensor in a fixed, deterministic order.
    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(&str, TensorRef<'a, S>)) {
        let mut g = |name: String, t: TensorRef<'a, S>| f(&name, t);
        g("token_embedding".into(), TensorRef::M(&self.token_embedding));
        g(
            "language_embedding".into(),
            TensorRef::M(&self.language_embedding),
        );
        match &self.bottleneck {
            Bottleneck::Residual { ln, down, up } => {
                visit_ln("bottleneck.res.ln", ln, &mut g);
                visit_linear("bottleneck.res.down", down, &mut g);
                visit_linear("bottleneck.res.up", up, &mut g);
            }
            Bottleneck::Transformer(b) => visit_enc_block("bottleneck.tf", b, &mut g),
            Bottleneck::Identity => {}
        }
        for (i, b) in self.encoder_blocks.iter().enumerate() {
            visit_enc_block(&format!("encoder.block{i}"), b, &mut g);
        }
        visit_ln("encoder.final_ln", &self.encoder_final_ln, &mut g);
        visit_linear("prediction.lin1", &self.prediction.lin1, &mut g);
        visit_ln("prediction.ln", &self.prediction.ln, &mut g);
        visit_linear("prediction.lin2", &self.prediction.lin2, &mut g);
        visit_linear("decoder.speaker_proj", &self.decoder.speaker_proj, &mut g);
        visit_linear("decoder.frame_proj", &self.decoder.frame_proj, &mut g);
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            visit_dec_block(&format!("decoder.block{i}"), b, &mut g);
        }
        visit_ln("decoder.final_ln", &self.decoder.final_ln, &mut g);
        visit_linear("decoder.feat_out", &self.decoder.feat_out, &mut g);
        visit_linear("decoder.stop_head", &self.decoder.stop_head, &mut g);
        for (i, conv) in self.decoder.postnet.iter().enumerate() {
            for (k, tap) in conv.taps.iter().enumerate() {
                g(
                    format!("decoder.postnet{i}.tap{k}"),
                    TensorRef::M(tap),
                );
            }
            g(format!("decoder.postnet{i}.b"), TensorRef::V(&conv.b));
        }
    }

    /// Mutable visitation in the same order as [`Params::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, TensorMut<'_, S>)) {
        let mut g = |name: String, t: TensorMut<'_, S>| f(&name, t);
        g(
            "token_embedding".into(),
            TensorMut::M(&mut self.token_embedding),
        );
        g(
            "language_embedding".into(),
            TensorMut::M(&mut self.language_embedding),
        );
        match &mut self.bottleneck {
            Bottleneck::Residual { ln, down, up } => {
                visit_ln_mut("bottleneck.res.ln", ln, &mut g);
                visit_linear_mut("bottleneck.res.down", down, &mut g);
                visit_linear_mut("bottleneck.res.up", up, &mut g);
            }
            Bottleneck::Transformer(b) => visit_enc_block_mut("bottleneck.tf", b, &mut g),
            Bottleneck::Identity => {}
        }
        for (i, b) in self.encoder_blocks.iter_mut().enumerate() {
            visit_enc_block_mut(&format!("encoder.block{i}"), b, &mut g);
        }
        visit_ln_mut("encoder.final_ln", &mut self.encoder_final_ln, &mut g);
        visit_linear_mut("prediction.lin1", &mut self.prediction.lin1, &mut g);
        visit_ln_mut("prediction.ln", &mut self.prediction.ln, &mut g);
        visit_linear_mut("prediction.lin2", &mut self.prediction.lin2, &mut g);
        visit_linear_mut(
            "decoder.speaker_proj",
            &mut self.decoder.speaker_proj,
            &mut g,
        );
        visit_linear_mut("decoder.frame_proj", &mut self.decoder.frame_proj, &mut g);
        for (i, b) in self.decoder.blocks.iter_mut().enumerate() {
            visit_dec_block_mut(&format!("decoder.block{i}"), b, &mut g);
        }
        visit_ln_mut("decoder.final_ln", &mut self.decoder.final_ln, &mut g);
        visit_linear_mut("decoder.feat_out", &mut self.decoder.feat_out, &mut g);
        visit_linear_mut("decoder.stop_head", &mut self.decoder.stop_head, &mut g);
        for (i, conv) in self.decoder.postnet.iter_mut().enumerate() {
            for (k, tap) in conv.taps.iter_mut().enumerate() {
                g(format!("decoder.postnet{i}.tap{k}"), TensorMut::M(tap));
            }
            g(format!("decoder.postnet{i}.b"), TensorMut::V(&mut conv.b));
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.len());
        n
    }

    /// Names of all parameters, in visitation order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// SHA-256 over a group's tensors (names, shapes, and exact float bytes).
    pub fn group_hash(&self, group: ParamGroup) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.for_each_param(&mut |name, t| {
            if ParamGroup::of(name) != group {
                return;
            }
            hasher.update(name.as_bytes());
            for dim in t.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for v in t.iter() {
                hasher.update(v.to_f64().expect("finite scalar").to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }

    /// All six group hashes at once.
    pub fn group_hashes(&self) -> std::collections::BTreeMap<ParamGroup, String> {
        ParamGroup::ALL
            .iter()
            .map(|&g| (g, self.group_hash(g)))
            .collect()
    }

    /// Copy every tensor of `group` from `source` (shapes must match).
    pub fn copy_group_from(&mut self, source: &Params<S>, group: ParamGroup) -> crate::Result<()> {
        let mut values: std::collections::BTreeMap<String, Vec<S>> = Default::default();
        source.for_each_param(&mut |name, t| {
            if ParamGroup::of(name) == group {
                values.insert(name.to_string(), t.iter().copied().collect());
            }
        });
        let mut err = None;
        self.for_each_param_mut(&mut |name, mut t| {
            if ParamGroup::of(name) != group {
                return;
            }
            match values.remove(name) {
                Some(src) if src.len() == t.len() => {
                    for (dst, v) in t.iter_mut().zip(src) {
                        *dst = v;
                    }
                }
                Some(_) => err = Some(format!("shape mismatch for `{name}`")),
                None => err = Some(format!("source missing `{name}`")),
            }
        });
        if let Some(msg) = err {
            return Err(crate::Error::Checkpoint(msg));
        }
        if !values.is_empty() {
            return Err(crate::Error::Checkpoint(format!(
                "destination missing parameters: {:?}",
                values.keys().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}
