//! Autoregressive synthesis.
//!
//! Decoding starts from a zero frame, emits one feature frame and one stop
//! probability per step, and terminates when the stop probability exceeds the
//! threshold or the frame cap is hit. The postnet refines the full sequence
//! at the end. The synthesis mode (seen / text-seen zero-shot / fully
//! zero-shot) is classified from the model's recorded data exposure, never
//! asserted by the caller.

use crate::corpus::{LanguageId, LanguageRegistry, PairedUtterance, SpeakerTable, SynthesisMode};
use crate::error::{Error, Result};
use crate::model::{
    add_speaker, bottleneck_forward, decode_frames, embed_language, embed_tokens, encode,
    AttentionMap, ForwardCtx, Params, Provenance,
};
use crate::nn::sigmoid;
use crate::tokenizer::{tokenize_bytes, tokenize_symbols, SymbolTable, TokenType, Vocabulary};
use crate::Real;
use ndarray::{s as nd_s, Array1, Array2};
use std::collections::BTreeMap;

/// Where the speaker vector for a synthesis comes from.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SpeakerSource {
    /// Mean speaker vector of the target language's evaluation data.
    TargetLanguageMean,
    /// Mean speaker vector of another (typically seen) language.
    CrossLingual(LanguageId),
    /// A caller-supplied vector.
    Explicit(Vec<Real>),
}

impl SpeakerSource {
    pub fn label(&self, registry: &LanguageRegistry) -> String {
        match self {
            SpeakerSource::TargetLanguageMean => "target_mean".into(),
            SpeakerSource::CrossLingual(lang) => {
                format!("cross:{}", registry.code(*lang).unwrap_or("?"))
            }
            SpeakerSource::Explicit(_) => "explicit".into(),
        }
    }
}

/// One synthesis request.
#[derive(Clone, Debug)]
pub struct SynthesisRequest {
    pub text: String,
    pub language_id: LanguageId,
    pub speaker: SpeakerSource,
    pub max_frames: usize,
    pub stop_threshold: f64,
}

impl SynthesisRequest {
    pub fn validate(&self) -> Result<()> {
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be at least 1".into()));
        }
        if !(0.0 < self.stop_threshold && self.stop_threshold < 1.0) {
            return Err(Error::Config(format!(
                "stop_threshold {} outside (0, 1)",
                self.stop_threshold
            )));
        }
        Ok(())
    }
}

/// Synthesis output.
///
/// `features` carries the postnet-refined frames; `pre_features` the raw
/// decoder frames that were fed back autoregressively (diagnostics and
/// bitwise attention re-extraction need them).
#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub features: Array2<Real>,
    pub pre_features: Array2<Real>,
    pub stop_probs: Vec<Real>,
    pub attention: AttentionMap<Real>,
    pub mode: SynthesisMode,
    pub stopped_naturally: bool,
}

/// Classify a language against what the model actually saw in training.
pub fn classify_mode(provenance: &Provenance, language_id: LanguageId) -> SynthesisMode {
    if provenance.paired_on.contains(&language_id) {
        SynthesisMode::Seen
    } else if provenance.pretrained_on.contains(&language_id) {
        SynthesisMode::TextSeenZeroShot
    } else {
        SynthesisMode::FullyZeroShot
    }
}

/// Mean of a language's speaker vectors over a corpus slice, renormalized to
/// unit length. A zero mean (antipodal vectors) cannot be normalized and is
/// an error.
pub fn mean_speaker_vector(
    slice: &[PairedUtterance],
    speakers: &SpeakerTable,
    language_id: LanguageId,
) -> Result<Array1<Real>> {
    let mut sum: Option<Array1<Real>> = None;
    let mut count = 0usize;
    for utt in slice.iter().filter(|u| u.language_id == language_id) {
        let v = speakers.get(language_id, utt.speaker_id).ok_or_else(|| {
            Error::Evaluation(format!(
                "no speaker vector for language {language_id} speaker {}",
                utt.speaker_id
            ))
        })?;
        let v = Array1::from_vec(v.to_vec());
        sum = Some(match sum {
            None => v,
            Some(acc) => acc + v,
        });
        count += 1;
    }
    let sum = sum.ok_or_else(|| {
        Error::Evaluation(format!("no utterances for language {language_id} in slice"))
    })?;
    let mean = sum / count as Real;
    let norm = mean.iter().map(|v| v * v).sum::<Real>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Evaluation(
            "mean speaker vector has zero norm and cannot be normalized".into(),
        ));
    }
    Ok(mean / norm)
}

/// Resolve a [`SpeakerSource`] against the evaluation corpus.
pub fn resolve_speaker(
    source: &SpeakerSource,
    target_language: LanguageId,
    slice: &[PairedUtterance],
    speakers: &SpeakerTable,
) -> Result<Array1<Real>> {
    match source {
        SpeakerSource::TargetLanguageMean => mean_speaker_vector(slice, speakers, target_language),
        SpeakerSource::CrossLingual(lang) => mean_speaker_vector(slice, speakers, *lang),
        SpeakerSource::Explicit(v) => Ok(Array1::from_vec(v.clone())),
    }
}

/// Tokenize request text for the model's vocabulary type.
pub fn tokenize_request(
    text: &str,
    language_id: LanguageId,
    vocab: &Vocabulary,
    tables: Option<&BTreeMap<usize, SymbolTable>>,
) -> Result<Vec<usize>> {
    match vocab.token_type() {
        TokenType::Bytes => Ok(tokenize_bytes(text, vocab).ids),
        TokenType::Symbols => {
            let table = tables.and_then(|t| t.get(&language_id)).ok_or_else(|| {
                Error::Vocabulary(format!("no symbol table for language {language_id}"))
            })?;
            Ok(tokenize_symbols(text, table, vocab)?.ids)
        }
    }
}

/// Encode text and inject the speaker vector; the shared front half of
/// synthesis.
pub fn encode_for_synthesis(
    params: &Params<Real>,
    token_ids: &[usize],
    language_id: LanguageId,
    speaker_vec: &Array1<Real>,
) -> Result<Array2<Real>> {
    let mut ctx = ForwardCtx::<Real>::eval();
    let z = embed_tokens(token_ids, &params.token_embedding)?;
    let x0 = if params.dims.use_language_id {
        let e = embed_language(language_id, &params.language_embedding)?;
        &z + &e
    } else {
        z
    };
    let (h_in, _) = bottleneck_forward(params, &x0, &mut ctx);
    let pad = vec![false; token_ids.len()];
    let (h_out, _) = encode(params, &h_in, &pad, &mut ctx)?;
    let (h_spk, _) = add_speaker(params, &h_out, speaker_vec)?;
    Ok(h_spk)
}

/// Synthesize feature frames for a request.
pub fn synthesize(
    req: &SynthesisRequest,
    params: &Params<Real>,
    vocab: &Vocabulary,
    registry: &LanguageRegistry,
    provenance: &Provenance,
    speaker_vec: &Array1<Real>,
    tables: Option<&BTreeMap<usize, SymbolTable>>,
) -> Result<SynthesisResult> {
    req.validate()?;
    if registry.code(req.language_id).is_none() {
        return Err(Error::Registry(format!(
            "language id {} is not registered",
            req.language_id
        )));
    }
    if req.text.is_empty() {
        return Err(Error::Corpus("cannot synthesize empty text".into()));
    }
    let token_ids = tokenize_request(&req.text, req.language_id, vocab, tables)?;
    let h_spk = encode_for_synthesis(params, &token_ids, req.language_id, speaker_vec)?;

    let d_feat = params.dims.feature_dim;
    let mut frames: Array2<Real> = Array2::zeros((0, d_feat));
    let mut stop_probs = Vec::new();
    let mut stopped_naturally = false;
    let mut last_out = None;
    let mut ctx = ForwardCtx::<Real>::eval();
    while frames.nrows() < req.max_frames {
        let t = frames.nrows();
        let mut y_shifted = Array2::zeros((t + 1, d_feat));
        if t > 0 {
            y_shifted.slice_mut(nd_s![1.., ..]).assign(&frames);
        }
        let (out, _) = decode_frames(params, &h_spk, &y_shifted, &mut ctx)?;
        let next_frame = out.y_pre.row(t).to_owned();
        let stop = sigmoid(out.stop_logits[t]);
        let mut grown = Array2::zeros((t + 1, d_feat));
        if t > 0 {
            grown.slice_mut(nd_s![..t, ..]).assign(&frames);
        }
        grown.row_mut(t).assign(&next_frame);
        frames = grown;
        stop_probs.push(stop);
        last_out = Some(out);
        if stop > req.stop_threshold {
            stopped_naturally = true;
            break;
        }
    }
    let out = last_out.expect("at least one decode step ran");
    debug_assert_eq!(out.y_post.nrows(), frames.nrows());

    Ok(SynthesisResult {
        features: out.y_post,
        pre_features: out.y_pre,
        stop_probs,
        attention: out.attn,
        mode: classify_mode(provenance, req.language_id),
        stopped_naturally,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BottleneckVariant, ModelDims};
    use std::collections::BTreeSet;

    fn setup() -> (
        Params<Real>,
        Vocabulary,
        LanguageRegistry,
        Provenance,
        Array1<Real>,
    ) {
        let roles = crate::corpus::RoleSets {
            text: BTreeSet::from([0, 1]),
            paired: BTreeSet::from([0]),
            seen: BTreeSet::from([0]),
            unseen: BTreeSet::from([1, 2]),
            synthesis: BTreeSet::from([0, 1, 2]),
        };
        let registry =
            LanguageRegistry::new(vec!["aa".into(), "bb".into(), "cc".into()], roles).unwrap();
        let corpus = vec![
            crate::corpus::Utterance::new(0, "abc".into(), &registry).unwrap(),
            crate::corpus::Utterance::new(1, "bcd".into(), &registry).unwrap(),
        ];
        let vocab = Vocabulary::build_bytes(&corpus).unwrap();
        let dims = ModelDims {
            d: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            bottleneck_hidden: 4,
            vocab_size: vocab.len(),
            n_languages: 3,
            feature_dim: 4,
            postnet_layers: 1,
            postnet_kernel: 3,
            prediction_hidden: 8,
            speaker_dim: 3,
            bottleneck_variant: BottleneckVariant::Residual,
            use_language_id: true,
            dropout: 0.0,
        };
        let params = Params::<Real>::init(&dims, 1).unwrap();
        let provenance = Provenance {
            pretrained_on: BTreeSet::from([0, 1]),
            paired_on: BTreeSet::from([0]),
            freeze: None,
            ablation: None,
        };
        let spk = Array1::from_vec(vec![0.6, -0.8, 0.0]);
        (params, vocab, registry, provenance, spk)
    }

    #[test]
    fn synthesis_is_deterministic() {
        let (params, vocab, registry, provenance, spk) = setup();
        let req = SynthesisRequest {
            text: "abc".into(),
            language_id: 0,
            speaker: SpeakerSource::Explicit(spk.to_vec()),
            max_frames: 12,
            stop_threshold: 0.5,
        };
        let a = synthesize(&req, &params, &vocab, &registry, &provenance, &spk, None).unwrap();
        let b = synthesize(&req, &params, &vocab, &registry, &provenance, &spk, None).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.stop_probs, b.stop_probs);
        assert_eq!(a.attention, b.attention);
    }

    #[test]
    fn mode_classification_follows_model_exposure() {
        let (params, vocab, registry, provenance, spk) = setup();
        let mk = |lang| SynthesisRequest {
            text: "abc".into(),
            language_id: lang,
            speaker: SpeakerSource::Explicit(spk.to_vec()),
            max_frames: 4,
            stop_threshold: 0.5,
        };
        let seen = synthesize(&mk(0), &params, &vocab, &registry, &provenance, &spk, None).unwrap();
        assert_eq!(seen.mode, SynthesisMode::Seen);
        let text_seen =
            synthesize(&mk(1), &params, &vocab, &registry, &provenance, &spk, None).unwrap();
        assert_eq!(text_seen.mode, SynthesisMode::TextSeenZeroShot);
        let fully =
            synthesize(&mk(2), &params, &vocab, &registry, &provenance, &spk, None).unwrap();
        assert_eq!(fully.mode, SynthesisMode::FullyZeroShot);
    }

    #[test]
    fn truncation_reports_unnatural_stop() {
        let (params, vocab, registry, provenance, spk) = setup();
        let req = SynthesisRequest {
            text: "abc".into(),
            language_id: 0,
            speaker: SpeakerSource::Explicit(spk.to_vec()),
            max_frames: 3,
            stop_threshold: 0.999_999,
        };
        let out = synthesize(&req, &params, &vocab, &registry, &provenance, &spk, None).unwrap();
        assert_eq!(out.features.nrows(), 3);
        assert!(!out.stopped_naturally);
        assert!(out.stop_probs.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(out.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_maps_equal_a_fresh_extraction_bitwise() {
        let (params, vocab, registry, provenance, spk) = setup();
        let req = SynthesisRequest {
            text: "abcd".into(),
            language_id: 0,
            speaker: SpeakerSource::Explicit(spk.to_vec()),
            max_frames: 8,
            stop_threshold: 0.5,
        };
        let out = synthesize(&req, &params, &vocab, &registry, &provenance, &spk, None).unwrap();
        let token_ids = tokenize_request(&req.text, 0, &vocab, None).unwrap();
        let h_spk = encode_for_synthesis(&params, &token_ids, 0, &spk).unwrap();
        let t = out.pre_features.nrows();
        let mut y_shifted = Array2::zeros((t, params.dims.feature_dim));
        y_shifted
            .slice_mut(nd_s![1.., ..])
            .assign(&out.pre_features.slice(nd_s![..t - 1, ..]));
        let (fresh, _) =
            decode_frames(&params, &h_spk, &y_shifted, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(fresh.attn, out.attention);
        assert_eq!(fresh.y_pre, out.pre_features);
        assert_eq!(fresh.y_post, out.features);
    }

    #[test]
    fn mean_speaker_vector_cases() {
        use crate::corpus::SpeakerTable;
        let mut speakers = SpeakerTable::default();
        speakers.insert(0, 0, vec![1.0, 0.0]);
        speakers.insert(0, 1, vec![-1.0, 0.0]);
        speakers.insert(1, 0, vec![0.0, 1.0]);
        let utt = |lang: usize, spk: usize| PairedUtterance {
            language_id: lang,
            text: "x".into(),
            phonemes: vec![1],
            speaker_id: spk,
            features: Array2::zeros((1, 2)),
        };
        // Single speaker: the vector itself.
        let v = mean_speaker_vector(&[utt(1, 0)], &speakers, 1).unwrap();
        assert_eq!(v.to_vec(), vec![0.0, 1.0]);
        // Antipodal speakers: zero mean cannot be normalized.
        let err = mean_speaker_vector(&[utt(0, 0), utt(0, 1)], &speakers, 0);
        assert!(err.is_err());
        // Empty slice errors.
        assert!(mean_speaker_vector(&[], &speakers, 0).is_err());
        // Three-vector case against a hand-computed mean.
        speakers.insert(2, 0, vec![1.0, 0.0]);
        speakers.insert(2, 1, vec![0.0, 1.0]);
        speakers.insert(2, 2, vec![1.0, 0.0]);
        let v = mean_speaker_vector(
            &[utt(2, 0), utt(2, 1), utt(2, 2)],
            &speakers,
            2,
        )
        .unwrap();
        // mean = (2/3, 1/3), normalized.
        let norm = (4.0f64 / 9.0 + 1.0 / 9.0).sqrt();
        assert!((v[0] - (2.0 / 3.0) / norm).abs() < 1e-12);
        assert!((v[1] - (1.0 / 3.0) / norm).abs() < 1e-12);
    }

    #[test]
    fn empty_text_and_unknown_language_error() {
        let (params, vocab, registry, provenance, spk) = setup();
        let empty = SynthesisRequest {
            text: String::new(),
            language_id: 0,
            speaker: SpeakerSource::TargetLanguageMean,
            max_frames: 4,
            stop_threshold: 0.5,
        };
        assert!(synthesize(&empty, &params, &vocab, &registry, &provenance, &spk, None).is_err());
        let unknown = SynthesisRequest {
            text: "abc".into(),
            language_id: 77,
            speaker: SpeakerSource::TargetLanguageMean,
            max_frames: 4,
            stop_threshold: 0.5,
        };
        assert!(synthesize(&unknown, &params, &vocab, &registry, &provenance, &spk, None).is_err());
    }
}
