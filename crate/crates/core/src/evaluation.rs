//! Quantitative evaluation: oracle phoneme error rate, aligned spectral
//! distortion, attention diagonality, embedding exports, and the batch
//! evaluation harness.

use crate::corpus::{
    AcousticOracle, LanguageId, LanguageRegistry, PairedUtterance, SpeakerTable, SynthesisMode,
    Utterance,
};
use crate::error::{Error, Result};
use crate::inference::{resolve_speaker, synthesize, SpeakerSource, SynthesisRequest};
use crate::model::{AttentionMap, Params, Provenance};
use crate::scalar::Scalar;
use crate::tokenizer::{SymbolTable, Vocabulary};
use crate::Real;
use ndarray::ArrayView2;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        curr[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Character (phoneme) error rate: edit distance over reference length.
/// May exceed 1 for runaway hypotheses.
pub fn cer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Evaluation("empty reference".into()));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Decode synthesized features with the oracle and score against the
/// reference phonemes.
pub fn oracle_cer(
    features: &ArrayView2<'_, Real>,
    reference_phonemes: &[usize],
    oracle: &AcousticOracle<Real>,
) -> Result<f64> {
    let decoded = oracle.decode_features(features)?;
    cer(&decoded, reference_phonemes)
}

fn frame_distance<S: Scalar>(a: &ArrayView2<'_, S>, b: &ArrayView2<'_, S>, i: usize, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64().unwrap_or(f64::INFINITY);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Monotone, contiguous, minimal-cost alignment path under Euclidean frame
/// distance. Endpoints are (0, 0) and (T1-1, T2-1).
pub fn dtw_align<S: Scalar>(a: &ArrayView2<'_, S>, b: &ArrayView2<'_, S>) -> Result<Vec<(usize, usize)>> {
    let (t1, t2) = (a.nrows(), b.nrows());
    if t1 == 0 || t2 == 0 {
        return Err(Error::Evaluation("DTW inputs must be non-empty".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "DTW dims {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut cost = vec![vec![f64::INFINITY; t2]; t1];
    // 0 = diagonal, 1 = up (i-1), 2 = left (j-1)
    let mut back = vec![vec![0u8; t2]; t1];
    for i in 0..t1 {
        for j in 0..t2 {
            let d = frame_distance(a, b, i, j);
            if i == 0 && j == 0 {
                cost[i][j] = d;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut dir = 0;
            if i > 0 && j > 0 && cost[i - 1][j - 1] < best {
                best = cost[i - 1][j - 1];
                dir = 0;
            }
            if i > 0 && cost[i - 1][j] < best {
                best = cost[i - 1][j];
                dir = 1;
            }
            if j > 0 && cost[i][j - 1] < best {
                best = cost[i][j - 1];
                dir = 2;
            }
            cost[i][j] = best + d;
            back[i][j] = dir;
        }
    }
    let mut path = vec![(t1 - 1, t2 - 1)];
    let (mut i, mut j) = (t1 - 1, t2 - 1);
    while i > 0 || j > 0 {
        match back[i][j] {
            0 if i > 0 && j > 0 => {
                i -= 1;
                j -= 1;
            }
            1 if i > 0 => i -= 1,
            2 if j > 0 => j -= 1,
            _ => {
                if i > 0 {
                    i -= 1;
                } else {
                    j -= 1;
                }
            }
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(path)
}

/// Total Euclidean cost along an alignment path.
pub fn dtw_cost<S: Scalar>(a: &ArrayView2<'_, S>, b: &ArrayView2<'_, S>, path: &[(usize, usize)]) -> f64 {
    path.iter()
        .map(|&(i, j)| frame_distance(a, b, i, j))
        .sum()
}

/// Spectral distortion constant: `(10 / ln 10) * sqrt(2)`, the usual dB-style
/// scaling. Values here are not comparable to mel-cepstral numbers computed
/// on real speech; the feature space differs.
pub const DISTORTION_CONST: f64 = 6.141_851_463_713_754;

/// `DISTORTION_CONST` times the mean frame distance along the DTW path.
pub fn spectral_distortion<S: Scalar>(pred: &ArrayView2<'_, S>, reference: &ArrayView2<'_, S>) -> Result<f64> {
    let path = dtw_align(pred, reference)?;
    let mean = dtw_cost(pred, reference, &path) / path.len() as f64;
    Ok(DISTORTION_CONST * mean)
}

/// Per-head diagonality scores in [0, 1] plus the best head.
/// `1 - (1/T) sum_t sum_n A[t,n] |n/N - t/T|`; exactly 1 for a perfectly
/// diagonal map.
pub fn attention_diagonality<S: Scalar>(attn: &AttentionMap<S>) -> (Vec<Vec<f64>>, f64) {
    let (t_len, n_len) = attn.io_shape();
    let mut best = 0.0f64;
    let mut scores = Vec::with_capacity(attn.n_layers());
    for layer in &attn.weights {
        let mut layer_scores = Vec::with_capacity(layer.len());
        for head in layer {
            let mut penalty = 0.0;
            for t in 0..t_len {
                for n in 0..n_len {
                    let dist = (n as f64 / n_len as f64 - t as f64 / t_len as f64).abs();
                    penalty += head[(t, n)].to_f64().unwrap_or(0.0) * dist;
                }
            }
            let score = 1.0 - penalty / t_len as f64;
            best = best.max(score);
            layer_scores.push(score);
        }
        scores.push(layer_scores);
    }
    (scores, best)
}

/// Per-utterance mean token embedding and mean encoder input (bottleneck
/// output), specials excluded, as TSV rows.
pub struct EmbeddingExport {
    pub header: String,
    pub rows: Vec<String>,
}

pub fn export_embeddings(
    params: &Params<Real>,
    sample: &[Utterance],
    vocab: &Vocabulary,
    tables: Option<&BTreeMap<usize, SymbolTable>>,
) -> Result<EmbeddingExport> {
    use crate::model::{bottleneck_forward, embed_language, embed_tokens, ForwardCtx};
    let d = params.dims.d;
    let mut header = String::from("language_id\tutterance_id");
    for j in 0..d {
        write!(header, "\tz{j}").expect("string write");
    }
    for j in 0..d {
        write!(header, "\th{j}").expect("string write");
    }
    let mut rows = Vec::with_capacity(sample.len());
    for (utt_id, utt) in sample.iter().enumerate() {
        let token_ids =
            crate::inference::tokenize_request(&utt.text, utt.language_id, vocab, tables)?;
        let z = embed_tokens(&token_ids, &params.token_embedding)?;
        let x0 = if params.dims.use_language_id {
            let e = embed_language(utt.language_id, &params.language_embedding)?;
            &z + &e
        } else {
            z.clone()
        };
        let (h_in, _) = bottleneck_forward(params, &x0, &mut ForwardCtx::eval());
        let data_positions: Vec<usize> = token_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| !vocab.is_special(id))
            .map(|(i, _)| i)
            .collect();
        if data_positions.is_empty() {
            continue;
        }
        let inv = 1.0 / data_positions.len() as Real;
        let mut row = format!("{}\t{}", utt.language_id, utt_id);
        for j in 0..d {
            let mean: Real = data_positions.iter().map(|&i| z[(i, j)]).sum::<Real>() * inv;
            write!(row, "\t{mean}").expect("string write");
        }
        for j in 0..d {
            let mean: Real = data_positions.iter().map(|&i| h_in[(i, j)]).sum::<Real>() * inv;
            write!(row, "\t{mean}").expect("string write");
        }
        rows.push(row);
    }
    Ok(EmbeddingExport {
        header,
        rows,
    })
}

/// One scored synthesis.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct UtteranceRecord {
    pub utterance: usize,
    pub language_id: LanguageId,
    pub code: String,
    pub mode: SynthesisMode,
    pub speaker_source: String,
    pub cer: f64,
    pub distortion: f64,
    pub diagonality: f64,
    pub stopped_naturally: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Per-language, per-speaker-source aggregate.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LanguageAggregate {
    pub language_id: LanguageId,
    pub code: String,
    pub mode: SynthesisMode,
    pub speaker_source: String,
    pub count: usize,
    pub failures: usize,
    pub mean_cer: f64,
    pub mean_distortion: f64,
    pub mean_diagonality: f64,
    pub stopped_fraction: f64,
}

/// Full evaluation output.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<UtteranceRecord>,
    pub aggregates: Vec<LanguageAggregate>,
}

impl EvalReport {
    /// Aggregates recomputed from the records; construction uses this too, so
    /// equality with the stored aggregates is an invariant.
    pub fn recompute_aggregates(records: &[UtteranceRecord]) -> Vec<LanguageAggregate> {
        let mut groups: BTreeMap<(LanguageId, String), Vec<&UtteranceRecord>> = BTreeMap::new();
        for r in records {
            groups
                .entry((r.language_id, r.speaker_source.clone()))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|((language_id, speaker_source), rs)| {
                let ok: Vec<&&UtteranceRecord> =
                    rs.iter().filter(|r| r.error.is_none()).collect();
                let n = ok.len().max(1) as f64;
                LanguageAggregate {
                    language_id,
                    code: rs[0].code.clone(),
                    mode: rs[0].mode,
                    speaker_source,
                    count: rs.len(),
                    failures: rs.len() - ok.len(),
                    mean_cer: ok.iter().map(|r| r.cer).sum::<f64>() / n,
                    mean_distortion: ok.iter().map(|r| r.distortion).sum::<f64>() / n,
                    mean_diagonality: ok.iter().map(|r| r.diagonality).sum::<f64>() / n,
                    stopped_fraction: ok.iter().filter(|r| r.stopped_naturally).count() as f64 / n,
                }
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))
                .expect("string write");
        }
        out
    }

    pub fn aggregate_tsv(&self) -> String {
        let mut out = String::from(
            "code\tmode\tspeaker_source\tcount\tfailures\tmean_cer\tmean_distortion\tmean_diagonality\tstopped_fraction\n",
        );
        for a in &self.aggregates {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                a.code,
                a.mode,
                a.speaker_source,
                a.count,
                a.failures,
                a.mean_cer,
                a.mean_distortion,
                a.mean_diagonality,
                a.stopped_fraction
            )
            .expect("string write");
        }
        out
    }

    /// Mean CER over successful records matching a predicate.
    pub fn mean_cer_where(&self, pred: impl Fn(&UtteranceRecord) -> bool) -> Option<f64> {
        let selected: Vec<&UtteranceRecord> = self
            .records
            .iter()
            .filter(|r| r.error.is_none() && pred(r))
            .collect();
        if selected.is_empty() {
            return None;
        }
        Some(selected.iter().map(|r| r.cer).sum::<f64>() / selected.len() as f64)
    }

    pub fn mean_distortion_where(&self, pred: impl Fn(&UtteranceRecord) -> bool) -> Option<f64> {
        let selected: Vec<&UtteranceRecord> = self
            .records
            .iter()
            .filter(|r| r.error.is_none() && pred(r))
            .collect();
        if selected.is_empty() {
            return None;
        }
        Some(selected.iter().map(|r| r.distortion).sum::<f64>() / selected.len() as f64)
    }

    pub fn mean_diagonality_where(&self, pred: impl Fn(&UtteranceRecord) -> bool) -> Option<f64> {
        let selected: Vec<&UtteranceRecord> = self
            .records
            .iter()
            .filter(|r| r.error.is_none() && pred(r))
            .collect();
        if selected.is_empty() {
            return None;
        }
        Some(selected.iter().map(|r| r.diagonality).sum::<f64>() / selected.len() as f64)
    }
}

/// Inputs for a batch evaluation.
pub struct EvalSetup<'a> {
    pub params: &'a Params<Real>,
    pub provenance: &'a Provenance,
    pub vocab: &'a Vocabulary,
    pub registry: &'a LanguageRegistry,
    pub test_corpus: &'a [PairedUtterance],
    pub oracle: &'a AcousticOracle<Real>,
    pub speakers: &'a SpeakerTable,
    pub speaker_sources: &'a [SpeakerSource],
    pub tables: Option<&'a BTreeMap<usize, SymbolTable>>,
    pub max_frames: usize,
    pub stop_threshold: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Synthesize and score every test utterance under every requested speaker
/// source. Per-utterance failures are recorded, not fatal.
pub fn evaluate(setup: &EvalSetup<'_>) -> Result<EvalReport> {
    let mut records = Vec::new();
    for source in setup.speaker_sources {
        for (idx, utt) in setup.test_corpus.iter().enumerate() {
            let code = setup
                .registry
                .code(utt.language_id)
                .unwrap_or("?")
                .to_string();
            let label = source.label(setup.registry);
            let speaker = resolve_speaker(
                source,
                utt.language_id,
                setup.test_corpus,
                setup.speakers,
            );
            let result = speaker.and_then(|spk| {
                let req = SynthesisRequest {
                    text: utt.text.clone(),
                    language_id: utt.language_id,
                    speaker: source.clone(),
                    max_frames: setup.max_frames,
                    stop_threshold: setup.stop_threshold,
                };
                synthesize(
                    &req,
                    setup.params,
                    setup.vocab,
                    setup.registry,
                    setup.provenance,
                    &spk,
                    setup.tables,
                )
            });
            let record = match result {
                Ok(synth) => {
                    let cer_val =
                        oracle_cer(&synth.features.view(), &utt.phonemes, setup.oracle)?;
                    let distortion =
                        spectral_distortion(&synth.features.view(), &utt.features.view())?;
                    let (_, diagonality) = attention_diagonality(&synth.attention);
                    UtteranceRecord {
                        utterance: idx,
                        language_id: utt.language_id,
                        code,
                        mode: synth.mode,
                        speaker_source: label,
                        cer: cer_val,
                        distortion,
                        diagonality,
                        stopped_naturally: synth.stopped_naturally,
                        error: None,
                    }
                }
                Err(e) => UtteranceRecord {
                    utterance: idx,
                    language_id: utt.language_id,
                    code,
                    mode: crate::inference::classify_mode(setup.provenance, utt.language_id),
                    speaker_source: label,
                    cer: f64::NAN,
                    distortion: f64::NAN,
                    diagonality: f64::NAN,
                    stopped_naturally: false,
                    error: Some(e.to_string()),
                },
            };
            records.push(record);
        }
    }
    let aggregates = EvalReport::recompute_aggregates(&records);
    Ok(EvalReport {
        config_hash: setup.config_hash.clone(),
        seed: setup.seed,
        records,
        aggregates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn edit_distance_basics() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance(&a, &b), 3);
        assert_eq!(edit_distance(&a, &a), 0);
        assert_eq!(edit_distance(&a, &[]), 6);
        assert_eq!(edit_distance::<char>(&[], &[]), 0);
    }

    #[test]
    fn cer_contract() {
        assert_abs_diff_eq!(cer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        // Hypothesis twice the length, no overlap: >= 1.
        assert!(cer(&[9, 9, 9, 9, 9, 9], &[1, 2, 3]).unwrap() >= 1.0);
        assert!(cer::<usize>(&[1], &[]).is_err());
    }

    #[test]
    fn dtw_identical_inputs_align_diagonally_at_zero_cost() {
        let a = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let path = dtw_align(&a.view(), &a.view()).unwrap();
        assert_eq!(path.len(), 5);
        for (k, &(i, j)) in path.iter().enumerate() {
            assert_eq!((i, j), (k, k));
        }
        assert_abs_diff_eq!(dtw_cost(&a.view(), &a.view(), &path), 0.0);
    }

    #[test]
    fn dtw_repeated_frame_inserts_one_vertical_step() {
        let a = Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64 * 1.5);
        // b repeats frame 2.
        let mut b = Array2::zeros((5, 2));
        for (dst, src) in [0usize, 1, 2, 2, 3].iter().enumerate() {
            b.row_mut(dst).assign(&a.row(*src));
        }
        let path = dtw_align(&a.view(), &b.view()).unwrap();
        assert_eq!(path.len(), 5);
        assert_abs_diff_eq!(dtw_cost(&a.view(), &b.view(), &path), 0.0);
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(3, 4)));
    }

    #[test]
    fn spectral_distortion_zero_for_identical_and_offset_analytic() {
        let a = Array2::from_shape_fn((6, 4), |(i, j)| ((i + j) as f64 * 0.37).sin());
        assert_abs_diff_eq!(spectral_distortion(&a.view(), &a.view()).unwrap(), 0.0);
        // Constant offset c in one dimension, equal lengths: K * c.
        let c = 0.35;
        let mut b = a.clone();
        for mut row in b.rows_mut() {
            row[2] += c;
        }
        let got = spectral_distortion(&b.view(), &a.view()).unwrap();
        assert_abs_diff_eq!(got, DISTORTION_CONST * c, epsilon = 1e-9);
    }

    #[test]
    fn spectral_distortion_is_symmetric_for_equal_lengths() {
        let a = Array2::from_shape_fn((5, 3), |(i, j)| ((2 * i + j) as f64 * 0.71).cos());
        let b = Array2::from_shape_fn((5, 3), |(i, j)| ((i + 3 * j) as f64 * 0.53).sin());
        let ab = spectral_distortion(&a.view(), &b.view()).unwrap();
        let ba = spectral_distortion(&b.view(), &a.view()).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
    }

    #[test]
    fn diagonality_cases() {
        // Exact diagonal one-hot: score 1.
        let mut diag = Array2::<f64>::zeros((10, 10));
        for i in 0..10 {
            diag[(i, i)] = 1.0;
        }
        let map = AttentionMap {
            weights: vec![vec![diag]],
        };
        let (scores, best) = attention_diagonality(&map);
        assert_abs_diff_eq!(best, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scores[0][0], 1.0, epsilon = 1e-12);

        // Uniform 10x10: 1 - mean |i - j| / 10 = 1 - 0.33 (enumerated).
        let uniform = AttentionMap {
            weights: vec![vec![Array2::from_elem((10, 10), 0.1)]],
        };
        let (_, u) = attention_diagonality(&uniform);
        let mut expected = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                expected += ((i as f64) / 10.0 - (j as f64) / 10.0).abs() / 10.0;
            }
        }
        let expected = 1.0 - expected / 10.0;
        assert_abs_diff_eq!(u, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(u, 0.67, epsilon = 1e-12);

        // Single-column attention scores strictly below the diagonal map.
        let mut col = Array2::<f64>::zeros((10, 10));
        for i in 0..10 {
            col[(i, 4)] = 1.0;
        }
        let col_map = AttentionMap {
            weights: vec![vec![col]],
        };
        let (_, c) = attention_diagonality(&col_map);
        assert!(c < 1.0);
    }

    #[test]
    fn aggregates_equal_recomputation() {
        let records = vec![
            UtteranceRecord {
                utterance: 0,
                language_id: 0,
                code: "aa".into(),
                mode: SynthesisMode::Seen,
                speaker_source: "target_mean".into(),
                cer: 0.1,
                distortion: 2.0,
                diagonality: 0.9,
                stopped_naturally: true,
                error: None,
            },
            UtteranceRecord {
                utterance: 1,
                language_id: 0,
                code: "aa".into(),
                mode: SynthesisMode::Seen,
                speaker_source: "target_mean".into(),
                cer: 0.3,
                distortion: 4.0,
                diagonality: 0.7,
                stopped_naturally: false,
                error: None,
            },
        ];
        let aggregates = EvalReport::recompute_aggregates(&records);
        assert_eq!(aggregates.len(), 1);
        let a = &aggregates[0];
        assert_abs_diff_eq!(a.mean_cer, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(a.mean_distortion, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.stopped_fraction, 0.5, epsilon = 1e-12);
        let report = EvalReport {
            config_hash: "x".into(),
            seed: 0,
            records: records.clone(),
            aggregates,
        };
        assert_eq!(report.aggregates, EvalReport::recompute_aggregates(&records));
    }

    #[test]
    fn ground_truth_features_score_zero() {
        // Rendering the reference phonemes at zero noise and "evaluating"
        // them must give CER 0 and distortion 0.
        let templates =
            Array2::from_shape_fn((4, 3), |(p, j)| (p as f64 * 3.0 + j as f64) * 1.1);
        let oracle = AcousticOracle::new(templates, vec![3, 4, 2, 5], 0.0).unwrap();
        let phonemes = vec![2, 0, 3, 1, 1];
        let features = oracle.render_features(&phonemes, 0).unwrap();
        assert_abs_diff_eq!(
            oracle_cer(&features.view(), &phonemes, &oracle).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            spectral_distortion(&features.view(), &features.view()).unwrap(),
            0.0
        );
    }

    #[test]
    fn empty_synthesis_against_reference_scores_full_error() {
        let hyp: Vec<usize> = vec![];
        assert_abs_diff_eq!(cer(&hyp, &[1, 2, 3]).unwrap(), 1.0);
    }
}
