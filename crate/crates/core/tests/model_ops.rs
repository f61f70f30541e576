//! Contract tests for the individual network operations: identities,
//! masking correctness, causality, hand-computed miniatures, and the
//! guided-attention / loss algebra.

use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2};
use ttslab_core::model::{
    add_speaker, bottleneck_forward, decode_teacher_forced, embed_language, encode,
    guided_attention_loss, guided_attention_weight_matrix, mlm_loss, predict_tokens, stop_targets,
    tts_loss, AttentionMap, Bottleneck, BottleneckVariant, DecodeOut, ForwardCtx, LossWeights,
    ModelDims, Params,
};
use ttslab_core::nn::sinusoidal_pe;
use ttslab_core::rng::DetRng;

fn dims(variant: BottleneckVariant, encoder_blocks: usize) -> ModelDims {
    ModelDims {
        d: 8,
        heads: 2,
        encoder_blocks,
        decoder_blocks: 1,
        bottleneck_hidden: 4,
        vocab_size: 9,
        n_languages: 3,
        feature_dim: 4,
        postnet_layers: 2,
        postnet_kernel: 3,
        prediction_hidden: 8,
        speaker_dim: 3,
        bottleneck_variant: variant,
        use_language_id: true,
        dropout: 0.0,
    }
}

fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = DetRng::new(seed, "mat");
    Array2::from_shape_fn((rows, cols), |_| rng.normal())
}

#[test]
fn residual_bottleneck_with_zero_up_projection_is_identity() {
    let d = dims(BottleneckVariant::Residual, 1);
    let mut params = Params::<f64>::init(&d, 0).unwrap();
    if let Bottleneck::Residual { up, .. } = &mut params.bottleneck {
        up.w.fill(0.0);
        up.b.fill(0.0);
    }
    let x = rand_matrix(5, 8, 1);
    let (y, _) = bottleneck_forward(&params, &x, &mut ForwardCtx::eval());
    assert_eq!(y, x);
}

#[test]
fn bottleneck_variant_none_is_identity() {
    let d = dims(BottleneckVariant::None, 1);
    let params = Params::<f64>::init(&d, 0).unwrap();
    let x = rand_matrix(4, 8, 2);
    let (y, _) = bottleneck_forward(&params, &x, &mut ForwardCtx::eval());
    assert_eq!(y, x);
}

#[test]
fn residual_bottleneck_matches_straight_line_reference() {
    // Independent re-implementation of x + Up(relu(Down(layernorm(x))))
    // with explicit loops, on a 3 x 4 case with hidden 2.
    let d = ModelDims {
        d: 4,
        heads: 1,
        encoder_blocks: 0,
        decoder_blocks: 1,
        bottleneck_hidden: 2,
        vocab_size: 5,
        n_languages: 2,
        feature_dim: 3,
        postnet_layers: 0,
        postnet_kernel: 3,
        prediction_hidden: 4,
        speaker_dim: 2,
        bottleneck_variant: BottleneckVariant::Residual,
        use_language_id: true,
        dropout: 0.0,
    };
    let params = Params::<f64>::init(&d, 7).unwrap();
    let x = rand_matrix(3, 4, 3);
    let (y, _) = bottleneck_forward(&params, &x, &mut ForwardCtx::eval());

    let (ln, down, up) = match &params.bottleneck {
        Bottleneck::Residual { ln, down, up } => (ln, down, up),
        _ => unreachable!(),
    };
    for i in 0..3 {
        // layernorm row
        let row: Vec<f64> = x.row(i).to_vec();
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let normed: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * ln.gamma[j] + ln.beta[j])
            .collect();
        // down, relu
        let mut hidden = [0.0f64; 2];
        for h in 0..2 {
            let mut acc = down.b[h];
            for j in 0..4 {
                acc += normed[j] * down.w[(j, h)];
            }
            hidden[h] = acc.max(0.0);
        }
        // up + residual
        for j in 0..4 {
            let mut acc = up.b[j];
            for h in 0..2 {
                acc += hidden[h] * up.w[(h, j)];
            }
            assert_abs_diff_eq!(y[(i, j)], x[(i, j)] + acc, epsilon = 1e-12);
        }
    }
}

#[test]
fn zero_depth_encoder_returns_position_encoded_input() {
    let d = dims(BottleneckVariant::Residual, 0);
    let params = Params::<f64>::init(&d, 0).unwrap();
    let x = rand_matrix(6, 8, 4);
    let pad = vec![false; 6];
    let (y, _) = encode(&params, &x, &pad, &mut ForwardCtx::eval()).unwrap();
    let expected = &x + &sinusoidal_pe::<f64>(6, 8);
    assert_abs_diff_eq!(
        (y - expected).iter().map(|v| v.abs()).sum::<f64>(),
        0.0,
        epsilon = 1e-12
    );
}

#[test]
fn encoder_output_ignores_padded_tail_content() {
    let d = dims(BottleneckVariant::Residual, 2);
    let params = Params::<f64>::init(&d, 5).unwrap();
    let mut x = rand_matrix(7, 8, 6);
    let pad = vec![false, false, false, false, true, true, true];
    let (y1, _) = encode(&params, &x, &pad, &mut ForwardCtx::eval()).unwrap();
    // Permute / rewrite the padded tail rows.
    let row5 = x.row(5).to_owned();
    let row6 = x.row(6).to_owned();
    x.row_mut(5).assign(&row6);
    x.row_mut(6).assign(&row5);
    x.row_mut(4).fill(99.0);
    let (y2, _) = encode(&params, &x, &pad, &mut ForwardCtx::eval()).unwrap();
    for t in 0..4 {
        for j in 0..8 {
            assert_abs_diff_eq!(y1[(t, j)], y2[(t, j)], epsilon = 1e-12);
        }
    }
    // Padded output rows are zeroed.
    for t in 4..7 {
        assert!(y1.row(t).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn prediction_rows_are_distributions() {
    let d = dims(BottleneckVariant::Residual, 1);
    let params = Params::<f64>::init(&d, 8).unwrap();
    let h = rand_matrix(5, 8, 9);
    let (probs, _) = predict_tokens(&params, &h);
    for row in probs.rows() {
        assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn mlm_loss_perfect_and_uniform_cases() {
    let vocab = 9;
    // Perfect one-hot predictions -> 0.
    let mut probs = Array2::<f64>::zeros((4, vocab));
    probs[(1, 3)] = 1.0;
    probs[(2, 5)] = 1.0;
    assert_abs_diff_eq!(mlm_loss(&probs, &[3, 5], &[1, 2]), 0.0, epsilon = 1e-12);
    // Uniform predictions -> ln(vocab).
    let uniform = Array2::<f64>::from_elem((4, vocab), 1.0 / vocab as f64);
    assert_abs_diff_eq!(
        mlm_loss(&uniform, &[3, 5], &[1, 2]),
        (vocab as f64).ln(),
        epsilon = 1e-12
    );
    // Empty position set is defined as zero.
    assert_eq!(mlm_loss(&uniform, &[], &[]), 0.0);
}

#[test]
fn mlm_loss_matches_hand_computation_on_three_positions() {
    let mut probs = Array2::<f64>::from_elem((5, 4), 0.05);
    probs[(1, 2)] = 0.7;
    probs[(2, 0)] = 0.4;
    probs[(4, 3)] = 0.9;
    let loss = mlm_loss(&probs, &[2, 0, 3], &[1, 2, 4]);
    let expected = -(0.7f64.ln() + 0.4f64.ln() + 0.9f64.ln()) / 3.0;
    assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
}

#[test]
fn add_speaker_zero_vector_with_zero_bias_is_identity() {
    let d = dims(BottleneckVariant::Residual, 1);
    let mut params = Params::<f64>::init(&d, 10).unwrap();
    params.decoder.speaker_proj.b.fill(0.0);
    let h = rand_matrix(4, 8, 11);
    let spk = Array1::<f64>::zeros(3);
    let (y, _) = add_speaker(&params, &h, &spk).unwrap();
    assert_eq!(y, h);
}

#[test]
fn add_speaker_is_linear_in_the_speaker_vector() {
    let d = dims(BottleneckVariant::Residual, 1);
    let params = Params::<f64>::init(&d, 12).unwrap();
    let h = rand_matrix(4, 8, 13);
    let a = Array1::from_vec(vec![0.2, -0.4, 0.9]);
    let b = Array1::from_vec(vec![-0.5, 0.1, 0.3]);
    let ab = &a + &b;
    let (y_ab, _) = add_speaker(&params, &h, &ab).unwrap();
    let (y_a, _) = add_speaker(&params, &h, &a).unwrap();
    // add(H, a+b) - add(H, a) is constant across rows.
    let diff = &y_ab - &y_a;
    let first = diff.row(0).to_owned();
    for t in 1..4 {
        for j in 0..8 {
            assert_abs_diff_eq!(diff[(t, j)], first[j], epsilon = 1e-12);
        }
    }
    // Dimension mismatch errors.
    assert!(add_speaker(&params, &h, &Array1::zeros(5)).is_err());
}

#[test]
fn decoder_is_causal_before_the_postnet() {
    let d = dims(BottleneckVariant::Residual, 1);
    let params = Params::<f64>::init(&d, 14).unwrap();
    let h_enc = rand_matrix(5, 8, 15);
    let y = rand_matrix(6, 4, 16);
    let (out1, _) = decode_teacher_forced(&params, &h_enc, &y, &mut ForwardCtx::eval()).unwrap();
    for t_perturb in 0..6 {
        let mut y2 = y.clone();
        y2[(t_perturb, 1)] += 3.0;
        let (out2, _) =
            decode_teacher_forced(&params, &h_enc, &y2, &mut ForwardCtx::eval()).unwrap();
        for t in 0..6 {
            let delta: f64 = (&out1.y_pre.row(t) - &out2.y_pre.row(t))
                .iter()
                .map(|v| v.abs())
                .sum();
            if t <= t_perturb {
                assert!(
                    delta < 1e-12,
                    "perturbing frame {t_perturb} leaked into step {t}"
                );
            }
        }
        // Strictly later steps must actually see the change (next step at least).
        if t_perturb + 1 < 6 {
            let delta: f64 = (&out1.y_pre.row(t_perturb + 1) - &out2.y_pre.row(t_perturb + 1))
                .iter()
                .map(|v| v.abs())
                .sum();
            assert!(delta > 1e-9, "no effect at step {}", t_perturb + 1);
        }
    }
}

#[test]
fn decoder_attention_rows_are_stochastic() {
    let d = dims(BottleneckVariant::Residual, 1);
    let params = Params::<f64>::init(&d, 17).unwrap();
    let h_enc = rand_matrix(5, 8, 18);
    let y = rand_matrix(4, 4, 19);
    let (out, _) = decode_teacher_forced(&params, &h_enc, &y, &mut ForwardCtx::eval()).unwrap();
    out.attn.validate(1e-5).unwrap();
    assert_eq!(out.attn.io_shape(), (4, 5));
}

fn one_hot_attention(assign: impl Fn(usize) -> usize, t_len: usize, n_len: usize) -> AttentionMap<f64> {
    let mut m = Array2::<f64>::zeros((t_len, n_len));
    for t in 0..t_len {
        m[(t, assign(t))] = 1.0;
    }
    AttentionMap {
        weights: vec![vec![m]],
    }
}

#[test]
fn guided_attention_is_zero_on_the_exact_diagonal() {
    let attn = one_hot_attention(|t| t, 10, 10);
    assert_abs_diff_eq!(guided_attention_loss(&attn, 0.2), 0.0, epsilon = 1e-12);
}

#[test]
fn guided_attention_anti_diagonal_matches_independent_evaluation() {
    // Straight-line oracle: mean over t of W[t, N-1-t] with
    // W = 1 - exp(-(n/N - t/T)^2 / (2 g^2)), evaluated without the
    // implementation's helpers.
    let (t_len, n_len, g) = (10usize, 10usize, 0.2f64);
    let mut oracle = 0.0;
    for t in 0..t_len {
        let n = n_len - 1 - t;
        let diff = n as f64 / n_len as f64 - t as f64 / t_len as f64;
        oracle += 1.0 - (-diff * diff / (2.0 * g * g)).exp();
    }
    oracle /= t_len as f64;

    let attn = one_hot_attention(|t| 9 - t, 10, 10);
    let loss = guided_attention_loss(&attn, g);
    assert_abs_diff_eq!(loss, oracle, epsilon = 1e-12);
    // Frozen value of the oracle itself (locked before the implementation).
    assert_abs_diff_eq!(oracle, 0.749337, epsilon = 1e-6);
}

#[test]
fn guided_attention_uniform_exceeds_diagonal_for_any_shape() {
    for (t_len, n_len) in [(5, 5), (8, 12), (13, 7)] {
        let uniform = AttentionMap {
            weights: vec![vec![Array2::from_elem((t_len, n_len), 1.0 / n_len as f64)]],
        };
        // Nearest-diagonal one-hot.
        let diag = one_hot_attention(
            |t| ((t as f64 + 0.5) * n_len as f64 / t_len as f64) as usize % n_len,
            t_len,
            n_len,
        );
        let u = guided_attention_loss(&uniform, 0.2);
        let d = guided_attention_loss(&diag, 0.2);
        assert!(u > d, "uniform {u} <= diagonal {d} at {t_len}x{n_len}");
    }
}

#[test]
fn guided_attention_weight_matrix_vanishes_on_diagonal_cells() {
    let w = guided_attention_weight_matrix::<f64>(6, 6, 0.2);
    for i in 0..6 {
        assert_abs_diff_eq!(w[(i, i)], 0.0, epsilon = 1e-12);
    }
}

#[test]
fn tts_loss_is_zero_for_perfect_outputs() {
    let t_len = 6;
    let y = rand_matrix(t_len, 4, 20);
    let mut stop_logits = Array1::<f64>::from_elem(t_len, -60.0);
    stop_logits[t_len - 1] = 60.0;
    let out = DecodeOut {
        y_pre: y.clone(),
        y_post: y.clone(),
        stop_logits,
        attn: one_hot_attention(|t| t, t_len, t_len),
    };
    let (total, parts) = tts_loss(&out, &y, &stop_targets(t_len), &LossWeights::default());
    assert!(total.abs() < 1e-12, "total {total}");
    assert!(parts.l1_pre == 0.0 && parts.l1_post == 0.0);
}

#[test]
fn tts_loss_components_add_up_and_match_hand_computation() {
    let t_len = 3;
    let n_len = 4;
    let y_ref = rand_matrix(t_len, 2, 21);
    let y_pre = &y_ref + &Array2::from_elem((t_len, 2), 0.5);
    let y_post = &y_ref - &Array2::from_elem((t_len, 2), 0.25);
    let stop_logits = Array1::from_vec(vec![-1.0, 0.5, 2.0]);
    let attn_mat = Array2::from_elem((t_len, n_len), 1.0 / n_len as f64);
    let out = DecodeOut {
        y_pre: y_pre.clone(),
        y_post: y_post.clone(),
        stop_logits: stop_logits.clone(),
        attn: AttentionMap {
            weights: vec![vec![attn_mat.clone()]],
        },
    };
    let weights = LossWeights {
        l1: 0.7,
        stop: 1.3,
        stop_pos_weight: 5.0,
        guided: 0.9,
        guided_g: 0.2,
    };
    let targets = stop_targets::<f64>(t_len);
    let (total, parts) = tts_loss(&out, &y_ref, &targets, &weights);

    // Hand computation with plain loops.
    let l1_pre = 0.5; // constant offset
    let l1_post = 0.25;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let bce = |x: f64, t: f64, w: f64| -> f64 {
        w * (-(t * sig(x).ln() + (1.0 - t) * (1.0 - sig(x)).ln()))
    };
    let stop =
        (bce(-1.0, 0.0, 1.0) + bce(0.5, 0.0, 1.0) + bce(2.0, 1.0, 5.0)) / t_len as f64;
    let mut ga = 0.0;
    for t in 0..t_len {
        for n in 0..n_len {
            let diff = n as f64 / n_len as f64 - t as f64 / t_len as f64;
            ga += (1.0 - (-diff * diff / (2.0 * 0.04)).exp()) / n_len as f64;
        }
    }
    ga /= t_len as f64;

    assert_abs_diff_eq!(parts.l1_pre, l1_pre, epsilon = 1e-12);
    assert_abs_diff_eq!(parts.l1_post, l1_post, epsilon = 1e-12);
    assert_abs_diff_eq!(parts.stop_bce, stop, epsilon = 1e-12);
    assert_abs_diff_eq!(parts.guided_attention, ga, epsilon = 1e-12);
    let reconstructed =
        0.7 * (parts.l1_pre + parts.l1_post) + 1.3 * parts.stop_bce + 0.9 * parts.guided_attention;
    assert_abs_diff_eq!(total, reconstructed, epsilon = 1e-9);
    assert_abs_diff_eq!(total, parts.total, epsilon = 1e-12);
}

#[test]
fn language_embedding_rows_differ_between_languages() {
    let d = dims(BottleneckVariant::Residual, 1);
    let params = Params::<f64>::init(&d, 22).unwrap();
    let e0 = embed_language(0, &params.language_embedding).unwrap();
    let e1 = embed_language(1, &params.language_embedding).unwrap();
    assert!(e0.iter().zip(e1.iter()).any(|(a, b)| a != b));
    assert!(embed_language(99, &params.language_embedding).is_err());
}
