//! Multi-head scaled dot-product attention.
//!
//! Mask semantics: masked key positions receive a large negative score before
//! the softmax. The backward pass optionally accepts an extra gradient on the
//! attention probabilities themselves, which the guided attention loss uses.

use super::{dropout, dropout_backward, softmax_backward_rows, softmax_rows, Linear};
use crate::rng::DetRng;
use crate::scalar::{s, Scalar};
use ndarray::{s as nd_s, Array2};

/// Which (query, key) pairs are allowed to attend.
#[derive(Clone, Copy, Debug)]
pub enum AttnMask<'a> {
    /// Everything attends to everything.
    Full,
    /// Query `t` attends keys `0..=t`.
    Causal,
    /// `true` entries mark padded keys that nothing may attend to.
    PaddedKeys(&'a [bool]),
}

impl AttnMask<'_> {
    fn blocked(&self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::Full => false,
            AttnMask::Causal => key > query,
            AttnMask::PaddedKeys(pad) => pad[key],
        }
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Mha<S: Scalar> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub n_heads: usize,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MhaCache<S: Scalar> {
    q_input: Array2<S>,
    kv_input: Array2<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    /// Attention probabilities per head, pre-dropout.
    pub probs: Vec<Array2<S>>,
    drop_masks: Vec<Option<Array2<S>>>,
    /// Per-head context (dropped probs times values), concatenated.
    context: Array2<S>,
}

impl<S: Scalar> Mha<S> {
    pub fn zeros(d: usize, n_heads: usize) -> Self {
        assert_eq!(d % n_heads, 0, "d must divide into heads");
        Mha {
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            n_heads,
        }
    }

    pub fn init(d: usize, n_heads: usize, rng: &mut DetRng) -> Self {
        assert_eq!(d % n_heads, 0, "d must divide into heads");
        Mha {
            wq: Linear::init(d, d, rng),
            wk: Linear::init(d, d, rng),
            wv: Linear::init(d, d, rng),
            wo: Linear::init(d, d, rng),
            n_heads,
        }
    }

    pub fn d(&self) -> usize {
        self.wq.in_dim()
    }

    /// Forward pass. Returns the output and the cache; attention maps are
    /// `cache.probs` (one `Tq x Tk` row-stochastic matrix per head).
    pub fn forward(
        &self,
        q_input: &Array2<S>,
        kv_input: &Array2<S>,
        mask: AttnMask<'_>,
        p_drop: f64,
        mut rng: Option<&mut DetRng>,
    ) -> (Array2<S>, MhaCache<S>) {
        let d = self.d();
        let dh = d / self.n_heads;
        let scale = s::<S>(1.0 / (dh as f64).sqrt());
        let neg = s::<S>(-1e30);

        let q = self.wq.forward(q_input);
        let k = self.wk.forward(kv_input);
        let v = self.wv.forward(kv_input);

        let tq = q.nrows();
        let tk = k.nrows();
        let mut context = Array2::zeros((tq, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        let mut drop_masks = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = nd_s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols).to_owned();
            let kh = k.slice(cols).to_owned();
            let vh = v.slice(cols).to_owned();
            let mut scores = qh.dot(&kh.t()).mapv(|x| x * scale);
            for t in 0..tq {
                for n in 0..tk {
                    if mask.blocked(t, n) {
                        scores[(t, n)] = neg;
                    }
                }
            }
            let attn = softmax_rows(&scores);
            let (dropped, drop_mask) = dropout(&attn, p_drop, rng.as_deref_mut());
            let ctx_h = dropped.dot(&vh);
            context.slice_mut(cols).assign(&ctx_h);
            probs.push(attn);
            drop_masks.push(drop_mask);
        }
        let out = self.wo.forward(&context);
        let cache = MhaCache {
            q_input: q_input.clone(),
            kv_input: kv_input.clone(),
            q,
            k,
            v,
            probs,
            drop_masks,
            context,
        };
        (out, cache)
    }

    /// Backward pass. `extra_prob_grad` adds a gradient directly on the
    /// pre-dropout attention probabilities (per head). Returns
    /// `(d_q_input, d_kv_input)`.
    pub fn backward(
        &self,
        cache: &MhaCache<S>,
        dy: &Array2<S>,
        extra_prob_grad: Option<&[Array2<S>]>,
        grad: &mut Mha<S>,
    ) -> (Array2<S>, Array2<S>) {
        let d = self.d();
        let dh = d / self.n_heads;
        let scale = s::<S>(1.0 / (dh as f64).sqrt());

        let dcontext = self.wo.backward(&cache.context, dy, &mut grad.wo);

        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.n_heads {
            let cols = nd_s![.., h * dh..(h + 1) * dh];
            let qh = cache.q.slice(cols).to_owned();
            let kh = cache.k.slice(cols).to_owned();
            let vh = cache.v.slice(cols).to_owned();
            let attn = &cache.probs[h];
            let drop_mask = &cache.drop_masks[h];
            let dctx_h = dcontext.slice(cols).to_owned();

            let dropped = match drop_mask {
                Some(m) => attn * m,
                None => attn.clone(),
            };
            // context = dropped . v; head slices are disjoint, one write each
            let ddropped = dctx_h.dot(&vh.t());
            dv.slice_mut(cols).assign(&dropped.t().dot(&dctx_h));
            let mut dattn = dropout_backward(&ddropped, drop_mask);
            if let Some(extra) = extra_prob_grad {
                dattn = &dattn + &extra[h];
            }
            let dscores = softmax_backward_rows(attn, &dattn).mapv(|x| x * scale);
            // Masked scores were constant (-1e30); softmax gave them ~0
            // probability, so their gradient is already ~0.
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
        }

        let dq_input = self.wq.backward(&cache.q_input, &dq, &mut grad.wq);
        let dkv_k = self.wk.backward(&cache.kv_input, &dk, &mut grad.wk);
        let dkv_v = self.wv.backward(&cache.kv_input, &dv, &mut grad.wv);
        (dq_input, dkv_k + dkv_v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_mha(d: usize, heads: usize, seed: u64) -> Mha<f64> {
        let mut rng = DetRng::new(seed, "mha");
        Mha::init(d, heads, &mut rng)
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mha = toy_mha(8, 2, 0);
        let x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 7 + j) as f64 * 0.13).sin());
        let (_, cache) = mha.forward(&x, &x, AttnMask::Full, 0.0, None);
        for head in &cache.probs {
            for row in head.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let mha = toy_mha(8, 2, 1);
        let x = Array2::from_shape_fn((4, 8), |(i, j)| ((i + j) as f64 * 0.31).cos());
        let (_, cache) = mha.forward(&x, &x, AttnMask::Causal, 0.0, None);
        for head in &cache.probs {
            for t in 0..4 {
                for n in (t + 1)..4 {
                    assert!(head[(t, n)].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn padded_keys_receive_no_mass_and_do_not_change_outputs() {
        let mha = toy_mha(8, 2, 2);
        let mut x = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 3 + j) as f64 * 0.17).sin());
        let pad = [false, false, false, true, true];
        let (y1, cache) = mha.forward(&x, &x, AttnMask::PaddedKeys(&pad), 0.0, None);
        for head in &cache.probs {
            for t in 0..5 {
                assert!(head[(t, 3)].abs() < 1e-12);
                assert!(head[(t, 4)].abs() < 1e-12);
            }
        }
        // Changing padded rows must leave non-pad outputs untouched.
        x.row_mut(3).fill(123.0);
        x.row_mut(4).fill(-55.0);
        let (y2, _) = mha.forward(&x, &x, AttnMask::PaddedKeys(&pad), 0.0, None);
        for t in 0..3 {
            for j in 0..8 {
                assert_abs_diff_eq!(y1[(t, j)], y2[(t, j)], epsilon = 1e-12);
            }
        }
    }
}
