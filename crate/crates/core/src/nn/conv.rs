//! 1-D convolution over the time axis (rows), same padding.
//!
//! Input is `T x C_in` with channels as columns; the kernel is stored as one
//! `C_in x C_out` matrix per tap so forward and backward reduce to shifted
//! matrix products.

use super::Linear;
use crate::rng::DetRng;
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, Axis};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<S: Scalar> {
    /// One `C_in x C_out` weight matrix per kernel tap.
    pub taps: Vec<Array2<S>>,
    pub b: Array1<S>,
}

#[derive(Clone, Debug)]
pub struct Conv1dCache<S: Scalar> {
    x: Array2<S>,
}

impl<S: Scalar> Conv1d<S> {
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        Conv1d {
            taps: vec![Array2::zeros((c_in, c_out)); kernel],
            b: Array1::zeros(c_out),
        }
    }

    pub fn init(c_in: usize, c_out: usize, kernel: usize, rng: &mut DetRng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd for same padding");
        let bound = (6.0 / ((c_in + c_out) * kernel) as f64).sqrt();
        let taps = (0..kernel)
            .map(|_| Array2::from_shape_fn((c_in, c_out), |_| s(rng.uniform_in(-bound, bound))))
            .collect();
        Conv1d {
            taps,
            b: Array1::zeros(c_out),
        }
    }

    pub fn kernel(&self) -> usize {
        self.taps.len()
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, Conv1dCache<S>) {
        let t = x.nrows();
        let c_out = self.b.len();
        let half = self.kernel() / 2;
        let mut y = Array2::zeros((t, c_out));
        for (k, tap) in self.taps.iter().enumerate() {
            // y[t] += x[t + k - half] . tap  (zero outside bounds)
            for ti in 0..t {
                let src = ti as isize + k as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let contrib = x.row(src as usize).dot(tap);
                let mut row = y.row_mut(ti);
                row += &contrib;
            }
        }
        y += &self.b;
        (y, Conv1dCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        cache: &Conv1dCache<S>,
        dy: &Array2<S>,
        grad: &mut Conv1d<S>,
    ) -> Array2<S> {
        let t = dy.nrows();
        let half = self.kernel() / 2;
        let mut dx = Array2::zeros(cache.x.raw_dim());
        grad.b = &grad.b + &dy.sum_axis(Axis(0));
        for (k, tap) in self.taps.iter().enumerate() {
            for ti in 0..t {
                let src = ti as isize + k as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                // dW_k += x[src]^T dy[t]; dx[src] += dy[t] W_k^T
                let x_row = cache.x.row(src);
                let dy_row = dy.row(ti);
                for ci in 0..tap.nrows() {
                    for co in 0..tap.ncols() {
                        grad.taps[k][(ci, co)] =
                            grad.taps[k][(ci, co)] + x_row[ci] * dy_row[co];
                    }
                }
                let dxs = dy_row.dot(&tap.t());
                let mut dst = dx.row_mut(src);
                dst += &dxs;
            }
        }
        dx
    }

    /// View taps as one stacked matrix for parameter visitation.
    pub fn tap_as_linear(&self, k: usize) -> Linear<S> {
        Linear {
            w: self.taps[k].clone(),
            b: Array1::zeros(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut conv = Conv1d::<f64>::zeros(2, 2, 3);
        conv.taps[1] = array![[1.0, 0.0], [0.0, 1.0]]; // center tap = identity
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let (y, _) = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn shifted_kernel_delays_signal_with_zero_padding() {
        let mut conv = Conv1d::<f64>::zeros(1, 1, 3);
        conv.taps[0] = array![[1.0]]; // y[t] = x[t - 1]
        let x = array![[1.0], [2.0], [3.0]];
        let (y, _) = conv.forward(&x);
        assert_eq!(y, array![[0.0], [1.0], [2.0]]);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = DetRng::new(3, "conv");
        let conv = Conv1d::<f64>::init(3, 2, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 5 + j) as f64 * 0.21).sin());
        let weights = Array2::from_shape_fn((5, 2), |(i, j)| ((i + 2 * j) as f64 * 0.37).cos());
        let loss = |c: &Conv1d<f64>, x: &Array2<f64>| -> f64 {
            let (y, _) = c.forward(x);
            (&y * &weights).sum()
        };

        let (_, cache) = conv.forward(&x);
        let mut grad = Conv1d::zeros(3, 2, 3);
        let dx = conv.backward(&cache, &weights, &mut grad);

        let eps = 1e-6;
        for k in 0..3 {
            for ci in 0..3 {
                for co in 0..2 {
                    let mut cp = conv.clone();
                    cp.taps[k][(ci, co)] += eps;
                    let mut cm = conv.clone();
                    cm.taps[k][(ci, co)] -= eps;
                    let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
                    assert_abs_diff_eq!(grad.taps[k][(ci, co)], fd, epsilon = 1e-6);
                }
            }
        }
        for i in 0..5 {
            for j in 0..3 {
                let mut xp = x.clone();
                xp[(i, j)] += eps;
                let mut xm = x.clone();
                xm[(i, j)] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
                assert_abs_diff_eq!(dx[(i, j)], fd, epsilon = 1e-6);
            }
        }
    }
}
